// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include "issl/numcore/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "issl/numcore/errors.hpp"

namespace issl::ag {

const Matrix& Var::value() const { return graph_->value_of(id_); }
Matrix Var::grad() const { return graph_->grad_of(id_); }

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::input(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Graph::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  return push(std::move(n));
}

Var Graph::record(Matrix value, std::initializer_list<Var> parents, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(fn));
}

Var Graph::record(Matrix value, std::span<const Var> parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (const Var& p : parents) {
    if (p.graph_ != this) throw ContractError("autograd: operand belongs to another graph");
    n.requires_grad = n.requires_grad || requires_grad(p);
  }
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

Matrix& Graph::grad_ref(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v.id_)];
  if (!n.has_grad) {
    n.grad = Matrix(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

Matrix Graph::grad_of(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.has_grad) return n.grad;
  return Matrix(n.value.rows(), n.value.cols());
}

void Graph::backward(Var root) {
  if (root.graph_ != this) throw ContractError("backward: root belongs to another graph");
  const Matrix& rv = root.value();
  if (rv.rows() != 1 || rv.cols() != 1)
    throw ContractError("backward: root must be scalar (1x1), got " + rv.shape_string());
  grad_ref(root)(0, 0) += 1.0;
  for (int i = root.id_; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || !n.has_grad) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param != nullptr) n.param->grad += n.grad;
  }
}

namespace {

void need(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}


}  // namespace

Var matmul(Var a, Var b) {
  Graph& g = a.graph();
  return g.record(issl::matmul(a.value(), b.value()), {a, b},
                  [a, b](Graph& g, const Matrix& go) {
                    if (g.requires_grad(a)) matmul_nt_acc(go, b.value(), g.grad_ref(a));
                    if (g.requires_grad(b)) matmul_tn_acc(a.value(), go, g.grad_ref(b));
                  });
}

Var matmul_nt(Var a, Var b) {
  Graph& g = a.graph();
  return g.record(issl::matmul_nt(a.value(), b.value()), {a, b},
                  [a, b](Graph& g, const Matrix& go) {
                    if (g.requires_grad(a)) matmul_acc(go, b.value(), g.grad_ref(a));
                    if (g.requires_grad(b)) matmul_tn_acc(go, a.value(), g.grad_ref(b));
                  });
}

Var add(Var a, Var b) {
  Graph& g = a.graph();
  return g.record(a.value() + b.value(), {a, b}, [a, b](Graph& g, const Matrix& go) {
    if (g.requires_grad(a)) g.grad_ref(a) += go;
    if (g.requires_grad(b)) g.grad_ref(b) += go;
  });
}

Var sub(Var a, Var b) {
  Graph& g = a.graph();
  return g.record(a.value() - b.value(), {a, b}, [a, b](Graph& g, const Matrix& go) {
    if (g.requires_grad(a)) g.grad_ref(a) += go;
    if (g.requires_grad(b)) g.grad_ref(b) -= go;
  });
}

Var hadamard(Var a, Var b) {
  Graph& g = a.graph();
  return g.record(issl::hadamard(a.value(), b.value()), {a, b},
                  [a, b](Graph& g, const Matrix& go) {
                    if (g.requires_grad(a)) g.grad_ref(a) += issl::hadamard(go, b.value());
                    if (g.requires_grad(b)) g.grad_ref(b) += issl::hadamard(go, a.value());
                  });
}

Var scale(Var a, double s) {
  Graph& g = a.graph();
  return g.record(a.value() * s, {a}, [a, s](Graph& g, const Matrix& go) {
    Matrix& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] += s * go.data()[i];
  });
}

Var add_row(Var a, Var bias) {
  const Matrix& av = a.value();
  const Matrix& bv = bias.value();
  need(bv.rows() == 1 && bv.cols() == av.cols(),
       "add_row: bias " + bv.shape_string() + " does not broadcast over " + av.shape_string());
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < out.cols(); ++c) row[c] += bv(0, c);
  }
  Graph& g = a.graph();
  return g.record(std::move(out), {a, bias}, [a, bias](Graph& g, const Matrix& go) {
    if (g.requires_grad(a)) g.grad_ref(a) += go;
    if (g.requires_grad(bias)) {
      Matrix& gb = g.grad_ref(bias);
      for (std::size_t r = 0; r < go.rows(); ++r) {
        auto row = go.row(r);
        for (std::size_t c = 0; c < go.cols(); ++c) gb(0, c) += row[c];
      }
    }
  });
}

Var gelu(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  // The derivative is formed here from the same erf/exp values, so the
  // backward pass is a single multiply.
  Matrix deriv(x.rows(), x.cols());
  Eigen::Map<const Eigen::ArrayXd> xv(x.data().data(), static_cast<Eigen::Index>(x.size()));
  // Aligned temporary so the vectorized exp is independent of addresses.
  const Eigen::ArrayXd pdf = (-0.5 * xv.square()).exp() * 0.3989422804014327;
  auto o = out.data();
  auto d = deriv.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double cdf = 0.5 * (1.0 + std::erf(x.data()[i] * M_SQRT1_2));
    o[i] = x.data()[i] * cdf;
    d[i] = cdf + x.data()[i] * pdf[static_cast<Eigen::Index>(i)];
  }
  Graph& g = a.graph();
  return g.record(std::move(out), {a}, [a, dd = std::move(deriv)](Graph& g, const Matrix& go) {
    Matrix& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] += go.data()[i] * dd.data()[i];
  });
}

Var tanh(Var a) {
  Matrix out = a.value();
  for (double& v : out.data()) v = std::tanh(v);
  Matrix saved = out;
  Graph& g = a.graph();
  return g.record(std::move(out), {a}, [a, y = std::move(saved)](Graph& g, const Matrix& go) {
    Matrix& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i)
      ga.data()[i] += go.data()[i] * (1.0 - y.data()[i] * y.data()[i]);
  });
}

Var sum(Var a) {
  Graph& g = a.graph();
  return g.record(Matrix(1, 1, issl::sum(a.value())), {a}, [a](Graph& g, const Matrix& go) {
    Matrix& ga = g.grad_ref(a);
    for (double& v : ga.data()) v += go(0, 0);
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw DimensionError("mean: empty operand");
  return scale(sum(a), 1.0 / n);
}

Var mean_rows(Var a) {
  const Matrix& av = a.value();
  if (av.rows() == 0) throw DimensionError("mean_rows: empty operand");
  Graph& g = a.graph();
  return g.record(column_means(av), {a}, [a](Graph& g, const Matrix& go) {
    Matrix& ga = g.grad_ref(a);
    const double inv = 1.0 / static_cast<double>(ga.rows());
    for (std::size_t r = 0; r < ga.rows(); ++r) {
      auto row = ga.row(r);
      for (std::size_t c = 0; c < ga.cols(); ++c) row[c] += go(0, c) * inv;
    }
  });
}

Var softmax_rows(Var a) {
  Matrix p = issl::softmax_rows(a.value());
  Graph& g = a.graph();
  Matrix saved = p;
  return g.record(std::move(p), {a}, [a, saved = std::move(saved)](Graph& g, const Matrix& go) {
    Matrix& ga = g.grad_ref(a);
    for (std::size_t r = 0; r < ga.rows(); ++r) {
      auto pr = saved.row(r);
      auto gr = go.row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < pr.size(); ++c) dot += pr[c] * gr[c];
      auto out = ga.row(r);
      for (std::size_t c = 0; c < pr.size(); ++c) out[c] += pr[c] * (gr[c] - dot);
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Matrix& xv = x.value();
  const std::size_t n = xv.rows();
  const std::size_t d = xv.cols();
  need(gamma.value().rows() == 1 && gamma.value().cols() == d && beta.value().same_shape(gamma.value()),
       "layer_norm: gain/bias must be 1x" + std::to_string(d));
  Matrix xhat(n, d);
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = xv.row(r);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    auto h = xhat.row(r);
    for (std::size_t c = 0; c < d; ++c) h[c] = (row[c] - mu) * inv_std[r];
  }
  Matrix out(n, d);
  const Matrix& gv = gamma.value();
  const Matrix& bv = beta.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) = xhat(r, c) * gv(0, c) + bv(0, c);
  Graph& g = x.graph();
  return g.record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g,
                                                                             const Matrix& go) {
        const std::size_t n = xhat.rows();
        const std::size_t d = xhat.cols();
        const Matrix& gv = gamma.value();
        if (g.requires_grad(gamma) || g.requires_grad(beta)) {
          Matrix dg(1, d), db(1, d);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) {
              dg(0, c) += go(r, c) * xhat(r, c);
              db(0, c) += go(r, c);
            }
          if (g.requires_grad(gamma)) g.grad_ref(gamma) += dg;
          if (g.requires_grad(beta)) g.grad_ref(beta) += db;
        }
        if (!g.requires_grad(x)) return;
        Matrix& gx = g.grad_ref(x);
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < n; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            dxhat[c] = go(r, c) * gv(0, c);
            m1 += dxhat[c];
            m2 += dxhat[c] * xhat(r, c);
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          for (std::size_t c = 0; c < d; ++c)
            gx(r, c) += inv_std[r] * (dxhat[c] - m1 - xhat(r, c) * m2);
        }
      });
}

Var normalize_rows(Var a) {
  const Matrix& av = a.value();
  Matrix y = av;
  std::vector<double> norms(av.rows());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double s = 0.0;
    for (double v : av.row(r)) s += v * v;
    if (s == 0.0)
      throw DegenerateInputError("normalize_rows: row " + std::to_string(r) + " is zero");
    norms[r] = std::sqrt(s);
    for (double& v : y.row(r)) v /= norms[r];
  }
  Matrix saved = y;
  Graph& g = a.graph();
  return g.record(std::move(y), {a},
                  [a, yv = std::move(saved), norms = std::move(norms)](Graph& g, const Matrix& go) {
                    Matrix& ga = g.grad_ref(a);
                    for (std::size_t r = 0; r < yv.rows(); ++r) {
                      auto yr = yv.row(r);
                      auto gr = go.row(r);
                      double dot = 0.0;
                      for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * gr[c];
                      auto out = ga.row(r);
                      for (std::size_t c = 0; c < yr.size(); ++c)
                        out[c] += (gr[c] - yr[c] * dot) / norms[r];
                    }
                  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Matrix& av = a.value();
  need(begin + count <= av.cols(), "slice_cols: columns [" + std::to_string(begin) + ", " +
                                       std::to_string(begin + count) + ") outside " +
                                       av.shape_string());
  Matrix out(av.rows(), count);
  for (std::size_t r = 0; r < av.rows(); ++r)
    std::copy_n(av.row(r).begin() + static_cast<std::ptrdiff_t>(begin), count, out.row(r).begin());
  Graph& g = a.graph();
  return g.record(std::move(out), {a}, [a, begin, count](Graph& g, const Matrix& go) {
    Matrix& ga = g.grad_ref(a);
    for (std::size_t r = 0; r < go.rows(); ++r)
      for (std::size_t c = 0; c < count; ++c) ga(r, begin + c) += go(r, c);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  const std::size_t rows = parts.front().value().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    need(p.value().rows() == rows, "concat_cols: row mismatch " +
                                       parts.front().value().shape_string() + " and " +
                                       p.value().shape_string());
    cols += p.value().cols();
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Matrix& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(pv.row(r).begin(), pv.row(r).end(),
                out.row(r).begin() + static_cast<std::ptrdiff_t>(off));
    off += pv.cols();
  }
  Graph& g = parts.front().graph();
  std::vector<Var> ps(parts.begin(), parts.end());
  return g.record(std::move(out), parts, [ps](Graph& g, const Matrix& go) {
    std::size_t off = 0;
    for (const Var& p : ps) {
      const std::size_t w = p.value().cols();
      if (g.requires_grad(p)) {
        Matrix& gp = g.grad_ref(p);
        for (std::size_t r = 0; r < go.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) gp(r, c) += go(r, off + c);
      }
      off += w;
    }
  });
}

Var gather_rows(Var a, std::span<const std::size_t> idx) {
  Matrix out = issl::gather_rows(a.value(), idx);
  Graph& g = a.graph();
  std::vector<std::size_t> ids(idx.begin(), idx.end());
  return g.record(std::move(out), {a}, [a, ids = std::move(ids)](Graph& g, const Matrix& go) {
    Matrix& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto src = go.row(i);
      auto dst = ga.row(ids[i]);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

Var replace_rows(Var a, const std::vector<bool>& mask, Var row) {
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  need(mask.size() == av.rows(), "replace_rows: mask length " + std::to_string(mask.size()) +
                                     " vs " + av.shape_string());
  need(rv.rows() == 1 && rv.cols() == av.cols(),
       "replace_rows: row " + rv.shape_string() + " vs " + av.shape_string());
  Matrix out = av;
  for (std::size_t r = 0; r < av.rows(); ++r)
    if (mask[r]) std::copy(rv.row(0).begin(), rv.row(0).end(), out.row(r).begin());
  Graph& g = a.graph();
  return g.record(std::move(out), {a, row}, [a, row, mask](Graph& g, const Matrix& go) {
    const bool ga_needed = g.requires_grad(a);
    const bool gr_needed = g.requires_grad(row);
    for (std::size_t r = 0; r < go.rows(); ++r) {
      auto src = go.row(r);
      if (mask[r]) {
        if (gr_needed) {
          auto dst = g.grad_ref(row).row(0);
          for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
        }
      } else if (ga_needed) {
        auto dst = g.grad_ref(a).row(r);
        for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
      }
    }
  });
}

std::size_t conv_output_length(std::size_t length, std::size_t kernel, std::size_t stride) {
  if (length < kernel) return 0;
  return (length - kernel) / stride + 1;
}

Var im2col(Var x, const Segments& segments, std::size_t kernel, std::size_t stride,
           Segments* out_segments) {
  const Matrix& xv = x.value();
  const std::size_t ch = xv.cols();
  if (kernel == 0 || stride == 0) throw ConfigError("im2col: kernel and stride must be positive");
  need(std::accumulate(segments.begin(), segments.end(), std::size_t{0}) == xv.rows(),
       "im2col: segment lengths do not cover " + xv.shape_string());
  Segments outs;
  std::size_t total = 0;
  for (std::size_t len : segments) {
    const std::size_t t = conv_output_length(len, kernel, stride);
    if (t == 0)
      throw EmptyFeatureError("im2col: sequence of length " + std::to_string(len) +
                              " is shorter than kernel " + std::to_string(kernel));
    outs.push_back(t);
    total += t;
  }
  Matrix out(total, kernel * ch);
  std::size_t in_off = 0, out_row = 0;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    for (std::size_t t = 0; t < outs[s]; ++t, ++out_row) {
      auto dst = out.row(out_row);
      const std::size_t first = in_off + t * stride;
      for (std::size_t j = 0; j < kernel; ++j) {
        auto src = xv.row(first + j);
        std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(j * ch));
      }
    }
    in_off += segments[s];
  }
  if (out_segments != nullptr) *out_segments = outs;
  Graph& g = x.graph();
  return g.record(std::move(out), {x},
                  [x, segments, outs, kernel, stride, ch](Graph& g, const Matrix& go) {
                    Matrix& gx = g.grad_ref(x);
                    std::size_t in_off = 0, out_row = 0;
                    for (std::size_t s = 0; s < segments.size(); ++s) {
                      for (std::size_t t = 0; t < outs[s]; ++t, ++out_row) {
                        auto src = go.row(out_row);
                        const std::size_t first = in_off + t * stride;
                        for (std::size_t j = 0; j < kernel; ++j) {
                          auto dst = gx.row(first + j);
                          for (std::size_t c = 0; c < ch; ++c) dst[c] += src[j * ch + c];
                        }
                      }
                      in_off += segments[s];
                    }
                  });
}

namespace {

Matrix block(const Matrix& m, std::size_t r0, std::size_t nr, std::size_t c0, std::size_t nc) {
  Matrix out(nr, nc);
  for (std::size_t r = 0; r < nr; ++r)
    std::copy_n(m.row(r0 + r).begin() + static_cast<std::ptrdiff_t>(c0), nc, out.row(r).begin());
  return out;
}

void add_block(Matrix& m, const Matrix& b, std::size_t r0, std::size_t c0) {
  for (std::size_t r = 0; r < b.rows(); ++r) {
    auto dst = m.row(r0 + r);
    auto src = b.row(r);
    for (std::size_t c = 0; c < b.cols(); ++c) dst[c0 + c] += src[c];
  }
}

}  // namespace

Var segment_attention(Var q, Var k, Var v, const Segments& segments, std::size_t heads,
                      std::vector<Matrix>* probs_out) {
  const Matrix& qv = q.value();
  const std::size_t d = qv.cols();
  need(k.value().same_shape(qv) && v.value().same_shape(qv),
       "segment_attention: q/k/v shapes " + qv.shape_string() + ", " +
           k.value().shape_string() + ", " + v.value().shape_string());
  if (heads == 0 || d % heads != 0)
    throw ConfigError("segment_attention: heads must divide model dim");
  need(std::accumulate(segments.begin(), segments.end(), std::size_t{0}) == qv.rows(),
       "segment_attention: segments do not cover " + qv.shape_string());
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix out(qv.rows(), d);
  std::vector<Matrix> probs;
  probs.reserve(segments.size() * heads);
  std::size_t off = 0;
  for (std::size_t len : segments) {
    for (std::size_t h = 0; h < heads; ++h) {
      Matrix qh = block(qv, off, len, h * dh, dh);
      Matrix kh = block(k.value(), off, len, h * dh, dh);
      Matrix vh = block(v.value(), off, len, h * dh, dh);
      Matrix scores = issl::matmul_nt(qh, kh);
      scores *= inv_sqrt;
      Matrix p = issl::softmax_rows(scores);
      add_block(out, issl::matmul(p, vh), off, h * dh);
      probs.push_back(std::move(p));
    }
    off += len;
  }
  if (probs_out != nullptr) *probs_out = probs;
  Graph& g = q.graph();
  return g.record(
      std::move(out), {q, k, v},
      [q, k, v, segments, heads, dh, inv_sqrt, probs = std::move(probs)](Graph& g,
                                                                         const Matrix& go) {
        const bool need_q = g.requires_grad(q);
        const bool need_k = g.requires_grad(k);
        const bool need_v = g.requires_grad(v);
        std::size_t off = 0, pi = 0;
        for (std::size_t len : segments) {
          for (std::size_t h = 0; h < heads; ++h, ++pi) {
            const Matrix& p = probs[pi];
            Matrix dout = block(go, off, len, h * dh, dh);
            Matrix vh = block(v.value(), off, len, h * dh, dh);
            if (need_v) add_block(g.grad_ref(v), issl::matmul_tn(p, dout), off, h * dh);
            if (!need_q && !need_k) continue;
            Matrix dp = issl::matmul_nt(dout, vh);
            Matrix ds(len, len);
            for (std::size_t r = 0; r < len; ++r) {
              auto pr = p.row(r);
              auto dr = dp.row(r);
              double dot = 0.0;
              for (std::size_t c = 0; c < len; ++c) dot += pr[c] * dr[c];
              auto sr = ds.row(r);
              for (std::size_t c = 0; c < len; ++c) sr[c] = pr[c] * (dr[c] - dot) * inv_sqrt;
            }
            if (need_q)
              add_block(g.grad_ref(q), issl::matmul(ds, block(k.value(), off, len, h * dh, dh)),
                        off, h * dh);
            if (need_k)
              add_block(g.grad_ref(k),
                        issl::matmul_tn(ds, block(q.value(), off, len, h * dh, dh)), off, h * dh);
          }
          off += len;
        }
      });
}

Var candidate_cross_entropy(Var logits, const std::vector<std::vector<std::size_t>>& candidates,
                            const std::vector<std::size_t>& target_pos,
                            const std::vector<double>& weights) {
  const Matrix& lv = logits.value();
  need(candidates.size() == lv.rows() && target_pos.size() == lv.rows() &&
           weights.size() == lv.rows(),
       "candidate_cross_entropy: per-row inputs do not match " + lv.shape_string());
  double total = 0.0;
  std::vector<std::vector<double>> soft(lv.rows());
  for (std::size_t i = 0; i < lv.rows(); ++i) {
    const auto& cand = candidates[i];
    if (cand.empty() || target_pos[i] >= cand.size())
      throw ContractError("candidate_cross_entropy: target not among candidates in row " +
                          std::to_string(i));
    double mx = -INFINITY;
    for (std::size_t c : cand) {
      if (c >= lv.cols())
        throw DimensionError("candidate_cross_entropy: candidate column " + std::to_string(c) +
                             " outside " + lv.shape_string());
      mx = std::max(mx, lv(i, c));
    }
    auto& s = soft[i];
    s.resize(cand.size());
    for (std::size_t j = 0; j < cand.size(); ++j) s[j] = std::exp(lv(i, cand[j]) - mx);
    // Summing in ascending column order makes the value independent of the
    // order in which candidates are listed.
    std::vector<std::size_t> order(cand.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return cand[a] < cand[b]; });
    double z = 0.0;
    for (std::size_t j : order) z += s[j];
    for (double& x : s) x /= z;
    total += weights[i] * (mx + std::log(z) - lv(i, cand[target_pos[i]]));
  }
  Graph& g = logits.graph();
  return g.record(Matrix(1, 1, total), {logits},
                  [logits, candidates, target_pos, weights, soft = std::move(soft)](
                      Graph& g, const Matrix& go) {
                    Matrix& gl = g.grad_ref(logits);
                    const double up = go(0, 0);
                    for (std::size_t i = 0; i < candidates.size(); ++i) {
                      const double w = weights[i] * up;
                      const auto& cand = candidates[i];
                      for (std::size_t j = 0; j < cand.size(); ++j) gl(i, cand[j]) += w * soft[i][j];
                      gl(i, cand[target_pos[i]]) -= w;
                    }
                  });
}

namespace {

Matrix group_softmax_value(const Matrix& x, std::size_t groups) {
  const std::size_t vg = x.cols() / groups;
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t c0 = gi * vg;
      double mx = -INFINITY;
      for (std::size_t c = 0; c < vg; ++c) mx = std::max(mx, x(r, c0 + c));
      double z = 0.0;
      for (std::size_t c = 0; c < vg; ++c) {
        out(r, c0 + c) = std::exp(x(r, c0 + c) - mx);
        z += out(r, c0 + c);
      }
      for (std::size_t c = 0; c < vg; ++c) out(r, c0 + c) /= z;
    }
  }
  return out;
}

// Adds scale * J_softmax^T go into gx, group by group.
void group_softmax_backward(const Matrix& p, const Matrix& go, std::size_t groups, double scale,
                            Matrix& gx) {
  const std::size_t vg = p.cols() / groups;
  for (std::size_t r = 0; r < p.rows(); ++r) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t c0 = gi * vg;
      double dot = 0.0;
      for (std::size_t c = 0; c < vg; ++c) dot += p(r, c0 + c) * go(r, c0 + c);
      for (std::size_t c = 0; c < vg; ++c)
        gx(r, c0 + c) += scale * p(r, c0 + c) * (go(r, c0 + c) - dot);
    }
  }
}

void check_groups(const Matrix& m, std::size_t groups, const char* op) {
  if (groups == 0 || m.cols() % groups != 0)
    throw DimensionError(std::string(op) + ": " + std::to_string(groups) +
                         " groups do not divide " + m.shape_string());
}

}  // namespace

Var group_softmax(Var logits, std::size_t groups) {
  check_groups(logits.value(), groups, "group_softmax");
  Matrix p = group_softmax_value(logits.value(), groups);
  Matrix saved = p;
  Graph& g = logits.graph();
  return g.record(std::move(p), {logits},
                  [logits, groups, saved = std::move(saved)](Graph& g, const Matrix& go) {
                    group_softmax_backward(saved, go, groups, 1.0, g.grad_ref(logits));
                  });
}

Var gumbel_softmax(Var logits, const Matrix& noise, double tau, std::size_t groups, bool hard) {
  if (!(tau > 0.0)) throw ConfigError("gumbel_softmax: temperature must be positive");
  const Matrix& lv = logits.value();
  require_same_shape(lv, noise, "gumbel_softmax");
  check_groups(lv, groups, "gumbel_softmax");
  Matrix z = lv + noise;
  z *= 1.0 / tau;
  Matrix soft = group_softmax_value(z, groups);
  Matrix out = soft;
  if (hard) {
    const std::size_t vg = lv.cols() / groups;
    for (std::size_t r = 0; r < out.rows(); ++r) {
      for (std::size_t gi = 0; gi < groups; ++gi) {
        const std::size_t c0 = gi * vg;
        std::size_t best = 0;
        for (std::size_t c = 1; c < vg; ++c)
          if (z(r, c0 + c) > z(r, c0 + best)) best = c;
        for (std::size_t c = 0; c < vg; ++c) out(r, c0 + c) = c == best ? 1.0 : 0.0;
      }
    }
  }
  Graph& g = logits.graph();
  return g.record(std::move(out), {logits},
                  [logits, groups, tau, soft = std::move(soft)](Graph& g, const Matrix& go) {
                    group_softmax_backward(soft, go, groups, 1.0 / tau, g.grad_ref(logits));
                  });
}

Var diversity_loss(Var mean_probs, std::size_t groups) {
  const Matrix& pv = mean_probs.value();
  if (pv.rows() != 1) throw DimensionError("diversity_loss: expected one row, got " + pv.shape_string());
  check_groups(pv, groups, "diversity_loss");
  const std::size_t vg = pv.cols() / groups;
  const double total = static_cast<double>(pv.cols());
  std::vector<double> perplexity(groups);
  double acc = 0.0;
  for (std::size_t gi = 0; gi < groups; ++gi) {
    double h = 0.0;
    for (std::size_t c = 0; c < vg; ++c) {
      const double p = pv(0, gi * vg + c);
      if (p > 0.0) h -= p * std::log(p);
    }
    perplexity[gi] = std::exp(h);
    acc += perplexity[gi];
  }
  Graph& g = mean_probs.graph();
  return g.record(Matrix(1, 1, (total - acc) / total), {mean_probs},
                  [mean_probs, groups, vg, total, perplexity = std::move(perplexity)](
                      Graph& g, const Matrix& go) {
                    const Matrix& pv = mean_probs.value();
                    Matrix& gp = g.grad_ref(mean_probs);
                    for (std::size_t gi = 0; gi < groups; ++gi) {
                      for (std::size_t c = 0; c < vg; ++c) {
                        const double p = std::max(pv(0, gi * vg + c), 1e-300);
                        // dH/dp = -(log p + 1)
                        gp(0, gi * vg + c) +=
                            go(0, 0) * (-perplexity[gi] / total) * (-(std::log(p) + 1.0));
                      }
                    }
                  });
}

}  // namespace issl::ag
