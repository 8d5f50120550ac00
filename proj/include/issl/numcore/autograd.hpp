// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

// Reverse-mode gradients over Matrix values.
//
// A Graph is a tape: every operation appends a node holding its value and a
// closure that pushes the node's gradient into its parents. Creation order is
// a topological order, so backward() walks the tape once in reverse. Graphs
// are built fresh for every training step and discarded afterwards.

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "issl/numcore/matrix.hpp"

namespace issl::ag {

// Trainable tensor living outside any graph.
struct Parameter {
  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() { grad = Matrix(value.rows(), value.cols()); }

  std::string name;
  Matrix value;
  Matrix grad;
};

class Graph;

class Var {
 public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const { return *graph_; }
  int id() const { return id_; }
  const Matrix& value() const;
  // Gradient after backward(); a zero matrix if nothing reached this node.
  Matrix grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Graph;
  Var(Graph* g, int id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Matrix& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaf that never receives a gradient.
  Var constant(Matrix value);
  // Leaf that receives a gradient (inspect via Var::grad()).
  Var input(Matrix value);
  // Leaf bound to a parameter; backward() adds into p.grad.
  Var param(Parameter& p);

  // Root must be 1x1; throws ContractError otherwise.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

  // Operation plumbing.
  Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn fn);
  Var record(Matrix value, std::span<const Var> parents, BackwardFn fn);
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id_)].requires_grad; }
  // Gradient buffer of v, allocated as zeros on first use.
  Matrix& grad_ref(Var v);
  const Matrix& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  Matrix grad_of(int id) const;

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };
  Var push(Node node);
  std::deque<Node> nodes_;
};

using Segments = std::vector<std::size_t>;

// Elementwise and linear algebra.
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
Var add_row(Var a, Var bias);  // bias is 1 x cols, broadcast over rows
Var gelu(Var a);
Var tanh(Var a);
Var sum(Var a);
Var mean(Var a);
Var mean_rows(Var a);  // 1 x cols

// Row-wise transforms.
Var softmax_rows(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var normalize_rows(Var a);  // unit L2 rows; zero rows throw DegenerateInputError

// Structural.
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(Var a, std::span<const std::size_t> idx);
// Rows with mask[r] set are replaced by `row` (1 x cols).
Var replace_rows(Var a, const std::vector<bool>& mask, Var row);

// Strided 1-D convolution patches. x holds the concatenated rows of several
// sequences whose lengths are `segments`; each output row concatenates
// `kernel` consecutive input rows. Output lengths go to *out_segments.
Var im2col(Var x, const Segments& segments, std::size_t kernel, std::size_t stride,
           Segments* out_segments);
std::size_t conv_output_length(std::size_t length, std::size_t kernel, std::size_t stride);

// Multi-head scaled dot-product attention restricted to each segment.
// q, k, v are N x d; heads must divide d. If probs_out is set it receives
// one T x T attention matrix per (segment, head), segment-major.
Var segment_attention(Var q, Var k, Var v, const Segments& segments, std::size_t heads,
                      std::vector<Matrix>* probs_out = nullptr);

// sum_i w_i * -log softmax(logits[i, cand_i])[target_i] where cand_i lists
// column indices (duplicates allowed) and target_i indexes into cand_i.
Var candidate_cross_entropy(Var logits, const std::vector<std::vector<std::size_t>>& candidates,
                            const std::vector<std::size_t>& target_pos,
                            const std::vector<double>& weights);

// Softmax within each of `groups` equal column blocks.
Var group_softmax(Var logits, std::size_t groups);
// group_softmax((logits + noise) / tau). With hard, the forward value is the
// one-hot argmax per group while the gradient is that of the soft path.
Var gumbel_softmax(Var logits, const Matrix& noise, double tau, std::size_t groups, bool hard);
// (G*V - sum_g exp(H(p_g))) / (G*V) for a 1 x (G*V) row of group distributions.
Var diversity_loss(Var mean_probs, std::size_t groups);

}  // namespace issl::ag
