// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include "issl/features/mfcc.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <memory>

#include "issl/numcore/errors.hpp"

namespace issl {

namespace {

double hz_to_mel(double hz) { return 1127.0 * std::log(1.0 + hz / 700.0); }

double nyquist_or(double high, int sample_rate) {
  return high > 0.0 ? high : 0.5 * sample_rate;
}

// Real-to-complex transform of fixed size, owning its plan and buffers.
class RealFft {
 public:
  explicit RealFft(std::size_t n)
      : n_(n),
        in_(fftw_alloc_real(n)),
        out_(fftw_alloc_complex(n / 2 + 1)),
        plan_(fftw_plan_dft_r2c_1d(static_cast<int>(n), in_, out_, FFTW_ESTIMATE)) {}
  ~RealFft() {
    fftw_destroy_plan(plan_);
    fftw_free(in_);
    fftw_free(out_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_; }

  // Magnitudes of bins 0..n/2.
  void magnitudes(std::vector<double>& mag) {
    fftw_execute(plan_);
    mag.resize(n_ / 2 + 1);
    for (std::size_t k = 0; k < mag.size(); ++k) mag[k] = std::hypot(out_[k][0], out_[k][1]);
  }

 private:
  std::size_t n_;
  double* in_;
  fftw_complex* out_;
  fftw_plan plan_;
};

}  // namespace

std::size_t window_samples(const FeatureConfig& cfg, int sample_rate) {
  return static_cast<std::size_t>(std::lround(cfg.window_ms * 1e-3 * sample_rate));
}

std::size_t hop_samples(const FeatureConfig& cfg, int sample_rate) {
  return static_cast<std::size_t>(std::lround(cfg.hop_ms * 1e-3 * sample_rate));
}

std::size_t mfcc_frame_count(std::size_t num_samples, const FeatureConfig& cfg, int sample_rate) {
  const std::size_t w = window_samples(cfg, sample_rate);
  const std::size_t h = hop_samples(cfg, sample_rate);
  if (num_samples < w || h == 0) return 0;
  return (num_samples - w) / h + 1;
}

std::size_t fft_size(std::size_t window) {
  std::size_t n = 1;
  while (n < window) n <<= 1;
  return n;
}

std::vector<double> analysis_window(std::size_t length) {
  std::vector<double> w(length, 1.0);
  if (length < 2) return w;
  for (std::size_t i = 0; i < length; ++i)
    w[i] = 0.54 - 0.46 * std::cos(2.0 * M_PI * static_cast<double>(i) /
                                  static_cast<double>(length - 1));
  return w;
}

Matrix mel_filterbank(const FeatureConfig& cfg, int sample_rate, std::size_t n_fft) {
  const double high = nyquist_or(cfg.high_freq, sample_rate);
  if (high > 0.5 * sample_rate + 1e-9)
    throw ConfigError("mel_filterbank: top edge " + std::to_string(high) +
                      " Hz exceeds Nyquist for sample rate " + std::to_string(sample_rate));
  if (cfg.low_freq < 0.0 || cfg.low_freq >= high)
    throw ConfigError("mel_filterbank: need 0 <= low_freq < high_freq");
  if (cfg.num_filters < 1) throw ConfigError("mel_filterbank: num_filters must be positive");
  const std::size_t bins = n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(cfg.low_freq);
  const double mel_hi = hz_to_mel(high);
  const double step = (mel_hi - mel_lo) / (cfg.num_filters + 1);
  Matrix fb(static_cast<std::size_t>(cfg.num_filters), bins);
  for (int m = 0; m < cfg.num_filters; ++m) {
    const double left = mel_lo + m * step;
    const double center = left + step;
    const double right = center + step;
    for (std::size_t k = 0; k < bins; ++k) {
      const double mel = hz_to_mel(static_cast<double>(k) * sample_rate / static_cast<double>(n_fft));
      double w = 0.0;
      if (mel > left && mel <= center)
        w = (mel - left) / (center - left);
      else if (mel > center && mel < right)
        w = (right - mel) / (right - center);
      fb(static_cast<std::size_t>(m), k) = w;
    }
  }
  return fb;
}

Matrix dct_matrix(int num_ceps, int num_filters) {
  if (num_ceps > num_filters)
    throw ConfigError("dct_matrix: num_ceps cannot exceed num_filters");
  Matrix d(static_cast<std::size_t>(num_ceps), static_cast<std::size_t>(num_filters));
  const double n = num_filters;
  for (int i = 0; i < num_ceps; ++i) {
    const double norm = i == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
    for (int m = 0; m < num_filters; ++m)
      d(static_cast<std::size_t>(i), static_cast<std::size_t>(m)) =
          norm * std::cos(M_PI * i * (m + 0.5) / n);
  }
  return d;
}

FeatureSequence mfcc(const std::vector<double>& samples, int sample_rate,
                     const FeatureConfig& cfg) {
  if (sample_rate <= 0) throw ConfigError("mfcc: sample rate must be positive");
  const std::size_t win = window_samples(cfg, sample_rate);
  const std::size_t hop = hop_samples(cfg, sample_rate);
  if (win == 0 || hop == 0) throw ConfigError("mfcc: window and hop must span at least one sample");
  const std::size_t frames = mfcc_frame_count(samples.size(), cfg, sample_rate);
  if (frames == 0)
    throw EmptyFeatureError("mfcc: " + std::to_string(samples.size()) +
                            " samples is shorter than one " + std::to_string(win) +
                            "-sample window");
  const std::size_t n_fft = fft_size(win);
  const Matrix fb = mel_filterbank(cfg, sample_rate, n_fft);
  const Matrix dct = dct_matrix(cfg.num_ceps, cfg.num_filters);
  const std::vector<double> window = analysis_window(win);

  RealFft fft(n_fft);
  std::vector<double> mag;
  Matrix log_mel(frames, static_cast<std::size_t>(cfg.num_filters));
  for (std::size_t t = 0; t < frames; ++t) {
    double* buf = fft.input();
    const double* src = samples.data() + t * hop;
    for (std::size_t i = 0; i < win; ++i) {
      const double prev = i > 0 ? src[i - 1] : src[0];
      buf[i] = (src[i] - cfg.preemphasis * prev) * window[i];
    }
    std::fill(buf + win, buf + n_fft, 0.0);
    fft.magnitudes(mag);
    for (std::size_t m = 0; m < fb.rows(); ++m) {
      double e = 0.0;
      auto w = fb.row(m);
      for (std::size_t k = 0; k < mag.size(); ++k) e += w[k] * mag[k];
      log_mel(t, m) = std::log(std::max(e, cfg.log_floor));
    }
  }
  // Per-frame dot products keep every frame's rounding independent of its
  // position in the utterance.
  FeatureSequence out;
  out.frames = Matrix(frames, dct.rows());
  for (std::size_t t = 0; t < frames; ++t) {
    auto src = log_mel.row(t);
    for (std::size_t c = 0; c < dct.rows(); ++c) {
      auto basis = dct.row(c);
      double s = 0.0;
      for (std::size_t m = 0; m < src.size(); ++m) s += basis[m] * src[m];
      out.frames(t, c) = s;
    }
  }
  out.frame_rate = static_cast<double>(sample_rate) / static_cast<double>(hop);
  return out;
}

FeatureSequence mfcc(const Utterance& u, const FeatureConfig& cfg) {
  return mfcc(u.samples, u.sample_rate, cfg);
}

Matrix regression_deltas(const Matrix& frames, int width) {
  if (width < 1) throw ConfigError("regression_deltas: width must be >= 1");
  const auto t_count = static_cast<long>(frames.rows());
  double denom = 0.0;
  for (int n = 1; n <= width; ++n) denom += 2.0 * n * n;
  Matrix out(frames.rows(), frames.cols());
  for (long t = 0; t < t_count; ++t) {
    auto dst = out.row(static_cast<std::size_t>(t));
    for (int n = 1; n <= width; ++n) {
      const auto ahead = static_cast<std::size_t>(std::min(t + n, t_count - 1));
      const auto behind = static_cast<std::size_t>(std::max(t - n, 0L));
      auto a = frames.row(ahead);
      auto b = frames.row(behind);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += n * (a[c] - b[c]);
    }
    for (double& v : dst) v /= denom;
  }
  return out;
}

FeatureSequence append_deltas(const FeatureSequence& f, int width) {
  if (f.num_frames() == 0) throw EmptyFeatureError("append_deltas: no frames");
  const Matrix d1 = regression_deltas(f.frames, width);
  const Matrix d2 = regression_deltas(d1, width);
  const std::size_t d = f.dim();
  FeatureSequence out;
  out.frame_rate = f.frame_rate;
  out.frames = Matrix(f.num_frames(), 3 * d);
  for (std::size_t t = 0; t < f.num_frames(); ++t) {
    auto dst = out.frames.row(t);
    std::copy(f.frames.row(t).begin(), f.frames.row(t).end(), dst.begin());
    std::copy(d1.row(t).begin(), d1.row(t).end(), dst.begin() + static_cast<std::ptrdiff_t>(d));
    std::copy(d2.row(t).begin(), d2.row(t).end(), dst.begin() + static_cast<std::ptrdiff_t>(2 * d));
  }
  return out;
}

}  // namespace issl
