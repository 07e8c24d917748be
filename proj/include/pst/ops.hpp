/* Copyright 2026 The PST Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Dense scalar reference kernels. Every function here is pure: inputs are
// read-only and a fresh tensor is returned.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pst/tensor.hpp"

namespace pst {

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got " + shape_str(s));
  }
}

inline void require_same_shape(const Shape& a, const Shape& b,
                               const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a.shape(), 2, "matmul");
  detail::require_rank(b.shape(), 2, "matmul");
  if (a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: inner extents differ, " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor<T> c({m, n});
  const T* pa = a.raw();
  const T* pb = b.raw();
  T* pc = c.raw();
  // i-l-j order: each c[i,j] accumulates over l ascending.
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = pc + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const T av = pa[i * k + l];
      const T* brow = pb + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a.shape(), 2, "transpose");
  const std::size_t m = a.extent(0), n = a.extent(1);
  Tensor<T> t({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  }
  return t;
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 2, "softmax_rows");
  const std::size_t m = x.extent(0), n = x.extent(1);
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const T* in = x.raw() + i * n;
    T* out = y.raw() + i * n;
    const T mx = *std::max_element(in, in + n);
    T sum{0};
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = std::exp(in[j] - mx);
      sum += out[j];
    }
    const T inv = T{1} / sum;
    for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
  }
  debug_check_finite(y, "softmax_rows");
  return y;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

/// out[o, p] = sum_i w[o, i] * x[i, p] at every spatial site p. No bias.
template <class T>
Tensor<T> conv1x1(const Tensor<T>& x, const Tensor<T>& w) {
  detail::require_rank(x.shape(), 3, "conv1x1");
  detail::require_rank(w.shape(), 2, "conv1x1 weight");
  const std::size_t cin = x.extent(0);
  if (w.extent(1) != cin) {
    throw DimensionError("conv1x1: weight " + shape_str(w.shape()) +
                         " does not accept " + std::to_string(cin) +
                         " input channels");
  }
  const std::size_t h = x.extent(1), wd = x.extent(2);
  Tensor<T> flat = x.reshaped({cin, h * wd});
  return matmul(w, flat).reshaped({w.extent(0), h, wd});
}

template <class T>
FeatureMap<T> conv1x1(const FeatureMap<T>& x, const Tensor<T>& w) {
  return FeatureMap<T>(conv1x1(x.tensor(), w));
}

inline constexpr std::size_t kDepthwiseSize = 7;
inline constexpr std::size_t kDepthwisePad = 3;

/// Per-channel 7x7 cross-correlation, stride 1, zero padding 3.
template <class T>
Tensor<T> depthwise_conv7x7(const Tensor<T>& x, const Tensor<T>& kernel) {
  detail::require_rank(x.shape(), 3, "depthwise_conv7x7");
  const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  if (kernel.shape() != Shape{c, kDepthwiseSize, kDepthwiseSize}) {
    throw DimensionError("depthwise_conv7x7: kernel " +
                         shape_str(kernel.shape()) + " for " +
                         std::to_string(c) + " channels");
  }
  Tensor<T> y(x.shape());
  const auto ih = static_cast<std::ptrdiff_t>(h);
  const auto iw = static_cast<std::ptrdiff_t>(w);
  constexpr auto pad = static_cast<std::ptrdiff_t>(kDepthwisePad);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* k = kernel.raw() + ch * kDepthwiseSize * kDepthwiseSize;
    const T* in = x.raw() + ch * h * w;
    T* out = y.raw() + ch * h * w;
    for (std::ptrdiff_t r = 0; r < ih; ++r) {
      for (std::ptrdiff_t q = 0; q < iw; ++q) {
        T acc{0};
        for (std::ptrdiff_t u = 0; u < 7; ++u) {
          const std::ptrdiff_t sr = r + u - pad;
          if (sr < 0 || sr >= ih) continue;
          for (std::ptrdiff_t v = 0; v < 7; ++v) {
            const std::ptrdiff_t sc = q + v - pad;
            if (sc < 0 || sc >= iw) continue;
            acc += k[u * 7 + v] * in[sr * iw + sc];
          }
        }
        out[r * iw + q] = acc;
      }
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

enum class NormMode { train, infer };

inline constexpr double kNormEps = 1e-5;
inline constexpr double kNormMomentum = 0.03;

template <class T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;

  static RunningStats identity(std::size_t channels) {
    return {Tensor<T>({channels}, T{0}), Tensor<T>({channels}, T{1})};
  }
};

/// How a tensor splits into (outer, channel, inner) for per-channel
/// statistics: [C,H,W] maps are channel-first, [N,C] tokens channel-last.
struct ChannelLayout {
  std::size_t outer = 1;
  std::size_t channels = 1;
  std::size_t inner = 1;

  static ChannelLayout of(const Shape& s) {
    if (s.size() == 3) return {1, s[0], s[1] * s[2]};
    if (s.size() == 2) return {s[0], s[1], 1};
    throw DimensionError("batch_norm: expected a feature map or token matrix, "
                         "got " + shape_str(s));
  }
  std::size_t per_channel() const { return outer * inner; }
  std::size_t index(std::size_t o, std::size_t c, std::size_t i) const {
    return (o * channels + c) * inner + i;
  }
};

namespace detail {

template <class T>
void check_norm_args(std::size_t channels, const Tensor<T>& gamma,
                     const Tensor<T>& beta, const RunningStats<T>& stats) {
  const Shape want{channels};
  if (gamma.shape() != want || beta.shape() != want ||
      stats.mean.shape() != want || stats.var.shape() != want) {
    throw DimensionError("batch_norm: affine/statistics length must equal " +
                         std::to_string(channels) + " channels");
  }
  for (std::size_t c = 0; c < channels; ++c) {
    if (stats.var[c] < T{0} || !std::isfinite(stats.var[c])) {
      throw StateError("batch_norm: running variance of channel " +
                       std::to_string(c) + " is invalid");
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> batch_norm_infer(const Tensor<T>& x, const Tensor<T>& gamma,
                           const Tensor<T>& beta, const RunningStats<T>& stats,
                           T eps = T(kNormEps)) {
  const ChannelLayout lay = ChannelLayout::of(x.shape());
  detail::check_norm_args(lay.channels, gamma, beta, stats);
  Tensor<T> y(x.shape());
  for (std::size_t c = 0; c < lay.channels; ++c) {
    const T scale = gamma[c] / std::sqrt(stats.var[c] + eps);
    const T mean = stats.mean[c];
    for (std::size_t o = 0; o < lay.outer; ++o) {
      for (std::size_t i = 0; i < lay.inner; ++i) {
        const std::size_t idx = lay.index(o, c, i);
        y[idx] = scale * (x[idx] - mean) + beta[c];
      }
    }
  }
  return y;
}

template <class T>
struct BatchNormTrainResult {
  std::vector<Tensor<T>> outputs;
  RunningStats<T> updated;    // momentum-blended running statistics
  Tensor<T> batch_mean;
  Tensor<T> inv_std;          // 1 / sqrt(batch_var + eps)
};

/// Batch statistics over every non-channel axis of every batch element.
/// Running variance is updated with the unbiased batch variance.
template <class T>
BatchNormTrainResult<T> batch_norm_train(std::span<const Tensor<T>> xs,
                                         const Tensor<T>& gamma,
                                         const Tensor<T>& beta,
                                         const RunningStats<T>& stats,
                                         T momentum = T(kNormMomentum),
                                         T eps = T(kNormEps)) {
  if (xs.empty()) throw ContractError("batch_norm: empty batch");
  const ChannelLayout lay = ChannelLayout::of(xs[0].shape());
  for (const auto& x : xs) {
    detail::require_same_shape(x.shape(), xs[0].shape(), "batch_norm");
  }
  detail::check_norm_args(lay.channels, gamma, beta, stats);
  const std::size_t count = lay.per_channel() * xs.size();

  BatchNormTrainResult<T> r;
  r.batch_mean = Tensor<T>({lay.channels});
  r.inv_std = Tensor<T>({lay.channels});
  r.updated = stats;
  for (std::size_t c = 0; c < lay.channels; ++c) {
    T sum{0};
    for (const auto& x : xs) {
      for (std::size_t o = 0; o < lay.outer; ++o) {
        for (std::size_t i = 0; i < lay.inner; ++i) sum += x[lay.index(o, c, i)];
      }
    }
    const T mean = sum / static_cast<T>(count);
    T sq{0};
    for (const auto& x : xs) {
      for (std::size_t o = 0; o < lay.outer; ++o) {
        for (std::size_t i = 0; i < lay.inner; ++i) {
          const T d = x[lay.index(o, c, i)] - mean;
          sq += d * d;
        }
      }
    }
    const T var = sq / static_cast<T>(count);
    const T unbiased =
        count > 1 ? sq / static_cast<T>(count - 1) : var;
    r.batch_mean[c] = mean;
    r.inv_std[c] = T{1} / std::sqrt(var + eps);
    r.updated.mean[c] = (T{1} - momentum) * stats.mean[c] + momentum * mean;
    r.updated.var[c] = (T{1} - momentum) * stats.var[c] + momentum * unbiased;
  }
  r.outputs.reserve(xs.size());
  for (const auto& x : xs) {
    Tensor<T> y(x.shape());
    for (std::size_t c = 0; c < lay.channels; ++c) {
      for (std::size_t o = 0; o < lay.outer; ++o) {
        for (std::size_t i = 0; i < lay.inner; ++i) {
          const std::size_t idx = lay.index(o, c, i);
          y[idx] = gamma[c] * (x[idx] - r.batch_mean[c]) * r.inv_std[c] +
                   beta[c];
        }
      }
    }
    r.outputs.push_back(std::move(y));
  }
  return r;
}

template <class T>
struct BatchNormResult {
  Tensor<T> output;
  RunningStats<T> stats;  // unchanged in infer mode
};

/// Single-tensor form: train mode treats x as a batch of one.
template <class T>
BatchNormResult<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                              const Tensor<T>& beta,
                              const RunningStats<T>& stats, NormMode mode,
                              T momentum = T(kNormMomentum),
                              T eps = T(kNormEps)) {
  if (mode == NormMode::infer) {
    return {batch_norm_infer(x, gamma, beta, stats, eps), stats};
  }
  auto r = batch_norm_train(std::span<const Tensor<T>>(&x, 1), gamma, beta,
                            stats, momentum, eps);
  return {std::move(r.outputs[0]), std::move(r.updated)};
}

// ---------------------------------------------------------------------------
// Resampling and layout
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 3, "upsample_nearest2x");
  const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  Tensor<T> y({c, 2 * h, 2 * w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t r = 0; r < 2 * h; ++r) {
      for (std::size_t q = 0; q < 2 * w; ++q) {
        y.at(ch, r, q) = x.at(ch, r / 2, q / 2);
      }
    }
  }
  return y;
}

template <class T>
Tensor<T> downsample_avg2x(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 3, "downsample_avg2x");
  const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  if (h % 2 || w % 2) {
    throw DimensionError("downsample_avg2x: odd spatial extents " +
                         shape_str(x.shape()));
  }
  Tensor<T> y({c, h / 2, w / 2});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t r = 0; r < h / 2; ++r) {
      for (std::size_t q = 0; q < w / 2; ++q) {
        const T s = (x.at(ch, 2 * r, 2 * q) + x.at(ch, 2 * r, 2 * q + 1)) +
                    (x.at(ch, 2 * r + 1, 2 * q) + x.at(ch, 2 * r + 1, 2 * q + 1));
        y.at(ch, r, q) = s * T(0.25);
      }
    }
  }
  return y;
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a.shape(), 3, "concat_channels");
  detail::require_rank(b.shape(), 3, "concat_channels");
  if (a.extent(1) != b.extent(1) || a.extent(2) != b.extent(2)) {
    throw DimensionError("concat_channels: spatial mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> y({a.extent(0) + b.extent(0), a.extent(1), a.extent(2)});
  std::copy(a.data().begin(), a.data().end(), y.data().begin());
  std::copy(b.data().begin(), b.data().end(),
            y.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return y;
}

/// [C,H,W] -> [H*W, C]; token t = row * W + col.
template <class T>
Tensor<T> map_to_tokens(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 3, "map_to_tokens");
  const std::size_t c = x.extent(0), n = x.extent(1) * x.extent(2);
  return transpose(x.reshaped({c, n}));
}

template <class T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, std::size_t h,
                        std::size_t w) {
  detail::require_rank(tokens.shape(), 2, "tokens_to_map");
  if (tokens.extent(0) != h * w) {
    throw DimensionError("tokens_to_map: " + std::to_string(tokens.extent(0)) +
                         " tokens for a " + std::to_string(h) + "x" +
                         std::to_string(w) + " grid");
  }
  const std::size_t c = tokens.extent(1);
  return transpose(tokens).reshaped({c, h, w});
}

template <class T>
TokenMatrix<T> map_to_tokens(const FeatureMap<T>& x) {
  return TokenMatrix<T>(map_to_tokens(x.tensor()),
                        GridDims{x.height(), x.width()});
}

template <class T>
FeatureMap<T> tokens_to_map(const TokenMatrix<T>& t, std::size_t h,
                            std::size_t w) {
  return FeatureMap<T>(tokens_to_map(t.tensor(), h, w));
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& t, std::span<const std::size_t> idx) {
  detail::require_rank(t.shape(), 2, "gather_rows");
  if (idx.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t n = t.extent(0), d = t.extent(1);
  Tensor<T> y({idx.size(), d});
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] >= n) {
      throw IndexError("gather_rows: index " + std::to_string(idx[j]) +
                           " out of range for " + std::to_string(n) + " rows",
                       idx[j]);
    }
    std::copy_n(t.raw() + idx[j] * d, d, y.raw() + j * d);
  }
  return y;
}

/// Columns [start, start + len) of a matrix.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t len) {
  detail::require_rank(x.shape(), 2, "slice_cols");
  const std::size_t m = x.extent(0), n = x.extent(1);
  if (len == 0 || start + len > n) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") outside " +
                         std::to_string(n) + " columns");
  }
  Tensor<T> y({m, len});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(x.raw() + i * n + start, len, y.raw() + i * len);
  }
  return y;
}

template <class T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].extent(0);
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_rank(p.shape(), 2, "concat_cols");
    if (p.extent(0) != m) {
      throw DimensionError("concat_cols: row counts differ");
    }
    n += p.extent(1);
  }
  Tensor<T> y({m, n});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.extent(1);
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(p.raw() + i * w, w, y.raw() + i * n + off);
    }
    off += w;
  }
  return y;
}

template <class T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].extent(1);
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require_rank(p.shape(), 2, "concat_rows");
    if (p.extent(1) != n) throw DimensionError("concat_rows: widths differ");
    m += p.extent(0);
  }
  std::vector<T> data;
  data.reserve(m * n);
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Tensor<T>({m, n}, std::move(data));
}

/// [m, n] -> [1, n] column means.
template <class T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 2, "mean_rows");
  const std::size_t m = x.extent(0), n = x.extent(1);
  Tensor<T> y({1, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) y[j] += x[i * n + j];
  }
  for (std::size_t j = 0; j < n; ++j) y[j] /= static_cast<T>(m);
  return y;
}

// ---------------------------------------------------------------------------
// Element-wise
// ---------------------------------------------------------------------------

template <class T, class F>
Tensor<T> zip_with(const Tensor<T>& a, const Tensor<T>& b, F f,
                   const char* op) {
  detail::require_same_shape(a.shape(), b.shape(), op);
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = f(a[i], b[i]);
  return y;
}

template <class T, class F>
Tensor<T> map_values(const Tensor<T>& a, F f) {
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = f(a[i]);
  return y;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return zip_with(a, b, std::plus<T>(), "add");
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return zip_with(a, b, std::minus<T>(), "sub");
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return zip_with(a, b, std::multiplies<T>(), "mul");
}
template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return map_values(a, [s](T v) { return v * s; });
}

template <class T>
T sigmoid(T v) {
  return T{1} / (T{1} + std::exp(-v));
}
template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return map_values(a, [](T v) { return sigmoid(v); });
}
template <class T>
Tensor<T> silu(const Tensor<T>& a) {
  return map_values(a, [](T v) { return v * sigmoid(v); });
}

/// [m, n] + per-column bias [n].
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_rank(x.shape(), 2, "add_bias");
  if (bias.shape() != Shape{x.extent(1)}) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) +
                         " for " + shape_str(x.shape()));
  }
  Tensor<T> y = x;
  const std::size_t n = x.extent(1);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bias[i % n];
  return y;
}

template <class T>
T sum(const Tensor<T>& a) {
  T s{0};
  for (T v : a.data()) s += v;
  return s;
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

/// Indices of the k largest entries strictly above `threshold`, ordered by
/// descending score with ties broken by ascending index.
template <class T>
std::vector<std::size_t> topk_indices(std::span<const T> scores,
                                      std::size_t k, T threshold) {
  std::vector<std::size_t> idx;
  if (k == 0) return idx;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > threshold) idx.push_back(i);
  }
  const auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  if (idx.size() > k) {
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k),
                      idx.end(), better);
    idx.resize(k);
  } else {
    std::sort(idx.begin(), idx.end(), better);
  }
  return idx;
}

}  // namespace pst
