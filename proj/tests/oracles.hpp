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

// Reference implementations for tests. Plain index loops in double
// precision over flat vectors; nothing here calls library kernels.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pst/pst.hpp"

namespace oracle {

using Vec = std::vector<double>;

/// Row-major matrix.
struct Mat {
  std::size_t rows = 0, cols = 0;
  Vec v;
  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

/// [C, H, W] map.
struct Map {
  std::size_t c = 0, h = 0, w = 0;
  Vec v;
  Map() = default;
  Map(std::size_t c_, std::size_t h_, std::size_t w_)
      : c(c_), h(h_), w(w_), v(c_ * h_ * w_, 0.0) {}
  double& operator()(std::size_t k, std::size_t y, std::size_t x) {
    return v[(k * h + y) * w + x];
  }
  double operator()(std::size_t k, std::size_t y, std::size_t x) const {
    return v[(k * h + y) * w + x];
  }
};

template <class T>
Mat to_mat(const pst::Tensor<T>& t) {
  Mat m(t.extent(0), t.extent(1));
  for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = double(t[i]);
  return m;
}

template <class T>
Map to_map(const pst::Tensor<T>& t) {
  Map m(t.extent(0), t.extent(1), t.extent(2));
  for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = double(t[i]);
  return m;
}

template <class T>
Vec to_vec(const pst::Tensor<T>& t) {
  return Vec(t.data().begin(), t.data().end());
}

template <class T>
double max_diff(const pst::Tensor<T>& t, const Vec& ref) {
  double d = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    d = std::max(d, std::abs(double(t[i]) - ref[i]));
  }
  return t.size() == ref.size() ? d : INFINITY;
}

/// C[i][j] = sum_l A[i][l] B[l][j], accumulated as dot products.
inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < a.cols; ++l) s += a(i, l) * b(l, j);
      c(i, j) = s;
    }
  }
  return c;
}

/// Y = X W^T.
inline Mat linear(const Mat& x, const Mat& w) {
  Mat y(x.rows, w.rows);
  for (std::size_t n = 0; n < x.rows; ++n) {
    for (std::size_t o = 0; o < w.rows; ++o) {
      double s = 0.0;
      for (std::size_t c = 0; c < x.cols; ++c) s += w(o, c) * x(n, c);
      y(n, o) = s;
    }
  }
  return y;
}

inline Mat transpose(const Mat& a) {
  Mat t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

inline Mat softmax_rows(const Mat& x) {
  Mat y(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < x.cols; ++j) mx = std::max(mx, x(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) z += std::exp(x(i, j) - mx);
    for (std::size_t j = 0; j < x.cols; ++j) y(i, j) = std::exp(x(i, j) - mx) / z;
  }
  return y;
}

/// Token n = y * W + x holds the channel vector at (y, x).
inline Mat tokens(const Map& m) {
  Mat t(m.h * m.w, m.c);
  for (std::size_t k = 0; k < m.c; ++k)
    for (std::size_t y = 0; y < m.h; ++y)
      for (std::size_t x = 0; x < m.w; ++x) t(y * m.w + x, k) = m(k, y, x);
  return t;
}

inline Map untokens(const Mat& t, std::size_t h, std::size_t w) {
  Map m(t.cols, h, w);
  for (std::size_t k = 0; k < t.cols; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) m(k, y, x) = t(y * w + x, k);
  return m;
}

inline Map conv1x1(const Map& x, const Mat& w) {
  Map y(w.rows, x.h, x.w);
  for (std::size_t o = 0; o < w.rows; ++o)
    for (std::size_t yy = 0; yy < x.h; ++yy)
      for (std::size_t xx = 0; xx < x.w; ++xx) {
        double s = 0.0;
        for (std::size_t c = 0; c < x.c; ++c) s += w(o, c) * x(c, yy, xx);
        y(o, yy, xx) = s;
      }
  return y;
}

/// 7x7 per-channel cross-correlation, zero padding 3. kernel is [C, 7, 7].
inline Map depthwise7(const Map& x, const Vec& kernel) {
  Map y(x.c, x.h, x.w);
  for (std::size_t k = 0; k < x.c; ++k)
    for (long yy = 0; yy < long(x.h); ++yy)
      for (long xx = 0; xx < long(x.w); ++xx) {
        double s = 0.0;
        for (long dy = -3; dy <= 3; ++dy)
          for (long dx = -3; dx <= 3; ++dx) {
            const long sy = yy + dy, sx = xx + dx;
            if (sy < 0 || sx < 0 || sy >= long(x.h) || sx >= long(x.w)) continue;
            s += kernel[(k * 7 + std::size_t(dy + 3)) * 7 + std::size_t(dx + 3)] *
                 x(k, std::size_t(sy), std::size_t(sx));
          }
        y(k, std::size_t(yy), std::size_t(xx)) = s;
      }
  return y;
}

inline Map upsample2(const Map& x) {
  Map y(x.c, 2 * x.h, 2 * x.w);
  for (std::size_t k = 0; k < y.c; ++k)
    for (std::size_t yy = 0; yy < y.h; ++yy)
      for (std::size_t xx = 0; xx < y.w; ++xx) y(k, yy, xx) = x(k, yy / 2, xx / 2);
  return y;
}

inline Map downsample2(const Map& x) {
  Map y(x.c, x.h / 2, x.w / 2);
  for (std::size_t k = 0; k < y.c; ++k)
    for (std::size_t yy = 0; yy < y.h; ++yy)
      for (std::size_t xx = 0; xx < y.w; ++xx)
        y(k, yy, xx) = (x(k, 2 * yy, 2 * xx) + x(k, 2 * yy, 2 * xx + 1) +
                        x(k, 2 * yy + 1, 2 * xx) + x(k, 2 * yy + 1, 2 * xx + 1)) /
                       4.0;
  return y;
}

inline Map concat(const Map& a, const Map& b) {
  Map y(a.c + b.c, a.h, a.w);
  std::copy(a.v.begin(), a.v.end(), y.v.begin());
  std::copy(b.v.begin(), b.v.end(), y.v.begin() + long(a.v.size()));
  return y;
}

inline double silu(double v) { return v / (1.0 + std::exp(-v)); }
inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// Per-channel affine normalization with given statistics, eps 1e-5.
inline Map norm_infer(const Map& x, const Vec& gamma, const Vec& beta,
                      const Vec& mean, const Vec& var) {
  Map y = x;
  for (std::size_t k = 0; k < x.c; ++k)
    for (std::size_t i = 0; i < x.h * x.w; ++i) {
      const double z = (x.v[k * x.h * x.w + i] - mean[k]) / std::sqrt(var[k] + 1e-5);
      y.v[k * x.h * x.w + i] = gamma[k] * z + beta[k];
    }
  return y;
}

/// Batch statistics over every map and position: biased variance for the
/// output, running variance updated with the unbiased estimate.
struct BatchNormRef {
  std::vector<Map> out;
  Vec running_mean, running_var;
};

inline BatchNormRef norm_train(const std::vector<Map>& xs, const Vec& gamma,
                               const Vec& beta, const Vec& run_mean,
                               const Vec& run_var, double momentum) {
  const std::size_t c = xs[0].c, hw = xs[0].h * xs[0].w;
  const double count = double(xs.size() * hw);
  BatchNormRef r;
  r.out = xs;
  r.running_mean = run_mean;
  r.running_var = run_var;
  for (std::size_t k = 0; k < c; ++k) {
    double mean = 0.0;
    for (const auto& x : xs)
      for (std::size_t i = 0; i < hw; ++i) mean += x.v[k * hw + i];
    mean /= count;
    double ss = 0.0;
    for (const auto& x : xs)
      for (std::size_t i = 0; i < hw; ++i) ss += std::pow(x.v[k * hw + i] - mean, 2);
    const double var = ss / count;
    for (std::size_t b = 0; b < xs.size(); ++b)
      for (std::size_t i = 0; i < hw; ++i)
        r.out[b].v[k * hw + i] =
            gamma[k] * (xs[b].v[k * hw + i] - mean) / std::sqrt(var + 1e-5) + beta[k];
    const double unbiased = count > 1 ? ss / (count - 1) : var;
    r.running_mean[k] = (1 - momentum) * run_mean[k] + momentum * mean;
    r.running_var[k] = (1 - momentum) * run_var[k] + momentum * unbiased;
  }
  return r;
}

/// Multi-head attention; head h uses columns [h*dk, (h+1)*dk).
struct AttentionRef {
  Mat out;
  std::vector<Mat> weights;
};

inline AttentionRef attention(const Mat& q, const Mat& k, const Mat& v,
                              std::size_t heads) {
  const std::size_t dk = q.cols / heads;
  AttentionRef r{Mat(q.rows, v.cols), {}};
  for (std::size_t h = 0; h < heads; ++h) {
    Mat logits(q.rows, k.rows);
    for (std::size_t i = 0; i < q.rows; ++i)
      for (std::size_t j = 0; j < k.rows; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < dk; ++d) s += q(i, h * dk + d) * k(j, h * dk + d);
        logits(i, j) = s / std::sqrt(double(dk));
      }
    Mat a = softmax_rows(logits);
    for (std::size_t i = 0; i < q.rows; ++i)
      for (std::size_t d = 0; d < dk; ++d) {
        double s = 0.0;
        for (std::size_t j = 0; j < k.rows; ++j) s += a(i, j) * v(j, h * dk + d);
        r.out(i, h * dk + d) = s;
      }
    r.weights.push_back(std::move(a));
  }
  return r;
}

inline Vec key_scores(const std::vector<Mat>& weights) {
  Vec s(weights[0].cols, 0.0);
  for (const auto& a : weights)
    for (std::size_t i = 0; i < a.rows; ++i)
      for (std::size_t j = 0; j < a.cols; ++j) s[j] += a(i, j);
  for (auto& x : s) x /= double(weights.size() * weights[0].rows);
  return s;
}

/// Repeatedly takes the best remaining key (highest score, lowest index on
/// ties) among those strictly above the threshold.
inline std::vector<std::size_t> topk(const Vec& s, std::size_t k, double threshold) {
  std::vector<bool> taken(s.size(), false);
  std::vector<std::size_t> out;
  while (out.size() < k) {
    std::size_t best = s.size();
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (taken[j] || !(s[j] > threshold)) continue;
      if (best == s.size() || s[j] > s[best]) best = j;
    }
    if (best == s.size()) break;
    taken[best] = true;
    out.push_back(best);
  }
  return out;
}

/// Fine tokens whose coarse parent (y/2, x/2) is `coarse`, ascending.
inline std::vector<std::size_t> children(std::size_t coarse, std::size_t coarse_w,
                                         std::size_t fine_h, std::size_t fine_w) {
  std::vector<std::size_t> out;
  for (std::size_t y = 0; y < fine_h; ++y)
    for (std::size_t x = 0; x < fine_w; ++x)
      if ((y / 2) * coarse_w + x / 2 == coarse) out.push_back(y * fine_w + x);
  return out;
}

inline Mat rows(const Mat& m, const std::vector<std::size_t>& idx) {
  Mat r(idx.size(), m.cols);
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < m.cols; ++j) r(i, j) = m(idx[i], j);
  return r;
}

template <class T>
Vec stat(const pst::NormBuffers<T>& b, const std::string& name, bool mean) {
  const auto& s = b.at(name);
  return to_vec(mean ? s.mean : s.var);
}

enum class FineMode { selected, dense };

/// Inference-mode PSA. FineMode::dense replaces the selected tokens with
/// every fine token.
template <class T>
Map psa(const Map& x, const Map& u, const pst::PsaParams<T>& p,
        const pst::PsaConfig& cfg, const pst::NormBuffers<T>& buffers,
        const std::string& prefix, FineMode mode = FineMode::selected,
        std::vector<std::size_t>* selected = nullptr) {
  const Mat xt = tokens(x), ut = tokens(u);
  const Mat q = linear(xt, to_mat(p.wq));
  const Mat k = linear(ut, to_mat(p.wk));
  const Mat v = linear(ut, to_mat(p.wv));
  const AttentionRef coarse = attention(q, k, v, cfg.heads);
  const std::size_t n = xt.rows;

  Mat fine(n, cfg.token_dim);
  bool have_fine = false;
  if (cfg.fine_enabled && cfg.k > 0) {
    std::vector<std::size_t> idx;
    if (mode == FineMode::dense) {
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (std::size_t c : topk(key_scores(coarse.weights), cfg.k, cfg.score_threshold)) {
        for (std::size_t f : children(c, u.w, x.h, x.w)) idx.push_back(f);
      }
    }
    if (selected) *selected = idx;
    if (!idx.empty()) {
      const Mat xs = rows(xt, idx);
      fine = attention(q, linear(xs, to_mat(p.wk)), linear(xs, to_mat(p.wv)), cfg.heads).out;
      have_fine = true;
    }
  }

  Mat fused(n, cfg.token_dim);
  if (cfg.fusion == pst::FusionMode::sum) {
    for (std::size_t i = 0; i < fused.v.size(); ++i)
      fused.v[i] = coarse.out.v[i] + (have_fine ? fine.v[i] : 0.0);
  } else {
    const Mat gw = to_mat(p.gate->weight);
    const Vec gb = to_vec(p.gate->bias);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < cfg.token_dim; ++o) {
        double s = gb[o];
        for (std::size_t c = 0; c < cfg.token_dim; ++c)
          s += gw(o, c) * coarse.out(i, c) + gw(o, cfg.token_dim + c) * fine(i, c);
        const double g = sigmoid(s);
        fused(i, o) = g * fine(i, o) + (1 - g) * coarse.out(i, o);
      }
  }

  const std::string cpe = prefix + ".cpe_norm", out = prefix + ".out_norm";
  const Map vmap = untokens(v, u.h, u.w);
  const Map pe = upsample2(norm_infer(depthwise7(vmap, to_vec(p.cpe_kernel)),
                                      to_vec(p.cpe_norm.gamma), to_vec(p.cpe_norm.beta),
                                      stat(buffers, cpe, true), stat(buffers, cpe, false)));
  const Mat pet = tokens(pe);
  for (std::size_t i = 0; i < fused.v.size(); ++i) fused.v[i] += pet.v[i];
  return norm_infer(conv1x1(untokens(fused, x.h, x.w), to_mat(p.wo)),
                    to_vec(p.out_norm.gamma), to_vec(p.out_norm.beta),
                    stat(buffers, out, true), stat(buffers, out, false));
}

template <class T>
Map pst_block(const Map& x_raw, const Map& u_raw, const pst::PstParams<T>& p,
              const pst::PstConfig& cfg, const pst::NormBuffers<T>& buffers,
              const std::string& prefix, FineMode mode = FineMode::selected) {
  const auto norm = [&](const Map& m, const pst::NormWeights<pst::Tensor<T>>& w,
                        const std::string& name) {
    return norm_infer(m, to_vec(w.gamma), to_vec(w.beta), stat(buffers, name, true),
                      stat(buffers, name, false));
  };
  const Map x = norm(conv1x1(x_raw, to_mat(p.in_conv_x)), p.in_norm_x, prefix + ".in_norm_x");
  const Map u = norm(conv1x1(u_raw, to_mat(p.in_conv_u)), p.in_norm_u, prefix + ".in_norm_u");
  Map b = psa(x, u, p.psa, cfg.psa, buffers, prefix + ".psa", mode);
  Map hidden = conv1x1(b, to_mat(p.mlp_expand));
  for (auto& v : hidden.v) v = silu(v);
  const Map mlp = conv1x1(hidden, to_mat(p.mlp_project));
  for (std::size_t i = 0; i < b.v.size(); ++i) b.v[i] += mlp.v[i];
  return norm(conv1x1(concat(x_raw, b), to_mat(p.end_conv)), p.end_norm,
              prefix + ".end_norm");
}

/// Parameter count of a PST block from an explicit tensor list.
inline std::uint64_t pst_param_count(std::uint64_t c, std::uint64_t cu, std::uint64_t t,
                                     bool gate = false) {
  const std::uint64_t tensors[] = {
      t * c,     t,     t,                // in_conv_x + norm
      t * cu,    t,     t,                // in_conv_u + norm
      t * t,     t * t, t * t, t * t,     // wq wk wv wo
      49 * t,    t,     t,     t,     t,  // cpe kernel, cpe norm, out norm
      2 * t * t, 2 * t * t,               // mlp
      2 * t * (c + t), 2 * t, 2 * t,      // end conv + norm
  };
  std::uint64_t n = 0;
  for (auto v : tensors) n += v;
  if (gate) n += 2 * t * t + t;
  return n;
}

}  // namespace oracle
