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

// Pyramid sparse attention.
//
// Queries come from a fine map X [C', H, W]; keys and values from the
// adjacent coarse map U [C', H/2, W/2]. The coarse stage attends over all
// N/4 coarse tokens, averages its attention weights into one score per key,
// picks the top-k keys and expands each to the 2x2 patch of fine tokens it
// covers. The fine stage attends over those 4k fine tokens using the same
// key/value projections. Branch outputs are summed (or gated), a depthwise
// 7x7 positional encoding of V is added, and a 1x1 conv + norm closes it.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "pst/graph.hpp"
#include "pst/ops.hpp"
#include "pst/params.hpp"

namespace pst {

enum class FusionMode { sum, self_gating };

inline constexpr std::size_t kMaxTokenDim = 2048;
inline constexpr std::size_t kChannelsPerHead = 32;

struct PsaConfig {
  std::size_t token_dim = 32;
  std::size_t heads = 1;
  std::size_t k = 8;
  double score_threshold = 1e-6;
  bool fine_enabled = true;
  FusionMode fusion = FusionMode::sum;
  std::size_t stack_depth = 1;

  /// Default configuration for a token dimension: C'/32 heads, at least one.
  static PsaConfig for_dim(std::size_t token_dim) {
    PsaConfig cfg;
    cfg.token_dim = token_dim;
    cfg.heads = std::max<std::size_t>(1, token_dim / kChannelsPerHead);
    return cfg;
  }

  std::size_t head_dim() const { return token_dim / heads; }

  void validate() const {
    if (token_dim == 0 || token_dim > kMaxTokenDim) {
      throw ContractError("token_dim must be in [1, 2048], got " +
                          std::to_string(token_dim));
    }
    if (heads == 0 || token_dim % heads != 0) {
      throw ContractError("token_dim " + std::to_string(token_dim) +
                          " is not divisible by " + std::to_string(heads) +
                          " heads");
    }
    if (stack_depth == 0) throw ContractError("stack_depth must be >= 1");
    if (!(score_threshold >= 0.0)) {
      throw ContractError("score_threshold must be >= 0");
    }
  }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <class V>
struct GateWeights {
  V weight;  // [C', 2C'], kernel-size-1 conv over concatenated channels
  V bias;    // [C']
};

template <class V>
struct PsaWeights {
  V wq;          // [C', C']
  V wk;          // [C', C'] shared by the coarse and fine stages
  V wv;          // [C', C'] shared by the coarse and fine stages
  V wo;          // [C', C'] closing 1x1 conv
  V cpe_kernel;  // [C', 7, 7]
  NormWeights<V> cpe_norm;
  NormWeights<V> out_norm;
  std::optional<GateWeights<V>> gate;  // self-gating fusion only
};

template <class T>
using PsaParams = PsaWeights<Tensor<T>>;

namespace detail {
template <class Self, class F>
void visit_psa(Self& w, const std::string& prefix, F&& f) {
  f(ParamInfo{join_name(prefix, "wq"), ParamRole::weight}, w.wq);
  f(ParamInfo{join_name(prefix, "wk"), ParamRole::weight}, w.wk);
  f(ParamInfo{join_name(prefix, "wv"), ParamRole::weight}, w.wv);
  f(ParamInfo{join_name(prefix, "wo"), ParamRole::weight}, w.wo);
  f(ParamInfo{join_name(prefix, "cpe_kernel"), ParamRole::weight}, w.cpe_kernel);
  visit_params(w.cpe_norm, join_name(prefix, "cpe_norm"), f);
  visit_params(w.out_norm, join_name(prefix, "out_norm"), f);
  if (w.gate) {
    f(ParamInfo{join_name(prefix, "gate.weight"), ParamRole::weight}, w.gate->weight);
    f(ParamInfo{join_name(prefix, "gate.bias"), ParamRole::bias}, w.gate->bias);
  }
}
}  // namespace detail

template <class V, class F>
void visit_params(PsaWeights<V>& w, const std::string& prefix, F&& f) {
  detail::visit_psa(w, prefix, f);
}
template <class V, class F>
void visit_params(const PsaWeights<V>& w, const std::string& prefix, F&& f) {
  detail::visit_psa(w, prefix, f);
}

template <class To, class From, class F>
PsaWeights<To> transform_params(const PsaWeights<From>& w,
                                const std::string& prefix, F&& f) {
  PsaWeights<To> r;
  r.wq = f(ParamInfo{join_name(prefix, "wq"), ParamRole::weight}, w.wq);
  r.wk = f(ParamInfo{join_name(prefix, "wk"), ParamRole::weight}, w.wk);
  r.wv = f(ParamInfo{join_name(prefix, "wv"), ParamRole::weight}, w.wv);
  r.wo = f(ParamInfo{join_name(prefix, "wo"), ParamRole::weight}, w.wo);
  r.cpe_kernel =
      f(ParamInfo{join_name(prefix, "cpe_kernel"), ParamRole::weight}, w.cpe_kernel);
  r.cpe_norm = transform_params<To>(w.cpe_norm, join_name(prefix, "cpe_norm"), f);
  r.out_norm = transform_params<To>(w.out_norm, join_name(prefix, "out_norm"), f);
  if (w.gate) {
    r.gate = GateWeights<To>{
        f(ParamInfo{join_name(prefix, "gate.weight"), ParamRole::weight}, w.gate->weight),
        f(ParamInfo{join_name(prefix, "gate.bias"), ParamRole::bias}, w.gate->bias)};
  }
  return r;
}

inline PsaWeights<Shape> psa_shapes(const PsaConfig& cfg) {
  const std::size_t c = cfg.token_dim;
  PsaWeights<Shape> s{{c, c}, {c, c}, {c, c}, {c, c},
                      {c, kDepthwiseSize, kDepthwiseSize},
                      norm_shapes(c), norm_shapes(c), std::nullopt};
  if (cfg.fusion == FusionMode::self_gating) {
    s.gate = GateWeights<Shape>{{c, 2 * c}, {c}};
  }
  return s;
}

inline const std::string kPsaPrefix = "psa";

/// Parameters plus normalization statistics for a standalone PSA block.
template <class T>
struct PsaModule {
  PsaParams<T> params;
  NormBuffers<T> buffers;

  static PsaModule init(const PsaConfig& cfg, Rng& rng,
                        const std::string& prefix = kPsaPrefix) {
    const auto shapes = psa_shapes(cfg);
    return {materialize<T>(shapes, prefix, rng),
            init_norm_buffers<T>(shapes, prefix)};
  }
};

// ---------------------------------------------------------------------------
// Top-k selection
// ---------------------------------------------------------------------------

template <class T>
struct TopKSelection {
  std::vector<std::size_t> coarse_indices;
  std::vector<T> scores;
  std::vector<std::size_t> fine_indices;

  bool empty() const { return coarse_indices.empty(); }
};

/// The four fine-grid tokens under coarse token `coarse_index`, row-major
/// within the patch. The fine grid is twice as wide as the coarse grid.
inline std::array<std::size_t, 4> expand_patch(std::size_t coarse_index,
                                               std::size_t coarse_width) {
  const std::size_t r = coarse_index / coarse_width;
  const std::size_t c = coarse_index % coarse_width;
  const std::size_t fw = 2 * coarse_width;
  return {(2 * r) * fw + 2 * c, (2 * r) * fw + 2 * c + 1,
          (2 * r + 1) * fw + 2 * c, (2 * r + 1) * fw + 2 * c + 1};
}

template <class T>
TopKSelection<T> select_fine_indices(std::span<const T> scores,
                                     const PsaConfig& cfg, GridDims coarse) {
  if (scores.size() != coarse.count()) {
    throw DimensionError("select_fine_indices: " +
                         std::to_string(scores.size()) + " scores for a " +
                         std::to_string(coarse.height) + "x" +
                         std::to_string(coarse.width) + " coarse grid");
  }
  TopKSelection<T> sel;
  sel.coarse_indices =
      topk_indices(scores, cfg.k, static_cast<T>(cfg.score_threshold));
  for (std::size_t ci : sel.coarse_indices) {
    sel.scores.push_back(scores[ci]);
    for (std::size_t f : expand_patch(ci, coarse.width)) {
      sel.fine_indices.push_back(f);
    }
  }
  return sel;
}

/// Per-key mean of attention weight over every head and query row.
template <class T>
Tensor<T> key_scores(std::span<const Tensor<T>> head_weights) {
  if (head_weights.empty()) throw DimensionError("key_scores: no heads");
  const std::size_t n = head_weights[0].extent(0);
  const std::size_t m = head_weights[0].extent(1);
  Tensor<T> s({m});
  for (const auto& a : head_weights) {
    detail::require_same_shape(a.shape(), head_weights[0].shape(), "key_scores");
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) s[j] += a[i * m + j];
    }
  }
  const T denom = static_cast<T>(n * head_weights.size());
  for (auto& v : s.data()) v /= denom;
  return s;
}

/// Scores from a stacked [heads, N, N/4] attention tensor.
template <class T>
Tensor<T> key_scores(const Tensor<T>& attention) {
  detail::require_rank(attention.shape(), 3, "key_scores");
  const std::size_t heads = attention.extent(0);
  const std::size_t per = attention.extent(1) * attention.extent(2);
  std::vector<Tensor<T>> split;
  for (std::size_t h = 0; h < heads; ++h) {
    auto first = attention.data().begin() + static_cast<std::ptrdiff_t>(h * per);
    split.emplace_back(Shape{attention.extent(1), attention.extent(2)},
                       std::vector<T>(first, first + static_cast<std::ptrdiff_t>(per)));
  }
  return key_scores<T>(split);
}

/// Per-sample record of what the coarse stage decided.
template <class T>
struct PsaTrace {
  std::vector<Tensor<T>> key_scores;
  std::vector<TopKSelection<T>> selections;
  std::vector<GridDims> coarse_grids;
};

// ---------------------------------------------------------------------------
// Generic forward (eager or recorded)
// ---------------------------------------------------------------------------

namespace detail {

template <class Ctx>
struct AttentionOut {
  typename Ctx::Value out;
  std::vector<typename Ctx::Value> weights;  // per head, [queries, keys]
};

/// Multi-head scaled dot-product attention; heads are contiguous column
/// blocks of width dim / heads.
template <class Ctx>
AttentionOut<Ctx> attention(Ctx& ctx, const typename Ctx::Value& q,
                            const typename Ctx::Value& k,
                            const typename Ctx::Value& v, std::size_t heads) {
  using T = typename Ctx::Scalar;
  const std::size_t dim = ctx.value(q).extent(1);
  const std::size_t dk = dim / heads;
  const T inv = T{1} / std::sqrt(static_cast<T>(dk));
  AttentionOut<Ctx> r;
  std::vector<typename Ctx::Value> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = heads == 1 ? q : ctx.slice_cols(q, h * dk, dk);
    auto kh = heads == 1 ? k : ctx.slice_cols(k, h * dk, dk);
    auto vh = heads == 1 ? v : ctx.slice_cols(v, h * dk, dk);
    auto a = ctx.softmax_rows(ctx.scale(ctx.matmul(qh, ctx.transpose(kh)), inv));
    outs.push_back(ctx.matmul(a, vh));
    r.weights.push_back(a);
  }
  r.out = heads == 1 ? outs[0] : ctx.concat_cols(outs);
  return r;
}

/// Projections of the coarse map, computed once and shared by every stage.
template <class Ctx>
struct SharedKeys {
  typename Ctx::Value k_tokens;  // [N/4, C']
  typename Ctx::Value v_tokens;  // [N/4, C']
  typename Ctx::Value v_map;     // [C', H/2, W/2]
  typename Ctx::Value x_tokens;  // [N, C'] fine tokens for the refined stage
  GridDims fine;
  GridDims coarse;
};

template <class Ctx>
std::vector<SharedKeys<Ctx>> shared_keys(
    Ctx& ctx, const std::vector<typename Ctx::Value>& xs,
    const std::vector<typename Ctx::Value>& us,
    const PsaWeights<typename Ctx::Value>& w, const PsaConfig& cfg) {
  if (xs.size() != us.size() || xs.empty()) {
    throw DimensionError("psa: fine and coarse batches differ in size");
  }
  std::vector<SharedKeys<Ctx>> out;
  for (std::size_t b = 0; b < xs.size(); ++b) {
    // Shapes are copied: recording may reallocate the tape's value storage.
    const Shape x = ctx.value(xs[b]).shape();
    const Shape u = ctx.value(us[b]).shape();
    require_rank(x, 3, "psa fine map");
    require_rank(u, 3, "psa coarse map");
    if (x[0] != cfg.token_dim || u[0] != cfg.token_dim) {
      throw DimensionError("psa: inputs must carry token_dim = " +
                           std::to_string(cfg.token_dim) + " channels, got " +
                           shape_str(x) + " and " + shape_str(u));
    }
    if (x[1] != 2 * u[1] || x[2] != 2 * u[2]) {
      throw DimensionError("psa: maps are not adjacent pyramid levels: " +
                           shape_str(x) + " vs " + shape_str(u));
    }
    auto v_map = ctx.conv1x1(us[b], w.wv);
    out.push_back({ctx.map_to_tokens(ctx.conv1x1(us[b], w.wk)),
                   ctx.map_to_tokens(v_map), v_map, ctx.map_to_tokens(xs[b]),
                   GridDims{x[1], x[2]}, GridDims{u[1], u[2]}});
  }
  return out;
}

/// One PSA stage over a batch. `query_src` are [C', H, W] maps; `kv_w`
/// supplies the shared key/value projections used by the refined stage.
template <class Ctx>
std::vector<typename Ctx::Value> psa_stage(
    Ctx& ctx, const std::vector<typename Ctx::Value>& query_src,
    const std::vector<SharedKeys<Ctx>>& keys,
    const PsaWeights<typename Ctx::Value>& w,
    const PsaWeights<typename Ctx::Value>& kv_w, const PsaConfig& cfg,
    const std::string& prefix, PsaTrace<typename Ctx::Scalar>* trace) {
  using T = typename Ctx::Scalar;
  using V = typename Ctx::Value;
  const bool gated = cfg.fusion == FusionMode::self_gating;
  if (gated && !w.gate) {
    throw ContractError("self_gating fusion requires gate parameters");
  }

  std::vector<V> fused, cpe_raw;
  for (std::size_t b = 0; b < query_src.size(); ++b) {
    const SharedKeys<Ctx>& kv = keys[b];
    const std::size_t n = kv.fine.count();
    const std::size_t m = kv.coarse.count();
    auto q = ctx.map_to_tokens(ctx.conv1x1(query_src[b], w.wq));
    auto coarse = attention(ctx, q, kv.k_tokens, kv.v_tokens, cfg.heads);
    ctx.counter().coarse += n * m;

    std::optional<V> fine;
    const bool select = cfg.fine_enabled && cfg.k > 0;
    if (select || trace) {
      std::vector<Tensor<T>> heads;
      for (const auto& a : coarse.weights) heads.push_back(ctx.value(a));
      Tensor<T> scores = key_scores<T>(heads);
      TopKSelection<T> sel;
      if (select) sel = select_fine_indices<T>(scores.data(), cfg, kv.coarse);
      if (!sel.empty()) {
        auto xsel = ctx.gather_rows(kv.x_tokens, sel.fine_indices);
        auto ksel = ctx.matmul(xsel, ctx.transpose(kv_w.wk));
        auto vsel = ctx.matmul(xsel, ctx.transpose(kv_w.wv));
        fine = attention(ctx, q, ksel, vsel, cfg.heads).out;
        ctx.counter().fine += n * sel.fine_indices.size();
      }
      if (trace) {
        trace->key_scores.push_back(std::move(scores));
        trace->selections.push_back(std::move(sel));
        trace->coarse_grids.push_back(kv.coarse);
      }
    }

    if (!gated) {
      fused.push_back(fine ? ctx.add(coarse.out, *fine) : coarse.out);
    } else {
      const Shape tok{n, cfg.token_dim};
      V of = fine ? *fine : ctx.constant(Tensor<T>(tok));
      auto logits = ctx.add_bias(
          ctx.matmul(ctx.concat_cols({coarse.out, of}), ctx.transpose(w.gate->weight)),
          w.gate->bias);
      auto g = ctx.sigmoid(logits);
      auto keep = ctx.sub(ctx.constant(Tensor<T>(tok, T{1})), g);
      fused.push_back(ctx.add(ctx.mul(g, of), ctx.mul(keep, coarse.out)));
    }
    cpe_raw.push_back(ctx.depthwise_conv7x7(kv.v_map, w.cpe_kernel));
  }

  auto cpe = ctx.batch_norm(cpe_raw, w.cpe_norm, join_name(prefix, "cpe_norm"));
  std::vector<V> pre;
  for (std::size_t b = 0; b < query_src.size(); ++b) {
    const GridDims fine = keys[b].fine;
    auto cpe_tokens = ctx.map_to_tokens(ctx.upsample_nearest2x(cpe[b]));
    auto sum = ctx.add(fused[b], cpe_tokens);
    pre.push_back(ctx.conv1x1(ctx.tokens_to_map(sum, fine.height, fine.width), w.wo));
  }
  return ctx.batch_norm(pre, w.out_norm, join_name(prefix, "out_norm"));
}

template <class Ctx>
std::vector<typename Ctx::Value> psa_forward(
    Ctx& ctx, const std::vector<typename Ctx::Value>& xs,
    const std::vector<typename Ctx::Value>& us,
    const PsaWeights<typename Ctx::Value>& w, const PsaConfig& cfg,
    const std::string& prefix, PsaTrace<typename Ctx::Scalar>* trace = nullptr) {
  cfg.validate();
  const auto keys = shared_keys(ctx, xs, us, w, cfg);
  return psa_stage(ctx, xs, keys, w, w, cfg, prefix, trace);
}

inline std::string stage_prefix(const std::string& prefix, std::size_t stage) {
  return stage == 0 ? prefix : prefix + std::to_string(stage);
}

/// Stage i > 0 takes its queries from stage i - 1; keys and values are
/// projected once with stage 0's weights. Outputs are concatenated.
template <class Ctx>
std::vector<typename Ctx::Value> psa_stack_forward(
    Ctx& ctx, const std::vector<typename Ctx::Value>& xs,
    const std::vector<typename Ctx::Value>& us,
    const std::vector<PsaWeights<typename Ctx::Value>>& stages,
    const PsaConfig& cfg, const std::string& prefix,
    std::vector<SharedKeys<Ctx>>* keys_out = nullptr) {
  cfg.validate();
  if (stages.size() != cfg.stack_depth) {
    throw ContractError("psa stack: " + std::to_string(stages.size()) +
                        " parameter sets for depth " +
                        std::to_string(cfg.stack_depth));
  }
  const auto keys = shared_keys(ctx, xs, us, stages[0], cfg);
  if (keys_out) *keys_out = keys;
  std::vector<typename Ctx::Value> src = xs;
  std::vector<typename Ctx::Value> out;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    src = psa_stage(ctx, src, keys, stages[s], stages[0], cfg,
                    stage_prefix(prefix, s), nullptr);
    if (s == 0) {
      out = src;
    } else {
      for (std::size_t b = 0; b < out.size(); ++b) {
        out[b] = ctx.concat_channels(out[b], src[b]);
      }
    }
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Eager API
// ---------------------------------------------------------------------------

template <class T>
struct Projections {
  Tensor<T> q;  // [N, C']
  Tensor<T> k;  // [N/4, C']
  Tensor<T> v;  // [N/4, C']
};

/// 1x1 convolutions as per-token linear maps: Q = X Wq^T, K = U Wk^T,
/// V = U Wv^T.
template <class T>
Projections<T> project_qkv(const TokenMatrix<T>& x, const TokenMatrix<T>& u,
                           const PsaParams<T>& p) {
  if (x.tokens() != 4 * u.tokens()) {
    throw DimensionError("project_qkv: token counts " +
                         std::to_string(x.tokens()) + " and " +
                         std::to_string(u.tokens()) + " are not 4:1");
  }
  return {matmul(x.tensor(), transpose(p.wq)), matmul(u.tensor(), transpose(p.wk)),
          matmul(u.tensor(), transpose(p.wv))};
}

template <class T>
struct CoarseAttention {
  Tensor<T> output;   // [N, C']
  Tensor<T> weights;  // [heads, N, N/4]
};

template <class T>
CoarseAttention<T> coarse_attention(const Tensor<T>& q, const Tensor<T>& k,
                                    const Tensor<T>& v, std::size_t heads) {
  if (heads == 0 || q.extent(1) % heads != 0 || k.extent(1) != q.extent(1) ||
      v.extent(1) != q.extent(1) || k.extent(0) != v.extent(0)) {
    throw DimensionError("coarse_attention: incompatible shapes " +
                         shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                         ", " + shape_str(v.shape()) + " for " +
                         std::to_string(heads) + " heads");
  }
  Eager<T> ctx;
  auto r = detail::attention(ctx, q, k, v, heads);
  const std::size_t n = q.extent(0), m = k.extent(0);
  Tensor<T> w({heads, n, m});
  for (std::size_t h = 0; h < heads; ++h) {
    std::copy(r.weights[h].data().begin(), r.weights[h].data().end(),
              w.data().begin() + static_cast<std::ptrdiff_t>(h * n * m));
  }
  return {std::move(r.out), std::move(w)};
}

/// Full (unselected) attention of q over k/v; reference for cost and
/// accuracy comparisons.
template <class T>
Tensor<T> dense_attention(const Tensor<T>& q, const Tensor<T>& k,
                          const Tensor<T>& v, std::size_t heads) {
  Eager<T> ctx;
  return detail::attention(ctx, q, k, v, heads).out;
}

/// Refined attention over the selected fine tokens, reusing Wk and Wv.
/// An empty selection contributes zeros.
template <class T>
Tensor<T> fine_attention(const Tensor<T>& q, const Tensor<T>& x_tokens,
                         const PsaParams<T>& p, const TopKSelection<T>& sel,
                         std::size_t heads) {
  if (sel.fine_indices.empty()) return Tensor<T>(q.shape());
  const Tensor<T> xsel = gather_rows<T>(x_tokens, sel.fine_indices);
  const Tensor<T> ksel = matmul(xsel, transpose(p.wk));
  const Tensor<T> vsel = matmul(xsel, transpose(p.wv));
  return dense_attention(q, ksel, vsel, heads);
}

/// Depthwise 7x7 on the coarse value map, nearest-upsampled to the fine grid.
template <class T>
Tensor<T> conv_positional_encoding(const Tensor<T>& v_tokens, GridDims coarse,
                                   const Tensor<T>& kernel) {
  const Tensor<T> vmap = tokens_to_map(v_tokens, coarse.height, coarse.width);
  return map_to_tokens(upsample_nearest2x(depthwise_conv7x7(vmap, kernel)));
}

/// g = sigmoid(concat(O_coarse, O_fine) W_g^T + b_g), one gate per token and
/// channel.
template <class T>
Tensor<T> self_gate(const Tensor<T>& o_coarse, const Tensor<T>& o_fine,
                    const GateWeights<Tensor<T>>& gate, const PsaConfig& cfg) {
  if (cfg.fusion != FusionMode::self_gating) {
    throw ContractError("self_gate called with sum fusion configured");
  }
  const std::vector<Tensor<T>> parts{o_coarse, o_fine};
  return sigmoid(add_bias(matmul(concat_cols<T>(parts), transpose(gate.weight)),
                          gate.bias));
}

/// g * O_fine + (1 - g) * O_coarse
template <class T>
Tensor<T> gated_fusion(const Tensor<T>& g, const Tensor<T>& o_fine,
                       const Tensor<T>& o_coarse) {
  return add(mul(g, o_fine), mul(sub(Tensor<T>(g.shape(), T{1}), g), o_coarse));
}

/// Inference-mode PSA on one pair of adjacent maps already carrying C'
/// channels.
template <class T>
FeatureMap<T> psa_forward(const FeatureMap<T>& x, const FeatureMap<T>& u,
                          const PsaParams<T>& p, const PsaConfig& cfg,
                          const NormBuffers<T>& buffers,
                          PsaTrace<T>* trace = nullptr,
                          InteractionCounter* counter = nullptr) {
  Eager<T> ctx(NormMode::infer, &buffers);
  auto out = detail::psa_forward(ctx, {x.tensor()}, {u.tensor()}, p, cfg,
                                 kPsaPrefix, trace);
  if (counter) *counter = ctx.counter();
  return FeatureMap<T>(std::move(out[0]));
}

template <class T>
FeatureMap<T> psa_forward(const FeatureMap<T>& x, const FeatureMap<T>& u,
                          const PsaModule<T>& m, const PsaConfig& cfg,
                          PsaTrace<T>* trace = nullptr,
                          InteractionCounter* counter = nullptr) {
  return psa_forward(x, u, m.params, cfg, m.buffers, trace, counter);
}

/// Stack of cfg.stack_depth PSA stages; output has stack_depth * C' channels.
/// Stage s reads normalization buffers under "psa", "psa1", "psa2", ...
template <class T>
FeatureMap<T> psa_stack_forward(const FeatureMap<T>& x, const FeatureMap<T>& u,
                                const std::vector<PsaParams<T>>& stages,
                                const PsaConfig& cfg,
                                const NormBuffers<T>& buffers) {
  Eager<T> ctx(NormMode::infer, &buffers);
  auto out = detail::psa_stack_forward(ctx, {x.tensor()}, {u.tensor()}, stages,
                                       cfg, kPsaPrefix);
  return FeatureMap<T>(std::move(out[0]));
}

/// Parameters and buffers for a stack of cfg.stack_depth stages.
template <class T>
std::pair<std::vector<PsaParams<T>>, NormBuffers<T>> init_psa_stack(
    const PsaConfig& cfg, Rng& rng) {
  std::vector<PsaParams<T>> stages;
  NormBuffers<T> buffers;
  for (std::size_t s = 0; s < cfg.stack_depth; ++s) {
    const std::string prefix = detail::stage_prefix(kPsaPrefix, s);
    auto m = PsaModule<T>::init(cfg, rng, prefix);
    stages.push_back(std::move(m.params));
    buffers.merge(m.buffers);
  }
  return {std::move(stages), std::move(buffers)};
}

}  // namespace pst
