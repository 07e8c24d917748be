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

// The PST block: input projections of both pyramid levels, PSA, a residual
// MLP, and a closing conv over [raw fine input ++ attention branch].
//
//   X = norm(conv(X_raw))             U = norm(conv(U_raw))
//   B = psa(X, U);  B = B + W2 silu(W1 B)
//   out = norm(conv(concat(X_raw, B)))          -> [2C', H, W]

#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pst/psa.hpp"

namespace pst {

inline constexpr std::size_t kMlpExtension = 2;

struct PstConfig {
  std::size_t in_channels = 8;   // C, fine input
  std::size_t up_channels = 16;  // C_up, coarse input
  PsaConfig psa = PsaConfig::for_dim(32);

  std::size_t token_dim() const { return psa.token_dim; }
  std::size_t out_channels() const { return 2 * psa.token_dim; }
  std::size_t mlp_hidden() const { return kMlpExtension * psa.token_dim; }

  void validate() const {
    psa.validate();
    if (in_channels == 0 || up_channels == 0) {
      throw ContractError("PST input channel counts must be >= 1");
    }
  }

  static PstConfig make(std::size_t c, std::size_t c_up, std::size_t token_dim) {
    return {c, c_up, PsaConfig::for_dim(token_dim)};
  }
};

enum class ModelSize { nano, small, medium };

/// Token dimension scales 1:2:4 across N/S/M, capped at 2048; heads follow
/// the C'/32 rule. Input channels default to the scaled C'.
inline PstConfig scale_config(ModelSize size, std::size_t base_token_dim,
                              std::size_t in_channels = 0,
                              std::size_t up_channels = 0) {
  const std::size_t mult = size == ModelSize::nano    ? 1
                           : size == ModelSize::small ? 2
                                                      : 4;
  const std::size_t c = std::min(base_token_dim * mult, kMaxTokenDim);
  PstConfig cfg = PstConfig::make(in_channels ? in_channels : c,
                                  up_channels ? up_channels : c, c);
  cfg.psa.k = 8;
  cfg.psa.score_threshold = 1e-6;
  return cfg;
}

template <class V>
struct PstWeights {
  V in_conv_x;  // [C', C]
  NormWeights<V> in_norm_x;
  V in_conv_u;  // [C', C_up]
  NormWeights<V> in_norm_u;
  PsaWeights<V> psa;
  V mlp_expand;   // [2C', C']
  V mlp_project;  // [C', 2C']
  V end_conv;     // [2C', C + C']
  NormWeights<V> end_norm;
};

template <class T>
using PstParams = PstWeights<Tensor<T>>;

namespace detail {
template <class Self, class F>
void visit_pst(Self& w, const std::string& prefix, F&& f) {
  f(ParamInfo{join_name(prefix, "in_conv_x"), ParamRole::weight}, w.in_conv_x);
  visit_params(w.in_norm_x, join_name(prefix, "in_norm_x"), f);
  f(ParamInfo{join_name(prefix, "in_conv_u"), ParamRole::weight}, w.in_conv_u);
  visit_params(w.in_norm_u, join_name(prefix, "in_norm_u"), f);
  visit_params(w.psa, join_name(prefix, "psa"), f);
  f(ParamInfo{join_name(prefix, "mlp.expand"), ParamRole::weight}, w.mlp_expand);
  f(ParamInfo{join_name(prefix, "mlp.project"), ParamRole::weight}, w.mlp_project);
  f(ParamInfo{join_name(prefix, "end_conv"), ParamRole::weight}, w.end_conv);
  visit_params(w.end_norm, join_name(prefix, "end_norm"), f);
}
}  // namespace detail

template <class V, class F>
void visit_params(PstWeights<V>& w, const std::string& prefix, F&& f) {
  detail::visit_pst(w, prefix, f);
}
template <class V, class F>
void visit_params(const PstWeights<V>& w, const std::string& prefix, F&& f) {
  detail::visit_pst(w, prefix, f);
}

template <class To, class From, class F>
PstWeights<To> transform_params(const PstWeights<From>& w,
                                const std::string& prefix, F&& f) {
  const auto one = [&](const char* name, const From& v) {
    return f(ParamInfo{join_name(prefix, name), ParamRole::weight}, v);
  };
  PstWeights<To> r;
  r.in_conv_x = one("in_conv_x", w.in_conv_x);
  r.in_norm_x = transform_params<To>(w.in_norm_x, join_name(prefix, "in_norm_x"), f);
  r.in_conv_u = one("in_conv_u", w.in_conv_u);
  r.in_norm_u = transform_params<To>(w.in_norm_u, join_name(prefix, "in_norm_u"), f);
  r.psa = transform_params<To>(w.psa, join_name(prefix, "psa"), f);
  r.mlp_expand = one("mlp.expand", w.mlp_expand);
  r.mlp_project = one("mlp.project", w.mlp_project);
  r.end_conv = one("end_conv", w.end_conv);
  r.end_norm = transform_params<To>(w.end_norm, join_name(prefix, "end_norm"), f);
  return r;
}

inline PstWeights<Shape> pst_shapes(const PstConfig& cfg) {
  const std::size_t c = cfg.in_channels, cu = cfg.up_channels;
  const std::size_t t = cfg.token_dim(), hid = cfg.mlp_hidden();
  return {{t, c},
          norm_shapes(t),
          {t, cu},
          norm_shapes(t),
          psa_shapes(cfg.psa),
          {hid, t},
          {t, hid},
          {cfg.out_channels(), c + t},
          norm_shapes(cfg.out_channels())};
}

template <class T>
struct PstModule {
  PstParams<T> params;
  NormBuffers<T> buffers;

  static PstModule init(const PstConfig& cfg, Rng& rng,
                        const std::string& prefix = "pst") {
    cfg.validate();
    const auto shapes = pst_shapes(cfg);
    return {materialize<T>(shapes, prefix, rng),
            init_norm_buffers<T>(shapes, prefix)};
  }
};

namespace detail {

template <class Ctx>
std::vector<typename Ctx::Value> pst_forward(
    Ctx& ctx, const std::vector<typename Ctx::Value>& xs_raw,
    const std::vector<typename Ctx::Value>& us_raw,
    const PstWeights<typename Ctx::Value>& w, const PstConfig& cfg,
    const std::string& prefix, PsaTrace<typename Ctx::Scalar>* trace = nullptr) {
  using V = typename Ctx::Value;
  cfg.validate();
  if (xs_raw.size() != us_raw.size() || xs_raw.empty()) {
    throw DimensionError("pst: fine and coarse batches differ in size");
  }
  std::vector<V> xp, up;
  for (std::size_t b = 0; b < xs_raw.size(); ++b) {
    const Shape x = ctx.value(xs_raw[b]).shape();
    const Shape u = ctx.value(us_raw[b]).shape();
    require_rank(x, 3, "pst fine input");
    require_rank(u, 3, "pst coarse input");
    if (x[0] != cfg.in_channels || u[0] != cfg.up_channels) {
      throw DimensionError("pst: expected " + std::to_string(cfg.in_channels) +
                           " / " + std::to_string(cfg.up_channels) +
                           " input channels, got " + shape_str(x) + " / " +
                           shape_str(u));
    }
    if (x[1] != 2 * u[1] || x[2] != 2 * u[2]) {
      throw DimensionError("pst: inputs are not adjacent pyramid levels: " +
                           shape_str(x) + " vs " + shape_str(u));
    }
    xp.push_back(ctx.conv1x1(xs_raw[b], w.in_conv_x));
    up.push_back(ctx.conv1x1(us_raw[b], w.in_conv_u));
  }
  const auto xs = ctx.batch_norm(xp, w.in_norm_x, join_name(prefix, "in_norm_x"));
  const auto us = ctx.batch_norm(up, w.in_norm_u, join_name(prefix, "in_norm_u"));
  const auto branch =
      psa_forward(ctx, xs, us, w.psa, cfg.psa, join_name(prefix, "psa"), trace);

  std::vector<V> pre;
  for (std::size_t b = 0; b < branch.size(); ++b) {
    auto hidden = ctx.silu(ctx.conv1x1(branch[b], w.mlp_expand));
    auto mixed = ctx.add(branch[b], ctx.conv1x1(hidden, w.mlp_project));
    pre.push_back(ctx.conv1x1(ctx.concat_channels(xs_raw[b], mixed), w.end_conv));
  }
  return ctx.batch_norm(pre, w.end_norm, join_name(prefix, "end_norm"));
}

}  // namespace detail

/// Inference-mode PST block on one pair of adjacent maps.
template <class T>
FeatureMap<T> pst_forward(const FeatureMap<T>& x_raw, const FeatureMap<T>& u_raw,
                          const PstParams<T>& p, const PstConfig& cfg,
                          const NormBuffers<T>& buffers,
                          const std::string& prefix = "pst",
                          PsaTrace<T>* trace = nullptr,
                          InteractionCounter* counter = nullptr) {
  Eager<T> ctx(NormMode::infer, &buffers);
  auto out = detail::pst_forward(ctx, {x_raw.tensor()}, {u_raw.tensor()}, p,
                                 cfg, prefix, trace);
  if (counter) *counter = ctx.counter();
  return FeatureMap<T>(std::move(out[0]));
}

template <class T>
FeatureMap<T> pst_forward(const FeatureMap<T>& x_raw, const FeatureMap<T>& u_raw,
                          const PstModule<T>& m, const PstConfig& cfg,
                          PsaTrace<T>* trace = nullptr,
                          InteractionCounter* counter = nullptr) {
  return pst_forward(x_raw, u_raw, m.params, cfg, m.buffers, "pst", trace, counter);
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

struct LedgerEntry {
  std::string name;
  Shape shape;
  std::uint64_t count = 0;
  std::string term;
};

struct ParamLedger {
  std::vector<LedgerEntry> entries;
  std::uint64_t total = 0;
  std::uint64_t closed_form = 0;

  std::string to_table() const {
    std::size_t width = 6;
    for (const auto& e : entries) width = std::max(width, e.name.size());
    std::ostringstream os;
    const auto pad = [&](const std::string& s) {
      return s + std::string(width - std::min(width, s.size()), ' ');
    };
    os << pad("tensor") << "  " << "shape" << std::string(10, ' ')
       << "params  term\n";
    for (const auto& e : entries) {
      std::string sh = shape_str(e.shape);
      sh += std::string(sh.size() < 15 ? 15 - sh.size() : 1, ' ');
      std::string cnt = std::to_string(e.count);
      cnt = std::string(cnt.size() < 6 ? 6 - cnt.size() : 0, ' ') + cnt;
      os << pad(e.name) << "  " << sh << cnt << "  " << e.term << '\n';
    }
    os << "total " << total << '\n';
    os << "closed form 10C'^2 + (C_up + 3C + 61)C' = " << closed_form << '\n';
    os << "check: " << (total == closed_form ? "OK" : "MISMATCH") << '\n';
    return os.str();
  }
};

/// 10C'^2 + (C_up + 3C + 61)C', plus the gate's 2C'^2 + C' when self-gating
/// fusion is configured.
inline std::uint64_t closed_form_param_count(const PstConfig& cfg) {
  const std::uint64_t c = cfg.in_channels, cu = cfg.up_channels,
                      t = cfg.token_dim();
  std::uint64_t n = 10 * t * t + (cu + 3 * c + 61) * t;
  if (cfg.psa.fusion == FusionMode::self_gating) n += 2 * t * t + t;
  return n;
}

namespace detail {

inline std::string ledger_term(const ParamInfo& info) {
  const std::string& n = info.name;
  const auto has = [&](const char* s) { return n.find(s) != std::string::npos; };
  if (info.role == ParamRole::gamma || info.role == ParamRole::beta) return "all BNs";
  if (has("gate.")) return "self-gate";
  if (has("in_conv_")) return "2 input convs";
  if (has("mlp.")) return "MLP";
  if (has(".wq") || has(".wk") || has(".wv")) return "QKV convs";
  if (has("cpe_kernel")) return "PE dconv";
  if (has(".wo")) return "end PSA";
  if (has("end_conv")) return "end PST";
  return "unassigned";
}

}  // namespace detail

/// Enumerates every learnable tensor of a PST block and checks each term of
/// the closed form against the enumerated sizes.
inline ParamLedger param_count(const PstConfig& cfg) {
  cfg.validate();
  ParamLedger ledger;
  std::map<std::string, std::uint64_t> by_term;
  std::map<std::string, std::string> members;
  visit_params(pst_shapes(cfg), "pst", [&](const ParamInfo& info, const Shape& s) {
    const std::string term = detail::ledger_term(info);
    const std::uint64_t n = shape_numel(s);
    ledger.entries.push_back({info.name, s, n, term});
    ledger.total += n;
    by_term[term] += n;
    members[term] += (members[term].empty() ? "" : ", ") + info.name;
  });
  ledger.closed_form = closed_form_param_count(cfg);

  const std::uint64_t c = cfg.in_channels, cu = cfg.up_channels,
                      t = cfg.token_dim();
  std::map<std::string, std::uint64_t> expected{
      {"2 input convs", c * t + cu * t}, {"MLP", 4 * t * t},
      {"QKV convs", 3 * t * t},          {"PE dconv", 49 * t},
      {"end PSA", t * t},                {"end PST", 2 * (c + t) * t},
      {"all BNs", 12 * t}};
  if (cfg.psa.fusion == FusionMode::self_gating) expected["self-gate"] = 2 * t * t + t;

  for (const auto& [term, count] : by_term) {
    auto it = expected.find(term);
    if (it == expected.end() || it->second != count) {
      throw AccountingError("parameter ledger term '" + term + "' (" +
                            members[term] + ") has " + std::to_string(count) +
                            " parameters, closed form expects " +
                            (it == expected.end() ? std::string("none")
                                                  : std::to_string(it->second)));
    }
  }
  if (ledger.total != ledger.closed_form) {
    throw AccountingError("parameter ledger total " + std::to_string(ledger.total) +
                          " != closed form " + std::to_string(ledger.closed_form));
  }
  return ledger;
}

}  // namespace pst
