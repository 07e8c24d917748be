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

// Ready-made gradient-check problems: one per differentiable op, and the
// coarse path of a full PST block.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pst/gradcheck.hpp"
#include "pst/pst_block.hpp"

namespace pst {

struct GradCase {
  std::string name;
  std::vector<NamedTensor> params;
  LossBuilder build;
  OpKind op = OpKind::add;  // rule under test, for fault injection
};

/// Every tensor of a bundle as a named gradcheck parameter, in visit order.
template <template <class> class Bundle>
std::vector<NamedTensor> bundle_params(const Bundle<Tensor<double>>& b,
                                       const std::string& prefix) {
  std::vector<NamedTensor> out;
  visit_params(b, prefix, [&](const ParamInfo& info, const Tensor<double>& t) {
    out.push_back({info.name, t});
  });
  return out;
}

/// Rebuilds a ValueId bundle from leaves bound in visit order.
template <template <class> class Bundle>
Bundle<ValueId> bundle_ids(const Bundle<Shape>& shapes, const std::string& prefix,
                           const std::vector<ValueId>& ids, std::size_t first = 0) {
  std::size_t i = first;
  return transform_params<ValueId>(
      shapes, prefix, [&](const ParamInfo&, const Shape&) { return ids.at(i++); });
}

namespace detail {

/// sum(y * R) for a fixed random R; keeps every output element in play.
inline ValueId weighted_sum(Tape<double>& t, ValueId y, const Tensor<double>& r) {
  return t.sum(t.mul(y, t.constant(r)));
}

}  // namespace detail

/// One small random instance per differentiable op.
inline std::vector<GradCase> op_grad_cases(Rng& rng) {
  using Tn = Tensor<double>;
  using Ids = std::vector<ValueId>;
  const auto rnd = [&](const Shape& s) { return random_tensor<double>(s, rng); };
  std::vector<GradCase> cases;
  const auto unary = [&](std::string name, OpKind op, const Shape& in,
                         const Shape& out,
                         std::function<ValueId(Tape<double>&, ValueId)> f) {
    const Tn r = rnd(out);
    cases.push_back({std::move(name), {{"x", rnd(in)}},
                     [f, r](Tape<double>& t, const Ids& p) {
                       return detail::weighted_sum(t, f(t, p[0]), r);
                     },
                     op});
  };
  const auto binary = [&](std::string name, OpKind op, const Shape& a,
                          const Shape& b, const Shape& out,
                          std::function<ValueId(Tape<double>&, ValueId, ValueId)> f) {
    const Tn r = rnd(out);
    cases.push_back({std::move(name), {{"a", rnd(a)}, {"b", rnd(b)}},
                     [f, r](Tape<double>& t, const Ids& p) {
                       return detail::weighted_sum(t, f(t, p[0], p[1]), r);
                     },
                     op});
  };

  binary("matmul", OpKind::matmul, {3, 4}, {4, 5}, {3, 5},
         [](auto& t, ValueId a, ValueId b) { return t.matmul(a, b); });
  unary("transpose", OpKind::transpose, {3, 4}, {4, 3},
        [](auto& t, ValueId x) { return t.transpose(x); });
  unary("softmax_rows", OpKind::softmax_rows, {3, 5}, {3, 5},
        [](auto& t, ValueId x) { return t.softmax_rows(t.scale(x, 3.0)); });
  binary("conv1x1", OpKind::conv1x1, {3, 4, 4}, {5, 3}, {5, 4, 4},
         [](auto& t, ValueId x, ValueId w) { return t.conv1x1(x, w); });
  binary("depthwise_conv7x7", OpKind::depthwise_conv7x7, {2, 5, 4},
         {2, kDepthwiseSize, kDepthwiseSize}, {2, 5, 4},
         [](auto& t, ValueId x, ValueId k) { return t.depthwise_conv7x7(x, k); });

  {
    const Tn r0 = rnd({3, 2, 2}), r1 = rnd({3, 2, 2});
    cases.push_back(
        {"batch_norm_train",
         {{"x0", rnd({3, 2, 2})}, {"x1", rnd({3, 2, 2})}, {"gamma", rnd({3})},
          {"beta", rnd({3})}},
         [r0, r1](Tape<double>& t, const Ids& p) {
           const ValueId xs[] = {p[0], p[1]};
           auto bn = t.batch_norm_train(xs, p[2], p[3], RunningStats<double>::identity(3));
           return t.add(detail::weighted_sum(t, bn.outputs[0], r0),
                        detail::weighted_sum(t, bn.outputs[1], r1));
         },
         OpKind::batch_norm_train});
  }
  {
    RunningStats<double> stats{rnd({3}), random_tensor<double>({3}, rng, 0.5, 2.0)};
    const Tn r = rnd({3, 2, 3});
    cases.push_back({"batch_norm_infer",
                     {{"x", rnd({3, 2, 3})}, {"gamma", rnd({3})}, {"beta", rnd({3})}},
                     [stats, r](Tape<double>& t, const Ids& p) {
                       return detail::weighted_sum(
                           t, t.batch_norm_infer(p[0], p[1], p[2], stats), r);
                     },
                     OpKind::batch_norm_infer});
  }

  unary("upsample_nearest2x", OpKind::upsample_nearest2x, {2, 2, 3}, {2, 4, 6},
        [](auto& t, ValueId x) { return t.upsample_nearest2x(x); });
  unary("downsample_avg2x", OpKind::downsample_avg2x, {2, 4, 6}, {2, 2, 3},
        [](auto& t, ValueId x) { return t.downsample_avg2x(x); });
  binary("concat_channels", OpKind::concat_channels, {2, 3, 3}, {3, 3, 3}, {5, 3, 3},
         [](auto& t, ValueId a, ValueId b) { return t.concat_channels(a, b); });
  unary("gather_rows", OpKind::gather_rows, {6, 3}, {4, 3},
        [](auto& t, ValueId x) { return t.gather_rows(x, {4, 1, 1, 5}); });
  binary("add", OpKind::add, {3, 4}, {3, 4}, {3, 4},
         [](auto& t, ValueId a, ValueId b) { return t.add(a, b); });
  binary("sub", OpKind::sub, {3, 4}, {3, 4}, {3, 4},
         [](auto& t, ValueId a, ValueId b) { return t.sub(a, b); });
  binary("mul", OpKind::mul, {3, 4}, {3, 4}, {3, 4},
         [](auto& t, ValueId a, ValueId b) { return t.mul(a, b); });
  unary("scale", OpKind::scale, {3, 4}, {3, 4},
        [](auto& t, ValueId x) { return t.scale(x, -1.75); });
  unary("silu", OpKind::silu, {3, 4}, {3, 4},
        [](auto& t, ValueId x) { return t.silu(t.scale(x, 3.0)); });
  unary("sigmoid", OpKind::sigmoid, {3, 4}, {3, 4},
        [](auto& t, ValueId x) { return t.sigmoid(t.scale(x, 3.0)); });
  binary("add_bias", OpKind::add_bias, {4, 3}, {3}, {4, 3},
         [](auto& t, ValueId x, ValueId b) { return t.add_bias(x, b); });
  unary("mean", OpKind::mean, {3, 4}, {1},
        [](auto& t, ValueId x) { return t.mean(t.mul(x, x)); });
  unary("sum", OpKind::sum, {3, 4}, {1},
        [](auto& t, ValueId x) { return t.sum(t.mul(x, x)); });
  unary("mean_rows", OpKind::mean_rows, {5, 3}, {1, 3},
        [](auto& t, ValueId x) { return t.mean_rows(x); });
  {
    cases.push_back({"cross_entropy",
                     {{"logits", random_tensor<double>({4, 3}, rng, -3.0, 3.0)}},
                     [](Tape<double>& t, const Ids& p) {
                       return t.cross_entropy(p[0], {2, 0, 1, 2});
                     },
                     OpKind::cross_entropy});
  }
  unary("map_to_tokens", OpKind::map_to_tokens, {3, 2, 4}, {8, 3},
        [](auto& t, ValueId x) { return t.map_to_tokens(x); });
  unary("tokens_to_map", OpKind::tokens_to_map, {8, 3}, {3, 2, 4},
        [](auto& t, ValueId x) { return t.tokens_to_map(x, 2, 4); });
  unary("slice_cols", OpKind::slice_cols, {4, 6}, {4, 2},
        [](auto& t, ValueId x) { return t.slice_cols(x, 3, 2); });
  binary("concat_cols", OpKind::concat_cols, {4, 2}, {4, 3}, {4, 5},
         [](auto& t, ValueId a, ValueId b) {
           const ValueId parts[] = {a, b};
           return t.concat_cols(parts);
         });
  binary("concat_rows", OpKind::concat_rows, {2, 3}, {4, 3}, {6, 3},
         [](auto& t, ValueId a, ValueId b) {
           const ValueId parts[] = {a, b};
           return t.concat_rows(parts);
         });
  return cases;
}

/// Desk-sized PST block configuration for gradient checks: C' = 16, two
/// heads, coarse path only.
inline PstConfig gradcheck_block_config() {
  PstConfig cfg = PstConfig::make(8, 16, 16);
  cfg.psa.heads = 2;
  cfg.psa.fine_enabled = false;
  return cfg;
}

/// Full PST block over a batch, loss = sum(out * R). In inference mode the
/// running statistics are randomized. In training mode a constant shift
/// ahead of a batch-statistics norm cancels, so psa.cpe_norm.beta has an
/// identically zero gradient there.
inline GradCase pst_block_grad_case(Rng& rng, const PstConfig& cfg,
                                    NormMode mode = NormMode::infer,
                                    std::size_t height = 8, std::size_t width = 8,
                                    std::size_t batch = 2) {
  const auto shapes = pst_shapes(cfg);
  const std::string prefix = "pst";
  const auto params = materialize<double>(shapes, prefix, rng);
  auto buffers = init_norm_buffers<double>(shapes, prefix);
  if (mode == NormMode::infer) {
    for (auto& [name, stats] : buffers) {
      stats.mean = random_tensor<double>(stats.mean.shape(), rng, -0.5, 0.5);
      stats.var = random_tensor<double>(stats.var.shape(), rng, 0.5, 2.0);
    }
  }
  std::vector<Tensor<double>> xs, us, rs;
  for (std::size_t b = 0; b < batch; ++b) {
    xs.push_back(random_tensor<double>({cfg.in_channels, height, width}, rng));
    us.push_back(random_tensor<double>({cfg.up_channels, height / 2, width / 2}, rng));
    rs.push_back(random_tensor<double>({cfg.out_channels(), height, width}, rng));
  }
  GradCase c;
  c.name = mode == NormMode::infer ? "pst_block" : "pst_block_train";
  c.params = bundle_params(params, prefix);
  c.build = [=](Tape<double>& t, const std::vector<ValueId>& ids) {
    const auto w = bundle_ids(shapes, prefix, ids);
    Recorder<double> ctx(t, mode, &buffers);
    std::vector<ValueId> x, u;
    for (std::size_t b = 0; b < xs.size(); ++b) {
      x.push_back(t.constant(xs[b]));
      u.push_back(t.constant(us[b]));
    }
    const auto out = detail::pst_forward(ctx, x, u, w, cfg, prefix);
    ValueId loss = detail::weighted_sum(t, out[0], rs[0]);
    for (std::size_t b = 1; b < out.size(); ++b) {
      loss = t.add(loss, detail::weighted_sum(t, out[b], rs[b]));
    }
    return loss;
  };
  return c;
}

}  // namespace pst
