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

// Tape-based reverse-mode differentiation over the kernels in ops.hpp.
//
// A Tape owns every value it produces. Values are referred to by ValueId;
// leaves are created with leaf()/constant(), everything else via record() or
// the typed helpers (tape.matmul(a, b), ...). backward() walks the recorded
// nodes once in reverse order and may be called at most once per tape.

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pst/ops.hpp"
#include "pst/tensor.hpp"

namespace pst {

enum class OpKind {
  matmul,
  transpose,
  softmax_rows,
  conv1x1,
  depthwise_conv7x7,
  batch_norm_train,
  batch_norm_infer,
  upsample_nearest2x,
  downsample_avg2x,
  concat_channels,
  gather_rows,
  add,
  sub,
  mul,
  scale,
  silu,
  sigmoid,
  add_bias,
  mean,
  sum,
  mean_rows,
  cross_entropy,
  map_to_tokens,
  tokens_to_map,
  slice_cols,
  concat_cols,
  concat_rows,
  // Known to the engine but not differentiable: selection is a hard gate.
  topk_indices,
};

inline std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::conv1x1: return "conv1x1";
    case OpKind::depthwise_conv7x7: return "depthwise_conv7x7";
    case OpKind::batch_norm_train: return "batch_norm_train";
    case OpKind::batch_norm_infer: return "batch_norm_infer";
    case OpKind::upsample_nearest2x: return "upsample_nearest2x";
    case OpKind::downsample_avg2x: return "downsample_avg2x";
    case OpKind::concat_channels: return "concat_channels";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::silu: return "silu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::add_bias: return "add_bias";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
    case OpKind::mean_rows: return "mean_rows";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::map_to_tokens: return "map_to_tokens";
    case OpKind::tokens_to_map: return "tokens_to_map";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::topk_indices: return "topk_indices";
  }
  return "unknown";
}

struct ValueId {
  static constexpr std::size_t kUnset = std::numeric_limits<std::size_t>::max();
  std::size_t index = kUnset;

  bool valid() const { return index != kUnset; }
  friend bool operator==(ValueId, ValueId) = default;
};

/// Non-tensor operation arguments. Only the fields an op reads matter.
template <class T>
struct OpAttrs {
  T scalar{0};                        // scale factor
  std::size_t a = 0;                  // slice start / grid height
  std::size_t b = 0;                  // slice length / grid width
  std::vector<std::size_t> indices;   // gather rows / class labels
  RunningStats<T> stats;              // batch_norm running statistics
  T momentum = T(kNormMomentum);
  T eps = T(kNormEps);
};

template <class T>
class GradTable {
 public:
  explicit GradTable(std::vector<std::optional<Tensor<T>>> grads)
      : grads_(std::move(grads)) {}

  bool has(ValueId v) const {
    return v.index < grads_.size() && grads_[v.index].has_value();
  }
  const Tensor<T>& operator[](ValueId v) const {
    if (!has(v)) {
      throw ContractError("no gradient recorded for value " +
                          std::to_string(v.index) +
                          " (not a leaf requiring grad)");
    }
    return *grads_[v.index];
  }

 private:
  std::vector<std::optional<Tensor<T>>> grads_;
};

template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // -- leaves ---------------------------------------------------------------

  ValueId leaf(Tensor<T> value, bool requires_grad, std::string name = {}) {
    return push_value(std::move(value), requires_grad, true, std::move(name));
  }
  ValueId constant(Tensor<T> value) { return leaf(std::move(value), false); }

  const Tensor<T>& value(ValueId v) const { return slot(v).value; }
  const std::string& name(ValueId v) const { return slot(v).name; }
  bool needs_grad(ValueId v) const { return slot(v).needs_grad; }
  std::size_t node_count() const { return nodes_.size(); }
  std::size_t value_count() const { return values_.size(); }

  /// Nodes processed by the last backward() call.
  std::size_t nodes_visited() const { return visited_; }

  /// Test hook: negate every gradient produced by `op`'s backward rule.
  void inject_sign_fault(OpKind op) { fault_ = op; }

  // -- recording ------------------------------------------------------------

  std::vector<ValueId> record_multi(OpKind op, std::span<const ValueId> inputs,
                                    OpAttrs<T> attrs = {}) {
    if (consumed_) throw ContractError("tape already consumed by backward()");
    for (ValueId v : inputs) (void)slot(v);
    Node node{op, {inputs.begin(), inputs.end()}, {}, std::move(attrs), {}};
    std::vector<Tensor<T>> outs = forward(node);
    bool needs = false;
    for (ValueId v : inputs) needs = needs || slot(v).needs_grad;
    for (auto& o : outs) {
      node.outputs.push_back(push_value(std::move(o), needs, false, {}));
    }
    nodes_.push_back(std::move(node));
    return nodes_.back().outputs;
  }

  ValueId record(OpKind op, std::span<const ValueId> inputs,
                 OpAttrs<T> attrs = {}) {
    auto outs = record_multi(op, inputs, std::move(attrs));
    if (outs.size() != 1) {
      throw ContractError(std::string(op_name(op)) +
                          " produces several outputs; use record_multi");
    }
    return outs[0];
  }

  // -- typed helpers --------------------------------------------------------

  ValueId matmul(ValueId a, ValueId b) { return rec(OpKind::matmul, {a, b}); }
  ValueId transpose(ValueId a) { return rec(OpKind::transpose, {a}); }
  ValueId softmax_rows(ValueId a) { return rec(OpKind::softmax_rows, {a}); }
  ValueId conv1x1(ValueId x, ValueId w) { return rec(OpKind::conv1x1, {x, w}); }
  ValueId depthwise_conv7x7(ValueId x, ValueId k) {
    return rec(OpKind::depthwise_conv7x7, {x, k});
  }
  ValueId upsample_nearest2x(ValueId x) {
    return rec(OpKind::upsample_nearest2x, {x});
  }
  ValueId downsample_avg2x(ValueId x) {
    return rec(OpKind::downsample_avg2x, {x});
  }
  ValueId concat_channels(ValueId a, ValueId b) {
    return rec(OpKind::concat_channels, {a, b});
  }
  ValueId gather_rows(ValueId x, std::vector<std::size_t> idx) {
    OpAttrs<T> at;
    at.indices = std::move(idx);
    return rec(OpKind::gather_rows, {x}, std::move(at));
  }
  ValueId add(ValueId a, ValueId b) { return rec(OpKind::add, {a, b}); }
  ValueId sub(ValueId a, ValueId b) { return rec(OpKind::sub, {a, b}); }
  ValueId mul(ValueId a, ValueId b) { return rec(OpKind::mul, {a, b}); }
  ValueId scale(ValueId a, T s) {
    OpAttrs<T> at;
    at.scalar = s;
    return rec(OpKind::scale, {a}, std::move(at));
  }
  ValueId silu(ValueId a) { return rec(OpKind::silu, {a}); }
  ValueId sigmoid(ValueId a) { return rec(OpKind::sigmoid, {a}); }
  ValueId add_bias(ValueId x, ValueId b) { return rec(OpKind::add_bias, {x, b}); }
  ValueId mean(ValueId a) { return rec(OpKind::mean, {a}); }
  ValueId sum(ValueId a) { return rec(OpKind::sum, {a}); }
  ValueId mean_rows(ValueId a) { return rec(OpKind::mean_rows, {a}); }
  ValueId cross_entropy(ValueId logits, std::vector<std::size_t> labels) {
    OpAttrs<T> at;
    at.indices = std::move(labels);
    return rec(OpKind::cross_entropy, {logits}, std::move(at));
  }
  ValueId map_to_tokens(ValueId x) { return rec(OpKind::map_to_tokens, {x}); }
  ValueId tokens_to_map(ValueId t, std::size_t h, std::size_t w) {
    OpAttrs<T> at;
    at.a = h;
    at.b = w;
    return rec(OpKind::tokens_to_map, {t}, std::move(at));
  }
  ValueId slice_cols(ValueId x, std::size_t start, std::size_t len) {
    OpAttrs<T> at;
    at.a = start;
    at.b = len;
    return rec(OpKind::slice_cols, {x}, std::move(at));
  }
  ValueId concat_cols(std::span<const ValueId> parts) {
    return record(OpKind::concat_cols, parts);
  }
  ValueId concat_rows(std::span<const ValueId> parts) {
    return record(OpKind::concat_rows, parts);
  }
  ValueId batch_norm_infer(ValueId x, ValueId gamma, ValueId beta,
                           RunningStats<T> stats) {
    OpAttrs<T> at;
    at.stats = std::move(stats);
    return rec(OpKind::batch_norm_infer, {x, gamma, beta}, std::move(at));
  }

  struct BatchNormRecord {
    std::vector<ValueId> outputs;
    RunningStats<T> updated;
  };

  /// Normalizes a batch jointly; inputs are (x_1..x_B, gamma, beta).
  BatchNormRecord batch_norm_train(std::span<const ValueId> xs, ValueId gamma,
                                   ValueId beta, RunningStats<T> stats,
                                   T momentum = T(kNormMomentum)) {
    std::vector<ValueId> inputs(xs.begin(), xs.end());
    inputs.push_back(gamma);
    inputs.push_back(beta);
    OpAttrs<T> at;
    at.stats = std::move(stats);
    at.momentum = momentum;
    auto outs = record_multi(OpKind::batch_norm_train, inputs, std::move(at));
    const Node& node = nodes_.back();
    return {std::move(outs), {node.saved[2], node.saved[3]}};
  }

  // -- backward -------------------------------------------------------------

  GradTable<T> backward(ValueId loss) {
    if (consumed_) {
      throw ContractError("backward() already ran on this tape; re-record");
    }
    if (slot(loss).value.size() != 1) {
      throw ContractError("backward() requires a scalar loss, got shape " +
                          shape_str(slot(loss).value.shape()));
    }
    consumed_ = true;
    visited_ = 0;
    std::vector<std::optional<Tensor<T>>> grads(values_.size());
    grads[loss.index] = Tensor<T>(slot(loss).value.shape(), T{1});

    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      ++visited_;
      const Node& node = *it;
      bool any = false;
      for (ValueId o : node.outputs) any = any || grads[o.index].has_value();
      if (!any) continue;
      std::vector<const Tensor<T>*> upstream;
      for (ValueId o : node.outputs) {
        upstream.push_back(grads[o.index] ? &*grads[o.index] : nullptr);
      }
      auto in_grads = backward_node(node, upstream);
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        if (!in_grads[i]) continue;
        Tensor<T>& g = *in_grads[i];
        if (fault_ && *fault_ == node.op) {
          for (auto& v : g.data()) v = -v;
        }
        auto& acc = grads[node.inputs[i].index];
        if (acc) {
          for (std::size_t j = 0; j < g.size(); ++j) (*acc)[j] += g[j];
        } else {
          acc = std::move(g);
        }
      }
    }

    std::vector<std::optional<Tensor<T>>> out(values_.size());
    for (std::size_t i = 0; i < values_.size(); ++i) {
      const Slot& s = values_[i];
      if (!(s.is_leaf && s.requires_grad)) continue;
      out[i] = grads[i] ? std::move(*grads[i]) : Tensor<T>(s.value.shape());
    }
    return GradTable<T>(std::move(out));
  }

 private:
  struct Slot {
    Tensor<T> value;
    bool requires_grad = false;
    bool needs_grad = false;
    bool is_leaf = false;
    std::string name;
  };

  struct Node {
    OpKind op;
    std::vector<ValueId> inputs;
    std::vector<ValueId> outputs;
    OpAttrs<T> attrs;
    std::vector<Tensor<T>> saved;
  };

  using Grads = std::vector<std::optional<Tensor<T>>>;

  ValueId rec(OpKind op, std::initializer_list<ValueId> in,
              OpAttrs<T> attrs = {}) {
    return record(op, std::span<const ValueId>(in.begin(), in.size()),
                  std::move(attrs));
  }

  ValueId push_value(Tensor<T> v, bool requires_grad, bool is_leaf,
                     std::string name) {
    values_.push_back(
        Slot{std::move(v), requires_grad, requires_grad, is_leaf, std::move(name)});
    return ValueId{values_.size() - 1};
  }

  const Slot& slot(ValueId v) const {
    if (v.index >= values_.size()) {
      throw IndexError("tape: unknown value id " + std::to_string(v.index),
                       v.index);
    }
    return values_[v.index];
  }

  const Tensor<T>& in(const Node& n, std::size_t i) const {
    return values_[n.inputs[i].index].value;
  }

  void require_arity(const Node& n, std::size_t arity) const {
    if (n.inputs.size() != arity) {
      throw ContractError(std::string(op_name(n.op)) + " expects " +
                          std::to_string(arity) + " inputs, got " +
                          std::to_string(n.inputs.size()));
    }
  }

  std::vector<Tensor<T>> forward(Node& n) {
    const auto one = [](Tensor<T> t) {
      std::vector<Tensor<T>> v;
      v.push_back(std::move(t));
      return v;
    };
    switch (n.op) {
      case OpKind::matmul:
        require_arity(n, 2);
        return one(pst::matmul(in(n, 0), in(n, 1)));
      case OpKind::transpose:
        require_arity(n, 1);
        return one(pst::transpose(in(n, 0)));
      case OpKind::softmax_rows:
        require_arity(n, 1);
        return one(pst::softmax_rows(in(n, 0)));
      case OpKind::conv1x1:
        require_arity(n, 2);
        return one(pst::conv1x1(in(n, 0), in(n, 1)));
      case OpKind::depthwise_conv7x7:
        require_arity(n, 2);
        return one(pst::depthwise_conv7x7(in(n, 0), in(n, 1)));
      case OpKind::batch_norm_train: {
        if (n.inputs.size() < 3) {
          throw ContractError("batch_norm_train expects (x..., gamma, beta)");
        }
        const std::size_t batch = n.inputs.size() - 2;
        std::vector<Tensor<T>> xs;
        for (std::size_t i = 0; i < batch; ++i) xs.push_back(in(n, i));
        auto r = pst::batch_norm_train<T>(xs, in(n, batch), in(n, batch + 1),
                                          n.attrs.stats, n.attrs.momentum,
                                          n.attrs.eps);
        n.saved = {r.batch_mean, r.inv_std, r.updated.mean, r.updated.var};
        return std::move(r.outputs);
      }
      case OpKind::batch_norm_infer:
        require_arity(n, 3);
        return one(pst::batch_norm_infer(in(n, 0), in(n, 1), in(n, 2),
                                         n.attrs.stats, n.attrs.eps));
      case OpKind::upsample_nearest2x:
        require_arity(n, 1);
        return one(pst::upsample_nearest2x(in(n, 0)));
      case OpKind::downsample_avg2x:
        require_arity(n, 1);
        return one(pst::downsample_avg2x(in(n, 0)));
      case OpKind::concat_channels:
        require_arity(n, 2);
        return one(pst::concat_channels(in(n, 0), in(n, 1)));
      case OpKind::gather_rows:
        require_arity(n, 1);
        return one(pst::gather_rows<T>(in(n, 0), n.attrs.indices));
      case OpKind::add:
        require_arity(n, 2);
        return one(pst::add(in(n, 0), in(n, 1)));
      case OpKind::sub:
        require_arity(n, 2);
        return one(pst::sub(in(n, 0), in(n, 1)));
      case OpKind::mul:
        require_arity(n, 2);
        return one(pst::mul(in(n, 0), in(n, 1)));
      case OpKind::scale:
        require_arity(n, 1);
        return one(pst::scale(in(n, 0), n.attrs.scalar));
      case OpKind::silu:
        require_arity(n, 1);
        return one(pst::silu(in(n, 0)));
      case OpKind::sigmoid:
        require_arity(n, 1);
        return one(pst::sigmoid(in(n, 0)));
      case OpKind::add_bias:
        require_arity(n, 2);
        return one(pst::add_bias(in(n, 0), in(n, 1)));
      case OpKind::mean: {
        require_arity(n, 1);
        const auto& x = in(n, 0);
        return one(Tensor<T>({1}, pst::sum(x) / static_cast<T>(x.size())));
      }
      case OpKind::sum:
        require_arity(n, 1);
        return one(Tensor<T>({1}, pst::sum(in(n, 0))));
      case OpKind::mean_rows:
        require_arity(n, 1);
        return one(pst::mean_rows(in(n, 0)));
      case OpKind::cross_entropy:
        require_arity(n, 1);
        return one(cross_entropy_forward(in(n, 0), n.attrs.indices));
      case OpKind::map_to_tokens:
        require_arity(n, 1);
        return one(pst::map_to_tokens(in(n, 0)));
      case OpKind::tokens_to_map:
        require_arity(n, 1);
        return one(pst::tokens_to_map(in(n, 0), n.attrs.a, n.attrs.b));
      case OpKind::slice_cols:
        require_arity(n, 1);
        return one(pst::slice_cols(in(n, 0), n.attrs.a, n.attrs.b));
      case OpKind::concat_cols:
      case OpKind::concat_rows: {
        std::vector<Tensor<T>> parts;
        for (std::size_t i = 0; i < n.inputs.size(); ++i) parts.push_back(in(n, i));
        return one(n.op == OpKind::concat_cols ? pst::concat_cols<T>(parts)
                                               : pst::concat_rows<T>(parts));
      }
      case OpKind::topk_indices:
        break;
    }
    throw CapabilityError(std::string("autodiff cannot record '") +
                          std::string(op_name(n.op)) + "'");
  }

  static Tensor<T> cross_entropy_forward(const Tensor<T>& logits,
                                         const std::vector<std::size_t>& labels) {
    detail::require_rank(logits.shape(), 2, "cross_entropy");
    const std::size_t b = logits.extent(0), k = logits.extent(1);
    if (labels.size() != b) {
      throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                           " labels for " + std::to_string(b) + " rows");
    }
    T total{0};
    for (std::size_t i = 0; i < b; ++i) {
      if (labels[i] >= k) {
        throw IndexError("cross_entropy: label out of range", labels[i]);
      }
      const T* row = logits.raw() + i * k;
      const T mx = *std::max_element(row, row + k);
      T s{0};
      for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
      total += mx + std::log(s) - row[labels[i]];
    }
    return Tensor<T>({1}, total / static_cast<T>(b));
  }

  // Gradients with respect to each input; entries for inputs that do not
  // need a gradient stay empty.
  Grads backward_node(const Node& n,
                      const std::vector<const Tensor<T>*>& gs) const {
    Grads r(n.inputs.size());
    const auto want = [&](std::size_t i) {
      return values_[n.inputs[i].index].needs_grad;
    };
    if (n.op == OpKind::batch_norm_train) {
      batch_norm_train_backward(n, gs, r, want);
      return r;
    }
    const Tensor<T>& g = *gs[0];
    const Tensor<T>& y = values_[n.outputs[0].index].value;
    switch (n.op) {
      case OpKind::matmul:
        if (want(0)) r[0] = pst::matmul(g, pst::transpose(in(n, 1)));
        if (want(1)) r[1] = pst::matmul(pst::transpose(in(n, 0)), g);
        break;
      case OpKind::transpose:
        if (want(0)) r[0] = pst::transpose(g);
        break;
      case OpKind::softmax_rows:
        if (want(0)) {
          const std::size_t m = y.extent(0), k = y.extent(1);
          Tensor<T> dx(y.shape());
          for (std::size_t i = 0; i < m; ++i) {
            T dot{0};
            for (std::size_t j = 0; j < k; ++j) dot += g[i * k + j] * y[i * k + j];
            for (std::size_t j = 0; j < k; ++j) {
              dx[i * k + j] = y[i * k + j] * (g[i * k + j] - dot);
            }
          }
          r[0] = std::move(dx);
        }
        break;
      case OpKind::conv1x1: {
        const auto& x = in(n, 0);
        const auto& w = in(n, 1);
        const std::size_t cin = x.extent(0), hw = x.extent(1) * x.extent(2);
        const Tensor<T> g2 = g.reshaped({w.extent(0), hw});
        if (want(0)) {
          r[0] = pst::matmul(pst::transpose(w), g2).reshaped(x.shape());
        }
        if (want(1)) {
          r[1] = pst::matmul(g2, pst::transpose(x.reshaped({cin, hw})));
        }
        break;
      }
      case OpKind::depthwise_conv7x7:
        depthwise_backward(in(n, 0), in(n, 1), g, want(0) ? &r[0] : nullptr,
                           want(1) ? &r[1] : nullptr);
        break;
      case OpKind::batch_norm_infer: {
        const auto& x = in(n, 0);
        const auto& gamma = in(n, 1);
        const auto& st = n.attrs.stats;
        const ChannelLayout lay = ChannelLayout::of(x.shape());
        Tensor<T> dx(x.shape()), dg({lay.channels}), db({lay.channels});
        for (std::size_t c = 0; c < lay.channels; ++c) {
          const T inv = T{1} / std::sqrt(st.var[c] + n.attrs.eps);
          for (std::size_t o = 0; o < lay.outer; ++o) {
            for (std::size_t i = 0; i < lay.inner; ++i) {
              const std::size_t idx = lay.index(o, c, i);
              dx[idx] = g[idx] * gamma[c] * inv;
              dg[c] += g[idx] * (x[idx] - st.mean[c]) * inv;
              db[c] += g[idx];
            }
          }
        }
        if (want(0)) r[0] = std::move(dx);
        if (want(1)) r[1] = std::move(dg);
        if (want(2)) r[2] = std::move(db);
        break;
      }
      case OpKind::upsample_nearest2x:
        if (want(0)) r[0] = pst::scale(pst::downsample_avg2x(g), T{4});
        break;
      case OpKind::downsample_avg2x:
        if (want(0)) r[0] = pst::scale(pst::upsample_nearest2x(g), T(0.25));
        break;
      case OpKind::concat_channels: {
        const auto& a = in(n, 0);
        const auto& b = in(n, 1);
        if (want(0)) {
          r[0] = Tensor<T>(a.shape(),
                           std::vector<T>(g.data().begin(),
                                          g.data().begin() +
                                              static_cast<std::ptrdiff_t>(a.size())));
        }
        if (want(1)) {
          r[1] = Tensor<T>(b.shape(),
                           std::vector<T>(g.data().begin() +
                                              static_cast<std::ptrdiff_t>(a.size()),
                                          g.data().end()));
        }
        break;
      }
      case OpKind::gather_rows:
        if (want(0)) {
          const auto& x = in(n, 0);
          const std::size_t d = x.extent(1);
          Tensor<T> dx(x.shape());
          for (std::size_t j = 0; j < n.attrs.indices.size(); ++j) {
            const std::size_t row = n.attrs.indices[j];
            for (std::size_t c = 0; c < d; ++c) dx[row * d + c] += g[j * d + c];
          }
          r[0] = std::move(dx);
        }
        break;
      case OpKind::add:
        if (want(0)) r[0] = g;
        if (want(1)) r[1] = g;
        break;
      case OpKind::sub:
        if (want(0)) r[0] = g;
        if (want(1)) r[1] = pst::scale(g, T{-1});
        break;
      case OpKind::mul:
        if (want(0)) r[0] = pst::mul(g, in(n, 1));
        if (want(1)) r[1] = pst::mul(g, in(n, 0));
        break;
      case OpKind::scale:
        if (want(0)) r[0] = pst::scale(g, n.attrs.scalar);
        break;
      case OpKind::silu:
        if (want(0)) {
          const auto& x = in(n, 0);
          Tensor<T> dx(x.shape());
          for (std::size_t i = 0; i < x.size(); ++i) {
            const T s = pst::sigmoid(x[i]);
            dx[i] = g[i] * s * (T{1} + x[i] * (T{1} - s));
          }
          r[0] = std::move(dx);
        }
        break;
      case OpKind::sigmoid:
        if (want(0)) {
          Tensor<T> dx(y.shape());
          for (std::size_t i = 0; i < y.size(); ++i) {
            dx[i] = g[i] * y[i] * (T{1} - y[i]);
          }
          r[0] = std::move(dx);
        }
        break;
      case OpKind::add_bias:
        if (want(0)) r[0] = g;
        if (want(1)) {
          const std::size_t cols = g.extent(1);
          Tensor<T> db({cols});
          for (std::size_t i = 0; i < g.size(); ++i) db[i % cols] += g[i];
          r[1] = std::move(db);
        }
        break;
      case OpKind::mean:
        if (want(0)) {
          const auto& x = in(n, 0);
          r[0] = Tensor<T>(x.shape(), g[0] / static_cast<T>(x.size()));
        }
        break;
      case OpKind::sum:
        if (want(0)) r[0] = Tensor<T>(in(n, 0).shape(), g[0]);
        break;
      case OpKind::mean_rows:
        if (want(0)) {
          const auto& x = in(n, 0);
          const std::size_t m = x.extent(0), cols = x.extent(1);
          Tensor<T> dx(x.shape());
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
              dx[i * cols + j] = g[j] / static_cast<T>(m);
            }
          }
          r[0] = std::move(dx);
        }
        break;
      case OpKind::cross_entropy:
        if (want(0)) {
          const auto& z = in(n, 0);
          const std::size_t b = z.extent(0);
          Tensor<T> dz = pst::softmax_rows(z);
          for (std::size_t i = 0; i < b; ++i) dz.at(i, n.attrs.indices[i]) -= T{1};
          r[0] = pst::scale(dz, g[0] / static_cast<T>(b));
        }
        break;
      case OpKind::map_to_tokens:
        if (want(0)) {
          const auto& x = in(n, 0);
          r[0] = pst::tokens_to_map(g, x.extent(1), x.extent(2));
        }
        break;
      case OpKind::tokens_to_map:
        if (want(0)) r[0] = pst::map_to_tokens(g);
        break;
      case OpKind::slice_cols:
        if (want(0)) {
          const auto& x = in(n, 0);
          const std::size_t m = x.extent(0), cols = x.extent(1);
          const std::size_t start = n.attrs.a, len = n.attrs.b;
          Tensor<T> dx(x.shape());
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < len; ++j) {
              dx[i * cols + start + j] = g[i * len + j];
            }
          }
          r[0] = std::move(dx);
        }
        break;
      case OpKind::concat_cols: {
        std::size_t off = 0;
        for (std::size_t p = 0; p < n.inputs.size(); ++p) {
          const std::size_t w = in(n, p).extent(1);
          if (want(p)) r[p] = pst::slice_cols(g, off, w);
          off += w;
        }
        break;
      }
      case OpKind::concat_rows: {
        std::size_t off = 0;
        for (std::size_t p = 0; p < n.inputs.size(); ++p) {
          const auto& part = in(n, p);
          if (want(p)) {
            auto first = g.data().begin() + static_cast<std::ptrdiff_t>(off);
            r[p] = Tensor<T>(part.shape(),
                             std::vector<T>(first, first + static_cast<std::ptrdiff_t>(part.size())));
          }
          off += part.size();
        }
        break;
      }
      case OpKind::batch_norm_train:
      case OpKind::topk_indices:
        throw CapabilityError(std::string("no backward rule for ") +
                              std::string(op_name(n.op)));
    }
    return r;
  }

  template <class Want>
  void batch_norm_train_backward(const Node& n,
                                 const std::vector<const Tensor<T>*>& gs,
                                 Grads& r, Want want) const {
    const std::size_t batch = n.inputs.size() - 2;
    const auto& gamma = in(n, batch);
    const auto& mean = n.saved[0];
    const auto& inv_std = n.saved[1];
    const ChannelLayout lay = ChannelLayout::of(in(n, 0).shape());
    const T count = static_cast<T>(lay.per_channel() * batch);
    Tensor<T> dgamma({lay.channels}), dbeta({lay.channels});
    std::vector<Tensor<T>> dx;
    for (std::size_t b = 0; b < batch; ++b) dx.emplace_back(in(n, b).shape());

    for (std::size_t c = 0; c < lay.channels; ++c) {
      // sums of dxhat and dxhat * xhat over the whole batch
      T s1{0}, s2{0};
      for (std::size_t b = 0; b < batch; ++b) {
        if (!gs[b]) continue;
        const auto& x = in(n, b);
        const auto& g = *gs[b];
        for (std::size_t o = 0; o < lay.outer; ++o) {
          for (std::size_t i = 0; i < lay.inner; ++i) {
            const std::size_t idx = lay.index(o, c, i);
            const T xhat = (x[idx] - mean[c]) * inv_std[c];
            dbeta[c] += g[idx];
            dgamma[c] += g[idx] * xhat;
            s1 += g[idx] * gamma[c];
            s2 += g[idx] * gamma[c] * xhat;
          }
        }
      }
      for (std::size_t b = 0; b < batch; ++b) {
        const auto& x = in(n, b);
        for (std::size_t o = 0; o < lay.outer; ++o) {
          for (std::size_t i = 0; i < lay.inner; ++i) {
            const std::size_t idx = lay.index(o, c, i);
            const T xhat = (x[idx] - mean[c]) * inv_std[c];
            const T dxhat = gs[b] ? (*gs[b])[idx] * gamma[c] : T{0};
            dx[b][idx] = inv_std[c] / count * (count * dxhat - s1 - xhat * s2);
          }
        }
      }
    }
    for (std::size_t b = 0; b < batch; ++b) {
      if (want(b)) r[b] = std::move(dx[b]);
    }
    if (want(batch)) r[batch] = std::move(dgamma);
    if (want(batch + 1)) r[batch + 1] = std::move(dbeta);
  }

  static void depthwise_backward(const Tensor<T>& x, const Tensor<T>& k,
                                 const Tensor<T>& g,
                                 std::optional<Tensor<T>>* dx_out,
                                 std::optional<Tensor<T>>* dk_out) {
    const std::size_t c = x.extent(0);
    const auto h = static_cast<std::ptrdiff_t>(x.extent(1));
    const auto w = static_cast<std::ptrdiff_t>(x.extent(2));
    constexpr std::ptrdiff_t pad = kDepthwisePad;
    Tensor<T> dx(x.shape()), dk(k.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* kk = k.raw() + ch * 49;
      const T* xx = x.raw() + ch * static_cast<std::size_t>(h * w);
      const T* gg = g.raw() + ch * static_cast<std::size_t>(h * w);
      T* ddx = dx.raw() + ch * static_cast<std::size_t>(h * w);
      T* ddk = dk.raw() + ch * 49;
      for (std::ptrdiff_t r = 0; r < h; ++r) {
        for (std::ptrdiff_t q = 0; q < w; ++q) {
          const T gv = gg[r * w + q];
          for (std::ptrdiff_t u = 0; u < 7; ++u) {
            const std::ptrdiff_t sr = r + u - pad;
            if (sr < 0 || sr >= h) continue;
            for (std::ptrdiff_t v = 0; v < 7; ++v) {
              const std::ptrdiff_t sc = q + v - pad;
              if (sc < 0 || sc >= w) continue;
              ddx[sr * w + sc] += kk[u * 7 + v] * gv;
              ddk[u * 7 + v] += xx[sr * w + sc] * gv;
            }
          }
        }
      }
    }
    if (dx_out) *dx_out = std::move(dx);
    if (dk_out) *dk_out = std::move(dk);
  }

  std::vector<Slot> values_;
  std::vector<Node> nodes_;
  bool consumed_ = false;
  std::size_t visited_ = 0;
  std::optional<OpKind> fault_;
};

}  // namespace pst
