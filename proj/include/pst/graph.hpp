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

// Execution contexts for model code. Layers are written once as templates
// over a context type `Ctx` and run either eagerly (Eager<T>, values are
// tensors) or on an autodiff tape (Recorder<T>, values are ValueIds). Both
// contexts dispatch to the same kernels, so the two paths agree bit for bit.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pst/autodiff.hpp"
#include "pst/ops.hpp"

namespace pst {

template <class V>
struct NormWeights {
  V gamma;
  V beta;
};

/// Running statistics for every normalization layer, keyed by layer name.
template <class T>
using NormBuffers = std::map<std::string, RunningStats<T>>;

/// Query-key pairs scored by attention; the unit of the cost model.
struct InteractionCounter {
  std::uint64_t coarse = 0;
  std::uint64_t fine = 0;
  std::uint64_t total() const { return coarse + fine; }
};

/// Normalization behaviour shared by both contexts.
template <class T>
class NormPolicy {
 public:
  NormPolicy(NormMode mode, const NormBuffers<T>* buffers)
      : mode_(mode), buffers_(buffers) {}

  NormMode mode() const { return mode_; }
  T momentum() const { return momentum_; }
  void set_momentum(T m) { momentum_ = m; }

  /// Running statistics produced by train-mode normalizations.
  const NormBuffers<T>& updates() const { return updates_; }

  InteractionCounter& counter() { return counter_; }

 protected:
  const RunningStats<T>& stats_for(const std::string& name) const {
    if (!buffers_) throw ContractError("no normalization buffers bound");
    auto it = buffers_->find(name);
    if (it == buffers_->end()) {
      throw ContractError("missing normalization buffer '" + name + "'");
    }
    return it->second;
  }
  void record_update(const std::string& name, RunningStats<T> s) {
    updates_[name] = std::move(s);
  }

 private:
  NormMode mode_;
  const NormBuffers<T>* buffers_;
  T momentum_ = T(kNormMomentum);
  NormBuffers<T> updates_;
  InteractionCounter counter_;
};

template <class T>
class Eager : public NormPolicy<T> {
 public:
  using Scalar = T;
  using Value = Tensor<T>;

  explicit Eager(NormMode mode = NormMode::infer,
                 const NormBuffers<T>* buffers = nullptr)
      : NormPolicy<T>(mode, buffers) {}

  const Tensor<T>& value(const Value& v) const { return v; }
  Value constant(Tensor<T> t) { return t; }

  Value matmul(const Value& a, const Value& b) { return pst::matmul(a, b); }
  Value transpose(const Value& a) { return pst::transpose(a); }
  Value softmax_rows(const Value& a) { return pst::softmax_rows(a); }
  Value conv1x1(const Value& x, const Value& w) { return pst::conv1x1(x, w); }
  Value depthwise_conv7x7(const Value& x, const Value& k) {
    return pst::depthwise_conv7x7(x, k);
  }
  Value upsample_nearest2x(const Value& x) { return pst::upsample_nearest2x(x); }
  Value downsample_avg2x(const Value& x) { return pst::downsample_avg2x(x); }
  Value concat_channels(const Value& a, const Value& b) {
    return pst::concat_channels(a, b);
  }
  Value gather_rows(const Value& x, std::vector<std::size_t> idx) {
    return pst::gather_rows<T>(x, idx);
  }
  Value add(const Value& a, const Value& b) { return pst::add(a, b); }
  Value sub(const Value& a, const Value& b) { return pst::sub(a, b); }
  Value mul(const Value& a, const Value& b) { return pst::mul(a, b); }
  Value scale(const Value& a, T s) { return pst::scale(a, s); }
  Value silu(const Value& a) { return pst::silu(a); }
  Value sigmoid(const Value& a) { return pst::sigmoid(a); }
  Value add_bias(const Value& x, const Value& b) { return pst::add_bias(x, b); }
  Value mean_rows(const Value& x) { return pst::mean_rows(x); }
  Value map_to_tokens(const Value& x) { return pst::map_to_tokens(x); }
  Value tokens_to_map(const Value& t, std::size_t h, std::size_t w) {
    return pst::tokens_to_map(t, h, w);
  }
  Value slice_cols(const Value& x, std::size_t start, std::size_t len) {
    return pst::slice_cols(x, start, len);
  }
  Value concat_cols(const std::vector<Value>& parts) {
    return pst::concat_cols<T>(parts);
  }
  Value concat_rows(const std::vector<Value>& parts) {
    return pst::concat_rows<T>(parts);
  }

  std::vector<Value> batch_norm(const std::vector<Value>& xs,
                                const NormWeights<Value>& w,
                                const std::string& name) {
    const auto& stats = this->stats_for(name);
    std::vector<Value> out;
    if (this->mode() == NormMode::infer) {
      for (const auto& x : xs) {
        out.push_back(pst::batch_norm_infer(x, w.gamma, w.beta, stats));
      }
      return out;
    }
    auto r = pst::batch_norm_train<T>(xs, w.gamma, w.beta, stats,
                                      this->momentum());
    this->record_update(name, std::move(r.updated));
    return std::move(r.outputs);
  }
};

template <class T>
class Recorder : public NormPolicy<T> {
 public:
  using Scalar = T;
  using Value = ValueId;

  Recorder(Tape<T>& tape, NormMode mode, const NormBuffers<T>* buffers)
      : NormPolicy<T>(mode, buffers), tape_(tape) {}

  Tape<T>& tape() { return tape_; }
  const Tensor<T>& value(Value v) const { return tape_.value(v); }
  Value constant(Tensor<T> t) { return tape_.constant(std::move(t)); }

  Value matmul(Value a, Value b) { return tape_.matmul(a, b); }
  Value transpose(Value a) { return tape_.transpose(a); }
  Value softmax_rows(Value a) { return tape_.softmax_rows(a); }
  Value conv1x1(Value x, Value w) { return tape_.conv1x1(x, w); }
  Value depthwise_conv7x7(Value x, Value k) {
    return tape_.depthwise_conv7x7(x, k);
  }
  Value upsample_nearest2x(Value x) { return tape_.upsample_nearest2x(x); }
  Value downsample_avg2x(Value x) { return tape_.downsample_avg2x(x); }
  Value concat_channels(Value a, Value b) { return tape_.concat_channels(a, b); }
  Value gather_rows(Value x, std::vector<std::size_t> idx) {
    return tape_.gather_rows(x, std::move(idx));
  }
  Value add(Value a, Value b) { return tape_.add(a, b); }
  Value sub(Value a, Value b) { return tape_.sub(a, b); }
  Value mul(Value a, Value b) { return tape_.mul(a, b); }
  Value scale(Value a, T s) { return tape_.scale(a, s); }
  Value silu(Value a) { return tape_.silu(a); }
  Value sigmoid(Value a) { return tape_.sigmoid(a); }
  Value add_bias(Value x, Value b) { return tape_.add_bias(x, b); }
  Value mean_rows(Value x) { return tape_.mean_rows(x); }
  Value map_to_tokens(Value x) { return tape_.map_to_tokens(x); }
  Value tokens_to_map(Value t, std::size_t h, std::size_t w) {
    return tape_.tokens_to_map(t, h, w);
  }
  Value slice_cols(Value x, std::size_t start, std::size_t len) {
    return tape_.slice_cols(x, start, len);
  }
  Value concat_cols(const std::vector<Value>& parts) {
    return tape_.concat_cols(parts);
  }
  Value concat_rows(const std::vector<Value>& parts) {
    return tape_.concat_rows(parts);
  }

  std::vector<Value> batch_norm(const std::vector<Value>& xs,
                                const NormWeights<Value>& w,
                                const std::string& name) {
    const auto& stats = this->stats_for(name);
    if (this->mode() == NormMode::infer) {
      std::vector<Value> out;
      for (Value x : xs) {
        out.push_back(tape_.batch_norm_infer(x, w.gamma, w.beta, stats));
      }
      return out;
    }
    auto r = tape_.batch_norm_train(xs, w.gamma, w.beta, stats,
                                    this->momentum());
    this->record_update(name, std::move(r.updated));
    return std::move(r.outputs);
  }

 private:
  Tape<T>& tape_;
};

}  // namespace pst
