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

// Shared plumbing for parameter bundles. Each bundle is a struct template
// over its field type V: Shape for the shape ledger, Tensor<T> for concrete
// weights and ValueId for weights bound to a tape. Every bundle provides
// visit_params(bundle, prefix, f) calling f(ParamInfo, field) in a fixed
// order, and transform_params to rebuild the bundle over another field type.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "pst/graph.hpp"
#include "pst/tensor.hpp"

namespace pst {

enum class ParamRole { weight, gamma, beta, bias };

struct ParamInfo {
  std::string name;
  ParamRole role;
};

/// Seeded generator used for every random draw in the library.
using Rng = std::mt19937_64;

/// Kaiming-normal weights (std = sqrt(2 / fan_in), fan_in = product of the
/// trailing extents), gamma = 1, beta = bias = 0.
template <class T>
Tensor<T> init_param(const ParamInfo& info, const Shape& shape, Rng& rng) {
  switch (info.role) {
    case ParamRole::gamma:
      return Tensor<T>(shape, T{1});
    case ParamRole::beta:
    case ParamRole::bias:
      return Tensor<T>(shape, T{0});
    case ParamRole::weight:
      break;
  }
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in)));
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <class T>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0,
                        double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <class V, class F>
void visit_params(NormWeights<V>& w, const std::string& prefix, F&& f) {
  f(ParamInfo{prefix + ".gamma", ParamRole::gamma}, w.gamma);
  f(ParamInfo{prefix + ".beta", ParamRole::beta}, w.beta);
}
template <class V, class F>
void visit_params(const NormWeights<V>& w, const std::string& prefix, F&& f) {
  f(ParamInfo{prefix + ".gamma", ParamRole::gamma}, w.gamma);
  f(ParamInfo{prefix + ".beta", ParamRole::beta}, w.beta);
}

template <class To, class From, class F>
NormWeights<To> transform_params(const NormWeights<From>& w,
                                 const std::string& prefix, F&& f) {
  return {f(ParamInfo{prefix + ".gamma", ParamRole::gamma}, w.gamma),
          f(ParamInfo{prefix + ".beta", ParamRole::beta}, w.beta)};
}

inline NormWeights<Shape> norm_shapes(std::size_t channels) {
  return {Shape{channels}, Shape{channels}};
}

/// Turns a shape bundle into freshly initialized tensors.
template <class T, template <class> class Bundle>
Bundle<Tensor<T>> materialize(const Bundle<Shape>& shapes,
                              const std::string& prefix, Rng& rng) {
  return transform_params<Tensor<T>>(
      shapes, prefix,
      [&](const ParamInfo& info, const Shape& s) { return init_param<T>(info, s, rng); });
}

/// Binds every tensor of a bundle as a tape leaf.
template <class T, template <class> class Bundle>
Bundle<ValueId> bind_params(const Bundle<Tensor<T>>& params,
                            const std::string& prefix, Tape<T>& tape,
                            bool requires_grad) {
  return transform_params<ValueId>(
      params, prefix, [&](const ParamInfo& info, const Tensor<T>& t) {
        return tape.leaf(t, requires_grad, info.name);
      });
}

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

/// Identity running statistics for every normalization layer of a bundle.
/// A layer is named after its gamma parameter with the ".gamma" suffix cut.
template <class T, template <class> class Bundle>
NormBuffers<T> init_norm_buffers(const Bundle<Shape>& shapes,
                                 const std::string& prefix) {
  NormBuffers<T> buffers;
  visit_params(shapes, prefix, [&](const ParamInfo& info, const Shape& s) {
    if (info.role != ParamRole::gamma) return;
    const std::string layer = info.name.substr(0, info.name.size() - 6);
    buffers[layer] = RunningStats<T>::identity(s.at(0));
  });
  return buffers;
}

/// Same bundle in another scalar type.
template <class To, class From, template <class> class Bundle>
Bundle<Tensor<To>> cast_params(const Bundle<Tensor<From>>& params,
                               const std::string& prefix) {
  return transform_params<Tensor<To>>(
      params, prefix,
      [](const ParamInfo&, const Tensor<From>& t) { return t.template cast<To>(); });
}

template <class To, class From>
NormBuffers<To> cast_buffers(const NormBuffers<From>& buffers) {
  NormBuffers<To> out;
  for (const auto& [name, s] : buffers) {
    out[name] = {s.mean.template cast<To>(), s.var.template cast<To>()};
  }
  return out;
}

template <template <class> class Bundle>
std::uint64_t count_params(const Bundle<Shape>& shapes) {
  std::uint64_t n = 0;
  visit_params(shapes, std::string{},
               [&](const ParamInfo&, const Shape& s) { n += shape_numel(s); });
  return n;
}

}  // namespace pst
