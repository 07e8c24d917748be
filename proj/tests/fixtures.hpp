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

// Shared setup for the unit tests.

#pragma once

#include "pst/pst.hpp"

namespace fixtures {

/// Replaces gammas, betas and biases with random values so that norms and
/// offsets are not the identity.
template <class T, class Bundle>
void perturb_affine(Bundle& b, pst::Rng& rng) {
  pst::visit_params(b, std::string{}, [&](const pst::ParamInfo& info, pst::Tensor<T>& t) {
    if (info.role == pst::ParamRole::weight) return;
    const double lo = info.role == pst::ParamRole::gamma ? 0.5 : -0.5;
    const double hi = info.role == pst::ParamRole::gamma ? 1.5 : 0.5;
    t = pst::random_tensor<T>(t.shape(), rng, lo, hi);
  });
}

template <class T>
void randomize_buffers(pst::NormBuffers<T>& buffers, pst::Rng& rng) {
  for (auto& [name, s] : buffers) {
    s.mean = pst::random_tensor<T>(s.mean.shape(), rng, -0.5, 0.5);
    s.var = pst::random_tensor<T>(s.var.shape(), rng, 0.5, 2.0);
  }
}

template <class T>
pst::FeatureMap<T> map(std::size_t c, std::size_t h, std::size_t w, pst::Rng& rng) {
  return pst::FeatureMap<T>(pst::random_tensor<T>({c, h, w}, rng));
}

}  // namespace fixtures
