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

// Interaction and multiply-accumulate accounting for one PSA block.

#pragma once

#include <algorithm>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "pst/psa.hpp"

namespace pst {

struct MacEntry {
  std::string name;
  std::uint64_t macs = 0;  // output elements x inner dimension
};

struct CostReport {
  std::size_t tokens = 0;
  std::size_t k = 0;
  std::uint64_t coarse_interactions = 0;  // N * N/4
  std::uint64_t fine_interactions = 0;    // N * min(4k, N)
  std::uint64_t measured_coarse = 0;
  std::uint64_t measured_fine = 0;
  std::vector<MacEntry> macs;

  std::uint64_t total_interactions() const {
    return coarse_interactions + fine_interactions;
  }
  std::uint64_t total_macs() const {
    std::uint64_t n = 0;
    for (const auto& m : macs) n += m.macs;
    return n;
  }
  /// Dense N x N attention, for comparison.
  std::uint64_t dense_interactions() const {
    return std::uint64_t(tokens) * tokens;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "tokens N = " << tokens << ", k = " << k << '\n'
       << "coarse interactions  " << coarse_interactions << '\n'
       << "fine interactions    " << fine_interactions << '\n'
       << "total interactions   " << total_interactions() << '\n'
       << "dense interactions   " << dense_interactions() << '\n'
       << "instrumented         " << measured_coarse << " / " << measured_fine
       << " / " << measured_coarse + measured_fine << '\n'
       << "multiply-accumulates:\n";
    for (const auto& m : macs) os << "  " << m.name << "  " << m.macs << '\n';
    os << "  total  " << total_macs() << '\n';
    return os.str();
  }
};

/// Even H x W grid with H * W == n, as square as possible.
inline GridDims grid_for_tokens(std::size_t n) {
  if (n == 0 || n % 4 != 0) {
    throw ContractError("token count " + std::to_string(n) +
                        " must be a positive multiple of 4");
  }
  const std::size_t q = n / 4;
  std::size_t a = 1;
  for (std::size_t d = 1; d * d <= q; ++d) {
    if (q % d == 0) a = d;
  }
  return {2 * a, 2 * (q / a)};
}

/// Closed-form counts, cross-checked against the runtime counter of an
/// instrumented forward pass on random inputs.
inline CostReport count_interactions(const PsaConfig& cfg, std::size_t n,
                                     std::uint64_t seed = 0) {
  cfg.validate();
  const GridDims fine = grid_for_tokens(n);
  const std::uint64_t m = n / 4;
  const std::uint64_t c = cfg.token_dim;
  const std::uint64_t selected =
      cfg.fine_enabled ? std::min<std::uint64_t>(4 * cfg.k, n) : 0;

  CostReport r;
  r.tokens = n;
  r.k = cfg.k;
  r.coarse_interactions = n * m;
  r.fine_interactions = n * selected;
  r.macs = {{"q_proj", n * c * c},
            {"k_proj", m * c * c},
            {"v_proj", m * c * c},
            {"coarse_logits", n * m * c},
            {"coarse_values", n * m * c},
            {"fine_kv_proj", 2 * selected * c * c},
            {"fine_logits", n * selected * c},
            {"fine_values", n * selected * c},
            {"cpe_dconv", m * c * kDepthwiseSize * kDepthwiseSize},
            {"out_proj", n * c * c}};
  if (cfg.fusion == FusionMode::self_gating) {
    r.macs.push_back({"gate", n * c * 2 * c});
  }

  Rng rng(seed);
  const auto mod = PsaModule<double>::init(cfg, rng);
  const FeatureMap<double> x(random_tensor<double>({cfg.token_dim, fine.height, fine.width}, rng));
  const FeatureMap<double> u(
      random_tensor<double>({cfg.token_dim, fine.height / 2, fine.width / 2}, rng));
  InteractionCounter counter;
  psa_forward<double>(x, u, mod, cfg, nullptr, &counter);
  r.measured_coarse = counter.coarse;
  r.measured_fine = counter.fine;
  if (counter.coarse != r.coarse_interactions || counter.fine != r.fine_interactions) {
    throw AccountingError("interaction counter " + std::to_string(counter.coarse) +
                          "/" + std::to_string(counter.fine) +
                          " disagrees with closed form " +
                          std::to_string(r.coarse_interactions) + "/" +
                          std::to_string(r.fine_interactions));
  }
  return r;
}

}  // namespace pst
