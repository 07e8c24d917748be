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

// Wall-clock microbenchmarks. Results are host-specific; only ratios
// measured on one host are meaningful.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "pst/cost.hpp"
#include "pst/psa.hpp"
#include "pst/tensor_file.hpp"

namespace pst {

struct LatencyStats {
  std::string op;
  std::size_t tokens = 0;
  std::size_t repeats = 0;
  std::size_t threads = 1;
  std::string precision;
  double median_ns = 0;
  double p10_ns = 0;
  double p90_ns = 0;
  std::uint64_t output_checksum = 0;  // FNV-1a of the last output's bytes

  std::string to_text() const {
    std::ostringstream os;
    os << op << "  N=" << tokens << "  precision=" << precision
       << "  threads=" << threads << "  repeats=" << repeats << '\n'
       << "  median " << median_ns << " ns  p10 " << p10_ns << " ns  p90 "
       << p90_ns << " ns\n";
    return os.str();
  }
};

/// Nearest-rank percentile of sorted samples, p in (0, 1].
inline double percentile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw ContractError("percentile of no samples");
  const auto rank = static_cast<std::size_t>(std::ceil(p * double(sorted.size())));
  return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

inline LatencyStats measure_latency(const std::function<void()>& fn,
                                    std::size_t repeats, std::size_t warmup) {
  if (repeats < 10) throw ContractError("benchmark needs repeats >= 10");
  if (warmup < 3) throw ContractError("benchmark needs warmup >= 3");
  for (std::size_t i = 0; i < warmup; ++i) fn();
  std::vector<double> samples;
  samples.reserve(repeats);
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    samples.push_back(
        double(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
  }
  std::sort(samples.begin(), samples.end());
  LatencyStats s;
  s.repeats = repeats;
  s.median_ns = percentile(samples, 0.5);
  s.p10_ns = percentile(samples, 0.1);
  s.p90_ns = percentile(samples, 0.9);
  return s;
}

inline const std::vector<std::string>& benchmark_ops() {
  static const std::vector<std::string> ops{"psa", "psa_coarse", "dense"};
  return ops;
}

/// Times one operation on fixed random inputs of `tokens` fine tokens.
///   psa         the block as configured
///   psa_coarse  the block with the fine stage disabled
///   dense       full N x N attention over the fine map, projections included
template <class T>
LatencyStats benchmark(const std::string& op, const PsaConfig& cfg,
                       std::size_t tokens, std::size_t repeats = 10,
                       std::size_t warmup = 3, std::uint64_t seed = 0) {
  cfg.validate();
  const GridDims grid = grid_for_tokens(tokens);
  Rng rng(seed);
  const auto mod = PsaModule<T>::init(cfg, rng);
  const FeatureMap<T> x(random_tensor<T>({cfg.token_dim, grid.height, grid.width}, rng));
  const FeatureMap<T> u(
      random_tensor<T>({cfg.token_dim, grid.height / 2, grid.width / 2}, rng));

  Tensor<T> last;
  std::function<void()> fn;
  if (op == "psa" || op == "psa_coarse") {
    PsaConfig run = cfg;
    if (op == "psa_coarse") run.fine_enabled = false;
    fn = [&, run] { last = psa_forward(x, u, mod, run).tensor(); };
  } else if (op == "dense") {
    fn = [&] {
      const Tensor<T> tok = map_to_tokens(x.tensor());
      const Tensor<T> q = matmul(tok, transpose(mod.params.wq));
      const Tensor<T> k = matmul(tok, transpose(mod.params.wk));
      const Tensor<T> v = matmul(tok, transpose(mod.params.wv));
      last = dense_attention(q, k, v, cfg.heads);
    };
  } else {
    throw ContractError("unknown benchmark op '" + op + "'");
  }

  LatencyStats s = measure_latency(fn, repeats, warmup);
  s.op = op;
  s.tokens = tokens;
  s.precision = dtype_of<T>() == DType::f32 ? "f32" : "f64";
  const auto bytes = encode_tensor(last);
  s.output_checksum = fnv1a(bytes.data(), bytes.size());
  return s;
}

}  // namespace pst
