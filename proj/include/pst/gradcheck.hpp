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

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "pst/autodiff.hpp"

namespace pst {

/// Central differences (f(θ + h_i e_i) - f(θ - h_i e_i)) / (2 h_i) with
/// h_i = h * max(|θ_i|, 1).
inline Tensor<double> finite_diff_grad(
    const std::function<double(const Tensor<double>&)>& f,
    const Tensor<double>& theta, double h = 1e-5) {
  Tensor<double> grad(theta.shape());
  Tensor<double> probe = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double step = h * std::max(std::abs(theta[i]), 1.0);
    probe[i] = theta[i] + step;
    const double up = f(probe);
    probe[i] = theta[i] - step;
    const double down = f(probe);
    probe[i] = theta[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_grad: f is not finite at coordinate " +
                         std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

struct NamedTensor {
  std::string name;
  Tensor<double> value;
};

struct GradEntry {
  std::string name;
  double max_rel_error = 0.0;
  bool pass = false;
};

struct GradReport {
  std::vector<GradEntry> entries;
  double threshold = 1e-4;

  bool pass() const {
    return std::all_of(entries.begin(), entries.end(),
                       [](const GradEntry& e) { return e.pass; });
  }

  double worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_error);
    return w;
  }

  /// Plain-text table: parameter, max relative error, PASS/FAIL.
  std::string to_table() const {
    std::size_t width = 9;
    for (const auto& e : entries) width = std::max(width, e.name.size());
    std::ostringstream os;
    char buf[64];
    os << pad("parameter", width) << "  max_rel_error  status\n";
    for (const auto& e : entries) {
      std::snprintf(buf, sizeof buf, "%13.3e", e.max_rel_error);
      os << pad(e.name, width) << "  " << buf << "  "
         << (e.pass ? "PASS" : "FAIL") << '\n';
    }
    std::snprintf(buf, sizeof buf, "%.0e", threshold);
    os << "threshold " << buf << ": " << (pass() ? "PASS" : "FAIL") << '\n';
    return os.str();
  }

 private:
  static std::string pad(const std::string& s, std::size_t w) {
    return s + std::string(w > s.size() ? w - s.size() : 0, ' ');
  }
};

/// Builds a scalar loss on `tape` from leaves bound to the given parameters.
using LossBuilder =
    std::function<ValueId(Tape<double>&, const std::vector<ValueId>&)>;

struct GradCheckOptions {
  double threshold = 1e-4;
  double h = 1e-5;
  std::size_t threads = 1;
  std::optional<OpKind> sign_fault;  // corrupt one backward rule (testing)
};

/// max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, 1e-8)
inline double grad_relative_error(const Tensor<double>& analytic,
                                  const Tensor<double>& numeric) {
  double diff = 0.0, scale = 1e-8;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / scale;
}

/// Compares tape gradients against central finite differences for every
/// parameter. The loss builder must be a pure function of the parameters.
inline GradReport check_gradients(const std::vector<NamedTensor>& params,
                                  const LossBuilder& build,
                                  const GradCheckOptions& opts = {}) {
  const auto bind = [&](Tape<double>& tape, const std::vector<NamedTensor>& ps,
                        bool grad) {
    std::vector<ValueId> ids;
    for (const auto& p : ps) ids.push_back(tape.leaf(p.value, grad, p.name));
    return ids;
  };

  Tape<double> tape;
  if (opts.sign_fault) tape.inject_sign_fault(*opts.sign_fault);
  const auto ids = bind(tape, params, true);
  const auto grads = tape.backward(build(tape, ids));

  const auto eval = [&](const std::vector<NamedTensor>& ps) {
    Tape<double> t;
    const auto leaves = bind(t, ps, false);
    return t.value(build(t, leaves))[0];
  };

  GradReport report;
  report.threshold = opts.threshold;
  report.entries.resize(params.size());
  const auto check_param = [&](std::size_t p) {
    std::vector<NamedTensor> local = params;
    const auto f = [&](const Tensor<double>& theta) {
      local[p].value = theta;
      return eval(local);
    };
    const Tensor<double> numeric = finite_diff_grad(f, params[p].value, opts.h);
    const double err = grad_relative_error(grads[ids[p]], numeric);
    report.entries[p] = {params[p].name, err, err < opts.threshold};
  };

  const std::size_t threads = std::max<std::size_t>(1, opts.threads);
  if (threads == 1) {
    for (std::size_t p = 0; p < params.size(); ++p) check_param(p);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t p = t; p < params.size(); p += threads) check_param(p);
      });
    }
    for (auto& th : pool) th.join();
  }
  return report;
}

}  // namespace pst
