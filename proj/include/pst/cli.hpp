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

// Command-line front end.
//
//   pst params     --c 8 --cup 16 --cprime 32
//   pst cost       --n 64 --k 8
//   pst gradcheck  --precision f64
//   pst bench      --op all --n 4096
//   pst heatmap    --x x.pstt --out scores.pgm
//   pst train-toy  --steps 300
//   pst run-psa    --x x.pstt --out y.pstt
//
// Exit codes: 0 success, 1 failed check, 2 usage or format error.

#pragma once

#include <CLI11.hpp>

#include <cstdint>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "pst/bench.hpp"
#include "pst/checkpoint.hpp"
#include "pst/cost.hpp"
#include "pst/gradcheck_suite.hpp"
#include "pst/heatmap.hpp"
#include "pst/networks.hpp"
#include "pst/pst_block.hpp"
#include "pst/tensor_file.hpp"

namespace pst {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitUsage = 2;

struct CliOptions {
  std::size_t c = 8;
  std::size_t cup = 16;
  std::size_t cprime = 32;
  std::size_t heads = 0;  // 0: C' / 32, at least one
  std::size_t k = 8;
  double threshold = 1e-6;
  std::string fine = "on";
  std::string fusion = "sum";
  std::size_t stack = 1;
  std::uint64_t seed = 0;
  std::string precision = "f32";
  std::size_t threads = 1;

  PsaConfig psa() const {
    PsaConfig cfg = PsaConfig::for_dim(cprime);
    if (heads) cfg.heads = heads;
    cfg.k = k;
    cfg.score_threshold = threshold;
    cfg.fine_enabled = fine == "on";
    cfg.fusion = fusion == "gate" ? FusionMode::self_gating : FusionMode::sum;
    cfg.stack_depth = stack;
    return cfg;
  }
  PstConfig pst() const { return {c, cup, psa()}; }
};

namespace detail {

inline void add_psa_flags(CLI::App* sub, CliOptions& o) {
  sub->add_option("--cprime", o.cprime, "token dimension C'");
  sub->add_option("--heads", o.heads, "attention heads (default C'/32)");
  sub->add_option("--k", o.k, "coarse keys kept for the fine stage");
  sub->add_option("--threshold", o.threshold, "minimum key score for selection");
  sub->add_option("--fine", o.fine, "fine attention")->check(CLI::IsMember({"on", "off"}));
  sub->add_option("--fusion", o.fusion, "branch fusion")
      ->check(CLI::IsMember({"sum", "gate"}));
  sub->add_option("--stack", o.stack, "PSA stack depth");
  sub->add_option("--seed", o.seed, "random seed");
}

inline void add_precision_flag(CLI::App* sub, CliOptions& o) {
  sub->add_option("--precision", o.precision, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
}

/// Fine map from a tensor file, coarse map from a second file or the 2x
/// average-pooled fine map. Weights are seeded.
template <class T>
std::pair<FeatureMap<T>, FeatureMap<T>> load_pair(const std::string& x_path,
                                                  const std::string& u_path) {
  FeatureMap<T> x(load_tensor<T>(x_path));
  if (u_path.empty()) return {x, FeatureMap<T>(downsample_avg2x(x.tensor()))};
  return {x, FeatureMap<T>(load_tensor<T>(u_path))};
}

inline DType file_dtype(const std::string& path) {
  return std::holds_alternative<Tensor<float>>(load_any_tensor(path)) ? DType::f32
                                                                     : DType::f64;
}

template <class T>
int run_psa_cmd(CliOptions o, const std::string& x_path, const std::string& u_path,
                const std::string& out_path, std::ostream& out) {
  auto [x, u] = load_pair<T>(x_path, u_path);
  o.cprime = x.channels();
  const PsaConfig cfg = o.psa();
  cfg.validate();
  Rng rng(o.seed);
  auto [stages, buffers] = init_psa_stack<T>(cfg, rng);
  const FeatureMap<T> y = psa_stack_forward(x, u, stages, cfg, buffers);
  save_tensor(out_path, y.tensor());
  out << "wrote " << shape_str(y.tensor().shape()) << " to " << out_path << '\n';
  return kExitOk;
}

template <class T>
int heatmap_cmd(CliOptions o, const std::string& x_path, const std::string& u_path,
                const std::string& out_path, const std::string& format,
                std::ostream& out) {
  auto [x, u] = load_pair<T>(x_path, u_path);
  o.cprime = x.channels();
  const PsaConfig cfg = o.psa();
  Rng rng(o.seed);
  const auto mod = PsaModule<T>::init(cfg, rng);
  PsaTrace<T> trace;
  psa_forward(x, u, mod, cfg, &trace);
  const auto& scores = trace.key_scores.at(0);
  export_heatmap<T>(scores.data(), trace.coarse_grids.at(0), out_path,
                    format == "csv" ? HeatmapFormat::csv : HeatmapFormat::pgm);
  out << "key scores " << trace.coarse_grids[0].height << "x"
      << trace.coarse_grids[0].width << " -> " << out_path << '\n';
  out << "selected coarse keys:";
  for (std::size_t i : trace.selections.at(0).coarse_indices) out << ' ' << i;
  out << '\n';
  return kExitOk;
}

template <class T>
int bench_cmd(const CliOptions& o, const std::string& op, std::size_t n,
              std::size_t repeats, std::size_t warmup, std::ostream& out) {
  const PsaConfig cfg = o.psa();
  std::vector<std::string> ops;
  if (op == "all") {
    ops = benchmark_ops();
  } else {
    ops = {op};
  }
  std::vector<LatencyStats> results;
  for (const auto& name : ops) {
    LatencyStats s = benchmark<T>(name, cfg, n, repeats, warmup, o.seed);
    s.threads = o.threads;
    out << s.to_text();
    results.push_back(s);
  }
  if (op == "all") {
    const double ratio = results[1].median_ns / results[2].median_ns;
    out << "median ratio psa_coarse / dense = " << ratio << '\n';
  }
  return kExitOk;
}

}  // namespace detail

/// Runs the command line; all output goes to `out` and `err`.
inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"Pyramid sparse transformer toolkit"};
  app.require_subcommand(1);
  CliOptions o;

  auto* params = app.add_subcommand("params", "parameter ledger and closed-form check");
  params->add_option("--c", o.c, "fine input channels C");
  params->add_option("--cup", o.cup, "coarse input channels C_up");
  detail::add_psa_flags(params, o);

  std::size_t tokens = 64;
  auto* cost = app.add_subcommand("cost", "interaction and MAC counts");
  cost->add_option("--n", tokens, "fine tokens N (multiple of 4)");
  detail::add_psa_flags(cost, o);

  std::string target = "all";
  std::size_t instances = 1;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
  grad->add_option("--target", target, "ops, block or all")
      ->check(CLI::IsMember({"ops", "block", "all"}));
  grad->add_option("--instances", instances, "random instances per op");
  grad->add_option("--threads", o.threads, "worker threads");
  grad->add_option("--seed", o.seed, "random seed");
  std::string grad_precision = "f64";
  grad->add_option("--precision", grad_precision, "f64 only")
      ->check(CLI::IsMember({"f32", "f64"}));

  std::string bench_op = "all";
  std::size_t repeats = 10, warmup = 3;
  auto* bench = app.add_subcommand("bench", "latency microbenchmarks");
  bench->add_option("--op", bench_op, "psa, psa_coarse, dense or all")
      ->check(CLI::IsMember({"psa", "psa_coarse", "dense", "all"}));
  bench->add_option("--n", tokens, "fine tokens N");
  bench->add_option("--repeats", repeats, "timed runs (>= 10)");
  bench->add_option("--warmup", warmup, "untimed runs (>= 3)");
  bench->add_option("--threads", o.threads, "reported thread count");
  detail::add_psa_flags(bench, o);
  detail::add_precision_flag(bench, o);

  std::string x_path, u_path, out_path, format = "pgm";
  auto* heat = app.add_subcommand("heatmap", "export coarse key scores");
  heat->add_option("--x", x_path, "fine map tensor file [C',H,W]")->required();
  heat->add_option("--u", u_path, "coarse map tensor file (default: pooled x)");
  heat->add_option("--out", out_path, "output path")->required();
  heat->add_option("--format", format, "pgm or csv")->check(CLI::IsMember({"pgm", "csv"}));
  detail::add_psa_flags(heat, o);

  TrainOptions topts;
  std::size_t samples = 512, classes = 4, log_every = 10;
  std::string ckpt;
  auto* train = app.add_subcommand("train-toy", "train the toy classifier");
  train->add_option("--steps", topts.steps, "SGD steps");
  train->add_option("--n", samples, "dataset size");
  train->add_option("--classes", classes, "classes (2..8)");
  train->add_option("--lr", topts.lr, "learning rate");
  train->add_option("--momentum", topts.momentum, "momentum");
  train->add_option("--batch", topts.batch, "batch size");
  train->add_option("--log-every", log_every, "loss print interval");
  train->add_option("--checkpoint", ckpt, "save trained parameters here");
  train->add_option("--cprime", o.cprime, "token dimension C'");
  train->add_option("--k", o.k, "coarse keys kept when fine attention is enabled");
  train->add_option("--seed", o.seed, "random seed");

  auto* run = app.add_subcommand("run-psa", "PSA forward on tensor files");
  run->add_option("--x", x_path, "fine map tensor file [C',H,W]")->required();
  run->add_option("--u", u_path, "coarse map tensor file (default: pooled x)");
  run->add_option("--out", out_path, "output tensor file")->required();
  detail::add_psa_flags(run, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (params->parsed()) {
      const ParamLedger ledger = param_count(o.pst());
      out << ledger.to_table();
      return kExitOk;
    }
    if (cost->parsed()) {
      const CostReport r = count_interactions(o.psa(), tokens, o.seed);
      out << r.to_text();
      out << "coarse / fine / total: " << r.coarse_interactions << " / "
          << r.fine_interactions << " / " << r.total_interactions() << '\n';
      return kExitOk;
    }
    if (grad->parsed()) {
      if (grad_precision != "f64") {
        err << "gradcheck runs in f64 only; pass --precision f64\n";
        return kExitUsage;
      }
      Rng rng(o.seed);
      GradCheckOptions gopts;
      gopts.threads = o.threads;
      bool ok = true;
      if (target != "block") {
        for (std::size_t i = 0; i < instances; ++i) {
          for (const auto& c : op_grad_cases(rng)) {
            const GradReport r = check_gradients(c.params, c.build, gopts);
            ok = ok && r.pass();
            out << std::left << std::setw(20) << c.name << std::right
                << std::scientific << std::setprecision(3) << std::setw(12)
                << r.worst() << std::defaultfloat << "  "
                << (r.pass() ? "PASS" : "FAIL") << '\n';
          }
        }
      }
      if (target != "ops") {
        const GradCase c = pst_block_grad_case(rng, gradcheck_block_config());
        const GradReport r = check_gradients(c.params, c.build, gopts);
        ok = ok && r.pass();
        out << "pst block (coarse path, C'=16, 8x8, batch 2):\n" << r.to_table();
      }
      out << (ok ? "gradcheck PASS" : "gradcheck FAIL") << '\n';
      return ok ? kExitOk : kExitCheckFailed;
    }
    if (bench->parsed()) {
      return o.precision == "f64"
                 ? detail::bench_cmd<double>(o, bench_op, tokens, repeats, warmup, out)
                 : detail::bench_cmd<float>(o, bench_op, tokens, repeats, warmup, out);
    }
    if (heat->parsed()) {
      return detail::file_dtype(x_path) == DType::f64
                 ? detail::heatmap_cmd<double>(o, x_path, u_path, out_path, format, out)
                 : detail::heatmap_cmd<float>(o, x_path, u_path, out_path, format, out);
    }
    if (train->parsed()) {
      topts.seed = o.seed;
      const auto data = synth_dataset<float>(o.seed, samples, classes);
      auto state = TrainState<float>::start(
          ClsModel<float>::init(ClsConfig::make(classes, o.cprime), o.seed));
      const TrainLog log = train_classifier<float>(
          state, data, topts, [&](std::size_t s, double loss) {
            if (s % std::max<std::size_t>(1, log_every) == 0 || s + 1 == topts.steps) {
              out << "step " << s << "  loss " << loss << '\n';
            }
          });
      out << "train accuracy (coarse only) " << log.train_accuracy << '\n';
      ClsModel<float> fine = state.model;
      fine.cfg.pst.psa.fine_enabled = true;
      fine.cfg.pst.psa.k = o.k;
      out << "train accuracy (fine enabled, k=" << o.k << ") " << accuracy(fine, data)
          << '\n';
      if (!ckpt.empty()) {
        save_checkpoint<float>(ckpt, state.model.params, kClsPrefix, state.model.buffers);
        out << "checkpoint " << ckpt << " checksum " << std::hex
            << checkpoint_checksum(ckpt) << std::dec << '\n';
      }
      return kExitOk;
    }
    if (run->parsed()) {
      return detail::file_dtype(x_path) == DType::f64
                 ? detail::run_psa_cmd<double>(o, x_path, u_path, out_path, out)
                 : detail::run_psa_cmd<float>(o, x_path, u_path, out_path, out);
    }
  } catch (const AccountingError& e) {
    err << "accounting check failed: " << e.what() << '\n';
    return kExitCheckFailed;
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << '\n';
    return kExitCheckFailed;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace pst
