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

// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "pst/gradcheck_suite.hpp"
#include "pst/pst.hpp"

namespace {

namespace fs = std::filesystem;
using pst::FeatureMap;
using pst::GridDims;
using pst::PsaConfig;
using pst::PsaModule;
using pst::Rng;
using pst::Tensor;
using pst::random_tensor;

struct Outcome {
  bool pass = true;
  std::string detail;
};

/// Collects failed checks; the first few are kept for the report.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    if (ok) return;
    ++failures_;
    if (failures_ <= 3) notes_ += (notes_.empty() ? "" : "; ") + what;
  }
  Outcome done(const std::string& summary) const {
    if (failures_ == 0) return {true, summary};
    return {false, std::to_string(failures_) + " failed check(s): " + notes_};
  }

 private:
  std::size_t failures_ = 0;
  std::string notes_;
};

std::uint64_t closed_form(std::uint64_t c, std::uint64_t cu, std::uint64_t t) {
  return 10 * t * t + (cu + 3 * c + 61) * t;
}

// 1. Parameter ledger against the closed form.
Outcome parameter_formula() {
  Checks chk;
  Rng rng(2024);
  std::uniform_int_distribution<std::size_t> ch(1, 512), dim(1, 64);
  for (int trial = 0; trial < 50; ++trial) {
    pst::PstConfig cfg = pst::PstConfig::make(ch(rng), ch(rng), 8 * dim(rng));
    cfg.psa.heads = 1;
    const auto ledger = pst::param_count(cfg);
    std::uint64_t listed = 0;
    for (const auto& e : ledger.entries) listed += e.count;
    const auto want = closed_form(cfg.in_channels, cfg.up_channels, cfg.token_dim());
    chk.expect(ledger.total == want && listed == want,
               "C=" + std::to_string(cfg.in_channels) + " Cup=" +
                   std::to_string(cfg.up_channels) + " C'=" + std::to_string(cfg.token_dim()));
  }
  const auto table = pst::param_count(pst::PstConfig::make(8, 16, 32)).to_table();
  chk.expect(table.find("total 13472") != std::string::npos, "default ledger total");
  return chk.done("50 configs exact; C=8 Cup=16 C'=32 total 13472");
}

// 2. Instrumented interaction counter against N^2/4 + N min(4k, N).
Outcome complexity_formula() {
  Checks chk;
  std::string reference;
  for (std::size_t n : {16u, 64u, 256u, 1024u}) {
    for (std::size_t k : {0u, 4u, 8u, 16u}) {
      PsaConfig cfg = PsaConfig::for_dim(32);
      cfg.k = k;
      const auto r = pst::count_interactions(cfg, n, 7 + n + k);
      const std::uint64_t coarse = std::uint64_t(n) * n / 4;
      const std::uint64_t fine = std::uint64_t(n) * std::min<std::uint64_t>(4 * k, n);
      chk.expect(r.measured_coarse == coarse && r.measured_fine == fine &&
                     r.coarse_interactions == coarse && r.fine_interactions == fine,
                 "N=" + std::to_string(n) + " k=" + std::to_string(k));
      if (n == 64 && k == 8) {
        reference = std::to_string(r.measured_coarse) + "/" + std::to_string(r.measured_fine) +
                    "/" + std::to_string(r.measured_coarse + r.measured_fine);
      }
    }
  }
  chk.expect(reference == "1024/2048/3072", "N=64 k=8 gave " + reference);
  return chk.done("16 (N, k) pairs exact; N=64 k=8 -> " + reference);
}

// 3. Covering selection against dense attention over every fine token.
template <class T>
double sparse_dense_trial(Rng& rng, int trial) {
  const std::size_t heads = std::size_t(1) << (trial % 3);
  const GridDims coarse{std::size_t(1 + trial % 4), std::size_t(1 + (trial / 4) % 4)};
  const std::size_t n = 4 * coarse.count();
  PsaConfig cfg = PsaConfig::for_dim(16);
  cfg.heads = heads;
  cfg.k = coarse.count() + std::size_t(trial % 3);  // 4k >= N
  const auto m = PsaModule<T>::init(cfg, rng);
  const auto q = random_tensor<T>({n, 16}, rng, -2, 2);
  const auto x = random_tensor<T>({n, 16}, rng, -2, 2);
  std::vector<T> scores(coarse.count());
  for (auto& s : scores) s = static_cast<T>(0.01 + double(rng() % 1000) / 1000.0);
  const auto sel = pst::select_fine_indices<T>(scores, cfg, coarse);
  const auto y = pst::fine_attention(q, x, m.params, sel, heads);

  const auto xm = oracle::to_mat(x);
  const auto ref = oracle::attention(
      oracle::to_mat(q), oracle::matmul(xm, oracle::transpose(oracle::to_mat(m.params.wk))),
      oracle::matmul(xm, oracle::transpose(oracle::to_mat(m.params.wv))), heads);
  return oracle::max_diff(y, ref.out.v);
}

Outcome sparse_dense_oracle() {
  Checks chk;
  Rng rng(33);
  double worst32 = 0.0, worst64 = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const double e32 = sparse_dense_trial<float>(rng, trial);
    const double e64 = sparse_dense_trial<double>(rng, trial);
    worst32 = std::max(worst32, e32);
    worst64 = std::max(worst64, e64);
    chk.expect(e32 < 1e-5, "f32 trial " + std::to_string(trial));
    chk.expect(e64 < 1e-10, "f64 trial " + std::to_string(trial));
  }
  std::ostringstream os;
  os << "20 trials; worst f32 " << std::scientific << std::setprecision(2) << worst32
     << ", f64 " << worst64;
  return chk.done(os.str());
}

// 4. Fine stage off equals k = 0; enabling it leaves the checkpoint alone.
template <class T>
bool fine_off_equals_k0(Rng& rng, std::size_t heads, std::size_t k, GridDims fine) {
  PsaConfig cfg = PsaConfig::for_dim(16);
  cfg.heads = heads;
  cfg.k = k;
  auto m = PsaModule<T>::init(cfg, rng);
  fixtures::perturb_affine<T>(m.params, rng);
  fixtures::randomize_buffers(m.buffers, rng);
  const auto x = fixtures::map<T>(16, fine.height, fine.width, rng);
  const auto u = fixtures::map<T>(16, fine.height / 2, fine.width / 2, rng);
  PsaConfig off = cfg, zero = cfg;
  off.fine_enabled = false;
  zero.k = 0;
  return pst::bit_equal(pst::psa_forward(x, u, m, off).tensor(),
                        pst::psa_forward(x, u, m, zero).tensor());
}

Outcome train_infer_toggle() {
  Checks chk;
  Rng rng(44);
  for (std::size_t t = 0; t < 12; ++t) {
    const GridDims g{2 + 2 * (t % 4), 2 + 2 * ((t / 4) % 3)};
    chk.expect(fine_off_equals_k0<float>(rng, 1 + t % 2, 1 + t, g), "f32 psa case");
    chk.expect(fine_off_equals_k0<double>(rng, 1 + t % 2, 1 + t, g), "f64 psa case");
  }

  const auto data = pst::synth_dataset<float>(3, 48, 4);
  auto state = pst::TrainState<float>::start(
      pst::ClsModel<float>::init(pst::ClsConfig::make(4, 16), 3));
  pst::TrainOptions opts;
  opts.steps = 5;
  opts.batch = 16;
  pst::train_classifier<float>(state, data, opts);

  const fs::path dir = fs::temp_directory_path() / "pst_acceptance_toggle";
  fs::remove_all(dir);
  pst::save_checkpoint<float>((dir / "trained").string(), state.model.params, pst::kClsPrefix,
                              state.model.buffers);
  const auto before = pst::checkpoint_checksum((dir / "trained").string());

  pst::ClsModel<float> fine = state.model;
  fine.cfg.pst.psa.fine_enabled = true;
  fine.cfg.pst.psa.k = 8;
  pst::ClsModel<float> zero = state.model;
  zero.cfg.pst.psa.fine_enabled = true;
  zero.cfg.pst.psa.k = 0;
  const std::span<const Tensor<float>> images(data.images.data(), 16);
  const auto coarse_logits = pst::cls_logits<float>(images, state.model);
  chk.expect(pst::bit_equal(coarse_logits, pst::cls_logits<float>(images, zero)),
             "classifier k=0 logits");
  pst::cls_logits<float>(images, fine);
  pst::save_checkpoint<float>((dir / "fine").string(), fine.params, pst::kClsPrefix,
                              fine.buffers);
  const auto after = pst::checkpoint_checksum((dir / "fine").string());
  fs::remove_all(dir);
  chk.expect(before == after, "checkpoint checksum changed");

  std::ostringstream os;
  os << "24 psa cases + classifier bit-identical; checkpoint checksum " << std::hex << before
     << " unchanged";
  return chk.done(os.str());
}

// 5. Finite-difference gradient checks in f64.
Outcome gradient_checks() {
  Checks chk;
  Rng rng(55);
  double worst = 0.0;
  std::size_t cases = 0;
  for (int instance = 0; instance < 3; ++instance) {
    for (const auto& c : pst::op_grad_cases(rng)) {
      const auto r = pst::check_gradients(c.params, c.build);
      worst = std::max(worst, r.worst());
      ++cases;
      chk.expect(r.pass(), c.name);
    }
  }
  const auto block = pst::pst_block_grad_case(rng, pst::gradcheck_block_config());
  const auto r = pst::check_gradients(block.params, block.build);
  chk.expect(r.pass(), "pst block");
  std::ostringstream os;
  os << cases << " op cases worst " << std::scientific << std::setprecision(2) << worst
     << "; coarse-path block (" << block.params.size() << " tensors) worst " << r.worst();
  return chk.done(os.str());
}

// 6. Toy classifier training.
Outcome learning_works() {
  Checks chk;
  const auto data = pst::synth_dataset<float>(1, 512, 4);
  const auto run = [&] {
    auto state = pst::TrainState<float>::start(
        pst::ClsModel<float>::init(pst::ClsConfig::make(4, 32), 1));
    pst::TrainOptions opts;
    opts.steps = 300;
    opts.lr = 0.05;
    opts.momentum = 0.9;
    opts.seed = 1;
    const auto log = pst::train_classifier<float>(state, data, opts);
    return std::make_pair(log, pst::params_checksum(state.model.params));
  };
  const auto [a, sum_a] = run();
  const auto [b, sum_b] = run();
  chk.expect(a.train_accuracy >= 0.9, "accuracy " + std::to_string(a.train_accuracy));
  chk.expect(sum_a == sum_b && a.losses == b.losses, "second run differs");
  std::ostringstream os;
  os << "train accuracy " << a.train_accuracy << " after 300 steps; rerun bit-identical";
  return chk.done(os.str());
}

// 7. Top-k selection and 2x2 expansion against enumeration.
Outcome topk_semantics() {
  Checks chk;
  Rng rng(77);
  std::uniform_int_distribution<int> level(0, 5);
  for (int trial = 0; trial < 300; ++trial) {
    const GridDims coarse{std::size_t(1 + trial % 4), std::size_t(1 + (trial / 4) % 5)};
    std::vector<double> s(coarse.count());
    for (auto& v : s) v = level(rng) * 5e-7;  // exact ties; 5e-7 and 1e-6 are filtered
    for (std::size_t k : {0u, 1u, 2u, 5u, 30u}) {
      const auto want = oracle::topk(s, k, 1e-6);
      chk.expect(pst::topk_indices<double>(s, k, 1e-6) == want, "topk order");
      PsaConfig cfg = PsaConfig::for_dim(8);
      cfg.k = k;
      const auto sel = pst::select_fine_indices<double>(s, cfg, coarse);
      std::vector<std::size_t> fine;
      for (std::size_t c : want) {
        const auto kids = oracle::children(c, coarse.width, 2 * coarse.height, 2 * coarse.width);
        fine.insert(fine.end(), kids.begin(), kids.end());
      }
      chk.expect(sel.coarse_indices == want && sel.fine_indices == fine, "selection");
      for (double v : sel.scores) chk.expect(v > 1e-6, "score at or below threshold");
    }
  }
  const auto p = pst::expand_patch(1 * 4 + 1, 4);
  chk.expect(std::vector<std::size_t>(p.begin(), p.end()) ==
                 std::vector<std::size_t>{18, 19, 26, 27},
             "coarse (1,1) on 4x4");
  return chk.done("300 grids x 5 k match enumeration; (1,1) on 4x4 -> {18,19,26,27}");
}

// 8. Softmax, convexity and key-score normalization.
Outcome normalization_invariants() {
  Checks chk;
  Rng rng(88);
  double worst_row = 0.0, worst_scores = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t rows = 1 + trial % 9, cols = 1 + (trial * 7) % 23;
    const auto x = random_tensor<float>({rows, cols}, rng, -30, 30);
    const auto s = pst::softmax_rows(x);
    for (std::size_t i = 0; i < rows; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < cols; ++j) sum += s.at(i, j);
      worst_row = std::max(worst_row, std::abs(sum - 1.0));
    }

    const std::size_t heads = 1 + trial % 4, n = 4 * (1 + trial % 6);
    const auto q = random_tensor<double>({n, 4 * heads}, rng, -3, 3);
    const auto k = random_tensor<double>({n / 4, 4 * heads}, rng, -3, 3);
    const auto v = random_tensor<double>({n / 4, 4 * heads}, rng, -5, 5);
    const auto r = pst::coarse_attention(q, k, v, heads);
    for (std::size_t c = 0; c < v.extent(1); ++c) {
      double lo = v.at(0, c), hi = v.at(0, c);
      for (std::size_t j = 1; j < v.extent(0); ++j) {
        lo = std::min(lo, v.at(j, c));
        hi = std::max(hi, v.at(j, c));
      }
      for (std::size_t i = 0; i < n; ++i) {
        chk.expect(r.output.at(i, c) >= lo - 1e-12 && r.output.at(i, c) <= hi + 1e-12,
                   "coarse output outside value range");
      }
    }

    const auto qf = random_tensor<float>({n, 4 * heads}, rng, -3, 3);
    const auto kf = random_tensor<float>({n / 4, 4 * heads}, rng, -3, 3);
    const auto scores = pst::key_scores(pst::coarse_attention(qf, kf, kf, heads).weights);
    double total = 0.0;
    for (float sc : scores.data()) total += sc;
    worst_scores = std::max(worst_scores, std::abs(total - 1.0));
  }
  chk.expect(worst_row < 1e-6, "softmax row sum");
  chk.expect(worst_scores < 1e-6, "key score sum");
  std::ostringstream os;
  os << "100 trials each; worst |row sum - 1| " << std::scientific << std::setprecision(2)
     << worst_row << ", |score sum - 1| " << worst_scores;
  return chk.done(os.str());
}

// 9. Self-gating, stack depth 1, shared K/V across stages.
Outcome ablation_plumbing() {
  Checks chk;
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t dim = 8;
    PsaConfig cfg = PsaConfig::for_dim(dim);
    cfg.fusion = pst::FusionMode::self_gating;
    const pst::GateWeights<Tensor<double>> gate{Tensor<double>({dim, 2 * dim}),
                                                Tensor<double>({dim})};
    const std::size_t n = 4 + trial;
    const auto oc = random_tensor<double>({n, dim}, rng, -4, 4);
    const auto of = random_tensor<double>({n, dim}, rng, -4, 4);
    const auto y = pst::gated_fusion(pst::self_gate(oc, of, gate, cfg), of, oc);
    for (std::size_t i = 0; i < y.size(); ++i) {
      chk.expect(std::abs(y[i] - 0.5 * (oc[i] + of[i])) < 1e-6, "zero gate mean");
    }
  }

  for (int trial = 0; trial < 6; ++trial) {
    PsaConfig cfg = PsaConfig::for_dim(8);
    cfg.heads = 1 + trial % 2;
    cfg.k = 1 + trial;
    auto [stages, buffers] = pst::init_psa_stack<double>(cfg, rng);
    fixtures::randomize_buffers(buffers, rng);
    const auto x = fixtures::map<double>(8, 4 + 2 * (trial % 2), 4, rng);
    const auto u = fixtures::map<double>(8, 2 + (trial % 2), 2, rng);
    chk.expect(pst::bit_equal(pst::psa_stack_forward(x, u, stages, cfg, buffers).tensor(),
                              pst::psa_forward(x, u, stages[0], cfg, buffers).tensor()),
               "depth 1");

    PsaConfig deep = cfg;
    deep.stack_depth = 3;
    auto [dstages, dbuffers] = pst::init_psa_stack<double>(deep, rng);
    fixtures::randomize_buffers(dbuffers, rng);
    const auto y = pst::psa_stack_forward(x, u, dstages, deep, dbuffers);
    auto altered = dstages;
    for (std::size_t s = 1; s < altered.size(); ++s) {
      altered[s].wk = random_tensor<double>(altered[s].wk.shape(), rng);
      altered[s].wv = random_tensor<double>(altered[s].wv.shape(), rng);
    }
    chk.expect(pst::bit_equal(y.tensor(),
                              pst::psa_stack_forward(x, u, altered, deep, dbuffers).tensor()),
               "later stages must read stage-0 K/V");
  }
  return chk.done("zero gate = branch mean (20 trials); depth 1 bit-exact; K/V shared bit-exact");
}

// 10. Coarse-only PSA against dense attention at N = 4096 on this host.
Outcome relative_cost() {
  Checks chk;
  const PsaConfig cfg = PsaConfig::for_dim(32);
  const auto coarse = pst::benchmark<float>("psa_coarse", cfg, 4096, 10, 3, 1);
  const auto dense = pst::benchmark<float>("dense", cfg, 4096, 10, 3, 1);
  const double ratio = coarse.median_ns / dense.median_ns;
  chk.expect(ratio < 1.0, "ratio " + std::to_string(ratio));
  std::ostringstream os;
  os << "median psa_coarse " << coarse.median_ns / 1e6 << " ms, dense "
     << dense.median_ns / 1e6 << " ms, ratio " << std::setprecision(3) << ratio;
  return chk.done(os.str());
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"parameter formula", parameter_formula},
      {"complexity formula", complexity_formula},
      {"sparse-dense oracle", sparse_dense_oracle},
      {"train/infer toggle", train_infer_toggle},
      {"gradient checks", gradient_checks},
      {"learning works", learning_works},
      {"top-k semantics", topk_semantics},
      {"normalization invariants", normalization_invariants},
      {"ablation plumbing", ablation_plumbing},
      {"relative cost", relative_cost},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    all = all && o.pass;
    std::cout << "criterion " << std::setw(2) << i + 1 << ' ' << (o.pass ? "PASS" : "FAIL")
              << "  " << criteria[i].first << ": " << o.detail << "  [" << std::fixed
              << std::setprecision(2) << secs << " s]" << std::defaultfloat << std::endl;
  }
  std::cout << (all ? "acceptance PASS" : "acceptance FAIL") << std::endl;
  return all ? 0 : 1;
}
