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

// Small networks around the PST block.
//
//   ToyBackbone  [3,32,32] -> P3 [16,16,16], P4 [32,8,8], P5 [64,4,4]
//   DET neck     N4 = pst(P4, P5)
//                N3 = pst(P3, N4)
//                N5 = conv(downsample(pst(N4, P5)))
//   CLS          pst(P4, P5) -> global average pool -> linear
//
// plus a synthetic dataset and an SGD-with-momentum training loop.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pst/pst_block.hpp"

namespace pst {

inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSize = 32;
inline constexpr std::array<std::size_t, 3> kBackboneChannels{16, 32, 64};

template <class V>
struct PyramidFeatures {
  V p3;
  V p4;
  V p5;
};

/// Requires strict 2x spatial halving P3 -> P4 -> P5.
template <class T>
void check_pyramid(const PyramidFeatures<Tensor<T>>& f) {
  const auto halves = [](const Tensor<T>& fine, const Tensor<T>& coarse) {
    return fine.rank() == 3 && coarse.rank() == 3 &&
           fine.extent(1) == 2 * coarse.extent(1) &&
           fine.extent(2) == 2 * coarse.extent(2);
  };
  if (!halves(f.p3, f.p4) || !halves(f.p4, f.p5)) {
    throw DimensionError("pyramid levels must halve: " + shape_str(f.p3.shape()) +
                         ", " + shape_str(f.p4.shape()) + ", " +
                         shape_str(f.p5.shape()));
  }
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

/// Three stages of 2x2 average pool, 1x1 conv, norm, SiLU.
template <class V>
struct BackboneWeights {
  std::array<V, 3> conv;
  std::array<NormWeights<V>, 3> norm;
};

namespace detail {
inline std::string backbone_stage(const std::string& prefix, std::size_t i,
                                  const char* part) {
  return join_name(prefix, "stage" + std::to_string(i) + "." + part);
}

template <class Self, class F>
void visit_backbone(Self& w, const std::string& prefix, F&& f) {
  for (std::size_t i = 0; i < 3; ++i) {
    f(ParamInfo{backbone_stage(prefix, i, "conv"), ParamRole::weight}, w.conv[i]);
    visit_params(w.norm[i], backbone_stage(prefix, i, "norm"), f);
  }
}
}  // namespace detail

template <class V, class F>
void visit_params(BackboneWeights<V>& w, const std::string& prefix, F&& f) {
  detail::visit_backbone(w, prefix, f);
}
template <class V, class F>
void visit_params(const BackboneWeights<V>& w, const std::string& prefix, F&& f) {
  detail::visit_backbone(w, prefix, f);
}

template <class To, class From, class F>
BackboneWeights<To> transform_params(const BackboneWeights<From>& w,
                                     const std::string& prefix, F&& f) {
  BackboneWeights<To> r;
  for (std::size_t i = 0; i < 3; ++i) {
    r.conv[i] = f(ParamInfo{detail::backbone_stage(prefix, i, "conv"), ParamRole::weight},
                  w.conv[i]);
    r.norm[i] = transform_params<To>(w.norm[i], detail::backbone_stage(prefix, i, "norm"), f);
  }
  return r;
}

inline BackboneWeights<Shape> backbone_shapes() {
  BackboneWeights<Shape> s;
  std::size_t in = kImageChannels;
  for (std::size_t i = 0; i < 3; ++i) {
    s.conv[i] = {kBackboneChannels[i], in};
    s.norm[i] = norm_shapes(kBackboneChannels[i]);
    in = kBackboneChannels[i];
  }
  return s;
}

namespace detail {

template <class Ctx>
std::vector<PyramidFeatures<typename Ctx::Value>> backbone_forward(
    Ctx& ctx, const std::vector<typename Ctx::Value>& images,
    const BackboneWeights<typename Ctx::Value>& w, const std::string& prefix) {
  using V = typename Ctx::Value;
  for (const auto& img : images) {
    const Shape want{kImageChannels, kImageSize, kImageSize};
    if (ctx.value(img).shape() != want) {
      throw DimensionError("backbone expects images of shape " + shape_str(want) +
                           ", got " + shape_str(ctx.value(img).shape()));
    }
  }
  std::vector<std::vector<V>> levels;
  std::vector<V> x = images;
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<V> pre;
    for (const auto& v : x) pre.push_back(ctx.conv1x1(ctx.downsample_avg2x(v), w.conv[i]));
    auto normed = ctx.batch_norm(pre, w.norm[i], backbone_stage(prefix, i, "norm"));
    for (auto& v : normed) v = ctx.silu(v);
    levels.push_back(normed);
    x = std::move(normed);
  }
  std::vector<PyramidFeatures<V>> out;
  for (std::size_t b = 0; b < images.size(); ++b) {
    out.push_back({levels[0][b], levels[1][b], levels[2][b]});
  }
  return out;
}

template <class V>
std::vector<V> level(const std::vector<PyramidFeatures<V>>& f, V PyramidFeatures<V>::*m) {
  std::vector<V> out;
  for (const auto& x : f) out.push_back(x.*m);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Detection neck
// ---------------------------------------------------------------------------

struct DetConfig {
  std::size_t token_dim = 16;
  std::array<std::size_t, 3> in_channels = kBackboneChannels;
  PsaConfig psa = PsaConfig::for_dim(16);

  std::size_t out_channels() const { return 2 * token_dim; }
  PstConfig site(std::size_t c, std::size_t c_up) const {
    PstConfig cfg{c, c_up, psa};
    cfg.psa.token_dim = token_dim;
    return cfg;
  }
  PstConfig n4() const { return site(in_channels[1], in_channels[2]); }
  PstConfig n3() const { return site(in_channels[0], out_channels()); }
  PstConfig n5() const { return site(out_channels(), in_channels[2]); }

  static DetConfig make(std::size_t token_dim) {
    DetConfig cfg;
    cfg.token_dim = token_dim;
    cfg.psa = PsaConfig::for_dim(token_dim);
    return cfg;
  }
};

template <class V>
struct DetNeckWeights {
  PstWeights<V> n4;
  PstWeights<V> n3;
  PstWeights<V> n5;
  V n5_adapter;  // [2C', 2C'] after the 2x downsample
};

namespace detail {
template <class Self, class F>
void visit_det(Self& w, const std::string& prefix, F&& f) {
  visit_params(w.n4, join_name(prefix, "n4"), f);
  visit_params(w.n3, join_name(prefix, "n3"), f);
  visit_params(w.n5, join_name(prefix, "n5"), f);
  f(ParamInfo{join_name(prefix, "n5_adapter"), ParamRole::weight}, w.n5_adapter);
}
}  // namespace detail

template <class V, class F>
void visit_params(DetNeckWeights<V>& w, const std::string& prefix, F&& f) {
  detail::visit_det(w, prefix, f);
}
template <class V, class F>
void visit_params(const DetNeckWeights<V>& w, const std::string& prefix, F&& f) {
  detail::visit_det(w, prefix, f);
}

template <class To, class From, class F>
DetNeckWeights<To> transform_params(const DetNeckWeights<From>& w,
                                    const std::string& prefix, F&& f) {
  return {transform_params<To>(w.n4, join_name(prefix, "n4"), f),
          transform_params<To>(w.n3, join_name(prefix, "n3"), f),
          transform_params<To>(w.n5, join_name(prefix, "n5"), f),
          f(ParamInfo{join_name(prefix, "n5_adapter"), ParamRole::weight},
            w.n5_adapter)};
}

inline DetNeckWeights<Shape> det_neck_shapes(const DetConfig& cfg) {
  return {pst_shapes(cfg.n4()), pst_shapes(cfg.n3()), pst_shapes(cfg.n5()),
          {cfg.out_channels(), cfg.out_channels()}};
}

inline const std::string kNeckPrefix = "neck";

namespace detail {

template <class Ctx>
std::vector<PyramidFeatures<typename Ctx::Value>> det_neck_forward(
    Ctx& ctx, const std::vector<PyramidFeatures<typename Ctx::Value>>& feats,
    const DetNeckWeights<typename Ctx::Value>& w, const DetConfig& cfg,
    const std::string& prefix) {
  using V = typename Ctx::Value;
  using P = PyramidFeatures<V>;
  const auto p3 = level(feats, &P::p3);
  const auto p4 = level(feats, &P::p4);
  const auto p5 = level(feats, &P::p5);
  const auto n4 = pst_forward(ctx, p4, p5, w.n4, cfg.n4(), join_name(prefix, "n4"));
  const auto n3 = pst_forward(ctx, p3, n4, w.n3, cfg.n3(), join_name(prefix, "n3"));
  const auto n5_fine = pst_forward(ctx, n4, p5, w.n5, cfg.n5(), join_name(prefix, "n5"));
  std::vector<P> out;
  for (std::size_t b = 0; b < feats.size(); ++b) {
    out.push_back({n3[b], n4[b],
                   ctx.conv1x1(ctx.downsample_avg2x(n5_fine[b]), w.n5_adapter)});
  }
  return out;
}

}  // namespace detail

template <class T>
struct DetNeck {
  DetConfig cfg;
  DetNeckWeights<Tensor<T>> params;
  NormBuffers<T> buffers;

  static DetNeck init(const DetConfig& cfg, Rng& rng) {
    const auto shapes = det_neck_shapes(cfg);
    return {cfg, materialize<T>(shapes, kNeckPrefix, rng),
            init_norm_buffers<T>(shapes, kNeckPrefix)};
  }
};

/// Inference-mode neck; outputs match P3/P4/P5 spatially with 2C' channels.
template <class T>
PyramidFeatures<Tensor<T>> det_neck_forward(const PyramidFeatures<Tensor<T>>& feats,
                                            const DetNeck<T>& neck) {
  check_pyramid(feats);
  Eager<T> ctx(NormMode::infer, &neck.buffers);
  return detail::det_neck_forward(ctx, {feats}, neck.params, neck.cfg, kNeckPrefix)[0];
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

struct ClsConfig {
  std::size_t classes = 4;
  PstConfig pst = PstConfig::make(kBackboneChannels[1], kBackboneChannels[2], 32);

  /// Coarse-only by default, the configuration training requires.
  static ClsConfig make(std::size_t classes, std::size_t token_dim) {
    ClsConfig cfg{classes,
                  PstConfig::make(kBackboneChannels[1], kBackboneChannels[2], token_dim)};
    cfg.pst.psa.fine_enabled = false;
    return cfg;
  }
};

template <class V>
struct ClsWeights {
  BackboneWeights<V> backbone;
  PstWeights<V> pst;
  V head_weight;  // [classes, 2C']
  V head_bias;    // [classes]
};

namespace detail {
template <class Self, class F>
void visit_cls(Self& w, const std::string& prefix, F&& f) {
  visit_params(w.backbone, join_name(prefix, "backbone"), f);
  visit_params(w.pst, join_name(prefix, "pst"), f);
  f(ParamInfo{join_name(prefix, "head.weight"), ParamRole::weight}, w.head_weight);
  f(ParamInfo{join_name(prefix, "head.bias"), ParamRole::bias}, w.head_bias);
}
}  // namespace detail

template <class V, class F>
void visit_params(ClsWeights<V>& w, const std::string& prefix, F&& f) {
  detail::visit_cls(w, prefix, f);
}
template <class V, class F>
void visit_params(const ClsWeights<V>& w, const std::string& prefix, F&& f) {
  detail::visit_cls(w, prefix, f);
}

template <class To, class From, class F>
ClsWeights<To> transform_params(const ClsWeights<From>& w,
                                const std::string& prefix, F&& f) {
  return {transform_params<To>(w.backbone, join_name(prefix, "backbone"), f),
          transform_params<To>(w.pst, join_name(prefix, "pst"), f),
          f(ParamInfo{join_name(prefix, "head.weight"), ParamRole::weight},
            w.head_weight),
          f(ParamInfo{join_name(prefix, "head.bias"), ParamRole::bias}, w.head_bias)};
}

inline ClsWeights<Shape> cls_shapes(const ClsConfig& cfg) {
  return {backbone_shapes(), pst_shapes(cfg.pst),
          {cfg.classes, cfg.pst.out_channels()}, {cfg.classes}};
}

inline const std::string kClsPrefix = "cls";

namespace detail {

/// One [1, classes] logits row per image.
template <class Ctx>
std::vector<typename Ctx::Value> cls_forward(
    Ctx& ctx, const std::vector<typename Ctx::Value>& images,
    const ClsWeights<typename Ctx::Value>& w, const ClsConfig& cfg,
    const std::string& prefix) {
  using V = typename Ctx::Value;
  using P = PyramidFeatures<V>;
  const auto feats = backbone_forward(ctx, images, w.backbone, join_name(prefix, "backbone"));
  const auto fused = pst_forward(ctx, level(feats, &P::p4), level(feats, &P::p5),
                                 w.pst, cfg.pst, join_name(prefix, "pst"));
  std::vector<V> logits;
  for (const auto& f : fused) {
    auto pooled = ctx.mean_rows(ctx.map_to_tokens(f));
    logits.push_back(
        ctx.add_bias(ctx.matmul(pooled, ctx.transpose(w.head_weight)), w.head_bias));
  }
  return logits;
}

}  // namespace detail

template <class T>
struct ClsModel {
  ClsConfig cfg;
  ClsWeights<Tensor<T>> params;
  NormBuffers<T> buffers;

  static ClsModel init(const ClsConfig& cfg, std::uint64_t seed) {
    if (cfg.classes < 2) throw ContractError("classifier needs >= 2 classes");
    cfg.pst.validate();
    Rng rng(seed);
    const auto shapes = cls_shapes(cfg);
    return {cfg, materialize<T>(shapes, kClsPrefix, rng),
            init_norm_buffers<T>(shapes, kClsPrefix)};
  }
};

/// Inference-mode logits, one row per image: [batch, classes].
template <class T>
Tensor<T> cls_logits(std::span<const Tensor<T>> images, const ClsModel<T>& m) {
  Eager<T> ctx(NormMode::infer, &m.buffers);
  auto rows = detail::cls_forward(ctx, std::vector<Tensor<T>>(images.begin(), images.end()),
                                  m.params, m.cfg, kClsPrefix);
  return concat_rows<T>(rows);
}

/// Inference-mode logits of a single [3, 32, 32] image.
template <class T>
Tensor<T> cls_forward(const Tensor<T>& image, const ClsModel<T>& m) {
  const Tensor<T> row = cls_logits<T>(std::span<const Tensor<T>>(&image, 1), m);
  return row.reshaped({m.cfg.classes});
}

template <class T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits) {
  std::vector<std::size_t> out;
  const std::size_t n = logits.extent(1);
  for (std::size_t i = 0; i < logits.extent(0); ++i) {
    const auto row = logits.data().begin() + static_cast<std::ptrdiff_t>(i * n);
    out.push_back(static_cast<std::size_t>(std::max_element(row, row + n) - row));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

template <class T>
struct Dataset {
  std::vector<Tensor<T>> images;
  std::vector<std::size_t> labels;
  std::size_t classes = 0;

  std::size_t size() const { return images.size(); }
};

inline constexpr double kSynthNoise = 1.0;
inline constexpr double kSynthAmplitude = 2.5;

/// Quadrant (row, col offsets) carrying the pattern of class c.
inline std::pair<std::size_t, std::size_t> synth_quadrant(std::size_t c) {
  const std::size_t half = kImageSize / 2;
  return {(c % 4) / 2 * half, (c % 4) % 2 * half};
}

/// Per-channel sign of class c's pattern, from the bits of c.
inline double synth_colour(std::size_t c, std::size_t channel) {
  return (c >> channel) & 1U ? 1.0 : -1.0;
}

/// Gaussian noise plus, for class c, a smooth bump of class-specific colour
/// in quadrant c % 4.
template <class T>
Dataset<T> synth_dataset(std::uint64_t seed, std::size_t n, std::size_t classes) {
  if (classes < 2 || classes > 8) {
    throw ContractError("synth_dataset: classes must be in [2, 8], got " +
                        std::to_string(classes));
  }
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, kSynthNoise);
  std::uniform_int_distribution<std::size_t> label(0, classes - 1);
  const std::size_t half = kImageSize / 2;
  Dataset<T> d;
  d.classes = classes;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = label(rng);
    const auto [r0, c0] = synth_quadrant(c);
    Tensor<T> img({kImageChannels, kImageSize, kImageSize});
    for (auto& v : img.data()) v = static_cast<T>(noise(rng));
    for (std::size_t ch = 0; ch < kImageChannels; ++ch) {
      for (std::size_t y = 0; y < half; ++y) {
        for (std::size_t x = 0; x < half; ++x) {
          const double wy = std::cos(std::numbers::pi * (double(y) + 0.5 - half / 2.0) / half);
          const double wx = std::cos(std::numbers::pi * (double(x) + 0.5 - half / 2.0) / half);
          const double bump = 0.75 + 0.25 * wy * wx;
          img.at(ch, r0 + y, c0 + x) +=
              static_cast<T>(kSynthAmplitude * synth_colour(c, ch) * bump);
        }
      }
    }
    d.images.push_back(std::move(img));
    d.labels.push_back(c);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

template <class T>
struct TrainState {
  ClsModel<T> model;
  ClsWeights<Tensor<T>> velocity;
  std::size_t step = 0;

  static TrainState start(ClsModel<T> model) {
    auto velocity = transform_params<Tensor<T>>(
        model.params, std::string{},
        [](const ParamInfo&, const Tensor<T>& t) { return Tensor<T>::zeros_like(t); });
    return {std::move(model), std::move(velocity), 0};
  }
};

/// One SGD step with momentum on a batch: v = mu v + g, theta -= lr v.
/// Returns the batch cross-entropy before the update.
template <class T>
T train_step(TrainState<T>& state, std::span<const Tensor<T>> images,
             std::span<const std::size_t> labels, T lr, T momentum) {
  ClsModel<T>& m = state.model;
  if (m.cfg.pst.psa.fine_enabled) {
    throw ContractError("training runs the coarse path only; set fine_enabled = false");
  }
  if (images.empty() || images.size() != labels.size()) {
    throw DimensionError("train_step: batch of " + std::to_string(images.size()) +
                         " images and " + std::to_string(labels.size()) + " labels");
  }
  Tape<T> tape;
  const auto bound = bind_params<T>(m.params, kClsPrefix, tape, true);
  Recorder<T> ctx(tape, NormMode::train, &m.buffers);
  std::vector<ValueId> inputs;
  for (const auto& img : images) inputs.push_back(tape.constant(img));
  const auto rows = detail::cls_forward(ctx, inputs, bound, m.cfg, kClsPrefix);
  const ValueId loss = tape.cross_entropy(
      tape.concat_rows(rows), std::vector<std::size_t>(labels.begin(), labels.end()));
  const T loss_value = tape.value(loss)[0];
  if (!std::isfinite(loss_value)) {
    throw DivergenceError("non-finite loss at step " + std::to_string(state.step),
                          state.step);
  }
  const auto grads = tape.backward(loss);

  std::vector<Tensor<T>*> thetas, vels;
  std::vector<ValueId> ids;
  visit_params(m.params, std::string{},
               [&](const ParamInfo&, Tensor<T>& t) { thetas.push_back(&t); });
  visit_params(state.velocity, std::string{},
               [&](const ParamInfo&, Tensor<T>& t) { vels.push_back(&t); });
  visit_params(bound, std::string{}, [&](const ParamInfo&, ValueId v) { ids.push_back(v); });
  for (std::size_t p = 0; p < thetas.size(); ++p) {
    const Tensor<T>& g = grads[ids[p]];
    Tensor<T>& v = *vels[p];
    Tensor<T>& theta = *thetas[p];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = momentum * v[i] + g[i];
      theta[i] -= lr * v[i];
    }
  }
  for (const auto& [name, stats] : ctx.updates()) m.buffers[name] = stats;
  ++state.step;
  return loss_value;
}

/// Fraction of correctly classified images, inference mode.
template <class T>
double accuracy(const ClsModel<T>& m, const Dataset<T>& data,
                std::size_t batch = 64) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); i += batch) {
    const std::size_t n = std::min(batch, data.size() - i);
    const auto pred = argmax_rows(
        cls_logits<T>(std::span<const Tensor<T>>(data.images.data() + i, n), m));
    for (std::size_t j = 0; j < n; ++j) correct += pred[j] == data.labels[i + j];
  }
  return data.size() ? double(correct) / double(data.size()) : 0.0;
}

struct TrainOptions {
  std::size_t steps = 300;
  std::size_t batch = 32;
  double lr = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 1;
};

struct TrainLog {
  std::vector<double> losses;
  double train_accuracy = 0.0;
};

/// Shuffled minibatch SGD over `data`; `on_step(step, loss)` is optional.
template <class T>
TrainLog train_classifier(TrainState<T>& state, const Dataset<T>& data,
                          const TrainOptions& opts,
                          const std::function<void(std::size_t, double)>& on_step = {}) {
  if (data.size() == 0) throw ContractError("train_classifier: empty dataset");
  Rng rng(opts.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = data.size();
  TrainLog log;
  std::vector<Tensor<T>> images;
  std::vector<std::size_t> labels;
  for (std::size_t s = 0; s < opts.steps; ++s) {
    images.clear();
    labels.clear();
    while (images.size() < std::min(opts.batch, data.size())) {
      if (cursor == data.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      images.push_back(data.images[order[cursor]]);
      labels.push_back(data.labels[order[cursor]]);
      ++cursor;
    }
    const T loss = train_step<T>(state, images, labels, static_cast<T>(opts.lr),
                                 static_cast<T>(opts.momentum));
    log.losses.push_back(double(loss));
    if (on_step) on_step(s, double(loss));
  }
  log.train_accuracy = accuracy(state.model, data);
  return log;
}

}  // namespace pst
