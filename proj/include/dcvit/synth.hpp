// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dcvit/binio.hpp"
#include "dcvit/checkpoint.hpp"
#include "dcvit/error.hpp"
#include "dcvit/hash.hpp"
#include "dcvit/losses.hpp"
#include "dcvit/optim.hpp"
#include "dcvit/rng.hpp"
#include "dcvit/train.hpp"
#include "dcvit/vit.hpp"

namespace dcvit {

enum class LabelAssignment { RoundRobin, Random };

struct SynthConfig {
  std::int64_t num_images = 64;
  std::int64_t steps = 2000;
  double lr = 0.1;
  double alpha_l2 = 1e-5;
  double alpha_tv = 1e-4;
  double beta = 2.0;
  double init_std = 1.0;
  LabelAssignment label_assignment = LabelAssignment::RoundRobin;
  double clamp = 3.0;  // |pixel| bound after each step; 0 disables

  void validate() const {
    if (num_images < 1) throw ValidationError("synth num_images must be >= 1");
    if (steps < 1) throw ValidationError("synth steps must be >= 1");
    if (lr < 0.0 || alpha_l2 < 0.0 || alpha_tv < 0.0 || init_std < 0.0 || clamp < 0.0)
      throw ValidationError("synth lr, weights, init_std and clamp must be non-negative");
    if (!(beta > 0.0)) throw ValidationError("synth beta must be positive");
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"num_images", c.num_images}, {"steps", c.steps},       {"lr", c.lr},
                     {"alpha_l2", c.alpha_l2},     {"alpha_tv", c.alpha_tv}, {"beta", c.beta},
                     {"init_std", c.init_std},
                     {"label_assignment", c.label_assignment == LabelAssignment::RoundRobin ? "round_robin" : "random"},
                     {"clamp", c.clamp}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  SynthConfig d;
  c.num_images = j.value("num_images", d.num_images);
  c.steps = j.value("steps", d.steps);
  c.lr = j.value("lr", d.lr);
  c.alpha_l2 = j.value("alpha_l2", d.alpha_l2);
  c.alpha_tv = j.value("alpha_tv", d.alpha_tv);
  c.beta = j.value("beta", d.beta);
  c.init_std = j.value("init_std", d.init_std);
  const auto la = j.value("label_assignment", std::string("round_robin"));
  if (la != "round_robin" && la != "random") throw ValidationError("label_assignment must be round_robin or random");
  c.label_assignment = la == "round_robin" ? LabelAssignment::RoundRobin : LabelAssignment::Random;
  c.clamp = j.value("clamp", d.clamp);
}

struct MetricSet {
  Tensor images;  // [n, c, h, w], normalized input space
  std::vector<int> hint_labels;
  Digest fingerprint{};
};

struct SynthResult {
  MetricSet set;
  std::vector<double> trajectory;  // objective before step s, plus the final value
  double agreement_before = 0.0;   // teacher argmax == hint label, at init
  double agreement_after = 0.0;
};

/// Gaussian noise images (clamped like the optimised pixels when clamping is
/// on, so a zero-step run returns its input) and hint labels.
template <typename T = float>
std::pair<BasicTensor<T>, std::vector<int>> init_noise(const SynthConfig& cfg, std::int64_t channels,
                                                       std::int64_t image_size, std::int64_t num_classes, Rng& rng) {
  cfg.validate();
  BasicTensor<T> images({cfg.num_images, channels, image_size, image_size});
  for (auto& v : images.data()) v = static_cast<T>(rng.normal(0.0, cfg.init_std));
  if (cfg.clamp > 0.0)
    for (auto& v : images.data()) v = std::clamp(v, static_cast<T>(-cfg.clamp), static_cast<T>(cfg.clamp));
  std::vector<int> labels(static_cast<std::size_t>(cfg.num_images));
  for (std::size_t i = 0; i < labels.size(); ++i)
    labels[i] = cfg.label_assignment == LabelAssignment::RoundRobin
                    ? static_cast<int>(static_cast<std::int64_t>(i) % num_classes)
                    : static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes)));
  return {images, labels};
}

/// mean_i [ CE(teacher(x_i), y_i) + alpha_l2 * ||x_i||^2 + alpha_tv * TV_beta(x_i) ].
/// Only `images` should require a gradient; the teacher stays frozen.
template <typename T>
BasicTensor<T> synth_objective(Tape<T>& tape, const Model<T>& teacher, const BasicTensor<T>& images,
                               std::span<const int> labels, const SynthConfig& cfg) {
  const auto n = images.dim(0);
  auto out = forward(tape, teacher, images, RunMode::Eval);
  auto loss = hard_cross_entropy(tape, out.logits, labels);
  const T inv_n = static_cast<T>(1.0 / static_cast<double>(n));
  if (cfg.alpha_l2 != 0.0) loss = add(tape, loss, scale(tape, l2_reg(tape, images), static_cast<T>(cfg.alpha_l2) * inv_n));
  if (cfg.alpha_tv != 0.0)
    loss = add(tape, loss, scale(tape, tv_reg(tape, images, static_cast<T>(cfg.beta)), static_cast<T>(cfg.alpha_tv) * inv_n));
  return loss;
}

inline Digest metric_set_fingerprint(const Digest& teacher_digest, const SynthConfig& cfg, std::uint64_t seed) {
  Sha256 h;
  h.update(std::span<const std::uint8_t>(teacher_digest));
  h.update(nlohmann::json(cfg).dump());
  h.update("seed=" + std::to_string(seed));
  return h.finish();
}

/// Inverts the frozen teacher: Adam steps on the pixels of Gaussian noise
/// towards the hint labels under the L2 and TV priors, optionally clamping.
inline SynthResult generate_metric_set(const ViTModel& teacher_in, const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto& vc = teacher_in.config;
  Rng rng(seed, streams::kSynth);
  const auto teacher = teacher_in.clone();  // fresh storage: no parameter requires a gradient
  auto [images, labels] = init_noise<float>(cfg, vc.channels, vc.image_size, vc.num_classes, rng);
  std::span<const int> lab(labels);

  SynthResult res;
  res.agreement_before = detail::agreement(infer(teacher, images).logits, lab);
  std::vector<Tensor> pixels{images};
  OptimState<float> opt(std::span<const Tensor>(pixels), AdamWHyper{cfg.lr, 0.0, 0.9, 0.999, 1e-8});
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    Tape<float> tape;
    pixels[0].set_requires_grad(true);
    pixels[0].clear_grad();
    auto loss = synth_objective(tape, teacher, pixels[0], lab, cfg);
    const double value = loss.item();
    if (!std::isfinite(value)) throw GenerationError(detail::concat("synthetic objective diverged at step ", step));
    res.trajectory.push_back(value);
    tape.backward(loss);
    adamw_step(std::span<Tensor>(pixels), opt, cfg.lr);
    if (cfg.clamp > 0.0) {
      const float lim = static_cast<float>(cfg.clamp);
      for (auto& v : pixels[0].data()) v = std::clamp(v, -lim, lim);
    }
  }
  pixels[0].clear_grad();
  pixels[0].set_requires_grad(false);
  {
    auto tape = Tape<float>::inference();
    const double final_value = synth_objective(tape, teacher, pixels[0], lab, cfg).item();
    if (!std::isfinite(final_value)) throw GenerationError(detail::concat("synthetic objective diverged at step ", cfg.steps));
    res.trajectory.push_back(final_value);
  }
  if (!pixels[0].all_finite()) throw GenerationError("synthetic images contain non-finite pixels");
  res.agreement_after = detail::agreement(infer(teacher, pixels[0]).logits, lab);
  res.set = MetricSet{pixels[0], labels, metric_set_fingerprint(model_digest(teacher_in), cfg, seed)};
  return res;
}

// "DCMS" | u32 version | 32-byte fingerprint | n, c, h, w as u64
// | float32 pixels | n x u16 hint labels
inline constexpr std::uint32_t kMetricSetVersion = 1;

inline void save_metric_set(const std::string& path, const MetricSet& s) {
  binio::Writer w;
  w.magic("DCMS");
  w.u32(kMetricSetVersion);
  w.bytes(s.fingerprint.data(), s.fingerprint.size());
  for (int i = 0; i < 4; ++i) w.u64(static_cast<std::uint64_t>(s.images.dim(i)));
  w.f32s(s.images.data());
  for (auto l : s.hint_labels) w.u16(static_cast<std::uint16_t>(l));
  w.save(path);
}

inline MetricSet load_metric_set(const std::string& path) {
  auto r = binio::Reader::from_file(path);
  r.expect_magic("DCMS");
  const auto version = r.u32();
  if (version != kMetricSetVersion) throw IoError(detail::concat(path, ": unsupported metric set version ", version));
  MetricSet s;
  r.bytes(s.fingerprint.data(), s.fingerprint.size());
  Shape shape(4);
  for (auto& e : shape) e = static_cast<std::int64_t>(r.u64());
  s.images = Tensor(shape);
  r.f32s(s.images.data());
  s.hint_labels.resize(static_cast<std::size_t>(shape[0]));
  for (auto& l : s.hint_labels) l = r.u16();
  if (!r.at_end()) throw IoError(path + ": trailing bytes");
  if (!s.images.all_finite()) throw IoError(path + ": non-finite pixels");
  return s;
}

/// Writes image i as binary PPM (3 channels) or PGM (1 channel), each image
/// min-max stretched to 0..255. Other channel counts use channel 0.
inline void dump_image(const std::string& path, const Tensor& images, std::int64_t i) {
  const auto c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const float* px = images.ptr() + i * c * h * w;
  const bool rgb = c == 3;
  const auto used = rgb ? 3 * h * w : h * w;
  const auto [lo, hi] = std::minmax_element(px, px + used);
  const float span = std::max(*hi - *lo, 1e-12f);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << (rgb ? "P6\n" : "P5\n") << w << " " << h << "\n255\n";
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t ch = 0; ch < (rgb ? 3 : 1); ++ch) {
        const float v = (px[(ch * h + y) * w + x] - *lo) / span;
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
      }
}

}  // namespace dcvit
