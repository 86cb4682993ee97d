// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "dcvit/dataset.hpp"
#include "dcvit/error.hpp"
#include "dcvit/losses.hpp"
#include "dcvit/optim.hpp"
#include "dcvit/rng.hpp"
#include "dcvit/vit.hpp"

namespace dcvit {

namespace detail {

/// Fraction of rows whose argmax equals the label.
inline double agreement(const Tensor& logits, std::span<const int> labels) {
  const auto c = logits.cols();
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < logits.rows(); ++i) {
    const float* row = logits.ptr() + i * c;
    if (std::max_element(row, row + c) - row == labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(std::max<std::int64_t>(logits.rows(), 1));
}

}  // namespace detail

struct EvalMetrics {
  double top1 = 0.0;
  double top5 = 0.0;
  double logit_mse = 0.0;  // mean over samples and classes of (z - z_teacher)^2; 0 without a teacher
};

inline void to_json(nlohmann::json& j, const EvalMetrics& m) {
  j = nlohmann::json{{"top1", m.top1}, {"top5", m.top5}, {"logit_mse", m.logit_mse}};
}

/// Top-1/top-5 accuracy on a labeled set; ties in the logits rank the lower
/// class index first.
inline EvalMetrics evaluate(const ViTModel& model, const Dataset& data, const ViTModel* teacher = nullptr) {
  const auto c = model.config.num_classes;
  if (teacher && teacher->config.num_classes != c)
    throw ValidationError(detail::concat("model has ", c, " classes, teacher ", teacher->config.num_classes));
  data.validate(c);
  const auto& labels = data.require_labels("evaluate");
  if (data.size() == 0) throw ValidationError("evaluate needs a non-empty dataset");
  const auto logits = infer(model, data.images).logits;
  EvalMetrics m;
  std::int64_t top1 = 0, top5 = 0;
  for (std::int64_t i = 0; i < data.size(); ++i) {
    const float* row = logits.ptr() + i * c;
    const int y = labels[static_cast<std::size_t>(i)];
    std::int64_t better = 0;  // classes ranked above the true one
    for (std::int64_t k = 0; k < c; ++k)
      if (row[k] > row[y] || (row[k] == row[y] && k < y)) ++better;
    top1 += better == 0;
    top5 += better < 5;
  }
  const double n = static_cast<double>(data.size());
  m.top1 = static_cast<double>(top1) / n;
  m.top5 = static_cast<double>(top5) / n;
  if (teacher) {
    const auto tl = infer(*teacher, data.images).logits;
    double acc = 0.0;
    for (std::int64_t i = 0; i < logits.numel(); ++i) {
      const double d = static_cast<double>(logits[i]) - static_cast<double>(tl[i]);
      acc += d * d;
    }
    m.logit_mse = acc / static_cast<double>(logits.numel());
  }
  return m;
}

struct PretrainConfig {
  std::int64_t epochs = 20;
  std::int64_t batch_size = 64;
  std::int64_t warmup_epochs = 2;
  double base_lr = 1e-3;
  double weight_decay = 0.05;
  double grad_clip = 1.0;
  bool crop = true;  // random resized crop, no flip (flips change orientation classes)

  void validate() const {
    if (epochs < 1 || batch_size < 1 || warmup_epochs < 0 || warmup_epochs >= epochs)
      throw ValidationError("pretrain needs epochs > warmup_epochs >= 0 and batch_size >= 1");
    if (!(base_lr > 0.0) || weight_decay < 0.0 || !(grad_clip > 0.0))
      throw ValidationError("pretrain lr and grad_clip must be positive, weight_decay non-negative");
  }
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},   {"batch_size", c.batch_size},     {"warmup_epochs", c.warmup_epochs},
                     {"base_lr", c.base_lr}, {"weight_decay", c.weight_decay}, {"grad_clip", c.grad_clip},
                     {"crop", c.crop}};
}

inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
  PretrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
  c.base_lr = j.value("base_lr", d.base_lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.crop = j.value("crop", d.crop);
}

struct EpochLog {
  std::int64_t epoch = 0;
  double train_loss = 0.0;
  double train_top1 = 0.0;
  double test_top1 = 0.0;
};

struct PretrainResult {
  ViTModel best;
  std::int64_t best_epoch = -1;
  double best_test_top1 = -1.0;
  std::vector<EpochLog> history;
};

namespace detail {

template <typename T>
std::vector<BasicTensor<T>> trainable_list(Model<T>& m, const std::function<bool(const std::string&)>& mask) {
  std::vector<BasicTensor<T>> out;
  for (auto& [name, t] : m.params.map()) {
    const bool on = mask(name);
    t.set_requires_grad(on);
    t.clear_grad();
    if (on) out.push_back(t);
  }
  return out;
}

template <typename T>
void release_grads(Model<T>& m) {
  for (auto& [name, t] : m.params.map()) {
    t.clear_grad();
    t.set_requires_grad(false);
  }
}

}  // namespace detail

/// Supervised training from scratch. Keeps the checkpoint with the best test
/// top-1 (earliest epoch on ties). `log` receives one entry per epoch.
inline PretrainResult pretrain(const ViTConfig& config, const Dataset& train, const Dataset& test,
                               const PretrainConfig& pc, std::uint64_t seed,
                               const std::function<void(const EpochLog&)>& log = {}) {
  pc.validate();
  train.validate(config.num_classes);
  test.validate(config.num_classes);
  const auto& labels = train.require_labels("pretrain");
  test.require_labels("pretrain");
  Rng init_rng(seed, streams::kInit);
  Rng rng(seed, streams::kPretrain);
  auto model = init_params<float>(config, init_rng);
  auto params = detail::trainable_list(model, [](const std::string&) { return true; });
  OptimState<float> opt(std::span<const Tensor>(params), AdamWHyper{pc.base_lr, pc.weight_decay, 0.9, 0.999, 1e-8});

  const auto n = train.size();
  const auto steps_per_epoch = (n + pc.batch_size - 1) / pc.batch_size;
  const auto total = pc.epochs * steps_per_epoch, warmup = pc.warmup_epochs * steps_per_epoch;
  PretrainResult res;
  double last_finite = std::numeric_limits<double>::quiet_NaN();
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; epoch < pc.epochs; ++epoch) {
    const auto order = rng.permutation(n);
    double loss_sum = 0.0;
    std::int64_t hits = 0;
    for (std::int64_t b = 0; b < n; b += pc.batch_size) {
      const auto e = std::min(n, b + pc.batch_size);
      std::span<const std::int64_t> idx(order.data() + b, static_cast<std::size_t>(e - b));
      auto x = gather_batch(train.images, idx);
      if (pc.crop) x = flip_crop(x, rng, 0.67, false);
      std::vector<int> y(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) y[i] = labels[static_cast<std::size_t>(idx[i])];
      for (auto& p : params) p.clear_grad();
      Tape<float> tape;
      auto out = forward(tape, model, x, RunMode::Train, &rng);
      auto loss = hard_cross_entropy(tape, out.logits, std::span<const int>(y));
      const double lv = loss.item();
      if (!std::isfinite(lv))
        throw Error(detail::concat("pretraining diverged at epoch ", epoch, "; last finite loss ", last_finite));
      last_finite = lv;
      loss_sum += lv * static_cast<double>(e - b);
      hits += static_cast<std::int64_t>(std::lround(detail::agreement(out.logits, std::span<const int>(y)) *
                                                    static_cast<double>(e - b)));
      tape.backward(loss);
      clip_grad_norm(std::span<Tensor>(params), pc.grad_clip);
      adamw_step(std::span<Tensor>(params), opt, lr_schedule(step, total, warmup, pc.base_lr));
      ++step;
    }
    EpochLog entry{epoch, loss_sum / static_cast<double>(n), static_cast<double>(hits) / static_cast<double>(n),
                   evaluate(model, test).top1};
    res.history.push_back(entry);
    if (log) log(entry);
    if (entry.test_top1 > res.best_test_top1) {
      res.best_test_top1 = entry.test_top1;
      res.best_epoch = epoch;
      res.best = model.clone();
    }
  }
  detail::release_grads(model);
  return res;
}

}  // namespace dcvit
