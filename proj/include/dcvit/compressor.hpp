// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "dcvit/checkpoint.hpp"
#include "dcvit/compress.hpp"
#include "dcvit/dataset.hpp"
#include "dcvit/error.hpp"
#include "dcvit/hash.hpp"
#include "dcvit/losses.hpp"
#include "dcvit/optim.hpp"
#include "dcvit/planner.hpp"
#include "dcvit/synth.hpp"
#include "dcvit/train.hpp"
#include "dcvit/vit.hpp"

namespace dcvit {

enum class MimicTarget { AllTokens, ClsOnly };
enum class UpdateScope { Partial, Full };
enum class Augmentation { FlipCrop, None };
enum class CutoffRule { ThroughNext, ThroughCompressed };
enum class ScoreKind { CrossEntropy, Mse };
enum class Strategy { Progressive, TopK };
enum class TopKBudget { Epochs, EpochsTimesK };

namespace detail {

template <typename E>
struct EnumNames;

#define DCVIT_ENUM_NAMES(E, ...)                                                       \
  template <>                                                                          \
  struct EnumNames<E> {                                                                \
    static constexpr std::pair<E, const char*> table[] = {__VA_ARGS__};                \
  };

DCVIT_ENUM_NAMES(MimicTarget, {MimicTarget::AllTokens, "all"}, {MimicTarget::ClsOnly, "cls"})
DCVIT_ENUM_NAMES(UpdateScope, {UpdateScope::Partial, "partial"}, {UpdateScope::Full, "full"})
DCVIT_ENUM_NAMES(Augmentation, {Augmentation::FlipCrop, "flip_crop"}, {Augmentation::None, "none"})
DCVIT_ENUM_NAMES(CutoffRule, {CutoffRule::ThroughNext, "through_next"},
                 {CutoffRule::ThroughCompressed, "through_compressed"})
DCVIT_ENUM_NAMES(ScoreKind, {ScoreKind::CrossEntropy, "ce"}, {ScoreKind::Mse, "mse"})
DCVIT_ENUM_NAMES(Strategy, {Strategy::Progressive, "progressive"}, {Strategy::TopK, "topk"})
DCVIT_ENUM_NAMES(TopKBudget, {TopKBudget::Epochs, "epochs"}, {TopKBudget::EpochsTimesK, "epochs_times_k"})
#undef DCVIT_ENUM_NAMES

}  // namespace detail

template <typename E>
const char* enum_name(E v) {
  for (const auto& [e, name] : detail::EnumNames<E>::table)
    if (e == v) return name;
  return "?";
}

template <typename E>
E parse_enum(const std::string& s, const char* what) {
  std::string options;
  for (const auto& [e, name] : detail::EnumNames<E>::table) {
    if (s == name) return e;
    options += options.empty() ? name : std::string("|") + name;
  }
  throw ValidationError(std::string("unknown ") + what + " '" + s + "' (" + options + ")");
}

struct FinetuneConfig {
  std::int64_t batch_size = 64;
  std::int64_t epochs = 200;
  std::int64_t warmup_epochs = 2;
  double base_lr = 1e-3;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;
  MimicTarget mimic_target = MimicTarget::AllTokens;
  UpdateScope update_scope = UpdateScope::Partial;
  Augmentation augmentation = Augmentation::FlipCrop;
  double drop_path_rate = 0.0;
  CutoffRule cutoff_rule = CutoffRule::ThroughNext;
  bool train_embeddings = true;  // patch/CLS/positional embeddings count as the front part

  void validate() const {
    if (batch_size < 1) throw ValidationError("finetune batch_size must be >= 1");
    if (!(epochs > warmup_epochs && warmup_epochs >= 0))
      throw ValidationError("finetune needs epochs > warmup_epochs >= 0");
    if (base_lr < 0.0 || weight_decay < 0.0 || !(grad_clip > 0.0))
      throw ValidationError("finetune lr/weight_decay must be non-negative and grad_clip positive");
    if (drop_path_rate < 0.0 || drop_path_rate >= 1.0) throw ValidationError("drop_path_rate must lie in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const FinetuneConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"warmup_epochs", c.warmup_epochs},
                     {"base_lr", c.base_lr},
                     {"weight_decay", c.weight_decay},
                     {"grad_clip", c.grad_clip},
                     {"mimic_target", enum_name(c.mimic_target)},
                     {"update_scope", enum_name(c.update_scope)},
                     {"augmentation", enum_name(c.augmentation)},
                     {"drop_path_rate", c.drop_path_rate},
                     {"cutoff_rule", enum_name(c.cutoff_rule)},
                     {"train_embeddings", c.train_embeddings}};
}

inline void from_json(const nlohmann::json& j, FinetuneConfig& c) {
  FinetuneConfig d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
  c.base_lr = j.value("base_lr", d.base_lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.mimic_target = parse_enum<MimicTarget>(j.value("mimic_target", "all"), "mimic target");
  c.update_scope = parse_enum<UpdateScope>(j.value("update_scope", "partial"), "update scope");
  c.augmentation = parse_enum<Augmentation>(j.value("augmentation", "flip_crop"), "augmentation");
  c.drop_path_rate = j.value("drop_path_rate", d.drop_path_rate);
  c.cutoff_rule = parse_enum<CutoffRule>(j.value("cutoff_rule", "through_next"), "cutoff rule");
  c.train_embeddings = j.value("train_embeddings", d.train_embeddings);
}

/// Names of the parameters a finetune may change.
///
/// Partial scope: the embeddings (when enabled) and every parameter of blocks
/// 0..cutoff. The final norm and head are never included in partial scope.
struct UpdateMask {
  std::set<std::string> names;

  bool contains(const std::string& n) const { return names.count(n) != 0; }

  template <typename T>
  static UpdateMask make(const Model<T>& m, UpdateScope scope, std::int64_t cutoff, bool embeddings = true) {
    UpdateMask mask;
    for (const auto& name : m.params.names()) {
      bool on = scope == UpdateScope::Full;
      if (!on && embeddings) on = name.rfind("patch_embed.", 0) == 0 || name == "cls_token" || name == "pos_embed";
      if (!on && name.rfind("blocks.", 0) == 0) on = std::stoll(name.substr(7)) <= cutoff;
      if (on) mask.names.insert(name);
    }
    return mask;
  }
};

/// Hash over every parameter outside the mask (names, shapes and bits).
template <typename T>
Digest frozen_digest(const Model<T>& m, const UpdateMask& mask) {
  Sha256 h;
  for (const auto& [name, t] : m.params.map()) {
    if (mask.contains(name)) continue;
    h.update(name);
    h.update(shape_str(t.shape()));
    h.update(t.ptr(), static_cast<std::size_t>(t.numel()) * sizeof(T));
  }
  return h.finish();
}

/// Last trainable block index for a model whose deepest compressed block is
/// `deepest`.
inline std::int64_t cutoff_for(std::int64_t deepest, std::int64_t depth, CutoffRule rule) {
  return rule == CutoffRule::ThroughNext ? std::min(deepest + 1, depth - 1) : deepest;
}

namespace detail {

/// Mimic tap: all output tokens [n, t, d] or the CLS token only [n, d].
inline Tensor mimic_features(Tape<float>& tape, const Tensor& tokens, MimicTarget target) {
  return target == MimicTarget::AllTokens ? tokens : take_token(tape, tokens, 0);
}

inline Tensor teacher_features(const ViTModel& teacher, const Tensor& images, MimicTarget target) {
  auto tokens = infer(teacher, images).tokens;
  if (target == MimicTarget::AllTokens) return tokens;
  auto tape = Tape<float>::inference();
  return take_token(tape, tokens, 0);
}

}  // namespace detail

/// Sum over samples of the squared mimic error, divided by the sample count.
inline double mimic_loss(const ViTModel& student, const Tensor& teacher_feats, const Tensor& images,
                         MimicTarget target) {
  auto tape = Tape<float>::inference();
  auto feats = detail::mimic_features(tape, infer(student, images).tokens, target);
  return static_cast<double>(mse_sum(tape, feats, teacher_feats).item()) / static_cast<double>(images.dim(0));
}

struct FinetuneResult {
  ViTModel model;
  double initial_loss = 0.0;  // mimic loss on the unaugmented tiny set, before training
  double final_loss = 0.0;    // same, after training
  std::vector<double> curve;  // per-epoch mean batch loss
  std::int64_t epochs = 0;
  std::int64_t steps = 0;
};

/// Feature-mimicking finetune of `student` towards the frozen `teacher` on
/// the unlabeled tiny set. Only parameters in the update mask move; that is
/// re-checked by hashing the frozen region before and after.
inline FinetuneResult mimic_finetune(const ViTModel& student, const ViTModel& teacher, const Tensor& tiny,
                                     const FinetuneConfig& cfg, std::int64_t cutoff, Rng& rng,
                                     std::optional<std::int64_t> epochs_override = std::nullopt) {
  cfg.validate();
  if (tiny.rank() != 4 || tiny.dim(0) == 0) throw UsageError("mimic_finetune needs a non-empty tiny set");
  if (cutoff < 0 || cutoff >= student.config.depth)
    throw UsageError(detail::concat("cutoff ", cutoff, " outside [0, ", student.config.depth, ")"));
  const auto epochs = epochs_override.value_or(cfg.epochs);
  if (epochs <= cfg.warmup_epochs) throw ValidationError("finetune epochs must exceed warmup epochs");

  FinetuneResult res;
  res.model = student.clone();
  auto& m = res.model;
  const double saved_rate = m.config.drop_path_rate;
  m.config.drop_path_rate = cfg.drop_path_rate;

  const auto mask = UpdateMask::make(m, cfg.update_scope, cutoff, cfg.train_embeddings);
  const auto frozen_before = frozen_digest(m, mask);
  const auto clean_targets = detail::teacher_features(teacher, tiny, cfg.mimic_target);
  res.initial_loss = mimic_loss(m, clean_targets, tiny, cfg.mimic_target);

  auto params = detail::trainable_list(m, [&](const std::string& n) { return mask.contains(n); });
  OptimState<float> opt(std::span<const Tensor>(params),
                        AdamWHyper{cfg.base_lr, cfg.weight_decay, 0.9, 0.999, 1e-8});
  const auto n = tiny.dim(0);
  const auto steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const auto total = epochs * steps_per_epoch, warmup = cfg.warmup_epochs * steps_per_epoch;
  const bool augment = cfg.augmentation == Augmentation::FlipCrop;
  for (std::int64_t epoch = 0; epoch < epochs; ++epoch) {
    const auto order = rng.permutation(n);
    double epoch_loss = 0.0;
    for (std::int64_t b = 0; b < n; b += cfg.batch_size) {
      const auto e = std::min(n, b + cfg.batch_size);
      std::span<const std::int64_t> idx(order.data() + b, static_cast<std::size_t>(e - b));
      auto x = gather_batch(tiny, idx);
      if (augment) x = flip_crop(x, rng);
      const auto target = augment ? detail::teacher_features(teacher, x, cfg.mimic_target)
                                  : gather_batch(clean_targets, idx);
      for (auto& p : params) p.clear_grad();
      Tape<float> tape;
      auto out = forward(tape, m, x, RunMode::Train, &rng);
      auto feats = detail::mimic_features(tape, out.tokens, cfg.mimic_target);
      auto loss = scale(tape, mse_sum(tape, feats, target), 1.0f / static_cast<float>(e - b));
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw Error(detail::concat("mimic finetune diverged at epoch ", epoch));
      epoch_loss += lv * static_cast<double>(e - b);
      if (!params.empty()) {
        tape.backward(loss);
        clip_grad_norm(std::span<Tensor>(params), cfg.grad_clip);
        adamw_step(std::span<Tensor>(params), opt, lr_schedule(res.steps, total, warmup, cfg.base_lr));
      }
      ++res.steps;
    }
    res.curve.push_back(epoch_loss / static_cast<double>(n));
  }
  res.epochs = epochs;
  detail::release_grads(m);
  m.config.drop_path_rate = saved_rate;
  if (frozen_digest(m, mask) != frozen_before)
    throw InvariantError("parameters outside the update mask changed during finetuning");
  res.final_loss = mimic_loss(m, clean_targets, tiny, cfg.mimic_target);
  return res;
}

/// Softmax of the teacher's logits on the metric set.
inline Tensor teacher_probs(const ViTModel& teacher, const Tensor& images) {
  auto tape = Tape<float>::inference();
  return softmax(tape, infer(teacher, images).logits);
}

/// Recoverability score of a candidate on the metric set (lower is better).
/// ce: sum over S of the cross entropy of the candidate's CLS prediction
/// against the teacher's; mse: the mimic objective summed over S.
inline double score_candidate(const ViTModel& teacher, const ViTModel& candidate, const MetricSet& metric,
                              ScoreKind kind = ScoreKind::CrossEntropy, MimicTarget target = MimicTarget::AllTokens) {
  if (teacher.config.num_classes != candidate.config.num_classes)
    throw ValidationError("teacher and candidate class counts differ");
  auto tape = Tape<float>::inference();
  if (kind == ScoreKind::CrossEntropy)
    return soft_cross_entropy(tape, teacher_probs(teacher, metric.images), infer(candidate, metric.images).logits)
        .item();
  const auto tf = detail::teacher_features(teacher, metric.images, target);
  return mimic_loss(candidate, tf, metric.images, target) * static_cast<double>(metric.images.dim(0));
}

struct TrialResult {
  std::int64_t block_idx = 0;
  double metric_loss = 0.0;
  double initial_mimic_loss = 0.0;
  double final_mimic_loss = 0.0;
  std::string candidate_ref;  // checkpoint path, when written
  Digest candidate_digest{};
  ViTModel candidate;
};

inline void to_json(nlohmann::json& j, const TrialResult& t) {
  j = nlohmann::json{{"block_idx", t.block_idx},
                     {"metric_loss", t.metric_loss},
                     {"initial_mimic_loss", t.initial_mimic_loss},
                     {"final_mimic_loss", t.final_mimic_loss},
                     {"candidate_digest", to_hex(t.candidate_digest)}};
  if (!t.candidate_ref.empty()) j["candidate_ref"] = t.candidate_ref;
}

/// Settings shared by trials and compression stages.
struct CompressOptions {
  FinetuneConfig finetune;
  ReuseStrategy reuse = ReuseStrategy::Random;
  ScoreKind score = ScoreKind::CrossEntropy;
  std::uint64_t seed = 0;
};

/// Compresses one block of the teacher to the first stage's hidden count,
/// finetunes it and scores it on the metric set.
inline TrialResult trial_block(const ViTModel& teacher, const CompressionPlan& plan, std::int64_t block,
                               const Tensor& tiny, const MetricSet& metric, const CompressOptions& opt) {
  if (plan.k < 1) throw UsageError("trial_block needs a plan with k >= 1");
  Rng rng(opt.seed, streams::kTrialBase + static_cast<std::uint64_t>(block));
  auto cand = compress_block(teacher, block, plan.hidden_counts.at(0), opt.reuse, &tiny, rng);
  if (opt.reuse != ReuseStrategy::Reinit) verify_weight_reuse(teacher, cand, block);
  const auto cutoff = cutoff_for(block, teacher.config.depth, opt.finetune.cutoff_rule);
  auto ft = mimic_finetune(cand, teacher, tiny, opt.finetune, cutoff, rng);
  TrialResult r;
  r.block_idx = block;
  r.initial_mimic_loss = ft.initial_loss;
  r.final_mimic_loss = ft.final_loss;
  r.metric_loss = score_candidate(teacher, ft.model, metric, opt.score, opt.finetune.mimic_target);
  if (!std::isfinite(r.metric_loss) || r.metric_loss < 0.0)
    throw InvariantError(detail::concat("trial of block ", block, " produced metric loss ", r.metric_loss));
  r.candidate_digest = model_digest(ft.model);
  r.candidate = std::move(ft.model);
  return r;
}

/// Trials for `blocks` (all blocks when empty) on up to `jobs` threads.
/// Each trial owns its RNG stream, so results do not depend on `jobs`.
/// Output is ordered by block index.
inline std::vector<TrialResult> run_trials(const ViTModel& teacher, const CompressionPlan& plan, const Tensor& tiny,
                                           const MetricSet& metric, const CompressOptions& opt, int jobs = 1,
                                           std::vector<std::int64_t> blocks = {}) {
  if (blocks.empty()) {
    blocks.resize(static_cast<std::size_t>(teacher.config.depth));
    std::iota(blocks.begin(), blocks.end(), std::int64_t{0});
  }
  std::sort(blocks.begin(), blocks.end());
  std::vector<TrialResult> out(blocks.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < blocks.size();) {
      try {
        out[i] = trial_block(teacher, plan, blocks[i], tiny, metric, opt);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const auto n_threads = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), 1, blocks.size());
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

/// Block indices of the k smallest losses, ascending by loss; equal losses
/// keep the lower block index first.
inline std::vector<std::int64_t> select_blocks(const std::vector<TrialResult>& trials, std::int64_t k) {
  if (k < 0 || k > static_cast<std::int64_t>(trials.size()))
    throw ValidationError(detail::concat("cannot select ", k, " blocks from ", trials.size(), " trials"));
  std::vector<const TrialResult*> order;
  for (const auto& t : trials) order.push_back(&t);
  std::sort(order.begin(), order.end(), [](const TrialResult* a, const TrialResult* b) {
    if (a->metric_loss != b->metric_loss) return a->metric_loss < b->metric_loss;
    return a->block_idx < b->block_idx;
  });
  std::vector<std::int64_t> out;
  for (std::int64_t i = 0; i < k; ++i) out.push_back(order[static_cast<std::size_t>(i)]->block_idx);
  return out;
}

inline std::vector<std::int64_t> select_blocks(const std::vector<double>& losses, std::int64_t k) {
  std::vector<TrialResult> trials(losses.size());
  for (std::size_t i = 0; i < losses.size(); ++i) {
    trials[i].block_idx = static_cast<std::int64_t>(i);
    trials[i].metric_loss = losses[i];
  }
  return select_blocks(trials, k);
}

struct StageRecord {
  std::int64_t block = 0;
  std::int64_t hidden_units = 0;
  std::int64_t cutoff = 0;
  bool reused_candidate = false;
  double initial_mimic_loss = 0.0;
  double final_mimic_loss = 0.0;
  std::vector<double> curve;
  std::int64_t epochs = 0;
};

inline std::vector<double> downsample(const std::vector<double>& v, std::size_t max_points = 20) {
  if (v.size() <= max_points) return v;
  std::vector<double> out;
  for (std::size_t i = 0; i < max_points; ++i) out.push_back(v[i * (v.size() - 1) / (max_points - 1)]);
  return out;
}

inline void to_json(nlohmann::json& j, const StageRecord& s) {
  j = nlohmann::json{{"block", s.block},
                     {"hidden_units", s.hidden_units},
                     {"cutoff", s.cutoff},
                     {"reused_candidate", s.reused_candidate},
                     {"initial_mimic_loss", s.initial_mimic_loss},
                     {"final_mimic_loss", s.final_mimic_loss},
                     {"epochs", s.epochs},
                     {"curve", downsample(s.curve)}};
}

struct CompressResult {
  ViTModel model;
  std::vector<StageRecord> stages;
  std::int64_t total_epochs = 0;
};

namespace detail {

inline void check_budget(const ViTModel& m, const CompressionPlan& plan) {
  const auto recount = count_macs(m.config, m.specs, plan.convention).macs_o;
  if (recount != plan.achieved_macs)
    throw InvariantError(detail::concat("compressed model recounts to ", recount, " MACs, plan says ",
                                        plan.achieved_macs));
}

}  // namespace detail

/// Compresses the selected blocks one at a time. Stage 1 reuses the trial
/// candidate of selected[0] (when given); each later stage compresses the
/// next block of the current model and finetunes it against the original
/// teacher with the cutoff after the deepest compressed block.
inline CompressResult progressive_compress(const ViTModel& teacher, const CompressionPlan& plan,
                                           const std::vector<std::int64_t>& selected, const Tensor& tiny,
                                           const CompressOptions& opt, const TrialResult* first_trial) {
  if (static_cast<std::int64_t>(selected.size()) != plan.k)
    throw ValidationError("selected block count differs from plan.k");
  CompressResult res;
  if (plan.k == 0) {
    res.model = teacher.clone();
    return res;
  }
  const auto depth = teacher.config.depth;
  std::int64_t deepest = -1;
  for (std::size_t s = 0; s < selected.size(); ++s) {
    const auto block = selected[s];
    deepest = std::max(deepest, block);
    StageRecord rec;
    rec.block = block;
    rec.hidden_units = plan.hidden_counts[s];
    rec.cutoff = cutoff_for(deepest, depth, opt.finetune.cutoff_rule);
    if (s == 0 && first_trial) {
      if (first_trial->block_idx != block) throw UsageError("stage-1 candidate belongs to another block");
      if (first_trial->candidate.specs.at(static_cast<std::size_t>(block)).hidden_units != rec.hidden_units)
        throw UsageError("stage-1 candidate has a different hidden count than the plan");
      res.model = first_trial->candidate.clone();
      rec.reused_candidate = true;
      rec.initial_mimic_loss = first_trial->initial_mimic_loss;
      rec.final_mimic_loss = first_trial->final_mimic_loss;
      rec.epochs = opt.finetune.epochs;
    } else {
      const auto& base = s == 0 ? teacher : res.model;
      Rng rng(opt.seed, streams::kStageBase + s);
      auto next = compress_block(base, block, rec.hidden_units, opt.reuse, &tiny, rng);
      if (opt.reuse != ReuseStrategy::Reinit) verify_weight_reuse(base, next, block);
      auto ft = mimic_finetune(next, teacher, tiny, opt.finetune, rec.cutoff, rng);
      rec.initial_mimic_loss = ft.initial_loss;
      rec.final_mimic_loss = ft.final_loss;
      rec.curve = std::move(ft.curve);
      rec.epochs = ft.epochs;
      res.model = std::move(ft.model);
    }
    res.total_epochs += rec.epochs;
    res.stages.push_back(std::move(rec));
  }
  detail::check_budget(res.model, plan);
  return res;
}

/// Compresses all selected blocks at once, then runs one finetune with the
/// cutoff after the deepest selected block.
inline CompressResult topk_compress(const ViTModel& teacher, const CompressionPlan& plan,
                                    const std::vector<std::int64_t>& selected, const Tensor& tiny,
                                    const CompressOptions& opt, TopKBudget budget = TopKBudget::EpochsTimesK) {
  if (static_cast<std::int64_t>(selected.size()) != plan.k)
    throw ValidationError("selected block count differs from plan.k");
  CompressResult res;
  res.model = teacher.clone();
  if (plan.k == 0) return res;
  Rng rng(opt.seed, streams::kTopK);
  for (std::size_t s = 0; s < selected.size(); ++s) {
    auto next = compress_block(res.model, selected[s], plan.hidden_counts[s], opt.reuse, &tiny, rng);
    if (opt.reuse != ReuseStrategy::Reinit) verify_weight_reuse(res.model, next, selected[s]);
    res.model = std::move(next);
  }
  detail::check_budget(res.model, plan);
  const auto deepest = *std::max_element(selected.begin(), selected.end());
  StageRecord rec;
  rec.block = deepest;
  rec.hidden_units = plan.hidden_counts.back();
  rec.cutoff = cutoff_for(deepest, teacher.config.depth, opt.finetune.cutoff_rule);
  const auto epochs = budget == TopKBudget::EpochsTimesK ? opt.finetune.epochs * plan.k : opt.finetune.epochs;
  auto ft = mimic_finetune(res.model, teacher, tiny, opt.finetune, rec.cutoff, rng, epochs);
  rec.initial_mimic_loss = ft.initial_loss;
  rec.final_mimic_loss = ft.final_loss;
  rec.curve = std::move(ft.curve);
  rec.epochs = ft.epochs;
  res.total_epochs = ft.epochs;
  res.model = std::move(ft.model);
  res.stages.push_back(std::move(rec));
  detail::check_budget(res.model, plan);
  return res;
}

}  // namespace dcvit
