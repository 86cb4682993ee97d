// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "dcvit/checkpoint.hpp"
#include "dcvit/compress.hpp"
#include "dcvit/compressor.hpp"
#include "dcvit/dataset.hpp"
#include "dcvit/error.hpp"
#include "dcvit/planner.hpp"
#include "dcvit/synth.hpp"
#include "dcvit/train.hpp"
#include "dcvit/vit.hpp"

namespace dcvit {

/// Everything a run needs. Serialises to a flat JSON object: nested settings
/// appear with a prefix ("vit_", "finetune_", "synth_", "pretrain_", "data_").
struct RunConfig {
  std::uint64_t seed = 0;
  std::int64_t samples = 50;
  std::optional<double> reduce;
  std::optional<std::int64_t> target_macs;
  std::optional<std::int64_t> force_k;
  Strategy strategy = Strategy::Progressive;
  ReuseStrategy reuse = ReuseStrategy::Random;
  ScoreKind score = ScoreKind::CrossEntropy;
  MacsConvention convention = MacsConvention::WeightsOnly;
  TopKBudget topk_budget = TopKBudget::EpochsTimesK;
  int jobs = 1;

  ViTConfig vit;
  FinetuneConfig finetune;
  SynthConfig synth;
  PretrainConfig pretrain;
  std::int64_t data_classes = 10;
  std::int64_t data_train_per_class = 200;
  std::int64_t data_test_per_class = 50;

  std::string teacher;
  std::string train;
  std::string test;
  std::string metric_set;
  std::string out_dir = ".";

  void validate() const {
    vit.validate();
    finetune.validate();
    synth.validate();
    pretrain.validate();
    if (samples < 1) throw ValidationError("samples must be >= 1");
    if (jobs < 1) throw ValidationError("jobs must be >= 1");
    if (reduce && target_macs) throw ValidationError("set only one of reduce and target_macs");
    if (reduce && !(*reduce > 0.0 && *reduce < 1.0)) throw ValidationError("reduce must lie in (0, 1)");
    if (target_macs && *target_macs < 0) throw ValidationError("target_macs must be non-negative");
    if (force_k && *force_k < 1) throw ValidationError("force_k must be >= 1");
    if (data_classes < 2 || data_train_per_class < 1 || data_test_per_class < 1)
      throw ValidationError("data_classes >= 2 and positive per-class counts required");
  }

  bool has_target() const { return reduce.has_value() || target_macs.has_value(); }
};

namespace detail {

inline void flatten_into(nlohmann::json& flat, const std::string& prefix, const nlohmann::json& nested) {
  for (const auto& [k, v] : nested.items()) flat[prefix + k] = v;
}

/// Collects the prefixed keys that name a field of `known` (a default-valued
/// nested config); anything else under the prefix is left unused.
inline nlohmann::json unflatten(const nlohmann::json& flat, const std::string& prefix, const nlohmann::json& known,
                                std::set<std::string>& used) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [k, v] : flat.items())
    if (k.rfind(prefix, 0) == 0 && known.contains(k.substr(prefix.size()))) {
      out[k.substr(prefix.size())] = v;
      used.insert(k);
    }
  return out;
}

template <typename T>
nlohmann::json opt_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"seed", c.seed},
                     {"samples", c.samples},
                     {"reduce", detail::opt_json(c.reduce)},
                     {"target_macs", detail::opt_json(c.target_macs)},
                     {"force_k", detail::opt_json(c.force_k)},
                     {"strategy", enum_name(c.strategy)},
                     {"reuse", to_string(c.reuse)},
                     {"score", enum_name(c.score)},
                     {"convention", to_string(c.convention)},
                     {"topk_budget", enum_name(c.topk_budget)},
                     {"jobs", c.jobs},
                     {"data_classes", c.data_classes},
                     {"data_train_per_class", c.data_train_per_class},
                     {"data_test_per_class", c.data_test_per_class},
                     {"teacher", c.teacher},
                     {"train", c.train},
                     {"test", c.test},
                     {"metric_set", c.metric_set},
                     {"out_dir", c.out_dir}};
  detail::flatten_into(j, "vit_", c.vit);
  detail::flatten_into(j, "finetune_", c.finetune);
  detail::flatten_into(j, "synth_", c.synth);
  detail::flatten_into(j, "pretrain_", c.pretrain);
}

/// Unknown keys are rejected so that typos do not silently fall back to
/// defaults. Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw ValidationError("run config must be a JSON object");
  std::set<std::string> used;
  auto take = [&](const char* key) -> const nlohmann::json* {
    used.insert(key);
    return j.contains(key) ? &j.at(key) : nullptr;
  };
  try {
    if (auto v = take("seed")) c.seed = v->get<std::uint64_t>();
    if (auto v = take("samples")) c.samples = v->get<std::int64_t>();
    if (auto v = take("reduce")) c.reduce = v->is_null() ? std::nullopt : std::optional(v->get<double>());
    if (auto v = take("target_macs"))
      c.target_macs = v->is_null() ? std::nullopt : std::optional(v->get<std::int64_t>());
    if (auto v = take("force_k")) c.force_k = v->is_null() ? std::nullopt : std::optional(v->get<std::int64_t>());
    if (auto v = take("strategy")) c.strategy = parse_enum<Strategy>(v->get<std::string>(), "strategy");
    if (auto v = take("reuse")) c.reuse = parse_reuse_strategy(v->get<std::string>());
    if (auto v = take("score")) c.score = parse_enum<ScoreKind>(v->get<std::string>(), "score");
    if (auto v = take("convention")) c.convention = parse_convention(v->get<std::string>());
    if (auto v = take("topk_budget")) c.topk_budget = parse_enum<TopKBudget>(v->get<std::string>(), "topk budget");
    if (auto v = take("jobs")) c.jobs = v->get<int>();
    if (auto v = take("data_classes")) c.data_classes = v->get<std::int64_t>();
    if (auto v = take("data_train_per_class")) c.data_train_per_class = v->get<std::int64_t>();
    if (auto v = take("data_test_per_class")) c.data_test_per_class = v->get<std::int64_t>();
    for (auto [key, field] : {std::pair{"teacher", &c.teacher}, std::pair{"train", &c.train},
                              std::pair{"test", &c.test}, std::pair{"metric_set", &c.metric_set},
                              std::pair{"out_dir", &c.out_dir}})
      if (auto v = take(key)) *field = v->get<std::string>();
    c.vit = detail::unflatten(j, "vit_", nlohmann::json(ViTConfig{}), used).get<ViTConfig>();
    c.finetune = detail::unflatten(j, "finetune_", nlohmann::json(FinetuneConfig{}), used).get<FinetuneConfig>();
    c.synth = detail::unflatten(j, "synth_", nlohmann::json(SynthConfig{}), used).get<SynthConfig>();
    c.pretrain = detail::unflatten(j, "pretrain_", nlohmann::json(PretrainConfig{}), used).get<PretrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed run config: ") + e.what());
  }
  for (const auto& [k, v] : j.items())
    if (!used.count(k)) throw ValidationError("unknown run config key '" + k + "'");
}

struct PipelineInputs {
  const ViTModel* teacher = nullptr;
  const Tensor* tiny = nullptr;
  const Dataset* test = nullptr;         // optional, for accuracy reporting
  const MetricSet* metric_set = nullptr;  // generated when absent
};

struct PipelineOutput {
  nlohmann::json report;
  ViTModel model;
  CompressionPlan plan;
  std::vector<TrialResult> trials;
  std::vector<std::int64_t> selected;
  CompressResult compressed;
  std::optional<SynthResult> synth;
};

/// Target MACs for a run config against a breakdown.
inline std::int64_t resolve_target(const RunConfig& cfg, const MacsBreakdown& b) {
  if (cfg.target_macs) return *cfg.target_macs;
  if (cfg.reduce) return target_from_reduction(b, *cfg.reduce);
  throw ValidationError("no compression target: set reduce or target_macs");
}

inline CompressOptions compress_options(const RunConfig& cfg) {
  return CompressOptions{cfg.finetune, cfg.reuse, cfg.score, cfg.seed};
}

/// Plan, synthesise, trial, select, compress and evaluate. The report holds
/// no timings or paths beyond the config echo, so equal inputs give equal
/// bytes.
inline PipelineOutput run_pipeline(const RunConfig& cfg, const PipelineInputs& in,
                                   const std::function<void(const std::string&)>& log = {}) {
  cfg.validate();
  if (!in.teacher || !in.tiny) throw UsageError("run_pipeline needs a teacher and a tiny set");
  const auto& teacher = *in.teacher;
  validate_model(teacher);
  if (teacher.compressed_count() != 0) throw UsageError("teacher must have only full blocks");
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  const auto teacher_digest = model_digest(teacher);

  PipelineOutput out;
  auto& rep = out.report;
  rep["config"] = cfg;
  rep["teacher"] = {{"digest", to_hex(teacher_digest)}, {"params", count_params(teacher)}};
  rep["warnings"] = nlohmann::json::array();
  rep["checks"] = nlohmann::json::object();

  const auto breakdown = count_macs(teacher.config, teacher.specs, cfg.convention);
  const auto target = resolve_target(cfg, breakdown);
  out.plan = make_plan(breakdown, target, cfg.force_k);
  rep["macs"] = {{"original", breakdown.macs_o},
                 {"attention", breakdown.macs_a},
                 {"mlp", breakdown.macs_m},
                 {"block_share", static_cast<double>(breakdown.macs_a + breakdown.macs_m) /
                                     static_cast<double>(breakdown.macs_o)}};
  say(detail::concat("plan: k=", out.plan.k, " r_d=", out.plan.r_d, " achieved=", out.plan.achieved_macs));

  if (out.plan.k == 0) {
    out.model = teacher.clone();
  } else {
    if (in.metric_set) {
      const auto expected = metric_set_fingerprint(teacher_digest, cfg.synth, cfg.seed);
      if (in.metric_set->fingerprint != expected)
        rep["warnings"].push_back("metric set fingerprint does not match this teacher, synth config and seed");
    } else {
      say("synthesising metric set");
      out.synth = generate_metric_set(teacher, cfg.synth, cfg.seed);
      const auto& tr = out.synth->trajectory;
      rep["metric_set"] = {{"fingerprint", to_hex(out.synth->set.fingerprint)},
                           {"objective_initial", tr.front()},
                           {"objective_final", tr.back()},
                           {"agreement_before", out.synth->agreement_before},
                           {"agreement_after", out.synth->agreement_after},
                           {"trajectory", downsample(tr)}};
    }
    const MetricSet& metric = in.metric_set ? *in.metric_set : out.synth->set;
    if (!in.metric_set) rep["metric_set"]["generated"] = true;
    else rep["metric_set"] = {{"fingerprint", to_hex(metric.fingerprint)}, {"generated", false}};

    const auto opt = compress_options(cfg);
    say(detail::concat("running ", teacher.config.depth, " block trials on ", cfg.jobs, " thread(s)"));
    out.trials = run_trials(teacher, out.plan, *in.tiny, metric, opt, cfg.jobs);
    out.selected = select_blocks(out.trials, out.plan.k);
    out.plan.block_order = out.selected;
    say("selected blocks: " + nlohmann::json(out.selected).dump());

    if (cfg.strategy == Strategy::Progressive) {
      const TrialResult* first = nullptr;
      for (const auto& t : out.trials)
        if (t.block_idx == out.selected.front()) first = &t;
      out.compressed = progressive_compress(teacher, out.plan, out.selected, *in.tiny, opt, first);
    } else {
      out.compressed = topk_compress(teacher, out.plan, out.selected, *in.tiny, opt, cfg.topk_budget);
    }
    out.model = out.compressed.model;
    rep["checks"]["weight_reuse"] = cfg.reuse == ReuseStrategy::Reinit ? "skipped (reinit)" : "pass";
    rep["checks"]["frozen_region"] = "pass";
  }

  const auto recount = count_macs(out.model.config, out.model.specs, cfg.convention).macs_o;
  if (recount != out.plan.achieved_macs)
    throw InvariantError(detail::concat("final model recounts to ", recount, " MACs, plan says ", out.plan.achieved_macs));
  rep["checks"]["budget"] = "pass";
  if (model_digest(teacher) != teacher_digest) throw InvariantError("teacher parameters changed during the pipeline");
  rep["checks"]["teacher_unchanged"] = "pass";

  rep["plan"] = out.plan;
  rep["trials"] = out.trials;
  rep["selected"] = out.selected;
  rep["stages"] = out.compressed.stages;
  rep["total_finetune_epochs"] = out.compressed.total_epochs;
  nlohmann::json fin{{"macs", recount},
                     {"params", count_params(out.model)},
                     {"digest", to_hex(model_digest(out.model))},
                     {"blocks", out.model.specs}};
  if (in.test) {
    fin["test"] = evaluate(out.model, *in.test, &teacher);
    rep["teacher"]["test"] = evaluate(teacher, *in.test);
    fin["desk_scale"] = true;
  }
  rep["final"] = fin;
  return out;
}

}  // namespace dcvit
