// SPDX-License-Identifier: Apache-2.0
//
// dcvit: dataset generation, teacher pretraining and the
// plan -> synth -> trial -> compress -> eval pipeline as subcommands.
// Every subcommand merges an entry into <out_dir>/report.json, also on error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "dcvit/dcvit.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dcvit;

namespace {

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> samples;
  std::optional<double> reduce;
  std::optional<std::int64_t> target_macs;
  std::optional<std::int64_t> force_k;
  std::optional<std::string> strategy, scope, reuse, mimic, score, cutoff_rule, convention;
  std::optional<int> jobs;
  std::optional<std::string> teacher, train, test, metric_set, out_dir;
  // subcommand-local inputs that are not part of the run config
  std::string model, plan;
  std::vector<std::int64_t> blocks;
};

RunConfig load_config(const Overrides& o) {
  RunConfig c;
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in) throw IoError("missing config file: " + o.config_path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ValidationError(o.config_path + ": " + e.what());
    }
    c = j.get<RunConfig>();
  }
  if (o.seed) c.seed = *o.seed;
  if (o.samples) c.samples = *o.samples;
  if (o.reduce) {
    c.reduce = o.reduce;
    c.target_macs.reset();
  }
  if (o.target_macs) {
    c.target_macs = o.target_macs;
    c.reduce.reset();
  }
  if (o.force_k) c.force_k = o.force_k;
  if (o.strategy) c.strategy = parse_enum<Strategy>(*o.strategy, "strategy");
  if (o.scope) c.finetune.update_scope = parse_enum<UpdateScope>(*o.scope, "scope");
  if (o.reuse) c.reuse = parse_reuse_strategy(*o.reuse);
  if (o.mimic) c.finetune.mimic_target = parse_enum<MimicTarget>(*o.mimic, "mimic target");
  if (o.score) c.score = parse_enum<ScoreKind>(*o.score, "score");
  if (o.cutoff_rule) c.finetune.cutoff_rule = parse_enum<CutoffRule>(*o.cutoff_rule, "cutoff rule");
  if (o.convention) c.convention = parse_convention(*o.convention);
  if (o.jobs) c.jobs = *o.jobs;
  if (o.teacher) c.teacher = *o.teacher;
  if (o.train) c.train = *o.train;
  if (o.test) c.test = *o.test;
  if (o.metric_set) c.metric_set = *o.metric_set;
  if (o.out_dir) c.out_dir = *o.out_dir;
  if (const char* det = std::getenv("DCVIT_DETERMINISTIC"); det && std::string(det) == "1") c.jobs = 1;
  c.validate();
  return c;
}

std::string path_or(const std::string& set, const RunConfig& c, const char* name) {
  return set.empty() ? (fs::path(c.out_dir) / name).string() : set;
}

void require_file(const std::string& path, const std::string& what, const char* producer) {
  if (!fs::exists(path))
    throw IoError("missing " + what + ": " + path + " (produce it with `dcvit " + producer + "`)");
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path);
}

json read_json(const std::string& path, const std::string& what, const char* producer) {
  require_file(path, what, producer);
  std::ifstream in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
}

void say(const std::string& s) { std::cerr << "[dcvit] " << s << "\n"; }

struct Teacher {
  ViTModel model;
  Digest digest;
  json meta;
};

Teacher load_teacher(const RunConfig& c) {
  const auto path = path_or(c.teacher, c, "teacher.dcvt");
  require_file(path, "teacher checkpoint", "pretrain");
  auto ck = load_checkpoint(path);
  if (ck.model.compressed_count() != 0) throw ValidationError(path + " holds a compressed model, not a teacher");
  const auto digest = model_digest(ck.model);
  return {std::move(ck.model), digest, std::move(ck.meta)};
}

Dataset load_split(const RunConfig& c, const std::string& set, const char* name, std::int64_t classes) {
  const auto path = path_or(set, c, name);
  require_file(path, std::string(name) + " split", "gen-data");
  auto ds = load_dataset(path);
  ds.validate(classes);
  ds.require_labels(name);
  return ds;
}

/// Refuses a train split other than the one the teacher recorded.
void check_teacher_lineage(const Teacher& t, const RunConfig& c) {
  if (!t.meta.contains("train_digest")) return;
  const auto path = path_or(c.train, c, "train.dcds");
  if (to_hex(file_digest(path)) != t.meta.at("train_digest").get<std::string>())
    throw ValidationError("stale inputs: " + path + " is not the train split the teacher was trained on");
}

void check_metric_set(const MetricSet& m, const Teacher& t, const RunConfig& c, const std::string& path) {
  if (m.fingerprint != metric_set_fingerprint(t.digest, c.synth, c.seed))
    throw ValidationError("stale metric set " + path +
                          ": fingerprint does not match this teacher, synth config and seed (rerun `dcvit synth`)");
}

CompressionPlan load_plan(const Overrides& o, const RunConfig& c, const Teacher& t) {
  const auto path = path_or(o.plan, c, "plan.json");
  const auto j = read_json(path, "plan", "plan");
  if (!j.contains("teacher_digest") || j.at("teacher_digest") != to_hex(t.digest))
    throw ValidationError("stale plan " + path + ": it was made for a different teacher (rerun `dcvit plan`)");
  auto plan = j.at("plan").get<CompressionPlan>();
  if (plan.convention != c.convention) throw ValidationError("plan " + path + " uses a different MACs convention");
  return plan;
}

json cmd_gen_data(const RunConfig& c) {
  const auto size = c.vit.image_size, ch = c.vit.channels;
  auto train = gen_toy_dataset(c.data_classes, c.data_train_per_class, size, c.seed, 0, ch);
  auto test = gen_toy_dataset(c.data_classes, c.data_test_per_class, size, c.seed, 1, ch);
  const auto tp = path_or(c.train, c, "train.dcds"), sp = path_or(c.test, c, "test.dcds");
  save_dataset(tp, train);
  save_dataset(sp, test);
  say("wrote " + tp + " and " + sp);
  return {{"train", {{"path", tp}, {"size", train.size()}, {"digest", to_hex(file_digest(tp))}}},
          {"test", {{"path", sp}, {"size", test.size()}, {"digest", to_hex(file_digest(sp))}}}};
}

json cmd_pretrain(const RunConfig& c) {
  const auto train = load_split(c, c.train, "train.dcds", c.vit.num_classes);
  const auto test = load_split(c, c.test, "test.dcds", c.vit.num_classes);
  auto res = pretrain(c.vit, train, test, c.pretrain, c.seed, [](const EpochLog& e) {
    say(detail::concat("epoch ", e.epoch, " loss ", e.train_loss, " train ", e.train_top1, " test ", e.test_top1));
  });
  const auto path = path_or(c.teacher, c, "teacher.dcvt");
  const auto train_digest = to_hex(file_digest(path_or(c.train, c, "train.dcds")));
  save_checkpoint(path, res.best, {{"train_digest", train_digest}, {"best_epoch", res.best_epoch}});
  const auto train_eval = evaluate(res.best, train);
  json hist = json::array();
  for (const auto& e : res.history)
    hist.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"train_top1", e.train_top1},
                    {"test_top1", e.test_top1}});
  say(detail::concat("best test top-1 ", res.best_test_top1, " at epoch ", res.best_epoch, " -> ", path));
  return {{"teacher", path},
          {"digest", to_hex(model_digest(res.best))},
          {"best_epoch", res.best_epoch},
          {"train", train_eval},
          {"test_top1", res.best_test_top1},
          {"history", hist},
          {"desk_scale", true}};
}

json cmd_plan(const RunConfig& c) {
  if (!c.has_target()) throw ValidationError("plan needs --reduce or --target-macs");
  ViTConfig geometry = c.vit;
  std::optional<Teacher> teacher;
  const auto default_teacher = path_or("", c, "teacher.dcvt");
  if (!c.teacher.empty() || fs::exists(default_teacher)) {
    teacher = load_teacher(c);
    geometry = teacher->model.config;
  }
  const auto b = count_macs(geometry, c.convention);
  const auto plan = make_plan(b, resolve_target(c, b), c.force_k);
  json art{{"teacher_digest", teacher ? json(to_hex(teacher->digest)) : json(nullptr)},
           {"vit", geometry},
           {"plan", plan}};
  const auto path = path_or("", c, "plan.json");
  write_json(path, art);
  say(detail::concat("k=", plan.k, " r_d=", plan.r_d, " achieved ", plan.achieved_macs, " of ", plan.original_macs,
                     " MACs -> ", path));
  json options = json::array();
  for (const auto& r : enumerate_options(b, b.depth))
    options.push_back({{"k", r.k}, {"min_macs", r.min_macs}, {"max_macs", r.max_macs}});
  return {{"source", teacher ? "teacher" : "config"},
          {"macs", {{"original", b.macs_o}, {"attention", b.macs_a}, {"mlp", b.macs_m},
                    {"block_share", static_cast<double>(b.macs_a + b.macs_m) / static_cast<double>(b.macs_o)}}},
          {"plan", plan},
          {"options", options},
          {"artifact", path}};
}

json cmd_synth(const RunConfig& c) {
  const auto t = load_teacher(c);
  auto res = generate_metric_set(t.model, c.synth, c.seed);
  const auto path = path_or(c.metric_set, c, "metric_set.dcms");
  save_metric_set(path, res.set);
  say(detail::concat("objective ", res.trajectory.front(), " -> ", res.trajectory.back(), "; agreement ",
                     res.agreement_before, " -> ", res.agreement_after, " -> ", path));
  return {{"artifact", path},
          {"fingerprint", to_hex(res.set.fingerprint)},
          {"objective_initial", res.trajectory.front()},
          {"objective_final", res.trajectory.back()},
          {"agreement_before", res.agreement_before},
          {"agreement_after", res.agreement_after},
          {"trajectory", downsample(res.trajectory)}};
}

json cmd_trial(const RunConfig& c, const Overrides& o) {
  const auto t = load_teacher(c);
  const auto plan = load_plan(o, c, t);
  if (plan.k < 1) throw ValidationError("plan has k = 0; there is nothing to trial");
  const auto mpath = path_or(c.metric_set, c, "metric_set.dcms");
  require_file(mpath, "metric set", "synth");
  const auto metric = load_metric_set(mpath);
  check_metric_set(metric, t, c, mpath);
  check_teacher_lineage(t, c);
  const auto train = load_split(c, c.train, "train.dcds", t.model.config.num_classes);
  const auto tiny = sample_tiny(train, c.samples, c.seed);
  auto trials = run_trials(t.model, plan, tiny.images, metric, compress_options(c), c.jobs, o.blocks);
  for (auto& r : trials) {
    r.candidate_ref = (fs::path(c.out_dir) / ("candidate_b" + std::to_string(r.block_idx) + ".dcvt")).string();
    save_checkpoint(r.candidate_ref, r.candidate, {{"teacher_digest", to_hex(t.digest)}, {"block", r.block_idx}});
    say(detail::concat("block ", r.block_idx, " metric loss ", r.metric_loss, " mimic ", r.initial_mimic_loss, " -> ",
                       r.final_mimic_loss));
  }
  std::vector<std::int64_t> selected;
  if (static_cast<std::int64_t>(trials.size()) >= plan.k) selected = select_blocks(trials, plan.k);
  const auto path = path_or("", c, "trials.json");
  write_json(path, {{"teacher_digest", to_hex(t.digest)},
                    {"metric_set", to_hex(metric.fingerprint)},
                    {"trials", trials},
                    {"selected", selected}});
  return {{"artifact", path}, {"trials", trials}, {"selected", selected}};
}

json cmd_compress(const RunConfig& c) {
  const auto t = load_teacher(c);
  check_teacher_lineage(t, c);
  const auto train = load_split(c, c.train, "train.dcds", t.model.config.num_classes);
  const auto tiny = sample_tiny(train, c.samples, c.seed);
  std::optional<Dataset> test;
  const auto tpath = path_or(c.test, c, "test.dcds");
  if (!c.test.empty() || fs::exists(tpath)) test = load_split(c, c.test, "test.dcds", t.model.config.num_classes);
  std::optional<MetricSet> metric;
  if (!c.metric_set.empty()) {
    require_file(c.metric_set, "metric set", "synth");
    metric = load_metric_set(c.metric_set);
    check_metric_set(*metric, t, c, c.metric_set);
  }
  PipelineInputs in{&t.model, &tiny.images, test ? &*test : nullptr, metric ? &*metric : nullptr};
  auto out = run_pipeline(c, in, say);
  const auto path = (fs::path(c.out_dir) / "compressed.dcvt").string();
  save_checkpoint(path, out.model, {{"teacher_digest", to_hex(t.digest)}, {"plan", out.plan}});
  out.report["artifact"] = path;
  say("wrote " + path);
  return out.report;
}

json cmd_eval(const RunConfig& c, const Overrides& o) {
  const auto mpath = o.model.empty() ? (fs::path(c.out_dir) / "compressed.dcvt").string() : o.model;
  require_file(mpath, "model checkpoint", "compress");
  const auto model = load_checkpoint(mpath).model;
  const auto test = load_split(c, c.test, "test.dcds", model.config.num_classes);
  std::optional<Teacher> teacher;
  if (!c.teacher.empty() || fs::exists(path_or("", c, "teacher.dcvt"))) teacher = load_teacher(c);
  json j{{"model", mpath},
         {"macs", count_macs(model.config, model.specs, c.convention).macs_o},
         {"params", count_params(model)},
         {"blocks", model.specs},
         {"test", evaluate(model, test, teacher ? &teacher->model : nullptr)},
         {"desk_scale", true}};
  if (teacher) j["teacher_test"] = evaluate(teacher->model, test);
  say(detail::concat("top-1 ", j["test"]["top1"].get<double>()));
  return j;
}

json cmd_dump_synth(const RunConfig& c) {
  const auto path = path_or(c.metric_set, c, "metric_set.dcms");
  require_file(path, "metric set", "synth");
  const auto m = load_metric_set(path);
  json files = json::array();
  for (std::int64_t i = 0; i < m.images.dim(0); ++i) {
    const auto ext = m.images.dim(1) == 3 ? ".ppm" : ".pgm";
    const auto f = (fs::path(c.out_dir) / ("synth_" + std::to_string(i) + ext)).string();
    dump_image(f, m.images, i);
    files.push_back(f);
  }
  return {{"files", files}};
}

void add_common(CLI::App* sub, Overrides& o) {
  sub->add_option("--config", o.config_path, "flat JSON run config");
  sub->add_option("--seed", o.seed, "master seed");
  sub->add_option("--samples", o.samples, "tiny-set size");
  auto* r = sub->add_option("--reduce", o.reduce, "fractional MACs reduction in (0, 1)");
  auto* t = sub->add_option("--target-macs", o.target_macs, "absolute MACs target");
  r->excludes(t);
  sub->add_option("--force-k", o.force_k, "compress exactly K blocks");
  sub->add_option("--strategy", o.strategy, "progressive|topk");
  sub->add_option("--scope", o.scope, "partial|full");
  sub->add_option("--reuse", o.reuse, "random|gelu_mean|reinit");
  sub->add_option("--mimic", o.mimic, "all|cls");
  sub->add_option("--score", o.score, "ce|mse");
  sub->add_option("--cutoff-rule", o.cutoff_rule, "through_next|through_compressed");
  sub->add_option("--jobs", o.jobs, "parallel block trials");
  sub->add_option("--convention", o.convention, "weights_only|full");
  sub->add_option("--teacher", o.teacher, "teacher checkpoint");
  sub->add_option("--train", o.train, "train split");
  sub->add_option("--test", o.test, "test split");
  sub->add_option("--metric-set", o.metric_set, "metric set file");
  sub->add_option("--out-dir", o.out_dir, "artifact and report directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dcvit: few-shot dense compression of vision transformers"};
  app.require_subcommand(0, 1);
  bool dump_default = false;
  app.add_flag("--dump-default-config", dump_default, "print the default run config and exit");

  Overrides o;
  struct Sub {
    const char* name;
    const char* help;
  };
  const Sub subs[] = {{"gen-data", "generate the toy train/test splits"},
                      {"pretrain", "train the teacher"},
                      {"plan", "derive k, r_d and hidden counts for a MACs target"},
                      {"synth", "synthesise the metric set from the teacher"},
                      {"trial", "compress and finetune every block alone, then score it"},
                      {"compress", "run the whole pipeline and write the compressed model"},
                      {"eval", "evaluate a checkpoint on the test split"},
                      {"report", "print the run report"},
                      {"dump-synth", "write metric-set images as PPM/PGM"}};
  std::map<std::string, CLI::App*> apps;
  for (const auto& s : subs) {
    auto* sub = app.add_subcommand(s.name, s.help);
    add_common(sub, o);
    apps[s.name] = sub;
  }
  apps["eval"]->add_option("--model", o.model, "checkpoint to evaluate (default <out_dir>/compressed.dcvt)");
  apps["trial"]->add_option("--plan", o.plan, "plan artifact (default <out_dir>/plan.json)");
  apps["trial"]->add_option("--blocks", o.blocks, "restrict trials to these block indices");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  if (dump_default) {
    std::cout << json(RunConfig{}).dump(2) << "\n";
    return 0;
  }
  std::string name;
  for (auto& [n, sub] : apps)
    if (sub->parsed()) name = n;
  if (name.empty()) {
    std::cout << app.help();
    return 2;
  }

  // Out dir is resolved before the config so the report can record a config error.
  std::string out_dir = o.out_dir.value_or(".");
  json report = json::object();
  int code = 0;
  try {
    const auto cfg = load_config(o);
    out_dir = cfg.out_dir;
    fs::create_directories(out_dir);
    const auto rpath = (fs::path(out_dir) / "report.json").string();
    if (name == "report") {
      std::cout << read_json(rpath, "run report", "compress").dump(2) << "\n";
      return 0;
    }
    if (fs::exists(rpath)) {
      std::ifstream in(rpath);
      report = json::parse(in, nullptr, false);
      if (report.is_discarded() || !report.is_object()) report = json::object();
    }
    report.erase("error");
    json entry;
    if (name == "gen-data") entry = cmd_gen_data(cfg);
    else if (name == "pretrain") entry = cmd_pretrain(cfg);
    else if (name == "plan") entry = cmd_plan(cfg);
    else if (name == "synth") entry = cmd_synth(cfg);
    else if (name == "trial") entry = cmd_trial(cfg, o);
    else if (name == "compress") entry = cmd_compress(cfg);
    else if (name == "eval") entry = cmd_eval(cfg, o);
    else if (name == "dump-synth") entry = cmd_dump_synth(cfg);
    report[name] = entry;
  } catch (const std::exception& e) {
    std::cerr << "dcvit " << name << ": error: " << e.what() << "\n";
    report["error"] = {{"subcommand", name}, {"message", e.what()}};
    code = 1;
  }
  try {
    fs::create_directories(out_dir);
    write_json((fs::path(out_dir) / "report.json").string(), report);
  } catch (const std::exception& e) {
    std::cerr << "dcvit: cannot write report: " << e.what() << "\n";
    code = 1;
  }
  return code;
}
