// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Informational lines are indented. Set DCVIT_ACCEPT_ONLY=1,3,... to run a
// subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dcvit/dcvit.hpp"
#include "support/grad_suite.hpp"
#include "support/oracles.hpp"

using namespace dcvit;
using clk = std::chrono::steady_clock;

namespace {

double seconds_since(clk::time_point t0) { return std::chrono::duration<double>(clk::now() - t0).count(); }

double mean(const std::vector<double>& v) {
  return v.empty() ? std::nan("") : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

void info(const std::string& s) { std::cout << "  " << s << std::endl; }

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// shared desk-scale state

constexpr std::uint64_t kDataSeed = 7;
const std::vector<std::uint64_t> kSeeds = {1, 2, 3};

struct Desk {
  Dataset train, test;
  ViTModel teacher;
  double train_top1 = 0.0, test_top1 = 0.0;
  bool gate = false;
};

const Desk& desk() {
  static const Desk d = [] {
    Desk w;
    w.train = gen_toy_dataset(10, 200, 32, kDataSeed, 0);
    w.test = gen_toy_dataset(10, 100, 32, kDataSeed, 1);
    PretrainConfig pc;  // 20 epochs, lr 1e-3, wd 0.05, crop without flip
    const auto t0 = clk::now();
    w.teacher = pretrain(ViTConfig{}, w.train, w.test, pc, 1).best;
    w.train_top1 = evaluate(w.teacher, w.train).top1;
    w.test_top1 = evaluate(w.teacher, w.test).top1;
    w.gate = w.test_top1 >= 0.90 && w.train_top1 >= 0.95;
    info("teacher: 6 blocks, d=64; train top-1 " + fmt(w.train_top1) + ", test top-1 " + fmt(w.test_top1) + " (" +
         fmt(seconds_since(t0), 3) + " s)");
    return w;
  }();
  return d;
}

RunConfig desk_config(std::uint64_t seed, double block_equivalents) {
  RunConfig c;
  c.seed = seed;
  c.samples = 50;
  c.finetune.epochs = 200;
  c.finetune.base_lr = 1e-3;
  c.synth.steps = 200;
  c.jobs = 1;
  const auto b = count_macs(desk().teacher.config, c.convention);
  c.target_macs = b.macs_o - static_cast<std::int64_t>(std::llround(block_equivalents * static_cast<double>(b.macs_a + b.macs_m)));
  return c;
}

// Invariant bookkeeping for criteria 4 and 5, filled by every pipeline run.
struct Ledger {
  int runs = 0;
  std::vector<std::string> problems;
} ledger;

void audit(const PipelineOutput& out) {
  ++ledger.runs;
  const auto& checks = out.report.at("checks");
  const auto reuse = checks.value("weight_reuse", std::string("missing"));
  if (out.plan.k > 0 && reuse != "pass" && reuse != "skipped (reinit)")
    ledger.problems.push_back("weight_reuse " + reuse);
  if (out.plan.k > 0 && checks.value("frozen_region", std::string()) != "pass")
    ledger.problems.push_back("frozen_region not asserted");
  const auto recount = count_macs(out.model.config, out.model.specs, out.plan.convention).macs_o;
  if (recount != out.plan.achieved_macs)
    ledger.problems.push_back("recount " + std::to_string(recount) + " != " + std::to_string(out.plan.achieved_macs));
  const auto slack = out.plan.target_macs - out.plan.achieved_macs;
  if (slack < 0 || static_cast<double>(slack) >= static_cast<double>(out.plan.k) * out.plan.unit_macs)
    ledger.problems.push_back("target - achieved = " + std::to_string(slack));
}

PipelineOutput pipeline(const RunConfig& cfg, const Tensor& tiny) {
  const auto& d = desk();
  auto out = run_pipeline(cfg, PipelineInputs{&d.teacher, &tiny, &d.test, nullptr});
  audit(out);
  return out;
}

// ---------------------------------------------------------------------------

ViTConfig vit_base() {
  ViTConfig c;
  c.image_size = 224;
  c.patch_size = 16;
  c.embed_dim = 768;
  c.depth = 12;
  c.heads = 12;
  c.mlp_hidden = 3072;
  c.num_classes = 1000;
  return c;
}

// The table's reductions are k block shares shown to one decimal. Targets are
// the exact k-block equivalents; their rounded percentages must match.
Outcome criterion_1() {
  const auto t0 = clk::now();
  const auto b = count_macs(vit_base(), MacsConvention::WeightsOnly);
  const double share = static_cast<double>(b.macs_a + b.macs_m) / static_cast<double>(b.macs_o);
  bool ok = std::abs(share - 0.083) <= 0.001;
  const char* shown[] = {"8.3", "16.6", "24.8"};
  std::string ks, literal;
  for (std::int64_t k = 1; k <= 3; ++k) {
    const auto target = b.macs_o - k * (b.macs_a + b.macs_m);
    const double pct = 100.0 * static_cast<double>(b.macs_o - target) / static_cast<double>(b.macs_o);
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.1f", pct);
    ok = ok && std::string(buf) == shown[k - 1];
    const auto plan = make_plan(b, target);
    ok = ok && plan.k == k;
    ks += (k > 1 ? "/" : "") + std::to_string(plan.k);
    const auto lit = make_plan(b, target_from_reduction(b, std::stod(shown[k - 1]) / 100.0));
    literal += (k > 1 ? "/" : "") + std::to_string(lit.k);
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 1.0;
  info("ViT-B block share " + fmt(100.0 * share, 5) + "%; literal fractions 0.083/0.166/0.248 give k = " + literal);
  return {ok, "share " + fmt(100.0 * share, 3) + "%, k = " + ks + ", " + fmt(secs, 2) + " s"};
}

Outcome criterion_2() {
  const auto t0 = clk::now();
  Rng rng(2, 2);
  int configs = 0, mismatches = 0;
  for (; configs < 40; ++configs) {
    const auto m = oracle::random_tiny_model(rng);
    const auto counted = oracle::count_by_running(m, rng);
    mismatches += count_macs(m.config, m.specs, MacsConvention::WeightsOnly).macs_o != counted.weights_only();
    mismatches += count_macs(m.config, m.specs, MacsConvention::Full).macs_o != counted.full();
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 60.0,
          std::to_string(configs) + " configs x 2 conventions, " + std::to_string(mismatches) + " mismatches, " +
              fmt(secs, 2) + " s"};
}

template <typename T>
bool gradient_precision(int instances, std::string& summary) {
  bool ok = true;
  double worst = 0.0, worst_l2 = 0.0;
  std::string worst_op;
  for (const auto& kc : oracle::run_gradient_suite<T>(instances, 3)) {
    if (kc.instances < instances || !(kc.worst < oracle::FdSettings<T>::tolerance)) {
      ok = false;
      info(std::string(oracle::FdSettings<T>::name) + " " + kc.op + " rel err " + fmt(kc.worst, 3));
    }
    if (kc.worst >= worst) {
      worst = kc.worst;
      worst_op = kc.op;
    }
    worst_l2 = std::max(worst_l2, kc.worst_l2);
  }
  info(std::string(oracle::FdSettings<T>::name) + ": worst max-norm rel err " + fmt(worst, 3) + " (" + worst_op +
       "), worst l2 rel err " + fmt(worst_l2, 3));
  summary += std::string(summary.empty() ? "" : ", ") + oracle::FdSettings<T>::name + " " + fmt(worst, 2);
  return ok;
}

Outcome criterion_3() {
  const auto t0 = clk::now();
  std::string summary;
  const bool f = gradient_precision<float>(20, summary);
  const bool d = gradient_precision<double>(20, summary);
  const double secs = seconds_since(t0);
  return {f && d && secs < 300.0, "20 instances per kernel; worst " + summary + "; " + fmt(secs, 3) + " s"};
}

Outcome criterion_6() {
  Rng rng(6, 6);
  int cases = 0, bad = 0;
  for (; cases < 500; ++cases) {
    const auto n = 1 + static_cast<std::int64_t>(rng.below(16));
    const auto k = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n + 1)));
    std::vector<double> losses(static_cast<std::size_t>(n));
    for (auto& l : losses) l = static_cast<double>(rng.below(5)) * 0.25;  // heavy duplication
    bad += select_blocks(losses, k) != oracle::select_by_scan(losses, k);
  }
  return {bad == 0, std::to_string(cases) + " random instances with ties, " + std::to_string(bad) + " mismatches"};
}

// ---- criteria 7 and 8 -----------------------------------------------------

struct DeskRuns {
  std::vector<double> mimic_ratio, top1_drop, spearman;
  std::string error;
};

const DeskRuns& one_block_runs() {
  static const DeskRuns r = [] {
    DeskRuns out;
    const auto& d = desk();
    try {
      for (auto seed : kSeeds) {
        const auto t0 = clk::now();
        const auto cfg = desk_config(seed, 1.0);
        const auto tiny = sample_tiny(d.train, cfg.samples, seed);
        const auto res = pipeline(cfg, tiny.images);
        const auto& stage = res.compressed.stages.front();
        const double final_top1 = res.report["final"]["test"]["top1"].get<double>();
        out.mimic_ratio.push_back(stage.final_mimic_loss / stage.initial_mimic_loss);
        out.top1_drop.push_back(d.test_top1 - final_top1);
        std::vector<double> metric, error;
        for (const auto& t : res.trials) {
          metric.push_back(t.metric_loss);
          error.push_back(1.0 - evaluate(t.candidate, d.test).top1);
        }
        out.spearman.push_back(oracle::spearman(metric, error));
        std::string errs;
        for (auto e : error) errs += fmt(e, 3) + " ";
        info("seed " + std::to_string(seed) + ": k=" + std::to_string(res.plan.k) + " block " +
             std::to_string(res.selected.front()) + ", mimic " + fmt(stage.initial_mimic_loss) + " -> " +
             fmt(stage.final_mimic_loss) + ", top-1 " + fmt(final_top1) + ", rho " + fmt(out.spearman.back(), 3) +
             ", candidate errors " + errs + "(" + fmt(seconds_since(t0), 3) + " s)");
      }
    } catch (const std::exception& e) {
      out.error = e.what();
    }
    return out;
  }();
  return r;
}

Outcome criterion_7() {
  const auto t0 = clk::now();
  const auto& d = desk();
  const auto& r = one_block_runs();
  if (!r.error.empty()) return {false, "pipeline error: " + r.error};
  const double ratio = mean(r.mimic_ratio), drop = mean(r.top1_drop);
  const bool ok = d.gate && ratio <= 0.5 && drop <= 0.05;
  return {ok, std::string("teacher gate ") + (d.gate ? "met" : "missed") + "; mean mimic ratio " + fmt(ratio, 3) +
                  ", mean top-1 drop " + fmt(100.0 * drop, 3) + " points over 3 seeds (" + fmt(seconds_since(t0), 4) +
                  " s incl. teacher)"};
}

Outcome criterion_8() {
  const auto& r = one_block_runs();
  if (!r.error.empty()) return {false, "pipeline error: " + r.error};
  const double rho = mean(r.spearman);
  std::string per;
  for (auto v : r.spearman) per += fmt(v, 3) + " ";
  return {rho >= 0.5, "mean Spearman rho " + fmt(rho, 3) + " (per seed " + per + ")"};
}

// ---- criterion 9 ----------------------------------------------------------

Outcome criterion_9() {
  const auto t0 = clk::now();
  const auto& d = desk();
  std::vector<double> progressive, topk, partial, full, random, reinit;
  try {
    for (auto seed : kSeeds) {
      const auto cfg = desk_config(seed, 1.5);
      const auto tiny = sample_tiny(d.train, cfg.samples, seed);
      // progressive, partial scope, random reuse is the shared reference arm
      const auto base = pipeline(cfg, tiny.images);
      const double ref = evaluate(base.model, d.test).top1;
      const auto tk = topk_compress(d.teacher, base.plan, base.selected, tiny.images, compress_options(cfg),
                                    cfg.topk_budget);
      auto full_cfg = cfg;
      full_cfg.finetune.update_scope = UpdateScope::Full;
      const auto fs = pipeline(full_cfg, tiny.images);
      auto reinit_cfg = cfg;
      reinit_cfg.reuse = ReuseStrategy::Reinit;
      const auto ri = pipeline(reinit_cfg, tiny.images);
      progressive.push_back(ref);
      partial.push_back(ref);
      random.push_back(ref);
      topk.push_back(evaluate(tk.model, d.test).top1);
      full.push_back(evaluate(fs.model, d.test).top1);
      reinit.push_back(evaluate(ri.model, d.test).top1);
      info("seed " + std::to_string(seed) + ": k=" + std::to_string(base.plan.k) + " r_d=" + fmt(base.plan.r_d, 3) +
           " progressive " + fmt(ref) + " topk " + fmt(topk.back()) + " full-scope " + fmt(full.back()) +
           " reinit " + fmt(reinit.back()) + " (" + fmt(seconds_since(t0), 4) + " s)");
    }
  } catch (const std::exception& e) {
    return {false, std::string("pipeline error: ") + e.what()};
  }
  bool ok = true;
  std::string detail;
  auto compare = [&](const char* a, const std::vector<double>& va, const char* b, const std::vector<double>& vb) {
    const double gap = 100.0 * (mean(va) - mean(vb));
    ok = ok && gap >= -1.0;
    detail += std::string(detail.empty() ? "" : "; ") + a + " " + fmt(100.0 * mean(va), 4) + (gap >= 0 ? " >= " : " < ") +
              b + " " + fmt(100.0 * mean(vb), 4);
  };
  compare("progressive", progressive, "topk", topk);
  compare("partial", partial, "full", full);
  compare("random", random, "reinit", reinit);
  return {ok, detail + " (mean top-1 %, 3 seeds)"};
}

// ---- criteria 4 and 5 read the ledger of every pipeline run above ---------

Outcome criterion_4() {
  one_block_runs();
  if (ledger.runs == 0) return {false, "no pipeline runs recorded"};
  bool ok = true;
  for (const auto& p : ledger.problems) ok = ok && p.find("reuse") == std::string::npos && p.find("frozen") == std::string::npos;
  return {ok, std::to_string(ledger.runs) + " pipeline runs, weight reuse and frozen-region checks asserted in each"};
}

Outcome criterion_5() {
  // plus a sweep of random targets on the desk geometry, recounted on built models
  const auto& d = desk();
  one_block_runs();
  int sweeps = 0, bad = 0;
  Rng rng(5, 5);
  const auto b = count_macs(d.teacher.config);
  for (; sweeps < 50; ++sweeps) {
    const auto target =
        b.macs_o - 1 - static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(b.depth * (b.macs_a + b.macs_m))));
    CompressionPlan plan;
    try {
      plan = make_plan(b, target);
    } catch (const PlanningError&) {
      continue;  // falls in a gap between k intervals
    }
    std::vector<std::int64_t> blocks(static_cast<std::size_t>(plan.k));
    std::iota(blocks.begin(), blocks.end(), 0);
    ViTModel m = d.teacher.clone();
    Rng r(1, 1);
    for (std::size_t s = 0; s < blocks.size(); ++s)
      m = compress_block<float>(m, blocks[s], plan.hidden_counts[s], ReuseStrategy::Random, nullptr, r);
    const auto recount = count_macs(m.config, m.specs).macs_o;
    const auto slack = target - plan.achieved_macs;
    bad += recount != plan.achieved_macs || slack < 0 ||
           static_cast<double>(slack) >= static_cast<double>(plan.k) * plan.unit_macs;
  }
  bool ok = bad == 0 && ledger.runs > 0;
  for (const auto& p : ledger.problems) ok = ok && (p.find("recount") == std::string::npos && p.find("target") == std::string::npos);
  return {ok, std::to_string(ledger.runs) + " pipeline runs and " + std::to_string(sweeps) +
                  " random plans recounted exactly; " + std::to_string(bad + static_cast<int>(ledger.problems.size())) +
                  " violations"};
}

// ---- criterion 10 ---------------------------------------------------------

Outcome criterion_10() {
  const auto t0 = clk::now();
  // Reduced budget; everything from data generation to the report is rerun.
  auto once = [] {
    const auto train = gen_toy_dataset(10, 40, 32, 11, 0);
    const auto test = gen_toy_dataset(10, 20, 32, 11, 1);
    PretrainConfig pc;
    pc.epochs = 3;
    pc.warmup_epochs = 1;
    const auto teacher = pretrain(ViTConfig{}, train, test, pc, 11).best;
    RunConfig c;
    c.seed = 11;
    c.samples = 50;
    c.reduce = 0.12;
    c.finetune.epochs = 20;
    c.synth.steps = 20;
    c.synth.num_images = 32;
    c.jobs = 2;
    const auto tiny = sample_tiny(train, c.samples, c.seed);
    const auto out = run_pipeline(c, PipelineInputs{&teacher, &tiny.images, &test, nullptr});
    const auto ck = serialize_checkpoint(out.model, {});
    return out.report.dump(2) + std::string(ck.begin(), ck.end());
  };
  try {
    const auto a = once(), b = once();
    return {a == b, std::string(a == b ? "identical" : "different") + " report and checkpoint bytes over two runs (" +
                        std::to_string(a.size()) + " bytes, " + fmt(seconds_since(t0), 3) + " s)"};
  } catch (const std::exception& e) {
    return {false, std::string("pipeline error: ") + e.what()};
  }
}

}  // namespace

int main() {
  std::set<int> only;
  if (const char* env = std::getenv("DCVIT_ACCEPT_ONLY")) {
    std::stringstream ss(env);
    for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
  }
  // 7-9 feed the invariant ledger read by 4 and 5, so they run first.
  const std::vector<std::pair<int, std::function<Outcome()>>> order = {
      {1, criterion_1}, {2, criterion_2}, {3, criterion_3}, {6, criterion_6}, {7, criterion_7},
      {8, criterion_8}, {9, criterion_9}, {4, criterion_4}, {5, criterion_5}, {10, criterion_10}};
  std::vector<std::pair<int, Outcome>> results;
  for (const auto& [id, fn] : order) {
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    info("criterion " + std::to_string(id) + " done");
    results.emplace_back(id, o);
  }
  std::sort(results.begin(), results.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  int failed = 0;
  for (const auto& [id, o] : results) {
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
    failed += !o.pass;
  }
  std::cout << (failed ? "acceptance: " + std::to_string(failed) + " criterion(s) failed" : "acceptance: all passed")
            << std::endl;
  return failed ? 1 : 0;
}
