#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>
#include <unistd.h>
#include <set>
#include <sstream>
#include <string>

#include "dcvit/dcvit.hpp"
#include "json.hpp"
#include "support/oracles.hpp"

using namespace dcvit;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---- dataset --------------------------------------------------------------

TEST(ToyDataset, SameSeedGivesIdenticalBytes) {
  const auto a = serialize_dataset(gen_toy_dataset(10, 8, 16, 5, 0));
  const auto b = serialize_dataset(gen_toy_dataset(10, 8, 16, 5, 0));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, serialize_dataset(gen_toy_dataset(10, 8, 16, 6, 0)));
  EXPECT_NE(a, serialize_dataset(gen_toy_dataset(10, 8, 16, 5, 1)));
}

TEST(ToyDataset, HistogramIsExactlyUniform) {
  const auto ds = gen_toy_dataset(7, 13, 8, 2, 0, 1);
  ASSERT_EQ(ds.size(), 91);
  std::vector<int> hist(7, 0);
  for (auto l : *ds.labels) ++hist[static_cast<std::size_t>(l)];
  for (auto h : hist) EXPECT_EQ(h, 13);
  EXPECT_EQ(ds.images.shape(), (Shape{91, 1, 8, 8}));
}

TEST(ToyDataset, ClassesAreSeparableByALinearProbe) {
  const auto train = gen_toy_dataset(10, 40, 16, 3, 0);
  const auto test = gen_toy_dataset(10, 20, 16, 3, 1);
  const double acc = oracle::linear_probe(train, test, 10);
  EXPECT_GT(acc, 0.3) << "linear probe top-1 " << acc;
}

TEST(ToyDataset, InvalidGeometryRejected) {
  EXPECT_THROW(gen_toy_dataset(1, 5, 8, 0), ValidationError);
  EXPECT_THROW(gen_toy_dataset(3, 0, 8, 0), ValidationError);
  EXPECT_THROW(gen_toy_dataset(3, 5, 1, 0), ValidationError);
}

TEST(DatasetFile, RoundTripIsBitExact) {
  const auto ds = gen_toy_dataset(4, 3, 8, 9, 0, 2);
  const auto bytes = serialize_dataset(ds);
  const auto back = deserialize_dataset(binio::Reader(bytes, "mem"));
  EXPECT_TRUE(back.images.bit_equal(ds.images));
  EXPECT_EQ(*back.labels, *ds.labels);

  Dataset unlabeled{ds.images, std::nullopt};
  const auto u = deserialize_dataset(binio::Reader(serialize_dataset(unlabeled), "mem"));
  EXPECT_FALSE(u.labeled());
}

TEST(DatasetFile, DamagedBytesRejected) {
  const auto bytes = serialize_dataset(gen_toy_dataset(3, 2, 4, 1, 0, 1));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_dataset(binio::Reader(bad_magic, "m")), IoError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize_dataset(binio::Reader(truncated, "t")), IoError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(deserialize_dataset(binio::Reader(trailing, "x")), IoError);
  auto bad_version = bytes;
  bad_version[4] = 99;
  EXPECT_THROW(deserialize_dataset(binio::Reader(bad_version, "v")), IoError);
}

TEST(TinySample, DeterministicDistinctAndUnlabeled) {
  const auto train = gen_toy_dataset(10, 10, 8, 4, 0, 1);
  const auto a = sample_tiny(train, 30, 7), b = sample_tiny(train, 30, 7), c = sample_tiny(train, 30, 8);
  EXPECT_TRUE(a.images.bit_equal(b.images));
  EXPECT_FALSE(a.images.bit_equal(c.images));
  EXPECT_FALSE(a.labeled());
  ASSERT_EQ(a.size(), 30);

  // every sampled image is a distinct train image
  const auto per = train.images.numel() / train.size();
  std::set<std::int64_t> rows;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    std::int64_t hit = -1;
    for (std::int64_t j = 0; j < train.size() && hit < 0; ++j)
      if (std::equal(a.images.ptr() + i * per, a.images.ptr() + (i + 1) * per, train.images.ptr() + j * per)) hit = j;
    ASSERT_GE(hit, 0);
    rows.insert(hit);
  }
  EXPECT_EQ(rows.size(), 30u);
  EXPECT_THROW(sample_tiny(train, 101, 0), ValidationError);
  EXPECT_THROW(sample_tiny(train, 0, 0), ValidationError);
}

// ---- run config -----------------------------------------------------------

TEST(RunConfigJson, RoundTripsEveryField) {
  RunConfig c;
  c.seed = 17;
  c.samples = 33;
  c.target_macs = 12345;
  c.force_k = 2;
  c.strategy = Strategy::TopK;
  c.reuse = ReuseStrategy::GeluMean;
  c.score = ScoreKind::Mse;
  c.convention = MacsConvention::Full;
  c.jobs = 4;
  c.vit.depth = 7;
  c.finetune.epochs = 11;
  c.finetune.update_scope = UpdateScope::Full;
  c.synth.steps = 9;
  c.pretrain.epochs = 5;
  c.metric_set = "m.dcms";
  c.out_dir = "somewhere";
  const json j = c;
  const auto back = j.get<RunConfig>();
  EXPECT_EQ(json(back).dump(), j.dump());
  for (const auto& [k, v] : j.items()) EXPECT_EQ(k.find('.'), std::string::npos) << k;
  EXPECT_TRUE(j.contains("vit_depth"));
  EXPECT_TRUE(j.contains("finetune_epochs"));
  EXPECT_TRUE(j.contains("synth_steps"));
  EXPECT_TRUE(j.contains("pretrain_epochs"));
}

TEST(RunConfigJson, UnknownAndMalformedKeysRejected) {
  json j = RunConfig{};
  j["finetune_epochz"] = 3;
  EXPECT_THROW(j.get<RunConfig>(), ValidationError);
  json k = RunConfig{};
  k["seed"] = "zero";
  EXPECT_THROW(k.get<RunConfig>(), ValidationError);
  EXPECT_THROW(json::array().get<RunConfig>(), ValidationError);
  json partial = {{"seed", 3}};
  const auto c = partial.get<RunConfig>();
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.samples, RunConfig{}.samples);
}

TEST(RunConfigJson, ValidationCatchesConflicts) {
  RunConfig c;
  c.reduce = 0.2;
  c.target_macs = 10;
  EXPECT_THROW(c.validate(), ValidationError);
  c.target_macs.reset();
  c.reduce = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c.reduce = 0.3;
  c.samples = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c.samples = 5;
  c.jobs = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c.jobs = 1;
  c.force_k = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c.force_k.reset();
  EXPECT_NO_THROW(c.validate());
}

// ---- command line ---------------------------------------------------------

struct CliRun {
  int code;
  std::string out;
};

std::string quote(const std::string& s) { return "'" + s + "'"; }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("dcvit_cli_" + std::string(info->name()) + "_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override {
    if (!HasFailure()) fs::remove_all(dir_);
  }

  CliRun run(const std::string& args) const {
    const auto log = dir_ / "stdout.txt";
    const auto cmd = quote(DCVIT_CLI_PATH) + " " + args + " > " + quote(log.string()) + " 2> " +
                     quote((dir_ / "stderr.txt").string());
    const int status = std::system(cmd.c_str());
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
  }

  // Runs a subcommand on <dir>/cfg.json with artifacts in <dir>/<out>.
  CliRun sub(const std::string& name, const std::string& extra = "", const std::string& out = "art") const {
    return run(name + " --config " + quote((dir_ / "cfg.json").string()) + " --out-dir " +
               quote((dir_ / out).string()) + " " + extra);
  }

  void write_config(const RunConfig& c) const {
    std::ofstream(dir_ / "cfg.json") << json(c).dump(2);
  }

  json report(const std::string& out = "art") const {
    std::ifstream in(dir_ / out / "report.json");
    return json::parse(in);
  }

  std::string bytes(const fs::path& p) const {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  fs::path dir_;
};

// A run small enough for a full CLI chain in a couple of seconds.
RunConfig tiny_config() {
  RunConfig c;
  c.vit.image_size = 16;
  c.vit.patch_size = 8;
  c.vit.channels = 3;
  c.vit.embed_dim = 16;
  c.vit.heads = 2;
  c.vit.depth = 2;
  c.vit.mlp_hidden = 32;
  c.data_train_per_class = 10;
  c.data_test_per_class = 5;
  c.pretrain.epochs = 3;
  c.pretrain.warmup_epochs = 1;
  c.finetune.epochs = 3;
  c.finetune.warmup_epochs = 1;
  c.synth.num_images = 10;
  c.synth.steps = 5;
  c.samples = 20;
  c.reduce = 0.3;
  return c;
}

TEST_F(Cli, DumpDefaultConfigParsesBack) {
  const auto r = run("--dump-default-config");
  ASSERT_EQ(r.code, 0);
  const auto j = json::parse(r.out);
  EXPECT_EQ(json(j.get<RunConfig>()).dump(), json(RunConfig{}).dump());
}

TEST_F(Cli, PlanOnTwelveBlockGeometryPicksTwoBlocks) {
  RunConfig c;
  c.vit.channels = 1;
  c.vit.patch_size = 4;
  c.vit.image_size = 16;
  c.vit.embed_dim = 64;
  c.vit.heads = 4;
  c.vit.depth = 12;
  c.vit.mlp_hidden = 256;
  write_config(c);
  const auto r = sub("plan", "--reduce 0.166");
  ASSERT_EQ(r.code, 0) << bytes(dir_ / "stderr.txt");
  const auto rep = report();
  const auto& p = rep.at("plan");
  EXPECT_EQ(p.at("source"), "config");
  EXPECT_EQ(p.at("plan").at("k"), 2);
  EXPECT_LE(p.at("plan").at("achieved_macs").get<std::int64_t>(), p.at("plan").at("target_macs").get<std::int64_t>());
  const auto share = p.at("macs").at("block_share").get<double>();
  EXPECT_GT(share, 0.083);  // one block is above 8.3% here, so 16.6% needs two
  EXPECT_TRUE(fs::exists(dir_ / "art" / "plan.json"));
}

TEST_F(Cli, MissingArtifactRecordsErrorAndFails) {
  write_config(tiny_config());
  const auto r = sub("pretrain");
  EXPECT_NE(r.code, 0);
  const auto rep = report();
  ASSERT_TRUE(rep.contains("error"));
  EXPECT_EQ(rep["error"]["subcommand"], "pretrain");
  EXPECT_NE(rep["error"]["message"].get<std::string>().find("gen-data"), std::string::npos);

  const auto e = sub("eval");
  EXPECT_NE(e.code, 0);
  EXPECT_EQ(report()["error"]["subcommand"], "eval");
}

TEST_F(Cli, UnknownConfigKeyIsAnError) {
  std::ofstream(dir_ / "cfg.json") << R"({"seed": 1, "vit_dpeth": 3})";
  const auto r = sub("plan", "--reduce 0.2");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(report()["error"]["message"].get<std::string>().find("vit_dpeth"), std::string::npos);
}

TEST_F(Cli, FullChainStaleChecksAndIdentityTarget) {
  write_config(tiny_config());
  for (const char* s : {"gen-data", "pretrain", "plan", "synth", "trial", "compress", "eval"})
    ASSERT_EQ(sub(s).code, 0) << s << ": " << bytes(dir_ / "stderr.txt");
  auto rep = report();
  EXPECT_FALSE(rep.contains("error"));
  for (const char* s : {"gen-data", "pretrain", "plan", "synth", "trial", "compress", "eval"})
    EXPECT_TRUE(rep.contains(s)) << s;
  const auto& comp = rep["compress"];
  for (const char* k : {"budget", "teacher_unchanged", "weight_reuse", "frozen_region"})
    EXPECT_EQ(comp["checks"][k], "pass") << k;
  EXPECT_EQ(comp["final"]["macs"], comp["plan"]["achieved_macs"]);
  EXPECT_EQ(rep["eval"]["macs"], comp["final"]["macs"]);
  EXPECT_EQ(rep["eval"]["test"], comp["final"]["test"]);
  EXPECT_EQ(rep["trial"]["trials"].size(), 2u);

  // a metric set made for another seed is refused by trial and compress
  const auto ms = (dir_ / "art" / "metric_set.dcms").string();
  EXPECT_NE(sub("trial", "--seed 5").code, 0);
  EXPECT_NE(report()["error"]["message"].get<std::string>().find("stale metric set"), std::string::npos);
  EXPECT_NE(sub("compress", "--seed 5 --metric-set " + quote(ms)).code, 0);
  EXPECT_NE(report()["error"]["message"].get<std::string>().find("stale metric set"), std::string::npos);

  // the target equal to the original MACs leaves the teacher as is
  const auto original = rep["plan"]["macs"]["original"].get<std::int64_t>();
  ASSERT_EQ(sub("compress", "--target-macs " + std::to_string(original)).code, 0);
  rep = report();
  EXPECT_EQ(rep["compress"]["plan"]["k"], 0);
  EXPECT_EQ(rep["compress"]["final"]["digest"], rep["compress"]["teacher"]["digest"]);
  EXPECT_EQ(rep["compress"]["final"]["test"]["top1"], rep["compress"]["teacher"]["test"]["top1"]);
  EXPECT_EQ(rep["compress"]["total_finetune_epochs"], 0);

  // a retrained teacher makes the old plan stale
  ASSERT_EQ(sub("pretrain", "--seed 3").code, 0);
  EXPECT_NE(sub("trial", "--seed 3").code, 0);
  EXPECT_NE(report()["error"]["message"].get<std::string>().find("stale plan"), std::string::npos);

  // a regenerated train split no longer matches the teacher's lineage
  ASSERT_EQ(sub("gen-data", "--seed 4").code, 0);
  EXPECT_NE(sub("compress", "--seed 3").code, 0);
  EXPECT_NE(report()["error"]["message"].get<std::string>().find("stale inputs"), std::string::npos);
}

TEST_F(Cli, PipelineReportIsByteIdenticalAcrossRuns) {
  write_config(tiny_config());
  std::string first;
  for (int pass = 0; pass < 2; ++pass) {
    fs::remove_all(dir_ / "art");
    for (const char* s : {"gen-data", "pretrain", "compress"})
      ASSERT_EQ(sub(s, "--jobs 2").code, 0) << s << ": " << bytes(dir_ / "stderr.txt");
    const auto now = bytes(dir_ / "art" / "report.json") + bytes(dir_ / "art" / "compressed.dcvt");
    if (pass == 0) first = now;
    else EXPECT_TRUE(now == first) << "report or checkpoint bytes differ between runs";
  }
}

TEST_F(Cli, TrialRestrictedToChosenBlocks) {
  write_config(tiny_config());
  for (const char* s : {"gen-data", "pretrain", "plan", "synth"}) ASSERT_EQ(sub(s).code, 0) << s;
  ASSERT_EQ(sub("trial", "--blocks 1").code, 0) << bytes(dir_ / "stderr.txt");
  const auto rep = report();
  ASSERT_EQ(rep["trial"]["trials"].size(), 1u);
  EXPECT_EQ(rep["trial"]["trials"][0]["block_idx"], 1);
  EXPECT_TRUE(fs::exists(dir_ / "art" / "candidate_b1.dcvt"));
  EXPECT_FALSE(fs::exists(dir_ / "art" / "candidate_b0.dcvt"));
}

TEST_F(Cli, DumpSynthWritesNetpbm) {
  write_config(tiny_config());
  for (const char* s : {"gen-data", "pretrain", "synth", "dump-synth"}) ASSERT_EQ(sub(s).code, 0) << s;
  const auto rep = report();
  EXPECT_EQ(rep["dump-synth"]["files"].size(), 10u);
  EXPECT_EQ(bytes(dir_ / "art" / "synth_0.ppm").substr(0, 2), "P6");
}

}  // namespace
