#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dcvit/dcvit.hpp"
#include "support/fixtures.hpp"
#include "support/grad_suite.hpp"

using namespace dcvit;
namespace fs = std::filesystem;

namespace {

SynthConfig quick_synth() {
  SynthConfig c;
  c.num_images = 20;
  c.steps = 40;
  return c;
}

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dcvit_synth_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

/// Mean of -log softmax(z)[y] over rows, in double.
double naive_mean_ce(const Tensor& logits, const std::vector<int>& labels) {
  const auto c = logits.dim(1);
  double total = 0.0;
  for (std::int64_t i = 0; i < logits.dim(0); ++i) {
    double denom = 0.0;
    for (std::int64_t k = 0; k < c; ++k) denom += std::exp(static_cast<double>(logits[i * c + k]));
    total -= static_cast<double>(logits[i * c + labels[static_cast<std::size_t>(i)]]) - std::log(denom);
  }
  return total / static_cast<double>(logits.dim(0));
}

}  // namespace

TEST(InitNoise, SameSeedIsBitIdentical) {
  SynthConfig cfg;
  Rng a(5, streams::kSynth), b(5, streams::kSynth);
  const auto [x1, y1] = init_noise(cfg, 3, 32, 10, a);
  const auto [x2, y2] = init_noise(cfg, 3, 32, 10, b);
  EXPECT_TRUE(x1.bit_equal(x2));
  EXPECT_EQ(y1, y2);
}

TEST(InitNoise, MeanIsZeroWithinThreeStandardErrors) {
  SynthConfig cfg;
  cfg.num_images = 64;
  Rng rng(6, streams::kSynth);
  const auto [x, y] = init_noise(cfg, 3, 32, 10, rng);
  double sum = 0.0;
  for (auto v : x.data()) sum += v;
  const double n = static_cast<double>(x.numel());
  EXPECT_LT(std::abs(sum / n), 3.0 * cfg.init_std / std::sqrt(n));
}

TEST(InitNoise, RoundRobinLabelCounts) {
  SynthConfig cfg;
  cfg.num_images = 25;
  Rng rng(1, 1);
  const auto labels = init_noise(cfg, 1, 4, 10, rng).second;
  std::vector<int> counts(10, 0);
  for (auto l : labels) ++counts[static_cast<std::size_t>(l)];
  for (int c = 0; c < 10; ++c) EXPECT_EQ(counts[static_cast<std::size_t>(c)], c < 5 ? 3 : 2) << c;
}

TEST(InitNoise, RandomLabelsStayInRange) {
  SynthConfig cfg;
  cfg.num_images = 200;
  cfg.label_assignment = LabelAssignment::Random;
  Rng rng(1, 1);
  for (auto l : init_noise(cfg, 1, 4, 7, rng).second) {
    EXPECT_GE(l, 0);
    EXPECT_LT(l, 7);
  }
}

TEST(SynthObjective, NoRegularisersMeansMeanCrossEntropy) {
  const auto& w = fixture::small_world();
  SynthConfig cfg;
  cfg.alpha_l2 = 0.0;
  cfg.alpha_tv = 0.0;
  Rng rng(2, 2);
  const auto [x, y] = init_noise(quick_synth(), 3, 16, 10, rng);
  auto tape = Tape<float>::inference();
  const double obj = synth_objective(tape, w.teacher, x, std::span<const int>(y), cfg).item();
  EXPECT_NEAR(obj, naive_mean_ce(infer(w.teacher, x).logits, y), 1e-5);
}

TEST(SynthObjective, RegularisersVanishOnAZeroImage) {
  const auto& w = fixture::small_world();
  SynthConfig with, without;
  with.alpha_l2 = 0.3;
  with.alpha_tv = 0.7;
  without.alpha_l2 = without.alpha_tv = 0.0;
  const Tensor zero({4, 3, 16, 16});
  const std::vector<int> y{0, 3, 5, 9};
  auto t1 = Tape<float>::inference(), t2 = Tape<float>::inference();
  EXPECT_EQ(synth_objective(t1, w.teacher, zero, std::span<const int>(y), with).item(),
            synth_objective(t2, w.teacher, zero, std::span<const int>(y), without).item());
}

template <typename T>
class SynthGradient : public ::testing::Test {};
using Precisions = ::testing::Types<float, double>;
TYPED_TEST_SUITE(SynthGradient, Precisions);

TYPED_TEST(SynthGradient, PixelGradientMatchesFiniteDifference) {
  using T = TypeParam;
  ViTConfig c;
  c.image_size = 5;
  c.patch_size = 5;
  c.channels = 3;
  c.embed_dim = 6;
  c.heads = 2;
  c.depth = 2;
  c.mlp_hidden = 8;
  c.num_classes = 4;
  Rng rng(3, 3);
  auto teacher = init_params<T>(c, rng);
  for (auto& [name, t] : teacher.params.map())
    for (auto& v : t.data()) v += static_cast<T>(rng.uniform(-0.4, 0.4));
  SynthConfig cfg;
  cfg.alpha_l2 = 0.05;
  cfg.alpha_tv = 0.02;
  for (int trial = 0; trial < 5; ++trial) {
    const std::vector<int> y{static_cast<int>(rng.below(4))};
    auto f = [&](auto& tape, auto& x) {
      return synth_objective(tape, oracle::cast_model<oracle::elem_t<decltype(x)>>(teacher), x[0],
                             std::span<const int>(y), cfg);
    };
    const auto err = oracle::gradcheck<T>(f, {oracle::random_tensor<T>({1, 3, 5, 5}, rng)},
                                          oracle::FdSettings<T>::step, rng);
    EXPECT_LT(err.inf, oracle::FdSettings<T>::tolerance) << trial;
  }
}

TEST(GenerateMetricSet, ZeroLearningRateReturnsTheNoise) {
  const auto& w = fixture::small_world();
  auto cfg = quick_synth();
  cfg.steps = 1;
  cfg.lr = 0.0;
  const auto res = generate_metric_set(w.teacher, cfg, 11);
  Rng rng(11, streams::kSynth);
  const auto [x, y] = init_noise(cfg, 3, 16, 10, rng);
  EXPECT_TRUE(res.set.images.bit_equal(x));
  EXPECT_EQ(res.set.hint_labels, y);
}

TEST(GenerateMetricSet, ObjectiveFallsAndAgreementRises) {
  const auto& w = fixture::small_world();
  ASSERT_GT(w.teacher_train_top1, 0.2) << "fixture teacher is not above chance";
  const auto res = generate_metric_set(w.teacher, quick_synth(), 2);
  ASSERT_EQ(res.trajectory.size(), static_cast<std::size_t>(quick_synth().steps + 1));
  EXPECT_LT(res.trajectory.back(), res.trajectory.front());
  EXPECT_GT(res.agreement_after, res.agreement_before);
  EXPECT_TRUE(res.set.images.all_finite());
  for (auto v : res.set.images.data()) ASSERT_LE(std::abs(v), 3.0f);
}

TEST(GenerateMetricSet, TeacherIsLeftUntouched) {
  const auto& w = fixture::small_world();
  const auto before = model_digest(w.teacher);
  generate_metric_set(w.teacher, quick_synth(), 3);
  EXPECT_EQ(model_digest(w.teacher), before);
  for (const auto& [name, t] : w.teacher.params.map()) EXPECT_FALSE(t.has_grad()) << name;
}

TEST(GenerateMetricSet, DeterministicPerSeed) {
  const auto& w = fixture::small_world();
  const auto a = generate_metric_set(w.teacher, quick_synth(), 4);
  const auto b = generate_metric_set(w.teacher, quick_synth(), 4);
  const auto c = generate_metric_set(w.teacher, quick_synth(), 5);
  EXPECT_TRUE(a.set.images.bit_equal(b.set.images));
  EXPECT_EQ(a.set.fingerprint, b.set.fingerprint);
  EXPECT_EQ(a.trajectory, b.trajectory);
  EXPECT_FALSE(a.set.images.bit_equal(c.set.images));
  EXPECT_NE(a.set.fingerprint, c.set.fingerprint);
}

TEST(GenerateMetricSet, FingerprintTracksTeacherConfigAndSeed) {
  const auto& w = fixture::small_world();
  const auto d = model_digest(w.teacher);
  auto cfg = quick_synth();
  const auto base = metric_set_fingerprint(d, cfg, 1);
  EXPECT_NE(base, metric_set_fingerprint(d, cfg, 2));
  auto other = cfg;
  other.alpha_tv *= 2.0;
  EXPECT_NE(base, metric_set_fingerprint(d, other, 1));
  auto shifted = w.teacher.clone();
  shifted.params.at("head.bias")[0] += 1.0f;
  EXPECT_NE(base, metric_set_fingerprint(model_digest(shifted), cfg, 1));
}

TEST(GenerateMetricSet, DivergenceIsReported) {
  const auto& w = fixture::small_world();
  auto cfg = quick_synth();
  cfg.clamp = 0.0;
  cfg.lr = 1e30;
  cfg.alpha_l2 = 1.0;
  cfg.steps = 5;
  EXPECT_THROW(generate_metric_set(w.teacher, cfg, 1), GenerationError);
}

TEST(GenerateMetricSet, InvalidConfigRejected) {
  const auto& w = fixture::small_world();
  auto cfg = quick_synth();
  cfg.steps = 0;
  EXPECT_THROW(generate_metric_set(w.teacher, cfg, 1), ValidationError);
  cfg = quick_synth();
  cfg.beta = 0.0;
  EXPECT_THROW(generate_metric_set(w.teacher, cfg, 1), ValidationError);
  cfg = quick_synth();
  cfg.alpha_tv = -1.0;
  EXPECT_THROW(generate_metric_set(w.teacher, cfg, 1), ValidationError);
}

TEST(MetricSetFile, RoundTripIsBitExact) {
  const auto& w = fixture::small_world();
  auto cfg = quick_synth();
  cfg.steps = 3;
  const auto res = generate_metric_set(w.teacher, cfg, 9);
  const auto path = (scratch_dir("roundtrip") / "set.dcms").string();
  save_metric_set(path, res.set);
  const auto back = load_metric_set(path);
  EXPECT_TRUE(back.images.bit_equal(res.set.images));
  EXPECT_EQ(back.hint_labels, res.set.hint_labels);
  EXPECT_EQ(back.fingerprint, res.set.fingerprint);
  // same set twice gives the same bytes
  const auto again = (scratch_dir("roundtrip2") / "set.dcms").string();
  save_metric_set(again, back);
  EXPECT_EQ(file_digest(path), file_digest(again));
}

TEST(MetricSetFile, DamagedFilesAreRejected) {
  const auto dir = scratch_dir("damaged");
  MetricSet s{Tensor({2, 1, 2, 2}, std::vector<float>(8, 0.5f)), {0, 1}, {}};
  const auto path = (dir / "ok.dcms").string();
  save_metric_set(path, s);
  std::ifstream in(path, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto write = [&](const std::string& name, const std::vector<char>& b) {
    std::ofstream(dir / name, std::ios::binary).write(b.data(), static_cast<std::streamsize>(b.size()));
    return (dir / name).string();
  };
  auto cut = bytes;
  cut.pop_back();
  EXPECT_THROW(load_metric_set(write("cut.dcms", cut)), IoError);
  auto magic = bytes;
  magic[1] = 'X';
  EXPECT_THROW(load_metric_set(write("magic.dcms", magic)), IoError);
  EXPECT_THROW(load_metric_set((dir / "missing.dcms").string()), IoError);
}

TEST(DumpImage, WritesNetpbmHeaders) {
  const auto dir = scratch_dir("dump");
  Rng rng(1, 1);
  const auto rgb = oracle::random_tensor<float>({2, 3, 4, 5}, rng);
  const auto gray = oracle::random_tensor<float>({1, 1, 4, 5}, rng);
  dump_image((dir / "a.ppm").string(), rgb, 1);
  dump_image((dir / "b.pgm").string(), gray, 0);
  std::ifstream a(dir / "a.ppm", std::ios::binary), b(dir / "b.pgm", std::ios::binary);
  std::string magic, dims;
  a >> magic;
  EXPECT_EQ(magic, "P6");
  b >> magic;
  EXPECT_EQ(magic, "P5");
  EXPECT_EQ(fs::file_size(dir / "a.ppm"), std::string("P6\n5 4\n255\n").size() + 3 * 4 * 5);
  EXPECT_EQ(fs::file_size(dir / "b.pgm"), std::string("P5\n5 4\n255\n").size() + 4 * 5);
}
