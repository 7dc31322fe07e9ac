#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "sef/evalbench.hpp"

using namespace sef;

namespace {

ModelConfig small_model() {
  ModelConfig m;
  m.resolution = 32;
  m.dim = 32;
  m.heads = 4;
  m.blocks = 3;
  m.mlp_hidden = 64;
  return m;
}

const Dataset& test_set() {
  static const Dataset ds = generate_dataset(60, 40, 40, kTestSeedBegin, 0.0);
  return ds;
}

Image ramp(int h, int w) {
  Image img(h, w, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>((y + 2 * x + c) % 97) / 96.0f;
  return img;
}

}  // namespace

TEST(BalancedAccuracy, Examples) {
  using S = std::vector<double>;
  using L = std::vector<int>;
  EXPECT_DOUBLE_EQ(balanced_accuracy(S{0.1, 0.2, 0.9, 0.8}, L{0, 0, 1, 1}), 100.0);
  EXPECT_DOUBLE_EQ(balanced_accuracy(S{0.9, 0.9, 0.9, 0.9}, L{0, 0, 1, 1}), 50.0);
  // TPR 4/5, TNR 3/5.
  EXPECT_NEAR(balanced_accuracy(S{0.9, 0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.1, 0.9, 0.9},
                                L{1, 1, 1, 1, 1, 0, 0, 0, 0, 0}),
              70.0, 1e-12);
  // Unequal class sizes: each class counts half.
  EXPECT_DOUBLE_EQ(balanced_accuracy(S{0.9, 0.1, 0.1, 0.1}, L{1, 1, 0, 0}), 75.0);
  // A score exactly at the threshold counts as fake.
  EXPECT_DOUBLE_EQ(balanced_accuracy(S{0.5, 0.49}, L{1, 0}), 100.0);
}

TEST(BalancedAccuracy, Errors) {
  using S = std::vector<double>;
  using L = std::vector<int>;
  EXPECT_THROW(balanced_accuracy(S{0.1, 0.9}, L{1, 1}), InvalidInput);
  EXPECT_THROW(balanced_accuracy(S{0.1, 0.9}, L{0, 0}), InvalidInput);
  EXPECT_THROW(balanced_accuracy(S{0.1}, L{0, 1}), InvalidInput);
  EXPECT_THROW(balanced_accuracy(S{0.1, 0.2}, L{0, 2}), InvalidInput);
}

TEST(Perturbations, SamplerSupports) {
  Rng rng(7);
  std::set<int> kernels, qualities;
  double cmin = 1e9, cmax = -1e9, nmin = 1e9, nmax = -1e9;
  for (int i = 0; i < 10000; ++i) {
    kernels.insert(sample_blur_kernel(rng));
    qualities.insert(sample_jpeg_quality(rng));
    const double c = sample_crop_percent(rng), n = sample_noise_variance(rng);
    cmin = std::min(cmin, c);
    cmax = std::max(cmax, c);
    nmin = std::min(nmin, n);
    nmax = std::max(nmax, n);
  }
  EXPECT_EQ(kernels, (std::set<int>{3, 5, 7, 9}));
  EXPECT_EQ(*qualities.begin(), 10);
  EXPECT_EQ(*qualities.rbegin(), 75);
  EXPECT_EQ(qualities.size(), 66u);
  EXPECT_GE(cmin, 5.0);
  EXPECT_LE(cmax, 20.0);
  EXPECT_LT(cmin, 5.1);
  EXPECT_GT(cmax, 19.9);
  EXPECT_GE(nmin, 5.0);
  EXPECT_LE(nmax, 20.0);
}

TEST(Perturbations, EachFiresHalfTheTime) {
  const auto spec = PerturbationSpec::all(3);
  const Image img = ramp(16, 16);
  Rng rng(11);
  int n[4] = {0, 0, 0, 0};
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto p = apply_perturbations(img, spec, rng);
    n[0] += p.blur;
    n[1] += p.crop;
    n[2] += p.jpeg;
    n[3] += p.noise;
  }
  for (int k : n) {
    EXPECT_GE(k / static_cast<double>(draws), 0.48);
    EXPECT_LE(k / static_cast<double>(draws), 0.52);
  }
}

TEST(Perturbations, CropWindowAndResizeBack) {
  const Image img = ramp(100, 100);
  const auto out = crop_and_resize(img, 20.0, 20.0);
  EXPECT_EQ(out.height, 100);
  EXPECT_EQ(out.width, 100);
  // Centered 80x80 window at offset 10.
  auto want = resize_bicubic(crop(img, 10, 10, 80, 80), 100, 100);
  clamp01(want);
  EXPECT_EQ(out, want);
  // Independent per-axis percentages.
  const auto tall = crop_and_resize(img, 20.0, 5.0);
  auto want2 = resize_bicubic(crop(img, 10, 2, 80, 95), 100, 100);
  clamp01(want2);
  EXPECT_EQ(tall, want2);
  // A constant image stays constant.
  const auto flat = crop_and_resize(Image(40, 40, 3, 0.3f), 15.0, 10.0);
  for (float v : flat.data) EXPECT_NEAR(v, 0.3f, 1e-6f);
}

TEST(Perturbations, DisabledLeavesImageUnchanged) {
  const Image img = ramp(24, 24);
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto p = apply_perturbations(img, PerturbationSpec::none(), rng);
    EXPECT_EQ(p.image, img);
    EXPECT_FALSE(p.blur || p.crop || p.jpeg || p.noise);
  }
  auto spec = PerturbationSpec::all();
  spec.p = 0.0;
  for (int i = 0; i < 50; ++i) EXPECT_EQ(apply_perturbations(img, spec, rng).image, img);
}

TEST(Perturbations, NoiseVariance) {
  const Image img(64, 64, 3, 0.5f);
  Rng rng(5);
  const auto out = add_gaussian_noise(img, 16.0, rng);
  double s = 0.0, ss = 0.0;
  for (float v : out.data) {
    s += v - 0.5;
    ss += (v - 0.5) * (v - 0.5);
  }
  const double n = static_cast<double>(out.data.size());
  EXPECT_NEAR(s / n, 0.0, 2e-4);
  EXPECT_NEAR(ss / n, 16.0 / (255.0 * 255.0), 0.05 * 16.0 / (255.0 * 255.0));
}

TEST(Perturbations, ParseAndDescribe) {
  EXPECT_FALSE(PerturbationSpec::parse("none").any());
  EXPECT_EQ(PerturbationSpec::parse("all").describe(), "blur,crop,jpeg,noise");
  EXPECT_EQ(PerturbationSpec::parse("noise,blur").describe(), "blur,noise");
  EXPECT_THROW(PerturbationSpec::parse("blur,sharpen"), ConfigError);
}

TEST(Evaluate, RefusesSeedOverlap) {
  const auto mc = small_model();
  const auto bb = init_backbone(mc);
  const auto e = init_expert(mc, 0);
  const auto s = expert_scorer(bb, e, mc);
  EXPECT_THROW(evaluate(s, test_set(), mc.resolution, PerturbationSpec::none(), kTestSeedBegin + 10,
                        kTestSeedBegin + 20),
               ConfigError);
  EXPECT_NO_THROW(check_disjoint(0, 1000, test_set()));
  EXPECT_THROW(check_disjoint(0, kTestSeedBegin + 1, test_set()), ConfigError);
}

TEST(Evaluate, UntrainedModelIsNearChance) {
  const auto mc = small_model();
  const auto bb = init_backbone(mc);
  const auto e = init_expert(mc, 0);
  const auto r = evaluate(expert_scorer(bb, e, mc), test_set(), mc.resolution, PerturbationSpec::none(), 0, 1000);
  for (const char* d : {"vae", "gan"}) {
    const auto& dr = r.domains.at(d);
    EXPECT_GE(dr.balanced_accuracy, 40.0) << d;
    EXPECT_LE(dr.balanced_accuracy, 60.0) << d;
    EXPECT_EQ(dr.counts.tp + dr.counts.fn, 60);
    EXPECT_EQ(dr.counts.tn + dr.counts.fp, 60);
  }
}

TEST(Evaluate, DeterministicUnderPerturbations) {
  const auto mc = small_model();
  const auto bb = init_backbone(mc);
  auto e = init_expert(mc, 0);
  const auto s = expert_scorer(bb, e, mc);
  const auto spec = PerturbationSpec::all(9);
  const auto a = evaluate(s, test_set(), mc.resolution, spec, 0, 1000);
  const auto b = evaluate(s, test_set(), mc.resolution, spec, 0, 1000);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  EXPECT_GT(a.n_jpeg, 0);
  EXPECT_LT(a.n_jpeg, 180);
}

TEST(Evaluate, PerfectScorerScoresHundred) {
  // Scores each image by looking it up among the center-cropped fakes.
  const auto mc = small_model();
  std::vector<Image> fakes;
  for (const auto& e : test_set().entries) {
    fakes.push_back(center_crop(e.fake_vae, mc.resolution));
    fakes.push_back(center_crop(e.fake_gan, mc.resolution));
  }
  Scorer oracle = [&](std::span<const Image> imgs) {
    std::vector<double> s;
    for (const auto& img : imgs) s.push_back(std::find(fakes.begin(), fakes.end(), img) != fakes.end() ? 1.0 : 0.0);
    return s;
  };
  const auto r = evaluate(oracle, test_set(), mc.resolution, PerturbationSpec::none(), 0, 1000);
  EXPECT_DOUBLE_EQ(r.domains.at("vae").balanced_accuracy, 100.0);
  EXPECT_DOUBLE_EQ(r.domains.at("gan").balanced_accuracy, 100.0);
  EXPECT_DOUBLE_EQ(r.mean(), 100.0);
}

TEST(Comparison, NeedsThreeSeeds) {
  TrainConfig cfg;
  const auto train = generate_dataset(4, 64, 64, 0, 0.0);
  EXPECT_THROW(run_paradigm_comparison(cfg, train, test_set(), {1, 2}), ConfigError);
}

TEST(Comparison, MedianOfOddAndEven) {
  EXPECT_DOUBLE_EQ(ComparisonTable::median({3, 1, 2}), 2.0);
  EXPECT_DOUBLE_EQ(ComparisonTable::median({4, 1, 3, 2}), 2.5);
}
