#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "sef/codec.hpp"
#include "sef/forge.hpp"
#include "sef/image.hpp"

using namespace sef;

namespace {

Image rgb(int h, int w, float r, float g, float b) {
  Image img(h, w, 3);
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    img.data[i * 3] = r;
    img.data[i * 3 + 1] = g;
    img.data[i * 3 + 2] = b;
  }
  return img;
}

double variance(const Image& img) {
  double m = 0.0;
  for (float v : img.data) m += v;
  m /= static_cast<double>(img.size());
  double s = 0.0;
  for (float v : img.data) s += (v - m) * (v - m);
  return s / static_cast<double>(img.size());
}

// Catmull-Rom weight written out from the piecewise cubic.
double catmull_rom(double x) {
  x = std::abs(x);
  if (x <= 1.0) return 1.5 * x * x * x - 2.5 * x * x + 1.0;
  if (x < 2.0) return -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0;
  return 0.0;
}

// Direct 2-D bicubic resampling, single channel, for comparison.
std::vector<double> reference_bicubic(const std::vector<double>& src, int h, int w, int oh, int ow) {
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      const double sy = (y + 0.5) * h / oh - 0.5, sx = (x + 0.5) * w / ow - 0.5;
      double acc = 0.0;
      for (int j = static_cast<int>(std::floor(sy)) - 1; j <= static_cast<int>(std::floor(sy)) + 2; ++j)
        for (int i = static_cast<int>(std::floor(sx)) - 1; i <= static_cast<int>(std::floor(sx)) + 2; ++i) {
          const int cj = std::clamp(j, 0, h - 1), ci = std::clamp(i, 0, w - 1);
          acc += catmull_rom(sy - j) * catmull_rom(sx - i) * src[static_cast<std::size_t>(cj) * w + ci];
        }
      out[static_cast<std::size_t>(y) * ow + x] = std::clamp(acc, 0.0, 1.0);
    }
  return out;
}

}  // namespace

TEST(Grayscale, WeightsAndFixedPoints) {
  EXPECT_FLOAT_EQ(to_grayscale(rgb(8, 8, 1, 1, 1)).at(3, 3), 1.0f);
  EXPECT_NEAR(to_grayscale(rgb(8, 8, 1, 0, 0)).at(0, 0), 0.299f, 1e-7);
  EXPECT_NEAR(to_grayscale(rgb(8, 8, 0.5f, 0.5f, 0.5f)).at(7, 7), 0.5f, 1e-7);
  const auto g = to_grayscale(rgb(16, 24, 0.2f, 0.4f, 0.6f));
  EXPECT_EQ(g.height, 16);
  EXPECT_EQ(g.width, 24);
  EXPECT_EQ(g.channels, 1);
}

TEST(Grayscale, RejectsSingleChannel) { EXPECT_THROW(to_grayscale(Image(8, 8, 1)), InvalidInput); }

TEST(Saturation, HsvExamples) {
  EXPECT_FLOAT_EQ(rgb_to_hsv_saturation(rgb(8, 8, 1, 0, 0)).at(0, 0), 1.0f);
  EXPECT_FLOAT_EQ(rgb_to_hsv_saturation(rgb(8, 8, 0.5f, 0.5f, 0.5f)).at(0, 0), 0.0f);
  EXPECT_NEAR(rgb_to_hsv_saturation(rgb(8, 8, 0.8f, 0.4f, 0.4f)).at(0, 0), 0.5f, 1e-6);
  EXPECT_FLOAT_EQ(rgb_to_hsv_saturation(rgb(8, 8, 0, 0, 0)).at(0, 0), 0.0f);
  EXPECT_THROW(rgb_to_hsv_saturation(Image(8, 8, 1)), InvalidInput);
}

TEST(Resize, ConstantStaysConstant) {
  const auto img = rgb(16, 16, 0.3f, 0.6f, 0.9f);
  for (auto [h, w] : {std::pair{4, 4}, {16, 16}, {37, 11}, {64, 48}}) {
    const auto out = resize_bicubic(img, h, w);
    for (std::size_t i = 0; i < out.pixels(); ++i) {
      EXPECT_NEAR(out.data[i * 3], 0.3f, 1e-6);
      EXPECT_NEAR(out.data[i * 3 + 2], 0.9f, 1e-6);
    }
  }
}

TEST(Resize, IdentityIsExact) {
  const auto img = gen_procedural_real(3, 32, 40);
  const auto out = resize_bicubic(img, 32, 40);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(out.data[i], img.data[i], 1e-6);
}

TEST(Resize, RampRoundTripMatchesDirectReference) {
  Image ramp(8, 8, 1);
  std::vector<double> src(64);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      const float v = static_cast<float>(x + 2 * y) / 21.0f;
      ramp.at(y, x) = v;
      src[static_cast<std::size_t>(y) * 8 + x] = v;
    }
  const auto down = resize_bicubic(ramp, 2, 2);
  const auto up = resize_bicubic(down, 8, 8);

  auto ref_down = reference_bicubic(src, 8, 8, 2, 2);
  for (auto& v : ref_down) v = static_cast<float>(v);  // the library stores the intermediate as float
  const auto ref_up = reference_bicubic(ref_down, 2, 2, 8, 8);
  for (std::size_t i = 0; i < 64; ++i) {
    const double err = up.data[i] - ramp.data[i];
    const double ref_err = ref_up[i] - src[i];
    EXPECT_NEAR(err, ref_err, 1e-5) << "pixel " << i;
  }
}

TEST(Resize, RejectsBadTargets) {
  const Image img(8, 8, 1);
  EXPECT_THROW(resize_bicubic(img, 0, 4), InvalidInput);
  EXPECT_THROW(resize_bicubic(img, 4, -1), InvalidInput);
}

TEST(Convolve, IdentityAndLaplacian) {
  const auto g = to_grayscale(gen_procedural_real(5, 32, 32));
  EXPECT_EQ(convolve2d(g, kernels::identity3()), g);
  const auto lap = convolve2d(Image(16, 16, 1, 0.37f), kernels::laplacian3());
  for (float v : lap.data) EXPECT_NEAR(v, 0.0f, 1e-6);
}

TEST(Convolve, SobelOnVerticalStep) {
  const float step = 0.5f;
  Image img(8, 8, 1);
  for (int y = 0; y < 8; ++y)
    for (int x = 4; x < 8; ++x) img.at(y, x) = step;
  const auto r = convolve2d(img, kernels::sobel_x());
  // Hand convolution: each column of the kernel is (1,2,1) and rows are
  // identical, so the response is 4 * (right - left) for the neighbors.
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      const float left = img.at(y, std::max(x - 1, 0)), right = img.at(y, std::min(x + 1, 7));
      EXPECT_NEAR(r.at(y, x), 4.0f * (right - left), 1e-6);
    }
  EXPECT_NEAR(r.at(2, 3), 4.0f * step, 1e-6);
  EXPECT_NEAR(r.at(2, 4), 4.0f * step, 1e-6);
}

TEST(Convolve, RejectsEvenKernelAndColor) {
  EXPECT_THROW(Kernel2D(2, {1, 1, 1, 1}), InvalidInput);
  EXPECT_THROW(convolve2d(Image(8, 8, 3), kernels::identity3()), InvalidInput);
}

TEST(GaussianBlur, ConstantUnchanged) {
  const auto img = rgb(16, 16, 0.25f, 0.5f, 0.75f);
  for (int k : {3, 5, 7, 9}) {
    const auto out = gaussian_blur(img, k);
    for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(out.data[i], img.data[i], 1e-6);
  }
}

TEST(GaussianBlur, ImpulseCenterWeight) {
  Image img(9, 9, 1);
  img.at(4, 4) = 1.0f;
  const auto out = gaussian_blur(img, 3);
  const double sigma = 0.3 * ((3 - 1) / 2.0 - 1.0) + 0.8;
  const double side = std::exp(-1.0 / (2.0 * sigma * sigma));
  const double center1d = 1.0 / (1.0 + 2.0 * side);
  EXPECT_NEAR(out.at(4, 4), center1d * center1d, 1e-6);
  EXPECT_NEAR(out.at(4, 5), center1d * side * center1d, 1e-6);
}

TEST(GaussianBlur, KernelsNormalized) {
  for (int k : {3, 5, 7, 9}) {
    double s = 0.0;
    for (double w : gaussian_weights(k)) s += w;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(GaussianBlur, ReducesLaplacianVariance) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto img = gen_procedural_real(seed, 32, 32);
    const double before = variance(convolve2d(to_grayscale(img), kernels::laplacian3()));
    for (int k : {3, 5, 7, 9}) {
      const double after = variance(convolve2d(to_grayscale(gaussian_blur(img, k)), kernels::laplacian3()));
      EXPECT_LT(after, before);
    }
  }
}

TEST(GaussianBlur, RejectsOtherSizes) {
  const Image img(8, 8, 1);
  for (int k : {1, 2, 4, 11}) EXPECT_THROW(gaussian_blur(img, k), InvalidInput);
}

TEST(Jpeg, NearLosslessAtQuality100) {
  Image img(32, 48, 3);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 48; ++x) {
      img.at(y, x, 0) = x / 47.0f;
      img.at(y, x, 1) = y / 31.0f;
      img.at(y, x, 2) = 0.5f;
    }
  const auto out = jpeg_roundtrip(img, 100);
  ASSERT_TRUE(out.same_shape(img));
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_LT(std::abs(out.data[i] - img.data[i]), 0.02f);
}

TEST(Jpeg, LowerQualityDegradesMore) {
  const auto img = gen_procedural_real(11, 64, 64);
  auto err = [&](int q) {
    const auto out = jpeg_roundtrip(img, q);
    double s = 0.0;
    for (std::size_t i = 0; i < img.size(); ++i) s += (out.data[i] - img.data[i]) * (out.data[i] - img.data[i]);
    return s / static_cast<double>(img.size());
  };
  EXPECT_GT(err(10), err(75));
}

TEST(Jpeg, PreservesDimsAndValidates) {
  const auto img = gen_procedural_real(4, 40, 72);
  const auto out = jpeg_roundtrip(img, 30);
  EXPECT_EQ(out.height, 40);
  EXPECT_EQ(out.width, 72);
  EXPECT_THROW(jpeg_roundtrip(img, 0), InvalidInput);
  EXPECT_THROW(jpeg_roundtrip(img, 101), InvalidInput);
  EXPECT_THROW(jpeg_roundtrip(Image(8, 8, 1), 50), InvalidInput);
}

TEST(Fft, ConstantHasOnlyDc) {
  const auto s = fft_power_spectrum(Image(16, 16, 1, 0.4f));
  const double dc = s.at_frequency(0, 0);
  EXPECT_NEAR(dc, std::pow(static_cast<double>(0.4f) * 256, 2), 1e-6);
  EXPECT_NEAR(s.total(), dc, 1e-9);
}

TEST(Fft, CosineGivesSymmetricPeaks) {
  const int n = 32, f = 5;
  Image img(n, n, 1);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      img.at(y, x) = static_cast<float>(0.5 + 0.25 * std::cos(2.0 * std::numbers::pi * f * x / n));
  const auto s = fft_power_spectrum(img);
  const double peak = s.at_frequency(0, f);
  EXPECT_NEAR(peak, s.at_frequency(0, -f), 1e-6 * peak);
  EXPECT_NEAR(s.total() - s.at_frequency(0, 0) - 2.0 * peak, 0.0, 1e-6 * peak);
}

TEST(Fft, Parseval) {
  const auto g = to_grayscale(gen_procedural_real(8, 32, 48));
  const auto s = fft_power_spectrum(g);
  double sq = 0.0;
  for (float v : g.data) sq += static_cast<double>(v) * v;
  EXPECT_NEAR(s.total() / static_cast<double>(g.pixels()), sq, 1e-5 * sq);
}

TEST(Determinism, PixelOpsAreBitIdentical) {
  const auto img = gen_procedural_real(21, 32, 32);
  EXPECT_EQ(resize_bicubic(img, 13, 29), resize_bicubic(img, 13, 29));
  EXPECT_EQ(gaussian_blur(img, 7), gaussian_blur(img, 7));
  EXPECT_EQ(jpeg_roundtrip(img, 40), jpeg_roundtrip(img, 40));
  EXPECT_EQ(to_grayscale(img), to_grayscale(img));
}

TEST(Png, RoundTripOfQuantizedImage) {
  const auto img = quantize8(gen_procedural_real(2, 32, 40));
  const auto path = std::filesystem::temp_directory_path() / "sef_png_roundtrip.png";
  save_png(img, path);
  EXPECT_EQ(load_png(path), img);
  std::filesystem::remove(path);
}

TEST(Png, MissingFileIsIoError) { EXPECT_THROW(load_png("/nonexistent/x.png"), IoError); }
