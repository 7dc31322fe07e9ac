#pragma once

// Image statistics used to compare real images with the two fake families,
// corpus aggregation, and proximity ("radar") normalization.

#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sef/errors.hpp"
#include "sef/image.hpp"
#include "sef/parallel.hpp"

namespace sef {

struct MetricOptions {
  double hf_cutoff = 0.5;  // fraction of the normalized Nyquist radius
  int glcm_levels = 256;
  double edge_threshold_std = 1.0;  // edge pixels: magnitude > mean + k * std
  int block_size = 8;
};

inline constexpr double kPsnrCap = 100.0;
inline constexpr double kPsnrMseFloor = 1e-10;

inline double mse(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw InvalidInput("mse: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

inline double psnr_from_mse(double m) { return m < kPsnrMseFloor ? kPsnrCap : 10.0 * std::log10(1.0 / m); }

inline double psnr(const Image& a, const Image& b) { return psnr_from_mse(mse(a, b)); }

// Share of non-DC spectral power at normalized radius above the cutoff.
// Radius is |(fu, fv)| / (min(H, W) / 2).
inline double hf_ratio(const Image& img, const MetricOptions& opt = {}) {
  const Image gray = as_grayscale(img);
  const SpectrumGrid s = fft_power_spectrum(gray);
  const double half = std::min(s.height, s.width) / 2.0;
  double high = 0.0, total = 0.0;
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      const int fu = y - s.height / 2, fv = x - s.width / 2;
      if (fu == 0 && fv == 0) continue;
      const double p = s.at(y, x);
      total += p;
      if (std::hypot(fu, fv) / half > opt.hf_cutoff) high += p;
    }
  return total > 0.0 ? high / total : 0.0;
}

namespace detail {

inline Image gray255(const Image& img) {
  Image g = as_grayscale(img);
  for (auto& v : g.data) v *= 255.0f;
  return g;
}

inline std::vector<double> sobel_magnitude(const Image& gray) {
  const Image gx = convolve2d(gray, kernels::sobel_x());
  const Image gy = convolve2d(gray, kernels::sobel_y());
  std::vector<double> mag(gray.pixels());
  for (std::size_t i = 0; i < mag.size(); ++i) mag[i] = std::hypot(gx.data[i], gy.data[i]);
  return mag;
}

}  // namespace detail

// Population variance of the 3x3 Laplacian response on the 0-255 gray image.
inline double sharpness(const Image& img) {
  const Image lap = convolve2d(detail::gray255(img), kernels::laplacian3());
  double mean = 0.0;
  for (float v : lap.data) mean += v;
  mean /= static_cast<double>(lap.size());
  double var = 0.0;
  for (float v : lap.data) var += (v - mean) * (v - mean);
  return var / static_cast<double>(lap.size());
}

inline double saturation_mean(const Image& img) {
  if (img.channels != 3) throw InvalidInput("saturation_mean: expected 3 channels");
  const Image s = rgb_to_hsv_saturation(img);
  double acc = 0.0;
  for (float v : s.data) acc += v;
  return acc / static_cast<double>(s.size());
}

inline int quantize_level(float v, int levels) {
  return std::clamp(static_cast<int>(std::lround(v * (levels - 1))), 0, levels - 1);
}

// Symmetric, normalized gray-level co-occurrence matrix at offset (dy, dx).
inline std::vector<double> glcm(const Image& img, int dy, int dx, int levels = 256) {
  const Image gray = as_grayscale(img);
  std::vector<double> m(static_cast<std::size_t>(levels) * levels, 0.0);
  double count = 0.0;
  for (int y = 0; y + dy < gray.height; ++y)
    for (int x = 0; x + dx < gray.width; ++x) {
      const int a = quantize_level(gray.at(y, x), levels);
      const int b = quantize_level(gray.at(y + dy, x + dx), levels);
      m[static_cast<std::size_t>(a) * levels + b] += 1.0;
      m[static_cast<std::size_t>(b) * levels + a] += 1.0;
      count += 2.0;
    }
  if (count > 0)
    for (auto& v : m) v /= count;
  return m;
}

inline double glcm_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log2(v);
  return h;
}

inline double tex_entropy(const Image& img, const MetricOptions& opt = {}) {
  return glcm_entropy(glcm(img, 0, 1, opt.glcm_levels));
}

// Fisher skewness m3 / m2^1.5 of Sobel magnitudes over edge pixels.
inline double edge_skew(const Image& img, const MetricOptions& opt = {}) {
  const auto mag = detail::sobel_magnitude(detail::gray255(img));
  double mean = 0.0;
  for (double v : mag) mean += v;
  mean /= static_cast<double>(mag.size());
  double var = 0.0;
  for (double v : mag) var += (v - mean) * (v - mean);
  const double thr = mean + opt.edge_threshold_std * std::sqrt(var / static_cast<double>(mag.size()));

  std::vector<double> edges;
  for (double v : mag)
    if (v > thr) edges.push_back(v);
  if (edges.size() < 3) return 0.0;
  double em = 0.0;
  for (double v : edges) em += v;
  em /= static_cast<double>(edges.size());
  double m2 = 0.0, m3 = 0.0;
  for (double v : edges) {
    const double d = v - em;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= static_cast<double>(edges.size());
  m3 /= static_cast<double>(edges.size());
  if (m2 <= 0.0) return 0.0;
  return m3 / std::pow(m2, 1.5);
}

// Pixels on either side of an interior block seam (index mod B in {B-1, 0},
// image border rows/cols excluded).
inline bool on_block_boundary(int i, int n, int block) {
  if (i == 0 || i == n - 1) return false;
  const int r = i % block;
  return r == 0 || r == block - 1;
}

inline double dct_blockiness(const Image& img, const MetricOptions& opt = {}) {
  if (img.height % opt.block_size != 0 || img.width % opt.block_size != 0)
    throw InvalidInput("dct_blockiness: dims must be multiples of the block size");
  const Image gray = as_grayscale(img);
  const auto mag = detail::sobel_magnitude(gray);
  double boundary = 0.0, total = 0.0;
  for (int y = 0; y < gray.height; ++y) {
    const bool row_b = on_block_boundary(y, gray.height, opt.block_size);
    for (int x = 0; x < gray.width; ++x) {
      const double e = mag[static_cast<std::size_t>(y) * gray.width + x];
      total += e * e;
      if (row_b || on_block_boundary(x, gray.width, opt.block_size)) boundary += e * e;
    }
  }
  return total > 0.0 ? boundary / total : 0.0;
}

// ---------------------------------------------------------------------------
// Profiles

struct MetricProfile {
  double mse = 0.0;
  double psnr = kPsnrCap;
  double hf_ratio = 0.0;
  double sharpness = 0.0;
  double saturation = 0.0;
  double tex_entropy = 0.0;
  double edge_skew = 0.0;
  double dct_blockiness = 0.0;

  static constexpr std::array<const char*, 8> kNames{"mse",        "psnr",        "hf_ratio",  "sharpness",
                                                     "saturation", "tex_entropy", "edge_skew", "dct_blockiness"};

  std::array<double, 8> values() const {
    return {mse, psnr, hf_ratio, sharpness, saturation, tex_entropy, edge_skew, dct_blockiness};
  }
  static MetricProfile from_values(const std::array<double, 8>& v) {
    return {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
  }
};

enum class PsnrAggregation { PerImage, Global };

// Unary metrics of one image; mse/psnr against `reference` when given.
inline MetricProfile image_profile(const Image& img, const Image* reference, const MetricOptions& opt = {}) {
  MetricProfile p;
  if (reference) {
    p.mse = mse(img, *reference);
    p.psnr = psnr_from_mse(p.mse);
  }
  p.hf_ratio = hf_ratio(img, opt);
  p.sharpness = sharpness(img);
  p.saturation = img.channels == 3 ? saturation_mean(img) : 0.0;
  p.tex_entropy = tex_entropy(img, opt);
  p.edge_skew = edge_skew(img, opt);
  p.dct_blockiness = dct_blockiness(img, opt);
  return p;
}

// Arithmetic mean of per-image metrics. Without a reference the corpus is
// its own reference (mse 0, psnr 100).
inline MetricProfile corpus_profile(std::span<const Image> images, std::span<const Image> reference = {},
                                    PsnrAggregation agg = PsnrAggregation::PerImage,
                                    const MetricOptions& opt = {}, int threads = 1) {
  if (images.empty()) throw InvalidInput("corpus_profile: empty corpus");
  if (!reference.empty() && reference.size() != images.size())
    throw InvalidInput("corpus_profile: reference corpus size mismatch");
  std::vector<MetricProfile> per(images.size());
  parallel_for(images.size(), threads, [&](std::size_t i) {
    per[i] = image_profile(images[i], reference.empty() ? nullptr : &reference[i], opt);
  });
  std::array<double, 8> sum{};
  for (const auto& p : per) {
    const auto v = p.values();
    for (std::size_t k = 0; k < 8; ++k) sum[k] += v[k];
  }
  for (auto& s : sum) s /= static_cast<double>(per.size());
  MetricProfile out = MetricProfile::from_values(sum);
  if (agg == PsnrAggregation::Global) out.psnr = psnr_from_mse(out.mse);
  return out;
}

// ---------------------------------------------------------------------------
// Proximity scores: s = 1 - |v - r| / (alpha * d), d = max distance of the
// two candidates from the reference. d == 0 gives s = 1 for both.

struct RadarScores {
  std::array<double, 8> score{};
  double alpha = 1.2;
};

inline std::pair<RadarScores, RadarScores> radar_scores(const MetricProfile& real_ref, const MetricProfile& vae,
                                                        const MetricProfile& gan, double alpha = 1.2) {
  if (!(alpha > 1.0)) throw InvalidInput("radar_scores: alpha must be > 1");
  const auto r = real_ref.values(), v = vae.values(), g = gan.values();
  RadarScores sv{{}, alpha}, sg{{}, alpha};
  for (std::size_t m = 0; m < 8; ++m) {
    const double dv = std::abs(v[m] - r[m]), dg = std::abs(g[m] - r[m]);
    const double d = std::max(dv, dg);
    if (d > 0.0) {
      // The farther candidate scores exactly 1 - 1/alpha.
      sv.score[m] = dv == d ? 1.0 - 1.0 / alpha : 1.0 - dv / (alpha * d);
      sg.score[m] = dg == d ? 1.0 - 1.0 / alpha : 1.0 - dg / (alpha * d);
    } else {
      sv.score[m] = sg.score[m] = 1.0;
    }
  }
  return {sv, sg};
}

}  // namespace sef
