#pragma once

// Pixel-level primitives: the float raster type, color transforms,
// resampling, convolution and the centered power spectrum.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <mutex>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <fftw3.h>

#include "sef/errors.hpp"

namespace sef {

// Row-major, channel-interleaved float raster. Pixel-producing operations
// keep samples in [0, 1]; response maps (convolve2d) are unconstrained.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {
    if (h <= 0 || w <= 0 || (c != 1 && c != 3))
      throw InvalidInput("Image: invalid shape " + std::to_string(h) + "x" + std::to_string(w) +
                         "x" + std::to_string(c));
  }

  std::size_t size() const { return data.size(); }
  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }

  float& at(int y, int x, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int y, int x, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  // Edge-replicated read.
  float clamped(int y, int x, int c = 0) const {
    return at(std::clamp(y, 0, height - 1), std::clamp(x, 0, width - 1), c);
  }

  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

inline std::string shape_str(const Image& img) {
  return std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
         std::to_string(img.channels);
}

inline void clamp01(Image& img) {
  for (auto& s : img.data) s = std::clamp(s, 0.0f, 1.0f);
}

inline void require_aligned(const Image& img, const char* who) {
  if (img.height < 8 || img.width < 8 || img.height % 8 != 0 || img.width % 8 != 0)
    throw InvalidInput(std::string(who) + ": dimensions must be multiples of 8, got " +
                       shape_str(img));
}

struct Kernel2D {
  int size = 1;
  std::vector<float> weights;  // size x size, row-major

  Kernel2D() : weights{1.0f} {}
  Kernel2D(int n, std::vector<float> w) : size(n), weights(std::move(w)) {
    if (n < 1 || n % 2 == 0) throw InvalidInput("Kernel2D: size must be odd and >= 1");
    if (weights.size() != static_cast<std::size_t>(n) * n)
      throw InvalidInput("Kernel2D: weight count does not match size");
  }

  float at(int ky, int kx) const { return weights[static_cast<std::size_t>(ky) * size + kx]; }
};

namespace kernels {

inline Kernel2D identity3() { return {3, {0, 0, 0, 0, 1, 0, 0, 0, 0}}; }
inline Kernel2D laplacian3() { return {3, {0, 1, 0, 1, -4, 1, 0, 1, 0}}; }
inline Kernel2D sobel_x() { return {3, {-1, 0, 1, -2, 0, 2, -1, 0, 1}}; }
inline Kernel2D sobel_y() { return {3, {-1, -2, -1, 0, 0, 0, 1, 2, 1}}; }

}  // namespace kernels

// ---------------------------------------------------------------------------
// Color

inline Image to_grayscale(const Image& img) {
  if (img.channels != 3) throw InvalidInput("to_grayscale: expected 3 channels, got " + shape_str(img));
  Image out(img.height, img.width, 1);
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    const float* p = &img.data[i * 3];
    out.data[i] = std::clamp(0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2], 0.0f, 1.0f);
  }
  return out;
}

// Single-channel images pass through unchanged.
inline Image as_grayscale(const Image& img) { return img.channels == 1 ? img : to_grayscale(img); }

inline Image rgb_to_hsv_saturation(const Image& img) {
  if (img.channels != 3)
    throw InvalidInput("rgb_to_hsv_saturation: expected 3 channels, got " + shape_str(img));
  Image out(img.height, img.width, 1);
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    const float* p = &img.data[i * 3];
    const float mx = std::max({p[0], p[1], p[2]});
    const float mn = std::min({p[0], p[1], p[2]});
    out.data[i] = mx > 0.0f ? (mx - mn) / mx : 0.0f;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Resampling

// Catmull-Rom cubic convolution weight (a = -0.5).
inline double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

namespace detail {

struct Taps {
  std::array<int, 4> index;
  std::array<double, 4> weight;
};

// Pixel-center alignment: src = (dst + 0.5) * in / out - 0.5, edge clamped.
inline std::vector<Taps> cubic_taps(int in, int out) {
  std::vector<Taps> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int d = 0; d < out; ++d) {
    const double src = (d + 0.5) * scale - 0.5;
    const int base = static_cast<int>(std::floor(src));
    const double frac = src - base;
    for (int k = 0; k < 4; ++k) {
      taps[d].index[k] = std::clamp(base - 1 + k, 0, in - 1);
      taps[d].weight[k] = cubic_weight(frac - (k - 1));
    }
  }
  return taps;
}

}  // namespace detail

inline Image resize_bicubic(const Image& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1)
    throw InvalidInput("resize_bicubic: target dims must be >= 1");
  const int c = img.channels;
  const auto tx = detail::cubic_taps(img.width, out_w);
  const auto ty = detail::cubic_taps(img.height, out_h);

  std::vector<double> rows(static_cast<std::size_t>(img.height) * out_w * c);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < out_w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) acc += tx[x].weight[k] * img.at(y, tx[x].index[k], ch);
        rows[(static_cast<std::size_t>(y) * out_w + x) * c + ch] = acc;
      }

  Image out(out_h, out_w, c);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k)
          acc += ty[y].weight[k] * rows[(static_cast<std::size_t>(ty[y].index[k]) * out_w + x) * c + ch];
        out.at(y, x, ch) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
  return out;
}

// Bilinear with pixel-center alignment and edge clamping.
inline Image resize_bilinear(const Image& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw InvalidInput("resize_bilinear: target dims must be >= 1");
  Image out(out_h, out_w, img.channels);
  const double sy = static_cast<double>(img.height) / out_h;
  const double sx = static_cast<double>(img.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        const double top = (1 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c);
        const double bot = (1 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c);
        out.at(y, x, c) = static_cast<float>((1 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

// Non-overlapping box average by an integer factor per axis.
inline Image average_pool(const Image& img, int factor) {
  if (factor < 1 || img.height % factor != 0 || img.width % factor != 0)
    throw InvalidInput("average_pool: factor must divide image dims");
  Image out(img.height / factor, img.width / factor, img.channels);
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) acc += img.at(y * factor + dy, x * factor + dx, c);
        out.at(y, x, c) = static_cast<float>(acc * inv);
      }
  return out;
}

inline Image crop(const Image& img, int top, int left, int h, int w) {
  if (top < 0 || left < 0 || h < 1 || w < 1 || top + h > img.height || left + w > img.width)
    throw InvalidInput("crop: window outside image");
  Image out(h, w, img.channels);
  for (int y = 0; y < h; ++y) {
    const float* src = &img.data[(static_cast<std::size_t>(top + y) * img.width + left) * img.channels];
    std::copy(src, src + static_cast<std::size_t>(w) * img.channels,
              &out.data[static_cast<std::size_t>(y) * w * img.channels]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Filtering

// Same-size correlation with replicate padding on a single-channel image.
// The result is a response map and is deliberately not clamped.
inline Image convolve2d(const Image& img, const Kernel2D& k) {
  if (img.channels != 1) throw InvalidInput("convolve2d: expected a single-channel image");
  if (k.size % 2 == 0) throw InvalidInput("convolve2d: kernel size must be odd");
  const int r = k.size / 2;
  Image out(img.height, img.width, 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int ky = 0; ky < k.size; ++ky)
        for (int kx = 0; kx < k.size; ++kx) acc += k.at(ky, kx) * img.clamped(y + ky - r, x + kx - r);
      out.at(y, x) = static_cast<float>(acc);
    }
  return out;
}

inline double gaussian_sigma(int kernel_size) { return 0.3 * ((kernel_size - 1) / 2.0 - 1.0) + 0.8; }

inline std::vector<double> gaussian_weights(int kernel_size, double sigma) {
  const int r = kernel_size / 2;
  std::vector<double> w(static_cast<std::size_t>(kernel_size));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += w[i + r] = std::exp(-(i * i) / (2.0 * sigma * sigma));
  for (auto& v : w) v /= sum;
  return w;
}

inline std::vector<double> gaussian_weights(int kernel_size) {
  return gaussian_weights(kernel_size, gaussian_sigma(kernel_size));
}

namespace detail {

inline Image separable_filter(const Image& img, std::span<const double> w) {
  const int r = static_cast<int>(w.size()) / 2;
  const int c = img.channels;
  std::vector<double> tmp(img.size());
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += w[i + r] * img.clamped(y, x + i, ch);
        tmp[(static_cast<std::size_t>(y) * img.width + x) * c + ch] = acc;
      }
  Image out(img.height, img.width, c);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) {
          const int yy = std::clamp(y + i, 0, img.height - 1);
          acc += w[i + r] * tmp[(static_cast<std::size_t>(yy) * img.width + x) * c + ch];
        }
        out.at(y, x, ch) = static_cast<float>(acc);
      }
  return out;
}

}  // namespace detail

inline Image gaussian_blur(const Image& img, int kernel_size) {
  if (kernel_size != 3 && kernel_size != 5 && kernel_size != 7 && kernel_size != 9)
    throw InvalidInput("gaussian_blur: kernel size must be one of {3,5,7,9}");
  const auto w = gaussian_weights(kernel_size);
  Image out = detail::separable_filter(img, w);
  clamp01(out);
  return out;
}

// ---------------------------------------------------------------------------
// Frequency domain

// Power |F(u,v)|^2 with the zero frequency moved to (height/2, width/2).
struct SpectrumGrid {
  int height = 0;
  int width = 0;
  std::vector<double> power;

  double at(int y, int x) const { return power[static_cast<std::size_t>(y) * width + x]; }
  // Power at a signed frequency index pair, fu in [-H/2, H/2).
  double at_frequency(int fu, int fv) const {
    const int y = ((fu + height / 2) % height + height) % height;
    const int x = ((fv + width / 2) % width + width) % width;
    return at(y, x);
  }
  double total() const {
    double s = 0.0;
    for (double p : power) s += p;
    return s;
  }
};

namespace detail {
// FFTW's planner is not thread-safe.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

inline SpectrumGrid fft_power_spectrum(const Image& img) {
  if (img.channels != 1) throw InvalidInput("fft_power_spectrum: expected a single-channel image");
  const int h = img.height, w = img.width;
  const std::size_t n = img.pixels();
  fftw_complex* buf = fftw_alloc_complex(n);
  fftw_plan plan;
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    plan = fftw_plan_dft_2d(h, w, buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
  }
  for (std::size_t i = 0; i < n; ++i) {
    buf[i][0] = img.data[i];
    buf[i][1] = 0.0;
  }
  fftw_execute(plan);

  SpectrumGrid s{h, w, std::vector<double>(n)};
  for (int u = 0; u < h; ++u)
    for (int v = 0; v < w; ++v) {
      const auto& z = buf[static_cast<std::size_t>(u) * w + v];
      const int y = (u + h / 2) % h;
      const int x = (v + w / 2) % w;
      s.power[static_cast<std::size_t>(y) * w + x] = z[0] * z[0] + z[1] * z[1];
    }
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(buf);
  return s;
}

}  // namespace sef
