#pragma once

// Aligned training data: procedural anchor images, two artifact simulators
// standing in for reconstruction (VAE-style) and upsampling (GAN-style)
// generators, and mask-aware forgery augmentation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sef/codec.hpp"
#include "sef/errors.hpp"
#include "sef/image.hpp"
#include "sef/parallel.hpp"
#include "sef/rng.hpp"

namespace sef {

inline constexpr const char* kGeneratorVersion = "sef-forge/1";

enum class ArtifactDomain : std::uint8_t { VaeSim = 0, GanSim = 1 };

inline const char* to_string(ArtifactDomain d) { return d == ArtifactDomain::VaeSim ? "vae" : "gan"; }

inline ArtifactDomain parse_domain(const std::string& s) {
  if (s == "vae" || s == "VAE_SIM") return ArtifactDomain::VaeSim;
  if (s == "gan" || s == "GAN_SIM") return ArtifactDomain::GanSim;
  throw InvalidInput("unknown artifact domain '" + s + "' (expected vae or gan)");
}

// ---------------------------------------------------------------------------
// Anchor images

namespace detail {

inline double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// One octave of lattice value noise, cell size in pixels.
class ValueNoise {
 public:
  ValueNoise(Rng& rng, int h, int w, int cell) : cell_(cell), gw_(w / cell + 2), gh_(h / cell + 2) {
    lattice_.resize(static_cast<std::size_t>(gw_) * gh_);
    for (auto& v : lattice_) v = rng.uniform(-1.0, 1.0);
    ox_ = rng.uniform(0.0, cell);
    oy_ = rng.uniform(0.0, cell);
  }

  double operator()(int y, int x) const {
    const double fy = (y + oy_) / cell_, fx = (x + ox_) / cell_;
    const int iy = static_cast<int>(fy), ix = static_cast<int>(fx);
    const double ty = smoothstep(fy - iy), tx = smoothstep(fx - ix);
    const double a = node(iy, ix), b = node(iy, ix + 1);
    const double c = node(iy + 1, ix), d = node(iy + 1, ix + 1);
    return (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d);
  }

 private:
  double node(int y, int x) const {
    return lattice_[static_cast<std::size_t>(std::min(y, gh_ - 1)) * gw_ + std::min(x, gw_ - 1)];
  }
  int cell_, gw_, gh_;
  double ox_ = 0, oy_ = 0;
  std::vector<double> lattice_;
};

inline std::array<double, 3> random_color(Rng& rng, double lo = 0.05, double hi = 0.95) {
  return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

}  // namespace detail

// Deterministic stand-in for a natural photo: a smooth color gradient, a
// multi-octave value-noise texture, 2-6 hard-edged shapes and fine grain.
inline Image gen_procedural_real(std::uint64_t seed, int h, int w) {
  if (h < 32 || w < 32 || h % 8 != 0 || w % 8 != 0)
    throw InvalidInput("gen_procedural_real: dims must be multiples of 8 and >= 32");
  Rng rng(derive_seed(seed, {0x5EA1}));
  Image img(h, w, 3);

  const auto c0 = detail::random_color(rng), c1 = detail::random_color(rng);
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double diag = std::hypot(h, w);

  // Octaves from coarse to fine. A luminance field shared by all channels
  // plus a weaker per-channel chroma field.
  const int cells[] = {32, 16, 8, 4, 2};
  const double persistence = rng.uniform(0.6, 0.8);
  const double base_amp = rng.uniform(0.12, 0.25);
  std::vector<detail::ValueNoise> luma, chroma;
  std::vector<double> amps;
  double amp = base_amp;
  for (int cell : cells) {
    luma.emplace_back(rng, h, w, cell);
    for (int c = 0; c < 3; ++c) chroma.emplace_back(rng, h, w, cell);
    amps.push_back(amp);
    amp *= persistence;
  }
  const double chroma_gain = rng.uniform(0.15, 0.4);

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double t = std::clamp(0.5 + ((x - w / 2.0) * ca + (y - h / 2.0) * sa) / diag, 0.0, 1.0);
      double lum = 0.0;
      std::array<double, 3> chr{};
      for (std::size_t o = 0; o < amps.size(); ++o) {
        lum += amps[o] * luma[o](y, x);
        for (int c = 0; c < 3; ++c) chr[c] += amps[o] * chroma[o * 3 + c](y, x);
      }
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = static_cast<float>((1 - t) * c0[c] + t * c1[c] + lum + chroma_gain * chr[c]);
    }

  const int shapes = static_cast<int>(rng.uniform_int(2, 6));
  for (int s = 0; s < shapes; ++s) {
    const bool ellipse = rng.bernoulli(0.5);
    const double cy = rng.uniform(0.0, h), cx = rng.uniform(0.0, w);
    const double ry = rng.uniform(0.08, 0.3) * h, rx = rng.uniform(0.08, 0.3) * w;
    const auto color = detail::random_color(rng);
    const double alpha = rng.uniform(0.6, 1.0);
    const double shade = rng.uniform(-0.25, 0.25);  // linear shading across the shape
    const double edge_width = rng.uniform(1.0, 2.0);
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double py = y + 0.5 - cy, px = x + 0.5 - cx;
        const double dy = (px * st + py * ct) / ry, dx = (px * ct - py * st) / rx;
        // Approximate signed distance to the outline in pixels; edges are
        // anti-aliased over about one pixel like an optical edge.
        const double sd = ellipse ? (std::hypot(dx, dy) - 1.0) * std::min(rx, ry)
                                  : std::max((std::abs(dx) - 1.0) * rx, (std::abs(dy) - 1.0) * ry);
        const double cover = std::clamp(0.5 - sd / edge_width, 0.0, 1.0);
        if (cover <= 0.0) continue;
        const double a = alpha * detail::smoothstep(cover);
        for (int c = 0; c < 3; ++c) {
          const double v = color[c] + shade * dx;
          float& p = img.at(y, x, c);
          p = static_cast<float>((1 - a) * p + a * v);
        }
      }
  }

  const double grain = rng.uniform(0.004, 0.012);
  for (auto& p : img.data) p = static_cast<float>(p + grain * rng.normal());
  clamp01(img);
  return img;
}

// ---------------------------------------------------------------------------
// Artifact simulators

struct VaeSimParams {
  int latent_factor = 8;
  int quant_bits = 6;
  int blur_kernel = 3;
  double blur_sigma = 0.8;
};

// Reconstruction-style artifacts: the low-pass "latent" (8x box pool) is
// quantized and decoded bilinearly while the detail band passes through;
// the result is mildly blurred. The residual stays low-amplitude.
inline Image simulate_vae_artifact(const Image& img, const VaeSimParams& p = {}) {
  require_aligned(img, "simulate_vae_artifact");
  const Image latent = average_pool(img, p.latent_factor);
  Image quant = latent;
  const double levels = std::ldexp(1.0, p.quant_bits);
  for (auto& v : quant.data) v = static_cast<float>(std::clamp(std::round(v * levels), 0.0, levels) / levels);
  const Image decoded = resize_bilinear(quant, img.height, img.width);
  const Image smooth = resize_bilinear(latent, img.height, img.width);
  Image out(img.height, img.width, img.channels);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] = std::clamp(img.data[i] + (decoded.data[i] - smooth.data[i]), 0.0f, 1.0f);
  Image blurred = detail::separable_filter(out, gaussian_weights(p.blur_kernel, p.blur_sigma));
  clamp01(blurred);
  return blurred;
}

struct GanSimParams {
  int down_factor = 4;
  // 1-D taps [lead, center, trail] of the separable 3x3 transposed-conv
  // kernel. Even outputs get gain `center`, odd outputs `lead + trail`; the
  // mismatch is a period-2 checkerboard of relative depth
  // (center - lead - trail) / 2 when the taps sum to 2.
  float tap_lead = 0.493f;
  float tap_center = 1.014f;
  float tap_trail = 0.493f;
  float unsharp_amount = 0.0f;
  float saturation_scale = 0.93f;
  // Hallucinated fine texture: per-channel white noise seeded from the
  // low-resolution content, so the same input always gets the same texture.
  float texture_sigma = 0.008f;
};

namespace detail {

// Stride-2 transposed convolution (kernel 3, padding 1, output padding 1)
// with a separable kernel; the input is edge-replicated on the far side.
inline Image transposed_conv2x(const Image& in, const std::array<float, 3>& k) {
  Image out(in.height * 2, in.width * 2, in.channels);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x)
      for (int ky = 0; ky < 3; ++ky) {
        const int oy = 2 * y + ky - 1;
        if (oy < 0) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ox = 2 * x + kx - 1;
          if (ox < 0) continue;
          const float wk = k[ky] * k[kx];
          for (int c = 0; c < in.channels; ++c) out.at(oy, ox, c) += wk * in.at(y, x, c);
        }
      }
  // Odd rows/cols at the far edge miss their second contributor.
  const int H = out.height, W = out.width;
  for (int x = 0; x < W; ++x)
    for (int c = 0; c < in.channels; ++c) out.at(H - 1, x, c) *= (k[0] + k[2]) / k[2];
  for (int y = 0; y < H; ++y)
    for (int c = 0; c < in.channels; ++c) out.at(y, W - 1, c) *= (k[0] + k[2]) / k[2];
  return out;
}

}  // namespace detail

// Upsampling-style artifacts: 4x bicubic degradation, two stride-2
// transposed convolutions with uneven overlap (checkerboard), an unsharp
// mask, then saturation scaled by a fixed factor.
inline Image simulate_gan_artifact(const Image& img, const GanSimParams& p = {}) {
  require_aligned(img, "simulate_gan_artifact");
  if (p.down_factor != 4) throw InvalidInput("simulate_gan_artifact: only 4x degradation is supported");
  Image x = resize_bicubic(img, img.height / 4, img.width / 4);
  const std::array<float, 3> k{p.tap_lead, p.tap_center, p.tap_trail};
  std::uint64_t content = 0xcbf29ce484222325ULL;
  for (float v : x.data) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    content = (content ^ bits) * 0x100000001b3ULL;
  }
  x = detail::transposed_conv2x(x, k);
  x = detail::transposed_conv2x(x, k);
  if (p.texture_sigma > 0.0f) {
    Rng rng(derive_seed(content, {0x7E47}));
    for (auto& v : x.data) v += static_cast<float>(p.texture_sigma * rng.normal());
  }

  const auto w = gaussian_weights(3);
  const Image blurred = detail::separable_filter(x, w);
  for (std::size_t i = 0; i < x.size(); ++i)
    x.data[i] = std::clamp(x.data[i] + p.unsharp_amount * (x.data[i] - blurred.data[i]), 0.0f, 1.0f);

  if (x.channels == 3) {
    for (std::size_t i = 0; i < x.pixels(); ++i) {
      float* px = &x.data[i * 3];
      const float mx = std::max({px[0], px[1], px[2]});
      for (int c = 0; c < 3; ++c) px[c] = mx - p.saturation_scale * (mx - px[c]);
    }
  }
  clamp01(x);
  return x;
}

inline Image simulate_artifact(ArtifactDomain d, const Image& img) {
  return d == ArtifactDomain::VaeSim ? simulate_vae_artifact(img) : simulate_gan_artifact(img);
}

// ---------------------------------------------------------------------------
// Masks and masked compositing

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;  // 0 or 1 per pixel

  BinaryMask() = default;
  BinaryMask(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), bits(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
  double coverage() const {
    std::size_t ones = 0;
    for (auto b : bits) ones += b;
    return static_cast<double>(ones) / static_cast<double>(bits.size());
  }
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

enum class MaskKind : std::uint8_t { Foreground, Background };

struct MaskSpec {
  MaskKind kind = MaskKind::Foreground;
  std::uint64_t seed = 0;
  double coverage_min = 0.3;
  double coverage_max = 0.7;
};

inline constexpr int kMaskRetries = 64;

// Union of 1-4 random rectangles/ellipses. Foreground masks mark the shapes,
// background masks their complement. Shape sampling does not depend on the
// kind, so the two kinds are exact complements for one seed.
inline BinaryMask gen_mask(const MaskSpec& spec, int h, int w) {
  if (h < 1 || w < 1) throw InvalidInput("gen_mask: invalid dims");
  if (!(spec.coverage_min <= spec.coverage_max)) throw InvalidInput("gen_mask: empty coverage range");
  Rng rng(derive_seed(spec.seed, {0x3A5C}));
  for (int attempt = 0; attempt < kMaskRetries; ++attempt) {
    BinaryMask shapes(h, w);
    const int n = static_cast<int>(rng.uniform_int(1, 4));
    for (int s = 0; s < n; ++s) {
      const bool ellipse = rng.bernoulli(0.5);
      const double cy = rng.uniform(0.0, h), cx = rng.uniform(0.0, w);
      const double ry = rng.uniform(0.15, 0.45) * h, rx = rng.uniform(0.15, 0.45) * w;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
          if (ellipse ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0)
            shapes.bits[static_cast<std::size_t>(y) * w + x] = 1;
        }
    }
    const double cov = shapes.coverage();
    if (cov < spec.coverage_min || cov > spec.coverage_max) continue;
    if (spec.kind == MaskKind::Background)
      for (auto& b : shapes.bits) b = 1 - b;
    return shapes;
  }
  throw GenerationError("gen_mask: coverage constraint unsatisfied after " + std::to_string(kMaskRetries) +
                        " attempts");
}

// M * fake + (1 - M) * real as exact per-pixel selection.
inline Image apply_mask_aug(const Image& fake, const Image& real, const BinaryMask& mask) {
  if (!fake.same_shape(real) || mask.height != fake.height || mask.width != fake.width)
    throw InvalidInput("apply_mask_aug: fake, real and mask must share dims");
  Image out = real;
  const int c = fake.channels;
  for (std::size_t i = 0; i < mask.bits.size(); ++i)
    if (mask.bits[i])
      for (int ch = 0; ch < c; ++ch) out.data[i * c + ch] = fake.data[i * c + ch];
  return out;
}

inline Image mask_to_image(const BinaryMask& m) {
  Image img(m.height, m.width, 1);
  for (std::size_t i = 0; i < m.bits.size(); ++i) img.data[i] = m.bits[i] ? 1.0f : 0.0f;
  return img;
}

inline BinaryMask mask_from_image(const Image& img) {
  if (img.channels != 1) throw FormatError("mask image must be single-channel");
  BinaryMask m(img.height, img.width);
  for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = img.data[i] >= 0.5f ? 1 : 0;
  return m;
}

// ---------------------------------------------------------------------------
// Datasets

// One aligned quadruple held in memory. Images are already quantized to the
// 8-bit storage domain so in-memory and on-disk datasets are identical.
struct DatasetEntry {
  std::uint64_t seed = 0;
  Image real;
  Image fake_vae;
  Image fake_gan;
  std::optional<BinaryMask> mask;

  const Image& fake(ArtifactDomain d) const { return d == ArtifactDomain::VaeSim ? fake_vae : fake_gan; }
};

struct Dataset {
  std::vector<DatasetEntry> entries;
  std::uint64_t seed_begin = 0;  // entry seeds are [seed_begin, seed_end)
  std::uint64_t seed_end = 0;
  int height = 0;
  int width = 0;
};

struct ManifestEntry {
  std::string real_path;
  std::string fake_vae_path;
  std::string fake_gan_path;
  std::optional<std::string> mask_path;
  std::uint64_t seed = 0;
  int height = 0;
  int width = 0;
  int channels = 3;
  std::string format = "png";
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::string generator_version = kGeneratorVersion;
};

inline constexpr const char* kManifestName = "manifest.jsonl";

inline DatasetEntry make_entry(std::uint64_t entry_seed, int h, int w, double aug_prob) {
  DatasetEntry e;
  e.seed = entry_seed;
  e.real = quantize8(gen_procedural_real(entry_seed, h, w));
  e.fake_vae = quantize8(simulate_vae_artifact(e.real));
  e.fake_gan = quantize8(simulate_gan_artifact(e.real));
  Rng rng(derive_seed(entry_seed, {0xA06}));
  if (aug_prob > 0.0 && rng.bernoulli(aug_prob)) {
    MaskSpec spec;
    spec.kind = rng.bernoulli(0.5) ? MaskKind::Foreground : MaskKind::Background;
    spec.seed = rng.next_u64();
    e.mask = gen_mask(spec, h, w);
    e.fake_vae = apply_mask_aug(e.fake_vae, e.real, *e.mask);
    e.fake_gan = apply_mask_aug(e.fake_gan, e.real, *e.mask);
  }
  return e;
}

// Entry i uses seed `seed + i`; disjoint seed ranges give disjoint anchors.
inline Dataset generate_dataset(std::size_t n, int h, int w, std::uint64_t seed, double aug_prob,
                                int threads = 1) {
  if (n < 1) throw InvalidInput("build_dataset: n must be >= 1");
  if (!(aug_prob >= 0.0 && aug_prob <= 1.0)) throw InvalidInput("build_dataset: aug_prob must be in [0,1]");
  if (h % 8 != 0 || w % 8 != 0 || h < 32 || w < 32)
    throw InvalidInput("build_dataset: dims must be multiples of 8 and >= 32");
  Dataset ds;
  ds.entries.resize(n);
  ds.seed_begin = seed;
  ds.seed_end = seed + n;
  ds.height = h;
  ds.width = w;
  parallel_for(n, threads, [&](std::size_t i) { ds.entries[i] = make_entry(seed + i, h, w, aug_prob); });
  return ds;
}

inline nlohmann::json to_json(const ManifestEntry& e, const std::string& version) {
  nlohmann::json j;
  j["real_path"] = e.real_path;
  j["fake_vae_path"] = e.fake_vae_path;
  j["fake_gan_path"] = e.fake_gan_path;
  j["mask_path"] = e.mask_path ? nlohmann::json(*e.mask_path) : nlohmann::json(nullptr);
  j["seed"] = e.seed;
  j["height"] = e.height;
  j["width"] = e.width;
  j["channels"] = e.channels;
  j["format"] = e.format;
  j["generator_version"] = version;
  return j;
}

inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto& e : m.entries) out << to_json(e, m.generator_version).dump() << '\n';
  if (!out) throw IoError("failed writing manifest " + path.string());
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  DatasetManifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e;
      e.real_path = j.at("real_path").get<std::string>();
      e.fake_vae_path = j.at("fake_vae_path").get<std::string>();
      e.fake_gan_path = j.at("fake_gan_path").get<std::string>();
      if (!j.at("mask_path").is_null()) e.mask_path = j.at("mask_path").get<std::string>();
      e.seed = j.at("seed").get<std::uint64_t>();
      e.height = j.at("height").get<int>();
      e.width = j.at("width").get<int>();
      e.channels = j.value("channels", 3);
      e.format = j.value("format", std::string("png"));
      m.generator_version = j.value("generator_version", m.generator_version);
      m.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return m;
}

inline std::string entry_file(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu.png", i);
  return buf;
}

// Writes out/{real,fake_vae,fake_gan,mask}/NNNNN.png plus out/manifest.jsonl.
inline DatasetManifest write_dataset(const Dataset& ds, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  for (const char* sub : {"real", "fake_vae", "fake_gan", "mask"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw IoError("cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }
  DatasetManifest m;
  for (std::size_t i = 0; i < ds.entries.size(); ++i) {
    const auto& e = ds.entries[i];
    const std::string name = entry_file(i);
    ManifestEntry me;
    me.real_path = "real/" + name;
    me.fake_vae_path = "fake_vae/" + name;
    me.fake_gan_path = "fake_gan/" + name;
    save_png(e.real, out_dir / me.real_path);
    save_png(e.fake_vae, out_dir / me.fake_vae_path);
    save_png(e.fake_gan, out_dir / me.fake_gan_path);
    if (e.mask) {
      me.mask_path = "mask/" + name;
      save_png(mask_to_image(*e.mask), out_dir / *me.mask_path);
    }
    me.seed = e.seed;
    me.height = e.real.height;
    me.width = e.real.width;
    me.channels = e.real.channels;
    m.entries.push_back(std::move(me));
  }
  write_manifest(m, out_dir / kManifestName);
  return m;
}

inline DatasetManifest build_dataset(std::size_t n, int h, int w, std::uint64_t seed, double aug_prob,
                                     const std::filesystem::path& out_dir, int threads = 1) {
  return write_dataset(generate_dataset(n, h, w, seed, aug_prob, threads), out_dir);
}

// Loads a manifest's images and checks the alignment invariants.
inline Dataset load_dataset(const DatasetManifest& m, const std::filesystem::path& root) {
  if (m.entries.empty()) throw InvalidInput("load_dataset: manifest has no entries");
  Dataset ds;
  ds.seed_begin = UINT64_MAX;
  for (const auto& me : m.entries) {
    DatasetEntry e;
    e.seed = me.seed;
    e.real = load_png(root / me.real_path);
    e.fake_vae = load_png(root / me.fake_vae_path);
    e.fake_gan = load_png(root / me.fake_gan_path);
    if (me.mask_path) e.mask = mask_from_image(load_png(root / *me.mask_path));
    if (!e.real.same_shape(e.fake_vae) || !e.real.same_shape(e.fake_gan))
      throw FormatError("load_dataset: misaligned entry seed " + std::to_string(me.seed));
    if (e.real.height != me.height || e.real.width != me.width)
      throw FormatError("load_dataset: manifest dims disagree with image for seed " + std::to_string(me.seed));
    if (e.mask && (e.mask->height != me.height || e.mask->width != me.width))
      throw FormatError("load_dataset: mask dims disagree for seed " + std::to_string(me.seed));
    require_aligned(e.real, "load_dataset");
    ds.seed_begin = std::min(ds.seed_begin, me.seed);
    ds.seed_end = std::max(ds.seed_end, me.seed + 1);
    ds.height = me.height;
    ds.width = me.width;
    ds.entries.push_back(std::move(e));
  }
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  return load_dataset(read_manifest(dir / kManifestName), dir);
}

// Loads every PNG in a directory (sorted by name) as user-supplied anchors.
inline std::vector<Image> load_png_directory(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& de : fs::directory_iterator(dir))
    if (de.is_regular_file() && de.path().extension() == ".png") files.push_back(de.path());
  std::sort(files.begin(), files.end());
  std::vector<Image> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(load_png(f));
  return out;
}

}  // namespace sef
