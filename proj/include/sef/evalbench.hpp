#pragma once

// Balanced accuracy, robustness perturbations, per-domain evaluation and the
// four-paradigm comparison (VAE expert, GAN expert, mixed baseline, fusion).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sef/codec.hpp"
#include "sef/errors.hpp"
#include "sef/forge.hpp"
#include "sef/image.hpp"
#include "sef/model.hpp"
#include "sef/rng.hpp"
#include "sef/train.hpp"

namespace sef {

inline constexpr double kDecisionThreshold = 0.5;
inline constexpr std::uint64_t kTestSeedBegin = 1'000'000;

struct Confusion {
  std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;

  double tpr() const { return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }
  double tnr() const { return tn + fp == 0 ? 0.0 : static_cast<double>(tn) / static_cast<double>(tn + fp); }
  double balanced_accuracy() const {
    if (tp + fn == 0 || tn + fp == 0) throw InvalidInput("balanced accuracy needs both classes");
    return 50.0 * (tpr() + tnr());
  }
};

// Labels: 1 fake (positive), 0 real. A score at the threshold counts as fake.
inline Confusion confusion(std::span<const double> scores, std::span<const int> labels,
                           double threshold = kDecisionThreshold) {
  if (scores.size() != labels.size()) throw InvalidInput("confusion: scores/labels length mismatch");
  Confusion c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i] != 0 && labels[i] != 1) throw InvalidInput("confusion: labels must be 0 or 1");
    if (labels[i] == 1) (pred ? c.tp : c.fn)++;
    else (pred ? c.fp : c.tn)++;
  }
  return c;
}

inline double balanced_accuracy(std::span<const double> scores, std::span<const int> labels,
                                double threshold = kDecisionThreshold) {
  const auto c = confusion(scores, labels, threshold);
  if (c.tp + c.fn == 0 || c.tn + c.fp == 0) throw InvalidInput("balanced_accuracy: labels contain a single class");
  return c.balanced_accuracy();
}

// ---------------------------------------------------------------------------
// Perturbations

struct PerturbationSpec {
  bool blur = false, crop = false, jpeg = false, noise = false;
  double p = 0.5;
  std::uint64_t seed = 0;
  bool random_anchor = false;  // crop window position; centered by default

  static PerturbationSpec none() { return {}; }
  static PerturbationSpec all(std::uint64_t seed = 0) {
    PerturbationSpec s;
    s.blur = s.crop = s.jpeg = s.noise = true;
    s.seed = seed;
    return s;
  }
  // "none", "all", or a comma list of blur, crop, jpeg, noise.
  static PerturbationSpec parse(const std::string& text, std::uint64_t seed = 0) {
    PerturbationSpec s;
    s.seed = seed;
    if (text.empty() || text == "none") return s;
    if (text == "all") return all(seed);
    std::stringstream in(text);
    std::string tok;
    while (std::getline(in, tok, ',')) {
      if (tok == "blur") s.blur = true;
      else if (tok == "crop") s.crop = true;
      else if (tok == "jpeg") s.jpeg = true;
      else if (tok == "noise") s.noise = true;
      else throw ConfigError("unknown perturbation '" + tok + "'");
    }
    return s;
  }
  bool any() const { return blur || crop || jpeg || noise; }
  std::string describe() const {
    if (!any()) return "none";
    std::string s;
    for (auto [on, name] : {std::pair{blur, "blur"}, {crop, "crop"}, {jpeg, "jpeg"}, {noise, "noise"}})
      if (on) s += (s.empty() ? "" : ",") + std::string(name);
    return s;
  }
};

inline int sample_blur_kernel(Rng& rng) { return 3 + 2 * static_cast<int>(rng.uniform_int(0, 3)); }
inline double sample_crop_percent(Rng& rng) { return rng.uniform(5.0, 20.0); }
inline int sample_jpeg_quality(Rng& rng) { return static_cast<int>(rng.uniform_int(10, 75)); }
inline double sample_noise_variance(Rng& rng) { return rng.uniform(5.0, 20.0); }

// Removes `pct_y` / `pct_x` percent of each axis and resizes back.
inline Image crop_and_resize(const Image& img, double pct_y, double pct_x, Rng* anchor_rng = nullptr) {
  const int h = std::max(1, static_cast<int>(std::lround(img.height * (1.0 - pct_y / 100.0))));
  const int w = std::max(1, static_cast<int>(std::lround(img.width * (1.0 - pct_x / 100.0))));
  int top = (img.height - h) / 2, left = (img.width - w) / 2;
  if (anchor_rng) {
    top = static_cast<int>(anchor_rng->uniform_int(0, img.height - h));
    left = static_cast<int>(anchor_rng->uniform_int(0, img.width - w));
  }
  Image out = resize_bicubic(crop(img, top, left, h, w), img.height, img.width);
  clamp01(out);
  return out;
}

inline Image add_gaussian_noise(const Image& img, double variance255, Rng& rng) {
  Image out = img;
  const double sd = std::sqrt(variance255) / 255.0;
  for (auto& v : out.data) v = static_cast<float>(v + sd * rng.normal());
  clamp01(out);
  return out;
}

struct Perturbed {
  Image image;
  bool blur = false, crop = false, jpeg = false, noise = false;
};

// Each enabled perturbation fires independently with probability p, in the
// order blur, crop, jpeg, noise.
inline Perturbed apply_perturbations(const Image& img, const PerturbationSpec& spec, Rng& rng) {
  Perturbed out{img};
  if (spec.blur && rng.bernoulli(spec.p)) {
    out.image = gaussian_blur(out.image, sample_blur_kernel(rng));
    out.blur = true;
  }
  if (spec.crop && rng.bernoulli(spec.p)) {
    const double py = sample_crop_percent(rng), px = sample_crop_percent(rng);
    out.image = crop_and_resize(out.image, py, px, spec.random_anchor ? &rng : nullptr);
    out.crop = true;
  }
  if (spec.jpeg && rng.bernoulli(spec.p)) {
    out.image = jpeg_roundtrip(out.image, sample_jpeg_quality(rng));
    out.jpeg = true;
  }
  if (spec.noise && rng.bernoulli(spec.p)) {
    out.image = add_gaussian_noise(out.image, sample_noise_variance(rng), rng);
    out.noise = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

// Maps a batch of images to fake probabilities.
using Scorer = std::function<std::vector<double>(std::span<const Image>)>;

inline double logistic(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

template <class Vec>
std::vector<double> logistic_scores(const Vec& logits) {
  std::vector<double> s(static_cast<std::size_t>(logits.size()));
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = logistic(static_cast<double>(logits(static_cast<Eigen::Index>(i))));
  return s;
}

inline Scorer expert_scorer(const BackboneP<float>& bb, const ExpertP<float>& e, const ModelConfig& mc,
                            int threads = 1) {
  return [&bb, &e, mc, threads](std::span<const Image> imgs) {
    return logistic_scores(forward_expert<float>(bb, e, mc, imgs, nullptr, threads).logits);
  };
}

inline Scorer sef_scorer(const BackboneP<float>& bb, const SefP<float>& m, const ModelConfig& mc, int threads = 1) {
  return [&bb, &m, mc, threads](std::span<const Image> imgs) {
    return logistic_scores(forward_sef<float>(bb, m, mc, imgs, std::nullopt, nullptr, threads).logits);
  };
}

struct DomainResult {
  Confusion counts;
  double balanced_accuracy = 0.0;
};

struct EvalResult {
  std::map<std::string, DomainResult> domains;  // "vae", "gan"
  double threshold = kDecisionThreshold;
  std::string perturbations = "none";
  // Number of test images each perturbation was applied to.
  std::int64_t n_blur = 0, n_crop = 0, n_jpeg = 0, n_noise = 0;

  double mean() const {
    double s = 0.0;
    for (const auto& [_, d] : domains) s += d.balanced_accuracy;
    return domains.empty() ? 0.0 : s / static_cast<double>(domains.size());
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"threshold", threshold}, {"perturbations", perturbations},
                     {"applied", {{"blur", n_blur}, {"crop", n_crop}, {"jpeg", n_jpeg}, {"noise", n_noise}}}};
    for (const auto& [name, d] : domains)
      j["domains"][name] = {{"balanced_accuracy", d.balanced_accuracy},
                            {"tp", d.counts.tp},
                            {"tn", d.counts.tn},
                            {"fp", d.counts.fp},
                            {"fn", d.counts.fn}};
    return j;
  }
};

inline void check_disjoint(std::uint64_t train_begin, std::uint64_t train_end, const Dataset& test) {
  if (train_begin < train_end && test.seed_begin < test.seed_end && train_begin < test.seed_end &&
      test.seed_begin < train_end)
    throw ConfigError("test seeds [" + std::to_string(test.seed_begin) + ", " + std::to_string(test.seed_end) +
                      ") overlap training seeds [" + std::to_string(train_begin) + ", " + std::to_string(train_end) +
                      ")");
}

inline constexpr int kEvalChunk = 64;

// Center-crops every test image to `res`, perturbs it, and scores the real
// images against each fake domain.
inline EvalResult evaluate(const Scorer& scorer, const Dataset& test, int res, const PerturbationSpec& spec,
                           std::uint64_t train_seed_begin = 0, std::uint64_t train_seed_end = 0) {
  check_disjoint(train_seed_begin, train_seed_end, test);
  check_canvas(test, res);
  EvalResult r;
  r.perturbations = spec.describe();

  auto prepare = [&](int role) {
    std::vector<Image> imgs;
    imgs.reserve(test.entries.size());
    for (const auto& e : test.entries) {
      const Image& src = role == 0 ? e.real : role == 1 ? e.fake_vae : e.fake_gan;
      Image img = center_crop(src, res);
      if (spec.any()) {
        Rng rng(derive_seed(spec.seed, {e.seed, static_cast<std::uint64_t>(role)}));
        auto p = apply_perturbations(img, spec, rng);
        r.n_blur += p.blur;
        r.n_crop += p.crop;
        r.n_jpeg += p.jpeg;
        r.n_noise += p.noise;
        img = std::move(p.image);
      }
      imgs.push_back(std::move(img));
    }
    return imgs;
  };
  auto score = [&](const std::vector<Image>& imgs) {
    std::vector<double> s;
    for (std::size_t i = 0; i < imgs.size(); i += kEvalChunk) {
      const std::size_t n = std::min<std::size_t>(kEvalChunk, imgs.size() - i);
      const auto part = scorer(std::span<const Image>(imgs.data() + i, n));
      s.insert(s.end(), part.begin(), part.end());
    }
    return s;
  };

  const auto real_scores = score(prepare(0));
  for (int role : {1, 2}) {
    auto scores = real_scores;
    const auto fake_scores = score(prepare(role));
    scores.insert(scores.end(), fake_scores.begin(), fake_scores.end());
    std::vector<int> labels(real_scores.size(), 0);
    labels.resize(scores.size(), 1);
    DomainResult d;
    d.counts = confusion(scores, labels);
    d.balanced_accuracy = balanced_accuracy(scores, labels);
    r.domains[role == 1 ? "vae" : "gan"] = d;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Paradigm comparison

inline const std::vector<std::string>& paradigm_names() {
  static const std::vector<std::string> n{"expert_vae", "expert_gan", "mixed", "sef"};
  return n;
}

struct ParadigmCell {
  double vae = 0.0, gan = 0.0;
  double mean() const { return 0.5 * (vae + gan); }
};

struct ComparisonTable {
  std::vector<std::uint64_t> seeds;
  std::vector<std::map<std::string, ParadigmCell>> per_seed;  // index matches seeds
  std::vector<double> seconds;                               // wall time per seed

  static double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }
  // Per-metric medians: "vae", "gan" and "mean" of the named paradigm.
  double median_of(const std::string& paradigm, const std::string& what) const {
    std::vector<double> v;
    for (const auto& row : per_seed) {
      const auto& c = row.at(paradigm);
      v.push_back(what == "vae" ? c.vae : what == "gan" ? c.gan : c.mean());
    }
    return median(v);
  }

  std::string to_text() const {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(1);
    os << "seed        paradigm     vae     gan    mean\n";
    for (std::size_t i = 0; i < seeds.size(); ++i)
      for (const auto& p : paradigm_names()) {
        const auto& c = per_seed[i].at(p);
        os << std::left;
        os.width(12);
        os << seeds[i];
        os.width(11);
        os << p << std::right;
        os.width(7);
        os << c.vae;
        os.width(8);
        os << c.gan;
        os.width(8);
        os << c.mean() << "\n";
      }
    for (const auto& p : paradigm_names()) {
      os << std::left;
      os.width(12);
      os << "median";
      os.width(11);
      os << p << std::right;
      os.width(7);
      os << median_of(p, "vae");
      os.width(8);
      os << median_of(p, "gan");
      os.width(8);
      os << median_of(p, "mean") << "\n";
    }
    return os.str();
  }

  std::vector<nlohmann::json> records() const {
    std::vector<nlohmann::json> out;
    for (std::size_t i = 0; i < seeds.size(); ++i)
      for (const auto& p : paradigm_names()) {
        const auto& c = per_seed[i].at(p);
        out.push_back({{"seed", seeds[i]}, {"paradigm", p}, {"vae", c.vae}, {"gan", c.gan}, {"mean", c.mean()}});
      }
    for (const auto& p : paradigm_names())
      out.push_back({{"seed", "median"},
                     {"paradigm", p},
                     {"vae", median_of(p, "vae")},
                     {"gan", median_of(p, "gan")},
                     {"mean", median_of(p, "mean")}});
    return out;
  }
};

struct ComparisonHooks {
  std::function<void(std::uint64_t seed, const std::string& paradigm, const ParadigmCell&)> on_cell;
};

// Per seed: trains both experts and the mixed baseline for the same number
// of stage-1 iterations, fuses the experts, and evaluates all four. The seed
// drives both the training streams and the frozen backbone.
inline ComparisonTable run_paradigm_comparison(const TrainConfig& base, const Dataset& train, const Dataset& test,
                                               const std::vector<std::uint64_t>& seeds, int threads = 1,
                                               const ComparisonHooks& hooks = {}) {
  if (seeds.size() < 3) throw ConfigError("paradigm comparison needs at least 3 seeds");
  base.validate();
  check_disjoint(train.seed_begin, train.seed_end, test);
  ComparisonTable table;
  for (const auto seed : seeds) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainConfig cfg = base;
    cfg.seed = seed;
    cfg.backbone_seed = seed;
    const ModelConfig mc = cfg.model();
    const auto bb = init_backbone(mc);
    std::map<std::string, ParadigmCell> row;
    auto record = [&](const std::string& name, const Scorer& s) {
      const auto r = evaluate(s, test, mc.resolution, PerturbationSpec::none(), train.seed_begin, train.seed_end);
      ParadigmCell c{r.domains.at("vae").balanced_accuracy, r.domains.at("gan").balanced_accuracy};
      row[name] = c;
      if (hooks.on_cell) hooks.on_cell(seed, name, c);
    };
    const auto ev = train_expert(ArtifactDomain::VaeSim, cfg, train, bb, threads);
    record("expert_vae", expert_scorer(bb, ev.ckpt.params, mc, threads));
    const auto es = train_expert(ArtifactDomain::GanSim, cfg, train, bb, threads);
    record("expert_gan", expert_scorer(bb, es.ckpt.params, mc, threads));
    const auto mx = train_mixed_baseline(cfg, train, bb, threads);
    record("mixed", expert_scorer(bb, mx.ckpt.params, mc, threads));
    const auto fused = train_sef(ev.ckpt, es.ckpt, cfg, train, bb, threads);
    record("sef", sef_scorer(bb, fused.ckpt.params, mc, threads));
    table.seeds.push_back(seed);
    table.per_seed.push_back(std::move(row));
    table.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return table;
}

}  // namespace sef
