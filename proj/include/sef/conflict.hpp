#pragma once

// Gradient-conflict diagnostics for mixed-source training: per-step cosine
// between the gradients of the VAE-fake loss and the GAN-fake loss, resolved
// per transformer block, and a first-order check of how a mixed step moves
// the VAE loss.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sef/errors.hpp"
#include "sef/forge.hpp"
#include "sef/loss.hpp"
#include "sef/model.hpp"
#include "sef/nn.hpp"
#include "sef/rng.hpp"
#include "sef/train.hpp"

namespace sef {

inline constexpr double kCosineNormFloor = 1e-12;

inline double dot(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw InvalidInput("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return s;
}

// Returns 0 when either vector is (numerically) zero.
inline double cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw InvalidInput("cosine: length mismatch");
  const double nu = std::sqrt(dot(u, u)), nv = std::sqrt(dot(v, v));
  if (nu < kCosineNormFloor || nv < kCosineNormFloor) return 0.0;
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

// Flattening order of the trainable set: block LoRA tensors block by block,
// then the head when included. One segment per block plus one for the head.
struct GradLayout {
  struct Segment {
    std::string name;
    std::size_t begin = 0, end = 0;
  };
  std::vector<Segment> segments;
  std::size_t size() const { return segments.empty() ? 0 : segments.back().end; }
};

template <class T>
GradLayout grad_layout(const ExpertP<T>& e, bool include_head) {
  GradLayout lay;
  std::size_t off = 0;
  for (std::size_t b = 0; b < e.lora.blocks.size(); ++b) {
    const std::size_t n = nn::param_count(e.lora.blocks[b]);
    lay.segments.push_back({"block" + std::to_string(b), off, off + n});
    off += n;
  }
  if (include_head) {
    const std::size_t n = nn::param_count(e.head);
    lay.segments.push_back({"head", off, off + n});
  }
  return lay;
}

template <class T>
std::vector<double> flatten_grad(const ExpertP<T>& g, bool include_head) {
  std::vector<double> out;
  auto push = [&](auto& p) {
    for (auto& [_, m] : nn::tensors(p))
      for (Eigen::Index i = 0; i < m->size(); ++i) out.push_back(static_cast<double>(m->data()[i]));
  };
  auto copy = g;
  for (auto& b : copy.lora.blocks) push(b);
  if (include_head) push(copy.head);
  return out;
}

// One probe batch: `pairs` reals with their VAE and GAN fakes under shared crops.
struct SourceBatch {
  std::vector<Image> real, vae, gan;
};

inline SourceBatch make_source_batch(const Dataset& ds, int pairs, int res, EntrySampler& sampler, Rng& rng) {
  if (pairs < 1) throw InvalidInput("make_source_batch: need at least one pair");
  check_canvas(ds, res);
  SourceBatch b;
  for (int i = 0; i < pairs; ++i) {
    const auto& e = ds.entries[sampler.next()];
    const auto off = random_offset(ds, res, rng);
    b.real.push_back(crop(e.real, off.top, off.left, res, res));
    b.vae.push_back(crop(e.fake_vae, off.top, off.left, res, res));
    b.gan.push_back(crop(e.fake_gan, off.top, off.left, res, res));
  }
  return b;
}

namespace detail {

// Balanced BCE of (reals, fakes) and, if `grad` is given, its gradient.
template <class T>
double source_loss(const BackboneP<T>& bb, const ExpertP<T>& e, const ModelConfig& cfg,
                   const std::vector<Image>& real, const std::vector<Image>& fake, ExpertP<T>* grad, int threads) {
  std::vector<Image> imgs = real;
  imgs.insert(imgs.end(), fake.begin(), fake.end());
  std::vector<int> labels(real.size(), 0);
  labels.resize(imgs.size(), 1);
  FeatureCache<T> cache;
  const auto out = forward_expert<T>(bb, e, cfg, imgs, &cache, threads);
  double loss = 0.0;
  const auto dz = balanced_dlogits(out.logits, labels, 1.0, loss);
  if (grad) {
    nn::set_zero(*grad);
    expert_bwd<T>(dz, bb, e, cfg, cache, out.features, grad, nullptr, 0, threads);
  }
  return loss;
}

}  // namespace detail

struct SourceGradients {
  GradLayout layout;
  std::vector<double> g_vae, g_gan;
  double loss_vae = 0.0, loss_gan = 0.0;
};

// Gradients of the two single-source losses that share one real batch.
// Parameters are not modified. The unflattened gradients are returned
// through `gv`/`gs` when given.
template <class T>
SourceGradients per_source_gradients(const BackboneP<T>& bb, const ExpertP<T>& model, const ModelConfig& cfg,
                                     const SourceBatch& b, bool include_head, int threads = 1,
                                     ExpertP<T>* gv = nullptr, ExpertP<T>* gs = nullptr) {
  ExpertP<T> lv = nn::zeros_like_params(model), ls = nn::zeros_like_params(model);
  if (!gv) gv = &lv;
  if (!gs) gs = &ls;
  SourceGradients out;
  out.loss_vae = detail::source_loss(bb, model, cfg, b.real, b.vae, gv, threads);
  out.loss_gan = detail::source_loss(bb, model, cfg, b.real, b.gan, gs, threads);
  out.layout = grad_layout(model, include_head);
  out.g_vae = flatten_grad(*gv, include_head);
  out.g_gan = flatten_grad(*gs, include_head);
  if (out.g_vae.size() != out.g_gan.size() || out.g_vae.size() != out.layout.size())
    throw InternalError("per_source_gradients: trainable sets differ between sources");
  return out;
}

// ---------------------------------------------------------------------------
// Probe

struct ConflictStep {
  int iter = 0;
  double cosine = 0.0;
  double loss_vae = 0.0, loss_gan = 0.0;
  // Per segment (blocks, then head if included).
  std::vector<double> seg_cosine, seg_dot, seg_norm_vae, seg_norm_gan;

  // Total cosine rebuilt from the per-segment pieces.
  double cosine_from_segments() const {
    double d = 0.0, a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < seg_dot.size(); ++i) {
      d += seg_dot[i];
      a += seg_norm_vae[i] * seg_norm_vae[i];
      b += seg_norm_gan[i] * seg_norm_gan[i];
    }
    const double na = std::sqrt(a), nb = std::sqrt(b);
    return na < kCosineNormFloor || nb < kCosineNormFloor ? 0.0 : d / (na * nb);
  }

  nlohmann::json to_json() const {
    return {{"iter", iter},         {"cosine", cosine},         {"loss_vae", loss_vae},
            {"loss_gan", loss_gan}, {"seg_cosine", seg_cosine}, {"seg_dot", seg_dot},
            {"seg_norm_vae", seg_norm_vae}, {"seg_norm_gan", seg_norm_gan}};
  }
};

struct ConflictReport {
  std::uint64_t seed = 0;
  int iters = 0;
  int batch = 0;
  bool include_head = true;
  std::vector<std::string> segments;
  std::vector<ConflictStep> steps;

  int num_blocks() const { return static_cast<int>(segments.size()) - (include_head ? 1 : 0); }
  std::vector<double> cosines() const {
    std::vector<double> c;
    for (const auto& s : steps) c.push_back(s.cosine);
    return c;
  }
  double conflict_fraction() const {
    if (steps.empty()) return 0.0;
    int n = 0;
    for (const auto& s : steps) n += s.cosine < 0.0;
    return static_cast<double>(n) / static_cast<double>(steps.size());
  }
  double mean() const {
    double s = 0.0;
    for (const auto& x : steps) s += x.cosine;
    return steps.empty() ? 0.0 : s / static_cast<double>(steps.size());
  }
  double mean_abs() const {
    double s = 0.0;
    for (const auto& x : steps) s += std::abs(x.cosine);
    return steps.empty() ? 0.0 : s / static_cast<double>(steps.size());
  }
  double stddev() const {
    if (steps.size() < 2) return 0.0;
    const double m = mean();
    double s = 0.0;
    for (const auto& x : steps) s += (x.cosine - m) * (x.cosine - m);
    return std::sqrt(s / static_cast<double>(steps.size() - 1));
  }
  // Mean cosine of one segment over all steps.
  double segment_mean(std::size_t seg) const {
    double s = 0.0;
    for (const auto& x : steps) s += x.seg_cosine.at(seg);
    return steps.empty() ? 0.0 : s / static_cast<double>(steps.size());
  }

  nlohmann::json summary_json() const {
    return {{"seed", seed},
            {"iters", iters},
            {"batch", batch},
            {"include_head", include_head},
            {"mean", mean()},
            {"std", stddev()},
            {"mean_abs", mean_abs()},
            {"conflict_fraction", conflict_fraction()}};
  }
};

// Mixed training on lambda * L_vae + (1 - lambda) * L_gan from a fresh model;
// cosines are taken at the current parameters, before each update.
inline ConflictReport run_conflict_probe(const TrainConfig& cfg, const Dataset& ds, const BackboneP<float>& bb,
                                         int threads = 1) {
  cfg.validate();
  const ModelConfig mc = cfg.model();
  check_canvas(ds, mc.resolution);
  const int pairs = cfg.conflict_batch / 2;
  if (ds.entries.size() < static_cast<std::size_t>(pairs)) throw InvalidInput("run_conflict_probe: insufficient data");

  ExpertP<float> model = init_expert<float>(mc, cfg.seed);
  ExpertP<float> grad = nn::zeros_like_params(model);
  Adam::Group group;
  {
    auto tp = nn::tensors(model), tg = nn::tensors(grad);
    for (std::size_t i = 0; i < tp.size(); ++i) group.tensors.emplace_back(tp[i].second, tg[i].second);
  }
  Adam opt({group});
  Rng rng(derive_seed(cfg.seed, {0xC0F1}));
  EntrySampler sampler(ds.entries.size(), rng);

  ConflictReport rep;
  rep.seed = cfg.seed;
  rep.iters = cfg.conflict_iters;
  rep.batch = cfg.conflict_batch;
  rep.include_head = cfg.conflict_include_head;
  for (const auto& s : grad_layout(model, rep.include_head).segments) rep.segments.push_back(s.name);

  const double lam = cfg.mix_lambda;
  for (int it = 0; it < cfg.conflict_iters; ++it) {
    const auto b = make_source_batch(ds, pairs, mc.resolution, sampler, rng);
    ExpertP<float> gv = nn::zeros_like_params(model), gs = nn::zeros_like_params(model);
    const auto sg = per_source_gradients<float>(bb, model, mc, b, rep.include_head, threads, &gv, &gs);
    ConflictStep st;
    st.iter = it;
    st.loss_vae = sg.loss_vae;
    st.loss_gan = sg.loss_gan;
    st.cosine = cosine(sg.g_vae, sg.g_gan);
    for (const auto& seg : sg.layout.segments) {
      const std::span<const double> u(sg.g_vae.data() + seg.begin, seg.end - seg.begin);
      const std::span<const double> v(sg.g_gan.data() + seg.begin, seg.end - seg.begin);
      st.seg_cosine.push_back(cosine(u, v));
      st.seg_dot.push_back(dot(u, v));
      st.seg_norm_vae.push_back(std::sqrt(dot(u, u)));
      st.seg_norm_gan.push_back(std::sqrt(dot(v, v)));
    }
    detail::check_loss(lam * sg.loss_vae + (1.0 - lam) * sg.loss_gan, it, "conflict probe");
    rep.steps.push_back(std::move(st));

    // The update uses the full mixed gradient (head included even when the
    // probe excludes it from the cosine).
    auto tg = nn::tensors(grad), tv = nn::tensors(gv), ts = nn::tensors(gs);
    for (std::size_t i = 0; i < tg.size(); ++i)
      *tg[i].second = static_cast<float>(lam) * *tv[i].second + static_cast<float>(1.0 - lam) * *ts[i].second;
    opt.step(cosine_lr(it, cfg.conflict_iters, cfg.lr));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// First-order check: predicted vs measured change of L_vae under one plain
// gradient step on the mixed loss. Runs in double precision.

struct TaylorStep {
  double predicted = 0.0;
  double measured = 0.0;
  double loss_vae = 0.0;
  double grad_norm_sq = 0.0;  // ||g_vae||^2
  double grad_inner = 0.0;    // <g_vae, g_gan>
};

struct TaylorDiagnostic {
  double eta = 0.0;
  double lambda = 0.0;
  std::vector<TaylorStep> steps;

  static int sign(double x) { return (x > 0.0) - (x < 0.0); }
  double sign_agreement() const {
    if (steps.empty()) return 0.0;
    int n = 0;
    for (const auto& s : steps) n += sign(s.predicted) == sign(s.measured);
    return static_cast<double>(n) / static_cast<double>(steps.size());
  }
  double correlation() const {
    const auto n = static_cast<double>(steps.size());
    if (steps.size() < 2) return 0.0;
    double mp = 0.0, mm = 0.0;
    for (const auto& s : steps) {
      mp += s.predicted;
      mm += s.measured;
    }
    mp /= n;
    mm /= n;
    double cpm = 0.0, cpp = 0.0, cmm = 0.0;
    for (const auto& s : steps) {
      cpm += (s.predicted - mp) * (s.measured - mm);
      cpp += (s.predicted - mp) * (s.predicted - mp);
      cmm += (s.measured - mm) * (s.measured - mm);
    }
    return cpp <= 0.0 || cmm <= 0.0 ? 0.0 : cpm / std::sqrt(cpp * cmm);
  }
  nlohmann::json summary_json() const {
    return {{"eta", eta},
            {"lambda", lambda},
            {"steps", steps.size()},
            {"sign_agreement", sign_agreement()},
            {"correlation", correlation()}};
  }
};

inline TaylorDiagnostic taylor_diagnostic(const TrainConfig& cfg, const Dataset& ds, const BackboneP<float>& bb_f,
                                          int steps, double eta, int threads = 1) {
  cfg.validate();
  if (steps < 1) throw InvalidInput("taylor_diagnostic: steps must be >= 1");
  if (!(eta >= 0.0)) throw InvalidInput("taylor_diagnostic: eta must be >= 0");
  const ModelConfig mc = cfg.model();
  check_canvas(ds, mc.resolution);
  const auto bb = nn::cast_params<BackboneP<double>>(bb_f);
  ExpertP<double> model = init_expert<double>(mc, cfg.seed);
  Rng rng(derive_seed(cfg.seed, {0x7A1E}));
  EntrySampler sampler(ds.entries.size(), rng);

  TaylorDiagnostic diag;
  diag.eta = eta;
  diag.lambda = cfg.mix_lambda;
  const double lam = cfg.mix_lambda;
  for (int t = 0; t < steps; ++t) {
    const auto b = make_source_batch(ds, cfg.conflict_batch / 2, mc.resolution, sampler, rng);
    ExpertP<double> gv = nn::zeros_like_params(model), gs = nn::zeros_like_params(model);
    TaylorStep st;
    st.loss_vae = detail::source_loss(bb, model, mc, b.real, b.vae, &gv, threads);
    detail::source_loss(bb, model, mc, b.real, b.gan, &gs, threads);
    const auto fv = flatten_grad(gv, true), fs = flatten_grad(gs, true);
    st.grad_norm_sq = dot(fv, fv);
    st.grad_inner = dot(fv, fs);
    st.predicted = -eta * lam * st.grad_norm_sq - eta * (1.0 - lam) * st.grad_inner;

    auto tp = nn::tensors(model), tv = nn::tensors(gv), ts = nn::tensors(gs);
    for (std::size_t i = 0; i < tp.size(); ++i)
      *tp[i].second -= eta * (lam * *tv[i].second + (1.0 - lam) * *ts[i].second);
    st.measured = detail::source_loss<double>(bb, model, mc, b.real, b.vae, nullptr, threads) - st.loss_vae;
    diag.steps.push_back(st);
  }
  return diag;
}

}  // namespace sef
