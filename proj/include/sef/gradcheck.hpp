#pragma once

// Finite-difference verification of the hand-written backward passes.
// Analytic gradients come from the float model; the reference is a central
// difference of the same loss evaluated in double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sef/forge.hpp"
#include "sef/loss.hpp"
#include "sef/model.hpp"
#include "sef/nn.hpp"
#include "sef/rng.hpp"
#include "sef/train.hpp"

namespace sef {

struct GradCheckOptions {
  double step = 1e-3;
  int min_coords = 200;
  // |a - n| / max(|a|, |n|, rel_floor); gradients below the floor are
  // compared in absolute terms.
  double rel_floor = 1e-3;
  int batch = 4;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::map<std::string, double> by_layer;  // layer type -> max relative error
  std::map<std::string, int> coords_by_layer;
  int coords = 0;
  bool frozen_zero = true;
  std::vector<std::string> nonzero_frozen;  // offending tensors, if any

  void add(const std::string& layer, double err) {
    max_rel_error = std::max(max_rel_error, err);
    by_layer[layer] = std::max(by_layer[layer], err);
    ++coords_by_layer[layer];
    ++coords;
  }
};

inline double relative_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Layer type of a parameter tensor, from its name.
inline std::string layer_type(const std::string& name) {
  auto has = [&](const char* s) { return name.find(s) != std::string::npos; };
  if (has("lora.")) return "lora";
  if (has("gate.fusion")) return "fusion_head";
  if (has("gate.fc")) return "gate";
  if (has("head")) return "head";
  if (has("embed")) return "patch_embed";
  if (name == "pos") return "position";
  if (has("ln")) return "layernorm";
  if (has(".fc1") || has(".fc2")) return "mlp";
  if (has(".q.") || has(".k.") || has(".v.") || has(".o.")) return "attention";
  return "other";
}

// Small model for checking: 32x32 input, 16 tokens, two blocks.
inline ModelConfig gradcheck_model(std::uint64_t seed) {
  ModelConfig m;
  m.resolution = 32;
  m.patch = 8;
  m.dim = 16;
  m.heads = 2;
  m.blocks = 2;
  m.mlp_hidden = 32;
  m.lora_rank = 4;
  m.lora_alpha = 2.0;
  m.gate_hidden = 8;
  m.backbone_seed = seed;
  return m;
}

namespace detail {

// Adapters start with B = 0; give them values so every path carries gradient.
inline void randomize_lora(LoraSetP<float>& l, Rng& rng) {
  for (auto& b : l.blocks)
    for (auto* p : {&b.q, &b.v}) p->b = nn::randn<float>(rng, p->b.rows(), p->b.cols(), 0.3);
}

template <class T>
double expert_loss(const BackboneP<T>& bb, const ExpertP<T>& e, const ModelConfig& mc, const std::vector<Image>& imgs,
                   const std::vector<int>& labels) {
  const auto z = forward_expert<T>(bb, e, mc, imgs).logits;
  std::vector<double> zd(z.data(), z.data() + z.size());
  return balanced_bce(zd, labels);
}

template <class T>
double sef_loss(const BackboneP<T>& bb, const SefP<T>& m, const ModelConfig& mc, const std::vector<Image>& imgs,
                const std::vector<int>& labels) {
  const auto z = forward_sef<T>(bb, m, mc, imgs).logits;
  std::vector<double> zd(z.data(), z.data() + z.size());
  return balanced_bce(zd, labels);
}

// Compares analytic float gradients against central differences for a
// stratified sample of coordinates of the tensors selected by `use`.
template <class PD, class LossFn, class Use>
void compare(PD& params_d, const std::vector<std::pair<std::string, Mat<float>*>>& grads, LossFn&& loss,
             Use&& use, const GradCheckOptions& opt, int per_tensor, Rng& rng, GradCheckReport& rep,
             const std::string& prefix) {
  auto pd = nn::tensors(params_d);
  for (std::size_t t = 0; t < pd.size(); ++t) {
    const std::string full = prefix + pd[t].first;
    if (!use(full)) continue;
    Mat<double>& p = *pd[t].second;
    const Mat<float>& g = *grads[t].second;
    for (int s = 0; s < per_tensor; ++s) {
      const auto i = static_cast<Eigen::Index>(rng.uniform_int(0, p.size() - 1));
      const double orig = p.data()[i];
      p.data()[i] = orig + opt.step;
      const double lp = loss();
      p.data()[i] = orig - opt.step;
      const double lm = loss();
      p.data()[i] = orig;
      const double num = (lp - lm) / (2.0 * opt.step);
      rep.add(layer_type(full), relative_error(static_cast<double>(g.data()[i]), num, opt.rel_floor));
    }
  }
}

}  // namespace detail

// Linear layer with a LoRA adapter against loss sum(y .* R).
inline double gradient_check_linear(std::uint64_t seed, const GradCheckOptions& opt = {}) {
  Rng rng(derive_seed(seed, {0x11AE}));
  auto x = nn::randn<float>(rng, 5, 7, 1.0);
  auto p = nn::LinearP<float>::init(rng, 7, 3);
  p.b = nn::randn<float>(rng, 1, 3, 0.5);
  auto l = nn::LoraP<float>::init(rng, 7, 3, 2);
  l.b = nn::randn<float>(rng, 3, 2, 0.5);
  const auto r = nn::randn<float>(rng, 5, 3, 1.0);
  const float scale = 0.5f;

  Mat<float> u;
  const auto y = nn::linear_fwd<float>(x, p, &l, scale, &u);
  (void)y;
  nn::LinearP<float> g{Mat<float>::Zero(3, 7), Mat<float>::Zero(1, 3)};
  nn::LoraP<float> lg{Mat<float>::Zero(2, 7), Mat<float>::Zero(3, 2)};
  nn::linear_bwd<float>(r, x, p, &g, &l, scale, &u, &lg, false);

  const Mat<double> xd = x.cast<double>(), rd = r.cast<double>();
  auto pd = nn::cast_params<nn::LinearP<double>>(p);
  auto ld = nn::cast_params<nn::LoraP<double>>(l);
  auto loss = [&] {
    const auto yd = nn::linear_fwd<double>(xd, pd, &ld, static_cast<double>(scale), nullptr);
    return (yd.array() * rd.array()).sum();
  };
  double worst = 0.0;
  auto check = [&](Mat<double>& pm, const Mat<float>& gm) {
    for (Eigen::Index i = 0; i < pm.size(); ++i) {
      const double orig = pm.data()[i];
      pm.data()[i] = orig + opt.step;
      const double lp = loss();
      pm.data()[i] = orig - opt.step;
      const double lm = loss();
      pm.data()[i] = orig;
      worst = std::max(worst, relative_error(gm.data()[i], (lp - lm) / (2.0 * opt.step), opt.rel_floor));
    }
  };
  check(pd.w, g.w);
  check(pd.b, g.b);
  check(ld.a, lg.a);
  check(ld.b, lg.b);
  return worst;
}

// Full expert (backbone, adapters, head) and the fused model (gate, fusion
// head, unfrozen adapters) under the balanced loss. Also confirms that
// stage-2 frozen tensors receive exactly zero gradient.
inline GradCheckReport gradient_check(std::uint64_t seed, const GradCheckOptions& opt = {}) {
  const ModelConfig mc = gradcheck_model(seed);
  Rng rng(derive_seed(seed, {0x6C4E}));
  const auto bb = init_backbone<float>(mc);
  auto ev = init_expert<float>(mc, seed);
  auto es = init_expert<float>(mc, seed + 1);
  detail::randomize_lora(ev.lora, rng);
  detail::randomize_lora(es.lora, rng);
  SefP<float> m{ev, es, init_gate<float>(mc, seed)};
  m.gate.fc2.w = nn::randn<float>(rng, 1, mc.gate_hidden, 1.0);

  std::vector<Image> imgs;
  std::vector<int> labels;
  for (int i = 0; i < opt.batch; ++i) {
    const auto real = quantize8(gen_procedural_real(derive_seed(seed, {0x1A6, static_cast<std::uint64_t>(i)}), 32, 32));
    imgs.push_back(i % 2 ? quantize8(simulate_artifact(i % 4 == 1 ? ArtifactDomain::VaeSim : ArtifactDomain::GanSim,
                                                       real))
                         : real);
    labels.push_back(i % 2);
  }

  GradCheckReport rep;

  // Expert path, every backbone tensor included.
  {
    FeatureCache<float> cache;
    const auto out = forward_expert<float>(bb, ev, mc, imgs, &cache);
    double loss = 0.0;
    const auto dz = detail::balanced_dlogits(out.logits, labels, 1.0, loss);
    auto gbb = nn::zeros_like_params(bb);
    auto ge = nn::zeros_like_params(ev);
    expert_bwd<float>(dz, bb, ev, mc, cache, out.features, &ge, &gbb, 0);

    auto bbd = nn::cast_params<BackboneP<double>>(bb);
    auto evd = nn::cast_params<ExpertP<double>>(ev);
    auto loss_d = [&] { return detail::expert_loss<double>(bbd, evd, mc, imgs, labels); };
    const auto n_tensors = nn::tensors(gbb).size() + nn::tensors(ge).size();
    const int per = std::max(2, static_cast<int>((opt.min_coords * 2 / 3 + n_tensors - 1) / n_tensors));
    auto all = [](const std::string&) { return true; };
    detail::compare(bbd, nn::tensors(gbb), loss_d, all, opt, per, rng, rep, "");
    detail::compare(evd, nn::tensors(ge), loss_d, all, opt, per, rng, rep, "");
  }

  // Fused path with only the last block's adapters unfrozen.
  {
    const int lora_from = mc.blocks - 1;
    SefCache<float> cache;
    const auto out = forward_sef<float>(bb, m, mc, imgs, std::nullopt, &cache);
    double loss = 0.0;
    const auto dz = detail::balanced_dlogits(out.logits, labels, 1.0, loss);
    auto g = nn::zeros_like_params(m);
    sef_bwd<float>(dz, bb, m, mc, cache, &g, lora_from, true);

    const std::string trainable_lora = "lora.blocks." + std::to_string(lora_from) + ".";
    auto trainable = [&](const std::string& name) {
      return name.rfind("gate.", 0) == 0 || name.find(trainable_lora) != std::string::npos;
    };
    for (auto& [name, t] : nn::tensors(g))
      if (!trainable(name) && !t->isZero(0.0)) {
        rep.frozen_zero = false;
        rep.nonzero_frozen.push_back(name);
      }

    const auto bbd = nn::cast_params<BackboneP<double>>(bb);
    auto md = nn::cast_params<SefP<double>>(m);
    auto loss_d = [&] { return detail::sef_loss<double>(bbd, md, mc, imgs, labels); };
    std::size_t n_tensors = 0;
    for (auto& [name, _] : nn::tensors(g)) n_tensors += trainable(name);
    const int per = std::max(2, static_cast<int>((opt.min_coords / 3 + n_tensors - 1) / n_tensors));
    detail::compare(md, nn::tensors(g), loss_d, trainable, opt, per, rng, rep, "");
  }
  return rep;
}

}  // namespace sef
