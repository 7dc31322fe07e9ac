// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
// Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sef/checkpoint.hpp"
#include "sef/conflict.hpp"
#include "sef/evalbench.hpp"
#include "sef/forge.hpp"
#include "sef/gradcheck.hpp"
#include "sef/metrics.hpp"
#include "sef/model.hpp"
#include "sef/train.hpp"

using namespace sef;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string f(double v, int prec = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool bitwise_equal(const float* a, const float* b, std::size_t n) { return std::memcmp(a, b, n * sizeof(float)) == 0; }

// Training set shared by the comparison and conflict criteria.
const Dataset& train_set() {
  static const Dataset ds = generate_dataset(1500, 72, 72, 0, 0.5);
  return ds;
}

// --- 1 -----------------------------------------------------------------------

Outcome gradient_contract() {
  const auto t0 = Clock::now();
  const auto rep = gradient_check(0);
  const double secs = seconds_since(t0);
  bool all_layers = true;
  std::string missing;
  for (const char* layer : {"patch_embed", "position", "layernorm", "attention", "mlp", "lora", "head", "gate",
                            "fusion_head"})
    if (!rep.coords_by_layer.count(layer)) {
      all_layers = false;
      missing += std::string(" ") + layer;
    }
  std::string detail = "max rel err " + std::to_string(rep.max_rel_error) + " over " + std::to_string(rep.coords) +
                       " coords, frozen grads zero: " + (rep.frozen_zero ? "yes" : "no") + ", " + f(secs, 1) + " s";
  if (!missing.empty()) detail += ", missing layers:" + missing;
  return {rep.max_rel_error < 1e-3 && rep.frozen_zero && all_layers && secs < 60.0, detail};
}

// --- 2 -----------------------------------------------------------------------

Outcome lora_identity() {
  double worst = 0.0;
  for (std::uint64_t seed : {0, 1, 2}) {
    ModelConfig mc;
    mc.backbone_seed = seed;
    const auto bb = init_backbone(mc);
    const auto e = init_expert(mc, seed + 100);
    const auto ds = generate_dataset(8, 64, 64, 5000 + seed * 10, 0.0);
    std::vector<Image> imgs;
    for (const auto& x : ds.entries) {
      imgs.push_back(x.real);
      imgs.push_back(x.fake_vae);
      imgs.push_back(x.fake_gan);
    }
    const auto with = forward_expert<float>(bb, &e.lora, e.head, mc, imgs).logits;
    const auto without = forward_expert<float>(bb, nullptr, e.head, mc, imgs).logits;
    worst = std::max(worst, static_cast<double>((with - without).cwiseAbs().maxCoeff()));
  }
  return {worst <= 1e-6, "max |logit change| " + std::to_string(worst) + " over 72 images, 3 seeds"};
}

// --- 3 -----------------------------------------------------------------------

Outcome mask_composite() {
  int bad = 0;
  for (std::uint64_t t = 0; t < 100; ++t) {
    const auto real = gen_procedural_real(700 + t, 64, 64);
    const auto fake = simulate_artifact(t % 2 ? ArtifactDomain::GanSim : ArtifactDomain::VaeSim, real);
    MaskSpec spec;
    spec.kind = t % 3 ? MaskKind::Foreground : MaskKind::Background;
    spec.seed = t;
    const auto mask = gen_mask(spec, 64, 64);
    const auto comp = apply_mask_aug(fake, real, mask);
    for (std::size_t i = 0; i < mask.bits.size(); ++i) {
      const auto& src = mask.bits[i] ? fake : real;
      if (!bitwise_equal(&comp.data[i * 3], &src.data[i * 3], 3)) ++bad;
    }
  }
  const auto real = gen_procedural_real(1, 64, 64);
  const auto fake = simulate_artifact(ArtifactDomain::GanSim, real);
  const bool ones = apply_mask_aug(fake, real, BinaryMask(64, 64, 1)) == fake;
  const bool zeros = apply_mask_aug(fake, real, BinaryMask(64, 64, 0)) == real;
  return {bad == 0 && ones && zeros, std::to_string(bad) + " mismatching pixels in 100 triples; all-ones mask " +
                                         (ones ? "gives" : "does not give") + " the fake, all-zeros mask " +
                                         (zeros ? "gives" : "does not give") + " the real"};
}

// --- 4 -----------------------------------------------------------------------

Outcome fusion_betweenness() {
  Rng rng(4);
  int outside = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto f1 = nn::randn<float>(rng, 1, 64, 2.0), f2 = nn::randn<float>(rng, 1, 64, 2.0);
    const float w = static_cast<float>(rng.uniform(0.0, 1.0));
    const auto h = fuse<float>(f1, f2, w);
    for (int j = 0; j < 64; ++j) {
      const float lo = std::min(f1(0, j), f2(0, j)), hi = std::max(f1(0, j), f2(0, j));
      // float rounding of (1-w)*a + w*b may step one ulp outside.
      if (h(0, j) < std::nextafter(lo, -1e30f) || h(0, j) > std::nextafter(hi, 1e30f)) ++outside;
    }
  }
  ModelConfig mc;
  const auto g = init_gate(mc, 1);
  int w_bad = 0, sum_bad = 0;
  for (float scale : {0.1f, 1.0f, 10.0f, 1e3f, 1e6f}) {
    const Mat<float> a = nn::randn<float>(rng, 200, mc.dim, scale), b = nn::randn<float>(rng, 200, mc.dim, scale);
    const auto w = gate_fwd(g, a, b);
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      w_bad += !(w(i) > 0.0f && w(i) < 1.0f);
      sum_bad += (1.0f - w(i)) + w(i) != 1.0f;
    }
  }
  return {outside == 0 && w_bad == 0 && sum_bad == 0,
          std::to_string(outside) + " coordinates outside [min,max] in 1000 draws; " + std::to_string(w_bad) +
              " gate outputs outside (0,1); " + std::to_string(sum_bad) + " with (1-w)+w != 1"};
}

// --- 5 -----------------------------------------------------------------------

Outcome radar_arithmetic() {
  MetricProfile r, v, g;
  r.mse = 0.0;
  v.mse = 0.0043;
  g.mse = 0.0085;
  const double alpha = 1.2;
  const auto [sv, sg] = radar_scores(r, v, g, alpha);
  const bool close = std::abs(sv.score[0] - 0.5784) < 1e-3 && std::abs(sg.score[0] - 0.1667) < 1e-3;
  const bool exact = sg.score[0] == 1.0 - 1.0 / alpha;
  return {close && exact, "MSE scores vae " + f(sv.score[0]) + ", gan " + f(sg.score[0]) + "; worst equals 1-1/alpha " +
                              (exact ? "exactly" : "not exactly")};
}

// --- 6 -----------------------------------------------------------------------

Outcome metric_orderings() {
  const auto t0 = Clock::now();
  const auto ds = generate_dataset(1000, 64, 64, 0, 0.0);
  double mse_v = 0, mse_g = 0, sh_r = 0, sh_v = 0, sh_g = 0, hf_r = 0, hf_v = 0, hf_g = 0, sat_r = 0, sat_g = 0;
  for (const auto& e : ds.entries) {
    mse_v += mse(e.fake_vae, e.real);
    mse_g += mse(e.fake_gan, e.real);
    sh_r += sharpness(e.real);
    sh_v += sharpness(e.fake_vae);
    sh_g += sharpness(e.fake_gan);
    hf_r += hf_ratio(e.real);
    hf_v += hf_ratio(e.fake_vae);
    hf_g += hf_ratio(e.fake_gan);
    sat_r += saturation_mean(e.real);
    sat_g += saturation_mean(e.fake_gan);
  }
  const double n = static_cast<double>(ds.entries.size());
  for (double* x : {&mse_v, &mse_g, &sh_r, &sh_v, &sh_g, &hf_r, &hf_v, &hf_g, &sat_r, &sat_g}) *x /= n;
  const double secs = seconds_since(t0);
  const bool ok = mse_v < mse_g && sh_r > sh_v && sh_r > sh_g && hf_r > hf_v && hf_r > hf_g && sat_g < sat_r &&
                  secs < 300.0;
  return {ok, "MSE vae " + f(mse_v, 5) + " < gan " + f(mse_g, 5) + "; sharpness real " + f(sh_r) + " vs vae " +
                  f(sh_v) + ", gan " + f(sh_g) + "; HF real " + f(hf_r) + " vs vae " + f(hf_v) + ", gan " + f(hf_g) +
                  "; saturation gan " + f(sat_g) + " < real " + f(sat_r) + "; " + f(secs, 1) + " s"};
}

// --- 7 -----------------------------------------------------------------------

Outcome perturbation_supports() {
  Rng rng(7);
  const std::set<int> kernels{3, 5, 7, 9};
  int bad = 0;
  for (int i = 0; i < 10000; ++i) {
    bad += !kernels.count(sample_blur_kernel(rng));
    const double c = sample_crop_percent(rng);
    bad += !(c >= 5.0 && c <= 20.0);
    const int q = sample_jpeg_quality(rng);
    bad += !(q >= 10 && q <= 75);
    const double v = sample_noise_variance(rng);
    bad += !(v >= 5.0 && v <= 20.0);
  }
  Image img(16, 16, 3, 0.4f);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) img.at(y, x, 0) = static_cast<float>((x * y) % 16) / 15.0f;
  const auto spec = PerturbationSpec::all(1);
  Rng arng(8);
  int n[4] = {0, 0, 0, 0};
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto p = apply_perturbations(img, spec, arng);
    n[0] += p.blur;
    n[1] += p.crop;
    n[2] += p.jpeg;
    n[3] += p.noise;
  }
  bool rates = true;
  std::string detail = std::to_string(bad) + " out-of-support draws; application rates";
  for (int k : n) {
    const double r = k / static_cast<double>(draws);
    rates = rates && r >= 0.48 && r <= 0.52;
    detail += " " + f(r, 3);
  }
  return {bad == 0 && rates, detail};
}

// --- 8 -----------------------------------------------------------------------

TrainConfig comparison_config() {
  TrainConfig c;
  c.stage1_iters = 150;
  c.lr = 3e-3;
  c.grad_accum = 2;
  c.stage2_iters = 400;
  c.stage2_lr = 3e-2;
  c.gamma = 0.3;
  return c;
}

Outcome paradigm_pattern() {
  const auto t0 = Clock::now();
  const auto& train = train_set();
  const auto test = generate_dataset(400, 72, 72, kTestSeedBegin, 0.0);
  ComparisonHooks hooks{[](std::uint64_t s, const std::string& p, const ParadigmCell& c) {
    std::cerr << "  [8] seed " << s << " " << p << ": vae " << f(c.vae, 1) << " gan " << f(c.gan, 1) << "\n";
  }};
  const auto table = run_paradigm_comparison(comparison_config(), train, test, {0, 1, 2, 3, 4}, 1, hooks);
  const double secs = seconds_since(t0);
  std::cerr << table.to_text();
  const double ev = table.median_of("expert_vae", "vae"), eg = table.median_of("expert_gan", "gan");
  const double mv = table.median_of("mixed", "vae"), mg = table.median_of("mixed", "gan");
  const double mm = table.median_of("mixed", "mean");
  const double sv = table.median_of("sef", "vae"), sg = table.median_of("sef", "gan"), sm = table.median_of("sef", "mean");
  const bool a = ev > mv && eg > mg;
  const bool b = sm - mm >= 2.0;
  const bool c = ev - sv <= 3.0 && eg - sg <= 3.0;
  const bool t = secs < 45 * 60.0;
  std::string d = "medians: expert_vae " + f(ev, 1) + " vs mixed " + f(mv, 1) + " (vae), expert_gan " + f(eg, 1) +
                  " vs mixed " + f(mg, 1) + " (gan) [a " + (a ? "ok" : "fail") + "]; sef mean " + f(sm, 1) +
                  " vs mixed " + f(mm, 1) + " [b " + (b ? "ok" : "fail") + "]; sef vae " + f(sv, 1) + ", gan " +
                  f(sg, 1) + " [c " + (c ? "ok" : "fail") + "]; " + f(secs / 60.0, 1) + " min";
  return {a && b && c && t, d};
}

// --- 9 -----------------------------------------------------------------------

Outcome conflict_probe() {
  TrainConfig cfg;
  cfg.conflict_iters = 50;
  cfg.conflict_batch = 8;
  int seeds_with_conflict = 0;
  double worst_mean_abs = 0.0;
  std::size_t agree = 0, total = 0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto sc = cfg;
    sc.seed = seed;
    sc.backbone_seed = seed;
    const auto bb = init_backbone(sc.model());
    const auto rep = run_conflict_probe(sc, train_set(), bb);
    seeds_with_conflict += rep.conflict_fraction() > 0.0;
    worst_mean_abs = std::max(worst_mean_abs, rep.mean_abs());
    const auto td = taylor_diagnostic(sc, train_set(), bb, 20, 1e-5);
    for (const auto& s : td.steps) {
      agree += TaylorDiagnostic::sign(s.predicted) == TaylorDiagnostic::sign(s.measured);
      ++total;
    }
    per_seed += " " + f(rep.conflict_fraction(), 2) + "/" + f(rep.mean_abs(), 3);
  }
  const double agreement = static_cast<double>(agree) / static_cast<double>(total);
  return {seeds_with_conflict >= 4 && worst_mean_abs < 0.5 && agreement > 0.8,
          "conflict fraction / mean |cos| per seed:" + per_seed + "; " + std::to_string(seeds_with_conflict) +
              "/5 seeds with conflicts; Taylor sign agreement " + f(100.0 * agreement, 1) + "%"};
}

// --- 10 ----------------------------------------------------------------------

Outcome freeze_discipline() {
  TrainConfig cfg;
  cfg.stage1_iters = 3;
  cfg.stage1_batch = 8;
  cfg.stage2_iters = 3;
  cfg.stage2_batch = 12;
  cfg.grad_accum = 1;
  cfg.lr = 1e-3;
  cfg.stage2_lr = 1e-3;
  cfg.seed = 10;
  const auto ds = generate_dataset(24, 72, 72, 0, 0.5);
  const auto bb = init_backbone(cfg.model());
  const auto bb_hash = params_hash<float>(bb);
  const auto ev = train_expert(ArtifactDomain::VaeSim, cfg, ds, bb);
  const auto es = train_expert(ArtifactDomain::GanSim, cfg, ds, bb);
  const auto run = train_sef(ev.ckpt, es.ckpt, cfg, ds, bb);

  const int lora_from = cfg.num_blocks - cfg.unfreeze_k;
  bool frozen_ok = true, unfrozen_moved = true;
  for (int b = 0; b < cfg.num_blocks; ++b) {
    const auto i = static_cast<std::size_t>(b);
    const bool same_v = nn::params_equal(run.ckpt.params.vae.lora.blocks[i], ev.ckpt.params.lora.blocks[i]);
    const bool same_s = nn::params_equal(run.ckpt.params.gan.lora.blocks[i], es.ckpt.params.lora.blocks[i]);
    if (b < lora_from) frozen_ok = frozen_ok && same_v && same_s;
    else unfrozen_moved = unfrozen_moved && !same_v && !same_s;
  }
  const bool heads_ok = nn::params_equal(run.ckpt.params.vae.head, ev.ckpt.params.head) &&
                        nn::params_equal(run.ckpt.params.gan.head, es.ckpt.params.head);
  const bool bb_ok = params_hash<float>(bb) == bb_hash && run.ckpt.backbone_hash == bb_hash;

  auto c0 = cfg;
  c0.gamma = 0.0;
  const auto run0 = train_sef(ev.ckpt, es.ckpt, c0, ds, bb);
  const bool gamma0 = nn::params_equal(run0.ckpt.params.vae, ev.ckpt.params) &&
                      nn::params_equal(run0.ckpt.params.gan, es.ckpt.params);
  return {bb_ok && frozen_ok && heads_ok && gamma0,
          std::string("backbone ") + (bb_ok ? "unchanged" : "CHANGED") + "; blocks 0.." +
              std::to_string(lora_from - 1) + " LoRA " + (frozen_ok ? "bit-identical" : "CHANGED") +
              "; expert heads " + (heads_ok ? "bit-identical" : "CHANGED") + "; last " + std::to_string(cfg.unfreeze_k) +
              " blocks " + (unfrozen_moved ? "updated" : "not all updated") + "; gamma=0 experts " +
              (gamma0 ? "bit-identical" : "CHANGED")};
}

// --- 11 ----------------------------------------------------------------------

Outcome determinism() {
  const auto root = fs::temp_directory_path() / "sef_acceptance_det";
  fs::remove_all(root);
  std::vector<std::string> diffs;
  auto once = [&](const fs::path& dir) {
    fs::create_directories(dir);
    build_dataset(30, 72, 72, 0, 0.5, dir / "data", 1);
    const auto ds = load_dataset(dir / "data");
    const auto test = generate_dataset(20, 72, 72, kTestSeedBegin, 0.0);
    TrainConfig cfg;
    cfg.stage1_iters = 3;
    cfg.stage1_batch = 8;
    cfg.stage2_iters = 3;
    cfg.stage2_batch = 12;
    cfg.grad_accum = 2;
    cfg.lr = 1e-3;
    cfg.stage2_lr = 1e-3;
    cfg.conflict_iters = 3;
    cfg.seed = 21;
    const auto bb = init_backbone(cfg.model());
    const auto ev = train_expert(ArtifactDomain::VaeSim, cfg, ds, bb, 1);
    const auto es = train_expert(ArtifactDomain::GanSim, cfg, ds, bb, 1);
    const auto mx = train_mixed_baseline(cfg, ds, bb, 1);
    const auto fused = train_sef(ev.ckpt, es.ckpt, cfg, ds, bb, 1);
    save_checkpoint(ev.ckpt, dir / "vae.ckpt");
    save_checkpoint(es.ckpt, dir / "gan.ckpt");
    save_checkpoint(mx.ckpt, dir / "mixed.ckpt");
    save_checkpoint(fused.ckpt, dir / "sef.ckpt");
    write_train_log(fused.log, (dir / "sef_log.jsonl").string());
    const auto r = evaluate(sef_scorer(bb, fused.ckpt.params, cfg.model()), test, 64, PerturbationSpec::all(3),
                            ds.seed_begin, ds.seed_end);
    std::ofstream(dir / "eval.json") << r.to_json().dump() << "\n";
    const auto rep = run_conflict_probe(cfg, ds, bb, 1);
    std::ofstream out(dir / "conflict.jsonl");
    for (const auto& s : rep.steps) out << s.to_json().dump() << "\n";
  };
  once(root / "a");
  once(root / "b");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto rel = fs::relative(e.path(), root / "a");
    if (slurp(e.path()) != slurp(root / "b" / rel)) diffs.push_back(rel.string());
  }
  fs::remove_all(root);
  std::string detail = std::to_string(files) + " files compared (manifest, images, checkpoints, logs, records)";
  if (!diffs.empty()) detail += "; differing: " + diffs.front() + (diffs.size() > 1 ? " and more" : "");
  return {diffs.empty() && files > 0, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, gradient_contract},    {2, lora_identity},       {3, mask_composite},     {4, fusion_betweenness},
      {5, radar_arithmetic},     {6, metric_orderings},    {7, perturbation_supports}, {10, freeze_discipline},
      {11, determinism},         {9, conflict_probe},      {8, paradigm_pattern}};
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  std::map<int, Outcome> results;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cerr << "  criterion " << id << " took " << f(seconds_since(t0), 1) << " s\n";
    results[id] = o;
  }
  int failed = 0;
  for (const auto& [id, o] : results) {
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << o.detail << "\n";
    failed += !o.pass;
  }
  std::cout << results.size() - static_cast<std::size_t>(failed) << "/" << results.size() << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
