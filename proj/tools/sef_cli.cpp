// Command-line entry point: data generation, training, fusion, evaluation,
// conflict probing and metric profiles.
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sef/checkpoint.hpp"
#include "sef/conflict.hpp"
#include "sef/evalbench.hpp"
#include "sef/forge.hpp"
#include "sef/metrics.hpp"
#include "sef/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kOutRootEnv = "SEF_OUTPUT_ROOT";

struct Common {
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 1;
  std::string config_file;
  std::vector<std::string> overrides;
  std::string out;
};

fs::path out_dir(const Common& c, const std::string& sub) {
  if (!c.out.empty()) return c.out;
  const char* root = std::getenv(kOutRootEnv);
  return fs::path(root && *root ? root : "runs") / sub;
}

fs::path prepare_out(const Common& c, const std::string& sub) {
  const auto dir = out_dir(c, sub);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw sef::IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

// defaults < config file < --set overrides < --seed
sef::TrainConfig resolve_config(const Common& c) {
  sef::TrainConfig cfg;
  if (!c.config_file.empty()) cfg = sef::TrainConfig::from_file(c.config_file);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw sef::ConfigError("override '" + kv + "' is not key=value");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed_given) cfg.seed = c.seed;
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw sef::IoError("cannot write " + p.string());
  out << s;
}

void write_records(const fs::path& p, const std::vector<json>& recs) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw sef::IoError("cannot write " + p.string());
  for (const auto& r : recs) out << r.dump() << '\n';
}

// Resolved training config (loadable with --config) plus the run arguments.
void snapshot(const fs::path& dir, const std::string& sub, const sef::TrainConfig& cfg, const Common& c,
              const json& args) {
  write_text(dir / "config.txt", cfg.to_text());
  json run{{"subcommand", sub}, {"seed", cfg.seed}, {"threads", c.threads}, {"args", args}};
  write_text(dir / "run.json", run.dump(2) + "\n");
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "Random seed")->each([&c](const std::string&) { c.seed_given = true; });
  app->add_option("--threads", c.threads, "Worker threads (1 is bit-reproducible)")->check(CLI::PositiveNumber);
  app->add_option("--config", c.config_file, "key=value config file")->check(CLI::ExistingFile);
  app->add_option("--set", c.overrides, "Config override key=value (repeatable)");
  app->add_option("--out", c.out, std::string("Output directory (default $") + kOutRootEnv + "/<command>)");
}

sef::BackboneP<float> backbone_of(const sef::TrainConfig& cfg) { return sef::init_backbone(cfg.model()); }

void print_log_progress(const sef::TrainRecord& r, int total) {
  if (r.iter == 0 || (r.iter + 1) % 50 == 0 || r.iter + 1 == total)
    std::cerr << "  iter " << r.iter + 1 << "/" << total << " loss " << r.loss << " lr " << r.lr << "\n";
}

std::string fmt(double v, int prec = 1) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Separate-expert fusion detector toolkit"};
  app.require_subcommand(1);
  Common c;

  // gen-data
  int n = 100, size = 64;
  double aug_prob = 0.5;
  std::string split = "train";
  auto* gen = app.add_subcommand("gen-data", "Generate aligned real/VAE-sim/GAN-sim triples");
  add_common(gen, c);
  gen->add_option("--n", n, "Number of anchors")->check(CLI::PositiveNumber);
  gen->add_option("--size", size, "Image side (multiple of 8, >= 32)");
  gen->add_option("--aug-prob", aug_prob, "Mask-aware augmentation probability")->check(CLI::Range(0.0, 1.0));
  gen->add_option("--split", split, "train: seeds [seed, seed+n); test: seeds offset by 1e6")
      ->check(CLI::IsMember({"train", "test"}));

  // training
  std::string data, domain = "vae";
  auto* tex = app.add_subcommand("train-expert", "Stage 1: train one LoRA expert");
  add_common(tex, c);
  tex->add_option("--data", data, "Dataset directory")->required();
  tex->add_option("--domain", domain, "vae or gan")->check(CLI::IsMember({"vae", "gan"}));

  auto* tmx = app.add_subcommand("train-mixed", "Mixed-source baseline");
  add_common(tmx, c);
  tmx->add_option("--data", data, "Dataset directory")->required();

  std::string vae_ckpt, gan_ckpt;
  auto* tsf = app.add_subcommand("train-sef", "Stage 2: gated fusion of two experts");
  add_common(tsf, c);
  tsf->add_option("--data", data, "Dataset directory")->required();
  tsf->add_option("--vae", vae_ckpt, "VAE expert checkpoint")->required();
  tsf->add_option("--gan", gan_ckpt, "GAN expert checkpoint")->required();

  // evaluate
  std::string ckpt, perturb = "none";
  auto* evl = app.add_subcommand("evaluate", "Balanced accuracy on a held-out set");
  add_common(evl, c);
  evl->add_option("--ckpt", ckpt, "Expert or fused checkpoint")->required();
  evl->add_option("--data", data, "Test dataset directory")->required();
  evl->add_option("--perturb", perturb, "none, all, or a list of blur,crop,jpeg,noise");

  // compare-paradigms
  std::string test_data;
  int n_seeds = 5;
  auto* cmp = app.add_subcommand("compare-paradigms", "Experts vs mixed vs fused over several seeds");
  add_common(cmp, c);
  cmp->add_option("--data", data, "Training dataset directory")->required();
  cmp->add_option("--test", test_data, "Test dataset directory")->required();
  cmp->add_option("--seeds", n_seeds, "Number of seeds (seed, seed+1, ...)")->check(CLI::Range(3, 1000));

  // conflict-report
  int iters = -1, taylor_steps = 50;
  double eta = 1e-5;
  auto* cfr = app.add_subcommand("conflict-report", "Gradient cosine between the two fake sources");
  add_common(cfr, c);
  cfr->add_option("--data", data, "Dataset directory")->required();
  cfr->add_option("--iters", iters, "Probe iterations (default: conflict_iters)");
  cfr->add_option("--seeds", n_seeds, "Number of seeds")->check(CLI::PositiveNumber);
  cfr->add_option("--taylor-steps", taylor_steps, "First-order check steps (0 disables)")->check(CLI::NonNegativeNumber);
  cfr->add_option("--eta", eta, "Step size of the first-order check")->check(CLI::NonNegativeNumber);

  // metrics
  std::string real_dir, vae_dir, gan_dir;
  double alpha = 1.2;
  auto* met = app.add_subcommand("metrics", "Artifact metric profiles and proximity scores");
  add_common(met, c);
  met->add_option("--real", real_dir, "Directory of real PNGs")->required();
  met->add_option("--vae", vae_dir, "Directory of VAE-sim PNGs (same order)")->required();
  met->add_option("--gan", gan_dir, "Directory of GAN-sim PNGs (same order)")->required();
  met->add_option("--alpha", alpha, "Proximity-score margin (> 1)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    if (*gen) {
      const auto cfg = resolve_config(c);
      const std::uint64_t base = (split == "test" ? sef::kTestSeedBegin : 0) + cfg.seed;
      const auto dir = prepare_out(c, "gen-data");
      const auto m = sef::build_dataset(static_cast<std::size_t>(n), size, size, base, aug_prob, dir, c.threads);
      snapshot(dir, "gen-data", cfg, c, {{"n", n}, {"size", size}, {"aug_prob", aug_prob}, {"split", split}});
      std::cout << "wrote " << m.entries.size() << " entries (seeds " << base << ".." << base + n - 1 << ") to "
                << dir.string() << "\n";
    } else if (*tex || *tmx) {
      const auto cfg = resolve_config(c);
      const std::string sub = *tex ? "train-expert" : "train-mixed";
      const auto ds = sef::load_dataset(fs::path(data));
      const auto dir = prepare_out(c, sub);
      const auto bb = backbone_of(cfg);
      sef::TrainHooks hooks{[&](const sef::TrainRecord& r) { print_log_progress(r, cfg.stage1_iters); }};
      const auto run = *tex ? sef::train_expert(sef::parse_domain(domain), cfg, ds, bb, c.threads, hooks)
                            : sef::train_mixed_baseline(cfg, ds, bb, c.threads, hooks);
      const std::string name = run.ckpt.domain + ".ckpt";
      sef::save_checkpoint(run.ckpt, dir / name);
      sef::write_train_log(run.log, (dir / "train_log.jsonl").string());
      snapshot(dir, sub, cfg, c, {{"data", data}, {"domain", run.ckpt.domain}});
      std::cout << "wrote " << (dir / name).string() << " (final loss " << run.log.back().loss << ")\n";
    } else if (*tsf) {
      const auto cfg = resolve_config(c);
      const auto ds = sef::load_dataset(fs::path(data));
      const auto ev = sef::load_expert_checkpoint(vae_ckpt);
      const auto es = sef::load_expert_checkpoint(gan_ckpt);
      const auto bb = sef::backbone_for(cfg.model(), ev.backbone_hash);
      if (es.backbone_hash != ev.backbone_hash) throw sef::StateError("experts were trained on different backbones");
      const auto dir = prepare_out(c, "train-sef");
      sef::TrainHooks hooks{[&](const sef::TrainRecord& r) { print_log_progress(r, cfg.stage2_iters); }};
      const auto run = sef::train_sef(ev, es, cfg, ds, bb, c.threads, hooks);
      sef::save_checkpoint(run.ckpt, dir / "sef.ckpt");
      sef::write_train_log(run.log, (dir / "train_log.jsonl").string());
      snapshot(dir, "train-sef", cfg, c, {{"data", data}, {"vae", vae_ckpt}, {"gan", gan_ckpt}});
      std::cout << "wrote " << (dir / "sef.ckpt").string() << " (final loss " << run.log.back().loss << ")\n";
    } else if (*evl) {
      const auto cfg = resolve_config(c);
      const auto test = sef::load_dataset(fs::path(data));
      const auto spec = sef::PerturbationSpec::parse(perturb, cfg.seed);
      const auto dir = prepare_out(c, "evaluate");
      sef::EvalResult r;
      std::string kind = sef::checkpoint_kind(ckpt);
      if (kind == "expert") {
        const auto ck = sef::load_expert_checkpoint(ckpt);
        const auto bb = sef::backbone_for(ck.model, ck.backbone_hash);
        r = sef::evaluate(sef::expert_scorer(bb, ck.params, ck.model, c.threads), test, ck.model.resolution, spec,
                          ck.train_seed_begin, ck.train_seed_end);
        kind = ck.domain;
      } else {
        const auto ck = sef::load_sef_checkpoint(ckpt);
        const auto bb = sef::backbone_for(ck.model, ck.backbone_hash);
        r = sef::evaluate(sef::sef_scorer(bb, ck.params, ck.model, c.threads), test, ck.model.resolution, spec,
                          ck.train_seed_begin, ck.train_seed_end);
      }
      json rec = r.to_json();
      rec["ckpt"] = ckpt;
      rec["model"] = kind;
      write_records(dir / "eval.jsonl", {rec});
      snapshot(dir, "evaluate", cfg, c, {{"ckpt", ckpt}, {"data", data}, {"perturb", spec.describe()}});
      std::cout << "model " << kind << "  perturb " << r.perturbations << "\n";
      for (const auto& [d, res] : r.domains)
        std::cout << "  " << d << "  bal.acc " << fmt(res.balanced_accuracy) << "  TP " << res.counts.tp << " TN "
                  << res.counts.tn << " FP " << res.counts.fp << " FN " << res.counts.fn << "\n";
      std::cout << "  mean " << fmt(r.mean()) << "\n";
    } else if (*cmp) {
      const auto cfg = resolve_config(c);
      const auto train = sef::load_dataset(fs::path(data));
      const auto test = sef::load_dataset(fs::path(test_data));
      const auto dir = prepare_out(c, "compare-paradigms");
      std::vector<std::uint64_t> seeds;
      for (int i = 0; i < n_seeds; ++i) seeds.push_back(cfg.seed + static_cast<std::uint64_t>(i));
      sef::ComparisonHooks hooks{[](std::uint64_t s, const std::string& p, const sef::ParadigmCell& cell) {
        std::cerr << "  seed " << s << " " << p << ": vae " << fmt(cell.vae) << " gan " << fmt(cell.gan) << "\n";
      }};
      const auto table = sef::run_paradigm_comparison(cfg, train, test, seeds, c.threads, hooks);
      std::vector<json> recs;
      for (const auto& r : table.records()) recs.push_back(r);
      write_records(dir / "comparison.jsonl", recs);
      write_text(dir / "comparison.txt", table.to_text());
      snapshot(dir, "compare-paradigms", cfg, c, {{"data", data}, {"test", test_data}, {"seeds", n_seeds}});
      std::cout << table.to_text();
    } else if (*cfr) {
      auto cfg = resolve_config(c);
      if (iters > 0) cfg.conflict_iters = iters;
      cfg.validate();
      const auto ds = sef::load_dataset(fs::path(data));
      const auto dir = prepare_out(c, "conflict-report");
      std::vector<json> recs;
      std::ostringstream txt;
      txt << "seed        mean      std   |mean|  conflicts\n";
      for (int i = 0; i < n_seeds; ++i) {
        auto sc = cfg;
        sc.seed = cfg.seed + static_cast<std::uint64_t>(i);
        sc.backbone_seed = sc.seed;
        const auto bb = backbone_of(sc);
        const auto rep = sef::run_conflict_probe(sc, ds, bb, c.threads);
        for (const auto& st : rep.steps) {
          auto j = st.to_json();
          j["seed"] = sc.seed;
          j["record"] = "step";
          recs.push_back(j);
        }
        auto sj = rep.summary_json();
        sj["record"] = "summary";
        sj["segments"] = rep.segments;
        std::vector<double> seg_means;
        for (std::size_t k = 0; k < rep.segments.size(); ++k) seg_means.push_back(rep.segment_mean(k));
        sj["segment_mean_cosine"] = seg_means;
        if (taylor_steps > 0) {
          const auto td = sef::taylor_diagnostic(sc, ds, bb, taylor_steps, eta, c.threads);
          sj["taylor"] = td.summary_json();
        }
        recs.push_back(sj);
        txt << std::left << std::setw(8) << sc.seed << std::right << std::setw(8) << fmt(rep.mean(), 3)
            << std::setw(9) << fmt(rep.stddev(), 3) << std::setw(9) << fmt(rep.mean_abs(), 3) << std::setw(8)
            << static_cast<int>(std::lround(rep.conflict_fraction() * rep.iters)) << "/" << rep.iters;
        if (taylor_steps > 0) txt << "  taylor sign agreement " << fmt(100.0 * sj["taylor"]["sign_agreement"].get<double>()) << "%";
        txt << "\n  per-block mean cosine:";
        for (std::size_t k = 0; k < rep.segments.size(); ++k) txt << " " << rep.segments[k] << "=" << fmt(seg_means[k], 3);
        txt << "\n";
        std::cerr << "  seed " << sc.seed << " done\n";
      }
      write_records(dir / "conflict.jsonl", recs);
      write_text(dir / "conflict.txt", txt.str());
      snapshot(dir, "conflict-report", cfg, c,
               {{"data", data}, {"seeds", n_seeds}, {"taylor_steps", taylor_steps}, {"eta", eta}});
      std::cout << txt.str();
    } else if (*met) {
      const auto cfg = resolve_config(c);
      const auto real = sef::load_png_directory(real_dir);
      const auto vae = sef::load_png_directory(vae_dir);
      const auto gan = sef::load_png_directory(gan_dir);
      if (real.empty()) throw sef::InvalidInput("no PNG files in " + real_dir);
      const auto dir = prepare_out(c, "metrics");
      const auto pr = sef::corpus_profile(real, {}, sef::PsnrAggregation::PerImage, {}, c.threads);
      const auto pv = sef::corpus_profile(vae, real, sef::PsnrAggregation::PerImage, {}, c.threads);
      const auto pg = sef::corpus_profile(gan, real, sef::PsnrAggregation::PerImage, {}, c.threads);
      const auto [sv, sg] = sef::radar_scores(pr, pv, pg, alpha);
      std::vector<json> recs;
      std::ostringstream txt;
      txt << std::left << std::setw(16) << "metric" << std::right << std::setw(12) << "real" << std::setw(12)
          << "vae" << std::setw(12) << "gan" << std::setw(10) << "s_vae" << std::setw(10) << "s_gan" << "\n";
      for (std::size_t k = 0; k < 8; ++k) {
        const char* name = sef::MetricProfile::kNames[k];
        recs.push_back({{"metric", name},
                        {"real", pr.values()[k]},
                        {"vae", pv.values()[k]},
                        {"gan", pg.values()[k]},
                        {"score_vae", sv.score[k]},
                        {"score_gan", sg.score[k]},
                        {"alpha", alpha}});
        txt << std::left << std::setw(16) << name << std::right << std::setw(12) << fmt(pr.values()[k], 4)
            << std::setw(12) << fmt(pv.values()[k], 4) << std::setw(12) << fmt(pg.values()[k], 4) << std::setw(10)
            << fmt(sv.score[k], 4) << std::setw(10) << fmt(sg.score[k], 4) << "\n";
      }
      write_records(dir / "metrics.jsonl", recs);
      write_text(dir / "metrics.txt", txt.str());
      snapshot(dir, "metrics", cfg, c, {{"real", real_dir}, {"vae", vae_dir}, {"gan", gan_dir}, {"alpha", alpha}});
      std::cout << txt.str();
    }
  } catch (const sef::InvalidInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const sef::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
