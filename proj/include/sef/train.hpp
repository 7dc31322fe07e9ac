#pragma once

// Stage-1 experts, the mixed-source baseline, and stage-2 gated fusion.
// One iteration is one optimizer step over `grad_accum` micro-batches.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sef/errors.hpp"
#include "sef/forge.hpp"
#include "sef/loss.hpp"
#include "sef/model.hpp"
#include "sef/parallel.hpp"
#include "sef/rng.hpp"

namespace sef {

struct TrainConfig {
  double lr = 1e-4;         // stage 1 and the mixed baseline
  double stage2_lr = 1e-4;  // gate and fusion head; the unfrozen LoRA gets gamma * stage2_lr
  double gamma = 0.1;
  int unfreeze_k = 4;
  int stage1_iters = 2000;
  int stage1_batch = 16;
  int stage2_iters = 1000;
  int stage2_batch = 32;
  int grad_accum = 4;
  int lora_rank = 8;
  double lora_alpha = 1.0;
  double mix_lambda = 0.5;
  std::uint64_t seed = 0;
  int resolution = 64;

  // Backbone shape.
  int patch_size = 8;
  int embed_dim = 64;
  int num_heads = 4;
  int num_blocks = 8;
  int mlp_hidden = 128;
  int gate_hidden = 32;
  std::uint64_t backbone_seed = 0;

  // Gradient-conflict probe.
  int conflict_iters = 50;
  int conflict_batch = 8;
  bool conflict_include_head = false;  // LoRA only; true adds the head

  ModelConfig model() const {
    ModelConfig m;
    m.resolution = resolution;
    m.patch = patch_size;
    m.dim = embed_dim;
    m.heads = num_heads;
    m.blocks = num_blocks;
    m.mlp_hidden = mlp_hidden;
    m.lora_rank = lora_rank;
    m.lora_alpha = lora_alpha;
    m.gate_hidden = gate_hidden;
    m.backbone_seed = backbone_seed;
    return m;
  }

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be a finite value >= 0");
    if (!(stage2_lr >= 0.0) || !std::isfinite(stage2_lr)) throw ConfigError("stage2_lr must be a finite value >= 0");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in [0,1]");
    if (unfreeze_k < 0 || unfreeze_k > num_blocks) throw ConfigError("unfreeze_k must be in [0, num_blocks]");
    if (stage1_iters < 1 || stage2_iters < 1 || conflict_iters < 1) throw ConfigError("iteration counts must be >= 1");
    if (stage1_batch < 2 || stage2_batch < 3 || conflict_batch < 2)
      throw ConfigError("batch sizes too small for paired/triple batches");
    if (grad_accum < 1) throw ConfigError("grad_accum must be >= 1");
    if (!(mix_lambda >= 0.0 && mix_lambda <= 1.0)) throw ConfigError("mix_lambda must be in [0,1]");
    try {
      model().validate();
    } catch (const InvalidInput& e) {
      throw ConfigError(e.what());
    }
  }

  // Plain key=value lines, sorted by key.
  std::map<std::string, std::string> to_map() const {
    auto d = [](double v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      return os.str();
    };
    return {{"lr", d(lr)},
            {"stage2_lr", d(stage2_lr)},
            {"gamma", d(gamma)},
            {"unfreeze_k", std::to_string(unfreeze_k)},
            {"stage1_iters", std::to_string(stage1_iters)},
            {"stage1_batch", std::to_string(stage1_batch)},
            {"stage2_iters", std::to_string(stage2_iters)},
            {"stage2_batch", std::to_string(stage2_batch)},
            {"grad_accum", std::to_string(grad_accum)},
            {"lora_rank", std::to_string(lora_rank)},
            {"lora_alpha", d(lora_alpha)},
            {"mix_lambda", d(mix_lambda)},
            {"seed", std::to_string(seed)},
            {"resolution", std::to_string(resolution)},
            {"patch_size", std::to_string(patch_size)},
            {"embed_dim", std::to_string(embed_dim)},
            {"num_heads", std::to_string(num_heads)},
            {"num_blocks", std::to_string(num_blocks)},
            {"mlp_hidden", std::to_string(mlp_hidden)},
            {"gate_hidden", std::to_string(gate_hidden)},
            {"backbone_seed", std::to_string(backbone_seed)},
            {"conflict_iters", std::to_string(conflict_iters)},
            {"conflict_batch", std::to_string(conflict_batch)},
            {"conflict_include_head", conflict_include_head ? "true" : "false"}};
  }

  std::string to_text() const {
    std::string s;
    for (const auto& [k, v] : to_map()) s += k + "=" + v + "\n";
    return s;
  }

  std::uint64_t hash() const { return fnv1a(to_text()); }

  void set(const std::string& key, const std::string& value) {
    auto as_int = [&](int& dst) {
      std::size_t pos = 0;
      dst = std::stoi(value, &pos);
      if (pos != value.size()) throw std::invalid_argument(value);
    };
    auto as_u64 = [&](std::uint64_t& dst) {
      std::size_t pos = 0;
      if (!value.empty() && value[0] == '-') throw std::invalid_argument(value);
      dst = std::stoull(value, &pos);
      if (pos != value.size()) throw std::invalid_argument(value);
    };
    auto as_double = [&](double& dst) {
      std::size_t pos = 0;
      dst = std::stod(value, &pos);
      if (pos != value.size()) throw std::invalid_argument(value);
    };
    try {
      if (key == "lr") as_double(lr);
      else if (key == "stage2_lr") as_double(stage2_lr);
      else if (key == "gamma") as_double(gamma);
      else if (key == "unfreeze_k") as_int(unfreeze_k);
      else if (key == "stage1_iters") as_int(stage1_iters);
      else if (key == "stage1_batch") as_int(stage1_batch);
      else if (key == "stage2_iters") as_int(stage2_iters);
      else if (key == "stage2_batch") as_int(stage2_batch);
      else if (key == "grad_accum") as_int(grad_accum);
      else if (key == "lora_rank") as_int(lora_rank);
      else if (key == "lora_alpha") as_double(lora_alpha);
      else if (key == "mix_lambda") as_double(mix_lambda);
      else if (key == "seed") as_u64(seed);
      else if (key == "resolution") as_int(resolution);
      else if (key == "patch_size") as_int(patch_size);
      else if (key == "embed_dim") as_int(embed_dim);
      else if (key == "num_heads") as_int(num_heads);
      else if (key == "num_blocks") as_int(num_blocks);
      else if (key == "mlp_hidden") as_int(mlp_hidden);
      else if (key == "gate_hidden") as_int(gate_hidden);
      else if (key == "backbone_seed") as_u64(backbone_seed);
      else if (key == "conflict_iters") as_int(conflict_iters);
      else if (key == "conflict_batch") as_int(conflict_batch);
      else if (key == "conflict_include_head") {
        if (value == "true" || value == "1") conflict_include_head = true;
        else if (value == "false" || value == "0") conflict_include_head = false;
        else throw std::invalid_argument(value);
      } else
        throw ConfigError("unknown config key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw ConfigError("bad value for '" + key + "': '" + value + "'");
    } catch (const std::out_of_range&) {
      throw ConfigError("value out of range for '" + key + "': '" + value + "'");
    }
  }

  // Applies "key=value" lines; '#' starts a comment.
  void apply_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      const auto b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos) continue;
      const auto e = line.find_last_not_of(" \t\r");
      line = line.substr(b, e - b + 1);
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
      auto trim = [](std::string s) {
        const auto b2 = s.find_first_not_of(" \t");
        const auto e2 = s.find_last_not_of(" \t");
        return b2 == std::string::npos ? std::string() : s.substr(b2, e2 - b2 + 1);
      };
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  static TrainConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    TrainConfig c;
    c.apply_text(ss.str());
    return c;
  }
};

// ---------------------------------------------------------------------------

inline double cosine_lr(long t, long total, double lr0) {
  if (total <= 0) throw InvalidInput("cosine_lr: total steps must be positive");
  if (t < 0 || t > total) throw InvalidInput("cosine_lr: step outside [0, total]");
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

// Adam over groups of (param, grad) tensors; a group with zero effective
// learning rate is left untouched, moments included.
class Adam {
 public:
  struct Group {
    std::vector<std::pair<Mat<float>*, Mat<float>*>> tensors;
    double lr_scale = 1.0;
  };

  explicit Adam(std::vector<Group> groups, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : groups_(std::move(groups)), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& g : groups_)
      for (const auto& [p, _] : g.tensors) {
        m_.push_back(Mat<float>::Zero(p->rows(), p->cols()));
        v_.push_back(Mat<float>::Zero(p->rows(), p->cols()));
      }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    std::size_t idx = 0;
    for (auto& g : groups_) {
      const double a = lr * g.lr_scale;
      for (auto& [p, grad] : g.tensors) {
        auto& m = m_[idx];
        auto& v = v_[idx];
        ++idx;
        if (a == 0.0) continue;
        m = static_cast<float>(b1_) * m + static_cast<float>(1.0 - b1_) * *grad;
        v = static_cast<float>(b2_) * v + static_cast<float>(1.0 - b2_) * grad->cwiseProduct(*grad);
        const auto mhat = m.array() / static_cast<float>(c1);
        const auto vhat = v.array() / static_cast<float>(c2);
        p->array() -= static_cast<float>(a) * mhat / (vhat.sqrt() + static_cast<float>(eps_));
      }
    }
  }

 private:
  std::vector<Group> groups_;
  std::vector<Mat<float>> m_, v_;
  double b1_, b2_, eps_;
  int t_ = 0;
};

// ---------------------------------------------------------------------------
// Batches

struct Sample {
  Image image;
  int label = 0;  // 0 real, 1 fake
  int source = 0;  // 0 real, 1 vae fake, 2 gan fake
};

struct Batch {
  std::vector<Sample> samples;
  int n_real = 0, n_vae = 0, n_gan = 0;

  void add(Image img, int source) {
    samples.push_back({std::move(img), source == 0 ? 0 : 1, source});
    (source == 0 ? n_real : source == 1 ? n_vae : n_gan)++;
  }
  std::vector<int> labels() const {
    std::vector<int> y;
    for (const auto& s : samples) y.push_back(s.label);
    return y;
  }
};

// Epoch-wise shuffled index stream.
class EntrySampler {
 public:
  EntrySampler(std::size_t n, Rng& rng) : n_(n), rng_(rng) {}

  std::size_t next() {
    if (pos_ >= order_.size()) reshuffle();
    return order_[pos_++];
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    for (std::size_t i = n_; i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(order_[i - 1], order_[j]);
    }
    pos_ = 0;
  }
  std::size_t n_;
  Rng& rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

inline void check_canvas(const Dataset& ds, int res) {
  if (ds.entries.empty()) throw InvalidInput("dataset is empty");
  if (ds.height < res || ds.width < res)
    throw InvalidInput("dataset images (" + std::to_string(ds.height) + "x" + std::to_string(ds.width) +
                       ") smaller than training resolution " + std::to_string(res));
}

// Center crop used for evaluation.
inline Image center_crop(const Image& img, int res) {
  return crop(img, (img.height - res) / 2, (img.width - res) / 2, res, res);
}

struct CropOffset {
  int top = 0, left = 0;
};

inline CropOffset random_offset(const Dataset& ds, int res, Rng& rng) {
  return {static_cast<int>(rng.uniform_int(0, ds.height - res)), static_cast<int>(rng.uniform_int(0, ds.width - res))};
}

// Pairs (real, fake). The first round(vae_share * pairs) pairs use VAE fakes,
// the rest GAN fakes; a real and its fake share one crop window.
inline Batch make_pair_batch(const Dataset& ds, int batch, double vae_share, int res, EntrySampler& sampler,
                             Rng& rng) {
  const int pairs = batch / 2;
  if (pairs < 1) throw InvalidInput("make_pair_batch: batch must hold at least one pair");
  if (ds.entries.size() < static_cast<std::size_t>(pairs)) throw InvalidInput("make_pair_batch: insufficient data");
  check_canvas(ds, res);
  const int n_vae = static_cast<int>(std::lround(vae_share * pairs));
  Batch b;
  for (int i = 0; i < pairs; ++i) {
    const auto& e = ds.entries[sampler.next()];
    const auto off = random_offset(ds, res, rng);
    const int src = i < n_vae ? 1 : 2;
    b.add(crop(e.real, off.top, off.left, res, res), 0);
    b.add(crop(src == 1 ? e.fake_vae : e.fake_gan, off.top, off.left, res, res), src);
  }
  return b;
}

// Triples (real, fake_vae, fake_gan) from one entry; batch sizes that are not
// a multiple of 3 are truncated.
inline Batch make_sef_batch(const Dataset& ds, int batch, int res, EntrySampler& sampler, Rng& rng) {
  const int triples = batch / 3;
  if (triples < 1) throw InvalidInput("make_sef_batch: batch must hold at least one triple");
  if (ds.entries.size() < static_cast<std::size_t>(triples)) throw InvalidInput("make_sef_batch: insufficient data");
  check_canvas(ds, res);
  Batch b;
  for (int i = 0; i < triples; ++i) {
    const auto& e = ds.entries[sampler.next()];
    const auto off = random_offset(ds, res, rng);
    b.add(crop(e.real, off.top, off.left, res, res), 0);
    b.add(crop(e.fake_vae, off.top, off.left, res, res), 1);
    b.add(crop(e.fake_gan, off.top, off.left, res, res), 2);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Records and checkpoints (in memory)

struct TrainRecord {
  int iter = 0;
  double loss = 0.0;
  double lr = 0.0;
  int n_real = 0, n_vae = 0, n_gan = 0;

  nlohmann::json to_json() const {
    return {{"iter", iter}, {"loss", loss}, {"lr", lr}, {"n_real", n_real}, {"n_fake_vae", n_vae},
            {"n_fake_gan", n_gan}};
  }
};

// Domain tag "vae", "gan" or "mixed".
struct ExpertCheckpoint {
  ModelConfig model;
  std::string domain;
  ExpertP<float> params;
  std::int64_t iterations = 0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t backbone_hash = 0;
  std::uint64_t train_seed_begin = 0, train_seed_end = 0;
};

struct SefCheckpoint {
  ModelConfig model;
  SefP<float> params;
  int unfreeze_k = 0;
  std::int64_t iterations = 0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t backbone_hash = 0;
  std::uint64_t train_seed_begin = 0, train_seed_end = 0;
};

struct TrainHooks {
  std::function<void(const TrainRecord&)> on_record;
};

namespace detail {

inline void check_loss(double loss, int iter, const char* who) {
  if (!std::isfinite(loss))
    throw TrainingError(std::string(who) + ": non-finite loss " + std::to_string(loss) + " at iteration " +
                        std::to_string(iter) + "; try a smaller lr");
}

inline std::vector<Image> batch_images(const Batch& b) {
  std::vector<Image> imgs;
  imgs.reserve(b.samples.size());
  for (const auto& s : b.samples) imgs.push_back(s.image);
  return imgs;
}

// dL/dz for the class-balanced loss, times `scale`.
template <class T>
nn::ColVec<T> balanced_dlogits(const nn::ColVec<T>& logits, const std::vector<int>& labels, double scale,
                               double& loss) {
  std::vector<double> z(logits.data(), logits.data() + logits.size());
  const auto lg = balanced_bce_grad(z, labels, balanced_class_weights(labels));
  loss = lg.loss;
  nn::ColVec<T> d(logits.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) d(i) = static_cast<T>(lg.dlogits[static_cast<std::size_t>(i)] * scale);
  return d;
}

// Loss of one micro-batch on a single LoRA+head model; gradient times
// `scale` is accumulated into `grad`.
inline double expert_batch_grad(const BackboneP<float>& bb, const ExpertP<float>& e, const ModelConfig& cfg,
                                const Batch& b, ExpertP<float>& grad, double scale, int threads) {
  const auto imgs = batch_images(b);
  FeatureCache<float> cache;
  const auto out = forward_expert<float>(bb, e, cfg, imgs, &cache, threads);
  double loss = 0.0;
  const auto dz = balanced_dlogits(out.logits, b.labels(), scale, loss);
  expert_bwd<float>(dz, bb, e, cfg, cache, out.features, &grad, nullptr, 0, threads);
  return loss;
}

}  // namespace detail

struct ExpertRun {
  ExpertCheckpoint ckpt;
  std::vector<TrainRecord> log;
};

// Shared loop for experts (vae_share 1 or 0) and the mixed baseline.
inline ExpertRun train_pairs(const std::string& tag, double vae_share, const TrainConfig& cfg, const Dataset& ds,
                             const BackboneP<float>& bb, int threads, const TrainHooks& hooks) {
  cfg.validate();
  const ModelConfig mc = cfg.model();
  check_canvas(ds, mc.resolution);
  ExpertRun run;
  auto& ck = run.ckpt;
  ck.model = mc;
  ck.domain = tag;
  ck.params = init_expert<float>(mc, cfg.seed);
  ck.seed = cfg.seed;
  ck.config_hash = cfg.hash();
  ck.backbone_hash = params_hash<float>(bb);
  ck.train_seed_begin = ds.seed_begin;
  ck.train_seed_end = ds.seed_end;

  ExpertP<float> grad = nn::zeros_like_params(ck.params);
  Adam::Group group;
  {
    auto tp = nn::tensors(ck.params), tg = nn::tensors(grad);
    for (std::size_t i = 0; i < tp.size(); ++i) group.tensors.emplace_back(tp[i].second, tg[i].second);
  }
  Adam opt({group});
  Rng rng(derive_seed(cfg.seed, {0xDA7A}));
  EntrySampler sampler(ds.entries.size(), rng);
  for (int it = 0; it < cfg.stage1_iters; ++it) {
    nn::set_zero(grad);
    TrainRecord rec;
    rec.iter = it;
    rec.lr = cosine_lr(it, cfg.stage1_iters, cfg.lr);
    for (int a = 0; a < cfg.grad_accum; ++a) {
      const Batch b = make_pair_batch(ds, cfg.stage1_batch, vae_share, mc.resolution, sampler, rng);
      rec.loss += detail::expert_batch_grad(bb, ck.params, mc, b, grad, 1.0 / cfg.grad_accum, threads) /
                  cfg.grad_accum;
      rec.n_real += b.n_real;
      rec.n_vae += b.n_vae;
      rec.n_gan += b.n_gan;
    }
    detail::check_loss(rec.loss, it, tag.c_str());
    opt.step(rec.lr);
    run.log.push_back(rec);
    if (hooks.on_record) hooks.on_record(rec);
  }
  ck.iterations = cfg.stage1_iters;
  return run;
}

inline ExpertRun train_expert(ArtifactDomain domain, const TrainConfig& cfg, const Dataset& ds,
                              const BackboneP<float>& bb, int threads = 1, const TrainHooks& hooks = {}) {
  return train_pairs(to_string(domain), domain == ArtifactDomain::VaeSim ? 1.0 : 0.0, cfg, ds, bb, threads, hooks);
}

inline ExpertRun train_mixed_baseline(const TrainConfig& cfg, const Dataset& ds, const BackboneP<float>& bb,
                                      int threads = 1, const TrainHooks& hooks = {}) {
  return train_pairs("mixed", cfg.mix_lambda, cfg, ds, bb, threads, hooks);
}

struct SefRun {
  SefCheckpoint ckpt;
  std::vector<TrainRecord> log;
};

// Stage 2: gate + fusion head at stage2_lr, LoRA of the last k blocks of
// both experts at gamma * stage2_lr; everything else stays fixed.
inline SefRun train_sef(const ExpertCheckpoint& expert_v, const ExpertCheckpoint& expert_s, const TrainConfig& cfg,
                        const Dataset& ds, const BackboneP<float>& bb, int threads = 1, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (expert_v.domain == expert_s.domain) throw InvalidInput("train_sef: experts share domain '" + expert_v.domain + "'");
  if (expert_v.domain != "vae" || expert_s.domain != "gan")
    throw InvalidInput("train_sef: expected a vae expert and a gan expert, got '" + expert_v.domain + "' and '" +
                       expert_s.domain + "'");
  const ModelConfig mc = cfg.model();
  if (!(expert_v.model == mc) || !(expert_s.model == mc))
    throw InvalidInput("train_sef: expert model configuration differs from the training configuration");
  check_canvas(ds, mc.resolution);
  const int lora_from = mc.blocks - cfg.unfreeze_k;

  SefRun run;
  auto& ck = run.ckpt;
  ck.model = mc;
  ck.params.vae = expert_v.params;
  ck.params.gan = expert_s.params;
  ck.params.gate = init_gate<float>(mc, cfg.seed);
  ck.unfreeze_k = cfg.unfreeze_k;
  ck.seed = cfg.seed;
  ck.config_hash = cfg.hash();
  ck.backbone_hash = params_hash<float>(bb);
  ck.train_seed_begin = ds.seed_begin;
  ck.train_seed_end = ds.seed_end;

  SefP<float> grad = nn::zeros_like_params(ck.params);
  Adam::Group head_group, lora_group;
  lora_group.lr_scale = cfg.gamma;
  {
    auto tg = nn::tensors(ck.params.gate), gg = nn::tensors(grad.gate);
    for (std::size_t i = 0; i < tg.size(); ++i) head_group.tensors.emplace_back(tg[i].second, gg[i].second);
    for (int e = 0; e < 2; ++e) {
      auto& pl = e == 0 ? ck.params.vae.lora : ck.params.gan.lora;
      auto& gl = e == 0 ? grad.vae.lora : grad.gan.lora;
      for (int blk = lora_from; blk < mc.blocks; ++blk) {
        auto tp = nn::tensors(pl.blocks[static_cast<std::size_t>(blk)]);
        auto tgr = nn::tensors(gl.blocks[static_cast<std::size_t>(blk)]);
        for (std::size_t i = 0; i < tp.size(); ++i) lora_group.tensors.emplace_back(tp[i].second, tgr[i].second);
      }
    }
  }
  Adam opt({head_group, lora_group});
  const bool train_lora = cfg.gamma > 0.0 && cfg.unfreeze_k > 0;
  Rng rng(derive_seed(cfg.seed, {0x5EF}));
  EntrySampler sampler(ds.entries.size(), rng);
  for (int it = 0; it < cfg.stage2_iters; ++it) {
    nn::set_zero(grad);
    TrainRecord rec;
    rec.iter = it;
    rec.lr = cosine_lr(it, cfg.stage2_iters, cfg.stage2_lr);
    for (int a = 0; a < cfg.grad_accum; ++a) {
      const Batch b = make_sef_batch(ds, cfg.stage2_batch, mc.resolution, sampler, rng);
      const auto imgs = detail::batch_images(b);
      SefCache<float> cache;
      const auto out = forward_sef<float>(bb, ck.params, mc, imgs, std::nullopt, &cache, threads);
      double loss = 0.0;
      const auto dz = detail::balanced_dlogits(out.logits, b.labels(), 1.0 / cfg.grad_accum, loss);
      sef_bwd<float>(dz, bb, ck.params, mc, cache, &grad, lora_from, train_lora, threads);
      rec.loss += loss / cfg.grad_accum;
      rec.n_real += b.n_real;
      rec.n_vae += b.n_vae;
      rec.n_gan += b.n_gan;
    }
    detail::check_loss(rec.loss, it, "train_sef");
    opt.step(rec.lr);
    run.log.push_back(rec);
    if (hooks.on_record) hooks.on_record(rec);
  }
  ck.iterations = cfg.stage2_iters;
  return run;
}

inline void write_train_log(const std::vector<TrainRecord>& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& r : log) out << r.to_json().dump() << '\n';
}

}  // namespace sef
