#pragma once

// Patch transformer with a frozen random backbone, LoRA adapters on the
// query/value projections, single-logit heads, and the gated two-expert
// fusion model. Forward and backward passes are per image; batches are
// assembled by the caller so there is no coupling between samples.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sef/errors.hpp"
#include "sef/forge.hpp"
#include "sef/image.hpp"
#include "sef/nn.hpp"
#include "sef/parallel.hpp"
#include "sef/rng.hpp"

namespace sef {

using nn::Mat;

inline constexpr int kEnergyFilters = 6;

struct ModelConfig {
  int resolution = 64;
  int patch = 8;
  int dim = 64;
  int heads = 4;
  int blocks = 8;
  int mlp_hidden = 128;
  int lora_rank = 8;
  double lora_alpha = 1.0;
  int gate_hidden = 32;
  std::uint64_t backbone_seed = 0;
  double energy_gain = 1.0;  // weight of the fixed high-pass energy inputs; 0 disables them

  int grid() const { return resolution / patch; }
  int tokens() const { return grid() * grid(); }
  int patch_dim() const { return patch * patch * 3 + kEnergyFilters; }
  double lora_scale() const { return lora_alpha / lora_rank; }

  void validate() const {
    if (patch <= 0 || resolution <= 0 || resolution % patch != 0)
      throw InvalidInput("model: resolution " + std::to_string(resolution) + " not divisible by patch " +
                         std::to_string(patch));
    if (dim <= 0 || heads <= 0 || dim % heads != 0) throw InvalidInput("model: dim must be a multiple of heads");
    if (blocks <= 0 || mlp_hidden <= 0 || gate_hidden <= 0) throw InvalidInput("model: sizes must be positive");
    if (lora_rank <= 0) throw InvalidInput("model: lora_rank must be positive");
  }

  std::string canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "resolution=" << resolution << ";patch=" << patch << ";dim=" << dim << ";heads=" << heads
       << ";blocks=" << blocks << ";mlp_hidden=" << mlp_hidden << ";lora_rank=" << lora_rank
       << ";lora_alpha=" << lora_alpha << ";gate_hidden=" << gate_hidden << ";backbone_seed=" << backbone_seed
       << ";energy_gain=" << energy_gain;
    return os.str();
  }
  bool operator==(const ModelConfig&) const = default;
};

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xCBF29CE484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

// ---------------------------------------------------------------------------
// Parameters

template <class T>
struct BlockP {
  using Scalar = T;
  nn::LayerNormP<T> ln1;
  nn::LinearP<T> q, k, v, o;
  nn::LayerNormP<T> ln2;
  nn::LinearP<T> fc1, fc2;

  template <class F>
  void visit(F&& f, const std::string& p) {
    ln1.visit(f, p + "ln1");
    q.visit(f, p + "q");
    k.visit(f, p + "k");
    v.visit(f, p + "v");
    o.visit(f, p + "o");
    ln2.visit(f, p + "ln2");
    fc1.visit(f, p + "fc1");
    fc2.visit(f, p + "fc2");
  }
};

template <class T>
struct BackboneP {
  using Scalar = T;
  nn::LinearP<T> embed;  // patch_dim -> dim
  Mat<T> pos;            // tokens x dim
  std::vector<BlockP<T>> blocks;
  nn::LayerNormP<T> ln_f;

  template <class F>
  void visit(F&& f, const std::string& p) {
    embed.visit(f, p + "embed");
    f(p + "pos", pos);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(f, p + "blocks." + std::to_string(i) + ".");
    ln_f.visit(f, p + "ln_f");
  }
  template <class U>
  void reshape_like(const BackboneP<U>& o) {
    blocks.resize(o.blocks.size());
  }
};

template <class T>
struct BlockLoraP {
  using Scalar = T;
  nn::LoraP<T> q, v;

  template <class F>
  void visit(F&& f, const std::string& p) {
    q.visit(f, p + "q");
    v.visit(f, p + "v");
  }
};

template <class T>
struct LoraSetP {
  using Scalar = T;
  std::vector<BlockLoraP<T>> blocks;

  template <class F>
  void visit(F&& f, const std::string& p) {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(f, p + "blocks." + std::to_string(i) + ".");
  }
  template <class U>
  void reshape_like(const LoraSetP<U>& o) {
    blocks.resize(o.blocks.size());
  }
};

template <class T>
struct HeadP {
  using Scalar = T;
  Mat<T> w;  // 1 x dim
  Mat<T> b;  // 1 x 1

  template <class F>
  void visit(F&& f, const std::string& p) {
    f(p + ".w", w);
    f(p + ".b", b);
  }
};

template <class T>
struct ExpertP {
  using Scalar = T;
  LoraSetP<T> lora;
  HeadP<T> head;

  template <class F>
  void visit(F&& f, const std::string& p) {
    lora.visit(f, p + "lora.");
    head.visit(f, p + "head");
  }
  template <class U>
  void reshape_like(const ExpertP<U>& o) {
    lora.reshape_like(o.lora);
  }
};

// Two-layer perceptron on concat(f1, f2) -> w, plus the head over the fused feature.
template <class T>
struct GateP {
  using Scalar = T;
  nn::LinearP<T> fc1;  // 2*dim -> gate_hidden
  nn::LinearP<T> fc2;  // gate_hidden -> 1
  HeadP<T> fusion;

  template <class F>
  void visit(F&& f, const std::string& p) {
    fc1.visit(f, p + "fc1");
    fc2.visit(f, p + "fc2");
    fusion.visit(f, p + "fusion");
  }
};

template <class T>
struct SefP {
  using Scalar = T;
  ExpertP<T> vae, gan;
  GateP<T> gate;

  template <class F>
  void visit(F&& f, const std::string& p) {
    vae.visit(f, p + "vae.");
    gan.visit(f, p + "gan.");
    gate.visit(f, p + "gate.");
  }
  template <class U>
  void reshape_like(const SefP<U>& o) {
    vae.reshape_like(o.vae);
    gan.reshape_like(o.gan);
  }
  ExpertP<T>& expert(ArtifactDomain d) { return d == ArtifactDomain::VaeSim ? vae : gan; }
};

// ---------------------------------------------------------------------------
// Initialization

template <class T = float>
BackboneP<T> init_backbone(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.backbone_seed, {0xBAC4B0}));
  BackboneP<T> bb;
  bb.embed = nn::LinearP<T>::init(rng, cfg.patch_dim(), cfg.dim);
  bb.pos = nn::randn<T>(rng, cfg.tokens(), cfg.dim, 0.02);
  bb.blocks.resize(static_cast<std::size_t>(cfg.blocks));
  for (auto& b : bb.blocks) {
    b.ln1 = nn::LayerNormP<T>::init(cfg.dim);
    b.q = nn::LinearP<T>::init(rng, cfg.dim, cfg.dim);
    b.k = nn::LinearP<T>::init(rng, cfg.dim, cfg.dim);
    b.v = nn::LinearP<T>::init(rng, cfg.dim, cfg.dim);
    b.o = nn::LinearP<T>::init(rng, cfg.dim, cfg.dim);
    b.ln2 = nn::LayerNormP<T>::init(cfg.dim);
    b.fc1 = nn::LinearP<T>::init(rng, cfg.dim, cfg.mlp_hidden, std::sqrt(2.0));
    b.fc1.b = nn::randn<T>(rng, 1, cfg.mlp_hidden, 0.5);
    b.fc2 = nn::LinearP<T>::init(rng, cfg.mlp_hidden, cfg.dim);
  }
  bb.ln_f = nn::LayerNormP<T>::init(cfg.dim);
  return bb;
}

template <class T>
std::uint64_t params_hash(const auto& params) {
  auto copy = params;
  std::uint64_t h = 0xCBF29CE484222325ull;
  copy.visit(
      [&](const std::string& name, Mat<T>& m) {
        h = fnv1a(name.data(), name.size(), h);
        h = fnv1a(m.data(), sizeof(T) * static_cast<std::size_t>(m.size()), h);
      },
      "");
  return h;
}

template <class T = float>
LoraSetP<T> init_lora(const ModelConfig& cfg, Rng& rng) {
  LoraSetP<T> l;
  l.blocks.resize(static_cast<std::size_t>(cfg.blocks));
  for (auto& b : l.blocks) {
    b.q = nn::LoraP<T>::init(rng, cfg.dim, cfg.dim, cfg.lora_rank);
    b.v = nn::LoraP<T>::init(rng, cfg.dim, cfg.dim, cfg.lora_rank);
  }
  return l;
}

template <class T = float>
HeadP<T> init_head(const ModelConfig& cfg, Rng& rng) {
  return {nn::randn<T>(rng, 1, cfg.dim, 1.0 / std::sqrt(static_cast<double>(cfg.dim))), Mat<T>::Zero(1, 1)};
}

template <class T = float>
ExpertP<T> init_expert(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0xE4BE47}));
  ExpertP<T> e;
  e.lora = init_lora<T>(cfg, rng);
  e.head = init_head<T>(cfg, rng);
  return e;
}

template <class T = float>
GateP<T> init_gate(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x6A7E}));
  GateP<T> g;
  g.fc1 = nn::LinearP<T>::init(rng, 2 * cfg.dim, cfg.gate_hidden);
  g.fc2 = nn::LinearP<T>::init(rng, cfg.gate_hidden, 1, 0.1);
  g.fusion = init_head<T>(cfg, rng);
  return g;
}

// ---------------------------------------------------------------------------
// Forward / backward

// Fixed front end: per-patch log energy of six high-pass responses (luma
// Laplacian, horizontal/vertical second differences, the 2-D checkerboard
// filter, and Laplacians of two chroma differences).
inline std::array<Image, kEnergyFilters> energy_maps(const Image& img) {
  Image y(img.height, img.width, 1), cr(img.height, img.width, 1), cb(img.height, img.width, 1);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) {
      const float R = img.at(r, c, 0), G = img.at(r, c, 1), B = img.at(r, c, 2);
      const float Y = 0.299f * R + 0.587f * G + 0.114f * B;
      y.at(r, c) = Y;
      cr.at(r, c) = R - Y;
      cb.at(r, c) = B - Y;
    }
  const Kernel2D h2{3, {0, 0, 0, 1, -2, 1, 0, 0, 0}};
  const Kernel2D v2{3, {0, 1, 0, 0, -2, 0, 0, 1, 0}};
  const Kernel2D checker{3, {1, -2, 1, -2, 4, -2, 1, -2, 1}};
  return {convolve2d(y, kernels::laplacian3()), convolve2d(y, h2),  convolve2d(y, v2),
          convolve2d(y, checker),               convolve2d(cr, kernels::laplacian3()),
          convolve2d(cb, kernels::laplacian3())};
}

inline constexpr double kEnergyFloor = 1e-7;
inline constexpr double kEnergyCenter = -9.0;  // typical log energy of natural 8-bit content
inline constexpr double kEnergyScale = 0.5;

// Tokens are row-major patches: pixels mapped to [-1,1] with (row, col,
// channel) ordering inside a patch, followed by the energy inputs.
template <class T>
Mat<T> patchify(const Image& img, const ModelConfig& cfg) {
  if (img.channels != 3) throw InvalidInput("model: expected 3-channel input");
  if (img.height % cfg.patch != 0 || img.width % cfg.patch != 0)
    throw InvalidInput("model: image " + shape_str(img) + " not divisible by patch size " +
                       std::to_string(cfg.patch));
  if (img.height != cfg.resolution || img.width != cfg.resolution)
    throw InvalidInput("model: image " + shape_str(img) + " does not match resolution " +
                       std::to_string(cfg.resolution));
  const int g = cfg.grid(), p = cfg.patch;
  Mat<T> out(cfg.tokens(), cfg.patch_dim());
  for (int ty = 0; ty < g; ++ty)
    for (int tx = 0; tx < g; ++tx) {
      const int row = ty * g + tx;
      int col = 0;
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
          for (int c = 0; c < 3; ++c) out(row, col++) = static_cast<T>(2.0f * img.at(ty * p + y, tx * p + x, c) - 1.0f);
    }
  const int base = p * p * 3;
  if (cfg.energy_gain == 0.0) {
    out.rightCols(kEnergyFilters).setZero();
    return out;
  }
  const auto maps = energy_maps(img);
  for (int f = 0; f < kEnergyFilters; ++f)
    for (int ty = 0; ty < g; ++ty)
      for (int tx = 0; tx < g; ++tx) {
        double e = 0.0;
        for (int y = 0; y < p; ++y)
          for (int x = 0; x < p; ++x) {
            const double v = maps[static_cast<std::size_t>(f)].at(ty * p + y, tx * p + x);
            e += v * v;
          }
        e /= p * p;
        out(ty * g + tx, base + f) =
            static_cast<T>(cfg.energy_gain * kEnergyScale * (std::log(e + kEnergyFloor) - kEnergyCenter));
      }
  return out;
}

template <class T>
struct BlockCache {
  Mat<T> x_in, ln1, q, k, v, uq, uv, attn, h, ln2, a, g;
  nn::LnCache<T> ln1c, ln2c;
  std::vector<nn::AttnCache<T>> att;  // one per sample
};

// Activations of a batch: rows are (sample, token) pairs, sample-major.
template <class T>
struct FeatureCache {
  int batch = 0;
  int tokens = 0;
  Mat<T> patches;
  std::vector<BlockCache<T>> blocks;
  nn::LnCache<T> lnf;
};

// Which parameter groups receive gradient. Adapters of blocks below
// `lora_from` are treated as frozen; the backward pass stops at the lowest
// block that still needs gradient.
template <class T>
struct FeatureGrads {
  BackboneP<T>* backbone = nullptr;
  LoraSetP<T>* lora = nullptr;
  int lora_from = 0;
};

template <class T>
Mat<T> patchify_batch(std::span<const Image> batch, const ModelConfig& cfg, int threads) {
  const int t = cfg.tokens();
  Mat<T> out(static_cast<Eigen::Index>(batch.size()) * t, cfg.patch_dim());
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    out.middleRows(static_cast<Eigen::Index>(i) * t, t) = patchify<T>(batch[i], cfg);
  });
  return out;
}

template <class T>
Mat<T> block_fwd(const Mat<T>& x, const BlockP<T>& p, const BlockLoraP<T>* lora, const ModelConfig& cfg, int batch,
                 BlockCache<T>& c, int threads) {
  const T s = static_cast<T>(cfg.lora_scale());
  const int t = cfg.tokens();
  c.x_in = x;
  c.ln1 = nn::layernorm_fwd(x, p.ln1, c.ln1c);
  c.q = nn::linear_fwd(c.ln1, p.q, lora ? &lora->q : nullptr, s, &c.uq);
  c.k = nn::linear_fwd<T>(c.ln1, p.k, nullptr, s, nullptr);
  c.v = nn::linear_fwd(c.ln1, p.v, lora ? &lora->v : nullptr, s, &c.uv);
  c.attn.resize(x.rows(), x.cols());
  c.att.resize(static_cast<std::size_t>(batch));
  parallel_for(static_cast<std::size_t>(batch), threads, [&](std::size_t b) {
    const auto r0 = static_cast<Eigen::Index>(b) * t;
    c.attn.middleRows(r0, t) = nn::attention_fwd<T>(c.q.middleRows(r0, t), c.k.middleRows(r0, t),
                                                    c.v.middleRows(r0, t), cfg.heads, c.att[b]);
  });
  c.h = x + nn::linear_fwd<T>(c.attn, p.o, nullptr, s, nullptr);
  c.ln2 = nn::layernorm_fwd(c.h, p.ln2, c.ln2c);
  c.a = nn::linear_fwd<T>(c.ln2, p.fc1, nullptr, s, nullptr);
  c.g = nn::gelu<T>(c.a);
  return c.h + nn::linear_fwd<T>(c.g, p.fc2, nullptr, s, nullptr);
}

template <class T>
Mat<T> block_bwd(const Mat<T>& dout, const BlockP<T>& p, const BlockLoraP<T>* lora, const ModelConfig& cfg, int batch,
                 const BlockCache<T>& c, BlockP<T>* g, BlockLoraP<T>* lg, int threads) {
  const T s = static_cast<T>(cfg.lora_scale());
  const int t = cfg.tokens();
  const Mat<T> dg = nn::linear_bwd<T>(dout, c.g, p.fc2, g ? &g->fc2 : nullptr, nullptr, s, nullptr, nullptr, true);
  const Mat<T> da = (dg.array() * nn::gelu_grad<T>(c.a).array()).matrix();
  const Mat<T> dln2 = nn::linear_bwd<T>(da, c.ln2, p.fc1, g ? &g->fc1 : nullptr, nullptr, s, nullptr, nullptr, true);
  Mat<T> dh = dout + nn::layernorm_bwd(dln2, p.ln2, c.ln2c, g ? &g->ln2 : nullptr);
  const Mat<T> dattn = nn::linear_bwd<T>(dh, c.attn, p.o, g ? &g->o : nullptr, nullptr, s, nullptr, nullptr, true);
  Mat<T> dq(dattn.rows(), dattn.cols()), dk(dattn.rows(), dattn.cols()), dv(dattn.rows(), dattn.cols());
  parallel_for(static_cast<std::size_t>(batch), threads, [&](std::size_t b) {
    const auto r0 = static_cast<Eigen::Index>(b) * t;
    Mat<T> q = c.q.middleRows(r0, t), k = c.k.middleRows(r0, t), v = c.v.middleRows(r0, t);
    Mat<T> dqb, dkb, dvb;
    nn::attention_bwd<T>(dattn.middleRows(r0, t), q, k, v, cfg.heads, c.att[b], dqb, dkb, dvb);
    dq.middleRows(r0, t) = dqb;
    dk.middleRows(r0, t) = dkb;
    dv.middleRows(r0, t) = dvb;
  });
  Mat<T> dln1 = nn::linear_bwd(dq, c.ln1, p.q, g ? &g->q : nullptr, lora ? &lora->q : nullptr, s, &c.uq,
                               lg ? &lg->q : nullptr, true);
  dln1 += nn::linear_bwd<T>(dk, c.ln1, p.k, g ? &g->k : nullptr, nullptr, s, nullptr, nullptr, true);
  dln1 += nn::linear_bwd(dv, c.ln1, p.v, g ? &g->v : nullptr, lora ? &lora->v : nullptr, s, &c.uv,
                         lg ? &lg->v : nullptr, true);
  dh += nn::layernorm_bwd(dln1, p.ln1, c.ln1c, g ? &g->ln1 : nullptr);
  return dh;
}

// Mean-pooled final-norm token features, one row per image. `lora` may be null.
template <class T>
Mat<T> extract_features(const BackboneP<T>& bb, const LoraSetP<T>* lora, const ModelConfig& cfg,
                        std::span<const Image> batch, FeatureCache<T>& c, int threads = 1) {
  if (batch.empty()) throw InvalidInput("model: empty batch");
  const int t = cfg.tokens();
  c.batch = static_cast<int>(batch.size());
  c.tokens = t;
  c.patches = patchify_batch<T>(batch, cfg, threads);
  Mat<T> x = nn::linear_fwd<T>(c.patches, bb.embed, nullptr, T(1), nullptr);
  for (int b = 0; b < c.batch; ++b) x.middleRows(static_cast<Eigen::Index>(b) * t, t) += bb.pos;
  c.blocks.resize(bb.blocks.size());
  for (std::size_t i = 0; i < bb.blocks.size(); ++i)
    x = block_fwd(x, bb.blocks[i], lora ? &lora->blocks[i] : nullptr, cfg, c.batch, c.blocks[i], threads);
  const Mat<T> y = nn::layernorm_fwd(x, bb.ln_f, c.lnf);
  Mat<T> f(c.batch, y.cols());
  for (int b = 0; b < c.batch; ++b) f.row(b) = y.middleRows(static_cast<Eigen::Index>(b) * t, t).colwise().mean();
  return f;
}

template <class T>
Mat<T> extract_features(const BackboneP<T>& bb, const LoraSetP<T>* lora, const ModelConfig& cfg, const Image& img) {
  FeatureCache<T> c;
  return extract_features(bb, lora, cfg, std::span<const Image>(&img, 1), c);
}

// dF holds one row per image.
template <class T>
void features_bwd(const Mat<T>& dF, const BackboneP<T>& bb, const LoraSetP<T>* lora, const ModelConfig& cfg,
                  const FeatureCache<T>& c, const FeatureGrads<T>& gs, int threads = 1) {
  const int nb = static_cast<int>(bb.blocks.size());
  int lowest = nb;
  if (gs.lora) lowest = std::min(lowest, std::max(0, gs.lora_from));
  if (gs.backbone) lowest = 0;
  if (lowest >= nb && !gs.backbone) return;
  const int t = c.tokens;
  Mat<T> dy(static_cast<Eigen::Index>(c.batch) * t, dF.cols());
  for (int b = 0; b < c.batch; ++b)
    dy.middleRows(static_cast<Eigen::Index>(b) * t, t).rowwise() = dF.row(b) / static_cast<T>(t);
  Mat<T> dx = nn::layernorm_bwd(dy, bb.ln_f, c.lnf, gs.backbone ? &gs.backbone->ln_f : nullptr);
  for (int i = nb - 1; i >= lowest; --i) {
    const auto ui = static_cast<std::size_t>(i);
    BlockLoraP<T>* lg = (gs.lora && i >= gs.lora_from) ? &gs.lora->blocks[ui] : nullptr;
    dx = block_bwd(dx, bb.blocks[ui], lora ? &lora->blocks[ui] : nullptr, cfg, c.batch, c.blocks[ui],
                   gs.backbone ? &gs.backbone->blocks[ui] : nullptr, lg, threads);
  }
  if (gs.backbone) {
    for (int b = 0; b < c.batch; ++b) gs.backbone->pos += dx.middleRows(static_cast<Eigen::Index>(b) * t, t);
    nn::linear_bwd<T>(dx, c.patches, bb.embed, &gs.backbone->embed, nullptr, T(1), nullptr, nullptr, false);
  }
}

// One logit per feature row.
template <class T>
nn::ColVec<T> head_fwd(const HeadP<T>& h, const Mat<T>& f) {
  return (f * h.w.transpose()).col(0).array() + h.b(0, 0);
}

// Returns dF; accumulates into g when non-null.
template <class T>
Mat<T> head_bwd(const nn::ColVec<T>& dlogits, const HeadP<T>& h, const Mat<T>& f, HeadP<T>* g) {
  if (g) {
    g->w.noalias() += dlogits.transpose() * f;
    g->b(0, 0) += dlogits.sum();
  }
  return dlogits * h.w;
}

template <class T>
struct ExpertOutput {
  nn::ColVec<T> logits;
  Mat<T> features;
};

template <class T>
ExpertOutput<T> forward_expert(const BackboneP<T>& bb, const LoraSetP<T>* lora, const HeadP<T>& head,
                               const ModelConfig& cfg, std::span<const Image> batch, FeatureCache<T>* cache = nullptr,
                               int threads = 1) {
  FeatureCache<T> local;
  FeatureCache<T>& c = cache ? *cache : local;
  ExpertOutput<T> out;
  out.features = extract_features(bb, lora, cfg, batch, c, threads);
  out.logits = head_fwd(head, out.features);
  return out;
}

template <class T>
ExpertOutput<T> forward_expert(const BackboneP<T>& bb, const ExpertP<T>& e, const ModelConfig& cfg,
                               std::span<const Image> batch, FeatureCache<T>* cache = nullptr, int threads = 1) {
  return forward_expert(bb, &e.lora, e.head, cfg, batch, cache, threads);
}

template <class T>
void expert_bwd(const nn::ColVec<T>& dlogits, const BackboneP<T>& bb, const ExpertP<T>& e, const ModelConfig& cfg,
                const FeatureCache<T>& c, const Mat<T>& features, ExpertP<T>* g, BackboneP<T>* gbb, int lora_from = 0,
                int threads = 1) {
  const Mat<T> dF = head_bwd(dlogits, e.head, features, g ? &g->head : nullptr);
  features_bwd(dF, bb, &e.lora, cfg, c, FeatureGrads<T>{gbb, g ? &g->lora : nullptr, lora_from}, threads);
}

// ---------------------------------------------------------------------------
// Fusion

template <class T>
Mat<T> fuse(const Mat<T>& f1, const Mat<T>& f2, T w) {
  if (f1.rows() != f2.rows() || f1.cols() != f2.cols()) throw InvalidInput("fuse: feature dimension mismatch");
  return (T(1) - w) * f1 + w * f2;
}

// Row-wise fusion with one weight per row.
template <class T>
Mat<T> fuse_rows(const Mat<T>& f1, const Mat<T>& f2, const nn::ColVec<T>& w) {
  if (f1.rows() != f2.rows() || f1.cols() != f2.cols() || w.size() != f1.rows())
    throw InvalidInput("fuse: feature dimension mismatch");
  return (f1.array().colwise() * (T(1) - w.array())).matrix() + (f2.array().colwise() * w.array()).matrix();
}

template <class T>
struct SefCache {
  FeatureCache<T> c1, c2;
  Mat<T> f1, f2, gin, hid, fused;
  nn::ColVec<T> w;
  bool forced = false;
};

template <class T>
struct SefOutput {
  nn::ColVec<T> logits;
  nn::ColVec<T> w;
  Mat<T> f1, f2;
};

template <class T>
nn::ColVec<T> gate_fwd(const GateP<T>& g, const Mat<T>& f1, const Mat<T>& f2, Mat<T>* gin_out = nullptr,
                       Mat<T>* hid_out = nullptr) {
  Mat<T> gin(f1.rows(), f1.cols() + f2.cols());
  gin << f1, f2;
  Mat<T> hid = nn::linear_fwd<T>(gin, g.fc1, nullptr, T(1), nullptr).array().tanh().matrix();
  const Mat<T> z = nn::linear_fwd<T>(hid, g.fc2, nullptr, T(1), nullptr);
  nn::ColVec<T> w = z.col(0).unaryExpr([](T v) { return nn::sigmoid(v); });
  if (gin_out) *gin_out = std::move(gin);
  if (hid_out) *hid_out = std::move(hid);
  return w;
}

// Experts' own heads are not used; the fused feature goes through the gate's
// fusion head. `force_w` overrides the gate output for every sample.
template <class T>
SefOutput<T> forward_sef(const BackboneP<T>& bb, const SefP<T>& m, const ModelConfig& cfg,
                         std::span<const Image> batch, std::optional<T> force_w = std::nullopt,
                         SefCache<T>* cache = nullptr, int threads = 1) {
  SefCache<T> local;
  SefCache<T>& c = cache ? *cache : local;
  c.f1 = extract_features(bb, &m.vae.lora, cfg, batch, c.c1, threads);
  c.f2 = extract_features(bb, &m.gan.lora, cfg, batch, c.c2, threads);
  c.forced = force_w.has_value();
  c.w = c.forced ? nn::ColVec<T>::Constant(c.f1.rows(), *force_w) : gate_fwd(m.gate, c.f1, c.f2, &c.gin, &c.hid);
  c.fused = fuse_rows(c.f1, c.f2, c.w);
  return {head_fwd(m.gate.fusion, c.fused), c.w, c.f1, c.f2};
}

// Backward from dL/dlogits into the gate, fusion head and expert LoRA blocks
// at index >= lora_from. Expert heads receive nothing.
template <class T>
void sef_bwd(const nn::ColVec<T>& dlogits, const BackboneP<T>& bb, const SefP<T>& m, const ModelConfig& cfg,
             const SefCache<T>& c, SefP<T>* g, int lora_from, bool train_lora = true, int threads = 1) {
  const Mat<T> dfused = head_bwd(dlogits, m.gate.fusion, c.fused, g ? &g->gate.fusion : nullptr);
  Mat<T> df1 = (dfused.array().colwise() * (T(1) - c.w.array())).matrix();
  Mat<T> df2 = (dfused.array().colwise() * c.w.array()).matrix();
  if (!c.forced) {
    const nn::ColVec<T> dw = (dfused.array() * (c.f2 - c.f1).array()).rowwise().sum();
    const Mat<T> dz = (dw.array() * c.w.array() * (T(1) - c.w.array())).matrix();
    const Mat<T> dhid = nn::linear_bwd<T>(dz, c.hid, m.gate.fc2, g ? &g->gate.fc2 : nullptr, nullptr, T(1), nullptr,
                                          nullptr, true);
    const Mat<T> dpre = (dhid.array() * (T(1) - c.hid.array().square())).matrix();
    const Mat<T> dgin = nn::linear_bwd<T>(dpre, c.gin, m.gate.fc1, g ? &g->gate.fc1 : nullptr, nullptr, T(1),
                                          nullptr, nullptr, true);
    const auto d = c.f1.cols();
    df1 += dgin.leftCols(d);
    df2 += dgin.rightCols(d);
  }
  if (!train_lora || !g) return;
  features_bwd(df1, bb, &m.vae.lora, cfg, c.c1, FeatureGrads<T>{nullptr, &g->vae.lora, lora_from}, threads);
  features_bwd(df2, bb, &m.gan.lora, cfg, c.c2, FeatureGrads<T>{nullptr, &g->gan.lora, lora_from}, threads);
}

// ---------------------------------------------------------------------------
// Inference wrapper used by evaluation.

struct Detector {
  ModelConfig cfg;
  BackboneP<float> backbone;
  std::optional<ExpertP<float>> expert;
  std::optional<SefP<float>> sef;

  std::vector<float> logits(std::span<const Image> batch, int threads = 1) const {
    nn::ColVec<float> z;
    if (sef)
      z = forward_sef<float>(backbone, *sef, cfg, batch, std::nullopt, nullptr, threads).logits;
    else if (expert)
      z = forward_expert<float>(backbone, *expert, cfg, batch, nullptr, threads).logits;
    else
      throw StateError("detector: no model loaded");
    return {z.data(), z.data() + z.size()};
  }
};

}  // namespace sef
