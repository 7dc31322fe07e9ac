#pragma once

// Binary checkpoint files.
//
//   "SEFCKPT\0"  8 bytes
//   u32          format version
//   u64 + bytes  metadata JSON
//   u32          tensor count, then per tensor:
//                  u16 + bytes name, u32 rows, u32 cols, u8 dtype (0 = f32),
//                  u64 byte offset into the payload
//   u64 + bytes  payload, little-endian f32 tensors back to back
//   u64          FNV-1a checksum of everything above
//
// The backbone is not stored with experts or fused models; it is regenerated
// from `backbone_seed` and checked against the recorded hash.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sef/errors.hpp"
#include "sef/model.hpp"
#include "sef/nn.hpp"
#include "sef/train.hpp"

namespace sef {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCkptMagic[8] = {'S', 'E', 'F', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCkptVersion = 1;

struct TensorBlob {
  int rows = 0, cols = 0;
  std::vector<float> data;
};

struct CheckpointFile {
  nlohmann::json meta;
  std::map<std::string, TensorBlob> tensors;
};

inline nlohmann::json model_to_json(const ModelConfig& m) {
  return {{"resolution", m.resolution}, {"patch", m.patch},
          {"dim", m.dim},               {"heads", m.heads},
          {"blocks", m.blocks},         {"mlp_hidden", m.mlp_hidden},
          {"lora_rank", m.lora_rank},   {"lora_alpha", m.lora_alpha},
          {"gate_hidden", m.gate_hidden}, {"backbone_seed", m.backbone_seed},
          {"energy_gain", m.energy_gain}};
}

inline ModelConfig model_from_json(const nlohmann::json& j) {
  try {
    ModelConfig m;
    m.resolution = j.at("resolution").get<int>();
    m.patch = j.at("patch").get<int>();
    m.dim = j.at("dim").get<int>();
    m.heads = j.at("heads").get<int>();
    m.blocks = j.at("blocks").get<int>();
    m.mlp_hidden = j.at("mlp_hidden").get<int>();
    m.lora_rank = j.at("lora_rank").get<int>();
    m.lora_alpha = j.at("lora_alpha").get<double>();
    m.gate_hidden = j.at("gate_hidden").get<int>();
    m.backbone_seed = j.at("backbone_seed").get<std::uint64_t>();
    m.energy_gain = j.at("energy_gain").get<double>();
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad model metadata: ") + e.what());
  } catch (const InvalidInput& e) {
    throw FormatError(std::string("checkpoint: bad model metadata: ") + e.what());
  }
}

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(U));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  std::vector<char>& buffer() { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  ByteReader(const char* p, std::size_t n) : p_(p), n_(n) {}
  template <class U>
  U get() {
    U v;
    need(sizeof(U));
    std::memcpy(&v, p_ + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(p_ + pos_, n);
    pos_ += n;
    return s;
  }
  const char* take(std::size_t n) {
    need(n);
    const char* q = p_ + pos_;
    pos_ += n;
    return q;
  }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  void need(std::size_t k) const {
    if (k > n_ - pos_) throw FormatError("checkpoint: truncated file");
  }
  const char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <class P>
void write_checkpoint_file(const std::filesystem::path& path, const nlohmann::json& meta, const P& params) {
  auto named = nn::tensors(const_cast<P&>(params));
  detail::ByteWriter w;
  w.bytes(kCkptMagic, sizeof kCkptMagic);
  w.put<std::uint32_t>(kCkptVersion);
  const std::string js = meta.dump();
  w.put<std::uint64_t>(js.size());
  w.bytes(js.data(), js.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(named.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, m] : named) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m->rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m->cols()));
    w.put<std::uint8_t>(0);
    w.put<std::uint64_t>(offset);
    offset += static_cast<std::uint64_t>(m->size()) * sizeof(float);
  }
  w.put<std::uint64_t>(offset);
  for (const auto& [name, m] : named) w.bytes(m->data(), static_cast<std::size_t>(m->size()) * sizeof(float));
  auto& buf = w.buffer();
  const std::uint64_t sum = fnv1a(buf.data(), buf.size());
  w.put<std::uint64_t>(sum);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

inline CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof kCkptMagic + sizeof(std::uint64_t)) throw FormatError("checkpoint: truncated file");
  if (std::memcmp(buf.data(), kCkptMagic, sizeof kCkptMagic) != 0) throw FormatError("checkpoint: bad magic");

  const std::size_t body = buf.size() - sizeof(std::uint64_t);
  detail::ByteReader r(buf.data(), body);
  r.take(sizeof kCkptMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kCkptVersion) throw FormatError("checkpoint: unknown version " + std::to_string(version));
  CheckpointFile f;
  const auto meta_len = r.get<std::uint64_t>();
  if (meta_len > r.remaining()) throw FormatError("checkpoint: truncated file");
  try {
    f.meta = nlohmann::json::parse(r.str(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  struct Entry {
    std::string name;
    std::uint32_t rows, cols;
    std::uint64_t offset;
  };
  const auto count = r.get<std::uint32_t>();
  std::vector<Entry> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str(r.get<std::uint16_t>());
    e.rows = r.get<std::uint32_t>();
    e.cols = r.get<std::uint32_t>();
    if (r.get<std::uint8_t>() != 0) throw FormatError("checkpoint: unsupported dtype for " + e.name);
    e.offset = r.get<std::uint64_t>();
    table.push_back(std::move(e));
  }
  const auto payload_len = r.get<std::uint64_t>();
  if (payload_len != r.remaining()) throw FormatError("checkpoint: payload size mismatch (truncated?)");
  const char* payload = r.take(payload_len);

  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + body, sizeof stored);
  if (stored != fnv1a(buf.data(), body)) throw FormatError("checkpoint: checksum mismatch");

  for (const auto& e : table) {
    const std::uint64_t bytes = static_cast<std::uint64_t>(e.rows) * e.cols * sizeof(float);
    if (e.offset > payload_len || bytes > payload_len - e.offset)
      throw FormatError("checkpoint: tensor " + e.name + " exceeds payload");
    TensorBlob t;
    t.rows = static_cast<int>(e.rows);
    t.cols = static_cast<int>(e.cols);
    t.data.resize(static_cast<std::size_t>(e.rows) * e.cols);
    std::memcpy(t.data.data(), payload + e.offset, bytes);
    if (!f.tensors.emplace(e.name, std::move(t)).second) throw FormatError("checkpoint: duplicate tensor " + e.name);
  }
  return f;
}

// Fills `params` (already shaped) from the file; every tensor must be present
// with the expected shape and nothing else may be left over.
template <class P>
void fill_params(P& params, const CheckpointFile& f) {
  auto named = nn::tensors(params);
  if (named.size() != f.tensors.size())
    throw FormatError("checkpoint: expected " + std::to_string(named.size()) + " tensors, found " +
                      std::to_string(f.tensors.size()));
  for (auto& [name, m] : named) {
    const auto it = f.tensors.find(name);
    if (it == f.tensors.end()) throw FormatError("checkpoint: missing tensor " + name);
    const auto& t = it->second;
    if (t.rows != m->rows() || t.cols != m->cols())
      throw FormatError("checkpoint: shape mismatch for " + name + ": file " + std::to_string(t.rows) + "x" +
                        std::to_string(t.cols) + ", expected " + std::to_string(m->rows()) + "x" +
                        std::to_string(m->cols()));
    std::memcpy(m->data(), t.data.data(), t.data.size() * sizeof(float));
  }
}

namespace detail {

template <class C>
nlohmann::json common_meta(const C& c, const char* kind) {
  return {{"kind", kind},
          {"model", model_to_json(c.model)},
          {"iterations", c.iterations},
          {"seed", c.seed},
          {"config_hash", c.config_hash},
          {"backbone_hash", c.backbone_hash},
          {"train_seed_begin", c.train_seed_begin},
          {"train_seed_end", c.train_seed_end}};
}

template <class C>
void read_common(C& c, const nlohmann::json& m, const char* kind) {
  try {
    if (m.at("kind").get<std::string>() != kind)
      throw FormatError("checkpoint: expected a " + std::string(kind) + " checkpoint, found '" +
                        m.at("kind").get<std::string>() + "'");
    c.model = model_from_json(m.at("model"));
    c.iterations = m.at("iterations").get<std::int64_t>();
    c.seed = m.at("seed").get<std::uint64_t>();
    c.config_hash = m.at("config_hash").get<std::uint64_t>();
    c.backbone_hash = m.at("backbone_hash").get<std::uint64_t>();
    c.train_seed_begin = m.at("train_seed_begin").get<std::uint64_t>();
    c.train_seed_end = m.at("train_seed_end").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad metadata: ") + e.what());
  }
}

}  // namespace detail

inline void save_checkpoint(const ExpertCheckpoint& c, const std::filesystem::path& path) {
  auto meta = detail::common_meta(c, "expert");
  meta["domain"] = c.domain;
  write_checkpoint_file(path, meta, c.params);
}

inline void save_checkpoint(const SefCheckpoint& c, const std::filesystem::path& path) {
  auto meta = detail::common_meta(c, "sef");
  meta["unfreeze_k"] = c.unfreeze_k;
  write_checkpoint_file(path, meta, c.params);
}

inline ExpertCheckpoint load_expert_checkpoint(const std::filesystem::path& path) {
  const auto f = read_checkpoint_file(path);
  ExpertCheckpoint c;
  detail::read_common(c, f.meta, "expert");
  try {
    c.domain = f.meta.at("domain").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  if (c.domain != "vae" && c.domain != "gan" && c.domain != "mixed")
    throw FormatError("checkpoint: unknown domain tag '" + c.domain + "'");
  c.params = init_expert<float>(c.model, 0);
  fill_params(c.params, f);
  return c;
}

inline SefCheckpoint load_sef_checkpoint(const std::filesystem::path& path) {
  const auto f = read_checkpoint_file(path);
  SefCheckpoint c;
  detail::read_common(c, f.meta, "sef");
  try {
    c.unfreeze_k = f.meta.at("unfreeze_k").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  c.params.vae = init_expert<float>(c.model, 0);
  c.params.gan = init_expert<float>(c.model, 0);
  c.params.gate = init_gate<float>(c.model, 0);
  fill_params(c.params, f);
  return c;
}

// Reads only the "kind" field ("expert" or "sef").
inline std::string checkpoint_kind(const std::filesystem::path& path) {
  const auto f = read_checkpoint_file(path);
  try {
    return f.meta.at("kind").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad metadata: ") + e.what());
  }
}

// Regenerates the frozen backbone for a checkpoint and confirms it is the
// one the checkpoint was trained against.
inline BackboneP<float> backbone_for(const ModelConfig& model, std::uint64_t expected_hash) {
  auto bb = init_backbone(model);
  const auto h = params_hash<float>(bb);
  if (h != expected_hash)
    throw StateError("backbone hash mismatch: checkpoint expects " + std::to_string(expected_hash) + ", regenerated " +
                     std::to_string(h));
  return bb;
}

}  // namespace sef
