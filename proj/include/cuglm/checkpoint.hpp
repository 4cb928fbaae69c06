#pragma once

// Checkpoint container.
//
//   "CUGLMCKP"                       8-byte magic
//   u32 format version
//   u32 header length, header bytes  UTF-8 `key=value` lines
//   u32 tensor count
//   per tensor: u32 name length, name, u32 rank, u64 dims[rank],
//               row-major float32 data
//
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cuglm/corpus.hpp"
#include "cuglm/error.hpp"
#include "cuglm/model.hpp"

namespace cuglm {

inline constexpr char kCheckpointMagic[8] = {'C', 'U', 'G', 'L', 'M', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<float> data;
};

struct Checkpoint {
  ModelConfig model;
  std::uint64_t token_vocab_fingerprint = 0;
  std::uint64_t type_vocab_fingerprint = 0;
  std::map<std::string, std::string> meta;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 4);
}
inline void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 8);
}
inline std::uint64_t get_le(std::istream& in, int bytes) {
  unsigned char b[8] = {};
  in.read(reinterpret_cast<char*>(b), bytes);
  if (!in) throw CheckpointError("truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
inline std::string get_bytes(std::istream& in, std::uint64_t n) {
  if (n > (1ULL << 32)) throw CheckpointError("implausible length in checkpoint");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw CheckpointError("truncated checkpoint");
  return s;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

inline std::uint64_t parse_u64(const std::string& s, int base = 10) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used, base);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw CheckpointError("bad integer '" + s + "' in checkpoint header");
  }
}

}  // namespace detail

inline std::map<std::string, std::string> model_config_fields(const ModelConfig& c) {
  std::ostringstream dropout;
  dropout.precision(17);
  dropout << c.dropout;
  return {{"model.layers", std::to_string(c.layers)},
          {"model.hidden", std::to_string(c.hidden)},
          {"model.heads", std::to_string(c.heads)},
          {"model.ff", std::to_string(c.ff)},
          {"model.type_hidden", std::to_string(c.type_hidden)},
          {"model.token_hidden", std::to_string(c.token_hidden)},
          {"model.vocab_token", std::to_string(c.vocab_token)},
          {"model.vocab_type", std::to_string(c.vocab_type)},
          {"model.max_seq", std::to_string(c.max_seq)},
          {"model.dropout", dropout.str()},
          {"model.tie_embeddings", c.tie_embeddings ? "1" : "0"}};
}

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  std::map<std::string, std::string> header = model_config_fields(ck.model);
  header["format_version"] = std::to_string(kCheckpointVersion);
  header["vocab.token_fingerprint"] = detail::hex64(ck.token_vocab_fingerprint);
  header["vocab.type_fingerprint"] = detail::hex64(ck.type_vocab_fingerprint);
  for (const auto& [k, v] : ck.meta) header["meta." + k] = v;
  std::string text;
  for (const auto& [k, v] : header) text += k + "=" + v + "\n";

  out.write(kCheckpointMagic, 8);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    std::uint64_t count = 1;
    for (auto d : t.shape) count *= d;
    if (count != t.data.size()) throw CheckpointError("tensor " + t.name + " shape/data mismatch");
    detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::put_u64(out, d);
    for (float f : t.data) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
}

inline Checkpoint read_checkpoint(std::istream& in) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointError("not a checkpoint file (bad magic)");
  const auto version = detail::get_le(in, 4);
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const std::string text = detail::get_bytes(in, detail::get_le(in, 4));

  std::map<std::string, std::string> header;
  std::istringstream hs(text);
  for (std::string line; std::getline(hs, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("bad header line '" + line + "'");
    header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto field = [&](const std::string& k) -> const std::string& {
    auto it = header.find(k);
    if (it == header.end()) throw CheckpointError("checkpoint header lacks " + k);
    return it->second;
  };

  Checkpoint ck;
  auto size_field = [&](const char* k) {
    return static_cast<std::size_t>(detail::parse_u64(field(k)));
  };
  ck.model.layers = size_field("model.layers");
  ck.model.hidden = size_field("model.hidden");
  ck.model.heads = size_field("model.heads");
  ck.model.ff = size_field("model.ff");
  ck.model.type_hidden = size_field("model.type_hidden");
  ck.model.token_hidden = size_field("model.token_hidden");
  ck.model.vocab_token = size_field("model.vocab_token");
  ck.model.vocab_type = size_field("model.vocab_type");
  ck.model.max_seq = size_field("model.max_seq");
  try {
    ck.model.dropout = std::stod(field("model.dropout"));
  } catch (const std::invalid_argument&) {
    throw CheckpointError("bad model.dropout");
  }
  ck.model.tie_embeddings = field("model.tie_embeddings") == "1";
  ck.token_vocab_fingerprint = detail::parse_u64(field("vocab.token_fingerprint"), 16);
  ck.type_vocab_fingerprint = detail::parse_u64(field("vocab.type_fingerprint"), 16);
  for (const auto& [k, v] : header)
    if (k.starts_with("meta.")) ck.meta[k.substr(5)] = v;

  const auto count = detail::get_le(in, 4);
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = detail::get_bytes(in, detail::get_le(in, 4));
    const auto rank = detail::get_le(in, 4);
    if (rank > 8) throw CheckpointError("implausible tensor rank for " + t.name);
    std::uint64_t n = 1;
    for (std::uint64_t r = 0; r < rank; ++r) {
      t.shape.push_back(detail::get_le(in, 8));
      n *= t.shape.back();
    }
    if (n > (1ULL << 34)) throw CheckpointError("implausible tensor size for " + t.name);
    t.data.resize(n);
    for (auto& f : t.data) f = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(in, 4)));
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  write_checkpoint(out, ck);
  if (!out) throw IoError("write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_checkpoint(in);
}

template <class T>
NamedTensor to_named_tensor(const std::string& name, const Matrix<T>& m) {
  NamedTensor t{name, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, {}};
  t.data.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
  return t;
}

template <class T>
void from_named_tensor(const NamedTensor& t, Matrix<T>& m) {
  const std::vector<std::uint64_t> want = {static_cast<std::uint64_t>(m.rows()),
                                           static_cast<std::uint64_t>(m.cols())};
  if (t.shape != want)
    throw CheckpointError("tensor " + t.name + " has shape mismatch with the model");
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(t.data[static_cast<std::size_t>(i)]);
}

template <class T>
Checkpoint make_checkpoint(const ParameterSet<T>& params, const Vocabs& vocabs,
                           std::map<std::string, std::string> meta = {}) {
  Checkpoint ck;
  ck.model = params.config();
  ck.token_vocab_fingerprint = vocabs.token.fingerprint();
  ck.type_vocab_fingerprint = vocabs.type.fingerprint();
  ck.meta = std::move(meta);
  params.for_each([&](const Parameter<T>& p) { ck.tensors.push_back(to_named_tensor(p.name, p.value)); });
  return ck;
}

/// Copies every model tensor out of `ck`; each expected name must be present
/// with the expected shape.
template <class T>
void load_parameters(const Checkpoint& ck, ParameterSet<T>& params) {
  if (!(ck.model == params.config()))
    throw CheckpointError("checkpoint model configuration differs from the target model");
  params.for_each([&](Parameter<T>& p) {
    const NamedTensor* t = ck.find(p.name);
    if (!t) throw CheckpointError("checkpoint lacks tensor " + p.name);
    from_named_tensor(*t, p.value);
    p.grad.setZero();
  });
}

template <class T>
ParameterSet<T> parameters_from(const Checkpoint& ck) {
  ParameterSet<T> p(ck.model);
  load_parameters(ck, p);
  return p;
}

inline void check_vocabs(const Checkpoint& ck, const Vocabs& vocabs) {
  if (ck.token_vocab_fingerprint != vocabs.token.fingerprint() ||
      ck.type_vocab_fingerprint != vocabs.type.fingerprint())
    throw VocabMismatch("checkpoint vocabulary fingerprints differ from the supplied vocabularies");
  if (ck.model.vocab_token != vocabs.token.size() || ck.model.vocab_type != vocabs.type.size())
    throw VocabMismatch("checkpoint vocabulary sizes differ from the supplied vocabularies");
}

}  // namespace cuglm
