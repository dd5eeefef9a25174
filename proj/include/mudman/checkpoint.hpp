#pragma once

// Binary checkpoint container (little-endian host layout):
//
//   magic "MUDMANCK" | u32 version | u32 scalar_bytes
//   arch: 6 x u64 (vocab, d_model, n_blocks, n_heads, d_mlp, context) | u8 mlp_kind
//   u64 n_meta  { u64 key_len | key | f64 value } * n_meta
//   u64 n_params { u64 name_len | name | u64 rows | u64 cols | rows*cols scalars } * n_params
//
// Parameters are written in registry order, so a load reproduces the registry
// bit for bit.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "mudman/model.hpp"

namespace mudman {

struct Checkpoint {
  /// Named scalars recorded alongside the weights (e.g. plateau losses).
  std::map<std::string, double> metadata;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'M', 'U', 'D', 'M', 'A', 'N', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename V>
void put(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V get(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw Error("checkpoint truncated");
  return v;
}
inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string get_string(std::istream& is) {
  const auto n = get<std::uint64_t>(is);
  if (n > (1u << 20)) throw Error("checkpoint string too long");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw Error("checkpoint truncated");
  return s;
}

}  // namespace detail

template <typename T>
void write_checkpoint(std::ostream& os, const ModelState<T>& model, const Checkpoint& meta = {}) {
  using namespace detail;
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint32_t>(os, sizeof(T));
  const ArchSpec& a = model.arch;
  for (std::uint64_t v : {a.vocab_size, a.d_model, a.n_blocks, a.n_heads, a.d_mlp, a.context_len}) put(os, v);
  put<std::uint8_t>(os, a.mlp_kind == MlpKind::gated ? 0 : 1);
  put<std::uint64_t>(os, meta.metadata.size());
  for (const auto& [k, v] : meta.metadata) {
    put_string(os, k);
    put<double>(os, v);
  }
  put<std::uint64_t>(os, model.params.size());
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const auto& m = model.params.at(i);
    put_string(os, model.params.name(i));
    put<std::uint64_t>(os, m.rows());
    put<std::uint64_t>(os, m.cols());
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(T)));
  }
}

template <typename T>
ModelState<T> read_checkpoint(std::istream& is, Checkpoint* meta = nullptr) {
  using namespace detail;
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw Error("not a checkpoint file");
  if (get<std::uint32_t>(is) != kCheckpointVersion) throw Error("unsupported checkpoint version");
  if (get<std::uint32_t>(is) != sizeof(T)) throw Error("checkpoint scalar width mismatch");
  ArchSpec a;
  a.vocab_size = get<std::uint64_t>(is);
  a.d_model = get<std::uint64_t>(is);
  a.n_blocks = get<std::uint64_t>(is);
  a.n_heads = get<std::uint64_t>(is);
  a.d_mlp = get<std::uint64_t>(is);
  a.context_len = get<std::uint64_t>(is);
  a.mlp_kind = get<std::uint8_t>(is) == 0 ? MlpKind::gated : MlpKind::plain;
  a.validate();
  Checkpoint local;
  const auto n_meta = get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n_meta; ++i) {
    auto k = get_string(is);
    local.metadata[k] = get<double>(is);
  }
  ParamRegistry<T> reg;
  const auto n = get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    auto name = get_string(is);
    const auto r = get<std::uint64_t>(is);
    const auto c = get<std::uint64_t>(is);
    if (r * c > (std::uint64_t{1} << 28)) throw Error("checkpoint matrix too large");
    Matrix<T> m(r, c);
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(T)));
    if (!is) throw Error("checkpoint truncated");
    reg.add(std::move(name), std::move(m));
  }
  if (meta) *meta = std::move(local);
  return assemble_model(a, std::move(reg));
}

template <typename T>
void save_checkpoint(const std::string& path, const ModelState<T>& model, const Checkpoint& meta = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open for writing: " + path);
  write_checkpoint(os, model, meta);
  if (!os) throw Error("write failed: " + path);
}

template <typename T>
ModelState<T> load_checkpoint(const std::string& path, Checkpoint* meta = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint: " + path);
  return read_checkpoint<T>(is, meta);
}

/// Fingerprint of the serialized bytes; identical weights give identical hashes.
template <typename T>
std::uint64_t checkpoint_hash(const ModelState<T>& model, const Checkpoint& meta = {}) {
  std::ostringstream os;
  write_checkpoint(os, model, meta);
  const std::string s = os.str();
  return fnv1a(s.data(), s.size());
}

}  // namespace mudman
