#pragma once

// Checkpoint file: 4-byte magic "SDML", format version byte, precision
// byte (sizeof scalar), u32 record count, then per tensor: u16 name
// length, name bytes, u8 rank, u32 dims, raw little-endian values.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "sdml/errors.hpp"
#include "sdml/params.hpp"

namespace sdml {

inline constexpr char kCkptMagic[4] = {'S', 'D', 'M', 'L'};
inline constexpr std::uint8_t kCkptVersion = 1;

namespace detail {

template <class V>
void write_pod(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V read_pod(std::istream& is, const char* what) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) {
    throw LoadError(std::string("checkpoint truncated reading ") + what);
  }
  return v;
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw LoadError("cannot open checkpoint for writing: " + path);
  os.write(kCkptMagic, 4);
  detail::write_pod<std::uint8_t>(os, kCkptVersion);
  detail::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(sizeof(T)));
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(store.count()));
  for (const auto& p : store.tensors()) {
    const std::string& name = p.name();
    detail::write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(p.rank()));
    for (int d : p.shape()) detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    const auto v = p.data();
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(T)));
  }
  if (!os) throw LoadError("write failed: " + path);
}

// Loads values into an already-built store; every record must match an
// existing parameter by name and shape, and every parameter must be
// covered.
template <class T>
void load_checkpoint(const std::string& path, ParamStore<T>& store) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCkptMagic, 4) != 0) {
    throw LoadError("bad checkpoint magic: " + path);
  }
  const auto version = detail::read_pod<std::uint8_t>(is, "version");
  if (version != kCkptVersion) {
    throw LoadError("checkpoint schema version " + std::to_string(version) + " unsupported (want " +
                    std::to_string(kCkptVersion) + ")");
  }
  const auto prec = detail::read_pod<std::uint8_t>(is, "precision");
  if (prec != sizeof(T)) {
    throw LoadError("checkpoint precision " + std::to_string(prec * 8) + "-bit, model is " +
                    std::to_string(sizeof(T) * 8) + "-bit");
  }
  const auto count = detail::read_pod<std::uint32_t>(is, "record count");
  if (count != store.count()) {
    throw LoadError("checkpoint holds " + std::to_string(count) + " tensors, model has " +
                    std::to_string(store.count()));
  }
  std::unordered_map<std::string, Tensor<T>*> by_name;
  for (auto& p : store.tensors()) by_name[p.name()] = &p;
  for (std::uint32_t r = 0; r < count; ++r) {
    const auto name_len = detail::read_pod<std::uint16_t>(is, "name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw LoadError("checkpoint truncated reading name");
    const auto rank = detail::read_pod<std::uint8_t>(is, "rank");
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(detail::read_pod<std::uint32_t>(is, "dim"));
    auto it = by_name.find(name);
    if (it == by_name.end()) throw LoadError("checkpoint tensor unknown to model: " + name);
    Tensor<T>& dst = *it->second;
    if (dst.shape() != shape) {
      throw LoadError("checkpoint tensor " + name + " has shape " + shape_str(shape) +
                      ", model expects " + shape_str(dst.shape()));
    }
    auto buf = dst.mutable_data();
    if (!is.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(T)))) {
      throw LoadError("checkpoint truncated reading values of " + name);
    }
  }
}

}  // namespace sdml
