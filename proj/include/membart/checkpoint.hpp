#pragma once

#include <array>
#include <cstring>
#include <string>
#include <vector>

#include "membart/tensor.hpp"

namespace membart {

// Binary checkpoint layout:
//   magic "MBRT" | u32 LE version (=1) | 32-byte config digest |
//   entries: u16 LE name length, name, u8 dtype (0=f32, 1=f64), u8 rank,
//            u64 LE dims, raw little-endian row-major data |
//   trailing u64 LE FNV-1a checksum of all preceding bytes.

using Digest = std::array<unsigned char, 32>;

struct CheckpointEntry {
  std::string name;
  uint8_t dtype = 0;  // 0 = 32-bit float, 1 = 64-bit float
  std::vector<int64_t> dims;
  std::vector<unsigned char> data;

  int64_t elements() const {
    int64_t n = 1;
    for (int64_t d : dims) n *= d;
    return n;
  }
};

struct Checkpoint {
  uint32_t version = 1;
  Digest digest{};
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
  bool has(const std::string& name) const { return find(name) != nullptr; }
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);

// Verifies magic, version and the trailing checksum; truncation and
// corruption are reported with the offending byte offset.
Checkpoint load_checkpoint(const std::string& path);

Digest config_digest(const std::string& canonical_text);
std::string digest_hex(const Digest& d);

template <typename T>
constexpr uint8_t dtype_tag() {
  return sizeof(T) == 4 ? 0 : 1;
}

template <typename T>
CheckpointEntry tensor_entry(const std::string& name, const Tensor<T>& t) {
  CheckpointEntry e;
  e.name = name;
  e.dtype = dtype_tag<T>();
  e.dims = t.shape();
  e.data.resize(static_cast<size_t>(t.numel()) * sizeof(T));
  std::memcpy(e.data.data(), t.data(), e.data.size());
  return e;
}

template <typename T>
Tensor<T> entry_tensor(const CheckpointEntry& e) {
  if (e.dtype != dtype_tag<T>())
    throw IoError("checkpoint entry '" + e.name + "' holds dtype tag " + std::to_string(e.dtype) +
                  ", incompatible with the requested precision");
  Tensor<T> t(e.dims);
  if (e.data.size() != static_cast<size_t>(t.numel()) * sizeof(T))
    throw IoError("checkpoint entry '" + e.name + "' has inconsistent payload size");
  std::memcpy(t.data(), e.data.data(), e.data.size());
  return t;
}

// Scalars and byte strings ride along as f64 entries.
CheckpointEntry scalar_entry(const std::string& name, double v);
double entry_scalar(const Checkpoint& ckpt, const std::string& name);
void append_bytes_entries(Checkpoint& ckpt, const std::string& name, const std::string& bytes);
std::string read_bytes_entries(const Checkpoint& ckpt, const std::string& name);

}  // namespace membart
