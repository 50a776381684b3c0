#pragma once

#include <cstdint>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace membart {

// Error taxonomy. UsageError/ConfigError map to exit code 1 in the CLI,
// everything else to 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public UsageError {
 public:
  using UsageError::UsageError;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Dense matrix of token ids, row-major.
struct IdMatrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<int32_t> v;

  IdMatrix() = default;
  IdMatrix(int64_t r, int64_t c, int32_t fill = 0) : rows(r), cols(c), v(static_cast<size_t>(r * c), fill) {}

  int32_t& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * cols + c)]; }
  int32_t at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols + c)]; }
  bool empty() const { return v.empty(); }
};

// Reserved token ids for the byte-level vocabulary.
struct SpecialTokens {
  static constexpr int32_t pad = 0;
  static constexpr int32_t bos = 1;
  static constexpr int32_t eos = 2;
  static constexpr int32_t mask = 3;
  static constexpr int32_t first_regular = 4;
};

// FNV-1a, used for per-parameter init seeding and the checkpoint checksum.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 1469598103934665603ull) {
  return fnv1a64(s.data(), s.size(), h);
}

// Mixes a global seed with a name so each parameter (or document/segment)
// gets its own deterministic stream regardless of creation order.
inline uint64_t seed_for(uint64_t base, const std::string& name) {
  uint64_t h = fnv1a64(&base, sizeof(base));
  return fnv1a64(name, h);
}

inline uint64_t seed_for(uint64_t base, uint64_t a, uint64_t b = 0) {
  uint64_t h = fnv1a64(&base, sizeof(base));
  h = fnv1a64(&a, sizeof(a), h);
  return fnv1a64(&b, sizeof(b), h);
}

// When enabled, every op validates that its output is finite. Off by default
// (the trainer checks the loss instead); tests switch it on.
bool finite_checks_enabled();
void set_finite_checks(bool on);

}  // namespace membart
