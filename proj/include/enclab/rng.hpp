#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace enclab {

// FNV-1a 64-bit. Used for sub-stream derivation and content hashing in the
// harness; not cryptographic.
std::uint64_t fnv1a64(const void* data, std::size_t n,
                      std::uint64_t h = 0xcbf29ce484222325ull);
std::uint64_t fnv1a64(std::string_view s,
                      std::uint64_t h = 0xcbf29ce484222325ull);

/// Deterministic random stream. Uniform/normal draws are mapped from raw
/// engine output by hand so results are identical across standard libraries.
class RngStream {
 public:
  RngStream() : eng_(0) {}
  explicit RngStream(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  // Integer in [lo, hi).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; two engine draws per call.
  double normal();

  std::string save() const;
  void restore(const std::string& blob);

 private:
  std::mt19937_64 eng_;
};

// All randomness flows from one root seed through named sub-streams, so
// components can be re-seeded independently and resumed exactly.
RngStream derive_stream(std::uint64_t root_seed, std::string_view name);
RngStream derive_stream(std::uint64_t root_seed, std::string_view name,
                        std::uint64_t a);
RngStream derive_stream(std::uint64_t root_seed, std::string_view name,
                        std::uint64_t a, std::uint64_t b);

}  // namespace enclab
