#include "enclab/rng.hpp"

#include <cmath>
#include <sstream>

#include "enclab/errors.hpp"

namespace enclab {

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t fnv1a64(std::string_view s, std::uint64_t h) {
  return fnv1a64(s.data(), s.size(), h);
}

std::int64_t RngStream::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (hi <= lo) throw ContractError("uniform_int: empty range");
  const auto span = static_cast<std::uint64_t>(hi - lo);
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t x;
  do {
    x = eng_();
  } while (x >= limit);
  return lo + static_cast<std::int64_t>(x % span);
}

double RngStream::normal() {
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log1p(-u1));
  return r * std::cos(2.0 * M_PI * u2);
}

std::string RngStream::save() const {
  std::ostringstream os;
  os << eng_;
  return os.str();
}

void RngStream::restore(const std::string& blob) {
  std::istringstream is(blob);
  is >> eng_;
  if (is.fail()) throw DataError("RngStream::restore: malformed state blob");
}

namespace {
std::uint64_t mix_seed(std::uint64_t root, std::string_view name,
                       std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = fnv1a64(&root, sizeof(root));
  h = fnv1a64(name, h);
  h = fnv1a64(&a, sizeof(a), h);
  h = fnv1a64(&b, sizeof(b), h);
  return h;
}
}  // namespace

RngStream derive_stream(std::uint64_t root_seed, std::string_view name) {
  return RngStream(mix_seed(root_seed, name, 0, 0));
}

RngStream derive_stream(std::uint64_t root_seed, std::string_view name,
                        std::uint64_t a) {
  return RngStream(mix_seed(root_seed, name, a, 0));
}

RngStream derive_stream(std::uint64_t root_seed, std::string_view name,
                        std::uint64_t a, std::uint64_t b) {
  return RngStream(mix_seed(root_seed, name, a, b));
}

}  // namespace enclab
