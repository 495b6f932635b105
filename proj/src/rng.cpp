#include "feddpa/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace feddpa {

namespace {

constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ull;

uint64_t mix64(uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

uint64_t fnv1a64(std::string_view s, uint64_t h) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace

uint64_t Rng::next_u64() {
  state_ += kGamma;
  return mix64(state_);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

uint64_t Rng::uniform_int(uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::uniform_int: n must be > 0");
  // Rejection sampling to avoid modulo bias.
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u = 1.0 - uniform();  // (0, 1]
  const double v = uniform();
  const double r = std::sqrt(-2.0 * std::log(u));
  const double theta = 2.0 * M_PI * v;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::vector<size_t> Rng::sample_without_replacement(size_t n, size_t k) {
  if (k > n) throw std::invalid_argument("Rng::sample_without_replacement: k > n");
  // Partial Fisher-Yates over an index array.
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  std::vector<size_t> out;
  out.reserve(k);
  for (size_t i = 0; i < k; ++i) {
    const size_t j = i + static_cast<size_t>(uniform_int(n - i));
    std::swap(idx[i], idx[j]);
    out.push_back(idx[i]);
  }
  return out;
}

uint64_t derive_seed(uint64_t seed, std::string_view tag) {
  return mix64(fnv1a64(tag, 0xCBF29CE484222325ull) ^ mix64(seed));
}

uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t a) {
  return mix64(derive_seed(seed, tag) + kGamma * (a + 1));
}

uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t a, uint64_t b) {
  return mix64(derive_seed(seed, tag, a) + kGamma * (b + 1));
}

}  // namespace feddpa
