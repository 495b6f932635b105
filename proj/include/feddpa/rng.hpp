#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace feddpa {

// Deterministic RNG with an explicit 64-bit state (splitmix64 sequence).
// std::random distributions are implementation-defined, so everything the
// simulator samples goes through this class to keep runs byte-reproducible
// across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64();

  // Uniform in [0, 1) with 53 random bits.
  double uniform();

  // Uniform integer in [0, n). n must be > 0.
  uint64_t uniform_int(uint64_t n);

  // Standard normal via Box-Muller (spare value cached).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), in selection order. Requires k <= n.
  std::vector<size_t> sample_without_replacement(size_t n, size_t k);

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stream derivation: mixes a base seed with tag/indices so that unrelated
// parts of a run draw from independent streams. Changing one client's
// stream never perturbs another's.
uint64_t derive_seed(uint64_t seed, std::string_view tag);
uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t a);
uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t a, uint64_t b);

}  // namespace feddpa
