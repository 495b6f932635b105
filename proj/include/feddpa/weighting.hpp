#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "feddpa/data.hpp"
#include "feddpa/lora.hpp"
#include "feddpa/model.hpp"

namespace feddpa {

class WeightingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SimMetric { kCosine, kNegL2, kPearson };

const char* sim_metric_name(SimMetric metric);
SimMetric sim_metric_from_name(const std::string& name);

struct WeightingConfig {
  int sample_count = 5;
  double lambda = 1.0;
  SimMetric metric = SimMetric::kCosine;
  EmbedMode mode = EmbedMode::kLast;
  // When set, the S reference instances are redrawn for every test instance
  // (seeded from the instance content) instead of once per context.
  bool per_instance = false;
  uint64_t seed = 0;
};

// Similarity in [0, 1]. COSINE and PEARSON clamp negatives to 0 and reject
// degenerate inputs (zero vector; zero variance for PEARSON).
double similarity(std::span<const double> u, std::span<const double> v,
                  SimMetric metric);

// Per-client inference-time state: the embeddings of S instances sampled
// from the client's training split, computed with the global adapter
// attached. Immutable once built; compute_alpha never mutates it.
class WeightingContext {
 public:
  int client_id() const { return client_id_; }
  const WeightingConfig& config() const { return config_; }
  const std::vector<std::vector<double>>& cached() const { return cached_; }
  const std::vector<size_t>& cached_indices() const { return cached_indices_; }

 private:
  friend WeightingContext build_context(int client_id, const Backbone& backbone,
                                        const LoraAdapter& global,
                                        const std::vector<Instance>& train,
                                        const WeightingConfig& config);
  friend double compute_alpha(const WeightingContext& ctx,
                              const Instance& instance,
                              std::vector<double>* scores_out);

  int client_id_ = -1;
  WeightingConfig config_;
  const Backbone* backbone_ = nullptr;
  const LoraAdapter* global_ = nullptr;
  const std::vector<Instance>* train_ = nullptr;
  std::vector<std::vector<double>> cached_;
  std::vector<size_t> cached_indices_;
};

// Samples S training instances (without replacement when the split is large
// enough, with replacement otherwise) and caches their embeddings.
WeightingContext build_context(int client_id, const Backbone& backbone,
                               const LoraAdapter& global,
                               const std::vector<Instance>& train,
                               const WeightingConfig& config);

// alpha_t = lambda * mean similarity between the instance embedding and the
// S reference embeddings. Lies in [0, lambda]. Pure; safe to call
// concurrently on one context. scores_out, when non-null, receives the S
// raw similarity scores.
double compute_alpha(const WeightingContext& ctx, const Instance& instance,
                     std::vector<double>* scores_out = nullptr);

// Instrumentation for composition tests: which evaluation paths touched the
// weighting machinery. Counters are process-wide and monotone between resets.
struct WeightingCounters {
  uint64_t contexts_built = 0;
  uint64_t alpha_calls = 0;
};

WeightingCounters weighting_counters();
void reset_weighting_counters();

}  // namespace feddpa
