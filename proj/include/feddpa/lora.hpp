#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "feddpa/tensor.hpp"

namespace feddpa {

// The two attention projections that carry low-rank deltas.
enum class ProjTarget { kQuery = 0, kValue = 1 };
inline constexpr int kNumTargets = 2;
const char* proj_target_name(ProjTarget target);

// One low-rank factor pair. The dense delta in stored row-major layout
// ([d_in x d_out], applied as y = x * W) is (B*A) transposed, i.e.
// A^T * B^T; B starts at zero so a fresh pair contributes nothing.
struct LoraMatrixPair {
  Tensor a;  // [rank x d_model]
  Tensor b;  // [d_model x rank]
  int rank = 0;
};

// A per-(layer, target) set of factor pairs sharing one rank. This is the
// only trainable object in the system and, for the global role, the only
// communicated one.
class LoraAdapter {
 public:
  LoraAdapter() = default;
  LoraAdapter(int n_layers, int d_model, int rank);

  int n_layers() const { return n_layers_; }
  int d_model() const { return d_model_; }
  int rank() const { return rank_; }
  bool trainable() const { return trainable_; }

  LoraMatrixPair& pair(int layer, ProjTarget target);
  const LoraMatrixPair& pair(int layer, ProjTarget target) const;

  // Every factor tensor, canonical order: layer-major, query before value,
  // A before B.
  std::vector<Tensor> parameters();
  std::vector<Tensor> parameters() const;
  size_t parameter_count() const;

  void set_trainable(bool trainable);
  void zero_grads();

  LoraAdapter clone() const;  // deep copy, never trainable

 private:
  int n_layers_ = 0;
  int d_model_ = 0;
  int rank_ = 0;
  bool trainable_ = false;
  std::vector<LoraMatrixPair> pairs_;  // [layer * kNumTargets + target]
};

// A rank error distinct from tensor shape violations.
class RankError : public std::runtime_error {
 public:
  explicit RankError(const std::string& msg) : std::runtime_error(msg) {}
};

// B zero, A drawn from a small zero-mean normal; the attached forward is
// exactly the identity delta.
LoraAdapter new_adapter(int n_layers, int d_model, int rank, uint64_t seed);

// What a forward pass composes: an optional shared adapter, an optional
// personal adapter, and the blend weight given to the personal one.
struct AdapterStack {
  const LoraAdapter* global = nullptr;
  const LoraAdapter* local = nullptr;
  double alpha = 0.0;

  bool any() const { return global != nullptr || local != nullptr; }
};

// y = h*W + (1-alpha)*(h A_g^T B_g^T) + alpha*(h A_l^T B_l^T) when both
// adapters are present; a lone adapter gets weight 1; zero-coefficient
// branches are skipped outright so degenerate alphas are exact.
Tensor fused_projection(const Tensor& h, const Tensor& w,
                        const LoraMatrixPair* global,
                        const LoraMatrixPair* local, double alpha);
Tensor fused_projection(const Tensor& h, const Tensor& w,
                        const AdapterStack& stack, int layer,
                        ProjTarget target);

// Dense per-target deltas in stored layout, canonical order; adding each
// to its frozen weight reproduces the adapter-path outputs.
std::vector<Tensor> merge(const LoraAdapter& adapter);

// Fixed little-endian payload: magic, version, rank, layer count, width,
// then raw A/B buffers in canonical order. Round-trips bit-exactly.
std::vector<uint8_t> serialize(const LoraAdapter& adapter);
LoraAdapter deserialize(std::span<const uint8_t> bytes);

size_t serialized_size(int n_layers, int d_model, int rank);
uint64_t adapter_hash(const LoraAdapter& adapter);
bool adapters_equal(const LoraAdapter& a, const LoraAdapter& b);

}  // namespace feddpa
