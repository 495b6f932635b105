#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "feddpa/rng.hpp"

namespace feddpa {

enum class OpKind {
  kLeaf,
  kMatmul,
  kMatmulNT,
  kAdd,
  kAddScaled,
  kAddBias,
  kMul,
  kSoftmaxRows,
  kLayerNormRows,
  kGelu,
  kEmbeddingLookup,
  kCrossEntropy,
  kCausalAttention,
  kMeanRows,
  kSliceRows,
  kSumAll,
};

const char* op_name(OpKind op);

struct TensorNode;

// Dense row-major 64-bit tensor with an optional gradient buffer. Value
// semantics over a shared node: copies alias the same storage, which is
// what the tape needs. Fresh, independent storage comes from clone().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<int64_t> shape, double value, bool requires_grad = false);
  static Tensor from(std::vector<int64_t> shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor randn(std::vector<int64_t> shape, Rng& rng, double stddev,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int64_t>& shape() const;
  int64_t dim(size_t i) const { return shape().at(i); }
  int64_t rows() const;
  int64_t cols() const;
  size_t numel() const;

  std::span<double> data();
  std::span<const double> data() const;
  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();

  // Deep copy into a fresh leaf (no graph history, no grad).
  Tensor clone() const;

  double item() const;       // scalar tensors only
  double at(int64_t r, int64_t c) const;
  double& at(int64_t r, int64_t c);

  OpKind op() const;
  TensorNode* node() const { return node_.get(); }

 private:
  friend struct TensorOps;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode> node_;
};

struct TensorNode {
  std::vector<int64_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first use
  bool requires_grad = false;
  OpKind op = OpKind::kLeaf;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode*)> backward_fn;

  size_t numel() const { return data.size(); }
  void ensure_grad();
};

// Topologically ordered view of the graph that produced `root`; backward
// walks it once, in reverse.
struct ComputeGraph {
  std::vector<TensorNode*> order;  // parents before children, root last
  static ComputeGraph build(TensorNode* root);
};

// Dimension/shape violations raised by ops.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite value detected in a buffer; the run is aborted rather than
// letting NaN/Inf propagate.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Disables graph recording in the current thread (RAII). Forward results
// are identical; only the tape is skipped.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- ops ----

// c[m,n] = a[m,k] * b[k,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// c[m,n] = a[m,k] * b[n,k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);                       // elementwise
Tensor add_scaled(const Tensor& a, const Tensor& b, double scale);  // a + scale*b
Tensor add_bias(const Tensor& x, const Tensor& bias);               // rows + bias[cols]
Tensor mul(const Tensor& a, const Tensor& b);                       // elementwise

Tensor softmax_rows(const Tensor& x);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-5);
Tensor gelu(const Tensor& x);

// Gathers rows of `table` by id; out[i] = table[ids[i]].
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

// Mean of -log softmax(logits_row)[target] over rows whose target >= 0.
// Targets equal to kIgnoreTarget are excluded from the average.
inline constexpr int kIgnoreTarget = -1;
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

// Causal multi-head self-attention over concatenated instances. Each
// (begin, end) row range in `segments` is attended independently; within a
// segment position i attends to positions <= i.
struct Segment {
  int64_t begin = 0;
  int64_t end = 0;
};
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const Segment> segments, int n_heads);

Tensor mean_rows(const Tensor& x);  // [1 x cols]
Tensor slice_rows(const Tensor& x, int64_t begin, int64_t end);
Tensor sum_all(const Tensor& x);  // scalar

// Populates grad on every requires_grad leaf reachable from `loss`.
// Gradient contributions accumulate additively across uses.
void backward(const Tensor& loss);

// param <- param - lr * grad, then grads are zeroed. Every param must
// carry a grad.
void sgd_step(std::span<Tensor> params, double lr);

// Throws NumericError naming `what` if any value is non-finite.
void check_finite(std::span<const double> values, const std::string& what);
void check_finite(const Tensor& t, const std::string& what);

}  // namespace feddpa
