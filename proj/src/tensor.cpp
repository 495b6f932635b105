#include "feddpa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>
#include <utility>

#include <Eigen/Core>

namespace feddpa {

// Grants op implementations access to the node handle behind a Tensor.
struct TensorOps {
  static const std::shared_ptr<TensorNode>& ptr(const Tensor& t) {
    return t.node_;
  }
  static Tensor wrap(std::shared_ptr<TensorNode> node) {
    return Tensor(std::move(node));
  }
};

namespace {

using MatrixRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

thread_local bool g_grad_enabled = true;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

size_t shape_numel(const std::vector<int64_t>& shape) {
  require(!shape.empty(), "tensor shape must not be empty");
  size_t n = 1;
  for (int64_t d : shape) {
    require(d > 0, "tensor dimension must be positive, got " + shape_str(shape));
    n *= static_cast<size_t>(d);
  }
  return n;
}

// C[m,n] = (accumulate ? C : 0) + opA(A) * opB(B); logical A is m x k,
// logical B is k x n, trans_* flags describe the stored layout.
void gemm(const double* a, const double* b, double* c, int64_t m, int64_t n,
          int64_t k, bool trans_a, bool trans_b, bool accumulate) {
  ConstMapRM ma(a, trans_a ? k : m, trans_a ? m : k);
  ConstMapRM mb(b, trans_b ? n : k, trans_b ? k : n);
  MapRM mc(c, m, n);
  if (!trans_a && !trans_b) {
    if (accumulate) mc.noalias() += ma * mb;
    else mc.noalias() = ma * mb;
  } else if (!trans_a && trans_b) {
    if (accumulate) mc.noalias() += ma * mb.transpose();
    else mc.noalias() = ma * mb.transpose();
  } else if (trans_a && !trans_b) {
    if (accumulate) mc.noalias() += ma.transpose() * mb;
    else mc.noalias() = ma.transpose() * mb;
  } else {
    if (accumulate) mc.noalias() += ma.transpose() * mb.transpose();
    else mc.noalias() = ma.transpose() * mb.transpose();
  }
}

std::shared_ptr<TensorNode> make_leaf(std::vector<int64_t> shape,
                                      std::vector<double> data,
                                      bool requires_grad) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return node;
}

// Builds the result node for an op. The result joins the tape only when
// grad mode is on and some parent needs a gradient; otherwise it degrades
// to a plain leaf and the closure is dropped.
Tensor make_result(std::vector<int64_t> shape, std::vector<double> data,
                   OpKind op, std::vector<std::shared_ptr<TensorNode>> parents,
                   std::function<void(TensorNode*)> backward_fn) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool track = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) {
      if (p && p->requires_grad) {
        track = true;
        break;
      }
    }
  }
  if (track) {
    node->requires_grad = true;
    node->op = op;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return TensorOps::wrap(std::move(node));
}

void check_2d(const Tensor& t, const char* name) {
  require(t.defined(), std::string(name) + ": undefined tensor");
  require(t.shape().size() == 2, std::string(name) +
                                     ": expected 2-d tensor, got " +
                                     shape_str(t.shape()));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* opn) {
  require(a.defined() && b.defined(), std::string(opn) + ": undefined tensor");
  require(a.shape() == b.shape(), std::string(opn) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kMatmulNT: return "matmul_nt";
    case OpKind::kAdd: return "add";
    case OpKind::kAddScaled: return "add_scaled";
    case OpKind::kAddBias: return "add_bias";
    case OpKind::kMul: return "mul";
    case OpKind::kSoftmaxRows: return "softmax_rows";
    case OpKind::kLayerNormRows: return "layer_norm_rows";
    case OpKind::kGelu: return "gelu";
    case OpKind::kEmbeddingLookup: return "embedding_lookup";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kCausalAttention: return "causal_attention";
    case OpKind::kMeanRows: return "mean_rows";
    case OpKind::kSliceRows: return "slice_rows";
    case OpKind::kSumAll: return "sum_all";
  }
  return "unknown";
}

void TensorNode::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
}

// ---- Tensor ----

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
  size_t n = shape_numel(shape);
  return Tensor(
      make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(std::vector<int64_t> shape, double value,
                    bool requires_grad) {
  size_t n = shape_numel(shape);
  return Tensor(
      make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<double> values,
                    bool requires_grad) {
  size_t n = shape_numel(shape);
  require(values.size() == n, "Tensor::from: " + std::to_string(values.size()) +
                                  " values for shape " + shape_str(shape));
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::randn(std::vector<int64_t> shape, Rng& rng, double stddev,
                     bool requires_grad) {
  size_t n = shape_numel(shape);
  std::vector<double> values(n);
  for (double& v : values) v = rng.normal() * stddev;
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

const std::vector<int64_t>& Tensor::shape() const {
  require(defined(), "shape(): undefined tensor");
  return node_->shape;
}

int64_t Tensor::rows() const {
  require(shape().size() == 2, "rows(): tensor is not 2-d");
  return node_->shape[0];
}

int64_t Tensor::cols() const {
  require(shape().size() == 2, "cols(): tensor is not 2-d");
  return node_->shape[1];
}

size_t Tensor::numel() const {
  require(defined(), "numel(): undefined tensor");
  return node_->numel();
}

std::span<double> Tensor::data() {
  require(defined(), "data(): undefined tensor");
  return node_->data;
}

std::span<const double> Tensor::data() const {
  require(defined(), "data(): undefined tensor");
  return node_->data;
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  require(defined(), "set_requires_grad(): undefined tensor");
  node_->requires_grad = value;
}

bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }

std::span<double> Tensor::grad() {
  require(defined(), "grad(): undefined tensor");
  node_->ensure_grad();
  return node_->grad;
}

std::span<const double> Tensor::grad() const {
  require(defined(), "grad(): undefined tensor");
  require(!node_->grad.empty(), "grad(): gradient has not been populated");
  return node_->grad;
}

void Tensor::zero_grad() {
  require(defined(), "zero_grad(): undefined tensor");
  if (!node_->grad.empty())
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  require(defined(), "clone(): undefined tensor");
  return Tensor(make_leaf(node_->shape, node_->data, false));
}

double Tensor::item() const {
  require(numel() == 1,
          "item(): tensor has " + std::to_string(numel()) + " elements");
  return node_->data[0];
}

double Tensor::at(int64_t r, int64_t c) const {
  require(r >= 0 && r < rows() && c >= 0 && c < cols(),
          "at(): index out of range");
  return node_->data[static_cast<size_t>(r * cols() + c)];
}

double& Tensor::at(int64_t r, int64_t c) {
  require(r >= 0 && r < rows() && c >= 0 && c < cols(),
          "at(): index out of range");
  return node_->data[static_cast<size_t>(r * cols() + c)];
}

OpKind Tensor::op() const {
  require(defined(), "op(): undefined tensor");
  return node_->op;
}

// ---- graph ----

ComputeGraph ComputeGraph::build(TensorNode* root) {
  ComputeGraph graph;
  if (root == nullptr || !root->requires_grad) return graph;
  std::unordered_set<TensorNode*> visited;
  // (node, index of next parent to visit)
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode* parent = node->parents[idx++].get();
      if (parent != nullptr && parent->requires_grad &&
          visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      graph.order.push_back(node);
      stack.pop_back();
    }
  }
  return graph;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  require(a.cols() == b.rows(), "matmul: inner dimensions disagree, " +
                                    shape_str(a.shape()) + " * " +
                                    shape_str(b.shape()));
  const int64_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(static_cast<size_t>(m * n));
  gemm(a.data().data(), b.data().data(), out.data(), m, n, k, false, false,
       false);
  return make_result(
      {m, n}, std::move(out), OpKind::kMatmul,
      {TensorOps::ptr(a), TensorOps::ptr(b)},
      [m, n, k](TensorNode* self) {
        TensorNode* pa = self->parents[0].get();
        TensorNode* pb = self->parents[1].get();
        if (pa->requires_grad) {
          pa->ensure_grad();
          // dA += dC * B^T
          gemm(self->grad.data(), pb->data.data(), pa->grad.data(), m, k, n,
               false, true, true);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          // dB += A^T * dC
          gemm(pa->data.data(), self->grad.data(), pb->grad.data(), k, n, m,
               true, false, true);
        }
      });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul_nt");
  check_2d(b, "matmul_nt");
  require(a.cols() == b.cols(), "matmul_nt: inner dimensions disagree, " +
                                    shape_str(a.shape()) + " * " +
                                    shape_str(b.shape()) + "^T");
  const int64_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> out(static_cast<size_t>(m * n));
  gemm(a.data().data(), b.data().data(), out.data(), m, n, k, false, true,
       false);
  return make_result(
      {m, n}, std::move(out), OpKind::kMatmulNT,
      {TensorOps::ptr(a), TensorOps::ptr(b)},
      [m, n, k](TensorNode* self) {
        TensorNode* pa = self->parents[0].get();
        TensorNode* pb = self->parents[1].get();
        if (pa->requires_grad) {
          pa->ensure_grad();
          // dA += dC * B  (B stored [n,k])
          gemm(self->grad.data(), pb->data.data(), pa->grad.data(), m, k, n,
               false, false, true);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          // dB += dC^T * A
          gemm(self->grad.data(), pa->data.data(), pb->grad.data(), n, k, m,
               true, false, true);
        }
      });
}

namespace {

Tensor add_impl(const Tensor& a, const Tensor& b, double scale, OpKind kind,
                const char* opn) {
  check_same_shape(a, b, opn);
  std::vector<double> out(a.numel());
  std::span<const double> da = a.data(), db = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] + scale * db[i];
  return make_result(a.shape(), std::move(out), kind,
                     {TensorOps::ptr(a), TensorOps::ptr(b)},
                     [scale](TensorNode* self) {
                       TensorNode* pa = self->parents[0].get();
                       TensorNode* pb = self->parents[1].get();
                       if (pa->requires_grad) {
                         pa->ensure_grad();
                         for (size_t i = 0; i < self->grad.size(); ++i)
                           pa->grad[i] += self->grad[i];
                       }
                       if (pb->requires_grad) {
                         pb->ensure_grad();
                         for (size_t i = 0; i < self->grad.size(); ++i)
                           pb->grad[i] += scale * self->grad[i];
                       }
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return add_impl(a, b, 1.0, OpKind::kAdd, "add");
}

Tensor add_scaled(const Tensor& a, const Tensor& b, double scale) {
  return add_impl(a, b, scale, OpKind::kAddScaled, "add_scaled");
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  check_2d(x, "add_bias");
  require(bias.defined() && bias.shape().size() == 1,
          "add_bias: bias must be 1-d");
  const int64_t r = x.rows(), c = x.cols();
  require(bias.shape()[0] == c, "add_bias: bias size " +
                                    std::to_string(bias.shape()[0]) +
                                    " does not match " + std::to_string(c) +
                                    " columns");
  std::vector<double> out(x.numel());
  std::span<const double> dx = x.data(), dbias = bias.data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j)
      out[static_cast<size_t>(i * c + j)] =
          dx[static_cast<size_t>(i * c + j)] + dbias[static_cast<size_t>(j)];
  return make_result({r, c}, std::move(out), OpKind::kAddBias,
                     {TensorOps::ptr(x), TensorOps::ptr(bias)},
                     [r, c](TensorNode* self) {
                       TensorNode* px = self->parents[0].get();
                       TensorNode* pb = self->parents[1].get();
                       if (px->requires_grad) {
                         px->ensure_grad();
                         for (size_t i = 0; i < self->grad.size(); ++i)
                           px->grad[i] += self->grad[i];
                       }
                       if (pb->requires_grad) {
                         pb->ensure_grad();
                         for (int64_t i = 0; i < r; ++i)
                           for (int64_t j = 0; j < c; ++j)
                             pb->grad[static_cast<size_t>(j)] +=
                                 self->grad[static_cast<size_t>(i * c + j)];
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  std::span<const double> da = a.data(), db = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  return make_result(a.shape(), std::move(out), OpKind::kMul,
                     {TensorOps::ptr(a), TensorOps::ptr(b)},
                     [](TensorNode* self) {
                       TensorNode* pa = self->parents[0].get();
                       TensorNode* pb = self->parents[1].get();
                       if (pa->requires_grad) {
                         pa->ensure_grad();
                         for (size_t i = 0; i < self->grad.size(); ++i)
                           pa->grad[i] += self->grad[i] * pb->data[i];
                       }
                       if (pb->requires_grad) {
                         pb->ensure_grad();
                         for (size_t i = 0; i < self->grad.size(); ++i)
                           pb->grad[i] += self->grad[i] * pa->data[i];
                       }
                     });
}

Tensor softmax_rows(const Tensor& x) {
  check_2d(x, "softmax_rows");
  const int64_t r = x.rows(), c = x.cols();
  std::vector<double> out(x.numel());
  std::span<const double> dx = x.data();
  for (int64_t i = 0; i < r; ++i) {
    const double* row = dx.data() + i * c;
    double* orow = out.data() + i * c;
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (int64_t j = 0; j < c; ++j) orow[j] /= sum;
  }
  return make_result({r, c}, std::move(out), OpKind::kSoftmaxRows,
                     {TensorOps::ptr(x)}, [r, c](TensorNode* self) {
                       TensorNode* px = self->parents[0].get();
                       if (!px->requires_grad) return;
                       px->ensure_grad();
                       for (int64_t i = 0; i < r; ++i) {
                         const double* p = self->data.data() + i * c;
                         const double* g = self->grad.data() + i * c;
                         double dot = 0.0;
                         for (int64_t j = 0; j < c; ++j) dot += p[j] * g[j];
                         double* px_g = px->grad.data() + i * c;
                         for (int64_t j = 0; j < c; ++j)
                           px_g[j] += p[j] * (g[j] - dot);
                       }
                     });
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps) {
  check_2d(x, "layer_norm_rows");
  require(gain.defined() && gain.shape().size() == 1 && bias.defined() &&
              bias.shape().size() == 1,
          "layer_norm_rows: gain and bias must be 1-d");
  const int64_t r = x.rows(), c = x.cols();
  require(gain.shape()[0] == c && bias.shape()[0] == c,
          "layer_norm_rows: gain/bias size must match columns");
  std::vector<double> out(x.numel());
  // Normalized activations and inverse stddev per row, kept for backward.
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(static_cast<size_t>(r));
  std::span<const double> dx = x.data(), dg = gain.data(), db = bias.data();
  for (int64_t i = 0; i < r; ++i) {
    const double* row = dx.data() + i * c;
    double mean = 0.0;
    for (int64_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    double inv = 1.0 / std::sqrt(var + eps);
    (*rstd)[static_cast<size_t>(i)] = inv;
    double* xh = xhat->data() + i * c;
    double* orow = out.data() + i * c;
    for (int64_t j = 0; j < c; ++j) {
      xh[j] = (row[j] - mean) * inv;
      orow[j] = xh[j] * dg[static_cast<size_t>(j)] + db[static_cast<size_t>(j)];
    }
  }
  return make_result(
      {r, c}, std::move(out), OpKind::kLayerNormRows,
      {TensorOps::ptr(x), TensorOps::ptr(gain), TensorOps::ptr(bias)},
      [r, c, xhat, rstd](TensorNode* self) {
        TensorNode* px = self->parents[0].get();
        TensorNode* pg = self->parents[1].get();
        TensorNode* pb = self->parents[2].get();
        const double* xh = xhat->data();
        if (pg->requires_grad) {
          pg->ensure_grad();
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j)
              pg->grad[static_cast<size_t>(j)] +=
                  self->grad[static_cast<size_t>(i * c + j)] *
                  xh[static_cast<size_t>(i * c + j)];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j)
              pb->grad[static_cast<size_t>(j)] +=
                  self->grad[static_cast<size_t>(i * c + j)];
        }
        if (px->requires_grad) {
          px->ensure_grad();
          const double inv_c = 1.0 / static_cast<double>(c);
          for (int64_t i = 0; i < r; ++i) {
            const double* g = self->grad.data() + i * c;
            const double* xhr = xh + i * c;
            double sum_h = 0.0, sum_hx = 0.0;
            for (int64_t j = 0; j < c; ++j) {
              double h = g[j] * pg->data[static_cast<size_t>(j)];
              sum_h += h;
              sum_hx += h * xhr[j];
            }
            double* gx = px->grad.data() + i * c;
            double inv = (*rstd)[static_cast<size_t>(i)];
            for (int64_t j = 0; j < c; ++j) {
              double h = g[j] * pg->data[static_cast<size_t>(j)];
              gx[j] += inv * (h - inv_c * sum_h - xhr[j] * inv_c * sum_hx);
            }
          }
        }
      });
}

Tensor gelu(const Tensor& x) {
  require(x.defined(), "gelu: undefined tensor");
  std::vector<double> out(x.numel());
  std::span<const double> dx = x.data();
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = 0.5 * dx[i] * (1.0 + std::erf(dx[i] * kInvSqrt2));
  return make_result(
      x.shape(), std::move(out), OpKind::kGelu, {TensorOps::ptr(x)},
      [](TensorNode* self) {
        TensorNode* px = self->parents[0].get();
        if (!px->requires_grad) return;
        px->ensure_grad();
        constexpr double kInvSqrt2 = 0.7071067811865475244;
        constexpr double kInvSqrt2Pi = 0.3989422804014326779;
        for (size_t i = 0; i < self->grad.size(); ++i) {
          double v = px->data[i];
          double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
          double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
          px->grad[i] += self->grad[i] * (cdf + v * pdf);
        }
      });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  check_2d(table, "embedding_lookup");
  require(!ids.empty(), "embedding_lookup: empty id list");
  const int64_t v = table.rows(), c = table.cols();
  const int64_t n = static_cast<int64_t>(ids.size());
  std::vector<double> out(static_cast<size_t>(n * c));
  std::span<const double> dt = table.data();
  for (int64_t i = 0; i < n; ++i) {
    int id = ids[static_cast<size_t>(i)];
    require(id >= 0 && id < v, "embedding_lookup: id " + std::to_string(id) +
                                   " outside table of " + std::to_string(v) +
                                   " rows");
    std::memcpy(out.data() + i * c, dt.data() + static_cast<int64_t>(id) * c,
                static_cast<size_t>(c) * sizeof(double));
  }
  std::vector<int> saved_ids(ids.begin(), ids.end());
  return make_result({n, c}, std::move(out), OpKind::kEmbeddingLookup,
                     {TensorOps::ptr(table)},
                     [saved_ids = std::move(saved_ids), c](TensorNode* self) {
                       TensorNode* pt = self->parents[0].get();
                       if (!pt->requires_grad) return;
                       pt->ensure_grad();
                       for (size_t i = 0; i < saved_ids.size(); ++i) {
                         double* dst =
                             pt->grad.data() +
                             static_cast<int64_t>(saved_ids[i]) * c;
                         const double* src =
                             self->grad.data() + static_cast<int64_t>(i) * c;
                         for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  check_2d(logits, "cross_entropy");
  const int64_t r = logits.rows(), c = logits.cols();
  require(static_cast<int64_t>(targets.size()) == r,
          "cross_entropy: " + std::to_string(targets.size()) +
              " targets for " + std::to_string(r) + " rows");
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  std::span<const double> dl = logits.data();
  double loss = 0.0;
  int64_t counted = 0;
  for (int64_t i = 0; i < r; ++i) {
    const double* row = dl.data() + i * c;
    double* prow = probs->data() + i * c;
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      prow[j] = std::exp(row[j] - mx);
      sum += prow[j];
    }
    for (int64_t j = 0; j < c; ++j) prow[j] /= sum;
    int t = targets[static_cast<size_t>(i)];
    if (t == kIgnoreTarget) continue;
    require(t >= 0 && t < c, "cross_entropy: target " + std::to_string(t) +
                                 " outside " + std::to_string(c) + " classes");
    loss -= std::log(std::max(prow[t], 1e-300));
    ++counted;
  }
  require(counted > 0, "cross_entropy: every target is ignored");
  loss /= static_cast<double>(counted);
  std::vector<int> saved(targets.begin(), targets.end());
  return make_result(
      {1}, {loss}, OpKind::kCrossEntropy, {TensorOps::ptr(logits)},
      [probs, saved = std::move(saved), r, c, counted](TensorNode* self) {
        TensorNode* pl = self->parents[0].get();
        if (!pl->requires_grad) return;
        pl->ensure_grad();
        const double g = self->grad[0] / static_cast<double>(counted);
        for (int64_t i = 0; i < r; ++i) {
          int t = saved[static_cast<size_t>(i)];
          if (t == kIgnoreTarget) continue;
          const double* prow = probs->data() + i * c;
          double* grow = pl->grad.data() + i * c;
          for (int64_t j = 0; j < c; ++j) grow[j] += g * prow[j];
          grow[t] -= g;
        }
      });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const Segment> segments, int n_heads) {
  check_2d(q, "causal_attention");
  check_2d(k, "causal_attention");
  check_2d(v, "causal_attention");
  require(q.shape() == k.shape() && q.shape() == v.shape(),
          "causal_attention: q, k, v must share a shape");
  const int64_t total = q.rows(), d = q.cols();
  require(n_heads > 0 && d % n_heads == 0,
          "causal_attention: " + std::to_string(d) +
              " columns not divisible into " + std::to_string(n_heads) +
              " heads");
  require(!segments.empty(), "causal_attention: no segments");
  int64_t cursor = 0;
  for (const Segment& s : segments) {
    require(s.begin == cursor && s.end > s.begin && s.end <= total,
            "causal_attention: segments must tile the rows in order");
    cursor = s.end;
  }
  require(cursor == total, "causal_attention: segments must cover every row");

  const int64_t hd = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  // Attention probabilities per (segment, head), kept for backward.
  size_t probs_total = 0;
  std::vector<size_t> offsets;
  offsets.reserve(segments.size() * static_cast<size_t>(n_heads));
  for (const Segment& s : segments) {
    const size_t t = static_cast<size_t>(s.end - s.begin);
    for (int h = 0; h < n_heads; ++h) {
      offsets.push_back(probs_total);
      probs_total += t * t;
    }
  }
  auto probs = std::make_shared<std::vector<double>>(probs_total, 0.0);

  std::vector<double> out(q.numel(), 0.0);
  ConstMapRM mq(q.data().data(), total, d);
  ConstMapRM mk(k.data().data(), total, d);
  ConstMapRM mv(v.data().data(), total, d);
  MapRM mo(out.data(), total, d);

  size_t slot = 0;
  for (const Segment& s : segments) {
    const int64_t t = s.end - s.begin;
    for (int h = 0; h < n_heads; ++h, ++slot) {
      auto qb = mq.block(s.begin, h * hd, t, hd);
      auto kb = mk.block(s.begin, h * hd, t, hd);
      auto vb = mv.block(s.begin, h * hd, t, hd);
      MapRM p(probs->data() + offsets[slot], t, t);
      p.noalias() = qb * kb.transpose() * inv_sqrt;
      for (int64_t i = 0; i < t; ++i) {
        double* row = p.data() + i * t;
        double mx = row[0];
        for (int64_t j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int64_t j = 0; j <= i; ++j) {
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        for (int64_t j = 0; j <= i; ++j) row[j] /= sum;
        for (int64_t j = i + 1; j < t; ++j) row[j] = 0.0;
      }
      mo.block(s.begin, h * hd, t, hd).noalias() = p * vb;
    }
  }

  std::vector<Segment> saved(segments.begin(), segments.end());
  return make_result(
      {total, d}, std::move(out), OpKind::kCausalAttention,
      {TensorOps::ptr(q), TensorOps::ptr(k), TensorOps::ptr(v)},
      [probs, offsets = std::move(offsets), saved = std::move(saved), total, d,
       hd, n_heads, inv_sqrt](TensorNode* self) {
        TensorNode* pq = self->parents[0].get();
        TensorNode* pk = self->parents[1].get();
        TensorNode* pv = self->parents[2].get();
        const bool need_q = pq->requires_grad;
        const bool need_k = pk->requires_grad;
        const bool need_v = pv->requires_grad;
        if (!need_q && !need_k && !need_v) return;
        if (need_q) pq->ensure_grad();
        if (need_k) pk->ensure_grad();
        if (need_v) pv->ensure_grad();
        ConstMapRM mq(pq->data.data(), total, d);
        ConstMapRM mk(pk->data.data(), total, d);
        ConstMapRM mv(pv->data.data(), total, d);
        ConstMapRM mg(self->grad.data(), total, d);
        size_t slot = 0;
        MatrixRM dp, ds;
        for (const Segment& s : saved) {
          const int64_t t = s.end - s.begin;
          for (int h = 0; h < n_heads; ++h, ++slot) {
            ConstMapRM p(probs->data() + offsets[slot], t, t);
            auto gb = mg.block(s.begin, h * hd, t, hd);
            auto qb = mq.block(s.begin, h * hd, t, hd);
            auto kb = mk.block(s.begin, h * hd, t, hd);
            auto vb = mv.block(s.begin, h * hd, t, hd);
            if (need_v) {
              MapRM gv(pv->grad.data(), total, d);
              gv.block(s.begin, h * hd, t, hd).noalias() +=
                  p.transpose() * gb;
            }
            if (!need_q && !need_k) continue;
            dp.noalias() = gb * vb.transpose();
            ds.resize(t, t);
            for (int64_t i = 0; i < t; ++i) {
              const double* prow = p.data() + i * t;
              const double* dprow = dp.data() + i * t;
              double dot = 0.0;
              for (int64_t j = 0; j <= i; ++j) dot += prow[j] * dprow[j];
              double* dsrow = ds.data() + i * t;
              for (int64_t j = 0; j <= i; ++j)
                dsrow[j] = prow[j] * (dprow[j] - dot) * inv_sqrt;
              for (int64_t j = i + 1; j < t; ++j) dsrow[j] = 0.0;
            }
            if (need_q) {
              MapRM gq(pq->grad.data(), total, d);
              gq.block(s.begin, h * hd, t, hd).noalias() += ds * kb;
            }
            if (need_k) {
              MapRM gk(pk->grad.data(), total, d);
              gk.block(s.begin, h * hd, t, hd).noalias() +=
                  ds.transpose() * qb;
            }
          }
        }
      });
}

Tensor mean_rows(const Tensor& x) {
  check_2d(x, "mean_rows");
  const int64_t r = x.rows(), c = x.cols();
  std::vector<double> out(static_cast<size_t>(c), 0.0);
  std::span<const double> dx = x.data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j)
      out[static_cast<size_t>(j)] += dx[static_cast<size_t>(i * c + j)];
  for (double& o : out) o /= static_cast<double>(r);
  return make_result({1, c}, std::move(out), OpKind::kMeanRows,
                     {TensorOps::ptr(x)}, [r, c](TensorNode* self) {
                       TensorNode* px = self->parents[0].get();
                       if (!px->requires_grad) return;
                       px->ensure_grad();
                       const double inv = 1.0 / static_cast<double>(r);
                       for (int64_t i = 0; i < r; ++i)
                         for (int64_t j = 0; j < c; ++j)
                           px->grad[static_cast<size_t>(i * c + j)] +=
                               self->grad[static_cast<size_t>(j)] * inv;
                     });
}

Tensor slice_rows(const Tensor& x, int64_t begin, int64_t end) {
  check_2d(x, "slice_rows");
  const int64_t r = x.rows(), c = x.cols();
  require(begin >= 0 && begin < end && end <= r,
          "slice_rows: range [" + std::to_string(begin) + ", " +
              std::to_string(end) + ") outside " + std::to_string(r) + " rows");
  const int64_t n = end - begin;
  std::vector<double> out(static_cast<size_t>(n * c));
  std::memcpy(out.data(), x.data().data() + begin * c,
              static_cast<size_t>(n * c) * sizeof(double));
  return make_result({n, c}, std::move(out), OpKind::kSliceRows,
                     {TensorOps::ptr(x)}, [begin, n, c](TensorNode* self) {
                       TensorNode* px = self->parents[0].get();
                       if (!px->requires_grad) return;
                       px->ensure_grad();
                       for (int64_t i = 0; i < n; ++i)
                         for (int64_t j = 0; j < c; ++j)
                           px->grad[static_cast<size_t>((begin + i) * c + j)] +=
                               self->grad[static_cast<size_t>(i * c + j)];
                     });
}

Tensor sum_all(const Tensor& x) {
  require(x.defined(), "sum_all: undefined tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({1}, {s}, OpKind::kSumAll, {TensorOps::ptr(x)},
                     [](TensorNode* self) {
                       TensorNode* px = self->parents[0].get();
                       if (!px->requires_grad) return;
                       px->ensure_grad();
                       const double g = self->grad[0];
                       for (double& gv : px->grad) gv += g;
                     });
}

void backward(const Tensor& loss) {
  require(loss.defined(), "backward(): undefined tensor");
  require(loss.numel() == 1, "backward(): root must be a scalar");
  TensorNode* root = loss.node();
  if (!root->requires_grad) return;
  ComputeGraph graph = ComputeGraph::build(root);
  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = graph.order.rbegin(); it != graph.order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(node);
  }
}

void sgd_step(std::span<Tensor> params, double lr) {
  for (Tensor& p : params) {
    require(p.defined(), "sgd_step: undefined parameter");
    if (!p.has_grad())
      throw std::logic_error("sgd_step: parameter has no gradient");
  }
  for (Tensor& p : params) {
    std::span<double> data = p.data();
    std::span<const double> grad =
        static_cast<const Tensor&>(p).grad();
    for (size_t i = 0; i < data.size(); ++i) data[i] -= lr * grad[i];
    p.zero_grad();
  }
}

void check_finite(std::span<const double> values, const std::string& what) {
  for (size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(what + ": non-finite value " +
                         std::to_string(values[i]) + " at index " +
                         std::to_string(i));
    }
  }
}

void check_finite(const Tensor& t, const std::string& what) {
  check_finite(t.data(), what);
}

}  // namespace feddpa
