#include "feddpa/lora.hpp"

#include <cstring>

#include "feddpa/rng.hpp"
#include "feddpa/util.hpp"

namespace feddpa {
namespace {

constexpr uint32_t kMagic = 0x41524F4Cu;  // "LORA"
constexpr uint32_t kVersion = 1;
constexpr double kInitStddev = 0.02;

void check_pair_shapes(const LoraMatrixPair& pair, int64_t d_in, int64_t d_out,
                       const char* role) {
  if (pair.a.rows() != pair.rank || pair.a.cols() != d_in ||
      pair.b.rows() != d_out || pair.b.cols() != pair.rank) {
    throw ShapeError(std::string("fused_projection: ") + role +
                     " adapter factors do not match a [" +
                     std::to_string(d_in) + "x" + std::to_string(d_out) +
                     "] weight");
  }
}

}  // namespace

const char* proj_target_name(ProjTarget target) {
  return target == ProjTarget::kQuery ? "q" : "v";
}

LoraAdapter::LoraAdapter(int n_layers, int d_model, int rank)
    : n_layers_(n_layers), d_model_(d_model), rank_(rank) {
  if (n_layers < 0) throw RankError("adapter layer count must be >= 0");
  if (rank < 1) throw RankError("adapter rank must be >= 1");
  if (rank >= d_model)
    throw RankError("adapter rank " + std::to_string(rank) +
                    " is not a strict low-rank factorization of width " +
                    std::to_string(d_model));
  pairs_.reserve(static_cast<size_t>(n_layers) * kNumTargets);
  for (int i = 0; i < n_layers * kNumTargets; ++i) {
    LoraMatrixPair pair;
    pair.rank = rank;
    pair.a = Tensor::zeros({rank, d_model});
    pair.b = Tensor::zeros({d_model, rank});
    pairs_.push_back(std::move(pair));
  }
}

LoraMatrixPair& LoraAdapter::pair(int layer, ProjTarget target) {
  if (layer < 0 || layer >= n_layers_)
    throw ShapeError("adapter has no layer " + std::to_string(layer));
  return pairs_[static_cast<size_t>(layer * kNumTargets) +
                static_cast<size_t>(target)];
}

const LoraMatrixPair& LoraAdapter::pair(int layer, ProjTarget target) const {
  return const_cast<LoraAdapter*>(this)->pair(layer, target);
}

std::vector<Tensor> LoraAdapter::parameters() {
  std::vector<Tensor> out;
  out.reserve(pairs_.size() * 2);
  for (LoraMatrixPair& p : pairs_) {
    out.push_back(p.a);
    out.push_back(p.b);
  }
  return out;
}

std::vector<Tensor> LoraAdapter::parameters() const {
  return const_cast<LoraAdapter*>(this)->parameters();
}

size_t LoraAdapter::parameter_count() const {
  size_t n = 0;
  for (const LoraMatrixPair& p : pairs_) n += p.a.numel() + p.b.numel();
  return n;
}

void LoraAdapter::set_trainable(bool trainable) {
  trainable_ = trainable;
  for (LoraMatrixPair& p : pairs_) {
    p.a.set_requires_grad(trainable);
    p.b.set_requires_grad(trainable);
  }
}

void LoraAdapter::zero_grads() {
  for (LoraMatrixPair& p : pairs_) {
    p.a.zero_grad();
    p.b.zero_grad();
  }
}

LoraAdapter LoraAdapter::clone() const {
  LoraAdapter out;
  out.n_layers_ = n_layers_;
  out.d_model_ = d_model_;
  out.rank_ = rank_;
  out.pairs_.reserve(pairs_.size());
  for (const LoraMatrixPair& p : pairs_) {
    LoraMatrixPair q;
    q.rank = p.rank;
    q.a = p.a.clone();
    q.b = p.b.clone();
    out.pairs_.push_back(std::move(q));
  }
  return out;
}

LoraAdapter new_adapter(int n_layers, int d_model, int rank, uint64_t seed) {
  LoraAdapter adapter(n_layers, d_model, rank);
  Rng rng(seed);
  for (int layer = 0; layer < n_layers; ++layer) {
    for (int t = 0; t < kNumTargets; ++t) {
      LoraMatrixPair& pair =
          adapter.pair(layer, static_cast<ProjTarget>(t));
      for (double& v : pair.a.data()) v = rng.normal() * kInitStddev;
    }
  }
  return adapter;
}

Tensor fused_projection(const Tensor& h, const Tensor& w,
                        const LoraMatrixPair* global,
                        const LoraMatrixPair* local, double alpha) {
  const int64_t d_in = w.rows(), d_out = w.cols();
  double wg = 0.0, wl = 0.0;
  if (global != nullptr && local != nullptr) {
    wg = 1.0 - alpha;
    wl = alpha;
  } else if (global != nullptr) {
    wg = 1.0;
  } else if (local != nullptr) {
    wl = 1.0;
  }
  Tensor out = matmul(h, w);
  if (global != nullptr && wg != 0.0) {
    check_pair_shapes(*global, d_in, d_out, "global");
    out = add_scaled(out, matmul_nt(matmul_nt(h, global->a), global->b), wg);
  }
  if (local != nullptr && wl != 0.0) {
    check_pair_shapes(*local, d_in, d_out, "local");
    out = add_scaled(out, matmul_nt(matmul_nt(h, local->a), local->b), wl);
  }
  return out;
}

Tensor fused_projection(const Tensor& h, const Tensor& w,
                        const AdapterStack& stack, int layer,
                        ProjTarget target) {
  const LoraMatrixPair* g =
      stack.global != nullptr ? &stack.global->pair(layer, target) : nullptr;
  const LoraMatrixPair* l =
      stack.local != nullptr ? &stack.local->pair(layer, target) : nullptr;
  return fused_projection(h, w, g, l, stack.alpha);
}

std::vector<Tensor> merge(const LoraAdapter& adapter) {
  std::vector<Tensor> out;
  out.reserve(static_cast<size_t>(adapter.n_layers()) * kNumTargets);
  for (int layer = 0; layer < adapter.n_layers(); ++layer) {
    for (int t = 0; t < kNumTargets; ++t) {
      const LoraMatrixPair& pair =
          adapter.pair(layer, static_cast<ProjTarget>(t));
      // Stored-layout delta A^T * B^T via the pair's own factors.
      Tensor at = Tensor::zeros({pair.a.cols(), pair.a.rows()});
      for (int64_t i = 0; i < pair.a.rows(); ++i)
        for (int64_t j = 0; j < pair.a.cols(); ++j)
          at.at(j, i) = pair.a.at(i, j);
      out.push_back(matmul_nt(at, pair.b));
    }
  }
  return out;
}

size_t serialized_size(int n_layers, int d_model, int rank) {
  return 5 * sizeof(uint32_t) + static_cast<size_t>(n_layers) * kNumTargets *
                                    2 * static_cast<size_t>(d_model) *
                                    static_cast<size_t>(rank) * sizeof(double);
}

std::vector<uint8_t> serialize(const LoraAdapter& adapter) {
  ByteWriter w;
  w.u32(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<uint32_t>(adapter.rank()));
  w.u32(static_cast<uint32_t>(adapter.n_layers()));
  w.u32(static_cast<uint32_t>(adapter.d_model()));
  for (int layer = 0; layer < adapter.n_layers(); ++layer) {
    for (int t = 0; t < kNumTargets; ++t) {
      const LoraMatrixPair& pair =
          adapter.pair(layer, static_cast<ProjTarget>(t));
      w.f64_span(pair.a.data());
      w.f64_span(pair.b.data());
    }
  }
  return w.take();
}

LoraAdapter deserialize(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  uint32_t magic = r.u32("adapter magic");
  if (magic != kMagic)
    throw FormatError("adapter payload: bad magic", 0);
  uint32_t version = r.u32("adapter version");
  if (version != kVersion)
    throw FormatError(
        "adapter payload: unsupported version " + std::to_string(version), 4);
  uint32_t rank = r.u32("adapter rank");
  uint32_t n_layers = r.u32("adapter layer count");
  uint32_t d_model = r.u32("adapter width");
  if (rank < 1 || d_model < 2 || rank >= d_model || n_layers > 65536 ||
      d_model > 65536) {
    throw FormatError("adapter payload: implausible header (rank " +
                          std::to_string(rank) + ", layers " +
                          std::to_string(n_layers) + ", width " +
                          std::to_string(d_model) + ")",
                      8);
  }
  LoraAdapter adapter(static_cast<int>(n_layers), static_cast<int>(d_model),
                      static_cast<int>(rank));
  for (uint32_t layer = 0; layer < n_layers; ++layer) {
    for (int t = 0; t < kNumTargets; ++t) {
      LoraMatrixPair& pair = adapter.pair(static_cast<int>(layer),
                                          static_cast<ProjTarget>(t));
      r.f64_span(pair.a.data(), "adapter A factor");
      r.f64_span(pair.b.data(), "adapter B factor");
    }
  }
  r.expect_end("adapter payload");
  return adapter;
}

uint64_t adapter_hash(const LoraAdapter& adapter) {
  std::vector<uint8_t> bytes = serialize(adapter);
  return content_hash(std::span<const uint8_t>(bytes));
}

bool adapters_equal(const LoraAdapter& a, const LoraAdapter& b) {
  if (a.n_layers() != b.n_layers() || a.d_model() != b.d_model() ||
      a.rank() != b.rank())
    return false;
  std::vector<uint8_t> ba = serialize(a);
  std::vector<uint8_t> bb = serialize(b);
  return ba == bb;
}

}  // namespace feddpa
