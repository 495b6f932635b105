#include "feddpa/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "feddpa/rng.hpp"
#include "feddpa/util.hpp"

namespace feddpa {
namespace {

constexpr uint32_t kMagic = 0x4E424B42u;  // "BKBN"
constexpr uint32_t kVersion = 1;

void validate_config(const BackboneConfig& c) {
  if (c.vocab_size < 2 || c.d_model < 1 || c.n_layers < 1 || c.n_heads < 1 ||
      c.d_ff < 1 || c.max_seq_len < 1)
    throw ShapeError("backbone config: all dimensions must be positive");
  if (c.d_model % c.n_heads != 0)
    throw ShapeError("backbone config: d_model " + std::to_string(c.d_model) +
                     " not divisible by " + std::to_string(c.n_heads) +
                     " heads");
}

void validate_adapter(const LoraAdapter* adapter, const BackboneConfig& c,
                      const char* role) {
  if (adapter == nullptr) return;
  if (adapter->n_layers() != c.n_layers || adapter->d_model() != c.d_model)
    throw ShapeError(std::string(role) + " adapter built for " +
                     std::to_string(adapter->n_layers()) + " layers of width " +
                     std::to_string(adapter->d_model()) +
                     " does not fit this backbone");
}

}  // namespace

Backbone Backbone::create(const BackboneConfig& config) {
  validate_config(config);
  Backbone bb;
  bb.config_ = config;
  Rng rng(derive_seed(config.seed, "backbone"));
  const int d = config.d_model;
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double ff_std = 1.0 / std::sqrt(static_cast<double>(config.d_ff));
  bb.tok_emb_ = Tensor::randn({config.vocab_size, d}, rng, 0.1, true);
  bb.pos_emb_ = Tensor::randn({config.max_seq_len, d}, rng, 0.1, true);
  bb.layers_.resize(static_cast<size_t>(config.n_layers));
  for (Layer& layer : bb.layers_) {
    layer.ln1_g = Tensor::full({d}, 1.0, true);
    layer.ln1_b = Tensor::zeros({d}, true);
    layer.wq = Tensor::randn({d, d}, rng, w_std, true);
    layer.bq = Tensor::zeros({d}, true);
    layer.wk = Tensor::randn({d, d}, rng, w_std, true);
    layer.bk = Tensor::zeros({d}, true);
    layer.wv = Tensor::randn({d, d}, rng, w_std, true);
    layer.bv = Tensor::zeros({d}, true);
    layer.wo = Tensor::randn({d, d}, rng, w_std, true);
    layer.bo = Tensor::zeros({d}, true);
    layer.ln2_g = Tensor::full({d}, 1.0, true);
    layer.ln2_b = Tensor::zeros({d}, true);
    layer.w1 = Tensor::randn({d, config.d_ff}, rng, w_std, true);
    layer.b1 = Tensor::zeros({config.d_ff}, true);
    layer.w2 = Tensor::randn({config.d_ff, d}, rng, ff_std, true);
    layer.b2 = Tensor::zeros({d}, true);
  }
  bb.lnf_g_ = Tensor::full({d}, 1.0, true);
  bb.lnf_b_ = Tensor::zeros({d}, true);
  bb.head_ = Tensor::randn({d, config.vocab_size}, rng, w_std, true);
  return bb;
}

void Backbone::freeze() {
  for (Tensor& p : parameters()) p.set_requires_grad(false);
  frozen_ = true;
}

std::vector<Tensor> Backbone::parameters() {
  std::vector<Tensor> out{tok_emb_, pos_emb_};
  for (Layer& l : layers_) {
    for (Tensor* t : {&l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv,
                      &l.bv, &l.wo, &l.bo, &l.ln2_g, &l.ln2_b, &l.w1, &l.b1,
                      &l.w2, &l.b2})
      out.push_back(*t);
  }
  out.push_back(lnf_g_);
  out.push_back(lnf_b_);
  out.push_back(head_);
  return out;
}

std::vector<Tensor> Backbone::parameters() const {
  return const_cast<Backbone*>(this)->parameters();
}

size_t Backbone::parameter_count() const {
  size_t n = 0;
  for (const Tensor& p : parameters()) n += p.numel();
  return n;
}

size_t backbone_parameter_count(const BackboneConfig& c) {
  const size_t d = static_cast<size_t>(c.d_model);
  const size_t ff = static_cast<size_t>(c.d_ff);
  const size_t vocab = static_cast<size_t>(c.vocab_size);
  const size_t per_layer = 2 * d            // first norm
                           + 4 * d * d + 4 * d  // attention projections
                           + 2 * d            // second norm
                           + d * ff + ff + ff * d + d;
  return vocab * d + static_cast<size_t>(c.max_seq_len) * d +
         static_cast<size_t>(c.n_layers) * per_layer + 2 * d + d * vocab;
}

ForwardResult Backbone::forward_batch(
    const std::vector<std::vector<int>>& sequences,
    const AdapterStack& stack) const {
  if (sequences.empty())
    throw ShapeError("forward: empty batch");
  validate_adapter(stack.global, config_, "global");
  validate_adapter(stack.local, config_, "local");
  if (stack.global != nullptr && stack.local != nullptr &&
      (stack.alpha < 0.0 || stack.alpha > 1.0))
    throw ShapeError("forward: fusion weight must lie in [0, 1]");

  std::vector<int> ids, positions;
  std::vector<Segment> segments;
  int64_t cursor = 0;
  for (const std::vector<int>& seq : sequences) {
    if (seq.empty()) throw ShapeError("forward: empty token sequence");
    if (static_cast<int>(seq.size()) > config_.max_seq_len)
      throw ShapeError("forward: sequence of " + std::to_string(seq.size()) +
                       " tokens exceeds the context window of " +
                       std::to_string(config_.max_seq_len));
    segments.push_back({cursor, cursor + static_cast<int64_t>(seq.size())});
    cursor += static_cast<int64_t>(seq.size());
    ids.insert(ids.end(), seq.begin(), seq.end());
    for (size_t p = 0; p < seq.size(); ++p)
      positions.push_back(static_cast<int>(p));
  }

  Tensor x = add(embedding_lookup(tok_emb_, ids),
                 embedding_lookup(pos_emb_, positions));
  for (size_t li = 0; li < layers_.size(); ++li) {
    const Layer& l = layers_[li];
    const int layer = static_cast<int>(li);
    Tensor n1 = layer_norm_rows(x, l.ln1_g, l.ln1_b);
    Tensor q =
        add_bias(fused_projection(n1, l.wq, stack, layer, ProjTarget::kQuery),
                 l.bq);
    Tensor k = add_bias(matmul(n1, l.wk), l.bk);
    Tensor v =
        add_bias(fused_projection(n1, l.wv, stack, layer, ProjTarget::kValue),
                 l.bv);
    Tensor attn = causal_attention(q, k, v, segments, config_.n_heads);
    x = add(x, add_bias(matmul(attn, l.wo), l.bo));
    Tensor n2 = layer_norm_rows(x, l.ln2_g, l.ln2_b);
    Tensor ff = add_bias(
        matmul(gelu(add_bias(matmul(n2, l.w1), l.b1)), l.w2), l.b2);
    x = add(x, ff);
  }
  ForwardResult result;
  result.final_hidden = layer_norm_rows(x, lnf_g_, lnf_b_);
  result.logits = matmul(result.final_hidden, head_);
  result.segments = std::move(segments);
  return result;
}

ForwardResult Backbone::forward(std::span<const int> tokens,
                                const AdapterStack& stack) const {
  return forward_batch({std::vector<int>(tokens.begin(), tokens.end())},
                       stack);
}

Backbone Backbone::clone() const {
  Backbone out;
  out.config_ = config_;
  out.frozen_ = frozen_;
  out.tok_emb_ = tok_emb_.clone();
  out.pos_emb_ = pos_emb_.clone();
  out.layers_.resize(layers_.size());
  for (size_t i = 0; i < layers_.size(); ++i) {
    const Layer& src = layers_[i];
    Layer& dst = out.layers_[i];
    dst.ln1_g = src.ln1_g.clone();
    dst.ln1_b = src.ln1_b.clone();
    dst.wq = src.wq.clone();
    dst.bq = src.bq.clone();
    dst.wk = src.wk.clone();
    dst.bk = src.bk.clone();
    dst.wv = src.wv.clone();
    dst.bv = src.bv.clone();
    dst.wo = src.wo.clone();
    dst.bo = src.bo.clone();
    dst.ln2_g = src.ln2_g.clone();
    dst.ln2_b = src.ln2_b.clone();
    dst.w1 = src.w1.clone();
    dst.b1 = src.b1.clone();
    dst.w2 = src.w2.clone();
    dst.b2 = src.b2.clone();
  }
  out.lnf_g_ = lnf_g_.clone();
  out.lnf_b_ = lnf_b_.clone();
  out.head_ = head_.clone();
  if (!frozen_)
    for (Tensor& p : out.parameters()) p.set_requires_grad(true);
  return out;
}

Backbone Backbone::merged_with(const LoraAdapter& adapter) const {
  validate_adapter(&adapter, config_, "merged");
  Backbone out = clone();
  std::vector<Tensor> deltas = merge(adapter);
  for (int layer = 0; layer < config_.n_layers; ++layer) {
    Layer& l = out.layers_[static_cast<size_t>(layer)];
    const Tensor& dq = deltas[static_cast<size_t>(layer * kNumTargets)];
    const Tensor& dv = deltas[static_cast<size_t>(layer * kNumTargets) + 1];
    for (size_t i = 0; i < l.wq.numel(); ++i) l.wq.data()[i] += dq.data()[i];
    for (size_t i = 0; i < l.wv.numel(); ++i) l.wv.data()[i] += dv.data()[i];
  }
  return out;
}

uint64_t Backbone::params_hash() const {
  uint64_t h = kFnvOffset;
  for (const Tensor& p : parameters()) h = content_hash(p.data(), h);
  return h;
}

void Backbone::save(const std::filesystem::path& path) const {
  ByteWriter w;
  w.u32(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<uint32_t>(config_.vocab_size));
  w.u32(static_cast<uint32_t>(config_.d_model));
  w.u32(static_cast<uint32_t>(config_.n_layers));
  w.u32(static_cast<uint32_t>(config_.n_heads));
  w.u32(static_cast<uint32_t>(config_.d_ff));
  w.u32(static_cast<uint32_t>(config_.max_seq_len));
  w.u64(config_.seed);
  w.u32(frozen_ ? 1u : 0u);
  for (const Tensor& p : parameters()) w.f64_span(p.data());
  write_binary_file(path.string(), w.buffer());
}

Backbone Backbone::load(const std::filesystem::path& path) {
  std::vector<uint8_t> bytes = read_binary_file(path.string());
  ByteReader r(bytes);
  if (r.u32("backbone magic") != kMagic)
    throw FormatError(path.string() + ": not a backbone checkpoint", 0);
  uint32_t version = r.u32("backbone version");
  if (version != kVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " +
                          std::to_string(version),
                      4);
  BackboneConfig config;
  config.vocab_size = static_cast<int>(r.u32("vocab size"));
  config.d_model = static_cast<int>(r.u32("d_model"));
  config.n_layers = static_cast<int>(r.u32("layer count"));
  config.n_heads = static_cast<int>(r.u32("head count"));
  config.d_ff = static_cast<int>(r.u32("feed-forward width"));
  config.max_seq_len = static_cast<int>(r.u32("context window"));
  config.seed = r.u64("seed");
  uint32_t frozen = r.u32("frozen flag");
  Backbone bb = create(config);
  for (Tensor& p : bb.parameters()) r.f64_span(p.data(), "backbone parameter");
  r.expect_end("backbone checkpoint");
  if (frozen != 0) bb.freeze();
  return bb;
}

Tensor training_loss(const Backbone& backbone,
                     const std::vector<const Instance*>& batch,
                     const AdapterStack& stack, bool loss_on_prompt) {
  if (batch.empty()) throw ShapeError("training_loss: empty batch");
  std::vector<std::vector<int>> sequences;
  std::vector<int> targets;
  sequences.reserve(batch.size());
  for (const Instance* inst : batch) {
    TrainingSequence seq = make_training_sequence(*inst, loss_on_prompt);
    targets.insert(targets.end(), seq.targets.begin(), seq.targets.end());
    sequences.push_back(std::move(seq.tokens));
  }
  ForwardResult fr = backbone.forward_batch(sequences, stack);
  return cross_entropy(fr.logits, targets);
}

double pretrain(Backbone& backbone, std::span<const Instance> corpus,
                const PretrainConfig& config) {
  if (backbone.frozen())
    throw std::logic_error("pretrain: backbone is already frozen");
  if (corpus.empty()) throw ShapeError("pretrain: empty corpus");
  if (config.batch_size < 1 || config.epochs < 0)
    throw ShapeError("pretrain: bad schedule");
  std::vector<Tensor> params = backbone.parameters();
  Rng rng(derive_seed(config.seed, "pretrain"));
  std::vector<size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), size_t{0});
  AdapterStack bare;
  double epoch_loss = 0.0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    epoch_loss = 0.0;
    size_t batches = 0;
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(config.batch_size)) {
      std::vector<const Instance*> batch;
      for (size_t i = start;
           i < std::min(order.size(),
                        start + static_cast<size_t>(config.batch_size));
           ++i)
        batch.push_back(&corpus[order[i]]);
      Tensor loss = training_loss(backbone, batch, bare, true);
      check_finite(loss, "pretrain loss (epoch " + std::to_string(epoch) + ")");
      backward(loss);
      sgd_step(params, config.lr);
      epoch_loss += loss.item();
      ++batches;
    }
    epoch_loss /= static_cast<double>(batches);
  }
  return epoch_loss;
}

std::vector<int> greedy_decode(const Backbone& backbone,
                               const AdapterStack& stack,
                               std::span<const int> prompt_tokens, int max_new,
                               int stop_token) {
  if (prompt_tokens.empty()) throw ShapeError("greedy_decode: empty prompt");
  if (max_new < 0) throw ShapeError("greedy_decode: negative budget");
  if (static_cast<int>(prompt_tokens.size()) + max_new >
      backbone.config().max_seq_len)
    throw ShapeError("greedy_decode: prompt of " +
                     std::to_string(prompt_tokens.size()) + " tokens plus " +
                     std::to_string(max_new) +
                     " new tokens exceeds the context window");
  NoGradGuard ng;
  std::vector<int> tokens(prompt_tokens.begin(), prompt_tokens.end());
  std::vector<int> generated;
  for (int step = 0; step < max_new; ++step) {
    ForwardResult fr = backbone.forward(tokens, stack);
    const int64_t last = fr.logits.rows() - 1;
    int best = 0;
    double best_score = fr.logits.at(last, 0);
    for (int64_t j = 1; j < fr.logits.cols(); ++j) {
      if (fr.logits.at(last, j) > best_score) {
        best_score = fr.logits.at(last, j);
        best = static_cast<int>(j);
      }
    }
    tokens.push_back(best);
    generated.push_back(best);
    if (best == stop_token) break;
  }
  return generated;
}

const char* embed_mode_name(EmbedMode mode) {
  return mode == EmbedMode::kLast ? "last" : "avg";
}

EmbedMode embed_mode_from_name(const std::string& name) {
  if (name == "last") return EmbedMode::kLast;
  if (name == "avg") return EmbedMode::kAvg;
  throw std::invalid_argument("unknown embedding mode: " + name);
}

std::vector<double> extract_embedding(const Backbone& backbone,
                                      const LoraAdapter* global_adapter,
                                      std::span<const int> tokens,
                                      EmbedMode mode) {
  if (tokens.empty()) throw ShapeError("extract_embedding: empty sequence");
  NoGradGuard ng;
  AdapterStack stack;
  stack.global = global_adapter;
  ForwardResult fr = backbone.forward(tokens, stack);
  const int64_t rows = fr.final_hidden.rows();
  const int64_t d = fr.final_hidden.cols();
  std::vector<double> out(static_cast<size_t>(d), 0.0);
  if (mode == EmbedMode::kLast) {
    for (int64_t j = 0; j < d; ++j)
      out[static_cast<size_t>(j)] = fr.final_hidden.at(rows - 1, j);
  } else {
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < d; ++j)
        out[static_cast<size_t>(j)] += fr.final_hidden.at(i, j);
    for (double& v : out) v /= static_cast<double>(rows);
  }
  return out;
}

}  // namespace feddpa
