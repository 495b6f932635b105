#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "feddpa/data.hpp"
#include "feddpa/lora.hpp"
#include "feddpa/tensor.hpp"

namespace feddpa {

struct BackboneConfig {
  int vocab_size = 64;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 128;
  int max_seq_len = 64;
  uint64_t seed = 0;
};

struct ForwardResult {
  Tensor logits;        // [total_rows x vocab]
  Tensor final_hidden;  // [total_rows x d_model], after the final norm
  std::vector<Segment> segments;
};

// Decoder-only transformer with pre-norm blocks and a linear output head.
// Adapters hook into the query and value projections of every layer; the
// backbone itself is frozen after pre-training and never updated again.
class Backbone {
 public:
  static Backbone create(const BackboneConfig& config);

  const BackboneConfig& config() const { return config_; }
  bool frozen() const { return frozen_; }
  void freeze();

  // Canonical parameter order: embeddings, per-layer weights, final norm,
  // head. Used by training, checkpointing and hashing alike.
  std::vector<Tensor> parameters();
  std::vector<Tensor> parameters() const;
  size_t parameter_count() const;

  ForwardResult forward_batch(const std::vector<std::vector<int>>& sequences,
                              const AdapterStack& stack) const;
  ForwardResult forward(std::span<const int> tokens,
                        const AdapterStack& stack) const;

  Backbone clone() const;
  // Clone whose query/value weights absorb the adapter's dense deltas.
  Backbone merged_with(const LoraAdapter& adapter) const;

  uint64_t params_hash() const;
  void save(const std::filesystem::path& path) const;
  static Backbone load(const std::filesystem::path& path);

 private:
  struct Layer {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
  };

  BackboneConfig config_;
  Tensor tok_emb_, pos_emb_;
  std::vector<Layer> layers_;
  Tensor lnf_g_, lnf_b_;
  Tensor head_;
  bool frozen_ = false;
};

// Closed-form parameter count for a configuration, without building it.
size_t backbone_parameter_count(const BackboneConfig& config);

// Language-modeling loss over a batch of instances; positions before the
// response are excluded unless loss_on_prompt.
Tensor training_loss(const Backbone& backbone,
                     const std::vector<const Instance*>& batch,
                     const AdapterStack& stack, bool loss_on_prompt = false);

struct PretrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double lr = 0.5;
  uint64_t seed = 0;
};

// Brief next-token training over the task corpus so the frozen model
// yields informative hidden states. Returns the last epoch's mean loss.
// The backbone must not be frozen yet.
double pretrain(Backbone& backbone, std::span<const Instance> corpus,
                const PretrainConfig& config);

// Greedy continuation of the prompt; returns only the generated suffix,
// which includes the stop token when one is produced.
std::vector<int> greedy_decode(const Backbone& backbone,
                               const AdapterStack& stack,
                               std::span<const int> prompt_tokens, int max_new,
                               int stop_token = Vocab::kEndId);

enum class EmbedMode { kLast, kAvg };
const char* embed_mode_name(EmbedMode mode);
EmbedMode embed_mode_from_name(const std::string& name);

// Instance representation from the final layer, computed with the shared
// adapter alone attached. LAST takes the closing position; AVG averages
// the real token positions.
std::vector<double> extract_embedding(const Backbone& backbone,
                                      const LoraAdapter* global_adapter,
                                      std::span<const int> tokens,
                                      EmbedMode mode);

}  // namespace feddpa
