#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "feddpa/data.hpp"
#include "feddpa/lora.hpp"
#include "feddpa/model.hpp"
#include "feddpa/weighting.hpp"

namespace feddpa {

class FedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Aggregation { kFedAvg, kFedProx };
enum class Algorithm {
  kFedDpaF,
  kFedDpaT,
  kFedIt,
  kFedLora,
  kLocal,
  kCentralized,
};
enum class SampleMode { kFlat, kPerTask };

const char* algorithm_name(Algorithm a);
Algorithm algorithm_from_name(const std::string& name);
const char* aggregation_name(Aggregation a);
Aggregation aggregation_from_name(const std::string& name);
const char* sample_mode_name(SampleMode m);
SampleMode sample_mode_from_name(const std::string& name);

struct FedConfig {
  int n_clients = 8;
  int rounds = 10;
  double sample_rate = 1.0;
  SampleMode sample_mode = SampleMode::kFlat;
  int local_epochs = 5;
  int finetune_epochs = 1;
  int solo_epochs = 50;
  int batch_size = 32;
  double lr = 0.8;
  int rank = 8;
  double alpha = 0.5;
  double lambda = 1.0;
  int sample_count = 5;
  SimMetric sim_metric = SimMetric::kCosine;
  EmbedMode embed_mode = EmbedMode::kLast;
  bool per_instance_weighting = false;
  Aggregation aggregation = Aggregation::kFedAvg;
  double prox_mu = 0.01;
  Algorithm algorithm = Algorithm::kFedDpaF;
  uint64_t seed = 0;
  int workers = 1;

  void validate() const;
};

struct ClientState {
  int id = -1;
  int task_id = -1;
  const std::vector<Instance>* train = nullptr;
  const std::vector<Instance>* test = nullptr;
  // Personal adapter; never leaves the client. Empty optional until the
  // algorithm first trains it.
  std::optional<LoraAdapter> local_adapter;
};

struct ServerState {
  LoraAdapter global_adapter;
  int round = 0;
};

struct RoundLog {
  int round = 0;
  std::vector<int> selected;
  double mean_client_loss = 0.0;
  uint64_t bytes_up = 0;
  uint64_t bytes_down = 0;
};

std::string round_log_json(const RoundLog& log);

// Per-(seed, client, round) training stream; changing the sampling rate or
// another client's schedule never perturbs this client's draws.
uint64_t client_round_seed(uint64_t seed, int client_id, int round);

// Selected client ids for one round, ascending. Flat mode draws
// ceil(rate * M) clients uniformly; per-task mode draws ceil(rate * group)
// from each task group.
std::vector<int> sample_clients(int round, const std::vector<ClientState>& clients,
                                const FedConfig& config);

// Epochs of language-modeling SGD over one split. The stack decides what
// the forward composes; only `adapter` receives updates. When `prox_anchor`
// is set, each step adds prox_mu * (param - anchor) to the gradient, the
// derivative of (mu/2) * ||param - anchor||^2. Returns the mean batch loss
// (data term only); `who` names the trainee in divergence errors.
double sgd_finetune(LoraAdapter& adapter, const AdapterStack& stack,
                    const Backbone& backbone,
                    const std::vector<Instance>& train, int epochs,
                    const FedConfig& config, uint64_t stream,
                    const LoraAdapter* prox_anchor, const std::string& who);

// E epochs of language-modeling SGD on a copy of the broadcast adapter.
// Under FEDPROX, the proximal term anchors at the broadcast. Returns the
// trained copy and the mean batch loss.
struct ClientTrainResult {
  LoraAdapter adapter;
  double mean_loss = 0.0;
};
ClientTrainResult client_train_global(const ClientState& client,
                                      const Backbone& backbone,
                                      const LoraAdapter& broadcast,
                                      const FedConfig& config, int round);

// Unweighted element-wise mean over the participating adapters. Summation
// runs in ascending-client-id order regardless of how the list is arranged,
// so permuting it cannot move a single bit of the result.
LoraAdapter server_aggregate(
    const std::vector<std::pair<int, const LoraAdapter*>>& adapters);

// One communication round: sample, broadcast, train every sampled client's
// global-adapter copy (plus its local adapter under FEDDPA_T), aggregate.
RoundLog run_round(ServerState& server, std::vector<ClientState>& clients,
                   const Backbone& backbone, const FedConfig& config);

}  // namespace feddpa
