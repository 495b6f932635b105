#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "feddpa/data.hpp"
#include "feddpa/federation.hpp"
#include "feddpa/model.hpp"

namespace feddpa {

// Everything a training procedure hands to evaluation: the shared adapter
// (when the procedure produces one), the per-client personal adapters (ditto),
// and the exact configuration that produced them.
struct TrainedSystem {
  FedConfig config;
  std::optional<LoraAdapter> global_adapter;
  std::map<int, LoraAdapter> local_adapters;
  std::vector<RoundLog> history;
};

// Invoked after each completed communication round with a snapshot of the
// system so far (adapters cloned, history up to that round). Observers only
// read; training state never flows back through them.
using RoundObserver = std::function<void(const TrainedSystem&)>;

// One ClientState per dataset client, ids ascending. The returned states
// point into the dataset, which must outlive them.
std::vector<ClientState> make_clients(const FederatedDataset& dataset);

// Sequential variant: K federated rounds build the shared adapter, then each
// client fine-tunes a copy of it alone as its personal adapter.
TrainedSystem feddpa_f(const Backbone& backbone, const FederatedDataset& dataset,
                       const FedConfig& config);

// Iterative variant: each round trains the communicated adapter alone, then
// the personal adapter against the frozen broadcast through the alpha fusion.
TrainedSystem feddpa_t(const Backbone& backbone, const FederatedDataset& dataset,
                       const FedConfig& config);

// K rounds of shared-adapter training only.
TrainedSystem fedit(const Backbone& backbone, const FederatedDataset& dataset,
                    const FedConfig& config);

// Same training trace as feddpa_f; evaluation later composes only the
// fine-tuned adapter.
TrainedSystem fedlora(const Backbone& backbone, const FederatedDataset& dataset,
                      const FedConfig& config);

// Per-client solo training, no communication.
TrainedSystem local_only(const Backbone& backbone, const FederatedDataset& dataset,
                         const FedConfig& config);

// One adapter over the pooled data of every client.
TrainedSystem centralized(const Backbone& backbone, const FederatedDataset& dataset,
                          const FedConfig& config);

// Dispatch on config.algorithm. The observer, when given, sees every
// completed round of the round-based procedures; the single-shot ones
// (LOCAL, CENTRALIZED) never call it.
TrainedSystem train_system(const Backbone& backbone,
                           const FederatedDataset& dataset,
                           const FedConfig& config,
                           const RoundObserver& observer = {});

// Checkpoint directory: config + backbone fingerprint, shared adapter,
// per-client adapters, round history. load_system verifies the backbone
// fingerprint and rejects mismatched checkpoints.
void save_system(const TrainedSystem& system, const Backbone& backbone,
                 const std::filesystem::path& dir);
TrainedSystem load_system(const std::filesystem::path& dir,
                          const Backbone& backbone);

std::string fed_config_json(const FedConfig& config);
FedConfig fed_config_from_json(const std::string& text);

}  // namespace feddpa
