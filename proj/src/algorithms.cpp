#include "feddpa/algorithms.hpp"

#include <algorithm>
#include <sstream>

#include "json.hpp"

#include "feddpa/rng.hpp"
#include "feddpa/util.hpp"

namespace feddpa {

namespace {

constexpr int kCheckpointVersion = 1;

const TaskData& task_by_id(const FederatedDataset& dataset, int task_id) {
  for (const TaskData& t : dataset.tasks)
    if (t.spec.task_id == task_id) return t;
  throw FedError("dataset has no task with id " + std::to_string(task_id));
}

LoraAdapter fresh_global(const Backbone& backbone, const FedConfig& config) {
  return new_adapter(backbone.config().n_layers, backbone.config().d_model,
                     config.rank, derive_seed(config.seed, "global-init"));
}

LoraAdapter fresh_client(const Backbone& backbone, const FedConfig& config,
                         int client_id) {
  return new_adapter(backbone.config().n_layers, backbone.config().d_model,
                     config.rank,
                     derive_seed(config.seed, "local-init",
                                 static_cast<uint64_t>(client_id)));
}

TrainedSystem snapshot_state(const FedConfig& config, const ServerState& server,
                             const std::vector<ClientState>& clients,
                             const std::vector<RoundLog>& history) {
  TrainedSystem s;
  s.config = config;
  s.global_adapter = server.global_adapter.clone();
  for (const ClientState& c : clients)
    if (c.local_adapter) s.local_adapters.emplace(c.id, c.local_adapter->clone());
  s.history = history;
  return s;
}

// K rounds of the federation loop; collects whatever personal adapters the
// rounds produced (FEDDPA_T trains them inline, others leave none).
TrainedSystem run_schedule(const Backbone& backbone,
                           const FederatedDataset& dataset,
                           const FedConfig& config,
                           const RoundObserver& observer) {
  config.validate();
  std::vector<ClientState> clients = make_clients(dataset);
  if (clients.size() != static_cast<size_t>(config.n_clients))
    throw FedError("config expects " + std::to_string(config.n_clients) +
                   " clients but the dataset provides " +
                   std::to_string(clients.size()));

  ServerState server{fresh_global(backbone, config), 0};
  TrainedSystem system;
  system.config = config;
  for (int k = 0; k < config.rounds; ++k) {
    system.history.push_back(run_round(server, clients, backbone, config));
    if (observer)
      observer(snapshot_state(config, server, clients, system.history));
  }

  system.global_adapter = std::move(server.global_adapter);
  for (ClientState& c : clients)
    if (c.local_adapter)
      system.local_adapters.emplace(c.id, std::move(*c.local_adapter));
  return system;
}

// Phase two of the sequential variant: every client fine-tunes a copy of the
// aggregated adapter alone. Streams are drawn one round past the schedule so
// they never collide with round streams.
void finetune_locals(TrainedSystem& system, const Backbone& backbone,
                     const FederatedDataset& dataset, const FedConfig& config) {
  std::vector<ClientState> clients = make_clients(dataset);
  std::vector<LoraAdapter> tuned(clients.size());
  parallel_for(clients.size(), config.workers,
               [&](size_t i) {
                 const ClientState& client = clients[i];
                 LoraAdapter local = system.global_adapter->clone();
                 AdapterStack stack;
                 stack.local = &local;
                 stack.alpha = 1.0;
                 sgd_finetune(local, stack, backbone, *client.train,
                              config.finetune_epochs, config,
                              client_round_seed(config.seed, client.id,
                                                config.rounds),
                              nullptr,
                              "client " + std::to_string(client.id) +
                                  " fine-tune");
                 tuned[i] = std::move(local);
               });
  for (size_t i = 0; i < clients.size(); ++i)
    system.local_adapters.insert_or_assign(clients[i].id,
                                           std::move(tuned[i]));
}

TrainedSystem feddpa_f_run(const Backbone& backbone,
                           const FederatedDataset& dataset, FedConfig cfg,
                           const RoundObserver& observer) {
  cfg.algorithm = Algorithm::kFedDpaF;
  TrainedSystem system = run_schedule(backbone, dataset, cfg, observer);
  finetune_locals(system, backbone, dataset, cfg);
  return system;
}

TrainedSystem fedlora_run(const Backbone& backbone,
                          const FederatedDataset& dataset, FedConfig cfg,
                          const RoundObserver& observer) {
  cfg.algorithm = Algorithm::kFedLora;
  TrainedSystem system = run_schedule(backbone, dataset, cfg, observer);
  finetune_locals(system, backbone, dataset, cfg);
  return system;
}

}  // namespace

std::vector<ClientState> make_clients(const FederatedDataset& dataset) {
  std::vector<ClientState> clients;
  clients.reserve(dataset.clients.size());
  for (const ClientAssignment& a : dataset.clients) {
    ClientState c;
    c.id = a.client_id;
    c.task_id = a.task_id;
    c.train = &a.train;
    c.test = &task_by_id(dataset, a.task_id).test;
    clients.push_back(std::move(c));
  }
  std::sort(clients.begin(), clients.end(),
            [](const ClientState& x, const ClientState& y) {
              return x.id < y.id;
            });
  return clients;
}

TrainedSystem feddpa_f(const Backbone& backbone, const FederatedDataset& dataset,
                       const FedConfig& config) {
  return feddpa_f_run(backbone, dataset, config, {});
}

TrainedSystem feddpa_t(const Backbone& backbone, const FederatedDataset& dataset,
                       const FedConfig& config) {
  FedConfig cfg = config;
  cfg.algorithm = Algorithm::kFedDpaT;
  return run_schedule(backbone, dataset, cfg, {});
}

TrainedSystem fedit(const Backbone& backbone, const FederatedDataset& dataset,
                    const FedConfig& config) {
  FedConfig cfg = config;
  cfg.algorithm = Algorithm::kFedIt;
  return run_schedule(backbone, dataset, cfg, {});
}

TrainedSystem fedlora(const Backbone& backbone, const FederatedDataset& dataset,
                      const FedConfig& config) {
  return fedlora_run(backbone, dataset, config, {});
}

TrainedSystem local_only(const Backbone& backbone, const FederatedDataset& dataset,
                         const FedConfig& config) {
  FedConfig cfg = config;
  cfg.algorithm = Algorithm::kLocal;
  cfg.validate();
  std::vector<ClientState> clients = make_clients(dataset);
  if (clients.size() != static_cast<size_t>(cfg.n_clients))
    throw FedError("config expects " + std::to_string(cfg.n_clients) +
                   " clients but the dataset provides " +
                   std::to_string(clients.size()));

  TrainedSystem system;
  system.config = cfg;
  std::vector<LoraAdapter> tuned(clients.size());
  parallel_for(clients.size(), cfg.workers,
               [&](size_t i) {
                 const ClientState& client = clients[i];
                 LoraAdapter local = fresh_client(backbone, cfg, client.id);
                 AdapterStack stack;
                 stack.local = &local;
                 stack.alpha = 1.0;
                 sgd_finetune(local, stack, backbone, *client.train,
                              cfg.solo_epochs, cfg,
                              derive_seed(cfg.seed, "solo-train",
                                          static_cast<uint64_t>(client.id)),
                              nullptr,
                              "client " + std::to_string(client.id) + " solo");
                 tuned[i] = std::move(local);
               });
  for (size_t i = 0; i < clients.size(); ++i)
    system.local_adapters.emplace(clients[i].id, std::move(tuned[i]));
  return system;
}

TrainedSystem centralized(const Backbone& backbone,
                          const FederatedDataset& dataset,
                          const FedConfig& config) {
  FedConfig cfg = config;
  cfg.algorithm = Algorithm::kCentralized;
  cfg.validate();
  std::vector<ClientState> clients = make_clients(dataset);

  std::vector<Instance> pooled;
  for (const ClientState& c : clients)
    pooled.insert(pooled.end(), c.train->begin(), c.train->end());
  if (pooled.empty()) throw FedError("no pooled training data");

  TrainedSystem system;
  system.config = cfg;
  LoraAdapter adapter = fresh_global(backbone, cfg);
  AdapterStack stack;
  stack.global = &adapter;
  sgd_finetune(adapter, stack, backbone, pooled, cfg.solo_epochs, cfg,
               derive_seed(cfg.seed, "central-train"), nullptr, "pooled run");
  system.global_adapter = std::move(adapter);
  return system;
}

TrainedSystem train_system(const Backbone& backbone,
                           const FederatedDataset& dataset,
                           const FedConfig& config,
                           const RoundObserver& observer) {
  FedConfig cfg = config;
  switch (config.algorithm) {
    case Algorithm::kFedDpaF:
      return feddpa_f_run(backbone, dataset, cfg, observer);
    case Algorithm::kFedDpaT:
      cfg.algorithm = Algorithm::kFedDpaT;
      return run_schedule(backbone, dataset, cfg, observer);
    case Algorithm::kFedIt:
      cfg.algorithm = Algorithm::kFedIt;
      return run_schedule(backbone, dataset, cfg, observer);
    case Algorithm::kFedLora:
      return fedlora_run(backbone, dataset, cfg, observer);
    case Algorithm::kLocal: return local_only(backbone, dataset, config);
    case Algorithm::kCentralized: return centralized(backbone, dataset, config);
  }
  throw FedError("unknown algorithm tag");
}

std::string fed_config_json(const FedConfig& c) {
  nlohmann::json j;
  j["n_clients"] = c.n_clients;
  j["rounds"] = c.rounds;
  j["sample_rate"] = c.sample_rate;
  j["sample_mode"] = sample_mode_name(c.sample_mode);
  j["local_epochs"] = c.local_epochs;
  j["finetune_epochs"] = c.finetune_epochs;
  j["solo_epochs"] = c.solo_epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["rank"] = c.rank;
  j["alpha"] = c.alpha;
  j["lambda"] = c.lambda;
  j["sample_count"] = c.sample_count;
  j["sim_metric"] = sim_metric_name(c.sim_metric);
  j["embed_mode"] = embed_mode_name(c.embed_mode);
  j["per_instance_weighting"] = c.per_instance_weighting;
  j["aggregation"] = aggregation_name(c.aggregation);
  j["prox_mu"] = c.prox_mu;
  j["algorithm"] = algorithm_name(c.algorithm);
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  return j.dump(2);
}

FedConfig fed_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FedError(std::string("bad config json: ") + e.what());
  }
  FedConfig d;
  FedConfig c;
  try {
    c.n_clients = j.value("n_clients", d.n_clients);
    c.rounds = j.value("rounds", d.rounds);
    c.sample_rate = j.value("sample_rate", d.sample_rate);
    c.sample_mode =
        sample_mode_from_name(j.value("sample_mode", sample_mode_name(d.sample_mode)));
    c.local_epochs = j.value("local_epochs", d.local_epochs);
    c.finetune_epochs = j.value("finetune_epochs", d.finetune_epochs);
    c.solo_epochs = j.value("solo_epochs", d.solo_epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.lr = j.value("lr", d.lr);
    c.rank = j.value("rank", d.rank);
    c.alpha = j.value("alpha", d.alpha);
    c.lambda = j.value("lambda", d.lambda);
    c.sample_count = j.value("sample_count", d.sample_count);
    c.sim_metric =
        sim_metric_from_name(j.value("sim_metric", sim_metric_name(d.sim_metric)));
    c.embed_mode =
        embed_mode_from_name(j.value("embed_mode", embed_mode_name(d.embed_mode)));
    c.per_instance_weighting =
        j.value("per_instance_weighting", d.per_instance_weighting);
    c.aggregation =
        aggregation_from_name(j.value("aggregation", aggregation_name(d.aggregation)));
    c.prox_mu = j.value("prox_mu", d.prox_mu);
    c.algorithm =
        algorithm_from_name(j.value("algorithm", algorithm_name(d.algorithm)));
    c.seed = j.value("seed", d.seed);
    c.workers = j.value("workers", d.workers);
  } catch (const nlohmann::json::exception& e) {
    throw FedError(std::string("bad config json: ") + e.what());
  }
  return c;
}

void save_system(const TrainedSystem& system, const Backbone& backbone,
                 const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);

  nlohmann::json meta;
  meta["version"] = kCheckpointVersion;
  meta["backbone_hash"] = hash_hex(backbone.params_hash());
  meta["config"] = nlohmann::json::parse(fed_config_json(system.config));
  meta["has_global"] = system.global_adapter.has_value();
  std::vector<int> ids;
  for (const auto& [id, _] : system.local_adapters) ids.push_back(id);
  meta["clients"] = ids;
  write_text_file((dir / "system.json").string(), meta.dump(2) + "\n");

  if (system.global_adapter)
    write_binary_file((dir / "global.bin").string(),
                      serialize(*system.global_adapter));
  for (const auto& [id, adapter] : system.local_adapters)
    write_binary_file((dir / ("local_" + std::to_string(id) + ".bin")).string(),
                      serialize(adapter));

  std::ostringstream rounds;
  for (const RoundLog& log : system.history)
    rounds << round_log_json(log) << "\n";
  write_text_file((dir / "rounds.jsonl").string(), rounds.str());
}

TrainedSystem load_system(const std::filesystem::path& dir,
                          const Backbone& backbone) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_text_file((dir / "system.json").string()));
  } catch (const nlohmann::json::exception& e) {
    throw FedError(std::string("bad checkpoint metadata: ") + e.what());
  }
  if (meta.value("version", -1) != kCheckpointVersion)
    throw FedError("unsupported checkpoint version");
  if (meta.value("backbone_hash", "") != hash_hex(backbone.params_hash()))
    throw FedError("checkpoint was trained against a different backbone");

  TrainedSystem system;
  system.config = fed_config_from_json(meta["config"].dump());
  if (meta.value("has_global", false)) {
    const std::vector<uint8_t> bytes =
        read_binary_file((dir / "global.bin").string());
    system.global_adapter = deserialize(bytes);
  }
  for (int id : meta.value("clients", std::vector<int>{})) {
    const std::vector<uint8_t> bytes = read_binary_file(
        (dir / ("local_" + std::to_string(id) + ".bin")).string());
    system.local_adapters.emplace(id, deserialize(bytes));
  }

  const std::filesystem::path rounds_path = dir / "rounds.jsonl";
  if (std::filesystem::exists(rounds_path)) {
    std::istringstream in(read_text_file(rounds_path.string()));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw FedError(std::string("bad round log: ") + e.what());
      }
      RoundLog log;
      log.round = j.value("round", 0);
      log.selected = j.value("selected", std::vector<int>{});
      log.mean_client_loss = j.value("mean_client_loss", 0.0);
      log.bytes_up = j.value("bytes_up", uint64_t{0});
      log.bytes_down = j.value("bytes_down", uint64_t{0});
      system.history.push_back(std::move(log));
    }
  }
  return system;
}

}  // namespace feddpa
