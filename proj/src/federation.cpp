#include "feddpa/federation.hpp"

#include <algorithm>
#include <cmath>
#include <span>

#include "json.hpp"

#include "feddpa/rng.hpp"
#include "feddpa/util.hpp"

namespace feddpa {

double sgd_finetune(LoraAdapter& adapter, const AdapterStack& stack,
                    const Backbone& backbone,
                    const std::vector<Instance>& train, int epochs,
                    const FedConfig& config, uint64_t stream,
                    const LoraAdapter* prox_anchor, const std::string& who) {
  if (epochs <= 0) return 0.0;
  if (train.empty()) throw FedError(who + " has no training data");
  adapter.set_trainable(true);
  std::vector<Tensor> params = adapter.parameters();
  std::vector<Tensor> anchor_params;
  if (prox_anchor) anchor_params = prox_anchor->parameters();

  Rng rng(stream);
  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  double total = 0.0;
  int steps = 0;
  const size_t batch_size = static_cast<size_t>(config.batch_size);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    for (size_t at = 0; at < order.size(); at += batch_size) {
      std::vector<const Instance*> batch;
      batch.reserve(batch_size);
      for (size_t j = at; j < std::min(at + batch_size, order.size()); ++j)
        batch.push_back(&train[order[j]]);
      Tensor loss = training_loss(backbone, batch, stack);
      const double value = loss.item();
      if (!std::isfinite(value))
        throw FedError("training diverged for " + who);
      backward(loss);
      if (prox_anchor) {
        for (size_t p = 0; p < params.size(); ++p) {
          std::span<double> g = params[p].grad();
          std::span<const double> w = params[p].data();
          std::span<const double> ref = anchor_params[p].data();
          for (size_t i = 0; i < g.size(); ++i)
            g[i] += config.prox_mu * (w[i] - ref[i]);
        }
      }
      sgd_step(params, config.lr);
      total += value;
      ++steps;
    }
  }
  adapter.set_trainable(false);
  return total / steps;
}

const char* algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::kFedDpaF: return "feddpa_f";
    case Algorithm::kFedDpaT: return "feddpa_t";
    case Algorithm::kFedIt: return "fedit";
    case Algorithm::kFedLora: return "fedlora";
    case Algorithm::kLocal: return "local";
    case Algorithm::kCentralized: return "centralized";
  }
  return "?";
}

Algorithm algorithm_from_name(const std::string& name) {
  if (name == "feddpa_f") return Algorithm::kFedDpaF;
  if (name == "feddpa_t") return Algorithm::kFedDpaT;
  if (name == "fedit") return Algorithm::kFedIt;
  if (name == "fedlora") return Algorithm::kFedLora;
  if (name == "local") return Algorithm::kLocal;
  if (name == "centralized") return Algorithm::kCentralized;
  throw FedError("unknown algorithm: " + name);
}

const char* aggregation_name(Aggregation a) {
  return a == Aggregation::kFedAvg ? "fedavg" : "fedprox";
}

Aggregation aggregation_from_name(const std::string& name) {
  if (name == "fedavg") return Aggregation::kFedAvg;
  if (name == "fedprox") return Aggregation::kFedProx;
  throw FedError("unknown aggregation: " + name);
}

const char* sample_mode_name(SampleMode m) {
  return m == SampleMode::kFlat ? "flat" : "per_task";
}

SampleMode sample_mode_from_name(const std::string& name) {
  if (name == "flat") return SampleMode::kFlat;
  if (name == "per_task") return SampleMode::kPerTask;
  throw FedError("unknown sample mode: " + name);
}

void FedConfig::validate() const {
  if (n_clients < 1) throw FedError("need at least one client");
  if (rounds < 0) throw FedError("round count cannot be negative");
  if (!(sample_rate > 0.0) || sample_rate > 1.0)
    throw FedError("sample rate must lie in (0, 1]");
  if (local_epochs < 0 || finetune_epochs < 0 || solo_epochs < 0)
    throw FedError("epoch counts cannot be negative");
  if (batch_size < 1) throw FedError("batch size must be at least 1");
  if (!(lr > 0.0)) throw FedError("learning rate must be positive");
  if (rank < 1) throw FedError("adapter rank must be at least 1");
  if (alpha < 0.0 || alpha > 1.0) throw FedError("alpha must lie in [0, 1]");
  if (!(lambda > 0.0) || lambda > 1.0)
    throw FedError("lambda must lie in (0, 1]");
  if (sample_count < 1) throw FedError("sample count must be at least 1");
  if (prox_mu < 0.0) throw FedError("fedprox mu cannot be negative");
  if (workers < 1) throw FedError("worker count must be at least 1");
}

std::string round_log_json(const RoundLog& log) {
  nlohmann::json j;
  j["round"] = log.round;
  j["selected"] = log.selected;
  j["mean_client_loss"] = log.mean_client_loss;
  j["bytes_up"] = log.bytes_up;
  j["bytes_down"] = log.bytes_down;
  return j.dump();
}

uint64_t client_round_seed(uint64_t seed, int client_id, int round) {
  return derive_seed(seed, "client-round", static_cast<uint64_t>(client_id),
                     static_cast<uint64_t>(round));
}

std::vector<int> sample_clients(int round, const std::vector<ClientState>& clients,
                                const FedConfig& config) {
  config.validate();
  if (clients.empty()) throw FedError("cannot sample from zero clients");

  std::vector<int> selected;
  if (config.sample_mode == SampleMode::kFlat) {
    std::vector<int> ids;
    ids.reserve(clients.size());
    for (const ClientState& c : clients) ids.push_back(c.id);
    std::sort(ids.begin(), ids.end());
    const size_t k = static_cast<size_t>(
        std::ceil(config.sample_rate * static_cast<double>(ids.size())));
    Rng rng(derive_seed(config.seed, "sample-flat",
                        static_cast<uint64_t>(round)));
    for (size_t idx : rng.sample_without_replacement(ids.size(), k))
      selected.push_back(ids[idx]);
  } else {
    std::vector<int> task_ids;
    for (const ClientState& c : clients)
      if (std::find(task_ids.begin(), task_ids.end(), c.task_id) ==
          task_ids.end())
        task_ids.push_back(c.task_id);
    std::sort(task_ids.begin(), task_ids.end());
    for (int task : task_ids) {
      std::vector<int> group;
      for (const ClientState& c : clients)
        if (c.task_id == task) group.push_back(c.id);
      std::sort(group.begin(), group.end());
      const size_t k = static_cast<size_t>(
          std::ceil(config.sample_rate * static_cast<double>(group.size())));
      Rng rng(derive_seed(config.seed, "sample-task",
                          static_cast<uint64_t>(round),
                          static_cast<uint64_t>(task)));
      for (size_t idx : rng.sample_without_replacement(group.size(), k))
        selected.push_back(group[idx]);
    }
  }
  if (selected.empty()) throw FedError("client sampling selected nobody");
  std::sort(selected.begin(), selected.end());
  return selected;
}

ClientTrainResult client_train_global(const ClientState& client,
                                      const Backbone& backbone,
                                      const LoraAdapter& broadcast,
                                      const FedConfig& config, int round) {
  config.validate();
  if (!client.train || client.train->empty())
    throw FedError("client " + std::to_string(client.id) +
                   " has no training data");

  ClientTrainResult result{broadcast.clone(), 0.0};
  const bool prox =
      config.aggregation == Aggregation::kFedProx && config.prox_mu > 0.0;
  AdapterStack stack;
  stack.global = &result.adapter;
  result.mean_loss = sgd_finetune(
      result.adapter, stack, backbone, *client.train, config.local_epochs,
      config, client_round_seed(config.seed, client.id, round),
      prox ? &broadcast : nullptr,
      "client " + std::to_string(client.id) + " round " +
          std::to_string(round));
  return result;
}

LoraAdapter server_aggregate(
    const std::vector<std::pair<int, const LoraAdapter*>>& adapters) {
  if (adapters.empty()) throw FedError("nothing to aggregate");

  std::vector<std::pair<int, const LoraAdapter*>> ordered = adapters;
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });

  const LoraAdapter* first = ordered[0].second;
  for (const auto& [id, a] : ordered) {
    if (!a)
      throw FedError("aggregation received a null adapter from client " +
                     std::to_string(id));
    if (a->n_layers() != first->n_layers() || a->d_model() != first->d_model() ||
        a->rank() != first->rank())
      throw FedError("client " + std::to_string(id) +
                     " sent an adapter with mismatched shape or rank");
  }

  LoraAdapter mean = first->clone();
  std::vector<Tensor> out = mean.parameters();
  const double inv = 1.0 / static_cast<double>(ordered.size());
  for (size_t p = 0; p < out.size(); ++p) {
    std::span<double> dst = out[p].data();
    std::fill(dst.begin(), dst.end(), 0.0);
    for (const auto& [id, a] : ordered) {
      std::span<const double> src = a->parameters()[p].data();
      for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
    for (size_t i = 0; i < dst.size(); ++i) dst[i] *= inv;
  }
  return mean;
}

RoundLog run_round(ServerState& server, std::vector<ClientState>& clients,
                   const Backbone& backbone, const FedConfig& config) {
  config.validate();
  const int round = server.round;
  const std::vector<int> selected = sample_clients(round, clients, config);

  std::vector<ClientState*> participants;
  participants.reserve(selected.size());
  for (int id : selected) {
    ClientState* found = nullptr;
    for (ClientState& c : clients)
      if (c.id == id) found = &c;
    if (!found) throw FedError("sampled unknown client " + std::to_string(id));
    participants.push_back(found);
  }

  const uint64_t payload = static_cast<uint64_t>(serialized_size(
      server.global_adapter.n_layers(), server.global_adapter.d_model(),
      server.global_adapter.rank()));

  std::vector<LoraAdapter> trained(participants.size());
  std::vector<double> losses(participants.size(), 0.0);
  parallel_for(participants.size(), config.workers,
               [&](size_t i) {
                 ClientState& client = *participants[i];
                 ClientTrainResult r = client_train_global(
                     client, backbone, server.global_adapter, config, round);
                 trained[i] = std::move(r.adapter);
                 losses[i] = r.mean_loss;

                 if (config.algorithm == Algorithm::kFedDpaT) {
                   if (!client.local_adapter)
                     client.local_adapter = new_adapter(
                         server.global_adapter.n_layers(),
                         server.global_adapter.d_model(),
                         server.global_adapter.rank(),
                         derive_seed(config.seed, "local-init",
                                     static_cast<uint64_t>(client.id)));
                   AdapterStack stack;
                   stack.global = &server.global_adapter;
                   stack.local = &*client.local_adapter;
                   stack.alpha = config.alpha;
                   sgd_finetune(*client.local_adapter, stack, backbone,
                                *client.train, config.local_epochs, config,
                                derive_seed(config.seed, "client-local",
                                            static_cast<uint64_t>(client.id),
                                            static_cast<uint64_t>(round)),
                                nullptr,
                                "client " + std::to_string(client.id) +
                                    " local round " + std::to_string(round));
                 }
               });

  std::vector<std::pair<int, const LoraAdapter*>> refs;
  refs.reserve(trained.size());
  for (size_t i = 0; i < trained.size(); ++i)
    refs.emplace_back(selected[i], &trained[i]);
  server.global_adapter = server_aggregate(refs);
  server.round = round + 1;

  RoundLog log;
  log.round = round;
  log.selected = selected;
  double sum = 0.0;
  for (double l : losses) sum += l;
  log.mean_client_loss = losses.empty() ? 0.0 : sum / losses.size();
  log.bytes_down = payload * participants.size();
  log.bytes_up = payload * participants.size();
  return log;
}

}  // namespace feddpa
