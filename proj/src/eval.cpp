#include "feddpa/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "json.hpp"

#include "feddpa/util.hpp"
#include "feddpa/weighting.hpp"

namespace feddpa {

namespace {

std::vector<std::string> unigrams(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream in(text);
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

// Task splits in ascending task-id order, so every reduction below walks a
// canonical sequence regardless of map iteration or worker interleaving.
std::vector<const TaskData*> sorted_tasks(const std::vector<TaskData>& tasks) {
  std::vector<const TaskData*> out;
  out.reserve(tasks.size());
  for (const TaskData& t : tasks) out.push_back(&t);
  std::sort(out.begin(), out.end(), [](const TaskData* a, const TaskData* b) {
    return a->spec.task_id < b->spec.task_id;
  });
  return out;
}

size_t slice_size(size_t split, int per_split) {
  if (per_split <= 0) return split;
  return std::min(split, static_cast<size_t>(per_split));
}

struct ClientSlot {
  ClientReport report;
  std::map<int, double> unseen_scores;  // task_id -> mean
  std::vector<InstanceScore> instances;
};

}  // namespace

double rouge1(const std::string& prediction, const std::string& reference) {
  const std::vector<std::string> ref = unigrams(reference);
  if (ref.empty()) throw EvalError("rouge1 requires a non-empty reference");
  const std::vector<std::string> pred = unigrams(prediction);
  if (pred.empty()) return 0.0;

  std::map<std::string, int> ref_counts;
  for (const std::string& w : ref) ++ref_counts[w];
  std::map<std::string, int> pred_counts;
  for (const std::string& w : pred) ++pred_counts[w];

  int overlap = 0;
  for (const auto& [w, n] : pred_counts) {
    auto it = ref_counts.find(w);
    if (it != ref_counts.end()) overlap += std::min(n, it->second);
  }
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / pred.size();
  const double r = static_cast<double>(overlap) / ref.size();
  return 2.0 * p * r / (p + r);
}

MetricsReport evaluate(const Backbone& backbone, const TrainedSystem& system,
                       const FederatedDataset& dataset,
                       const EvalConfig& config) {
  const Algorithm alg = system.config.algorithm;
  const bool dual =
      alg == Algorithm::kFedDpaF || alg == Algorithm::kFedDpaT;
  const bool shared_only =
      alg == Algorithm::kFedIt || alg == Algorithm::kCentralized;

  if ((dual || shared_only) && !system.global_adapter)
    throw EvalError("system has no shared adapter to evaluate");

  const std::vector<ClientState> clients = make_clients(dataset);
  if (clients.empty()) throw EvalError("dataset has no clients");
  const std::vector<const TaskData*> seen = sorted_tasks(dataset.tasks);
  const std::vector<const TaskData*> unseen =
      config.include_unseen ? sorted_tasks(dataset.unseen_tasks)
                            : std::vector<const TaskData*>{};

  std::vector<WeightingContext> contexts;
  if (dual) {
    WeightingConfig wc;
    wc.sample_count = system.config.sample_count;
    wc.lambda = alg == Algorithm::kFedDpaT ? system.config.alpha
                                           : system.config.lambda;
    wc.metric = system.config.sim_metric;
    wc.mode = system.config.embed_mode;
    wc.per_instance = system.config.per_instance_weighting;
    wc.seed = config.seed;
    contexts.reserve(clients.size());
    for (const ClientState& c : clients)
      contexts.push_back(build_context(c.id, backbone, *system.global_adapter,
                                       *c.train, wc));
  }

  const Vocab& vocab = Vocab::instance();
  std::vector<ClientSlot> slots(clients.size());

  parallel_for(clients.size(), config.workers, [&](size_t ci) {
    const ClientState& client = clients[ci];
    ClientSlot& slot = slots[ci];
    slot.report.client_id = client.id;
    slot.report.task_id = client.task_id;

    const LoraAdapter* local = nullptr;
    if (auto it = system.local_adapters.find(client.id);
        it != system.local_adapters.end())
      local = &it->second;
    if (!dual && !shared_only && !local)
      throw EvalError("client " + std::to_string(client.id) +
                      " has no personal adapter to evaluate");

    auto score_split = [&](const TaskData& task, bool record) {
      const size_t n = slice_size(task.test.size(), config.test_per_split);
      double score_sum = 0.0, alpha_sum = 0.0;
      for (size_t i = 0; i < n; ++i) {
        const Instance& inst = task.test[i];
        AdapterStack stack;
        double alpha = 0.0;
        if (dual) {
          alpha = compute_alpha(contexts[ci], inst);
          stack.global = &*system.global_adapter;
          // A never-sampled client can lack a personal adapter; its fusion
          // degenerates to the shared path.
          stack.local = local;
          stack.alpha = alpha;
        } else if (shared_only) {
          stack.global = &*system.global_adapter;
        } else {
          stack.local = local;
          stack.alpha = 1.0;
        }
        std::vector<int> gen = greedy_decode(backbone, stack,
                                             render_prompt(inst),
                                             kMaxResponseTokens);
        if (!gen.empty() && gen.back() == Vocab::kEndId) gen.pop_back();
        const double s = rouge1(vocab.decode(gen), inst.response);
        score_sum += s;
        alpha_sum += alpha;
        if (record && config.per_instance_scores)
          slot.instances.push_back({client.id, task.spec.task_id,
                                    static_cast<int>(i), s, alpha});
      }
      const double denom = n ? static_cast<double>(n) : 1.0;
      return std::pair<double, double>(score_sum / denom, alpha_sum / denom);
    };

    double ttp_sum = 0.0;
    for (const TaskData* task : seen) {
      auto [mean_score, mean_alpha] = score_split(*task, true);
      slot.report.per_task[task->spec.task_id] = mean_score;
      slot.report.per_task_alpha[task->spec.task_id] = mean_alpha;
      ttp_sum += mean_score;
    }
    slot.report.ttp = ttp_sum / static_cast<double>(seen.size());
    slot.report.personalization = slot.report.per_task.at(client.task_id);

    for (const TaskData* task : unseen)
      slot.unseen_scores[task->spec.task_id] = score_split(*task, false).first;
  });

  MetricsReport report;
  report.algorithm = algorithm_name(alg);
  report.seed = system.config.seed;
  double p_sum = 0.0, ttp_sum = 0.0;
  for (ClientSlot& slot : slots) {
    p_sum += slot.report.personalization;
    ttp_sum += slot.report.ttp;
    report.clients.push_back(std::move(slot.report));
    for (InstanceScore& s : slot.instances)
      report.instances.push_back(std::move(s));
  }
  report.mean_personalization = p_sum / static_cast<double>(slots.size());
  report.mean_ttp = ttp_sum / static_cast<double>(slots.size());

  for (const TaskData* task : unseen) {
    UnseenReport u;
    u.task_id = task->spec.task_id;
    u.name = task->spec.name;
    double sum = 0.0, best = 0.0;
    for (const ClientSlot& slot : slots) {
      const double s = slot.unseen_scores.at(task->spec.task_id);
      sum += s;
      best = std::max(best, s);
    }
    u.avg = sum / static_cast<double>(slots.size());
    u.max = best;
    report.unseen.push_back(std::move(u));
  }
  return report;
}

CommReport comm_report(const FedConfig& config, const BackboneConfig& backbone,
                       int rounds, int n_tasks) {
  if (rounds < 0) throw EvalError("round count cannot be negative");
  CommReport r;
  r.adapter_params = static_cast<size_t>(backbone.n_layers) * kNumTargets *
                     static_cast<size_t>(config.rank) *
                     (static_cast<size_t>(backbone.d_model) +
                      static_cast<size_t>(backbone.d_model));
  r.backbone_params = backbone_parameter_count(backbone);
  r.total_params = r.backbone_params + r.adapter_params;
  r.fraction = static_cast<double>(r.adapter_params) /
               static_cast<double>(r.total_params);
  r.payload_bytes =
      serialized_size(backbone.n_layers, backbone.d_model, config.rank);
  if (config.sample_mode == SampleMode::kFlat) {
    r.clients_per_round = static_cast<size_t>(
        std::ceil(config.sample_rate * static_cast<double>(config.n_clients)));
  } else {
    const size_t group =
        static_cast<size_t>(config.n_clients) / static_cast<size_t>(n_tasks);
    r.clients_per_round =
        static_cast<size_t>(n_tasks) *
        static_cast<size_t>(std::ceil(config.sample_rate *
                                      static_cast<double>(group)));
  }
  r.bytes_per_round = 2ull * r.payload_bytes * r.clients_per_round;
  r.total_bytes = r.bytes_per_round * static_cast<uint64_t>(rounds);
  r.rounds = rounds;
  return r;
}

std::string comm_report_json(const CommReport& r) {
  nlohmann::json j;
  j["adapter_params"] = r.adapter_params;
  j["backbone_params"] = r.backbone_params;
  j["total_params"] = r.total_params;
  j["fraction"] = r.fraction;
  j["payload_bytes"] = r.payload_bytes;
  j["clients_per_round"] = r.clients_per_round;
  j["bytes_per_round"] = r.bytes_per_round;
  j["total_bytes"] = r.total_bytes;
  j["rounds"] = r.rounds;
  return j.dump(2);
}

std::string metrics_csv(const MetricsReport& report) {
  std::ostringstream out;
  out << "algorithm,seed,client,task,rouge1,alpha_mean\n";
  for (const ClientReport& c : report.clients)
    for (const auto& [task, score] : c.per_task)
      out << report.algorithm << ',' << report.seed << ',' << c.client_id
          << ',' << task << ',' << format_double(score) << ','
          << format_double(c.per_task_alpha.at(task)) << '\n';
  return out.str();
}

std::string instance_csv(const MetricsReport& report) {
  std::ostringstream out;
  out << "client,task,index,rouge1,alpha\n";
  for (const InstanceScore& s : report.instances)
    out << s.client_id << ',' << s.task_id << ',' << s.index << ','
        << format_double(s.score) << ',' << format_double(s.alpha) << '\n';
  return out.str();
}

std::string summary_table(const std::vector<MetricsReport>& reports) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-12s %8s %8s", "algorithm", "P", "TTP");
  out << line;
  if (!reports.empty()) {
    for (const auto& [task, _] : reports[0].clients.at(0).per_task) {
      std::snprintf(line, sizeof(line), " %7s%d", "task", task);
      out << line;
    }
  }
  out << '\n';
  for (const MetricsReport& r : reports) {
    std::snprintf(line, sizeof(line), "%-12s %8.4f %8.4f", r.algorithm.c_str(),
                  r.mean_personalization, r.mean_ttp);
    out << line;
    for (const auto& [task, _] : r.clients.at(0).per_task) {
      double sum = 0.0;
      for (const ClientReport& c : r.clients) sum += c.per_task.at(task);
      std::snprintf(line, sizeof(line), " %8.4f",
                    sum / static_cast<double>(r.clients.size()));
      out << line;
    }
    out << '\n';
    for (const UnseenReport& u : r.unseen) {
      std::snprintf(line, sizeof(line), "  unseen %-10s avg %.4f max %.4f",
                    u.name.c_str(), u.avg, u.max);
      out << line << '\n';
    }
  }
  return out.str();
}

std::string metrics_json(const MetricsReport& report) {
  nlohmann::json j;
  j["algorithm"] = report.algorithm;
  j["seed"] = report.seed;
  j["mean_personalization"] = report.mean_personalization;
  j["mean_ttp"] = report.mean_ttp;
  j["clients"] = nlohmann::json::array();
  for (const ClientReport& c : report.clients) {
    nlohmann::json jc;
    jc["client"] = c.client_id;
    jc["task"] = c.task_id;
    jc["personalization"] = c.personalization;
    jc["ttp"] = c.ttp;
    for (const auto& [task, score] : c.per_task)
      jc["per_task"][std::to_string(task)] = score;
    for (const auto& [task, alpha] : c.per_task_alpha)
      jc["per_task_alpha"][std::to_string(task)] = alpha;
    j["clients"].push_back(std::move(jc));
  }
  for (const UnseenReport& u : report.unseen) {
    nlohmann::json ju;
    ju["task"] = u.task_id;
    ju["name"] = u.name;
    ju["avg"] = u.avg;
    ju["max"] = u.max;
    j["unseen"].push_back(std::move(ju));
  }
  return j.dump(2);
}

std::string curves_csv(const std::vector<CurvePoint>& points) {
  std::ostringstream out;
  out << "round,algorithm,personalization,ttp\n";
  for (const CurvePoint& p : points)
    out << p.round << ',' << p.algorithm << ','
        << format_double(p.personalization) << ',' << format_double(p.ttp)
        << '\n';
  return out.str();
}

}  // namespace feddpa
