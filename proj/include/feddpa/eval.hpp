#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "feddpa/algorithms.hpp"
#include "feddpa/data.hpp"
#include "feddpa/model.hpp"

namespace feddpa {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unigram F1 with clipped counts over whitespace tokens. Empty prediction
// scores 0; empty reference is a caller error.
double rouge1(const std::string& prediction, const std::string& reference);

struct EvalConfig {
  // Instances scored per task split per client; 0 means the whole split.
  int test_per_split = 50;
  bool include_unseen = false;
  int workers = 1;
  // Stream for weighting-context sampling, independent of training.
  uint64_t seed = 0;
  bool per_instance_scores = false;
};

struct InstanceScore {
  int client_id = 0;
  int task_id = 0;
  int index = 0;
  double score = 0.0;
  double alpha = 0.0;
};

struct ClientReport {
  int client_id = 0;
  int task_id = 0;
  // task_id -> mean ROUGE-1 over the scored slice of that task's test split.
  std::map<int, double> per_task;
  // task_id -> mean inference alpha on that slice (dual-adapter systems).
  std::map<int, double> per_task_alpha;
  double personalization = 0.0;
  double ttp = 0.0;
};

struct UnseenReport {
  int task_id = 0;
  std::string name;
  double avg = 0.0;
  double max = 0.0;
};

struct MetricsReport {
  std::string algorithm;
  uint64_t seed = 0;
  std::vector<ClientReport> clients;
  double mean_personalization = 0.0;
  double mean_ttp = 0.0;
  std::vector<UnseenReport> unseen;
  std::vector<InstanceScore> instances;  // filled under per_instance_scores
};

// Scores every client with the composition its algorithm prescribes:
// shared adapter only (FEDIT, CENTRALIZED), personal adapter only (FEDLORA,
// LOCAL), or the dual fusion with the instance-wise alpha (FEDDPA_*, scale
// lambda for the sequential variant, alpha for the iterative one).
MetricsReport evaluate(const Backbone& backbone, const TrainedSystem& system,
                       const FederatedDataset& dataset,
                       const EvalConfig& config);

struct CommReport {
  size_t adapter_params = 0;
  size_t backbone_params = 0;
  size_t total_params = 0;  // backbone plus one communicated adapter
  double fraction = 0.0;
  size_t payload_bytes = 0;
  size_t clients_per_round = 0;
  uint64_t bytes_per_round = 0;  // both directions
  uint64_t total_bytes = 0;
  int rounds = 0;
};

// Closed-form accounting of what federated training transmits. Group counts
// for per-task sampling assume equal groups of n_clients / n_tasks.
CommReport comm_report(const FedConfig& config, const BackboneConfig& backbone,
                       int rounds, int n_tasks = 8);
std::string comm_report_json(const CommReport& report);

// Writers. All output is deterministic for a given report.
std::string metrics_csv(const MetricsReport& report);
std::string instance_csv(const MetricsReport& report);
std::string summary_table(const std::vector<MetricsReport>& reports);
std::string metrics_json(const MetricsReport& report);

struct CurvePoint {
  int round = 0;
  std::string algorithm;
  double personalization = 0.0;
  double ttp = 0.0;
};
std::string curves_csv(const std::vector<CurvePoint>& points);

}  // namespace feddpa
