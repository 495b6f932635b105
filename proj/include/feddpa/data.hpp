#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace feddpa {

// Errors raised while building, tokenizing, or loading datasets.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Fixed whitespace-delimited symbol vocabulary shared by every task. The
// backbone is sized against kVocabSize; the table never changes.
class Vocab {
 public:
  static constexpr int kVocabSize = 64;
  static constexpr int kPadId = 0;
  static constexpr int kEndId = 1;

  static const Vocab& instance();

  int token_id(const std::string& symbol) const;  // DataError on unknown
  const std::string& symbol(int id) const;
  bool contains(const std::string& symbol) const;
  int size() const { return kVocabSize; }

  std::vector<int> encode(const std::string& text) const;
  std::string decode(std::span<const int> ids) const;  // space-joined

 private:
  Vocab();
  std::vector<std::string> symbols_;
};

enum class TaskKind {
  kCopy,        // echo the payload
  kReverse,     // payload reversed
  kSort,        // payload sorted ascending
  kParity,      // even/odd of the summed symbol indices
  kModSum,      // summed symbol indices mod 10, as a digit
  kMaxToken,    // alphabetically greatest payload symbol
  kCountClass,  // occurrences of a target symbol in the payload
  kPattern,     // payload with every symbol shifted forward by one
  // Held out of all training; exercised only by unseen-task evaluation.
  kDesort,      // payload sorted descending
  kMinToken,    // alphabetically smallest payload symbol
  kAlternate,   // every second payload symbol, starting at the first
};

const char* task_kind_name(TaskKind kind);     // "copy", "reverse", ...
const char* task_kind_keyword(TaskKind kind);  // "copy:", "reverse:", ...

struct Instance {
  std::string instruction;
  std::string response;
  int task_id = 0;
};

struct TaskSpec {
  int task_id = 0;
  std::string name;
  TaskKind kind = TaskKind::kCopy;
  int train_size = 0;
  int test_size = 0;
  uint64_t seed = 0;
};

struct TaskData {
  TaskSpec spec;
  std::vector<Instance> train;
  std::vector<Instance> test;
};

// A client's training shard; test data lives on the owning task so that
// every client of a task shares the identical test split.
struct ClientAssignment {
  int client_id = 0;
  int task_id = 0;
  std::vector<Instance> train;
};

struct FederatedDataset {
  uint64_t seed = 0;
  std::vector<TaskData> tasks;
  std::vector<TaskData> unseen_tasks;  // test-only, never trained on
  std::vector<ClientAssignment> clients;
};

inline constexpr int kDefaultTrainPerTask = 300;
inline constexpr int kDefaultTestPerTask = 200;
// Longest response any generator emits, plus the end marker.
inline constexpr int kMaxResponseTokens = 8;

// Builds the 8-task suite, one client per task, plus the held-out unseen
// tasks. Deterministic in (seed, sizes).
FederatedDataset build_suite(uint64_t seed,
                             int train_per_task = kDefaultTrainPerTask,
                             int test_per_task = kDefaultTestPerTask,
                             bool with_unseen = true);

// Splits every task's training data into `subsets_per_task` disjoint equal
// shards, one client per shard; test splits stay per-task.
FederatedDataset split_for_scaling(const FederatedDataset& base,
                                   int subsets_per_task);

// Token ids of "Instruction: {instruction} Response:".
std::vector<int> render_prompt(const Instance& inst);

// Full prompt + response + end sequence alongside next-token targets.
// Positions before the response carry kIgnoreTarget unless loss_on_prompt.
struct TrainingSequence {
  std::vector<int> tokens;
  std::vector<int> targets;
};
TrainingSequence make_training_sequence(const Instance& inst,
                                        bool loss_on_prompt = false);

void save_jsonl(const std::filesystem::path& path,
                std::span<const Instance> instances);
std::vector<Instance> load_jsonl(const std::filesystem::path& path);

// Content hash covering every instance of every split, in canonical order.
uint64_t dataset_hash(const FederatedDataset& dataset);

}  // namespace feddpa
