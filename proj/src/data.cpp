#include "feddpa/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

#include "feddpa/rng.hpp"
#include "feddpa/tensor.hpp"
#include "feddpa/util.hpp"

namespace feddpa {
namespace {

// Hard ceiling any rendered training sequence must fit under; matches the
// default backbone context window.
constexpr int kSequenceBudget = 64;

constexpr int kPayloadMin = 3;
constexpr int kPayloadMax = 6;
constexpr int kPayloadAlphabet = 10;  // a through j

const char* kKindNames[] = {"copy", "reverse", "sort",    "parity",
                            "modsum", "max",   "count",   "pattern",
                            "desort", "min",   "alt"};
const char* kKindKeywords[] = {"copy:",   "reverse:", "sort:", "parity:",
                               "modsum:", "max:",     "count:", "pattern:",
                               "desort:", "min:",     "alt:"};

std::string join_symbols(const std::vector<char>& symbols) {
  std::string out;
  for (size_t i = 0; i < symbols.size(); ++i) {
    if (i) out += ' ';
    out += symbols[i];
  }
  return out;
}

std::vector<char> random_payload(Rng& rng) {
  int len = kPayloadMin +
            static_cast<int>(rng.uniform_int(kPayloadMax - kPayloadMin + 1));
  std::vector<char> payload(static_cast<size_t>(len));
  for (char& c : payload)
    c = static_cast<char>('a' + rng.uniform_int(kPayloadAlphabet));
  return payload;
}

Instance generate_instance(TaskKind kind, int task_id, Rng& rng) {
  std::vector<char> payload = random_payload(rng);
  Instance inst;
  inst.task_id = task_id;
  std::string keyword = task_kind_keyword(kind);
  inst.instruction = keyword + " " + join_symbols(payload);
  int index_sum = 0;
  for (char c : payload) index_sum += c - 'a';
  switch (kind) {
    case TaskKind::kCopy:
      inst.response = join_symbols(payload);
      break;
    case TaskKind::kReverse: {
      std::vector<char> r(payload.rbegin(), payload.rend());
      inst.response = join_symbols(r);
      break;
    }
    case TaskKind::kSort: {
      std::vector<char> s = payload;
      std::sort(s.begin(), s.end());
      inst.response = join_symbols(s);
      break;
    }
    case TaskKind::kParity:
      inst.response = (index_sum % 2 == 0) ? "even" : "odd";
      break;
    case TaskKind::kModSum:
      inst.response = std::string(1, static_cast<char>('0' + index_sum % 10));
      break;
    case TaskKind::kMaxToken:
      inst.response =
          std::string(1, *std::max_element(payload.begin(), payload.end()));
      break;
    case TaskKind::kCountClass: {
      char target;
      if (rng.uniform() < 0.5) {
        target = payload[rng.uniform_int(payload.size())];
      } else {
        target = static_cast<char>('a' + rng.uniform_int(kPayloadAlphabet));
      }
      inst.instruction =
          keyword + " " + std::string(1, target) + " " + join_symbols(payload);
      int count = static_cast<int>(
          std::count(payload.begin(), payload.end(), target));
      inst.response = std::string(1, static_cast<char>('0' + count));
      break;
    }
    case TaskKind::kPattern: {
      std::vector<char> shifted = payload;
      for (char& c : shifted)
        c = static_cast<char>('a' + (c - 'a' + 1) % kPayloadAlphabet);
      inst.response = join_symbols(shifted);
      break;
    }
    case TaskKind::kDesort: {
      std::vector<char> s = payload;
      std::sort(s.begin(), s.end(), std::greater<char>());
      inst.response = join_symbols(s);
      break;
    }
    case TaskKind::kMinToken:
      inst.response =
          std::string(1, *std::min_element(payload.begin(), payload.end()));
      break;
    case TaskKind::kAlternate: {
      std::vector<char> every_other;
      for (size_t i = 0; i < payload.size(); i += 2)
        every_other.push_back(payload[i]);
      inst.response = join_symbols(every_other);
      break;
    }
  }
  return inst;
}

TaskData generate_task(TaskKind kind, int task_id, int train_size,
                       int test_size, uint64_t seed) {
  TaskData task;
  task.spec = {task_id, task_kind_name(kind), kind, train_size, test_size,
               seed};
  Rng rng(seed);
  std::unordered_set<std::string> seen;
  const int total = train_size + test_size;
  const int attempt_budget = 200 * std::max(total, 1);
  std::vector<Instance> unique;
  unique.reserve(static_cast<size_t>(total));
  int attempts = 0;
  while (static_cast<int>(unique.size()) < total) {
    if (++attempts > attempt_budget) {
      throw DataError("task '" + task.spec.name + "': could not draw " +
                      std::to_string(total) + " unique instances");
    }
    Instance inst = generate_instance(kind, task_id, rng);
    if (!seen.insert(inst.instruction).second) continue;
    TrainingSequence full = make_training_sequence(inst);
    if (static_cast<int>(full.tokens.size()) > kSequenceBudget) {
      throw DataError("task '" + task.spec.name + "': rendered sequence of " +
                      std::to_string(full.tokens.size()) +
                      " tokens exceeds the budget of " +
                      std::to_string(kSequenceBudget));
    }
    unique.push_back(std::move(inst));
  }
  task.train.assign(unique.begin(), unique.begin() + train_size);
  task.test.assign(unique.begin() + train_size, unique.end());
  return task;
}

}  // namespace

const char* task_kind_name(TaskKind kind) {
  return kKindNames[static_cast<int>(kind)];
}

const char* task_kind_keyword(TaskKind kind) {
  return kKindKeywords[static_cast<int>(kind)];
}

// ---- Vocab ----

Vocab::Vocab() {
  symbols_ = {"<pad>", "<end>", "Instruction:", "Response:"};
  for (const char* kw : kKindKeywords) symbols_.emplace_back(kw);
  for (char c = 'a'; c <= 'z'; ++c) symbols_.emplace_back(1, c);
  for (char c = '0'; c <= '9'; ++c) symbols_.emplace_back(1, c);
  symbols_.emplace_back("even");
  symbols_.emplace_back("odd");
  for (int i = 0; symbols_.size() < kVocabSize; ++i)
    symbols_.push_back("<r" + std::to_string(i) + ">");
}

const Vocab& Vocab::instance() {
  static const Vocab vocab;
  return vocab;
}

int Vocab::token_id(const std::string& symbol) const {
  static const std::unordered_map<std::string, int> index = [] {
    std::unordered_map<std::string, int> m;
    const Vocab& v = Vocab::instance();
    for (int i = 0; i < kVocabSize; ++i) m[v.symbols_[static_cast<size_t>(i)]] = i;
    return m;
  }();
  auto it = index.find(symbol);
  if (it == index.end())
    throw DataError("unknown symbol '" + symbol + "'");
  return it->second;
}

const std::string& Vocab::symbol(int id) const {
  if (id < 0 || id >= kVocabSize)
    throw DataError("token id " + std::to_string(id) + " outside vocabulary");
  return symbols_[static_cast<size_t>(id)];
}

bool Vocab::contains(const std::string& symbol) const {
  try {
    token_id(symbol);
    return true;
  } catch (const DataError&) {
    return false;
  }
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> ids;
  std::istringstream in(text);
  std::string symbol;
  while (in >> symbol) ids.push_back(token_id(symbol));
  return ids;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += symbol(ids[i]);
  }
  return out;
}

// ---- suite construction ----

FederatedDataset build_suite(uint64_t seed, int train_per_task,
                             int test_per_task, bool with_unseen) {
  if (train_per_task < 1 || test_per_task < 1)
    throw DataError("build_suite: split sizes must be positive");
  constexpr TaskKind kSeen[] = {
      TaskKind::kCopy,    TaskKind::kReverse,    TaskKind::kSort,
      TaskKind::kParity,  TaskKind::kModSum,     TaskKind::kMaxToken,
      TaskKind::kCountClass, TaskKind::kPattern};
  constexpr TaskKind kUnseen[] = {TaskKind::kDesort, TaskKind::kMinToken,
                                  TaskKind::kAlternate};
  FederatedDataset ds;
  ds.seed = seed;
  int task_id = 0;
  for (TaskKind kind : kSeen) {
    ds.tasks.push_back(generate_task(kind, task_id, train_per_task,
                                     test_per_task,
                                     derive_seed(seed, "task", task_id)));
    ++task_id;
  }
  if (with_unseen) {
    for (TaskKind kind : kUnseen) {
      ds.unseen_tasks.push_back(generate_task(
          kind, task_id, 0, test_per_task, derive_seed(seed, "task", task_id)));
      ++task_id;
    }
  }
  for (size_t m = 0; m < ds.tasks.size(); ++m) {
    ClientAssignment client;
    client.client_id = static_cast<int>(m);
    client.task_id = ds.tasks[m].spec.task_id;
    client.train = ds.tasks[m].train;
    ds.clients.push_back(std::move(client));
  }
  return ds;
}

FederatedDataset split_for_scaling(const FederatedDataset& base,
                                   int subsets_per_task) {
  if (subsets_per_task < 1)
    throw DataError("split_for_scaling: subsets_per_task must be >= 1");
  FederatedDataset ds;
  ds.seed = base.seed;
  ds.tasks = base.tasks;
  ds.unseen_tasks = base.unseen_tasks;
  int client_id = 0;
  for (const TaskData& task : ds.tasks) {
    const int n = static_cast<int>(task.train.size());
    if (n % subsets_per_task != 0) {
      throw DataError("split_for_scaling: " + std::to_string(n) +
                      " training instances of task '" + task.spec.name +
                      "' are not divisible into " +
                      std::to_string(subsets_per_task) + " subsets");
    }
    const int shard = n / subsets_per_task;
    for (int s = 0; s < subsets_per_task; ++s) {
      ClientAssignment client;
      client.client_id = client_id++;
      client.task_id = task.spec.task_id;
      client.train.assign(task.train.begin() + s * shard,
                          task.train.begin() + (s + 1) * shard);
      ds.clients.push_back(std::move(client));
    }
  }
  return ds;
}

// ---- rendering ----

std::vector<int> render_prompt(const Instance& inst) {
  return Vocab::instance().encode("Instruction: " + inst.instruction +
                                  " Response:");
}

TrainingSequence make_training_sequence(const Instance& inst,
                                        bool loss_on_prompt) {
  const Vocab& vocab = Vocab::instance();
  TrainingSequence seq;
  seq.tokens = render_prompt(inst);
  const size_t prompt_len = seq.tokens.size();
  std::vector<int> response = vocab.encode(inst.response);
  if (response.empty())
    throw DataError("instance with empty response for task " +
                    std::to_string(inst.task_id));
  seq.tokens.insert(seq.tokens.end(), response.begin(), response.end());
  seq.tokens.push_back(Vocab::kEndId);
  seq.targets.assign(seq.tokens.size(), kIgnoreTarget);
  for (size_t i = 0; i + 1 < seq.tokens.size(); ++i) {
    if (loss_on_prompt || i + 1 >= prompt_len) seq.targets[i] = seq.tokens[i + 1];
  }
  return seq;
}

// ---- file I/O ----

void save_jsonl(const std::filesystem::path& path,
                std::span<const Instance> instances) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  for (const Instance& inst : instances) {
    nlohmann::json record{{"instruction", inst.instruction},
                          {"response", inst.response},
                          {"task", inst.task_id}};
    out << record.dump() << '\n';
  }
  if (!out) throw DataError("failed while writing " + path.string());
}

std::vector<Instance> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<Instance> instances;
  std::string line;
  int line_no = 0;
  const Vocab& vocab = Vocab::instance();
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
    if (!record.is_object() || !record.contains("instruction") ||
        !record.contains("response") || !record.contains("task") ||
        !record["instruction"].is_string() || !record["response"].is_string() ||
        !record["task"].is_number_integer()) {
      throw DataError(where +
                      ": expected {instruction: string, response: string, "
                      "task: int}");
    }
    Instance inst;
    inst.instruction = record["instruction"].get<std::string>();
    inst.response = record["response"].get<std::string>();
    inst.task_id = record["task"].get<int>();
    try {
      vocab.encode(inst.instruction);
      vocab.encode(inst.response);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    instances.push_back(std::move(inst));
  }
  return instances;
}

// ---- hashing ----

namespace {

void hash_instances(std::string& buf, std::span<const Instance> instances) {
  for (const Instance& inst : instances) {
    buf += inst.instruction;
    buf += '\x1f';
    buf += inst.response;
    buf += '\x1f';
    buf += std::to_string(inst.task_id);
    buf += '\x1e';
  }
}

}  // namespace

uint64_t dataset_hash(const FederatedDataset& dataset) {
  std::string buf = std::to_string(dataset.seed);
  for (const auto* group : {&dataset.tasks, &dataset.unseen_tasks}) {
    for (const TaskData& task : *group) {
      buf += task.spec.name;
      buf += '\x1e';
      hash_instances(buf, task.train);
      hash_instances(buf, task.test);
    }
  }
  for (const ClientAssignment& client : dataset.clients) {
    buf += std::to_string(client.client_id);
    buf += ':';
    buf += std::to_string(client.task_id);
    buf += '\x1e';
    hash_instances(buf, client.train);
  }
  return content_hash(
      std::span(reinterpret_cast<const uint8_t*>(buf.data()), buf.size()));
}

}  // namespace feddpa
