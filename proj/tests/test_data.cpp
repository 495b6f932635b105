#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "feddpa/data.hpp"
#include "feddpa/tensor.hpp"

using namespace feddpa;

namespace {

std::vector<std::string> split_symbols(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string s;
  while (in >> s) out.push_back(s);
  return out;
}

// Payload symbols of an instruction, i.e. everything after the keyword.
std::vector<std::string> payload_of(const Instance& inst) {
  std::vector<std::string> parts = split_symbols(inst.instruction);
  return {parts.begin() + 1, parts.end()};
}

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i) out += ' ';
    out += parts[i];
  }
  return out;
}

const TaskData& task_named(const FederatedDataset& ds, const std::string& name) {
  for (const TaskData& t : ds.tasks)
    if (t.spec.name == name) return t;
  for (const TaskData& t : ds.unseen_tasks)
    if (t.spec.name == name) return t;
  REQUIRE_MESSAGE(false, "no task named " << name);
  throw std::logic_error("unreachable");
}

std::vector<Instance> all_instances(const TaskData& task) {
  std::vector<Instance> out = task.train;
  out.insert(out.end(), task.test.begin(), task.test.end());
  return out;
}

}  // namespace

TEST_CASE("vocabulary is fixed at 64 distinct symbols") {
  const Vocab& v = Vocab::instance();
  CHECK(v.size() == 64);
  std::set<std::string> unique;
  for (int i = 0; i < v.size(); ++i) unique.insert(v.symbol(i));
  CHECK(unique.size() == 64);
  CHECK(v.symbol(Vocab::kPadId) == "<pad>");
  CHECK(v.symbol(Vocab::kEndId) == "<end>");
}

TEST_CASE("encode and decode round-trip; unknown symbols are rejected") {
  const Vocab& v = Vocab::instance();
  std::string text = "Instruction: copy: a b c Response:";
  std::vector<int> ids = v.encode(text);
  CHECK(v.decode(ids) == text);
  CHECK_THROWS_AS(v.encode("copy: a qq b"), DataError);
  CHECK_THROWS_AS(v.symbol(64), DataError);
  CHECK_THROWS_AS(v.symbol(-1), DataError);
}

TEST_CASE("suite has 8 tasks, default split sizes, one client per task") {
  FederatedDataset ds = build_suite(42);
  REQUIRE(ds.tasks.size() == 8);
  REQUIRE(ds.clients.size() == 8);
  REQUIRE(ds.unseen_tasks.size() == 3);
  for (const TaskData& t : ds.tasks) {
    CHECK(t.train.size() == 300);
    CHECK(t.test.size() == 200);
  }
  for (const TaskData& t : ds.unseen_tasks) {
    CHECK(t.train.empty());
    CHECK(t.test.size() == 200);
  }
  for (size_t m = 0; m < ds.clients.size(); ++m) {
    CHECK(ds.clients[m].client_id == static_cast<int>(m));
    CHECK(ds.clients[m].task_id == ds.tasks[m].spec.task_id);
    CHECK(ds.clients[m].train.size() == 300);
  }
}

TEST_CASE("generators match independent recomputation") {
  for (uint64_t seed : {7ull, 8ull}) {
    FederatedDataset ds = build_suite(seed, 100, 25);
    for (const Instance& inst : all_instances(task_named(ds, "copy")))
      CHECK(inst.response == join(payload_of(inst)));
    for (const Instance& inst : all_instances(task_named(ds, "reverse"))) {
      std::vector<std::string> p = payload_of(inst);
      std::reverse(p.begin(), p.end());
      CHECK(inst.response == join(p));
    }
    for (const Instance& inst : all_instances(task_named(ds, "sort"))) {
      std::vector<std::string> p = payload_of(inst);
      std::sort(p.begin(), p.end());
      CHECK(inst.response == join(p));
    }
    for (const Instance& inst : all_instances(task_named(ds, "parity"))) {
      int sum = 0;
      for (const std::string& s : payload_of(inst)) sum += s[0] - 'a';
      CHECK(inst.response == (sum % 2 == 0 ? "even" : "odd"));
    }
    for (const Instance& inst : all_instances(task_named(ds, "modsum"))) {
      int sum = 0;
      for (const std::string& s : payload_of(inst)) sum += s[0] - 'a';
      CHECK(inst.response == std::string(1, static_cast<char>('0' + sum % 10)));
    }
    for (const Instance& inst : all_instances(task_named(ds, "max"))) {
      std::vector<std::string> p = payload_of(inst);
      CHECK(inst.response == *std::max_element(p.begin(), p.end()));
    }
    for (const Instance& inst : all_instances(task_named(ds, "count"))) {
      std::vector<std::string> parts = split_symbols(inst.instruction);
      const std::string target = parts[1];
      int count = static_cast<int>(
          std::count(parts.begin() + 2, parts.end(), target));
      CHECK(inst.response == std::to_string(count));
    }
    for (const Instance& inst : all_instances(task_named(ds, "pattern"))) {
      std::vector<std::string> p = payload_of(inst);
      for (std::string& s : p)
        s[0] = static_cast<char>('a' + (s[0] - 'a' + 1) % 10);
      CHECK(inst.response == join(p));
    }
    for (const Instance& inst : all_instances(task_named(ds, "desort"))) {
      std::vector<std::string> p = payload_of(inst);
      std::sort(p.begin(), p.end(), std::greater<std::string>());
      CHECK(inst.response == join(p));
    }
    for (const Instance& inst : all_instances(task_named(ds, "min"))) {
      std::vector<std::string> p = payload_of(inst);
      CHECK(inst.response == *std::min_element(p.begin(), p.end()));
    }
    for (const Instance& inst : all_instances(task_named(ds, "alt"))) {
      std::vector<std::string> p = payload_of(inst);
      std::vector<std::string> kept;
      for (size_t i = 0; i < p.size(); i += 2) kept.push_back(p[i]);
      CHECK(inst.response == join(kept));
    }
  }
}

TEST_CASE("suites are deterministic in the seed") {
  CHECK(dataset_hash(build_suite(42)) == dataset_hash(build_suite(42)));
  CHECK(dataset_hash(build_suite(42)) != dataset_hash(build_suite(43)));
}

TEST_CASE("train and test splits never share an instruction") {
  FederatedDataset ds = build_suite(5, 150, 80);
  for (const TaskData& task : ds.tasks) {
    std::set<std::string> train_set;
    for (const Instance& i : task.train) train_set.insert(i.instruction);
    CHECK(train_set.size() == task.train.size());
    for (const Instance& i : task.test)
      CHECK(train_set.count(i.instruction) == 0);
  }
}

TEST_CASE("distinct tasks map shared payloads differently") {
  FederatedDataset ds = build_suite(11, 200, 50);
  // A non-palindromic payload is mapped to itself by the copy rule and to
  // its mirror by the reverse rule, so the two response rules disagree.
  int checked = 0;
  for (const Instance& inst : task_named(ds, "reverse").train) {
    std::vector<std::string> p = payload_of(inst);
    std::vector<std::string> mirrored(p.rbegin(), p.rend());
    if (p == mirrored) continue;
    CHECK(inst.response != join(p));
    ++checked;
  }
  CHECK(checked > 100);
}

TEST_CASE("every rendered sequence fits the context budget") {
  FederatedDataset ds = build_suite(3);
  size_t longest = 0;
  for (const TaskData& task : ds.tasks)
    for (const Instance& inst : all_instances(task))
      longest = std::max(longest, make_training_sequence(inst).tokens.size());
  CHECK(longest <= 64);
}

TEST_CASE("scaling split shards clients without touching test data") {
  FederatedDataset base = build_suite(9);
  FederatedDataset scaled = split_for_scaling(base, 5);
  REQUIRE(scaled.clients.size() == 40);
  for (const ClientAssignment& c : scaled.clients)
    CHECK(c.train.size() == 60);
  for (size_t t = 0; t < base.tasks.size(); ++t) {
    std::vector<std::string> merged;
    std::set<std::string> unique;
    for (const ClientAssignment& c : scaled.clients) {
      if (c.task_id != base.tasks[t].spec.task_id) continue;
      for (const Instance& i : c.train) {
        merged.push_back(i.instruction);
        unique.insert(i.instruction);
      }
    }
    CHECK(merged.size() == base.tasks[t].train.size());
    CHECK(unique.size() == merged.size());
    std::set<std::string> original;
    for (const Instance& i : base.tasks[t].train) original.insert(i.instruction);
    CHECK(unique == original);
    CHECK(scaled.tasks[t].test.size() == base.tasks[t].test.size());
  }
  FederatedDataset identity = split_for_scaling(base, 1);
  CHECK(dataset_hash(identity) == dataset_hash(base));
  CHECK_THROWS_AS(split_for_scaling(base, 7), DataError);
}

TEST_CASE("prompt rendering follows the instruction template") {
  Instance inst{"copy: a b", "a b", 0};
  std::vector<int> prompt = render_prompt(inst);
  const Vocab& v = Vocab::instance();
  REQUIRE(prompt.size() == 5);
  CHECK(v.symbol(prompt.front()) == "Instruction:");
  CHECK(v.symbol(prompt.back()) == "Response:");
  CHECK(v.decode(prompt) == "Instruction: copy: a b Response:");
}

TEST_CASE("training sequences supervise the response and the end marker") {
  Instance inst{"copy: a b", "a b", 0};
  TrainingSequence seq = make_training_sequence(inst);
  REQUIRE(seq.tokens.size() == seq.targets.size());
  REQUIRE(seq.tokens.size() == 8);  // 5 prompt + 2 response + end
  for (size_t i = 0; i + 1 < seq.tokens.size(); ++i) {
    if (seq.targets[i] != kIgnoreTarget)
      CHECK(seq.targets[i] == seq.tokens[i + 1]);
  }
  int supervised = 0;
  for (int t : seq.targets) supervised += (t != kIgnoreTarget);
  CHECK(supervised == 3);  // two response symbols plus <end>
  CHECK(seq.targets[3] == kIgnoreTarget);
  CHECK(seq.targets.back() == kIgnoreTarget);

  TrainingSequence full = make_training_sequence(inst, true);
  supervised = 0;
  for (int t : full.targets) supervised += (t != kIgnoreTarget);
  CHECK(supervised == static_cast<int>(full.tokens.size()) - 1);
}

TEST_CASE("jsonl files round-trip and report malformed lines") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "feddpa_data_test";
  fs::create_directories(dir);
  fs::path file = dir / "instances.jsonl";

  FederatedDataset ds = build_suite(13, 20, 5);
  std::vector<Instance> original = ds.tasks[0].train;
  save_jsonl(file, original);
  std::vector<Instance> loaded = load_jsonl(file);
  REQUIRE(loaded.size() == original.size());
  for (size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].instruction == original[i].instruction);
    CHECK(loaded[i].response == original[i].response);
    CHECK(loaded[i].task_id == original[i].task_id);
  }

  {
    std::ofstream out(file);
    out << R"({"instruction": "copy: a", "response": "a", "task": 0})" << '\n';
    out << "{not json\n";
  }
  try {
    load_jsonl(file);
    FAIL("expected a parse error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }

  {
    std::ofstream out(file);
    out << R"({"instruction": "copy: zz9", "response": "a", "task": 0})"
        << '\n';
  }
  CHECK_THROWS_AS(load_jsonl(file), DataError);

  {
    std::ofstream out(file);
    out << R"({"instruction": "copy: a"})" << '\n';
  }
  CHECK_THROWS_AS(load_jsonl(file), DataError);
  fs::remove_all(dir);
}
