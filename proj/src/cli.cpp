#include "feddpa/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <ctime>
#include <iostream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "feddpa/algorithms.hpp"
#include "feddpa/lora.hpp"
#include "feddpa/util.hpp"

namespace feddpa::cli {

namespace fs = std::filesystem;
using nlohmann::json;

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error([&problems] {
        std::string all;
        for (size_t i = 0; i < problems.size(); ++i) {
          if (i) all += '\n';
          all += "  - " + problems[i];
        }
        return all;
      }()),
      problems_(std::move(problems)) {}

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_ll(const std::string& v, long long& out) {
  const char* b = v.data();
  const char* e = b + v.size();
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc{} && p == e;
}

bool parse_u64_str(const std::string& v, uint64_t& out) {
  const char* b = v.data();
  const char* e = b + v.size();
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc{} && p == e;
}

bool parse_dbl(const std::string& v, double& out) {
  const char* b = v.data();
  const char* e = b + v.size();
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc{} && p == e;
}

// Typed setters: each consumes its key when present and either fills the
// slot or records why it could not.
struct Resolver {
  KeyValues kv;
  std::set<std::string> used;
  std::vector<std::string> errs;

  const std::string* find(const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) return nullptr;
    used.insert(key);
    return &it->second;
  }

  void get(const std::string& key, int& slot) {
    if (const std::string* v = find(key)) {
      long long x;
      if (!parse_ll(*v, x) || x < INT32_MIN || x > INT32_MAX)
        errs.push_back(key + ": not an integer: '" + *v + "'");
      else
        slot = static_cast<int>(x);
    }
  }

  void get(const std::string& key, uint64_t& slot) {
    if (const std::string* v = find(key)) {
      uint64_t x;
      if (!parse_u64_str(*v, x))
        errs.push_back(key + ": not an unsigned integer: '" + *v + "'");
      else
        slot = x;
    }
  }

  void get(const std::string& key, double& slot) {
    if (const std::string* v = find(key)) {
      double x;
      if (!parse_dbl(*v, x))
        errs.push_back(key + ": not a number: '" + *v + "'");
      else
        slot = x;
    }
  }

  void get(const std::string& key, bool& slot) {
    if (const std::string* v = find(key)) {
      if (*v == "true" || *v == "1")
        slot = true;
      else if (*v == "false" || *v == "0")
        slot = false;
      else
        errs.push_back(key + ": expected true or false: '" + *v + "'");
    }
  }

  void get(const std::string& key, std::string& slot) {
    if (const std::string* v = find(key)) slot = *v;
  }

  template <typename Enum, typename FromName>
  void get_enum(const std::string& key, Enum& slot, FromName from_name) {
    if (const std::string* v = find(key)) {
      try {
        slot = from_name(*v);
      } catch (const std::exception& e) {
        errs.push_back(key + ": " + e.what());
      }
    }
  }
};

constexpr int kSeenTasks = 8;

void validate_settings(const Settings& s, std::vector<std::string>& errs) {
  const FedConfig& f = s.fed;
  if (f.n_clients < 1)
    errs.push_back("federation.n_clients: need at least one client");
  else if (f.n_clients % kSeenTasks != 0)
    errs.push_back("federation.n_clients: must be a multiple of the " +
                   std::to_string(kSeenTasks) + " tasks");
  if (f.rounds < 0) errs.push_back("federation.rounds: cannot be negative");
  if (!(f.sample_rate > 0.0) || f.sample_rate > 1.0)
    errs.push_back("federation.sample_rate: must lie in (0, 1]");
  if (f.local_epochs < 0)
    errs.push_back("federation.local_epochs: cannot be negative");
  if (f.finetune_epochs < 0)
    errs.push_back("federation.finetune_epochs: cannot be negative");
  if (f.solo_epochs < 0)
    errs.push_back("federation.solo_epochs: cannot be negative");
  if (f.batch_size < 1)
    errs.push_back("federation.batch_size: must be at least 1");
  if (!(f.lr > 0.0)) errs.push_back("federation.lr: must be positive");
  if (f.rank < 1) errs.push_back("federation.rank: must be at least 1");
  if (f.alpha < 0.0 || f.alpha > 1.0)
    errs.push_back("federation.alpha: must lie in [0, 1]");
  if (!(f.lambda > 0.0) || f.lambda > 1.0)
    errs.push_back("federation.lambda: must lie in (0, 1]");
  if (f.sample_count < 1)
    errs.push_back("federation.sample_count: must be at least 1");
  if (f.prox_mu < 0.0)
    errs.push_back("federation.prox_mu: cannot be negative");
  if (f.workers < 1)
    errs.push_back("federation.workers: must be at least 1");

  if (s.model.vocab_size != Vocab::kVocabSize)
    errs.push_back("model.vocab_size: the symbol table is fixed at " +
                   std::to_string(Vocab::kVocabSize));
  if (s.model.d_model < 1) errs.push_back("model.d_model: must be positive");
  if (s.model.n_layers < 1) errs.push_back("model.n_layers: must be positive");
  if (s.model.n_heads < 1)
    errs.push_back("model.n_heads: must be positive");
  else if (s.model.d_model % s.model.n_heads != 0)
    errs.push_back("model.n_heads: must divide model.d_model");
  if (s.model.d_ff < 1) errs.push_back("model.d_ff: must be positive");
  if (s.model.max_seq_len < 32)
    errs.push_back("model.max_seq_len: task sequences need at least 32");

  if (s.pretrain.epochs < 0)
    errs.push_back("pretrain.epochs: cannot be negative");
  if (s.pretrain.batch_size < 1)
    errs.push_back("pretrain.batch_size: must be at least 1");
  if (!(s.pretrain.lr > 0.0)) errs.push_back("pretrain.lr: must be positive");

  if (s.train_per_task < 1)
    errs.push_back("data.train_per_task: must be at least 1");
  if (s.test_per_task < 1)
    errs.push_back("data.test_per_task: must be at least 1");
  if (f.n_clients >= 1 && f.n_clients % kSeenTasks == 0) {
    int shards = f.n_clients / kSeenTasks;
    if (shards > 1 && s.train_per_task % shards != 0)
      errs.push_back(
          "data.train_per_task: must split evenly across the " +
          std::to_string(shards) + " clients sharing each task");
  }

  if (s.eval.test_per_split < 0)
    errs.push_back("eval.test_per_split: cannot be negative (0 = whole split)");
  if (s.curve_every < 0)
    errs.push_back("run.curve_every: cannot be negative (0 = off)");
}

std::map<std::string, std::string> settings_map(const Settings& s,
                                                bool include_unhashed) {
  std::map<std::string, std::string> m;
  const FedConfig& f = s.fed;
  m["federation.n_clients"] = std::to_string(f.n_clients);
  m["federation.rounds"] = std::to_string(f.rounds);
  m["federation.sample_rate"] = format_double(f.sample_rate);
  m["federation.sample_mode"] = sample_mode_name(f.sample_mode);
  m["federation.local_epochs"] = std::to_string(f.local_epochs);
  m["federation.finetune_epochs"] = std::to_string(f.finetune_epochs);
  m["federation.solo_epochs"] = std::to_string(f.solo_epochs);
  m["federation.batch_size"] = std::to_string(f.batch_size);
  m["federation.lr"] = format_double(f.lr);
  m["federation.rank"] = std::to_string(f.rank);
  m["federation.alpha"] = format_double(f.alpha);
  m["federation.lambda"] = format_double(f.lambda);
  m["federation.sample_count"] = std::to_string(f.sample_count);
  m["federation.sim_metric"] = sim_metric_name(f.sim_metric);
  m["federation.embed_mode"] = embed_mode_name(f.embed_mode);
  m["federation.per_instance_weighting"] =
      f.per_instance_weighting ? "true" : "false";
  m["federation.aggregation"] = aggregation_name(f.aggregation);
  m["federation.prox_mu"] = format_double(f.prox_mu);
  m["federation.algorithm"] = algorithm_name(f.algorithm);
  m["federation.seed"] = std::to_string(f.seed);
  m["model.vocab_size"] = std::to_string(s.model.vocab_size);
  m["model.d_model"] = std::to_string(s.model.d_model);
  m["model.n_layers"] = std::to_string(s.model.n_layers);
  m["model.n_heads"] = std::to_string(s.model.n_heads);
  m["model.d_ff"] = std::to_string(s.model.d_ff);
  m["model.max_seq_len"] = std::to_string(s.model.max_seq_len);
  m["model.seed"] = std::to_string(s.model.seed);
  m["pretrain.epochs"] = std::to_string(s.pretrain.epochs);
  m["pretrain.batch_size"] = std::to_string(s.pretrain.batch_size);
  m["pretrain.lr"] = format_double(s.pretrain.lr);
  m["pretrain.seed"] = std::to_string(s.pretrain.seed);
  m["data.seed"] = std::to_string(s.data_seed);
  m["data.train_per_task"] = std::to_string(s.train_per_task);
  m["data.test_per_task"] = std::to_string(s.test_per_task);
  m["data.with_unseen"] = s.with_unseen ? "true" : "false";
  m["eval.test_per_split"] = std::to_string(s.eval.test_per_split);
  m["eval.include_unseen"] = s.eval.include_unseen ? "true" : "false";
  m["eval.per_instance_scores"] = s.eval.per_instance_scores ? "true" : "false";
  m["eval.seed"] = std::to_string(s.eval.seed);
  if (include_unhashed) {
    m["federation.workers"] = std::to_string(f.workers);
    m["run.output_dir"] = s.output_dir;
    m["run.backbone"] = s.backbone_path;
    m["run.curve_every"] = std::to_string(s.curve_every);
    m["run.save_checkpoint"] = s.save_checkpoint ? "true" : "false";
  }
  return m;
}

std::string iso_now() {
  std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

json dataset_summary(const FederatedDataset& ds) {
  json j;
  j["dataset_hash"] = hash_hex(dataset_hash(ds));
  j["seed"] = ds.seed;
  j["tasks"] = json::array();
  for (const TaskData& t : ds.tasks)
    j["tasks"].push_back({{"id", t.spec.task_id},
                          {"name", t.spec.name},
                          {"train", t.train.size()},
                          {"test", t.test.size()}});
  j["unseen"] = json::array();
  for (const TaskData& t : ds.unseen_tasks)
    j["unseen"].push_back({{"id", t.spec.task_id},
                           {"name", t.spec.name},
                           {"test", t.test.size()}});
  j["clients"] = json::array();
  for (const ClientAssignment& c : ds.clients)
    j["clients"].push_back({{"id", c.client_id},
                            {"task", c.task_id},
                            {"train", c.train.size()}});
  return j;
}

FederatedDataset build_dataset(const Settings& s) {
  FederatedDataset ds =
      build_suite(s.data_seed, s.train_per_task, s.test_per_task, s.with_unseen);
  int shards = s.fed.n_clients / static_cast<int>(ds.tasks.size());
  if (shards > 1) ds = split_for_scaling(ds, shards);
  return ds;
}

std::vector<Instance> seen_corpus(const FederatedDataset& ds) {
  std::vector<Instance> corpus;
  for (const TaskData& t : ds.tasks)
    corpus.insert(corpus.end(), t.train.begin(), t.train.end());
  return corpus;
}

Backbone pretrain_backbone(const Settings& s, const FederatedDataset& ds) {
  Backbone bb = Backbone::create(s.model);
  std::vector<Instance> corpus = seen_corpus(ds);
  std::cerr << "[pretrain] " << s.pretrain.epochs << " epochs over "
            << corpus.size() << " instances\n";
  double loss = pretrain(bb, corpus, s.pretrain);
  std::cerr << "[pretrain] final epoch loss " << format_double(loss) << "\n";
  bb.freeze();
  return bb;
}

Backbone prepare_backbone(const Settings& s, const FederatedDataset& ds) {
  if (s.backbone_path.empty()) return pretrain_backbone(s, ds);
  Backbone bb = Backbone::load(s.backbone_path);
  const BackboneConfig& have = bb.config();
  std::vector<std::string> errs;
  auto expect = [&](const char* key, int got, int want) {
    if (got != want)
      errs.push_back(std::string("model.") + key + ": config says " +
                     std::to_string(want) + " but " + s.backbone_path +
                     " was built with " + std::to_string(got));
  };
  expect("vocab_size", have.vocab_size, s.model.vocab_size);
  expect("d_model", have.d_model, s.model.d_model);
  expect("n_layers", have.n_layers, s.model.n_layers);
  expect("n_heads", have.n_heads, s.model.n_heads);
  expect("d_ff", have.d_ff, s.model.d_ff);
  expect("max_seq_len", have.max_seq_len, s.model.max_seq_len);
  if (!errs.empty()) throw ConfigError(errs);
  if (!bb.frozen()) bb.freeze();
  std::cerr << "[backbone] loaded " << s.backbone_path << " ("
            << bb.parameter_count() << " params)\n";
  return bb;
}

std::string sanitize(const std::string& v) {
  std::string out;
  for (char c : v)
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' ||
            c == '-' || c == '_')
               ? c
               : '_';
  return out;
}

void emit_line(const json& j) { std::cout << j.dump() << "\n"; }

// One full pipeline: dataset, backbone, training, evaluation, artifacts.
int run_one(const Settings& s) {
  fs::path out(s.output_dir);
  fs::create_directories(out);
  FederatedDataset ds = build_dataset(s);
  RunManifest man = make_manifest(s, ds);
  const std::string& h = man.hash;
  write_text_file((out / ("manifest_" + h + ".json")).string(),
                  manifest_json(man));
  std::cerr << "[data] " << ds.tasks.size() << " tasks, " << ds.clients.size()
            << " clients, hash " << hash_hex(dataset_hash(ds)) << "\n";

  Backbone bb = prepare_backbone(s, ds);
  if (s.backbone_path.empty())
    bb.save(out / ("backbone_" + h + ".bin"));

  const std::string alg = algorithm_name(s.fed.algorithm);
  EvalConfig ec = s.eval;
  std::vector<CurvePoint> curve;
  RoundObserver observer = [&](const TrainedSystem& partial) {
    int r = static_cast<int>(partial.history.size());
    std::cerr << "[train] round " << r << "/" << s.fed.rounds << " loss "
              << format_double(partial.history.back().mean_client_loss)
              << "\n";
    if (s.curve_every == 0 || r % s.curve_every != 0 || r == s.fed.rounds)
      return;
    TrainedSystem view;
    view.config = partial.config;
    // Mid-schedule the sequential variants have no personal adapters yet;
    // score what exists, the shared adapter alone.
    if (partial.local_adapters.empty())
      view.config.algorithm = Algorithm::kFedIt;
    if (partial.global_adapter)
      view.global_adapter = partial.global_adapter->clone();
    for (const auto& [id, a] : partial.local_adapters)
      view.local_adapters.emplace(id, a.clone());
    view.history = partial.history;
    MetricsReport mid = evaluate(bb, view, ds, ec);
    curve.push_back({r, alg, mid.mean_personalization, mid.mean_ttp});
  };

  std::cerr << "[train] " << alg << ", " << s.fed.rounds << " rounds, seed "
            << s.fed.seed << "\n";
  TrainedSystem sys = train_system(bb, ds, s.fed, observer);

  json files;
  if (s.save_checkpoint) {
    fs::path ck = out / ("ckpt_" + h);
    save_system(sys, bb, ck);
    bb.save(ck / "backbone.bin");
    write_text_file((ck / "manifest.json").string(), manifest_json(man));
    files["checkpoint"] = ck.string();
  }

  std::cerr << "[eval] " << ds.clients.size() << " clients\n";
  MetricsReport rep = evaluate(bb, sys, ds, ec);

  fs::path metrics_path = out / ("metrics_" + h + ".csv");
  write_text_file(metrics_path.string(), metrics_csv(rep));
  files["metrics_csv"] = metrics_path.string();
  if (ec.per_instance_scores) {
    fs::path ip = out / ("instances_" + h + ".csv");
    write_text_file(ip.string(), instance_csv(rep));
    files["instances_csv"] = ip.string();
  }
  if (s.curve_every > 0) {
    int final_round = static_cast<int>(sys.history.size());
    curve.push_back(
        {final_round, alg, rep.mean_personalization, rep.mean_ttp});
    fs::path cp = out / ("curves_" + h + ".csv");
    write_text_file(cp.string(), curves_csv(curve));
    files["curves_csv"] = cp.string();
  }

  uint64_t up = 0, down = 0;
  for (const RoundLog& r : sys.history) {
    up += r.bytes_up;
    down += r.bytes_down;
  }
  CommReport cr = comm_report(s.fed, bb.config(), s.fed.rounds,
                              static_cast<int>(ds.tasks.size()));
  json report;
  report["hash"] = h;
  report["algorithm"] = alg;
  report["seed"] = s.fed.seed;
  report["metrics"] = json::parse(metrics_json(rep));
  report["communication"] = json::parse(comm_report_json(cr));
  report["realized_bytes_up"] = up;
  report["realized_bytes_down"] = down;
  files["manifest"] = (out / ("manifest_" + h + ".json")).string();
  report["files"] = files;
  fs::path report_path = out / ("report_" + h + ".json");
  write_text_file(report_path.string(), report.dump(2) + "\n");

  std::cerr << summary_table({rep});

  json line;
  line["hash"] = h;
  line["algorithm"] = alg;
  line["seed"] = s.fed.seed;
  line["output_dir"] = s.output_dir;
  line["personalization"] = rep.mean_personalization;
  line["ttp"] = rep.mean_ttp;
  line["report"] = report_path.string();
  line["metrics_csv"] = metrics_path.string();
  emit_line(line);
  return 0;
}

const std::map<std::string, std::string>& alias_map() {
  static const std::map<std::string, std::string> aliases = {
      {"algorithm", "federation.algorithm"},
      {"rounds", "federation.rounds"},
      {"seed", "federation.seed"},
      {"clients", "federation.n_clients"},
      {"sample-rate", "federation.sample_rate"},
      {"workers", "federation.workers"},
      {"output", "run.output_dir"},
      {"alpha", "federation.alpha"},
      {"lambda", "federation.lambda"},
      {"rank", "federation.rank"},
      {"lr", "federation.lr"},
  };
  return aliases;
}

void usage(std::ostream& os) {
  os << "usage: feddpa <command> [--config FILE] [--key=value ...]\n"
        "\n"
        "commands:\n"
        "  run             pretrain-or-load, train, evaluate, write reports\n"
        "                  [--sweep key=v1,v2,...] runs the grid\n"
        "  pretrain        train and save a frozen backbone\n"
        "  build-data      write the synthetic task suite as JSONL\n"
        "  evaluate        re-score a saved run (--checkpoint DIR)\n"
        "  compare         consolidate run directories into one table\n"
        "                  [--curves-out FILE] merges per-round curves\n"
        "  export-adapter  write one adapter as a standalone file\n"
        "                  (--checkpoint DIR --adapter global|local:<id>)\n"
        "\n"
        "Settings come from --config FILE (key = value lines), overridden by\n"
        "--section.key=value flags. Shorthands: --algorithm --rounds --seed\n"
        "--clients --sample-rate --workers --output --alpha --lambda --rank\n"
        "--lr. Progress goes to stderr, one JSON line per run to stdout;\n"
        "artifacts are named by the config hash.\n"
        "\n"
        "defaults:\n";
  for (const auto& [k, v] : settings_map(Settings{}, true))
    os << "  " << k << " = " << v << "\n";
}

}  // namespace

KeyValues parse_config_text(const std::string& text) {
  KeyValues kv;
  std::vector<std::string> errs;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos) {
      errs.push_back("line " + std::to_string(lineno) +
                     ": expected key = value, got '" + t + "'");
      continue;
    }
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty()) {
      errs.push_back("line " + std::to_string(lineno) + ": empty key");
      continue;
    }
    if (kv.count(key)) {
      errs.push_back("line " + std::to_string(lineno) + ": duplicate key '" +
                     key + "'");
      continue;
    }
    kv[key] = value;
  }
  if (!errs.empty()) throw ConfigError(errs);
  return kv;
}

KeyValues load_config_file(const fs::path& path) {
  if (!fs::exists(path))
    throw ConfigError({"config file not found: " + path.string()});
  return parse_config_text(read_text_file(path.string()));
}

Settings resolve_settings(const KeyValues& file, const KeyValues& overrides) {
  Resolver r;
  r.kv = file;
  for (const auto& [k, v] : overrides) r.kv[k] = v;

  Settings s;
  FedConfig& f = s.fed;
  r.get("federation.n_clients", f.n_clients);
  r.get("federation.rounds", f.rounds);
  r.get("federation.sample_rate", f.sample_rate);
  r.get_enum("federation.sample_mode", f.sample_mode, sample_mode_from_name);
  r.get("federation.local_epochs", f.local_epochs);
  r.get("federation.finetune_epochs", f.finetune_epochs);
  r.get("federation.solo_epochs", f.solo_epochs);
  r.get("federation.batch_size", f.batch_size);
  r.get("federation.lr", f.lr);
  r.get("federation.rank", f.rank);
  r.get("federation.alpha", f.alpha);
  r.get("federation.lambda", f.lambda);
  r.get("federation.sample_count", f.sample_count);
  r.get_enum("federation.sim_metric", f.sim_metric, sim_metric_from_name);
  r.get_enum("federation.embed_mode", f.embed_mode, embed_mode_from_name);
  r.get("federation.per_instance_weighting", f.per_instance_weighting);
  r.get_enum("federation.aggregation", f.aggregation, aggregation_from_name);
  r.get("federation.prox_mu", f.prox_mu);
  r.get_enum("federation.algorithm", f.algorithm, algorithm_from_name);
  r.get("federation.seed", f.seed);
  r.get("federation.workers", f.workers);

  // The remaining seeds follow the federation seed unless set explicitly.
  s.model.seed = f.seed;
  s.pretrain.seed = f.seed;
  s.data_seed = f.seed;
  s.eval.seed = f.seed;

  r.get("model.vocab_size", s.model.vocab_size);
  r.get("model.d_model", s.model.d_model);
  r.get("model.n_layers", s.model.n_layers);
  r.get("model.n_heads", s.model.n_heads);
  r.get("model.d_ff", s.model.d_ff);
  r.get("model.max_seq_len", s.model.max_seq_len);
  r.get("model.seed", s.model.seed);

  r.get("pretrain.epochs", s.pretrain.epochs);
  r.get("pretrain.batch_size", s.pretrain.batch_size);
  r.get("pretrain.lr", s.pretrain.lr);
  r.get("pretrain.seed", s.pretrain.seed);

  r.get("data.seed", s.data_seed);
  r.get("data.train_per_task", s.train_per_task);
  r.get("data.test_per_task", s.test_per_task);
  r.get("data.with_unseen", s.with_unseen);

  r.get("eval.test_per_split", s.eval.test_per_split);
  r.get("eval.include_unseen", s.eval.include_unseen);
  r.get("eval.per_instance_scores", s.eval.per_instance_scores);
  r.get("eval.seed", s.eval.seed);

  r.get("run.output_dir", s.output_dir);
  r.get("run.backbone", s.backbone_path);
  r.get("run.curve_every", s.curve_every);
  r.get("run.save_checkpoint", s.save_checkpoint);

  s.eval.workers = f.workers;
  if (!s.with_unseen) s.eval.include_unseen = false;

  for (const auto& [k, v] : r.kv)
    if (!r.used.count(k)) r.errs.push_back("unknown setting: " + k);

  validate_settings(s, r.errs);
  if (!r.errs.empty()) throw ConfigError(std::move(r.errs));
  return s;
}

std::string config_text(const Settings& s, bool include_unhashed) {
  std::string out;
  for (const auto& [k, v] : settings_map(s, include_unhashed))
    out += k + "=" + v + "\n";
  return out;
}

std::string config_hash(const Settings& s) {
  std::string text = config_text(s, false);
  return hash_hex(content_hash(std::span<const uint8_t>(
      reinterpret_cast<const uint8_t*>(text.data()), text.size())));
}

RunManifest make_manifest(const Settings& s, const FederatedDataset& ds) {
  RunManifest m;
  m.hash = config_hash(s);
  m.config = config_text(s, true);
  m.dataset = dataset_summary(ds).dump();
  m.output_dir = s.output_dir;
  m.seed = s.fed.seed;
  m.created = iso_now();
  return m;
}

std::string manifest_json(const RunManifest& m) {
  json j;
  j["hash"] = m.hash;
  j["config"] = m.config;
  j["dataset"] = json::parse(m.dataset);
  j["output_dir"] = m.output_dir;
  j["seed"] = m.seed;
  j["created"] = m.created;
  return j.dump(2) + "\n";
}

KeyValues manifest_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError({std::string("manifest is not valid JSON: ") + e.what()});
  }
  if (!j.contains("config") || !j["config"].is_string())
    throw ConfigError({"manifest has no config text"});
  return parse_config_text(j["config"].get<std::string>());
}

int cmd_pretrain(const Settings& s) {
  fs::path out(s.output_dir);
  fs::create_directories(out);
  FederatedDataset ds = build_dataset(s);
  RunManifest man = make_manifest(s, ds);
  write_text_file((out / ("manifest_" + man.hash + ".json")).string(),
                  manifest_json(man));
  Backbone bb = pretrain_backbone(s, ds);
  fs::path path = out / ("backbone_" + man.hash + ".bin");
  bb.save(path);
  json line;
  line["hash"] = man.hash;
  line["backbone"] = path.string();
  line["params"] = bb.parameter_count();
  emit_line(line);
  return 0;
}

int cmd_build_data(const Settings& s) {
  fs::path out(s.output_dir);
  FederatedDataset ds = build_dataset(s);
  RunManifest man = make_manifest(s, ds);
  fs::path dir = out / ("data_" + man.hash);
  fs::create_directories(dir);
  write_text_file((out / ("manifest_" + man.hash + ".json")).string(),
                  manifest_json(man));
  size_t files = 0;
  for (const ClientAssignment& c : ds.clients) {
    save_jsonl(dir / ("client_" + std::to_string(c.client_id) + "_train.jsonl"),
               c.train);
    ++files;
  }
  for (const TaskData& t : ds.tasks) {
    save_jsonl(dir / ("task_" + std::to_string(t.spec.task_id) + "_test.jsonl"),
               t.test);
    ++files;
  }
  for (const TaskData& t : ds.unseen_tasks) {
    save_jsonl(
        dir / ("unseen_" + std::to_string(t.spec.task_id) + "_test.jsonl"),
        t.test);
    ++files;
  }
  json line;
  line["hash"] = man.hash;
  line["dir"] = dir.string();
  line["dataset_hash"] = hash_hex(dataset_hash(ds));
  line["files"] = files;
  emit_line(line);
  return 0;
}

int cmd_run(const KeyValues& file, const KeyValues& overrides,
            const std::string& sweep) {
  if (sweep.empty()) return run_one(resolve_settings(file, overrides));

  size_t eq = sweep.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 >= sweep.size())
    throw ConfigError({"--sweep expects key=v1,v2,..., got '" + sweep + "'"});
  std::string key = sweep.substr(0, eq);
  if (auto it = alias_map().find(key); it != alias_map().end())
    key = it->second;
  std::vector<std::string> values;
  std::istringstream vs(sweep.substr(eq + 1));
  std::string v;
  while (std::getline(vs, v, ',')) values.push_back(trim(v));
  if (values.empty())
    throw ConfigError({"--sweep has no values: '" + sweep + "'"});

  // Validate the whole grid before any computation starts.
  Settings base = resolve_settings(file, overrides);
  std::vector<Settings> grid;
  std::string leaf = key.substr(key.find('.') + 1);
  for (const std::string& value : values) {
    KeyValues o2 = overrides;
    o2[key] = value;
    Settings sv = resolve_settings(file, o2);
    sv.output_dir =
        (fs::path(base.output_dir) / (leaf + "_" + sanitize(value))).string();
    grid.push_back(std::move(sv));
  }
  for (const Settings& sv : grid) run_one(sv);
  return 0;
}

int cmd_evaluate(const fs::path& checkpoint, const KeyValues& overrides) {
  fs::path mf = checkpoint / "manifest.json";
  fs::path bp = checkpoint / "backbone.bin";
  std::vector<std::string> errs;
  if (!fs::exists(mf))
    errs.push_back("checkpoint has no manifest.json: " + checkpoint.string());
  if (!fs::exists(bp))
    errs.push_back("checkpoint has no backbone.bin: " + checkpoint.string());
  if (!errs.empty()) throw ConfigError(errs);

  KeyValues stored = manifest_config(read_text_file(mf.string()));
  Settings s = resolve_settings(stored, overrides);
  FederatedDataset ds = build_dataset(s);
  Backbone bb = Backbone::load(bp);
  if (!bb.frozen()) bb.freeze();
  TrainedSystem sys = load_system(checkpoint, bb);
  sys.config = s.fed;

  fs::path out(s.output_dir);
  fs::create_directories(out);
  RunManifest man = make_manifest(s, ds);
  const std::string& h = man.hash;
  write_text_file((out / ("manifest_" + h + ".json")).string(),
                  manifest_json(man));
  std::cerr << "[eval] checkpoint " << checkpoint.string() << ", "
            << ds.clients.size() << " clients\n";
  MetricsReport rep = evaluate(bb, sys, ds, s.eval);

  fs::path metrics_path = out / ("metrics_" + h + ".csv");
  write_text_file(metrics_path.string(), metrics_csv(rep));
  if (s.eval.per_instance_scores)
    write_text_file((out / ("instances_" + h + ".csv")).string(),
                    instance_csv(rep));
  json report;
  report["hash"] = h;
  report["algorithm"] = algorithm_name(s.fed.algorithm);
  report["seed"] = s.fed.seed;
  report["metrics"] = json::parse(metrics_json(rep));
  report["checkpoint"] = checkpoint.string();
  fs::path report_path = out / ("report_" + h + ".json");
  write_text_file(report_path.string(), report.dump(2) + "\n");
  std::cerr << summary_table({rep});

  json line;
  line["hash"] = h;
  line["algorithm"] = algorithm_name(s.fed.algorithm);
  line["seed"] = s.fed.seed;
  line["personalization"] = rep.mean_personalization;
  line["ttp"] = rep.mean_ttp;
  line["metrics_csv"] = metrics_path.string();
  line["report"] = report_path.string();
  emit_line(line);
  return 0;
}

int cmd_compare(const std::vector<fs::path>& run_dirs,
                const fs::path& curves_out) {
  struct Row {
    std::string alg;
    uint64_t seed;
    std::string hash;
    double p;
    double ttp;
  };
  std::vector<Row> rows;
  std::vector<std::string> curve_rows;
  std::string curve_header;
  std::vector<std::string> problems;

  for (const fs::path& dir : run_dirs) {
    if (!fs::is_directory(dir)) {
      problems.push_back("not a directory: " + dir.string());
      continue;
    }
    std::vector<fs::path> entries;
    for (const auto& e : fs::directory_iterator(dir))
      entries.push_back(e.path());
    std::sort(entries.begin(), entries.end());
    bool found = false;
    for (const fs::path& p : entries) {
      std::string name = p.filename().string();
      if (name.starts_with("report_") && name.ends_with(".json")) {
        json j = json::parse(read_text_file(p.string()));
        rows.push_back({j["algorithm"].get<std::string>(),
                        j["seed"].get<uint64_t>(),
                        j["hash"].get<std::string>(),
                        j["metrics"]["mean_personalization"].get<double>(),
                        j["metrics"]["mean_ttp"].get<double>()});
        found = true;
      } else if (name.starts_with("curves_") && name.ends_with(".csv")) {
        std::istringstream in(read_text_file(p.string()));
        std::string line;
        bool first = true;
        while (std::getline(in, line)) {
          if (first) {
            curve_header = line;
            first = false;
          } else if (!line.empty()) {
            curve_rows.push_back(line);
          }
        }
      }
    }
    if (!found)
      problems.push_back("no run reports (report_*.json) in " + dir.string());
  }
  if (!problems.empty()) throw ConfigError(problems);

  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return std::tie(a.alg, a.seed, a.hash) < std::tie(b.alg, b.seed, b.hash);
  });
  std::cout << "algorithm\tseed\tpersonalization\tttp\thash\n";
  for (const Row& r : rows)
    std::cout << r.alg << "\t" << r.seed << "\t" << format_double(r.p) << "\t"
              << format_double(r.ttp) << "\t" << r.hash << "\n";

  if (!curve_rows.empty()) {
    std::string merged = curve_header + "\n";
    for (const std::string& line : curve_rows) merged += line + "\n";
    write_text_file(curves_out.string(), merged);
    std::cerr << "[compare] merged " << curve_rows.size()
              << " curve rows into " << curves_out.string() << "\n";
  }
  return 0;
}

int cmd_export_adapter(const fs::path& checkpoint, const std::string& which,
                       const fs::path& out) {
  fs::path bp = checkpoint / "backbone.bin";
  if (!fs::exists(bp))
    throw ConfigError({"checkpoint has no backbone.bin: " +
                       checkpoint.string()});
  Backbone bb = Backbone::load(bp);
  if (!bb.frozen()) bb.freeze();
  TrainedSystem sys = load_system(checkpoint, bb);

  const LoraAdapter* adapter = nullptr;
  if (which == "global") {
    if (!sys.global_adapter)
      throw ConfigError({"checkpoint has no shared adapter"});
    adapter = &*sys.global_adapter;
  } else if (which.starts_with("local:")) {
    long long id;
    if (!parse_ll(which.substr(6), id))
      throw ConfigError({"--adapter expects global or local:<id>, got '" +
                         which + "'"});
    auto it = sys.local_adapters.find(static_cast<int>(id));
    if (it == sys.local_adapters.end())
      throw ConfigError({"checkpoint has no personal adapter for client " +
                         std::to_string(id)});
    adapter = &it->second;
  } else {
    throw ConfigError({"--adapter expects global or local:<id>, got '" +
                       which + "'"});
  }

  fs::path path = out.empty()
                      ? checkpoint / ("adapter_" + sanitize(which) + ".bin")
                      : out;
  std::vector<uint8_t> bytes = serialize(*adapter);
  write_binary_file(path.string(), bytes);
  json line;
  line["file"] = path.string();
  line["params"] = adapter->parameter_count();
  line["bytes"] = bytes.size();
  line["adapter_hash"] = hash_hex(adapter_hash(*adapter));
  emit_line(line);
  return 0;
}

int cli_main(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    if (args.empty()) {
      usage(std::cerr);
      return 2;
    }
    std::string cmd = args[0];
    if (cmd == "help" || cmd == "--help" || cmd == "-h") {
      usage(std::cout);
      return 0;
    }

    KeyValues overrides;
    fs::path config_path, checkpoint, out_path;
    fs::path curves_out = "compare_curves.csv";
    std::string sweep, which;
    std::vector<fs::path> dirs;
    std::vector<std::string> errs;

    for (size_t i = 1; i < args.size(); ++i) {
      const std::string& tok = args[i];
      if (tok.rfind("--", 0) != 0) {
        if (cmd == "compare")
          dirs.push_back(tok);
        else
          errs.push_back("unexpected argument: " + tok);
        continue;
      }
      std::string name = tok.substr(2);
      std::string value;
      size_t eq = name.find('=');
      if (eq != std::string::npos) {
        value = name.substr(eq + 1);
        name = name.substr(0, eq);
      } else if (name == "help") {
        usage(std::cout);
        return 0;
      } else if (i + 1 < args.size() && args[i + 1].rfind("--", 0) != 0) {
        value = args[++i];
      } else {
        errs.push_back("flag needs a value: " + tok);
        continue;
      }
      if (name == "config")
        config_path = value;
      else if (name == "sweep")
        sweep = value;
      else if (name == "checkpoint")
        checkpoint = value;
      else if (name == "out")
        out_path = value;
      else if (name == "curves-out")
        curves_out = value;
      else if (name == "adapter")
        which = value;
      else if (auto it = alias_map().find(name); it != alias_map().end())
        overrides[it->second] = value;
      else if (name.find('.') != std::string::npos)
        overrides[name] = value;
      else
        errs.push_back("unknown flag: --" + name);
    }
    if (!errs.empty()) throw ConfigError(std::move(errs));

    KeyValues file =
        config_path.empty() ? KeyValues{} : load_config_file(config_path);

    if (cmd == "run") return cmd_run(file, overrides, sweep);
    if (cmd == "pretrain") return cmd_pretrain(resolve_settings(file, overrides));
    if (cmd == "build-data")
      return cmd_build_data(resolve_settings(file, overrides));
    if (cmd == "evaluate") {
      if (checkpoint.empty())
        throw ConfigError({"evaluate requires --checkpoint <dir>"});
      return cmd_evaluate(checkpoint, overrides);
    }
    if (cmd == "export-adapter") {
      std::vector<std::string> need;
      if (checkpoint.empty())
        need.push_back("export-adapter requires --checkpoint <dir>");
      if (which.empty())
        need.push_back("export-adapter requires --adapter global|local:<id>");
      if (!need.empty()) throw ConfigError(std::move(need));
      return cmd_export_adapter(checkpoint, which, out_path);
    }
    if (cmd == "compare") {
      if (dirs.empty())
        throw ConfigError({"compare requires at least one run directory"});
      return cmd_compare(dirs, curves_out);
    }
    usage(std::cerr);
    throw ConfigError({"unknown command: " + cmd});
  } catch (const ConfigError& e) {
    std::cerr << "configuration problems:\n" << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace feddpa::cli
