#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "feddpa/data.hpp"
#include "feddpa/eval.hpp"
#include "feddpa/federation.hpp"
#include "feddpa/model.hpp"

namespace feddpa::cli {

// Anything wrong with flags or configuration, all problems at once, one per
// line in what(). Maps to exit code 2; runtime failures map to 3.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

using KeyValues = std::map<std::string, std::string>;

// `key = value` lines, `#` comments, blank lines. A key may appear once;
// duplicates are reported as errors rather than silently resolved.
KeyValues parse_config_text(const std::string& text);
KeyValues load_config_file(const std::filesystem::path& path);

// Every setting the tool understands, resolved to concrete values. The
// seeds of the model, pretraining, data and evaluation sections default to
// the federation seed, so one `--seed` override moves the whole pipeline.
struct Settings {
  FedConfig fed;
  BackboneConfig model;
  PretrainConfig pretrain;
  uint64_t data_seed = 0;
  int train_per_task = kDefaultTrainPerTask;
  int test_per_task = kDefaultTestPerTask;
  bool with_unseen = true;
  EvalConfig eval;
  std::string output_dir = "out";
  std::string backbone_path;  // empty: pretrain in-process
  int curve_every = 0;        // 0: no per-round curve evaluation
  bool save_checkpoint = true;
};

// Defaults, then file values, then overrides. Unknown keys, unparsable
// values and invariant violations are collected and thrown together.
Settings resolve_settings(const KeyValues& file, const KeyValues& overrides);

// Sorted `key=value` dump of the resolved settings. The hashed form leaves
// out run.* and the worker budget: where outputs land and how many threads
// compute them are not part of an experiment's identity.
std::string config_text(const Settings& s, bool include_unhashed);
std::string config_hash(const Settings& s);

struct RunManifest {
  std::string hash;
  std::string config;       // full config text, including run.* and workers
  std::string dataset;      // dataset summary as a JSON string
  std::string output_dir;
  uint64_t seed = 0;
  std::string created;      // timestamp; the only non-reproducible field
};
RunManifest make_manifest(const Settings& s, const FederatedDataset& dataset);
std::string manifest_json(const RunManifest& m);
// Recovers the stored config map from a manifest file's JSON text.
KeyValues manifest_config(const std::string& json_text);

// Subcommand drivers. Progress goes to stderr, one JSON line per completed
// unit of work goes to stdout, data goes to files named by the config hash.
int cmd_pretrain(const Settings& s);
int cmd_build_data(const Settings& s);
// Resolves internally so that --sweep key=v1,v2,... can re-resolve once per
// value; each value runs into its own subdirectory and prints its own line.
int cmd_run(const KeyValues& file, const KeyValues& overrides,
            const std::string& sweep);
int cmd_evaluate(const std::filesystem::path& checkpoint,
                 const KeyValues& overrides);
int cmd_compare(const std::vector<std::filesystem::path>& run_dirs,
                const std::filesystem::path& curves_out);
int cmd_export_adapter(const std::filesystem::path& checkpoint,
                       const std::string& which,
                       const std::filesystem::path& out);

// Full argument parsing and dispatch; returns the process exit status
// (0 success, 2 configuration error, 3 runtime error).
int cli_main(int argc, const char* const* argv);

}  // namespace feddpa::cli
