#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <sstream>

#include "json.hpp"

#include "feddpa/algorithms.hpp"
#include "feddpa/data.hpp"
#include "feddpa/eval.hpp"
#include "feddpa/lora.hpp"
#include "feddpa/model.hpp"
#include "feddpa/weighting.hpp"

using namespace feddpa;

namespace {

BackboneConfig tiny_config() {
  BackboneConfig c;
  c.d_model = 32;
  c.n_heads = 2;
  c.d_ff = 64;
  c.max_seq_len = 32;
  c.seed = 11;
  return c;
}

FedConfig small_fed() {
  FedConfig c;
  c.n_clients = 8;
  c.rounds = 1;
  c.local_epochs = 1;
  c.finetune_epochs = 1;
  c.solo_epochs = 1;
  c.batch_size = 8;
  c.lr = 0.1;
  c.rank = 4;
  c.seed = 41;
  return c;
}

EvalConfig small_eval() {
  EvalConfig c;
  c.test_per_split = 4;
  return c;
}

struct Fixture {
  Backbone bb;
  FederatedDataset ds = build_suite(19, 16, 8);

  Fixture() : bb(Backbone::create(tiny_config())) { bb.freeze(); }
};

int count_lines(const std::string& s) {
  int n = 0;
  for (char c : s)
    if (c == '\n') ++n;
  return n;
}

}  // namespace

TEST_CASE("unigram overlap reproduces hand-computed scores") {
  CHECK(rouge1("the cat sat", "the cat sat") == 1.0);
  CHECK(rouge1("the cat sat", "the cat") == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(rouge1("a b c", "a d") == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(rouge1("x y", "p q") == 0.0);
}

TEST_CASE("repeated tokens are clipped to the reference counts") {
  CHECK(rouge1("a a a", "a") == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(rouge1("a", "a a a") == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(rouge1("a a", "a a a a") == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("word order and surrounding whitespace are ignored") {
  CHECK(rouge1("b a", "a b") == 1.0);
  CHECK(rouge1("  a \t b ", "a b") == 1.0);
}

TEST_CASE("degenerate strings score zero or reject") {
  CHECK(rouge1("", "a b") == 0.0);
  CHECK(rouge1("   ", "a b") == 0.0);
  CHECK_THROWS_AS(rouge1("a", ""), EvalError);
  CHECK_THROWS_AS(rouge1("a", "  "), EvalError);
}

TEST_CASE("traffic accounting matches the adapter's own bookkeeping") {
  BackboneConfig bc = tiny_config();
  FedConfig fc = small_fed();
  CommReport r = comm_report(fc, bc, 10);

  LoraAdapter probe = new_adapter(bc.n_layers, bc.d_model, fc.rank, 1);
  CHECK(r.adapter_params == probe.parameter_count());
  CHECK(r.backbone_params == backbone_parameter_count(bc));
  CHECK(r.total_params == r.backbone_params + r.adapter_params);
  CHECK(r.fraction ==
        doctest::Approx(static_cast<double>(r.adapter_params) /
                        static_cast<double>(r.total_params)).epsilon(1e-15));
  CHECK(r.payload_bytes == serialized_size(bc.n_layers, bc.d_model, fc.rank));
  CHECK(r.clients_per_round == 8);
  CHECK(r.bytes_per_round == 2ull * r.payload_bytes * 8);
  CHECK(r.total_bytes == r.bytes_per_round * 10);
  CHECK(r.rounds == 10);
}

TEST_CASE("traffic scales linearly in rounds and respects sampling") {
  BackboneConfig bc = tiny_config();
  FedConfig fc = small_fed();
  fc.sample_rate = 0.25;
  CommReport r1 = comm_report(fc, bc, 5);
  CommReport r2 = comm_report(fc, bc, 10);
  CHECK(r1.clients_per_round == 2);
  CHECK(r2.total_bytes == 2 * r1.total_bytes);
  CHECK(comm_report(fc, bc, 0).total_bytes == 0);
  CHECK_THROWS_AS(comm_report(fc, bc, -1), EvalError);

  fc.n_clients = 40;
  fc.sample_rate = 0.2;
  fc.sample_mode = SampleMode::kPerTask;
  CHECK(comm_report(fc, bc, 1).clients_per_round == 8);

  const std::string j = comm_report_json(r1);
  nlohmann::json parsed = nlohmann::json::parse(j);
  CHECK(parsed["clients_per_round"] == 2);
  CHECK(parsed["rounds"] == 5);
}

TEST_CASE("shared-only systems give every client the same task profile") {
  Fixture f;
  TrainedSystem sys = fedit(f.bb, f.ds, small_fed());
  reset_weighting_counters();
  MetricsReport rep = evaluate(f.bb, sys, f.ds, small_eval());

  CHECK(rep.algorithm == "fedit");
  REQUIRE(rep.clients.size() == 8);
  for (const ClientReport& c : rep.clients) {
    REQUIRE(c.per_task.size() == 8);
    CHECK(c.per_task == rep.clients[0].per_task);
    CHECK(c.personalization == c.per_task.at(c.task_id));
    double sum = 0.0;
    for (const auto& [task, score] : c.per_task) {
      CHECK(score >= 0.0);
      CHECK(score <= 1.0);
      sum += score;
    }
    CHECK(c.ttp == doctest::Approx(sum / 8.0).epsilon(1e-12));
    for (const auto& [task, alpha] : c.per_task_alpha) CHECK(alpha == 0.0);
  }

  double p = 0.0, t = 0.0;
  for (const ClientReport& c : rep.clients) {
    p += c.personalization;
    t += c.ttp;
  }
  CHECK(rep.mean_personalization == doctest::Approx(p / 8.0).epsilon(1e-12));
  CHECK(rep.mean_ttp == doctest::Approx(t / 8.0).epsilon(1e-12));

  // the shared-only path never touches the weighting machinery
  CHECK(weighting_counters().contexts_built == 0);
  CHECK(weighting_counters().alpha_calls == 0);
}

TEST_CASE("personal-only systems never touch the weighting machinery") {
  Fixture f;
  TrainedSystem sys = local_only(f.bb, f.ds, small_fed());
  reset_weighting_counters();
  MetricsReport rep = evaluate(f.bb, sys, f.ds, small_eval());
  CHECK(rep.algorithm == "local");
  REQUIRE(rep.clients.size() == 8);
  for (const ClientReport& c : rep.clients)
    for (const auto& [task, alpha] : c.per_task_alpha) CHECK(alpha == 0.0);
  CHECK(weighting_counters().contexts_built == 0);
  CHECK(weighting_counters().alpha_calls == 0);
}

TEST_CASE("dual systems weight every scored instance exactly once") {
  Fixture f;
  FedConfig cfg = small_fed();
  cfg.alpha = 0.4;
  TrainedSystem sys = feddpa_t(f.bb, f.ds, cfg);
  reset_weighting_counters();
  EvalConfig ec = small_eval();
  MetricsReport rep = evaluate(f.bb, sys, f.ds, ec);

  CHECK(weighting_counters().contexts_built == 8);
  CHECK(weighting_counters().alpha_calls == 8ull * 8ull * 4ull);

  // the iterative variant caps the personal weight at its fusion alpha
  for (const ClientReport& c : rep.clients)
    for (const auto& [task, alpha] : c.per_task_alpha) {
      CHECK(alpha >= 0.0);
      CHECK(alpha <= cfg.alpha + 1e-15);
    }
}

TEST_CASE("the sequential variant caps the personal weight at lambda") {
  Fixture f;
  FedConfig cfg = small_fed();
  cfg.lambda = 0.3;
  TrainedSystem sys = feddpa_f(f.bb, f.ds, cfg);
  MetricsReport rep = evaluate(f.bb, sys, f.ds, small_eval());
  bool any_positive = false;
  for (const ClientReport& c : rep.clients)
    for (const auto& [task, alpha] : c.per_task_alpha) {
      CHECK(alpha >= 0.0);
      CHECK(alpha <= 0.3 + 1e-15);
      any_positive = any_positive || alpha > 0.0;
    }
  CHECK(any_positive);
}

TEST_CASE("a zero slice cap scores whole test splits") {
  Fixture f;
  TrainedSystem sys = feddpa_t(f.bb, f.ds, small_fed());
  reset_weighting_counters();
  EvalConfig ec;
  ec.test_per_split = 0;
  evaluate(f.bb, sys, f.ds, ec);
  CHECK(weighting_counters().alpha_calls == 8ull * 8ull * 8ull);
}

TEST_CASE("per-instance recording captures one row per scored decode") {
  Fixture f;
  TrainedSystem sys = feddpa_t(f.bb, f.ds, small_fed());
  EvalConfig ec = small_eval();
  ec.per_instance_scores = true;
  MetricsReport rep = evaluate(f.bb, sys, f.ds, ec);
  REQUIRE(rep.instances.size() == 8 * 8 * 4);
  for (const InstanceScore& s : rep.instances) {
    CHECK(s.score >= 0.0);
    CHECK(s.score <= 1.0);
    CHECK(s.index < 4);
  }
  CHECK(evaluate(f.bb, sys, f.ds, small_eval()).instances.empty());
}

TEST_CASE("never-sampled clients fall back to the shared path") {
  Fixture f;
  FedConfig cfg = small_fed();
  cfg.sample_rate = 0.25;  // trains two of eight personal adapters
  TrainedSystem sys = feddpa_t(f.bb, f.ds, cfg);
  REQUIRE(sys.local_adapters.size() == 2);
  MetricsReport rep = evaluate(f.bb, sys, f.ds, small_eval());
  CHECK(rep.clients.size() == 8);
}

TEST_CASE("systems missing their required adapters are rejected") {
  Fixture f;
  TrainedSystem bare;
  bare.config = small_fed();
  bare.config.algorithm = Algorithm::kFedLora;
  CHECK_THROWS_AS(evaluate(f.bb, bare, f.ds, small_eval()), EvalError);
  bare.config.algorithm = Algorithm::kFedDpaT;
  CHECK_THROWS_AS(evaluate(f.bb, bare, f.ds, small_eval()), EvalError);
  bare.config.algorithm = Algorithm::kFedIt;
  CHECK_THROWS_AS(evaluate(f.bb, bare, f.ds, small_eval()), EvalError);
}

TEST_CASE("held-out tasks report per-task averages and bests") {
  Fixture f;
  TrainedSystem sys = fedit(f.bb, f.ds, small_fed());
  EvalConfig ec = small_eval();
  ec.include_unseen = true;
  MetricsReport rep = evaluate(f.bb, sys, f.ds, ec);
  REQUIRE(rep.unseen.size() == f.ds.unseen_tasks.size());
  REQUIRE(!rep.unseen.empty());
  for (const UnseenReport& u : rep.unseen) {
    CHECK(u.avg >= 0.0);
    CHECK(u.avg <= u.max);
    CHECK(u.max <= 1.0);
    CHECK(!u.name.empty());
    for (const ClientReport& c : rep.clients)
      CHECK(c.per_task.find(u.task_id) == c.per_task.end());
  }
  CHECK(evaluate(f.bb, sys, f.ds, small_eval()).unseen.empty());
}

TEST_CASE("parallel evaluation reproduces the sequential outputs") {
  Fixture f;
  TrainedSystem sys = feddpa_t(f.bb, f.ds, small_fed());
  EvalConfig seq = small_eval();
  seq.per_instance_scores = true;
  seq.include_unseen = true;
  EvalConfig par = seq;
  par.workers = 4;
  MetricsReport a = evaluate(f.bb, sys, f.ds, seq);
  MetricsReport b = evaluate(f.bb, sys, f.ds, par);
  CHECK(metrics_csv(a) == metrics_csv(b));
  CHECK(instance_csv(a) == instance_csv(b));
  CHECK(metrics_json(a) == metrics_json(b));
}

TEST_CASE("csv writers emit stable headers and one row per fact") {
  Fixture f;
  TrainedSystem sys = fedit(f.bb, f.ds, small_fed());
  EvalConfig ec = small_eval();
  ec.per_instance_scores = true;
  MetricsReport rep = evaluate(f.bb, sys, f.ds, ec);

  const std::string mc = metrics_csv(rep);
  CHECK(mc.rfind("algorithm,seed,client,task,rouge1,alpha_mean\n", 0) == 0);
  CHECK(count_lines(mc) == 1 + 8 * 8);

  const std::string ic = instance_csv(rep);
  CHECK(ic.rfind("client,task,index,rouge1,alpha\n", 0) == 0);
  CHECK(count_lines(ic) == 1 + 8 * 8 * 4);

  const std::string table = summary_table({rep});
  CHECK(table.find("fedit") != std::string::npos);
  CHECK(table.find("TTP") != std::string::npos);

  nlohmann::json parsed = nlohmann::json::parse(metrics_json(rep));
  CHECK(parsed["algorithm"] == "fedit");
  CHECK(parsed["clients"].size() == 8);
  CHECK(parsed["mean_ttp"].get<double>() ==
        doctest::Approx(rep.mean_ttp).epsilon(1e-12));
}

TEST_CASE("training curves serialize round by round") {
  std::vector<CurvePoint> pts;
  pts.push_back({0, "fedit", 0.25, 0.125});
  pts.push_back({1, "fedit", 0.5, 0.25});
  const std::string csv = curves_csv(pts);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "round,algorithm,personalization,ttp");
  std::getline(in, line);
  CHECK(line == "0,fedit,0.25,0.125");
  std::getline(in, line);
  CHECK(line == "1,fedit,0.5,0.25");
}
