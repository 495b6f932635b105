#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "feddpa/data.hpp"
#include "feddpa/lora.hpp"
#include "feddpa/model.hpp"
#include "feddpa/rng.hpp"
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

struct Fixture {
  Backbone bb = Backbone::create(tiny_config());
  LoraAdapter global = new_adapter(2, 32, 4, 17);
  FederatedDataset ds = build_suite(23, 40, 10);
};

std::vector<double> vec(std::initializer_list<double> v) { return v; }

}  // namespace

TEST_CASE("identical vectors score 1 under every metric") {
  const std::vector<double> u = vec({0.3, -1.2, 4.0, 0.0});
  for (SimMetric m :
       {SimMetric::kCosine, SimMetric::kNegL2, SimMetric::kPearson})
    CHECK(similarity(u, u, m) == 1.0);
}

TEST_CASE("orthogonal vectors have zero cosine") {
  CHECK(similarity(vec({1.0, 0.0}), vec({0.0, 1.0}), SimMetric::kCosine) ==
        0.0);
}

TEST_CASE("cosine matches the closed form on a worked pair") {
  const double got =
      similarity(vec({1.0, 0.0}), vec({1.0, 1.0}), SimMetric::kCosine);
  CHECK(got == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
}

TEST_CASE("negative correlations clamp to zero") {
  CHECK(similarity(vec({1.0, 0.0}), vec({-1.0, 0.0}), SimMetric::kCosine) ==
        0.0);
  CHECK(similarity(vec({1.0, 2.0, 3.0}), vec({3.0, 2.0, 1.0}),
                   SimMetric::kPearson) == 0.0);
}

TEST_CASE("euclidean mapping hits known distances") {
  CHECK(similarity(vec({0.0, 0.0}), vec({3.0, 4.0}), SimMetric::kNegL2) ==
        doctest::Approx(1.0 / 6.0).epsilon(1e-15));
}

TEST_CASE("degenerate inputs are rejected") {
  const std::vector<double> z = vec({0.0, 0.0});
  const std::vector<double> u = vec({1.0, 2.0});
  CHECK_THROWS_AS(similarity(z, u, SimMetric::kCosine), WeightingError);
  CHECK_THROWS_AS(similarity(u, z, SimMetric::kPearson), WeightingError);
  CHECK(similarity(z, z, SimMetric::kNegL2) == 1.0);
  const std::vector<double> c = vec({2.0, 2.0});
  CHECK_THROWS_AS(similarity(c, u, SimMetric::kPearson), WeightingError);
  CHECK_THROWS_AS(similarity(u, vec({1.0}), SimMetric::kCosine),
                  WeightingError);
}

TEST_CASE("every metric stays inside the unit interval on random pairs") {
  Rng rng(401);
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> u(8), v(8);
    for (double& x : u) x = rng.normal(0.0, 3.0);
    for (double& x : v) x = rng.normal(0.0, 3.0);
    for (SimMetric m :
         {SimMetric::kCosine, SimMetric::kNegL2, SimMetric::kPearson}) {
      const double s = similarity(u, v, m);
      CHECK(s >= 0.0);
      CHECK(s <= 1.0);
    }
  }
}

TEST_CASE("metric names round-trip") {
  for (SimMetric m :
       {SimMetric::kCosine, SimMetric::kNegL2, SimMetric::kPearson})
    CHECK(sim_metric_from_name(sim_metric_name(m)) == m);
  CHECK_THROWS_AS(sim_metric_from_name("manhattan"), WeightingError);
}

TEST_CASE("a one-instance context caches that instance's embedding") {
  Fixture f;
  std::vector<Instance> train{f.ds.tasks[0].train[0]};
  WeightingConfig wc;
  wc.sample_count = 1;
  wc.seed = 5;
  WeightingContext ctx = build_context(0, f.bb, f.global, train, wc);
  REQUIRE(ctx.cached().size() == 1);
  const std::vector<double> direct = extract_embedding(
      f.bb, &f.global, render_prompt(train[0]), EmbedMode::kLast);
  CHECK(ctx.cached()[0] == direct);
}

TEST_CASE("contexts are reproducible for a fixed seed") {
  Fixture f;
  WeightingConfig wc;
  wc.sample_count = 5;
  wc.seed = 77;
  WeightingContext a = build_context(3, f.bb, f.global, f.ds.tasks[1].train, wc);
  WeightingContext b = build_context(3, f.bb, f.global, f.ds.tasks[1].train, wc);
  CHECK(a.cached_indices() == b.cached_indices());
  CHECK(a.cached() == b.cached());
}

TEST_CASE("context sampling replays an independent seeded draw") {
  Fixture f;
  FederatedDataset big = build_suite(23, 300, 5);
  WeightingConfig wc;
  wc.sample_count = 5;
  wc.seed = 99;
  WeightingContext ctx =
      build_context(2, f.bb, f.global, big.tasks[0].train, wc);
  Rng replay(derive_seed(99, "wctx", 2));
  CHECK(ctx.cached_indices() == replay.sample_without_replacement(300, 5));
}

TEST_CASE("small train sets are sampled with replacement") {
  Fixture f;
  std::vector<Instance> train(f.ds.tasks[0].train.begin(),
                              f.ds.tasks[0].train.begin() + 3);
  WeightingConfig wc;
  wc.sample_count = 5;
  wc.seed = 7;
  WeightingContext ctx = build_context(0, f.bb, f.global, train, wc);
  CHECK(ctx.cached().size() == 5);
  for (size_t idx : ctx.cached_indices()) CHECK(idx < 3);
  for (const auto& e : ctx.cached())
    CHECK(e.size() == static_cast<size_t>(f.bb.config().d_model));
}

TEST_CASE("an empty train set cannot form a context") {
  Fixture f;
  std::vector<Instance> train;
  WeightingConfig wc;
  CHECK_THROWS_AS(build_context(0, f.bb, f.global, train, wc), WeightingError);
}

TEST_CASE("bad weighting parameters are rejected") {
  Fixture f;
  std::vector<Instance> train{f.ds.tasks[0].train[0]};
  WeightingConfig wc;
  wc.sample_count = 0;
  CHECK_THROWS_AS(build_context(0, f.bb, f.global, train, wc), WeightingError);
  wc.sample_count = 1;
  wc.lambda = 0.0;
  CHECK_THROWS_AS(build_context(0, f.bb, f.global, train, wc), WeightingError);
  wc.lambda = 1.5;
  CHECK_THROWS_AS(build_context(0, f.bb, f.global, train, wc), WeightingError);
}

TEST_CASE("a sampled instance queries back at exactly lambda") {
  Fixture f;
  std::vector<Instance> train{f.ds.tasks[0].train[0]};
  WeightingConfig wc;
  wc.sample_count = 1;
  wc.lambda = 0.5;
  wc.seed = 3;
  WeightingContext ctx = build_context(0, f.bb, f.global, train, wc);
  CHECK(compute_alpha(ctx, train[0]) == 0.5);
}

TEST_CASE("alpha is the scaled mean of the raw scores") {
  Fixture f;
  WeightingConfig wc;
  wc.sample_count = 5;
  wc.lambda = 0.7;
  wc.seed = 13;
  WeightingContext ctx =
      build_context(1, f.bb, f.global, f.ds.tasks[2].train, wc);
  std::vector<double> scores;
  const double alpha = compute_alpha(ctx, f.ds.tasks[3].test[0], &scores);
  REQUIRE(scores.size() == 5);
  double mean = 0.0;
  for (double s : scores) mean += s;
  mean /= 5.0;
  CHECK(alpha == 0.7 * mean);
  CHECK(alpha >= 0.0);
  CHECK(alpha <= 0.7);
}

TEST_CASE("the scaled-mean arithmetic matches the worked example") {
  double mean = (0.2 + 0.4 + 0.9) / 3.0;
  CHECK(0.5 * mean == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(1.0 * mean == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("alpha scales linearly in lambda") {
  Fixture f;
  WeightingConfig wc;
  wc.sample_count = 3;
  wc.seed = 31;
  wc.lambda = 0.4;
  WeightingContext half =
      build_context(0, f.bb, f.global, f.ds.tasks[0].train, wc);
  wc.lambda = 0.8;
  WeightingContext full =
      build_context(0, f.bb, f.global, f.ds.tasks[0].train, wc);
  const Instance& probe = f.ds.tasks[1].test[0];
  CHECK(compute_alpha(full, probe) == 2.0 * compute_alpha(half, probe));
}

TEST_CASE("alpha stays within bounds across metrics and modes") {
  Fixture f;
  for (SimMetric m :
       {SimMetric::kCosine, SimMetric::kNegL2, SimMetric::kPearson}) {
    for (EmbedMode mode : {EmbedMode::kLast, EmbedMode::kAvg}) {
      WeightingConfig wc;
      wc.sample_count = 4;
      wc.lambda = 0.6;
      wc.metric = m;
      wc.mode = mode;
      wc.seed = 47;
      WeightingContext ctx =
          build_context(0, f.bb, f.global, f.ds.tasks[0].train, wc);
      for (int i = 0; i < 5; ++i) {
        const double a = compute_alpha(ctx, f.ds.tasks[4].test[i]);
        CHECK(a >= 0.0);
        CHECK(a <= 0.6);
      }
    }
  }
}

TEST_CASE("per-instance resampling is deterministic per instance") {
  Fixture f;
  WeightingConfig wc;
  wc.sample_count = 3;
  wc.per_instance = true;
  wc.seed = 53;
  WeightingContext ctx =
      build_context(0, f.bb, f.global, f.ds.tasks[0].train, wc);
  const Instance& a = f.ds.tasks[2].test[0];
  const Instance& b = f.ds.tasks[2].test[1];
  CHECK(compute_alpha(ctx, a) == compute_alpha(ctx, a));
  CHECK(compute_alpha(ctx, b) == compute_alpha(ctx, b));
}

TEST_CASE("usage counters track builds and queries") {
  Fixture f;
  reset_weighting_counters();
  WeightingConfig wc;
  wc.sample_count = 2;
  wc.seed = 9;
  WeightingContext ctx =
      build_context(0, f.bb, f.global, f.ds.tasks[0].train, wc);
  for (int i = 0; i < 3; ++i) compute_alpha(ctx, f.ds.tasks[0].test[i]);
  WeightingCounters c = weighting_counters();
  CHECK(c.contexts_built == 1);
  CHECK(c.alpha_calls == 3);
  reset_weighting_counters();
  c = weighting_counters();
  CHECK(c.contexts_built == 0);
  CHECK(c.alpha_calls == 0);
}
