#include "feddpa/weighting.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "feddpa/rng.hpp"
#include "feddpa/util.hpp"

namespace feddpa {

namespace {

std::atomic<uint64_t> g_contexts_built{0};
std::atomic<uint64_t> g_alpha_calls{0};

double dot(std::span<const double> u, std::span<const double> v) {
  double s = 0.0;
  for (size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return s;
}

void validate_config(const WeightingConfig& config) {
  if (config.sample_count < 1)
    throw WeightingError("weighting sample count must be at least 1");
  if (!(config.lambda > 0.0) || config.lambda > 1.0)
    throw WeightingError("weighting scale must lie in (0, 1]");
}

uint64_t instance_stream(const WeightingContext& ctx, const Instance& inst) {
  const auto* bytes = reinterpret_cast<const uint8_t*>(inst.instruction.data());
  const uint64_t h =
      content_hash(std::span<const uint8_t>(bytes, inst.instruction.size()));
  return derive_seed(ctx.config().seed, "winst",
                     static_cast<uint64_t>(ctx.client_id()), h);
}

std::vector<size_t> draw_indices(Rng& rng, size_t n, size_t count) {
  if (n >= count) return rng.sample_without_replacement(n, count);
  std::vector<size_t> indices(count);
  for (size_t i = 0; i < count; ++i)
    indices[i] = static_cast<size_t>(rng.uniform_int(n));
  return indices;
}

}  // namespace

const char* sim_metric_name(SimMetric metric) {
  switch (metric) {
    case SimMetric::kCosine: return "cosine";
    case SimMetric::kNegL2: return "neg_l2";
    case SimMetric::kPearson: return "pearson";
  }
  return "?";
}

SimMetric sim_metric_from_name(const std::string& name) {
  if (name == "cosine") return SimMetric::kCosine;
  if (name == "neg_l2") return SimMetric::kNegL2;
  if (name == "pearson") return SimMetric::kPearson;
  throw WeightingError("unknown similarity metric: " + name);
}

double similarity(std::span<const double> u, std::span<const double> v,
                  SimMetric metric) {
  if (u.size() != v.size() || u.empty())
    throw WeightingError("similarity requires two vectors of equal nonzero size");
  switch (metric) {
    case SimMetric::kCosine: {
      const double nu = std::sqrt(dot(u, u));
      const double nv = std::sqrt(dot(v, v));
      if (nu == 0.0 || nv == 0.0)
        throw WeightingError("cosine similarity is undefined for a zero vector");
      if (std::equal(u.begin(), u.end(), v.begin())) return 1.0;
      return std::clamp(dot(u, v) / (nu * nv), 0.0, 1.0);
    }
    case SimMetric::kNegL2: {
      double s = 0.0;
      for (size_t i = 0; i < u.size(); ++i) {
        const double d = u[i] - v[i];
        s += d * d;
      }
      return 1.0 / (1.0 + std::sqrt(s));
    }
    case SimMetric::kPearson: {
      double mu = 0.0, mv = 0.0;
      for (size_t i = 0; i < u.size(); ++i) {
        mu += u[i];
        mv += v[i];
      }
      mu /= static_cast<double>(u.size());
      mv /= static_cast<double>(v.size());
      double suv = 0.0, suu = 0.0, svv = 0.0;
      for (size_t i = 0; i < u.size(); ++i) {
        const double du = u[i] - mu;
        const double dv = v[i] - mv;
        suv += du * dv;
        suu += du * du;
        svv += dv * dv;
      }
      if (suu == 0.0 || svv == 0.0)
        throw WeightingError(
            "pearson similarity is undefined for a constant vector");
      if (std::equal(u.begin(), u.end(), v.begin())) return 1.0;
      return std::clamp(suv / std::sqrt(suu * svv), 0.0, 1.0);
    }
  }
  throw WeightingError("unknown similarity metric");
}

WeightingContext build_context(int client_id, const Backbone& backbone,
                               const LoraAdapter& global,
                               const std::vector<Instance>& train,
                               const WeightingConfig& config) {
  validate_config(config);
  if (train.empty())
    throw WeightingError("cannot build a weighting context from an empty train set");

  WeightingContext ctx;
  ctx.client_id_ = client_id;
  ctx.config_ = config;
  ctx.backbone_ = &backbone;
  ctx.global_ = &global;
  ctx.train_ = &train;

  Rng rng(derive_seed(config.seed, "wctx", static_cast<uint64_t>(client_id)));
  ctx.cached_indices_ =
      draw_indices(rng, train.size(), static_cast<size_t>(config.sample_count));
  ctx.cached_.reserve(ctx.cached_indices_.size());
  for (size_t idx : ctx.cached_indices_)
    ctx.cached_.push_back(extract_embedding(
        backbone, &global, render_prompt(train[idx]), config.mode));

  g_contexts_built.fetch_add(1, std::memory_order_relaxed);
  return ctx;
}

double compute_alpha(const WeightingContext& ctx, const Instance& instance,
                     std::vector<double>* scores_out) {
  g_alpha_calls.fetch_add(1, std::memory_order_relaxed);
  const WeightingConfig& cfg = ctx.config();
  const std::vector<double> w_x = extract_embedding(
      *ctx.backbone_, ctx.global_, render_prompt(instance), cfg.mode);

  std::vector<std::vector<double>> fresh;
  const std::vector<std::vector<double>>* refs = &ctx.cached_;
  if (cfg.per_instance) {
    Rng rng(instance_stream(ctx, instance));
    const std::vector<size_t> indices = draw_indices(
        rng, ctx.train_->size(), static_cast<size_t>(cfg.sample_count));
    fresh.reserve(indices.size());
    for (size_t idx : indices)
      fresh.push_back(extract_embedding(*ctx.backbone_, ctx.global_,
                                        render_prompt((*ctx.train_)[idx]),
                                        cfg.mode));
    refs = &fresh;
  }

  if (scores_out) scores_out->clear();
  double total = 0.0;
  for (const std::vector<double>& w_i : *refs) {
    const double s = similarity(w_x, w_i, cfg.metric);
    total += s;
    if (scores_out) scores_out->push_back(s);
  }
  return cfg.lambda * total / static_cast<double>(refs->size());
}

WeightingCounters weighting_counters() {
  WeightingCounters c;
  c.contexts_built = g_contexts_built.load(std::memory_order_relaxed);
  c.alpha_calls = g_alpha_calls.load(std::memory_order_relaxed);
  return c;
}

void reset_weighting_counters() {
  g_contexts_built.store(0, std::memory_order_relaxed);
  g_alpha_calls.store(0, std::memory_order_relaxed);
}

}  // namespace feddpa
