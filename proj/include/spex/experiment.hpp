#pragma once

// End-to-end run: train an encoder from a RunConfig, extract ordered
// eigenfunction estimates (nesting order or Rayleigh-Ritz) and score them.

#include <string>
#include <vector>

#include "spex/config.hpp"
#include "spex/csv.hpp"
#include "spex/eval.hpp"
#include "spex/rayleigh_ritz.hpp"
#include "spex/trainer.hpp"

namespace spex {

inline TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.objective = c.objective_config();
  t.nesting = c.nesting;
  if (c.nesting == NestingMode::joint) t.plan = nesting_plan(c);
  t.steps = c.train_steps;
  t.batch = c.train_batch;
  t.lr = c.train_lr;
  t.seed = c.seed;
  t.eval_every = c.train_eval_every;
  t.pool = c.train_pool;
  return t;
}

inline Network initial_network(const RunConfig& c) {
  return make_network(c.feature_map(), c.architecture(), Rng{c.seed});
}

struct Extraction {
  std::string name;  // "nesting" or "rr"
  RRTransform transform;
  Vector lambda_hat;
};

inline FeatureFn extracted_fn(const Network& net, const RRTransform& t) {
  return [&net, &t](const Matrix& x) { return apply(t, predict(net, x)); };
}

/// Rayleigh-Ritz over `samples` fresh positive pairs.
inline Extraction extract_rr(const KernelSpec& spec, const Network& net, Objective objective, std::size_t samples,
                             std::uint64_t seed) {
  Rng rng = Rng{seed}.substream(StreamTag::rayleigh_ritz);
  StreamState state(rr_mode_for(objective), net.output_dim);
  for (std::size_t done = 0; done < samples;) {
    const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(kEvalChunk), samples - done);
    const SampleBatch b = sample_pairs(spec, rng, m);
    stream_update(state, predict(net, b.A), predict(net, b.APlus));
    done += m;
  }
  RRTransform t = finalize(state);
  Vector lambda = t.eigenvalues;
  return {"rr", std::move(t), std::move(lambda)};
}

/// Outputs taken in their trained order, each standardized. With centering
/// the mean is removed; otherwise only the scale is fixed (the constant
/// eigenfunction may be among the outputs). Eigenvalues are the second moment
/// for the contrastive objectives and the Rayleigh quotient otherwise.
inline Extraction extract_nesting(const KernelSpec& spec, const Network& net, Objective objective, bool center,
                                  std::size_t samples, std::uint64_t seed) {
  Rng rng = Rng{seed}.substream(StreamTag::evaluation, 1);
  const Eigen::Index d = net.output_dim;
  Vector s1 = Vector::Zero(d), s2 = Vector::Zero(d), sx = Vector::Zero(d);
  for (std::size_t done = 0; done < samples;) {
    const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(kEvalChunk), samples - done);
    const SampleBatch b = sample_pairs(spec, rng, m);
    const Matrix za = predict(net, b.A), zb = predict(net, b.APlus);
    s1 += (za.colwise().sum() + zb.colwise().sum()).transpose();
    s2 += (za.cwiseAbs2().colwise().sum() + zb.cwiseAbs2().colwise().sum()).transpose();
    sx += 2.0 * za.cwiseProduct(zb).colwise().sum().transpose();
    done += m;
  }
  const double n = 2.0 * static_cast<double>(samples);
  const Vector mu = center ? Vector(s1 / n) : Vector::Zero(d);
  Vector m2(d), cross(d), lambda(d);
  RowVector scale(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    m2[i] = s2[i] / n - mu[i] * (2.0 * s1[i] / n - mu[i]);
    cross[i] = sx[i] / n - mu[i] * (2.0 * s1[i] / n - mu[i]);
    if (!(m2[i] > 1e-10)) throw DegenerateFeature("extract_nesting: output " + std::to_string(i) + " is ~constant");
    scale[i] = 1.0 / std::sqrt(m2[i]);
    const bool contrastive = objective == Objective::scl || objective == Objective::lora_svd;
    lambda[i] = contrastive ? m2[i] : cross[i] / m2[i];
  }
  RRTransform t{RRMode::rq, Matrix::Identity(d, d), lambda, std::nullopt, scale};
  if (center) t.mean = mu.transpose();
  return {"nesting", std::move(t), std::move(lambda)};
}

inline Extraction extract(const RunConfig& c, const KernelSpec& spec, const Network& net, const std::string& name) {
  if (name == "rr") return extract_rr(spec, net, c.objective, c.rr_samples, c.seed);
  if (name == "nesting") return extract_nesting(spec, net, c.objective, c.train_center, c.rr_samples, c.seed);
  throw ConfigError("unknown extractor '" + name + "'");
}

inline MetricsRecord evaluate_extraction(const RunConfig& c, const KernelSpec& spec, const Network& net,
                                         const Extraction& ex) {
  Rng rng = Rng{c.seed}.substream(StreamTag::evaluation);
  const Vector mse = ef_mse(extracted_fn(net, ex.transform), spec, c.model_d, c.eval_samples, rng, c.index_offset());
  return make_record(mse, ex.lambda_hat, true_eigenvalues(spec, c.model_d, c.index_offset()), c.eval_samples, c.seed);
}

struct RunOutput {
  TrainResult train;
  std::vector<Extraction> extractions;
  std::vector<MetricsRecord> metrics;
};

inline RunOutput run_experiment(const RunConfig& c) {
  const KernelSpec spec = c.kernel();
  RunOutput out{train(spec, initial_network(c), train_config(c)), {}, {}};
  for (const auto& name : c.eval_extractors) {
    out.extractions.push_back(extract(c, spec, out.train.net, name));
    out.metrics.push_back(evaluate_extraction(c, spec, out.train.net, out.extractions.back()));
  }
  return out;
}

inline std::string run_id(const RunConfig& c) {
  return to_string(c.objective) + "-" + to_string(c.nesting) + "-r" + std::to_string(c.kernel_r) + "-d" +
         std::to_string(c.model_d) + "-s" + std::to_string(c.seed);
}

inline RunInfo run_info(const RunConfig& c, const std::string& extractor, std::uint64_t steps, double wall_ms) {
  return {run_id(c), c.seed, to_string(c.kernel_kind), c.kernel_p, c.kernel_r, c.model_d, to_string(c.objective),
          to_string(c.nesting), extractor, steps, wall_ms};
}

}  // namespace spex
