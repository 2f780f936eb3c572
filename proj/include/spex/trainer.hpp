#pragma once

// Training loop: sampler -> encoder -> (nested) objective -> Adam.
// Step s draws its batch from substreams keyed by s, so a run is a pure
// function of its configuration and can be resumed at any step.

#include <chrono>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "spex/kernels.hpp"
#include "spex/nesting.hpp"
#include "spex/nn.hpp"

namespace spex {

struct TrainConfig {
  ObjectiveConfig objective;
  NestingMode nesting = NestingMode::none;
  NestingPlan plan;  // joint nesting only; empty means uniform over 1..d
  std::uint64_t steps = 1;
  std::size_t batch = 512;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::uint64_t eval_every = 100;  // loss-trace cadence
  std::string pool;                // pre-drawn pair pool; empty samples on the fly
};

struct TracePoint {
  std::uint64_t step = 0;
  double loss = 0.0;  // mean batch loss since the previous trace point
};

struct TrainResult {
  Network net;
  AdamState adam;
  std::vector<TracePoint> trace;
  std::uint64_t steps_done = 0;
  double wall_ms = 0.0;
};

/// Non-finite loss or gradient. Carries the step and the parameters from
/// before that step.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::uint64_t step, Network last_good, const std::string& why)
      : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + why),
        step_(step),
        last_good_(std::make_shared<Network>(std::move(last_good))) {}
  std::uint64_t step() const noexcept { return step_; }
  const Network& last_good() const noexcept { return *last_good_; }

 private:
  std::uint64_t step_;
  std::shared_ptr<Network> last_good_;
};

// ---------------------------------------------------------------------------
// Pair pool
// ---------------------------------------------------------------------------

inline constexpr char kPoolMagic[8] = {'S', 'P', 'E', 'X', 'P', 'O', 'O', 'L'};

/// Writes n pairs drawn with `rng`: magic, u64 n, u32 p, then n rows of a
/// followed by n rows of a+, float64 little-endian.
inline void pretrain_pool(const KernelSpec& spec, Rng& rng, std::size_t n, const std::string& path) {
  require(n >= 1, "pretrain_pool: n must be positive");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("pretrain_pool: cannot open " + path);
  const std::uint64_t count = n;
  const std::uint32_t p = static_cast<std::uint32_t>(spec.p);
  out.write(kPoolMagic, sizeof kPoolMagic);
  out.write(reinterpret_cast<const char*>(&count), sizeof count);
  out.write(reinterpret_cast<const char*>(&p), sizeof p);
  Matrix a(static_cast<Eigen::Index>(n), spec.p), ap(static_cast<Eigen::Index>(n), spec.p);
  constexpr std::size_t chunk = 100000;
  for (std::size_t done = 0; done < n; done += chunk) {
    const std::size_t m = std::min(chunk, n - done);
    const SampleBatch b = sample_pairs(spec, rng, m);
    a.middleRows(static_cast<Eigen::Index>(done), static_cast<Eigen::Index>(m)) = b.A;
    ap.middleRows(static_cast<Eigen::Index>(done), static_cast<Eigen::Index>(m)) = b.APlus;
  }
  out.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(double)));
  out.write(reinterpret_cast<const char*>(ap.data()), static_cast<std::streamsize>(ap.size() * sizeof(double)));
  if (!out) throw std::runtime_error("pretrain_pool: write failed for " + path);
}

/// In-memory pair pool served in per-epoch shuffled order.
class PairPool {
 public:
  PairPool(const std::string& path, std::uint64_t seed) : seed_(seed) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("pair pool: cannot open " + path);
    char magic[sizeof kPoolMagic];
    std::uint64_t n = 0;
    std::uint32_t p = 0;
    in.read(magic, sizeof magic);
    in.read(reinterpret_cast<char*>(&n), sizeof n);
    in.read(reinterpret_cast<char*>(&p), sizeof p);
    if (!in || std::memcmp(magic, kPoolMagic, sizeof magic) != 0) throw FormatError("pair pool: bad header in " + path);
    if (n == 0 || p == 0) throw FormatError("pair pool: empty pool in " + path);
    a_.resize(static_cast<Eigen::Index>(n), p);
    ap_.resize(static_cast<Eigen::Index>(n), p);
    in.read(reinterpret_cast<char*>(a_.data()), static_cast<std::streamsize>(a_.size() * sizeof(double)));
    in.read(reinterpret_cast<char*>(ap_.data()), static_cast<std::streamsize>(ap_.size() * sizeof(double)));
    if (!in) throw FormatError("pair pool: truncated file " + path);
  }

  std::size_t size() const { return static_cast<std::size_t>(a_.rows()); }
  int dim() const { return static_cast<int>(a_.cols()); }
  const Matrix& anchors() const { return a_; }
  const Matrix& partners() const { return ap_; }

  /// Rows [first, first + m) of the endless sequence of shuffled epochs.
  SampleBatch batch(std::uint64_t first, std::size_t m) {
    SampleBatch out{Matrix(static_cast<Eigen::Index>(m), a_.cols()), Matrix(static_cast<Eigen::Index>(m), a_.cols()), m};
    const std::uint64_t n = size();
    for (std::size_t k = 0; k < m; ++k) {
      const std::uint64_t g = first + k;
      const auto& perm = epoch(g / n);
      const auto row = static_cast<Eigen::Index>(perm[static_cast<std::size_t>(g % n)]);
      out.A.row(static_cast<Eigen::Index>(k)) = a_.row(row);
      out.APlus.row(static_cast<Eigen::Index>(k)) = ap_.row(row);
    }
    return out;
  }

 private:
  const std::vector<std::uint64_t>& epoch(std::uint64_t e) {
    if (epoch_index_ != e || perm_.empty()) {
      perm_.resize(size());
      for (std::size_t i = 0; i < perm_.size(); ++i) perm_[i] = i;
      Rng rng = Rng{seed_}.substream(StreamTag::batch_shuffle, e | (std::uint64_t{1} << 63));
      for (std::size_t i = perm_.size(); i > 1; --i) std::swap(perm_[i - 1], perm_[rng.below(i)]);
      epoch_index_ = e;
    }
    return perm_;
  }

  std::uint64_t seed_;
  Matrix a_, ap_;
  std::vector<std::uint64_t> perm_;
  std::uint64_t epoch_index_ = 0;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace detail {

inline void check_train_config(const TrainConfig& cfg, const Network& net) {
  require(cfg.steps >= 1, "train: steps must be >= 1");
  require(cfg.batch >= 2, "train: batch must be >= 2");
  require(cfg.lr > 0.0, "train: learning rate must be positive");
  if (uses_split(cfg.objective.kind)) require(cfg.batch >= 4 && cfg.batch % 2 == 0, "train: split objectives need an even batch >= 4");
  if (cfg.nesting == NestingMode::joint && !cfg.plan.dims.empty()) cfg.plan.validate(net.output_dim);
  if (cfg.nesting == NestingMode::sequential && net.heads.size() != static_cast<std::size_t>(net.output_dim))
    throw ConfigError("sequential nesting needs one head per output (model.heads)");
}

inline SplitScheme step_split(const TrainConfig& cfg, std::uint64_t step) {
  if (!uses_split(cfg.objective.kind)) return {};
  Rng rng = Rng{cfg.seed}.substream(StreamTag::batch_shuffle, step);
  return SplitScheme::shuffled(static_cast<Eigen::Index>(cfg.batch), rng);
}

}  // namespace detail

/// Batch of step `step` (on the fly or from the pool).
inline SampleBatch step_batch(const KernelSpec& spec, const TrainConfig& cfg, std::uint64_t step, PairPool* pool) {
  if (pool) return pool->batch(step * cfg.batch, cfg.batch);
  Rng rng = Rng{cfg.seed}.substream(StreamTag::kernel_sampler, step);
  return sample_pairs(spec, rng, cfg.batch);
}

/// Loss and its output gradients for one batch: a single forward pass over
/// the stacked [A; A+] rows.
struct StepEval {
  LossOutput loss;
  Tape tape;
};

inline StepEval evaluate_step(const Network& net, const TrainConfig& cfg, const SampleBatch& batch,
                              const SplitScheme& split) {
  const auto m = static_cast<Eigen::Index>(batch.A.rows());
  Matrix stacked(2 * m, batch.A.cols());
  stacked.topRows(m) = batch.A;
  stacked.bottomRows(m) = batch.APlus;
  auto [z, tape] = forward(net, stacked);
  const NestingPlan plan = cfg.plan.dims.empty() ? NestingPlan::uniform(net.output_dim) : cfg.plan;
  LossOutput loss = nested_loss(cfg.objective, cfg.nesting, plan, z.topRows(m), z.bottomRows(m), split);
  return {std::move(loss), std::move(tape)};
}

/// Runs steps [start, cfg.steps). Pass `resume` to continue an earlier run.
inline TrainResult train(const KernelSpec& spec, Network net, const TrainConfig& cfg,
                         std::optional<AdamState> resume = std::nullopt, std::uint64_t start = 0) {
  require(spec.p == net.features.p, "train: network input dimension does not match the kernel");
  detail::check_train_config(cfg, net);
  const auto t0 = std::chrono::steady_clock::now();
  std::unique_ptr<PairPool> pool;
  if (!cfg.pool.empty()) {
    pool = std::make_unique<PairPool>(cfg.pool, cfg.seed);
    require(pool->dim() == spec.p, "train: pool dimension does not match the kernel");
  }
  TrainResult res{std::move(net), resume ? std::move(*resume) : AdamState{}, {}, start, 0.0};
  if (!resume) res.adam = make_adam(res.net, cfg.lr);
  double acc = 0.0;
  std::uint64_t acc_n = 0;
  for (std::uint64_t step = start; step < cfg.steps; ++step) {
    const SampleBatch batch = step_batch(spec, cfg, step, pool.get());
    const SplitScheme split = detail::step_split(cfg, step);
    StepEval ev = evaluate_step(res.net, cfg, batch, split);
    if (!std::isfinite(ev.loss.value)) throw TrainingDiverged(step, res.net, "non-finite loss");
    const auto m = static_cast<Eigen::Index>(cfg.batch);
    Matrix grad(2 * m, res.net.output_dim);
    grad.topRows(m) = ev.loss.grad_Z;
    grad.bottomRows(m) = ev.loss.grad_ZPlus;
    const Gradients g = backward(res.net, ev.tape, grad);
    try {
      adam_step(res.net, g, res.adam);
    } catch (const NonFiniteGradient& e) {
      throw TrainingDiverged(step, res.net, e.what());
    }
    acc += ev.loss.value;
    ++acc_n;
    res.steps_done = step + 1;
    if (cfg.eval_every > 0 && (res.steps_done % cfg.eval_every == 0 || res.steps_done == cfg.steps)) {
      res.trace.push_back({res.steps_done, acc / static_cast<double>(acc_n)});
      acc = 0.0;
      acc_n = 0;
    }
  }
  res.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

/// One run of the stop-gradient sequential objective. The network must have
/// a singleton head per output.
inline TrainResult sequential_train(const KernelSpec& spec, Network net, TrainConfig cfg) {
  if (net.heads.size() != static_cast<std::size_t>(net.output_dim))
    throw ConfigError("sequential_train: network has no per-output head partition");
  cfg.nesting = NestingMode::sequential;
  return train(spec, std::move(net), cfg);
}

}  // namespace spex
