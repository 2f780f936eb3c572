// spex: train, extract and evaluate spectral encoders on synthetic kernels.
//
// Exit codes: 0 ok, 1 other failure, 2 configuration error, 3 training
// diverged, 4 Rayleigh-Ritz found a non-positive eigenvalue.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "spex/spex.hpp"

namespace fs = std::filesystem;
using namespace spex;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool fast = false;
};

RunConfig effective_config(const Common& o, const std::string& subcommand) {
  RunConfig c = load_config(o.config, subcommand);
  if (o.seed) c.seed = *o.seed;
  if (o.fast) apply_fast(c);
  return c;
}

fs::path output_dir(const Common& o, const RunConfig& c) { return o.out.empty() ? fs::path(c.out_dir) : fs::path(o.out); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_train(const Common& o, const std::string& resume) {
  const RunConfig c = effective_config(o, "train");
  const KernelSpec spec = c.kernel();
  const fs::path dir = output_dir(o, c);
  fs::create_directories(dir);
  const std::string text = to_config_text(c);
  write_text(dir / "config.cfg", text);

  Network net = initial_network(c);
  std::optional<AdamState> adam;
  std::uint64_t start = 0;
  if (!resume.empty()) {
    Checkpoint prev = load_checkpoint(resume);
    if (!prev.adam) throw std::runtime_error("checkpoint " + resume + " has no optimizer state to resume from");
    net = std::move(prev.net);
    adam = std::move(prev.adam);
    start = prev.steps_done;
  }
  TrainResult res;
  try {
    res = train(spec, std::move(net), train_config(c), std::move(adam), start);
  } catch (const TrainingDiverged& e) {
    save_checkpoint({text, e.last_good(), e.step(), std::nullopt, std::nullopt}, (dir / "last_good.spex").string());
    throw;
  }
  save_checkpoint({text, res.net, res.steps_done, res.adam, std::nullopt}, (dir / "checkpoint.spex").string());
  std::ostringstream loss;
  loss << "step,loss\n";
  for (const auto& pt : res.trace) loss << pt.step << ',' << format_double(pt.loss) << '\n';
  write_text(dir / "loss.csv", loss.str());
  std::cout << "trained " << res.steps_done << " steps in " << res.wall_ms / 1000.0 << " s; final loss "
            << (res.trace.empty() ? 0.0 : res.trace.back().loss) << "\n"
            << "wrote " << (dir / "checkpoint.spex").string() << "\n";
  return 0;
}

int cmd_rr(const std::string& path, std::optional<std::size_t> samples, std::optional<std::uint64_t> seed) {
  Checkpoint ck = load_checkpoint(path);
  RunConfig c = parse_config(ck.config);
  if (seed) c.seed = *seed;
  const std::size_t n = samples.value_or(c.rr_samples);
  Extraction ex = extract_rr(c.kernel(), ck.net, c.objective, n, c.seed);
  ck.rr = ex.transform;
  save_checkpoint(ck, path);
  std::cout << "rayleigh-ritz (" << to_string(ex.transform.mode) << ", " << n << " pairs) eigenvalues:";
  for (Eigen::Index i = 0; i < ex.lambda_hat.size(); ++i) std::cout << ' ' << format_double(ex.lambda_hat[i]);
  std::cout << "\n";
  return 0;
}

int cmd_eval(const Common& o, const std::string& path, const std::string& csv) {
  const auto t0 = std::chrono::steady_clock::now();
  const Checkpoint ck = load_checkpoint(path);
  RunConfig c = o.config.empty() ? parse_config(ck.config) : load_config(o.config, "eval");
  if (o.seed) c.seed = *o.seed;
  if (o.fast) {
    c.eval_samples = std::min<std::size_t>(c.eval_samples, 100000);
    c.rr_samples = std::min<std::size_t>(c.rr_samples, 100000);
  }
  const KernelSpec spec = c.kernel();
  if (ck.net.features.p != spec.p || ck.net.output_dim != c.model_d)
    throw ConfigError("checkpoint does not match the kernel dimension or model.d of the config");

  std::ostringstream out;
  out << kMetricsHeader << '\n';
  for (const auto& name : c.eval_extractors) {
    Extraction ex;
    if (name == "rr") {
      if (!ck.rr) {
        std::cerr << "note: checkpoint has no Rayleigh-Ritz section; run `spex rr` first to evaluate it\n";
        continue;
      }
      ex = {"rr", *ck.rr, ck.rr->eigenvalues};
    } else {
      ex = extract(c, spec, ck.net, name);
    }
    const MetricsRecord m = evaluate_extraction(c, spec, ck.net, ex);
    write_metrics_rows(out, run_info(c, name, ck.steps_done, elapsed_ms(t0)), m);
  }
  if (csv.empty()) {
    std::cout << out.str();
  } else {
    write_text(csv, out.str());
    std::cout << "wrote " << csv << "\n";
  }
  return 0;
}

int cmd_oracle(const Common& o, int nodes, int k) {
  const RunConfig c = effective_config(o, "oracle");
  const KernelSpec spec = c.kernel();
  if (k <= 0) k = spec.r;
  const OracleResult res = grid_oracle(
      [&spec](std::span<const double> a, std::span<const double> b) { return kernel_eval(spec, a, b); }, spec.p, nodes, k);
  std::cout << "index,lambda_oracle,lambda_true,abs_error\n";
  for (int i = 0; i < k; ++i) {
    const double truth = i < spec.r ? spec.eigenvalues[static_cast<std::size_t>(i)] : 0.0;
    std::cout << (i + 1) << ',' << format_double(res.eigenvalues[i]) << ',' << format_double(truth) << ','
              << format_double(std::abs(res.eigenvalues[i] - truth)) << '\n';
  }
  return 0;
}

int cmd_sample(const Common& o, std::size_t n, const std::string& path) {
  const RunConfig c = effective_config(o, "sample");
  Rng rng = Rng{c.seed}.substream(StreamTag::kernel_sampler, std::uint64_t{1} << 62);
  pretrain_pool(c.kernel(), rng, n, path);
  std::cout << "wrote " << n << " pairs to " << path << "\n";
  return 0;
}

int cmd_table1(const Common& o, std::optional<int> seeds, const std::string& aggregate) {
  std::vector<MetricsRow> rows;
  fs::path out_dir = o.out;
  if (!aggregate.empty()) {
    rows = parse_metrics_csv(read_text(aggregate));
    if (out_dir.empty()) out_dir = fs::path(aggregate).parent_path();
  } else {
    if (o.config.empty() || !fs::is_directory(o.config)) throw ConfigError("table1: --config must name a directory of .cfg files");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(o.config))
      if (e.path().extension() == ".cfg") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ConfigError("table1: no .cfg files in " + o.config);
    std::ostringstream runs;
    runs << kMetricsHeader << '\n';
    for (const auto& f : files) {
      Common cell = o;
      cell.config = f.string();
      cell.out.clear();
      RunConfig base = effective_config(cell, "table1");
      if (out_dir.empty()) out_dir = output_dir(o, base);
      const int n = seeds.value_or(base.table1_seeds);
      for (int s = 0; s < n; ++s) {
        RunConfig c = base;
        c.seed = base.seed + static_cast<std::uint64_t>(s);
        const auto t0 = std::chrono::steady_clock::now();
        const RunOutput r = run_experiment(c);
        const double ms = elapsed_ms(t0);
        std::ostringstream part;
        for (std::size_t k = 0; k < r.metrics.size(); ++k)
          write_metrics_rows(part, run_info(c, r.extractions[k].name, r.train.steps_done, ms), r.metrics[k]);
        runs << part.str();
        std::cerr << run_id(c) << ": " << ms / 1000.0 << " s";
        for (std::size_t k = 0; k < r.metrics.size(); ++k)
          std::cerr << "  " << r.extractions[k].name << " ef_mse " << r.metrics[k].mean_ef_mse << " ev_rae "
                    << r.metrics[k].mean_ev_rae;
        std::cerr << "\n";
      }
    }
    fs::create_directories(out_dir);
    write_text(out_dir / "runs.csv", runs.str());
    rows = parse_metrics_csv(runs.str());
  }
  std::ostringstream table;
  write_table1(table, aggregate_table1(rows));
  if (!out_dir.empty()) fs::create_directories(out_dir);
  write_text(out_dir / "table1.csv", table.str());
  std::cout << table.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spectral eigenfunction learning on synthetic contextual kernels"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", common.config, "config file (table1: directory of config files)");
    if (config_required) opt->required();
    sub->add_option("--out", common.out, "output directory (overrides out.dir)");
    sub->add_option("--seed", common.seed, "seed (overrides the config)");
    sub->add_flag("--fast", common.fast, "reduced budgets: 2x64 network, batch 512, 3e4 steps, 1e5 eval points");
  };

  std::string resume, checkpoint, csv, pool_out, aggregate;
  std::optional<std::size_t> rr_samples;
  std::optional<int> seeds;
  std::size_t pool_n = 10000000;
  int nodes = 1024, k = 0;

  auto* train_cmd = app.add_subcommand("train", "train an encoder; writes config.cfg, checkpoint.spex, loss.csv");
  add_common(train_cmd, true);
  train_cmd->add_option("--resume", resume, "continue from a checkpoint with optimizer state");

  auto* rr_cmd = app.add_subcommand("rr", "add a Rayleigh-Ritz transform to a checkpoint");
  rr_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  rr_cmd->add_option("--samples", rr_samples, "positive pairs to accumulate (default rr.samples)");
  rr_cmd->add_option("--seed", common.seed, "seed (overrides the snapshot)");

  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint against the analytic eigenpairs");
  add_common(eval_cmd, false);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--csv", csv, "write metrics here instead of stdout");

  auto* oracle_cmd = app.add_subcommand("oracle", "quadrature eigenvalues of the configured kernel");
  add_common(oracle_cmd, true);
  oracle_cmd->add_option("--nodes", nodes, "midpoint nodes per axis")->check(CLI::PositiveNumber);
  oracle_cmd->add_option("--k", k, "eigenpairs to report (default r)");

  auto* sample_cmd = app.add_subcommand("sample", "write a pre-drawn pair pool");
  add_common(sample_cmd, true);
  sample_cmd->add_option("--samples", pool_n, "number of pairs")->check(CLI::PositiveNumber);
  sample_cmd->add_option("--pool", pool_out, "pool file")->required();

  auto* table_cmd = app.add_subcommand("table1", "run a grid of configs over seeds and aggregate");
  add_common(table_cmd, false);
  table_cmd->add_option("--seeds", seeds, "seeds per cell (default table1.seeds)");
  table_cmd->add_option("--aggregate", aggregate, "only aggregate an existing runs.csv");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return cmd_train(common, resume);
    if (*rr_cmd) return cmd_rr(checkpoint, rr_samples, common.seed);
    if (*eval_cmd) return cmd_eval(common, checkpoint, csv);
    if (*oracle_cmd) return cmd_oracle(common, nodes, k);
    if (*sample_cmd) return cmd_sample(common, pool_n, pool_out);
    if (*table_cmd) return cmd_table1(common, seeds, aggregate);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const TrainingDiverged& e) {
    std::cerr << e.what() << "\n";
    return 3;
  } catch (const RankDeficient& e) {
    std::cerr << "rayleigh-ritz: " << e.what() << "\n";
    return 4;
  } catch (const DegenerateFeature& e) {
    std::cerr << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
