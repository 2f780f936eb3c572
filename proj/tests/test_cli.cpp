#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "spex/spex.hpp"

using namespace spex;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = SPEX_SOURCE_DIR;
const std::string kCli = SPEX_CLI_PATH;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

struct CliRun {
  int code = -1;
  std::string out, err;
};

CliRun run_cli(const std::string& args, const fs::path& dir) {
  const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = kCli + " " + args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("spex_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

const char* kMinimal =
    "kernel.kind = legendre\n"
    "kernel.p = 1\n"
    "kernel.r = 6\n"
    "model.d = 3\n"
    "train.objective = rq\n";

}  // namespace

TEST(Config, FullProtocolShipsAndParses) {
  const RunConfig c = load_config((kSource / "configs" / "full_protocol.cfg").string());
  EXPECT_EQ(c.model_layers, 4);
  EXPECT_EQ(c.model_width, 128);
  EXPECT_EQ(c.train_batch, 1000u);
  EXPECT_EQ(c.train_steps, 300000u);
  EXPECT_EQ(c.train_lr, 1e-3);
  EXPECT_EQ(c.penalty_mu, 10.0);
  EXPECT_EQ(c.penalty_nu, 30.0);
  EXPECT_EQ(c.kernel_decay, 0.3);
  EXPECT_EQ(c.table1_seeds, 5);
  EXPECT_EQ(c.features_kind, FeatureKind::polynomial);
}

TEST(Config, EveryShippedConfigParses) {
  int count = 0;
  for (const auto& e : fs::recursive_directory_iterator(kSource / "configs")) {
    if (e.path().extension() != ".cfg") continue;
    EXPECT_NO_THROW(load_config(e.path().string())) << e.path();
    ++count;
  }
  EXPECT_GE(count, 8);
}

TEST(Config, DefaultsAndFastBudgets) {
  RunConfig c = parse_config(kMinimal);
  EXPECT_EQ(c.objective, Objective::rq);
  EXPECT_EQ(c.nesting, NestingMode::joint);
  EXPECT_EQ(c.feature_map().degree, 6);
  apply_fast(c);
  EXPECT_EQ(c.model_layers, 2);
  EXPECT_EQ(c.model_width, 64);
  EXPECT_EQ(c.train_batch, 512u);
  EXPECT_EQ(c.train_steps, 30000u);
  EXPECT_EQ(c.eval_samples, 100000u);
}

TEST(Config, UnknownKeyNamesKeyAndLine) {
  try {
    parse_config(std::string(kMinimal) + "\n# comment\nmodel.dd = 3\n");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("line 8"), std::string::npos) << what;
    EXPECT_NE(what.find("model.dd"), std::string::npos) << what;
  }
}

TEST(Config, MalformedLinesAndValues) {
  const auto line_of = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what()).substr(0, 7);
    }
    return std::string("no error");
  };
  EXPECT_EQ(line_of(std::string(kMinimal) + "train.steps 5\n"), "line 6:");
  EXPECT_EQ(line_of(std::string(kMinimal) + "train.steps = five\n"), "line 6:");
  EXPECT_EQ(line_of(std::string(kMinimal) + "train.steps = 2.5\n"), "line 6:");
  EXPECT_EQ(line_of(std::string(kMinimal) + "model.d = 3\n"), "line 6:");
  EXPECT_EQ(line_of(std::string(kMinimal) + "nesting.mode = sideways\n"), "line 6:");
  EXPECT_EQ(line_of(std::string(kMinimal) + "train.batch = 7\n"), "line 6:");
  EXPECT_EQ(line_of(std::string(kMinimal) + "nesting.dims = 1,3,2\n"), "line 6:");
  EXPECT_EQ(line_of(std::string(kMinimal) + "train.center = maybe\n"), "line 6:");
}

TEST(Config, RequiredKeysPerSubcommand) {
  EXPECT_THROW(parse_config("kernel.kind = legendre\nkernel.p = 1\nkernel.r = 6\n"), ConfigError);
  EXPECT_NO_THROW(parse_config("kernel.kind = legendre\nkernel.p = 1\nkernel.r = 6\n", "oracle"));
  EXPECT_THROW(parse_config("kernel.kind = legendre\n", "oracle"), ConfigError);
}

TEST(Config, ScientificCountsAccepted) {
  const RunConfig c = parse_config(std::string(kMinimal) + "train.steps = 3e5\neval.samples = 1e6\n");
  EXPECT_EQ(c.train_steps, 300000u);
  EXPECT_EQ(c.eval_samples, 1000000u);
}

TEST(Config, SnapshotRoundTrips) {
  RunConfig c = parse_config(std::string(kMinimal) + "nesting.dims = 1, 3\nnesting.weights = 0.25, 0.75\nseed = 9\n");
  const std::string text = to_config_text(c);
  const RunConfig back = parse_config(text);
  EXPECT_EQ(to_config_text(back), text);
  EXPECT_EQ(back.nesting_dims, (std::vector<int>{1, 3}));
  EXPECT_EQ(back.nesting_weights, (std::vector<double>{0.25, 0.75}));
  EXPECT_EQ(back.seed, 9u);
  EXPECT_EQ(back.kernel_decay, 0.3);
}

TEST(Checkpoint, RoundTripIsExact) {
  const RunConfig c = parse_config(kMinimal);
  Checkpoint ck{to_config_text(c), initial_network(c), 17, make_adam(initial_network(c), 1e-3), std::nullopt};
  ck.adam->step = 17;
  ck.adam->m[0].layers[0].W(0, 0) = 0.125;
  RRTransform t = identity_transform(3);
  t.eigenvalues << 0.5, 0.25, 0.125;
  t.mean = RowVector::Constant(3, 0.1);
  t.scale = RowVector::Constant(3, 2.0);
  ck.rr = t;

  const std::string bytes = serialize(ck);
  EXPECT_EQ(bytes.substr(0, 5), "SPEX1");
  const Checkpoint back = deserialize(bytes);
  EXPECT_EQ(serialize(back), bytes);
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.steps_done, 17u);
  EXPECT_EQ(back.net.towers[0].layers[1].W, ck.net.towers[0].layers[1].W);
  EXPECT_EQ(back.adam->m[0].layers[0].W(0, 0), 0.125);
  EXPECT_EQ(*back.rr->mean, *t.mean);
  EXPECT_EQ(back.rr->eigenvalues, t.eigenvalues);

  Rng rng{1};
  const Matrix pts = uniform_matrix(rng, 8, 1, -1.0, 1.0);
  EXPECT_EQ(predict(back.net, pts), predict(ck.net, pts));
}

TEST(Checkpoint, CorruptFilesRejected) {
  const RunConfig c = parse_config(kMinimal);
  std::string bytes = serialize({to_config_text(c), initial_network(c), 0, std::nullopt, std::nullopt});
  std::string wrong_magic = bytes;
  wrong_magic[4] = '2';
  EXPECT_THROW(deserialize(wrong_magic), FormatError);
  std::string wrong_version = bytes;
  wrong_version[5] = 9;
  try {
    deserialize(wrong_version);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  EXPECT_THROW(deserialize(bytes.substr(0, bytes.size() / 2)), FormatError);
  EXPECT_THROW(deserialize(bytes + "x"), FormatError);
}

TEST(Csv, GoldenRows) {
  Vector mse(2), lam(2), truth(2);
  mse << 0.25, 0.125;
  lam << 0.5, 0.375;
  truth << 0.5, 0.25;
  const MetricsRecord m = make_record(mse, lam, truth, 100, 3);
  std::ostringstream out;
  out << kMetricsHeader << '\n';
  write_metrics_rows(out, {"run", 3, "legendre", 1, 6, 2, "rq", "joint", "nesting", 50, 1.5}, m);
  EXPECT_EQ(out.str(),
            "run_id,seed,kernel,p,r,d,objective,nesting,extractor,index,ef_mse,ev_rae,lambda_hat,lambda_true,steps,wall_ms\n"
            "run,3,legendre,1,6,2,rq,joint,nesting,1,0.25,0,0.5,0.5,50,1.5\n"
            "run,3,legendre,1,6,2,rq,joint,nesting,2,0.125,0.5,0.375,0.25,50,1.5\n"
            "run,3,legendre,1,6,2,rq,joint,nesting,mean,0.1875,0.25,,,50,1.5\n");
}

TEST(Csv, NumbersKeepAtLeastTwelveDigits) {
  const std::string s = format_double(1.0 / 3.0);
  EXPECT_EQ(std::stod(s), 1.0 / 3.0);
  EXPECT_GE(s.size() - 2, 12u);
  EXPECT_EQ(std::stod(format_double(0.1234567890123456)), 0.1234567890123456);
}

TEST(Csv, ParseRoundTrip) {
  Vector mse(1), lam(1), truth(1);
  mse << 1.0 / 7.0;
  lam << 0.3;
  truth << 0.25;
  std::ostringstream out;
  out << kMetricsHeader << '\n';
  write_metrics_rows(out, {"a", 1, "fourier", 2, 6, 1, "scl", "none", "rr", 10, 2.0}, make_record(mse, lam, truth, 1, 1));
  const auto rows = parse_metrics_csv(out.str());
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].ef_mse, 1.0 / 7.0);
  EXPECT_EQ(rows[0].info.kernel, "fourier");
  EXPECT_EQ(rows[1].index, "mean");
  EXPECT_TRUE(std::isnan(rows[1].lambda_hat));
  EXPECT_THROW(parse_metrics_csv("wrong,header\n"), FormatError);
}

namespace {

// Three runs of one cell plus one run of another, as written by `spex table1`.
std::string three_run_fixture() {
  std::ostringstream out;
  out << kMetricsHeader << '\n';
  const double ef[3] = {0.1, 0.2, 0.4}, ev[3] = {0.05, 0.07, 0.03};
  for (int s = 0; s < 3; ++s) {
    Vector mse(1), lam(1), truth(1);
    mse << ef[s];
    truth << 1.0;
    lam << 1.0 + ev[s];
    write_metrics_rows(out, {"cell-s" + std::to_string(s), static_cast<std::uint64_t>(s), "legendre", 1, 6, 1, "scl",
                             "joint", "nesting", 100, 1.0},
                       make_record(mse, lam, truth, 1, s));
  }
  Vector one(1);
  one << 0.5;
  write_metrics_rows(out, {"other", 0, "legendre", 1, 6, 1, "rq", "none", "rr", 100, 1.0},
                     make_record(one, one, one, 1, 0));
  return out.str();
}

}  // namespace

TEST(Table1, AggregationMatchesHandComputation) {
  const auto cells = aggregate_table1(parse_metrics_csv(three_run_fixture()));
  ASSERT_EQ(cells.size(), 2u);
  const Table1Cell& scl = cells[0].objective == "scl" ? cells[0] : cells[1];
  EXPECT_EQ(scl.runs, 3u);
  // values 0.1, 0.2, 0.4: mean 7/30, squared deviations sum to 0.14/3, stderr sqrt(0.14/3 / (3 * 2)) = sqrt(7)/30
  EXPECT_NEAR(scl.ef_mse.mean, 7.0 / 30.0, 1e-12);
  EXPECT_NEAR(scl.ef_mse.stderr_, std::sqrt(7.0) / 30.0, 1e-12);
  // values 0.05, 0.07, 0.03: mean 0.05, deviations 0, 0.02, -0.02, stderr sqrt(0.0008 / 6)
  EXPECT_NEAR(scl.ev_rae.mean, 0.05, 1e-12);
  EXPECT_NEAR(scl.ev_rae.stderr_, std::sqrt(0.0008 / 6.0), 1e-12);
  const Table1Cell& rq = cells[0].objective == "rq" ? cells[0] : cells[1];
  EXPECT_EQ(rq.runs, 1u);
  EXPECT_EQ(rq.ef_mse.stderr_, 0.0);
}

TEST(Cli, Table1AggregatesExistingRuns) {
  const fs::path dir = scratch("table1");
  spit(dir / "runs.csv", three_run_fixture());
  const CliRun r = run_cli("table1 --aggregate " + (dir / "runs.csv").string() + " --out " + dir.string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string table = slurp(dir / "table1.csv");
  EXPECT_EQ(table.substr(0, table.find('\n')), kTable1Header);
  std::istringstream lines(table);
  std::string line;
  bool found = false;
  while (std::getline(lines, line)) {
    if (line.find(",scl,") == std::string::npos) continue;
    found = true;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cols.push_back(cell);
    ASSERT_EQ(cols.size(), 12u);
    EXPECT_EQ(cols[7], "3");
    EXPECT_NEAR(std::stod(cols[8]), 7.0 / 30.0, 1e-12);
    EXPECT_NEAR(std::stod(cols[9]), std::sqrt(7.0) / 30.0, 1e-12);
  }
  EXPECT_TRUE(found);
}

TEST(Cli, TrainRrEvalOnSmokeConfig) {
  const fs::path dir = scratch("smoke");
  const std::string cfg = (kSource / "configs" / "rank1_smoke.cfg").string();
  const CliRun t = run_cli("train --config " + cfg + " --out " + (dir / "a").string(), dir);
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_TRUE(fs::exists(dir / "a" / "config.cfg"));
  EXPECT_TRUE(fs::exists(dir / "a" / "loss.csv"));
  const Checkpoint ck = load_checkpoint((dir / "a" / "checkpoint.spex").string());
  EXPECT_EQ(ck.steps_done, 300u);
  EXPECT_TRUE(ck.adam.has_value());
  EXPECT_EQ(slurp(dir / "a" / "loss.csv").substr(0, 10), "step,loss\n");

  const CliRun again = run_cli("train --config " + cfg + " --out " + (dir / "b").string(), dir);
  ASSERT_EQ(again.code, 0) << again.err;
  EXPECT_TRUE(slurp(dir / "a" / "checkpoint.spex") == slurp(dir / "b" / "checkpoint.spex"));

  const std::string ckpt = (dir / "a" / "checkpoint.spex").string();
  ASSERT_EQ(run_cli("rr --checkpoint " + ckpt, dir).code, 0);
  const std::string with_rr = slurp(ckpt);
  EXPECT_TRUE(load_checkpoint(ckpt).rr.has_value());
  ASSERT_EQ(run_cli("rr --checkpoint " + ckpt, dir).code, 0);
  EXPECT_TRUE(slurp(ckpt) == with_rr);

  const CliRun e1 = run_cli("eval --checkpoint " + ckpt + " --csv " + (dir / "m1.csv").string(), dir);
  ASSERT_EQ(e1.code, 0) << e1.err;
  ASSERT_EQ(run_cli("eval --checkpoint " + ckpt + " --csv " + (dir / "m2.csv").string(), dir).code, 0);
  const auto m1 = parse_metrics_csv(slurp(dir / "m1.csv")), m2 = parse_metrics_csv(slurp(dir / "m2.csv"));
  ASSERT_EQ(m1.size(), 4u);  // nesting and rr, one index plus mean each
  for (std::size_t i = 0; i < m1.size(); ++i) {
    EXPECT_EQ(m1[i].ef_mse, m2[i].ef_mse);
    EXPECT_EQ(m1[i].ev_rae, m2[i].ev_rae);
    EXPECT_LT(m1[i].ef_mse, 0.05);
    EXPECT_LT(m1[i].ev_rae, 0.05);
  }
  EXPECT_EQ(m1[2].info.extractor, "rr");
}

TEST(Cli, ConfigErrorsExitTwo) {
  const fs::path dir = scratch("badcfg");
  spit(dir / "bad.cfg", std::string(kMinimal) + "model.dd = 3\n");
  const CliRun r = run_cli("train --config " + (dir / "bad.cfg").string() + " --out " + dir.string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("model.dd"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("line 6"), std::string::npos) << r.err;
  EXPECT_EQ(run_cli("train --config " + (dir / "missing.cfg").string(), dir).code, 2);
}

TEST(Cli, DivergenceExitsThreeWithLastGoodCheckpoint) {
  const fs::path dir = scratch("diverge");
  const std::string cfg = (kSource / "configs" / "rank1_smoke.cfg").string();
  ASSERT_EQ(run_cli("train --config " + cfg + " --out " + dir.string(), dir).code, 0);
  Checkpoint ck = load_checkpoint((dir / "checkpoint.spex").string());
  ck.net.towers[0].layers[0].b[0] = std::numeric_limits<double>::infinity();
  ck.steps_done = 100;
  save_checkpoint(ck, (dir / "poisoned.spex").string());
  const CliRun r = run_cli("train --config " + cfg + " --out " + dir.string() + " --resume " + (dir / "poisoned.spex").string(), dir);
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("step 100"), std::string::npos) << r.err;
  EXPECT_EQ(load_checkpoint((dir / "last_good.spex").string()).steps_done, 100u);
}

TEST(Cli, NonPositiveSclEigenvalueExitsFour) {
  const fs::path dir = scratch("rank");
  RunConfig c = parse_config(std::string(kMinimal) + "model.layers = 1\nmodel.width = 8\n");
  c.objective = Objective::scl;
  Network net = initial_network(c);
  auto& last = net.towers[0].layers.back();
  last.W.row(2).setZero();  // third output identically zero
  last.b[2] = 0.0;
  save_checkpoint({to_config_text(c), net, 0, std::nullopt, std::nullopt}, (dir / "ck.spex").string());
  const CliRun r = run_cli("rr --checkpoint " + (dir / "ck.spex").string() + " --samples 2000", dir);
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("2"), std::string::npos) << r.err;

  std::ofstream(dir / "eval.cfg") << kMinimal << "model.layers = 1\nmodel.width = 8\neval.extractors = nesting\n"
                                  << "eval.samples = 1000\nrr.samples = 1000\n";
  const CliRun e = run_cli("eval --checkpoint " + (dir / "ck.spex").string() + " --config " +
                               (dir / "eval.cfg").string(), dir);
  EXPECT_EQ(e.code, 4);
  EXPECT_NE(e.err.find("output 2"), std::string::npos) << e.err;
}

TEST(Cli, OracleAndSample) {
  const fs::path dir = scratch("oracle");
  const std::string cfg = (kSource / "configs" / "full_protocol.cfg").string();
  const CliRun o = run_cli("oracle --config " + cfg + " --nodes 256", dir);
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(o.out.substr(0, o.out.find('\n')), "index,lambda_oracle,lambda_true,abs_error");
  const CliRun s = run_cli("sample --config " + cfg + " --samples 1000 --pool " + (dir / "p.pool").string(), dir);
  ASSERT_EQ(s.code, 0) << s.err;
  EXPECT_EQ(PairPool((dir / "p.pool").string(), 0).size(), 1000u);
}
