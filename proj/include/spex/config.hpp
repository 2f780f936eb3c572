#pragma once

// Flat `key = value` run configuration. '#' starts a comment. Unknown keys,
// duplicates and malformed values are ConfigErrors naming the line.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spex/kernels.hpp"
#include "spex/nesting.hpp"
#include "spex/nn.hpp"

namespace spex {

struct RunConfig {
  std::uint64_t seed = 0;

  BasisKind kernel_kind = BasisKind::legendre;
  int kernel_p = 1;
  int kernel_r = 6;
  double kernel_decay = 0.3;

  int model_layers = 4;
  int model_width = 128;
  int model_d = 3;
  bool model_heads = false;  // one head per output
  bool model_strict_heads = false;

  FeatureKind features_kind = FeatureKind::polynomial;
  int features_degree = -1;  // -1: use kernel.r

  Objective objective = Objective::scl;
  std::uint64_t train_steps = 300000;
  std::size_t train_batch = 1000;
  double train_lr = 1e-3;
  bool train_center = true;
  std::string train_pool;
  std::uint64_t train_eval_every = 1000;

  NestingMode nesting = NestingMode::joint;
  std::vector<int> nesting_dims;
  std::vector<double> nesting_weights;

  double penalty_mu = 10.0;
  double penalty_nu = 30.0;
  double vicreg_lambda = 1.0;
  double vicreg_eps = 1e-4;
  bool scl_normalize = false;

  std::size_t eval_samples = 1000000;
  std::size_t rr_samples = 1000000;
  std::vector<std::string> eval_extractors = {"nesting", "rr"};
  int table1_seeds = 5;
  std::string out_dir = "runs";

  std::string source;  // normalized text of the parsed file

  KernelSpec kernel() const { return make_kernel(kernel_kind, kernel_p, kernel_r, kernel_decay); }
  FeatureMap feature_map() const { return {features_kind, kernel_p, features_degree < 0 ? kernel_r : features_degree}; }

  Architecture architecture() const {
    Architecture a{model_layers, model_width, model_d, {}, model_strict_heads};
    if (model_heads || model_strict_heads || nesting == NestingMode::sequential) a.head_partition = singleton_heads(model_d);
    return a;
  }

  int index_offset() const { return train_center ? 1 : 0; }

  ObjectiveConfig objective_config() const {
    ObjectiveConfig c;
    c.kind = objective;
    c.penalty = {penalty_mu, penalty_nu, vicreg_lambda, vicreg_eps};
    c.normalize = scl_normalize;
    c.center = train_center;
    return c;
  }
};

/// Reduced budgets for CI: 2 x 64 network, batch 512, 3e4 steps, 1e5 eval points.
inline void apply_fast(RunConfig& c) {
  c.model_layers = 2;
  c.model_width = 64;
  c.train_batch = 512;
  c.train_steps = 30000;
  c.eval_samples = 100000;
  c.rr_samples = 100000;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::stringstream ss(v);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Line {
  std::string value;
  int number;
};

[[noreturn]] inline void bad_value(const std::string& key, const Line& l, const std::string& want) {
  throw ConfigError("line " + std::to_string(l.number) + ": key '" + key + "' expects " + want + ", got '" + l.value + "'");
}

template <typename T>
T parse_number(const std::string& key, const Line& l) {
  T v{};
  const char* first = l.value.data();
  const char* last = first + l.value.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) bad_value(key, l, "a number");
  return v;
}

/// Integers also accept scientific notation with an integral value (3e5).
template <typename T>
T parse_count(const std::string& key, const Line& l) {
  const double v = parse_number<double>(key, l);
  if (v < 0 || v != std::floor(v) || v > 9.0e15) bad_value(key, l, "a non-negative integer");
  return static_cast<T>(v);
}

inline bool parse_bool(const std::string& key, const Line& l) {
  if (l.value == "true" || l.value == "1" || l.value == "on") return true;
  if (l.value == "false" || l.value == "0" || l.value == "off") return false;
  bad_value(key, l, "true or false");
}

}  // namespace detail

/// Keys a subcommand cannot run without.
inline std::vector<std::string> required_keys(const std::string& subcommand) {
  if (subcommand == "oracle" || subcommand == "sample") return {"kernel.kind", "kernel.p", "kernel.r"};
  return {"kernel.kind", "kernel.p", "kernel.r", "model.d", "train.objective"};
}

inline RunConfig parse_config(const std::string& text, const std::string& subcommand = "train") {
  using namespace detail;
  std::map<std::string, Line> kv;
  std::istringstream in(text);
  std::string raw;
  int number = 0;
  while (std::getline(in, raw)) {
    ++number;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(number) + ": expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(number) + ": missing key");
    if (kv.count(key)) throw ConfigError("line " + std::to_string(number) + ": duplicate key '" + key + "'");
    kv[key] = {value, number};
  }

  RunConfig c;
  std::ostringstream norm;
  for (const auto& [key, l] : kv) {
    norm << key << " = " << l.value << "\n";
    try {
      if (key == "seed") c.seed = parse_count<std::uint64_t>(key, l);
      else if (key == "kernel.kind") c.kernel_kind = basis_kind_from_string(l.value);
      else if (key == "kernel.p") c.kernel_p = parse_count<int>(key, l);
      else if (key == "kernel.r") c.kernel_r = parse_count<int>(key, l);
      else if (key == "kernel.decay") c.kernel_decay = parse_number<double>(key, l);
      else if (key == "model.layers") c.model_layers = parse_count<int>(key, l);
      else if (key == "model.width") c.model_width = parse_count<int>(key, l);
      else if (key == "model.d") c.model_d = parse_count<int>(key, l);
      else if (key == "model.heads") {
        if (l.value == "singleton") c.model_heads = true;
        else if (l.value == "none") c.model_heads = false;
        else bad_value(key, l, "none or singleton");
      } else if (key == "model.strict_heads") c.model_strict_heads = parse_bool(key, l);
      else if (key == "features.kind") c.features_kind = feature_kind_from_string(l.value);
      else if (key == "features.degree") c.features_degree = parse_count<int>(key, l);
      else if (key == "train.objective") c.objective = objective_from_string(l.value);
      else if (key == "train.steps") c.train_steps = parse_count<std::uint64_t>(key, l);
      else if (key == "train.batch") c.train_batch = parse_count<std::size_t>(key, l);
      else if (key == "train.lr") c.train_lr = parse_number<double>(key, l);
      else if (key == "train.center") c.train_center = parse_bool(key, l);
      else if (key == "train.pool") c.train_pool = l.value;
      else if (key == "train.eval_every") c.train_eval_every = parse_count<std::uint64_t>(key, l);
      else if (key == "nesting.mode") c.nesting = nesting_mode_from_string(l.value);
      else if (key == "nesting.dims") {
        c.nesting_dims.clear();
        for (const auto& s : split_list(l.value)) c.nesting_dims.push_back(parse_count<int>(key, {s, l.number}));
      } else if (key == "nesting.weights") {
        c.nesting_weights.clear();
        for (const auto& s : split_list(l.value)) c.nesting_weights.push_back(parse_number<double>(key, {s, l.number}));
      } else if (key == "penalty.mu") c.penalty_mu = parse_number<double>(key, l);
      else if (key == "penalty.nu") c.penalty_nu = parse_number<double>(key, l);
      else if (key == "vicreg.lambda") c.vicreg_lambda = parse_number<double>(key, l);
      else if (key == "vicreg.eps") c.vicreg_eps = parse_number<double>(key, l);
      else if (key == "scl.normalize") c.scl_normalize = parse_bool(key, l);
      else if (key == "eval.samples") c.eval_samples = parse_count<std::size_t>(key, l);
      else if (key == "eval.extractors") {
        c.eval_extractors = split_list(l.value);
        for (const auto& e : c.eval_extractors)
          if (e != "nesting" && e != "rr") bad_value(key, l, "a list of nesting, rr");
      } else if (key == "rr.samples") c.rr_samples = parse_count<std::size_t>(key, l);
      else if (key == "table1.seeds") c.table1_seeds = parse_count<int>(key, l);
      else if (key == "out.dir") c.out_dir = l.value;
      else throw ConfigError("line " + std::to_string(l.number) + ": unknown key '" + key + "'");
    } catch (const ConfigError& e) {
      const std::string what = e.what();
      if (what.rfind("line ", 0) == 0) throw;
      throw ConfigError("line " + std::to_string(l.number) + ": key '" + key + "': " + what);
    }
  }
  for (const auto& k : required_keys(subcommand))
    if (!kv.count(k)) throw ConfigError("missing required key '" + k + "'");

  auto fail = [&](const std::string& key, const std::string& msg) {
    const auto it = kv.find(key);
    throw ConfigError((it != kv.end() ? "line " + std::to_string(it->second.number) + ": " : std::string()) + "key '" +
                      key + "' " + msg);
  };
  if (c.kernel_p < 1) fail("kernel.p", "must be >= 1");
  if (c.kernel_r < 1) fail("kernel.r", "must be >= 1");
  if (!(c.kernel_decay > 0)) fail("kernel.decay", "must be positive");
  if (c.model_d < 1) fail("model.d", "must be >= 1");
  if (c.model_d + c.index_offset() > c.kernel_r) fail("model.d", "exceeds the number of target eigenpairs");
  if (c.model_width < 1) fail("model.width", "must be >= 1");
  if (c.train_steps < 1) fail("train.steps", "must be >= 1");
  if (!(c.train_lr > 0)) fail("train.lr", "must be positive");
  if (!(c.penalty_mu > 0)) fail("penalty.mu", "must be positive");
  if (!(c.penalty_nu > 0)) fail("penalty.nu", "must be positive");
  if (uses_split(c.objective) && (c.train_batch < 4 || c.train_batch % 2)) fail("train.batch", "must be even and >= 4");
  if (c.train_batch < 2) fail("train.batch", "must be >= 2");
  if (c.table1_seeds < 1) fail("table1.seeds", "must be >= 1");
  if (!c.nesting_weights.empty() && c.nesting_weights.size() != c.nesting_dims.size())
    fail("nesting.weights", "needs one weight per entry of nesting.dims");
  if (!c.nesting_dims.empty()) {
    NestingPlan plan{c.nesting_dims, c.nesting_weights};
    if (plan.weights.empty()) plan.weights.assign(plan.dims.size(), 1.0 / static_cast<double>(plan.dims.size()));
    try {
      plan.validate(c.model_d);
    } catch (const ContractViolation& e) {
      fail("nesting.dims", e.what());
    }
  }
  c.source = norm.str();
  return c;
}

inline RunConfig load_config(const std::string& path, const std::string& subcommand = "train") {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), subcommand);
}

/// Nesting plan implied by the config (uniform over 1..d by default).
inline NestingPlan nesting_plan(const RunConfig& c) {
  if (c.nesting_dims.empty()) return NestingPlan::uniform(c.model_d);
  NestingPlan plan{c.nesting_dims, c.nesting_weights};
  if (plan.weights.empty()) plan.weights.assign(plan.dims.size(), 1.0 / static_cast<double>(plan.dims.size()));
  return plan;
}

namespace detail {

/// Shortest text that reads back to the same double.
inline std::string shortest(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string shortest(int v) { return std::to_string(v); }
inline std::string shortest(const std::string& v) { return v; }

}  // namespace detail

/// Text form that parse_config maps back to `c` (used as the checkpoint snapshot).
inline std::string to_config_text(const RunConfig& c) {
  using detail::shortest;
  std::ostringstream o;
  auto join = [](const auto& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + shortest(v[i]);
    return s;
  };
  o << "seed = " << c.seed << "\n"
    << "kernel.kind = " << to_string(c.kernel_kind) << "\n"
    << "kernel.p = " << c.kernel_p << "\n"
    << "kernel.r = " << c.kernel_r << "\n"
    << "kernel.decay = " << shortest(c.kernel_decay) << "\n"
    << "model.layers = " << c.model_layers << "\n"
    << "model.width = " << c.model_width << "\n"
    << "model.d = " << c.model_d << "\n"
    << "model.heads = " << (c.model_heads ? "singleton" : "none") << "\n"
    << "model.strict_heads = " << (c.model_strict_heads ? "true" : "false") << "\n"
    << "features.kind = " << to_string(c.features_kind) << "\n";
  if (c.features_degree >= 0) o << "features.degree = " << c.features_degree << "\n";
  o << "train.objective = " << to_string(c.objective) << "\n"
    << "train.steps = " << c.train_steps << "\n"
    << "train.batch = " << c.train_batch << "\n"
    << "train.lr = " << shortest(c.train_lr) << "\n"
    << "train.center = " << (c.train_center ? "true" : "false") << "\n";
  if (!c.train_pool.empty()) o << "train.pool = " << c.train_pool << "\n";
  o << "train.eval_every = " << c.train_eval_every << "\n"
    << "nesting.mode = " << to_string(c.nesting) << "\n";
  if (!c.nesting_dims.empty()) o << "nesting.dims = " << join(c.nesting_dims) << "\n";
  if (!c.nesting_weights.empty()) o << "nesting.weights = " << join(c.nesting_weights) << "\n";
  o << "penalty.mu = " << shortest(c.penalty_mu) << "\n"
    << "penalty.nu = " << shortest(c.penalty_nu) << "\n"
    << "vicreg.lambda = " << shortest(c.vicreg_lambda) << "\n"
    << "vicreg.eps = " << shortest(c.vicreg_eps) << "\n"
    << "scl.normalize = " << (c.scl_normalize ? "true" : "false") << "\n"
    << "eval.samples = " << c.eval_samples << "\n"
    << "eval.extractors = " << join(c.eval_extractors) << "\n"
    << "rr.samples = " << c.rr_samples << "\n"
    << "table1.seeds = " << c.table1_seeds << "\n"
    << "out.dir = " << c.out_dir << "\n";
  return o.str();
}

}  // namespace spex
