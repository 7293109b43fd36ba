#pragma once

// Experiment configuration and the end-to-end pipeline: economy generation,
// random-policy baseline, GAPNet and projection-method training,
// evaluation, metric CSVs, SVG charts and a manifest.

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "mpg/economy.hpp"
#include "mpg/metrics.hpp"
#include "mpg/policies.hpp"
#include "mpg/solver.hpp"

#ifndef MPG_BUILD_ID
#define MPG_BUILD_ID "unknown"
#endif

namespace mpg {

inline constexpr int kConfigSchemaVersion = 1;

struct ConfigError : SpecError {
  using SpecError::SpecError;
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::optional<std::uint64_t> seed;
  std::string preset = "desk";
  std::string method = "both";  // gapnet | npm | both
  EconomyConfig economy;
  ExchangeSchemeConfig policy;
  TtsgdaConfig gapnet;
  // Cheaper ascent for training checkpoints (best-iterate selection).
  std::size_t check_ascent_steps = 200;
  double check_ascent_lr = 1e-2;
  NpmConfig npm;
  MetricsConfig eval;
  std::size_t baseline_policies = 50;
  std::vector<double> grid;  // learning-rate candidates for train --grid
  std::size_t grid_iters = 1000;

  [[nodiscard]] bool wants(const std::string& m) const { return method == "both" || method == m; }
  [[nodiscard]] std::uint64_t require_seed() const {
    if (!seed) throw ConfigError("seed: a seed is mandatory");
    return *seed;
  }
  [[nodiscard]] std::string economy_id() const {
    return to_string(economy.utility.kind) + "-" +
           (economy.transition == EconomyTransition::deterministic ? "det" : "stoch") + "-s" +
           std::to_string(require_seed());
  }
};

// ---------------------------------------------------------------------------
// Key-value text format: `key = value` lines, `#` comments, dotted keys.

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& v) {
  if (v == "inf") return std::numeric_limits<double>::infinity();
  char* end = nullptr;
  errno = 0;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || errno == ERANGE) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return d;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const unsigned long long u = std::strtoull(v.c_str(), &end, 10);
  if (v.empty() || v[0] == '-' || *end != '\0' || errno == ERANGE) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return u;
}

inline std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(parse_u64(key, tok));
  }
  return out;
}

inline std::vector<double> parse_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(parse_double(key, tok));
  }
  return out;
}

template <class V>
std::string join(const std::vector<V>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<V>) {
      out += fmt_double(xs[i]);
    } else {
      out += std::to_string(xs[i]);
    }
  }
  return out;
}

struct Field {
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

inline std::vector<Field> fields(ExperimentConfig& c) {
  std::vector<Field> f;
  auto num = [&](const std::string& key, double& x) {
    f.push_back({key, [&x, key](const std::string& v) { x = parse_double(key, v); },
                 [&x] { return fmt_double(x); }});
  };
  auto size = [&](const std::string& key, std::size_t& x) {
    f.push_back({key, [&x, key](const std::string& v) { x = parse_u64(key, v); },
                 [&x] { return std::to_string(x); }});
  };
  auto sizes = [&](const std::string& key, std::vector<std::size_t>& x) {
    f.push_back({key, [&x, key](const std::string& v) { x = parse_sizes(key, v); }, [&x] { return join(x); }});
  };
  auto rule = [&](const std::string& key, UpdateRule& x) {
    f.push_back({key,
                 [&x, key](const std::string& v) {
                   try {
                     x = update_rule_from_string(v);
                   } catch (const SpecError& e) {
                     throw ConfigError(key + ": " + e.what());
                   }
                 },
                 [&x] { return to_string(x); }});
  };
  auto mode = [&](const std::string& key, DiscountMode& x) {
    f.push_back({key,
                 [&x, key](const std::string& v) {
                   try {
                     x = discount_mode_from_string(v);
                   } catch (const SpecError& e) {
                     throw ConfigError(key + ": " + e.what());
                   }
                 },
                 [&x] { return to_string(x); }});
  };
  auto flag = [&](const std::string& key, bool& x) {
    f.push_back({key,
                 [&x, key](const std::string& v) {
                   if (v == "true") {
                     x = true;
                   } else if (v == "false") {
                     x = false;
                   } else {
                     throw ConfigError(key + ": expected true or false, got '" + v + "'");
                   }
                 },
                 [&x] { return std::string(x ? "true" : "false"); }});
  };

  f.push_back({"schema_version",
               [&c](const std::string& v) {
                 const auto s = parse_u64("schema_version", v);
                 if (s != static_cast<std::uint64_t>(kConfigSchemaVersion)) {
                   throw ConfigError("schema_version: unsupported version " + v + " (expected " +
                                     std::to_string(kConfigSchemaVersion) + ")");
                 }
                 c.schema_version = static_cast<int>(s);
               },
               [&c] { return std::to_string(c.schema_version); }});
  f.push_back({"seed", [&c](const std::string& v) { c.seed = parse_u64("seed", v); },
               [&c] { return c.seed ? std::to_string(*c.seed) : std::string(); }});
  f.push_back({"preset",
               [&c](const std::string& v) {
                 if (v != "desk" && v != "paper-det" && v != "paper-stoch") {
                   throw ConfigError("preset: unknown preset '" + v + "'");
                 }
                 c.preset = v;
               },
               [&c] { return c.preset; }});
  f.push_back({"method",
               [&c](const std::string& v) {
                 if (v != "gapnet" && v != "npm" && v != "both") {
                   throw ConfigError("method: expected gapnet, npm or both, got '" + v + "'");
                 }
                 c.method = v;
               },
               [&c] { return c.method; }});

  size("economy.consumers", c.economy.n);
  size("economy.commodities", c.economy.m);
  size("economy.assets", c.economy.k);
  size("economy.world_states", c.economy.num_world_states);
  f.push_back({"economy.utility",
               [&c](const std::string& v) {
                 try {
                   c.economy.utility.kind = utility_kind_from_string(v);
                 } catch (const SpecError& e) {
                   throw ConfigError(std::string("economy.utility: ") + e.what());
                 }
               },
               [&c] { return to_string(c.economy.utility.kind); }});
  num("economy.leontief_eps", c.economy.utility.leontief_eps);
  f.push_back({"economy.transition",
               [&c](const std::string& v) {
                 if (v == "deterministic") {
                   c.economy.transition = EconomyTransition::deterministic;
                 } else if (v == "stochastic") {
                   c.economy.transition = EconomyTransition::stochastic;
                 } else {
                   throw ConfigError("economy.transition: expected deterministic or stochastic, got '" + v + "'");
                 }
               },
               [&c] {
                 return std::string(c.economy.transition == EconomyTransition::deterministic ? "deterministic"
                                                                                              : "stochastic");
               }});
  num("economy.gamma", c.economy.gamma);
  size("economy.horizon", c.economy.horizon);
  num("economy.return_lo", c.economy.return_lo);
  num("economy.return_hi", c.economy.return_hi);

  sizes("policy.hidden", c.policy.hidden);
  sizes("policy.adversary_hidden", c.policy.adversary_hidden);
  f.push_back({"policy.activation",
               [&c](const std::string& v) {
                 try {
                   c.policy.activation = activation_from_string(v);
                 } catch (const SpecError& e) {
                   throw ConfigError(std::string("policy.activation: ") + e.what());
                 }
               },
               [&c] { return to_string(c.policy.activation); }});
  num("policy.kappa", c.policy.kappa);
  num("policy.supply_logit_offset", c.policy.supply_logit_offset);

  num("gapnet.lr_theta", c.gapnet.lr_theta);
  num("gapnet.lr_phi", c.gapnet.lr_phi);
  rule("gapnet.rule", c.gapnet.rule);
  size("gapnet.iters", c.gapnet.iters);
  size("gapnet.batch", c.gapnet.batch);
  mode("gapnet.discount_mode", c.gapnet.mode);
  size("gapnet.eval_every", c.gapnet.eval_every);
  flag("gapnet.warm_start", c.gapnet.warm_start);
  size("gapnet.check_ascent_steps", c.check_ascent_steps);
  num("gapnet.check_ascent_lr", c.check_ascent_lr);
  num("gapnet.divergence_threshold", c.gapnet.divergence_threshold);

  num("npm.lr", c.npm.lr);
  rule("npm.rule", c.npm.rule);
  size("npm.iters", c.npm.iters);
  size("npm.states_per_iter", c.npm.states_per_iter);
  size("npm.shocks_per_state", c.npm.shocks_per_state);
  sizes("npm.value_hidden", c.npm.value_hidden);
  num("npm.bellman_weight", c.npm.bellman_weight);
  num("npm.train_active_tol", c.npm.train_active_tol);
  num("npm.complementarity_weight", c.npm.complementarity_weight);
  size("npm.lr_decay_every", c.npm.lr_decay_every);
  num("npm.lr_decay", c.npm.lr_decay);

  size("eval.ascent_steps", c.eval.ascent.steps);
  num("eval.ascent_lr", c.eval.ascent.lr);
  rule("eval.ascent_rule", c.eval.ascent.rule);
  size("eval.ascent_batch", c.eval.ascent.batch);
  size("eval.eval_trajectories", c.eval.ascent.eval_trajectories);
  size("eval.check_every", c.eval.ascent.check_every);
  size("eval.states", c.eval.n_states);
  size("eval.shocks_per_state", c.eval.shocks_per_state);
  num("eval.active_tol", c.eval.kkt.active_tol);
  size("eval.value_fit_trajectories", c.eval.value_fit.n_trajectories);
  size("eval.path_trajectories", c.eval.path_trajectories);
  size("eval.threads", c.eval.ascent.threads);

  size("baseline.policies", c.baseline_policies);
  f.push_back({"grid.lr", [&c](const std::string& v) { c.grid = parse_doubles("grid.lr", v); },
               [&c] { return join(c.grid); }});
  size("grid.iters", c.grid_iters);
  return f;
}

}  // namespace detail

/// Parsed `key = value` pairs in file order, with line numbers for errors.
struct KeyValues {
  std::vector<std::pair<std::string, std::string>> entries;
  [[nodiscard]] std::optional<std::string> find(const std::string& key) const {
    std::optional<std::string> out;
    for (const auto& [k, v] : entries) {
      if (k == key) out = v;
    }
    return out;
  }
};

inline KeyValues parse_key_values(std::istream& in, const std::string& source = "config") {
  KeyValues kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    kv.entries.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return kv;
}

/// Presets. The 10 x 10 presets carry per-utility learning rates, so they
/// depend on the utility family already chosen.
inline void apply_preset(ExperimentConfig& c, const std::string& name) {
  const UtilityKind u = c.economy.utility.kind;
  const EconomyTransition tr = c.economy.transition;
  c.preset = name;
  if (name == "desk") {
    c.economy = EconomyConfig{};
    c.economy.utility.kind = u;
    c.economy.transition = tr;
    // Linear rewards have gradients an order of magnitude larger than the
    // other families; Adam tames them, plain SGD is steadier elsewhere.
    c.gapnet = TtsgdaConfig{};
    c.gapnet.lr_theta = u == UtilityKind::linear ? 1e-3 : 1e-1;
    c.gapnet.rule = u == UtilityKind::linear ? UpdateRule::adam : UpdateRule::sgd;
    c.gapnet.iters = 2000;
    c.gapnet.batch = 8;
    c.gapnet.eval_every = 200;
    c.npm = NpmConfig{};
    c.npm.lr = 1e-3;
    c.npm.rule = UpdateRule::adam;
    c.npm.iters = 2000;
    c.npm.states_per_iter = 16;
    c.check_ascent_steps = 200;
    c.check_ascent_lr = 1e-2;
    c.eval = MetricsConfig{};
    c.eval.ascent.steps = 1000;
    c.eval.ascent.lr = 1e-2;
    c.eval.ascent.rule = UpdateRule::adam;
    c.baseline_policies = 50;
    c.grid = {1e-3, 1e-2, 1e-1};
    c.grid_iters = 1000;
    return;
  }
  if (name != "paper-det" && name != "paper-stoch") throw ConfigError("preset: unknown preset '" + name + "'");
  const bool det = name == "paper-det";
  c.economy = EconomyConfig{};
  c.economy.n = 10;
  c.economy.m = 10;
  c.economy.k = 1;
  c.economy.num_world_states = 5;
  c.economy.horizon = 30;
  c.economy.utility.kind = u;
  c.economy.transition = det ? EconomyTransition::deterministic : EconomyTransition::stochastic;
  // {gapnet theta, gapnet phi, npm, ascent} per utility.
  struct Rates {
    double gt, gp, npm, ascent;
  };
  Rates r{};
  switch (u) {
    case UtilityKind::linear: r = det ? Rates{1e-5, 1e-5, 1e-4, 5e-5} : Rates{1e-5, 1e-5, 5e-5, 7.5e-4}; break;
    case UtilityKind::cobb_douglas:
      r = det ? Rates{1e-5, 1e-5, 2.5e-5, 1e-4} : Rates{2.5e-5, 2.5e-5, 2.5e-5, 1e-4};
      break;
    case UtilityKind::leontief: r = det ? Rates{1e-5, 1e-5, 1e-4, 1e-4} : Rates{5e-5, 5e-5, 5e-4, 1e-4}; break;
  }
  c.gapnet = TtsgdaConfig{};
  c.gapnet.lr_theta = r.gt;
  c.gapnet.lr_phi = r.gp;
  c.gapnet.rule = UpdateRule::sgd;
  c.gapnet.iters = 2000;
  c.gapnet.batch = 100;
  c.gapnet.eval_every = 200;
  c.npm = NpmConfig{};
  c.npm.lr = r.npm;
  c.npm.rule = UpdateRule::sgd;
  c.npm.iters = 2000;
  c.npm.states_per_iter = 10;
  c.check_ascent_steps = 200;
  c.check_ascent_lr = r.ascent;
  c.eval = MetricsConfig{};
  c.eval.ascent.steps = 1000;
  c.eval.ascent.lr = r.ascent;
  c.eval.ascent.rule = UpdateRule::sgd;
  c.eval.ascent.horizon = 30;
  c.eval.value_fit.horizon = 30;
  c.baseline_policies = 50;
  c.grid = {1e-5, 2.5e-5, 5e-5, 1e-4, 5e-4};
  c.grid_iters = 1000;
}

/// Keys derived from others; kept consistent after every change.
inline void sync_derived(ExperimentConfig& c) {
  c.gapnet.horizon = c.economy.horizon;
  c.eval.ascent.horizon = c.economy.horizon;
  c.eval.ascent.mode = c.gapnet.mode;
  c.eval.value_fit.horizon = c.economy.horizon;
  c.eval.value_fit.mode = c.gapnet.mode;
  c.gapnet.eval = c.eval.ascent;
  c.gapnet.eval.steps = c.check_ascent_steps;
  c.gapnet.eval.lr = c.check_ascent_lr;
  c.gapnet.eval.check_every = std::min(c.gapnet.eval.check_every, c.check_ascent_steps);
  c.gapnet.threads = c.eval.ascent.threads;
  const bool bootstrap = c.economy.horizon > 1;
  c.npm.kkt.bootstrap = bootstrap;
  c.eval.kkt.bootstrap = bootstrap;
  c.npm.kkt.active_tol = c.eval.kkt.active_tol;
}

inline void validate(const ExperimentConfig& c) {
  (void)c.require_seed();
  auto positive = [](const std::string& key, double v) {
    if (!(v > 0.0)) throw ConfigError(key + ": must be positive");
  };
  auto at_least_one = [](const std::string& key, std::size_t v) {
    if (v < 1) throw ConfigError(key + ": must be at least 1");
  };
  at_least_one("economy.consumers", c.economy.n);
  at_least_one("economy.commodities", c.economy.m);
  at_least_one("economy.world_states", c.economy.num_world_states);
  at_least_one("economy.horizon", c.economy.horizon);
  if (!(c.economy.gamma > 0.0 && c.economy.gamma < 1.0)) throw ConfigError("economy.gamma: must be in (0, 1)");
  positive("gapnet.lr_theta", c.gapnet.lr_theta);
  if (c.gapnet.lr_phi < 0.0) throw ConfigError("gapnet.lr_phi: must be positive (0 selects 10 x lr_theta)");
  at_least_one("gapnet.iters", c.gapnet.iters);
  at_least_one("gapnet.batch", c.gapnet.batch);
  at_least_one("gapnet.eval_every", c.gapnet.eval_every);
  positive("npm.lr", c.npm.lr);
  at_least_one("npm.iters", c.npm.iters);
  at_least_one("npm.states_per_iter", c.npm.states_per_iter);
  if (!(c.npm.lr_decay > 0.0 && c.npm.lr_decay <= 1.0)) throw ConfigError("npm.lr_decay: must be in (0, 1]");
  at_least_one("eval.ascent_steps", c.eval.ascent.steps);
  positive("eval.ascent_lr", c.eval.ascent.lr);
  at_least_one("eval.states", c.eval.n_states);
  positive("eval.active_tol", c.eval.kkt.active_tol);
  at_least_one("baseline.policies", c.baseline_policies);
  for (double lr : c.grid) positive("grid.lr", lr);
}

/// Defaults, then the preset, then the given entries in order. Unknown keys
/// and malformed values are errors naming the key.
inline ExperimentConfig resolve_config(const KeyValues& kv) {
  ExperimentConfig c;
  if (auto u = kv.find("economy.utility")) {
    try {
      c.economy.utility.kind = utility_kind_from_string(*u);
    } catch (const SpecError& e) {
      throw ConfigError(std::string("economy.utility: ") + e.what());
    }
  }
  if (auto t = kv.find("economy.transition")) {
    c.economy.transition = *t == "stochastic" ? EconomyTransition::stochastic : EconomyTransition::deterministic;
  }
  apply_preset(c, kv.find("preset").value_or("desk"));
  auto table = detail::fields(c);
  for (const auto& [key, value] : kv.entries) {
    auto it = std::find_if(table.begin(), table.end(), [&](const detail::Field& f) { return f.key == key; });
    if (it == table.end()) throw ConfigError(key + ": unknown key");
    it->set(value);
  }
  sync_derived(c);
  return c;
}

inline ExperimentConfig load_config(const std::string& path, KeyValues overrides = {}) {
  KeyValues kv;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    kv = parse_key_values(in, path);
  }
  kv.entries.insert(kv.entries.end(), overrides.entries.begin(), overrides.entries.end());
  return resolve_config(kv);
}

/// Canonical text form; parsing it back yields the same configuration.
inline std::string to_config_text(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  std::string out;
  for (const auto& f : detail::fields(c)) {
    const std::string v = f.get();
    if (f.key == "seed" && v.empty()) continue;
    out += f.key + " = " + v + "\n";
  }
  return out;
}

inline std::map<std::string, std::string> to_config_map(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  std::map<std::string, std::string> out;
  for (const auto& f : detail::fields(c)) out[f.key] = f.get();
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline pieces.

inline constexpr std::uint64_t kEconomyStream = 0xEC0;
inline constexpr std::uint64_t kBaselineStream = 0xBA5E;
inline constexpr std::uint64_t kMetricsStream = 0x3E7;
inline constexpr std::uint64_t kGapnetStream = 0x6A9;
inline constexpr std::uint64_t kNpmStream = 0x4E9;

inline MarkovExchangeEconomy make_economy(const ExperimentConfig& cfg) {
  const std::uint64_t seed = cfg.require_seed();
  Rng rng(stream_seed(seed, kEconomyStream));
  return sample_random_economy(cfg.economy, rng, seed);
}

/// Uniform[-1, 1] policy parameters for baseline draw k.
template <ParameterizationScheme S>
std::vector<double> random_policy_theta(const S& sc, std::uint64_t seed, std::size_t k) {
  Rng rng(stream_seed(seed, kBaselineStream, k));
  return uniform_vector(rng, sc.theta_size(), -1.0, 1.0);
}

/// Metrics of policy theta with the run's common evaluation seed.
template <ParameterizationScheme S>
MetricsRecord evaluate_run_policy(const S& sc, const ExperimentConfig& cfg, std::span<const double> theta,
                                  const ValueNet* vn = nullptr, std::span<const double> psi = {}) {
  return evaluate_policy(sc, theta, vn, psi, cfg.eval, stream_seed(cfg.require_seed(), kMetricsStream));
}

template <ParameterizationScheme S>
std::vector<MetricsRecord> random_baseline(const S& sc, const ExperimentConfig& cfg) {
  std::vector<MetricsRecord> out;
  for (std::size_t k = 0; k < cfg.baseline_policies; ++k) {
    const auto theta = random_policy_theta(sc, cfg.require_seed(), k);
    out.push_back(evaluate_run_policy(sc, cfg, theta));
  }
  return out;
}

/// Metric rows from a metric CSV.
inline std::vector<MetricRow> read_metric_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  std::getline(in, line);
  if (detail::trim(line) != "run_id,method,economy_id,metric,raw,normalized,std_err") {
    throw std::runtime_error(path + ": not a metric CSV");
  }
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    std::stringstream ss(line);
    std::vector<std::string> cols;
    std::string tok;
    while (std::getline(ss, tok, ',')) cols.push_back(tok);
    if (cols.size() != 7) throw std::runtime_error(path + ": malformed row '" + line + "'");
    MetricRow r{cols[0], cols[1], cols[2], cols[3], 0.0, 0.0, 0.0};
    r.raw = detail::parse_double("raw", cols[4]);
    r.normalized = detail::parse_double("normalized", cols[5]);
    r.std_err = detail::parse_double("std_err", cols[6]);
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Baseline records rebuilt from method=random rows.
inline std::vector<MetricsRecord> baseline_from_rows(std::span<const MetricRow> rows) {
  std::map<std::string, MetricsRecord> by_run;
  std::vector<std::string> order;
  for (const auto& r : rows) {
    if (r.method != "random") continue;
    if (!by_run.count(r.run_id)) order.push_back(r.run_id);
    auto& rec = by_run[r.run_id];
    if (r.metric == "fov") rec.fov = r.raw;
    if (r.metric == "bellman") rec.bellman = r.raw;
    if (r.metric == "exploitability") {
      rec.exploitability = r.raw;
      rec.exploitability_se = r.std_err;
    }
  }
  std::vector<MetricsRecord> out;
  for (const auto& id : order) out.push_back(by_run[id]);
  return out;
}

inline std::vector<MetricRow> baseline_rows(const ExperimentConfig& cfg, std::span<const MetricsRecord> base) {
  std::vector<MetricRow> rows;
  for (std::size_t k = 0; k < base.size(); ++k) {
    const auto norm = normalized_metrics(base[k], base);
    const auto r = metric_rows("random-" + std::to_string(k), "random", cfg.economy_id(), base[k], norm);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return rows;
}

// ---------------------------------------------------------------------------
// SVG bar charts. Bars live in a data-unit coordinate system, so each
// rect's height attribute is the plotted value itself.

struct BarChart {
  std::string title;
  std::vector<std::string> groups;  // x-axis groups (economies)
  std::vector<std::string> series;  // bars within a group (methods)
  std::vector<std::vector<double>> values;  // [group][series]
};

inline void write_svg_bar_chart(std::ostream& os, const BarChart& ch) {
  static const char* colors[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3"};
  double top = 0.0;
  for (const auto& g : ch.values) {
    for (double v : g) {
      if (std::isfinite(v)) top = std::max(top, v);
    }
  }
  if (!(top > 0.0)) top = 1.0;
  const double plot_h = 300.0, bar_w = 24.0, gap = 20.0, left = 60.0, base_y = 340.0;
  const double group_w = bar_w * static_cast<double>(ch.series.size()) + gap;
  const double width = left + group_w * static_cast<double>(ch.groups.size()) + 160.0;
  const double sy = plot_h / top;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::fmt_double(width)
     << "\" height=\"420\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">" << ch.title << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << base_y << "\" x2=\"" << detail::fmt_double(width - 150.0)
     << "\" y2=\"" << base_y << "\" stroke=\"black\"/>\n";
  os << "<text x=\"4\" y=\"" << base_y - plot_h + 4 << "\">" << detail::fmt_double(top) << "</text>\n";
  os << "<text x=\"4\" y=\"" << base_y + 4 << "\">0</text>\n";
  // y grows downward in SVG; flip so heights are in data units.
  os << "<g transform=\"translate(0 " << base_y << ") scale(1 " << detail::fmt_double(-sy) << ")\">\n";
  for (std::size_t g = 0; g < ch.groups.size(); ++g) {
    for (std::size_t s = 0; s < ch.series.size(); ++s) {
      const double v = ch.values[g][s];
      const double x = left + gap / 2 + group_w * static_cast<double>(g) + bar_w * static_cast<double>(s);
      os << "<rect class=\"bar\" data-group=\"" << ch.groups[g] << "\" data-series=\"" << ch.series[s]
         << "\" x=\"" << detail::fmt_double(x) << "\" y=\"0\" width=\"" << detail::fmt_double(bar_w - 2)
         << "\" height=\"" << detail::fmt_double(std::isfinite(v) ? v : 0.0) << "\" fill=\"" << colors[s % 5]
         << "\"/>\n";
    }
  }
  os << "</g>\n";
  for (std::size_t g = 0; g < ch.groups.size(); ++g) {
    const double x = left + gap / 2 + group_w * static_cast<double>(g);
    os << "<text x=\"" << detail::fmt_double(x) << "\" y=\"" << base_y + 16 << "\">" << ch.groups[g]
       << "</text>\n";
  }
  for (std::size_t s = 0; s < ch.series.size(); ++s) {
    const double y = 40.0 + 16.0 * static_cast<double>(s);
    os << "<rect x=\"" << detail::fmt_double(width - 140) << "\" y=\"" << y - 9 << "\" width=\"10\" height=\"10\" fill=\""
       << colors[s % 5] << "\"/><text x=\"" << detail::fmt_double(width - 125) << "\" y=\"" << y << "\">"
       << ch.series[s] << "</text>\n";
  }
  os << "</svg>\n";
}

/// One chart per metric: groups are economies, bars are methods, heights the
/// mean normalized value over rows.
inline std::map<std::string, BarChart> charts_from_rows(std::span<const MetricRow> rows) {
  static const std::vector<std::string> metrics{"fov", "bellman", "exploitability"};
  static const std::vector<std::string> methods{"gapnet", "npm", "random"};
  std::vector<std::string> groups;
  for (const auto& r : rows) {
    if (std::find(groups.begin(), groups.end(), r.economy_id) == groups.end()) groups.push_back(r.economy_id);
  }
  std::vector<std::string> series;
  for (const auto& m : methods) {
    if (std::any_of(rows.begin(), rows.end(), [&](const MetricRow& r) { return r.method == m; })) {
      series.push_back(m);
    }
  }
  std::map<std::string, BarChart> out;
  for (const auto& metric : metrics) {
    BarChart ch{"normalized " + metric, groups, series, {}};
    for (const auto& g : groups) {
      std::vector<double> vals;
      for (const auto& s : series) {
        double sum = 0.0;
        std::size_t cnt = 0;
        for (const auto& r : rows) {
          if (r.economy_id == g && r.method == s && r.metric == metric) {
            sum += r.normalized;
            ++cnt;
          }
        }
        vals.push_back(cnt ? sum / static_cast<double>(cnt) : std::numeric_limits<double>::quiet_NaN());
      }
      ch.values.push_back(std::move(vals));
    }
    out.emplace(metric, std::move(ch));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run directory.

namespace fs = std::filesystem;

struct RunPaths {
  fs::path dir;
  [[nodiscard]] fs::path economy() const { return dir / "economy.json"; }
  [[nodiscard]] fs::path config() const { return dir / "config.txt"; }
  [[nodiscard]] fs::path manifest() const { return dir / "manifest.json"; }
  [[nodiscard]] fs::path baseline() const { return dir / "baseline_random.csv"; }
  [[nodiscard]] fs::path metrics() const { return dir / "metrics.csv"; }
  [[nodiscard]] fs::path gapnet_ckpt() const { return dir / "gapnet_theta.ckpt"; }
  [[nodiscard]] fs::path gapnet_trace() const { return dir / "gapnet_trace.csv"; }
  [[nodiscard]] fs::path npm_ckpt() const { return dir / "npm_theta.ckpt"; }
  [[nodiscard]] fs::path npm_value_ckpt() const { return dir / "npm_value.ckpt"; }
  [[nodiscard]] fs::path npm_trace() const { return dir / "npm_trace.csv"; }
  [[nodiscard]] fs::path grid() const { return dir / "grid.csv"; }
  [[nodiscard]] fs::path chart(const std::string& metric) const { return dir / ("chart_" + metric + ".svg"); }
};

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("missing input " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_manifest(const RunPaths& paths, const ExperimentConfig& cfg, const std::string& stage) {
  nlohmann::json j;
  if (fs::exists(paths.manifest())) j = nlohmann::json::parse(read_text(paths.manifest()));
  j["format"] = "mpg-run";
  j["schema_version"] = kConfigSchemaVersion;
  j["build"] = MPG_BUILD_ID;
  j["config"] = to_config_map(cfg);
  j["economy_id"] = cfg.economy_id();
  auto& stages = j["stages"];
  if (!stages.is_array()) stages = nlohmann::json::array();
  if (std::find(stages.begin(), stages.end(), stage) == stages.end()) stages.push_back(stage);
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(paths.dir)) {
    if (e.path().filename() != "manifest.json") files.push_back(e.path().filename().string());
  }
  std::sort(files.begin(), files.end());
  j["files"] = files;
  write_text(paths.manifest(), j.dump(2) + "\n");
}

inline std::string trace_text(const TrainTrace& tr) {
  std::ostringstream os;
  write_trace_csv(os, tr);
  return os.str();
}

inline std::string metric_text(std::span<const MetricRow> rows) {
  std::ostringstream os;
  write_metric_csv(os, rows);
  return os.str();
}

/// Economy snapshot plus resolved config.
inline MarkovExchangeEconomy stage_economy(const RunPaths& paths, const ExperimentConfig& cfg) {
  fs::create_directories(paths.dir);
  const auto econ = make_economy(cfg);
  write_text(paths.economy(), to_json(econ).dump(2) + "\n");
  write_text(paths.config(), to_config_text(cfg));
  write_manifest(paths, cfg, "economy");
  return econ;
}

inline MarkovExchangeEconomy load_run_economy(const RunPaths& paths) {
  return economy_from_json(nlohmann::json::parse(read_text(paths.economy())));
}

inline std::vector<MetricsRecord> stage_baseline(const RunPaths& paths, const ExperimentConfig& cfg) {
  const ExchangeScheme sc{ExchangeGame(load_run_economy(paths)), cfg.policy};
  const auto base = random_baseline(sc, cfg);
  write_text(paths.baseline(), metric_text(baseline_rows(cfg, base)));
  write_manifest(paths, cfg, "baseline-random");
  return base;
}

struct TrainOutcome {
  std::optional<TrainTrace> gapnet;
  std::optional<NpmResult> npm;
};

inline TrainOutcome stage_train(const RunPaths& paths, const ExperimentConfig& cfg) {
  const ExchangeScheme sc{ExchangeGame(load_run_economy(paths)), cfg.policy};
  const std::uint64_t seed = cfg.require_seed();
  TrainOutcome out;
  if (cfg.wants("gapnet")) {
    TrainTrace tr = ttsgda(sc, cfg.gapnet, stream_seed(seed, kGapnetStream));
    save_checkpoint(paths.gapnet_ckpt().string(), sc.theta_architecture_hash(), best_iterate(tr).theta);
    write_text(paths.gapnet_trace(), trace_text(tr));
    out.gapnet = std::move(tr);
  }
  if (cfg.wants("npm")) {
    NpmResult r = train_npm(sc, cfg.npm, stream_seed(seed, kNpmStream));
    save_checkpoint(paths.npm_ckpt().string(), sc.theta_architecture_hash(), r.theta);
    save_checkpoint(paths.npm_value_ckpt().string(), r.value_net.hash(), r.psi);
    write_text(paths.npm_trace(), trace_text(r.trace));
    out.npm = std::move(r);
  }
  write_manifest(paths, cfg, "train");
  return out;
}

inline ValueNet npm_value_net(const ExchangeScheme& sc, const ExperimentConfig& cfg) {
  Rng rng(0);
  const auto s0 = sc.game().sample_initial(rng);
  return ValueNet(sc.game().num_players(), state_features(sc, s0).size(), cfg.npm.value_hidden);
}

/// Evaluates every trained checkpoint in the directory against the stored
/// baseline and writes metrics.csv and one chart per metric.
inline std::vector<MetricRow> stage_eval(const RunPaths& paths, const ExperimentConfig& cfg) {
  const ExchangeScheme sc{ExchangeGame(load_run_economy(paths)), cfg.policy};
  const auto base_rows = read_metric_csv(paths.baseline().string());
  const auto base = baseline_from_rows(base_rows);
  std::vector<MetricRow> rows;
  const std::string eid = cfg.economy_id();
  bool any = false;
  if (cfg.wants("gapnet") && fs::exists(paths.gapnet_ckpt())) {
    const auto theta = load_checkpoint(paths.gapnet_ckpt().string(), sc.theta_architecture_hash());
    const auto raw = evaluate_run_policy(sc, cfg, theta);
    const auto r = metric_rows("gapnet", "gapnet", eid, raw, normalized_metrics(raw, base));
    rows.insert(rows.end(), r.begin(), r.end());
    any = true;
  }
  if (cfg.wants("npm") && fs::exists(paths.npm_ckpt())) {
    const auto theta = load_checkpoint(paths.npm_ckpt().string(), sc.theta_architecture_hash());
    const ValueNet vn = npm_value_net(sc, cfg);
    const auto psi = load_checkpoint(paths.npm_value_ckpt().string(), vn.hash());
    const auto raw = evaluate_run_policy(sc, cfg, theta, &vn, psi);
    const auto r = metric_rows("npm", "npm", eid, raw, normalized_metrics(raw, base));
    rows.insert(rows.end(), r.begin(), r.end());
    any = true;
  }
  if (!any) throw std::runtime_error("no trained checkpoints in " + paths.dir.string());
  rows.insert(rows.end(), base_rows.begin(), base_rows.end());
  write_text(paths.metrics(), metric_text(rows));
  for (const auto& [metric, chart] : charts_from_rows(rows)) {
    std::ostringstream os;
    write_svg_bar_chart(os, chart);
    write_text(paths.chart(metric), os.str());
  }
  write_manifest(paths, cfg, "eval");
  return rows;
}

/// All stages in one directory.
inline std::vector<MetricRow> run_experiment(const ExperimentConfig& cfg, const fs::path& dir) {
  validate(cfg);
  const RunPaths paths{dir};
  stage_economy(paths, cfg);
  stage_baseline(paths, cfg);
  stage_train(paths, cfg);
  return stage_eval(paths, cfg);
}

/// Short runs per learning-rate candidate, scored by normalized first-order
/// violation plus Bellman error; returns the config with the winners.
inline ExperimentConfig grid_search(const RunPaths& paths, const ExperimentConfig& cfg) {
  const ExchangeScheme sc{ExchangeGame(load_run_economy(paths)), cfg.policy};
  const auto base = baseline_from_rows(read_metric_csv(paths.baseline().string()));
  const std::uint64_t seed = cfg.require_seed();
  ExperimentConfig best = cfg;
  std::ostringstream os;
  os << "method,lr,fov,bellman,exploitability,score\n";
  auto report = [&](const std::string& method, double lr, const MetricsRecord& n) {
    const double score = n.fov + n.bellman;
    os << method << ',' << detail::fmt_double(lr) << ',' << detail::fmt_double(n.fov) << ','
       << detail::fmt_double(n.bellman) << ',' << detail::fmt_double(n.exploitability) << ','
       << detail::fmt_double(score) << '\n';
    return score;
  };
  double best_g = std::numeric_limits<double>::infinity(), best_n = best_g;
  for (double lr : cfg.grid) {
    if (cfg.wants("gapnet")) {
      TtsgdaConfig g = cfg.gapnet;
      g.lr_theta = lr;
      g.lr_phi = cfg.gapnet.lr_phi > 0.0 ? lr * cfg.gapnet.lr_phi / cfg.gapnet.lr_theta : 0.0;
      g.iters = cfg.grid_iters;
      g.eval_every = cfg.grid_iters;
      const TrainTrace tr = ttsgda(sc, g, stream_seed(seed, kGapnetStream));
      const auto n = normalized_metrics(evaluate_run_policy(sc, cfg, best_iterate(tr).theta), base);
      const double s = report("gapnet", lr, n);
      if (s < best_g) {
        best_g = s;
        best.gapnet.lr_theta = g.lr_theta;
        best.gapnet.lr_phi = g.lr_phi;
      }
    }
    if (cfg.wants("npm")) {
      NpmConfig c = cfg.npm;
      c.lr = lr;
      c.iters = cfg.grid_iters;
      const NpmResult r = train_npm(sc, c, stream_seed(seed, kNpmStream));
      const auto n = normalized_metrics(evaluate_run_policy(sc, cfg, r.theta, &r.value_net, r.psi), base);
      const double s = report("npm", lr, n);
      if (s < best_n) {
        best_n = s;
        best.npm.lr = lr;
      }
    }
  }
  write_text(paths.grid(), os.str());
  sync_derived(best);
  return best;
}

/// Aggregates metric CSVs from several runs into one table and chart set.
inline std::vector<MetricRow> report(const std::vector<fs::path>& runs, const fs::path& out_dir) {
  std::vector<MetricRow> rows;
  for (const auto& r : runs) {
    const auto part = read_metric_csv((r / "metrics.csv").string());
    rows.insert(rows.end(), part.begin(), part.end());
  }
  fs::create_directories(out_dir);
  write_text(out_dir / "report.csv", metric_text(rows));
  for (const auto& [metric, chart] : charts_from_rows(rows)) {
    std::ostringstream os;
    write_svg_bar_chart(os, chart);
    write_text(out_dir / ("chart_" + metric + ".svg"), os.str());
  }
  return rows;
}

}  // namespace mpg
