#pragma once

// Trajectory sampling and Monte-Carlo estimators: payoffs, state and action
// values, cumulative regret, and the pathwise gradient of the regret.
//
// Shocks are action-independent, so a trajectory is fully described by its
// initial state, its shock sequence and its length. The on-policy rollout
// and the n deviation rollouts of one sample share that description (common
// random numbers), and the regret gradient is the exact derivative of the
// sampled objective with the shocks held fixed.

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "mpg/ad.hpp"
#include "mpg/game.hpp"
#include "mpg/numeric.hpp"
#include "mpg/policies.hpp"

namespace mpg {

enum class DiscountMode { fixed_horizon_weighted, geometric_termination };

inline std::string to_string(DiscountMode m) {
  return m == DiscountMode::fixed_horizon_weighted ? "fixed-horizon-weighted" : "geometric-termination";
}
inline DiscountMode discount_mode_from_string(const std::string& s) {
  if (s == "fixed-horizon-weighted") return DiscountMode::fixed_horizon_weighted;
  if (s == "geometric-termination") return DiscountMode::geometric_termination;
  throw SpecError("unknown discount mode '" + s + "'");
}

struct RolloutConfig {
  std::size_t horizon = 30;        // truncation T
  std::size_t n_trajectories = 16;
  DiscountMode mode = DiscountMode::fixed_horizon_weighted;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const {
    if (horizon < 1) throw SpecError("rollout horizon must be >= 1");
    if (n_trajectories < 1) throw SpecError("need at least one trajectory");
  }
};

/// sum_{t<T} gamma^t
inline double truncated_geometric_sum(double gamma, std::size_t T) {
  return (1.0 - std::pow(gamma, static_cast<double>(T))) / (1.0 - gamma);
}

/// Bound on the payoff lost by truncating at T: gamma^T r_max / (1 - gamma).
inline double truncation_bias_bound(double gamma, std::size_t T, double r_max) {
  return std::pow(gamma, static_cast<double>(T)) * r_max / (1.0 - gamma);
}

/// Everything random about one sampled trajectory.
struct TrajectorySeed {
  StateVec<double> s0;
  std::vector<std::vector<double>> shocks;  // one per step
  std::size_t length = 0;
};

template <MarkovPseudoGame G>
TrajectorySeed draw_trajectory_seed(const G& game, std::size_t horizon, DiscountMode mode, Rng& rng,
                                    const StateVec<double>* start = nullptr) {
  TrajectorySeed ts;
  ts.s0 = start ? *start : game.sample_initial(rng);
  ts.length = horizon;
  if (mode == DiscountMode::geometric_termination) {
    // Continue after each step with probability gamma.
    std::size_t len = 1;
    while (len < horizon && uniform01(rng) < game.discount()) ++len;
    ts.length = len;
  }
  ts.shocks.reserve(ts.length);
  for (std::size_t t = 0; t < ts.length; ++t) ts.shocks.push_back(game.sample_shock(rng));
  return ts;
}

/// Trajectory seeds for batch `batch` of a run with master seed `seed`.
/// Each trajectory has its own stream, so seeds do not depend on threading.
template <MarkovPseudoGame G>
std::vector<TrajectorySeed> draw_batch(const G& game, std::size_t horizon, DiscountMode mode, std::size_t count,
                                       std::uint64_t seed, std::uint64_t batch,
                                       const StateVec<double>* start = nullptr) {
  std::vector<TrajectorySeed> out;
  out.reserve(count);
  for (std::size_t b = 0; b < count; ++b) {
    Rng rng(stream_seed(seed, batch, b));
    out.push_back(draw_trajectory_seed(game, horizon, mode, rng, start));
  }
  return out;
}

/// Runs f(i) for i in [0, n) on up to `threads` threads. Each call must write
/// only its own output slot; callers reduce in index order afterwards.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& f) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += threads) f(i);
    });
  }
  for (auto& t : pool) t.join();
}

/// Per-step weight: gamma^t in fixed-horizon mode, 1 in geometric mode
/// (where termination already carries the discount).
inline double step_weight(double gamma, std::size_t t, DiscountMode mode) {
  return mode == DiscountMode::fixed_horizon_weighted ? std::pow(gamma, static_cast<double>(t)) : 1.0;
}

/// Replays a trajectory seed under pi(.; theta), with player `deviator`
/// (if >= 0) replaced by its dependent deviation rho_i(.; phi). Returns
/// every player's weighted return; optionally records the history.
template <class T, ParameterizationScheme S>
std::vector<T> unroll_returns(const S& sc, std::span<const T> theta, std::span<const T> phi, int deviator,
                              const TrajectorySeed& ts, DiscountMode mode, History* record = nullptr) {
  const auto& game = sc.game();
  const double gamma = game.discount();
  StateVec<T> s(ts.s0.begin(), ts.s0.end());
  std::vector<T> ret(game.num_players(), T(0.0));
  if (record) *record = History{};
  for (std::size_t t = 0; t < ts.length; ++t) {
    ActionProfile<T> a = sc.policy(theta, s);
    if (deviator >= 0) {
      a[static_cast<std::size_t>(deviator)] = sc.deviation(static_cast<std::size_t>(deviator), phi, s, a);
    }
    const std::vector<T> r = game.reward(s, a);
    const double w = step_weight(gamma, t, mode);
    for (std::size_t i = 0; i < ret.size(); ++i) ret[i] += w * r[i];
    if (record) {
      record->states.push_back(values_of(s));
      ActionProfile<double> av;
      for (const auto& ai : a) av.push_back(values_of(ai));
      record->actions.push_back(std::move(av));
      record->rewards.push_back(values_of(r));
    }
    s = game.transition(s, a, ts.shocks[t]);
  }
  if (record) record->states.push_back(values_of(s));
  return ret;
}

/// Per-player regret of one trajectory seed: return of player i under its
/// deviation minus its on-policy return.
template <class T, ParameterizationScheme S>
std::vector<T> trajectory_regret(const S& sc, std::span<const T> theta, std::span<const T> phi,
                                 const TrajectorySeed& ts, DiscountMode mode) {
  const std::size_t n = sc.game().num_players();
  const std::vector<T> on = unroll_returns<T>(sc, theta, phi, -1, ts, mode);
  std::vector<T> reg(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<T> dev = unroll_returns<T>(sc, theta, phi, static_cast<int>(i), ts, mode);
    reg[i] = dev[i] - on[i];
  }
  return reg;
}

// ---------------------------------------------------------------------------
// Payoffs and values.

struct PayoffEstimate {
  std::vector<double> values;
  std::vector<double> std_err;
  std::size_t n_samples = 0;
  double truncation_bias = 0.0;  // bound, fixed-horizon mode
};

inline void accumulate_mean(const std::vector<std::vector<double>>& samples, PayoffEstimate& out) {
  const std::size_t n = samples.front().size();
  const auto count = static_cast<double>(samples.size());
  out.values.assign(n, 0.0);
  out.std_err.assign(n, 0.0);
  out.n_samples = samples.size();
  for (const auto& v : samples) {
    for (std::size_t i = 0; i < n; ++i) out.values[i] += v[i] / count;
  }
  if (samples.size() < 2) return;
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (const auto& v : samples) ss += (v[i] - out.values[i]) * (v[i] - out.values[i]);
    out.std_err[i] = std::sqrt(ss / (count - 1.0) / count);
  }
}

template <MarkovPseudoGame G>
PayoffEstimate payoff_estimate(const G& game, std::span<const History> histories, DiscountMode mode,
                               std::size_t horizon) {
  if (histories.empty()) throw SpecError("payoff_estimate: no histories");
  std::vector<std::vector<double>> samples;
  for (const auto& h : histories) {
    std::vector<double> ret(game.num_players(), 0.0);
    for (std::size_t t = 0; t < h.length(); ++t) {
      const double w = step_weight(game.discount(), t, mode);
      for (std::size_t i = 0; i < ret.size(); ++i) ret[i] += w * h.rewards[t][i];
    }
    samples.push_back(std::move(ret));
  }
  PayoffEstimate out;
  accumulate_mean(samples, out);
  out.truncation_bias = truncation_bias_bound(game.discount(), horizon, game.reward_bound());
  return out;
}

/// History under pi(theta), or under player `deviator`'s deviation.
template <ParameterizationScheme S>
History sample_history(const S& sc, std::span<const double> theta, std::span<const double> phi, int deviator,
                       const RolloutConfig& cfg, Rng& rng, const StateVec<double>* start = nullptr) {
  const TrajectorySeed ts = draw_trajectory_seed(sc.game(), cfg.horizon, cfg.mode, rng, start);
  History h;
  unroll_returns<double>(sc, theta, phi, deviator, ts, cfg.mode, &h);
  return h;
}

template <ParameterizationScheme S>
std::vector<History> sample_histories(const S& sc, std::span<const double> theta, const RolloutConfig& cfg,
                                      std::uint64_t batch = 0, const StateVec<double>* start = nullptr) {
  cfg.validate();
  const auto seeds = draw_batch(sc.game(), cfg.horizon, cfg.mode, cfg.n_trajectories, cfg.seed, batch, start);
  std::vector<History> out(seeds.size());
  const std::vector<double> no_phi;
  parallel_for(seeds.size(), cfg.threads, [&](std::size_t b) {
    unroll_returns<double>(sc, theta, std::span<const double>(no_phi), -1, seeds[b], cfg.mode, &out[b]);
  });
  return out;
}

/// Monte-Carlo V^pi(s) from rollouts started at s.
template <ParameterizationScheme S>
PayoffEstimate state_value_estimate(const S& sc, std::span<const double> theta, const StateVec<double>& s,
                                    const RolloutConfig& cfg, std::uint64_t batch = 0) {
  const auto hs = sample_histories(sc, theta, cfg, batch, &s);
  return payoff_estimate(sc.game(), std::span<const History>(hs), cfg.mode, cfg.horizon);
}

/// r(s, a) + gamma * mean V^pi(s'), with the continuation truncated at T-1
/// so that Q(s, pi(s)) and V(s) cover the same T steps.
template <ParameterizationScheme S>
PayoffEstimate q_value_estimate(const S& sc, std::span<const double> theta, const StateVec<double>& s,
                                const ActionProfile<double>& a, const RolloutConfig& cfg, std::uint64_t batch = 0) {
  const auto& game = sc.game();
  if (!is_feasible(game, s, a, kUserFeasibilityTol)) throw SpecError("q_value_estimate: infeasible action");
  const std::vector<double> r = game.reward(s, a);
  std::vector<std::vector<double>> samples;
  for (std::size_t b = 0; b < cfg.n_trajectories; ++b) {
    Rng rng(stream_seed(cfg.seed, batch, b));
    const StateVec<double> next = game.transition(s, a, game.sample_shock(rng));
    std::vector<double> q = r;
    if (cfg.horizon > 1) {
      const TrajectorySeed ts = draw_trajectory_seed(game, cfg.horizon - 1, cfg.mode, rng, &next);
      const std::vector<double> no_phi;
      const auto v = unroll_returns<double>(sc, theta, std::span<const double>(no_phi), -1, ts, cfg.mode);
      // In geometric mode continuation happens with probability gamma and
      // the continuation return is unweighted.
      for (std::size_t i = 0; i < q.size(); ++i) q[i] += game.discount() * v[i];
    }
    samples.push_back(std::move(q));
  }
  PayoffEstimate out;
  accumulate_mean(samples, out);
  out.truncation_bias = truncation_bias_bound(game.discount(), cfg.horizon, game.reward_bound());
  return out;
}

// ---------------------------------------------------------------------------
// Cumulative regret and its gradient.

struct RegretEstimate {
  double value = 0.0;                // mean over trajectories of sum_i regret_i
  double std_err = 0.0;
  std::vector<double> per_player;    // mean regret_i
  std::vector<double> per_player_se;
  std::size_t n_samples = 0;
};

inline RegretEstimate summarize_regret(const std::vector<std::vector<double>>& per_traj) {
  RegretEstimate out;
  if (per_traj.empty()) throw SpecError("regret estimate: empty batch");
  PayoffEstimate pe;
  accumulate_mean(per_traj, pe);
  out.per_player = pe.values;
  out.per_player_se = pe.std_err;
  out.n_samples = per_traj.size();
  std::vector<std::vector<double>> totals;
  for (const auto& v : per_traj) {
    double s = 0.0;
    for (double x : v) s += x;
    totals.push_back({s});
  }
  PayoffEstimate te;
  accumulate_mean(totals, te);
  out.value = te.values[0];
  out.std_err = te.std_err[0];
  return out;
}

/// Regret estimate over explicit trajectory seeds.
template <ParameterizationScheme S>
RegretEstimate cumulative_regret_estimate(const S& sc, std::span<const double> theta, std::span<const double> phi,
                                          std::span<const TrajectorySeed> seeds, DiscountMode mode,
                                          std::size_t threads = 1) {
  std::vector<std::vector<double>> per(seeds.size());
  parallel_for(seeds.size(), threads, [&](std::size_t b) {
    per[b] = trajectory_regret<double>(sc, theta, phi, seeds[b], mode);
  });
  return summarize_regret(per);
}

/// Regret estimate from separately sampled histories: h under pi and
/// h_dev[i] under player i's deviation. Sample counts must match.
template <MarkovPseudoGame G>
double cumulative_regret_estimate(const G& game, std::span<const History> h,
                                  const std::vector<std::vector<History>>& h_dev, DiscountMode mode,
                                  std::size_t horizon) {
  if (h_dev.size() != game.num_players()) throw SpecError("need one deviation batch per player");
  const PayoffEstimate on = payoff_estimate(game, h, mode, horizon);
  double total = 0.0;
  for (std::size_t i = 0; i < h_dev.size(); ++i) {
    if (h_dev[i].size() != h.size()) throw SpecError("mismatched sample counts");
    const PayoffEstimate dev = payoff_estimate(game, std::span<const History>(h_dev[i]), mode, horizon);
    total += dev.values[i] - on.values[i];
  }
  return total;
}

struct GradientEstimate {
  RegretEstimate regret;
  std::vector<double> g_theta;
  std::vector<double> g_phi;
};

/// Exact gradient of the sampled regret with respect to theta and/or phi,
/// by reverse accumulation through the unrolled trajectories.
template <ParameterizationScheme S>
GradientEstimate gradient_estimate(const S& sc, std::span<const double> theta, std::span<const double> phi,
                                   std::span<const TrajectorySeed> seeds, DiscountMode mode, bool want_theta = true,
                                   bool want_phi = true, std::size_t threads = 1) {
  const std::size_t nb = seeds.size();
  std::vector<std::vector<double>> per(nb), gt(nb), gp(nb);
  parallel_for(nb, threads, [&](std::size_t b) {
    Tape tape;
    TapeGuard guard(tape);
    std::vector<Var> th(theta.size()), ph(phi.size());
    for (std::size_t d = 0; d < theta.size(); ++d) th[d] = want_theta ? make_variable(theta[d]) : Var(theta[d]);
    for (std::size_t d = 0; d < phi.size(); ++d) ph[d] = want_phi ? make_variable(phi[d]) : Var(phi[d]);
    const std::vector<Var> reg = trajectory_regret<Var>(sc, std::span<const Var>(th), std::span<const Var>(ph),
                                                        seeds[b], mode);
    per[b] = values_of(reg);
    const Var total = sum(reg);
    const std::vector<double> adj = tape.adjoints(total.id);
    if (want_theta) {
      gt[b].resize(theta.size());
      for (std::size_t d = 0; d < theta.size(); ++d) gt[b][d] = adj[static_cast<std::size_t>(th[d].id)];
    }
    if (want_phi) {
      gp[b].resize(phi.size());
      for (std::size_t d = 0; d < phi.size(); ++d) gp[b][d] = adj[static_cast<std::size_t>(ph[d].id)];
    }
  });
  GradientEstimate out;
  out.regret = summarize_regret(per);
  const auto inv = 1.0 / static_cast<double>(nb);
  if (want_theta) {
    out.g_theta.assign(theta.size(), 0.0);
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t d = 0; d < theta.size(); ++d) out.g_theta[d] += gt[b][d] * inv;
    }
  }
  if (want_phi) {
    out.g_phi.assign(phi.size(), 0.0);
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t d = 0; d < phi.size(); ++d) out.g_phi[d] += gp[b][d] * inv;
    }
  }
  return out;
}

/// Batch-mean regret as a plain function of (theta, phi); used for
/// finite-difference checks of gradient_estimate.
template <ParameterizationScheme S>
double regret_objective(const S& sc, std::span<const double> theta, std::span<const double> phi,
                        std::span<const TrajectorySeed> seeds, DiscountMode mode) {
  double total = 0.0;
  for (const auto& ts : seeds) {
    for (double r : trajectory_regret<double>(sc, theta, phi, ts, mode)) total += r;
  }
  return total / static_cast<double>(seeds.size());
}

// ---------------------------------------------------------------------------
// Discounted state visitation.

/// Regular grid over selected state dimensions; values outside [lo, hi]
/// fall into the edge bins.
struct StateBinning {
  std::vector<std::size_t> dims;
  std::vector<double> lo, hi;
  std::vector<std::size_t> bins;

  [[nodiscard]] std::size_t num_bins() const {
    std::size_t n = 1;
    for (std::size_t b : bins) n *= b;
    return n;
  }

  [[nodiscard]] std::size_t index(std::span<const double> s) const {
    std::size_t idx = 0;
    for (std::size_t d = 0; d < dims.size(); ++d) {
      const double u = (s[dims[d]] - lo[d]) / (hi[d] - lo[d]);
      auto c = static_cast<long long>(std::floor(u * static_cast<double>(bins[d])));
      c = std::clamp<long long>(c, 0, static_cast<long long>(bins[d]) - 1);
      idx = idx * bins[d] + static_cast<std::size_t>(c);
    }
    return idx;
  }
};

/// Mean over trajectories of sum_t w_t [s_t in bin]; total mass is
/// sum_{t<T} gamma^t in fixed-horizon mode.
template <ParameterizationScheme S>
std::vector<double> visitation_histogram(const S& sc, std::span<const double> theta, std::span<const double> phi,
                                         int deviator, const RolloutConfig& cfg, const StateBinning& binning,
                                         const StateVec<double>* start = nullptr) {
  const auto seeds = draw_batch(sc.game(), cfg.horizon, cfg.mode, cfg.n_trajectories, cfg.seed, 0, start);
  std::vector<double> hist(binning.num_bins(), 0.0);
  const double inv = 1.0 / static_cast<double>(seeds.size());
  for (const auto& ts : seeds) {
    History h;
    unroll_returns<double>(sc, theta, phi, deviator, ts, cfg.mode, &h);
    for (std::size_t t = 0; t < h.length(); ++t) {
      hist[binning.index(h.states[t])] += inv * step_weight(sc.game().discount(), t, cfg.mode);
    }
  }
  return hist;
}

inline void write_history_csv(std::ostream& os, std::span<const History> hs) {
  auto join = [](const std::vector<double>& v) {
    std::string s;
    char buf[32];
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", v[i]);
      if (i) s += ';';
      s += buf;
    }
    return s;
  };
  os << "trajectory,t,state,action,reward\n";
  for (std::size_t h = 0; h < hs.size(); ++h) {
    for (std::size_t t = 0; t < hs[h].length(); ++t) {
      std::vector<double> flat;
      for (const auto& ai : hs[h].actions[t]) flat.insert(flat.end(), ai.begin(), ai.end());
      os << h << ',' << t << ',' << join(hs[h].states[t]) << ',' << join(flat) << ',' << join(hs[h].rewards[t])
         << '\n';
    }
  }
}

}  // namespace mpg
