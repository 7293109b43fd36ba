#pragma once

// Two-time-scale stochastic simultaneous gradient descent-ascent on the
// cumulative regret, plus exploitability evaluation by adversary ascent.

#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mpg/game.hpp"
#include "mpg/numeric.hpp"
#include "mpg/policies.hpp"
#include "mpg/rollout.hpp"

namespace mpg {

enum class UpdateRule { sgd, adam };

inline std::string to_string(UpdateRule r) { return r == UpdateRule::sgd ? "sgd" : "adam"; }
inline UpdateRule update_rule_from_string(const std::string& s) {
  if (s == "sgd") return UpdateRule::sgd;
  if (s == "adam") return UpdateRule::adam;
  throw SpecError("unknown update rule '" + s + "'");
}

/// First-order update x <- x + sign * lr * direction(g).
class Optimizer {
 public:
  Optimizer(UpdateRule rule, double lr, std::size_t dim) : rule_(rule), lr_(lr), m_(dim, 0.0), v_(dim, 0.0) {}

  void set_lr(double lr) { lr_ = lr; }
  [[nodiscard]] double lr() const { return lr_; }

  void step(std::vector<double>& x, std::span<const double> g, double sign) {
    if (rule_ == UpdateRule::sgd) {
      for (std::size_t d = 0; d < x.size(); ++d) x[d] += sign * lr_ * g[d];
      return;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t d = 0; d < x.size(); ++d) {
      m_[d] = kBeta1 * m_[d] + (1.0 - kBeta1) * g[d];
      v_[d] = kBeta2 * v_[d] + (1.0 - kBeta2) * g[d] * g[d];
      x[d] += sign * lr_ * (m_[d] / c1) / (std::sqrt(v_[d] / c2) + kEps);
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  UpdateRule rule_;
  double lr_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Adversary ascent used to estimate exploitability.
struct AscentConfig {
  std::size_t steps = 200;            // K_adv
  double lr = 1e-2;                   // eta_eval
  UpdateRule rule = UpdateRule::adam;
  std::size_t batch = 4;              // trajectories per ascent step
  std::size_t eval_trajectories = 16; // fixed batch the candidates are scored on
  std::size_t check_every = 10;
  std::size_t horizon = 10;
  DiscountMode mode = DiscountMode::fixed_horizon_weighted;
  std::size_t threads = 1;

  void validate() const {
    if (steps < 1) throw SpecError("adversary ascent needs K_adv >= 1");
    if (!(lr > 0.0)) throw SpecError("adversary learning rate must be positive");
    if (batch < 1 || eval_trajectories < 1 || check_every < 1) throw SpecError("bad ascent batch sizes");
  }
};

struct ExploitabilityResult {
  double value = 0.0;    // sum_i max(0, best regret_i)
  double std_err = 0.0;
  std::vector<double> per_player;
  std::vector<double> phi_star;  // adversary at the best total regret
  double grad_norm_theta = 0.0;  // ||grad_theta regret|| at (theta, phi_star)
};

namespace detail {
inline constexpr std::uint64_t kEvalStream = 0xE7A1ULL;
inline constexpr std::uint64_t kAscentStream = 0xA5CEULL;
}  // namespace detail

/// Runs K_adv ascent steps on the adversary from `phi0` (fresh when empty)
/// and returns the best regret found on a fixed evaluation batch. Each
/// player's best is taken separately since regret_i depends only on that
/// player's adversary block; negative bests are clamped to 0 because not
/// deviating is always available.
template <ParameterizationScheme S>
ExploitabilityResult exploitability_estimate(const S& sc, std::span<const double> theta, const AscentConfig& cfg,
                                             std::uint64_t seed, std::vector<double> phi0 = {},
                                             const StateVec<double>* start = nullptr) {
  cfg.validate();
  const auto& game = sc.game();
  const std::size_t n = game.num_players();
  std::vector<double> phi = std::move(phi0);
  if (phi.empty()) {
    Rng rng(stream_seed(seed, detail::kAscentStream, 0xF1));
    phi = sc.init_phi(rng);
  }
  const auto eval_seeds =
      draw_batch(game, cfg.horizon, cfg.mode, cfg.eval_trajectories, seed, detail::kEvalStream, start);
  const std::span<const TrajectorySeed> eval_span(eval_seeds);

  ExploitabilityResult out;
  std::vector<double> best(n, -std::numeric_limits<double>::infinity());
  std::vector<double> best_se(n, 0.0);
  double best_total = -std::numeric_limits<double>::infinity();
  auto score = [&](const std::vector<double>& ph) {
    const RegretEstimate r = cumulative_regret_estimate(sc, theta, std::span<const double>(ph), eval_span, cfg.mode,
                                                        cfg.threads);
    for (std::size_t i = 0; i < n; ++i) {
      if (r.per_player[i] > best[i]) {
        best[i] = r.per_player[i];
        best_se[i] = r.per_player_se[i];
      }
    }
    if (r.value > best_total) {
      best_total = r.value;
      out.phi_star = ph;
    }
  };
  score(phi);
  Optimizer opt(cfg.rule, cfg.lr, phi.size());
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto seeds = draw_batch(game, cfg.horizon, cfg.mode, cfg.batch, stream_seed(seed, detail::kAscentStream),
                                  step, start);
    const GradientEstimate g = gradient_estimate(sc, theta, std::span<const double>(phi),
                                                 std::span<const TrajectorySeed>(seeds), cfg.mode, false, true,
                                                 cfg.threads);
    opt.step(phi, g.g_phi, +1.0);
    if ((step + 1) % cfg.check_every == 0 || step + 1 == cfg.steps) score(phi);
  }
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out.per_player.push_back(std::max(0.0, best[i]));
    out.value += out.per_player.back();
    if (best[i] > 0.0) var += best_se[i] * best_se[i];
  }
  out.std_err = std::sqrt(var);
  const GradientEstimate g = gradient_estimate(sc, theta, std::span<const double>(out.phi_star), eval_span, cfg.mode,
                                               true, false, cfg.threads);
  out.grad_norm_theta = l2_norm(g.g_theta);
  return out;
}

/// Exploitability with every rollout started at s.
template <ParameterizationScheme S>
ExploitabilityResult state_exploitability_estimate(const S& sc, std::span<const double> theta,
                                                   const StateVec<double>& s, const AscentConfig& cfg,
                                                   std::uint64_t seed, std::vector<double> phi0 = {}) {
  return exploitability_estimate(sc, theta, cfg, seed, std::move(phi0), &s);
}

// ---------------------------------------------------------------------------

struct TtsgdaConfig {
  double lr_theta = 1e-3;
  double lr_phi = 0.0;  // 0: 10 * lr_theta
  UpdateRule rule = UpdateRule::sgd;
  std::size_t iters = 1000;
  std::size_t batch = 4;
  std::size_t horizon = 10;
  DiscountMode mode = DiscountMode::fixed_horizon_weighted;
  std::size_t eval_every = 100;
  AscentConfig eval;
  bool warm_start = true;          // reuse the previous phi* at checkpoints
  bool phi_first = false;          // order of applying the two updates
  bool record_wall_time = false;   // wall_ms is 0 unless set (keeps CSVs reproducible)
  double divergence_threshold = 1e6;
  double init_scale = 0.05;
  std::size_t threads = 1;

  [[nodiscard]] double effective_lr_phi() const { return lr_phi > 0.0 ? lr_phi : 10.0 * lr_theta; }

  void validate() const {
    if (!(lr_theta > 0.0) || lr_phi < 0.0) throw SpecError("learning rates must be positive");
    if (iters < 1 || batch < 1 || eval_every < 1) throw SpecError("bad iteration counts");
    eval.validate();
  }
};

struct Checkpoint {
  std::size_t iteration = 0;
  std::vector<double> theta;
  double exploitability = 0.0;
  double exploitability_se = 0.0;
  double grad_norm_theta = 0.0;  // at (theta, phi*), the stationarity proxy
  double grad_norm_phi = 0.0;    // last training step
  double cumulative_regret = 0.0;  // last training batch
  double wall_ms = 0.0;
};

struct TrainTrace {
  std::vector<Checkpoint> checkpoints;
  std::vector<double> theta;  // final iterates
  std::vector<double> phi;
  bool diverged = false;
  std::string message;
};

/// Algorithm: theta descends and phi ascends the sampled regret, both using
/// the gradient at the pre-update pair.
template <ParameterizationScheme S>
TrainTrace ttsgda(const S& sc, const TtsgdaConfig& cfg, std::uint64_t seed, std::vector<double> theta0 = {}) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Rng init_rng(stream_seed(seed, 0x1A17));
  TrainTrace tr;
  tr.theta = theta0.empty() ? sc.init_theta(init_rng) : std::move(theta0);
  tr.phi = sc.init_phi(init_rng);
  Optimizer opt_theta(cfg.rule, cfg.lr_theta, tr.theta.size());
  Optimizer opt_phi(cfg.rule, cfg.effective_lr_phi(), tr.phi.size());
  std::vector<double> phi_eval;
  double last_regret = 0.0, last_gphi = 0.0;

  auto checkpoint = [&](std::size_t iter) {
    const std::uint64_t eval_seed = stream_seed(seed, 0xC4EC, cfg.warm_start ? 0 : iter);
    const ExploitabilityResult ex =
        exploitability_estimate(sc, tr.theta, cfg.eval, eval_seed, cfg.warm_start ? phi_eval : std::vector<double>{});
    if (cfg.warm_start) phi_eval = ex.phi_star;
    Checkpoint c;
    c.iteration = iter;
    c.theta = tr.theta;
    c.exploitability = ex.value;
    c.exploitability_se = ex.std_err;
    c.grad_norm_theta = ex.grad_norm_theta;
    c.grad_norm_phi = last_gphi;
    c.cumulative_regret = last_regret;
    if (cfg.record_wall_time) {
      c.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    tr.checkpoints.push_back(std::move(c));
  };

  checkpoint(0);
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    const auto seeds = draw_batch(sc.game(), cfg.horizon, cfg.mode, cfg.batch, seed, it);
    const GradientEstimate g = gradient_estimate(sc, std::span<const double>(tr.theta),
                                                 std::span<const double>(tr.phi),
                                                 std::span<const TrajectorySeed>(seeds), cfg.mode, true, true,
                                                 cfg.threads);
    if (cfg.phi_first) {
      opt_phi.step(tr.phi, g.g_phi, +1.0);
      opt_theta.step(tr.theta, g.g_theta, -1.0);
    } else {
      opt_theta.step(tr.theta, g.g_theta, -1.0);
      opt_phi.step(tr.phi, g.g_phi, +1.0);
    }
    last_regret = g.regret.value;
    last_gphi = l2_norm(g.g_phi);
    const double norm = std::max(l2_norm(tr.theta), l2_norm(tr.phi));
    if (!std::isfinite(norm) || norm > cfg.divergence_threshold) {
      tr.diverged = true;
      tr.message = "parameter norm " + std::to_string(norm) + " exceeded " +
                   std::to_string(cfg.divergence_threshold) + " at iteration " + std::to_string(it + 1);
      break;
    }
    if ((it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iters) checkpoint(it + 1);
  }
  return tr;
}

/// Checkpoint with minimal exploitability estimate; ties go to the earliest.
inline const Checkpoint& best_iterate(const TrainTrace& tr) {
  if (tr.checkpoints.empty()) throw SpecError("best_iterate: empty trace");
  std::size_t best = 0;
  for (std::size_t c = 1; c < tr.checkpoints.size(); ++c) {
    if (tr.checkpoints[c].exploitability < tr.checkpoints[best].exploitability) best = c;
  }
  return tr.checkpoints[best];
}

inline void write_trace_csv(std::ostream& os, const TrainTrace& tr) {
  os << "iteration,exploitability,grad_norm_theta,grad_norm_phi,cumul_regret,wall_ms\n";
  char buf[256];
  for (const auto& c : tr.checkpoints) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.3f\n", c.iteration, c.exploitability,
                  c.grad_norm_theta, c.grad_norm_phi, c.cumulative_regret, c.wall_ms);
    os << buf;
  }
}

// ---------------------------------------------------------------------------

struct MismatchReport {
  double policy_ratio = 0.0;                 // ||d^pi / mu||_inf
  std::vector<double> deviation_ratio;       // per player ||d^{rho_i, pi_-i} / mu||_inf
  double coefficient = 0.0;                  // (1/(1-gamma))^2 * max_i dev_i * policy
  bool infinite = false;
};

namespace detail {
inline double sup_ratio(const std::vector<double>& d, const std::vector<double>& mu, bool& infinite) {
  double dm = 0.0, mm = 0.0;
  for (double v : d) dm += v;
  for (double v : mu) mm += v;
  double r = 0.0;
  for (std::size_t b = 0; b < d.size(); ++b) {
    if (d[b] <= 0.0) continue;
    if (mu[b] <= 0.0) {
      infinite = true;
      return std::numeric_limits<double>::infinity();
    }
    r = std::max(r, (d[b] / dm) / (mu[b] / mm));
  }
  return r;
}
}  // namespace detail

/// Estimated best-response mismatch coefficient from binned visitation
/// histograms (normalized to distributions) and a histogram of mu.
template <ParameterizationScheme S>
MismatchReport mismatch_diagnostic(const S& sc, std::span<const double> theta, std::span<const double> phi_star,
                                   const RolloutConfig& cfg, const StateBinning& binning, std::size_t mu_samples = 1024) {
  const auto& game = sc.game();
  std::vector<double> mu(binning.num_bins(), 0.0);
  Rng rng(stream_seed(cfg.seed, 0x4D55));
  for (std::size_t k = 0; k < mu_samples; ++k) mu[binning.index(game.sample_initial(rng))] += 1.0;
  MismatchReport rep;
  const auto d_pi = visitation_histogram(sc, theta, phi_star, -1, cfg, binning);
  rep.policy_ratio = detail::sup_ratio(d_pi, mu, rep.infinite);
  double worst = 0.0;
  for (std::size_t i = 0; i < game.num_players(); ++i) {
    const auto d_dev = visitation_histogram(sc, theta, phi_star, static_cast<int>(i), cfg, binning);
    rep.deviation_ratio.push_back(detail::sup_ratio(d_dev, mu, rep.infinite));
    worst = std::max(worst, rep.deviation_ratio.back());
  }
  const double g = 1.0 / (1.0 - game.discount());
  rep.coefficient = rep.infinite ? std::numeric_limits<double>::infinity() : g * g * worst * rep.policy_ratio;
  return rep;
}

}  // namespace mpg
