#pragma once

// Equilibrium-quality metrics and the neural projection method baseline.
//
// First-order violation: sum_i || mean_s [grad_{a_i} Q_i(s, pi(s)) +
//   sum_d lambda_{i,d}(s) grad_{a_i} g_{i,d}(s, pi(s))] ||^2
// Bellman error: sum_i ( mean_s [V_i(s) - r_i(s, pi(s)) - gamma V_i(s')] )^2
// with a learned per-player value head V(.; psi). Q's continuation is the
// value head evaluated at a sampled successor; action gradients come from
// forward-mode duals, which nest over the reverse-mode scalar so that the
// projection method can differentiate the residuals in (theta, psi).

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "mpg/ad.hpp"
#include "mpg/game.hpp"
#include "mpg/network.hpp"
#include "mpg/numeric.hpp"
#include "mpg/policies.hpp"
#include "mpg/rollout.hpp"
#include "mpg/solver.hpp"

namespace mpg {

/// Network input used for value heads: the scheme's features when it has
/// them, the raw state otherwise.
template <class S, class T>
std::vector<T> state_features(const S& sc, const StateVec<T>& s) {
  if constexpr (requires { sc.features(s); }) {
    return sc.features(s);
  } else {
    return s;
  }
}

/// One value head per player, stored back to back in psi.
class ValueNet {
 public:
  ValueNet() = default;
  ValueNet(std::size_t players, std::size_t input_dim, std::vector<std::size_t> hidden = {},
           Activation act = Activation::tanh)
      : players_(players), arch_{input_dim, std::move(hidden), 1, act} {}

  [[nodiscard]] std::size_t players() const { return players_; }
  [[nodiscard]] const Architecture& architecture() const { return arch_; }
  [[nodiscard]] std::size_t block_size() const { return arch_.param_count(); }
  [[nodiscard]] std::size_t size() const { return players_ * block_size(); }
  [[nodiscard]] std::uint64_t hash() const { return mix_seed(arch_.hash() ^ players_); }

  template <class T>
  T value(std::size_t i, std::span<const T> psi, std::span<const T> features) const {
    return forward(arch_, psi.subspan(i * block_size(), block_size()), features)[0];
  }

  std::vector<double> init(Rng& rng) const { return uniform_vector(rng, size(), -0.05, 0.05); }

 private:
  std::size_t players_ = 0;
  Architecture arch_;
};

// ---------------------------------------------------------------------------
// Lagrange multipliers.

struct LagrangeEstimate {
  std::vector<std::vector<double>> lambdas;  // [player][constraint]
  std::vector<double> residual;              // per player ||grad Q + sum lambda grad g||
  double complementary_slackness = 0.0;      // max lambda * g
};

/// Closed-form multiplier for a binding budget x.p + b.q <= e.p:
/// lambda = max(0, (p . grad_x Q + q . grad_b Q) / (p.p + q.q)), the
/// least-squares fit of grad Q = lambda (p, q).
inline double budget_multiplier(std::span<const double> grad_x, std::span<const double> grad_b,
                                std::span<const double> p, std::span<const double> q) {
  const double den = dot(p, p) + dot(q, q);
  if (!(den > 0.0)) throw SpecError("budget multiplier: degenerate prices");
  return std::max(0.0, (dot(p, grad_x) + dot(q, grad_b)) / den);
}

/// Least-squares stationarity fit over the active constraints (g <= tol),
/// solved with nonnegativity; slack constraints get lambda = 0. With only
/// the budget active this is exactly budget_multiplier.
/// grad_q[i] is player i's action gradient; grad_g[i][d] the gradient of
/// g_{i,d} with respect to a_i; g[i][d] its value.
inline LagrangeEstimate lagrange_closed_form(const std::vector<std::vector<double>>& grad_q,
                                             const std::vector<std::vector<std::vector<double>>>& grad_g,
                                             const ConstraintEval<double>& g, double active_tol,
                                             double slack_penalty = 0.0) {
  LagrangeEstimate out;
  for (std::size_t i = 0; i < grad_q.size(); ++i) {
    std::vector<std::size_t> active;
    std::vector<std::vector<double>> cols;
    for (std::size_t d = 0; d < g[i].size(); ++d) {
      if (g[i][d] <= active_tol) {
        active.push_back(d);
        cols.push_back(grad_g[i][d]);
      }
    }
    std::vector<double> lam(g[i].size(), 0.0);
    std::vector<double> rhs(grad_q[i].size());
    for (std::size_t c = 0; c < rhs.size(); ++c) rhs[c] = -grad_q[i][c];
    if (!active.empty()) {
      std::vector<double> lin;
      if (slack_penalty > 0.0) {
        for (std::size_t d : active) lin.push_back(slack_penalty * std::max(0.0, g[i][d]));
      }
      const NnlsResult r = slack_penalty > 0.0 ? penalized_nnls(cols, rhs, lin) : nnls(cols, rhs);
      for (std::size_t a = 0; a < active.size(); ++a) lam[active[a]] = r.x[a];
    }
    double res2 = 0.0;
    for (std::size_t c = 0; c < rhs.size(); ++c) {
      double v = grad_q[i][c];
      for (std::size_t d = 0; d < lam.size(); ++d) v += lam[d] * grad_g[i][d][c];
      res2 += v * v;
    }
    for (std::size_t d = 0; d < lam.size(); ++d) {
      out.complementary_slackness = std::max(out.complementary_slackness, lam[d] * g[i][d]);
    }
    out.residual.push_back(std::sqrt(res2));
    out.lambdas.push_back(std::move(lam));
  }
  return out;
}

// ---------------------------------------------------------------------------
// KKT residual at one state.

struct KktOptions {
  double active_tol = 1e-3;
  bool bootstrap = true;  // false for single-step games: Q = r
  // Fit lambda by min ||residual||^2 + slack_penalty * lambda.g instead of
  // plain least squares; then lambda is the exact minimizer of the
  // penalized training loss and the stop-gradient is the envelope gradient.
  double slack_penalty = 0.0;
};

/// Per-player stationarity residual grad Q_i + sum_d lambda_d grad g_{i,d}
/// at (s, a). Q_i = r_i + gamma mean_shock cont(i, s'), with cont a value
/// function on dual-valued states. Lambdas come from plain values and enter
/// as constants.
template <class T, MarkovPseudoGame G, class Cont>
std::vector<std::vector<T>> kkt_residual_at(const G& game, const StateVec<double>& s, const ActionProfile<T>& a,
                                            const std::vector<std::vector<double>>& shocks, const Cont& cont,
                                            const KktOptions& opt, LagrangeEstimate* lam_out = nullptr,
                                            T* complementarity = nullptr) {
  using D = Dual<T>;
  const std::size_t n = game.num_players();
  const double gamma = game.discount();
  const StateVec<D> sD(s.begin(), s.end());

  std::vector<std::vector<T>> grad_q(n), out(n);
  std::vector<std::vector<std::vector<T>>> grad_g(n);
  ConstraintEval<double> gval(n);
  ConstraintEval<T> gT(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t dim = a[i].size();
    grad_q[i].assign(dim, T(0.0));
    for (std::size_t c = 0; c < dim; ++c) {
      ActionProfile<D> aD(n);
      for (std::size_t l = 0; l < n; ++l) {
        aD[l].resize(a[l].size());
        for (std::size_t e = 0; e < a[l].size(); ++e) aD[l][e] = D(a[l][e], T(0.0));
      }
      aD[i][c].d = T(1.0);
      const std::vector<D> r = game.reward(sD, aD);
      T dq = r[i].d;
      if (opt.bootstrap && !shocks.empty()) {
        T acc(0.0);
        for (const auto& shock : shocks) acc += cont(i, game.transition(sD, aD, shock)).d;
        dq += gamma * acc / static_cast<double>(shocks.size());
      }
      grad_q[i][c] = dq;
      const ConstraintEval<D> g = game.constraints(sD, aD);
      if (c == 0) {
        grad_g[i].assign(g[i].size(), std::vector<T>(dim, T(0.0)));
        for (const auto& x : g[i]) {
          gval[i].push_back(value_of(x.v));
          gT[i].push_back(x.v);
        }
      }
      for (std::size_t d = 0; d < g[i].size(); ++d) grad_g[i][d][c] = g[i][d].d;
    }
  }

  std::vector<std::vector<double>> gq_val(n);
  std::vector<std::vector<std::vector<double>>> gg_val(n);
  for (std::size_t i = 0; i < n; ++i) {
    gq_val[i] = values_of(grad_q[i]);
    for (const auto& col : grad_g[i]) gg_val[i].push_back(values_of(col));
  }
  LagrangeEstimate lam = lagrange_closed_form(gq_val, gg_val, gval, opt.active_tol, opt.slack_penalty);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = grad_q[i];
    for (std::size_t d = 0; d < lam.lambdas[i].size(); ++d) {
      const double l = lam.lambdas[i][d];
      if (l == 0.0) continue;
      for (std::size_t c = 0; c < out[i].size(); ++c) out[i][c] += l * grad_g[i][d][c];
      if (complementarity) *complementarity += l * gT[i][d];
    }
  }
  if (lam_out) *lam_out = std::move(lam);
  return out;
}

/// Bellman residual V_i(s) - r_i(s, a) - gamma mean V_i(s') per player for
/// a value function value(i, state).
template <class T, MarkovPseudoGame G, class Value>
std::vector<T> bellman_residual_at(const G& game, const StateVec<double>& s, const ActionProfile<T>& a,
                                   const std::vector<std::vector<double>>& shocks, const Value& value,
                                   bool bootstrap) {
  const StateVec<T> sT(s.begin(), s.end());
  const std::vector<T> r = game.reward(sT, a);
  std::vector<StateVec<T>> next;
  if (bootstrap) {
    for (const auto& shock : shocks) next.push_back(game.transition(sT, a, shock));
  }
  std::vector<T> out(game.num_players());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = value(i, sT) - r[i];
    if (!next.empty()) {
      T acc(0.0);
      for (const auto& sn : next) acc += value(i, sn);
      out[i] -= game.discount() * acc / static_cast<double>(next.size());
    }
  }
  return out;
}

/// Value heads on the scheme's features, as a callable on any scalar type.
template <class S, class P>
auto value_head(const S& sc, const ValueNet& vn, const std::vector<P>& psi) {
  return [&sc, &vn, &psi](std::size_t i, const auto& state) {
    using U = typename std::decay_t<decltype(state)>::value_type;
    const std::vector<U> f = state_features(sc, state);
    if constexpr (std::is_same_v<U, P>) {
      return vn.value(i, std::span<const P>(psi), std::span<const U>(f));
    } else {
      std::vector<U> lifted;
      lifted.reserve(psi.size());
      for (const P& x : psi) lifted.push_back(make_dual(x));
      return vn.value(i, std::span<const U>(lifted), std::span<const U>(f));
    }
  };
}

template <class T, ParameterizationScheme S>
std::vector<std::vector<T>> kkt_residual(const S& sc, const ValueNet& vn, std::span<const T> theta,
                                         std::span<const T> psi, const StateVec<double>& s,
                                         const std::vector<std::vector<double>>& shocks, const KktOptions& opt,
                                         LagrangeEstimate* lam_out = nullptr, T* complementarity = nullptr) {
  const StateVec<T> sT(s.begin(), s.end());
  const ActionProfile<T> a = sc.policy(theta, sT);
  const std::vector<T> ps(psi.begin(), psi.end());
  return kkt_residual_at<T>(sc.game(), s, a, shocks, value_head(sc, vn, ps), opt, lam_out, complementarity);
}

template <class T, ParameterizationScheme S>
std::vector<T> bellman_residual(const S& sc, const ValueNet& vn, std::span<const T> theta, std::span<const T> psi,
                                const StateVec<double>& s, const std::vector<std::vector<double>>& shocks,
                                bool bootstrap) {
  const StateVec<T> sT(s.begin(), s.end());
  const ActionProfile<T> a = sc.policy(theta, sT);
  const std::vector<T> ps(psi.begin(), psi.end());
  return bellman_residual_at<T>(sc.game(), s, a, shocks, value_head(sc, vn, ps), bootstrap);
}

// ---------------------------------------------------------------------------

/// Sampled states with their successor shocks.
struct StateSample {
  std::vector<StateVec<double>> states;
  std::vector<std::vector<std::vector<double>>> shocks;  // [state][draw]
};

template <MarkovPseudoGame G>
StateSample sample_states(const G& game, std::size_t count, std::size_t shocks_per_state, std::uint64_t seed,
                          std::uint64_t stream) {
  StateSample out;
  for (std::size_t k = 0; k < count; ++k) {
    Rng rng(stream_seed(seed, stream, k));
    out.states.push_back(game.sample_initial(rng));
    std::vector<std::vector<double>> sh;
    const std::size_t draws = game.transition_kind() == TransitionKind::deterministic ? 1 : shocks_per_state;
    for (std::size_t d = 0; d < draws; ++d) sh.push_back(game.sample_shock(rng));
    out.shocks.push_back(std::move(sh));
  }
  return out;
}

template <class T, ParameterizationScheme S>
T first_order_violation_t(const S& sc, const ValueNet& vn, std::span<const T> theta, std::span<const T> psi,
                          const StateSample& states, const KktOptions& opt, double* max_cs = nullptr,
                          T* complementarity = nullptr) {
  const std::size_t n = sc.game().num_players();
  std::vector<std::vector<T>> mean(n);
  const double inv = 1.0 / static_cast<double>(states.states.size());
  for (std::size_t k = 0; k < states.states.size(); ++k) {
    LagrangeEstimate lam;
    T comp(0.0);
    const auto res = kkt_residual<T>(sc, vn, theta, psi, states.states[k], states.shocks[k], opt, &lam,
                                     complementarity ? &comp : nullptr);
    if (complementarity) *complementarity += inv * comp;
    if (max_cs) *max_cs = std::max(*max_cs, lam.complementary_slackness);
    for (std::size_t i = 0; i < n; ++i) {
      if (mean[i].empty()) mean[i].assign(res[i].size(), T(0.0));
      for (std::size_t c = 0; c < res[i].size(); ++c) mean[i][c] += inv * res[i][c];
    }
  }
  T total(0.0);
  for (const auto& m : mean) {
    for (const T& v : m) total += v * v;
  }
  return total;
}

template <class T, ParameterizationScheme S>
T bellman_error_t(const S& sc, const ValueNet& vn, std::span<const T> theta, std::span<const T> psi,
                  const StateSample& states, bool bootstrap) {
  const std::size_t n = sc.game().num_players();
  std::vector<T> mean(n, T(0.0));
  const double inv = 1.0 / static_cast<double>(states.states.size());
  for (std::size_t k = 0; k < states.states.size(); ++k) {
    const auto res = bellman_residual<T>(sc, vn, theta, psi, states.states[k], states.shocks[k], bootstrap);
    for (std::size_t i = 0; i < n; ++i) mean[i] += inv * res[i];
  }
  T total(0.0);
  for (const T& v : mean) total += v * v;
  return total;
}

template <ParameterizationScheme S>
double first_order_violation(const S& sc, const ValueNet& vn, std::span<const double> theta,
                             std::span<const double> psi, const StateSample& states, const KktOptions& opt,
                             double* max_cs = nullptr) {
  return first_order_violation_t<double>(sc, vn, theta, psi, states, opt, max_cs);
}

template <ParameterizationScheme S>
double bellman_error(const S& sc, const ValueNet& vn, std::span<const double> theta, std::span<const double> psi,
                     const StateSample& states, bool bootstrap) {
  return bellman_error_t<double>(sc, vn, theta, psi, states, bootstrap);
}

// ---------------------------------------------------------------------------
// Value-head fitting.

struct ValueSamples {
  std::vector<std::vector<double>> features;
  std::vector<std::vector<double>> returns;  // per player
};

/// Visited states (t <= horizon / 2) with their discounted reward-to-go.
template <ParameterizationScheme S>
ValueSamples collect_value_samples(const S& sc, std::span<const double> theta, const RolloutConfig& cfg) {
  ValueSamples out;
  const auto hs = sample_histories(sc, theta, cfg, 0x5A11);
  const double gamma = sc.game().discount();
  for (const auto& h : hs) {
    std::vector<double> togo(sc.game().num_players(), 0.0);
    std::vector<std::vector<double>> rtg(h.length());
    for (std::size_t t = h.length(); t-- > 0;) {
      for (std::size_t i = 0; i < togo.size(); ++i) togo[i] = h.rewards[t][i] + gamma * togo[i];
      rtg[t] = togo;
    }
    for (std::size_t t = 0; t < h.length() && 2 * t <= h.length(); ++t) {
      out.features.push_back(state_features(sc, h.states[t]));
      out.returns.push_back(rtg[t]);
    }
  }
  return out;
}

/// Ridge regression for affine value heads.
inline std::vector<double> fit_value_ridge(const ValueNet& vn, const ValueSamples& data, double ridge = 1e-6) {
  if (!vn.architecture().is_affine()) throw SpecError("ridge fit needs an affine value head");
  const auto rows = static_cast<Eigen::Index>(data.features.size());
  const auto dim = static_cast<Eigen::Index>(vn.architecture().input_dim);
  Eigen::MatrixXd X(rows, dim + 1);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < dim; ++c) X(r, c) = data.features[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
    X(r, dim) = 1.0;
  }
  Eigen::MatrixXd A = X.transpose() * X;
  A.diagonal().array() += ridge * static_cast<double>(rows);
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
  std::vector<double> psi;
  for (std::size_t i = 0; i < vn.players(); ++i) {
    Eigen::VectorXd y(rows);
    for (Eigen::Index r = 0; r < rows; ++r) y(r) = data.returns[static_cast<std::size_t>(r)][i];
    const Eigen::VectorXd w = ldlt.solve(X.transpose() * y);
    // Layout: weights then bias.
    for (Eigen::Index c = 0; c < dim; ++c) psi.push_back(w(c));
    psi.push_back(w(dim));
  }
  return psi;
}

/// Mean squared regression error of the value heads on samples.
inline double value_fit_error(const ValueNet& vn, std::span<const double> psi, const ValueSamples& data) {
  double se = 0.0;
  for (std::size_t r = 0; r < data.features.size(); ++r) {
    for (std::size_t i = 0; i < vn.players(); ++i) {
      const double d = vn.value(i, psi, std::span<const double>(data.features[r])) - data.returns[r][i];
      se += d * d;
    }
  }
  return se / static_cast<double>(data.features.size() * vn.players());
}

/// Gradient regression (Adam) for any head architecture; returns the error
/// after each step.
inline std::vector<double> fit_value_gradient(const ValueNet& vn, std::vector<double>& psi, const ValueSamples& data,
                                              std::size_t steps, double lr) {
  Optimizer opt(UpdateRule::adam, lr, psi.size());
  std::vector<double> errors;
  std::vector<double> grad(psi.size());
  for (std::size_t k = 0; k < steps; ++k) {
    const double err = value_and_gradient(
        [&](std::span<const Var> ps) {
          Var acc(0.0);
          for (std::size_t r = 0; r < data.features.size(); ++r) {
            const std::vector<Var> f(data.features[r].begin(), data.features[r].end());
            for (std::size_t i = 0; i < vn.players(); ++i) {
              const Var d = vn.value(i, ps, std::span<const Var>(f)) - data.returns[r][i];
              acc += d * d;
            }
          }
          return acc / static_cast<double>(data.features.size() * vn.players());
        },
        psi, grad);
    errors.push_back(err);
    opt.step(psi, grad, -1.0);
  }
  return errors;
}

// ---------------------------------------------------------------------------
// Neural projection method.

struct NpmConfig {
  double lr = 1e-3;
  UpdateRule rule = UpdateRule::sgd;
  std::size_t iters = 1000;
  std::size_t states_per_iter = 16;
  std::size_t shocks_per_state = 1;
  std::size_t eval_every = 0;  // 0: only the final checkpoint
  std::vector<std::size_t> value_hidden;
  double bellman_weight = 1.0;
  // Training fits multipliers over every constraint and adds the
  // complementarity term mean_s sum lambda g (g >= 0 on generator outputs);
  // with a hard active set the stationarity residual alone gives no
  // gradient toward making a constraint bind.
  double train_active_tol = std::numeric_limits<double>::infinity();
  double complementarity_weight = 1.0;
  // Step decay: every lr_decay_every iterations (0: never) both learning
  // rates are multiplied by lr_decay.
  std::size_t lr_decay_every = 0;
  double lr_decay = 0.1;
  KktOptions kkt;
  double divergence_threshold = 1e6;

  void validate() const {
    if (!(lr > 0.0) || iters < 1 || states_per_iter < 1) throw SpecError("bad projection-method config");
    if (!(lr_decay > 0.0) || lr_decay > 1.0) throw SpecError("npm lr_decay must be in (0, 1]");
  }
};

struct NpmResult {
  std::vector<double> theta;
  std::vector<double> psi;
  ValueNet value_net;
  TrainTrace trace;  // checkpoints carry the loss in cumulative_regret
};

/// Gradient descent on first-order violation + Bellman error over
/// (theta, psi), multipliers held fixed within each step.
template <ParameterizationScheme S>
NpmResult train_npm(const S& sc, const NpmConfig& cfg, std::uint64_t seed, std::vector<double> theta0 = {}) {
  cfg.validate();
  const auto& game = sc.game();
  Rng rng(stream_seed(seed, 0x4E9));
  NpmResult out;
  out.theta = theta0.empty() ? sc.init_theta(rng) : std::move(theta0);
  {
    const StateVec<double> s0 = game.sample_initial(rng);
    out.value_net = ValueNet(game.num_players(), state_features(sc, s0).size(), cfg.value_hidden);
  }
  out.psi = out.value_net.init(rng);
  Optimizer opt_t(cfg.rule, cfg.lr, out.theta.size());
  Optimizer opt_p(cfg.rule, cfg.lr, out.psi.size());
  const std::size_t nt = out.theta.size();
  std::vector<double> joint(nt + out.psi.size()), grad(joint.size());
  double loss = 0.0;
  auto checkpoint = [&](std::size_t it) {
    Checkpoint c;
    c.iteration = it;
    c.theta = out.theta;
    c.cumulative_regret = loss;
    c.exploitability = std::numeric_limits<double>::quiet_NaN();
    out.trace.checkpoints.push_back(std::move(c));
  };
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    if (cfg.lr_decay_every > 0 && it > 0 && it % cfg.lr_decay_every == 0) {
      opt_t.set_lr(opt_t.lr() * cfg.lr_decay);
      opt_p.set_lr(opt_p.lr() * cfg.lr_decay);
    }
    const StateSample batch = sample_states(game, cfg.states_per_iter, cfg.shocks_per_state, seed, 0x100000 + it);
    std::copy(out.theta.begin(), out.theta.end(), joint.begin());
    std::copy(out.psi.begin(), out.psi.end(), joint.begin() + static_cast<std::ptrdiff_t>(nt));
    loss = value_and_gradient(
        [&](std::span<const Var> x) {
          const auto th = x.first(nt);
          const auto ps = x.subspan(nt);
          KktOptions train = cfg.kkt;
          train.active_tol = cfg.train_active_tol;
          train.slack_penalty = cfg.complementarity_weight;
          Var comp(0.0);
          const Var fov = first_order_violation_t<Var>(sc, out.value_net, th, ps, batch, train, nullptr,
                                                       cfg.complementarity_weight > 0.0 ? &comp : nullptr);
          return fov + cfg.complementarity_weight * comp +
                 cfg.bellman_weight * bellman_error_t<Var>(sc, out.value_net, th, ps, batch, cfg.kkt.bootstrap);
        },
        joint, grad);
    opt_t.step(out.theta, std::span<const double>(grad).first(nt), -1.0);
    opt_p.step(out.psi, std::span<const double>(grad).subspan(nt), -1.0);
    const double norm = std::max(l2_norm(out.theta), l2_norm(out.psi));
    if (!std::isfinite(norm) || norm > cfg.divergence_threshold) {
      out.trace.diverged = true;
      out.trace.message = "parameter norm exceeded " + std::to_string(cfg.divergence_threshold) + " at iteration " +
                          std::to_string(it + 1);
      break;
    }
    if (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) checkpoint(it + 1);
  }
  if (out.trace.checkpoints.empty() || out.trace.checkpoints.back().theta != out.theta) {
    checkpoint(cfg.iters);
  }
  out.trace.theta = out.theta;
  return out;
}

// ---------------------------------------------------------------------------
// Metric records.

struct MetricsRecord {
  double exploitability = 0.0;
  double exploitability_se = 0.0;
  double fov = 0.0;
  double bellman = 0.0;
  double walras = 0.0;       // max |walras residual| along evaluation paths
  double feasibility = 0.0;  // max constraint violation along evaluation paths
};

struct MetricsConfig {
  std::size_t n_states = 128;
  std::size_t shocks_per_state = 4;
  KktOptions kkt;
  AscentConfig ascent;
  RolloutConfig value_fit;  // rollouts for the regression value head
  std::size_t path_trajectories = 16;
};

/// All metrics for policy theta. If psi is empty an affine value head is
/// fitted by regression on Monte-Carlo returns of theta.
template <ParameterizationScheme S>
MetricsRecord evaluate_policy(const S& sc, std::span<const double> theta, const ValueNet* vn_in,
                              std::span<const double> psi_in, const MetricsConfig& cfg, std::uint64_t seed) {
  const auto& game = sc.game();
  MetricsRecord rec;
  const ExploitabilityResult ex = exploitability_estimate(sc, theta, cfg.ascent, stream_seed(seed, 0xE1));
  rec.exploitability = ex.value;
  rec.exploitability_se = ex.std_err;

  ValueNet vn;
  std::vector<double> psi(psi_in.begin(), psi_in.end());
  if (vn_in && !psi.empty()) {
    vn = *vn_in;
  } else {
    Rng rng(seed);
    vn = ValueNet(game.num_players(), state_features(sc, game.sample_initial(rng)).size());
    RolloutConfig rc = cfg.value_fit;
    rc.seed = stream_seed(seed, 0xF17);
    psi = fit_value_ridge(vn, collect_value_samples(sc, theta, rc));
  }
  const StateSample states = sample_states(game, cfg.n_states, cfg.shocks_per_state, seed, 0x57A7E);
  rec.fov = first_order_violation(sc, vn, theta, std::span<const double>(psi), states, cfg.kkt);
  rec.bellman = bellman_error(sc, vn, theta, std::span<const double>(psi), states, cfg.kkt.bootstrap);

  RolloutConfig rc = cfg.value_fit;
  rc.n_trajectories = cfg.path_trajectories;
  rc.seed = stream_seed(seed, 0x9A7);
  for (const auto& h : sample_histories(sc, theta, rc)) {
    for (std::size_t t = 0; t < h.length(); ++t) {
      rec.feasibility = std::max(rec.feasibility, -min_constraint(game.constraints(h.states[t], h.actions[t])));
      if constexpr (requires { game.economy(); }) {
        const auto& econ = game.economy();
        rec.walras = std::max(rec.walras, std::fabs(walras_residual(econ, parse_state(econ, h.states[t]),
                                                                    to_market_action(econ, h.actions[t]))));
      }
    }
  }
  rec.feasibility = std::max(0.0, rec.feasibility);
  return rec;
}

/// Each metric divided by its mean over the baseline records.
inline MetricsRecord normalized_metrics(const MetricsRecord& raw, std::span<const MetricsRecord> baseline) {
  if (baseline.empty()) throw SpecError("normalization needs baseline records");
  double ex = 0.0, fov = 0.0, be = 0.0;
  for (const auto& b : baseline) {
    ex += b.exploitability;
    fov += b.fov;
    be += b.bellman;
  }
  const auto n = static_cast<double>(baseline.size());
  ex /= n;
  fov /= n;
  be /= n;
  if (!(ex > 0.0) || !(fov > 0.0) || !(be > 0.0)) throw SpecError("degenerate baseline: zero metric mean");
  MetricsRecord out = raw;
  out.exploitability = raw.exploitability / ex;
  out.exploitability_se = raw.exploitability_se / ex;
  out.fov = raw.fov / fov;
  out.bellman = raw.bellman / be;
  return out;
}

struct MetricRow {
  std::string run_id, method, economy_id, metric;
  double raw = 0.0, normalized = 0.0, std_err = 0.0;
};

inline void write_metric_csv(std::ostream& os, std::span<const MetricRow> rows) {
  os << "run_id,method,economy_id,metric,raw,normalized,std_err\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g", r.raw, r.normalized, r.std_err);
    os << r.run_id << ',' << r.method << ',' << r.economy_id << ',' << r.metric << ',' << buf << '\n';
  }
}

inline std::vector<MetricRow> metric_rows(const std::string& run_id, const std::string& method,
                                          const std::string& economy_id, const MetricsRecord& raw,
                                          const MetricsRecord& norm) {
  return {{run_id, method, economy_id, "fov", raw.fov, norm.fov, 0.0},
          {run_id, method, economy_id, "bellman", raw.bellman, norm.bellman, 0.0},
          {run_id, method, economy_id, "exploitability", raw.exploitability, norm.exploitability,
           raw.exploitability_se}};
}

}  // namespace mpg
