#pragma once

// Markov exchange economies and their pseudo-game: n consumers choose
// consumption bundles and asset portfolios, one auctioneer chooses commodity
// and asset prices.
//
// State vector layout: [omega, e (n x m, row-major), tau (n x m)].
// Consumer action: [x (m), b (k)]. Auctioneer action: [p (m), q (k)].

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mpg/ad.hpp"
#include "mpg/game.hpp"
#include "mpg/network.hpp"
#include "mpg/numeric.hpp"
#include "mpg/policies.hpp"

namespace mpg {

enum class UtilityKind { linear, cobb_douglas, leontief };

inline std::string to_string(UtilityKind k) {
  switch (k) {
    case UtilityKind::linear: return "linear";
    case UtilityKind::cobb_douglas: return "cobb-douglas";
    case UtilityKind::leontief: return "leontief";
  }
  return "?";
}
inline UtilityKind utility_kind_from_string(const std::string& s) {
  if (s == "linear") return UtilityKind::linear;
  if (s == "cobb-douglas" || s == "cobb_douglas") return UtilityKind::cobb_douglas;
  if (s == "leontief") return UtilityKind::leontief;
  throw SpecError("unknown utility kind '" + s + "'");
}

struct UtilityFamily {
  UtilityKind kind = UtilityKind::linear;
  double leontief_eps = 0.05;  // softmin temperature
  double floor = 1e-8;         // Cobb-Douglas positivity floor
};

/// Smooth utility used as the consumer's reward.
///   linear        sum_j tau_j x_j
///   cobb-douglas  prod_j max(x_j, floor)^(tau_j / sum tau), concave
///   leontief      softmin_eps(x_j / tau_j), within eps log(m) below the min
template <class T>
T utility(std::span<const T> x, std::span<const T> tau, const UtilityFamily& fam) {
  switch (fam.kind) {
    case UtilityKind::linear:
      return dot(x, tau);
    case UtilityKind::cobb_douglas: {
      T total(0.0);
      for (const T& t : tau) total += t;
      T acc(0.0);
      for (std::size_t j = 0; j < x.size(); ++j) {
        // Below the floor the bundle entry is clamped (zero gradient).
        const T xj = value_of(x[j]) < fam.floor ? T(fam.floor) : x[j];
        acc += tau[j] * log(xj);
      }
      return exp(acc / total);
    }
    case UtilityKind::leontief: {
      std::vector<T> r(x.size());
      for (std::size_t j = 0; j < x.size(); ++j) r[j] = x[j] / tau[j];
      return soft_minimum(std::span<const T>(r), fam.leontief_eps);
    }
  }
  return T(0.0);
}
template <class T>
T utility(const std::vector<T>& x, const std::vector<T>& tau, const UtilityFamily& fam) {
  return utility(std::span<const T>(x), std::span<const T>(tau), fam);
}

/// Exact (unsmoothed) utility; differs from `utility` only for Leontief.
inline double utility_exact(std::span<const double> x, std::span<const double> tau,
                            const UtilityFamily& fam) {
  if (fam.kind != UtilityKind::leontief) return utility(x, tau, fam);
  double lo = x[0] / tau[0];
  for (std::size_t j = 1; j < x.size(); ++j) lo = std::min(lo, x[j] / tau[j]);
  return lo;
}

struct BudgetCheck {
  bool member = false;
  double slack = 0.0;
};

/// slack = e.p - x.p - b.q; member iff slack >= -tol.
inline BudgetCheck budget_membership(std::span<const double> x, std::span<const double> b,
                                     std::span<const double> p, std::span<const double> q,
                                     std::span<const double> e, double tol = kUserFeasibilityTol) {
  const double slack = dot(e, p) - dot(x, p) - dot(b, q);
  return {slack >= -tol, slack};
}

/// e_base + B R with e_base n x m, B n x k, R k x m, all row-major.
template <class T>
std::vector<T> endowment_update(std::span<const T> e_base, std::span<const T> B,
                                std::span<const double> R, std::size_t n, std::size_t m,
                                std::size_t k) {
  if (e_base.size() != n * m || B.size() != n * k || R.size() != k * m) {
    throw SpecError("endowment_update: shape mismatch");
  }
  std::vector<T> out(e_base.begin(), e_base.end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += B[i * k + a] * R[a * m + j];
    }
  }
  return out;
}

enum class EconomyTransition { deterministic, stochastic };

inline std::string to_string(EconomyTransition t) {
  return t == EconomyTransition::deterministic ? "deterministic" : "stochastic";
}
inline EconomyTransition transition_from_string(const std::string& s) {
  if (s == "deterministic") return EconomyTransition::deterministic;
  if (s == "stochastic") return EconomyTransition::stochastic;
  throw SpecError("unknown transition kind '" + s + "'");
}

struct MarkovExchangeEconomy {
  std::size_t n = 3;  // consumers
  std::size_t m = 3;  // commodities
  std::size_t k = 1;  // assets
  std::size_t num_world_states = 2;
  std::vector<double> returns;  // [omega][asset][commodity]
  UtilityFamily utility;
  double gamma = 0.9;
  std::size_t horizon = 10;  // recommended rollout truncation
  EconomyTransition transition = EconomyTransition::deterministic;

  // Sampling parameters.
  double det_endowment = 0.01;
  double stoch_offset = 0.002;
  double stoch_lo = 0.01;
  double stoch_hi = 0.1;
  double init_lo = 0.01;
  double init_hi = 0.1;
  double type_lo = 1.0;
  double type_hi = 5.0;

  // Box bounds, filled by derive_bounds().
  double portfolio_bound = 0.0;    // |b| <= portfolio_bound
  double consumption_bound = 1.0;  // x <= consumption_bound
  double asset_price_bound = 1.0;  // q <= asset_price_bound

  std::optional<std::vector<double>> dirac_state;  // fixed initial state
  std::optional<std::size_t> finite_spot_states;   // |E x T| when finite
  std::uint64_t seed = 0;

  [[nodiscard]] std::size_t state_dim() const { return 1 + 2 * n * m; }

  [[nodiscard]] std::span<const double> return_matrix(std::size_t omega) const {
    return std::span<const double>(returns).subspan(omega * k * m, k * m);
  }

  [[nodiscard]] double max_return() const {
    double r = 0.0;
    for (double v : returns) r = std::max(r, std::fabs(v));
    return r;
  }

  [[nodiscard]] double min_base_endowment() const {
    return transition == EconomyTransition::deterministic ? det_endowment : stoch_offset + stoch_lo;
  }
  [[nodiscard]] double max_base_endowment() const {
    return transition == EconomyTransition::deterministic ? det_endowment : stoch_offset + stoch_hi;
  }

  /// Portfolio box keeps every next-period endowment strictly positive; the
  /// consumption and asset-price boxes cover every reachable endowment.
  void derive_bounds() {
    const double rmax = max_return();
    portfolio_bound = (k > 0 && rmax > 0.0) ? 0.9 * min_base_endowment() / (static_cast<double>(k) * rmax) : 0.0;
    double supply = static_cast<double>(n) * (max_base_endowment() + static_cast<double>(k) * portfolio_bound * rmax);
    supply = std::max(supply, 1.0);
    if (dirac_state) {
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += (*dirac_state)[1 + i * m + j];
        supply = std::max(supply, s);
      }
    }
    consumption_bound = supply;
    asset_price_bound = static_cast<double>(m) * supply;
  }

  void validate() const {
    if (n < 1 || m < 1) throw SpecError("economy needs at least one consumer and one commodity");
    if (num_world_states < 1) throw SpecError("economy needs at least one world state");
    if (returns.size() != num_world_states * k * m) throw SpecError("return matrices have wrong size");
    for (double r : returns) {
      if (!std::isfinite(r)) throw SpecError("non-finite return");
    }
    if (!(gamma > 0.0 && gamma < 1.0)) throw SpecError("discount must lie in (0, 1)");
    if (!(consumption_bound > 0.0) || !std::isfinite(consumption_bound)) {
      throw SpecError("unbounded endowment space");
    }
    if (k > 0 && !(portfolio_bound > 0.0)) throw SpecError("portfolio bound must be positive");
    if (utility.kind == UtilityKind::leontief && !(utility.leontief_eps > 0.0)) {
      throw SpecError("leontief smoothing must be positive");
    }
    if (dirac_state && dirac_state->size() != state_dim()) throw SpecError("dirac state has wrong dimension");
  }
};

// ---------------------------------------------------------------------------
// Structured views of states and actions.

struct EconomyState {
  std::size_t omega = 0;
  std::vector<double> e;    // n x m
  std::vector<double> tau;  // n x m
};

inline StateVec<double> to_state_vec(const EconomyState& s) {
  StateVec<double> v{static_cast<double>(s.omega)};
  v.insert(v.end(), s.e.begin(), s.e.end());
  v.insert(v.end(), s.tau.begin(), s.tau.end());
  return v;
}

inline EconomyState parse_state(const MarkovExchangeEconomy& econ, std::span<const double> s) {
  const std::size_t nm = econ.n * econ.m;
  if (s.size() != econ.state_dim()) throw SpecError("state has wrong dimension");
  EconomyState out;
  out.omega = static_cast<std::size_t>(std::lround(s[0]));
  out.e.assign(s.begin() + 1, s.begin() + 1 + static_cast<std::ptrdiff_t>(nm));
  out.tau.assign(s.begin() + 1 + static_cast<std::ptrdiff_t>(nm), s.end());
  return out;
}

struct MarketAction {
  std::vector<double> x;  // n x m
  std::vector<double> b;  // n x k
  std::vector<double> p;  // m
  std::vector<double> q;  // k
};

inline ActionProfile<double> to_profile(const MarkovExchangeEconomy& econ, const MarketAction& a) {
  ActionProfile<double> prof(econ.n + 1);
  for (std::size_t i = 0; i < econ.n; ++i) {
    prof[i].assign(a.x.begin() + static_cast<std::ptrdiff_t>(i * econ.m),
                   a.x.begin() + static_cast<std::ptrdiff_t>((i + 1) * econ.m));
    prof[i].insert(prof[i].end(), a.b.begin() + static_cast<std::ptrdiff_t>(i * econ.k),
                   a.b.begin() + static_cast<std::ptrdiff_t>((i + 1) * econ.k));
  }
  prof[econ.n] = a.p;
  prof[econ.n].insert(prof[econ.n].end(), a.q.begin(), a.q.end());
  return prof;
}

inline MarketAction to_market_action(const MarkovExchangeEconomy& econ, const ActionProfile<double>& prof) {
  MarketAction a;
  for (std::size_t i = 0; i < econ.n; ++i) {
    a.x.insert(a.x.end(), prof[i].begin(), prof[i].begin() + static_cast<std::ptrdiff_t>(econ.m));
    a.b.insert(a.b.end(), prof[i].begin() + static_cast<std::ptrdiff_t>(econ.m), prof[i].end());
  }
  a.p.assign(prof[econ.n].begin(), prof[econ.n].begin() + static_cast<std::ptrdiff_t>(econ.m));
  a.q.assign(prof[econ.n].begin() + static_cast<std::ptrdiff_t>(econ.m), prof[econ.n].end());
  return a;
}

/// Value of excess demand: p.(sum x - sum e) + q.(sum b).
inline double walras_residual(const MarkovExchangeEconomy& econ, const EconomyState& s,
                              const MarketAction& a) {
  double r = 0.0;
  for (std::size_t j = 0; j < econ.m; ++j) {
    double z = 0.0;
    for (std::size_t i = 0; i < econ.n; ++i) z += a.x[i * econ.m + j] - s.e[i * econ.m + j];
    r += a.p[j] * z;
  }
  for (std::size_t c = 0; c < econ.k; ++c) {
    double z = 0.0;
    for (std::size_t i = 0; i < econ.n; ++i) z += a.b[i * econ.k + c];
    r += a.q[c] * z;
  }
  return r;
}

struct FeasibilityResidual {
  std::vector<double> commodity;  // max(0, sum x - sum e)
  std::vector<double> asset;      // max(0, sum b)
};

inline FeasibilityResidual feasibility_residual(const MarkovExchangeEconomy& econ,
                                                const EconomyState& s, const MarketAction& a) {
  FeasibilityResidual out{std::vector<double>(econ.m, 0.0), std::vector<double>(econ.k, 0.0)};
  for (std::size_t j = 0; j < econ.m; ++j) {
    double z = 0.0;
    for (std::size_t i = 0; i < econ.n; ++i) z += a.x[i * econ.m + j] - s.e[i * econ.m + j];
    out.commodity[j] = std::max(0.0, z);
  }
  for (std::size_t c = 0; c < econ.k; ++c) {
    double z = 0.0;
    for (std::size_t i = 0; i < econ.n; ++i) z += a.b[i * econ.k + c];
    out.asset[c] = std::max(0.0, z);
  }
  return out;
}

// ---------------------------------------------------------------------------
// The pseudo-game.

/// Players 0..n-1 are consumers, player n is the auctioneer.
class ExchangeGame {
 public:
  explicit ExchangeGame(MarkovExchangeEconomy econ) : econ_(std::move(econ)) { econ_.validate(); }

  [[nodiscard]] const MarkovExchangeEconomy& economy() const { return econ_; }
  [[nodiscard]] std::size_t num_players() const { return econ_.n + 1; }
  [[nodiscard]] std::size_t state_dim() const { return econ_.state_dim(); }
  [[nodiscard]] std::size_t action_dim(std::size_t) const { return econ_.m + econ_.k; }
  [[nodiscard]] double discount() const { return econ_.gamma; }
  [[nodiscard]] TransitionKind transition_kind() const {
    return econ_.transition == EconomyTransition::deterministic ? TransitionKind::deterministic
                                                               : TransitionKind::exogenous_shock;
  }

  [[nodiscard]] Box action_box(std::size_t i) const {
    Box box;
    if (i < econ_.n) {
      box.lo.assign(econ_.m, 0.0);
      box.hi.assign(econ_.m, econ_.consumption_bound);
      box.lo.insert(box.lo.end(), econ_.k, -econ_.portfolio_bound);
      box.hi.insert(box.hi.end(), econ_.k, econ_.portfolio_bound);
    } else {
      box.lo.assign(econ_.m, 0.0);
      box.hi.assign(econ_.m, 1.0);
      box.lo.insert(box.lo.end(), econ_.k, 0.0);
      box.hi.insert(box.hi.end(), econ_.k, econ_.asset_price_bound);
    }
    return box;
  }

  /// Bound on |r_i| over feasible profiles.
  [[nodiscard]] double reward_bound() const {
    const double xb = econ_.consumption_bound;
    const double md = static_cast<double>(econ_.m);
    double consumer = 0.0;
    switch (econ_.utility.kind) {
      case UtilityKind::linear: consumer = econ_.type_hi * md * xb; break;
      case UtilityKind::cobb_douglas: consumer = xb; break;  // weighted geometric mean <= max_j x_j
      case UtilityKind::leontief:
        consumer = xb / econ_.type_lo + econ_.utility.leontief_eps * std::log(md);
        break;
    }
    const double auctioneer = xb + econ_.asset_price_bound * static_cast<double>(econ_.k * econ_.n) * econ_.portfolio_bound;
    return std::max(consumer, auctioneer);
  }

  StateVec<double> sample_initial(Rng& rng) const {
    if (econ_.dirac_state) return *econ_.dirac_state;
    const std::size_t n = econ_.n, m = econ_.m;
    EconomyState s;
    s.e = uniform_vector(rng, n * m, econ_.init_lo, econ_.init_hi);
    for (std::size_t j = 0; j < m; ++j) {
      double col = 0.0;
      for (std::size_t i = 0; i < n; ++i) col += s.e[i * m + j];
      for (std::size_t i = 0; i < n; ++i) s.e[i * m + j] /= col;
    }
    s.tau = uniform_vector(rng, n * m, econ_.type_lo, econ_.type_hi);
    return to_state_vec(s);
  }

  /// Shock layout: [omega', base endowments (n x m)].
  std::vector<double> sample_shock(Rng& rng) const {
    const std::size_t nm = econ_.n * econ_.m;
    std::vector<double> shock(1 + nm);
    if (econ_.transition == EconomyTransition::deterministic) {
      shock[0] = 0.0;
      std::fill(shock.begin() + 1, shock.end(), econ_.det_endowment);
    } else {
      shock[0] = static_cast<double>(uniform_index(rng, econ_.num_world_states));
      for (std::size_t d = 0; d < nm; ++d) {
        shock[1 + d] = econ_.stoch_offset + uniform(rng, econ_.stoch_lo, econ_.stoch_hi);
      }
    }
    return shock;
  }

  template <class T>
  std::vector<T> reward(const StateVec<T>& s, const ActionProfile<T>& a) const {
    const std::size_t n = econ_.n, m = econ_.m, k = econ_.k;
    std::vector<T> r(n + 1);
    const std::span<const T> sv(s);
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = utility(std::span<const T>(a[i]).first(m), sv.subspan(1 + n * m + i * m, m), econ_.utility);
    }
    const std::vector<T> z = excess_demand(s, a);
    const std::span<const T> pq(a[n]);
    r[n] = dot(pq.first(m), std::span<const T>(z).first(m)) +
           dot(pq.subspan(m, k), std::span<const T>(z).subspan(m, k));
    return r;
  }

  /// Consumer i: [budget, sum e - sum x (m), -sum b (k), x (m),
  /// xmax - x (m), b + bmax (k), bmax - b (k)].
  /// Auctioneer: [p (m), sum p - 1, 1 - sum p, q (k), qmax - q (k)].
  template <class T>
  ConstraintEval<T> constraints(const StateVec<T>& s, const ActionProfile<T>& a) const {
    const std::size_t n = econ_.n, m = econ_.m, k = econ_.k;
    const double bm = econ_.portfolio_bound, xb = econ_.consumption_bound;
    const std::vector<T> z = excess_demand(s, a);
    const std::span<const T> p = std::span<const T>(a[n]).first(m);
    const std::span<const T> q = std::span<const T>(a[n]).subspan(m, k);
    ConstraintEval<T> g(n + 1);
    for (std::size_t i = 0; i < n; ++i) {
      const std::span<const T> x = std::span<const T>(a[i]).first(m);
      const std::span<const T> b = std::span<const T>(a[i]).subspan(m, k);
      auto& gi = g[i];
      gi.reserve(1 + 3 * m + 3 * k);
      gi.push_back(dot(std::span<const T>(s).subspan(1 + i * m, m), p) - dot(x, p) - dot(b, q));
      for (std::size_t j = 0; j < m; ++j) gi.push_back(-z[j]);
      for (std::size_t c = 0; c < k; ++c) gi.push_back(-z[m + c]);
      for (std::size_t j = 0; j < m; ++j) gi.push_back(x[j]);
      for (std::size_t j = 0; j < m; ++j) gi.push_back(xb - x[j]);
      for (std::size_t c = 0; c < k; ++c) gi.push_back(b[c] + bm);
      for (std::size_t c = 0; c < k; ++c) gi.push_back(bm - b[c]);
    }
    auto& ga = g[n];
    for (std::size_t j = 0; j < m; ++j) ga.push_back(p[j]);
    const T sp = sum(p);
    ga.push_back(sp - 1.0);
    ga.push_back(1.0 - sp);
    for (std::size_t c = 0; c < k; ++c) ga.push_back(q[c]);
    for (std::size_t c = 0; c < k; ++c) ga.push_back(econ_.asset_price_bound - q[c]);
    return g;
  }

  template <class T>
  StateVec<T> transition(const StateVec<T>& s, const ActionProfile<T>& a,
                         const std::vector<double>& shock) const {
    const std::size_t n = econ_.n, m = econ_.m, k = econ_.k;
    const std::size_t omega = static_cast<std::size_t>(std::lround(shock[0]));
    StateVec<T> next(s.size());
    next[0] = T(shock[0]);
    std::vector<T> base(shock.begin() + 1, shock.end());
    std::vector<T> B(n * k);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < k; ++c) B[i * k + c] = a[i][m + c];
    }
    const std::vector<T> e = endowment_update(std::span<const T>(base), std::span<const T>(B),
                                              econ_.return_matrix(omega), n, m, k);
    std::copy(e.begin(), e.end(), next.begin() + 1);
    std::copy(s.begin() + 1 + static_cast<std::ptrdiff_t>(n * m), s.end(),
              next.begin() + 1 + static_cast<std::ptrdiff_t>(n * m));
    return next;
  }

  /// [sum x - sum e (m), sum b (k)].
  template <class T>
  std::vector<T> excess_demand(const StateVec<T>& s, const ActionProfile<T>& a) const {
    const std::size_t n = econ_.n, m = econ_.m, k = econ_.k;
    std::vector<T> z(m + k, T(0.0));
    for (std::size_t j = 0; j < m; ++j) {
      std::vector<T> terms;
      terms.reserve(2 * n);
      for (std::size_t i = 0; i < n; ++i) {
        terms.push_back(a[i][j]);
        terms.push_back(-s[1 + i * m + j]);
      }
      z[j] = sum(terms);
    }
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<T> terms;
      for (std::size_t i = 0; i < n; ++i) terms.push_back(a[i][m + c]);
      z[m + c] = sum(terms);
    }
    return z;
  }

 private:
  MarkovExchangeEconomy econ_;
};

static_assert(MarkovPseudoGame<ExchangeGame>);
static_assert(MarkovPseudoGame<RewardScaledGame<ExchangeGame>>);

// ---------------------------------------------------------------------------
// Feasible-by-construction parameterization of the exchange pseudo-game.
//
// Generator outputs, in order: price logits (m), asset-price logits (k),
// supply-use logits (m), allocation logits (n x m), portfolio logits (n x k).
//   p = softmax, q = qmax sigmoid
//   x_ij = S_j sigmoid(v_j) softmax_i(u_ij)        (aggregate supply exact)
//   b_ia = bmax tanh, then longs scaled so that sum_i b_ia <= 0
//   each consumer then budget-scaled toward (x = 0, b = -bmax).
// Consumer adversary: x' = cap sigmoid, b' in [-bmax, min(bmax, bcap)], then
// the same budget scale. Auctioneer adversary: p' = softmax, q' = qmax sigmoid.

struct ExchangeSchemeConfig {
  std::vector<std::size_t> hidden;  // empty: affine
  Activation activation = Activation::tanh;
  std::vector<std::size_t> adversary_hidden;
  double kappa = kDefaultKappa;
  double supply_logit_offset = 0.0;
};

class ExchangeScheme {
 public:
  using game_type = ExchangeGame;

  ExchangeScheme(ExchangeGame game, ExchangeSchemeConfig cfg = {})
      : game_(std::move(game)), cfg_(std::move(cfg)) {
    const auto& ec = game_.economy();
    const std::size_t n = ec.n, m = ec.m, k = ec.k;
    feat_dim_ = ec.num_world_states + 2 * n * m;
    gen_arch_ = {feat_dim_, cfg_.hidden, m + k + m + n * m + n * k, cfg_.activation};
    std::size_t off = 0;
    for (std::size_t i = 0; i <= n; ++i) {
      Architecture arch{feat_dim_ + m + k + m + k, cfg_.adversary_hidden, m + k, cfg_.activation};
      dev_arch_.push_back(arch);
      dev_offset_.push_back(off);
      off += arch.param_count();
    }
    phi_size_ = off;

    std::size_t o = 0;
    auto add = [&](BlockKind kind, std::size_t size, const std::string& label, double lo = 0.0, double hi = 1.0) {
      proj_.blocks.push_back({kind, o, size, lo, hi, label});
      o += size;
    };
    add(BlockKind::simplex, m, "p");
    add(BlockKind::box, k, "q", 0.0, ec.asset_price_bound);
    add(BlockKind::budget_scale, m + n * m, "x");
    add(BlockKind::budget_scale, n * k, "b");
    proj_.raw_size = o;
    proj_.validate();
  }

  [[nodiscard]] const ExchangeGame& game() const { return game_; }
  [[nodiscard]] const ExchangeSchemeConfig& config() const { return cfg_; }
  [[nodiscard]] const ProjectionSpec& projection() const { return proj_; }
  [[nodiscard]] const Architecture& generator_architecture() const { return gen_arch_; }
  [[nodiscard]] std::size_t feature_dim() const { return feat_dim_; }
  [[nodiscard]] std::size_t theta_size() const { return gen_arch_.param_count(); }
  [[nodiscard]] std::size_t phi_size() const { return phi_size_; }
  [[nodiscard]] std::uint64_t theta_architecture_hash() const { return mix_seed(gen_arch_.hash() ^ 0x7e57); }
  [[nodiscard]] std::uint64_t phi_architecture_hash() const {
    std::uint64_t h = 0;
    for (const auto& a : dev_arch_) h = mix_seed(h ^ a.hash());
    return h;
  }
  std::vector<double> init_theta(Rng& rng) const { return init_params(gen_arch_, rng); }
  std::vector<double> init_phi(Rng& rng) const { return uniform_vector(rng, phi_size_, -0.05, 0.05); }

  /// Network input: one-hot world state, n * endowments, types / type_hi.
  template <class T>
  std::vector<T> features(const StateVec<T>& s) const {
    const auto& ec = game_.economy();
    const std::size_t nm = ec.n * ec.m;
    std::vector<T> f(feat_dim_, T(0.0));
    const auto omega = static_cast<std::size_t>(std::lround(value_of(s[0])));
    if (omega < ec.num_world_states) f[omega] = T(1.0);
    const double scale = static_cast<double>(ec.n);
    for (std::size_t d = 0; d < nm; ++d) {
      f[ec.num_world_states + d] = s[1 + d] * scale;
      f[ec.num_world_states + nm + d] = s[1 + nm + d] / ec.type_hi;
    }
    return f;
  }

  template <class T>
  ActionProfile<T> policy(std::span<const T> theta, const StateVec<T>& s) const {
    const auto& ec = game_.economy();
    const std::size_t n = ec.n, m = ec.m, k = ec.k;
    const double bm = ec.portfolio_bound;
    const std::vector<T> feat = features(s);
    const std::vector<T> raw = forward(gen_arch_, theta, std::span<const T>(feat));
    const std::span<const T> r(raw);

    const std::vector<T> p = project_simplex(r.first(m));
    std::vector<T> q(k);
    for (std::size_t c = 0; c < k; ++c) q[c] = ec.asset_price_bound * sigmoid(r[m + c]);

    const std::size_t v_off = m + k, u_off = v_off + m, b_off = u_off + n * m;
    std::vector<T> x(n * m);
    for (std::size_t j = 0; j < m; ++j) {
      std::vector<T> supply_terms(n);
      std::vector<T> logits(n);
      for (std::size_t i = 0; i < n; ++i) {
        supply_terms[i] = s[1 + i * m + j];
        logits[i] = r[u_off + i * m + j];
      }
      const T used = sum(supply_terms) * sigmoid(r[v_off + j] + cfg_.supply_logit_offset);
      const std::vector<T> share = softmax(std::span<const T>(logits));
      for (std::size_t i = 0; i < n; ++i) x[i * m + j] = used * share[i];
    }

    std::vector<T> b(n * k);
    if (k > 0) {
      const double total = static_cast<double>(n) * bm;
      for (std::size_t c = 0; c < k; ++c) {
        std::vector<T> shifted(n);
        for (std::size_t i = 0; i < n; ++i) shifted[i] = bm * tanh(r[b_off + i * k + c]) + bm;
        const T longs = sum(shifted);
        const T factor = total / smooth_max(T(total), longs, cfg_.kappa / total);
        for (std::size_t i = 0; i < n; ++i) b[i * k + c] = shifted[i] * factor - bm;
      }
    }

    ActionProfile<T> a(n + 1);
    const std::vector<double> anchor(k, -bm);
    for (std::size_t i = 0; i < n; ++i) {
      const auto bundle = budget_scale(std::span<const T>(x).subspan(i * m, m),
                                       std::span<const T>(b).subspan(i * k, k), std::span<const T>(p),
                                       std::span<const T>(q), std::span<const T>(s).subspan(1 + i * m, m),
                                       std::span<const double>(anchor), cfg_.kappa);
      a[i] = bundle.x;
      a[i].insert(a[i].end(), bundle.b.begin(), bundle.b.end());
    }
    a[n] = p;
    a[n].insert(a[n].end(), q.begin(), q.end());
    return a;
  }

  template <class T>
  std::vector<T> deviation(std::size_t i, std::span<const T> phi, const StateVec<T>& s,
                           const ActionProfile<T>& a) const {
    const auto& ec = game_.economy();
    const std::size_t n = ec.n, m = ec.m, k = ec.k;
    const double bm = ec.portfolio_bound;
    std::vector<T> in = features(s);
    const auto block = phi.subspan(dev_offset_[i], dev_arch_[i].param_count());

    std::vector<T> supply(m);
    for (std::size_t j = 0; j < m; ++j) {
      std::vector<T> terms(n);
      for (std::size_t l = 0; l < n; ++l) terms[l] = s[1 + l * m + j];
      supply[j] = sum(terms);
    }

    if (i == n) {
      // Auctioneer: sees relative excess demand and net asset demand.
      std::vector<T> extra(2 * (m + k), T(0.0));
      for (std::size_t j = 0; j < m; ++j) {
        std::vector<T> terms(n);
        for (std::size_t l = 0; l < n; ++l) terms[l] = a[l][j];
        extra[j] = (sum(terms) - supply[j]) / supply[j];
      }
      for (std::size_t c = 0; c < k; ++c) {
        std::vector<T> terms(n);
        for (std::size_t l = 0; l < n; ++l) terms[l] = a[l][m + c];
        extra[m + c] = sum(terms) / (static_cast<double>(n) * bm);
      }
      in.insert(in.end(), extra.begin(), extra.end());
      const std::vector<T> raw = forward(dev_arch_[i], block, std::span<const T>(in));
      std::vector<T> out = project_simplex(std::span<const T>(raw).first(m));
      for (std::size_t c = 0; c < k; ++c) out.push_back(ec.asset_price_bound * sigmoid(raw[m + c]));
      return out;
    }

    const std::span<const T> pq(a[n]);
    std::vector<T> cap(m), bcap(k);
    for (std::size_t j = 0; j < m; ++j) {
      std::vector<T> terms{supply[j]};
      for (std::size_t l = 0; l < n; ++l) {
        if (l != i) terms.push_back(-a[l][j]);
      }
      cap[j] = sum(terms);
    }
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<T> terms;
      for (std::size_t l = 0; l < n; ++l) {
        if (l != i) terms.push_back(-a[l][m + c]);
      }
      bcap[c] = terms.empty() ? T(bm) : sum(terms);
    }
    for (std::size_t j = 0; j < m; ++j) in.push_back(pq[j]);
    for (std::size_t c = 0; c < k; ++c) in.push_back(pq[m + c] / ec.asset_price_bound);
    for (std::size_t j = 0; j < m; ++j) in.push_back(cap[j] / supply[j]);
    for (std::size_t c = 0; c < k; ++c) in.push_back(bcap[c] / bm);
    const std::vector<T> raw = forward(dev_arch_[i], block, std::span<const T>(in));

    std::vector<T> x(m), b(k);
    for (std::size_t j = 0; j < m; ++j) x[j] = cap[j] * sigmoid(raw[j]);
    for (std::size_t c = 0; c < k; ++c) {
      const T upper = smooth_min(bcap[c], T(bm), cfg_.kappa / bm);
      b[c] = -bm + (upper + bm) * sigmoid(raw[m + c]);
    }
    const std::vector<double> anchor(k, -bm);
    const auto bundle = budget_scale(std::span<const T>(x), std::span<const T>(b), pq.first(m), pq.subspan(m, k),
                                     std::span<const T>(s).subspan(1 + i * m, m), std::span<const double>(anchor),
                                     cfg_.kappa);
    std::vector<T> out = bundle.x;
    out.insert(out.end(), bundle.b.begin(), bundle.b.end());
    return out;
  }

 private:
  ExchangeGame game_;
  ExchangeSchemeConfig cfg_;
  std::size_t feat_dim_ = 0;
  Architecture gen_arch_;
  std::vector<Architecture> dev_arch_;
  std::vector<std::size_t> dev_offset_;
  std::size_t phi_size_ = 0;
  ProjectionSpec proj_;
};

static_assert(ParameterizationScheme<ExchangeScheme>);

// ---------------------------------------------------------------------------
// Generation, classification, diagnostics, serialization.

struct EconomyConfig {
  std::size_t n = 3, m = 3, k = 1, num_world_states = 2;
  UtilityFamily utility;
  EconomyTransition transition = EconomyTransition::deterministic;
  double gamma = 0.9;
  std::size_t horizon = 10;
  double return_lo = 0.5;
  double return_hi = 1.1;
};

inline MarkovExchangeEconomy sample_random_economy(const EconomyConfig& cfg, Rng& rng,
                                                   std::uint64_t seed = 0) {
  MarkovExchangeEconomy econ;
  econ.n = cfg.n;
  econ.m = cfg.m;
  econ.k = cfg.k;
  econ.num_world_states = cfg.num_world_states;
  econ.utility = cfg.utility;
  econ.transition = cfg.transition;
  econ.gamma = cfg.gamma;
  econ.horizon = cfg.horizon;
  econ.seed = seed;
  econ.returns = uniform_vector(rng, cfg.num_world_states * cfg.k * cfg.m, cfg.return_lo, cfg.return_hi);
  econ.derive_bounds();
  econ.validate();
  return econ;
}

/// One-shot market: no assets, a single fixed initial state drawn from the
/// usual initial distribution, evaluated with horizon 1 so only the first
/// period's rewards count.
inline MarkovExchangeEconomy single_step_economy(std::size_t n, std::size_t m, UtilityFamily utility,
                                                 std::uint64_t seed) {
  MarkovExchangeEconomy econ;
  econ.n = n;
  econ.m = m;
  econ.k = 0;
  econ.num_world_states = 1;
  econ.utility = utility;
  econ.horizon = 1;
  econ.seed = seed;
  Rng rng(stream_seed(seed, 0x5157));
  econ.derive_bounds();
  econ.dirac_state = ExchangeGame(econ).sample_initial(rng);
  econ.derive_bounds();
  econ.validate();
  return econ;
}

enum class Completeness { complete, incomplete, world_state_contingent, financial_assets };

inline std::string to_string(Completeness c) {
  switch (c) {
    case Completeness::complete: return "complete";
    case Completeness::incomplete: return "incomplete";
    case Completeness::world_state_contingent: return "world-state-contingent";
    case Completeness::financial_assets: return "financial-assets";
  }
  return "?";
}

struct CompletenessReport {
  Completeness label = Completeness::incomplete;
  std::vector<int> ranks;  // rank of R_omega per world state
  bool world_state_contingent = false;
  bool complete = false;
  bool financial = false;
};

/// Complete iff world-state-contingent (|Omega| >= |E x T|, only decidable
/// when the spot-market space is finite) and rank(R_omega) >= 1 everywhere.
/// Otherwise labelled financial-assets when every rank <= 1 (and some
/// asset delivers), world-state-contingent when only that test passes,
/// incomplete otherwise.
inline CompletenessReport classify_completeness(const MarkovExchangeEconomy& econ, double tol = 1e-12) {
  CompletenessReport rep;
  int min_rank = std::numeric_limits<int>::max();
  int max_rank = 0;
  for (std::size_t w = 0; w < econ.num_world_states; ++w) {
    int r = 0;
    if (econ.k > 0) {
      const auto R = econ.return_matrix(w);
      Eigen::MatrixXd M(econ.k, econ.m);
      for (std::size_t a = 0; a < econ.k; ++a) {
        for (std::size_t j = 0; j < econ.m; ++j) M(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(j)) = R[a * econ.m + j];
      }
      Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
      lu.setThreshold(tol);
      r = static_cast<int>(lu.rank());
    }
    rep.ranks.push_back(r);
    min_rank = std::min(min_rank, r);
    max_rank = std::max(max_rank, r);
  }
  rep.world_state_contingent = econ.finite_spot_states.has_value() &&
                               econ.num_world_states >= *econ.finite_spot_states;
  rep.complete = rep.world_state_contingent && min_rank >= 1;
  rep.financial = max_rank <= 1;
  if (rep.complete) {
    rep.label = Completeness::complete;
  } else if (max_rank == 0) {
    rep.label = Completeness::incomplete;
  } else if (rep.financial) {
    rep.label = Completeness::financial_assets;
  } else if (rep.world_state_contingent) {
    rep.label = Completeness::world_state_contingent;
  } else {
    rep.label = Completeness::incomplete;
  }
  return rep;
}

struct ConcavityReport {
  double worst_violation = -std::numeric_limits<double>::infinity();
  double std_err_at_worst = 0.0;
  std::size_t probes = 0;
};

/// Monte-Carlo check of stochastic concavity of a transition in the
/// portfolio: for a concave test function f (minimum of random affine
/// forms), E f(s'(B_alpha)) should be >= alpha E f(s'(B1)) + (1-alpha)
/// E f(s'(B2)). Violation = right side minus left side; shocks are shared
/// across the three evaluations.
inline ConcavityReport stochastic_concavity_check(
    const std::function<std::vector<double>(const std::vector<double>& B, const std::vector<double>& shock)>& next_endowment,
    const std::function<std::vector<double>(Rng&)>& sample_portfolio,
    const std::function<std::vector<double>(Rng&)>& sample_shock, std::size_t out_dim,
    std::size_t n_probes, std::size_t n_mc, Rng& rng) {
  if (n_probes < 1) throw SpecError("n_probes must be >= 1");
  ConcavityReport rep;
  rep.probes = n_probes;
  for (std::size_t probe = 0; probe < n_probes; ++probe) {
    const std::size_t pieces = 1 + uniform_index(rng, 3);
    std::vector<std::vector<double>> c(pieces);
    std::vector<double> d(pieces);
    for (std::size_t k = 0; k < pieces; ++k) {
      c[k] = uniform_vector(rng, out_dim, -1.0, 1.0);
      d[k] = uniform(rng, -1.0, 1.0);
    }
    auto f = [&](const std::vector<double>& y) {
      double lo = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < pieces; ++k) {
        double v = d[k];
        for (std::size_t j = 0; j < out_dim; ++j) v += c[k][j] * y[j];
        lo = std::min(lo, v);
      }
      return lo;
    };
    const std::vector<double> B1 = sample_portfolio(rng);
    const std::vector<double> B2 = sample_portfolio(rng);
    const double alpha = uniform01(rng);
    std::vector<double> Ba(B1.size());
    for (std::size_t d2 = 0; d2 < B1.size(); ++d2) Ba[d2] = alpha * B1[d2] + (1.0 - alpha) * B2[d2];
    double mean = 0.0, sq = 0.0;
    for (std::size_t t = 0; t < n_mc; ++t) {
      const std::vector<double> shock = sample_shock(rng);
      const double v = alpha * f(next_endowment(B1, shock)) + (1.0 - alpha) * f(next_endowment(B2, shock)) -
                       f(next_endowment(Ba, shock));
      mean += v;
      sq += v * v;
    }
    mean /= static_cast<double>(n_mc);
    const double var = std::max(0.0, sq / static_cast<double>(n_mc) - mean * mean);
    if (mean > rep.worst_violation) {
      rep.worst_violation = mean;
      rep.std_err_at_worst = std::sqrt(var / static_cast<double>(n_mc));
    }
  }
  return rep;
}

inline ConcavityReport check_stochastic_concavity(const MarkovExchangeEconomy& econ, std::size_t n_probes,
                                                  Rng& rng, std::size_t n_mc = 64) {
  const ExchangeGame game(econ);
  const std::size_t n = econ.n, m = econ.m, k = econ.k;
  auto next = [&](const std::vector<double>& B, const std::vector<double>& shock) {
    const auto omega = static_cast<std::size_t>(std::lround(shock[0]));
    const std::vector<double> base(shock.begin() + 1, shock.end());
    return endowment_update(std::span<const double>(base), std::span<const double>(B), econ.return_matrix(omega),
                            n, m, k);
  };
  auto portfolio = [&](Rng& r) { return uniform_vector(r, n * k, -econ.portfolio_bound, econ.portfolio_bound); };
  auto shock = [&](Rng& r) { return game.sample_shock(r); };
  return stochastic_concavity_check(next, portfolio, shock, n * m, n_probes, n_mc, rng);
}

inline nlohmann::json to_json(const MarkovExchangeEconomy& e) {
  nlohmann::json j;
  j["format"] = "mpg-economy";
  j["version"] = 1;
  j["n"] = e.n;
  j["m"] = e.m;
  j["k"] = e.k;
  j["num_world_states"] = e.num_world_states;
  j["returns"] = e.returns;
  j["utility"] = {{"kind", to_string(e.utility.kind)},
                  {"leontief_eps", e.utility.leontief_eps},
                  {"floor", e.utility.floor}};
  j["gamma"] = e.gamma;
  j["horizon"] = e.horizon;
  j["transition"] = to_string(e.transition);
  j["det_endowment"] = e.det_endowment;
  j["stoch_offset"] = e.stoch_offset;
  j["stoch_lo"] = e.stoch_lo;
  j["stoch_hi"] = e.stoch_hi;
  j["init_lo"] = e.init_lo;
  j["init_hi"] = e.init_hi;
  j["type_lo"] = e.type_lo;
  j["type_hi"] = e.type_hi;
  j["portfolio_bound"] = e.portfolio_bound;
  j["consumption_bound"] = e.consumption_bound;
  j["asset_price_bound"] = e.asset_price_bound;
  j["seed"] = e.seed;
  if (e.dirac_state) j["dirac_state"] = *e.dirac_state;
  if (e.finite_spot_states) j["finite_spot_states"] = *e.finite_spot_states;
  return j;
}

inline MarkovExchangeEconomy economy_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "mpg-economy") throw SpecError("not an economy file");
  MarkovExchangeEconomy e;
  e.n = j.at("n");
  e.m = j.at("m");
  e.k = j.at("k");
  e.num_world_states = j.at("num_world_states");
  e.returns = j.at("returns").get<std::vector<double>>();
  e.utility.kind = utility_kind_from_string(j.at("utility").at("kind"));
  e.utility.leontief_eps = j.at("utility").at("leontief_eps");
  e.utility.floor = j.at("utility").at("floor");
  e.gamma = j.at("gamma");
  e.horizon = j.at("horizon");
  e.transition = transition_from_string(j.at("transition"));
  e.det_endowment = j.at("det_endowment");
  e.stoch_offset = j.at("stoch_offset");
  e.stoch_lo = j.at("stoch_lo");
  e.stoch_hi = j.at("stoch_hi");
  e.init_lo = j.at("init_lo");
  e.init_hi = j.at("init_hi");
  e.type_lo = j.at("type_lo");
  e.type_hi = j.at("type_hi");
  e.portfolio_bound = j.at("portfolio_bound");
  e.consumption_bound = j.at("consumption_bound");
  e.asset_price_bound = j.at("asset_price_bound");
  e.seed = j.at("seed");
  if (j.contains("dirac_state")) e.dirac_state = j.at("dirac_state").get<std::vector<double>>();
  if (j.contains("finite_spot_states")) e.finite_spot_states = j.at("finite_spot_states").get<std::size_t>();
  e.validate();
  return e;
}

}  // namespace mpg
