#pragma once

// Small games with known answers, shared by the unit tests.

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "mpg/economy.hpp"
#include "mpg/game.hpp"

namespace mpg::testing {

/// Every player gets reward c at every step; one action in [0, 1], no
/// constraints beyond the box, a single state that never changes.
class ConstantGame {
 public:
  ConstantGame(std::size_t players, double c, double gamma = 0.9) : n_(players), c_(c), gamma_(gamma) {}

  [[nodiscard]] std::size_t num_players() const { return n_; }
  [[nodiscard]] std::size_t state_dim() const { return 1; }
  [[nodiscard]] std::size_t action_dim(std::size_t) const { return 1; }
  [[nodiscard]] double discount() const { return gamma_; }
  [[nodiscard]] TransitionKind transition_kind() const { return TransitionKind::deterministic; }
  [[nodiscard]] double reward_bound() const { return std::fabs(c_); }
  [[nodiscard]] Box action_box(std::size_t) const { return {{0.0}, {1.0}}; }
  StateVec<double> sample_initial(Rng&) const { return {0.5}; }
  std::vector<double> sample_shock(Rng&) const { return {}; }

  template <class T>
  std::vector<T> reward(const StateVec<T>&, const ActionProfile<T>&) const {
    return std::vector<T>(n_, T(c_));
  }
  template <class T>
  ConstraintEval<T> constraints(const StateVec<T>&, const ActionProfile<T>&) const {
    return ConstraintEval<T>(n_);
  }
  template <class T>
  StateVec<T> transition(const StateVec<T>& s, const ActionProfile<T>&, const std::vector<double>&) const {
    return s;
  }

 private:
  std::size_t n_;
  double c_;
  double gamma_;
};

/// Two players on [0, 1] with r_i = -(a_i - 0.5 a_j - 0.25)^2 + a_j and a
/// state that never moves. Strictly concave in the own action; the unique
/// equilibrium is a = (0.5, 0.5).
class QuadraticGame {
 public:
  explicit QuadraticGame(double gamma = 0.9) : gamma_(gamma) {}

  [[nodiscard]] std::size_t num_players() const { return 2; }
  [[nodiscard]] std::size_t state_dim() const { return 1; }
  [[nodiscard]] std::size_t action_dim(std::size_t) const { return 1; }
  [[nodiscard]] double discount() const { return gamma_; }
  [[nodiscard]] TransitionKind transition_kind() const { return TransitionKind::deterministic; }
  [[nodiscard]] double reward_bound() const { return 2.0; }
  [[nodiscard]] Box action_box(std::size_t) const { return {{0.0}, {1.0}}; }
  StateVec<double> sample_initial(Rng&) const { return {1.0}; }
  std::vector<double> sample_shock(Rng&) const { return {}; }

  template <class T>
  std::vector<T> reward(const StateVec<T>&, const ActionProfile<T>& a) const {
    std::vector<T> r(2);
    for (std::size_t i = 0; i < 2; ++i) {
      const T& mine = a[i][0];
      const T& other = a[1 - i][0];
      const T d = mine - 0.5 * other - 0.25;
      r[i] = -(d * d) + other;
    }
    return r;
  }
  template <class T>
  ConstraintEval<T> constraints(const StateVec<T>&, const ActionProfile<T>& a) const {
    ConstraintEval<T> g(2);
    for (std::size_t i = 0; i < 2; ++i) g[i] = {a[i][0], 1.0 - a[i][0]};
    return g;
  }
  template <class T>
  StateVec<T> transition(const StateVec<T>& s, const ActionProfile<T>&, const std::vector<double>&) const {
    return s;
  }

 private:
  double gamma_;
};

/// Fourth-order central differences of f at x compared with an analytic
/// row-major Jacobian; max |fd - an| / max(|fd|, |an|, floor). Sharp smooth
/// clamps defeat the usual second-order stencil long before roundoff does.
inline double fd4_relative_error(const std::function<std::vector<double>(std::span<const double>)>& f,
                                 std::span<const double> x, std::span<const double> jac, double h = 1e-4,
                                 double floor = 1e-6) {
  std::vector<double> xp(x.begin(), x.end());
  double worst = 0.0;
  const std::size_t n = x.size();
  for (std::size_t j = 0; j < n; ++j) {
    const double orig = xp[j];
    auto at = [&](double d) {
      xp[j] = orig + d;
      auto v = f(xp);
      xp[j] = orig;
      return v;
    };
    const auto p1 = at(h), m1 = at(-h), p2 = at(2 * h), m2 = at(-2 * h);
    for (std::size_t i = 0; i < p1.size(); ++i) {
      const double fd = (m2[i] - 8.0 * m1[i] + 8.0 * p1[i] - p2[i]) / (12.0 * h);
      worst = std::max(worst, relative_error(fd, jac[i * n + j], floor));
    }
  }
  return worst;
}

static_assert(MarkovPseudoGame<ConstantGame>);
static_assert(MarkovPseudoGame<QuadraticGame>);

/// The small economy used across the suite: 3 consumers, 3 goods, 1 asset,
/// 2 world states.
inline MarkovExchangeEconomy desk_economy(UtilityKind kind = UtilityKind::linear,
                                          EconomyTransition tr = EconomyTransition::deterministic,
                                          std::uint64_t seed = 7) {
  EconomyConfig cfg;
  cfg.utility.kind = kind;
  cfg.transition = tr;
  Rng rng(seed);
  return sample_random_economy(cfg, rng, seed);
}

/// Two consumers, two goods, linear utility, one period.
inline MarkovExchangeEconomy toy_economy(std::uint64_t seed = 1) {
  return single_step_economy(2, 2, UtilityFamily{}, seed);
}

}  // namespace mpg::testing
