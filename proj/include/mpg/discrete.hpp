#pragma once

// Exact finite pseudo-game with two players and two states: deterministic
// Markov policies over small action grids, a coupled per-state constraint
// a_1 + a_2 <= cap(s), and infinite-horizon values solved in rationals.
// Used to check that minimizing exploitability and min-max cumulative
// regret give the same value without any sampling.

#include <array>
#include <boost/rational.hpp>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "mpg/game.hpp"

namespace mpg::finite {

using Rational = boost::rational<std::int64_t>;
inline constexpr std::size_t kStates = 2;
inline constexpr std::size_t kPlayers = 2;

/// Action index per state for one player.
using PurePolicy = std::array<std::size_t, kStates>;
using Profile = std::array<PurePolicy, kPlayers>;

struct ToyGame {
  std::vector<Rational> grid;          // shared action grid
  std::array<Rational, kStates> cap;   // a_1 + a_2 <= cap[s]
  Rational gamma{1, 2};
  std::array<Rational, kStates> mu{Rational(1, 2), Rational(1, 2)};
  // reward(i, s, a1, a2) and the probability of moving to state 1.
  std::function<Rational(std::size_t, std::size_t, const Rational&, const Rational&)> reward;
  std::function<Rational(std::size_t, const Rational&, const Rational&)> to_state1;

  [[nodiscard]] bool feasible(std::size_t s, std::size_t a1, std::size_t a2) const {
    return grid[a1] + grid[a2] <= cap[s];
  }
  [[nodiscard]] bool feasible(const Profile& p) const {
    for (std::size_t s = 0; s < kStates; ++s) {
      if (!feasible(s, p[0][s], p[1][s])) return false;
    }
    return true;
  }
};

/// Default instance: a shared-capacity game where each player gets a
/// concave return on its own action minus a congestion term, and heavier
/// use pushes the system toward the tighter state.
inline ToyGame default_toy() {
  ToyGame g;
  for (int k = 0; k <= 4; ++k) g.grid.emplace_back(k, 4);
  g.cap = {Rational(1), Rational(3, 4)};
  g.reward = [](std::size_t i, std::size_t s, const Rational& a1, const Rational& a2) {
    const Rational& own = i == 0 ? a1 : a2;
    const Rational& other = i == 0 ? a2 : a1;
    const Rational value = s == 0 ? Rational(2) : Rational(3, 2);
    const Rational weight = i == 0 ? Rational(1) : Rational(3, 4);
    return weight * own * (value - own) - own * other / Rational(2);
  };
  g.to_state1 = [](std::size_t s, const Rational& a1, const Rational& a2) {
    const Rational load = a1 + a2;
    return s == 0 ? load / Rational(2) : Rational(1, 4) + load / Rational(2);
  };
  return g;
}

/// Pursuit variant with no pure equilibrium: player 1 wants to match
/// player 2's action, player 2 wants to stay away, under the same coupled
/// capacity. Its minimum exploitability is strictly positive.
inline ToyGame pursuit_toy() {
  ToyGame g = default_toy();
  g.cap = {Rational(2), Rational(3, 2)};
  g.reward = [](std::size_t i, std::size_t s, const Rational& a1, const Rational& a2) {
    const Rational d = a1 - a2;
    const Rational bonus = s == 0 ? Rational(1, 4) : Rational(0);
    return i == 0 ? bonus * a1 - d * d : d * d + bonus * a2;
  };
  return g;
}

/// Expected discounted payoff mu . (I - gamma P)^{-1} r for each player.
inline std::array<Rational, kPlayers> payoffs(const ToyGame& g, const Profile& p) {
  std::array<std::array<Rational, kPlayers>, kStates> r;
  std::array<Rational, kStates> q1;
  for (std::size_t s = 0; s < kStates; ++s) {
    const Rational& a1 = g.grid[p[0][s]];
    const Rational& a2 = g.grid[p[1][s]];
    for (std::size_t i = 0; i < kPlayers; ++i) r[s][i] = g.reward(i, s, a1, a2);
    q1[s] = g.to_state1(s, a1, a2);
  }
  // A = I - gamma P with P(s, 1) = q1[s], P(s, 0) = 1 - q1[s].
  const Rational a00 = Rational(1) - g.gamma * (Rational(1) - q1[0]);
  const Rational a01 = -g.gamma * q1[0];
  const Rational a10 = -g.gamma * (Rational(1) - q1[1]);
  const Rational a11 = Rational(1) - g.gamma * q1[1];
  const Rational det = a00 * a11 - a01 * a10;
  std::array<Rational, kPlayers> out;
  for (std::size_t i = 0; i < kPlayers; ++i) {
    const Rational v0 = (a11 * r[0][i] - a01 * r[1][i]) / det;
    const Rational v1 = (a00 * r[1][i] - a10 * r[0][i]) / det;
    out[i] = g.mu[0] * v0 + g.mu[1] * v1;
  }
  return out;
}

inline std::vector<PurePolicy> all_pure_policies(const ToyGame& g) {
  std::vector<PurePolicy> out;
  for (std::size_t a = 0; a < g.grid.size(); ++a) {
    for (std::size_t b = 0; b < g.grid.size(); ++b) out.push_back({a, b});
  }
  return out;
}

inline std::vector<Profile> feasible_profiles(const ToyGame& g) {
  std::vector<Profile> out;
  const auto pols = all_pure_policies(g);
  for (const auto& p1 : pols) {
    for (const auto& p2 : pols) {
      const Profile p{p1, p2};
      if (g.feasible(p)) out.push_back(p);
    }
  }
  return out;
}

/// Sum over players of the best feasible unilateral improvement.
inline Rational exploitability(const ToyGame& g, const Profile& p) {
  const auto base = payoffs(g, p);
  const auto pols = all_pure_policies(g);
  Rational total(0);
  for (std::size_t i = 0; i < kPlayers; ++i) {
    Rational best = base[i];
    for (const auto& dev : pols) {
      Profile q = p;
      q[i] = dev;
      if (!g.feasible(q)) continue;
      best = std::max(best, payoffs(g, q)[i]);
    }
    total += best - base[i];
  }
  return total;
}

/// Cumulative regret psi(p, p') = sum_i u_i(p'_i, p_{-i}) - u_i(p).
inline Rational cumulative_regret(const ToyGame& g, const Profile& p, const Profile& dev) {
  const auto base = payoffs(g, p);
  Rational total(0);
  for (std::size_t i = 0; i < kPlayers; ++i) {
    Profile q = p;
    q[i] = dev[i];
    total += payoffs(g, q)[i] - base[i];
  }
  return total;
}

struct MinMaxResult {
  Rational value;
  Profile argmin{};
  std::size_t profiles = 0;
};

inline MinMaxResult min_exploitability(const ToyGame& g) {
  MinMaxResult out;
  bool first = true;
  for (const auto& p : feasible_profiles(g)) {
    const Rational e = exploitability(g, p);
    if (first || e < out.value) {
      out.value = e;
      out.argmin = p;
      first = false;
    }
    ++out.profiles;
  }
  if (first) throw SpecError("toy game has no feasible profile");
  return out;
}

/// min over feasible p of max over joint deviations p' (each p'_i feasible
/// against p_{-i}) of psi(p, p'), enumerating the joint deviation space
/// rather than best-responding player by player.
inline MinMaxResult min_max_cumulative_regret(const ToyGame& g) {
  MinMaxResult out;
  bool first = true;
  const auto pols = all_pure_policies(g);
  for (const auto& p : feasible_profiles(g)) {
    Rational inner(0);
    bool inner_first = true;
    for (const auto& d1 : pols) {
      if (!g.feasible(Profile{d1, p[1]})) continue;
      for (const auto& d2 : pols) {
        if (!g.feasible(Profile{p[0], d2})) continue;
        const Rational v = cumulative_regret(g, p, Profile{d1, d2});
        if (inner_first || v > inner) {
          inner = v;
          inner_first = false;
        }
      }
    }
    if (first || inner < out.value) {
      out.value = inner;
      out.argmin = p;
      first = false;
    }
    ++out.profiles;
  }
  if (first) throw SpecError("toy game has no feasible profile");
  return out;
}

inline double to_double(const Rational& r) {
  return static_cast<double>(r.numerator()) / static_cast<double>(r.denominator());
}

}  // namespace mpg::finite
