#include <gtest/gtest.h>

#include <cmath>

#include "mpg/discrete.hpp"

using namespace mpg::finite;

namespace {

// Discounted payoffs by plain value iteration in doubles.
std::array<double, kPlayers> value_iteration(const ToyGame& g, const Profile& p) {
  const double gamma = to_double(g.gamma);
  std::array<std::array<double, kStates>, kPlayers> v{};
  for (int it = 0; it < 2000; ++it) {
    auto next = v;
    for (std::size_t s = 0; s < kStates; ++s) {
      const Rational& a1 = g.grid[p[0][s]];
      const Rational& a2 = g.grid[p[1][s]];
      const double q1 = to_double(g.to_state1(s, a1, a2));
      for (std::size_t i = 0; i < kPlayers; ++i) {
        next[i][s] = to_double(g.reward(i, s, a1, a2)) + gamma * ((1.0 - q1) * v[i][0] + q1 * v[i][1]);
      }
    }
    v = next;
  }
  std::array<double, kPlayers> out{};
  for (std::size_t i = 0; i < kPlayers; ++i) {
    for (std::size_t s = 0; s < kStates; ++s) out[i] += to_double(g.mu[s]) * v[i][s];
  }
  return out;
}

}  // namespace

TEST(FiniteGame, PayoffsMatchValueIteration) {
  for (const ToyGame& g : {default_toy(), pursuit_toy()}) {
    const auto profiles = feasible_profiles(g);
    ASSERT_FALSE(profiles.empty());
    for (std::size_t k = 0; k < profiles.size(); k += 7) {
      const auto exact = payoffs(g, profiles[k]);
      const auto vi = value_iteration(g, profiles[k]);
      for (std::size_t i = 0; i < kPlayers; ++i) EXPECT_NEAR(to_double(exact[i]), vi[i], 1e-12);
    }
  }
}

TEST(FiniteGame, ExploitabilityNonnegativeAndEqualsJointRegret) {
  for (const ToyGame& g : {default_toy(), pursuit_toy()}) {
    const auto pols = all_pure_policies(g);
    for (const auto& p : feasible_profiles(g)) {
      const Rational e = exploitability(g, p);
      EXPECT_GE(e, Rational(0));
      EXPECT_EQ(cumulative_regret(g, p, p), Rational(0));
      // Joint deviations decouple, so the best one recovers the exploitability.
      Rational best(0);
      for (const auto& d1 : pols) {
        if (!g.feasible(Profile{d1, p[1]})) continue;
        for (const auto& d2 : pols) {
          if (!g.feasible(Profile{p[0], d2})) continue;
          best = std::max(best, cumulative_regret(g, p, Profile{d1, d2}));
        }
      }
      EXPECT_EQ(best, e);
    }
  }
}

TEST(FiniteGame, DefaultToyHasPureEquilibrium) {
  const ToyGame g = default_toy();
  const auto ex = min_exploitability(g);
  const auto mm = min_max_cumulative_regret(g);
  EXPECT_EQ(ex.value, Rational(0));
  EXPECT_EQ(mm.value, ex.value);
  EXPECT_EQ(exploitability(g, mm.argmin), Rational(0));
  EXPECT_EQ(ex.profiles, mm.profiles);
}

TEST(FiniteGame, PursuitToyMinimaAgreeExactly) {
  const ToyGame g = pursuit_toy();
  const auto ex = min_exploitability(g);
  const auto mm = min_max_cumulative_regret(g);
  EXPECT_GT(ex.value, Rational(0));
  EXPECT_EQ(ex.value, Rational(65, 252));
  EXPECT_EQ(mm.value, ex.value);
}

TEST(FiniteGame, InfeasibleGameThrows) {
  ToyGame g = default_toy();
  g.cap = {Rational(-1), Rational(-1)};
  EXPECT_THROW(min_exploitability(g), mpg::SpecError);
  EXPECT_THROW(min_max_cumulative_regret(g), mpg::SpecError);
}
