#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fixtures.hpp"
#include "mpg/economy.hpp"
#include "mpg/solver.hpp"
#include "oracles.hpp"

using namespace mpg;
using mpg::testing::QuadraticGame;

namespace {

TrainTrace trace_of(std::initializer_list<double> values) {
  TrainTrace tr;
  std::size_t it = 0;
  for (double v : values) {
    Checkpoint c;
    c.iteration = it;
    c.exploitability = v;
    tr.checkpoints.push_back(c);
    it += 10;
  }
  return tr;
}

// Exact exploitability of a profile in the quadratic game over T steps.
double quadratic_exploitability(const ActionProfile<double>& a, std::size_t T) {
  double total = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    const double d = a[i][0] - 0.5 * a[1 - i][0] - 0.25;
    total += d * d;
  }
  return total * truncated_geometric_sum(0.9, T);
}

AscentConfig quick_ascent(std::size_t horizon, std::size_t steps) {
  AscentConfig cfg;
  cfg.steps = steps;
  cfg.lr = 1e-2;
  cfg.rule = UpdateRule::adam;
  cfg.batch = 1;
  cfg.eval_trajectories = 1;
  cfg.horizon = horizon;
  return cfg;
}

}  // namespace

TEST(Optimizer, SgdStep) {
  Optimizer opt(UpdateRule::sgd, 0.1, 2);
  std::vector<double> x{1.0, 2.0};
  const std::vector<double> g{0.5, -1.0};
  opt.step(x, g, -1.0);
  EXPECT_DOUBLE_EQ(x[0], 0.95);
  EXPECT_DOUBLE_EQ(x[1], 2.1);
}

TEST(Optimizer, AdamFirstStepHasLearningRateSize) {
  Optimizer opt(UpdateRule::adam, 0.01, 2);
  std::vector<double> x{0.0, 0.0};
  const std::vector<double> g{3.0, -1e-3};
  opt.step(x, g, +1.0);
  EXPECT_NEAR(x[0], 0.01, 1e-10);
  EXPECT_NEAR(x[1], -0.01, 1e-6);
}

TEST(BestIterate, Cases) {
  EXPECT_EQ(best_iterate(trace_of({5.0, 4.0, 3.0, 2.0})).iteration, 30u);
  EXPECT_EQ(best_iterate(trace_of({5.0, 1.0, 40.0, 3.0})).iteration, 10u);
  EXPECT_EQ(best_iterate(trace_of({7.0})).iteration, 0u);
  EXPECT_EQ(best_iterate(trace_of({2.0, 1.0, 1.0})).iteration, 10u);
  EXPECT_THROW(best_iterate(TrainTrace{}), SpecError);
}

TEST(Exploitability, QuadraticGameLowerBoundIsTight) {
  const BoxPolicyScheme<QuadraticGame> sc(QuadraticGame{});
  Rng rng(1);
  for (int rep = 0; rep < 3; ++rep) {
    const auto theta = uniform_vector(rng, sc.theta_size(), -2.0, 2.0);
    const auto a = sc.policy(std::span<const double>(theta), StateVec<double>{1.0});
    const double exact = quadratic_exploitability(a, 10);
    const auto est = exploitability_estimate(sc, theta, quick_ascent(10, 1000), 3);
    EXPECT_LE(est.value, exact + 1e-12);
    EXPECT_GE(est.value, 0.99 * exact);
    EXPECT_EQ(est.std_err, 0.0);
  }
}

TEST(Exploitability, LinearMarketLowerBound) {
  const auto econ = mpg::testing::toy_economy(2);
  const ExchangeScheme sc{ExchangeGame(econ)};
  const StateVec<double> s0 = *econ.dirac_state;
  Rng rng(2);
  for (int rep = 0; rep < 3; ++rep) {
    const auto theta = uniform_vector(rng, sc.theta_size(), -1.0, 1.0);
    const auto a = sc.policy(std::span<const double>(theta), s0);
    const double exact = mpg::testing::linear_market_exploitability(econ, parse_state(econ, s0),
                                                                    to_market_action(econ, a));
    const auto est = exploitability_estimate(sc, theta, quick_ascent(1, 1000), 5);
    EXPECT_LE(est.value, exact + 1e-9);
    EXPECT_GE(est.value, 0.95 * exact);
  }
}

TEST(Exploitability, SingleStateGameMatchesStateVersion) {
  const BoxPolicyScheme<QuadraticGame> sc(QuadraticGame{});
  Rng rng(3);
  const auto theta = uniform_vector(rng, sc.theta_size(), -1.0, 1.0);
  const auto cfg = quick_ascent(10, 50);
  const auto global = exploitability_estimate(sc, theta, cfg, 9);
  const auto local = state_exploitability_estimate(sc, theta, StateVec<double>{1.0}, cfg, 9);
  EXPECT_EQ(global.value, local.value);
  EXPECT_EQ(global.phi_star, local.phi_star);
}

TEST(Exploitability, ZeroRewardGameIsUnexploitable) {
  const BoxPolicyScheme<RewardScaledGame<QuadraticGame>> sc(RewardScaledGame<QuadraticGame>(QuadraticGame{}, 0.0));
  Rng rng(4);
  const auto theta = uniform_vector(rng, sc.theta_size(), -1.0, 1.0);
  EXPECT_EQ(exploitability_estimate(sc, theta, quick_ascent(10, 20), 1).value, 0.0);
}

TEST(Ttsgda, ZeroRewardLeavesParametersUnchanged) {
  const BoxPolicyScheme<RewardScaledGame<QuadraticGame>> sc(RewardScaledGame<QuadraticGame>(QuadraticGame{}, 0.0),
                                                            {3});
  for (auto rule : {UpdateRule::sgd, UpdateRule::adam}) {
    TtsgdaConfig cfg;
    cfg.rule = rule;
    cfg.iters = 30;
    cfg.eval_every = 10;
    cfg.eval = quick_ascent(5, 5);
    Rng rng(5);
    const auto theta0 = uniform_vector(rng, sc.theta_size(), -1.0, 1.0);
    const auto tr = ttsgda(sc, cfg, 2, theta0);
    EXPECT_EQ(tr.theta, theta0);
    for (const auto& c : tr.checkpoints) EXPECT_EQ(c.theta, theta0);
    const auto fresh = ttsgda(sc, [&] {
      auto c = cfg;
      c.iters = 1;
      return c;
    }(), 2, theta0);
    EXPECT_EQ(tr.phi, fresh.phi);
  }
}

TEST(Ttsgda, UpdateOrderDoesNotMatter) {
  const ExchangeScheme sc{ExchangeGame(mpg::testing::desk_economy())};
  TtsgdaConfig cfg;
  cfg.lr_theta = 1e-3;
  cfg.rule = UpdateRule::adam;
  cfg.iters = 20;
  cfg.batch = 2;
  cfg.horizon = 5;
  cfg.eval_every = 10;
  cfg.eval = quick_ascent(5, 10);
  const auto a = ttsgda(sc, cfg, 3);
  cfg.phi_first = true;
  const auto b = ttsgda(sc, cfg, 3);
  EXPECT_EQ(a.theta, b.theta);
  EXPECT_EQ(a.phi, b.phi);
  ASSERT_EQ(a.checkpoints.size(), b.checkpoints.size());
  for (std::size_t c = 0; c < a.checkpoints.size(); ++c) {
    EXPECT_EQ(a.checkpoints[c].exploitability, b.checkpoints[c].exploitability);
  }
}

TEST(Ttsgda, CheckpointSchedule) {
  const BoxPolicyScheme<QuadraticGame> sc(QuadraticGame{});
  TtsgdaConfig cfg;
  cfg.iters = 50;
  cfg.eval_every = 20;
  cfg.eval = quick_ascent(5, 5);
  const auto tr = ttsgda(sc, cfg, 1);
  std::vector<std::size_t> its;
  for (const auto& c : tr.checkpoints) its.push_back(c.iteration);
  EXPECT_EQ(its, (std::vector<std::size_t>{0, 20, 40, 50}));
  std::ostringstream os;
  write_trace_csv(os, tr);
  const std::string text = os.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "iteration,exploitability,grad_norm_theta,grad_norm_phi,cumul_regret,wall_ms");
  EXPECT_NE(text.find(",0.000\n"), std::string::npos);
}

TEST(Ttsgda, SolvesQuadraticGame) {
  const BoxPolicyScheme<QuadraticGame> sc(QuadraticGame{});
  TtsgdaConfig cfg;
  cfg.lr_theta = 1e-2;
  cfg.lr_phi = 5e-2;
  cfg.rule = UpdateRule::adam;
  cfg.iters = 2000;
  cfg.batch = 1;
  cfg.eval_every = 200;
  cfg.eval = quick_ascent(10, 200);
  const auto tr = ttsgda(sc, cfg, 4);
  ASSERT_FALSE(tr.diverged);
  const auto& best = best_iterate(tr);
  EXPECT_LT(best.exploitability, 1e-3);
  const auto a = sc.policy(std::span<const double>(best.theta), StateVec<double>{1.0});
  EXPECT_NEAR(a[0][0], 0.5, 0.02);
  EXPECT_NEAR(a[1][0], 0.5, 0.02);
  EXPECT_LE(best.exploitability, quadratic_exploitability(a, 10) + 1e-12);
}

TEST(Ttsgda, DivergenceIsReported) {
  const ExchangeScheme sc{ExchangeGame(mpg::testing::desk_economy())};
  TtsgdaConfig cfg;
  cfg.lr_theta = 1e9;
  cfg.iters = 50;
  cfg.batch = 1;
  cfg.horizon = 3;
  cfg.eval = quick_ascent(3, 2);
  const auto tr = ttsgda(sc, cfg, 5);
  EXPECT_TRUE(tr.diverged);
  EXPECT_NE(tr.message.find("exceeded"), std::string::npos);
}

TEST(Ttsgda, SmallStepSgdIsStable) {
  // Plain SGD at a 1e-5 step over 2000 episodes on the deterministic
  // linear economy.
  const ExchangeScheme sc{ExchangeGame(mpg::testing::desk_economy())};
  TtsgdaConfig cfg;
  cfg.lr_theta = 1e-5;
  cfg.rule = UpdateRule::sgd;
  cfg.iters = 2000;
  cfg.batch = 1;
  cfg.horizon = 10;
  cfg.eval_every = 2000;
  cfg.eval = quick_ascent(10, 20);
  const auto tr = ttsgda(sc, cfg, 6);
  EXPECT_FALSE(tr.diverged);
  for (const auto& c : tr.checkpoints) EXPECT_TRUE(std::isfinite(c.exploitability));
}

TEST(Mismatch, SingleStateGame) {
  const BoxPolicyScheme<QuadraticGame> sc(QuadraticGame{});
  Rng rng(7);
  const auto theta = sc.init_theta(rng);
  const auto phi = sc.init_phi(rng);
  RolloutConfig cfg;
  cfg.horizon = 30;
  cfg.n_trajectories = 4;
  const StateBinning bins{{0}, {0.0}, {2.0}, {4}};
  const auto rep = mismatch_diagnostic(sc, theta, phi, cfg, bins, 64);
  EXPECT_FALSE(rep.infinite);
  EXPECT_DOUBLE_EQ(rep.policy_ratio, 1.0);
  EXPECT_NEAR(rep.coefficient, 100.0, 1e-9);
}

TEST(Mismatch, UnvisitedSupportIsInfinite) {
  // Initial states all have omega = 0 while later states do not.
  const ExchangeScheme sc{ExchangeGame(
      mpg::testing::desk_economy(UtilityKind::linear, EconomyTransition::stochastic))};
  Rng rng(8);
  const auto theta = sc.init_theta(rng);
  const auto phi = sc.init_phi(rng);
  RolloutConfig cfg;
  cfg.horizon = 10;
  cfg.n_trajectories = 8;
  const StateBinning bins{{0}, {0.0}, {2.0}, {2}};
  const auto rep = mismatch_diagnostic(sc, theta, phi, cfg, bins, 64);
  EXPECT_TRUE(rep.infinite);
  EXPECT_TRUE(std::isinf(rep.coefficient));
}
