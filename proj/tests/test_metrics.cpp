#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fixtures.hpp"
#include "mpg/metrics.hpp"
#include "oracles.hpp"

using namespace mpg;
using mpg::testing::QuadraticGame;

namespace {

using ScaledQuadratic = RewardScaledGame<QuadraticGame>;

BoxPolicyScheme<ScaledQuadratic> scaled_quadratic(double c) {
  return BoxPolicyScheme<ScaledQuadratic>(ScaledQuadratic(QuadraticGame{}, c));
}

double sum_sq(const std::vector<std::vector<double>>& res) {
  double t = 0.0;
  for (const auto& r : res) {
    for (double v : r) t += v * v;
  }
  return t;
}

}  // namespace

TEST(Multipliers, BudgetExamples) {
  const std::vector<double> gx{2.0}, p{1.0}, none{};
  EXPECT_DOUBLE_EQ(budget_multiplier(gx, none, p, none), 2.0);
  const std::vector<double> zero{0.0};
  EXPECT_THROW(budget_multiplier(gx, none, zero, none), SpecError);

  // Same scalar problem through the active-set fit: g = w - p x binding.
  auto lam = lagrange_closed_form({{2.0}}, {{{-1.0}}}, {{0.0}}, 1e-10);
  EXPECT_NEAR(lam.lambdas[0][0], 2.0, 1e-12);
  EXPECT_NEAR(lam.residual[0], 0.0, 1e-12);
  // Slack budget: the multiplier is zero and the residual is the gradient.
  lam = lagrange_closed_form({{2.0}}, {{{-1.0}}}, {{0.3}}, 1e-10);
  EXPECT_EQ(lam.lambdas[0][0], 0.0);
  EXPECT_NEAR(lam.residual[0], 2.0, 1e-15);
}

TEST(Multipliers, BudgetOnlyMatchesClosedForm) {
  Rng rng(1);
  for (int rep = 0; rep < 100; ++rep) {
    const auto gx = uniform_vector(rng, 3, 0.0, 4.0);
    const auto gb = uniform_vector(rng, 1, -1.0, 1.0);
    auto p = softmax(std::span<const double>(uniform_vector(rng, 3, -1.0, 1.0)));
    const auto q = uniform_vector(rng, 1, 0.0, 1.0);
    std::vector<double> grad{gx[0], gx[1], gx[2], gb[0]};
    std::vector<double> gg{-p[0], -p[1], -p[2], -q[0]};
    const auto lam = lagrange_closed_form({grad}, {{gg}}, {{0.0}}, 1e-10);
    EXPECT_NEAR(lam.lambdas[0][0], budget_multiplier(gx, gb, p, q), 1e-12);
  }
}

TEST(Multipliers, LinearConsumerAtLpOptimum) {
  // max tau.x s.t. p.x <= w, x >= 0 with tau = (1, 3), p = (0.5, 0.5):
  // spend everything on good 2; lambda = 6 on the budget, 2 on x_1 >= 0.
  const std::vector<double> tau{1.0, 3.0}, p{0.5, 0.5};
  const double w = 0.4;
  const std::vector<double> x{0.0, w / p[1]};
  const std::vector<std::vector<double>> grads{{-p[0], -p[1]}, {1.0, 0.0}, {0.0, 1.0}};
  const ConstraintEval<double> g{{w - p[0] * x[0] - p[1] * x[1], x[0], x[1]}};
  const auto lam = lagrange_closed_form({tau}, {grads}, g, 1e-10);
  EXPECT_LE(lam.residual[0], 1e-6);
  EXPECT_NEAR(lam.lambdas[0][0], 6.0, 1e-9);
  EXPECT_NEAR(lam.lambdas[0][1], 2.0, 1e-9);
  EXPECT_EQ(lam.lambdas[0][2], 0.0);
  EXPECT_LE(lam.complementary_slackness, 1e-8);
}

TEST(Multipliers, SlackPenaltyShrinksLambda) {
  // One constraint with slack 0.5: plain fit gives lambda = 2, the penalized
  // fit minimizes (2 - l)^2 + 0.5 w l, i.e. l = 2 - w / 4.
  auto lam = lagrange_closed_form({{2.0}}, {{{-1.0}}}, {{0.5}}, 1.0);
  EXPECT_NEAR(lam.lambdas[0][0], 2.0, 1e-12);
  lam = lagrange_closed_form({{2.0}}, {{{-1.0}}}, {{0.5}}, 1.0, 4.0);
  EXPECT_NEAR(lam.lambdas[0][0], 1.0, 1e-12);
  lam = lagrange_closed_form({{2.0}}, {{{-1.0}}}, {{0.5}}, 1.0, 100.0);
  EXPECT_EQ(lam.lambdas[0][0], 0.0);
}

TEST(Multipliers, PenalizedMatchesNnlsWithoutPenalty) {
  Rng rng(11);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<std::vector<double>> cols(4);
    for (auto& c : cols) c = uniform_vector(rng, 5, -1.0, 1.0);
    const auto b = uniform_vector(rng, 5, -2.0, 2.0);
    const std::vector<double> zero(4, 0.0);
    EXPECT_NEAR(penalized_nnls(cols, b, zero).residual_norm, nnls(cols, b).residual_norm, 1e-8);
  }
}

TEST(Multipliers, ComplementarySlacknessOnEconomy) {
  const ExchangeScheme sc{ExchangeGame(mpg::testing::desk_economy())};
  const ValueNet vn(sc.game().num_players(), sc.feature_dim());
  Rng rng(2);
  const auto psi = vn.init(rng);
  const StateSample states = sample_states(sc.game(), 16, 1, 3, 0);
  KktOptions opt;
  opt.active_tol = 1e-10;
  for (int rep = 0; rep < 5; ++rep) {
    const auto theta = uniform_vector(rng, sc.theta_size(), -1.0, 1.0);
    double max_cs = 0.0;
    first_order_violation(sc, vn, theta, psi, states, opt, &max_cs);
    EXPECT_LE(max_cs, 1e-8);
  }
}

TEST(FirstOrderViolation, OracleEquilibriumBeatsRandomPolicies) {
  const auto econ = mpg::testing::toy_economy(1);
  const ExchangeScheme sc{ExchangeGame(econ)};
  const auto& game = sc.game();
  const StateVec<double> s0 = *econ.dirac_state;
  const EconomyState st = parse_state(econ, s0);
  const auto ce = mpg::testing::linear_ce_oracle(econ, st);
  MarketAction a;
  a.x = ce.x;
  a.p = ce.p;
  const auto prof = to_profile(econ, a);
  ASSERT_TRUE(is_feasible(game, s0, prof, 1e-6));

  KktOptions opt;
  opt.bootstrap = false;
  auto no_value = [](std::size_t, const auto& s) { return s[0] * 0.0; };
  const double fov_ce = sum_sq(kkt_residual_at<double>(game, s0, prof, {}, no_value, opt));
  EXPECT_LE(fov_ce, 1e-4);
  const double ex_ce = mpg::testing::linear_market_exploitability(econ, st, a);
  EXPECT_LE(ex_ce, 1e-2);
  // Single step: the oracle value is the reward itself, so the Bellman
  // residual vanishes.
  auto reward_value = [&](std::size_t i, const StateVec<double>& s) { return game.reward(s, prof)[i]; };
  for (double r : bellman_residual_at<double>(game, s0, prof, {}, reward_value, false)) EXPECT_EQ(r, 0.0);

  Rng rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    const auto theta = uniform_vector(rng, sc.theta_size(), -1.0, 1.0);
    const auto pa = sc.policy(std::span<const double>(theta), s0);
    EXPECT_GT(sum_sq(kkt_residual_at<double>(game, s0, pa, {}, no_value, opt)), fov_ce);
    EXPECT_GT(mpg::testing::linear_market_exploitability(econ, st, to_market_action(econ, pa)), ex_ce);
  }
}

TEST(FirstOrderViolation, ZeroRewardGameVanishes) {
  const auto sc = scaled_quadratic(0.0);
  const ValueNet vn(2, 1);
  const std::vector<double> psi(vn.size(), 0.0);
  Rng rng(5);
  const auto theta = uniform_vector(rng, sc.theta_size(), -1.0, 1.0);
  const StateSample states = sample_states(sc.game(), 8, 1, 1, 0);
  EXPECT_EQ(first_order_violation(sc, vn, theta, psi, states, KktOptions{}), 0.0);
  EXPECT_EQ(bellman_error(sc, vn, theta, psi, states, true), 0.0);
}

TEST(BellmanError, ExactValueWithinTruncationBias) {
  const ExchangeScheme sc{ExchangeGame(mpg::testing::desk_economy())};
  const auto& game = sc.game();
  Rng rng(6);
  const auto theta = uniform_vector(rng, sc.theta_size(), -1.0, 1.0);
  RolloutConfig cfg;
  cfg.horizon = 30;
  cfg.n_trajectories = 1;
  auto exact = [&](std::size_t i, const StateVec<double>& s) {
    return state_value_estimate(sc, theta, s, cfg).values[i];
  };
  const StateSample states = sample_states(game, 8, 1, 2, 0);
  std::vector<double> mean(game.num_players(), 0.0);
  for (std::size_t k = 0; k < states.states.size(); ++k) {
    const auto a = sc.policy(std::span<const double>(theta), states.states[k]);
    const auto res = bellman_residual_at<double>(game, states.states[k], a, states.shocks[k], exact, true);
    for (std::size_t i = 0; i < res.size(); ++i) mean[i] += res[i] / static_cast<double>(states.states.size());
  }
  double be = 0.0;
  for (double v : mean) be += v * v;
  const double bias = truncation_bias_bound(game.discount(), 30, game.reward_bound());
  EXPECT_LE(be, static_cast<double>(game.num_players()) * bias * bias);
}

TEST(BellmanError, RegressionFitImproves) {
  const ExchangeScheme sc{ExchangeGame(mpg::testing::desk_economy(UtilityKind::linear,
                                                                    EconomyTransition::stochastic))};
  Rng rng(7);
  const auto theta = uniform_vector(rng, sc.theta_size(), -1.0, 1.0);
  RolloutConfig cfg;
  cfg.horizon = 30;
  cfg.n_trajectories = 32;
  cfg.seed = 3;
  const ValueSamples data = collect_value_samples(sc, theta, cfg);
  const ValueNet vn(sc.game().num_players(), sc.feature_dim());
  std::vector<double> psi = vn.init(rng);
  const auto errors = fit_value_gradient(vn, psi, data, 400, 1e-2);
  // Window means of the error trace decrease.
  for (std::size_t w = 1; w < 8; ++w) {
    double prev = 0.0, cur = 0.0;
    for (std::size_t k = 0; k < 50; ++k) {
      prev += errors[(w - 1) * 50 + k];
      cur += errors[w * 50 + k];
    }
    EXPECT_LT(cur, prev);
  }
  // Ridge regression solves the same least-squares problem directly.
  const auto ridge = fit_value_ridge(vn, data);
  EXPECT_LE(value_fit_error(vn, ridge, data), errors.back() * (1.0 + 1e-6));
}

TEST(Scaling, MetricsUnderRewardScaling) {
  const double c = 3.0;
  const auto base = scaled_quadratic(1.0);
  const auto big = scaled_quadratic(c);
  Rng rng(8);
  const auto theta = uniform_vector(rng, base.theta_size(), -1.0, 1.0);

  // With SGD at step lr / c the adversary follows the same path, so the
  // best regret found is exactly c times larger.
  AscentConfig cfg;
  cfg.rule = UpdateRule::sgd;
  cfg.steps = 100;
  cfg.lr = 1e-1;
  cfg.batch = 1;
  cfg.eval_trajectories = 1;
  cfg.horizon = 10;
  const auto e1 = exploitability_estimate(base, theta, cfg, 2);
  cfg.lr /= c;
  const auto ec = exploitability_estimate(big, theta, cfg, 2);
  EXPECT_NEAR(ec.value / e1.value, c, 1e-8 * c);

  // Value heads scaled with the rewards.
  const ValueNet vn(2, 1);
  const auto psi = vn.init(rng);
  std::vector<double> psi_c = psi;
  for (double& v : psi_c) v *= c;
  const StateSample states = sample_states(base.game(), 4, 1, 1, 0);
  const double f1 = first_order_violation(base, vn, theta, psi, states, KktOptions{});
  const double fc = first_order_violation(big, vn, theta, psi_c, states, KktOptions{});
  EXPECT_NEAR(fc / f1, c * c, 1e-8 * c * c);
  const double b1 = bellman_error(base, vn, theta, psi, states, true);
  const double bc = bellman_error(big, vn, theta, psi_c, states, true);
  // A squared residual norm scales with c^2, like the first-order violation.
  EXPECT_NEAR(bc / b1, c * c, 1e-8 * c * c);
}

TEST(Normalization, Examples) {
  MetricsRecord b1, b2;
  b1.exploitability = 1.0;
  b1.fov = 2.0;
  b1.bellman = 4.0;
  b2.exploitability = 3.0;
  b2.fov = 4.0;
  b2.bellman = 8.0;
  const std::vector<MetricsRecord> base{b1, b2};
  MetricsRecord raw;
  raw.exploitability = 2.0;
  raw.fov = 3.0;
  raw.bellman = 6.0;
  auto n = normalized_metrics(raw, base);
  EXPECT_DOUBLE_EQ(n.exploitability, 1.0);
  EXPECT_DOUBLE_EQ(n.fov, 1.0);
  EXPECT_DOUBLE_EQ(n.bellman, 1.0);
  n = normalized_metrics(MetricsRecord{}, base);
  EXPECT_EQ(n.exploitability, 0.0);
  EXPECT_EQ(n.fov, 0.0);
  raw.exploitability = 4.0;
  EXPECT_DOUBLE_EQ(normalized_metrics(raw, base).exploitability, 2.0);
  const std::vector<MetricsRecord> zeros(3);
  EXPECT_THROW(normalized_metrics(raw, zeros), SpecError);
  EXPECT_THROW(normalized_metrics(raw, std::span<const MetricsRecord>{}), SpecError);
}

TEST(Npm, ZeroRewardLeavesPolicyUnchanged) {
  const auto sc = scaled_quadratic(0.0);
  Rng rng(9);
  const auto theta0 = uniform_vector(rng, sc.theta_size(), -1.0, 1.0);
  NpmConfig cfg;
  cfg.iters = 20;
  cfg.states_per_iter = 2;
  const auto out = train_npm(sc, cfg, 3, theta0);
  EXPECT_EQ(out.theta, theta0);
  EXPECT_FALSE(out.trace.diverged);
}

TEST(Npm, SingleStepToyBeatsRandomPolicies) {
  const auto econ = mpg::testing::toy_economy(1);
  const ExchangeScheme sc{ExchangeGame(econ)};
  NpmConfig cfg;
  cfg.rule = UpdateRule::adam;
  cfg.lr = 1e-2;
  cfg.iters = 4000;
  cfg.lr_decay_every = 1000;
  cfg.states_per_iter = 1;
  cfg.kkt.bootstrap = false;
  const auto out = train_npm(sc, cfg, 4);
  ASSERT_FALSE(out.trace.diverged);
  const StateSample states = sample_states(sc.game(), 1, 1, 5, 0);
  const double trained = first_order_violation(sc, out.value_net, out.theta, out.psi, states, cfg.kkt);
  Rng rng(10);
  double random_mean = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    const auto theta = uniform_vector(rng, sc.theta_size(), -1.0, 1.0);
    random_mean += first_order_violation(sc, out.value_net, theta, out.psi, states, cfg.kkt) / 20.0;
  }
  EXPECT_LE(10.0 * trained, random_mean);
}

TEST(MetricCsv, Schema) {
  MetricsRecord raw, norm;
  raw.exploitability = 0.5;
  raw.exploitability_se = 0.01;
  norm.exploitability = 0.25;
  const auto rows = metric_rows("r1", "gapnet", "econ-a", raw, norm);
  ASSERT_EQ(rows.size(), 3u);
  std::ostringstream os;
  write_metric_csv(os, std::span<const MetricRow>(rows));
  const std::string text = os.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "run_id,method,economy_id,metric,raw,normalized,std_err");
  EXPECT_NE(text.find("r1,gapnet,econ-a,exploitability,0.5,0.25,0.01"), std::string::npos);
  EXPECT_NE(text.find("r1,gapnet,econ-a,fov,"), std::string::npos);
  EXPECT_NE(text.find("r1,gapnet,econ-a,bellman,"), std::string::npos);
}
