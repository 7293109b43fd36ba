#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "fixtures.hpp"
#include "mpg/economy.hpp"
#include "mpg/policies.hpp"

using namespace mpg;
using mpg::testing::desk_economy;

TEST(Projection, SimplexExamples) {
  auto p = project_simplex(std::vector<double>{0.0, 0.0});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
  p = project_simplex(std::vector<double>{std::log(3.0), 0.0});
  EXPECT_NEAR(p[0], 0.75, 1e-15);
  EXPECT_NEAR(p[1], 0.25, 1e-15);
  p = project_simplex(std::vector<double>{100.0, 0.0});
  EXPECT_NEAR(p[0], 1.0, 1e-10);
  EXPECT_NEAR(p[1], 0.0, 1e-10);
}

TEST(Projection, SoftmaxJacobianAtUniformPoint) {
  // d softmax / d v at v = 0 is diag(1/m) - 1/m^2.
  const std::size_t m = 4;
  const std::vector<double> v(m, 0.0);
  const auto J = jacobian([](std::span<const Var> x) { return project_simplex(x); }, v);
  const double md = static_cast<double>(m);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < m; ++c) {
      EXPECT_NEAR(J[r * m + c], (r == c ? 1.0 / md : 0.0) - 1.0 / (md * md), 1e-15);
    }
  }
}

TEST(Projection, SpecRejectsOverlappingBlocks) {
  ProjectionSpec spec;
  spec.raw_size = 4;
  spec.blocks.push_back({BlockKind::simplex, 0, 3, 0.0, 1.0, "a"});
  spec.blocks.push_back({BlockKind::box, 2, 2, 0.0, 1.0, "b"});
  EXPECT_THROW(spec.validate(), SpecError);
}

TEST(BudgetScale, AffordableBundleIsUnchanged) {
  const std::vector<double> x{0.1, 0.2}, b{}, p{0.5, 0.5}, q{}, e{0.6, 0.6};
  const auto out = budget_scale(x, b, p, q, e);
  EXPECT_DOUBLE_EQ(out.x[0], 0.1);
  EXPECT_DOUBLE_EQ(out.x[1], 0.2);
}

TEST(BudgetScale, OverspendingBundleIsScaledIntoBudget) {
  const std::vector<double> p{0.3, 0.7}, q{0.4}, e{0.2, 0.5};
  const double wealth = 0.2 * 0.3 + 0.5 * 0.7;
  const std::vector<double> x{0.4, 1.0}, b{0.05};
  ASSERT_NEAR(0.4 * 0.3 + 1.0 * 0.7 + 0.05 * 0.4, 2.0 * wealth + 0.02, 1e-12);
  const auto out = budget_scale(x, b, p, q, e);
  const double cost = out.x[0] * p[0] + out.x[1] * p[1] + out.b[0] * q[0];
  EXPECT_LE(cost, wealth);
  // Far from the boundary the smooth scale is the exact ratio.
  EXPECT_NEAR(cost, wealth, 1e-12);
  EXPECT_GT(out.x[0], 0.0);
}

TEST(BudgetScale, ZeroEndowmentForcesZeroCost) {
  const std::vector<double> x{0.4, 1.0}, b{}, p{0.3, 0.7}, q{}, e{0.0, 0.0};
  const auto out = budget_scale(x, b, p, q, e);
  EXPECT_EQ(out.x[0], 0.0);
  EXPECT_EQ(out.x[1], 0.0);
}

TEST(BudgetScale, AnchorOnShortPosition) {
  // Anchored at b = -0.1 the budget gains 0.1 q of slack.
  const std::vector<double> x{0.5, 0.5}, b{0.1}, p{0.5, 0.5}, q{0.2}, e{0.1, 0.1};
  const std::vector<double> anchor{-0.1};
  const auto out = budget_scale(std::span<const double>(x), std::span<const double>(b), std::span<const double>(p),
                                std::span<const double>(q), std::span<const double>(e),
                                std::span<const double>(anchor));
  const double cost = out.x[0] * p[0] + out.x[1] * p[1] + out.b[0] * q[0];
  EXPECT_NEAR(cost, 0.1, 1e-12);
  EXPECT_GE(out.b[0], -0.1);
  EXPECT_LE(out.b[0], 0.1);
}

TEST(BudgetScale, SaturatedDeviationBindsBudget) {
  const ExchangeGame game(mpg::testing::toy_economy());
  const auto& econ = game.economy();
  Rng rng(4);
  const StateVec<double> s = game.sample_initial(rng);
  const EconomyState st = parse_state(econ, s);
  const std::vector<double> p{0.4, 0.6}, q{};
  // Demand the entire supply; the scaled bundle spends the whole budget.
  std::vector<double> raw{st.e[0] + st.e[2], st.e[1] + st.e[3]};
  const std::vector<double> e0(st.e.begin(), st.e.begin() + 2);
  const auto out = budget_scale(raw, std::vector<double>{}, p, q, e0);
  ActionProfile<double> a{out.x, {0.0, 0.0}, p};
  EXPECT_NEAR(game.constraints(s, a)[0][0], 0.0, 1e-9);
}

TEST(FiniteDifferences, FlagsHardClamp) {
  // A hard clamp has a kink the analytic derivative cannot describe.
  const std::vector<double> x{1.0};
  const std::vector<double> grad{1.0};
  auto clamp = [](std::span<const double> v) { return std::vector<double>{std::min(v[0], 1.0)}; };
  EXPECT_GT(finite_diff_check(clamp, x, grad, 1e-5).max_rel_error, 0.1);
  auto smooth = [](std::span<const double> v) { return std::vector<double>{v[0] * v[0]}; };
  const std::vector<double> g2{2.0};
  EXPECT_LT(finite_diff_check(smooth, x, g2, 1e-5).max_rel_error, 1e-9);
}

namespace {

void check_policy_jacobian(const ExchangeScheme& sc, double scale, std::uint64_t seed, double tol) {
  Rng rng(seed);
  double worst = 0.0;
  for (int probe = 0; probe < 20; ++probe) {
    const StateVec<double> s = sc.game().sample_initial(rng);
    const auto theta = uniform_vector(rng, sc.theta_size(), -scale, scale);
    const auto J = grad_policy(sc, theta, s);
    auto f = [&](std::span<const double> th) { return flatten(sc.policy(th, s)); };
    worst = std::max(worst, mpg::testing::fd4_relative_error(f, theta, J));
  }
  EXPECT_LE(worst, tol);
}

}  // namespace

TEST(PolicyGradient, AffineMatchesFiniteDifferences) {
  check_policy_jacobian(ExchangeScheme{ExchangeGame(desk_economy())}, 1.0, 1, 1e-5);
}

TEST(PolicyGradient, MlpMatchesFiniteDifferences) {
  ExchangeSchemeConfig cfg;
  cfg.hidden = {8};
  check_policy_jacobian(ExchangeScheme{ExchangeGame(desk_economy()), cfg}, 1.0, 2, 1e-5);
  cfg.activation = Activation::softplus;
  check_policy_jacobian(ExchangeScheme{ExchangeGame(desk_economy(UtilityKind::leontief)), cfg}, 1.0, 3, 1e-5);
}

TEST(PolicyGradient, ZeroParametersGiveUniformPrices) {
  const ExchangeScheme sc{ExchangeGame(desk_economy())};
  const auto& econ = sc.game().economy();
  Rng rng(5);
  const StateVec<double> s = sc.game().sample_initial(rng);
  const std::vector<double> theta(sc.theta_size(), 0.0);
  const auto a = policy_eval(sc, theta, s);
  for (std::size_t j = 0; j < econ.m; ++j) EXPECT_NEAR(a[econ.n][j], 1.0 / static_cast<double>(econ.m), 1e-15);

  // The price Jacobian is (diag(1/m) - 1/m^2) times the weight pattern:
  // d p_j / d W_{lc} = J_{jl} f_c.
  const auto J = grad_policy(sc, theta, s);
  const auto f = sc.features(s);
  const std::size_t nt = sc.theta_size(), fd = f.size(), m = econ.m;
  const std::size_t row0 = econ.n * (econ.m + econ.k);  // auctioneer's first entry
  const double md = static_cast<double>(m);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t l = 0; l < m; ++l) {
      const double js = (j == l ? 1.0 / md : 0.0) - 1.0 / (md * md);
      for (std::size_t c = 0; c < fd; ++c) EXPECT_NEAR(J[(row0 + j) * nt + l * fd + c], js * f[c], 1e-14);
    }
  }
}

TEST(PolicyEval, WrongSizesRaise) {
  const ExchangeScheme sc{ExchangeGame(desk_economy())};
  Rng rng(5);
  const StateVec<double> s = sc.game().sample_initial(rng);
  const std::vector<double> theta(sc.theta_size() + 1, 0.0);
  EXPECT_THROW(policy_eval(sc, theta, s), SpecError);
  const std::vector<double> ok(sc.theta_size(), 0.0);
  EXPECT_THROW(policy_eval(sc, ok, StateVec<double>(3, 0.0)), SpecError);
}

TEST(Deviations, AlwaysFeasibleAgainstOthers) {
  for (auto tr : {EconomyTransition::deterministic, EconomyTransition::stochastic}) {
    const ExchangeScheme sc{ExchangeGame(desk_economy(UtilityKind::linear, tr))};
    const auto& game = sc.game();
    Rng rng(6);
    double worst = std::numeric_limits<double>::infinity();
    for (int probe = 0; probe < 1000; ++probe) {
      const StateVec<double> s = game.sample_initial(rng);
      const auto theta = uniform_vector(rng, sc.theta_size(), -2.0, 2.0);
      const auto phi = uniform_vector(rng, sc.phi_size(), -3.0, 3.0);
      const auto a = sc.policy(std::span<const double>(theta), s);
      const auto dev = dependent_eval(sc, phi, s, a);
      for (std::size_t i = 0; i < game.num_players(); ++i) {
        ActionProfile<double> b = a;
        b[i] = dev[i];
        const auto g = game.constraints(s, b);
        for (double v : g[i]) worst = std::min(worst, v);
      }
    }
    EXPECT_GE(worst, -kProjectedFeasibilityTol);
  }
}

TEST(Deviations, IgnoreOwnEntry) {
  const ExchangeScheme sc{ExchangeGame(desk_economy())};
  Rng rng(7);
  const StateVec<double> s = sc.game().sample_initial(rng);
  const auto theta = uniform_vector(rng, sc.theta_size(), -1.0, 1.0);
  const auto phi = uniform_vector(rng, sc.phi_size(), -1.0, 1.0);
  auto a = sc.policy(std::span<const double>(theta), s);
  const auto before = sc.deviation(0, std::span<const double>(phi), s, a);
  for (double& v : a[0]) v *= 0.5;
  EXPECT_EQ(before, sc.deviation(0, std::span<const double>(phi), s, a));
}

TEST(Deviations, GradientMatchesFiniteDifferences) {
  const ExchangeScheme sc{ExchangeGame(desk_economy())};
  Rng rng(8);
  const StateVec<double> s = sc.game().sample_initial(rng);
  const auto theta = uniform_vector(rng, sc.theta_size(), -1.0, 1.0);
  const auto phi = uniform_vector(rng, sc.phi_size(), -1.0, 1.0);
  const auto a = sc.policy(std::span<const double>(theta), s);
  const auto J = grad_deviation(sc, phi, s, a);
  auto f = [&](std::span<const double> ph) { return flatten(dependent_eval(sc, ph, s, a)); };
  EXPECT_LE(mpg::testing::fd4_relative_error(f, phi, J), 1e-5);
}

TEST(Checkpoint, RoundTripAndHashGuard) {
  const auto path = (std::filesystem::temp_directory_path() / "mpg_ckpt_test.bin").string();
  const std::vector<double> params{1.5, -2.25, 1e-300, 3.141592653589793};
  save_checkpoint(path, 0xABCDu, params);
  EXPECT_EQ(load_checkpoint(path, 0xABCDu), params);
  EXPECT_THROW(load_checkpoint(path, 0xABCEu), std::runtime_error);
  EXPECT_THROW(load_checkpoint(path + ".missing", 0xABCDu), std::runtime_error);
  std::filesystem::remove(path);
}

TEST(BoxScheme, StaysInsideBoxes) {
  const BoxPolicyScheme<mpg::testing::QuadraticGame> sc(mpg::testing::QuadraticGame{}, {4});
  Rng rng(9);
  for (int probe = 0; probe < 200; ++probe) {
    const auto theta = uniform_vector(rng, sc.theta_size(), -5.0, 5.0);
    const StateVec<double> s{1.0};
    const auto a = sc.policy(std::span<const double>(theta), s);
    EXPECT_TRUE(is_feasible(sc.game(), s, a, 0.0));
  }
}
