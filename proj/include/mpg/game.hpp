#pragma once

// Markov pseudo-games: players choose continuous actions from feasible sets
// that depend on the state and on the other players' simultaneous actions.
//
// A game type models the MarkovPseudoGame concept. Its reward, constraint and
// transition members are templates over the scalar type, so the same model
// code is evaluated plainly, differentiated in reverse mode through whole
// trajectories, and differentiated in forward mode with respect to actions.

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mpg/ad.hpp"
#include "mpg/numeric.hpp"

namespace mpg {

/// Raised when inputs do not match the game's declared dimensions.
class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <class T>
using StateVec = std::vector<T>;

/// Per-player action vectors.
template <class T>
using ActionProfile = std::vector<std::vector<T>>;

/// values[i][d] = g_{i,d}(s, a); the profile is feasible iff all are >= 0.
template <class T>
using ConstraintEval = std::vector<std::vector<T>>;

/// Next state = deterministic_part(s, a, shock) with shock ~ sampler,
/// independent of actions. `deterministic` games ignore the shock.
enum class TransitionKind { deterministic, exogenous_shock };

/// Ambient per-player action box.
struct Box {
  std::vector<double> lo;
  std::vector<double> hi;
};

/// Default tolerances for feasibility checks.
inline constexpr double kProjectedFeasibilityTol = 1e-9;
inline constexpr double kUserFeasibilityTol = 1e-6;

template <class G>
concept MarkovPseudoGame =
    requires(const G& g, const StateVec<double>& s,
             const ActionProfile<double>& a, const std::vector<double>& shock,
             Rng& rng, std::size_t i) {
      { g.num_players() } -> std::convertible_to<std::size_t>;
      { g.state_dim() } -> std::convertible_to<std::size_t>;
      { g.action_dim(i) } -> std::convertible_to<std::size_t>;
      { g.discount() } -> std::convertible_to<double>;
      { g.transition_kind() } -> std::same_as<TransitionKind>;
      { g.reward_bound() } -> std::convertible_to<double>;
      { g.action_box(i) } -> std::same_as<Box>;
      { g.sample_initial(rng) } -> std::same_as<StateVec<double>>;
      { g.sample_shock(rng) } -> std::same_as<std::vector<double>>;
      { g.reward(s, a) } -> std::same_as<std::vector<double>>;
      { g.constraints(s, a) } -> std::same_as<ConstraintEval<double>>;
      { g.transition(s, a, shock) } -> std::same_as<StateVec<double>>;
    };

/// A finite trajectory. states has one more entry than actions and rewards.
struct History {
  std::vector<StateVec<double>> states;
  std::vector<ActionProfile<double>> actions;
  std::vector<std::vector<double>> rewards;

  [[nodiscard]] std::size_t length() const { return actions.size(); }
};

// ---------------------------------------------------------------------------

template <MarkovPseudoGame G, class T>
void check_dimensions(const G& game, std::span<const T> s,
                      const ActionProfile<T>& a) {
  if (s.size() != game.state_dim()) {
    throw SpecError("state has dimension " + std::to_string(s.size()) +
                    ", game expects " + std::to_string(game.state_dim()));
  }
  if (a.size() != game.num_players()) {
    throw SpecError("action profile has " + std::to_string(a.size()) +
                    " players, game has " + std::to_string(game.num_players()));
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != game.action_dim(i)) {
      throw SpecError("player " + std::to_string(i) + " action has dimension " +
                      std::to_string(a[i].size()) + ", expected " +
                      std::to_string(game.action_dim(i)));
    }
  }
}

template <MarkovPseudoGame G>
std::vector<double> reward(const G& game, const StateVec<double>& s,
                           const ActionProfile<double>& a) {
  check_dimensions<G, double>(game, s, a);
  return game.reward(s, a);
}

template <MarkovPseudoGame G>
ConstraintEval<double> constraint_values(const G& game,
                                         const StateVec<double>& s,
                                         const ActionProfile<double>& a) {
  check_dimensions<G, double>(game, s, a);
  return game.constraints(s, a);
}

/// Smallest constraint value over all players (+inf when unconstrained).
inline double min_constraint(const ConstraintEval<double>& g) {
  double lo = std::numeric_limits<double>::infinity();
  for (const auto& player : g) {
    for (double v : player) lo = std::min(lo, v);
  }
  return lo;
}

template <MarkovPseudoGame G>
bool is_feasible(const G& game, const StateVec<double>& s,
                 const ActionProfile<double>& a, double tol) {
  if (tol < 0.0) throw SpecError("feasibility tolerance must be >= 0");
  return min_constraint(constraint_values(game, s, a)) >= -tol;
}

template <MarkovPseudoGame G>
StateVec<double> sample_initial(const G& game, Rng& rng) {
  return game.sample_initial(rng);
}

/// One environment step: draws a shock and applies the deterministic part.
template <MarkovPseudoGame G>
StateVec<double> step(const G& game, const StateVec<double>& s,
                      const ActionProfile<double>& a, Rng& rng) {
  check_dimensions<G, double>(game, s, a);
  const std::vector<double> shock = game.sample_shock(rng);
  return game.transition(s, a, shock);
}

/// Flattened action-profile size.
template <MarkovPseudoGame G>
std::size_t profile_size(const G& game) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < game.num_players(); ++i) n += game.action_dim(i);
  return n;
}

template <class T>
std::vector<T> flatten(const ActionProfile<T>& a) {
  std::vector<T> out;
  for (const auto& ai : a) out.insert(out.end(), ai.begin(), ai.end());
  return out;
}

/// Game with every reward multiplied by a constant; scale 0 gives the
/// zero-reward game with the same feasible sets and dynamics.
template <MarkovPseudoGame G>
class RewardScaledGame {
 public:
  RewardScaledGame(G base, double scale) : base_(std::move(base)), scale_(scale) {}

  [[nodiscard]] std::size_t num_players() const { return base_.num_players(); }
  [[nodiscard]] std::size_t state_dim() const { return base_.state_dim(); }
  [[nodiscard]] std::size_t action_dim(std::size_t i) const { return base_.action_dim(i); }
  [[nodiscard]] double discount() const { return base_.discount(); }
  [[nodiscard]] TransitionKind transition_kind() const { return base_.transition_kind(); }
  [[nodiscard]] double reward_bound() const { return std::fabs(scale_) * base_.reward_bound(); }
  [[nodiscard]] Box action_box(std::size_t i) const { return base_.action_box(i); }
  StateVec<double> sample_initial(Rng& rng) const { return base_.sample_initial(rng); }
  std::vector<double> sample_shock(Rng& rng) const { return base_.sample_shock(rng); }

  template <class T>
  std::vector<T> reward(const StateVec<T>& s, const ActionProfile<T>& a) const {
    std::vector<T> r = base_.reward(s, a);
    for (T& v : r) v = v * scale_;
    return r;
  }
  template <class T>
  ConstraintEval<T> constraints(const StateVec<T>& s, const ActionProfile<T>& a) const {
    return base_.constraints(s, a);
  }
  template <class T>
  StateVec<T> transition(const StateVec<T>& s, const ActionProfile<T>& a,
                         const std::vector<double>& shock) const {
    return base_.transition(s, a, shock);
  }

  [[nodiscard]] const G& base() const { return base_; }
  [[nodiscard]] double scale() const { return scale_; }

 private:
  G base_;
  double scale_;
};

}  // namespace mpg
