#pragma once

// Parameterized Markov policies pi(s; theta) and dependent adversaries
// rho(s, a; phi). A parameterization scheme owns the networks and the
// feasibility-preserving output layers, so every emitted profile is feasible
// by construction and smooth in the parameters.

#include <array>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mpg/ad.hpp"
#include "mpg/game.hpp"
#include "mpg/network.hpp"
#include "mpg/numeric.hpp"

namespace mpg {

/// Sharpness of the smooth budget clamp: the clamp's softplus temperature is
/// slack / kappa, so an exactly-affordable bundle loses a fraction of about
/// log(2) / kappa of its cost.
inline constexpr double kDefaultKappa = 1000.0;

// ---------------------------------------------------------------------------
// Output layers.

enum class BlockKind { simplex, box, budget_scale, none };

inline std::string to_string(BlockKind k) {
  switch (k) {
    case BlockKind::simplex: return "simplex";
    case BlockKind::box: return "box";
    case BlockKind::budget_scale: return "budget-scale";
    case BlockKind::none: return "none";
  }
  return "?";
}

struct ProjectionBlock {
  BlockKind kind = BlockKind::none;
  std::size_t offset = 0;
  std::size_t size = 0;
  double lo = 0.0;  // box bounds
  double hi = 1.0;
  std::string label;
};

/// Partition of a raw network output into projected blocks. Budget-scale
/// blocks need prices and endowments and are resolved by the owning scheme;
/// apply_projection handles the context-free kinds.
struct ProjectionSpec {
  std::vector<ProjectionBlock> blocks;
  std::size_t raw_size = 0;

  void validate() const {
    std::size_t next = 0;
    for (const auto& b : blocks) {
      if (b.offset != next) throw SpecError("projection blocks must partition the output");
      if (b.kind == BlockKind::box && !(b.lo < b.hi)) throw SpecError("box block needs lo < hi");
      next += b.size;
    }
    if (next != raw_size) throw SpecError("projection blocks do not cover the output");
  }

  [[nodiscard]] std::string describe() const {
    std::string s;
    for (const auto& b : blocks) {
      if (!s.empty()) s += ",";
      s += b.label + ":" + to_string(b.kind) + "[" + std::to_string(b.size) + "]";
    }
    return s;
  }
};

/// Softmax; smooth, nonnegative, sums to 1.
template <class T>
std::vector<T> project_simplex(std::span<const T> v) {
  return softmax(v);
}
template <class T>
std::vector<T> project_simplex(const std::vector<T>& v) {
  return softmax(std::span<const T>(v));
}

/// lo + (hi - lo) * sigmoid(v), elementwise.
template <class T>
std::vector<T> project_box(std::span<const T> v, double lo, double hi) {
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = lo + (hi - lo) * sigmoid(v[i]);
  return out;
}

template <class T>
std::vector<T> apply_projection(const ProjectionSpec& spec, std::span<const T> raw) {
  if (raw.size() != spec.raw_size) throw SpecError("raw output size mismatch");
  std::vector<T> out;
  out.reserve(raw.size());
  for (const auto& b : spec.blocks) {
    auto part = raw.subspan(b.offset, b.size);
    std::vector<T> y;
    switch (b.kind) {
      case BlockKind::simplex: y = project_simplex(part); break;
      case BlockKind::box: y = project_box(part, b.lo, b.hi); break;
      case BlockKind::none: y.assign(part.begin(), part.end()); break;
      case BlockKind::budget_scale:
        throw SpecError("budget-scale block '" + b.label + "' needs market context");
    }
    out.insert(out.end(), y.begin(), y.end());
  }
  return out;
}

template <class T>
struct Bundle {
  std::vector<T> x;
  std::vector<T> b;
};

/// Smoothly scales (x, b) toward the anchor (0, anchor_b) until the bundle is
/// affordable: x.p + b.q <= e.p. The anchor must itself be affordable; the
/// default anchor b = 0 always is. With slack0 the anchor's budget slack and
/// c the extra cost of the raw bundle over the anchor, the scale is
///   s = slack0 / (slack0 + softplus_beta(c - slack0)),  beta = kappa / slack0,
/// which is below slack0 / c whenever c > 0, and 1 - O(exp(-kappa)) when the
/// raw bundle is comfortably affordable.
template <class T>
Bundle<T> budget_scale(std::span<const T> raw_x, std::span<const T> raw_b,
                       std::span<const T> p, std::span<const T> q,
                       std::span<const T> e, std::span<const double> anchor_b = {},
                       double kappa = kDefaultKappa) {
  if (raw_x.size() != p.size() || e.size() != p.size() || raw_b.size() != q.size()) {
    throw SpecError("budget_scale: dimension mismatch");
  }
  const bool anchored = !anchor_b.empty();
  if (anchored && anchor_b.size() != raw_b.size()) throw SpecError("budget_scale: anchor size");
  T slack0 = dot(e, p);
  T cost = dot(raw_x, p);
  std::vector<T> rel_b(raw_b.begin(), raw_b.end());
  for (std::size_t a = 0; a < q.size(); ++a) {
    const double anc = anchored ? anchor_b[a] : 0.0;
    slack0 -= anc * q[a];
    rel_b[a] = raw_b[a] - anc;
  }
  cost += dot(std::span<const T>(rel_b), q);

  Bundle<T> out;
  if (value_of(slack0) <= 0.0) {
    // Degenerate budget: only the anchor is affordable.
    out.x.assign(raw_x.size(), T(0.0));
    for (std::size_t a = 0; a < q.size(); ++a) out.b.push_back(T(anchored ? anchor_b[a] : 0.0));
    return out;
  }
  const T beta = kappa / slack0;
  const T s = slack0 / (slack0 + softplus(beta * (cost - slack0)) / beta);
  out.x.resize(raw_x.size());
  for (std::size_t j = 0; j < raw_x.size(); ++j) out.x[j] = s * raw_x[j];
  out.b.resize(raw_b.size());
  for (std::size_t a = 0; a < raw_b.size(); ++a) {
    out.b[a] = (anchored ? anchor_b[a] : 0.0) + s * rel_b[a];
  }
  return out;
}

template <class T>
Bundle<T> budget_scale(const std::vector<T>& raw_x, const std::vector<T>& raw_b,
                       const std::vector<T>& p, const std::vector<T>& q,
                       const std::vector<T>& e) {
  return budget_scale(std::span<const T>(raw_x), std::span<const T>(raw_b),
                      std::span<const T>(p), std::span<const T>(q),
                      std::span<const T>(e));
}

// ---------------------------------------------------------------------------
// Schemes.

/// A parameterization scheme provides pi(s; theta) and per-player dependent
/// deviations rho_i(s, a_{-i}; phi). `deviation` receives the whole profile
/// and must read only the other players' entries.
template <class S>
concept ParameterizationScheme =
    MarkovPseudoGame<typename S::game_type> &&
    requires(const S& sc, std::size_t i, Rng& rng, std::span<const double> w,
             const StateVec<double>& s, const ActionProfile<double>& a,
             std::span<const Var> wv, const StateVec<Var>& sv,
             const ActionProfile<Var>& av) {
      { sc.game() } -> std::convertible_to<const typename S::game_type&>;
      { sc.theta_size() } -> std::convertible_to<std::size_t>;
      { sc.phi_size() } -> std::convertible_to<std::size_t>;
      { sc.policy(w, s) } -> std::same_as<ActionProfile<double>>;
      { sc.policy(wv, sv) } -> std::same_as<ActionProfile<Var>>;
      { sc.deviation(i, w, s, a) } -> std::same_as<std::vector<double>>;
      { sc.deviation(i, wv, sv, av) } -> std::same_as<std::vector<Var>>;
      { sc.init_theta(rng) } -> std::same_as<std::vector<double>>;
      { sc.init_phi(rng) } -> std::same_as<std::vector<double>>;
      { sc.theta_architecture_hash() } -> std::convertible_to<std::uint64_t>;
      { sc.phi_architecture_hash() } -> std::convertible_to<std::uint64_t>;
    };

template <ParameterizationScheme S>
ActionProfile<double> policy_eval(const S& scheme, std::span<const double> theta,
                                  const StateVec<double>& s) {
  if (theta.size() != scheme.theta_size()) throw SpecError("theta has wrong length");
  if (s.size() != scheme.game().state_dim()) throw SpecError("state has wrong dimension");
  return scheme.policy(theta, s);
}

/// Entry i is player i's deviation rho_i(s, a_{-i}; phi).
template <ParameterizationScheme S>
ActionProfile<double> dependent_eval(const S& scheme, std::span<const double> phi,
                                     const StateVec<double>& s,
                                     const ActionProfile<double>& a_others) {
  if (phi.size() != scheme.phi_size()) throw SpecError("phi has wrong length");
  check_dimensions<typename S::game_type, double>(scheme.game(), s, a_others);
  ActionProfile<double> out(a_others.size());
  for (std::size_t i = 0; i < a_others.size(); ++i) {
    out[i] = scheme.deviation(i, phi, s, a_others);
  }
  return out;
}

/// Reverse-mode Jacobian of the flattened projected profile, row-major
/// (profile_size x |theta|).
template <ParameterizationScheme S>
std::vector<double> grad_policy(const S& scheme, std::span<const double> theta,
                                const StateVec<double>& s) {
  const StateVec<Var> sv(s.begin(), s.end());
  return jacobian(
      [&](std::span<const Var> th) { return flatten(scheme.policy(th, sv)); }, theta);
}

/// Jacobian of the deviation profile with respect to phi.
template <ParameterizationScheme S>
std::vector<double> grad_deviation(const S& scheme, std::span<const double> phi,
                                   const StateVec<double>& s,
                                   const ActionProfile<double>& a) {
  const StateVec<Var> sv(s.begin(), s.end());
  ActionProfile<Var> av;
  for (const auto& ai : a) av.emplace_back(ai.begin(), ai.end());
  return jacobian(
      [&](std::span<const Var> ph) {
        std::vector<Var> out;
        for (std::size_t i = 0; i < av.size(); ++i) {
          auto d = scheme.deviation(i, ph, sv, av);
          out.insert(out.end(), d.begin(), d.end());
        }
        return out;
      },
      phi);
}

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte magic, architecture hash, length, raw doubles.

inline constexpr std::array<char, 8> kCheckpointMagic = {'M', 'P', 'G', 'C', 'K', 'P', 'T', '1'};

inline void save_checkpoint(const std::string& path, std::uint64_t arch_hash,
                            std::span<const double> params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  const std::uint64_t n = params.size();
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  out.write(reinterpret_cast<const char*>(&arch_hash), sizeof arch_hash);
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(reinterpret_cast<const char*>(params.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
}

inline std::vector<double> load_checkpoint(const std::string& path,
                                           std::uint64_t expected_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path);
  std::array<char, 8> magic{};
  std::uint64_t hash = 0, n = 0;
  in.read(magic.data(), magic.size());
  in.read(reinterpret_cast<char*>(&hash), sizeof hash);
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in || magic != kCheckpointMagic) throw std::runtime_error(path + ": not a checkpoint");
  if (hash != expected_hash) throw std::runtime_error(path + ": architecture mismatch");
  std::vector<double> params(n);
  in.read(reinterpret_cast<char*>(params.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw std::runtime_error(path + ": truncated checkpoint");
  return params;
}

// ---------------------------------------------------------------------------
// Generic scheme for games whose only constraints are per-player action
// boxes. Policies and adversaries are networks followed by a sigmoid box.

template <MarkovPseudoGame G>
class BoxPolicyScheme {
 public:
  using game_type = G;

  BoxPolicyScheme(G game, std::vector<std::size_t> hidden = {},
                  Activation act = Activation::tanh)
      : game_(std::move(game)) {
    const std::size_t sd = game_.state_dim();
    const std::size_t total = profile_size(game_);
    policy_arch_ = {sd, hidden, total, act};
    std::size_t off = 0;
    for (std::size_t i = 0; i < game_.num_players(); ++i) {
      const std::size_t own = game_.action_dim(i);
      Architecture arch{sd + total - own, hidden, own, act};
      dev_arch_.push_back(arch);
      dev_offset_.push_back(off);
      off += arch.param_count();
      boxes_.push_back(game_.action_box(i));
    }
    phi_size_ = off;
  }

  [[nodiscard]] const G& game() const { return game_; }
  [[nodiscard]] std::size_t theta_size() const { return policy_arch_.param_count(); }
  [[nodiscard]] std::size_t phi_size() const { return phi_size_; }
  [[nodiscard]] std::uint64_t theta_architecture_hash() const { return policy_arch_.hash(); }
  [[nodiscard]] std::uint64_t phi_architecture_hash() const {
    std::uint64_t h = 0;
    for (const auto& a : dev_arch_) h = mix_seed(h ^ a.hash());
    return h;
  }
  std::vector<double> init_theta(Rng& rng) const { return init_params(policy_arch_, rng); }
  std::vector<double> init_phi(Rng& rng) const { return uniform_vector(rng, phi_size_, -0.05, 0.05); }

  template <class T>
  ActionProfile<T> policy(std::span<const T> theta, const StateVec<T>& s) const {
    const std::vector<T> raw = forward(policy_arch_, theta, std::span<const T>(s));
    ActionProfile<T> a(game_.num_players());
    std::size_t off = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = box(i, std::span<const T>(raw).subspan(off, game_.action_dim(i)));
      off += game_.action_dim(i);
    }
    return a;
  }

  template <class T>
  std::vector<T> deviation(std::size_t i, std::span<const T> phi, const StateVec<T>& s,
                           const ActionProfile<T>& a) const {
    std::vector<T> in(s.begin(), s.end());
    for (std::size_t l = 0; l < a.size(); ++l) {
      if (l != i) in.insert(in.end(), a[l].begin(), a[l].end());
    }
    const auto block = phi.subspan(dev_offset_[i], dev_arch_[i].param_count());
    const std::vector<T> raw = forward(dev_arch_[i], block, std::span<const T>(in));
    return box(i, std::span<const T>(raw));
  }

 private:
  template <class T>
  std::vector<T> box(std::size_t i, std::span<const T> raw) const {
    std::vector<T> out(raw.size());
    for (std::size_t d = 0; d < raw.size(); ++d) {
      out[d] = boxes_[i].lo[d] + (boxes_[i].hi[d] - boxes_[i].lo[d]) * sigmoid(raw[d]);
    }
    return out;
  }

  G game_;
  Architecture policy_arch_;
  std::vector<Architecture> dev_arch_;
  std::vector<std::size_t> dev_offset_;
  std::vector<Box> boxes_;
  std::size_t phi_size_ = 0;
};

}  // namespace mpg
