#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "mpg/ad.hpp"

namespace mpg {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for stream `stream` split from `master`. Streams with different ids
/// never share state.
inline std::uint64_t stream_seed(std::uint64_t master, std::uint64_t stream) {
  return mix_seed(mix_seed(master) ^ mix_seed(stream + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t stream_seed(std::uint64_t master, std::uint64_t a,
                                 std::uint64_t b) {
  return stream_seed(stream_seed(master, a), b);
}

// Distributions are written out here instead of using <random>'s so that
// streams are identical across standard library implementations.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}
inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

inline std::vector<double> uniform_vector(Rng& rng, std::size_t n, double lo,
                                          double hi) {
  std::vector<double> v(n);
  for (double& x : v) x = uniform(rng, lo, hi);
  return v;
}

// ---------------------------------------------------------------------------
// Smooth building blocks.

/// Softmax; smooth map onto the open simplex.
template <class T>
std::vector<T> softmax(std::span<const T> v) {
  std::vector<T> out(v.size());
  if (v.empty()) return out;
  double shift = value_of(v[0]);
  for (const T& x : v) shift = std::max(shift, value_of(x));
  T total(0.0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = exp(v[i] - shift);
    total += out[i];
  }
  for (T& x : out) x = x / total;
  return out;
}
template <class T>
std::vector<T> softmax(const std::vector<T>& v) {
  return softmax(std::span<const T>(v));
}

/// Smooth upper bound of max(a, b): a + softplus(beta (b - a)) / beta.
/// Always >= max(a, b); the gap is at most log(2) / beta.
template <class T>
T smooth_max(const T& a, const T& b, double beta) {
  return a + softplus(beta * (b - a)) / beta;
}

/// Smooth lower bound of min(a, b).
template <class T>
T smooth_min(const T& a, const T& b, double beta) {
  return a - softplus(beta * (a - b)) / beta;
}

/// Softmin with temperature eps: -eps log sum exp(-z / eps). Lower bound of
/// min(z), within eps * log(n) of it.
template <class T>
T soft_minimum(std::span<const T> z, double eps) {
  double lo = value_of(z[0]);
  for (const T& x : z) lo = std::min(lo, value_of(x));
  T acc(0.0);
  for (const T& x : z) acc += exp(-(x - lo) / eps);
  return lo - eps * log(acc);
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_output = 0;
  std::size_t worst_input = 0;
};

/// Relative error measure used throughout the tests:
/// |a - b| / max(|a|, |b|, floor).
inline double relative_error(double a, double b, double floor = 1e-8) {
  const double scale = std::max({std::fabs(a), std::fabs(b), floor});
  return std::fabs(a - b) / scale;
}

/// Compares an analytic Jacobian (rows = outputs, row-major) of f at x with
/// central differences of step h.
inline FiniteDiffReport finite_diff_check(
    const std::function<std::vector<double>(std::span<const double>)>& f,
    std::span<const double> x, std::span<const double> jacobian, double h,
    double floor = 1e-8) {
  FiniteDiffReport report;
  std::vector<double> xp(x.begin(), x.end());
  const std::size_t n = x.size();
  for (std::size_t j = 0; j < n; ++j) {
    const double orig = xp[j];
    xp[j] = orig + h;
    const std::vector<double> fp = f(xp);
    xp[j] = orig - h;
    const std::vector<double> fm = f(xp);
    xp[j] = orig;
    for (std::size_t i = 0; i < fp.size(); ++i) {
      const double fd = (fp[i] - fm[i]) / (2.0 * h);
      const double an = jacobian[i * n + j];
      const double rel = relative_error(fd, an, floor);
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_output = i;
        report.worst_input = j;
      }
      report.max_abs_error = std::max(report.max_abs_error, std::fabs(fd - an));
    }
  }
  return report;
}

/// Reverse-mode Jacobian of f : R^n -> R^m at x, row-major m x n.
inline std::vector<double> jacobian(
    const std::function<std::vector<Var>(std::span<const Var>)>& f,
    std::span<const double> x) {
  Tape tape;
  TapeGuard guard(tape);
  std::vector<Var> xs(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) xs[j] = make_variable(x[j]);
  const std::vector<Var> ys = f(xs);
  std::vector<double> jac(ys.size() * x.size(), 0.0);
  for (std::size_t i = 0; i < ys.size(); ++i) {
    if (ys[i].id < 0) continue;
    const std::vector<double> adj = tape.adjoints(ys[i].id);
    for (std::size_t j = 0; j < x.size(); ++j) {
      jac[i * x.size() + j] = adj[static_cast<std::size_t>(xs[j].id)];
    }
  }
  return jac;
}

/// Function value and reverse-mode gradient of a scalar function.
inline double value_and_gradient(
    const std::function<Var(std::span<const Var>)>& f,
    std::span<const double> x, std::span<double> grad) {
  Tape tape;
  TapeGuard guard(tape);
  std::vector<Var> xs(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) xs[j] = make_variable(x[j]);
  const Var y = f(xs);
  std::fill(grad.begin(), grad.end(), 0.0);
  if (y.id >= 0) {
    const std::vector<double> adj = tape.adjoints(y.id);
    for (std::size_t j = 0; j < x.size(); ++j) {
      grad[j] = adj[static_cast<std::size_t>(xs[j].id)];
    }
  }
  return y.v;
}

// ---------------------------------------------------------------------------
// Non-negative least squares.

struct NnlsResult {
  std::vector<double> x;
  double residual_norm = 0.0;
};

/// Lawson-Hanson active-set solver for min ||A x - b|| s.t. x >= 0.
/// A is column-major: columns[j] is the j-th column (length b.size()).
inline NnlsResult nnls(const std::vector<std::vector<double>>& columns,
                       std::span<const double> b, int max_iter = 200) {
  const std::size_t n = columns.size();
  const std::size_t m = b.size();
  NnlsResult out;
  out.x.assign(n, 0.0);
  auto residual = [&](const std::vector<double>& x) {
    std::vector<double> r(b.begin(), b.end());
    for (std::size_t j = 0; j < n; ++j) {
      if (x[j] == 0.0) continue;
      for (std::size_t i = 0; i < m; ++i) r[i] -= columns[j][i] * x[j];
    }
    return r;
  };
  // Unconstrained least squares on the passive set via normal equations
  // with Gaussian elimination; systems here have a handful of columns.
  auto solve_passive = [&](const std::vector<std::size_t>& passive) {
    const std::size_t k = passive.size();
    std::vector<double> g(k * k, 0.0), rhs(k, 0.0);
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t c = 0; c < k; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += columns[passive[a]][i] * columns[passive[c]][i];
        g[a * k + c] = s;
      }
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += columns[passive[a]][i] * b[i];
      rhs[a] = s;
      g[a * k + a] += 1e-14;
    }
    for (std::size_t col = 0; col < k; ++col) {
      std::size_t piv = col;
      for (std::size_t r = col + 1; r < k; ++r) {
        if (std::fabs(g[r * k + col]) > std::fabs(g[piv * k + col])) piv = r;
      }
      if (piv != col) {
        for (std::size_t c = 0; c < k; ++c) std::swap(g[col * k + c], g[piv * k + c]);
        std::swap(rhs[col], rhs[piv]);
      }
      const double d = g[col * k + col];
      if (std::fabs(d) < 1e-300) continue;
      for (std::size_t r = col + 1; r < k; ++r) {
        const double f = g[r * k + col] / d;
        for (std::size_t c = col; c < k; ++c) g[r * k + c] -= f * g[col * k + c];
        rhs[r] -= f * rhs[col];
      }
    }
    std::vector<double> z(k, 0.0);
    for (std::size_t col = k; col-- > 0;) {
      double s = rhs[col];
      for (std::size_t c = col + 1; c < k; ++c) s -= g[col * k + c] * z[c];
      const double d = g[col * k + col];
      z[col] = std::fabs(d) < 1e-300 ? 0.0 : s / d;
    }
    return z;
  };

  std::vector<bool> in_passive(n, false);
  for (int iter = 0; iter < max_iter; ++iter) {
    const std::vector<double> r = residual(out.x);
    std::size_t best = n;
    double best_w = 1e-12;
    for (std::size_t j = 0; j < n; ++j) {
      if (in_passive[j]) continue;
      double w = 0.0;
      for (std::size_t i = 0; i < m; ++i) w += columns[j][i] * r[i];
      if (w > best_w) {
        best_w = w;
        best = j;
      }
    }
    if (best == n) break;
    in_passive[best] = true;
    for (int inner = 0; inner < max_iter; ++inner) {
      std::vector<std::size_t> passive;
      for (std::size_t j = 0; j < n; ++j) {
        if (in_passive[j]) passive.push_back(j);
      }
      const std::vector<double> z = solve_passive(passive);
      bool feasible = true;
      for (double v : z) feasible = feasible && v > 0.0;
      if (feasible) {
        for (std::size_t a = 0; a < passive.size(); ++a) out.x[passive[a]] = z[a];
        break;
      }
      double alpha = 1.0;
      for (std::size_t a = 0; a < passive.size(); ++a) {
        if (z[a] <= 0.0) {
          const double xj = out.x[passive[a]];
          alpha = std::min(alpha, xj / (xj - z[a]));
        }
      }
      for (std::size_t a = 0; a < passive.size(); ++a) {
        double& xj = out.x[passive[a]];
        xj += alpha * (z[a] - xj);
        if (xj <= 1e-15) {
          xj = 0.0;
          in_passive[passive[a]] = false;
        }
      }
    }
  }
  const std::vector<double> r = residual(out.x);
  double s = 0.0;
  for (double v : r) s += v * v;
  out.residual_norm = std::sqrt(s);
  return out;
}

/// min ||A x - b||^2 + c.x s.t. x >= 0 by cyclic projected coordinate
/// descent. Same column layout as nnls; c = 0 reduces to the same problem.
inline NnlsResult penalized_nnls(const std::vector<std::vector<double>>& columns, std::span<const double> b,
                                 std::span<const double> c, int sweeps = 2000, double tol = 1e-15) {
  const std::size_t n = columns.size();
  const std::size_t m = b.size();
  NnlsResult out;
  out.x.assign(n, 0.0);
  std::vector<double> r(b.begin(), b.end());  // b - A x
  for (int sweep = 0; sweep < sweeps; ++sweep) {
    double moved = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double h = 0.0, gr = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        h += columns[j][i] * columns[j][i];
        gr += columns[j][i] * r[i];
      }
      if (!(h > 0.0)) continue;  // zero column: leave at 0
      // 1-d minimizer of h t^2 - 2 t (gr + h x_j) + c_j t over t >= 0
      const double t = std::max(0.0, out.x[j] + (gr - 0.5 * c[j]) / h);
      const double d = t - out.x[j];
      if (d == 0.0) continue;
      for (std::size_t i = 0; i < m; ++i) r[i] -= d * columns[j][i];
      out.x[j] = t;
      moved = std::max(moved, std::fabs(d) * std::sqrt(h));
    }
    if (moved <= tol) break;
  }
  double nr = 0.0;
  for (double v : r) nr += v * v;
  out.residual_norm = std::sqrt(nr);
  return out;
}

}  // namespace mpg
