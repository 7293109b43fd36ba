#pragma once

// Scalar types for generic numerical code.
//
// Every model function in this library is a template over a scalar type T.
// Three scalar types are used:
//   double    plain evaluation
//   Var       reverse-mode automatic differentiation on a thread-local tape
//   Dual<T>   forward-mode directional derivative, nestable over Var
//
// Generic code calls math functions unqualified from inside namespace mpg
// (exp, log, tanh, sigmoid, softplus, ...); overloads exist for all three.

#include <cassert>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace mpg {

class Tape;

namespace detail {
inline thread_local Tape* active_tape = nullptr;
}  // namespace detail

/// Reverse-mode tape. Nodes store parent indices and local partials in flat
/// arrays; a node may have any number of parents so affine layers cost one
/// node per output.
class Tape {
 public:
  Tape() { offsets_.push_back(0); }

  void clear() {
    offsets_.resize(1);
    parents_.clear();
    partials_.clear();
  }

  [[nodiscard]] std::size_t size() const { return offsets_.size() - 1; }

  int new_leaf() {
    offsets_.push_back(static_cast<std::uint32_t>(parents_.size()));
    return static_cast<int>(size() - 1);
  }

  int new_node1(int p, double d) {
    parents_.push_back(p);
    partials_.push_back(d);
    offsets_.push_back(static_cast<std::uint32_t>(parents_.size()));
    return static_cast<int>(size() - 1);
  }

  int new_node2(int p1, double d1, int p2, double d2) {
    if (p1 >= 0) {
      parents_.push_back(p1);
      partials_.push_back(d1);
    }
    if (p2 >= 0) {
      parents_.push_back(p2);
      partials_.push_back(d2);
    }
    offsets_.push_back(static_cast<std::uint32_t>(parents_.size()));
    return static_cast<int>(size() - 1);
  }

  // Open an n-ary node; push parents with push_parent, then close_node.
  void push_parent(int p, double d) {
    if (p < 0) return;
    parents_.push_back(p);
    partials_.push_back(d);
  }
  int close_node() {
    offsets_.push_back(static_cast<std::uint32_t>(parents_.size()));
    return static_cast<int>(size() - 1);
  }

  /// Adjoints of every node with respect to `output`.
  [[nodiscard]] std::vector<double> adjoints(int output) const {
    std::vector<double> adj(size(), 0.0);
    if (output < 0) return adj;
    adj[static_cast<std::size_t>(output)] = 1.0;
    for (int i = output; i >= 0; --i) {
      const double a = adj[static_cast<std::size_t>(i)];
      if (a == 0.0) continue;
      const std::uint32_t lo = offsets_[static_cast<std::size_t>(i)];
      const std::uint32_t hi = offsets_[static_cast<std::size_t>(i) + 1];
      for (std::uint32_t k = lo; k < hi; ++k) {
        adj[static_cast<std::size_t>(parents_[k])] += a * partials_[k];
      }
    }
    return adj;
  }

 private:
  std::vector<std::uint32_t> offsets_;
  std::vector<int> parents_;
  std::vector<double> partials_;
};

/// Makes `tape` the recording tape of this thread for the guard's lifetime.
class TapeGuard {
 public:
  explicit TapeGuard(Tape& tape) : previous_(detail::active_tape) {
    tape.clear();
    detail::active_tape = &tape;
  }
  ~TapeGuard() { detail::active_tape = previous_; }
  TapeGuard(const TapeGuard&) = delete;
  TapeGuard& operator=(const TapeGuard&) = delete;

 private:
  Tape* previous_;
};

/// Reverse-mode scalar. id < 0 marks a constant that is never recorded.
struct Var {
  double v = 0.0;
  int id = -1;

  Var() = default;
  Var(double value) : v(value) {}  // NOLINT(google-explicit-constructor)
  Var(double value, int node) : v(value), id(node) {}

  [[nodiscard]] bool is_constant() const { return id < 0; }
};

inline Var make_variable(double value) {
  assert(detail::active_tape != nullptr);
  return {value, detail::active_tape->new_leaf()};
}

namespace detail {
inline Var unary(const Var& x, double value, double d) {
  if (x.id < 0) return Var(value);
  return {value, active_tape->new_node1(x.id, d)};
}
inline Var binary(const Var& a, const Var& b, double value, double da,
                  double db) {
  if (a.id < 0 && b.id < 0) return Var(value);
  return {value, active_tape->new_node2(a.id, da, b.id, db)};
}
}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  return detail::binary(a, b, a.v + b.v, 1.0, 1.0);
}
inline Var operator-(const Var& a, const Var& b) {
  return detail::binary(a, b, a.v - b.v, 1.0, -1.0);
}
inline Var operator*(const Var& a, const Var& b) {
  return detail::binary(a, b, a.v * b.v, b.v, a.v);
}
inline Var operator/(const Var& a, const Var& b) {
  const double q = a.v / b.v;
  return detail::binary(a, b, q, 1.0 / b.v, -q / b.v);
}
inline Var operator-(const Var& a) { return detail::unary(a, -a.v, -1.0); }
inline Var operator+(const Var& a, double b) { return detail::unary(a, a.v + b, 1.0); }
inline Var operator+(double a, const Var& b) { return detail::unary(b, a + b.v, 1.0); }
inline Var operator-(const Var& a, double b) { return detail::unary(a, a.v - b, 1.0); }
inline Var operator-(double a, const Var& b) { return detail::unary(b, a - b.v, -1.0); }
inline Var operator*(const Var& a, double b) { return detail::unary(a, a.v * b, b); }
inline Var operator*(double a, const Var& b) { return detail::unary(b, a * b.v, a); }
inline Var operator/(const Var& a, double b) { return detail::unary(a, a.v / b, 1.0 / b); }
inline Var operator/(double a, const Var& b) {
  const double q = a / b.v;
  return detail::unary(b, q, -q / b.v);
}
inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }
inline Var& operator/=(Var& a, const Var& b) { return a = a / b; }

inline bool operator<(const Var& a, const Var& b) { return a.v < b.v; }
inline bool operator>(const Var& a, const Var& b) { return a.v > b.v; }
inline bool operator<=(const Var& a, const Var& b) { return a.v <= b.v; }
inline bool operator>=(const Var& a, const Var& b) { return a.v >= b.v; }

// ---------------------------------------------------------------------------
// Primitive functions for double and Var.

inline double exp(double x) { return std::exp(x); }
inline double log(double x) { return std::log(x); }
inline double tanh(double x) { return std::tanh(x); }
inline double sqrt(double x) { return std::sqrt(x); }
inline double pow(double x, double e) { return std::pow(x, e); }
inline double abs(double x) { return std::fabs(x); }

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline Var exp(const Var& x) {
  const double e = std::exp(x.v);
  return detail::unary(x, e, e);
}
inline Var log(const Var& x) { return detail::unary(x, std::log(x.v), 1.0 / x.v); }
inline Var tanh(const Var& x) {
  const double t = std::tanh(x.v);
  return detail::unary(x, t, 1.0 - t * t);
}
inline Var sqrt(const Var& x) {
  const double r = std::sqrt(x.v);
  return detail::unary(x, r, 0.5 / r);
}
inline Var pow(const Var& x, double e) {
  const double r = std::pow(x.v, e);
  return detail::unary(x, r, e * std::pow(x.v, e - 1.0));
}
inline Var abs(const Var& x) {
  return detail::unary(x, std::fabs(x.v), x.v >= 0.0 ? 1.0 : -1.0);
}
inline Var sigmoid(const Var& x) {
  const double s = sigmoid(x.v);
  return detail::unary(x, s, s * (1.0 - s));
}
inline Var softplus(const Var& x) {
  return detail::unary(x, softplus(x.v), sigmoid(x.v));
}

// ---------------------------------------------------------------------------
// Forward-mode dual number.

template <class T>
struct Dual {
  T v{};
  T d{};

  Dual() = default;
  Dual(double value) : v(value), d(0.0) {}  // NOLINT(google-explicit-constructor)
  Dual(T value, T deriv) : v(std::move(value)), d(std::move(deriv)) {}
};

// Dual<double> already converts from double; the extra overload is for
// Dual<Var> built from an existing Var.
template <class T>
Dual<T> make_dual(const T& value, double deriv = 0.0) {
  return Dual<T>(value, T(deriv));
}

template <class T>
Dual<T> operator+(const Dual<T>& a, const Dual<T>& b) { return {a.v + b.v, a.d + b.d}; }
template <class T>
Dual<T> operator-(const Dual<T>& a, const Dual<T>& b) { return {a.v - b.v, a.d - b.d}; }
template <class T>
Dual<T> operator*(const Dual<T>& a, const Dual<T>& b) {
  return {a.v * b.v, a.d * b.v + a.v * b.d};
}
template <class T>
Dual<T> operator/(const Dual<T>& a, const Dual<T>& b) {
  T q = a.v / b.v;
  return {q, (a.d - q * b.d) / b.v};
}
template <class T>
Dual<T> operator-(const Dual<T>& a) { return {-a.v, -a.d}; }
template <class T>
Dual<T> operator+(const Dual<T>& a, double b) { return {a.v + b, a.d}; }
template <class T>
Dual<T> operator+(double a, const Dual<T>& b) { return {a + b.v, b.d}; }
template <class T>
Dual<T> operator-(const Dual<T>& a, double b) { return {a.v - b, a.d}; }
template <class T>
Dual<T> operator-(double a, const Dual<T>& b) { return {a - b.v, -b.d}; }
template <class T>
Dual<T> operator*(const Dual<T>& a, double b) { return {a.v * b, a.d * b}; }
template <class T>
Dual<T> operator*(double a, const Dual<T>& b) { return {a * b.v, a * b.d}; }
template <class T>
Dual<T> operator/(const Dual<T>& a, double b) { return {a.v / b, a.d / b}; }
template <class T>
Dual<T> operator/(double a, const Dual<T>& b) {
  T q = a / b.v;
  return {q, -q * b.d / b.v};
}
template <class T>
Dual<T>& operator+=(Dual<T>& a, const Dual<T>& b) { return a = a + b; }
template <class T>
Dual<T>& operator-=(Dual<T>& a, const Dual<T>& b) { return a = a - b; }
template <class T>
Dual<T>& operator*=(Dual<T>& a, const Dual<T>& b) { return a = a * b; }
template <class T>
Dual<T>& operator/=(Dual<T>& a, const Dual<T>& b) { return a = a / b; }

template <class T>
Dual<T> exp(const Dual<T>& x) {
  T e = exp(x.v);
  return {e, e * x.d};
}
template <class T>
Dual<T> log(const Dual<T>& x) { return {log(x.v), x.d / x.v}; }
template <class T>
Dual<T> tanh(const Dual<T>& x) {
  T t = tanh(x.v);
  return {t, (1.0 - t * t) * x.d};
}
template <class T>
Dual<T> sqrt(const Dual<T>& x) {
  T r = sqrt(x.v);
  return {r, x.d / (2.0 * r)};
}
template <class T>
Dual<T> pow(const Dual<T>& x, double e) {
  return {pow(x.v, e), e * pow(x.v, e - 1.0) * x.d};
}
template <class T>
Dual<T> sigmoid(const Dual<T>& x) {
  T s = sigmoid(x.v);
  return {s, s * (1.0 - s) * x.d};
}
template <class T>
Dual<T> softplus(const Dual<T>& x) {
  return {softplus(x.v), sigmoid(x.v) * x.d};
}

// ---------------------------------------------------------------------------
// Value extraction and type traits.

inline double value_of(double x) { return x; }
inline double value_of(const Var& x) { return x.v; }
template <class T>
double value_of(const Dual<T>& x) { return value_of(x.v); }

template <class T>
std::vector<double> values_of(std::span<const T> xs) {
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = value_of(xs[i]);
  return out;
}
template <class T>
std::vector<double> values_of(const std::vector<T>& xs) {
  return values_of(std::span<const T>(xs));
}

template <class T>
std::vector<T> lift(std::span<const double> xs) {
  return std::vector<T>(xs.begin(), xs.end());
}

// ---------------------------------------------------------------------------
// Reductions. For Var these record a single n-ary node.

/// bias + sum_k w[k] * x[k]
inline double affine_sum(double bias, std::span<const double> w,
                         std::span<const double> x) {
  double acc = bias;
  for (std::size_t k = 0; k < w.size(); ++k) acc += w[k] * x[k];
  return acc;
}

inline Var affine_sum(const Var& bias, std::span<const Var> w,
                      std::span<const Var> x) {
  double acc = bias.v;
  bool any = bias.id >= 0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    acc += w[k].v * x[k].v;
    any = any || w[k].id >= 0 || x[k].id >= 0;
  }
  if (!any) return Var(acc);
  Tape& tape = *detail::active_tape;
  tape.push_parent(bias.id, 1.0);
  for (std::size_t k = 0; k < w.size(); ++k) {
    tape.push_parent(w[k].id, x[k].v);
    tape.push_parent(x[k].id, w[k].v);
  }
  return {acc, tape.close_node()};
}

template <class T>
Dual<T> affine_sum(const Dual<T>& bias, std::span<const Dual<T>> w,
                   std::span<const Dual<T>> x) {
  Dual<T> acc = bias;
  for (std::size_t k = 0; k < w.size(); ++k) acc += w[k] * x[k];
  return acc;
}

inline double sum(std::span<const double> x) {
  double acc = 0.0;
  for (double v : x) acc += v;
  return acc;
}

inline Var sum(std::span<const Var> x) {
  double acc = 0.0;
  bool any = false;
  for (const Var& v : x) {
    acc += v.v;
    any = any || v.id >= 0;
  }
  if (!any) return Var(acc);
  Tape& tape = *detail::active_tape;
  for (const Var& v : x) tape.push_parent(v.id, 1.0);
  return {acc, tape.close_node()};
}

template <class T>
Dual<T> sum(std::span<const Dual<T>> x) {
  Dual<T> acc(0.0);
  for (const auto& v : x) acc += v;
  return acc;
}

template <class T>
T sum(const std::vector<T>& x) {
  return sum(std::span<const T>(x));
}

/// sum_k a[k] * b[k]
template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
  return affine_sum(T(0.0), a, b);
}
template <class T>
T dot(const std::vector<T>& a, const std::vector<T>& b) {
  return dot(std::span<const T>(a), std::span<const T>(b));
}

}  // namespace mpg
