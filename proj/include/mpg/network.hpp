#pragma once

// Small smooth networks over flat parameter vectors. Parameters are laid out
// layer by layer as a row-major weight matrix followed by the bias.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mpg/ad.hpp"
#include "mpg/numeric.hpp"

namespace mpg {

// Smooth activations only; ReLU would break twice-differentiability.
enum class Activation { tanh, softplus };

inline std::string to_string(Activation a) {
  return a == Activation::tanh ? "tanh" : "softplus";
}
inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "softplus") return Activation::softplus;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

/// Affine when `hidden` is empty, otherwise a smooth MLP.
struct Architecture {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;
  std::size_t output_dim = 0;
  Activation activation = Activation::tanh;

  [[nodiscard]] std::vector<std::size_t> layer_sizes() const {
    std::vector<std::size_t> sizes{input_dim};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(output_dim);
    return sizes;
  }

  [[nodiscard]] std::size_t param_count() const {
    const auto sizes = layer_sizes();
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      n += sizes[l + 1] * (sizes[l] + 1);
    }
    return n;
  }

  [[nodiscard]] bool is_affine() const { return hidden.empty(); }

  [[nodiscard]] std::string describe() const {
    std::string s = is_affine() ? "affine:" : "mlp-" + to_string(activation) + ":";
    const auto sizes = layer_sizes();
    for (std::size_t l = 0; l < sizes.size(); ++l) {
      if (l) s += "x";
      s += std::to_string(sizes[l]);
    }
    return s;
  }

  /// FNV-1a over the description; stored in checkpoint headers.
  [[nodiscard]] std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : describe()) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    return h;
  }
};

template <class T>
T activate(const T& x, Activation a) {
  return a == Activation::tanh ? tanh(x) : softplus(x);
}

template <class T>
std::vector<T> forward(const Architecture& arch, std::span<const T> params,
                       std::span<const T> input) {
  if (params.size() != arch.param_count()) {
    throw std::invalid_argument("parameter vector has length " +
                                std::to_string(params.size()) + ", " +
                                arch.describe() + " needs " +
                                std::to_string(arch.param_count()));
  }
  if (input.size() != arch.input_dim) {
    throw std::invalid_argument("network input has dimension " +
                                std::to_string(input.size()) + ", expected " +
                                std::to_string(arch.input_dim));
  }
  const auto sizes = arch.layer_sizes();
  std::vector<T> x(input.begin(), input.end());
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const std::size_t in = sizes[l];
    const std::size_t out = sizes[l + 1];
    const std::size_t bias_off = off + out * in;
    std::vector<T> y(out);
    for (std::size_t r = 0; r < out; ++r) {
      y[r] = affine_sum(params[bias_off + r], params.subspan(off + r * in, in),
                        std::span<const T>(x));
    }
    off = bias_off + out;
    if (l + 2 < sizes.size()) {
      for (T& v : y) v = activate(v, arch.activation);
    }
    x = std::move(y);
  }
  return x;
}

/// Uniform initialization in [-scale, scale].
inline std::vector<double> init_params(const Architecture& arch, Rng& rng,
                                       double scale = 0.05) {
  return uniform_vector(rng, arch.param_count(), -scale, scale);
}

}  // namespace mpg
