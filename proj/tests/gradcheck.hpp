#pragma once

// Central finite-difference oracle for double-precision graphs. Independent
// of every op's backward: it only evaluates forward passes.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "cafe/ops.hpp"
#include "cafe/tensor.hpp"

namespace cafe::testing {

inline Tensord random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = n(rng);
  return Tensord::from(shape, std::move(v));
}

inline Tensorf random_tensorf(const Shape& shape, std::mt19937_64& rng, float scale = 1.0f) {
  std::normal_distribution<float> n(0.0f, scale);
  std::vector<float> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = n(rng);
  return Tensorf::from(shape, std::move(v));
}

/// Reduces an output tensor to a scalar with fixed random weights so every
/// output element contributes a distinct coefficient.
struct Projector {
  std::mt19937_64 rng{1234};
  std::vector<Tensord> weights;

  Tensord operator()(const Tensord& y, std::size_t slot = 0) {
    while (weights.size() <= slot) weights.emplace_back();
    if (!weights[slot].defined() || weights[slot].shape() != y.shape())
      weights[slot] = random_tensor(y.shape(), rng);
    return ops::sum(ops::mul(y, weights[slot]));
  }
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<double> per_leaf;
};

/// Compares backprop gradients of `loss()` with respect to `leaves` against
/// central differences. Error per leaf is ||a - n|| / max(||a||, ||n||).
inline GradCheckResult grad_check(const std::function<Tensord()>& loss, std::vector<Tensord> leaves,
                                  double eps = 1e-6) {
  for (auto& l : leaves) {
    l.zero_grad();
    l.set_requires_grad(true);
  }
  loss().backward();
  GradCheckResult result;
  for (auto& l : leaves) {
    std::vector<double> analytic(l.grad().begin(), l.grad().end());
    if (analytic.empty()) analytic.assign(static_cast<std::size_t>(l.numel()), 0.0);
    std::vector<double> numeric(analytic.size());
    {
      NoGradGuard guard;
      auto d = l.data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double orig = d[i];
        d[i] = orig + eps;
        const double up = loss().item();
        d[i] = orig - eps;
        const double down = loss().item();
        d[i] = orig;
        numeric[i] = (up - down) / (2 * eps);
      }
    }
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
    const double err = std::sqrt(diff) / denom;
    result.per_leaf.push_back(err);
    result.max_rel_error = std::max(result.max_rel_error, err);
  }
  return result;
}

}  // namespace cafe::testing
