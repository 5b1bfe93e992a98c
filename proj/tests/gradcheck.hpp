#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "stmae/ops.hpp"
#include "stmae/rng.hpp"
#include "stmae/tensor.hpp"

namespace stmae::testing {

// Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||) per
// leaf, with central differences of step `h`. Returns the worst leaf.
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
};

inline GradCheckResult grad_check(const std::vector<Tensor<double>>& leaves,
                                  const std::function<Tensor<double>()>& loss_fn, double h = 1e-5,
                                  const std::vector<std::string>& names = {}) {
  for (const auto& t : leaves) {
    t.drop_grad();
    Tensor<double>(t).set_requires_grad();
  }
  {
    GradTape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = loss_fn();
    tape.backward(loss);
  }
  GradCheckResult res;
  NoGradScope<double> no_grad;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor<double> t = leaves[li];
    std::vector<double> analytic(t.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + h;
      const double up = loss_fn().item();
      t[i] = orig - h;
      const double down = loss_fn().item();
      t[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
    const double rel = std::sqrt(diff2) / denom;
    if (rel >= res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst = li < names.size() ? names[li] : "leaf " + std::to_string(li);
    }
  }
  return res;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// sum(x * w) for a fixed random w, so every output element gets a distinct
// upstream gradient.
inline Tensor<double> weighted_sum(const Tensor<double>& x, const Tensor<double>& w) {
  return sum(mul(x, w));
}

}  // namespace stmae::testing
