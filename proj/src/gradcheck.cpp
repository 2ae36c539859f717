#include "mmdyn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mmdyn {

template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>()>& scalar_fn,
                           const std::vector<Leaf<T>>& leaves, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("grad_check: epsilon must be positive");

  for (auto leaf : leaves) leaf.tensor.zero_grad();
  const Tensor<T> loss = scalar_fn();
  const double reference = static_cast<double>(loss.item());
  const double repeat = static_cast<double>(scalar_fn().item());
  if (reference != repeat) {
    throw std::runtime_error(
        "grad_check: scalar_fn is not deterministic (two evaluations differ); fix all noise inputs");
  }
  backward(loss);

  GradCheckResult result;
  for (auto leaf : leaves) {
    std::vector<T> analytic(leaf.tensor.numel(), T(0));
    if (leaf.tensor.has_grad()) {
      auto g = leaf.tensor.grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
    auto values = leaf.tensor.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T original = values[i];
      values[i] = static_cast<T>(original + epsilon);
      const double plus = static_cast<double>(scalar_fn().item());
      values[i] = static_cast<T>(original - epsilon);
      const double minus = static_cast<double>(scalar_fn().item());
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * epsilon);
      const double a = static_cast<double>(analytic[i]);
      const double err =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++result.entries_checked;
      if (result.worst_leaf.empty() || err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_leaf = leaf.name;
        result.worst_index = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
    leaf.tensor.zero_grad();
  }
  return result;
}

template GradCheckResult grad_check<float>(const std::function<Tensor<float>()>&,
                                           const std::vector<Leaf<float>>&, double);
template GradCheckResult grad_check<double>(const std::function<Tensor<double>()>&,
                                            const std::vector<Leaf<double>>&, double);

}  // namespace mmdyn
