#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mmdyn/parameters.hpp"

namespace mmdyn {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_leaf;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

/// Compares reverse-mode gradients of `scalar_fn` with central differences
/// over every entry of `leaves`. The relative error of an entry is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
///
/// scalar_fn must be deterministic (frozen noise); two evaluations that differ
/// raise std::runtime_error.
template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>()>& scalar_fn,
                           const std::vector<Leaf<T>>& leaves, double epsilon = 1e-5);

}  // namespace mmdyn
