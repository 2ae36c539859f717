#pragma once

#include <vector>

#include "mmdyn/tensor.hpp"

namespace mmdyn {

inline constexpr double kVarFloor = 1e-6;

/// Diagonal Gaussian over the trailing axis of `mean`/`var`; leading axes are
/// batch axes. Variances are floored at kVarFloor on construction.
template <typename T>
class DiagGaussian {
 public:
  DiagGaussian() = default;
  DiagGaussian(Tensor<T> mean, Tensor<T> var);

  /// Builds N(mean, softplus(pre_var) + floor), the network output transform.
  static DiagGaussian from_pre_variance(Tensor<T> mean, const Tensor<T>& pre_var);
  /// Constant N(mean, var) with every entry set to the given values.
  static DiagGaussian constant(Shape shape, T mean, T var);

  const Tensor<T>& mean() const { return mean_; }
  const Tensor<T>& var() const { return var_; }
  std::size_t dim() const { return mean_.shape().back(); }
  const Shape& shape() const { return mean_.shape(); }

 private:
  Tensor<T> mean_;
  Tensor<T> var_;
};

/// Normalized product of Gaussian densities: precisions add and the mean is
/// the precision-weighted average. The result variance is re-floored.
template <typename T>
DiagGaussian<T> product_of_experts(const std::vector<DiagGaussian<T>>& experts);

/// KL(q || p) summed over the trailing axis; result has the batch shape.
template <typename T>
Tensor<T> kl_divergence(const DiagGaussian<T>& q, const DiagGaussian<T>& p);

/// mean + sqrt(var) * noise. Gradients flow to mean and var only.
template <typename T>
Tensor<T> rsample(const DiagGaussian<T>& g, const Tensor<T>& noise);

/// Log-density summed over the trailing axis; result has the batch shape.
template <typename T>
Tensor<T> log_prob(const DiagGaussian<T>& g, const Tensor<T>& x);

}  // namespace mmdyn
