#include "mmdyn/gaussian.hpp"

#include <cmath>
#include <numbers>

#include "mmdyn/ops.hpp"

namespace mmdyn {

template <typename T>
DiagGaussian<T>::DiagGaussian(Tensor<T> mean, Tensor<T> var) {
  if (!mean.defined() || !var.defined()) throw ShapeError("DiagGaussian: undefined mean or variance");
  if (mean.rank() == 0 || mean.shape() != var.shape()) {
    throw ShapeError("DiagGaussian: mean " + shape_string(mean.shape()) + " and variance " +
                     shape_string(var.shape()) + " must have equal non-scalar shapes");
  }
  mean_ = std::move(mean);
  var_ = ops::clamp_min(var, static_cast<T>(kVarFloor));
}

template <typename T>
DiagGaussian<T> DiagGaussian<T>::from_pre_variance(Tensor<T> mean, const Tensor<T>& pre_var) {
  return DiagGaussian(std::move(mean), ops::add_scalar(ops::softplus(pre_var), static_cast<T>(kVarFloor)));
}

template <typename T>
DiagGaussian<T> DiagGaussian<T>::constant(Shape shape, T mean, T var) {
  return DiagGaussian(Tensor<T>::full(shape, mean), Tensor<T>::full(shape, var));
}

template <typename T>
DiagGaussian<T> product_of_experts(const std::vector<DiagGaussian<T>>& experts) {
  if (experts.empty()) throw ShapeError("product_of_experts: empty expert list");
  for (const auto& e : experts) {
    if (e.shape() != experts.front().shape()) {
      throw ShapeError("product_of_experts: expert shape " + shape_string(e.shape()) +
                       " differs from " + shape_string(experts.front().shape()));
    }
  }
  if (experts.size() == 1) return experts.front();
  std::vector<Tensor<T>> precisions;
  std::vector<Tensor<T>> weighted;
  for (const auto& e : experts) {
    auto prec = ops::reciprocal(e.var());
    weighted.push_back(ops::mul(prec, e.mean()));
    precisions.push_back(std::move(prec));
  }
  auto var = ops::reciprocal(ops::add_n(precisions));
  auto mean = ops::mul(ops::add_n(weighted), var);
  return DiagGaussian<T>(std::move(mean), std::move(var));
}

template <typename T>
Tensor<T> kl_divergence(const DiagGaussian<T>& q, const DiagGaussian<T>& p) {
  if (q.shape() != p.shape()) {
    throw ShapeError("kl_divergence: shapes " + shape_string(q.shape()) + " and " +
                     shape_string(p.shape()) + " differ");
  }
  // 0.5 * sum(log vp - log vq + (vq + (mq - mp)^2) / vp - 1)
  auto log_ratio = ops::sub(ops::log(p.var()), ops::log(q.var()));
  auto spread = ops::div(ops::add(q.var(), ops::square(ops::sub(q.mean(), p.mean()))), p.var());
  auto terms = ops::add_scalar(ops::add(log_ratio, spread), T(-1));
  return ops::scale(ops::sum_axis(terms, terms.rank() - 1), T(0.5));
}

template <typename T>
Tensor<T> rsample(const DiagGaussian<T>& g, const Tensor<T>& noise) {
  if (noise.shape() != g.shape()) {
    throw ShapeError("rsample: noise shape " + shape_string(noise.shape()) +
                     " does not match distribution shape " + shape_string(g.shape()));
  }
  return ops::add(g.mean(), ops::mul(ops::sqrt(g.var()), noise));
}

template <typename T>
Tensor<T> log_prob(const DiagGaussian<T>& g, const Tensor<T>& x) {
  if (x.shape() != g.shape()) {
    throw ShapeError("log_prob: point shape " + shape_string(x.shape()) +
                     " does not match distribution shape " + shape_string(g.shape()));
  }
  const T log_2pi = static_cast<T>(std::log(2.0 * std::numbers::pi));
  auto mahal = ops::div(ops::square(ops::sub(x, g.mean())), g.var());
  auto terms = ops::add_scalar(ops::add(ops::log(g.var()), mahal), log_2pi);
  return ops::scale(ops::sum_axis(terms, terms.rank() - 1), T(-0.5));
}

#define MMDYN_INSTANTIATE(T)                                                                  \
  template class DiagGaussian<T>;                                                             \
  template DiagGaussian<T> product_of_experts(const std::vector<DiagGaussian<T>>&);           \
  template Tensor<T> kl_divergence(const DiagGaussian<T>&, const DiagGaussian<T>&);           \
  template Tensor<T> rsample(const DiagGaussian<T>&, const Tensor<T>&);                       \
  template Tensor<T> log_prob(const DiagGaussian<T>&, const Tensor<T>&);

MMDYN_INSTANTIATE(float)
MMDYN_INSTANTIATE(double)
#undef MMDYN_INSTANTIATE

}  // namespace mmdyn
