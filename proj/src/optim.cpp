#include "mmdyn/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace mmdyn {

ParameterFilter all_parameters() {
  return [](const std::string&) { return true; };
}

ParameterFilter name_prefix(std::string prefix) {
  return [prefix = std::move(prefix)](const std::string& name) { return name.rfind(prefix, 0) == 0; };
}

ParameterFilter excluding_prefix(std::string prefix) {
  return [prefix = std::move(prefix)](const std::string& name) { return name.rfind(prefix, 0) != 0; };
}

template <typename T>
AdamStepInfo adam_step(ParameterStore<T>& store, AdamState<T>& state, double lr,
                       std::optional<double> clip_norm, const ParameterFilter& group,
                       const AdamConfig& config) {
  if (!(lr > 0.0)) throw std::invalid_argument("adam_step: learning rate must be positive");
  if (clip_norm && !(*clip_norm > 0.0)) throw std::invalid_argument("adam_step: clip_norm must be positive");

  std::vector<Leaf<T>> selected;
  std::string missing;
  for (auto& leaf : store.leaves()) {
    if (!group(leaf.name)) continue;
    if (!leaf.tensor.has_grad()) missing += (missing.empty() ? "" : ", ") + leaf.name;
    selected.push_back(leaf);
  }
  if (!missing.empty()) throw std::runtime_error("adam_step: missing gradients for " + missing);

  AdamStepInfo info;
  double sq = 0.0;
  for (const auto& leaf : selected) {
    for (T g : leaf.tensor.grad()) sq += double(g) * double(g);
  }
  info.grad_norm = std::sqrt(sq);
  double grad_scale = 1.0;
  if (clip_norm && info.grad_norm > *clip_norm) {
    grad_scale = *clip_norm / info.grad_norm;
    info.clipped = true;
  }

  ++state.step_count;
  for (auto& leaf : selected) {
    auto& m = state.moments[leaf.name];
    const std::size_t n = leaf.tensor.numel();
    if (m.first.size() != n) {
      m.first.assign(n, T(0));
      m.second.assign(n, T(0));
      m.steps = 0;
    }
    ++m.steps;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(m.steps));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(m.steps));
    auto grad = leaf.tensor.grad();
    auto values = leaf.tensor.mutable_values();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = double(grad[i]) * grad_scale;
      const double m1 = config.beta1 * m.first[i] + (1.0 - config.beta1) * g;
      const double m2 = config.beta2 * m.second[i] + (1.0 - config.beta2) * g * g;
      m.first[i] = static_cast<T>(m1);
      m.second[i] = static_cast<T>(m2);
      const double update = lr * (m1 / bc1) / (std::sqrt(m2 / bc2) + config.epsilon);
      values[i] = static_cast<T>(values[i] - update);
    }
    leaf.tensor.zero_grad();
  }
  return info;
}

template AdamStepInfo adam_step<float>(ParameterStore<float>&, AdamState<float>&, double,
                                       std::optional<double>, const ParameterFilter&, const AdamConfig&);
template AdamStepInfo adam_step<double>(ParameterStore<double>&, AdamState<double>&, double,
                                        std::optional<double>, const ParameterFilter&, const AdamConfig&);

}  // namespace mmdyn
