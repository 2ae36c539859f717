#include "mmdyn/parameters.hpp"

#include <cmath>

#include "mmdyn/ops.hpp"

namespace mmdyn {

template <typename T>
Tensor<T> Parameter<T>::effective() const {
  return weight_norm ? ops::weight_norm(tensor, scale) : tensor;
}

template <typename T>
void ParameterStore<T>::insert(Parameter<T> p) {
  if (index_.count(p.name)) throw std::invalid_argument("parameter store: duplicate name " + p.name);
  index_.emplace(p.name, params_.size());
  params_.push_back(std::move(p));
}

template <typename T>
Parameter<T> ParameterStore<T>::add_uniform(const std::string& name, Shape shape, T bound,
                                            std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return add_values(name, std::move(shape), std::move(values));
}

template <typename T>
Parameter<T> ParameterStore<T>::add_values(const std::string& name, Shape shape,
                                           std::vector<T> values) {
  Parameter<T> p;
  p.name = name;
  p.tensor = Tensor<T>::from(std::move(shape), std::move(values), true);
  insert(p);
  return p;
}

template <typename T>
Parameter<T> ParameterStore<T>::add_weight_normed(const std::string& name, Shape shape, T bound,
                                                  std::mt19937_64& rng, T scale_factor) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  const std::size_t rows = shape.at(0);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  const std::size_t cols = values.size() / rows;
  std::vector<T> scales(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += double(values[r * cols + c]) * values[r * cols + c];
    scales[r] = static_cast<T>(scale_factor * std::sqrt(acc));
  }
  Parameter<T> p;
  p.name = name;
  p.weight_norm = true;
  p.tensor = Tensor<T>::from(std::move(shape), std::move(values), true);
  p.scale = Tensor<T>::from({rows}, std::move(scales), true);
  insert(p);
  return p;
}

template <typename T>
const Parameter<T>& ParameterStore<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("parameter store: no parameter named " + name);
  return params_[it->second];
}

template <typename T>
std::vector<Leaf<T>> ParameterStore<T>::leaves() const {
  std::vector<Leaf<T>> out;
  for (const auto& p : params_) {
    if (p.weight_norm) {
      out.push_back({p.name + ".direction", p.tensor});
      out.push_back({p.name + ".scale", p.scale});
    } else {
      out.push_back({p.name, p.tensor});
    }
  }
  return out;
}

template <typename T>
std::size_t ParameterStore<T>::leaf_value_count() const {
  std::size_t n = 0;
  for (const auto& leaf : leaves()) n += leaf.tensor.numel();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& leaf : leaves()) leaf.tensor.zero_grad();
}

template <typename T>
std::vector<std::vector<T>> ParameterStore<T>::snapshot() const {
  std::vector<std::vector<T>> out;
  for (const auto& leaf : leaves()) out.emplace_back(leaf.tensor.values().begin(), leaf.tensor.values().end());
  return out;
}

template <typename T>
void ParameterStore<T>::restore(const std::vector<std::vector<T>>& values) {
  auto ls = leaves();
  if (values.size() != ls.size()) throw std::invalid_argument("parameter store: snapshot size mismatch");
  for (std::size_t i = 0; i < ls.size(); ++i) {
    auto dst = ls[i].tensor.mutable_values();
    if (dst.size() != values[i].size()) {
      throw std::invalid_argument("parameter store: snapshot shape mismatch for " + ls[i].name);
    }
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

template struct Parameter<float>;
template struct Parameter<double>;
template class ParameterStore<float>;
template class ParameterStore<double>;

}  // namespace mmdyn
