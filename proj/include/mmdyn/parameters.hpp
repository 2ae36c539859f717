#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mmdyn/tensor.hpp"

namespace mmdyn {

/// A named learnable weight. With weight normalization the stored leaves are
/// a direction (same shape as the weight) and a per-output-row scale; the
/// effective weight is recomputed from them on every use.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;  // the weight itself, or its direction when weight_norm is set
  Tensor<T> scale;   // defined iff weight_norm
  bool weight_norm = false;

  Tensor<T> effective() const;
};

/// One optimizable leaf as seen by Adam, gradient checking, and checkpoints.
template <typename T>
struct Leaf {
  std::string name;
  Tensor<T> tensor;
};

/// Insertion-ordered collection of parameters with unique names.
template <typename T>
class ParameterStore {
 public:
  /// Adds a plain parameter initialized uniformly in [-bound, bound].
  Parameter<T> add_uniform(const std::string& name, Shape shape, T bound, std::mt19937_64& rng);
  /// Adds a weight-normalized parameter. The direction is drawn uniformly in
  /// [-bound, bound]; the scale starts at `scale_factor` times each row's norm.
  Parameter<T> add_weight_normed(const std::string& name, Shape shape, T bound,
                                 std::mt19937_64& rng, T scale_factor = T(1));
  /// Adds a parameter with explicit values.
  Parameter<T> add_values(const std::string& name, Shape shape, std::vector<T> values);

  const Parameter<T>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }

  /// Optimizable leaves in a stable order: "<name>" for plain parameters,
  /// "<name>.direction" and "<name>.scale" for weight-normalized ones.
  std::vector<Leaf<T>> leaves() const;
  std::size_t leaf_value_count() const;

  void zero_grad();
  /// Deep copy of all values (no shared storage).
  std::vector<std::vector<T>> snapshot() const;
  void restore(const std::vector<std::vector<T>>& values);

 private:
  void insert(Parameter<T> p);
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace mmdyn
