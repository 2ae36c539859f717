#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmdyn/parameters.hpp"

namespace mmdyn {

/// Selects leaves by name.
using ParameterFilter = std::function<bool(const std::string&)>;

ParameterFilter all_parameters();
ParameterFilter name_prefix(std::string prefix);
ParameterFilter excluding_prefix(std::string prefix);

template <typename T>
struct AdamState {
  struct Moments {
    std::vector<T> first;
    std::vector<T> second;
    std::uint64_t steps = 0;
  };
  std::uint64_t step_count = 0;
  std::map<std::string, Moments> moments;  // keyed by leaf name
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamStepInfo {
  double grad_norm = 0.0;  // group gradient 2-norm before clipping
  bool clipped = false;
};

/// One Adam update of the leaves selected by `group`. When `clip_norm` is set
/// the group's global gradient norm is first rescaled to at most clip_norm.
/// Gradients of the updated leaves are zeroed afterwards.
template <typename T>
AdamStepInfo adam_step(ParameterStore<T>& store, AdamState<T>& state, double lr,
                       std::optional<double> clip_norm, const ParameterFilter& group,
                       const AdamConfig& config = {});

}  // namespace mmdyn
