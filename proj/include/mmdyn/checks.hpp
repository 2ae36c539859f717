#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mmdyn/gradcheck.hpp"
#include "mmdyn/model.hpp"

namespace mmdyn::checks {

/// 8x8 frames, T=4, W=4; only the low-dimensional streams are used.
sim::SimConfig tiny_sim_config(std::uint64_t seed = 0);

/// K=3, small windows and GRU, 64-bit, shapes taken from `m`.
ModelConfig tiny_model_config(const sim::Manifest& m, const std::string& variant = "PH");

/// Adds U(-scale, scale) to every parameter entry. Zero biases on exactly
/// zero inputs put ReLUs on their kink, where central differences are
/// meaningless, so gradient checks perturb the initialization first.
void jitter_parameters(ParameterStore<double>& store, std::uint64_t seed, double scale = 0.1);

struct GradcheckReport {
  GradCheckResult result;
  double tolerance = 1e-4;
  bool pass = false;
};

/// Full ELBO of a tiny model on two trajectories under frozen noise.
GradcheckReport gradcheck_tiny(std::uint64_t seed = 0, const std::string& variant = "PH");

struct PoeCheckReport {
  std::size_t sets = 0;
  std::size_t dimensions = 0;
  double max_mean_error = 0.0;
  double max_var_error = 0.0;
  double tolerance = 1e-6;
  bool pass = false;
};

/// Random expert sets (1-5 experts, 1-16 dims, variances log-uniform in
/// [1e-3, 10]) against the grid-normalized product.
PoeCheckReport poe_check(std::size_t sets, std::uint64_t seed = 0);

struct KlCheckReport {
  std::size_t pairs = 0;
  std::size_t within = 0;        // pairs whose analytic KL lies within 3 SE of the estimate
  double worst_z = 0.0;          // largest |analytic - estimate| / SE
  bool pass = false;
};

/// Analytic diagonal-Gaussian KL against Monte-Carlo estimates for random
/// pairs drawn like the poe_check experts.
KlCheckReport kl_check(std::size_t pairs, std::size_t samples, std::uint64_t seed = 0);

struct BoundRow {
  std::size_t trajectory = 0;
  double log_likelihood = 0.0;  // importance-sampling estimate
  double log_likelihood_se = 0.0;
  double elbo = 0.0;            // mean over independent single-sample draws
  double elbo_se = 0.0;
  bool holds = false;           // estimate >= elbo - 3 combined standard errors
};

struct BoundReport {
  std::vector<BoundRow> rows;
  std::size_t holding = 0;
  std::size_t required = 0;
  bool pass = false;
};

/// Importance-sampling estimate of log p(X|u) versus the ELBO on tiny
/// trajectories; passes when at least 90% of them satisfy the bound.
BoundReport elbo_bound_check(std::size_t trajectories = 20, std::size_t samples = 200, std::uint64_t seed = 0);

}  // namespace mmdyn::checks
