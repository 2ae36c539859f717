#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance runner. Nothing here calls into the library under test.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

namespace oracle {

struct Moments {
  double mean = 0.0;
  double var = 0.0;
};

/// Mean and variance of the normalized pointwise product of 1-D Gaussian
/// densities, by trapezoidal quadrature on [lo, hi] with spacing `step`.
inline Moments grid_product(const std::vector<double>& means, const std::vector<double>& vars,
                            double lo = -40.0, double hi = 40.0, double step = 0.0025) {
  const auto n = static_cast<std::size_t>(std::llround((hi - lo) / step)) + 1;
  std::vector<double> logd(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = lo + step * static_cast<double>(i);
    double acc = 0.0;
    for (std::size_t e = 0; e < means.size(); ++e) {
      const double d = x - means[e];
      acc -= d * d / (2.0 * vars[e]);
    }
    logd[i] = acc;
  }
  const double peak = *std::max_element(logd.begin(), logd.end());
  double z = 0.0, m1 = 0.0;
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = std::exp(logd[i] - peak) * ((i == 0 || i + 1 == n) ? 0.5 : 1.0);
    z += w[i];
    m1 += w[i] * (lo + step * static_cast<double>(i));
  }
  const double mean = m1 / z;
  double m2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = lo + step * static_cast<double>(i) - mean;
    m2 += w[i] * d * d;
  }
  return {mean, m2 / z};
}

struct Estimate {
  double value = 0.0;
  double standard_error = 0.0;
};

/// Monte-Carlo E_q[log q(z) - log p(z)] for diagonal Gaussians.
inline Estimate monte_carlo_kl(const std::vector<double>& mq, const std::vector<double>& vq,
                               const std::vector<double>& mp, const std::vector<double>& vp,
                               std::size_t samples, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    double diff = 0.0;
    for (std::size_t d = 0; d < mq.size(); ++d) {
      const double z = mq[d] + std::sqrt(vq[d]) * normal(rng);
      const double dq = z - mq[d];
      const double dp = z - mp[d];
      diff += -0.5 * std::log(vq[d]) - dq * dq / (2.0 * vq[d]) + 0.5 * std::log(vp[d]) +
              dp * dp / (2.0 * vp[d]);
    }
    sum += diff;
    sum_sq += diff * diff;
  }
  const double n = static_cast<double>(samples);
  const double mean = sum / n;
  const double var = std::max(0.0, sum_sq / n - mean * mean);
  return {mean, std::sqrt(var / n)};
}

/// log N(x; m, v) evaluated straight from the density formula.
inline double normal_log_density(double x, double m, double v) {
  return std::log(std::exp(-(x - m) * (x - m) / (2.0 * v)) / std::sqrt(2.0 * std::numbers::pi * v));
}

}  // namespace oracle
