#include "mmdyn/checks.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mmdyn/oracles.hpp"

namespace mmdyn::checks {

sim::SimConfig tiny_sim_config(std::uint64_t seed) {
  auto c = sim::profile("desk");
  c.image_size = 8;
  c.steps = 4;
  c.substeps = 4;
  c.seed = seed;
  return c;
}

ModelConfig tiny_model_config(const sim::Manifest& m, const std::string& variant) {
  ModelConfig c;
  c.variant = variant;
  c.adopt_shapes(m);
  c.latent_dim = 3;
  c.image_channels = {2, 2, 2};
  c.window_channels = {3, 4};
  c.transition_hidden = 5;
  c.batch_size = 2;
  c.float_mode = false;
  c.validate();
  return c;
}

void jitter_parameters(ParameterStore<double>& store, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& leaf : store.leaves()) {
    for (auto& v : leaf.tensor.mutable_values()) v += u(rng);
  }
}

GradcheckReport gradcheck_tiny(std::uint64_t seed, const std::string& variant) {
  const auto data = sim::generate_dataset(tiny_sim_config(seed), 2);
  auto config = tiny_model_config(data.manifest, variant);
  config.seed = seed;
  Model<double> model(config);
  jitter_parameters(model.params(), seed + 1);
  const auto batch = make_batch<double>(data, {0, 1});
  std::mt19937_64 rng(seed + 2);
  const auto noise = standard_normal<double>(batch.steps * batch.batch, config.latent_dim, rng);
  GradcheckReport r;
  r.result = grad_check<double>([&] { return model.elbo(batch, noise).elbo; }, model.params().leaves(), 1e-5);
  r.pass = r.result.max_relative_error <= r.tolerance;
  return r;
}

PoeCheckReport poe_check(std::size_t sets, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> n_experts(1, 5), n_dims(1, 16);
  std::uniform_real_distribution<double> mean(-5.0, 5.0), log_var(std::log(1e-3), std::log(10.0));
  PoeCheckReport r;
  r.sets = sets;
  for (std::size_t s = 0; s < sets; ++s) {
    const std::size_t E = n_experts(rng), D = n_dims(rng);
    std::vector<std::vector<double>> means(E, std::vector<double>(D)), vars(E, std::vector<double>(D));
    std::vector<DiagGaussian<double>> experts;
    for (std::size_t e = 0; e < E; ++e) {
      for (std::size_t d = 0; d < D; ++d) {
        means[e][d] = mean(rng);
        vars[e][d] = std::exp(log_var(rng));
      }
      experts.emplace_back(Tensor<double>::from({D}, means[e]), Tensor<double>::from({D}, vars[e]));
    }
    const auto product = product_of_experts(experts);
    for (std::size_t d = 0; d < D; ++d) {
      std::vector<double> m(E), v(E);
      for (std::size_t e = 0; e < E; ++e) {
        m[e] = means[e][d];
        v[e] = vars[e][d];
      }
      const auto ref = oracle::grid_product(m, v);
      r.max_mean_error = std::max(r.max_mean_error, std::abs(product.mean()[d] - ref.mean));
      r.max_var_error = std::max(r.max_var_error, std::abs(product.var()[d] - ref.var));
      ++r.dimensions;
    }
  }
  r.pass = r.max_mean_error <= r.tolerance && r.max_var_error <= r.tolerance;
  return r;
}

KlCheckReport kl_check(std::size_t pairs, std::size_t samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> n_dims(1, 16);
  std::uniform_real_distribution<double> mean(-5.0, 5.0), log_var(std::log(1e-3), std::log(10.0));
  KlCheckReport r;
  r.pairs = pairs;
  for (std::size_t i = 0; i < pairs; ++i) {
    const std::size_t D = n_dims(rng);
    std::vector<double> mq(D), vq(D), mp(D), vp(D);
    for (std::size_t d = 0; d < D; ++d) {
      mq[d] = mean(rng);
      vq[d] = std::exp(log_var(rng));
      mp[d] = mean(rng);
      vp[d] = std::exp(log_var(rng));
    }
    const double analytic = kl_divergence(DiagGaussian<double>(Tensor<double>::from({D}, mq), Tensor<double>::from({D}, vq)),
                                          DiagGaussian<double>(Tensor<double>::from({D}, mp), Tensor<double>::from({D}, vp)))
                                .item();
    const auto mc = oracle::monte_carlo_kl(mq, vq, mp, vp, samples, rng);
    const double z = std::abs(analytic - mc.value) / mc.standard_error;
    r.worst_z = std::max(r.worst_z, z);
    if (z <= 3.0) ++r.within;
  }
  r.pass = r.within == r.pairs;
  return r;
}

namespace {

std::pair<double, double> mean_and_se(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  double m = 0.0;
  for (double v : x) m += v;
  m /= n;
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return {m, std::sqrt(ss / (n - 1.0) / n)};
}

// Delta-method standard error of log(mean(exp(log_w))).
double log_mean_exp_se(const std::vector<double>& log_w) {
  const double peak = *std::max_element(log_w.begin(), log_w.end());
  std::vector<double> w;
  for (double l : log_w) w.push_back(std::exp(l - peak));
  const auto [m, se] = mean_and_se(w);
  return se / m;
}

}  // namespace

BoundReport elbo_bound_check(std::size_t trajectories, std::size_t samples, std::uint64_t seed) {
  const auto data = sim::generate_dataset(tiny_sim_config(seed), trajectories);
  auto config = tiny_model_config(data.manifest);
  config.seed = seed;
  Model<double> model(config);
  jitter_parameters(model.params(), seed + 1);
  std::mt19937_64 rng(seed + 2);
  BoundReport r;
  for (std::size_t n = 0; n < trajectories; ++n) {
    const auto one = make_batch<double>(data, {n});
    const auto log_w = model.log_importance_weights(one, samples, rng).front();
    const auto copies = make_batch<double>(data, std::vector<std::size_t>(samples, n));
    const auto elbo = model.elbo(copies, standard_normal<double>(copies.steps * samples, config.latent_dim, rng));
    const auto draws = elbo.per_sequence.values();
    const auto [elbo_mean, elbo_se] = mean_and_se(std::vector<double>(draws.begin(), draws.end()));
    BoundRow row;
    row.trajectory = n;
    row.log_likelihood = log_mean_exp(log_w);
    row.log_likelihood_se = log_mean_exp_se(log_w);
    row.elbo = elbo_mean;
    row.elbo_se = elbo_se;
    const double slack = 3.0 * std::hypot(row.log_likelihood_se, row.elbo_se);
    row.holds = row.log_likelihood >= row.elbo - slack;
    r.holding += row.holds ? 1 : 0;
    r.rows.push_back(row);
  }
  r.required = (trajectories * 9 + 9) / 10;
  r.pass = r.holding >= r.required;
  return r;
}

}  // namespace mmdyn::checks
