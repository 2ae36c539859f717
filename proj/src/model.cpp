#include "mmdyn/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mmdyn/io.hpp"
#include "mmdyn/json_fields.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mmdyn {

// Configuration ---------------------------------------------------------------

Modalities Modalities::parse(const std::string& v) {
  if (v == "V") return {true, false, false, false};
  if (v == "VP") return {true, true, false, false};
  if (v == "VH") return {true, false, true, false};
  if (v == "VHP") return {true, true, true, false};
  if (v == "VHP-C") return {true, true, true, true};
  if (v == "PH") return {false, true, true, false};
  if (v == "PH-C") return {false, true, true, true};
  throw ConfigError("unknown variant \"" + v + "\" (expected V, VP, VH, VHP, VHP-C, PH or PH-C)");
}

std::vector<std::string> Modalities::names() const {
  std::vector<std::string> out;
  if (image) out.push_back("image");
  if (proprio) out.push_back("proprio");
  if (haptic) out.push_back("haptic");
  return out;
}

void ModelConfig::validate() const {
  modalities();
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("model.") + name + " must be >= 1");
  };
  positive(latent_dim, "latent_dim");
  positive(control_dim, "control_dim");
  positive(image_height, "image_height");
  positive(image_width, "image_width");
  positive(window, "window");
  positive(proprio_dim, "proprio_dim");
  positive(haptic_dim, "haptic_dim");
  positive(transition_hidden, "transition_hidden");
  positive(batch_size, "batch_size");
  if (image_channels.empty() || window_channels.empty()) throw ConfigError("model: channel lists must be non-empty");
  if (!(learning_rate > 0.0)) throw ConfigError("model.learning_rate must be > 0");
  if (!(clip_norm > 0.0)) throw ConfigError("model.clip_norm must be > 0");
  if (!(prior_var > 0.0)) throw ConfigError("model.prior_var must be > 0");
  if (!(a_init_scale > 0.0)) throw ConfigError("model.a_init_scale must be > 0");
}

void ModelConfig::adopt_shapes(const sim::Manifest& m) {
  image_height = m.image_height;
  image_width = m.image_width;
  window = m.window;
  proprio_dim = m.proprio_dim;
  haptic_dim = m.haptic_dim;
  control_dim = m.control_dim;
}

json to_json(const ModelConfig& c) {
  return json{{"variant", c.variant},
              {"latent_dim", c.latent_dim},
              {"control_dim", c.control_dim},
              {"image_height", c.image_height},
              {"image_width", c.image_width},
              {"window", c.window},
              {"proprio_dim", c.proprio_dim},
              {"haptic_dim", c.haptic_dim},
              {"image_channels", c.image_channels},
              {"window_channels", c.window_channels},
              {"transition_hidden", c.transition_hidden},
              {"learning_rate", c.learning_rate},
              {"clip_norm", c.clip_norm},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"seed", c.seed},
              {"float_mode", c.float_mode},
              {"prior_var", c.prior_var},
              {"a_init_scale", c.a_init_scale}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  JsonFields f(j, "model");
  f.read("variant", c.variant);
  f.read("latent_dim", c.latent_dim);
  f.read("control_dim", c.control_dim);
  f.read("image_height", c.image_height);
  f.read("image_width", c.image_width);
  f.read("window", c.window);
  f.read("proprio_dim", c.proprio_dim);
  f.read("haptic_dim", c.haptic_dim);
  f.read("image_channels", c.image_channels);
  f.read("window_channels", c.window_channels);
  f.read("transition_hidden", c.transition_hidden);
  f.read("learning_rate", c.learning_rate);
  f.read("clip_norm", c.clip_norm);
  f.read("batch_size", c.batch_size);
  f.read("epochs", c.epochs);
  f.read("seed", c.seed);
  f.read("float_mode", c.float_mode);
  f.read("prior_var", c.prior_var);
  f.read("a_init_scale", c.a_init_scale);
  f.finish();
  c.validate();
  return c;
}

// Batches ---------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> rows(const Tensor<T>& t, std::size_t begin, std::size_t end) {
  if (!t.defined()) return t;
  if (begin == 0 && end == t.dim(0)) return t;
  return ops::slice(t, 0, begin, end);
}

}  // namespace

template <typename T>
SequenceBatch<T> SequenceBatch<T>::steps_range(std::size_t begin, std::size_t end) const {
  if (begin >= end || end > steps) {
    throw std::out_of_range("steps_range: [" + std::to_string(begin) + ", " + std::to_string(end) +
                            ") outside " + std::to_string(steps) + " steps");
  }
  SequenceBatch out;
  out.steps = end - begin;
  out.batch = batch;
  out.images = rows(images, begin * batch, end * batch);
  out.proprio = rows(proprio, begin * batch, end * batch);
  out.haptic = rows(haptic, begin * batch, end * batch);
  if (controls.defined() && out.steps > 1) out.controls = rows(controls, begin * batch, (end - 1) * batch);
  return out;
}

template <typename T>
SequenceBatch<T> make_batch(const sim::Dataset& d, const std::vector<std::size_t>& indices, std::size_t steps) {
  const auto& m = d.manifest;
  const std::size_t T_ = steps == 0 ? m.steps : steps;
  const std::size_t B = indices.size();
  if (B == 0) throw std::invalid_argument("make_batch: no trajectories selected");
  if (T_ > m.steps) throw std::invalid_argument("make_batch: dataset has only " + std::to_string(m.steps) + " steps");
  for (auto n : indices) {
    if (n >= m.num_trajectories) throw std::out_of_range("make_batch: trajectory index " + std::to_string(n));
  }
  const std::size_t P = d.image_size(), W = m.window;
  std::vector<T> img(T_ * B * P), pro(T_ * B * m.proprio_dim * W), hap(T_ * B * m.haptic_dim * W);
  std::vector<T> ctl((T_ - 1) * B * m.control_dim);
  for (std::size_t t = 0; t < T_; ++t) {
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t row = t * B + b;
      std::copy_n(d.image(indices[b], t), P, img.begin() + static_cast<std::ptrdiff_t>(row * P));
      // Stored windows are [W, D]; the encoders take channel-major [D, W].
      const float* pw = d.proprio_window(indices[b], t);
      for (std::size_t w = 0; w < W; ++w) {
        for (std::size_t k = 0; k < m.proprio_dim; ++k) pro[(row * m.proprio_dim + k) * W + w] = pw[w * m.proprio_dim + k];
      }
      const float* hw = d.haptic_window(indices[b], t);
      for (std::size_t w = 0; w < W; ++w) {
        for (std::size_t k = 0; k < m.haptic_dim; ++k) hap[(row * m.haptic_dim + k) * W + w] = hw[w * m.haptic_dim + k];
      }
      if (t + 1 < T_) {
        const float* u = d.control(indices[b], t);
        for (std::size_t k = 0; k < m.control_dim; ++k) ctl[row * m.control_dim + k] = u[k];
      }
    }
  }
  SequenceBatch<T> out;
  out.steps = T_;
  out.batch = B;
  out.images = Tensor<T>::from({T_ * B, m.image_height, m.image_width}, std::move(img));
  out.proprio = Tensor<T>::from({T_ * B, m.proprio_dim, W}, std::move(pro));
  out.haptic = Tensor<T>::from({T_ * B, m.haptic_dim, W}, std::move(hap));
  if (T_ > 1) out.controls = Tensor<T>::from({(T_ - 1) * B, m.control_dim}, std::move(ctl));
  return out;
}

template <typename T>
Tensor<T> standard_normal(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<T> v(rows * cols);
  for (auto& x : v) x = static_cast<T>(normal(rng));
  return Tensor<T>::from({rows, cols}, std::move(v));
}

// Model -----------------------------------------------------------------------

namespace {

// Per-module generator so that shared components initialize identically
// across variants built from the same seed.
std::mt19937_64 module_rng(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : name) h = (h ^ ch) * 1099511628211ull;
  std::seed_seq seq{seed, h};
  return std::mt19937_64(seq);
}

template <typename T>
void require_rows(const Tensor<T>& t, const char* modality, std::size_t expected) {
  if (!t.defined()) throw ShapeError(std::string("batch is missing the ") + modality + " modality");
  if (t.dim(0) != expected) {
    throw ShapeError(std::string(modality) + ": expected " + std::to_string(expected) + " rows, got " +
                     shape_string(t.shape()));
  }
}

template <typename T>
DiagGaussian<T> step_of(const DiagGaussian<T>& g, std::size_t t, std::size_t B) {
  return DiagGaussian<T>(ops::slice(g.mean(), 0, t * B, (t + 1) * B), ops::slice(g.var(), 0, t * B, (t + 1) * B));
}

template <typename T>
Tensor<T> bernoulli_log_likelihood(const Tensor<T>& x, const Tensor<T>& logits) {
  const std::size_t n = x.dim(0);
  auto ll = ops::sub(ops::mul(x, logits), ops::softplus(logits));
  return ops::sum_axis(ops::reshape(ll, {n, x.numel() / n}), 1);
}

template <typename T>
Tensor<T> unit_gaussian_log_likelihood(const Tensor<T>& x, const Tensor<T>& mean) {
  const std::size_t n = x.dim(0);
  const T half_log_2pi = static_cast<T>(0.5 * std::log(2.0 * std::numbers::pi));
  auto ll = ops::add_scalar(ops::scale(ops::square(ops::sub(x, mean)), T(-0.5)), -half_log_2pi);
  return ops::sum_axis(ops::reshape(ll, {n, x.numel() / n}), 1);
}

std::string step_context(const char* what, std::size_t t, const std::exception& e) {
  return std::string(what) + " at step " + std::to_string(t + 1) + ": " + e.what();
}

}  // namespace

template <typename T>
Model<T>::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  mods_ = config_.modalities();
  const auto& c = config_;
  const std::size_t K = c.latent_dim;
  std::size_t fused = 0;
  if (mods_.image) {
    auto rng = module_rng(c.seed, "image");
    image_encoder_ = ImageEncoder<T>(store_, "image.encoder", c.image_height, c.image_width, c.image_channels, rng);
    if (!mods_.concat) heads_["image"] = GaussianHead<T>::create(store_, "image.head", image_encoder_.feature_dim(), K, rng);
    image_decoder_ = ImageDecoder<T>(store_, "image.decoder", K, c.image_height, c.image_width, c.image_channels, rng);
    fused += image_encoder_.feature_dim();
  }
  if (mods_.proprio) {
    auto rng = module_rng(c.seed, "proprio");
    proprio_encoder_ = LowDimEncoder<T>(store_, "proprio.encoder", c.proprio_dim, c.window, c.window_channels, rng);
    if (!mods_.concat) heads_["proprio"] = GaussianHead<T>::create(store_, "proprio.head", proprio_encoder_.feature_dim(), K, rng);
    proprio_decoder_ = LowDimDecoder<T>(store_, "proprio.decoder", K, c.proprio_dim, c.window, c.window_channels, rng);
    fused += proprio_encoder_.feature_dim();
  }
  if (mods_.haptic) {
    auto rng = module_rng(c.seed, "haptic");
    haptic_encoder_ = LowDimEncoder<T>(store_, "haptic.encoder", c.haptic_dim, c.window, c.window_channels, rng);
    if (!mods_.concat) heads_["haptic"] = GaussianHead<T>::create(store_, "haptic.head", haptic_encoder_.feature_dim(), K, rng);
    haptic_decoder_ = LowDimDecoder<T>(store_, "haptic.decoder", K, c.haptic_dim, c.window, c.window_channels, rng);
    fused += haptic_encoder_.feature_dim();
  }
  if (mods_.concat) {
    auto rng = module_rng(c.seed, "fusion");
    heads_["fusion"] = GaussianHead<T>::create(store_, "fusion.head", fused, K, rng);
  }
  auto rng = module_rng(c.seed, "transition");
  transition_ = TransitionGRU<T>(store_, "transition", K, c.control_dim, c.transition_hidden, rng,
                                 static_cast<T>(c.a_init_scale));
}

template <typename T>
std::map<std::string, DiagGaussian<T>> Model<T>::encode_experts(const SequenceBatch<T>& batch) const {
  const std::size_t n = batch.steps * batch.batch;
  std::map<std::string, Tensor<T>> features;
  auto encode = [&](const std::string& modality, const auto& encoder, const Tensor<T>& x) {
    require_rows(x, modality.c_str(), n);
    try {
      features[modality] = encoder.features(x);
    } catch (const ShapeError& e) {
      throw ShapeError(modality + " expert: " + e.what());
    }
  };
  if (mods_.image) encode("image", image_encoder_, batch.images);
  if (mods_.proprio) encode("proprio", proprio_encoder_, batch.proprio);
  if (mods_.haptic) encode("haptic", haptic_encoder_, batch.haptic);
  std::map<std::string, DiagGaussian<T>> experts;
  if (mods_.concat) {
    std::vector<Tensor<T>> parts;
    for (const auto& name : mods_.names()) parts.push_back(features.at(name));
    experts.emplace("fusion", heads_.at("fusion")(ops::concat(parts, 1)));
  } else {
    for (const auto& [name, f] : features) experts.emplace(name, heads_.at(name)(f));
  }
  return experts;
}

template <typename T>
PosteriorTrace<T> Model<T>::filter(const SequenceBatch<T>& batch, const Tensor<T>& noise,
                                   const ExpertHook<T>& hook) const {
  const std::size_t Tn = batch.steps, B = batch.batch, K = config_.latent_dim;
  if (Tn == 0 || B == 0) throw ShapeError("filter: empty batch");
  if (noise.shape() != Shape{Tn * B, K}) {
    throw ShapeError("filter: noise " + shape_string(noise.shape()) + " does not match " + shape_string({Tn * B, K}));
  }
  if (Tn > 1) require_rows(batch.controls, "controls", (Tn - 1) * B);

  const auto experts = encode_experts(batch);
  PosteriorTrace<T> trace;
  auto h = Tensor<T>::zeros({B, config_.transition_hidden});
  for (std::size_t t = 0; t < Tn; ++t) {
    try {
      DiagGaussian<T> prior;
      if (t == 0) {
        prior = DiagGaussian<T>::constant({B, K}, T(0), static_cast<T>(config_.prior_var));
      } else {
        auto out = transition_(trace.z.back(), ops::slice(batch.controls, 0, (t - 1) * B, t * B), h);
        prior = out.prior;
        h = out.hidden;
      }
      std::vector<DiagGaussian<T>> factors{prior};
      for (const auto& [name, all] : experts) {
        auto e = step_of(all, t, B);
        trace.experts[name].push_back(e);
        if (hook) {
          auto replaced = hook(name, t, e);
          if (!replaced) continue;
          e = *replaced;
        }
        factors.push_back(e);
      }
      auto post = product_of_experts(factors);
      trace.z.push_back(rsample(post, ops::slice(noise, 0, t * B, (t + 1) * B)));
      trace.prior.push_back(std::move(prior));
      trace.posterior.push_back(std::move(post));
      trace.hidden.push_back(h);
    } catch (const NumericError& e) {
      throw NumericError(step_context("filter", t, e));
    }
  }
  return trace;
}

template <typename T>
Tensor<T> Model<T>::reconstruction_log_likelihood(const SequenceBatch<T>& batch, const Tensor<T>& z,
                                                  std::map<std::string, double>* per_modality) const {
  const std::size_t n = batch.steps * batch.batch;
  if (z.shape() != Shape{n, config_.latent_dim}) {
    throw ShapeError("reconstruction: latents " + shape_string(z.shape()) + " do not match " +
                     shape_string({n, config_.latent_dim}));
  }
  std::vector<Tensor<T>> terms;
  auto record = [&](const std::string& name, Tensor<T> ll) {
    if (per_modality) {
      double s = 0.0;
      for (auto v : ll.values()) s += static_cast<double>(v);
      (*per_modality)[name] = s / static_cast<double>(batch.batch);
    }
    terms.push_back(std::move(ll));
  };
  try {
    if (mods_.image) {
      require_rows(batch.images, "image", n);
      record("image", bernoulli_log_likelihood(batch.images, image_decoder_.logits(z)));
    }
    if (mods_.proprio) {
      require_rows(batch.proprio, "proprio", n);
      record("proprio", unit_gaussian_log_likelihood(batch.proprio, proprio_decoder_.mean(z)));
    }
    if (mods_.haptic) {
      require_rows(batch.haptic, "haptic", n);
      record("haptic", unit_gaussian_log_likelihood(batch.haptic, haptic_decoder_.mean(z)));
    }
  } catch (const NumericError& e) {
    throw NumericError(std::string("reconstruction term: ") + e.what());
  }
  return terms.size() == 1 ? terms.front() : ops::add_n(terms);
}

template <typename T>
ElboResult<T> Model<T>::elbo(const SequenceBatch<T>& batch, const Tensor<T>& noise) const {
  const std::size_t Tn = batch.steps, B = batch.batch;
  auto trace = filter(batch, noise);
  ElboResult<T> out;
  auto rec = reconstruction_log_likelihood(batch, ops::concat(trace.z, 0), &out.reconstruction);
  auto rec_seq = ops::sum_axis(ops::reshape(rec, {Tn, B}), 0);
  std::vector<Tensor<T>> kls;
  for (std::size_t t = 0; t < Tn; ++t) {
    try {
      auto kl = kl_divergence(trace.posterior[t], trace.prior[t]);
      double s = 0.0;
      for (auto v : kl.values()) s += static_cast<double>(v);
      out.kl.push_back(s / static_cast<double>(B));
      kls.push_back(std::move(kl));
    } catch (const NumericError& e) {
      throw NumericError(step_context("kl term", t, e));
    }
  }
  auto kl_total = kls.size() == 1 ? kls.front() : ops::add_n(kls);
  out.per_sequence = ops::sub(rec_seq, kl_total);
  out.elbo = ops::mean(out.per_sequence);
  return out;
}

template <typename T>
Prediction<T> Model<T>::decode(const Tensor<T>& z) const {
  Prediction<T> out;
  if (mods_.image) out.images = image_decoder_.mean(z);
  if (mods_.proprio) out.proprio = proprio_decoder_.mean(z);
  if (mods_.haptic) out.haptic = haptic_decoder_.mean(z);
  return out;
}

template <typename T>
Prediction<T> Model<T>::predict(const SequenceBatch<T>& context, const Tensor<T>& controls,
                                std::size_t horizon) const {
  if (horizon == 0) throw std::invalid_argument("predict: horizon must be >= 1");
  const std::size_t B = context.batch, U = config_.control_dim;
  if (!controls.defined() || controls.shape() != Shape{horizon * B, U}) {
    throw ShapeError("predict: expected " + std::to_string(horizon) + " controls per sequence " +
                     shape_string({horizon * B, U}) + ", got " +
                     (controls.defined() ? shape_string(controls.shape()) : std::string("none")));
  }
  auto trace = filter(context, Tensor<T>::zeros({context.steps * B, config_.latent_dim}));
  auto z = trace.posterior.back().mean();
  auto h = trace.hidden.back();
  std::vector<Tensor<T>> latents;
  for (std::size_t j = 0; j < horizon; ++j) {
    auto out = transition_(z, ops::slice(controls, 0, j * B, (j + 1) * B), h);
    z = out.prior.mean();
    h = out.hidden;
    latents.push_back(z);
  }
  auto pred = decode(ops::concat(latents, 0));
  pred.latents = std::move(latents);
  return pred;
}

namespace {

template <typename T>
Tensor<T> repeat_rows(const Tensor<T>& t, std::size_t steps, std::size_t batch, std::size_t b, std::size_t copies) {
  if (!t.defined()) return t;
  const std::size_t row = t.numel() / t.dim(0);
  std::vector<T> v;
  v.reserve(steps * copies * row);
  for (std::size_t s = 0; s < steps; ++s) {
    auto src = t.values().subspan((s * batch + b) * row, row);
    for (std::size_t c = 0; c < copies; ++c) v.insert(v.end(), src.begin(), src.end());
  }
  Shape shape = t.shape();
  shape[0] = steps * copies;
  return Tensor<T>::from(std::move(shape), std::move(v));
}

}  // namespace

double log_mean_exp(const std::vector<double>& x) {
  if (x.empty()) throw std::invalid_argument("log_mean_exp: empty input");
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s / static_cast<double>(x.size()));
}

template <typename T>
std::vector<std::vector<double>> Model<T>::log_importance_weights(const SequenceBatch<T>& batch, std::size_t samples,
                                                                 std::mt19937_64& rng) const {
  if (samples == 0) throw std::invalid_argument("log_likelihood_estimate: need at least one sample");
  const std::size_t Tn = batch.steps, B = batch.batch, K = config_.latent_dim;
  std::vector<std::vector<double>> out;
  for (std::size_t b = 0; b < B; ++b) {
    SequenceBatch<T> rep;
    rep.steps = Tn;
    rep.batch = samples;
    rep.images = repeat_rows(batch.images, Tn, B, b, samples);
    rep.proprio = repeat_rows(batch.proprio, Tn, B, b, samples);
    rep.haptic = repeat_rows(batch.haptic, Tn, B, b, samples);
    if (Tn > 1) rep.controls = repeat_rows(batch.controls, Tn - 1, B, b, samples);
    auto trace = filter(rep, standard_normal<T>(Tn * samples, K, rng));
    auto rec = reconstruction_log_likelihood(rep, ops::concat(trace.z, 0));
    std::vector<double> log_w(samples, 0.0);
    for (std::size_t t = 0; t < Tn; ++t) {
      auto lp = log_prob(trace.prior[t], trace.z[t]);
      auto lq = log_prob(trace.posterior[t], trace.z[t]);
      for (std::size_t s = 0; s < samples; ++s) {
        log_w[s] += static_cast<double>(rec[t * samples + s]) + static_cast<double>(lp[s]) - static_cast<double>(lq[s]);
      }
    }
    out.push_back(std::move(log_w));
  }
  return out;
}

template <typename T>
std::vector<double> Model<T>::log_likelihood_estimate(const SequenceBatch<T>& batch, std::size_t samples,
                                                      std::mt19937_64& rng) const {
  std::vector<double> out;
  for (const auto& log_w : log_importance_weights(batch, samples, rng)) out.push_back(log_mean_exp(log_w));
  return out;
}

// Training --------------------------------------------------------------------

template <typename T>
TrainResult train(Model<T>& model, AdamState<T>& adam, const sim::Dataset& data,
                  const std::vector<std::size_t>& indices, const TrainOptions& options) {
  const auto& c = model.config();
  const std::size_t epochs = options.epochs.value_or(c.epochs);
  TrainResult result;
  if (epochs == 0) return result;
  const auto& m = data.manifest;
  if (m.image_height != c.image_height || m.image_width != c.image_width || m.window != c.window ||
      m.proprio_dim != c.proprio_dim || m.haptic_dim != c.haptic_dim || m.control_dim != c.control_dim) {
    throw ConfigError("train: dataset shapes do not match the model configuration");
  }
  const std::size_t per_epoch = indices.size() / c.batch_size;
  if (per_epoch == 0) {
    throw ConfigError("train: " + std::to_string(indices.size()) + " trajectories are fewer than one batch of " +
                      std::to_string(c.batch_size));
  }
  std::seed_seq seq{static_cast<std::uint64_t>(c.seed), std::uint64_t{0x7a11}};
  std::mt19937_64 rng(seq);
  auto& store = model.params();
  const auto clipped = name_prefix(kTransitionGroup);
  const auto rest = excluding_prefix(kTransitionGroup);
  auto last_good = store.snapshot();
  auto last_good_adam = adam;
  std::vector<std::size_t> order = indices;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < per_epoch; ++s) {
      std::vector<std::size_t> pick(order.begin() + static_cast<std::ptrdiff_t>(s * c.batch_size),
                                    order.begin() + static_cast<std::ptrdiff_t>((s + 1) * c.batch_size));
      auto batch = make_batch<T>(data, pick);
      auto noise = standard_normal<T>(batch.steps * batch.batch, c.latent_dim, rng);
      double loss = 0.0;
      try {
        auto res = model.elbo(batch, noise);
        auto objective = ops::neg(res.elbo);
        loss = static_cast<double>(objective.item());
        backward(objective);
        adam_step(store, adam, c.learning_rate, c.clip_norm, clipped);
        adam_step(store, adam, c.learning_rate, std::nullopt, rest);
        for (const auto& leaf : store.leaves()) require_finite<T>(leaf.tensor.values(), leaf.name);
      } catch (const NumericError& err) {
        store.restore(last_good);
        store.zero_grad();
        adam = last_good_adam;
        result.diverged = true;
        result.message = "diverged at step " + std::to_string(result.steps + 1) + ": " + err.what();
        return result;
      }
      last_good = store.snapshot();
      last_good_adam = adam;
      result.loss_trace.push_back(loss);
      ++result.steps;
      if (options.on_step) options.on_step(result.steps, loss);
    }
  }
  return result;
}

// Checkpoints -----------------------------------------------------------------

namespace {

template <typename T>
constexpr const char* dtype_tag() {
  return sizeof(T) == 4 ? "f32le" : "f64le";
}

struct LeafSpec {
  std::string name;
  Shape shape;
};

struct CheckpointManifest {
  CheckpointInfo info;
  std::string dtype;
  std::vector<LeafSpec> leaves;
};

CheckpointManifest parse_checkpoint_manifest(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw FormatError("checkpoint " + dir.string() + " does not exist");
  CheckpointManifest cm;
  try {
    const json j = json::parse(io::read_text(dir / "manifest.json"));
    JsonFields f(j, "checkpoint");
    std::string format;
    int version = 0;
    f.read("format", format);
    f.read("version", version);
    if (format != "mmdyn-checkpoint" || version != 1) {
      throw FormatError("manifest.json: not a version 1 checkpoint manifest");
    }
    f.read("dtype", cm.dtype);
    f.read("training_step", cm.info.training_step);
    if (const json* cfg = f.child("config")) {
      cm.info.config = model_config_from_json(*cfg);
    } else {
      throw FormatError("manifest.json: missing config");
    }
    if (const json* leaves = f.child("leaves")) {
      for (const auto& l : *leaves) {
        JsonFields lf(l, "checkpoint.leaves");
        LeafSpec spec;
        lf.read("name", spec.name);
        lf.read("shape", spec.shape);
        lf.finish();
        cm.leaves.push_back(std::move(spec));
      }
    }
    f.finish();
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  if (cm.dtype != "f32le" && cm.dtype != "f64le") throw FormatError("manifest.json: unsupported dtype " + cm.dtype);
  return cm;
}

}  // namespace

template <typename T>
void save_checkpoint(const Model<T>& model, const fs::path& dir, std::uint64_t training_step, bool overwrite) {
  json leaves = json::array();
  std::vector<T> payload;
  for (const auto& leaf : model.params().leaves()) {
    leaves.push_back({{"name", leaf.name}, {"shape", leaf.tensor.shape()}});
    payload.insert(payload.end(), leaf.tensor.values().begin(), leaf.tensor.values().end());
  }
  json manifest{{"format", "mmdyn-checkpoint"}, {"version", 1},
                {"dtype", dtype_tag<T>()},      {"training_step", training_step},
                {"config", to_json(model.config())}, {"leaves", std::move(leaves)}};
  io::StagedDirectory stage(dir, overwrite);
  io::write_text(stage.path() / "manifest.json", manifest.dump(2) + "\n");
  io::write_le<T>(stage.path() / "params.bin", payload);
  stage.commit();
}

CheckpointInfo read_checkpoint_info(const fs::path& dir) { return parse_checkpoint_manifest(dir).info; }

template <typename T>
Model<T> load_checkpoint(const fs::path& dir, CheckpointInfo* info) {
  const auto cm = parse_checkpoint_manifest(dir);
  if (cm.dtype != dtype_tag<T>()) {
    throw FormatError("params.bin: stored as " + cm.dtype + " but requested " + dtype_tag<T>());
  }
  Model<T> model(cm.info.config);
  auto leaves = model.params().leaves();
  if (leaves.size() != cm.leaves.size()) {
    throw FormatError("manifest.json: lists " + std::to_string(cm.leaves.size()) + " parameters, model has " +
                      std::to_string(leaves.size()));
  }
  std::size_t total = 0;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    if (leaves[i].name != cm.leaves[i].name || leaves[i].tensor.shape() != cm.leaves[i].shape) {
      throw FormatError("manifest.json: parameter " + cm.leaves[i].name + " " + shape_string(cm.leaves[i].shape) +
                        " does not match model parameter " + leaves[i].name + " " +
                        shape_string(leaves[i].tensor.shape()));
    }
    total += leaves[i].tensor.numel();
  }
  const auto values = io::read_le<T>(dir / "params.bin", total);
  std::size_t offset = 0;
  for (auto& leaf : leaves) {
    auto dst = leaf.tensor.mutable_values();
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), dst.size(), dst.begin());
    offset += dst.size();
  }
  require_finite<T>(values, "params.bin");
  if (info) *info = cm.info;
  return model;
}

#define MMDYN_INSTANTIATE(T)                                                                             \
  template struct SequenceBatch<T>;                                                                      \
  template SequenceBatch<T> make_batch<T>(const sim::Dataset&, const std::vector<std::size_t>&, std::size_t); \
  template Tensor<T> standard_normal<T>(std::size_t, std::size_t, std::mt19937_64&);                     \
  template class Model<T>;                                                                               \
  template TrainResult train<T>(Model<T>&, AdamState<T>&, const sim::Dataset&,                           \
                                const std::vector<std::size_t>&, const TrainOptions&);                   \
  template void save_checkpoint<T>(const Model<T>&, const fs::path&, std::uint64_t, bool);              \
  template Model<T> load_checkpoint<T>(const fs::path&, CheckpointInfo*);

MMDYN_INSTANTIATE(float)
MMDYN_INSTANTIATE(double)
#undef MMDYN_INSTANTIATE

}  // namespace mmdyn
