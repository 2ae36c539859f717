#include "mmdyn/nets.hpp"

#include <cmath>

namespace mmdyn {
namespace {

template <typename T>
T fan_in_bound(std::size_t fan_in) {
  return static_cast<T>(1.0 / std::sqrt(static_cast<double>(fan_in)));
}

std::string expect_msg(const std::string& who, const Shape& want, const Shape& got) {
  return who + ": expected input " + shape_string(want) + ", got " + shape_string(got);
}

}  // namespace

template <typename T>
Dense<T> Dense<T>::create(ParameterStore<T>& store, const std::string& name, std::size_t in,
                          std::size_t out, std::mt19937_64& rng, T scale_factor) {
  Dense d;
  d.weight = store.add_weight_normed(name + ".weight", {out, in}, fan_in_bound<T>(in), rng, scale_factor);
  d.bias = store.add_values(name + ".bias", {out}, std::vector<T>(out, T(0)));
  return d;
}

template <typename T>
Tensor<T> Dense<T>::operator()(const Tensor<T>& x) const {
  return ops::affine(x, weight.effective(), ops::OptionalTensor<T>(bias.tensor));
}

template <typename T>
Conv<T> Conv<T>::create(ParameterStore<T>& store, const std::string& name, std::size_t in,
                        std::size_t out, std::size_t kh, std::size_t kw, ops::ConvGeometry geom,
                        bool transposed, std::mt19937_64& rng) {
  Conv c;
  c.weight = store.add_weight_normed(name + ".weight", {out, in, kh, kw}, fan_in_bound<T>(in * kh * kw), rng);
  c.bias = store.add_values(name + ".bias", {out}, std::vector<T>(out, T(0)));
  c.geom = geom;
  c.transposed = transposed;
  return c;
}

template <typename T>
Tensor<T> Conv<T>::operator()(const Tensor<T>& x) const {
  auto w = weight.effective();
  ops::OptionalTensor<T> b(bias.tensor);
  if (transposed) return ops::conv_transpose2d(x, ops::transpose01(w), b, geom);
  return ops::conv2d(x, w, b, geom);
}

template <typename T>
GaussianHead<T> GaussianHead<T>::create(ParameterStore<T>& store, const std::string& name,
                                        std::size_t in, std::size_t latent, std::mt19937_64& rng) {
  return {Dense<T>::create(store, name + ".mean", in, latent, rng),
          Dense<T>::create(store, name + ".pre_var", in, latent, rng)};
}

template <typename T>
DiagGaussian<T> GaussianHead<T>::operator()(const Tensor<T>& features) const {
  return DiagGaussian<T>::from_pre_variance(mean(features), pre_var(features));
}

// Images --------------------------------------------------------------------

template <typename T>
ImageEncoder<T>::ImageEncoder(ParameterStore<T>& store, const std::string& name, std::size_t height,
                              std::size_t width, const std::vector<std::size_t>& channels,
                              std::mt19937_64& rng)
    : height_(height), width_(width) {
  const std::size_t factor = std::size_t{1} << channels.size();
  if (channels.empty() || height % factor || width % factor) {
    throw ConfigError(name + ": image " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by " + std::to_string(factor));
  }
  std::size_t in = 1;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    layers_.push_back(Conv<T>::create(store, name + ".conv" + std::to_string(i), in, channels[i], 4, 4,
                                      {}, false, rng));
    in = channels[i];
  }
  feature_dim_ = in * (height / factor) * (width / factor);
}

template <typename T>
Tensor<T> ImageEncoder<T>::features(const Tensor<T>& images) const {
  if (images.rank() != 3 || images.dim(1) != height_ || images.dim(2) != width_) {
    throw ShapeError(expect_msg("image encoder", {0, height_, width_}, images.shape()));
  }
  const std::size_t n = images.dim(0);
  auto h = ops::reshape(images, {n, 1, height_, width_});
  for (const auto& layer : layers_) h = ops::relu(layer(h));
  return ops::reshape(h, {n, feature_dim_});
}

template <typename T>
ImageDecoder<T>::ImageDecoder(ParameterStore<T>& store, const std::string& name, std::size_t latent,
                              std::size_t height, std::size_t width,
                              const std::vector<std::size_t>& channels, std::mt19937_64& rng)
    : latent_(latent), height_(height), width_(width) {
  const std::size_t factor = std::size_t{1} << channels.size();
  if (channels.empty() || height % factor || width % factor) {
    throw ConfigError(name + ": image " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by " + std::to_string(factor));
  }
  base_channels_ = channels.back();
  base_h_ = height / factor;
  base_w_ = width / factor;
  input_ = Dense<T>::create(store, name + ".input", latent, base_channels_ * base_h_ * base_w_, rng);
  for (std::size_t i = channels.size(); i-- > 0;) {
    const std::size_t out = i == 0 ? 1 : channels[i - 1];
    layers_.push_back(Conv<T>::create(store, name + ".deconv" + std::to_string(channels.size() - 1 - i),
                                      channels[i], out, 4, 4, {}, true, rng));
  }
}

template <typename T>
Tensor<T> ImageDecoder<T>::logits(const Tensor<T>& z) const {
  if (z.rank() != 2 || z.dim(1) != latent_) {
    throw ShapeError(expect_msg("image decoder", {0, latent_}, z.shape()));
  }
  const std::size_t n = z.dim(0);
  auto h = ops::reshape(ops::relu(input_(z)), {n, base_channels_, base_h_, base_w_});
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    if (i + 1 < layers_.size()) h = ops::relu(h);
  }
  return ops::reshape(h, {n, height_, width_});
}

// Low-dimensional windows ------------------------------------------------------

namespace {
constexpr ops::ConvGeometry kWindowGeom{1, 2, 0, 1};
}

template <typename T>
LowDimEncoder<T>::LowDimEncoder(ParameterStore<T>& store, const std::string& name, std::size_t dim,
                                std::size_t window, const std::vector<std::size_t>& channels,
                                std::mt19937_64& rng)
    : dim_(dim), window_(window) {
  const std::size_t factor = std::size_t{1} << channels.size();
  if (channels.empty() || window % factor) {
    throw ConfigError(name + ": window " + std::to_string(window) + " is not divisible by " +
                      std::to_string(factor));
  }
  std::size_t in = dim;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    layers_.push_back(Conv<T>::create(store, name + ".conv" + std::to_string(i), in, channels[i], 1, 4,
                                      kWindowGeom, false, rng));
    in = channels[i];
  }
  feature_dim_ = in * (window / factor);
}

template <typename T>
Tensor<T> LowDimEncoder<T>::features(const Tensor<T>& windows) const {
  if (windows.rank() != 3 || windows.dim(1) != dim_ || windows.dim(2) != window_) {
    throw ShapeError(expect_msg("window encoder", {0, dim_, window_}, windows.shape()));
  }
  const std::size_t n = windows.dim(0);
  auto h = ops::reshape(windows, {n, dim_, 1, window_});
  for (const auto& layer : layers_) h = ops::relu(layer(h));
  return ops::reshape(h, {n, feature_dim_});
}

template <typename T>
LowDimDecoder<T>::LowDimDecoder(ParameterStore<T>& store, const std::string& name, std::size_t latent,
                                std::size_t dim, std::size_t window,
                                const std::vector<std::size_t>& channels, std::mt19937_64& rng)
    : latent_(latent), dim_(dim), window_(window) {
  const std::size_t factor = std::size_t{1} << channels.size();
  if (channels.empty() || window % factor) {
    throw ConfigError(name + ": window " + std::to_string(window) + " is not divisible by " +
                      std::to_string(factor));
  }
  base_channels_ = channels.back();
  base_w_ = window / factor;
  input_ = Dense<T>::create(store, name + ".input", latent, base_channels_ * base_w_, rng);
  for (std::size_t i = channels.size(); i-- > 0;) {
    const std::size_t out = i == 0 ? dim : channels[i - 1];
    layers_.push_back(Conv<T>::create(store, name + ".deconv" + std::to_string(channels.size() - 1 - i),
                                      channels[i], out, 1, 4, kWindowGeom, true, rng));
  }
}

template <typename T>
Tensor<T> LowDimDecoder<T>::mean(const Tensor<T>& z) const {
  if (z.rank() != 2 || z.dim(1) != latent_) {
    throw ShapeError(expect_msg("window decoder", {0, latent_}, z.shape()));
  }
  const std::size_t n = z.dim(0);
  auto h = ops::reshape(ops::relu(input_(z)), {n, base_channels_, 1, base_w_});
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    if (i + 1 < layers_.size()) h = ops::relu(h);
  }
  return ops::reshape(h, {n, dim_, window_});
}

// Transition ------------------------------------------------------------------

template <typename T>
TransitionGRU<T>::TransitionGRU(ParameterStore<T>& store, const std::string& name, std::size_t latent,
                                std::size_t control, std::size_t hidden, std::mt19937_64& rng,
                                T a_init_scale)
    : latent_(latent), control_(control), hidden_(hidden) {
  const std::size_t in = latent + control;
  w_ih_ = store.add_uniform(name + ".gru.w_ih", {3 * hidden, in}, fan_in_bound<T>(in), rng);
  w_hh_ = store.add_uniform(name + ".gru.w_hh", {3 * hidden, hidden}, fan_in_bound<T>(hidden), rng);
  b_ih_ = store.add_values(name + ".gru.b_ih", {3 * hidden}, std::vector<T>(3 * hidden, T(0)));
  b_hh_ = store.add_values(name + ".gru.b_hh", {3 * hidden}, std::vector<T>(3 * hidden, T(0)));
  a_head_ = Dense<T>::create(store, name + ".a_head", hidden, latent * latent, rng, a_init_scale);
  auto a_bias = a_head_.bias.tensor.mutable_values();
  for (std::size_t k = 0; k < latent; ++k) a_bias[k * latent + k] = T(1);
  b_head_ = Dense<T>::create(store, name + ".b_head", hidden, latent * control, rng);
  var_head_ = Dense<T>::create(store, name + ".var_head", hidden, latent, rng);
}

template <typename T>
TransitionOutput<T> TransitionGRU<T>::operator()(const Tensor<T>& z_prev, const Tensor<T>& u_prev,
                                                 const Tensor<T>& h_prev) const {
  if (z_prev.rank() != 2 || z_prev.dim(1) != latent_) {
    throw ShapeError(expect_msg("transition latent", {0, latent_}, z_prev.shape()));
  }
  const std::size_t n = z_prev.dim(0);
  if (u_prev.shape() != Shape{n, control_}) {
    throw ShapeError(expect_msg("transition control", {n, control_}, u_prev.shape()));
  }
  if (h_prev.shape() != Shape{n, hidden_}) {
    throw ShapeError(expect_msg("transition hidden", {n, hidden_}, h_prev.shape()));
  }
  auto x = ops::concat<T>({z_prev, u_prev}, 1);
  auto h = ops::gru_cell(x, h_prev, w_ih_.tensor, w_hh_.tensor, b_ih_.tensor, b_hh_.tensor);
  auto a = ops::reshape(a_head_(h), {n, latent_, latent_});
  auto b = ops::reshape(b_head_(h), {n, latent_, control_});
  auto mean = ops::add(ops::batched_matvec(a, z_prev), ops::batched_matvec(b, u_prev));
  auto prior = DiagGaussian<T>::from_pre_variance(mean, var_head_(h));
  return {std::move(prior), std::move(h), std::move(a), std::move(b)};
}

#define MMDYN_INSTANTIATE(T)          \
  template struct Dense<T>;           \
  template struct Conv<T>;            \
  template struct GaussianHead<T>;    \
  template class ImageEncoder<T>;     \
  template class ImageDecoder<T>;     \
  template class LowDimEncoder<T>;    \
  template class LowDimDecoder<T>;    \
  template class TransitionGRU<T>;

MMDYN_INSTANTIATE(float)
MMDYN_INSTANTIATE(double)
#undef MMDYN_INSTANTIATE

}  // namespace mmdyn
