#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "mmdyn/gaussian.hpp"
#include "mmdyn/ops.hpp"
#include "mmdyn/parameters.hpp"

namespace mmdyn {

/// Weight-normalized affine layer with a plain bias.
template <typename T>
struct Dense {
  Parameter<T> weight;  // [out, in]
  Parameter<T> bias;    // [out]

  static Dense create(ParameterStore<T>& store, const std::string& name, std::size_t in,
                      std::size_t out, std::mt19937_64& rng, T scale_factor = T(1));
  Tensor<T> operator()(const Tensor<T>& x) const;
  std::size_t in() const { return weight.tensor.dim(1); }
  std::size_t out() const { return weight.tensor.dim(0); }
};

/// Weight-normalized 2-D convolution or transposed convolution. Transposed
/// weights are stored output-major like ordinary ones so that the norm runs
/// over each output channel in both cases.
template <typename T>
struct Conv {
  Parameter<T> weight;  // [out, in, kh, kw]
  Parameter<T> bias;    // [out]
  ops::ConvGeometry geom;
  bool transposed = false;

  static Conv create(ParameterStore<T>& store, const std::string& name, std::size_t in,
                     std::size_t out, std::size_t kh, std::size_t kw, ops::ConvGeometry geom,
                     bool transposed, std::mt19937_64& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

/// Mean and pre-variance heads mapping a feature vector to a DiagGaussian.
template <typename T>
struct GaussianHead {
  Dense<T> mean;
  Dense<T> pre_var;

  static GaussianHead create(ParameterStore<T>& store, const std::string& name, std::size_t in,
                             std::size_t latent, std::mt19937_64& rng);
  DiagGaussian<T> operator()(const Tensor<T>& features) const;
};

/// Strided convolutions over [N, H, W] grayscale images. Four layers with the
/// default channel plan take 32x32 to 2x2 and 64x64 to 4x4.
template <typename T>
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(ParameterStore<T>& store, const std::string& name, std::size_t height,
               std::size_t width, const std::vector<std::size_t>& channels, std::mt19937_64& rng);

  /// Flattened activations before the Gaussian heads: [N, feature_dim()].
  Tensor<T> features(const Tensor<T>& images) const;
  std::size_t feature_dim() const { return feature_dim_; }

 private:
  std::vector<Conv<T>> layers_;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t feature_dim_ = 0;
};

/// Latent [N, K] to Bernoulli logits [N, H, W] through an affine layer and
/// transposed convolutions mirroring ImageEncoder.
template <typename T>
class ImageDecoder {
 public:
  ImageDecoder() = default;
  ImageDecoder(ParameterStore<T>& store, const std::string& name, std::size_t latent,
               std::size_t height, std::size_t width, const std::vector<std::size_t>& channels,
               std::mt19937_64& rng);

  Tensor<T> logits(const Tensor<T>& z) const;
  /// Pixel means in [0, 1].
  Tensor<T> mean(const Tensor<T>& z) const { return ops::sigmoid(logits(z)); }

 private:
  Dense<T> input_;
  std::vector<Conv<T>> layers_;
  std::size_t latent_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t base_channels_ = 0;
  std::size_t base_h_ = 0;
  std::size_t base_w_ = 0;
};

/// 1-D convolutions along the measurement window. Inputs are channel-major
/// windows [N, D, W]; two stride-2 layers reduce W by a factor of four.
template <typename T>
class LowDimEncoder {
 public:
  LowDimEncoder() = default;
  LowDimEncoder(ParameterStore<T>& store, const std::string& name, std::size_t dim,
                std::size_t window, const std::vector<std::size_t>& channels, std::mt19937_64& rng);

  Tensor<T> features(const Tensor<T>& windows) const;
  std::size_t feature_dim() const { return feature_dim_; }

 private:
  std::vector<Conv<T>> layers_;
  std::size_t dim_ = 0;
  std::size_t window_ = 0;
  std::size_t feature_dim_ = 0;
};

/// Latent [N, K] to window means [N, D, W] (linear output).
template <typename T>
class LowDimDecoder {
 public:
  LowDimDecoder() = default;
  LowDimDecoder(ParameterStore<T>& store, const std::string& name, std::size_t latent,
                std::size_t dim, std::size_t window, const std::vector<std::size_t>& channels,
                std::mt19937_64& rng);

  Tensor<T> mean(const Tensor<T>& z) const;

 private:
  Dense<T> input_;
  std::vector<Conv<T>> layers_;
  std::size_t latent_ = 0;
  std::size_t dim_ = 0;
  std::size_t window_ = 0;
  std::size_t base_channels_ = 0;
  std::size_t base_w_ = 0;
};

template <typename T>
struct TransitionOutput {
  DiagGaussian<T> prior;
  Tensor<T> hidden;  // [N, H]
  Tensor<T> a;       // [N, K, K]
  Tensor<T> b;       // [N, K, U]
};

/// GRU over [z_{t-1}, u_{t-1}] whose hidden state emits locally linear
/// dynamics: mean = A_t z_{t-1} + B_t u_{t-1}, variance from a softplus head.
template <typename T>
class TransitionGRU {
 public:
  TransitionGRU() = default;
  /// `a_init_scale` sets the initial scale of the A head relative to its
  /// random direction; A starts at identity plus that much noise.
  TransitionGRU(ParameterStore<T>& store, const std::string& name, std::size_t latent,
                std::size_t control, std::size_t hidden, std::mt19937_64& rng,
                T a_init_scale = T(0.01));

  TransitionOutput<T> operator()(const Tensor<T>& z_prev, const Tensor<T>& u_prev,
                                 const Tensor<T>& h_prev) const;

  std::size_t hidden_dim() const { return hidden_; }

 private:
  Parameter<T> w_ih_, w_hh_, b_ih_, b_hh_;
  Dense<T> a_head_, b_head_, var_head_;
  std::size_t latent_ = 0;
  std::size_t control_ = 0;
  std::size_t hidden_ = 0;
};

}  // namespace mmdyn
