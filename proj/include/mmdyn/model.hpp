#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmdyn/gaussian.hpp"
#include "mmdyn/nets.hpp"
#include "mmdyn/optim.hpp"
#include "mmdyn/simdata.hpp"

namespace mmdyn {

/// Which experts and decoders a variant carries.
struct Modalities {
  bool image = false;
  bool proprio = false;
  bool haptic = false;
  bool concat = false;  // one joint expert over concatenated features

  /// V, VP, VH, VHP, VHP-C, plus the image-free PH and PH-C used by the
  /// small validation instances.
  static Modalities parse(const std::string& variant);
  std::vector<std::string> names() const;  // active modalities in fixed order
};

struct ModelConfig {
  std::string variant = "VHP";
  std::size_t latent_dim = 16;
  std::size_t control_dim = 2;
  std::size_t image_height = 32;
  std::size_t image_width = 32;
  std::size_t window = 8;
  std::size_t proprio_dim = 4;
  std::size_t haptic_dim = 3;
  std::vector<std::size_t> image_channels{32, 64, 128, 256};
  std::vector<std::size_t> window_channels{32, 64};
  std::size_t transition_hidden = 256;
  double learning_rate = 3e-4;
  double clip_norm = 0.5;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  bool float_mode = true;  // 32-bit training; false selects 64-bit
  double prior_var = 1.0;  // p(z_1) = N(0, prior_var I)
  double a_init_scale = 0.01;

  Modalities modalities() const { return Modalities::parse(variant); }
  void validate() const;
  /// Copies shapes (image size, window, dims) from a dataset manifest.
  void adopt_shapes(const sim::Manifest& m);
};

nlohmann::json to_json(const ModelConfig& c);
/// Strict: unknown keys raise ConfigError. Missing keys keep `base` values.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

/// Time-major multimodal batch. Row t * B + b of every per-frame tensor holds
/// step t of trajectory b. Window tensors are channel-major [T*B, D, W].
/// Modalities the variant does not use may be left undefined.
template <typename T>
struct SequenceBatch {
  std::size_t steps = 0;
  std::size_t batch = 0;
  Tensor<T> images;    // [T*B, H, W]
  Tensor<T> proprio;   // [T*B, Dp, W]
  Tensor<T> haptic;    // [T*B, Dh, W]
  Tensor<T> controls;  // [(T-1)*B, U]

  /// Rows for steps [begin, end) of every tensor (controls: [begin, end-1)).
  SequenceBatch steps_range(std::size_t begin, std::size_t end) const;
};

/// Gathers trajectories `indices` (steps [0, steps)) from a dataset.
template <typename T>
SequenceBatch<T> make_batch(const sim::Dataset& d, const std::vector<std::size_t>& indices,
                            std::size_t steps = 0);

template <typename T>
struct PosteriorTrace {
  std::vector<DiagGaussian<T>> posterior;  // per step, [B, K]
  std::vector<DiagGaussian<T>> prior;      // per step; step 0 is p(z_1)
  std::vector<Tensor<T>> z;                // per step sample, [B, K]
  std::vector<Tensor<T>> hidden;           // GRU state entering each step
  std::map<std::string, std::vector<DiagGaussian<T>>> experts;  // per modality, per step
};

template <typename T>
struct ElboResult {
  Tensor<T> elbo;                           // scalar batch mean
  Tensor<T> per_sequence;                   // [B]
  std::map<std::string, double> reconstruction;  // batch-mean log-likelihood per modality
  std::vector<double> kl;                   // batch-mean KL per step
};

template <typename T>
struct Prediction {
  std::vector<Tensor<T>> latents;  // h entries of [B, K]
  Tensor<T> images;                // [h*B, H, W] pixel means, time-major (undefined if no image decoder)
  Tensor<T> proprio;               // [h*B, Dp, W]
  Tensor<T> haptic;                // [h*B, Dh, W]
};

/// Replaces or drops an expert before fusion; returning nullopt removes it
/// from the product (a zero-precision factor).
template <typename T>
using ExpertHook =
    std::function<std::optional<DiagGaussian<T>>(const std::string& modality, std::size_t step,
                                                 const DiagGaussian<T>& expert)>;

/// The sequential multimodal latent variable model: per-modality experts,
/// transition prior, product-of-experts posterior, and decoders.
template <typename T>
class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const Modalities& modalities() const { return mods_; }
  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }

  /// Causal filtering pass. `noise` is [T*B, K] standard-normal draws, one
  /// row per step and sequence; zero noise feeds posterior means forward.
  PosteriorTrace<T> filter(const SequenceBatch<T>& batch, const Tensor<T>& noise,
                           const ExpertHook<T>& hook = {}) const;

  /// Single-sample sequential ELBO under frozen `noise`.
  ElboResult<T> elbo(const SequenceBatch<T>& batch, const Tensor<T>& noise) const;

  /// Log-likelihood of every frame of `batch` under decoders applied to `z`
  /// ([T*B, K] time-major), summed over modalities; returns [T*B].
  Tensor<T> reconstruction_log_likelihood(const SequenceBatch<T>& batch, const Tensor<T>& z,
                                          std::map<std::string, double>* per_modality = nullptr) const;

  /// Filters the context batch with zero noise, then rolls the transition
  /// forward with prior means. `controls` is [h*B, U], time-major, holding
  /// u_k .. u_{k+h-1} in 1-based step numbering.
  Prediction<T> predict(const SequenceBatch<T>& context, const Tensor<T>& controls,
                        std::size_t horizon) const;

  /// Decodes latents [N, K] with every decoder the variant has.
  Prediction<T> decode(const Tensor<T>& z) const;

  /// Importance-sampling estimate of log p(X | u) with the filtering
  /// posterior as proposal, for each sequence of `batch` separately.
  std::vector<double> log_likelihood_estimate(const SequenceBatch<T>& batch, std::size_t samples,
                                              std::mt19937_64& rng) const;
  /// The per-sample log importance weights behind log_likelihood_estimate,
  /// one vector of `samples` entries per sequence.
  std::vector<std::vector<double>> log_importance_weights(const SequenceBatch<T>& batch, std::size_t samples,
                                                         std::mt19937_64& rng) const;

 private:
  std::map<std::string, DiagGaussian<T>> encode_experts(const SequenceBatch<T>& batch) const;

  ModelConfig config_;
  Modalities mods_;
  ParameterStore<T> store_;
  ImageEncoder<T> image_encoder_;
  ImageDecoder<T> image_decoder_;
  LowDimEncoder<T> proprio_encoder_, haptic_encoder_;
  LowDimDecoder<T> proprio_decoder_, haptic_decoder_;
  std::map<std::string, GaussianHead<T>> heads_;  // per modality, or "fusion" for concat
  TransitionGRU<T> transition_;
};

/// log(mean(exp(x))) without overflow.
double log_mean_exp(const std::vector<double>& x);

/// Standard-normal noise [rows, cols] from `rng`.
template <typename T>
Tensor<T> standard_normal(std::size_t rows, std::size_t cols, std::mt19937_64& rng);

// Training ------------------------------------------------------------------

struct TrainOptions {
  std::optional<std::size_t> epochs;  // overrides config.epochs
  std::function<void(std::size_t step, double loss)> on_step;
};

struct TrainResult {
  std::vector<double> loss_trace;  // one entry per Adam step
  std::size_t steps = 0;
  bool diverged = false;
  std::string message;
};

/// Minimizes the negative batch-mean ELBO over `indices` with Adam; the
/// transition group is clipped to config.clip_norm. On a non-finite loss the
/// parameters are restored to the last good step and diverged is set.
template <typename T>
TrainResult train(Model<T>& model, AdamState<T>& adam, const sim::Dataset& data,
                  const std::vector<std::size_t>& indices, const TrainOptions& options = {});

/// Name prefix of the clipped parameter group.
inline constexpr const char* kTransitionGroup = "transition.";

// Checkpoints ---------------------------------------------------------------

struct CheckpointInfo {
  ModelConfig config;
  std::uint64_t training_step = 0;
};

/// Directory with manifest.json (config, leaf names and shapes, dtype, step)
/// and params.bin (leaf values in manifest order, little-endian).
template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& dir, std::uint64_t training_step,
                     bool overwrite = false);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);

/// Loads values into a model built from the checkpoint's config; names,
/// shapes and dtype must match exactly.
template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& dir, CheckpointInfo* info = nullptr);

}  // namespace mmdyn
