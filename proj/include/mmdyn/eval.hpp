#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mmdyn/model.hpp"

namespace mmdyn::eval {

// Image metrics -----------------------------------------------------------------

/// Sum of squared pixel differences.
double squared_error(std::span<const float> predicted, std::span<const float> truth);
/// Root of the per-image mean squared error.
double pixel_rmse(std::span<const float> predicted, std::span<const float> truth);
/// 10 log10(1 / MSE) for intensities in [0, 1]; +infinity when MSE is 0.
double psnr(std::span<const float> predicted, std::span<const float> truth);

struct SsimOptions {
  std::size_t window = 7;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Window 7 up to 32 pixels on a side, 11 above.
SsimOptions default_ssim_options(std::size_t height, std::size_t width);

/// Mean SSIM over all fully contained Gaussian windows (dynamic range 1).
double ssim(std::span<const float> predicted, std::span<const float> truth, std::size_t height,
            std::size_t width, const SsimOptions& options);

// Rollout evaluation --------------------------------------------------------------

struct FrameRow {
  std::size_t trajectory = 0;
  std::size_t step = 0;  // 1-based prediction step
  double se = 0.0;
  double rmse = 0.0;
  double ssim = 0.0;
  double psnr = 0.0;  // may be +infinity
};

struct MetricReport {
  std::string variant;
  std::size_t context = 0;
  std::size_t horizon = 0;
  std::uint64_t seed = 0;
  std::string dataset_id;
  // Per prediction step; standard deviations are population (ddof 0).
  std::vector<double> se_mean, se_std, rmse_mean, rmse_std, ssim_mean, ssim_std, psnr_mean, psnr_std;
  std::vector<std::size_t> psnr_infinite;  // perfect frames, excluded from PSNR means
  // Averages over every scored frame of the horizon.
  double se_avg = 0.0, rmse_avg = 0.0, ssim_avg = 0.0, psnr_avg = 0.0;
  std::vector<FrameRow> rows;
};

/// Aggregates from rows alone (what eval_prediction reports).
void aggregate(MetricReport& report);

/// For each trajectory in `split`: filter the first k frames, roll h steps
/// ahead with the known controls, and score the decoded images.
template <typename T>
MetricReport eval_prediction(const Model<T>& model, const sim::Dataset& data, const std::vector<std::size_t>& split,
                             std::size_t k, std::size_t h);

nlohmann::json to_json(const MetricReport& r);
/// Columns: trajectory,step,se,rmse,ssim,psnr (psnr "inf" for perfect frames).
std::string rows_csv(const MetricReport& r);

// Regression ------------------------------------------------------------------

struct LinearFit {
  Eigen::MatrixXd weights;    // [features, outputs]
  Eigen::RowVectorXd intercept;
  bool ridge = false;         // rank-deficient design, solved with the ridge fallback
};

inline constexpr double kRidgeLambda = 1e-8;

/// Least squares with intercept via the normal equations; falls back to a
/// ridge of kRidgeLambda when the design is rank deficient.
LinearFit fit_ols(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);
Eigen::MatrixXd predict(const LinearFit& fit, const Eigen::MatrixXd& x);

struct MlpOptions {
  std::size_t hidden = 50;
  double learning_rate = 1e-2;
  std::size_t max_epochs = 2000;
  std::size_t patience = 100;       // epochs without validation improvement
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;
};

/// Single hidden layer ReLU network trained full-batch with Adam on
/// standardized inputs and targets; keeps the best-validation weights.
class MlpRegressor {
 public:
  static MlpRegressor fit(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const MlpOptions& options = {});
  Eigen::MatrixXd predict(const Eigen::MatrixXd& x) const;
  double best_validation_rmse() const { return best_val_rmse_; }
  std::size_t epochs_run() const { return epochs_; }
  bool diverged() const { return diverged_; }
  // Rows of the fitting data held out for early stopping.
  const std::vector<Eigen::Index>& validation_rows() const { return val_rows_; }

 private:
  Eigen::MatrixXd w1_, w2_;
  Eigen::RowVectorXd b1_, b2_;
  Eigen::RowVectorXd x_mean_, x_scale_, y_mean_, y_scale_;
  double best_val_rmse_ = 0.0;
  std::size_t epochs_ = 0;
  bool diverged_ = false;
  std::vector<Eigen::Index> val_rows_;
};

enum class RegressorKind { Ols, Mlp };
enum class LatentMode { Filtered, Predicted };

RegressorKind parse_regressor(const std::string& name);  // "OLS" or "MLP-50"
std::string to_string(RegressorKind kind);
LatentMode parse_mode(const std::string& name);          // "filtered" or "predicted"
std::string to_string(LatentMode mode);

struct ErrorStats {
  Eigen::Vector2d mean_error = Eigen::Vector2d::Zero();      // signed, ellipse center
  Eigen::Vector2d mean_abs_error = Eigen::Vector2d::Zero();  // per axis
  double mean_translation_error = 0.0;                       // mean Euclidean error
  double rmse = 0.0;                                         // sqrt(mean squared Euclidean error)
  Eigen::Matrix2d covariance = Eigen::Matrix2d::Zero();      // population covariance of errors
};

ErrorStats error_stats(const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& truth);

struct PairRow {
  std::size_t trajectory = 0;
  std::size_t step = 0;  // 1-based target step within the trajectory
  bool test = false;
  double x = 0.0, y = 0.0, pred_x = 0.0, pred_y = 0.0;
};

struct RegressionReport {
  std::string variant;
  RegressorKind kind = RegressorKind::Ols;
  LatentMode mode = LatentMode::Predicted;
  std::size_t context = 0;
  std::size_t horizon = 0;
  std::uint64_t seed = 0;
  std::size_t train_pairs = 0;
  std::size_t test_pairs = 0;
  bool ridge = false;
  bool shuffled_labels = false;
  ErrorStats errors;
  std::vector<PairRow> rows;
};

struct RegressOptions {
  RegressorKind kind = RegressorKind::Ols;
  LatentMode mode = LatentMode::Predicted;
  double train_fraction = 0.8;  // trajectory-level split of the evaluated set
  std::uint64_t seed = 0;
  bool shuffle_labels = false;  // null-model control
  MlpOptions mlp;
};

/// Latent features for target steps k+1..k+h of each trajectory: rolled-out
/// prior means (predicted) or filtering posterior means at the same steps
/// (filtered). Returns [trajectories * h, K] in trajectory-major order.
template <typename T>
Eigen::MatrixXd latent_features(const Model<T>& model, const sim::Dataset& data, const std::vector<std::size_t>& split,
                                std::size_t k, std::size_t h, LatentMode mode);

/// Fits a regressor from frozen latents to object (x, y) on a trajectory-level
/// split of `split`, and reports errors on the held-out pairs.
template <typename T>
RegressionReport regress_eval(const Model<T>& model, const sim::Dataset& data, const std::vector<std::size_t>& split,
                              std::size_t k, std::size_t h, const RegressOptions& options);

nlohmann::json to_json(const RegressionReport& r);
/// Columns: trajectory,step,split,x,y,pred_x,pred_y.
std::string rows_csv(const RegressionReport& r);

/// Minimal SVG line chart (one polyline per series over steps 1..n).
std::string svg_line_chart(const std::string& title, const std::string& y_label,
                           const std::map<std::string, std::vector<double>>& series);

}  // namespace mmdyn::eval
