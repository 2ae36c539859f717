#include "mmdyn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace mmdyn::eval {

using nlohmann::json;

namespace {

void require_same(std::span<const float> a, std::span<const float> b, const char* what) {
  if (a.size() != b.size() || a.empty()) {
    throw ShapeError(std::string(what) + ": image sizes " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()) + " differ");
  }
}

double mse(std::span<const float> a, std::span<const float> b) {
  return squared_error(a, b) / static_cast<double>(a.size());
}

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

double squared_error(std::span<const float> a, std::span<const float> b) {
  require_same(a, b, "squared_error");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

double pixel_rmse(std::span<const float> a, std::span<const float> b) {
  require_same(a, b, "pixel_rmse");
  return std::sqrt(mse(a, b));
}

double psnr(std::span<const float> a, std::span<const float> b) {
  require_same(a, b, "psnr");
  const double m = mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

SsimOptions default_ssim_options(std::size_t height, std::size_t width) {
  SsimOptions o;
  o.window = std::max(height, width) <= 32 ? 7 : 11;
  return o;
}

double ssim(std::span<const float> a, std::span<const float> b, std::size_t height, std::size_t width,
            const SsimOptions& o) {
  require_same(a, b, "ssim");
  if (a.size() != height * width) throw ShapeError("ssim: image size does not match " + std::to_string(height) + "x" + std::to_string(width));
  const std::size_t w = o.window;
  if (w == 0 || w > height || w > width) throw ShapeError("ssim: window larger than the image");
  std::vector<double> g(w);
  const double c = 0.5 * static_cast<double>(w - 1);
  double gsum = 0.0;
  for (std::size_t i = 0; i < w; ++i) {
    const double d = static_cast<double>(i) - c;
    g[i] = std::exp(-d * d / (2.0 * o.sigma * o.sigma));
    gsum += g[i];
  }
  for (auto& v : g) v /= gsum;
  const double c1 = o.k1 * o.k1, c2 = o.k2 * o.k2;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i + w <= height; ++i) {
    for (std::size_t j = 0; j + w <= width; ++j) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (std::size_t p = 0; p < w; ++p) {
        for (std::size_t q = 0; q < w; ++q) {
          const double wt = g[p] * g[q];
          const double x = a[(i + p) * width + j + q], y = b[(i + p) * width + j + q];
          mx += wt * x;
          my += wt * y;
          sxx += wt * x * x;
          syy += wt * y * y;
          sxy += wt * x * y;
        }
      }
      const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// Rollout evaluation ------------------------------------------------------------

void aggregate(MetricReport& r) {
  const std::size_t h = r.horizon;
  auto reset = [h](std::vector<double>& v) { v.assign(h, 0.0); };
  for (auto* v : {&r.se_mean, &r.se_std, &r.rmse_mean, &r.rmse_std, &r.ssim_mean, &r.ssim_std, &r.psnr_mean, &r.psnr_std}) reset(*v);
  r.psnr_infinite.assign(h, 0);
  std::vector<std::size_t> n(h, 0), n_psnr(h, 0);
  for (const auto& row : r.rows) {
    if (row.step == 0 || row.step > h) throw std::out_of_range("aggregate: row step outside the horizon");
    const std::size_t s = row.step - 1;
    ++n[s];
    r.se_mean[s] += row.se;
    r.rmse_mean[s] += row.rmse;
    r.ssim_mean[s] += row.ssim;
    if (std::isinf(row.psnr)) {
      ++r.psnr_infinite[s];
    } else {
      ++n_psnr[s];
      r.psnr_mean[s] += row.psnr;
    }
  }
  for (std::size_t s = 0; s < h; ++s) {
    const double k = static_cast<double>(std::max<std::size_t>(n[s], 1));
    r.se_mean[s] /= k;
    r.rmse_mean[s] /= k;
    r.ssim_mean[s] /= k;
    r.psnr_mean[s] = n_psnr[s] ? r.psnr_mean[s] / static_cast<double>(n_psnr[s]) : std::numeric_limits<double>::quiet_NaN();
  }
  for (const auto& row : r.rows) {
    const std::size_t s = row.step - 1;
    r.se_std[s] += std::pow(row.se - r.se_mean[s], 2);
    r.rmse_std[s] += std::pow(row.rmse - r.rmse_mean[s], 2);
    r.ssim_std[s] += std::pow(row.ssim - r.ssim_mean[s], 2);
    if (!std::isinf(row.psnr)) r.psnr_std[s] += std::pow(row.psnr - r.psnr_mean[s], 2);
  }
  for (std::size_t s = 0; s < h; ++s) {
    const double k = static_cast<double>(std::max<std::size_t>(n[s], 1));
    r.se_std[s] = std::sqrt(r.se_std[s] / k);
    r.rmse_std[s] = std::sqrt(r.rmse_std[s] / k);
    r.ssim_std[s] = std::sqrt(r.ssim_std[s] / k);
    r.psnr_std[s] = n_psnr[s] ? std::sqrt(r.psnr_std[s] / static_cast<double>(n_psnr[s])) : std::numeric_limits<double>::quiet_NaN();
  }
  double se = 0, rm = 0, ss = 0, ps = 0;
  std::size_t finite = 0;
  for (const auto& row : r.rows) {
    se += row.se;
    rm += row.rmse;
    ss += row.ssim;
    if (!std::isinf(row.psnr)) {
      ps += row.psnr;
      ++finite;
    }
  }
  const double total = static_cast<double>(std::max<std::size_t>(r.rows.size(), 1));
  r.se_avg = se / total;
  r.rmse_avg = rm / total;
  r.ssim_avg = ss / total;
  r.psnr_avg = finite ? ps / static_cast<double>(finite) : std::numeric_limits<double>::quiet_NaN();
}

namespace {

constexpr std::size_t kChunk = 32;

void check_protocol(const sim::Dataset& data, const std::vector<std::size_t>& split, std::size_t k, std::size_t h) {
  if (split.empty()) throw std::invalid_argument("evaluation split is empty");
  if (k == 0) throw std::invalid_argument("context length k must be >= 1");
  if (h == 0) throw std::invalid_argument("horizon h must be >= 1");
  if (k + h > data.manifest.steps) {
    throw std::invalid_argument("k + h = " + std::to_string(k + h) + " exceeds trajectory length " +
                                std::to_string(data.manifest.steps));
  }
}

// Calls fn(chunk indices, batch over steps [0, k + h)) for consecutive chunks.
template <typename T, typename Fn>
void for_chunks(const sim::Dataset& data, const std::vector<std::size_t>& split, std::size_t steps, Fn&& fn) {
  for (std::size_t begin = 0; begin < split.size(); begin += kChunk) {
    const std::size_t end = std::min(split.size(), begin + kChunk);
    std::vector<std::size_t> chunk(split.begin() + static_cast<std::ptrdiff_t>(begin),
                                   split.begin() + static_cast<std::ptrdiff_t>(end));
    fn(chunk, make_batch<T>(data, chunk, steps));
  }
}

template <typename T>
Prediction<T> rollout(const Model<T>& model, const SequenceBatch<T>& batch, std::size_t k, std::size_t h) {
  const std::size_t B = batch.batch;
  auto controls = ops::slice(batch.controls, 0, (k - 1) * B, (k + h - 1) * B);
  return model.predict(batch.steps_range(0, k), controls, h);
}

}  // namespace

template <typename T>
MetricReport eval_prediction(const Model<T>& model, const sim::Dataset& data, const std::vector<std::size_t>& split,
                             std::size_t k, std::size_t h) {
  check_protocol(data, split, k, h);
  if (!model.modalities().image) throw std::invalid_argument("eval_prediction: the variant has no image decoder");
  const auto& m = data.manifest;
  const auto opts = default_ssim_options(m.image_height, m.image_width);
  const std::size_t P = data.image_size();
  MetricReport r;
  r.variant = model.config().variant;
  r.context = k;
  r.horizon = h;
  r.seed = model.config().seed;
  r.dataset_id = "seed=" + std::to_string(m.seed) + ",n=" + std::to_string(m.num_trajectories);
  for_chunks<T>(data, split, k + h, [&](const std::vector<std::size_t>& chunk, const SequenceBatch<T>& batch) {
    const auto pred = rollout(model, batch, k, h);
    const std::size_t B = chunk.size();
    std::vector<float> frame(P);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t j = 0; j < h; ++j) {
        auto src = pred.images.values().subspan((j * B + b) * P, P);
        std::transform(src.begin(), src.end(), frame.begin(), [](T v) { return static_cast<float>(v); });
        std::span<const float> truth(data.image(chunk[b], k + j), P);
        r.rows.push_back({chunk[b], j + 1, squared_error(frame, truth), pixel_rmse(frame, truth),
                          ssim(frame, truth, m.image_height, m.image_width, opts), psnr(frame, truth)});
      }
    }
  });
  aggregate(r);
  return r;
}

json to_json(const MetricReport& r) {
  auto arr = [](const std::vector<double>& v) {
    json a = json::array();
    for (double x : v) a.push_back(number_or_null(x));
    return a;
  };
  return json{{"variant", r.variant},
              {"context", r.context},
              {"horizon", r.horizon},
              {"seed", r.seed},
              {"dataset_id", r.dataset_id},
              {"frames", r.rows.size()},
              {"per_step",
               {{"se_mean", arr(r.se_mean)},
                {"se_std", arr(r.se_std)},
                {"rmse_mean", arr(r.rmse_mean)},
                {"rmse_std", arr(r.rmse_std)},
                {"ssim_mean", arr(r.ssim_mean)},
                {"ssim_std", arr(r.ssim_std)},
                {"psnr_mean", arr(r.psnr_mean)},
                {"psnr_std", arr(r.psnr_std)},
                {"psnr_infinite", r.psnr_infinite}}},
              {"average",
               {{"se", number_or_null(r.se_avg)},
                {"rmse", number_or_null(r.rmse_avg)},
                {"ssim", number_or_null(r.ssim_avg)},
                {"psnr", number_or_null(r.psnr_avg)}}}};
}

std::string rows_csv(const MetricReport& r) {
  std::ostringstream out;
  out << "trajectory,step,se,rmse,ssim,psnr\n";
  for (const auto& row : r.rows) {
    out << row.trajectory << ',' << row.step << ',' << fmt(row.se) << ',' << fmt(row.rmse) << ',' << fmt(row.ssim)
        << ',' << fmt(row.psnr) << '\n';
  }
  return out.str();
}

// Regression ------------------------------------------------------------------

LinearFit fit_ols(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  const auto n = x.rows(), f = x.cols();
  if (y.rows() != n) throw ShapeError("fit_ols: feature and target row counts differ");
  if (n < f + 1) {
    throw std::invalid_argument("fit_ols: need at least " + std::to_string(f + 1) + " samples, got " + std::to_string(n));
  }
  if (!x.allFinite() || !y.allFinite()) throw NumericError("fit_ols: non-finite features or targets");
  Eigen::MatrixXd design(n, f + 1);
  design.leftCols(f) = x;
  design.col(f).setOnes();
  Eigen::MatrixXd gram = design.transpose() * design;
  Eigen::MatrixXd rhs = design.transpose() * y;
  LinearFit fit;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  Eigen::MatrixXd beta;
  if (qr.rank() < f + 1) {
    fit.ridge = true;
    gram.diagonal().array() += kRidgeLambda;
    beta = gram.ldlt().solve(rhs);
  } else {
    beta = gram.ldlt().solve(rhs);
  }
  fit.weights = beta.topRows(f);
  fit.intercept = beta.row(f);
  return fit;
}

Eigen::MatrixXd predict(const LinearFit& fit, const Eigen::MatrixXd& x) {
  if (x.cols() != fit.weights.rows()) throw ShapeError("predict: feature dimension mismatch");
  return (x * fit.weights).rowwise() + fit.intercept;
}

namespace {

Eigen::RowVectorXd column_scale(const Eigen::MatrixXd& m, const Eigen::RowVectorXd& mean) {
  Eigen::RowVectorXd s = ((m.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(m.rows())).sqrt();
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (!(s[i] > 1e-12)) s[i] = 1.0;
  }
  return s;
}

struct AdamMat {
  Eigen::MatrixXd m, v;
  void init(Eigen::Index r, Eigen::Index c) {
    m = Eigen::MatrixXd::Zero(r, c);
    v = Eigen::MatrixXd::Zero(r, c);
  }
  template <typename P, typename G>
  void step(P& p, const G& g, double lr, std::size_t t) {
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g.array().square().matrix();
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(t));
    p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + 1e-8);
  }
};

}  // namespace

MlpRegressor MlpRegressor::fit(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const MlpOptions& o) {
  const auto n = x.rows();
  if (y.rows() != n) throw ShapeError("fit_mlp_regressor: feature and target row counts differ");
  if (n < x.cols() + 1 || n < 5) throw std::invalid_argument("fit_mlp_regressor: too few samples");
  if (!x.allFinite() || !y.allFinite()) throw NumericError("fit_mlp_regressor: non-finite features or targets");
  MlpRegressor r;
  std::mt19937_64 rng(o.seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::llround(o.validation_fraction * static_cast<double>(n))));
  const auto n_tr = n - n_val;
  Eigen::MatrixXd xt(n_tr, x.cols()), yt(n_tr, y.cols()), xv(n_val, x.cols()), yv(n_val, y.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto src = order[static_cast<std::size_t>(i)];
    if (i < n_tr) {
      xt.row(i) = x.row(src);
      yt.row(i) = y.row(src);
    } else {
      xv.row(i - n_tr) = x.row(src);
      yv.row(i - n_tr) = y.row(src);
    }
  }
  r.val_rows_.assign(order.begin() + n_tr, order.end());
  r.x_mean_ = xt.colwise().mean();
  r.x_scale_ = column_scale(xt, r.x_mean_);
  r.y_mean_ = yt.colwise().mean();
  r.y_scale_ = column_scale(yt, r.y_mean_);
  const Eigen::MatrixXd xs = (xt.rowwise() - r.x_mean_).array().rowwise() / r.x_scale_.array();
  const Eigen::MatrixXd ys = (yt.rowwise() - r.y_mean_).array().rowwise() / r.y_scale_.array();

  const auto in = x.cols(), out = y.cols(), hid = static_cast<Eigen::Index>(o.hidden);
  std::uniform_real_distribution<double> u1(-1.0 / std::sqrt(double(in)), 1.0 / std::sqrt(double(in)));
  std::uniform_real_distribution<double> u2(-1.0 / std::sqrt(double(hid)), 1.0 / std::sqrt(double(hid)));
  r.w1_ = Eigen::MatrixXd::NullaryExpr(in, hid, [&] { return u1(rng); });
  r.w2_ = Eigen::MatrixXd::NullaryExpr(hid, out, [&] { return u2(rng); });
  r.b1_ = Eigen::RowVectorXd::Zero(hid);
  r.b2_ = Eigen::RowVectorXd::Zero(out);
  AdamMat aw1, aw2, ab1, ab2;
  aw1.init(in, hid);
  aw2.init(hid, out);
  ab1.init(1, hid);
  ab2.init(1, out);

  auto val_rmse = [&](const MlpRegressor& m) {
    const Eigen::MatrixXd e = m.predict(xv) - yv;
    return std::sqrt(e.array().square().sum() / static_cast<double>(e.rows()));
  };
  MlpRegressor best = r;
  best.best_val_rmse_ = val_rmse(r);
  std::size_t since_best = 0;
  const double inv_n = 1.0 / static_cast<double>(n_tr);
  for (std::size_t epoch = 1; epoch <= o.max_epochs; ++epoch) {
    const Eigen::MatrixXd pre = (xs * r.w1_).rowwise() + r.b1_;
    const Eigen::MatrixXd act = pre.cwiseMax(0.0);
    const Eigen::MatrixXd outp = (act * r.w2_).rowwise() + r.b2_;
    const Eigen::MatrixXd d_out = (outp - ys) * (2.0 * inv_n);  // gradient of mean squared error
    const Eigen::MatrixXd g_w2 = act.transpose() * d_out;
    const Eigen::RowVectorXd g_b2 = d_out.colwise().sum();
    const Eigen::MatrixXd d_act = (d_out * r.w2_.transpose()).array() * (pre.array() > 0.0).cast<double>();
    const Eigen::MatrixXd g_w1 = xs.transpose() * d_act;
    const Eigen::RowVectorXd g_b1 = d_act.colwise().sum();
    aw1.step(r.w1_, g_w1, o.learning_rate, epoch);
    aw2.step(r.w2_, g_w2, o.learning_rate, epoch);
    ab1.step(r.b1_, g_b1, o.learning_rate, epoch);
    ab2.step(r.b2_, g_b2, o.learning_rate, epoch);
    r.epochs_ = epoch;
    const double v = val_rmse(r);
    if (!std::isfinite(v)) {
      best.diverged_ = true;
      break;
    }
    if (v < best.best_val_rmse_) {
      best = r;
      best.best_val_rmse_ = v;
      since_best = 0;
    } else if (++since_best >= o.patience) {
      break;
    }
  }
  best.epochs_ = r.epochs_;
  return best;
}

Eigen::MatrixXd MlpRegressor::predict(const Eigen::MatrixXd& x) const {
  if (x.cols() != w1_.rows()) throw ShapeError("MlpRegressor::predict: feature dimension mismatch");
  const Eigen::MatrixXd xs = (x.rowwise() - x_mean_).array().rowwise() / x_scale_.array();
  const Eigen::MatrixXd act = ((xs * w1_).rowwise() + b1_).cwiseMax(0.0);
  const Eigen::MatrixXd ys = (act * w2_).rowwise() + b2_;
  return (ys.array().rowwise() * y_scale_.array()).matrix().rowwise() + y_mean_;
}

RegressorKind parse_regressor(const std::string& name) {
  if (name == "OLS") return RegressorKind::Ols;
  if (name == "MLP-50" || name == "MLP") return RegressorKind::Mlp;
  throw ConfigError("unknown regressor \"" + name + "\" (expected OLS or MLP-50)");
}

std::string to_string(RegressorKind kind) { return kind == RegressorKind::Ols ? "OLS" : "MLP-50"; }

LatentMode parse_mode(const std::string& name) {
  if (name == "filtered") return LatentMode::Filtered;
  if (name == "predicted") return LatentMode::Predicted;
  throw ConfigError("unknown latent mode \"" + name + "\" (expected filtered or predicted)");
}

std::string to_string(LatentMode mode) { return mode == LatentMode::Filtered ? "filtered" : "predicted"; }

ErrorStats error_stats(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth) {
  if (pred.rows() != truth.rows() || pred.cols() != 2 || truth.cols() != 2 || pred.rows() == 0) {
    throw ShapeError("error_stats: expected matching non-empty [n, 2] matrices");
  }
  const Eigen::MatrixXd e = pred - truth;
  const double n = static_cast<double>(e.rows());
  ErrorStats s;
  s.mean_error = e.colwise().mean().transpose();
  s.mean_abs_error = e.cwiseAbs().colwise().mean().transpose();
  s.mean_translation_error = e.rowwise().norm().mean();
  s.rmse = std::sqrt(e.rowwise().squaredNorm().sum() / n);
  const Eigen::MatrixXd centered = e.rowwise() - s.mean_error.transpose();
  s.covariance = (centered.transpose() * centered) / n;
  s.covariance = 0.5 * (s.covariance + s.covariance.transpose()).eval();
  return s;
}

template <typename T>
Eigen::MatrixXd latent_features(const Model<T>& model, const sim::Dataset& data, const std::vector<std::size_t>& split,
                                std::size_t k, std::size_t h, LatentMode mode) {
  check_protocol(data, split, k, h);
  const std::size_t K = model.config().latent_dim;
  Eigen::MatrixXd features(static_cast<Eigen::Index>(split.size() * h), static_cast<Eigen::Index>(K));
  std::size_t offset = 0;
  for_chunks<T>(data, split, k + h, [&](const std::vector<std::size_t>& chunk, const SequenceBatch<T>& batch) {
    const std::size_t B = chunk.size();
    std::vector<Tensor<T>> per_step;
    if (mode == LatentMode::Predicted) {
      per_step = rollout(model, batch, k, h).latents;
    } else {
      auto trace = model.filter(batch, Tensor<T>::zeros({batch.steps * B, K}));
      for (std::size_t j = 0; j < h; ++j) per_step.push_back(trace.posterior[k + j].mean());
    }
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t j = 0; j < h; ++j) {
        for (std::size_t d = 0; d < K; ++d) {
          features(static_cast<Eigen::Index>((offset + b) * h + j), static_cast<Eigen::Index>(d)) =
              static_cast<double>(per_step[j][b * K + d]);
        }
      }
    }
    offset += B;
  });
  return features;
}

template <typename T>
RegressionReport regress_eval(const Model<T>& model, const sim::Dataset& data, const std::vector<std::size_t>& split,
                              std::size_t k, std::size_t h, const RegressOptions& o) {
  const auto features = latent_features(model, data, split, k, h, o.mode);
  const std::size_t n_traj = split.size();
  Eigen::MatrixXd targets(static_cast<Eigen::Index>(n_traj * h), 2);
  for (std::size_t i = 0; i < n_traj; ++i) {
    for (std::size_t j = 0; j < h; ++j) {
      const float* l = data.label(split[i], k + j);
      targets(static_cast<Eigen::Index>(i * h + j), 0) = l[0];
      targets(static_cast<Eigen::Index>(i * h + j), 1) = l[1];
    }
  }
  std::mt19937_64 rng(o.seed);
  if (o.shuffle_labels) {
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(targets.rows()));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Eigen::MatrixXd shuffled(targets.rows(), 2);
    for (Eigen::Index r = 0; r < targets.rows(); ++r) shuffled.row(r) = targets.row(perm[static_cast<std::size_t>(r)]);
    targets = shuffled;
  }
  // Trajectory-level split so that no trajectory contributes to both sides.
  std::vector<std::size_t> traj_order(n_traj);
  std::iota(traj_order.begin(), traj_order.end(), 0);
  std::shuffle(traj_order.begin(), traj_order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(o.train_fraction * static_cast<double>(n_traj)));
  if (n_train == 0 || n_train >= n_traj) throw std::invalid_argument("regress_eval: split leaves one side empty");
  std::vector<bool> is_train(n_traj, false);
  for (std::size_t i = 0; i < n_train; ++i) is_train[traj_order[i]] = true;

  const auto rows_of = [&](bool train_side) {
    std::vector<Eigen::Index> r;
    for (std::size_t i = 0; i < n_traj; ++i) {
      if (is_train[i] != train_side) continue;
      for (std::size_t j = 0; j < h; ++j) r.push_back(static_cast<Eigen::Index>(i * h + j));
    }
    return r;
  };
  const auto train_rows = rows_of(true), test_rows = rows_of(false);
  auto gather = [](const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& r) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(r.size()), m.cols());
    for (std::size_t i = 0; i < r.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(r[i]);
    return out;
  };
  const Eigen::MatrixXd xtr = gather(features, train_rows), ytr = gather(targets, train_rows);
  const Eigen::MatrixXd xte = gather(features, test_rows), yte = gather(targets, test_rows);

  RegressionReport rep;
  rep.variant = model.config().variant;
  rep.kind = o.kind;
  rep.mode = o.mode;
  rep.context = k;
  rep.horizon = h;
  rep.seed = o.seed;
  rep.train_pairs = train_rows.size();
  rep.test_pairs = test_rows.size();
  rep.shuffled_labels = o.shuffle_labels;
  Eigen::MatrixXd pred_all;
  if (o.kind == RegressorKind::Ols) {
    const auto fit = fit_ols(xtr, ytr);
    rep.ridge = fit.ridge;
    pred_all = predict(fit, features);
  } else {
    auto mlp_opts = o.mlp;
    mlp_opts.seed = o.seed;
    pred_all = MlpRegressor::fit(xtr, ytr, mlp_opts).predict(features);
  }
  rep.errors = error_stats(gather(pred_all, test_rows), yte);
  for (std::size_t i = 0; i < n_traj; ++i) {
    for (std::size_t j = 0; j < h; ++j) {
      const auto r = static_cast<Eigen::Index>(i * h + j);
      rep.rows.push_back({split[i], k + j + 1, !is_train[i], targets(r, 0), targets(r, 1), pred_all(r, 0), pred_all(r, 1)});
    }
  }
  return rep;
}

json to_json(const RegressionReport& r) {
  const auto& e = r.errors;
  return json{{"variant", r.variant},
              {"regressor", to_string(r.kind)},
              {"mode", to_string(r.mode)},
              {"context", r.context},
              {"horizon", r.horizon},
              {"seed", r.seed},
              {"train_pairs", r.train_pairs},
              {"test_pairs", r.test_pairs},
              {"ridge_fallback", r.ridge},
              {"shuffled_labels", r.shuffled_labels},
              {"mean_error", {e.mean_error.x(), e.mean_error.y()}},
              {"mean_abs_error", {e.mean_abs_error.x(), e.mean_abs_error.y()}},
              {"mean_translation_error", e.mean_translation_error},
              {"rmse", e.rmse},
              {"error_covariance",
               {{e.covariance(0, 0), e.covariance(0, 1)}, {e.covariance(1, 0), e.covariance(1, 1)}}}};
}

std::string rows_csv(const RegressionReport& r) {
  std::ostringstream out;
  out << "trajectory,step,split,x,y,pred_x,pred_y\n";
  for (const auto& row : r.rows) {
    out << row.trajectory << ',' << row.step << ',' << (row.test ? "test" : "train") << ',' << fmt(row.x) << ','
        << fmt(row.y) << ',' << fmt(row.pred_x) << ',' << fmt(row.pred_y) << '\n';
  }
  return out.str();
}

std::string svg_line_chart(const std::string& title, const std::string& y_label,
                           const std::map<std::string, std::vector<double>>& series) {
  const double W = 640, H = 400, left = 70, right = 150, top = 40, bottom = 50;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t n = 0;
  for (const auto& [name, v] : series) {
    n = std::max(n, v.size());
    for (double x : v) {
      if (std::isfinite(x)) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
    }
  }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi - lo < 1e-12) hi = lo + 1.0;
  const double pw = W - left - right, ph = H - top - bottom;
  auto px = [&](std::size_t i) { return left + (n > 1 ? pw * static_cast<double>(i) / static_cast<double>(n - 1) : pw / 2); };
  auto py = [&](double v) { return top + ph * (1.0 - (v - lo) / (hi - lo)); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" << title << "</text>\n"
    << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph << "\" stroke=\"black\"/>\n"
    << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">prediction step</text>\n"
    << "<text x=\"16\" y=\"" << top + ph / 2 << "\" transform=\"rotate(-90 16 " << top + ph / 2
    << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << y_label << "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    s << "<text x=\"" << left - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
      << fmt(std::round(v * 1000) / 1000) << "</text>\n";
  }
  std::size_t ci = 0;
  for (const auto& [name, v] : series) {
    const char* color = colors[ci % 6];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (std::isfinite(v[i])) s << px(i) << ',' << py(v[i]) << ' ';
    }
    s << "\"/>\n<text x=\"" << left + pw + 10 << "\" y=\"" << top + 16 * (ci + 1) << "\" fill=\"" << color
      << "\" font-family=\"sans-serif\" font-size=\"12\">" << name << "</text>\n";
    ++ci;
  }
  s << "</svg>\n";
  return s.str();
}

#define MMDYN_INSTANTIATE(T)                                                                                     \
  template MetricReport eval_prediction<T>(const Model<T>&, const sim::Dataset&, const std::vector<std::size_t>&, \
                                           std::size_t, std::size_t);                                            \
  template Eigen::MatrixXd latent_features<T>(const Model<T>&, const sim::Dataset&, const std::vector<std::size_t>&, \
                                              std::size_t, std::size_t, LatentMode);                             \
  template RegressionReport regress_eval<T>(const Model<T>&, const sim::Dataset&, const std::vector<std::size_t>&, \
                                            std::size_t, std::size_t, const RegressOptions&);

MMDYN_INSTANTIATE(float)
MMDYN_INSTANTIATE(double)
#undef MMDYN_INSTANTIATE

}  // namespace mmdyn::eval
