// mmdyn: data generation, training, evaluation and validation checks.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmdyn/checks.hpp"
#include "mmdyn/eval.hpp"
#include "mmdyn/io.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mmdyn;
using cli::RunConfig;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

struct Common {
  std::string config_path;
  std::string profile = "desk";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::string out;
  bool overwrite = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "RunConfig JSON file");
  app->add_option("--profile", c.profile, "Size preset")->check(CLI::IsMember({"desk", "paper"}));
  app->add_option("--seed", c.seed, "Seed for every random component");
  app->add_option("--out", c.out, "Output directory");
  app->add_flag("--overwrite", c.overwrite, "Replace an existing output directory");
}

RunConfig resolve(const Common& c) {
  RunConfig r = cli::profile_config(c.profile);
  if (!c.config_path.empty()) r = cli::load_run_config(c.config_path, r);
  if (c.seed) r.seed = *c.seed;
  if (c.variant) r.model.variant = *c.variant;
  r.resolve();
  return r;
}

void write_resolved(const RunConfig& r, const fs::path& dir) {
  io::write_text(dir / "resolved_config.json", to_json(r).dump(2) + "\n");
}

std::string absolute_path(const fs::path& p) { return fs::absolute(p).lexically_normal().string(); }

std::vector<std::size_t> split_of(const sim::Dataset& d, const RunConfig& r) {
  return r.eval.split == "train" ? d.manifest.train_indices : d.manifest.eval_indices;
}

int gen_data(const Common& c, std::optional<std::size_t> trajectories) {
  RunConfig r = resolve(c);
  if (trajectories) r.trajectories = *trajectories;
  const fs::path out = c.out.empty() ? fs::path(r.io.dataset) : fs::path(c.out);
  r.io.dataset = absolute_path(out);
  const auto data = sim::generate_dataset(r.sim, r.trajectories);
  sim::save_dataset(data, out, c.overwrite);
  write_resolved(r, out);
  const auto& m = data.manifest;
  std::printf("wrote %s: %zu trajectories, T=%zu, %zux%zu images, W=%zu, train %zu / eval %zu, contact fraction %.3f\n",
              out.string().c_str(), m.num_trajectories, m.steps, m.image_height, m.image_width, m.window,
              m.train_indices.size(), m.eval_indices.size(), m.contact_fraction);
  return 0;
}

template <typename T>
int train_typed(RunConfig& r, const sim::Dataset& data, const fs::path& out, bool overwrite) {
  Model<T> model(r.model);
  AdamState<T> adam;
  const auto t0 = std::chrono::steady_clock::now();
  TrainOptions opts;
  const std::size_t per_epoch = data.manifest.train_indices.size() / r.model.batch_size;
  opts.on_step = [&](std::size_t step, double loss) {
    if (step % per_epoch == 0) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "epoch %zu  step %zu  loss %.3f  (%.0f s)\n", step / per_epoch, step, loss, s);
    }
  };
  const auto result = train(model, adam, data, data.manifest.train_indices, opts);
  save_checkpoint(model, out, result.steps, overwrite);
  std::ostringstream trace;
  trace << "step,epoch,loss\n";
  for (std::size_t i = 0; i < result.loss_trace.size(); ++i) {
    trace << i + 1 << ',' << i / per_epoch + 1 << ',' << result.loss_trace[i] << '\n';
  }
  io::write_text(out / "loss_trace.csv", trace.str());
  write_resolved(r, out);
  if (result.diverged) {
    std::fprintf(stderr, "training diverged: %s (last good parameters saved to %s)\n", result.message.c_str(),
                 out.string().c_str());
    return kRuntime;
  }
  std::printf("wrote %s: %s, %zu steps, final loss %.3f\n", out.string().c_str(), r.model.variant.c_str(),
              result.steps, result.loss_trace.empty() ? 0.0 : result.loss_trace.back());
  return 0;
}

int train_cmd(const Common& c, const std::string& data_path, std::optional<std::size_t> epochs) {
  RunConfig r = resolve(c);
  if (!data_path.empty()) r.io.dataset = data_path;
  if (epochs) r.model.epochs = *epochs;
  const fs::path out = c.out.empty() ? fs::path(r.io.checkpoint) : fs::path(c.out);
  r.io.dataset = absolute_path(r.io.dataset);
  r.io.checkpoint = absolute_path(out);
  if (fs::exists(out) && !c.overwrite) throw std::runtime_error(out.string() + " exists; pass --overwrite to replace it");
  const auto data = sim::load_dataset(r.io.dataset);
  r.model.adopt_shapes(data.manifest);
  r.model.validate();
  return r.model.float_mode ? train_typed<float>(r, data, out, c.overwrite)
                            : train_typed<double>(r, data, out, c.overwrite);
}

// Runs fn(model) with the checkpoint loaded at its stored precision.
template <typename Fn>
auto with_checkpoint(const fs::path& dir, Fn&& fn) {
  if (!fs::exists(dir / "manifest.json")) throw std::runtime_error("checkpoint not found: " + dir.string());
  const auto info = read_checkpoint_info(dir);
  if (info.config.float_mode) return fn(load_checkpoint<float>(dir));
  return fn(load_checkpoint<double>(dir));
}

std::vector<std::string> unique_labels(const std::vector<std::string>& checkpoints) {
  std::vector<std::string> labels;
  std::map<std::string, int> seen;
  for (const auto& path : checkpoints) {
    const auto info = read_checkpoint_info(path);
    std::string label = info.config.variant + "_s" + std::to_string(info.config.seed);
    if (int n = seen[label]++; n > 0) label += "_" + std::to_string(n);
    labels.push_back(label);
  }
  return labels;
}

int evaluate_cmd(const Common& c, std::vector<std::string> checkpoints, const std::string& data_path,
                 std::optional<std::size_t> k, std::optional<std::size_t> h, bool svg) {
  RunConfig r = resolve(c);
  if (!data_path.empty()) r.io.dataset = data_path;
  if (k) r.eval.context = *k;
  if (h) r.eval.horizon = *h;
  r.resolve();
  if (checkpoints.empty()) checkpoints = r.io.checkpoints.empty() ? std::vector{r.io.checkpoint} : r.io.checkpoints;
  for (auto& ck : checkpoints) ck = absolute_path(ck);
  r.io.checkpoint = checkpoints.front();
  r.io.checkpoints = checkpoints;
  r.io.dataset = absolute_path(r.io.dataset);
  const fs::path out = c.out.empty() ? fs::path(r.io.reports) : fs::path(c.out);
  r.io.reports = absolute_path(out);
  for (const auto& ck : checkpoints) {
    if (!fs::exists(fs::path(ck) / "manifest.json")) throw std::runtime_error("checkpoint not found: " + ck);
  }
  const auto data = sim::load_dataset(r.io.dataset);
  const auto split = split_of(data, r);
  const auto labels = unique_labels(checkpoints);
  io::StagedDirectory staged(out, c.overwrite);
  std::ostringstream table;
  table << "label,variant,seed,checkpoint,rmse,se,ssim,psnr\n";
  std::map<std::string, std::vector<double>> rmse_curves, ssim_curves;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    const auto report = with_checkpoint(checkpoints[i], [&](const auto& model) {
      return eval::eval_prediction(model, data, split, r.eval.context, r.eval.horizon);
    });
    io::write_text(staged.path() / ("metrics_" + labels[i] + ".json"), eval::to_json(report).dump(2) + "\n");
    io::write_text(staged.path() / ("rows_" + labels[i] + ".csv"), eval::rows_csv(report));
    table << labels[i] << ',' << report.variant << ',' << report.seed << ',' << checkpoints[i] << ',' << report.rmse_avg
          << ',' << report.se_avg << ',' << report.ssim_avg << ',' << report.psnr_avg << '\n';
    rmse_curves[labels[i]] = report.rmse_mean;
    ssim_curves[labels[i]] = report.ssim_mean;
    std::printf("%-16s rmse %.4f  se %.3f  ssim %.4f  psnr %.2f\n", labels[i].c_str(), report.rmse_avg,
                report.se_avg, report.ssim_avg, report.psnr_avg);
  }
  io::write_text(staged.path() / "comparison.csv", table.str());
  if (svg) {
    io::write_text(staged.path() / "rmse.svg", eval::svg_line_chart("Prediction error", "pixel RMSE", rmse_curves));
    io::write_text(staged.path() / "ssim.svg", eval::svg_line_chart("Prediction similarity", "SSIM", ssim_curves));
  }
  write_resolved(r, staged.path());
  staged.commit();
  return 0;
}

int regress_cmd(const Common& c, std::vector<std::string> checkpoints, const std::string& data_path,
                std::optional<std::string> regressor, std::optional<std::string> mode, std::optional<std::size_t> k,
                std::optional<std::size_t> h) {
  RunConfig r = resolve(c);
  if (!data_path.empty()) r.io.dataset = data_path;
  if (regressor) r.eval.regressor = *regressor;
  if (mode) r.eval.mode = *mode;
  if (k) r.eval.context = *k;
  if (h) r.eval.horizon = *h;
  r.resolve();
  if (checkpoints.empty()) checkpoints = r.io.checkpoints.empty() ? std::vector{r.io.checkpoint} : r.io.checkpoints;
  for (auto& ck : checkpoints) ck = absolute_path(ck);
  r.io.checkpoint = checkpoints.front();
  r.io.checkpoints = checkpoints;
  r.io.dataset = absolute_path(r.io.dataset);
  const fs::path out = c.out.empty() ? fs::path(r.io.reports) : fs::path(c.out);
  r.io.reports = absolute_path(out);
  for (const auto& ck : checkpoints) {
    if (!fs::exists(fs::path(ck) / "manifest.json")) throw std::runtime_error("checkpoint not found: " + ck);
  }
  const auto data = sim::load_dataset(r.io.dataset);
  const auto split = split_of(data, r);
  const auto labels = unique_labels(checkpoints);
  std::vector<eval::LatentMode> modes;
  if (r.eval.mode != "predicted") modes.push_back(eval::LatentMode::Filtered);
  if (r.eval.mode != "filtered") modes.push_back(eval::LatentMode::Predicted);
  io::StagedDirectory staged(out, c.overwrite);
  std::ostringstream table;
  table << "label,variant,seed,regressor,mode,mean_abs_error_x,mean_abs_error_y,mean_translation_error,rmse\n";
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    for (auto m : modes) {
      eval::RegressOptions o;
      o.kind = eval::parse_regressor(r.eval.regressor);
      o.mode = m;
      o.train_fraction = r.eval.train_fraction;
      o.seed = r.seed;
      const auto rep = with_checkpoint(checkpoints[i], [&](const auto& model) {
        return eval::regress_eval(model, data, split, r.eval.context, r.eval.horizon, o);
      });
      const std::string stem = labels[i] + "_" + eval::to_string(m);
      io::write_text(staged.path() / ("regression_" + stem + ".json"), eval::to_json(rep).dump(2) + "\n");
      io::write_text(staged.path() / ("pairs_" + stem + ".csv"), eval::rows_csv(rep));
      const auto& e = rep.errors;
      table << labels[i] << ',' << rep.variant << ',' << r.seed << ',' << eval::to_string(rep.kind) << ','
            << eval::to_string(m) << ',' << e.mean_abs_error.x() << ',' << e.mean_abs_error.y() << ','
            << e.mean_translation_error << ',' << e.rmse << '\n';
      std::printf("%-16s %-6s %-9s translation error %.4f  rmse %.4f\n", labels[i].c_str(),
                  eval::to_string(rep.kind).c_str(), eval::to_string(m).c_str(), e.mean_translation_error, e.rmse);
    }
  }
  io::write_text(staged.path() / "regression_comparison.csv", table.str());
  write_resolved(r, staged.path());
  staged.commit();
  return 0;
}

int gradcheck_cmd(std::uint64_t seed, const std::string& variant) {
  const auto r = checks::gradcheck_tiny(seed, variant);
  std::printf("gradcheck %s: max relative error %.3e over %zu entries (worst %s[%zu]: analytic %.6g, numeric %.6g) %s\n",
              variant.c_str(), r.result.max_relative_error, r.result.entries_checked, r.result.worst_leaf.c_str(),
              r.result.worst_index, r.result.worst_analytic, r.result.worst_numeric, r.pass ? "PASS" : "FAIL");
  return r.pass ? 0 : kRuntime;
}

int poecheck_cmd(std::uint64_t seed, std::size_t sets) {
  const auto r = checks::poe_check(sets, seed);
  std::printf("poecheck: %zu sets, %zu dimensions, max mean error %.3e, max variance error %.3e %s\n", r.sets,
              r.dimensions, r.max_mean_error, r.max_var_error, r.pass ? "PASS" : "FAIL");
  return r.pass ? 0 : kRuntime;
}

int elbocheck_cmd(std::uint64_t seed, std::size_t trajectories, std::size_t samples) {
  const auto r = checks::elbo_bound_check(trajectories, samples, seed);
  std::printf("trajectory,log_likelihood,log_likelihood_se,elbo,elbo_se,holds\n");
  for (const auto& row : r.rows) {
    std::printf("%zu,%.6f,%.6f,%.6f,%.6f,%d\n", row.trajectory, row.log_likelihood, row.log_likelihood_se, row.elbo,
                row.elbo_se, row.holds ? 1 : 0);
  }
  std::printf("elbocheck: bound holds on %zu of %zu trajectories (need %zu) %s\n", r.holding, r.rows.size(), r.required,
              r.pass ? "PASS" : "FAIL");
  return r.pass ? 0 : kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal sequential latent dynamics: data, training and evaluation"};
  app.require_subcommand(1);
  Common common;
  std::string data_path;
  std::vector<std::string> checkpoints;
  std::optional<std::size_t> trajectories, epochs, k, h;
  std::optional<std::string> regressor, mode;
  bool svg = false;
  std::uint64_t check_seed = 0;
  std::size_t sets = 100, samples = 200, check_trajectories = 20;
  std::string check_variant = "PH";

  auto* gen = app.add_subcommand("gen-data", "Simulate a pushing dataset");
  add_common(gen, common);
  gen->add_option("--trajectories", trajectories, "Number of trajectories");

  auto* tr = app.add_subcommand("train", "Train a model variant");
  add_common(tr, common);
  tr->add_option("--variant", common.variant, "V, VP, VH, VHP or VHP-C")
      ->check(CLI::IsMember({"V", "VP", "VH", "VHP", "VHP-C", "PH", "PH-C"}));
  tr->add_option("--data", data_path, "Dataset directory");
  tr->add_option("--epochs", epochs, "Training epochs");

  auto* ev = app.add_subcommand("evaluate", "Score rollout predictions");
  add_common(ev, common);
  ev->add_option("--checkpoint", checkpoints, "Checkpoint directory (repeatable)");
  ev->add_option("--data", data_path, "Dataset directory");
  ev->add_option("--context", k, "Context frames k");
  ev->add_option("--horizon", h, "Prediction horizon h");
  ev->add_flag("--svg", svg, "Also write per-step SVG charts");

  auto* rg = app.add_subcommand("regress", "Regress object position from frozen latents");
  add_common(rg, common);
  rg->add_option("--checkpoint", checkpoints, "Checkpoint directory (repeatable)");
  rg->add_option("--data", data_path, "Dataset directory");
  rg->add_option("--regressor", regressor, "OLS or MLP-50")->check(CLI::IsMember({"OLS", "MLP-50"}));
  rg->add_option("--mode", mode, "filtered, predicted or both")->check(CLI::IsMember({"filtered", "predicted", "both"}));
  rg->add_option("--context", k, "Context frames k");
  rg->add_option("--horizon", h, "Prediction horizon h");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the ELBO gradient on a tiny model");
  gc->add_option("--seed", check_seed, "Seed");
  gc->add_option("--variant", check_variant, "Tiny variant")->check(CLI::IsMember({"PH", "PH-C"}));
  auto* pc = app.add_subcommand("poecheck", "Product of experts versus a quadrature oracle");
  pc->add_option("--seed", check_seed, "Seed");
  pc->add_option("--sets", sets, "Random expert sets");
  auto* ec = app.add_subcommand("elbocheck", "Importance-sampled likelihood versus the ELBO");
  ec->add_option("--seed", check_seed, "Seed");
  ec->add_option("--trajectories", check_trajectories, "Tiny trajectories");
  ec->add_option("--samples", samples, "Importance samples per trajectory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*gen) return gen_data(common, trajectories);
    if (*tr) return train_cmd(common, data_path, epochs);
    if (*ev) return evaluate_cmd(common, checkpoints, data_path, k, h, svg);
    if (*rg) return regress_cmd(common, checkpoints, data_path, regressor, mode, k, h);
    if (*gc) return gradcheck_cmd(check_seed, check_variant);
    if (*pc) return poecheck_cmd(check_seed, sets);
    if (*ec) return elbocheck_cmd(check_seed, check_trajectories, samples);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kUsage;
}
