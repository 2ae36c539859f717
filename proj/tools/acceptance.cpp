// Acceptance runner: one PASS/FAIL line per criterion.
//
//   mmdyn_acceptance --criteria 1,2,3,4,8,9
//   mmdyn_acceptance --criteria 5,6,7 --work build/acceptance --epochs 30
//
// Criteria 5-7 share trained desk checkpoints, cached under --work and keyed
// by model config, dataset seed and epoch count.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include <CLI11.hpp>

#include "mmdyn/checks.hpp"
#include "mmdyn/errors.hpp"
#include "mmdyn/eval.hpp"
#include "mmdyn/io.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mmdyn;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

void report(int id, const Outcome& o) {
  std::printf("criterion %d %s  %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// ---------------------------------------------------------------- oracles

Outcome poe_oracle() {
  const auto t0 = Clock::now();
  const auto r = checks::poe_check(1000, 11);
  const double t = seconds_since(t0);
  return {r.pass && t < 60.0, fmt("PoE vs grid product: %zu sets, %zu dims, max |mean err| %.2e, max |var err| %.2e "
                                  "(tol %.0e), %.1f s (limit 60 s)",
                                  r.sets, r.dimensions, r.max_mean_error, r.max_var_error, r.tolerance, t)};
}

Outcome kl_oracle() {
  const auto t0 = Clock::now();
  const auto r = checks::kl_check(50, 1'000'000, 12);
  const double t = seconds_since(t0);
  return {r.pass && t < 60.0, fmt("KL vs 1e6-sample Monte Carlo: %zu/%zu pairs within 3 SE, worst %.2f SE, %.1f s "
                                  "(limit 60 s)",
                                  r.within, r.pairs, r.worst_z, t)};
}

Outcome gradient_check() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  bool pass = true;
  std::size_t entries = 0;
  for (const char* variant : {"PH", "PH-C"}) {
    const auto r = checks::gradcheck_tiny(13, variant);
    worst = std::max(worst, r.result.max_relative_error);
    entries += r.result.entries_checked;
    pass = pass && r.pass;
  }
  const double t = seconds_since(t0);
  return {pass && t < 120.0, fmt("tiny ELBO gradient (K=3, T=4, 64-bit, PoE and concatenation fusion): max relative "
                                 "error %.2e over %zu entries (tol 1e-4), %.1f s (limit 120 s)",
                                 worst, entries, t)};
}

Outcome bound_check() {
  const auto t0 = Clock::now();
  const auto r = checks::elbo_bound_check(20, 200, 14);
  const double t = seconds_since(t0);
  return {r.holding >= 18 && t < 300.0,
          fmt("IS log-likelihood (200 samples) >= ELBO - 3 SE on %zu/20 tiny trajectories (need 18), %.1f s "
              "(limit 300 s)",
              r.holding, t)};
}

// ------------------------------------------------------- invariant suites

Outcome invariant_suites() {
  std::vector<std::string> failed;
  const auto t0 = Clock::now();
  for (const char* suite : {"test_gaussian", "test_model", "test_simdata", "test_eval"}) {
    const auto exe = fs::path(MMDYN_TEST_DIR) / suite;
    const std::string cmd = exe.string() + " --minimal >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) failed.push_back(suite);
  }
  std::string detail = "gaussian, model, simdata and eval property suites (>= 20 seeds, bitwise determinism)";
  if (!failed.empty()) {
    detail += ": failing";
    for (const auto& f : failed) detail += " " + f;
  }
  return {failed.empty(), detail + fmt(", %.1f s", seconds_since(t0))};
}

// ---------------------------------------------------------- round-trips

std::map<std::string, std::string> directory_bytes(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file()) files[e.path().filename().string()] = slurp(e.path());
  }
  return files;
}

// True when loading `dir` throws a FormatError whose message names `file`.
template <typename Load>
bool rejects_naming(Load&& load, const fs::path& dir, const std::string& file) {
  try {
    load(dir);
  } catch (const FormatError& e) {
    return std::string(e.what()).find(file) != std::string::npos;
  } catch (...) {
    return false;
  }
  return false;
}

void truncate_copy(const fs::path& from, const fs::path& to, const std::string& file) {
  fs::remove_all(to);
  fs::copy(from, to);
  fs::resize_file(to / file, fs::file_size(to / file) / 2);
}

Outcome round_trips(const fs::path& work) {
  const auto dir = work / "roundtrip";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::vector<std::string> problems;

  auto sim = sim::profile("desk");
  sim.seed = 21;
  const auto data = sim::generate_dataset(sim, 12);
  sim::save_dataset(data, dir / "a");
  sim::save_dataset(sim::load_dataset(dir / "a"), dir / "b");
  if (directory_bytes(dir / "a") != directory_bytes(dir / "b")) problems.push_back("dataset bytes differ");
  const auto load_data = [](const fs::path& p) { sim::load_dataset(p); };
  for (const char* file : {"images.bin", "proprio.bin", "haptic.bin", "controls.bin", "labels.bin"}) {
    if (!fs::exists(dir / "a" / file)) continue;
    truncate_copy(dir / "a", dir / "bad", file);
    if (!rejects_naming(load_data, dir / "bad", file)) problems.push_back(std::string("truncated ") + file);
  }
  fs::remove_all(dir / "bad");
  fs::copy(dir / "a", dir / "bad");
  io::write_text(dir / "bad" / "manifest.json", "{\"steps\": ");
  if (!rejects_naming(load_data, dir / "bad", "manifest.json")) problems.push_back("corrupt dataset manifest");

  bool checkpoints_ok = true;
  for (bool float_mode : {true, false}) {
    auto c = cli::profile_config("desk").model;
    c.adopt_shapes(data.manifest);
    c.variant = "VHP";
    c.float_mode = float_mode;
    c.seed = 22;
    const auto a = dir / (float_mode ? "ck32" : "ck64"), b = dir / (float_mode ? "ck32b" : "ck64b");
    std::function<void(const fs::path&)> load;
    if (float_mode) {
      Model<float> m(c);
      save_checkpoint(m, a, 7);
      save_checkpoint(load_checkpoint<float>(a), b, 7);
      load = [](const fs::path& p) { load_checkpoint<float>(p); };
    } else {
      Model<double> m(c);
      save_checkpoint(m, a, 7);
      save_checkpoint(load_checkpoint<double>(a), b, 7);
      load = [](const fs::path& p) { load_checkpoint<double>(p); };
    }
    if (directory_bytes(a) != directory_bytes(b)) {
      problems.push_back(float_mode ? "float checkpoint bytes differ" : "double checkpoint bytes differ");
      checkpoints_ok = false;
    }
    truncate_copy(a, dir / "badck", "params.bin");
    if (!rejects_naming(load, dir / "badck", "params.bin")) problems.push_back("truncated params.bin");
    fs::remove_all(dir / "badck");
    fs::copy(a, dir / "badck");
    io::write_text(dir / "badck" / "manifest.json", "[");
    if (!rejects_naming(load, dir / "badck", "manifest.json")) problems.push_back("corrupt checkpoint manifest");
  }
  fs::remove_all(dir);

  std::string detail = "dataset and float/double checkpoint save-load-save byte-identical; truncated or corrupt "
                       "files rejected with the file named";
  if (!problems.empty()) {
    detail += ": problems:";
    for (const auto& p : problems) detail += " [" + p + "]";
  }
  return {problems.empty() && checkpoints_ok, detail};
}

// ------------------------------------------------------------ experiments

struct Run {
  std::string variant;
  std::uint64_t seed = 0;
  double train_seconds = 0.0;
  std::vector<double> loss_trace;
  double rmse = 0.0, ssim = 0.0;
  double abs_error_predicted = 0.0;  // mean over x and y of the mean absolute error
  double rmse_filtered = 0.0, rmse_predicted = 0.0;
};

struct Experiment {
  fs::path work;
  std::size_t epochs = 30;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::map<std::uint64_t, sim::Dataset> datasets;

  std::size_t progress_epochs = 5;  // VP and VH train only for the progress check

  cli::RunConfig config(const std::string& variant, std::uint64_t seed, std::size_t n_epochs) const {
    auto r = cli::profile_config("desk");
    r.seed = seed;
    r.model.variant = variant;
    r.model.epochs = n_epochs;
    r.resolve();
    return r;
  }

  const sim::Dataset& dataset(std::uint64_t seed) {
    auto it = datasets.find(seed);
    if (it == datasets.end()) {
      const auto r = config("V", seed, epochs);
      it = datasets.emplace(seed, sim::generate_dataset(r.sim, r.trajectories)).first;
    }
    return it->second;
  }

  // Trains or reuses a cached checkpoint, then evaluates it.
  Run run(const std::string& variant, std::uint64_t seed, std::size_t n_epochs, bool evaluate) {
    const auto r = config(variant, seed, n_epochs);
    const auto& data = dataset(seed);
    auto mc = r.model;
    mc.adopt_shapes(data.manifest);
    const json key = {{"model", to_json(mc)}, {"sim", sim::to_json(r.sim)}, {"trajectories", r.trajectories}};
    const auto dir = work / fmt("%s_s%llu_e%zu", variant.c_str(), static_cast<unsigned long long>(seed), n_epochs);
    Run out;
    out.variant = variant;
    out.seed = seed;

    bool cached = fs::exists(dir / "key.json") && json::parse(slurp(dir / "key.json")) == key &&
                  fs::exists(dir / "checkpoint" / "manifest.json");
    if (!cached) {
      fs::remove_all(dir);
      Model<float> model(mc);
      AdamState<float> adam;
      const auto t0 = Clock::now();
      const auto res = train(model, adam, data, data.manifest.train_indices);
      out.train_seconds = seconds_since(t0);
      if (res.diverged) throw NumericError(variant + " seed " + std::to_string(seed) + " diverged: " + res.message);
      save_checkpoint(model, dir / "checkpoint", res.steps);
      json meta = {{"train_seconds", out.train_seconds}, {"loss_trace", res.loss_trace}};
      io::write_text(dir / "training.json", meta.dump() + "\n");
      io::write_text(dir / "key.json", key.dump(2) + "\n");
      std::fprintf(stderr, "trained %s seed %llu: %zu steps in %.0f s\n", variant.c_str(),
                   static_cast<unsigned long long>(seed), res.steps, out.train_seconds);
    }
    const auto meta = json::parse(slurp(dir / "training.json"));
    out.train_seconds = meta["train_seconds"].get<double>();
    out.loss_trace = meta["loss_trace"].get<std::vector<double>>();
    if (!evaluate) return out;

    const auto model = load_checkpoint<float>(dir / "checkpoint");
    const auto& split = data.manifest.eval_indices;
    const auto m = eval::eval_prediction(model, data, split, r.eval.context, r.eval.horizon);
    out.rmse = m.rmse_avg;
    out.ssim = m.ssim_avg;
    eval::RegressOptions o;
    o.seed = seed;
    o.train_fraction = r.eval.train_fraction;
    o.mode = eval::LatentMode::Predicted;
    const auto pred = eval::regress_eval(model, data, split, r.eval.context, r.eval.horizon, o);
    out.abs_error_predicted = pred.errors.mean_abs_error.mean();
    out.rmse_predicted = pred.errors.rmse;
    o.mode = eval::LatentMode::Filtered;
    out.rmse_filtered = eval::regress_eval(model, data, split, r.eval.context, r.eval.horizon, o).errors.rmse;
    return out;
  }
};

double mean_of(const std::vector<Run>& runs, const std::string& variant, double Run::*field) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : runs) {
    if (r.variant == variant) {
      s += r.*field;
      ++n;
    }
  }
  return s / static_cast<double>(n);
}

double epoch_mean(const std::vector<double>& trace, std::size_t epoch, std::size_t per_epoch) {
  double s = 0.0;
  for (std::size_t i = epoch * per_epoch; i < (epoch + 1) * per_epoch; ++i) s += trace[i];
  return s / static_cast<double>(per_epoch);
}

void write_results(const fs::path& work, const std::vector<Run>& runs) {
  std::ostringstream csv;
  csv << "variant,seed,train_seconds,rmse,ssim,abs_error_predicted,rmse_filtered,rmse_predicted\n";
  for (const auto& r : runs) {
    csv << r.variant << ',' << r.seed << ',' << r.train_seconds << ',' << r.rmse << ',' << r.ssim << ','
        << r.abs_error_predicted << ',' << r.rmse_filtered << ',' << r.rmse_predicted << '\n';
  }
  io::write_text(work / "experiment_results.csv", csv.str());
}

void experiments(Experiment& ex, const std::set<int>& want, bool& all_pass) {
  std::vector<Run> runs;
  for (auto seed : ex.seeds) {
    for (const char* v : {"V", "VHP", "VHP-C"}) runs.push_back(ex.run(v, seed, ex.epochs, true));
  }
  write_results(ex.work, runs);
  double slowest = 0.0;
  for (const auto& r : runs) slowest = std::max(slowest, r.train_seconds);
  const std::string budget = fmt("slowest run %.0f s of 3600 s budget", slowest);
  const bool in_budget = slowest <= 3600.0;

  const double rmse_v = mean_of(runs, "V", &Run::rmse), rmse_vhp = mean_of(runs, "VHP", &Run::rmse),
               rmse_c = mean_of(runs, "VHP-C", &Run::rmse);
  const double ssim_v = mean_of(runs, "V", &Run::ssim), ssim_vhp = mean_of(runs, "VHP", &Run::ssim);
  if (want.count(5)) {
    Outcome o{rmse_vhp < rmse_v && rmse_vhp < rmse_c && ssim_vhp > ssim_v && in_budget,
              fmt("desk prediction (k=4, h=11, %zu seeds, %zu epochs): pixel RMSE V %.4f, VHP %.4f, VHP-C %.4f; "
                  "SSIM V %.4f, VHP %.4f; %s",
                  ex.seeds.size(), ex.epochs, rmse_v, rmse_vhp, rmse_c, ssim_v, ssim_vhp, budget.c_str())};
    report(5, o);
    all_pass = all_pass && o.pass;
  }
  if (want.count(6)) {
    const double v = mean_of(runs, "V", &Run::abs_error_predicted);
    const double vhp = mean_of(runs, "VHP", &Run::abs_error_predicted);
    Outcome o{vhp < v, fmt("OLS from predicted latents, mean absolute translation error: V %.4f, VHP %.4f", v, vhp)};
    report(6, o);
    all_pass = all_pass && o.pass;
  }
  if (want.count(7)) {
    const double filt = mean_of(runs, "VHP", &Run::rmse_filtered);
    const double pred = mean_of(runs, "VHP", &Run::rmse_predicted);
    std::size_t seeds_ok = 0;
    for (const auto& r : runs) {
      if (r.variant == "VHP" && r.rmse_filtered <= r.rmse_predicted) ++seeds_ok;
    }
    Outcome o{filt <= pred, fmt("VHP OLS position RMSE: filtered %.4f <= predicted %.4f (holds on %zu/%zu seeds)",
                                filt, pred, seeds_ok, ex.seeds.size())};
    report(7, o);
    all_pass = all_pass && o.pass;
  }

  // Training progress for all five variants; VP and VH are trained only here,
  // for a shorter run.
  std::vector<std::string> regressions;
  for (auto seed : ex.seeds) {
    for (const std::string v : {"V", "VP", "VH", "VHP", "VHP-C"}) {
      const std::size_t n = (v == "VP" || v == "VH") ? std::min(ex.epochs, ex.progress_epochs) : ex.epochs;
      const auto r = ex.run(v, seed, n, false);
      const std::size_t per_epoch = r.loss_trace.size() / n;
      const double first = epoch_mean(r.loss_trace, 0, per_epoch);
      const double last = epoch_mean(r.loss_trace, n - 1, per_epoch);
      // The trace holds the negative ELBO, so progress means it fell.
      if (!(last < first)) regressions.push_back(fmt("%s seed %llu", v.c_str(), static_cast<unsigned long long>(seed)));
    }
  }
  std::printf("training progress %s  final-epoch mean ELBO above first-epoch mean for V, VHP, VHP-C (%zu epochs) and "
              "VP, VH (%zu epochs) x %zu seeds%s\n",
              regressions.empty() ? "PASS" : "FAIL", ex.epochs, std::min(ex.epochs, ex.progress_epochs),
              ex.seeds.size(),
              regressions.empty() ? "" : (" (not for " + regressions.front() + ")").c_str());
  all_pass = all_pass && regressions.empty();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  std::string criteria = "1,2,3,4,5,6,7,8,9";
  std::string work = "acceptance";
  Experiment ex;
  app.add_option("--criteria", criteria, "Comma-separated criterion numbers");
  app.add_option("--work", work, "Cache directory for datasets checks and trained checkpoints");
  app.add_option("--epochs", ex.epochs, "Training epochs for criteria 5-7")->check(CLI::PositiveNumber);
  app.add_option("--progress-epochs", ex.progress_epochs, "Training epochs for the VP and VH progress runs")
      ->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  std::set<int> want;
  std::stringstream ss(criteria);
  for (std::string item; std::getline(ss, item, ',');) {
    const int id = std::atoi(item.c_str());
    if (id < 1 || id > 9) {
      std::fprintf(stderr, "unknown criterion \"%s\"\n", item.c_str());
      return 1;
    }
    want.insert(id);
  }
  ex.work = fs::absolute(work);
  fs::create_directories(ex.work);

  bool all_pass = true;
  const std::vector<std::pair<int, std::function<Outcome()>>> fast = {
      {1, poe_oracle}, {2, kl_oracle}, {3, gradient_check}, {4, bound_check}};
  try {
    for (const auto& [id, fn] : fast) {
      if (!want.count(id)) continue;
      const auto o = fn();
      report(id, o);
      all_pass = all_pass && o.pass;
    }
    if (want.count(5) || want.count(6) || want.count(7)) experiments(ex, want, all_pass);
    if (want.count(8)) {
      const auto o = invariant_suites();
      report(8, o);
      all_pass = all_pass && o.pass;
    }
    if (want.count(9)) {
      const auto o = round_trips(ex.work);
      report(9, o);
      all_pass = all_pass && o.pass;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance run aborted: %s\n", e.what());
    return 2;
  }
  return all_pass ? 0 : 1;
}
