#include "run_config.hpp"

#include "mmdyn/io.hpp"
#include "mmdyn/json_fields.hpp"

namespace mmdyn::cli {

using nlohmann::json;

void RunConfig::resolve() {
  sim.seed = seed;
  model.seed = seed;
  sim.validate();
  model.validate();
  if (trajectories == 0) throw ConfigError("trajectories must be >= 1");
  if (eval.context == 0 || eval.horizon == 0) throw ConfigError("eval: context and horizon must be >= 1");
  if (eval.split != "eval" && eval.split != "train") throw ConfigError("eval.split must be \"eval\" or \"train\"");
  if (eval.mode != "filtered" && eval.mode != "predicted" && eval.mode != "both") {
    throw ConfigError("eval.mode must be filtered, predicted or both");
  }
  if (eval.regressor != "OLS" && eval.regressor != "MLP-50") throw ConfigError("eval.regressor must be OLS or MLP-50");
  if (!(eval.train_fraction > 0.0 && eval.train_fraction < 1.0)) throw ConfigError("eval.train_fraction must be in (0, 1)");
}

RunConfig profile_config(const std::string& profile) {
  RunConfig c;
  c.sim = sim::profile(profile);
  c.trajectories = sim::profile_trajectories(profile);
  c.model.image_height = c.model.image_width = c.sim.image_size;
  c.model.window = c.sim.substeps;
  c.io.dataset = "data/" + profile;
  return c;
}

namespace {

json without_seed(json j, const char* section) {
  if (j.is_object() && j.contains("seed")) {
    throw ConfigError(std::string(section) + ".seed: set the top-level seed instead");
  }
  return j;
}

}  // namespace

RunConfig run_config_from_json(const json& j, RunConfig c) {
  JsonFields f(j, "config");
  f.read("seed", c.seed);
  f.read("trajectories", c.trajectories);
  if (const auto* s = f.child("sim")) c.sim = sim::sim_config_from_json(without_seed(*s, "sim"), c.sim);
  if (const auto* m = f.child("model")) c.model = model_config_from_json(without_seed(*m, "model"), c.model);
  if (const auto* e = f.child("eval")) {
    JsonFields g(*e, "eval");
    g.read("context", c.eval.context);
    g.read("horizon", c.eval.horizon);
    g.read("regressor", c.eval.regressor);
    g.read("mode", c.eval.mode);
    g.read("split", c.eval.split);
    g.read("train_fraction", c.eval.train_fraction);
    g.finish();
  }
  if (const auto* i = f.child("io")) {
    JsonFields g(*i, "io");
    g.read("dataset", c.io.dataset);
    g.read("checkpoint", c.io.checkpoint);
    g.read("checkpoints", c.io.checkpoints);
    g.read("reports", c.io.reports);
    g.finish();
  }
  f.finish();
  return c;
}

json to_json(const RunConfig& c) {
  json sim = sim::to_json(c.sim);
  sim.erase("seed");
  json model = to_json(c.model);
  model.erase("seed");
  return json{{"seed", c.seed},
              {"trajectories", c.trajectories},
              {"sim", sim},
              {"model", model},
              {"eval",
               {{"context", c.eval.context},
                {"horizon", c.eval.horizon},
                {"regressor", c.eval.regressor},
                {"mode", c.eval.mode},
                {"split", c.eval.split},
                {"train_fraction", c.eval.train_fraction}}},
              {"io", {{"dataset", c.io.dataset}, {"checkpoint", c.io.checkpoint}, {"checkpoints", c.io.checkpoints}, {"reports", c.io.reports}}}};
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j, std::move(base));
}

}  // namespace mmdyn::cli
