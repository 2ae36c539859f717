#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmdyn/model.hpp"
#include "mmdyn/simdata.hpp"

namespace mmdyn::cli {

struct EvalSettings {
  std::size_t context = 4;
  std::size_t horizon = 11;
  std::string regressor = "OLS";
  std::string mode = "predicted";  // filtered | predicted | both
  std::string split = "eval";      // eval | train
  double train_fraction = 0.8;
};

struct IoSettings {
  std::string dataset = "data/desk";
  std::string checkpoint = "runs/VHP";
  std::vector<std::string> checkpoints;  // evaluate/regress over several runs; overrides checkpoint when set
  std::string reports = "reports";
};

/// Everything a command needs. The top-level seed is the only seed: it is
/// copied into the simulator and model sections on resolution.
struct RunConfig {
  sim::SimConfig sim;
  std::size_t trajectories = 500;
  ModelConfig model;
  EvalSettings eval;
  IoSettings io;
  std::uint64_t seed = 0;

  void resolve();
};

/// Defaults for a named profile ("desk" or "paper").
RunConfig profile_config(const std::string& profile);

/// Overlays `j` on `base`. Unknown keys and per-section seeds raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base);
nlohmann::json to_json(const RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base);

}  // namespace mmdyn::cli
