#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

namespace mmdyn::sim {

/// Quasi-static planar pushing world. Lengths are in world units over a
/// square arena [-extent/2, extent/2]^2; time is in seconds.
struct SimConfig {
  std::size_t image_size = 32;
  std::size_t steps = 16;           // frames per trajectory (T)
  std::size_t substeps = 8;         // high-rate samples per frame (W)
  double frame_dt = 0.25;
  double arena_extent = 10.0;
  double block_half_side = 1.0;
  double pusher_radius = 0.4;
  double stiffness = 50.0;          // k
  double mobility_translation = 0.5;
  double mobility_rotation = 0.3;
  double sensor_noise = 0.05;
  double start_radius = 2.5;        // pusher start distance from the block center
  double action_speed = 1.2;        // magnitude of the per-trajectory mean action
  double action_mean_std = 0.3;     // perturbation of the per-trajectory mean
  double action_step_std = 0.5;     // per-step spread around that mean
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const SimConfig& c);
/// Strict: unknown keys raise ConfigError. Missing keys keep defaults.
SimConfig sim_config_from_json(const nlohmann::json& j, SimConfig base = {});

/// Named presets: "desk" (32x32, W=8) and "paper" (64x64, W=32).
SimConfig profile(const std::string& name);
std::size_t profile_trajectories(const std::string& name);

struct State {
  double block_x = 0.0, block_y = 0.0, block_theta = 0.0;
  double pusher_x = 0.0, pusher_y = 0.0;
  double pusher_vx = 0.0, pusher_vy = 0.0;
};

struct Contact {
  bool active = false;
  double depth = 0.0;
  std::array<double, 2> normal{};  // unit, pointing from the pusher into the block
  std::array<double, 2> offset{};  // contact point minus block center (world frame)
};

/// Penetration of the pusher disc into the block, if any.
Contact find_contact(const State& s, const SimConfig& c);

struct StepSample {
  std::array<double, 4> proprio{};  // pusher x, y, vx, vy
  std::array<double, 3> haptic{};   // force on the block fx, fy and torque about its center
  bool contact = false;
};

/// Moves the pusher by u*dt and resolves contact quasi-statically. Sensor
/// noise is added to proprio always and to haptic only while in contact, so
/// the haptic stream is exactly zero when nothing touches the block.
StepSample simulate_step(State& state, const std::array<double, 2>& u, double dt, const SimConfig& c,
                         std::mt19937_64& rng);

/// What to draw; absent objects are skipped (an empty arena renders black).
struct Scene {
  std::optional<std::array<double, 3>> block;   // x, y, theta
  std::optional<std::array<double, 2>> pusher;  // x, y
};

Scene scene_of(const State& s);

/// Grayscale raster [size, size] with 4x4 supersampling: block 0.8, pusher
/// 0.4 drawn on top, background 0. Row 0 is the top (largest y).
std::vector<float> render(const Scene& scene, const SimConfig& c);

/// One simulated trajectory in the dataset's storage layout.
struct Trajectory {
  std::vector<float> images;    // [T, H, W]
  std::vector<float> proprio;   // [T, W, 4]
  std::vector<float> haptic;    // [T, W, 3]
  std::vector<float> controls;  // [T-1, 2]
  std::vector<float> labels;    // [T, 3]
  bool any_contact = false;
};

/// Deterministic in (config.seed, index).
Trajectory simulate_trajectory(const SimConfig& c, std::size_t index);

struct Manifest {
  int version = 1;
  std::size_t num_trajectories = 0;
  std::size_t steps = 0;
  std::size_t image_height = 0;
  std::size_t image_width = 0;
  std::size_t window = 0;
  std::size_t proprio_dim = 4;
  std::size_t haptic_dim = 3;
  std::size_t control_dim = 2;
  std::size_t label_dim = 3;
  std::string dtype = "f32le";
  std::uint64_t seed = 0;
  SimConfig sim;
  double contact_fraction = 0.0;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> eval_indices;
};

nlohmann::json to_json(const Manifest& m);
Manifest manifest_from_json(const nlohmann::json& j);

/// All trajectories, trajectory-major, in the on-disk float layout.
struct Dataset {
  Manifest manifest;
  std::vector<float> images;
  std::vector<float> proprio;
  std::vector<float> haptic;
  std::vector<float> controls;
  std::vector<float> labels;

  std::size_t image_size() const { return manifest.image_height * manifest.image_width; }
  std::size_t frames() const { return manifest.steps; }
  const float* image(std::size_t n, std::size_t t) const;
  const float* proprio_window(std::size_t n, std::size_t t) const;
  const float* haptic_window(std::size_t n, std::size_t t) const;
  const float* control(std::size_t n, std::size_t t) const;
  const float* label(std::size_t n, std::size_t t) const;
};

/// Simulates `n` trajectories (in parallel, ordered by index) with a seeded
/// 90/10 train/eval split.
Dataset generate_dataset(const SimConfig& c, std::size_t n, double eval_fraction = 0.1);

/// Writes manifest.json plus one .bin per modality through a staging
/// directory, so a failed write leaves nothing behind.
void save_dataset(const Dataset& d, const std::filesystem::path& dir, bool overwrite = false);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace mmdyn::sim
