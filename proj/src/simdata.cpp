#include "mmdyn/simdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mmdyn/errors.hpp"
#include "mmdyn/io.hpp"
#include "mmdyn/json_fields.hpp"
#include "mmdyn/parallel.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mmdyn::sim {

void SimConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string("sim.") + name + " must be > 0");
  };
  positive(frame_dt, "frame_dt");
  positive(arena_extent, "arena_extent");
  positive(block_half_side, "block_half_side");
  positive(pusher_radius, "pusher_radius");
  positive(stiffness, "stiffness");
  positive(mobility_translation, "mobility_translation");
  positive(mobility_rotation, "mobility_rotation");
  positive(sensor_noise, "sensor_noise");
  positive(start_radius, "start_radius");
  positive(action_speed, "action_speed");
  if (action_mean_std < 0.0 || action_step_std < 0.0) throw ConfigError("sim: action spreads must be >= 0");
  if (image_size == 0) throw ConfigError("sim.image_size must be >= 1");
  if (steps < 2) throw ConfigError("sim.steps must be >= 2");
  if (substeps == 0) throw ConfigError("sim.substeps must be >= 1");
  if (2.0 * (block_half_side + pusher_radius) >= arena_extent) {
    throw ConfigError("sim: block and pusher do not fit in the arena");
  }
}

json to_json(const SimConfig& c) {
  return json{{"image_size", c.image_size},
              {"steps", c.steps},
              {"substeps", c.substeps},
              {"frame_dt", c.frame_dt},
              {"arena_extent", c.arena_extent},
              {"block_half_side", c.block_half_side},
              {"pusher_radius", c.pusher_radius},
              {"stiffness", c.stiffness},
              {"mobility_translation", c.mobility_translation},
              {"mobility_rotation", c.mobility_rotation},
              {"sensor_noise", c.sensor_noise},
              {"start_radius", c.start_radius},
              {"action_speed", c.action_speed},
              {"action_mean_std", c.action_mean_std},
              {"action_step_std", c.action_step_std},
              {"seed", c.seed}};
}

SimConfig sim_config_from_json(const json& j, SimConfig c) {
  JsonFields f(j, "sim");
  f.read("image_size", c.image_size);
  f.read("steps", c.steps);
  f.read("substeps", c.substeps);
  f.read("frame_dt", c.frame_dt);
  f.read("arena_extent", c.arena_extent);
  f.read("block_half_side", c.block_half_side);
  f.read("pusher_radius", c.pusher_radius);
  f.read("stiffness", c.stiffness);
  f.read("mobility_translation", c.mobility_translation);
  f.read("mobility_rotation", c.mobility_rotation);
  f.read("sensor_noise", c.sensor_noise);
  f.read("start_radius", c.start_radius);
  f.read("action_speed", c.action_speed);
  f.read("action_mean_std", c.action_mean_std);
  f.read("action_step_std", c.action_step_std);
  f.read("seed", c.seed);
  f.finish();
  c.validate();
  return c;
}

SimConfig profile(const std::string& name) {
  SimConfig c;
  if (name == "desk") return c;
  if (name == "paper") {
    c.image_size = 64;
    c.substeps = 32;
    return c;
  }
  throw ConfigError("unknown profile \"" + name + "\" (expected desk or paper)");
}

std::size_t profile_trajectories(const std::string& name) {
  if (name == "desk") return 500;
  if (name == "paper") return 4800;
  throw ConfigError("unknown profile \"" + name + "\" (expected desk or paper)");
}

// Physics -------------------------------------------------------------------

Contact find_contact(const State& s, const SimConfig& c) {
  const double h = c.block_half_side;
  const double cs = std::cos(s.block_theta), sn = std::sin(s.block_theta);
  const double dx = s.pusher_x - s.block_x, dy = s.pusher_y - s.block_y;
  // Pusher center in the block frame.
  const double qx = cs * dx + sn * dy;
  const double qy = -sn * dx + cs * dy;
  const double px = std::clamp(qx, -h, h), py = std::clamp(qy, -h, h);
  double nx = 0.0, ny = 0.0, depth = 0.0, cx = px, cy = py;
  const double ox = qx - px, oy = qy - py;
  const double dist = std::hypot(ox, oy);
  if (dist > 0.0) {
    if (dist >= c.pusher_radius) return {};
    depth = c.pusher_radius - dist;
    nx = -ox / dist;
    ny = -oy / dist;
  } else {
    // Center inside the block: leave through the nearest face.
    const double mx = h - std::abs(qx), my = h - std::abs(qy);
    if (mx <= my) {
      const double sx = qx >= 0.0 ? 1.0 : -1.0;
      depth = c.pusher_radius + mx;
      nx = -sx;
      cx = sx * h;
    } else {
      const double sy = qy >= 0.0 ? 1.0 : -1.0;
      depth = c.pusher_radius + my;
      ny = -sy;
      cy = sy * h;
    }
  }
  Contact out;
  out.active = true;
  out.depth = depth;
  out.normal = {cs * nx - sn * ny, sn * nx + cs * ny};
  out.offset = {cs * cx - sn * cy, sn * cx + cs * cy};
  return out;
}

StepSample simulate_step(State& s, const std::array<double, 2>& u, double dt, const SimConfig& c,
                         std::mt19937_64& rng) {
  if (!(dt > 0.0)) throw std::invalid_argument("simulate_step: dt must be > 0");
  const double half = 0.5 * c.arena_extent;
  const double x0 = s.pusher_x, y0 = s.pusher_y;
  const double plim = half - c.pusher_radius;
  s.pusher_x = std::clamp(s.pusher_x + u[0] * dt, -plim, plim);
  s.pusher_y = std::clamp(s.pusher_y + u[1] * dt, -plim, plim);
  s.pusher_vx = (s.pusher_x - x0) / dt;
  s.pusher_vy = (s.pusher_y - y0) / dt;

  StepSample out;
  std::normal_distribution<double> noise(0.0, c.sensor_noise);
  const Contact contact = find_contact(s, c);
  if (contact.active) {
    const double fx = c.stiffness * contact.depth * contact.normal[0];
    const double fy = c.stiffness * contact.depth * contact.normal[1];
    const double torque = contact.offset[0] * fy - contact.offset[1] * fx;
    const double blim = half - c.block_half_side;
    s.block_x = std::clamp(s.block_x + c.mobility_translation * fx * dt, -blim, blim);
    s.block_y = std::clamp(s.block_y + c.mobility_translation * fy * dt, -blim, blim);
    s.block_theta += c.mobility_rotation * torque * dt;
    out.contact = true;
    out.haptic = {fx + noise(rng), fy + noise(rng), torque + noise(rng)};
  }
  out.proprio = {s.pusher_x + noise(rng), s.pusher_y + noise(rng), s.pusher_vx + noise(rng),
                 s.pusher_vy + noise(rng)};
  return out;
}

// Rendering -----------------------------------------------------------------

Scene scene_of(const State& s) {
  return {std::array<double, 3>{s.block_x, s.block_y, s.block_theta},
          std::array<double, 2>{s.pusher_x, s.pusher_y}};
}

std::vector<float> render(const Scene& scene, const SimConfig& c) {
  constexpr int kSuper = 4;
  const std::size_t n = c.image_size;
  const double px_size = c.arena_extent / static_cast<double>(n);
  const double half_n = 0.5 * static_cast<double>(n);
  std::vector<float> img(n * n, 0.0f);
  const double h = c.block_half_side;
  const double r2 = c.pusher_radius * c.pusher_radius;
  double cs = 1.0, sn = 0.0;
  if (scene.block) {
    cs = std::cos((*scene.block)[2]);
    sn = std::sin((*scene.block)[2]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int a = 0; a < kSuper; ++a) {
        // Offsets (a + 0.5) / 4 are symmetric about the pixel center, so
        // mirrored pixels sample exactly mirrored points.
        const double y = (half_n - (static_cast<double>(i) + (a + 0.5) / kSuper)) * px_size;
        for (int b = 0; b < kSuper; ++b) {
          const double x = (static_cast<double>(j) + (b + 0.5) / kSuper - half_n) * px_size;
          if (scene.pusher) {
            const double dx = x - (*scene.pusher)[0], dy = y - (*scene.pusher)[1];
            if (dx * dx + dy * dy <= r2) {
              acc += 0.4;
              continue;
            }
          }
          if (scene.block) {
            const double dx = x - (*scene.block)[0], dy = y - (*scene.block)[1];
            const double lx = cs * dx + sn * dy, ly = -sn * dx + cs * dy;
            if (std::abs(lx) <= h && std::abs(ly) <= h) acc += 0.8;
          }
        }
      }
      img[i * n + j] = static_cast<float>(acc / (kSuper * kSuper));
    }
  }
  return img;
}

// Trajectories ----------------------------------------------------------------

Trajectory simulate_trajectory(const SimConfig& c, std::size_t index) {
  c.validate();
  std::seed_seq seq{static_cast<std::uint64_t>(c.seed), static_cast<std::uint64_t>(index),
                    std::uint64_t{0x5eed}};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> mean_noise(0.0, c.action_mean_std);
  std::normal_distribution<double> step_noise(0.0, c.action_step_std);

  State s;
  const double phi = angle(rng);
  s.pusher_x = c.start_radius * std::cos(phi);
  s.pusher_y = c.start_radius * std::sin(phi);
  const std::array<double, 2> mean{-c.action_speed * std::cos(phi) + mean_noise(rng),
                                   -c.action_speed * std::sin(phi) + mean_noise(rng)};

  const std::size_t T = c.steps, W = c.substeps, P = c.image_size * c.image_size;
  Trajectory tr;
  tr.images.reserve(T * P);
  tr.proprio.reserve(T * W * 4);
  tr.haptic.reserve(T * W * 3);
  tr.controls.reserve((T - 1) * 2);
  tr.labels.reserve(T * 3);
  const double dt = c.frame_dt / static_cast<double>(W);

  for (std::size_t t = 0; t < T; ++t) {
    // The first frame's window holds the pusher at rest; afterwards each
    // window covers the substeps driven by the previous control.
    std::array<double, 2> u{0.0, 0.0};
    if (t > 0) {
      u = {mean[0] + step_noise(rng), mean[1] + step_noise(rng)};
      tr.controls.push_back(static_cast<float>(u[0]));
      tr.controls.push_back(static_cast<float>(u[1]));
    }
    for (std::size_t w = 0; w < W; ++w) {
      const StepSample sample = simulate_step(s, u, dt, c, rng);
      for (double v : sample.proprio) tr.proprio.push_back(static_cast<float>(v));
      for (double v : sample.haptic) tr.haptic.push_back(static_cast<float>(v));
      tr.any_contact = tr.any_contact || sample.contact;
    }
    auto img = render(scene_of(s), c);
    tr.images.insert(tr.images.end(), img.begin(), img.end());
    tr.labels.push_back(static_cast<float>(s.block_x));
    tr.labels.push_back(static_cast<float>(s.block_y));
    tr.labels.push_back(static_cast<float>(s.block_theta));
  }
  return tr;
}

// Dataset -------------------------------------------------------------------

json to_json(const Manifest& m) {
  return json{{"version", m.version},
              {"num_trajectories", m.num_trajectories},
              {"steps", m.steps},
              {"image_height", m.image_height},
              {"image_width", m.image_width},
              {"window", m.window},
              {"proprio_dim", m.proprio_dim},
              {"haptic_dim", m.haptic_dim},
              {"control_dim", m.control_dim},
              {"label_dim", m.label_dim},
              {"dtype", m.dtype},
              {"seed", m.seed},
              {"sim", to_json(m.sim)},
              {"contact_fraction", m.contact_fraction},
              {"split", {{"train", m.train_indices}, {"eval", m.eval_indices}}}};
}

Manifest manifest_from_json(const json& j) {
  Manifest m;
  try {
    JsonFields f(j, "manifest");
    f.read("version", m.version);
    if (m.version != 1) throw FormatError("manifest.json: unsupported version " + std::to_string(m.version));
    f.read("num_trajectories", m.num_trajectories);
    f.read("steps", m.steps);
    f.read("image_height", m.image_height);
    f.read("image_width", m.image_width);
    f.read("window", m.window);
    f.read("proprio_dim", m.proprio_dim);
    f.read("haptic_dim", m.haptic_dim);
    f.read("control_dim", m.control_dim);
    f.read("label_dim", m.label_dim);
    f.read("dtype", m.dtype);
    f.read("seed", m.seed);
    f.read("contact_fraction", m.contact_fraction);
    if (const json* sim = f.child("sim")) m.sim = sim_config_from_json(*sim);
    if (const json* split = f.child("split")) {
      JsonFields s(*split, "manifest.split");
      s.read("train", m.train_indices);
      s.read("eval", m.eval_indices);
      s.finish();
    }
    f.finish();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  if (m.dtype != "f32le") throw FormatError("manifest.json: unsupported dtype " + m.dtype);
  if (m.num_trajectories == 0 || m.steps < 2 || m.image_height == 0 || m.image_width == 0 || m.window == 0) {
    throw FormatError("manifest.json: empty dimensions");
  }
  for (auto idx : m.train_indices) {
    if (idx >= m.num_trajectories) throw FormatError("manifest.json: split index out of range");
  }
  for (auto idx : m.eval_indices) {
    if (idx >= m.num_trajectories) throw FormatError("manifest.json: split index out of range");
  }
  return m;
}

const float* Dataset::image(std::size_t n, std::size_t t) const {
  return images.data() + (n * manifest.steps + t) * image_size();
}
const float* Dataset::proprio_window(std::size_t n, std::size_t t) const {
  return proprio.data() + (n * manifest.steps + t) * manifest.window * manifest.proprio_dim;
}
const float* Dataset::haptic_window(std::size_t n, std::size_t t) const {
  return haptic.data() + (n * manifest.steps + t) * manifest.window * manifest.haptic_dim;
}
const float* Dataset::control(std::size_t n, std::size_t t) const {
  return controls.data() + (n * (manifest.steps - 1) + t) * manifest.control_dim;
}
const float* Dataset::label(std::size_t n, std::size_t t) const {
  return labels.data() + (n * manifest.steps + t) * manifest.label_dim;
}

Dataset generate_dataset(const SimConfig& c, std::size_t n, double eval_fraction) {
  c.validate();
  if (n == 0) throw ConfigError("generate_dataset: need at least one trajectory");
  if (!(eval_fraction >= 0.0 && eval_fraction < 1.0)) throw ConfigError("eval fraction must be in [0, 1)");
  std::vector<Trajectory> trajs(n);
  parallel_for(n, [&](std::size_t i) { trajs[i] = simulate_trajectory(c, i); });

  Dataset d;
  auto& m = d.manifest;
  m.num_trajectories = n;
  m.steps = c.steps;
  m.image_height = m.image_width = c.image_size;
  m.window = c.substeps;
  m.seed = c.seed;
  m.sim = c;
  std::size_t contacts = 0;
  for (auto& tr : trajs) {
    d.images.insert(d.images.end(), tr.images.begin(), tr.images.end());
    d.proprio.insert(d.proprio.end(), tr.proprio.begin(), tr.proprio.end());
    d.haptic.insert(d.haptic.end(), tr.haptic.begin(), tr.haptic.end());
    d.controls.insert(d.controls.end(), tr.controls.begin(), tr.controls.end());
    d.labels.insert(d.labels.end(), tr.labels.begin(), tr.labels.end());
    contacts += tr.any_contact ? 1 : 0;
  }
  m.contact_fraction = static_cast<double>(contacts) / static_cast<double>(n);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::seed_seq split_seq{static_cast<std::uint64_t>(c.seed), std::uint64_t{0x5b117}};
  std::mt19937_64 split_rng(split_seq);
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n_eval = static_cast<std::size_t>(std::llround(eval_fraction * static_cast<double>(n)));
  m.eval_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_eval));
  m.train_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(n_eval), order.end());
  std::sort(m.eval_indices.begin(), m.eval_indices.end());
  std::sort(m.train_indices.begin(), m.train_indices.end());
  return d;
}

namespace {

struct FileSpec {
  const char* name;
  std::size_t count;
};

std::vector<FileSpec> file_specs(const Manifest& m) {
  const std::size_t N = m.num_trajectories, T = m.steps;
  return {{"images.bin", N * T * m.image_height * m.image_width},
          {"proprio.bin", N * T * m.window * m.proprio_dim},
          {"haptic.bin", N * T * m.window * m.haptic_dim},
          {"controls.bin", N * (T - 1) * m.control_dim},
          {"labels.bin", N * T * m.label_dim}};
}

}  // namespace

void save_dataset(const Dataset& d, const fs::path& dir, bool overwrite) {
  const auto specs = file_specs(d.manifest);
  const std::vector<const std::vector<float>*> arrays{&d.images, &d.proprio, &d.haptic, &d.controls, &d.labels};
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (arrays[i]->size() != specs[i].count) {
      throw std::invalid_argument(std::string("save_dataset: ") + specs[i].name + " holds " +
                                  std::to_string(arrays[i]->size()) + " values, manifest implies " +
                                  std::to_string(specs[i].count));
    }
  }
  io::StagedDirectory stage(dir, overwrite);
  io::write_text(stage.path() / "manifest.json", to_json(d.manifest).dump(2) + "\n");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    io::write_le<float>(stage.path() / specs[i].name, *arrays[i]);
  }
  stage.commit();
}

Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw FormatError("dataset directory " + dir.string() + " does not exist");
  Dataset d;
  json j;
  try {
    j = json::parse(io::read_text(dir / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  d.manifest = manifest_from_json(j);
  const auto specs = file_specs(d.manifest);
  std::vector<std::vector<float>*> arrays{&d.images, &d.proprio, &d.haptic, &d.controls, &d.labels};
  for (std::size_t i = 0; i < specs.size(); ++i) {
    *arrays[i] = io::read_le<float>(dir / specs[i].name, specs[i].count);
  }
  return d;
}

}  // namespace mmdyn::sim
