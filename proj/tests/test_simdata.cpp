#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "mmdyn/errors.hpp"
#include "mmdyn/io.hpp"
#include "mmdyn/simdata.hpp"

using namespace mmdyn;
using namespace mmdyn::sim;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("mmdyn_test_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

SimConfig small(std::uint64_t seed) {
  SimConfig c = profile("desk");
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("pusher far from the block leaves it in place") {
  const auto c = small(0);
  std::mt19937_64 rng(1);
  State s;
  s.pusher_x = 4.0;
  s.pusher_y = 4.0;
  double mean_fx = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto out = simulate_step(s, {-0.1, 0.0}, 0.03, c, rng);
    CHECK_FALSE(out.contact);
    mean_fx += out.haptic[0];
  }
  CHECK(s.block_x == 0.0);
  CHECK(s.block_y == 0.0);
  CHECK(s.block_theta == 0.0);
  CHECK(mean_fx == 0.0);
}

TEST_CASE("pushing straight at the center translates without rotation") {
  const auto c = small(0);
  std::mt19937_64 rng(2);
  State s;
  s.pusher_x = -2.0;
  for (int i = 0; i < 200; ++i) simulate_step(s, {1.0, 0.0}, 0.03, c, rng);
  CHECK(s.block_x > 0.5);
  CHECK(s.block_y == 0.0);
  CHECK(s.block_theta == 0.0);
}

TEST_CASE("rotation sign follows the contact cross product") {
  // Pusher below the block, left of center, moving up.
  const auto c = small(0);
  State s;
  s.pusher_x = -0.5;
  s.pusher_y = -c.block_half_side - c.pusher_radius + 0.05;
  const auto contact = find_contact(s, c);
  REQUIRE(contact.active);
  const double fx = c.stiffness * contact.depth * contact.normal[0];
  const double fy = c.stiffness * contact.depth * contact.normal[1];
  // Oracle: z component of offset x force, evaluated independently.
  const double cx = s.pusher_x - s.block_x, cy = -c.block_half_side;
  const double oracle = cx * fy - cy * fx;
  CHECK(fy > 0.0);
  CHECK(oracle < 0.0);  // clockwise: the left edge is lifted
  std::mt19937_64 rng(3);
  State moved = s;
  simulate_step(moved, {0.0, 0.0}, 0.01, c, rng);
  CHECK(std::signbit(moved.block_theta) == std::signbit(oracle));
  CHECK(moved.block_theta == doctest::Approx(c.mobility_rotation * oracle * 0.01).epsilon(1e-12));

  // Mirror image: contact right of center turns the other way.
  State mirrored = s;
  mirrored.pusher_x = 0.5;
  simulate_step(mirrored, {0.0, 0.0}, 0.01, c, rng);
  CHECK(mirrored.block_theta == doctest::Approx(-moved.block_theta).epsilon(1e-12));
}

TEST_CASE("the block never moves without contact force") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto c = small(seed);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> pos(-4.0, 4.0), ang(-1.0, 1.0), vel(-3.0, 3.0);
    for (int trial = 0; trial < 200; ++trial) {
      State s;
      s.block_x = pos(rng) * 0.5;
      s.block_y = pos(rng) * 0.5;
      s.block_theta = ang(rng);
      s.pusher_x = pos(rng);
      s.pusher_y = pos(rng);
      const State before = s;
      const auto out = simulate_step(s, {vel(rng), vel(rng)}, 0.03, c, rng);
      if (!out.contact) {
        CHECK(s.block_x == before.block_x);
        CHECK(s.block_y == before.block_y);
        CHECK(s.block_theta == before.block_theta);
        CHECK(out.haptic == std::array<double, 3>{0.0, 0.0, 0.0});
      }
    }
  }
}

TEST_CASE("empty arena renders black") {
  const auto img = render(Scene{}, small(0));
  REQUIRE(img.size() == 32u * 32u);
  for (float v : img) CHECK(v == 0.0f);
}

TEST_CASE("centered axis-aligned block renders mirror symmetric") {
  const auto c = small(0);
  Scene scene;
  scene.block = std::array<double, 3>{0.0, 0.0, 0.0};
  const auto img = render(scene, c);
  const std::size_t n = c.image_size;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) CHECK(img[i * n + j] == img[i * n + (n - 1 - j)]);
  }
}

TEST_CASE("block pixel area matches the analytic footprint") {
  for (const char* name : {"desk", "paper"}) {
    const auto c = profile(name);
    Scene scene;
    scene.block = std::array<double, 3>{0.37, -0.81, 0.0};
    const auto img = render(scene, c);
    double area = 0.0;
    for (float v : img) area += v / 0.8;
    const double expected = std::pow(2.0 * c.block_half_side / c.arena_extent * static_cast<double>(c.image_size), 2);
    CHECK(std::abs(area - expected) <= 0.1 * expected);
  }
}

TEST_CASE("pixels lie in [0, 1] and every generated value is finite") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto c = small(seed);
    const auto d = generate_dataset(c, 5);
    for (float v : d.images) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    for (const auto* arr : {&d.proprio, &d.haptic, &d.controls, &d.labels}) {
      for (float v : *arr) CHECK(std::isfinite(v));
    }
  }
}

TEST_CASE("every frame carries exactly W high-rate samples") {
  auto c = small(4);
  c.substeps = 4;
  const auto d = generate_dataset(c, 3);
  CHECK(d.proprio.size() == 3u * c.steps * 4u * 4u);
  CHECK(d.haptic.size() == 3u * c.steps * 4u * 3u);
  CHECK(d.controls.size() == 3u * (c.steps - 1) * 2u);
  CHECK(d.manifest.window == 4u);
}

TEST_CASE("frames with an all-zero haptic window keep the previous pose") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto d = generate_dataset(small(seed), 10);
    const auto& m = d.manifest;
    for (std::size_t n = 0; n < m.num_trajectories; ++n) {
      for (std::size_t t = 0; t < m.steps; ++t) {
        const float* h = d.haptic_window(n, t);
        if (std::any_of(h, h + m.window * m.haptic_dim, [](float v) { return v != 0.0f; })) continue;
        const float* now = d.label(n, t);
        const float before[3] = {0.0f, 0.0f, 0.0f};
        const float* prev = t == 0 ? before : d.label(n, t - 1);
        for (int k = 0; k < 3; ++k) CHECK(now[k] == prev[k]);
      }
    }
  }
}

TEST_CASE("most trajectories contain contact") {
  const auto d = generate_dataset(profile("desk"), profile_trajectories("desk"));
  std::size_t touched = 0;
  const auto& m = d.manifest;
  for (std::size_t n = 0; n < m.num_trajectories; ++n) {
    const float* h = d.haptic_window(n, 0);
    const std::size_t count = m.steps * m.window * m.haptic_dim;
    touched += std::any_of(h, h + count, [](float v) { return v != 0.0f; }) ? 1 : 0;
  }
  const double fraction = static_cast<double>(touched) / static_cast<double>(m.num_trajectories);
  CHECK(fraction >= 0.8);
  CHECK(m.contact_fraction == doctest::Approx(fraction));
}

TEST_CASE("manifest echoes the request and the split is 90/10") {
  const auto d = generate_dataset(small(7), 40);
  const auto& m = d.manifest;
  CHECK(m.num_trajectories == 40u);
  CHECK(m.steps == 16u);
  CHECK(m.image_height == 32u);
  CHECK(m.train_indices.size() == 36u);
  CHECK(m.eval_indices.size() == 4u);
  std::vector<std::size_t> all = m.train_indices;
  all.insert(all.end(), m.eval_indices.begin(), m.eval_indices.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);
  CHECK(m.sim.action_speed == small(7).action_speed);
}

TEST_CASE("same seed gives byte-identical datasets on disk") {
  TempDir a("sim_a"), b("sim_b");
  save_dataset(generate_dataset(small(11), 12), a.path);
  save_dataset(generate_dataset(small(11), 12), b.path);
  for (const char* f : {"manifest.json", "images.bin", "proprio.bin", "haptic.bin", "controls.bin", "labels.bin"}) {
    INFO(f);
    CHECK(file_bytes(a.path / f) == file_bytes(b.path / f));
  }
  TempDir c("sim_c");
  save_dataset(generate_dataset(small(12), 12), c.path);
  CHECK(file_bytes(a.path / "images.bin") != file_bytes(c.path / "images.bin"));
}

TEST_CASE("save, load, save is byte-identical") {
  TempDir a("rt_a"), b("rt_b");
  const auto d = generate_dataset(small(13), 9);
  save_dataset(d, a.path);
  const auto loaded = load_dataset(a.path);
  CHECK(loaded.images == d.images);
  CHECK(loaded.labels == d.labels);
  CHECK(loaded.manifest.train_indices == d.manifest.train_indices);
  save_dataset(loaded, b.path);
  for (const char* f : {"manifest.json", "images.bin", "proprio.bin", "haptic.bin", "controls.bin", "labels.bin"}) {
    CHECK(file_bytes(a.path / f) == file_bytes(b.path / f));
  }
}

TEST_CASE("truncated or resized binaries are rejected by name") {
  TempDir a("corrupt");
  save_dataset(generate_dataset(small(14), 4), a.path);
  fs::resize_file(a.path / "haptic.bin", fs::file_size(a.path / "haptic.bin") - 1);
  try {
    load_dataset(a.path);
    FAIL("expected a FormatError");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("haptic.bin") != std::string::npos);
    CHECK(msg.find("expected") != std::string::npos);
  }
}

TEST_CASE("manifest byte counts that disagree with the files are rejected") {
  TempDir a("manifest");
  save_dataset(generate_dataset(small(15), 4), a.path);
  auto j = nlohmann::json::parse(io::read_text(a.path / "manifest.json"));
  j["num_trajectories"] = 5;
  io::write_text(a.path / "manifest.json", j.dump());
  CHECK_THROWS_AS(load_dataset(a.path), FormatError);
}

TEST_CASE("existing dataset directories are not overwritten by default") {
  TempDir a("exists");
  const auto d = generate_dataset(small(16), 2);
  save_dataset(d, a.path);
  CHECK_THROWS(save_dataset(d, a.path));
  CHECK_NOTHROW(save_dataset(d, a.path, true));
}

TEST_CASE("the paper profile generates and loads unchanged") {
  TempDir a("paper");
  auto c = profile("paper");
  CHECK(profile_trajectories("paper") == 4800u);
  const auto d = generate_dataset(c, 2);
  save_dataset(d, a.path);
  const auto loaded = load_dataset(a.path);
  CHECK(loaded.manifest.image_height == 64u);
  CHECK(loaded.manifest.image_width == 64u);
  CHECK(loaded.manifest.steps == 16u);
  CHECK(loaded.manifest.window == 32u);
  CHECK(loaded.images == d.images);
}

TEST_CASE("invalid simulator settings are rejected") {
  auto c = small(0);
  c.stiffness = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small(0);
  c.substeps = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(sim_config_from_json(nlohmann::json{{"stifness", 3.0}}), ConfigError);
  CHECK_THROWS_AS(profile("huge"), ConfigError);
}
