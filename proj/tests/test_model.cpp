#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "mmdyn/checks.hpp"
#include "mmdyn/errors.hpp"
#include "mmdyn/io.hpp"
#include "mmdyn/model.hpp"

using namespace mmdyn;
namespace fs = std::filesystem;
using T64 = Tensor<double>;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("mmdyn_model_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void fill(Tensor<double> t, double value) {
  auto v = t.mutable_values();
  std::fill(v.begin(), v.end(), value);
}

sim::Dataset tiny_data(std::uint64_t seed, std::size_t n) { return sim::generate_dataset(checks::tiny_sim_config(seed), n); }

ModelConfig tiny(const sim::Dataset& d, const std::string& variant, std::uint64_t seed = 0) {
  auto c = checks::tiny_model_config(d.manifest, variant);
  c.seed = seed;
  return c;
}

std::vector<std::size_t> first(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

T64 noise_for(const SequenceBatch<double>& b, std::size_t K, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return standard_normal<double>(b.steps * b.batch, K, rng);
}

// Copies every parameter of `to` from the same-named parameter of `from`.
void copy_by_name(const ParameterStore<double>& from, ParameterStore<double>& to) {
  for (const auto& p : to.parameters()) {
    const auto& src = from.at(p.name);
    Tensor<double> dst = p.tensor;
    std::copy(src.tensor.values().begin(), src.tensor.values().end(), dst.mutable_values().begin());
    if (p.weight_norm) {
      Tensor<double> scale = p.scale;
      std::copy(src.scale.values().begin(), src.scale.values().end(), scale.mutable_values().begin());
    }
  }
}

bool all_equal(const T64& a, const T64& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

TrainOptions epochs(std::size_t n) {
  TrainOptions o;
  o.epochs = n;
  return o;
}

}  // namespace

TEST_CASE("variants select their experts and decoders") {
  auto m = Modalities::parse("VHP");
  CHECK((m.image && m.proprio && m.haptic && !m.concat));
  m = Modalities::parse("VHP-C");
  CHECK((m.image && m.proprio && m.haptic && m.concat));
  m = Modalities::parse("VH");
  CHECK((m.image && !m.proprio && m.haptic));
  m = Modalities::parse("V");
  CHECK((m.image && !m.proprio && !m.haptic));
  CHECK_THROWS_AS(Modalities::parse("VX"), ConfigError);
  const auto d = tiny_data(0, 2);
  Model<double> vhpc(tiny(d, "VHP-C"));
  CHECK(vhpc.params().contains("fusion.head.mean.weight"));
  CHECK_FALSE(vhpc.params().contains("haptic.head.mean.weight"));
}

TEST_CASE("model config parsing is strict and round-trips") {
  ModelConfig c;
  c.variant = "VH";
  c.latent_dim = 7;
  const auto back = model_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK_THROWS_AS(model_config_from_json(nlohmann::json{{"latent_dims", 3}}), ConfigError);
  CHECK_THROWS_AS(model_config_from_json(nlohmann::json{{"variant", "VV"}}), ConfigError);
}

TEST_CASE("degenerate experts leave the posterior at the prior") {
  const auto d = tiny_data(1, 3);
  Model<double> model(tiny(d, "PH", 1));
  checks::jitter_parameters(model.params(), 2);
  for (const char* head : {"proprio.head", "haptic.head"}) {
    const auto& p = model.params().at(std::string(head) + ".pre_var.weight");
    fill(p.scale, 0.0);
    fill(model.params().at(std::string(head) + ".pre_var.bias").tensor, 1e9);
  }
  const auto batch = make_batch<double>(d, {0, 1, 2});
  const auto noise = noise_for(batch, 3, 3);
  const auto trace = model.filter(batch, noise);
  for (std::size_t t = 0; t < batch.steps; ++t) {
    for (std::size_t i = 0; i < trace.prior[t].mean().numel(); ++i) {
      CHECK(trace.posterior[t].mean()[i] == doctest::Approx(trace.prior[t].mean()[i]).epsilon(1e-6));
      CHECK(trace.posterior[t].var()[i] == doctest::Approx(trace.prior[t].var()[i]).epsilon(1e-6));
    }
  }
  for (double kl : model.elbo(batch, noise).kl) CHECK(std::abs(kl) < 1e-6);
}

TEST_CASE("a very broad initial prior hands step one to the expert") {
  const auto d = tiny_data(2, 2);
  auto c = tiny(d, "V", 2);
  c.prior_var = 1e10;
  Model<double> model(c);
  const auto batch = make_batch<double>(d, {0, 1});
  const auto trace = model.filter(batch, noise_for(batch, 3, 4));
  const auto& expert = trace.experts.at("image").front();
  for (std::size_t i = 0; i < expert.mean().numel(); ++i) {
    CHECK(trace.posterior[0].mean()[i] == doctest::Approx(expert.mean()[i]).epsilon(1e-6));
    CHECK(trace.posterior[0].var()[i] == doctest::Approx(expert.var()[i]).epsilon(1e-6));
  }
}

TEST_CASE("filtering is causal") {
  const auto d = tiny_data(3, 2);
  Model<double> model(tiny(d, "PH", 3));
  checks::jitter_parameters(model.params(), 5);
  const auto batch = make_batch<double>(d, {0, 1});
  const auto noise = noise_for(batch, 3, 6);
  const auto base = model.filter(batch, noise);
  for (std::size_t t = 0; t < batch.steps; ++t) {
    auto perturbed = batch;
    std::vector<double> v(batch.proprio.values().begin(), batch.proprio.values().end());
    const std::size_t row = batch.proprio.numel() / (batch.steps * batch.batch);
    for (std::size_t i = t * batch.batch * row; i < (t + 1) * batch.batch * row; ++i) v[i] += 0.5;
    perturbed.proprio = T64::from(batch.proprio.shape(), v);
    const auto trace = model.filter(perturbed, noise);
    for (std::size_t s = 0; s < batch.steps; ++s) {
      const bool same = all_equal(trace.posterior[s].mean(), base.posterior[s].mean()) &&
                        all_equal(trace.posterior[s].var(), base.posterior[s].var());
      INFO("perturbed step " << t << ", posterior step " << s);
      CHECK(same == (s < t));
    }
  }
}

TEST_CASE("KL terms are non-negative and posteriors are sharper than priors") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto d = tiny_data(seed, 3);
    for (const char* variant : {"PH", "PH-C", "VHP"}) {
      Model<double> model(tiny(d, variant, seed));
      checks::jitter_parameters(model.params(), seed + 100, 0.3);
      const auto batch = make_batch<double>(d, {0, 1, 2});
      const auto noise = noise_for(batch, 3, seed + 200);
      for (double kl : model.elbo(batch, noise).kl) CHECK(kl >= 0.0);
      const auto trace = model.filter(batch, noise);
      REQUIRE(trace.posterior.size() == batch.steps);
      REQUIRE(trace.prior.size() == batch.steps);
      REQUIRE(trace.z.size() == batch.steps);
      REQUIRE(trace.hidden.size() == batch.steps);
      for (std::size_t t = 0; t < batch.steps; ++t) {
        const auto& q = trace.posterior[t].var();
        for (std::size_t i = 0; i < q.numel(); ++i) {
          CHECK(q[i] <= trace.prior[t].var()[i] + kVarFloor);
          for (const auto& [name, experts] : trace.experts) CHECK(q[i] <= experts[t].var()[i] + kVarFloor);
        }
      }
    }
  }
}

TEST_CASE("dropping the haptic expert from VHP reproduces VP exactly") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto d = tiny_data(seed, 2);
    Model<double> full(tiny(d, "VHP", seed));
    checks::jitter_parameters(full.params(), seed + 7);
    Model<double> reduced(tiny(d, "VP", seed + 1));
    copy_by_name(full.params(), reduced.params());
    const auto batch = make_batch<double>(d, {0, 1});
    const auto noise = noise_for(batch, 3, seed + 8);
    const ExpertHook<double> drop_haptic = [](const std::string& modality, std::size_t,
                                              const DiagGaussian<double>& e) -> std::optional<DiagGaussian<double>> {
      if (modality == "haptic") return std::nullopt;
      return e;
    };
    const auto a = full.filter(batch, noise, drop_haptic);
    const auto b = reduced.filter(batch, noise);
    for (std::size_t t = 0; t < batch.steps; ++t) {
      CHECK(all_equal(a.posterior[t].mean(), b.posterior[t].mean()));
      CHECK(all_equal(a.posterior[t].var(), b.posterior[t].var()));
      CHECK(all_equal(a.prior[t].mean(), b.prior[t].mean()));
    }
  }
}

TEST_CASE("missing modalities and bad noise are rejected") {
  const auto d = tiny_data(4, 2);
  Model<double> model(tiny(d, "VH", 4));
  auto batch = make_batch<double>(d, {0, 1});
  const auto noise = noise_for(batch, 3, 1);
  auto no_haptic = batch;
  no_haptic.haptic = T64();
  try {
    model.filter(no_haptic, noise);
    FAIL("expected a ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("haptic") != std::string::npos);
  }
  auto narrow = batch;
  narrow.haptic = T64::zeros({batch.steps * batch.batch, 3, 8});
  try {
    model.filter(narrow, noise);
    FAIL("expected a ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("haptic") != std::string::npos);
  }
  CHECK_THROWS_AS(model.filter(batch, T64::zeros({3, 3})), ShapeError);
}

TEST_CASE("ELBO gradients match finite differences on tiny instances") {
  for (const char* variant : {"PH", "PH-C", "VHP", "VHP-C"}) {
    const auto r = checks::gradcheck_tiny(7, variant);
    INFO(variant << " worst " << r.result.worst_leaf);
    CHECK(r.result.max_relative_error <= 1e-4);
    CHECK(r.result.entries_checked > 0);
  }
}

TEST_CASE("importance-sampled likelihood bounds the ELBO from above") {
  const auto r = checks::elbo_bound_check(20, 200, 11);
  CHECK(r.rows.size() == 20u);
  CHECK(r.holding >= 18u);
}

TEST_CASE("prediction shapes and no access to future observations") {
  const auto d = tiny_data(5, 3);
  Model<double> model(tiny(d, "VHP", 5));
  checks::jitter_parameters(model.params(), 9);
  const auto full = make_batch<double>(d, {0, 1, 2});
  const std::size_t k = 2, h = 2, B = 3;
  const auto controls = ops::slice(full.controls, 0, (k - 1) * B, (k + h - 1) * B);
  const auto p = model.predict(full.steps_range(0, k), controls, h);
  REQUIRE(p.latents.size() == h);
  CHECK(p.latents[0].shape() == Shape{B, 3});
  CHECK(p.images.shape() == Shape{h * B, 8, 8});
  CHECK(p.proprio.shape() == Shape{h * B, 4, 4});
  CHECK(p.haptic.shape() == Shape{h * B, 3, 4});

  // Zero every future frame: the prediction must not change.
  auto blind = full;
  auto zero_after = [&](const T64& t) {
    std::vector<double> v(t.values().begin(), t.values().end());
    std::fill(v.begin() + static_cast<std::ptrdiff_t>(k * B * (t.numel() / (full.steps * B))), v.end(), 0.0);
    return T64::from(t.shape(), v);
  };
  blind.images = zero_after(full.images);
  blind.proprio = zero_after(full.proprio);
  blind.haptic = zero_after(full.haptic);
  const auto q = model.predict(blind.steps_range(0, k), controls, h);
  CHECK(all_equal(p.images, q.images));
  for (std::size_t j = 0; j < h; ++j) CHECK(all_equal(p.latents[j], q.latents[j]));

  CHECK_THROWS(model.predict(full.steps_range(0, k), controls, 0));
  CHECK_THROWS_AS(model.predict(full.steps_range(0, k), ops::slice(controls, 0, 0, B), h), ShapeError);
}

TEST_CASE("zero epochs leave parameters untouched") {
  const auto d = tiny_data(6, 8);
  Model<double> model(tiny(d, "PH", 6));
  const auto before = model.params().snapshot();
  AdamState<double> adam;
  const auto r = train(model, adam, d, first(8), epochs(0));
  CHECK(r.loss_trace.empty());
  CHECK(r.steps == 0u);
  CHECK(model.params().snapshot() == before);
}

TEST_CASE("loss trace length is epochs times whole batches") {
  const auto d = tiny_data(7, 9);
  Model<double> model(tiny(d, "PH", 7));
  AdamState<double> adam;
  const auto r = train(model, adam, d, first(9), epochs(3));
  CHECK(r.loss_trace.size() == 3u * (9u / 2u));
  CHECK(r.steps == r.loss_trace.size());
  CHECK_FALSE(r.diverged);
}

TEST_CASE("training is bitwise deterministic per seed") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto d = tiny_data(seed, 6);
    auto run = [&](std::uint64_t model_seed) {
      Model<double> model(tiny(d, "PH", model_seed));
      AdamState<double> adam;
      return train(model, adam, d, first(6), epochs(2)).loss_trace;
    };
    const auto a = run(seed), b = run(seed), c = run(seed + 1000);
    CHECK(a == b);
    CHECK(a != c);
  }
}

TEST_CASE("divergence restores the last good parameters") {
  const auto d = tiny_data(8, 4);
  auto c = tiny(d, "PH", 8);
  c.float_mode = true;
  c.learning_rate = 1e30;
  Model<float> model(c);
  AdamState<float> adam;
  const auto r = train(model, adam, d, first(4), epochs(50));
  CHECK(r.diverged);
  CHECK_FALSE(r.message.empty());
  for (const auto& leaf : model.params().leaves()) {
    for (float v : leaf.tensor.values()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("training shapes must match the dataset") {
  const auto d = tiny_data(9, 4);
  auto c = tiny(d, "PH", 9);
  c.window = 8;
  Model<double> model(c);
  AdamState<double> adam;
  CHECK_THROWS_AS(train(model, adam, d, first(4), epochs(1)), ConfigError);
  Model<double> ok(tiny(d, "PH", 9));
  CHECK_THROWS_AS(train(ok, adam, d, first(1), epochs(1)), ConfigError);
}

TEST_CASE("training improves the ELBO and the reconstructions") {
  // Desk-shaped data with a narrower network so the harness stays quick.
  const auto d = sim::generate_dataset(sim::profile("desk"), 100);
  ModelConfig c;
  c.variant = "VHP";
  c.adopt_shapes(d.manifest);
  c.image_channels = {8, 16, 16, 32};
  c.window_channels = {8, 16};
  c.transition_hidden = 32;
  c.learning_rate = 3e-3;
  c.seed = 1;
  Model<float> model(c);
  const auto batch = make_batch<float>(d, d.manifest.train_indices);
  std::mt19937_64 rng(2);
  const auto noise = standard_normal<float>(batch.steps * batch.batch, c.latent_dim, rng);
  std::map<std::string, double> rec_before, rec_after;
  const double before = model.elbo(batch, noise).elbo.item();
  model.reconstruction_log_likelihood(batch, ops::concat(model.filter(batch, noise).z, 0), &rec_before);
  AdamState<float> adam;
  const auto r = train(model, adam, d, d.manifest.train_indices, epochs(5));
  CHECK_FALSE(r.diverged);
  const double after = model.elbo(batch, noise).elbo.item();
  model.reconstruction_log_likelihood(batch, ops::concat(model.filter(batch, noise).z, 0), &rec_after);
  CHECK(after > before);
  for (const auto& [name, value] : rec_before) {
    INFO(name);
    CHECK(rec_after.at(name) > value);
  }
}

TEST_CASE("checkpoints round-trip byte for byte") {
  const auto d = tiny_data(10, 2);
  Model<double> model(tiny(d, "VHP-C", 10));
  checks::jitter_parameters(model.params(), 3);
  TempDir a("ck_a"), b("ck_b");
  save_checkpoint(model, a.path, 42);
  CheckpointInfo info;
  const auto loaded = load_checkpoint<double>(a.path, &info);
  CHECK(info.training_step == 42u);
  CHECK(info.config.variant == "VHP-C");
  CHECK(loaded.params().snapshot() == model.params().snapshot());
  save_checkpoint(loaded, b.path, 42);
  CHECK(file_bytes(a.path / "manifest.json") == file_bytes(b.path / "manifest.json"));
  CHECK(file_bytes(a.path / "params.bin") == file_bytes(b.path / "params.bin"));
  CHECK_THROWS(save_checkpoint(model, a.path, 1));
  CHECK_THROWS_AS(load_checkpoint<float>(a.path), FormatError);

  ModelConfig fc = tiny(d, "PH", 10);
  fc.float_mode = true;
  Model<float> fmodel(fc);
  TempDir f("ck_f");
  save_checkpoint(fmodel, f.path, 0);
  CHECK(load_checkpoint<float>(f.path).params().snapshot() == fmodel.params().snapshot());
}

TEST_CASE("corrupted checkpoints are rejected by name") {
  const auto d = tiny_data(11, 2);
  Model<double> model(tiny(d, "PH", 11));
  TempDir a("ck_bad");
  save_checkpoint(model, a.path, 1);
  fs::resize_file(a.path / "params.bin", fs::file_size(a.path / "params.bin") - 8);
  try {
    load_checkpoint<double>(a.path);
    FAIL("expected a FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("params.bin") != std::string::npos);
  }

  TempDir b("ck_names");
  save_checkpoint(model, b.path, 1);
  auto j = nlohmann::json::parse(io::read_text(b.path / "manifest.json"));
  j["leaves"][0]["name"] = "proprio.encoder.renamed";
  io::write_text(b.path / "manifest.json", j.dump());
  CHECK_THROWS_AS(load_checkpoint<double>(b.path), FormatError);
  CHECK_THROWS_AS(load_checkpoint<double>(b.path / "missing"), FormatError);
}
