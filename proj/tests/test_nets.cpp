#include <doctest.h>

#include <cmath>
#include <random>

#include "mmdyn/checks.hpp"
#include "mmdyn/gradcheck.hpp"
#include "mmdyn/nets.hpp"

using namespace mmdyn;
using T64 = Tensor<double>;

namespace {

T64 uniform(Shape shape, std::mt19937_64& rng, double lo, double hi, bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return T64::from(std::move(shape), std::move(v), requires_grad);
}

// Tensors are handles, so a copy writes through to the stored parameter.
void fill(Tensor<double> t, double value) {
  auto v = t.mutable_values();
  std::fill(v.begin(), v.end(), value);
}

// Zeroes every weight-norm scale so that each layer outputs its bias alone.
void zero_weights(ParameterStore<double>& store, const std::string& prefix) {
  for (const auto& p : store.parameters()) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    if (p.weight_norm) {
      fill(p.scale, 0.0);
    } else if (p.name.find(".bias") == std::string::npos) {
      fill(p.tensor, 0.0);
    }
  }
}

double softplus(double x) { return std::log1p(std::exp(x)); }

}  // namespace

TEST_CASE("zero-weight head on a blank image gives N(0, softplus(b) + floor)") {
  std::mt19937_64 rng(1);
  ParameterStore<double> store;
  ImageEncoder<double> enc(store, "enc", 32, 32, {32, 64, 128, 256}, rng);
  auto head = GaussianHead<double>::create(store, "head", enc.feature_dim(), 16, rng);
  fill(head.mean.weight.scale, 0.0);
  fill(head.pre_var.weight.scale, 0.0);
  fill(head.pre_var.bias.tensor, 0.7);
  const auto g = head(enc.features(T64::zeros({2, 32, 32})));
  REQUIRE(g.shape() == Shape{2, 16});
  for (std::size_t i = 0; i < 32; ++i) {
    CHECK(g.mean()[i] == 0.0);
    CHECK(g.var()[i] == doctest::Approx(softplus(0.7) + kVarFloor).epsilon(1e-12));
  }
}

TEST_CASE("encoders are pure functions of their input") {
  std::mt19937_64 rng(2);
  ParameterStore<double> store;
  ImageEncoder<double> img(store, "img", 32, 32, {8, 8, 8, 8}, rng);
  LowDimEncoder<double> low(store, "low", 3, 8, {8, 16}, rng);
  const auto x = uniform({3, 32, 32}, rng, 0.0, 1.0);
  const auto w = uniform({3, 3, 8}, rng, -2.0, 2.0);
  const auto a = img.features(x), b = img.features(x);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  const auto c = low.features(w), d = low.features(w);
  for (std::size_t i = 0; i < c.numel(); ++i) CHECK(c[i] == d[i]);
}

TEST_CASE("expert mean gradients match finite differences") {
  std::mt19937_64 rng(3);
  ParameterStore<double> store;
  ImageEncoder<double> img(store, "img", 8, 8, {2, 3}, rng);
  LowDimEncoder<double> low(store, "low", 3, 4, {3, 4}, rng);
  auto head_img = GaussianHead<double>::create(store, "head_img", img.feature_dim(), 3, rng);
  auto head_low = GaussianHead<double>::create(store, "head_low", low.feature_dim(), 3, rng);
  checks::jitter_parameters(store, 4);
  const auto x = uniform({2, 8, 8}, rng, 0.0, 1.0);
  const auto w = uniform({2, 3, 4}, rng, -1.0, 1.0);
  const auto mix = uniform({2, 3}, rng, -1.0, 1.0);
  auto fn = [&] {
    auto a = ops::mul(head_img(img.features(x)).mean(), mix);
    auto b = ops::mul(head_low(low.features(w)).var(), mix);
    return ops::add(ops::sum(a), ops::sum(b));
  };
  const auto r = grad_check<double>(fn, store.leaves(), 1e-5);
  INFO("worst leaf " << r.worst_leaf);
  CHECK(r.max_relative_error <= 1e-4);
}

TEST_CASE("image decoder outputs stay in [0, 1] for random latents") {
  std::mt19937_64 rng(5);
  ParameterStore<double> store;
  ImageDecoder<double> dec(store, "dec", 16, 32, 32, {4, 4, 4, 4}, rng);
  const auto z = uniform({1000, 16}, rng, -10.0, 10.0);
  const auto y = dec.mean(z);
  REQUIRE(y.shape() == Shape{1000, 32, 32});
  for (double v : y.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("zero-weight image decoder outputs sigmoid of the last bias") {
  std::mt19937_64 rng(6);
  ParameterStore<double> store;
  ImageDecoder<double> dec(store, "dec", 16, 32, 32, {32, 64, 128, 256}, rng);
  zero_weights(store, "dec");
  fill(store.at("dec.deconv3.bias").tensor, 0.3);
  const auto y = dec.mean(uniform({3, 16}, rng, -1.0, 1.0));
  const double expected = 1.0 / (1.0 + std::exp(-0.3));
  for (double v : y.values()) CHECK(v == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("decoders invert encoder shapes") {
  std::mt19937_64 rng(7);
  for (std::size_t size : {32, 64}) {
    ParameterStore<double> store;
    ImageEncoder<double> enc(store, "enc", size, size, {4, 4, 4, 4}, rng);
    auto head = GaussianHead<double>::create(store, "head", enc.feature_dim(), 16, rng);
    ImageDecoder<double> dec(store, "dec", 16, size, size, {4, 4, 4, 4}, rng);
    const auto x = uniform({2, size, size}, rng, 0.0, 1.0);
    CHECK(dec.mean(head(enc.features(x)).mean()).shape() == x.shape());
  }
  for (std::size_t window : {8, 32}) {
    ParameterStore<double> store;
    LowDimEncoder<double> enc(store, "enc", 4, window, {32, 64}, rng);
    auto head = GaussianHead<double>::create(store, "head", enc.feature_dim(), 16, rng);
    LowDimDecoder<double> dec(store, "dec", 16, 4, window, {32, 64}, rng);
    const auto x = uniform({5, 4, window}, rng, -1.0, 1.0);
    CHECK(dec.mean(head(enc.features(x)).mean()).shape() == x.shape());
  }
}

TEST_CASE("shape mismatches are reported") {
  std::mt19937_64 rng(8);
  ParameterStore<double> store;
  ImageEncoder<double> img(store, "img", 32, 32, {4, 4, 4, 4}, rng);
  LowDimEncoder<double> low(store, "low", 3, 8, {4, 4}, rng);
  ImageDecoder<double> dec(store, "dec", 16, 32, 32, {4, 4, 4, 4}, rng);
  CHECK_THROWS_AS(img.features(T64::zeros({1, 16, 16})), ShapeError);
  CHECK_THROWS_AS(low.features(T64::zeros({1, 8, 3})), ShapeError);
  CHECK_THROWS_AS(dec.mean(T64::zeros({1, 8})), ShapeError);
  CHECK_THROWS_AS(ImageEncoder<double>(store, "bad", 30, 30, {4, 4, 4, 4}, rng), ConfigError);
  CHECK_THROWS_AS(LowDimEncoder<double>(store, "bad", 3, 6, {4, 4}, rng), ConfigError);
}

TEST_CASE("transition with A = I and B = 0 keeps the previous latent") {
  std::mt19937_64 rng(9);
  ParameterStore<double> store;
  TransitionGRU<double> tr(store, "tr", 4, 2, 16, rng);
  fill(store.at("tr.a_head.weight").scale, 0.0);
  fill(store.at("tr.b_head.weight").scale, 0.0);
  const auto z = uniform({3, 4}, rng, -2.0, 2.0);
  const auto out = tr(z, uniform({3, 2}, rng, -1.0, 1.0), uniform({3, 16}, rng, -1.0, 1.0));
  for (std::size_t i = 0; i < z.numel(); ++i) CHECK(out.prior.mean()[i] == doctest::Approx(z[i]).epsilon(1e-14));
  CHECK(out.a.shape() == Shape{3, 4, 4});
  CHECK(out.b.shape() == Shape{3, 4, 2});
}

TEST_CASE("transition with A = 0 and B = I follows the control") {
  std::mt19937_64 rng(10);
  ParameterStore<double> store;
  TransitionGRU<double> tr(store, "tr", 3, 3, 8, rng);
  fill(store.at("tr.a_head.weight").scale, 0.0);
  fill(store.at("tr.a_head.bias").tensor, 0.0);
  fill(store.at("tr.b_head.weight").scale, 0.0);
  T64 b_head_bias = store.at("tr.b_head.bias").tensor;
  auto b_bias = b_head_bias.mutable_values();
  for (std::size_t i = 0; i < 3; ++i) b_bias[i * 3 + i] = 1.0;
  const auto u = uniform({2, 3}, rng, -1.0, 1.0);
  const auto out = tr(uniform({2, 3}, rng, -5.0, 5.0), u, T64::zeros({2, 8}));
  for (std::size_t i = 0; i < u.numel(); ++i) CHECK(out.prior.mean()[i] == doctest::Approx(u[i]).epsilon(1e-14));
}

TEST_CASE("A starts near the identity") {
  std::mt19937_64 rng(11);
  ParameterStore<double> store;
  TransitionGRU<double> tr(store, "tr", 16, 2, 256, rng);
  const auto out = tr(uniform({4, 16}, rng, -1.0, 1.0), uniform({4, 2}, rng, -1.0, 1.0), uniform({4, 256}, rng, -1.0, 1.0));
  for (std::size_t n = 0; n < 4; ++n) {
    for (std::size_t i = 0; i < 16; ++i) {
      for (std::size_t j = 0; j < 16; ++j) {
        CHECK(std::abs(out.a[(n * 16 + i) * 16 + j] - (i == j ? 1.0 : 0.0)) < 0.05);
      }
    }
  }
}

TEST_CASE("transition variance respects the floor and the step is Markovian") {
  std::mt19937_64 rng(12);
  ParameterStore<double> store;
  TransitionGRU<double> tr(store, "tr", 16, 2, 32, rng);
  const auto z = uniform({1000, 16}, rng, -50.0, 50.0);
  const auto u = uniform({1000, 2}, rng, -50.0, 50.0);
  const auto h = uniform({1000, 32}, rng, -1.0, 1.0);
  const auto a = tr(z, u, h), b = tr(z, u, h);
  for (std::size_t i = 0; i < a.prior.var().numel(); ++i) {
    CHECK(a.prior.var()[i] >= kVarFloor);
    CHECK(a.prior.var()[i] == b.prior.var()[i]);
    CHECK(a.prior.mean()[i] == b.prior.mean()[i]);
  }
  for (std::size_t i = 0; i < a.hidden.numel(); ++i) CHECK(a.hidden[i] == b.hidden[i]);
}

TEST_CASE("every parameter of every variant receives gradient at initialization") {
  const auto data = sim::generate_dataset(sim::profile("desk"), 4);
  for (const std::string variant : {"V", "VP", "VH", "VHP", "VHP-C"}) {
    ModelConfig c;
    c.variant = variant;
    c.adopt_shapes(data.manifest);
    c.seed = 3;
    Model<float> model(c);
    const auto batch = make_batch<float>(data, {0, 1, 2, 3});
    std::mt19937_64 rng(4);
    auto noise = standard_normal<float>(batch.steps * batch.batch, c.latent_dim, rng);
    backward(model.elbo(batch, noise).elbo);
    for (const auto& leaf : model.params().leaves()) {
      double norm = 0.0;
      if (leaf.tensor.has_grad()) {
        for (float g : leaf.tensor.grad()) norm += static_cast<double>(g) * g;
      }
      INFO(variant << " " << leaf.name);
      CHECK(norm > 0.0);
    }
  }
}
