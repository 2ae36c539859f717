#include <doctest.h>

#include <cmath>
#include <random>

#include "mmdyn/gradcheck.hpp"
#include "mmdyn/ops.hpp"
#include "mmdyn/optim.hpp"

using namespace mmdyn;
using T64 = Tensor<double>;

namespace {

T64 random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                  bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return T64::from(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero so piecewise ops are differentiable at every sample.
T64 away_from_zero(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return T64::from(std::move(shape), std::move(v), true);
}

// Contract an arbitrary op output against fixed random weights.
T64 contract(const T64& y, const T64& weights) { return ops::sum(ops::mul(y, weights)); }

double check_op(const std::function<T64()>& f, const std::vector<T64>& inputs) {
  std::vector<Leaf<double>> leaves;
  for (std::size_t i = 0; i < inputs.size(); ++i) leaves.push_back({"in" + std::to_string(i), inputs[i]});
  return grad_check<double>(f, leaves, 1e-5).max_relative_error;
}

}  // namespace

TEST_CASE("affine with identity weight and zero bias is the identity") {
  auto v = T64::from({1, 3}, {1.5, -2.0, 3.25});
  auto w = T64::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto b = T64::zeros({3});
  auto y = ops::affine(v, w, std::optional<T64>(b));
  CHECK(y.shape() == Shape{1, 3});
  for (std::size_t i = 0; i < 3; ++i) CHECK(y[i] == v[i]);
}

TEST_CASE("relu clamps negatives") {
  auto y = ops::relu(T64::from({3}, {-1, 0, 2}));
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 0.0);
  CHECK(y[2] == 2.0);
}

TEST_CASE("GRU cell with zero weights halves the hidden state") {
  const std::size_t hidden = 4;
  const std::size_t in = 3;
  auto x = T64::from({1, in}, {0.3, -1.2, 2.0});
  auto h = T64::from({1, hidden}, {1.0, -2.0, 0.5, 4.0});
  auto y = ops::gru_cell(x, h, T64::zeros({3 * hidden, in}), T64::zeros({3 * hidden, hidden}),
                         T64::zeros({3 * hidden}), T64::zeros({3 * hidden}));
  for (std::size_t i = 0; i < hidden; ++i) CHECK(y[i] == doctest::Approx(0.5 * h[i]).epsilon(1e-15));
}

TEST_CASE("backward of simple losses") {
  SUBCASE("quadratic") {
    auto w = T64::from({2}, {1, 2}, true);
    backward(ops::sum(ops::mul(w, w)));
    CHECK(w.grad()[0] == 2.0);
    CHECK(w.grad()[1] == 4.0);
  }
  SUBCASE("relu is piecewise") {
    auto w = T64::from({2}, {-1, 3}, true);
    backward(ops::sum(ops::relu(w)));
    CHECK(w.grad()[0] == 0.0);
    CHECK(w.grad()[1] == 1.0);
  }
  SUBCASE("repeated calls accumulate") {
    auto w = T64::from({1}, {3}, true);
    auto loss = ops::sum(ops::square(w));
    backward(loss);
    backward(loss);
    CHECK(w.grad()[0] == 12.0);
    w.zero_grad();
    CHECK_FALSE(w.has_grad());
  }
  SUBCASE("non-scalar loss is rejected") {
    auto w = T64::from({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(ops::square(w)), ShapeError);
  }
}

TEST_CASE("shape errors name the op and both shapes") {
  auto a = T64::zeros({2, 3});
  auto b = T64::zeros({3, 2});
  try {
    ops::add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[3, 2]") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::affine(a, T64::zeros({4, 2}), std::nullopt), ShapeError);
}

TEST_CASE("non-finite outputs raise NumericError") {
  CHECK_THROWS_AS(ops::log(T64::from({2}, {1.0, -1.0})), NumericError);
  CHECK_THROWS_AS(ops::reciprocal(T64::from({1}, {0.0})), NumericError);
}

TEST_CASE("grad_check examples") {
  std::mt19937_64 rng(7);
  SUBCASE("sum of squares is exact up to roundoff") {
    auto w = random_tensor({5, 3}, rng);
    const double err = check_op([&] { return ops::sum(ops::square(w)); }, {w});
    CHECK(err < 1e-8);
  }
  SUBCASE("gaussian log density wrt mean matches (x - mu) / var") {
    const double x = 0.7, var = 2.5;
    auto mu = T64::from({1}, {-0.4}, true);
    auto f = [&] {
      auto d = ops::sub(T64::from({1}, {x}), mu);
      return ops::sum(ops::scale(ops::square(d), -0.5 / var));
    };
    backward(f());
    CHECK(mu.grad()[0] == doctest::Approx((x - mu[0]) / var).epsilon(1e-6));
    mu.zero_grad();
    CHECK(check_op(f, {mu}) < 1e-6);
  }
  SUBCASE("non-deterministic functions are rejected") {
    auto w = random_tensor({2}, rng);
    int calls = 0;
    auto f = [&] { return ops::sum(ops::scale(w, double(++calls))); };
    CHECK_THROWS_AS(check_op(f, {w}), std::runtime_error);
  }
}

TEST_CASE("every primitive agrees with central differences on random shapes") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> ext(1, 4);
    const Shape shape{ext(rng), ext(rng) + 1};
    auto r = random_tensor(shape, rng, -1, 1, false);
    auto a = random_tensor(shape, rng);
    auto b = random_tensor(shape, rng);
    auto pos = random_tensor(shape, rng, 0.5, 2.0);
    auto kinked = away_from_zero(shape, rng);

    CHECK(check_op([&] { return contract(ops::neg(a), r); }, {a}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::relu(kinked), r); }, {kinked}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::clamp_min(kinked, 0.0), r); }, {kinked}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::sigmoid(a), r); }, {a}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::tanh(a), r); }, {a}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::softplus(a), r); }, {a}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::exp(a), r); }, {a}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::log(pos), r); }, {pos}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::sqrt(pos), r); }, {pos}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::square(a), r); }, {a}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::reciprocal(pos), r); }, {pos}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::scale(a, 1.7), r); }, {a}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::add_scalar(a, -0.3), r); }, {a}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::add(a, b), r); }, {a, b}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::sub(a, b), r); }, {a, b}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::mul(a, b), r); }, {a, b}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::div(a, pos), r); }, {a, pos}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::add_n<double>({a, b, pos}), r); }, {a, b, pos}) < 1e-4);
    CHECK(check_op([&] { return ops::mean(ops::mul(a, b)); }, {a, b}) < 1e-4);
    CHECK(check_op([&] { return ops::sum(ops::square(ops::sum_axis(a, 0))); }, {a}) < 1e-4);
    CHECK(check_op([&] { return ops::sum(ops::square(ops::sum_axis(a, 1))); }, {a}) < 1e-4);
    CHECK(check_op([&] { return contract(ops::reshape(ops::transpose01(a), shape), r); }, {a}) < 1e-4);
    CHECK(check_op(
              [&] {
                auto c = ops::concat<double>({a, b}, 1);
                return ops::sum(ops::square(ops::slice(c, 1, 1, c.shape()[1])));
              },
              {a, b}) < 1e-4);

    // Linear algebra.
    const std::size_t n = ext(rng), in = ext(rng), out = ext(rng), k = ext(rng);
    auto x = random_tensor({n, in}, rng);
    auto w = random_tensor({out, in}, rng);
    auto bias = random_tensor({out}, rng);
    auto ry = random_tensor({n, out}, rng, -1, 1, false);
    CHECK(check_op([&] { return contract(ops::affine(x, w, std::optional<T64>(bias)), ry); },
                   {x, w, bias}) < 1e-4);
    auto m = random_tensor({in, k}, rng);
    auto rm = random_tensor({n, k}, rng, -1, 1, false);
    CHECK(check_op([&] { return contract(ops::matmul(x, m), rm); }, {x, m}) < 1e-4);
    auto A = random_tensor({n, out, in}, rng);
    CHECK(check_op([&] { return contract(ops::batched_matvec(A, x), ry); }, {A, x}) < 1e-4);
    auto scale = random_tensor({out}, rng, 0.5, 1.5);
    auto rw = random_tensor({out, in}, rng, -1, 1, false);
    CHECK(check_op([&] { return contract(ops::weight_norm(w, scale), rw); }, {w, scale}) < 1e-4);

    // GRU cell.
    auto h = random_tensor({n, out}, rng);
    auto wih = random_tensor({3 * out, in}, rng);
    auto whh = random_tensor({3 * out, out}, rng);
    auto bih = random_tensor({3 * out}, rng);
    auto bhh = random_tensor({3 * out}, rng);
    CHECK(check_op([&] { return contract(ops::gru_cell(x, h, wih, whh, bih, bhh), ry); },
                   {x, h, wih, whh, bih, bhh}) < 1e-4);

    // Convolutions with random geometry.
    std::uniform_int_distribution<std::size_t> small(1, 2);
    std::uniform_int_distribution<std::size_t> kern(2, 4);
    std::uniform_int_distribution<std::size_t> pad(0, 1);
    const ops::ConvGeometry geom{small(rng), small(rng), pad(rng), pad(rng)};
    const std::size_t kh = kern(rng), kw = kern(rng);
    const std::size_t cin = small(rng), cout = small(rng) + 1;
    auto img = random_tensor({small(rng), cin, kh + 3, kw + 2}, rng);
    auto cw = random_tensor({cout, cin, kh, kw}, rng);
    auto cb = random_tensor({cout}, rng);
    auto probe = ops::conv2d(img, cw, std::optional<T64>(cb), geom);
    auto rc = random_tensor(probe.shape(), rng, -1, 1, false);
    CHECK(check_op([&] { return contract(ops::conv2d(img, cw, std::optional<T64>(cb), geom), rc); },
                   {img, cw, cb}) < 1e-4);
    auto tw = random_tensor({cin, cout, kh, kw}, rng);
    auto tb = random_tensor({cout}, rng);
    auto tprobe = ops::conv_transpose2d(img, tw, std::optional<T64>(tb), geom);
    auto rt = random_tensor(tprobe.shape(), rng, -1, 1, false);
    CHECK(check_op(
              [&] { return contract(ops::conv_transpose2d(img, tw, std::optional<T64>(tb), geom), rt); },
              {img, tw, tb}) < 1e-4);
  }
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  // <conv(x), y> == <x, conv_T(y)> for the same weight.
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 3, 8, 8}, rng, -1, 1, false);
  auto w = random_tensor({4, 3, 4, 4}, rng, -1, 1, false);
  auto y = random_tensor({2, 4, 4, 4}, rng, -1, 1, false);
  auto cx = ops::conv2d(x, w, std::nullopt);
  REQUIRE(cx.shape() == y.shape());
  auto ty = ops::conv_transpose2d(y, w, std::nullopt);
  REQUIRE(ty.shape() == x.shape());
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) lhs += cx[i] * y[i];
  for (std::size_t i = 0; i < x.numel(); ++i) rhs += x[i] * ty[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("stride-2 kernel-4 geometry halves and doubles spatial size") {
  auto x = T64::zeros({1, 1, 32, 32});
  auto w = T64::zeros({2, 1, 4, 4});
  auto y = ops::conv2d(x, w, std::nullopt);
  CHECK(y.shape() == Shape{1, 2, 16, 16});
  auto z = ops::conv_transpose2d(y, T64::zeros({2, 1, 4, 4}), std::nullopt);
  CHECK(z.shape() == Shape{1, 1, 32, 32});
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto w = random_tensor({3, 4}, rng);
    auto x = random_tensor({2, 4}, rng, -1, 1, false);
    auto loss1 = [&] { return ops::sum(ops::tanh(ops::affine(x, w, std::nullopt))); };
    auto loss2 = [&] { return ops::mean(ops::square(w)); };
    backward(loss1());
    std::vector<double> g1(w.grad().begin(), w.grad().end());
    w.zero_grad();
    backward(loss2());
    std::vector<double> g2(w.grad().begin(), w.grad().end());
    w.zero_grad();
    backward(ops::add(loss1(), loss2()));
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(w.grad()[i] == doctest::Approx(g1[i] + g2[i]).epsilon(1e-12));
  }
}

TEST_CASE("adam_step") {
  std::mt19937_64 rng(5);
  SUBCASE("zero gradient leaves parameters unchanged") {
    ParameterStore<double> store;
    auto p = store.add_uniform("w", {3}, 1.0, rng);
    std::vector<double> before(p.tensor.values().begin(), p.tensor.values().end());
    backward(ops::scale(ops::sum(p.tensor), 0.0));
    AdamState<double> state;
    adam_step(store, state, 1e-3, std::nullopt, all_parameters());
    CHECK(state.step_count == 1);
    for (std::size_t i = 0; i < 3; ++i) CHECK(p.tensor[i] == before[i]);
  }
  SUBCASE("first step from fresh state moves by lr") {
    ParameterStore<double> store;
    auto p = store.add_values("w", {1}, {2.0});
    backward(ops::sum(p.tensor));  // gradient 1
    AdamState<double> state;
    adam_step(store, state, 1e-3, std::nullopt, all_parameters());
    // m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
    CHECK(p.tensor[0] == doctest::Approx(2.0 - 1e-3 / (1.0 + 1e-8)).epsilon(1e-14));
    CHECK_FALSE(p.tensor.has_grad());
  }
  SUBCASE("clipping rescales the group gradient norm") {
    ParameterStore<double> store;
    auto a = store.add_values("transition.a", {1}, {0.0});
    auto b = store.add_values("transition.b", {1}, {0.0});
    auto c = store.add_values("decoder.c", {1}, {0.0});
    // Gradients (0.6, 0.8) have norm 1.0.
    backward(ops::add_n<double>({ops::scale(ops::sum(a.tensor), 0.6), ops::scale(ops::sum(b.tensor), 0.8),
                                 ops::sum(c.tensor)}));
    AdamState<double> state;
    auto info = adam_step(store, state, 1e-3, 0.5, name_prefix("transition."));
    CHECK(info.clipped);
    CHECK(info.grad_norm == doctest::Approx(1.0));
    // Second moment after one step is (1 - beta2) * (scaled g)^2.
    CHECK(state.moments["transition.a"].second[0] == doctest::Approx(0.001 * 0.3 * 0.3));
    CHECK(state.moments["transition.b"].second[0] == doctest::Approx(0.001 * 0.4 * 0.4));
    CHECK(c.tensor.has_grad());  // outside the group: untouched
    CHECK(c.tensor[0] == 0.0);
  }
  SUBCASE("missing gradients are reported by name") {
    ParameterStore<double> store;
    store.add_values("enc.w", {1}, {1.0});
    store.add_values("enc.b", {1}, {1.0});
    AdamState<double> state;
    try {
      adam_step(store, state, 1e-3, std::nullopt, all_parameters());
      FAIL("expected an error");
    } catch (const std::runtime_error& e) {
      const std::string msg = e.what();
      CHECK(msg.find("enc.w") != std::string::npos);
      CHECK(msg.find("enc.b") != std::string::npos);
    }
  }
  SUBCASE("second moments stay non-negative") {
    ParameterStore<double> store;
    auto p = store.add_uniform("w", {8}, 1.0, rng);
    AdamState<double> state;
    for (int step = 0; step < 10; ++step) {
      backward(ops::sum(ops::mul(p.tensor, random_tensor({8}, rng, -5, 5, false))));
      adam_step(store, state, 1e-2, std::nullopt, all_parameters());
    }
    for (double v : state.moments["w"].second) CHECK(v >= 0.0);
  }
}

TEST_CASE("weight-normalized effective weight is recomputed from the current leaves") {
  std::mt19937_64 rng(9);
  ParameterStore<double> store;
  auto p = store.add_weight_normed("layer.w", {3, 4}, 0.5, rng);
  // Initial scale equals the row norm, so the effective weight is the direction.
  auto eff0 = p.effective();
  for (std::size_t i = 0; i < eff0.numel(); ++i) CHECK(eff0[i] == doctest::Approx(p.tensor[i]).epsilon(1e-14));

  auto x = random_tensor({2, 4}, rng, -1, 1, false);
  AdamState<double> state;
  for (int step = 0; step < 5; ++step) {
    backward(ops::sum(ops::square(ops::affine(x, p.effective(), std::nullopt))));
    adam_step(store, state, 1e-2, std::nullopt, all_parameters());
    auto used = p.effective();
    // Manual recomputation from direction / scale.
    for (std::size_t r = 0; r < 3; ++r) {
      double norm = 0;
      for (std::size_t c = 0; c < 4; ++c) norm += p.tensor[r * 4 + c] * p.tensor[r * 4 + c];
      norm = std::sqrt(norm);
      for (std::size_t c = 0; c < 4; ++c) {
        CHECK(used[r * 4 + c] == doctest::Approx(p.scale[r] * p.tensor[r * 4 + c] / norm).epsilon(1e-14));
      }
    }
    CHECK(p.effective().values()[0] == used.values()[0]);
  }
}

TEST_CASE("32-bit tensors run the same ops") {
  auto w = Tensor<float>::from({2}, {1.0f, 2.0f}, true);
  backward(ops::sum(ops::mul(w, w)));
  CHECK(w.grad()[0] == 2.0f);
  CHECK(w.grad()[1] == 4.0f);
}
