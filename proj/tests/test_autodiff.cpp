#include <doctest.h>

#include <numeric>

#include "gradcheck.hpp"
#include "nca/autodiff.hpp"
#include "nca/kernels.hpp"
#include "nca/optim.hpp"
#include "oracles.hpp"

using namespace nca;

namespace {

Tensor shift(const Tensor& x, int dy, int dx) {
  Tensor out(x.dims());
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) out.at(ch, (y + dy + h) % h, (xx + dx + w) % w) = x.at(ch, y, xx);
  return out;
}

Tensor eval(const std::function<ad::Var(ad::Tape&, ad::Var)>& f, const Tensor& x) {
  ad::Tape t;
  return t.value(f(t, t.constant(x)));
}

// Values with |v| >= margin so a 1e-3 step never crosses zero.
Tensor away_from_zero(Shape dims, std::mt19937& gen, float margin = 0.05f) {
  Tensor t = oracle::random_tensor(std::move(dims), gen);
  for (float& v : t.data()) v = v < 0 ? v - margin : v + margin;
  return t;
}

}  // namespace

TEST_CASE("tensor rejects empty dims and reports shapes") {
  CHECK_THROWS_AS(Tensor({0, 3}), std::invalid_argument);
  Tensor t({2, 3}, 1.5f);
  CHECK(t.size() == 6);
  CHECK(t.all_finite());
  t[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
  CHECK(shape_str({2, 3}) == "[2,3]");
}

TEST_CASE("depthwise identity kernel returns the input") {
  std::mt19937 gen(1);
  const Tensor x = oracle::random_tensor({3, 5, 7}, gen);
  CHECK(eval([](ad::Tape& t, ad::Var v) { return ad::conv2d_depthwise3x3(t, v, oracle::kIdentity); }, x) == x);
}

TEST_CASE("sobel on a constant grid is zero") {
  const Tensor x({2, 4, 4}, 0.7f);
  const Tensor y = eval([](ad::Tape& t, ad::Var v) { return ad::conv2d_depthwise3x3(t, v, oracle::kSobelX); }, x);
  for (float v : y.data()) CHECK(v == doctest::Approx(0.0f));
}

TEST_CASE("laplacian on a 5x5 impulse matches direct 9-tap summation with wrap") {
  Tensor x({1, 5, 5});
  x.at(0, 0, 0) = 1.0f;
  const Tensor y = eval([](ad::Tape& t, ad::Var v) { return ad::conv2d_depthwise3x3(t, v, oracle::kLaplacian); }, x);
  CHECK(oracle::max_abs_diff(y, oracle::depthwise3x3(oracle::of(x), oracle::kLaplacian, oracle::Padding::circular)) == 0.0);
  CHECK(y.at(0, 0, 0) == -12.0f);
  CHECK(y.at(0, 4, 4) == 1.0f);
  CHECK(y.at(0, 0, 4) == 2.0f);
}

TEST_CASE("depthwise matches the oracle under every padding") {
  std::mt19937 gen(2);
  for (auto pad : {kernels::Padding::zero, kernels::Padding::reflect, kernels::Padding::circular}) {
    const Tensor x = oracle::random_tensor({2, 6, 5}, gen);
    const std::array<float, 9> k = [&] {
      std::array<float, 9> a{};
      std::uniform_real_distribution<float> u(-1, 1);
      for (float& v : a) v = u(gen);
      return a;
    }();
    const Tensor y = eval([&](ad::Tape& t, ad::Var v) { return ad::conv2d_depthwise3x3(t, v, k, pad); }, x);
    CHECK(oracle::max_abs_diff(y, oracle::depthwise3x3(oracle::of(x), k, pad)) < 1e-5);
  }
}

TEST_CASE("circular depthwise commutes with cyclic shifts exactly") {
  std::mt19937 gen(3);
  const Tensor x = oracle::random_tensor({3, 7, 6}, gen);
  auto conv = [](ad::Tape& t, ad::Var v) { return ad::conv2d_depthwise3x3(t, v, oracle::kSobelY); };
  CHECK(shift(eval(conv, x), 2, -3) == eval(conv, shift(x, 2, -3)));
}

TEST_CASE("conv1x1 identity, linearity and oracle") {
  std::mt19937 gen(4);
  const Tensor x = oracle::random_tensor({3, 4, 4}, gen);
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye[static_cast<size_t>(i) * 3 + i] = 1.0f;
  auto run = [](const Tensor& xv, const Tensor& w, const Tensor& b) {
    ad::Tape t;
    return t.value(ad::conv2d_1x1(t, t.constant(xv), t.constant(w), t.constant(b)));
  };
  CHECK(run(x, eye, Tensor({3})) == x);

  Tensor two({2, 2, 2});
  for (size_t i = 0; i < two.size(); ++i) two[i] = static_cast<float>(i);
  const Tensor sum = run(two, Tensor({1, 2}, {1.0f, 1.0f}), Tensor({1}));
  for (int p = 0; p < 4; ++p) CHECK(sum[static_cast<size_t>(p)] == two[static_cast<size_t>(p)] + two[static_cast<size_t>(4 + p)]);

  const Tensor w = oracle::random_tensor({4, 3}, gen), b = oracle::random_tensor({4}, gen);
  const Tensor y = run(x, w, b);
  CHECK(oracle::max_abs_diff(y, oracle::conv1x1(oracle::of(x), {w.data().begin(), w.data().end()},
                                                  {b.data().begin(), b.data().end()})) < 1e-5);
  CHECK_THROWS_AS(run(x, oracle::random_tensor({4, 2}, gen), b), std::invalid_argument);
}

TEST_CASE("dense3x3 identity kernels, 1x1 input and oracle") {
  std::mt19937 gen(5);
  const Tensor x = oracle::random_tensor({2, 5, 5}, gen);
  Tensor w({2, 2, 3, 3});
  for (int c = 0; c < 2; ++c) w[((static_cast<size_t>(c) * 2 + c) * 3 + 1) * 3 + 1] = 1.0f;
  auto run = [](const Tensor& xv, const Tensor& wv, const Tensor& bv, kernels::Padding pad) {
    ad::Tape t;
    return t.value(ad::conv2d_dense3x3(t, t.constant(xv), t.constant(wv), t.constant(bv), pad));
  };
  CHECK(run(x, w, Tensor({2}), kernels::Padding::reflect) == x);

  const Tensor single = oracle::random_tensor({2, 1, 1}, gen);
  const Tensor wr = oracle::random_tensor({3, 2, 3, 3}, gen), br = oracle::random_tensor({3}, gen);
  const Tensor y1 = run(single, wr, br, kernels::Padding::zero);
  for (int o = 0; o < 3; ++o) {
    double expect = br[static_cast<size_t>(o)];
    for (int i = 0; i < 2; ++i) expect += wr[((static_cast<size_t>(o) * 2 + i) * 3 + 1) * 3 + 1] * single[static_cast<size_t>(i)];
    CHECK(y1[static_cast<size_t>(o)] == doctest::Approx(expect).epsilon(1e-6));
  }

  for (auto pad : {kernels::Padding::zero, kernels::Padding::reflect, kernels::Padding::circular}) {
    const Tensor y = run(x, wr, br, pad);
    CHECK(oracle::max_abs_diff(y, oracle::dense3x3(oracle::of(x), wr, br, pad)) < 1e-5);
  }
}

TEST_CASE("relu values and subgradient") {
  ad::Tape t;
  ad::Var x = t.leaf(Tensor({3}, {-1.0f, 0.0f, 2.0f}));
  ad::Var y = ad::relu(t, x);
  CHECK(t.value(y)[0] == 0.0f);
  CHECK(t.value(y)[2] == 2.0f);
  ad::backward(t, ad::sum(t, y));
  CHECK(t.grad(x)[0] == 0.0f);
  CHECK(t.grad(x)[1] == 0.0f);
  CHECK(t.grad(x)[2] == 1.0f);
}

TEST_CASE("relu gradient mask equals indicator(x > 0)") {
  std::mt19937 gen(6);
  const Tensor x = oracle::random_tensor({2, 4, 4}, gen);
  ad::Tape t;
  ad::Var v = t.leaf(x);
  ad::backward(t, ad::sum(t, ad::relu(t, v)));
  for (size_t i = 0; i < x.size(); ++i) CHECK(t.grad(v)[i] == (x[i] > 0 ? 1.0f : 0.0f));
}

TEST_CASE("pool2 mean, max and routing") {
  const Tensor c({1, 4, 4}, 0.3f);
  const Tensor pooled = eval([](ad::Tape& t, ad::Var x) { return ad::pool2(t, x, ad::PoolMode::mean); }, c);
  CHECK(pooled.dims() == Shape{1, 2, 2});
  for (float v : pooled.data()) CHECK(v == doctest::Approx(0.3f));
  const Tensor block({1, 2, 2}, {1, 2, 3, 4});
  CHECK(eval([](ad::Tape& t, ad::Var x) { return ad::pool2(t, x, ad::PoolMode::max); }, block)[0] == 4.0f);

  ad::Tape t;
  ad::Var x = t.leaf(Tensor({1, 2, 2}, {1, 5, 3, 4}));
  ad::backward(t, ad::sum(t, ad::pool2(t, x, ad::PoolMode::max)));
  CHECK(t.grad(x).vec() == std::vector<float>{0, 1, 0, 0});

  ad::Tape tie;
  ad::Var xt = tie.leaf(Tensor({1, 2, 2}, {2, 2, 2, 2}));
  ad::backward(tie, ad::sum(tie, ad::pool2(tie, xt, ad::PoolMode::max)));
  CHECK(tie.grad(xt).vec() == std::vector<float>{1, 0, 0, 0});

  CHECK_THROWS_AS(eval([](ad::Tape& tp, ad::Var v) { return ad::pool2(tp, v, ad::PoolMode::mean); }, Tensor({1, 3, 4})),
                  std::invalid_argument);
}

TEST_CASE("sort_ascending values, permutation and gradient") {
  ad::Tape t;
  ad::Var x = t.leaf(Tensor({3}, {3, 1, 2}));
  const auto s = ad::sort_ascending(t, x);
  CHECK(t.value(s.values).vec() == std::vector<float>{1, 2, 3});
  CHECK(s.permutation == std::vector<int>{1, 2, 0});

  ad::Tape t2;
  const auto s2 = ad::sort_ascending(t2, t2.constant(Tensor({4}, {0, 1, 2, 3})));
  CHECK(s2.permutation == std::vector<int>{0, 1, 2, 3});

  // d/dx of sum(sorted)^2 is 2 * sum at every coordinate.
  ad::Tape t3;
  ad::Var v = t3.leaf(Tensor({4}, {0.5f, -1.0f, 2.0f, 0.25f}));
  ad::Var total = ad::sum(t3, ad::sort_ascending(t3, v).values);
  ad::backward(t3, ad::mul(t3, total, total));
  for (float g : t3.grad(v).data()) CHECK(g == doctest::Approx(2 * 1.75f));

  std::mt19937 gen(7);
  ad::Tape t4;
  ad::Var r = t4.leaf(oracle::random_tensor({17}, gen));
  ad::backward(t4, ad::sum(t4, ad::sort_ascending(t4, r).values));
  for (float g : t4.grad(r).data()) CHECK(g == 1.0f);
}

TEST_CASE("backward on simple losses") {
  ad::Parameter p("p", Tensor({2, 2}, 3.0f));
  {
    ad::Tape t;
    ad::backward(t, ad::sum(t, t.param(p)));
    for (float g : p.grad.data()) CHECK(g == 1.0f);
  }
  p.zero_grad();
  {
    ad::Tape t;
    ad::Var v = t.param(p);
    ad::backward(t, ad::sum(t, ad::square(t, v)));
    for (float g : p.grad.data()) CHECK(g == 6.0f);
  }
  ad::Tape t;
  ad::Var v = t.param(p);
  CHECK_THROWS_AS(ad::backward(t, ad::square(t, v)), std::invalid_argument);
}

TEST_CASE("backward rejects non-finite gradients") {
  // Finite values whose gradient overflows: d/dx sum(1e30 * (1e30 * x)) = 1e60.
  ad::Tape t;
  ad::Var x = t.leaf(Tensor({1}, {1e-38f}));
  ad::Var y = ad::mul(t, ad::scale(t, x, 1e30f), t.constant(Tensor({1}, {1e30f})));
  REQUIRE(std::isfinite(t.value(y)[0]));
  CHECK_THROWS(ad::backward(t, ad::sum(t, y)));
}

TEST_CASE("tape replay is bit-identical") {
  std::mt19937 gen(8);
  const Tensor x = oracle::random_tensor({2, 6, 6}, gen);
  const Tensor w = oracle::random_tensor({3, 2, 3, 3}, gen), b = oracle::random_tensor({3}, gen);
  auto run = [&] {
    ad::Tape t;
    ad::Var v = t.leaf(x);
    ad::Var y = ad::relu(t, ad::conv2d_dense3x3(t, v, t.constant(w), t.constant(b), kernels::Padding::reflect));
    ad::backward(t, ad::sum(t, ad::square(t, ad::pool2(t, y, ad::PoolMode::max))));
    return std::pair{t.value(y), t.grad(v)};
  };
  CHECK(run() == run());
}

TEST_CASE("finite-difference check of every differentiable op") {
  std::mt19937 gen(9);
  const double tol = 1e-3;
  // Every op here is polynomial of degree <= 2 on each smooth piece, where the
  // central difference is exact, so a wide step only has to stay inside one piece.
  auto check = [&](const std::string& name, auto f, const Tensor& x, double h = 0.1) {
    const auto r = gradcheck::op(f, x, 100, gen, h);
    INFO(name << " max_rel " << r.max_rel);
    CHECK(r.max_rel < tol);
  };
  const Tensor x = oracle::random_tensor({3, 6, 6}, gen);
  const Tensor other = oracle::random_tensor({3, 6, 6}, gen);
  check("add", [&](ad::Tape& t, ad::Var v) { return ad::add(t, v, t.constant(other)); }, x);
  check("sub", [&](ad::Tape& t, ad::Var v) { return ad::sub(t, t.constant(other), v); }, x);
  check("mul", [&](ad::Tape& t, ad::Var v) { return ad::mul(t, v, t.constant(other)); }, x);
  check("scale", [](ad::Tape& t, ad::Var v) { return ad::scale(t, v, -2.5f); }, x);
  check("square", [](ad::Tape& t, ad::Var v) { return ad::square(t, v); }, x);
  check("mean", [](ad::Tape& t, ad::Var v) { return ad::mean(t, v); }, x);
  check("reshape", [](ad::Tape& t, ad::Var v) { return ad::reshape(t, v, {3, 36}); }, x);
  check("depthwise", [](ad::Tape& t, ad::Var v) { return ad::conv2d_depthwise3x3(t, v, oracle::kLaplacian); }, x);
  const Tensor w1 = oracle::random_tensor({4, 3}, gen), b1 = oracle::random_tensor({4}, gen);
  check("conv1x1", [&](ad::Tape& t, ad::Var v) { return ad::conv2d_1x1(t, v, t.constant(w1), t.constant(b1)); }, x);
  check("conv1x1 weight", [&](ad::Tape& t, ad::Var v) { return ad::conv2d_1x1(t, t.constant(x), v, t.constant(b1)); }, w1);
  check("conv1x1 bias", [&](ad::Tape& t, ad::Var v) { return ad::conv2d_1x1(t, t.constant(x), t.constant(w1), v); }, b1);
  const Tensor w3 = oracle::random_tensor({4, 3, 3, 3}, gen);
  for (auto pad : {kernels::Padding::zero, kernels::Padding::reflect, kernels::Padding::circular})
    check("dense3x3", [&](ad::Tape& t, ad::Var v) { return ad::conv2d_dense3x3(t, v, t.constant(w3), t.constant(b1), pad); }, x);
  check("relu", [](ad::Tape& t, ad::Var v) { return ad::relu(t, v); }, away_from_zero({3, 6, 6}, gen), 0.01);
  check("pool mean", [](ad::Tape& t, ad::Var v) { return ad::pool2(t, v, ad::PoolMode::mean); }, x);
  // Distinct block values 0.1 apart keep each block's argmax fixed under the step.
  Tensor spread({2, 4, 4});
  std::vector<int> order(spread.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), gen);
  for (size_t i = 0; i < spread.size(); ++i) spread[i] = 0.1f * static_cast<float>(order[i]);
  check("pool max", [](ad::Tape& t, ad::Var v) { return ad::pool2(t, v, ad::PoolMode::max); }, spread, 0.01);
  check("sort", [](ad::Tape& t, ad::Var v) { return ad::sort_ascending(t, v).values; }, spread.reshaped({32}), 0.01);
  check("sort_rows", [](ad::Tape& t, ad::Var v) { return ad::sort_rows(t, v); }, spread.reshaped({4, 8}), 0.01);
  const Tensor m = oracle::random_tensor({5, 3}, gen);
  check("matmul lhs", [&](ad::Tape& t, ad::Var v) { return ad::matmul(t, v, t.constant(m)); }, oracle::random_tensor({4, 5}, gen));
  const Tensor lhs = oracle::random_tensor({4, 5}, gen);
  check("matmul rhs", [&](ad::Tape& t, ad::Var v) { return ad::matmul(t, t.constant(lhs), v); }, m);
  check("slice", [](ad::Tape& t, ad::Var v) { return ad::slice_channels(t, v, 1, 2); }, x);
  check("concat", [&](ad::Tape& t, ad::Var v) {
    const ad::Var parts[2] = {v, t.constant(other)};
    return ad::concat_channels(t, parts);
  }, x);
  check("channel_affine", [](ad::Tape& t, ad::Var v) { return ad::channel_affine(t, v, {2, -1, 0.5f}, {0.1f, 0, 3}); }, x);
  check("cell_mask", [](ad::Tape& t, ad::Var v) {
    std::vector<float> mask(36);
    for (size_t i = 0; i < mask.size(); ++i) mask[i] = static_cast<float>(i % 3 == 0);
    return ad::cell_mask(t, v, mask);
  }, x);
  check("resample", [](ad::Tape& t, ad::Var v) { return ad::resample_rows(t, v, 5); }, oracle::random_tensor({3, 11}, gen));
}

TEST_CASE("resample_rows matches the interpolation oracle") {
  std::mt19937 gen(10);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<int> len(2, 40);
    const int n = len(gen), m = std::uniform_int_distribution<int>(1, n)(gen);
    Tensor row = oracle::random_tensor({n}, gen);
    std::sort(row.data().begin(), row.data().end());
    std::vector<float> out(static_cast<size_t>(m));
    ad::resample_sorted(row.data(), out);
    const auto ref = oracle::resample(std::vector<double>(row.data().begin(), row.data().end()), static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) CHECK(out[static_cast<size_t>(i)] == doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-6));
  }
}

TEST_CASE("adam step") {
  ad::Parameter p("p", Tensor({1}, {1.0f}));
  std::array<ad::Parameter*, 1> list{&p};
  ad::AdamOptimizer adam;
  adam.step(list, 0.01f);
  CHECK(p.value[0] == 1.0f);

  p.grad[0] = 1.0f;
  adam.step(list, 0.01f);
  // t=2 after one zero-gradient step: m = 0.1, v = 0.001, both bias-corrected.
  const double m = 0.1 / (1 - 0.81), v = 0.001 / (1 - 0.998001);
  CHECK(p.value[0] == doctest::Approx(1.0 - 0.01 * m / (std::sqrt(v) + 1e-8)).epsilon(1e-6));
  CHECK(p.grad[0] == 0.0f);

  ad::Parameter q("q", Tensor({1}, {2.0f}));
  std::array<ad::Parameter*, 1> ql{&q};
  ad::AdamOptimizer fresh;
  q.grad[0] = 1.0f;
  fresh.step(ql, 0.01f);
  CHECK(q.value[0] == doctest::Approx(1.99f).epsilon(1e-6));

  auto run = [] {
    ad::Parameter r("r", Tensor({3}, {1, 2, 3}));
    std::array<ad::Parameter*, 1> rl{&r};
    ad::AdamOptimizer a;
    for (int i = 0; i < 5; ++i) {
      for (size_t k = 0; k < 3; ++k) r.grad[k] = r.value[k] * 0.5f;
      a.step(rl, 0.1f);
    }
    return r.value;
  };
  CHECK(run() == run());
}

TEST_CASE("normalize_gradients scales each parameter to unit norm") {
  ad::Parameter a("a", Tensor({2}));
  ad::Parameter b("b", Tensor({1}));
  a.grad = Tensor({2}, {3, 4});
  std::array<ad::Parameter*, 2> list{&a, &b};
  ad::normalize_gradients(list);
  CHECK(a.grad[0] == doctest::Approx(0.6f));
  CHECK(a.grad[1] == doctest::Approx(0.8f));
  CHECK(b.grad[0] == 0.0f);
}
