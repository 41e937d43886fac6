#include <doctest.h>

#include <cstring>

#include "eapgp/tape.hpp"
#include "eapgp/tensor.hpp"
#include "test_support.hpp"

using namespace eapgp;
using namespace eapgp::testing;

TEST_CASE("softmax of a constant row is uniform") {
  Tape<float> t;
  Tensor<float> x = Tensor<float>::zeros({4});
  Tensor<float> y = t.softmax(x);
  for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(0.25f));
}

TEST_CASE("layer_norm of a constant vector is zero before affine") {
  Tape<float> t;
  Tensor<float> x = Tensor<float>::filled({6}, 3.5f);
  Tensor<float> y = t.layer_norm(x, 1e-5f);
  for (int i = 0; i < 6; ++i) CHECK(std::abs(y.data()[i]) < 1e-6f);
}

TEST_CASE("matmul by the identity preserves the matrix") {
  Rng rng(7);
  Tensor<double> a = Tensor<double>::randn({3, 3}, rng);
  Tensor<double> eye = Tensor<double>::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.data()[i * 3 + i] = 1.0;
  Tape<double> t;
  Tensor<double> y = t.matmul(eye, a);
  for (int i = 0; i < 9; ++i) CHECK(y.data()[i] == doctest::Approx(a.data()[i]));
}

TEST_CASE("product rule: y = a*b gives dy/da = b, dy/db = a") {
  Tape<double> t;
  Tensor<double> a = Tensor<double>::scalar(2.0).set_requires_grad();
  Tensor<double> b = Tensor<double>::scalar(3.0).set_requires_grad();
  Tensor<double> y = t.mul(a, b);
  t.backward(y);
  CHECK(a.grad()[0] == doctest::Approx(3.0));
  CHECK(b.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("gradient of sum(softmax(x)) is identically zero") {
  Rng rng(3);
  Tape<double> t;
  Tensor<double> x = Tensor<double>::randn({8}, rng).set_requires_grad();
  Tensor<double> y = t.reduce_sum(t.softmax(x));
  t.backward(y);
  for (double g : x.grad()) CHECK(std::abs(g) < 1e-12);
}

namespace {

// One pass over every primitive at the given seed; returns max rel error.
template <class S>
double all_primitives_error(uint64_t seed, double h, double floor) {
  double mx = 0.0;
  auto track = [&](double e) { mx = std::max(mx, e); };
  const int variant = static_cast<int>(seed % 3);

  // binary ops with suffix broadcast: equal shapes, [4,5]+[5], [3,4,5]+[4,5]
  const std::vector<Shape> bin_shapes =
      variant == 0 ? std::vector<Shape>{{4, 5}, {4, 5}}
      : variant == 1 ? std::vector<Shape>{{4, 5}, {5}}
                     : std::vector<Shape>{{3, 4, 5}, {4, 5}};
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.add(in[0], in[1]); }, bin_shapes, seed, h, floor));
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.sub(in[0], in[1]); }, bin_shapes, seed + 1, h, floor));
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.mul(in[0], in[1]); }, bin_shapes, seed + 2, h, floor));

  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.scale(in[0], decltype(in[0].data()[0])(1.7)); },
      {{3, 4}}, seed + 3, h, floor));
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) {
        return t.add_n({in[0], in[1], in[2]});
      },
      {{2, 3, 4}, {2, 3, 4}, {2, 3, 4}}, seed + 4, h, floor));

  const std::vector<Shape> mm_shapes =
      variant == 0 ? std::vector<Shape>{{3, 4}, {4, 5}}
      : variant == 1 ? std::vector<Shape>{{2, 3, 4}, {2, 4, 5}}
                     : std::vector<Shape>{{2, 3, 4}, {4, 5}};
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.matmul(in[0], in[1]); }, mm_shapes, seed + 5, h,
      floor));
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.transpose_last2(in[0]); }, {{2, 3, 4}}, seed + 6, h,
      floor));

  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.softmax(in[0]); }, {{2, 3, 5}}, seed + 7, h, floor));
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.causal_softmax(in[0]); }, {{2, 4, 4}}, seed + 8, h,
      floor));
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.log_softmax(in[0]); }, {{3, 6}}, seed + 9, h, floor));
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) {
        return t.layer_norm(in[0], decltype(in[0].data()[0])(1e-5));
      },
      {{2, 3, 8}}, seed + 10, h, floor));
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.gelu(in[0]); }, {{3, 5}}, seed + 11, h, floor));
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.sigmoid(in[0]); }, {{3, 5}}, seed + 12, h, floor));

  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) {
        return t.embedding(in[0], {1, 0, 3, 2, 5, 1}, {2, 3});
      },
      {{6, 4}}, seed + 13, h, floor));
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.slice(in[0], 1, 1, 3); }, {{2, 5, 3}}, seed + 14, h,
      floor));
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.concat({in[0], in[1]}, 1); },
      {{2, 3, 4}, {2, 2, 4}}, seed + 15, h, floor));
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.reshape(in[0], {3, 4}); }, {{2, 6}}, seed + 16, h,
      floor));
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.select_index(in[0], {2, 0, 3}); }, {{3, 4, 2}},
      seed + 17, h, floor));

  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.reduce_sum(in[0]); }, {{2, 3, 4}}, seed + 18, h,
      floor));
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.reduce_mean(in[0]); }, {{2, 3, 4}}, seed + 19, h,
      floor));
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.row_sum(in[0]); }, {{2, 3, 4}}, seed + 20, h,
      floor));
  track(primitive_grad_error<S>(
      [](auto& t, const auto& in) { return t.squared_l2_norm(in[0]); }, {{2, 5}}, seed + 21, h,
      floor));
  return mx;
}

}  // namespace

TEST_CASE("every primitive matches finite differences over 100 seeds") {
  double worst64 = 0.0, worst32 = 0.0;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    worst64 = std::max(worst64, all_primitives_error<double>(seed * 100, 1e-5, 1e-3));
    worst32 = std::max(worst32, all_primitives_error<float>(seed * 100, 1e-5, 1e-3));
  }
  CHECK(worst64 <= 1e-6);
  CHECK(worst32 <= 1e-3);
}

TEST_CASE("two-layer MLP parameter grads match finite differences (32-bit, h=1e-3)") {
  auto mlp = [](auto& t, const auto& in) {
    // in: x [4,6], w1 [6,8], b1 [8], w2 [8,3], b2 [3]
    auto h = t.gelu(t.add(t.matmul(in[0], in[1]), in[2]));
    return t.add(t.matmul(h, in[3]), in[4]);
  };
  const std::vector<Shape> shapes{{4, 6}, {6, 8}, {8}, {8, 3}, {3}};
  double worst = 0.0;
  for (uint64_t seed = 0; seed < 10; ++seed)
    worst = std::max(worst, primitive_grad_error<float>(mlp, shapes, 1000 + seed, 1e-3, 1e-3));
  CHECK(worst <= 1e-3);
}

TEST_CASE("backward is linear: grad of y1+y2 equals grad(y1) + grad(y2)") {
  Rng rng(11);
  Tensor<double> x = Tensor<double>::randn({5}, rng);

  Tape<double> t1;
  Tensor<double> a1 = x.detached().set_requires_grad();
  Tensor<double> s1 = t1.reduce_sum(t1.gelu(a1));
  Tensor<double> s2 = t1.squared_l2_norm(a1);
  t1.backward(t1.add(s1, s2));
  auto combined = a1.grad_or_zeros();

  Tape<double> t2;
  Tensor<double> a2 = x.detached().set_requires_grad();
  Tensor<double> u1 = t2.reduce_sum(t2.gelu(a2));
  Tensor<double> u2 = t2.squared_l2_norm(a2);
  t2.backward(u1);
  t2.backward(u2);  // accumulates
  auto separate = a2.grad_or_zeros();

  for (size_t i = 0; i < combined.size(); ++i)
    CHECK(combined[i] == doctest::Approx(separate[i]).epsilon(1e-12));
}

TEST_CASE("identical forward runs are bitwise identical") {
  Rng rng(5);
  Tensor<float> x = Tensor<float>::randn({4, 8}, rng);
  Tensor<float> w = Tensor<float>::randn({8, 8}, rng);
  auto run = [&]() {
    Tape<float> t;
    return t.layer_norm(t.gelu(t.matmul(x, w)), 1e-5f);
  };
  Tensor<float> y1 = run();
  Tensor<float> y2 = run();
  CHECK(std::memcmp(y1.data().data(), y2.data().data(), y1.data().size() * sizeof(float)) == 0);
}

TEST_CASE("shape mismatch errors name both shapes") {
  Tape<float> t;
  Tensor<float> a = Tensor<float>::zeros({2, 3});
  Tensor<float> b = Tensor<float>::zeros({4});
  try {
    t.add(a, b);
    FAIL("expected an exception");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4]") != std::string::npos);
  }
}

TEST_CASE("checked mode rejects non-finite inputs") {
  Tape<float> t(TapeOptions{.check_finite = true});
  Tensor<float> a = Tensor<float>::zeros({2});
  a.data()[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(t.gelu(a), std::runtime_error);

  Tape<float> lax;  // default mode lets it through
  CHECK_NOTHROW(lax.gelu(a));
}

TEST_CASE("backward rejects a seed the tape did not produce") {
  Tape<double> t;
  Tensor<double> x = Tensor<double>::scalar(1.0).set_requires_grad();
  Tensor<double> y = t.gelu(x);
  (void)y;
  Tensor<double> foreign = Tensor<double>::scalar(2.0);
  CHECK_THROWS_AS(t.backward(foreign), std::invalid_argument);

  Tape<double> other;
  Tensor<double> z = other.gelu(x);
  CHECK_THROWS_AS(t.backward(z), std::invalid_argument);
}

TEST_CASE("backward requires a scalar seed") {
  Tape<double> t;
  Tensor<double> x = Tensor<double>::zeros({3}).set_requires_grad();
  Tensor<double> y = t.gelu(x);
  CHECK_THROWS_AS(t.backward(y), std::invalid_argument);
}

TEST_CASE("slice/concat round-trip preserves values and routes gradients") {
  Rng rng(23);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor<double> x = Tensor<double>::randn({2, 6, 3}, rng);
    const int64_t cut = 1 + static_cast<int64_t>(rng.uniform_int(5));
    Tape<double> t;
    Tensor<double> a = x.detached().set_requires_grad();
    Tensor<double> left = t.slice(a, 1, 0, cut);
    Tensor<double> right = t.slice(a, 1, cut, 6 - cut);
    Tensor<double> back = t.concat({left, right}, 1);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(back.data()[i] == x.data()[i]);
    t.backward(t.reduce_sum(back));
    for (double g : a.grad()) CHECK(g == doctest::Approx(1.0));
  }
}
