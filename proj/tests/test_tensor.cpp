#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "metabev/gradcheck.hpp"
#include "metabev/tensor.hpp"

using namespace metabev;
using T = Tensor<double>;

TEST_CASE("shape bookkeeping and construction") {
  T a = T::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(a.size() == 6);
  CHECK(a.dim(0) == 2);
  CHECK(a.dim(1) == 3);
  CHECK_THROWS(T::from_values({2, 2}, {1, 2, 3}));
}

TEST_CASE("elementwise forward values") {
  T a = T::from_values({3}, {1, -2, 3});
  T b = T::from_values({3}, {4, 5, -6});
  CHECK(add(a, b).value()[0] == 5);
  CHECK(sub(a, b).value()[1] == -7);
  CHECK(mul(a, b).value()[2] == -18);
  CHECK(scale(a, 2.0).value()[0] == 2);
  CHECK(sum(a).item() == doctest::Approx(2.0));
  CHECK(mean(a).item() == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("backward through a small expression") {
  T x = T::from_values({2}, {3.0, -1.0}, true);
  // f = sum(x * x) => df/dx = 2x
  T f = sum(mul(x, x));
  f.backward();
  CHECK(x.grad()[0] == doctest::Approx(6.0));
  CHECK(x.grad()[1] == doctest::Approx(-2.0));
}

TEST_CASE("grad accumulates across reuse of the same tensor") {
  T x = T::from_values({1}, {2.0}, true);
  T f = sum(add(mul(x, x), x));  // x^2 + x => 2x + 1 = 5
  f.backward();
  CHECK(x.grad()[0] == doctest::Approx(5.0));
}

TEST_CASE("finite_difference_grad closed forms") {
  // f(x) = x^2 at x = 3
  auto sq = [](const ArrayX<double>& v) { return v[0] * v[0]; };
  ArrayX<double> x(1);
  x[0] = 3.0;
  auto g = finite_difference_grad<double>(sq, x, 1e-5);
  CHECK(g[0] == doctest::Approx(6.0).epsilon(1e-6));

  // f(x) = sum(x) => all ones
  auto sm = [](const ArrayX<double>& v) { return v.sum(); };
  ArrayX<double> y = ArrayX<double>::Random(7);
  auto gy = finite_difference_grad<double>(sm, y, 1e-5);
  for (long i = 0; i < gy.size(); ++i) CHECK(gy[i] == doctest::Approx(1.0).epsilon(1e-8));

  CHECK_THROWS(finite_difference_grad<double>(sq, x, 0.0));
}

namespace {

// generic gradient check of an op built from Tensors
template <typename BuildFn>
double check_grad(BuildFn build, ArrayX<double> x0, const Shape& shape) {
  T x = T::from_array(shape, x0, true);
  T f = build(x);
  f.backward();
  auto fd = finite_difference_grad<double>(
      [&](const ArrayX<double>& v) {
        T xx = T::from_array(shape, v, false);
        return build(xx).item();
      },
      x0, 1e-6);
  return max_rel_error<double>(x.grad(), fd);
}

}  // namespace

TEST_CASE("reverse mode matches finite differences on random shapes") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    int n = 1 + rng.uniform_int(6);
    int m = 1 + rng.uniform_int(4);
    Shape shape{n, m};
    ArrayX<double> x0(n * m);
    for (long i = 0; i < x0.size(); ++i) x0[i] = rng.uniform(-2.0, 2.0);

    auto mix = [&](const T& x) {
      T y = add(mul(x, x), scale(x, 0.5));
      y = sub(y, add_scalar(x, 1.0));
      return mean(mul(y, sigmoid(x)));
    };
    CHECK(check_grad(mix, x0, shape) < 1e-4);

    auto smooth = [&](const T& x) { return sum(mul(gelu(x), softplus(x))); };
    CHECK(check_grad(smooth, x0, shape) < 1e-4);

    auto expy = [&](const T& x) { return mean(exp(scale(x, 0.3))); };
    CHECK(check_grad(expy, x0, shape) < 1e-4);
  }
}

TEST_CASE("pow abs relu gradients away from kinks") {
  Rng rng(11);
  ArrayX<double> x0(8);
  for (long i = 0; i < 8; ++i) x0[i] = rng.uniform(0.2, 2.0);  // strictly positive
  auto f1 = [](const T& x) { return sum(pow_const(x, 1.7)); };
  CHECK(check_grad(f1, x0, {8}) < 1e-4);
  auto f2 = [](const T& x) { return sum(abs(add_scalar(x, -1.0))); };
  CHECK(check_grad(f2, x0, {8}) < 1e-4);
  auto f3 = [](const T& x) { return sum(relu(add_scalar(x, -1.0))); };
  CHECK(check_grad(f3, x0, {8}) < 1e-4);
  auto f4 = [](const T& x) { return sum(log(x)); };
  CHECK(check_grad(f4, x0, {8}) < 1e-4);
}

TEST_CASE("concat gather scatter row_scale") {
  T a = T::from_values({2, 2}, {1, 2, 3, 4}, true);
  T b = T::from_values({2, 1}, {5, 6}, true);
  T c = concat<double>({a, b}, 1);
  CHECK(c.shape() == Shape{2, 3});
  CHECK(c.value()[2] == 5);
  CHECK(c.value()[5] == 6);

  T g = gather_rows(a, {1, 0, 1});
  CHECK(g.shape() == Shape{3, 2});
  CHECK(g.value()[0] == 3);

  T s = scatter_add_rows(g, {0, 0, 1}, 2);
  CHECK(s.value()[0] == doctest::Approx(3 + 1));

  T gates = T::from_values({2}, {0.25, 4.0}, true);
  T r = row_scale(a, gates);
  CHECK(r.value()[0] == doctest::Approx(0.25));
  CHECK(r.value()[3] == doctest::Approx(16.0));

  // gradient through the composition
  T loss = sum(mul(r, r));
  loss.backward();
  CHECK(gates.grad()[0] == doctest::Approx(2 * 0.25 * (1 * 1 + 2 * 2)));

  CHECK_THROWS(gather_rows(a, {2}));
  CHECK_THROWS(concat<double>({}, 0));
}

TEST_CASE("gather_cols_per_row") {
  T x = T::from_values({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  T y = gather_cols_per_row(x, {{2, 0}, {1, 1}});
  CHECK(y.value()[0] == 3);
  CHECK(y.value()[1] == 1);
  CHECK(y.value()[2] == 5);
  sum(y).backward();
  CHECK(x.grad()[4] == doctest::Approx(2.0));
  CHECK(x.grad()[5] == doctest::Approx(0.0));
}

TEST_CASE("forward ops are bit-deterministic") {
  Rng rng(3);
  ArrayX<double> x0(12);
  for (long i = 0; i < 12; ++i) x0[i] = rng.uniform(-1, 1);
  auto run = [&]() {
    T x = T::from_array({3, 4}, x0);
    return sum(mul(gelu(x), sigmoid(x))).item();
  };
  double a = run(), b = run();
  CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
}

TEST_CASE("no NaN or Inf from finite inputs") {
  Rng rng(5);
  ArrayX<double> x0(50);
  for (long i = 0; i < 50; ++i) x0[i] = rng.uniform(-30, 30);
  T x = T::from_array({50}, x0);
  CHECK(softplus(x).value().allFinite());
  CHECK(sigmoid(x).value().allFinite());
  CHECK(gelu(x).value().allFinite());
}

TEST_CASE("float instantiation compiles and runs") {
  Tensor<float> x = Tensor<float>::from_values({2}, {1.0f, 2.0f}, true);
  auto f = sum(mul(x, x));
  f.backward();
  CHECK(x.grad()[0] == doctest::Approx(2.0f));
}
