#include <cmath>
#include <random>

#include "chunkgrad/finite_difference.hpp"
#include "chunkgrad/kernels.hpp"
#include "chunkgrad/tape.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace chunkgrad;
using testing::max_abs_diff;

namespace {

Value<double> scalar_leaf(double x) { return Value<double>::scalar(x, true); }

}  // namespace

TEST_CASE("add and mul propagate by linearity and the product rule") {
  Tape<double> tape;
  auto a = scalar_leaf(3.0);
  auto b = scalar_leaf(4.0);
  tape.backward(ops::add(tape, a, b));
  CHECK(a.grad()[0] == 1.0);
  CHECK(b.grad()[0] == 1.0);

  a.clear_grad();
  b.clear_grad();
  tape.backward(ops::mul(tape, a, b));
  CHECK(a.grad()[0] == 4.0);
  CHECK(b.grad()[0] == 3.0);
}

TEST_CASE("recording in inference mode is rejected") {
  Tape<double> tape(Mode::inference);
  auto a = scalar_leaf(1.0);
  KernelRecord<double> rec;
  rec.kind = OpKind::custom;
  rec.inputs = {a};
  rec.output = std::make_shared<std::vector<double>>(1, 1.0);
  rec.backward = [](const BackwardArgs<double>&) {};
  CHECK_THROWS_AS(tape.record(rec), ContractViolation);

  // Kernels in inference mode produce constants rather than nodes.
  auto y = ops::mul(tape, a, a);
  CHECK(y.is_leaf());
  CHECK_FALSE(y.requires_grad());
  CHECK(tape.size() == 0);
}

TEST_CASE("detach cuts the graph and shares data") {
  Tape<double> tape;
  auto w = scalar_leaf(2.0);
  auto h = ops::mul(tape, w, w);
  auto hd = detach(h);
  CHECK(hd.is_leaf());
  CHECK(hd.requires_grad());
  CHECK(hd.buffer() == h.buffer());
  CHECK(hd.data()[0] == h.data()[0]);

  auto y = ops::scale(tape, hd, 3.0);
  tape.backward(y);
  CHECK_FALSE(w.has_grad());
  CHECK(hd.grad()[0] == 3.0);
}

TEST_CASE("gradient on a detached leaf accumulates across backward calls") {
  std::mt19937_64 rng(7);
  auto src = Value<double>::leaf({4}, testing::normal_vector(rng, 4));
  auto x = detach(src);
  const auto w1 = testing::normal_vector(rng, 4);
  const auto w2 = testing::normal_vector(rng, 4);
  auto wv1 = Value<double>::leaf({4}, w1);
  auto wv2 = Value<double>::leaf({4}, w2);

  Tape<double> tape;
  tape.backward(ops::dot(tape, x, wv1));
  tape.backward(ops::dot(tape, x, wv2));
  const std::vector<double> two(x.grad().begin(), x.grad().end());

  auto y = detach(src);
  auto combined = ops::add(tape, ops::dot(tape, y, wv1), ops::dot(tape, y, wv2));
  tape.backward(combined);
  CHECK(max_abs_diff(two, y.grad()) <= 1e-15);
}

TEST_CASE("hooks add base times scaler to the arriving gradient") {
  SUBCASE("scaler zero is the identity") {
    Tape<double> tape;
    auto a = scalar_leaf(3.0);
    auto m = ops::scale(tape, a, 2.0);
    register_hook(m, {5.0}, 0.0);
    tape.backward(ops::scale(tape, m, 1.0));
    CHECK(a.grad()[0] == 2.0);
  }
  SUBCASE("k=6, t=4 compensation") {
    Tape<double> tape;
    auto a = scalar_leaf(1.0);
    auto m = ops::scale(tape, a, 1.0);
    register_hook(m, {2.0}, 6.0 / 4.0);
    tape.backward(ops::scale(tape, m, 1.0));
    // arriving 1 + 1.5 * 2
    CHECK(a.grad()[0] == 4.0);
  }
  SUBCASE("a hook with no upstream gradient still injects") {
    std::mt19937_64 rng(3);
    const auto base = testing::normal_vector(rng, 3);
    auto w = Value<double>::leaf({3}, testing::normal_vector(rng, 3), true);
    auto u = Value<double>::leaf({3}, testing::normal_vector(rng, 3), true);

    Tape<double> tape;
    auto m = ops::mul(tape, w, w);       // side output nothing reads
    auto loss = ops::dot(tape, u, u);    // independent of m
    register_hook(m, base, 0.5);
    tape.backward(loss);
    const std::vector<double> hooked(w.grad().begin(), w.grad().end());

    w.clear_grad();
    u.clear_grad();
    auto m2 = ops::mul(tape, w, w);
    auto loss2 = ops::dot(tape, u, u);
    std::vector<double> seed(base);
    for (auto& s : seed) s *= 0.5;
    std::vector<Root<double>> roots{{loss2, {1.0}}, {m2, seed}};
    tape.backward(roots);
    CHECK(max_abs_diff(hooked, w.grad()) == 0.0);
  }
  SUBCASE("shape mismatch is rejected") {
    Tape<double> tape;
    auto a = Value<double>::leaf({2}, {1.0, 2.0}, true);
    auto m = ops::scale(tape, a, 1.0);
    CHECK_THROWS_AS(register_hook(m, {1.0}, 1.0), std::invalid_argument);
  }
}

TEST_CASE("two hooks equal one combined hook") {
  std::mt19937_64 rng(11);
  const auto b1 = testing::normal_vector(rng, 5);
  const auto b2 = testing::normal_vector(rng, 5);
  const double s1 = 0.75;
  const double s2 = -1.25;
  auto x = Value<double>::leaf({5}, testing::normal_vector(rng, 5), true);
  auto wv = Value<double>::leaf({5}, testing::normal_vector(rng, 5));

  auto run = [&](bool split) {
    x.clear_grad();
    Tape<double> tape;
    auto m = ops::mul(tape, x, x);
    if (split) {
      register_hook(m, b1, s1);
      register_hook(m, b2, s2);
    } else {
      std::vector<double> b(5);
      for (std::size_t i = 0; i < 5; ++i) b[i] = s1 * b1[i] + s2 * b2[i];
      register_hook(m, b, 1.0);
    }
    tape.backward(ops::dot(tape, m, wv));
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  CHECK(max_abs_diff(run(true), run(false)) <= 1e-12);
}

TEST_CASE("backward on theta squared") {
  Tape<double> tape;
  auto t = scalar_leaf(3.0);
  tape.backward(ops::mul(tape, t, t));
  CHECK(t.grad()[0] == 6.0);
}

TEST_CASE("multiple roots accumulate like separate retained backwards") {
  std::mt19937_64 rng(5);
  auto w = Value<double>::leaf({3, 3}, testing::normal_vector(rng, 9), true);
  auto x = Value<double>::leaf({1, 3}, testing::normal_vector(rng, 3), true);
  const auto g = testing::normal_vector(rng, 3);

  Tape<double> tape;
  auto m = ops::matmul(tape, x, w);
  auto J = ops::sum(tape, ops::mul(tape, m, m));
  std::vector<Root<double>> both{{J, {1.0}}, {m, g}};
  tape.backward(both);
  const std::vector<double> combined(w.grad().begin(), w.grad().end());

  w.clear_grad();
  x.clear_grad();
  m = ops::matmul(tape, x, w);
  J = ops::sum(tape, ops::mul(tape, m, m));
  std::vector<Root<double>> first{{J, {1.0}}};
  std::vector<Root<double>> second{{m, g}};
  tape.backward(first, true);
  tape.backward(second);
  CHECK(max_abs_diff(combined, w.grad()) <= 1e-12);
}

TEST_CASE("y = Wx matches central differences") {
  std::mt19937_64 rng(9);
  const auto theta = testing::normal_vector(rng, 12);
  const auto x = testing::normal_vector(rng, 4);
  auto f = [&](std::span<const double> th) {
    double s = 0.0;
    for (std::size_t r = 0; r < 3; ++r) {
      double y = 0.0;
      for (std::size_t c = 0; c < 4; ++c) y += x[c] * th[c * 3 + r];
      s += y * (r + 1.0);
    }
    return s;
  };
  Tape<double> tape;
  auto w = Value<double>::leaf({4, 3}, theta, true);
  auto xv = Value<double>::leaf({1, 4}, x);
  auto y = ops::matmul(tape, xv, w);
  Root<double> root{y, {1.0, 2.0, 3.0}};
  tape.backward(std::span<const Root<double>>(&root, 1));
  CHECK(max_abs_diff(w.grad(), finite_difference_grad(f, theta, 1e-6)) <= 1e-8);
}

TEST_CASE("finite differences on analytic functions") {
  const std::vector<double> theta{1.0, 2.0};
  const auto zero = finite_difference_grad([](std::span<const double>) { return 4.2; }, theta, 1e-5);
  CHECK(zero == std::vector<double>{0.0, 0.0});
  const auto sq = finite_difference_grad(
      [](std::span<const double> t) { return t[0] * t[0] + t[1] * t[1]; }, theta, 1e-5);
  CHECK(std::abs(sq[0] - 2.0) <= 1e-9);
  CHECK(std::abs(sq[1] - 4.0) <= 1e-9);
  CHECK_THROWS(finite_difference_grad([](std::span<const double>) { return NAN; }, theta, 1e-5));
}

TEST_CASE("set_mode round trip and byte counters") {
  std::mt19937_64 rng(1);
  auto w = Value<double>::leaf({4, 4}, testing::normal_vector(rng, 16), true);
  auto x = Value<double>::leaf({2, 4}, testing::normal_vector(rng, 8), true);

  Tape<double> tape;
  ops::matmul(tape, ops::scale(tape, x, 2.0), w);
  const auto live = tape.live_bytes();
  const auto peak = tape.peak_bytes();
  CHECK(live > 0);
  tape.set_mode(Mode::inference);
  tape.set_mode(Mode::inference);
  ops::matmul(tape, ops::scale(tape, x, 2.0), w);
  CHECK(tape.live_bytes() == live);
  tape.set_mode(Mode::recording);
  CHECK(tape.live_bytes() == live);
  CHECK(tape.peak_bytes() == peak);
  ops::matmul(tape, ops::scale(tape, x, 2.0), w);
  CHECK(tape.live_bytes() > live);

  const auto before_free = tape.peak_bytes();
  tape.free();
  CHECK(tape.live_bytes() == 0);
  CHECK(tape.peak_bytes() == before_free);
  CHECK(tape.size() == 0);
}

TEST_CASE("freed graphs reject reuse") {
  Tape<double> tape;
  auto a = scalar_leaf(2.0);
  auto y = ops::mul(tape, a, a);
  tape.free();
  CHECK_FALSE(y.node().has_value());
  CHECK_THROWS_AS(tape.backward(y), ContractViolation);
  CHECK_THROWS_AS(register_hook(y, {1.0}, 1.0), ContractViolation);

  Tape<double> other;
  auto z = ops::mul(other, a, a);
  CHECK_THROWS_AS(tape.backward(z), ContractViolation);
}

TEST_CASE("backward without retain consumes the graph") {
  Tape<double> tape;
  auto a = scalar_leaf(2.0);
  auto y = ops::mul(tape, a, a);
  tape.backward(y);
  CHECK(tape.size() == 0);
  CHECK(tape.live_bytes() == 0);
  CHECK_THROWS_AS(tape.backward(y), ContractViolation);
}

TEST_CASE("gradients accumulate in a fixed order") {
  std::mt19937_64 rng(21);
  const auto w0 = testing::normal_vector(rng, 64);
  const auto x0 = testing::normal_vector(rng, 32);
  auto run = [&] {
    auto w = Value<double>::leaf({8, 8}, w0, true);
    auto x = Value<double>::leaf({4, 8}, x0);
    Tape<double> tape;
    auto h = ops::matmul(tape, x, w);
    auto y = ops::matmul(tape, ops::mul(tape, h, h), w);
    tape.backward(ops::sum(tape, y));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  CHECK(run() == run());
}
