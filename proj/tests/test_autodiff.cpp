#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "flexi/grad_check.hpp"
#include "flexi/ops.hpp"
#include "flexi/param_store.hpp"
#include "flexi/rng.hpp"
#include "flexi/tape.hpp"

using namespace flexi;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("dense forward values") {
  Tape tape;
  SUBCASE("identity weight maps input through") {
    Var x = tape.constant(Tensor({1, 2}, {1.0, 0.0}));
    Var w = tape.constant(Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}));
    Var b = tape.constant(Tensor({2}, {0.0, 0.0}));
    Var y = dense(x, w, b);
    CHECK(y->value.data == std::vector<double>{1.0, 0.0});
  }
  SUBCASE("hand arithmetic 1+2+3") {
    Var x = tape.constant(Tensor({1, 2}, {1.0, 2.0}));
    Var w = tape.constant(Tensor({2, 1}, {1.0, 1.0}));
    Var b = tape.constant(Tensor({1}, {3.0}));
    Var y = dense(x, w, b);
    CHECK(y->value.data[0] == doctest::Approx(6.0).epsilon(1e-15));
  }
  SUBCASE("zero weight broadcasts the bias to every row") {
    Rng rng(7);
    Var x = tape.constant(random_tensor({3, 4}, rng));
    Var w = tape.constant(Tensor::zeros({4, 2}));
    Var b = tape.constant(Tensor({2}, {0.5, -1.5}));
    Var y = dense(x, w, b);
    for (int i = 0; i < 3; ++i) {
      CHECK(y->value.data[i * 2 + 0] == 0.5);
      CHECK(y->value.data[i * 2 + 1] == -1.5);
    }
  }
  SUBCASE("shape mismatch names both shapes") {
    Var x = tape.constant(Tensor::zeros({1, 3}));
    Var w = tape.constant(Tensor::zeros({2, 2}));
    Var b = tape.constant(Tensor::zeros({2}));
    CHECK_THROWS_WITH_AS(dense(x, w, b),
                         doctest::Contains("[1x3]"), DimensionError);
  }
}

TEST_CASE("conv1d forward values") {
  Tape tape;
  SUBCASE("1-tap identity kernel") {
    Var x = tape.constant(Tensor({1, 1, 4}, {1.0, -2.0, 3.0, 0.5}));
    Var k = tape.constant(Tensor({1, 1, 1}, {1.0}));
    Var y = conv1d(x, k, 1, 0);
    CHECK(y->value.data == x->value.data);
  }
  SUBCASE("hand arithmetic [1,2,3]*[1,1] = [3,5]") {
    Var x = tape.constant(Tensor({1, 1, 3}, {1.0, 2.0, 3.0}));
    Var k = tape.constant(Tensor({1, 1, 2}, {1.0, 1.0}));
    Var y = conv1d(x, k, 1, 0);
    CHECK(y->value.shape == Shape{1, 1, 2});
    CHECK(y->value.data == std::vector<double>{3.0, 5.0});
  }
  SUBCASE("zero input gives zero output") {
    Rng rng(3);
    Var x = tape.constant(Tensor::zeros({2, 3, 8}));
    Var k = tape.constant(random_tensor({4, 3, 5}, rng));
    Var y = conv1d(x, k, 2, 2);
    for (double v : y->value.data) CHECK(v == 0.0);
  }
  SUBCASE("output width formula with stride and padding") {
    Var x = tape.constant(Tensor::zeros({1, 1, 128}));
    Var k = tape.constant(Tensor::zeros({16, 1, 5}));
    Var y = conv1d(x, k, 2, 2);
    CHECK(y->value.shape == Shape{1, 16, 64});
  }
  SUBCASE("kernel wider than padded input rejected") {
    Var x = tape.constant(Tensor::zeros({1, 1, 3}));
    Var k = tape.constant(Tensor::zeros({1, 1, 6}));
    CHECK_THROWS_AS(conv1d(x, k, 1, 1), DimensionError);
  }
}

TEST_CASE("conv2d forward values") {
  Tape tape;
  SUBCASE("1x1 identity kernel") {
    Rng rng(5);
    Tensor in = random_tensor({1, 1, 3, 3}, rng);
    Var x = tape.constant(in);
    Var k = tape.constant(Tensor({1, 1, 1, 1}, {1.0}));
    Var y = conv2d(x, k, 1, 0);
    CHECK(y->value.data == in.data);
  }
  SUBCASE("3x3 ones kernel on constant-1 3x3 input") {
    Var x = tape.constant(Tensor::full({1, 1, 3, 3}, 1.0));
    Var k = tape.constant(Tensor::full({1, 1, 3, 3}, 1.0));
    Var y = conv2d(x, k, 1, 0);
    CHECK(y->value.shape == Shape{1, 1, 1, 1});
    CHECK(y->value.data[0] == doctest::Approx(9.0).epsilon(1e-15));
  }
  SUBCASE("zero input gives zero output") {
    Rng rng(6);
    Var x = tape.constant(Tensor::zeros({1, 2, 6, 6}));
    Var k = tape.constant(random_tensor({3, 2, 3, 3}, rng));
    Var y = conv2d(x, k, 2, 1);
    for (double v : y->value.data) CHECK(v == 0.0);
  }
}

TEST_CASE("group_norm forward values") {
  Tape tape;
  SUBCASE("constant input standardizes to zero") {
    Var x = tape.constant(Tensor::full({1, 4, 3}, 5.0));
    Var g = tape.constant(Tensor::full({4}, 1.0));
    Var b = tape.constant(Tensor::zeros({4}));
    Var y = group_norm(x, 2, g, b, 1e-5);
    for (double v : y->value.data) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("plus-minus pair standardizes to about itself") {
    Var x = tape.constant(Tensor({1, 1, 2}, {-1.0, 1.0}));
    Var g = tape.constant(Tensor::full({1}, 1.0));
    Var b = tape.constant(Tensor::zeros({1}));
    Var y = group_norm(x, 1, g, b, 1e-12);
    CHECK(y->value.data[0] == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(y->value.data[1] == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("gamma zero collapses to broadcast beta") {
    Rng rng(11);
    Var x = tape.constant(random_tensor({2, 4, 5}, rng));
    Var g = tape.constant(Tensor::zeros({4}));
    Var b = tape.constant(Tensor({4}, {1.0, 2.0, 3.0, 4.0}));
    Var y = group_norm(x, 4, g, b, 1e-5);
    for (int ib = 0; ib < 2; ++ib)
      for (int c = 0; c < 4; ++c)
        for (int i = 0; i < 5; ++i)
          CHECK(y->value.data[(ib * 4 + c) * 5 + i] == doctest::Approx(c + 1.0));
  }
  SUBCASE("channels not divisible by groups rejected") {
    Var x = tape.constant(Tensor::zeros({1, 5, 2}));
    Var g = tape.constant(Tensor::full({5}, 1.0));
    Var b = tape.constant(Tensor::zeros({5}));
    CHECK_THROWS_AS(group_norm(x, 2, g, b, 1e-5), ConfigError);
  }
}

TEST_CASE("activation forward values") {
  Tape tape;
  Var x = tape.constant(Tensor({3}, {-3.0, 0.0, 2.0}));
  CHECK(activation(x, Act::relu)->value.data == std::vector<double>{0.0, 0.0, 2.0});
  CHECK(activation(x, Act::tanh)->value.data[1] == 0.0);
  CHECK(activation(x, Act::sigmoid)->value.data[1] == doctest::Approx(0.5));
}

TEST_CASE("lstm_cell") {
  Tape tape;
  int64_t b = 1, p = 3, q = 2;
  SUBCASE("all-zero weights give zero state") {
    Var x = tape.constant(Tensor({b, p}, {0.3, -0.7, 1.1}));
    Var h = tape.constant(Tensor({b, q}, {0.2, -0.1}));
    Var c = tape.constant(Tensor({b, q}, {0.5, 0.9}));
    Var wih = tape.constant(Tensor::zeros({4 * q, p}));
    Var whh = tape.constant(Tensor::zeros({4 * q, q}));
    Var bih = tape.constant(Tensor::zeros({4 * q}));
    Var bhh = tape.constant(Tensor::zeros({4 * q}));
    Var hc = lstm_cell(x, h, c, wih, whh, bih, bhh);
    Var hn = lstm_h(hc);
    // sigmoid(0)=1/2, tanh(0)=0: c' = c/2, h' = tanh(c/2)/2 -- with zero
    // candidate the h path vanishes only when c does, so use c = 0 too.
    CHECK(hn->value.data[0] == doctest::Approx(0.5 * std::tanh(0.25)));
  }
  SUBCASE("zero weights and zero carry give h' = c' = 0") {
    Var x = tape.constant(Tensor({b, p}, {0.3, -0.7, 1.1}));
    Var h = tape.constant(Tensor({b, q}, {0.2, -0.1}));
    Var c = tape.constant(Tensor::zeros({b, q}));
    Var z4q = tape.constant(Tensor::zeros({4 * q, p}));
    Var zqq = tape.constant(Tensor::zeros({4 * q, q}));
    Var zb = tape.constant(Tensor::zeros({4 * q}));
    Var hc = lstm_cell(x, h, c, z4q, zqq, zb, zb);
    for (double v : hc->value.data) CHECK(v == 0.0);
  }
  SUBCASE("saturated forget gate keeps the carry: c' ~= c + i*g") {
    Rng rng(17);
    Var x = tape.constant(random_tensor({b, p}, rng));
    Var h = tape.constant(random_tensor({b, q}, rng));
    Tensor cv = random_tensor({b, q}, rng);
    Var c = tape.constant(cv);
    Tensor wih_t = random_tensor({4 * q, p}, rng, -0.3, 0.3);
    Tensor whh_t = random_tensor({4 * q, q}, rng, -0.3, 0.3);
    Tensor bih_t = Tensor::zeros({4 * q});
    for (int64_t j = q; j < 2 * q; ++j) bih_t.data[j] = 50.0;  // forget-gate rows
    Var wih = tape.constant(wih_t);
    Var whh = tape.constant(whh_t);
    Var bih = tape.constant(bih_t);
    Var bhh = tape.constant(Tensor::zeros({4 * q}));
    Var hc = lstm_cell(x, h, c, wih, whh, bih, bhh);
    // recompute i and g by hand to form c + i*g
    for (int64_t j = 0; j < q; ++j) {
      double zi = 0.0, zg = 0.0;
      for (int64_t k = 0; k < p; ++k) {
        zi += wih_t.data[j * p + k] * x->value.data[k];
        zg += wih_t.data[(2 * q + j) * p + k] * x->value.data[k];
      }
      for (int64_t k = 0; k < q; ++k) {
        zi += whh_t.data[j * q + k] * h->value.data[k];
        zg += whh_t.data[(2 * q + j) * q + k] * h->value.data[k];
      }
      double expect = cv.data[j] + (1.0 / (1.0 + std::exp(-zi))) * std::tanh(zg);
      CHECK(hc->value.data[q + j] == doctest::Approx(expect).epsilon(1e-9));
    }
  }
  SUBCASE("carry stays bounded over 1000 steps") {
    Rng rng(23);
    Tensor wih_t = random_tensor({4 * q, p}, rng, -0.5, 0.5);
    Tensor whh_t = random_tensor({4 * q, q}, rng, -0.5, 0.5);
    Tensor bih_t = random_tensor({4 * q}, rng, -0.5, 0.5);
    Tensor bhh_t = random_tensor({4 * q}, rng, -0.5, 0.5);
    Tensor hv = Tensor::zeros({b, q}), cv = Tensor::zeros({b, q});
    for (int step = 0; step < 1000; ++step) {
      Tape t;
      Var x = t.constant(random_tensor({b, p}, rng));
      Var hc = lstm_cell(x, t.constant(hv), t.constant(cv), t.constant(wih_t),
                         t.constant(whh_t), t.constant(bih_t), t.constant(bhh_t));
      for (int64_t j = 0; j < q; ++j) {
        hv.data[j] = hc->value.data[j];
        cv.data[j] = hc->value.data[q + j];
      }
    }
    for (double v : cv.data) CHECK(std::abs(v) < 10.0);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("f(x)=x has gradient 1") {
    Tensor x = Tensor::scalar(5.0);
    x.requires_grad = true;
    Tape tape;
    Var xv = tape.leaf(&x);
    tape.backward(xv);
    CHECK(x.grad[0] == 1.0);
  }
  SUBCASE("f(x)=x^2 at x=3 has gradient 6") {
    Tensor x = Tensor::scalar(3.0);
    x.requires_grad = true;
    Tape tape;
    Var xv = tape.leaf(&x);
    Var y = mul(xv, xv);
    tape.backward(y);
    CHECK(x.grad[0] == doctest::Approx(6.0).epsilon(1e-14));
  }
  SUBCASE("backward on non-scalar rejected") {
    Tape tape;
    Var v = tape.constant(Tensor::zeros({3}));
    CHECK_THROWS_AS(tape.backward(v), UsageError);
  }
  SUBCASE("fan-out accumulates additively") {
    Tensor x = Tensor::scalar(2.0);
    x.requires_grad = true;
    Tape tape;
    Var xv = tape.leaf(&x);
    Var y = add(xv, xv);  // y = 2x
    Var z = mul(y, xv);   // z = 2x^2, dz/dx = 4x = 8
    tape.backward(z);
    CHECK(x.grad[0] == doctest::Approx(8.0).epsilon(1e-14));
  }
}

TEST_CASE("grad_check oracle") {
  SUBCASE("linear function is exact") {
    ParameterStore ps;
    Rng rng(31);
    ps.add("w", random_tensor({4, 3}, rng));
    ps.add("b", random_tensor({3}, rng));
    Tensor input = random_tensor({2, 4}, rng);
    auto f = [&]() {
      Tape tape;
      Var y = dense(tape.constant(input), tape.leaf(&ps.at("w")), tape.leaf(&ps.at("b")));
      Var loss = sum(y);
      tape.backward(loss);
      return loss->value.data[0];
    };
    // wide step: central differences are exact for linear maps, and the
    // larger secant suppresses cancellation noise
    CHECK(grad_check(f, ps, 1e-2) < 1e-10);
  }
  SUBCASE("two-layer tanh MLP") {
    ParameterStore ps;
    Rng rng(37);
    ps.add("w1", random_tensor({5, 8}, rng));
    ps.add("b1", random_tensor({8}, rng));
    ps.add("w2", random_tensor({8, 1}, rng));
    ps.add("b2", random_tensor({1}, rng));
    Tensor input = random_tensor({3, 5}, rng);
    auto f = [&]() {
      Tape tape;
      Var h = activation(
          dense(tape.constant(input), tape.leaf(&ps.at("w1")), tape.leaf(&ps.at("b1"))),
          Act::tanh);
      Var y = dense(h, tape.leaf(&ps.at("w2")), tape.leaf(&ps.at("b2")));
      Var loss = mul(sum(y), sum(y));
      tape.backward(loss);
      return loss->value.data[0];
    };
    CHECK(grad_check(f, ps, 1e-5) < 1e-4);
  }
  SUBCASE("relu network probed away from kinks") {
    ParameterStore ps;
    Rng rng(41);
    ps.add("w1", random_tensor({4, 6}, rng));
    ps.add("b1", random_tensor({6}, rng, 0.1, 0.9));  // keep preactivations off 0
    ps.add("w2", random_tensor({6, 1}, rng));
    ps.add("b2", random_tensor({1}, rng));
    Tensor input = random_tensor({2, 4}, rng);
    auto f = [&]() {
      Tape tape;
      Var h = activation(
          dense(tape.constant(input), tape.leaf(&ps.at("w1")), tape.leaf(&ps.at("b1"))),
          Act::relu);
      Var y = dense(h, tape.leaf(&ps.at("w2")), tape.leaf(&ps.at("b2")));
      Var loss = sum_sq_diff(y, tape.constant(Tensor::zeros({2, 1})));
      tape.backward(loss);
      return loss->value.data[0];
    };
    CHECK(grad_check(f, ps, 1e-5) < 1e-4);
  }
}

TEST_CASE("gradients of structured ops match finite differences") {
  Rng seed_rng(101);
  SUBCASE("conv1d") {
    ParameterStore ps;
    Rng rng(43);
    ps.add("k", random_tensor({2, 3, 3}, rng));
    Tensor input = random_tensor({2, 3, 7}, rng);
    auto f = [&]() {
      Tape tape;
      Var y = conv1d(tape.constant(input), tape.leaf(&ps.at("k")), 2, 1);
      Var loss = sum_sq_diff(y, tape.constant(Tensor::full(y->value.shape, 0.3)));
      tape.backward(loss);
      return loss->value.data[0];
    };
    CHECK(grad_check(f, ps, 1e-5) < 1e-4);
  }
  SUBCASE("conv2d") {
    ParameterStore ps;
    Rng rng(47);
    ps.add("k", random_tensor({2, 2, 3, 3}, rng));
    Tensor input = random_tensor({1, 2, 5, 5}, rng);
    auto f = [&]() {
      Tape tape;
      Var y = conv2d(tape.constant(input), tape.leaf(&ps.at("k")), 2, 1);
      Var loss = sum_sq_diff(y, tape.constant(Tensor::zeros(y->value.shape)));
      tape.backward(loss);
      return loss->value.data[0];
    };
    CHECK(grad_check(f, ps, 1e-5) < 1e-4);
  }
  SUBCASE("group_norm") {
    ParameterStore ps;
    Rng rng(53);
    ps.add("x", random_tensor({2, 4, 6}, rng));
    ps.add("gamma", random_tensor({4}, rng, 0.5, 1.5));
    ps.add("beta", random_tensor({4}, rng));
    auto f = [&]() {
      Tape tape;
      Var y = group_norm(tape.leaf(&ps.at("x")), 2, tape.leaf(&ps.at("gamma")),
                         tape.leaf(&ps.at("beta")), 1e-5);
      Var loss = sum_sq_diff(y, tape.constant(Tensor::full(y->value.shape, 0.1)));
      tape.backward(loss);
      return loss->value.data[0];
    };
    CHECK(grad_check(f, ps, 1e-5) < 1e-4);
  }
  SUBCASE("lstm_cell") {
    ParameterStore ps;
    Rng rng(59);
    int64_t p = 3, q = 4;
    ps.add("wih", random_tensor({4 * q, p}, rng, -0.5, 0.5));
    ps.add("whh", random_tensor({4 * q, q}, rng, -0.5, 0.5));
    ps.add("bih", random_tensor({4 * q}, rng, -0.5, 0.5));
    ps.add("bhh", random_tensor({4 * q}, rng, -0.5, 0.5));
    Tensor x = random_tensor({2, p}, rng), h = random_tensor({2, q}, rng),
           c = random_tensor({2, q}, rng);
    auto f = [&]() {
      Tape tape;
      Var hc = lstm_cell(tape.constant(x), tape.constant(h), tape.constant(c),
                         tape.leaf(&ps.at("wih")), tape.leaf(&ps.at("whh")),
                         tape.leaf(&ps.at("bih")), tape.leaf(&ps.at("bhh")));
      Var loss = sum_sq_diff(hc, tape.constant(Tensor::full({2, 2 * q}, 0.2)));
      tape.backward(loss);
      return loss->value.data[0];
    };
    CHECK(grad_check(f, ps, 1e-5) < 1e-4);
  }
  SUBCASE("kl_divergence and exp") {
    ParameterStore ps;
    Rng rng(61);
    ps.add("mu", random_tensor({3, 2}, rng));
    ps.add("logvar", random_tensor({3, 2}, rng));
    auto f = [&]() {
      Tape tape;
      Var kl = kl_divergence(tape.leaf(&ps.at("mu")), tape.leaf(&ps.at("logvar")));
      tape.backward(kl);
      return kl->value.data[0];
    };
    CHECK(grad_check(f, ps, 1e-5) < 1e-4);
  }
  SUBCASE("upsample, slice, concat, reshape chain") {
    ParameterStore ps;
    Rng rng(67);
    ps.add("x", random_tensor({2, 2, 4}, rng));
    auto f = [&]() {
      Tape tape;
      Var u = upsample1d(tape.leaf(&ps.at("x")), 2);
      Var m = reshape(u, {2, 16});
      Var left = slice_cols(m, 0, 8);
      Var right = slice_cols(m, 8, 16);
      Var cc = concat_cols({left, right});
      Var loss = sum_sq_diff(cc, tape.constant(Tensor::full({2, 16}, 0.25)));
      tape.backward(loss);
      return loss->value.data[0];
    };
    CHECK(grad_check(f, ps, 1e-6) < 1e-6);
  }
  SUBCASE("upsample2d and channel bias") {
    ParameterStore ps;
    Rng rng(71);
    ps.add("x", random_tensor({1, 2, 3, 3}, rng));
    ps.add("b", random_tensor({2}, rng));
    auto f = [&]() {
      Tape tape;
      Var u = upsample2d(tape.leaf(&ps.at("x")), 2);
      Var y = add_channel_bias(u, tape.leaf(&ps.at("b")));
      Var loss = sum_sq_diff(y, tape.constant(Tensor::zeros(y->value.shape)));
      tape.backward(loss);
      return loss->value.data[0];
    };
    CHECK(grad_check(f, ps, 1e-6) < 1e-6);
  }
}

TEST_CASE("linearity of dense and conv in their input") {
  Rng rng(73);
  Tensor k = random_tensor({2, 3, 3}, rng);
  Tensor a = random_tensor({1, 3, 6}, rng), b = random_tensor({1, 3, 6}, rng);
  Tensor apb = a;
  for (size_t i = 0; i < apb.data.size(); ++i) apb.data[i] += b.data[i];
  Tape tape;
  Var kv = tape.constant(k);
  Var ya = conv1d(tape.constant(a), kv, 1, 1);
  Var yb = conv1d(tape.constant(b), kv, 1, 1);
  Var ys = conv1d(tape.constant(apb), kv, 1, 1);
  for (size_t i = 0; i < ys->value.data.size(); ++i)
    CHECK(ys->value.data[i] ==
          doctest::Approx(ya->value.data[i] + yb->value.data[i]).epsilon(1e-12));
  // homogeneity
  Tensor a3 = a;
  for (double& v : a3.data) v *= 3.0;
  Var y3 = conv1d(tape.constant(a3), kv, 1, 1);
  for (size_t i = 0; i < y3->value.data.size(); ++i)
    CHECK(y3->value.data[i] == doctest::Approx(3.0 * ya->value.data[i]).epsilon(1e-12));
}

TEST_CASE("tape replay reproduces forward values bit-identically") {
  Rng rng(79);
  Tensor w1 = random_tensor({6, 8}, rng), b1 = random_tensor({8}, rng);
  Tensor w2 = random_tensor({8, 2}, rng), b2 = random_tensor({2}, rng);
  w1.requires_grad = b1.requires_grad = w2.requires_grad = b2.requires_grad = true;
  Tensor input = random_tensor({4, 6}, rng);
  Tape tape;
  Var h = activation(dense(tape.constant(input), tape.leaf(&w1), tape.leaf(&b1)),
                     Act::tanh);
  Var y = dense(h, tape.leaf(&w2), tape.leaf(&b2));
  Var loss = sum(y);
  std::vector<double> before = loss->value.data;
  std::vector<double> y_before = y->value.data;
  tape.replay();
  CHECK(loss->value.data == before);
  CHECK(y->value.data == y_before);
}

TEST_CASE("determinism of seeded streams") {
  Rng a(12345), b(12345);
  for (int i = 0; i < 1000; ++i) {
    CHECK(a.uniform01() == b.uniform01());
    CHECK(a.normal() == b.normal());
  }
  Rng d1 = Rng::derive(7, 3), d2 = Rng::derive(7, 3), d3 = Rng::derive(7, 4);
  CHECK(d1.uniform01() == d2.uniform01());
  CHECK(d1.uniform01() != d3.uniform01());
}

TEST_CASE("parameter store round-trips bit-exactly") {
  ParameterStore ps;
  Rng rng(83);
  ps.add("encoder/conv0/kernel", random_tensor({16, 1, 5}, rng));
  ps.add("decoder/head/bias", random_tensor({128}, rng, -1e6, 1e6));
  ps.add("propagator/w", Tensor({2, 2}, {0.0, -0.0, 1e-308, 1.7976931348623157e308}));
  std::string file =
      (std::filesystem::temp_directory_path() / "fvps_roundtrip.bin").string();
  ps.save(file);
  ParameterStore back = ParameterStore::load(file);
  CHECK(back.size() == ps.size());
  for (const auto& [path, t] : ps) {
    const Tensor& r = back.at(path);
    CHECK(r.shape == t.shape);
    for (size_t i = 0; i < t.data.size(); ++i) {
      uint64_t ba, bb;
      std::memcpy(&ba, &t.data[i], 8);
      std::memcpy(&bb, &r.data[i], 8);
      CHECK(ba == bb);
    }
    CHECK(r.requires_grad);
  }
  std::filesystem::remove(file);
  CHECK_THROWS_AS(ps.add("encoder/conv0/kernel", Tensor::zeros({1})), UsageError);
}

TEST_CASE("backward_component extracts jacobian rows") {
  // y = W x with x the differentiable leaf: d y_i / d x_j = W[i][j]
  Tensor x = Tensor({1, 2}, {0.7, -0.3});
  x.requires_grad = true;
  Tensor w({2, 3}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
  Tensor b = Tensor::zeros({3});
  Tape tape;
  Var y = dense(tape.leaf(&x), tape.constant(w), tape.constant(b));
  for (int64_t i = 0; i < 3; ++i) {
    x.zero_grad();
    tape.backward_component(y, i);
    CHECK(x.grad[0] == doctest::Approx(w.data[0 * 3 + i]).epsilon(1e-14));
    CHECK(x.grad[1] == doctest::Approx(w.data[1 * 3 + i]).epsilon(1e-14));
  }
}

TEST_CASE("mixed random networks match finite differences") {
  // small-scale version of the full oracle sweep in the acceptance harness
  for (uint64_t trial = 0; trial < 10; ++trial) {
    Rng rng = Rng::derive(900, trial);
    ParameterStore ps;
    ps.add("k1", [&] {
      Tensor t = Tensor::zeros({2, 1, 3});
      for (double& v : t.data) v = rng.uniform(-0.8, 0.8);
      return t;
    }());
    ps.add("gn_gamma", Tensor::full({2}, 1.0));
    ps.add("gn_beta", Tensor::zeros({2}));
    ps.add("w", [&] {
      Tensor t = Tensor::zeros({8, 2});
      for (double& v : t.data) v = rng.uniform(-0.8, 0.8);
      return t;
    }());
    ps.add("b", Tensor::zeros({2}));
    Tensor input = Tensor::zeros({1, 1, 8});
    for (double& v : input.data) v = rng.uniform(-1.0, 1.0);
    auto f = [&]() {
      Tape tape;
      Var c = conv1d(tape.constant(input), tape.leaf(&ps.at("k1")), 2, 1);
      Var g = group_norm(c, 2, tape.leaf(&ps.at("gn_gamma")),
                         tape.leaf(&ps.at("gn_beta")), 1e-5);
      Var a = activation(g, Act::tanh);
      Var flat = reshape(a, {1, 8});
      Var y = dense(flat, tape.leaf(&ps.at("w")), tape.leaf(&ps.at("b")));
      Var loss = sum_sq_diff(y, tape.constant(Tensor::full({1, 2}, 0.1)));
      tape.backward(loss);
      return loss->value.data[0];
    };
    CHECK(grad_check(f, ps, 1e-5, trial) < 1e-4);
  }
}
