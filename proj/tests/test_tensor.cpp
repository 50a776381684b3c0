#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "membart/grad_check.hpp"
#include "membart/ops.hpp"

using namespace membart;

namespace {

Tensor<double> t2x2(double a, double b, double c, double d) {
  return Tensor<double>::from_data({2, 2}, {a, b, c, d});
}

}  // namespace

TEST_CASE("matmul basics") {
  auto I = t2x2(1, 0, 0, 1);
  auto m = t2x2(1, 2, 3, 4);
  auto z = t2x2(0, 0, 0, 0);

  auto r1 = matmul(I, m);
  CHECK(bitwise_equal(r1, m));

  auto r2 = matmul(m, z);
  CHECK(bitwise_equal(r2, z));

  auto r3 = matmul(m, t2x2(5, 6, 7, 8));
  CHECK(r3.data()[0] == doctest::Approx(19));
  CHECK(r3.data()[1] == doctest::Approx(22));
  CHECK(r3.data()[2] == doctest::Approx(43));
  CHECK(r3.data()[3] == doctest::Approx(50));

  CHECK_THROWS_AS(matmul(m, Tensor<double>({3, 2})), ShapeError);
}

TEST_CASE("matmul batched and transposed") {
  std::mt19937_64 rng(7);
  auto a = Tensor<double>::randn({2, 3, 4}, rng);
  auto b = Tensor<double>::randn({4, 5}, rng);
  auto out = matmul(a, b);
  REQUIRE(out.shape() == std::vector<int64_t>({2, 3, 5}));
  // spot-check one entry against a plain loop
  double acc = 0;
  for (int k = 0; k < 4; ++k) acc += a.data()[1 * 12 + 2 * 4 + k] * b.data()[k * 5 + 3];
  CHECK(out.data()[1 * 15 + 2 * 5 + 3] == doctest::Approx(acc));

  auto bt = Tensor<double>::randn({5, 4}, rng);
  auto out2 = matmul(a, bt, /*trans_b=*/true);
  REQUIRE(out2.shape() == std::vector<int64_t>({2, 3, 5}));
  acc = 0;
  for (int k = 0; k < 4; ++k) acc += a.data()[0 * 12 + 1 * 4 + k] * bt.data()[2 * 4 + k];
  CHECK(out2.data()[0 * 15 + 1 * 5 + 2] == doctest::Approx(acc));
}

TEST_CASE("softmax rows") {
  auto x = Tensor<double>::from_data({3}, {0, 0, 0});
  auto y = softmax_rows(x);
  for (int i = 0; i < 3; ++i) CHECK(y.data()[i] == doctest::Approx(1.0 / 3));

  auto sat = softmax_rows(Tensor<double>::from_data({3}, {1000, 0, 0}));
  CHECK(std::abs(sat.data()[0] - 1.0) < 1e-9);
  CHECK(std::abs(sat.data()[1]) < 1e-9);
  CHECK(std::abs(sat.data()[2]) < 1e-9);

  auto lg = softmax_rows(Tensor<double>::from_data({3}, {std::log(1.0), std::log(2.0), std::log(3.0)}));
  CHECK(lg.data()[0] == doctest::Approx(1.0 / 6));
  CHECK(lg.data()[1] == doctest::Approx(2.0 / 6));
  CHECK(lg.data()[2] == doctest::Approx(3.0 / 6));
}

TEST_CASE("softmax rows sum to one up to 1e4 magnitudes") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> dist(-1e4, 1e4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> x({5, 7});
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = dist(rng);
    auto y = softmax_rows(x);
    for (int r = 0; r < 5; ++r) {
      double s = 0;
      for (int c = 0; c < 7; ++c) {
        CHECK(y.data()[r * 7 + c] >= 0.0);
        s += y.data()[r * 7 + c];
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("layer_norm") {
  auto gain = Tensor<double>::full({4}, 1.0);
  auto bias = Tensor<double>::zeros({4});

  // constant row -> all zeros (eps guards the zero variance)
  auto c = layer_norm(Tensor<double>::full({1, 4}, 3.25), gain, bias);
  for (int i = 0; i < 4; ++i) CHECK(std::abs(c.data()[i]) < 1e-9);

  // row already zero-mean unit-variance stays put as eps -> 0
  auto g2 = Tensor<double>::full({2}, 1.0);
  auto b2 = Tensor<double>::zeros({2});
  auto y = layer_norm(Tensor<double>::from_data({1, 2}, {1.0, -1.0}), g2, b2, 1e-12);
  CHECK(y.data()[0] == doctest::Approx(1.0));
  CHECK(y.data()[1] == doctest::Approx(-1.0));

  // gain 0 -> bias dominates
  auto zg = Tensor<double>::zeros({4});
  auto bb = Tensor<double>::full({4}, -2.5);
  std::mt19937_64 rng(3);
  auto any = Tensor<double>::randn({3, 4}, rng);
  auto yb = layer_norm(any, zg, bb);
  for (int64_t i = 0; i < yb.numel(); ++i) CHECK(yb.data()[i] == doctest::Approx(-2.5));
}

TEST_CASE("layer_norm statistics for d >= 8") {
  std::mt19937_64 rng(11);
  auto gain = Tensor<double>::full({16}, 1.0);
  auto bias = Tensor<double>::zeros({16});
  auto x = Tensor<double>::randn({8, 16}, rng, 3.0);
  auto y = layer_norm(x, gain, bias);
  for (int r = 0; r < 8; ++r) {
    double mean = 0, var = 0;
    for (int c = 0; c < 16; ++c) mean += y.data()[r * 16 + c];
    mean /= 16;
    for (int c = 0; c < 16; ++c) {
      double d = y.data()[r * 16 + c] - mean;
      var += d * d;
    }
    var /= 16;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives ones") {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto x = Tensor<double>::from_data({2, 2}, {4, 3, 2, 1}).set_requires_grad();
    auto loss = sum_all(x);
    tape.backward(loss);
    auto g = x.grad();
    for (int i = 0; i < 4; ++i) CHECK(g.data()[i] == 1.0);
  }
  SUBCASE("dot product swaps operands") {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto x = Tensor<double>::from_data({3}, {1, 2, 3}).set_requires_grad();
    auto y = Tensor<double>::from_data({3}, {-1, 5, 0.5}).set_requires_grad();
    auto loss = sum_all(mul(x, y));
    tape.backward(loss);
    CHECK(bitwise_equal(x.grad(), y.detach()));
    CHECK(bitwise_equal(y.grad(), x.detach()));
  }
  SUBCASE("repeated backward accumulates") {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto x = Tensor<double>::from_data({2}, {1, 2}).set_requires_grad();
    auto loss = sum_all(mul(x, x));
    tape.backward(loss);
    tape.backward(loss);
    CHECK(x.grad().data()[0] == doctest::Approx(4.0));  // 2*x accumulated twice
    CHECK(x.grad().data()[1] == doctest::Approx(8.0));
  }
}

TEST_CASE("two-layer net matches finite differences") {
  std::mt19937_64 rng(17);
  auto w1 = Tensor<double>::randn({4, 6}, rng, 0.5).set_requires_grad();
  auto b1 = Tensor<double>::randn({6}, rng, 0.1).set_requires_grad();
  auto w2 = Tensor<double>::randn({6, 3}, rng, 0.5).set_requires_grad();
  auto x = Tensor<double>::randn({2, 4}, rng);

  auto forward = [&]() -> Tensor<double> {
    auto h = gelu(add_bias(matmul(x, w1), b1));
    return sum_all(sigmoid(matmul(h, w2)));
  };

  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(forward());
  }
  auto eval = [&]() { return forward().item(); };
  for (auto* p : {&w1, &b1, &w2}) {
    auto fd = finite_diff_grad<double>(eval, *p, 1e-5);
    auto res = compare_grads(p->grad(), fd, 1e-4, 1e-7);
    CAPTURE(res.max_rel);
    CHECK(res.ok);
    CHECK(res.max_rel < 1e-4);
  }
}

TEST_CASE("finite_diff_grad closed forms") {
  auto x = Tensor<double>::from_data({2}, {1, 2});
  auto f_sumsq = [&]() {
    double acc = 0;
    for (int i = 0; i < 2; ++i) acc += x.data()[i] * x.data()[i];
    return acc;
  };
  auto g = finite_diff_grad<double>(f_sumsq, x, 1e-5);
  CHECK(std::abs(g.data()[0] - 2.0) < 1e-6);
  CHECK(std::abs(g.data()[1] - 4.0) < 1e-6);

  auto fc = [&]() { return 7.5; };
  auto gz = finite_diff_grad<double>(fc, x, 1e-5);
  CHECK(gz.data()[0] == 0.0);
  CHECK(gz.data()[1] == 0.0);

  auto z = Tensor<double>::from_data({2}, {0, 0});
  auto f_soft = [&]() { return softmax_rows(z).data()[0]; };
  auto gs = finite_diff_grad<double>(f_soft, z, 1e-5);
  CHECK(std::abs(gs.data()[0] - 0.25) < 1e-6);
  CHECK(std::abs(gs.data()[1] + 0.25) < 1e-6);
}

TEST_CASE("gradcheck every differentiable op, 10 seeds") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed * 1301 + 5);
    auto a = Tensor<double>::randn({3, 4}, rng).set_requires_grad();
    auto b = Tensor<double>::randn({3, 4}, rng).set_requires_grad();
    auto w = Tensor<double>::randn({4, 5}, rng, 0.7).set_requires_grad();
    auto bias = Tensor<double>::randn({4}, rng, 0.3).set_requires_grad();
    auto gain = Tensor<double>::randn({4}, rng, 0.2).set_requires_grad();
    auto gate = Tensor<double>::randn({3}, rng).set_requires_grad();
    auto alpha = Tensor<double>::randn({1}, rng).set_requires_grad();

    auto forward = [&]() -> Tensor<double> {
      auto s = add(mul(a, b), add_bias(sub(a, b), bias));
      auto ln = layer_norm(s, gain, bias);
      auto sm = softmax_rows(mul_scalar(ln, 1.7));
      auto mm = matmul(sm, w);                      // [3,5]
      auto sw = swap_axes(reshape(mm, {3, 5}), 0, 1);  // [5,3]
      auto cc = concat<double>({sw, sw}, 0);        // [10,3]
      auto sl = slice(cc, 0, 2, 7);                 // [5,3]
      auto rd = rowwise_dot(sl, sl);                // [5]
      auto gated = mul_rows(reshape(sm, {3, 4}), gate);
      auto scaled = scale_by(gated, alpha);
      return add(sum_all(gelu(rd)), sum_all(sigmoid(scaled)));
    };

    Tape<double> tape;
    {
      TapeScope<double> scope(tape);
      tape.backward(forward());
    }
    auto eval = [&]() { return forward().item(); };
    int pi = 0;
    for (auto* p : {&a, &b, &w, &bias, &gain, &gate, &alpha}) {
      auto fd = finite_diff_grad<double>(eval, *p, 1e-5);
      auto res = compare_grads(p->grad(), fd, 1e-4, 1e-7);
      CAPTURE(seed);
      CAPTURE(pi);
      CAPTURE(res.max_rel);
      CHECK(res.ok);
      ++pi;
    }
  }
}

TEST_CASE("embedding and cross entropy gradcheck") {
  std::mt19937_64 rng(99);
  auto table = Tensor<double>::randn({7, 4}, rng).set_requires_grad();
  IdMatrix ids(2, 3);
  ids.v = {0, 4, 6, 2, 2, 5};
  IdMatrix labels(2, 3);
  labels.v = {1, 0, 2, 2, 0, 1};
  std::vector<double> weights = {1, 0.5, 1, 0, 1, 0.25};
  auto w = Tensor<double>::randn({4, 3}, rng).set_requires_grad();

  auto forward = [&]() {
    auto e = embedding(table, ids);            // [2,3,4]
    auto logits = matmul(e, w);                // [2,3,3]
    return cross_entropy_sum(logits, labels, weights);
  };
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(forward());
  }
  auto eval = [&]() { return forward().item(); };
  for (auto* p : {&table, &w}) {
    auto fd = finite_diff_grad<double>(eval, *p, 1e-5);
    auto res = compare_grads(p->grad(), fd, 1e-4, 1e-7);
    CHECK(res.ok);
  }
}

TEST_CASE("uniform logits give log(V) loss per token") {
  auto logits = Tensor<double>::zeros({1, 2, 10});
  IdMatrix labels(1, 2);
  labels.v = {3, 7};
  auto loss = cross_entropy_sum(logits, labels, {1.0, 1.0});
  CHECK(loss.item() == doctest::Approx(2.0 * std::log(10.0)));
}

TEST_CASE("detach boundary blocks gradient exactly") {
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto x = Tensor<double>::from_data({3}, {1, 2, 3}).set_requires_grad();
  auto w = Tensor<double>::from_data({3}, {2, 2, 2}).set_requires_grad();
  auto y = mul(x, x);     // before the boundary
  auto cut = y.detach();  // boundary
  auto loss = sum_all(mul(cut, w));
  tape.backward(loss);
  CHECK_FALSE(x.has_grad());
  auto g = x.grad();
  for (int i = 0; i < 3; ++i) CHECK(g.data()[i] == 0.0);
  CHECK(bitwise_equal(w.grad(), cut));  // gradient still flows after the boundary
}

TEST_CASE("seeded backward") {
  SUBCASE("seed on intermediate tensor flows back") {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto x = Tensor<double>::from_data({2}, {3, 4}).set_requires_grad();
    auto y = mul(x, x);  // dy/dx = 2x
    auto seed = Tensor<double>::from_data({2}, {1.0, 0.5});
    tape.backward_seeded({GradSeed<double>{y, seed}});
    CHECK(x.grad().data()[0] == doctest::Approx(6.0));
    CHECK(x.grad().data()[1] == doctest::Approx(4.0));
  }
  SUBCASE("loss and seed together accumulate like separate calls") {
    auto run = [](bool joint) {
      Tape<double> tape;
      TapeScope<double> scope(tape);
      auto x = Tensor<double>::from_data({2}, {1, 2}).set_requires_grad();
      auto y = mul(x, x);
      auto loss = sum_all(y);
      auto seed = Tensor<double>::from_data({2}, {0.25, 0.75});
      if (joint) {
        tape.backward_seeded({GradSeed<double>{loss, Tensor<double>::scalar(1.0)}, GradSeed<double>{y, seed}});
      } else {
        tape.backward(loss);
        tape.backward_seeded({GradSeed<double>{y, seed}});
      }
      return x.grad();
    };
    CHECK(bitwise_equal(run(true), run(false)));
  }
  SUBCASE("seeding an unrecorded tensor is a usage error") {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto x = Tensor<double>::from_data({2}, {1, 2}).set_requires_grad();
    auto loss = sum_all(x);
    auto stranger = Tensor<double>::from_data({2}, {0, 0});
    CHECK_THROWS_AS(tape.backward_seeded({GradSeed<double>{stranger, stranger}}), UsageError);
    (void)loss;
  }
}

TEST_CASE("determinism: same inputs, same bits") {
  auto run = []() {
    std::mt19937_64 rng(123);
    auto a = Tensor<float>::randn({4, 8}, rng);
    auto w = Tensor<float>::randn({8, 8}, rng);
    auto g = Tensor<float>::full({8}, 1.0f);
    auto b = Tensor<float>::zeros({8});
    return softmax_rows(layer_norm(matmul(a, w), g, b));
  };
  CHECK(bitwise_equal(run(), run()));
}

TEST_CASE("masked softmax zeroes fully masked rows") {
  // scores [1,1,2,3]; second query row fully masked
  auto x = Tensor<double>::from_data({1, 1, 2, 3}, {0.5, 0.2, 0.1, 1.0, 2.0, 3.0});
  std::vector<double> mask = {0, 0, kMaskedScore, kMaskedScore, kMaskedScore, kMaskedScore};
  auto y = softmax_rows(x, mask);
  CHECK(y.data()[0] + y.data()[1] == doctest::Approx(1.0));
  CHECK(y.data()[2] == 0.0);  // masked key within live row
  CHECK(y.data()[3] == 0.0);
  CHECK(y.data()[4] == 0.0);
  CHECK(y.data()[5] == 0.0);
}
