#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cfsr/optim.hpp"
#include "cfsr/tensor.hpp"

using namespace cfsr;

namespace {

Tensor make_randn(std::vector<int> shape, uint64_t seed, float stddev = 1.0f) {
  Rng rng(seed);
  return Tensor::randn(std::move(shape), rng, stddev);
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
  Graph g;
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor out = g.matmul(eye, a);
  CHECK(out.values() == std::vector<float>{1, 2, 3, 4});

  Tensor row = Tensor::from({1, 2}, {1, 2});
  Tensor col = Tensor::from({2, 1}, {3, 4});
  CHECK(g.matmul(row, col).value() == 11.0f);
}

TEST_CASE("matmul gradient of sum equals ones * b^T") {
  Tensor a = make_randn({3, 4}, 11);
  Tensor b = make_randn({4, 2}, 12);
  a.set_requires_grad(true);
  Graph g;
  Tensor loss = g.sum(g.matmul(a, b));
  g.backward(loss);

  // d(sum)/dA = ones(3,2) * B^T
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 4; ++k) {
      float expect = 0.0f;
      for (int j = 0; j < 2; ++j) expect += b.data()[k * 2 + j];
      CHECK(a.grad()[i * 4 + k] == Catch::Approx(expect).margin(1e-5));
    }

  b.set_requires_grad(true);
  double err = check_gradients(
      [&](Graph& gg) { return gg.sum(gg.matmul(a, b)); }, {a, b});
  CHECK(err < 1e-3);
}

TEST_CASE("matmul batched against flat reference") {
  Tensor a = make_randn({2, 3, 4}, 21);
  Tensor b = make_randn({2, 4, 5}, 22);
  Graph g;
  Tensor out = g.matmul(a, b);
  REQUIRE(out.shape() == std::vector<int>{2, 3, 5});
  for (int bi = 0; bi < 2; ++bi)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 5; ++j) {
        double acc = 0;
        for (int k = 0; k < 4; ++k)
          acc += double(a.data()[(bi * 3 + i) * 4 + k]) *
                 double(b.data()[(bi * 4 + k) * 5 + j]);
        CHECK(out.data()[(bi * 3 + i) * 5 + j] == Catch::Approx(acc).margin(1e-5));
      }

  a.set_requires_grad(true);
  b.set_requires_grad(true);
  double err = check_gradients(
      [&](Graph& gg) { return gg.sum(gg.mul(gg.matmul(a, b), gg.matmul(a, b))); },
      {a, b});
  CHECK(err < 1e-2);
}

TEST_CASE("matmul shape mismatch raises") {
  Graph g;
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(g.matmul(a, b), UsageError);
}

TEST_CASE("log_softmax values") {
  Graph g;
  Tensor x = Tensor::from({2}, {0, 0});
  Tensor out = g.log_softmax(x);
  CHECK(out.data()[0] == Catch::Approx(std::log(0.5)).margin(1e-6));
  CHECK(out.data()[1] == Catch::Approx(std::log(0.5)).margin(1e-6));

  Tensor big = Tensor::from({2}, {1000, 0});
  Tensor ob = g.log_softmax(big);
  CHECK(ob.all_finite());
  CHECK(ob.data()[0] == Catch::Approx(0.0).margin(1e-4));
  CHECK(ob.data()[1] == Catch::Approx(-1000.0).margin(1e-3));

  Tensor r = make_randn({5}, 31);
  Tensor lr = g.log_softmax(r);
  double s = 0;
  for (int i = 0; i < 5; ++i) s += std::exp(double(lr.data()[i]));
  CHECK(s == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("depthwise_conv1d_masked identity kernel") {
  const int T = 5, D = 3, K = 3;
  Tensor x = make_randn({T, D}, 41);
  Tensor kernel = Tensor::zeros({K, D});
  for (int d = 0; d < D; ++d) kernel.data()[1 * D + d] = 1.0f;  // center tap
  ByteMask taps(T, K, true);
  // mark out-of-range taps invalid
  for (int t = 0; t < T; ++t)
    for (int k = 0; k < K; ++k) {
      int j = t + k - K / 2;
      if (j < 0 || j >= T) taps.at(t, k) = 0;
    }
  Graph g;
  Tensor out = g.depthwise_conv1d_masked(x, kernel, taps);
  for (int64_t i = 0; i < out.numel(); ++i)
    CHECK(out.data()[i] == Catch::Approx(x.data()[i]).margin(1e-7));
}

TEST_CASE("depthwise_conv1d_masked causality under future-free mask") {
  const int T = 6, D = 2, K = 3;
  Tensor kernel = make_randn({K, D}, 42);
  ByteMask taps(T, K, false);
  for (int t = 0; t < T; ++t)
    for (int k = 0; k < K; ++k) {
      int j = t + k - K / 2;
      if (j >= 0 && j <= t) taps.at(t, k) = 1;  // no future taps
    }
  Tensor x = make_randn({T, D}, 43);
  Graph g1;
  Tensor out1 = g1.depthwise_conv1d_masked(x, kernel, taps);
  Tensor x2 = x.detached_copy();
  x2.data()[(3 + 1) * D + 0] += 5.0f;  // perturb frame t+1 = 4
  Graph g2;
  Tensor out2 = g2.depthwise_conv1d_masked(x2, kernel, taps);
  for (int d = 0; d < D; ++d)
    CHECK(out1.data()[3 * D + d] == out2.data()[3 * D + d]);  // frame 3 unchanged
}

TEST_CASE("depthwise_conv1d_masked equals per-chunk conv oracle") {
  const int T = 6, D = 2, K = 3, C = 3;
  Tensor x = make_randn({T, D}, 44);
  Tensor kernel = make_randn({K, D}, 45);
  ByteMask taps(T, K, false);
  for (int t = 0; t < T; ++t)
    for (int k = 0; k < K; ++k) {
      int j = t + k - K / 2;
      if (j >= 0 && j < T && j / C == t / C) taps.at(t, k) = 1;
    }
  Graph g;
  Tensor out = g.depthwise_conv1d_masked(x, kernel, taps);

  // Oracle: convolve each chunk independently with zero padding at edges.
  for (int chunk = 0; chunk < T / C; ++chunk) {
    for (int t = 0; t < C; ++t)
      for (int d = 0; d < D; ++d) {
        double acc = 0;
        for (int k = 0; k < K; ++k) {
          int j = t + k - K / 2;
          if (j < 0 || j >= C) continue;
          acc += double(kernel.data()[k * D + d]) *
                 double(x.data()[(chunk * C + j) * D + d]);
        }
        CHECK(out.data()[(chunk * C + t) * D + d] ==
              Catch::Approx(acc).margin(1e-5));
      }
  }
}

TEST_CASE("depthwise_conv1d_masked even kernel rejected") {
  Graph g;
  Tensor x = Tensor::zeros({4, 2});
  Tensor kernel = Tensor::zeros({4, 2});
  ByteMask taps(4, 4, true);
  CHECK_THROWS_AS(g.depthwise_conv1d_masked(x, kernel, taps), UsageError);
}

TEST_CASE("layer_norm values and stats") {
  Graph g;
  Tensor gain = Tensor::ones({4});
  Tensor bias = Tensor::zeros({4});
  Tensor c = Tensor::full({4}, 3.0f);
  Tensor out = g.layer_norm(c, gain, bias);
  for (int i = 0; i < 4; ++i) CHECK(out.data()[i] == Catch::Approx(0).margin(1e-6));

  Tensor pm = Tensor::from({2}, {1, -1});
  Tensor g2 = Tensor::ones({2});
  Tensor b2 = Tensor::zeros({2});
  Tensor o2 = g.layer_norm(pm, g2, b2);
  CHECK(o2.data()[0] == Catch::Approx(1.0).margin(1e-4));
  CHECK(o2.data()[1] == Catch::Approx(-1.0).margin(1e-4));

  Tensor r = make_randn({8}, 51);
  Tensor g8 = Tensor::ones({8});
  Tensor b8 = Tensor::zeros({8});
  Tensor o8 = g.layer_norm(r, g8, b8);
  double mean = 0, var = 0;
  for (int i = 0; i < 8; ++i) mean += o8.data()[i];
  mean /= 8;
  for (int i = 0; i < 8; ++i) var += (o8.data()[i] - mean) * (o8.data()[i] - mean);
  var /= 8;
  CHECK(std::abs(mean) < 1e-6);
  CHECK(var > 1.0 - 1e-3);
  CHECK(var <= 1.0 + 1e-6);
}

TEST_CASE("backward basics") {
  Tensor x = make_randn({3, 2}, 61);
  x.set_requires_grad(true);
  {
    Graph g;
    Tensor loss = g.sum(x);
    g.backward(loss);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 1.0f);
    x.clear_grad();
  }
  {
    Graph g;
    Tensor loss = g.sum(g.mul(x, x));
    g.backward(loss);
    for (int64_t i = 0; i < x.numel(); ++i)
      CHECK(x.grad()[i] == Catch::Approx(2.0f * x.data()[i]).margin(1e-5));
    x.clear_grad();
  }
  {
    // repeated backward accumulates
    Graph g;
    Tensor loss = g.sum(x);
    g.backward(loss);
    g.backward(loss);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 2.0f);
    x.clear_grad();
  }
  {
    Graph g;
    Tensor notscalar = g.scale(x, 2.0f);
    CHECK_THROWS_AS(g.backward(notscalar), UsageError);
  }
}

TEST_CASE("composite graph matches finite differences") {
  // linear -> layer_norm -> log_softmax -> NLL
  const int T = 3, Din = 4, D = 5;
  Tensor x = make_randn({T, Din}, 71);
  Tensor w = make_randn({Din, D}, 72, 0.5f);
  Tensor b = make_randn({D}, 73, 0.1f);
  Tensor gain = Tensor::ones({D});
  Tensor bias = Tensor::zeros({D});
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  gain.set_requires_grad(true);
  bias.set_requires_grad(true);
  std::vector<int> targets{1, 3, 0};
  std::vector<uint8_t> mask{1, 1, 1};
  auto build = [&](Graph& g) {
    Tensor h = g.add(g.matmul(x, w), b);
    Tensor n = g.layer_norm(h, gain, bias);
    Tensor lp = g.log_softmax(n);
    return g.masked_nll(lp, targets, mask);
  };
  GradCheckConfig cfg;
  cfg.h = 5e-3;  // f32 forward: keep the difference above rounding noise
  double err = check_gradients(build, {w, b, gain, bias}, cfg);
  CHECK(err < 1e-3);
}

TEST_CASE("check_gradients on quadratic loss") {
  Tensor x = make_randn({6}, 81);
  x.set_requires_grad(true);
  // central differences are exact for quadratics; a wide step keeps the
  // difference far above f32 rounding
  GradCheckConfig cfg;
  cfg.h = 0.05;
  double err = check_gradients(
      [&](Graph& g) { return g.sum(g.mul(x, x)); }, {x}, cfg);
  CHECK(err < 1e-4);
}

TEST_CASE("check_gradients detects sign-flipped backward") {
  Tensor x = make_randn({4}, 91);
  x.set_requires_grad(true);
  auto broken = [&](Graph& g) {
    // forward is sum(x); backward deliberately flips the sign
    double acc = 0;
    for (int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
    Tensor out = Tensor::scalar(float(acc));
    return g.custom(out, {x}, [out, x]() mutable {
      if (!out.has_grad()) return;
      x.ensure_grad();
      for (int64_t i = 0; i < x.numel(); ++i)
        x.grad()[i] -= out.grad()[0];
    });
  };
  double err = check_gradients(broken, {x});
  // sign flip: |(-1) - 1| / (1 + 1) = 1, the formula's maximum
  CHECK(err > 0.5);
}

TEST_CASE("per-op gradient suite on random small shapes") {
  Rng seed_rng(123);
  auto check_unary = [&](auto op_builder) {
    Tensor x = make_randn({3, 4}, seed_rng.fork(), 0.8f);
    x.set_requires_grad(true);
    // weight the output by a fixed random probe so the loss is never
    // trivially constant in x (e.g. sum of a softmax)
    Tensor probe;
    {
      Graph g;
      Tensor sample = op_builder(g, x);
      probe = make_randn(sample.shape(), seed_rng.fork());
    }
    GradCheckConfig cfg;
    cfg.h = 5e-3;
    double err = check_gradients(
        [&](Graph& g) { return g.sum(g.mul(op_builder(g, x), probe)); }, {x},
        cfg);
    CHECK(err < 1e-2);
  };
  check_unary([](Graph& g, const Tensor& x) { return g.gelu(x); });
  check_unary([](Graph& g, const Tensor& x) { return g.swish(x); });
  check_unary([](Graph& g, const Tensor& x) { return g.sigmoid(x); });
  check_unary([](Graph& g, const Tensor& x) { return g.softmax(x); });
  check_unary([](Graph& g, const Tensor& x) { return g.log_softmax(x); });
  check_unary([](Graph& g, const Tensor& x) { return g.transpose(x, 0, 1); });
  check_unary([](Graph& g, const Tensor& x) { return g.reshape(x, {4, 3}); });
  check_unary([](Graph& g, const Tensor& x) { return g.slice(x, 1, 1, 2); });
  check_unary([](Graph& g, const Tensor& x) { return g.scale(x, -1.7f); });
  check_unary([](Graph& g, const Tensor& x) {
    return g.concat({x, g.scale(x, 2.0f)}, 0);
  });

  {
    Tensor a = make_randn({3, 4}, seed_rng.fork());
    Tensor b = make_randn({4}, seed_rng.fork());
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    double err = check_gradients(
        [&](Graph& g) { return g.sum(g.add(a, b)); }, {a, b});
    CHECK(err < 1e-2);
  }
  {
    Tensor table = make_randn({5, 3}, seed_rng.fork());
    table.set_requires_grad(true);
    std::vector<int> ids{0, 2, 2, 4};
    double err = check_gradients(
        [&](Graph& g) {
          Tensor e = g.embedding(table, ids);
          return g.sum(g.mul(e, e));
        },
        {table});
    CHECK(err < 1e-2);
  }
  {
    const int T = 6, D = 3, K = 3;
    Tensor x = make_randn({T, D}, seed_rng.fork());
    Tensor kernel = make_randn({K, D}, seed_rng.fork());
    x.set_requires_grad(true);
    kernel.set_requires_grad(true);
    ByteMask taps(T, K, false);
    for (int t = 0; t < T; ++t)
      for (int k = 0; k < K; ++k) {
        int j = t + k - K / 2;
        if (j >= 0 && j < T && j / 2 == t / 2) taps.at(t, k) = 1;
      }
    double err = check_gradients(
        [&](Graph& g) {
          Tensor o = g.depthwise_conv1d_masked(x, kernel, taps);
          return g.sum(g.mul(o, o));
        },
        {x, kernel});
    CHECK(err < 1e-2);
  }
  {
    Tensor x = make_randn({2, 5, 6}, seed_rng.fork());
    Tensor w = make_randn({3, 2, 3, 3}, seed_rng.fork(), 0.4f);
    Tensor b = make_randn({3}, seed_rng.fork(), 0.1f);
    Tensor probe = make_randn({3, 3, 3}, seed_rng.fork());
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    GradCheckConfig cfg;
    cfg.h = 1e-2;
    double err = check_gradients(
        [&](Graph& g) {
          Tensor o = g.conv2d(x, w, b, 2, 2, 1, 1);
          return g.mean(g.mul(o, probe));
        },
        {x, w, b}, cfg);
    CHECK(err < 1e-2);
  }
  {
    Tensor x = make_randn({4, 4}, seed_rng.fork());
    Tensor probe = make_randn({4, 4}, seed_rng.fork());
    x.set_requires_grad(true);
    ByteMask mask(4, 4, false);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j <= i; ++j) mask.at(i, j) = 1;
    double err = check_gradients(
        [&](Graph& g) {
          return g.sum(g.mul(g.softmax(g.masked_fill(x, mask, -1e9f)), probe));
        },
        {x});
    CHECK(err < 1e-2);
  }
}

TEST_CASE("dropout determinism and eval identity") {
  Tensor x = Tensor::ones({1000});
  {
    Graph g(false);
    Tensor out = g.dropout(x, 0.5f);
    CHECK(out.same_storage(x));  // identity in eval mode
  }
  Graph g1(true, 7);
  Graph g2(true, 7);
  Tensor o1 = g1.dropout(x, 0.4f);
  Tensor o2 = g2.dropout(x, 0.4f);
  CHECK(o1.values() == o2.values());
  // inverted dropout keeps the expectation
  double mean = 0;
  for (float v : o1.values()) mean += v;
  mean /= double(o1.numel());
  CHECK(mean == Catch::Approx(1.0).margin(0.1));
}

TEST_CASE("finite outputs for finite inputs across op set") {
  Rng rng(999);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = Tensor::randn({4, 6}, rng, 10.0f);
    Graph g;
    CHECK(g.gelu(x).all_finite());
    CHECK(g.swish(x).all_finite());
    CHECK(g.sigmoid(x).all_finite());
    CHECK(g.softmax(x).all_finite());
    CHECK(g.log_softmax(x).all_finite());
    Tensor gn = Tensor::ones({6});
    Tensor bn = Tensor::zeros({6});
    CHECK(g.layer_norm(x, gn, bn).all_finite());
  }
}

TEST_CASE("determinism: identical seeds produce identical tensors") {
  Rng a(42), b(42);
  Tensor ta = Tensor::randn({32}, a);
  Tensor tb = Tensor::randn({32}, b);
  CHECK(ta.values() == tb.values());
}

TEST_CASE("adamw converges on a quadratic") {
  Tensor x = Tensor::from({3}, {5, -4, 2});
  x.set_requires_grad(true);
  AdamW opt;
  AdamWOptions o;
  o.lr = 0.1;
  o.weight_decay = 0.0;
  opt.add_group({x}, o);
  for (int i = 0; i < 300; ++i) {
    opt.zero_grad();
    Graph g;
    Tensor loss = g.sum(g.mul(x, x));
    g.backward(loss);
    opt.step();
  }
  for (int i = 0; i < 3; ++i) CHECK(std::abs(x.data()[i]) < 1e-2);
}
