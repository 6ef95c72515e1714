#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "diffdt/tensor.hpp"
#include "test_support.hpp"

using namespace diffdt;
using diffdt::testing::finite_diff_check;

TEST_CASE("softplus at zero is ln 2") {
  auto x = tensor(1, 1, std::vector<double>{0.0});
  CHECK(softplus(x)->scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("softmax of equal logits is uniform") {
  auto x = tensor(1, 2, {0.0, 0.0});
  auto s = softmax_rows(x);
  CHECK(s->value[0] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(s->value[1] == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(11);
  auto x = randn(5, 9, rng, 3.0, false);
  auto s = softmax_rows(x);
  for (int r = 0; r < 5; ++r) {
    double z = 0.0;
    for (int c = 0; c < 9; ++c) z += s->at(r, c);
    CHECK(std::fabs(z - 1.0) < 1e-12);
  }
}

TEST_CASE("matmul with identity is identity") {
  Rng rng(3);
  auto x = randn(3, 4, rng, 1.0, false);
  auto eye = tensor(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto y = matmul(eye, x);
  for (std::size_t i = 0; i < x->numel(); ++i)
    CHECK(y->value[i] == doctest::Approx(x->value[i]).epsilon(1e-15));
}

TEST_CASE("shape mismatch names both shapes") {
  auto a = tensor(2, 3);
  auto b = tensor(4, 5);
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), DimensionError);
}

TEST_CASE("d/dx x*x at 3 is 6") {
  auto x = tensor(1, 1, {3.0}, true);
  auto loss = mul(x, x);
  backward(loss);
  CHECK(x->grad[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("mse gradient matches analytic form") {
  Rng rng(5);
  auto a = randn(2, 3, rng, 1.0, true);
  auto c = randn(2, 3, rng, 1.0, false);
  backward(mse_loss(a, c));
  for (std::size_t i = 0; i < a->numel(); ++i)
    CHECK(a->grad[i] == doctest::Approx(2.0 * (a->value[i] - c->value[i]) / 6.0).epsilon(1e-12));
}

TEST_CASE("diamond graph accumulates additively") {
  // y = x*x + x*x; dy/dx = 4x.
  auto x = tensor(1, 1, {1.7}, true);
  auto a = mul(x, x);
  auto loss = add(a, a);
  backward(loss);
  CHECK(x->grad[0] == doctest::Approx(4.0 * 1.7).epsilon(1e-12));
}

TEST_CASE("disconnected leaf keeps zero gradient") {
  auto x = tensor(1, 1, {2.0}, true);
  auto y = tensor(1, 1, {3.0}, true);
  backward(mul(x, x));
  CHECK(y->grad.empty());  // never touched by this tape
}

TEST_CASE("non-scalar loss rejected") {
  auto x = tensor(2, 2, true);
  CHECK_THROWS_AS(backward(add(x, x)), DimensionError);
}

TEST_CASE("randomized finite-difference checks per primitive") {
  Rng rng(99);
  const int reps = 50;
  double worst = 0.0;
  for (int rep = 0; rep < reps; ++rep) {
    auto a = randn(3, 4, rng, 1.0, true);
    auto b = randn(4, 5, rng, 1.0, true);
    auto c = randn(3, 4, rng, 1.0, true);
    auto row = randn(1, 4, rng, 1.0, true);
    auto gain = randn(1, 4, rng, 0.3, true);
    auto bias = randn(1, 4, rng, 0.3, true);
    auto sq = randn(4, 4, rng, 1.0, true);
    std::vector<int> idx = {1, 0, 2};
    std::vector<int> cols = {0, 3, 1};

    worst = std::max(worst, finite_diff_check({a, b}, [&] {
      return mean_all(matmul(a, b));
    }));
    worst = std::max(worst, finite_diff_check({a, c}, [&] {
      return mean_all(mul(add(a, c), sub(a, c)));
    }));
    worst = std::max(worst, finite_diff_check({a, row}, [&] {
      return mean_all(mul_rows(add_rows(a, row), row));
    }));
    worst = std::max(worst, finite_diff_check({a}, [&] {
      return mean_all(softmax_rows(a));
    }));
    worst = std::max(worst, finite_diff_check({a}, [&] {
      return mse_loss(relu(a), c);
    }));
    worst = std::max(worst, finite_diff_check({a}, [&] {
      return mean_all(softplus(a));
    }));
    worst = std::max(worst, finite_diff_check({a}, [&] {
      return mean_all(sigmoid(a));
    }));
    worst = std::max(worst, finite_diff_check({a}, [&] {
      return mean_all(exp_t(scale(a, 0.3)));
    }));
    worst = std::max(worst, finite_diff_check({a, gain, bias}, [&] {
      return mse_loss(layer_norm(a, gain, bias), c);
    }));
    worst = std::max(worst, finite_diff_check({a}, [&] {
      return mean_all(embedding_lookup(a, idx));
    }));
    worst = std::max(worst, finite_diff_check({a}, [&] {
      return cross_entropy_with_logits(a, cols);
    }));
    worst = std::max(worst, finite_diff_check({sq}, [&] {
      return mean_all(causal_softmax_rows(sq));
    }));
    worst = std::max(worst, finite_diff_check({a, b}, [&] {
      return mean_all(matmul_nt(a, transpose(b)));
    }));
    worst = std::max(worst, finite_diff_check({a, c}, [&] {
      return mean_all(concat_rows({slice_rows(a, 0, 2), slice_rows(c, 1, 2)}));
    }));
    worst = std::max(worst, finite_diff_check({a, c}, [&] {
      return mean_all(concat_cols({slice_cols(a, 1, 2), c}));
    }));
    auto packed = randn(1, 6, rng, 1.0, true);
    worst = std::max(worst, finite_diff_check({packed}, [&] {
      return mse_loss(cholesky_assemble(packed, 3), tensor(3, 3));
    }));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("straight-through passes gradients unchanged") {
  auto pre = tensor(1, 3, {0.2, -0.5, 1.0}, true);
  auto post = tensor(1, 3, {1.0, -1.0, 1.0});
  auto st = straight_through(pre, post);
  CHECK(st->value == post->value);
  backward(mean_all(mul(st, st)));
  // d/dpost of mean(post^2) routed to pre: 2*post/3.
  for (int i = 0; i < 3; ++i)
    CHECK(pre->grad[i] == doctest::Approx(2.0 * post->value[i] / 3.0).epsilon(1e-12));
}

TEST_CASE("detach blocks gradient flow") {
  auto x = tensor(1, 1, {2.0}, true);
  backward(mul(detach(x), x));
  CHECK(x->grad[0] == doctest::Approx(2.0).epsilon(1e-12));  // only the live branch
}

TEST_CASE("ops do not mutate inputs") {
  Rng rng(7);
  auto a = randn(3, 3, rng, 1.0, true);
  const auto before = a->value;
  auto out = softmax_rows(matmul(a, a));
  backward(mean_all(out));
  CHECK(a->value == before);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Rng rng(1);
  ParamStore store;
  auto p = store.create("p", 2, 2, rng, 1.0);
  const auto before = p->value;
  store.zero_grad();
  Adam opt;
  opt.step(store);
  for (int i = 0; i < 4; ++i) CHECK(p->value[i] == doctest::Approx(before[i]).epsilon(1e-12));
}

TEST_CASE("adam: one step on x^2 moves toward zero") {
  ParamStore store;
  Rng rng(1);
  auto x = store.create("x", 1, 1, rng, 0.0);
  x->value[0] = 1.0;
  Adam opt({0.1});
  store.zero_grad();
  backward(mul(x, x));
  opt.step(store);
  CHECK(std::fabs(x->value[0]) < 1.0);
}

TEST_CASE("adam: monotone loss on a convex quadratic") {
  // f(x) = sum (x - c)^2; closed-form minimum at c.
  Rng rng(21);
  ParamStore store;
  auto x = store.create("x", 1, 4, rng, 2.0);
  auto c = tensor(1, 4, {1.0, -2.0, 0.5, 3.0});
  Adam opt({0.05});
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 500; ++step) {
    store.zero_grad();
    auto loss = mse_loss(x, c);
    backward(loss);
    if (step == 0) first = loss->scalar();
    last = loss->scalar();
    opt.step(store);
  }
  CHECK(last < 0.01 * first);
  CHECK(last < 0.05);
}

TEST_CASE("adam: NaN gradient names the parameter") {
  Rng rng(2);
  ParamStore store;
  auto p = store.create("weights/bad", 1, 1, rng, 1.0);
  p->grad.assign(1, std::nan(""));
  Adam opt;
  CHECK_THROWS_WITH_AS(opt.step(store), doctest::Contains("weights/bad"), TrainError);
}

TEST_CASE("checkpoint round-trip preserves values at float32 precision") {
  Rng rng(17);
  ParamStore store;
  store.create("a/w", 3, 4, rng, 1.0);
  store.create("b/bias", 1, 4, rng, 1.0);
  const std::string path = "ckpt_test.bin";
  save_checkpoint(path, store, "deadbeef00000000");
  ParamStore loaded;
  const std::string hash = load_checkpoint_into_new(path, loaded);
  CHECK(hash == "deadbeef00000000");
  for (const auto& [name, t] : store.all()) {
    auto lt = loaded.get(name);
    REQUIRE(lt->numel() == t->numel());
    for (std::size_t i = 0; i < t->numel(); ++i)
      CHECK(lt->value[i] == doctest::Approx(t->value[i]).epsilon(1e-6));
  }
  std::remove(path.c_str());
}
