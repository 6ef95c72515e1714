#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "diffdt/choleskyldm.hpp"
#include "test_support.hpp"

using namespace diffdt;

namespace {

LdmConfig tiny_config() {
  LdmConfig cfg;
  cfg.n_q = 2;
  cfg.d = 4;
  cfg.d_phi = 6;
  cfg.c_hid = 8;
  cfg.w1 = 16;
  cfg.w2 = 24;
  cfg.w3 = 32;
  cfg.t_emb = 8;
  return cfg;
}

NoiseSchedule tiny_schedule() { return NoiseSchedule::linear(50); }

Tensor const_row(int cols, double v) {
  return tensor(1, cols, std::vector<double>(static_cast<std::size_t>(cols), v));
}

}  // namespace

TEST_CASE("schedule: monotone betas in (0,1), terminal alpha_bar near zero") {
  for (int t_steps : {50, 100, 1000}) {
    auto s = NoiseSchedule::linear(t_steps);
    REQUIRE(static_cast<int>(s.beta.size()) == t_steps);
    for (std::size_t i = 0; i < s.beta.size(); ++i) {
      CHECK(s.beta[i] > 0.0);
      CHECK(s.beta[i] < 1.0);
      if (i > 0) CHECK(s.beta[i] > s.beta[i - 1]);
    }
    CHECK(s.alpha_bar_at(0) == 1.0);
    CHECK(s.alpha_bar_at(t_steps) < 1e-3);
  }
  CHECK_THROWS_AS(NoiseSchedule::linear(10), ConfigError);  // rescaled beta would exceed 1
  CHECK_THROWS_AS(NoiseSchedule::linear(0), ConfigError);
  auto s = NoiseSchedule::linear(100);
  CHECK_THROWS_AS(s.alpha_bar_at(101), RangeError);
  CHECK_THROWS_AS(s.alpha_bar_at(-1), RangeError);
}

TEST_CASE("forward diffusion: identity at t=0, linear in eps, terminal variance") {
  auto s = tiny_schedule();
  Rng rng(1);
  auto z0 = randn(2, 4, rng, 1.0, false);
  auto eps = randn(2, 4, rng, 1.0, false);
  auto z = forward_diffuse(z0, 0, eps, s);
  CHECK(z->value == z0->value);

  // affine in eps: f(2*eps) - f(eps) == f(eps) - f(0)
  auto z1 = forward_diffuse(z0, 10, eps, s);
  auto z2 = forward_diffuse(z0, 10, scale(eps, 2.0), s);
  auto zz = forward_diffuse(z0, 10, scale(eps, 0.0), s);
  for (std::size_t i = 0; i < z1->numel(); ++i)
    CHECK(z2->value[i] - z1->value[i] == doctest::Approx(z1->value[i] - zz->value[i]).epsilon(1e-12));

  // empirical variance of the terminal marginal over 1e5 scalar draws
  auto fixed = tensor(1, 1, std::vector<double>{0.7});
  double sum = 0.0, sum2 = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    auto e = randn(1, 1, rng, 1.0, false);
    const double v = forward_diffuse(fixed, s.t_steps, e, s)->value[0];
    sum += v;
    sum2 += v * v;
  }
  const double var = sum2 / n - (sum / n) * (sum / n);
  CHECK(std::fabs(var - 1.0) < 0.02);

  CHECK_THROWS_AS(forward_diffuse(z0, 51, eps, s), RangeError);
  CHECK_THROWS_AS(forward_diffuse(z0, 5, randn(3, 4, rng, 1.0, false), s), DimensionError);
}

TEST_CASE("cross-attention: single key, duplicate keys, convexity") {
  auto m = make_ldm(tiny_config(), tiny_schedule(), 2);
  Rng rng(3);
  auto z = randn(2, 4, rng, 1.0, false);
  auto y1 = randn(1, 6, rng, 1.0, false);
  auto out1 = ldm_cross_attention(m, z, y1);
  // one key: attention weight 1, output = y1 * gamma for every query row
  auto v = matmul(y1, m.params.get("attn/gamma"));
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 4; ++c)
      CHECK(out1->at(r, c) == doctest::Approx(v->at(0, c)).epsilon(1e-12));

  auto y3 = concat_rows({y1, y1, y1});
  auto out3 = ldm_cross_attention(m, z, y3);
  for (std::size_t i = 0; i < out1->numel(); ++i)
    CHECK(out3->value[i] == doctest::Approx(out1->value[i]).epsilon(1e-12));

  // rows of softmax(QK^T) are convex weights: outputs stay inside the V hull
  auto y = randn(7, 6, rng, 1.0, false);
  auto vv = matmul(y, m.params.get("attn/gamma"));
  auto out = ldm_cross_attention(m, z, y);
  for (int c = 0; c < 4; ++c) {
    double lo = 1e300, hi = -1e300;
    for (int r = 0; r < 7; ++r) {
      lo = std::min(lo, vv->at(r, c));
      hi = std::max(hi, vv->at(r, c));
    }
    for (int r = 0; r < 2; ++r) {
      CHECK(out->at(r, c) >= lo - 1e-9);
      CHECK(out->at(r, c) <= hi + 1e-9);
    }
  }

  CHECK_THROWS_AS(ldm_cross_attention(m, z, tensor(0, 6)), DataError);
  CHECK_THROWS_AS(ldm_cross_attention(m, z, randn(3, 5, rng, 1.0, false)), DimensionError);
}

TEST_CASE("denoiser: shape, range checks, finite-difference gradients") {
  auto m = make_ldm(tiny_config(), tiny_schedule(), 4);
  Rng rng(5);
  auto z = randn(2, 4, rng, 1.0, false);
  auto y = randn(3, 6, rng, 1.0, false);
  auto out = ldm_denoise(m, z, 7, y);
  CHECK(out->rows == 2);
  CHECK(out->cols == 4);
  CHECK_THROWS_AS(ldm_denoise(m, z, 0, y), RangeError);
  CHECK_THROWS_AS(ldm_denoise(m, z, 51, y), RangeError);
  CHECK_THROWS_AS(ldm_denoise(m, randn(3, 4, rng, 1.0, false), 7, y), DimensionError);

  auto eps = randn(2, 4, rng, 1.0, false);
  std::vector<Tensor> leaves = {m.params.get("attn/alpha"), m.params.get("attn/gamma"),
                                m.params.get("down1/w1"), m.params.get("mid/time"),
                                m.params.get("up2/ctx"), m.params.get("out_proj")};
  const double err = diffdt::testing::finite_diff_check(leaves, [&] {
    return mse_loss(ldm_denoise(m, z, 7, y), eps);
  });
  CHECK(err < 1e-4);
}

TEST_CASE("training: beats the zero-predictor baseline, deterministic") {
  Rng rng(6);
  std::vector<LdmPair> pairs;
  for (int i = 0; i < 12; ++i)
    pairs.push_back({randn(2, 4, rng, 1.0, false), randn(4, 6, rng, 1.0, false)});
  LdmTrainConfig tc;
  tc.epochs = 12;
  tc.lr = 2e-3;
  auto a = train_ldm(pairs, tiny_config(), tiny_schedule(), tc, 9);
  REQUIRE(a.loss_curve.size() == 12);
  CHECK(a.loss_curve.back() < 8.0);  // zero predictor scores n_q*d = 8
  auto b = train_ldm(pairs, tiny_config(), tiny_schedule(), tc, 9);
  for (const auto& [name, t] : a.params.all()) {
    auto tb = b.params.get(name);
    for (std::size_t i = 0; i < t->numel(); ++i) CHECK(t->value[i] == tb->value[i]);
  }
  CHECK_THROWS_AS(train_ldm({}, tiny_config(), tiny_schedule(), tc, 1), DataError);
}

TEST_CASE("one-point memorization and snapped decoding") {
  // VQVAE with a matching latent shape; the LDM memorizes a single latent.
  VqvaeConfig vcfg;
  vcfg.n = 6;
  vcfg.n_q = 2;
  vcfg.d = 4;
  vcfg.n_code = 8;
  vcfg.enc_h1 = 32;
  vcfg.enc_h2 = 24;
  vcfg.enc_h3 = 16;
  auto vq = make_vqvae(vcfg, 7);
  Rng rng(8);
  auto z0_raw = randn(2, 4, rng, 1.0, false);
  auto target = vq_quantize(z0_raw, vq.params.get("codebook"));

  std::vector<LdmPair> pairs = {{target.vectors, const_row(6, 0.5)}};
  LdmTrainConfig tc;
  tc.epochs = 1500;
  tc.lr = 3e-3;
  auto m = train_ldm(pairs, tiny_config(), tiny_schedule(), tc, 10);
  Rng srng(11);
  auto s = ldm_sample(m, vq, const_row(6, 0.5), srng);
  CHECK(s.indices == target.indices);  // snapping recovers the memorized latent
  CHECK(spdgeo::is_spd(s.matrix));

  // determinism: same seed and context reproduce the matrix bitwise
  Rng r1(21), r2(21);
  auto s1 = ldm_sample(m, vq, const_row(6, 0.5), r1);
  auto s2 = ldm_sample(m, vq, const_row(6, 0.5), r2);
  CHECK(s1.matrix.a == s2.matrix.a);
}

TEST_CASE("conditioning steers samples; null context available") {
  // Context +1 pairs with latents near +1, context -1 with latents near -1.
  Rng rng(12);
  std::vector<LdmPair> pairs;
  for (int i = 0; i < 10; ++i) {
    const double sign = (i % 2 == 0) ? 1.0 : -1.0;
    auto z = tensor(2, 4, std::vector<double>(8, sign));
    for (auto& v : z->value) v += 0.05 * rng.gauss();
    pairs.push_back({z, const_row(6, sign)});
  }
  LdmTrainConfig tc;
  tc.epochs = 400;
  tc.lr = 3e-3;
  auto m = train_ldm(pairs, tiny_config(), tiny_schedule(), tc, 13);
  Rng srng(14);
  double mean_pos = 0.0, mean_neg = 0.0;
  for (int rep = 0; rep < 8; ++rep) {
    auto zp = ldm_sample_latent(m, const_row(6, 1.0), srng);
    auto zn = ldm_sample_latent(m, const_row(6, -1.0), srng);
    for (double v : zp->value) mean_pos += v;
    for (double v : zn->value) mean_neg += v;
  }
  CHECK(mean_pos > 0.0);
  CHECK(mean_neg < 0.0);
  CHECK(mean_pos - mean_neg > 8.0);  // clear separation in units of 8*... entries

  auto nc = ldm_null_context(m);
  CHECK(nc->rows == 1);
  CHECK(nc->cols == 6);
  CHECK_NOTHROW(ldm_denoise(m, pairs[0].z0, 3, nc));
}

TEST_CASE("checkpoint round trip preserves the denoiser") {
  auto m = make_ldm(tiny_config(), tiny_schedule(), 15);
  const std::string path = "ldm_test.ckpt";
  save_ldm(m, path);
  auto loaded = load_ldm(path, tiny_config(), tiny_schedule());
  Rng rng(16);
  auto z = randn(2, 4, rng, 1.0, false);
  auto y = randn(2, 6, rng, 1.0, false);
  auto a = ldm_denoise(m, z, 5, y);
  auto b = ldm_denoise(loaded, z, 5, y);
  for (std::size_t i = 0; i < a->numel(); ++i)
    CHECK(a->value[i] == doctest::Approx(b->value[i]).epsilon(2e-6).scale(1e-3));
  std::remove(path.c_str());
}
