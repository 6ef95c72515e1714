#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "diffdt/tabdiff.hpp"
#include "test_support.hpp"

using namespace diffdt;

namespace {

TabdiffConfig tiny_config() {
  TabdiffConfig cfg;
  cfg.d_organ = 2;
  cfg.n_cat = 3;
  cfg.vocab = 6;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.phi_hidden = 12;
  return cfg;
}

}  // namespace

TEST_CASE("noise schedule hits its endpoints exactly and grows monotonically") {
  auto m = make_tabdiff(tiny_config(), 11);
  // perturb the learned exponents so the identities hold beyond the init
  m.params.get("rho_raw")->value = {0.7, -1.3};
  auto s0 = num_sigma(m, 0.0);
  auto s1 = num_sigma(m, 1.0);
  for (double v : s0) CHECK(v == m.cfg.sigma_min);
  for (double v : s1) CHECK(v == m.cfg.sigma_max);
  double prev0 = 0.0, prev1 = 0.0;
  for (double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    auto s = num_sigma(m, t);
    CHECK(s[0] > prev0);
    CHECK(s[1] > prev1);
    prev0 = s[0];
    prev1 = s[1];
  }
  CHECK_THROWS_AS(num_sigma(m, -0.01), RangeError);
  CHECK_THROWS_AS(num_sigma(m, 1.01), RangeError);
}

TEST_CASE("masking schedule endpoints and log-linearity") {
  auto m = make_tabdiff(tiny_config(), 12);
  m.params.get("kappa_raw")->value = {0.4, -0.5, 1.1};
  for (int j = 0; j < 3; ++j) {
    CHECK(cat_alpha(m, j, 0.0) == 1.0);
    CHECK(cat_alpha(m, j, 1.0) == 0.0);
    // log alpha linear in log(1-t): slope between any two points identical
    const double s1 = std::log(cat_alpha(m, j, 0.2)) / std::log(0.8);
    const double s2 = std::log(cat_alpha(m, j, 0.6)) / std::log(0.4);
    CHECK(s1 == doctest::Approx(s2).epsilon(1e-12));
    double prev = 1.0;
    for (double t : {0.2, 0.5, 0.8}) {
      CHECK(cat_alpha(m, j, t) < prev);
      prev = cat_alpha(m, j, t);
    }
  }
  CHECK_THROWS_AS(cat_alpha(m, 3, 0.5), RangeError);
}

TEST_CASE("forward numeric corruption is exact per column") {
  auto m = make_tabdiff(tiny_config(), 13);
  std::vector<double> traits{0.4, -1.2};

  SUBCASE("t=0 keeps unit-scale data within 1e-3") {
    auto g = forward_num(m, traits, 0.0, {1.0, -1.0});
    CHECK(std::fabs(g[0] - traits[0]) < 1e-3);
    CHECK(std::fabs(g[1] - traits[1]) < 1e-3);
  }
  SUBCASE("linearity in the injected noise") {
    auto a = forward_num(m, traits, 0.5, {1.0, 0.0});
    auto b = forward_num(m, traits, 0.5, {2.0, 0.0});
    CHECK(b[0] - traits[0] == doctest::Approx(2.0 * (a[0] - traits[0])).epsilon(1e-12));
  }
  SUBCASE("monte-carlo std matches sigma(t) within 2%") {
    const double t = 0.6;
    auto sigma = num_sigma(m, t);
    Rng rng(99);
    double ss = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
      const double e = rng.gauss();
      auto g = forward_num(m, traits, t, {e, e});
      ss += (g[0] - traits[0]) * (g[0] - traits[0]);
    }
    CHECK(std::sqrt(ss / n) == doctest::Approx(sigma[0]).epsilon(0.02));
  }
  SUBCASE("length mismatch rejected") {
    CHECK_THROWS_AS(forward_num(m, {0.0}, 0.5, {0.0}), DimensionError);
  }
}

TEST_CASE("forward categorical corruption") {
  auto cfg = tiny_config();
  cfg.n_cat = 1;
  auto m = make_tabdiff(cfg, 14);
  Rng rng(5);

  SUBCASE("t=0 and t=1 are deterministic") {
    CHECK(forward_cat(m, {4}, 0.0, rng) == std::vector<int>{4});
    CHECK(forward_cat(m, {4}, 1.0, rng) == std::vector<int>{kMaskToken});
  }
  SUBCASE("masked fraction at t=0.5 with kappa=1 is 0.5 within 1%") {
    // softplus(raw) = 0 is unreachable; pin kappa to 1 via a very negative raw
    m.params.get("kappa_raw")->value = {-40.0};
    int masked = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i)
      if (forward_cat(m, {3}, 0.5, rng)[0] == kMaskToken) ++masked;
    CHECK(std::fabs(masked / static_cast<double>(n) - 0.5) < 0.01);
  }
  SUBCASE("MASK in the input is rejected") {
    CHECK_THROWS_AS(forward_cat(m, {kMaskToken}, 0.5, rng), DataError);
  }
}

TEST_CASE("hybrid loss structure") {
  auto m = make_tabdiff(tiny_config(), 15);
  TabRow row;
  row.traits = {0.3, -0.7};
  row.tokens = {2, 4, 5};
  std::vector<double> eps{0.5, -1.5};
  std::vector<int> masked{2, kMaskToken, 5};

  SUBCASE("combined loss equals the weighted sum of parts") {
    auto parts = tabdiff_loss(m, row, 0.4, eps, masked, false);
    CHECK(parts.total->scalar() ==
          doctest::Approx(parts.num->scalar() + parts.cat->scalar()).epsilon(1e-12));
    auto cfg2 = tiny_config();
    cfg2.lambda_num = 2.0;
    cfg2.lambda_cat = 0.5;
    auto m2 = make_tabdiff(cfg2, 15);
    auto p2 = tabdiff_loss(m2, row, 0.4, eps, masked, false);
    CHECK(p2.total->scalar() ==
          doctest::Approx(2.0 * p2.num->scalar() + 0.5 * p2.cat->scalar()).epsilon(1e-12));
  }
  SUBCASE("numeric loss of a perfect predictor is zero, zero predictor gives d_organ") {
    // zero out the numeric head so eps_hat = 0, then check E-free identity
    std::fill(m.params.get("num_head")->value.begin(), m.params.get("num_head")->value.end(),
              0.0);
    std::fill(m.params.get("num_head_b")->value.begin(),
              m.params.get("num_head_b")->value.end(), 0.0);
    auto parts = tabdiff_loss(m, row, 0.4, eps, masked, false);
    const double expect = (eps[0] * eps[0] + eps[1] * eps[1]) / 2.0 * 2.0;  // mean * d_organ
    CHECK(parts.num->scalar() == doctest::Approx(expect).epsilon(1e-12));
    // perfect predictor via the bias
    m.params.get("num_head_b")->value = eps;
    auto p2 = tabdiff_loss(m, row, 0.4, eps, masked, false);
    CHECK(p2.num->scalar() == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("unmasked positions contribute nothing to the categorical term") {
    auto none = tabdiff_loss(m, row, 0.4, eps, {2, 4, 5}, false);
    CHECK(none.cat->scalar() == doctest::Approx(0.0).epsilon(1e-15));
    // a confident-correct predictor drives the log term to zero even when masked
    auto all_masked = std::vector<int>{kMaskToken, kMaskToken, kMaskToken};
    TabRow same = row;
    same.tokens = {4, 4, 4};  // shared head bias can then be confidently right
    std::fill(m.params.get("cat_head")->value.begin(), m.params.get("cat_head")->value.end(),
              0.0);
    m.params.get("cat_head_b")->value[4] = 60.0;
    auto conf = tabdiff_loss(m, same, 0.4, eps, all_masked, false);
    CHECK(conf.cat->scalar() < 1e-6);
  }
  SUBCASE("out-of-range training times are rejected") {
    CHECK_THROWS_AS(tabdiff_loss(m, row, 1e-5, eps, masked, false), RangeError);
    CHECK_THROWS_AS(tabdiff_loss(m, row, 1.5, eps, masked, false), RangeError);
  }
}

TEST_CASE("loss gradients match finite differences, including the schedule exponents") {
  auto cfg = tiny_config();
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.phi_hidden = 6;
  auto m = make_tabdiff(cfg, 16);
  TabRow row;
  row.traits = {0.8, -0.2};
  row.tokens = {1 + 1, 3, 4};
  std::vector<double> eps{0.4, 1.1};
  std::vector<int> masked{kMaskToken, 3, kMaskToken};
  auto build = [&]() { return tabdiff_loss(m, row, 0.37, eps, masked, false).total; };
  std::vector<Tensor> leaves{m.params.get("rho_raw"),  m.params.get("kappa_raw"),
                             m.params.get("num_head"), m.params.get("cat_head"),
                             m.params.get("num_dir"),  m.params.get("cat_table"),
                             m.params.get("enc0/wq"),  m.params.get("time_proj")};
  // floor 1e-5: attention-weight gradients are ~1e-6 here and the difference
  // quotient's roundoff (~5e-10 absolute) would otherwise dominate the ratio
  const double worst = testing::finite_diff_check(leaves, build, 1e-5, 1e-5);
  CHECK(worst < 1e-4);
}

TEST_CASE("reverse categorical step") {
  auto cfg = tiny_config();
  cfg.n_cat = 1;
  auto m = make_tabdiff(cfg, 17);
  Rng rng(7);
  auto logits = tensor(1, cfg.vocab, {0.0, 0.0, 5.0, 1.0, -2.0, 0.5});

  SUBCASE("fully unmasked states are copied") {
    CHECK(reverse_step_cat(m, {4}, 0.8, 0.3, logits, rng) == std::vector<int>{4});
  }
  SUBCASE("stepping to s=0 removes every MASK and never emits MASK") {
    for (int i = 0; i < 200; ++i) {
      auto out = reverse_step_cat(m, {kMaskToken}, 0.9, 0.0, logits, rng);
      CHECK(out[0] != kMaskToken);
    }
  }
  SUBCASE("empirical unmask rate matches the posterior within 1%") {
    const double t = 0.7, s = 0.3;
    const double a_t = cat_alpha(m, 0, t);
    const double a_s = cat_alpha(m, 0, s);
    const double expect = (a_s - a_t) / (1.0 - a_t);
    int unmasked = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i)
      if (reverse_step_cat(m, {kMaskToken}, t, s, logits, rng)[0] != kMaskToken) ++unmasked;
    CHECK(std::fabs(unmasked / static_cast<double>(n) - expect) < 0.01);
  }
  SUBCASE("s >= t is rejected") {
    CHECK_THROWS_AS(reverse_step_cat(m, {kMaskToken}, 0.3, 0.3, logits, rng), RangeError);
  }
}

TEST_CASE("classifier-free guidance algebra") {
  auto m = make_tabdiff(tiny_config(), 18);
  std::vector<double> gamma{0.2, -0.9};
  std::vector<int> tokens{2, 3, 4};
  const double t = 0.5;

  SUBCASE("omega = 0 returns the conditional prediction bitwise") {
    auto cond = predict_num(m, gamma, tokens, t);
    auto guided = cfg_num(m, gamma, tokens, t, 0.0);
    for (int i = 0; i < 2; ++i) CHECK(guided->value[i] == cond->value[i]);
  }
  SUBCASE("omega = 1 gives 2*mu_theta - mu_phi") {
    auto cond = predict_num(m, gamma, tokens, t);
    auto phi = predict_phi(m, gamma, t);
    auto guided = cfg_num(m, gamma, tokens, t, 1.0);
    for (int i = 0; i < 2; ++i)
      CHECK(guided->value[i] ==
            doctest::Approx(2.0 * cond->value[i] - phi->value[i]).epsilon(1e-12));
  }
  SUBCASE("guidance collapses to the common value when both denoisers agree") {
    // force both nets to the same constant output
    for (const char* name : {"num_head", "phi/w2"}) {
      auto p = m.params.get(name);
      std::fill(p->value.begin(), p->value.end(), 0.0);
    }
    m.params.get("num_head_b")->value = {0.3, -0.6};
    m.params.get("phi/b2")->value = {0.3, -0.6};
    for (double omega : {0.0, 0.7, 3.5}) {
      auto guided = cfg_num(m, gamma, tokens, t, omega);
      CHECK(guided->value[0] == doctest::Approx(0.3).epsilon(1e-12));
      CHECK(guided->value[1] == doctest::Approx(-0.6).epsilon(1e-12));
    }
  }
  SUBCASE("the unconditional denoiser is smaller than the conditional one") {
    long phi = 0, theta = 0;
    for (const auto& kv : m.params.all()) {
      const long sz = static_cast<long>(kv.second->value.size());
      if (kv.first.rfind("phi/", 0) == 0)
        phi += sz;
      else
        theta += sz;
    }
    CHECK(phi < theta);
  }
}

namespace {

TabdiffConfig two_class_config() {
  auto cfg = tiny_config();
  cfg.d_organ = 2;
  cfg.n_cat = 1;
  cfg.vocab = 4;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  return cfg;
}

// class token 2 -> traits near +1, token 3 -> traits near -1
const Tabdiff& two_class_model() {
  static Tabdiff model = [] {
    Rng data_rng(321);
    std::vector<TabRow> rows;
    for (int i = 0; i < 120; ++i) {
      TabRow r;
      const int cls = (i % 2 == 0) ? 2 : 3;
      const double mu = (cls == 2) ? 1.0 : -1.0;
      r.traits = {mu + 0.15 * data_rng.gauss(), mu + 0.15 * data_rng.gauss()};
      r.tokens = {cls};
      rows.push_back(r);
    }
    TabTrainConfig tc;
    tc.epochs = 150;
    tc.lr = 2e-3;
    return train_tabdiff(rows, two_class_config(), tc, 2024);
  }();
  return model;
}

}  // namespace

TEST_CASE("training learns a two-class conditional mean shift") {
  const double delta = 2.0;
  const auto& model = two_class_model();
  const auto cfg = two_class_config();
  REQUIRE(model.trained);
  REQUIRE(model.loss_curve.size() == 150);
  CHECK(model.loss_curve.back() < model.loss_curve.front());

  SUBCASE("generation is deterministic per seed and respects the condition") {
    auto a = generate_tabular(model, {2}, 40, 0.5, 77);
    auto b = generate_tabular(model, {2}, 40, 0.5, 77);
    CHECK(a == b);
    auto c = generate_tabular(model, {2}, 40, 0.5, 78);
    CHECK(a != c);
  }
  SUBCASE("class-conditional generated means differ by delta within 10%") {
    const int n = 160;
    double mean_pos = 0.0, mean_neg = 0.0;
    for (int i = 0; i < n; ++i) {
      auto gp = generate_tabular(model, {2}, 40, 0.5, 1000 + i);
      auto gn = generate_tabular(model, {3}, 40, 0.5, 5000 + i);
      mean_pos += (gp[0] + gp[1]) / 2;
      mean_neg += (gn[0] + gn[1]) / 2;
    }
    mean_pos /= n;
    mean_neg /= n;
    CHECK(std::fabs((mean_pos - mean_neg) - delta) < 0.1 * delta);
  }
  SUBCASE("untrained models refuse to sample") {
    auto fresh = make_tabdiff(cfg, 1);
    CHECK_THROWS_AS(generate_tabular(fresh, {2}, 10, 0.0, 1), StateError);
  }
  SUBCASE("checkpoint round trip is deterministic at storage precision") {
    const std::string path = "tabdiff_test.ddck";
    save_tabdiff(model, path);
    auto loaded = load_tabdiff(path, cfg);
    CHECK(loaded.trained);
    auto a = generate_tabular(model, {3}, 25, 0.4, 42);
    auto b = generate_tabular(loaded, {3}, 25, 0.4, 42);
    auto c = generate_tabular(loaded, {3}, 25, 0.4, 42);
    CHECK(b == c);  // loaded model is itself exactly reproducible
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-3));  // float32 storage
    std::remove(path.c_str());
  }
}

TEST_CASE("tabular evaluation metrics") {
  SUBCASE("identical sets give zero RMSE and zero WD") {
    std::vector<std::vector<double>> x{{0.1, 2.0}, {-1.0, 0.5}, {3.0, 3.0}};
    auto ev = evaluate_tabular(x, x);
    for (double v : ev.rmse) CHECK(v == 0.0);
    for (double v : ev.wd) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("hand-worked WD: {0,1} vs {0,2} is 0.5") {
    auto ev = evaluate_tabular({{0.0}, {1.0}}, {{0.0}, {2.0}});
    CHECK(ev.wd[0] == doctest::Approx(0.5).epsilon(1e-9));
  }
  SUBCASE("constant shift delta gives WD = |delta|") {
    Rng rng(9);
    std::vector<std::vector<double>> a, b;
    for (int i = 0; i < 500; ++i) {
      const double v = rng.gauss();
      a.push_back({v});
      b.push_back({v - 1.25});
    }
    auto ev = evaluate_tabular(a, b);
    CHECK(ev.wd[0] == doctest::Approx(1.25).epsilon(1e-9));
  }
  SUBCASE("width mismatch rejected") {
    CHECK_THROWS_AS(evaluate_tabular({{0.0, 1.0}}, {{0.0}}), DimensionError);
  }
}

TEST_CASE("trait normalization round trips and cohort rows are well formed") {
  std::vector<std::vector<double>> data{{1.0, 10.0}, {3.0, 30.0}, {5.0, 20.0}};
  auto st = fit_trait_stats(data);
  CHECK(st.mean[0] == doctest::Approx(3.0));
  auto z = normalize_traits({5.0, 20.0}, st);
  auto back = denormalize_traits(z, st);
  CHECK(back[0] == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(back[1] == doctest::Approx(20.0).epsilon(1e-12));

  CohortConfig cc;
  cc.n_subjects = 30;
  cc.organs = {{"heart", 3, 0.2}};
  auto cohort = generate_synthetic_cohort(cc, 4);
  auto vocab = Vocabulary::build(cohort);
  TemporalGrid grid{cc.age_min, cc.age_max};
  std::vector<std::vector<double>> traits;
  for (const auto& s : cohort.subjects) traits.push_back(s.tabular.at("heart").traits);
  auto stats = fit_trait_stats(traits);
  auto rows = build_tab_rows(cohort, "heart", vocab, grid, 4, stats);
  REQUIRE(rows.size() == cohort.subjects.size());
  for (const auto& r : rows) {
    CHECK(r.traits.size() == 3);
    CHECK(r.tokens.size() == 4);
    for (int tok : r.tokens) {
      CHECK(tok != kMaskToken);
      CHECK(tok >= 0);
      CHECK(tok < static_cast<int>(vocab.codes().size()));
    }
  }
  CHECK_THROWS_AS(build_tab_rows(cohort, "liver", vocab, grid, 4, stats), DataError);
  CHECK_THROWS_AS(build_tab_rows(cohort, "heart", vocab, grid, 0, stats), ConfigError);
}
