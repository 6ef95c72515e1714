#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "diffdt/cohort.hpp"

using namespace diffdt;

namespace {

CohortConfig small_config() {
  CohortConfig cfg;
  cfg.n_subjects = 60;
  cfg.organs = {{"heart", 3, 0.2}, {"brain", 2, 0.15}};
  cfg.conn_dim = 8;
  cfg.pair_deltas = {1.0, 0.6};
  return cfg;
}

}  // namespace

TEST_CASE("generation is deterministic per (config, seed)") {
  auto cfg = small_config();
  auto a = generate_synthetic_cohort(cfg, 7);
  auto b = generate_synthetic_cohort(cfg, 7);
  auto c = generate_synthetic_cohort(cfg, 8);
  REQUIRE(a.subjects.size() == b.subjects.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.subjects.size(); ++i) {
    const auto& sa = a.subjects[i];
    const auto& sb = b.subjects[i];
    REQUIRE(sa.seq.events.size() == sb.seq.events.size());
    for (std::size_t e = 0; e < sa.seq.events.size(); ++e) {
      CHECK(sa.seq.events[e].code == sb.seq.events[e].code);
      CHECK(sa.seq.events[e].age == sb.seq.events[e].age);
    }
    for (const auto& [organ, bio] : sa.tabular) {
      const auto& bio_b = sb.tabular.at(organ);
      CHECK(bio.traits == bio_b.traits);
    }
    REQUIRE(sa.connectivity.has_value());
    CHECK(sa.connectivity->matrix.a == sb.connectivity->matrix.a);
    if (i < c.subjects.size() &&
        sa.connectivity->matrix.a != c.subjects[i].connectivity->matrix.a)
      any_diff = true;
  }
  CHECK(any_diff);  // different seed actually changes the draw
}

TEST_CASE("basic cohort structure invariants") {
  auto cfg = small_config();
  auto cohort = generate_synthetic_cohort(cfg, 3);
  REQUIRE(cohort.subjects.size() == 60);
  REQUIRE(cohort.spec.has_value());
  std::set<long> ids;
  for (const auto& s : cohort.subjects) {
    ids.insert(s.seq.subject_id);
    double prev = -1.0;
    std::set<std::string> seen;
    for (const auto& ev : s.seq.events) {
      CHECK(ev.age >= prev);
      prev = ev.age;
      CHECK(ev.age >= cfg.age_min);
      CHECK(ev.age <= cfg.age_max);
      CHECK(seen.insert(ev.code).second);  // each code at most once
    }
    REQUIRE(s.tabular.count("heart") == 1);
    CHECK(s.tabular.at("heart").traits.size() == 3);
    CHECK(s.tabular.at("heart").measured_at_age == cfg.measurement_age);
    REQUIRE(s.connectivity.has_value());
    CHECK(s.connectivity->matrix.n == 8);
    CHECK(spdgeo::is_spd(s.connectivity->matrix, 1e-7));
  }
  CHECK(ids.size() == 60);
}

TEST_CASE("invalid configs are rejected") {
  CohortConfig cfg;
  cfg.n_subjects = 0;
  CHECK_THROWS_AS(generate_synthetic_cohort(cfg, 1), ConfigError);
  cfg = small_config();
  cfg.age_min = 70;
  cfg.age_max = 40;
  CHECK_THROWS_AS(generate_synthetic_cohort(cfg, 1), ConfigError);
  cfg = small_config();
  cfg.measurement_age = 99;
  CHECK_THROWS_AS(generate_synthetic_cohort(cfg, 1), ConfigError);
  cfg = small_config();
  cfg.pair_deltas = {1.0};
  cfg.organs.clear();
  CHECK_THROWS_AS(generate_synthetic_cohort(cfg, 1), ConfigError);
}

TEST_CASE("analytic ATE matches the Monte-Carlo oracle") {
  auto cfg = small_config();
  auto cohort = generate_synthetic_cohort(cfg, 11);
  const auto& spec = *cohort.spec;
  REQUIRE(spec.pairs.size() == 2);
  for (const auto& pair : spec.pairs) {
    const double exact = analytic_ate(spec, pair.exposure, pair.outcome);
    const double mc = monte_carlo_ate(spec, pair.exposure, pair.outcome, 400000, 99);
    CHECK(std::fabs(exact - mc) < 0.005);
    CHECK(exact > 0.0);  // positive delta raises the outcome hazard
  }
  CHECK_THROWS_AS(analytic_ate(spec, "nope", "nada"), NotFoundError);
}

TEST_CASE("two-class variant shifts traits and emits the marker code") {
  auto cfg = small_config();
  cfg.two_class = true;
  cfg.class_trait_shift = 2.0;
  cfg.class_conn_shift = 0.5;
  auto cohort = generate_synthetic_cohort(cfg, 5);
  const std::string marker = cohort.spec->class_code;
  int with = 0;
  double mean_with = 0.0, mean_without = 0.0;
  for (const auto& s : cohort.subjects) {
    bool has = !s.seq.events.empty() && s.seq.events.front().code == marker &&
               s.seq.events.front().age == cfg.age_min;
    double t0 = s.tabular.at("heart").traits[0];
    if (has) {
      ++with;
      mean_with += t0;
    } else {
      mean_without += t0;
    }
  }
  CHECK(with > 12);  // Bernoulli(0.5) over 60 subjects
  CHECK(with < 48);
  mean_with /= with;
  mean_without /= (60 - with);
  CHECK(mean_with - mean_without > 0.5);
}

TEST_CASE("persistence round trip is exact") {
  auto cfg = small_config();
  auto cohort = generate_synthetic_cohort(cfg, 21);
  // include a subject with no events: wipe one
  cohort.subjects[0].seq.events.clear();
  const std::string dir = "cohort_rt_test";
  save_cohort(cohort, dir);
  auto loaded = load_cohort(dir);
  REQUIRE(loaded.subjects.size() == cohort.subjects.size());
  CHECK(loaded.age_min == cohort.age_min);
  CHECK(loaded.age_max == cohort.age_max);
  for (std::size_t i = 0; i < cohort.subjects.size(); ++i) {
    const auto& a = cohort.subjects[i];
    const auto& b = loaded.subjects[i];
    CHECK(a.seq.subject_id == b.seq.subject_id);
    REQUIRE(a.seq.events.size() == b.seq.events.size());
    for (std::size_t e = 0; e < a.seq.events.size(); ++e) {
      CHECK(a.seq.events[e].code == b.seq.events[e].code);
      CHECK(a.seq.events[e].age == b.seq.events[e].age);
    }
    REQUIRE(a.tabular.size() == b.tabular.size());
    for (const auto& [organ, bio] : a.tabular) {
      CHECK(b.tabular.at(organ).traits == bio.traits);
      CHECK(b.tabular.at(organ).measured_at_age == bio.measured_at_age);
    }
    REQUIRE(a.connectivity.has_value() == b.connectivity.has_value());
    CHECK(a.connectivity->matrix.a == b.connectivity->matrix.a);
  }
  REQUIRE(loaded.spec.has_value());
  CHECK(loaded.spec->hazard_w == cohort.spec->hazard_w);
  CHECK(loaded.spec->pairs.size() == cohort.spec->pairs.size());
  // analytic ATE survives the round trip bit-for-bit
  const auto& p = cohort.spec->pairs[0];
  CHECK(analytic_ate(*loaded.spec, p.exposure, p.outcome) ==
        analytic_ate(*cohort.spec, p.exposure, p.outcome));
  std::filesystem::remove_all(dir);
}

TEST_CASE("truncated matrix container is rejected") {
  auto cfg = small_config();
  cfg.n_subjects = 10;
  auto cohort = generate_synthetic_cohort(cfg, 2);
  const std::string dir = "cohort_trunc_test";
  save_cohort(cohort, dir);
  const std::string path = dir + "/matrices.spdm";
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 7);
  CHECK_THROWS_AS(load_cohort(dir), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("train/val split: disjoint, exhaustive, deterministic") {
  auto cfg = small_config();
  auto cohort = generate_synthetic_cohort(cfg, 13);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto [train, val] = split_train_val(cohort, 0.8, seed);
    CHECK(train.subjects.size() == 48);
    CHECK(val.subjects.size() == 12);
    std::set<long> ids;
    for (const auto& s : train.subjects) ids.insert(s.seq.subject_id);
    for (const auto& s : val.subjects) CHECK(ids.insert(s.seq.subject_id).second);
    CHECK(ids.size() == 60);
  }
  auto [t1, v1] = split_train_val(cohort, 0.8, 4);
  auto [t2, v2] = split_train_val(cohort, 0.8, 4);
  REQUIRE(t1.subjects.size() == t2.subjects.size());
  for (std::size_t i = 0; i < t1.subjects.size(); ++i)
    CHECK(t1.subjects[i].seq.subject_id == t2.subjects[i].seq.subject_id);
  CHECK_THROWS_AS(split_train_val(cohort, 1.5, 0), ConfigError);
}

TEST_CASE("markov cohort: empirical transitions match the published matrix") {
  MarkovConfig cfg;
  cfg.n_subjects = 2000;
  auto [cohort, spec] = generate_markov_cohort(cfg, 17);
  const int k = static_cast<int>(spec.codes.size()) + 1;
  REQUIRE(k == 5);
  // rows are distributions
  for (const auto& row : spec.trans) {
    double s = 0.0;
    for (double p : row) {
      CHECK(p >= 0.0);
      s += p;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  // stationary distribution is a fixed point
  for (int j = 0; j < k; ++j) {
    double s = 0.0;
    for (int i = 0; i < k; ++i) s += spec.stationary[i] * spec.trans[i][j];
    CHECK(s == doctest::Approx(spec.stationary[j]).epsilon(1e-8));
  }
  // entropy and Bayes accuracy recomputed from the matrix
  double ent = 0.0, bayes = 0.0;
  for (int i = 0; i < k; ++i) {
    double h = 0.0, mx = 0.0;
    for (double p : spec.trans[i]) {
      if (p > 0) h -= p * std::log(p);
      mx = std::max(mx, p);
    }
    ent += spec.stationary[i] * h;
    bayes += spec.stationary[i] * mx;
  }
  CHECK(ent == doctest::Approx(spec.conditional_entropy_nats).epsilon(1e-12));
  CHECK(bayes == doctest::Approx(spec.bayes_accuracy).epsilon(1e-12));
  // empirical yearly transition counts close to the generating matrix
  std::vector<std::vector<double>> counts(k, std::vector<double>(k, 0.0));
  auto state_of = [&](const Subject& s, int age) {
    for (const auto& ev : s.seq.events)
      if (static_cast<int>(ev.age) == age)
        for (std::size_t c = 0; c < spec.codes.size(); ++c)
          if (spec.codes[c] == ev.code) return static_cast<int>(c) + 1;
    return 0;
  };
  for (const auto& s : cohort.subjects)
    for (int age = cfg.age_min; age < cfg.age_max; ++age)
      counts[state_of(s, age)][state_of(s, age + 1)] += 1.0;
  for (int i = 0; i < k; ++i) {
    double row_n = 0.0;
    for (double c : counts[i]) row_n += c;
    REQUIRE(row_n > 1000);
    for (int j = 0; j < k; ++j)
      CHECK(std::fabs(counts[i][j] / row_n - spec.trans[i][j]) < 0.02);
  }
}
