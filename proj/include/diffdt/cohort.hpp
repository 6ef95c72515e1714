#pragma once

// Synthetic cohorts with a known structural model: a latent health vector h
// drives yearly disease hazards, organ trait vectors and the connectivity
// matrix, so every downstream causal quantity has a computable oracle.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "diffdt/common.hpp"
#include "diffdt/spdgeo.hpp"

namespace diffdt {

struct Event {
  std::string code;
  double age = 0.0;
};

struct EventSequence {
  long subject_id = 0;
  std::vector<Event> events;  // sorted non-decreasing by age
};

struct TabularBiomarker {
  std::string organ;
  std::vector<double> traits;
  double measured_at_age = 0.0;
};

struct ConnectivityObservation {
  spdgeo::SpdMatrix matrix;
  double measured_at_age = 0.0;
};

struct Subject {
  EventSequence seq;
  std::map<std::string, TabularBiomarker> tabular;  // keyed by organ
  std::optional<ConnectivityObservation> connectivity;
};

// One configured exposure -> outcome pair. The exposure hazard is logistic in
// the subject's measured traits; the outcome hazard (per year after the
// exposure age) is logistic in the traits plus delta when exposed.
struct AtePair {
  std::string exposure;
  std::string outcome;
  double delta = 0.0;
  double exposure_bias = 0.0;
  std::vector<double> exposure_w;  // over the ATE organ's traits
  double outcome_bias = 0.0;
  std::vector<double> outcome_w;
};

struct OrganSpec {
  std::string name;
  int dim = 0;
  double noise_sigma = 0.2;
  std::vector<double> loading;  // dim x latent_dim, row-major
  std::vector<double> bias;     // dim
};

struct StructuralModelSpec {
  int latent_dim = 0;
  int age_min = 0;
  int age_max = 0;
  int measurement_age = 0;  // biomarker measurement == exposure decision year
  std::vector<std::string> codes;     // disease codes, index-aligned
  std::vector<double> hazard_bias;    // per code
  std::vector<double> hazard_w;       // codes x latent_dim, row-major
  std::vector<OrganSpec> organs;
  int conn_dim = 0;
  int conn_rank = 0;
  double conn_eps = 0.05;
  std::vector<double> conn_b;  // conn_dim x conn_rank
  std::vector<double> conn_c;  // conn_rank x latent_dim
  std::vector<AtePair> pairs;
  std::string ate_organ;
  // Optional two-class structure: a marker code emitted at age_min for half
  // the subjects, shifting traits by class_trait_shift and the connectivity
  // spectrum by class_conn_shift.
  bool two_class = false;
  std::string class_code;
  double class_trait_shift = 0.0;
  double class_conn_shift = 0.0;
  double class_hazard_shift = 0.0;  // added to every background hazard logit

  int code_index(const std::string& code) const;
};

struct Cohort {
  std::vector<Subject> subjects;
  std::optional<StructuralModelSpec> spec;
  int age_min = 0;
  int age_max = 0;
};

struct CohortConfig {
  int n_subjects = 200;
  int age_min = 40;
  int age_max = 70;
  int latent_dim = 4;
  int n_codes = 12;
  int measurement_age = 55;
  double hazard_bias = -3.0;
  double hazard_w_scale = 0.7;
  // Organs: name -> (dim, noise sigma).
  struct Organ {
    std::string name;
    int dim = 3;
    double noise_sigma = 0.2;
  };
  std::vector<Organ> organs;
  int conn_dim = 0;  // 0 disables connectivity
  int conn_rank = 0; // default: latent_dim
  double conn_eps = 0.05;
  // ATE pairs: carved from the code list head; empty -> none.
  std::vector<double> pair_deltas;
  double exposure_confounding = 0.8;  // scale of trait weights in exposure hazard
  double outcome_trait_scale = 0.8;
  double exposure_bias = 0.0;
  double outcome_bias = -2.2;
  std::string ate_organ;  // defaults to first organ when pairs configured
  bool two_class = false;
  double class_trait_shift = 0.0;
  double class_conn_shift = 0.0;
  double class_hazard_shift = 0.0;  // class members get elevated event hazards
};

// Deterministic per (config, seed). See CohortConfig for the generative law.
Cohort generate_synthetic_cohort(const CohortConfig& config, std::uint64_t seed);

// High-precision quadrature ATE implied by the structural model for a
// configured pair; throws NotFoundError for unconfigured pairs.
double analytic_ate(const StructuralModelSpec& spec, const std::string& exposure,
                    const std::string& outcome);

// Monte-Carlo oracle over n simulated subjects with common random numbers.
double monte_carlo_ate(const StructuralModelSpec& spec, const std::string& exposure,
                       const std::string& outcome, long n, std::uint64_t seed);

// Directory layout: events.txt, tabular.txt, matrices.spdm, spec.txt.
void save_cohort(const Cohort& cohort, const std::string& dir);
Cohort load_cohort(const std::string& dir);

std::pair<Cohort, Cohort> split_train_val(const Cohort& cohort, double ratio,
                                          std::uint64_t seed);

// --------------------------------------------------------------------------
// Order-1 Markov cohort over the vocabulary (healthy is a chain state); used
// to verify AR fidelity against the chain's conditional entropy.

struct MarkovCohortSpec {
  std::vector<std::string> codes;          // non-healthy states
  std::vector<std::vector<double>> trans;  // (codes+1) x (codes+1), row 0 = healthy
  std::vector<double> stationary;
  double conditional_entropy_nats = 0.0;   // sum_i pi_i H(row_i)
  double bayes_accuracy = 0.0;             // sum_i pi_i max_j P_ij
};

struct MarkovConfig {
  int n_subjects = 300;
  int age_min = 40;
  int age_max = 79;
  int n_codes = 4;
  double concentration = 0.35;  // off-mode mass spread
};

std::pair<Cohort, MarkovCohortSpec> generate_markov_cohort(const MarkovConfig& config,
                                                           std::uint64_t seed);

}  // namespace diffdt
