#pragma once

// Mediated inference P(future | biomarker) * P(biomarker | history): predictive
// heads over generated twins, do(healthy) counterfactuals, and the causal
// evaluation suite (Frechet distance, topology accuracy, IPW treatment effects).

#include <string>
#include <utility>
#include <vector>

#include "diffdt/armodel.hpp"
#include "diffdt/choleskyldm.hpp"
#include "diffdt/cohort.hpp"
#include "diffdt/spdvqvae.hpp"
#include "diffdt/tabdiff.hpp"
#include "diffdt/tokenizer.hpp"

namespace diffdt {

// ---------------------------------------------------------------------------
// Predictive heads: biomarker -> next-disease logits.

struct HeadConfig {
  int vocab = 0;        // logits width
  int d_model = 32;     // divisible by n_heads
  int n_layers = 6;     // tabular head depth
  int n_heads = 8;
  int d_organ = 3;      // tabular trait count
  int trait_bin_max = 10;  // traits rounded to integers, clipped to [-max, max]
  int conn_n = 0;       // connectivity matrix size (connectivity head only)
  int conn_layers = 2;  // the connectivity encoder stays compact
  double init_scale = 0.02;
};

struct PredictiveHead {
  HeadConfig cfg;
  bool connectivity = false;
  ParamStore params;
  bool trained = false;
  std::vector<double> loss_curve;
};

struct TabHeadPair {
  std::vector<double> traits;  // z-scored, length d_organ
  int next_code = 0;           // vocabulary index
};

struct ConnHeadPair {
  spdgeo::Mat matrix;
  int next_code = 0;
};

struct HeadTrainConfig {
  int epochs = 30;
  double lr = 1e-3;
};

PredictiveHead make_tab_head(const HeadConfig& cfg, std::uint64_t seed);
PredictiveHead make_conn_head(const HeadConfig& cfg, std::uint64_t seed);

// Input layout [CLS, discretized traits]: each trait rounded to the nearest
// integer bin before lookup.
Tensor tab_head_logits(const PredictiveHead& head, const std::vector<double>& traits);
// Matrix rows are embedded individually; a learned classification query
// attends over them to produce the logits.
Tensor conn_head_logits(const PredictiveHead& head, const spdgeo::Mat& matrix);

PredictiveHead finetune_tab_head(const std::vector<TabHeadPair>& pairs, const HeadConfig& cfg,
                                 const HeadTrainConfig& train_cfg, std::uint64_t seed);
PredictiveHead finetune_conn_head(const std::vector<ConnHeadPair>& pairs, const HeadConfig& cfg,
                                  const HeadTrainConfig& train_cfg, std::uint64_t seed);

void save_head(const PredictiveHead& head, const std::string& path);
PredictiveHead load_head(const std::string& path, const HeadConfig& cfg, bool connectivity);

// ---------------------------------------------------------------------------
// Mediated inference.

// History -> AR embedding -> latent-diffusion twin -> connectivity head.
// Throws StateError naming the first untrained component.
std::vector<double> mediated_infer_connectivity(const ArModel& ar, const LdmModel& ldm,
                                                Vqvae& vqvae, const PredictiveHead& head,
                                                const TokenStream& history, std::uint64_t seed);

// Recent-window condition tokens -> tabular-diffusion twin -> tabular head.
std::vector<double> mediated_infer_tabular(const Tabdiff& generator, const PredictiveHead& head,
                                           const std::vector<int>& condition, int steps,
                                           double omega, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Counterfactuals.

struct CounterfactualSpec {
  std::string exposure;  // ICD code replaced by the healthy token
};

// Every occurrence of the exposure code is removed (its grid years fall back
// to the healthy token on re-tokenization). Throws NotFoundError when the
// factual history does not contain the exposure; idempotent on its output.
EventSequence counterfactual_do(const EventSequence& history, const CounterfactualSpec& spec);

// ---------------------------------------------------------------------------
// Evaluation suite.

// Frozen-encoder feature rows (flattened pre-quantization latents), one per
// matrix; the shared feature space for Frechet comparisons.
std::vector<std::vector<double>> twin_features(const Vqvae& vqvae,
                                               const std::vector<spdgeo::Mat>& matrices);

// ||mu_A - mu_B||^2 + tr(S_A + S_B - 2 (S_A S_B)^{1/2}) with a 1e-6 diagonal
// regularizer on both covariances; each set needs >= 2 samples.
double frechet_distance(const std::vector<std::vector<double>>& set_a,
                        const std::vector<std::vector<double>>& set_b);

// Mean edge-classification accuracy of |entry| > threshold binarizations over
// the strict upper triangle, averaged across the given thresholds.
double mean_accuracy_topology(const std::vector<spdgeo::Mat>& generated,
                              const std::vector<spdgeo::Mat>& reference,
                              const std::vector<double>& thresholds = {0.5, 0.6, 0.7, 0.8,
                                                                       0.9});

// Mean over pairs of the Pearson correlation of upper-triangular entries
// (diagonal included). Zero-variance members throw NumericError.
double pearson_matrices(const std::vector<spdgeo::Mat>& generated,
                        const std::vector<spdgeo::Mat>& reference);

// ---------------------------------------------------------------------------
// Average treatment effects.

struct AteRow {
  std::string exposure, outcome;
  long n_exposed = 0, n_outcome = 0;
  double empirical = 0.0;  // outcome-prevalence difference, post-exposure ages
  double model = 0.0;      // clipped inverse-propensity estimate
  double abs_error = 0.0;  // |empirical - model|
};

struct AteSkip {
  std::string exposure, outcome, reason;
};

struct AteReport {
  std::vector<AteRow> rows;
  std::vector<AteSkip> skipped;
  double mean_abs_error = 0.0;  // over emitted rows
};

struct AteConfig {
  long min_exposed = 5;
  long min_outcome = 5;
  double clip_lo = 0.01, clip_hi = 0.99;
  int hidden = 16;  // 2-layer propensity MLP
  int epochs = 60;
  double lr = 1e-2;
};

// One feature row per cohort subject (twin latents or history embeddings);
// propensity fitted per pair on those features.
AteReport estimate_ate(const Cohort& cohort, const std::vector<std::vector<double>>& features,
                       const AteConfig& cfg, std::uint64_t seed);

// Model-vs-analytic comparison for the configured pairs: mean |IPW - analytic|.
double ate_error_vs_analytic(const AteReport& report, const StructuralModelSpec& spec);

}  // namespace diffdt
