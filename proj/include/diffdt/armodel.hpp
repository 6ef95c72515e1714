#pragma once

// Causal-attention autoregressive model over token streams: next-token
// training, sampling, one-vs-rest AUC/F1 evaluation, and extraction of the
// per-position history embeddings used as diffusion conditioning.

#include <string>
#include <vector>

#include "diffdt/cohort.hpp"
#include "diffdt/tensor.hpp"
#include "diffdt/tokenizer.hpp"

namespace diffdt {

struct ArConfig {
  int d_phi = 64;
  int n_layers = 4;
  int n_heads = 4;
  int max_len = 128;
  int d_mlp = 256;
  double init_scale = 0.02;
};

struct ArModel {
  ArConfig cfg;
  int vocab_size = 0;
  std::string vocab_hash;
  ParamStore params;
  std::vector<double> loss_curve;  // mean train loss per epoch
};

// Fresh model with Gaussian init at cfg.init_scale.
ArModel make_ar_model(const ArConfig& cfg, const Vocabulary& vocab, std::uint64_t seed);

// Token embedding plus sinusoidal age embedding through a learned linear map.
Tensor ar_embed_input(const ArModel& model, const TokenStream& stream);

struct ArForward {
  Tensor logits;   // T x vocab
  Tensor history;  // T x d_phi; row t depends only on tokens <= t
};

ArForward ar_forward(const ArModel& model, const TokenStream& stream);

struct ArTrainConfig {
  int epochs = 20;
  double lr = 1e-3;
};

// Next-token cross-entropy over every subject stream of length >= 2;
// deterministic per seed, single-threaded.
ArModel train_ar(const Cohort& cohort, const Vocabulary& vocab, const TemporalGrid& grid,
                 const ArConfig& cfg, const ArTrainConfig& train_cfg, std::uint64_t seed);

// Rows 0..up_to (inclusive) of the history embedding.
Tensor extract_history(const ArModel& model, const TokenStream& stream, int up_to);

// Samples a stream over the grid starting from the healthy token.
TokenStream ar_sample(const ArModel& model, const TemporalGrid& grid, Rng& rng);

struct DiseaseMetric {
  std::string code;
  long n_pos = 0;
  double auc = 0.0;
  double f1 = 0.0;
};

struct ArEvalReport {
  std::vector<DiseaseMetric> per_disease;  // diseases with at least one positive
  std::vector<std::string> excluded;       // zero-positive diseases
  double macro_auc = 0.0;
  double macro_f1 = 0.0;
  double cross_entropy_nats = 0.0;  // mean next-token cross-entropy
  double argmax_accuracy = 0.0;
};

// One-vs-rest metrics on next-token probabilities over every position of the
// validation cohort; throws DataError when no disease positive exists at all.
ArEvalReport evaluate_auc_f1(const ArModel& model, const Cohort& val, const Vocabulary& vocab,
                             const TemporalGrid& grid);

// Rank-based ROC AUC with average-rank tie handling; equals the pairwise
// comparison statistic (ties counted 1/2).
double auc_score(const std::vector<double>& scores, const std::vector<int>& labels);

void save_ar_model(const ArModel& model, const std::string& path);
ArModel load_ar_model(const std::string& path, const ArConfig& cfg);

}  // namespace diffdt
