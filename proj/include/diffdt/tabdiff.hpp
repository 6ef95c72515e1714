#pragma once

// Hybrid continuous/categorical diffusion for organ trait vectors conditioned
// on recent ICD tokens: variance-exploding noise with learnable per-column
// exponents, masking diffusion for the categorical columns, and
// classifier-free guidance against a smaller unconditional denoiser.

#include <string>
#include <vector>

#include "diffdt/cohort.hpp"
#include "diffdt/tensor.hpp"
#include "diffdt/tokenizer.hpp"

namespace diffdt {

struct TabdiffConfig {
  int d_organ = 3;   // numeric trait columns
  int n_cat = 8;     // categorical condition columns (recent-window tokens)
  int vocab = 0;     // token vocabulary size (includes MASK at kMaskToken)
  double sigma_min = 1e-4;
  double sigma_max = 10.0;
  double t_min = 1e-3;
  double lambda_num = 1.0;
  double lambda_cat = 1.0;
  double cond_dropout = 0.1;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int phi_hidden = 32;  // the unconditional denoiser stays small
  double init_scale = 0.02;
};

struct TabRow {
  std::vector<double> traits;  // length d_organ, z-scored
  std::vector<int> tokens;     // length n_cat
};

struct Tabdiff {
  TabdiffConfig cfg;
  ParamStore params;
  bool trained = false;
  std::vector<double> loss_curve, loss_num_curve, loss_cat_curve;
};

Tabdiff make_tabdiff(const TabdiffConfig& cfg, std::uint64_t seed);

// sigma_i(t) = sigma_min * (sigma_max/sigma_min)^(t^rho_i) with the current
// learned exponents; exact endpoints at t=0 and t=1.
std::vector<double> num_sigma(const Tabdiff& model, double t);
// alpha_j(t) = (1-t)^kappa_j.
double cat_alpha(const Tabdiff& model, int col, double t);

std::vector<double> forward_num(const Tabdiff& model, const std::vector<double>& traits,
                                double t, const std::vector<double>& eps);
// Each token kept with probability alpha_j(t), else replaced by kMaskToken.
std::vector<int> forward_cat(const Tabdiff& model, const std::vector<int>& tokens, double t,
                             Rng& rng);

// Conditional noise prediction (1 x d_organ); null_condition replaces the
// token embeddings by the learned null row (conditioning-dropout path).
Tensor predict_num(const Tabdiff& model, const std::vector<double>& gamma_t,
                   const std::vector<int>& tokens, double t, bool null_condition = false);
// Per-column class logits (n_cat x vocab).
Tensor predict_cat_logits(const Tabdiff& model, const std::vector<double>& gamma_t,
                          const std::vector<int>& tokens, double t);
// Small unconditional denoiser mu_phi (1 x d_organ).
Tensor predict_phi(const Tabdiff& model, const std::vector<double>& gamma_t, double t);

struct TabLossParts {
  Tensor total;  // lambda_num * num + lambda_cat * cat
  Tensor num;
  Tensor cat;
};

// Per-sample hybrid loss at diffusion time t; eps is the injected unit
// normal, masked is the realized categorical corruption of row.tokens.
TabLossParts tabdiff_loss(const Tabdiff& model, const TabRow& row, double t,
                          const std::vector<double>& eps, const std::vector<int>& masked,
                          bool null_condition);

// Unmask each masked token to a class sampled from its logits with
// probability (alpha_s - alpha_t) / (1 - alpha_t); unmasked tokens are fixed.
std::vector<int> reverse_step_cat(const Tabdiff& model, const std::vector<int>& s_t, double t,
                                  double s, const Tensor& logits, Rng& rng);

// (1 + omega) * mu_theta - omega * mu_phi.
Tensor cfg_num(const Tabdiff& model, const std::vector<double>& gamma_t,
               const std::vector<int>& tokens, double t, double omega);

struct TabTrainConfig {
  int epochs = 40;
  double lr = 1e-3;
};

Tabdiff train_tabdiff(const std::vector<TabRow>& rows, const TabdiffConfig& cfg,
                      const TabTrainConfig& train_cfg, std::uint64_t seed);

// Reverse VE integration of the numeric columns with CFG; the condition
// tokens are fixed throughout. Throws StateError on an untrained model.
std::vector<double> generate_tabular(const Tabdiff& model, const std::vector<int>& condition,
                                     int steps, double omega, std::uint64_t seed);

struct TabEval {
  std::vector<double> rmse;  // per trait, over paired rows
  std::vector<double> wd;    // per trait, 1-D sorted empirical distance
};

TabEval evaluate_tabular(const std::vector<std::vector<double>>& generated,
                         const std::vector<std::vector<double>>& reference);

// --------------------------------------------------------------------------
// Cohort plumbing: recent-window condition tokens and z-scoring.

struct TraitStats {
  std::vector<double> mean, stddev;
};

TraitStats fit_trait_stats(const std::vector<std::vector<double>>& traits);
std::vector<double> normalize_traits(const std::vector<double>& traits, const TraitStats& stats);
std::vector<double> denormalize_traits(const std::vector<double>& traits,
                                       const TraitStats& stats);

// One row per subject holding the given organ: z-scored traits plus the last
// `window` tokens at ages <= the measurement age (healthy-padded in front).
std::vector<TabRow> build_tab_rows(const Cohort& cohort, const std::string& organ,
                                   const Vocabulary& vocab, const TemporalGrid& grid,
                                   int window, const TraitStats& stats);

void save_tabdiff(const Tabdiff& model, const std::string& path);
Tabdiff load_tabdiff(const std::string& path, const TabdiffConfig& cfg);

}  // namespace diffdt
