#pragma once

// Conditional DDPM over VQVAE latents: an MLP U-Net with residual blocks,
// per-layer time-embedding injection, and cross-attention over AR history
// embeddings; ancestral sampling decodes through the frozen VQVAE.

#include <vector>

#include "diffdt/armodel.hpp"
#include "diffdt/spdvqvae.hpp"
#include "diffdt/tensor.hpp"

namespace diffdt {

struct NoiseSchedule {
  int t_steps = 0;
  std::vector<double> beta;       // 1-based conceptually; beta[i] is step i+1
  std::vector<double> alpha_bar;  // alpha_bar[i] = prod_{s<=i+1} (1 - beta_s)

  // Linear beta ramp specified at a reference 1000 steps and rescaled so the
  // terminal alpha_bar stays near zero at smaller step counts.
  static NoiseSchedule linear(int t_steps = 100, double beta_min = 1e-4,
                              double beta_max = 0.02);
  double alpha_bar_at(int t) const;  // t in [0, t_steps]; alpha_bar_at(0) = 1
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps,
                       const NoiseSchedule& schedule);

struct LdmConfig {
  int n_q = 8;
  int d = 64;      // latent width per token
  int d_phi = 64;  // history embedding width
  int c_hid = 64;  // attention width
  int w1 = 256, w2 = 512, w3 = 1024;  // U-Net level widths
  int t_emb = 64;
  double init_scale = 0.02;
};

struct LdmModel {
  LdmConfig cfg;
  NoiseSchedule schedule;
  ParamStore params;
  std::vector<double> loss_curve;
};

LdmModel make_ldm(const LdmConfig& cfg, const NoiseSchedule& schedule, std::uint64_t seed);

// softmax(z a (y b)^T / sqrt(c_hid)) (y g): n_q x d.
Tensor ldm_cross_attention(const LdmModel& model, const Tensor& z, const Tensor& yhat);

// Learned context row used when no history is supplied.
Tensor ldm_null_context(const LdmModel& model);

// Predicted noise, same shape as z_t; yhat may have any positive row count.
Tensor ldm_denoise(const LdmModel& model, const Tensor& z_t, int t, const Tensor& yhat);

struct LdmPair {
  Tensor z0;    // n_q x d continuous pre-quantization latent
  Tensor yhat;  // T x d_phi history embedding (frozen AR model output)
};

struct LdmTrainConfig {
  int epochs = 30;
  double lr = 1e-3;
};

// Minimizes ||eps - eps_theta(z_t, t, yhat)||^2 with uniform t; deterministic
// per seed.
LdmModel train_ldm(const std::vector<LdmPair>& pairs, const LdmConfig& cfg,
                   const NoiseSchedule& schedule, const LdmTrainConfig& train_cfg,
                   std::uint64_t seed);

// Ancestral sampling of a latent conditioned on yhat.
Tensor ldm_sample_latent(const LdmModel& model, const Tensor& yhat, Rng& rng);

struct LdmSample {
  Tensor z0;                 // snapped to the codebook
  std::vector<int> indices;  // codebook rows used
  spdgeo::SpdMatrix matrix;  // frozen-decoder output
};

// Sample, snap to the nearest codebook entries, decode with the frozen VQVAE.
LdmSample ldm_sample(const LdmModel& model, Vqvae& vqvae, const Tensor& yhat, Rng& rng);

void save_ldm(const LdmModel& model, const std::string& path);
LdmModel load_ldm(const std::string& path, const LdmConfig& cfg, const NoiseSchedule& schedule);

}  // namespace diffdt
