#pragma once

// Vector-quantized autoencoder over connectivity matrices with a Cholesky
// decoder, plus the dual variant that autoencodes the low/high frequency
// components in separate branches.

#include <string>
#include <vector>

#include "diffdt/spdgeo.hpp"
#include "diffdt/tensor.hpp"

namespace diffdt {

struct VqvaeConfig {
  int n = 32;       // matrix dimension
  int n_q = 8;      // latent tokens
  int d = 64;       // latent width
  int n_code = 256; // codebook entries
  double beta = 0.25;
  int enc_h1 = 512, enc_h2 = 256, enc_h3 = 128;  // decoder mirrors these
  double init_scale = 0.05;
};

struct Vqvae {
  VqvaeConfig cfg;
  ParamStore params;  // encoder/decoder weights plus the "codebook" tensor
  long jitter_events = 0;  // decodes that needed the jitter backstop
};

struct QuantizedLatent {
  std::vector<int> indices;  // length n_q
  Tensor vectors;            // n_q x d rows copied from the codebook
};

Vqvae make_vqvae(const VqvaeConfig& cfg, std::uint64_t seed);

// Flattens the matrix and projects it through the encoder MLP; n_q x d.
Tensor vq_encode(const Vqvae& model, const spdgeo::Mat& m);

// Nearest codebook entry per latent row (squared Euclidean, lowest index on
// ties); agrees with an exhaustive scan.
QuantizedLatent vq_quantize(const Tensor& z_e, const Tensor& codebook);

// Decoder MLP to a packed lower triangle, then softplus diagonal; n x n.
Tensor vq_decode_graph(const Vqvae& model, const Tensor& z);

struct VqDecoded {
  spdgeo::CholFactor l;
  spdgeo::SpdMatrix m;
};

// Numeric decode of a quantized latent; the output always passes is_spd
// (jitter backstop counted on the model).
VqDecoded vq_decode(Vqvae& model, const QuantizedLatent& q);

struct VqLossParts {
  Tensor total;     // recon + spd + codebook + commit
  Tensor recon;     // MSE(M_hat, M)
  Tensor spd;       // MSE(L_hat, cholesky(M))
  Tensor codebook;  // MSE(sg[z_e], z_q)
  Tensor commit;    // beta * MSE(z_e, sg[z_q])
};

// Loss terms with explicit stop-gradient semantics; m must be SPD.
VqLossParts vq_loss_terms(const Tensor& m_hat, const spdgeo::SpdMatrix& m,
                          const Tensor& l_hat, const Tensor& z_e, const Tensor& z_q,
                          double beta);

struct VqForward {
  Tensor z_e;
  QuantizedLatent quant;
  Tensor l_hat;
  Tensor m_hat;
  VqLossParts loss;
};

// Full pipeline: encode, quantize, straight-through decode, loss.
VqForward vq_forward(const Vqvae& model, const spdgeo::SpdMatrix& m);

struct VqTrainConfig {
  int epochs = 40;
  double lr = 1e-3;
  int dead_epochs = 5;          // reseed entries unused this many epochs in a row
  double utilization_floor = 0.05;
};

struct VqTrainReport {
  std::vector<double> total, recon, spd, codebook, commit;  // per-epoch means
  std::vector<double> utilization;  // fraction of entries used per epoch
  long reseeded_entries = 0;
  std::vector<std::string> warnings;
};

Vqvae train_vqvae(const std::vector<spdgeo::SpdMatrix>& matrices, const VqvaeConfig& cfg,
                  const VqTrainConfig& train_cfg, std::uint64_t seed,
                  VqTrainReport* report = nullptr);

// Mean elementwise Pearson r between inputs and their reconstructions.
double vq_reconstruction_pearson(Vqvae& model, const std::vector<spdgeo::SpdMatrix>& matrices);
double vq_reconstruction_rmse(Vqvae& model, const std::vector<spdgeo::SpdMatrix>& matrices);

// --------------------------------------------------------------------------
// Dual variant: separate branches for the low/high frequency components, each
// shifted by a calibrated c*I so the Cholesky decoder sees SPD targets.

struct DualVqvae {
  Vqvae low;
  Vqvae high;
  int threshold = 25;
  double c_low = 0.0;
  double c_high = 0.0;
  bool calibrated = false;
};

// max(0, max_i(-lambda_min(component_i) + 1e-3)) over the component set.
double calibrate_shift(const std::vector<spdgeo::Mat>& components);

DualVqvae train_dual_vqvae(const std::vector<spdgeo::SpdMatrix>& matrices,
                           const VqvaeConfig& cfg, int threshold,
                           const VqTrainConfig& train_cfg, std::uint64_t seed,
                           VqTrainReport* low_report = nullptr,
                           VqTrainReport* high_report = nullptr);

// Split, autoencode each branch, merge and re-validate; throws StateError
// when the dual model is not calibrated.
spdgeo::SpdMatrix dual_encode_decode(DualVqvae& dual, const spdgeo::SpdMatrix& m);

double dual_reconstruction_rmse(DualVqvae& dual, const std::vector<spdgeo::SpdMatrix>& matrices);

// Structured-text latent export: one line per subject, id then indices then
// flattened vectors.
void export_latents(const Vqvae& model, const std::vector<spdgeo::SpdMatrix>& matrices,
                    const std::vector<long>& subject_ids, const std::string& path);

void save_vqvae(const Vqvae& model, const std::string& path);
Vqvae load_vqvae(const std::string& path, const VqvaeConfig& cfg);

}  // namespace diffdt
