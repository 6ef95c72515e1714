#include "diffdt/spdvqvae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace diffdt {

namespace {

void check_config(const VqvaeConfig& cfg) {
  if (cfg.n < 2) throw ConfigError("vqvae matrix dimension must be >= 2");
  if (cfg.n_code < 2) throw ConfigError("codebook needs at least 2 entries");
  if (cfg.n_q < 1 || cfg.d < 1) throw ConfigError("latent shape must be positive");
  if (cfg.enc_h1 < 1 || cfg.enc_h2 < 1 || cfg.enc_h3 < 1)
    throw ConfigError("hidden widths must be positive");
  if (cfg.beta < 0.0) throw ConfigError("commitment weight must be non-negative");
}

Tensor flatten_row(const spdgeo::Mat& m) {
  auto x = tensor(1, m.n * m.n);
  x->value = m.a;
  return x;
}

Tensor mat_tensor(const spdgeo::Mat& m) {
  auto x = tensor(m.n, m.n);
  x->value = m.a;
  return x;
}

Tensor mlp3(const ParamStore& p, const std::string& pf, const Tensor& x) {
  auto h1 = relu(add_rows(matmul(x, p.get(pf + "w1")), p.get(pf + "b1")));
  auto h2 = relu(add_rows(matmul(h1, p.get(pf + "w2")), p.get(pf + "b2")));
  auto h3 = relu(add_rows(matmul(h2, p.get(pf + "w3")), p.get(pf + "b3")));
  return add_rows(matmul(h3, p.get(pf + "w4")), p.get(pf + "b4"));
}

spdgeo::Mat tensor_mat(const Tensor& t) {
  spdgeo::Mat m(t->rows);
  m.a = t->value;
  return m;
}

}  // namespace

Vqvae make_vqvae(const VqvaeConfig& cfg, std::uint64_t seed) {
  check_config(cfg);
  Vqvae m;
  m.cfg = cfg;
  Rng rng(seed);
  const int in = cfg.n * cfg.n;
  const int lat = cfg.n_q * cfg.d;
  const int packed = cfg.n * (cfg.n + 1) / 2;
  const double s = cfg.init_scale;
  auto dense = [&](const std::string& name, int r, int c) {
    m.params.create(name, r, c, rng, s);
    m.params.create_zero(name.substr(0, name.size() - 2) + "b" + name.substr(name.size() - 1),
                         1, c);
  };
  dense("enc/w1", in, cfg.enc_h1);
  dense("enc/w2", cfg.enc_h1, cfg.enc_h2);
  dense("enc/w3", cfg.enc_h2, cfg.enc_h3);
  dense("enc/w4", cfg.enc_h3, lat);
  dense("dec/w1", lat, cfg.enc_h3);
  dense("dec/w2", cfg.enc_h3, cfg.enc_h2);
  dense("dec/w3", cfg.enc_h2, cfg.enc_h1);
  dense("dec/w4", cfg.enc_h1, packed);
  m.params.create("codebook", cfg.n_code, cfg.d, rng, 1.0);
  return m;
}

Tensor vq_encode(const Vqvae& model, const spdgeo::Mat& m) {
  if (m.n != model.cfg.n)
    throw DimensionError("encoder expects " + std::to_string(model.cfg.n) + "x" +
                         std::to_string(model.cfg.n) + " input, got " + std::to_string(m.n));
  return reshape(mlp3(model.params, "enc/", flatten_row(m)), model.cfg.n_q, model.cfg.d);
}

QuantizedLatent vq_quantize(const Tensor& z_e, const Tensor& codebook) {
  if (z_e->cols != codebook->cols)
    throw DimensionError("latent width " + std::to_string(z_e->cols) +
                         " does not match codebook width " + std::to_string(codebook->cols));
  QuantizedLatent q;
  q.vectors = tensor(z_e->rows, z_e->cols);
  for (int r = 0; r < z_e->rows; ++r) {
    int best = 0;
    double best_d = 1e300;
    for (int k = 0; k < codebook->rows; ++k) {
      double d2 = 0.0;
      for (int c = 0; c < z_e->cols; ++c) {
        const double diff = z_e->at(r, c) - codebook->at(k, c);
        d2 += diff * diff;
      }
      if (d2 < best_d) {  // strict: ties keep the lowest index
        best_d = d2;
        best = k;
      }
    }
    q.indices.push_back(best);
    for (int c = 0; c < z_e->cols; ++c) q.vectors->at(r, c) = codebook->at(best, c);
  }
  return q;
}

Tensor vq_decode_graph(const Vqvae& model, const Tensor& z) {
  auto flat = reshape(z, 1, model.cfg.n_q * model.cfg.d);
  return cholesky_assemble(mlp3(model.params, "dec/", flat), model.cfg.n);
}

VqDecoded vq_decode(Vqvae& model, const QuantizedLatent& q) {
  auto l_hat = vq_decode_graph(model, q.vectors);
  VqDecoded out;
  out.l = tensor_mat(l_hat);
  long events = 0;
  out.m = spdgeo::ensure_spd_with_jitter(spdgeo::reconstruct(out.l), &events);
  model.jitter_events += events;
  return out;
}

VqLossParts vq_loss_terms(const Tensor& m_hat, const spdgeo::SpdMatrix& m,
                          const Tensor& l_hat, const Tensor& z_e, const Tensor& z_q,
                          double beta) {
  auto l = spdgeo::cholesky(m);  // throws NumericError on a non-SPD target
  VqLossParts parts;
  parts.recon = mse_loss(m_hat, mat_tensor(m));
  parts.spd = mse_loss(l_hat, mat_tensor(l));
  parts.codebook = mse_loss(detach(z_e), z_q);
  parts.commit = scale(mse_loss(z_e, detach(z_q)), beta);
  parts.total = add(add(parts.recon, parts.spd), add(parts.codebook, parts.commit));
  return parts;
}

VqForward vq_forward(const Vqvae& model, const spdgeo::SpdMatrix& m) {
  VqForward f;
  f.z_e = vq_encode(model, m);
  auto codebook = model.params.get("codebook");
  f.quant = vq_quantize(f.z_e, codebook);
  // keep the codebook rows in-graph so the codebook term trains the entries
  auto z_q = embedding_lookup(codebook, f.quant.indices);
  auto z_st = straight_through(f.z_e, z_q);
  f.l_hat = vq_decode_graph(model, z_st);
  f.m_hat = matmul_nt(f.l_hat, f.l_hat);
  f.loss = vq_loss_terms(f.m_hat, m, f.l_hat, f.z_e, z_q, model.cfg.beta);
  return f;
}

Vqvae train_vqvae(const std::vector<spdgeo::SpdMatrix>& matrices, const VqvaeConfig& cfg,
                  const VqTrainConfig& train_cfg, std::uint64_t seed, VqTrainReport* report) {
  if (matrices.size() < 2) throw DataError("vqvae training needs at least 2 matrices");
  auto model = make_vqvae(cfg, seed);
  Rng rng(seed ^ 0x5671766165ULL);
  Adam opt({train_cfg.lr});
  std::vector<std::size_t> order(matrices.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> unused_streak(cfg.n_code, 0);
  VqTrainReport local;
  VqTrainReport& rep = report ? *report : local;
  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.integer(i)]);
    double tot = 0, rec = 0, spd = 0, cb = 0, com = 0;
    std::vector<bool> used(cfg.n_code, false);
    for (std::size_t idx : order) {
      model.params.zero_grad();
      auto f = vq_forward(model, matrices[idx]);
      backward(f.loss.total);
      const double v = f.loss.total->scalar();
      if (!std::isfinite(v))
        throw TrainError("non-finite vqvae loss at epoch " + std::to_string(epoch));
      tot += v;
      rec += f.loss.recon->scalar();
      spd += f.loss.spd->scalar();
      cb += f.loss.codebook->scalar();
      com += f.loss.commit->scalar();
      for (int k : f.quant.indices) used[k] = true;
      opt.step(model.params);
    }
    const double inv = 1.0 / static_cast<double>(order.size());
    rep.total.push_back(tot * inv);
    rep.recon.push_back(rec * inv);
    rep.spd.push_back(spd * inv);
    rep.codebook.push_back(cb * inv);
    rep.commit.push_back(com * inv);
    long n_used = std::count(used.begin(), used.end(), true);
    rep.utilization.push_back(static_cast<double>(n_used) / cfg.n_code);
    if (rep.utilization.back() < train_cfg.utilization_floor)
      rep.warnings.push_back("epoch " + std::to_string(epoch) + ": codebook utilization " +
                             std::to_string(rep.utilization.back()) + " below floor");
    auto codebook = model.params.get("codebook");
    for (int k = 0; k < cfg.n_code; ++k) {
      unused_streak[k] = used[k] ? 0 : unused_streak[k] + 1;
      if (unused_streak[k] >= train_cfg.dead_epochs) {
        // reseed to a random encoder output row from the data
        auto z = vq_encode(model, matrices[rng.integer(matrices.size())]);
        const int row = static_cast<int>(rng.integer(cfg.n_q));
        for (int c = 0; c < cfg.d; ++c) codebook->at(k, c) = z->at(row, c);
        unused_streak[k] = 0;
        ++rep.reseeded_entries;
      }
    }
  }
  return model;
}

double vq_reconstruction_pearson(Vqvae& model, const std::vector<spdgeo::SpdMatrix>& matrices) {
  std::vector<double> x, y;
  for (const auto& m : matrices) {
    auto dec = vq_decode(model, vq_quantize(vq_encode(model, m), model.params.get("codebook")));
    x.insert(x.end(), m.a.begin(), m.a.end());
    y.insert(y.end(), dec.m.a.begin(), dec.m.a.end());
  }
  return pearson_r(x, y);
}

double vq_reconstruction_rmse(Vqvae& model, const std::vector<spdgeo::SpdMatrix>& matrices) {
  double se = 0.0;
  long n = 0;
  for (const auto& m : matrices) {
    auto dec = vq_decode(model, vq_quantize(vq_encode(model, m), model.params.get("codebook")));
    for (std::size_t i = 0; i < m.a.size(); ++i) {
      const double d = m.a[i] - dec.m.a[i];
      se += d * d;
      ++n;
    }
  }
  return std::sqrt(se / static_cast<double>(n));
}

double calibrate_shift(const std::vector<spdgeo::Mat>& components) {
  if (components.empty()) throw DataError("shift calibration needs at least one component");
  double c = 0.0;
  for (const auto& comp : components)
    c = std::max(c, -spdgeo::lambda_min_bisect(comp) + 1e-3);
  return c;
}

DualVqvae train_dual_vqvae(const std::vector<spdgeo::SpdMatrix>& matrices,
                           const VqvaeConfig& cfg, int threshold,
                           const VqTrainConfig& train_cfg, std::uint64_t seed,
                           VqTrainReport* low_report, VqTrainReport* high_report) {
  if (matrices.size() < 2) throw DataError("dual vqvae training needs at least 2 matrices");
  std::vector<spdgeo::Mat> lows, highs;
  for (const auto& m : matrices) {
    auto s = spdgeo::fourier_split(m, threshold);
    lows.push_back(std::move(s.low));
    highs.push_back(std::move(s.high));
  }
  DualVqvae dual;
  dual.threshold = threshold;
  dual.c_low = calibrate_shift(lows);
  dual.c_high = calibrate_shift(highs);
  auto shift_all = [](std::vector<spdgeo::Mat>& ms, double c) {
    std::vector<spdgeo::SpdMatrix> out;
    for (auto& m : ms) {
      for (int i = 0; i < m.n; ++i) m.at(i, i) += c;
      out.push_back(std::move(m));
    }
    return out;
  };
  dual.low = train_vqvae(shift_all(lows, dual.c_low), cfg, train_cfg, seed ^ 0x10ULL, low_report);
  dual.high =
      train_vqvae(shift_all(highs, dual.c_high), cfg, train_cfg, seed ^ 0x8181ULL, high_report);
  dual.calibrated = true;
  return dual;
}

spdgeo::SpdMatrix dual_encode_decode(DualVqvae& dual, const spdgeo::SpdMatrix& m) {
  if (!dual.calibrated) throw StateError("dual vqvae used before calibration");
  auto s = spdgeo::fourier_split(m, dual.threshold);
  for (int i = 0; i < s.low.n; ++i) {
    s.low.at(i, i) += dual.c_low;
    s.high.at(i, i) += dual.c_high;
  }
  auto run = [](Vqvae& b, const spdgeo::Mat& target) {
    return vq_decode(b, vq_quantize(vq_encode(b, target), b.params.get("codebook"))).m;
  };
  auto rec_low = run(dual.low, s.low);
  auto rec_high = run(dual.high, s.high);
  spdgeo::Mat merged(m.n);
  for (std::size_t i = 0; i < merged.a.size(); ++i)
    merged.a[i] = rec_low.a[i] + rec_high.a[i];
  for (int i = 0; i < merged.n; ++i) merged.at(i, i) -= dual.c_low + dual.c_high;
  long events = 0;
  auto out = spdgeo::ensure_spd_with_jitter(merged, &events);
  dual.low.jitter_events += events;  // merged-output violations recorded on the low branch
  return out;
}

double dual_reconstruction_rmse(DualVqvae& dual, const std::vector<spdgeo::SpdMatrix>& matrices) {
  double se = 0.0;
  long n = 0;
  for (const auto& m : matrices) {
    auto rec = dual_encode_decode(dual, m);
    for (std::size_t i = 0; i < m.a.size(); ++i) {
      const double d = m.a[i] - rec.a[i];
      se += d * d;
      ++n;
    }
  }
  return std::sqrt(se / static_cast<double>(n));
}

void export_latents(const Vqvae& model, const std::vector<spdgeo::SpdMatrix>& matrices,
                    const std::vector<long>& subject_ids, const std::string& path) {
  if (matrices.size() != subject_ids.size())
    throw DataError("latent export: one subject id per matrix required");
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  auto codebook = model.params.get("codebook");
  for (std::size_t i = 0; i < matrices.size(); ++i) {
    auto q = vq_quantize(vq_encode(model, matrices[i]), codebook);
    os << subject_ids[i];
    for (int k : q.indices) os << ' ' << k;
    for (double v : q.vectors->value) os << ' ' << v;
    os << '\n';
  }
}

void save_vqvae(const Vqvae& model, const std::string& path) {
  save_checkpoint(path, model.params, "");
}

Vqvae load_vqvae(const std::string& path, const VqvaeConfig& cfg) {
  check_config(cfg);
  Vqvae m;
  m.cfg = cfg;
  load_checkpoint_into_new(path, m.params);
  if (m.params.get("codebook")->rows != cfg.n_code)
    throw DataError("checkpoint codebook size does not match the config");
  return m;
}

}  // namespace diffdt
