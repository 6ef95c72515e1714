#include "diffdt/choleskyldm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace diffdt {

namespace {

void check_config(const LdmConfig& cfg) {
  if (cfg.n_q < 1 || cfg.d < 1 || cfg.d_phi < 1 || cfg.c_hid < 1 || cfg.t_emb < 1 ||
      cfg.w1 < 1 || cfg.w2 < 1 || cfg.w3 < 1)
    throw ConfigError("ldm dimensions must be positive");
}

Tensor time_sinusoid(int t, int d) {
  auto out = tensor(1, d);
  for (int i = 0; i < d; ++i) {
    const double freq = std::pow(10000.0, -2.0 * (i / 2) / d);
    const double x = t * freq;
    out->value[i] = (i % 2 == 0) ? std::sin(x) : std::cos(x);
  }
  return out;
}

// Pre-norm residual block at a fixed width.
Tensor res_block(const ParamStore& p, const std::string& pf, const Tensor& x) {
  auto h = layer_norm(x, p.get(pf + "ln_g"), p.get(pf + "ln_b"));
  h = relu(add_rows(matmul(h, p.get(pf + "w1")), p.get(pf + "b1")));
  h = add_rows(matmul(h, p.get(pf + "w2")), p.get(pf + "b2"));
  return add(x, h);
}

void make_res_block(ParamStore& p, const std::string& pf, int w, Rng& rng, double s) {
  p.create(pf + "w1", w, w, rng, s);
  p.create_zero(pf + "b1", 1, w);
  p.create(pf + "w2", w, w, rng, s);
  p.create_zero(pf + "b2", 1, w);
  auto g = p.create_zero(pf + "ln_g", 1, w);
  std::fill(g->value.begin(), g->value.end(), 1.0);
  p.create_zero(pf + "ln_b", 1, w);
}

// Layer input = x + time projection + context projection.
Tensor inject(const LdmModel& m, const std::string& pf, const Tensor& x, const Tensor& t_emb,
              const Tensor& ctx) {
  auto with_t = add(x, matmul(t_emb, m.params.get(pf + "time")));
  return add(with_t, matmul(ctx, m.params.get(pf + "ctx")));
}

}  // namespace

NoiseSchedule NoiseSchedule::linear(int t_steps, double beta_min, double beta_max) {
  if (t_steps < 1) throw ConfigError("schedule needs at least one step");
  // beta_min/beta_max are quoted at the 1000-step reference; rescale so the
  // total noise budget (and terminal alpha_bar) is step-count independent.
  const double scale = 1000.0 / static_cast<double>(t_steps);
  NoiseSchedule s;
  s.t_steps = t_steps;
  double abar = 1.0;
  for (int i = 0; i < t_steps; ++i) {
    const double frac = t_steps > 1 ? static_cast<double>(i) / (t_steps - 1) : 1.0;
    const double b = scale * (beta_min + (beta_max - beta_min) * frac);
    if (b <= 0.0 || b >= 1.0)
      throw ConfigError("rescaled beta " + std::to_string(b) + " leaves (0,1); use more steps");
    s.beta.push_back(b);
    abar *= 1.0 - b;
    s.alpha_bar.push_back(abar);
  }
  return s;
}

double NoiseSchedule::alpha_bar_at(int t) const {
  if (t < 0 || t > t_steps)
    throw RangeError("diffusion step " + std::to_string(t) + " outside [0, " +
                     std::to_string(t_steps) + "]");
  return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t) - 1];
}

Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps,
                       const NoiseSchedule& schedule) {
  if (z0->rows != eps->rows || z0->cols != eps->cols)
    throw DimensionError("forward_diffuse: z0/eps shape mismatch");
  const double abar = schedule.alpha_bar_at(t);
  return add(scale(z0, std::sqrt(abar)), scale(eps, std::sqrt(1.0 - abar)));
}

LdmModel make_ldm(const LdmConfig& cfg, const NoiseSchedule& schedule, std::uint64_t seed) {
  check_config(cfg);
  if (schedule.t_steps < 1) throw ConfigError("ldm needs a non-empty noise schedule");
  LdmModel m;
  m.cfg = cfg;
  m.schedule = schedule;
  Rng rng(seed);
  const double s = cfg.init_scale;
  const int w_in = cfg.n_q * cfg.d;
  auto& p = m.params;
  p.create("attn/alpha", cfg.d, cfg.c_hid, rng, s);
  p.create("attn/beta", cfg.d_phi, cfg.c_hid, rng, s);
  p.create("attn/gamma", cfg.d_phi, cfg.d, rng, s);
  p.create("null_ctx", 1, cfg.d_phi, rng, 1.0);
  p.create("in_proj", w_in, cfg.w1, rng, s);
  p.create_zero("in_bias", 1, cfg.w1);
  const int widths[5] = {cfg.w1, cfg.w2, cfg.w3, cfg.w2, cfg.w1};
  const char* names[5] = {"down1/", "down2/", "mid/", "up1/", "up2/"};
  for (int l = 0; l < 5; ++l) {
    make_res_block(p, names[l], widths[l], rng, s);
    p.create(std::string(names[l]) + "time", cfg.t_emb, widths[l], rng, s);
    p.create(std::string(names[l]) + "ctx", w_in, widths[l], rng, s);
  }
  p.create("proj12", cfg.w1, cfg.w2, rng, s);
  p.create("proj23", cfg.w2, cfg.w3, rng, s);
  p.create("proj32", cfg.w3, cfg.w2, rng, s);
  p.create("proj21", cfg.w2, cfg.w1, rng, s);
  p.create("out_proj", cfg.w1, w_in, rng, s);
  p.create_zero("out_bias", 1, w_in);
  return m;
}

Tensor ldm_null_context(const LdmModel& model) { return model.params.get("null_ctx"); }

Tensor ldm_cross_attention(const LdmModel& model, const Tensor& z, const Tensor& yhat) {
  if (yhat->rows < 1) throw DataError("cross-attention requires a non-empty context");
  if (z->cols != model.cfg.d || yhat->cols != model.cfg.d_phi)
    throw DimensionError("cross-attention width mismatch");
  auto q = matmul(z, model.params.get("attn/alpha"));
  auto k = matmul(yhat, model.params.get("attn/beta"));
  auto v = matmul(yhat, model.params.get("attn/gamma"));
  auto att = softmax_rows(scale(matmul_nt(q, k), 1.0 / std::sqrt(model.cfg.c_hid)));
  return matmul(att, v);
}

Tensor ldm_denoise(const LdmModel& m, const Tensor& z_t, int t, const Tensor& yhat) {
  if (z_t->rows != m.cfg.n_q || z_t->cols != m.cfg.d)
    throw DimensionError("denoiser expects a " + std::to_string(m.cfg.n_q) + "x" +
                         std::to_string(m.cfg.d) + " latent");
  if (t < 1 || t > m.schedule.t_steps)
    throw RangeError("denoiser step " + std::to_string(t) + " outside [1, " +
                     std::to_string(m.schedule.t_steps) + "]");
  auto t_emb = time_sinusoid(t, m.cfg.t_emb);
  auto ctx = reshape(ldm_cross_attention(m, z_t, yhat), 1, m.cfg.n_q * m.cfg.d);
  auto x = add_rows(matmul(reshape(z_t, 1, m.cfg.n_q * m.cfg.d), m.params.get("in_proj")),
                    m.params.get("in_bias"));
  auto d1 = res_block(m.params, "down1/", inject(m, "down1/", x, t_emb, ctx));
  auto d2 = res_block(m.params, "down2/", inject(m, "down2/", matmul(d1, m.params.get("proj12")),
                                                 t_emb, ctx));
  auto mid = res_block(m.params, "mid/", inject(m, "mid/", matmul(d2, m.params.get("proj23")),
                                                t_emb, ctx));
  auto u1 = res_block(m.params, "up1/",
                      inject(m, "up1/", add(matmul(mid, m.params.get("proj32")), d2), t_emb, ctx));
  auto u2 = res_block(m.params, "up2/",
                      inject(m, "up2/", add(matmul(u1, m.params.get("proj21")), d1), t_emb, ctx));
  auto out = add_rows(matmul(u2, m.params.get("out_proj")), m.params.get("out_bias"));
  return reshape(out, m.cfg.n_q, m.cfg.d);
}

LdmModel train_ldm(const std::vector<LdmPair>& pairs, const LdmConfig& cfg,
                   const NoiseSchedule& schedule, const LdmTrainConfig& train_cfg,
                   std::uint64_t seed) {
  if (pairs.empty()) throw DataError("ldm training needs at least one latent/history pair");
  for (const auto& pr : pairs)
    if (pr.z0->rows != cfg.n_q || pr.z0->cols != cfg.d)
      throw DimensionError("training latent shape mismatch");
  auto model = make_ldm(cfg, schedule, seed);
  Rng rng(seed ^ 0x6C646D5F74726EULL);
  Adam opt({train_cfg.lr});
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  const double w_total = static_cast<double>(cfg.n_q) * cfg.d;
  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    // cosine decay to 10% of the base rate settles the late epochs
    const double frac = train_cfg.epochs > 1
                            ? static_cast<double>(epoch) / (train_cfg.epochs - 1)
                            : 0.0;
    opt.set_lr(train_cfg.lr * (0.55 + 0.45 * std::cos(3.14159265358979323846 * frac)));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.integer(i)]);
    double total = 0.0;
    for (std::size_t idx : order) {
      const auto& pr = pairs[idx];
      const int t = 1 + static_cast<int>(rng.integer(schedule.t_steps));
      auto eps = randn(cfg.n_q, cfg.d, rng, 1.0, false);
      auto z_t = forward_diffuse(pr.z0, t, eps, schedule);
      model.params.zero_grad();
      auto eps_hat = ldm_denoise(model, z_t, t, pr.yhat);
      // squared-norm objective; the zero predictor scores E||eps||^2 = n_q*d
      auto loss = scale(mse_loss(eps_hat, eps), w_total);
      backward(loss);
      const double v = loss->scalar();
      if (!std::isfinite(v))
        throw TrainError("non-finite ldm loss at epoch " + std::to_string(epoch) + ", step t=" +
                         std::to_string(t));
      total += v;
      opt.step(model.params);
    }
    model.loss_curve.push_back(total / static_cast<double>(order.size()));
  }
  return model;
}

Tensor ldm_sample_latent(const LdmModel& m, const Tensor& yhat, Rng& rng) {
  auto z = randn(m.cfg.n_q, m.cfg.d, rng, 1.0, false);
  for (int t = m.schedule.t_steps; t >= 1; --t) {
    const double beta = m.schedule.beta[static_cast<std::size_t>(t) - 1];
    const double alpha = 1.0 - beta;
    const double abar = m.schedule.alpha_bar_at(t);
    const double abar_prev = m.schedule.alpha_bar_at(t - 1);
    auto eps_hat = ldm_denoise(m, z, t, yhat);
    auto mean = scale(sub(z, scale(eps_hat, beta / std::sqrt(1.0 - abar))),
                      1.0 / std::sqrt(alpha));
    if (t > 1) {
      const double sigma = std::sqrt((1.0 - abar_prev) / (1.0 - abar) * beta);
      z = add(mean, scale(randn(m.cfg.n_q, m.cfg.d, rng, 1.0, false), sigma));
    } else {
      z = mean;
    }
  }
  return detach(z);
}

LdmSample ldm_sample(const LdmModel& model, Vqvae& vqvae, const Tensor& yhat, Rng& rng) {
  if (vqvae.cfg.n_q != model.cfg.n_q || vqvae.cfg.d != model.cfg.d)
    throw DimensionError("vqvae latent shape does not match the ldm");
  auto z0 = ldm_sample_latent(model, yhat, rng);
  auto quant = vq_quantize(z0, vqvae.params.get("codebook"));
  LdmSample out;
  out.z0 = quant.vectors;
  out.indices = quant.indices;
  out.matrix = vq_decode(vqvae, quant).m;
  return out;
}

void save_ldm(const LdmModel& model, const std::string& path) {
  save_checkpoint(path, model.params, model.loss_curve.empty() ? "" : "trained");
}

LdmModel load_ldm(const std::string& path, const LdmConfig& cfg, const NoiseSchedule& schedule) {
  check_config(cfg);
  LdmModel m;
  m.cfg = cfg;
  m.schedule = schedule;
  // checkpoints do not carry the per-epoch curve; a sentinel restores the
  // trained state that downstream inference checks
  if (load_checkpoint_into_new(path, m.params) == "trained") m.loss_curve = {0.0};
  return m;
}

}  // namespace diffdt
