#include "diffdt/tabdiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace diffdt {

namespace {

void check_config(const TabdiffConfig& cfg) {
  if (cfg.d_organ < 1 || cfg.n_cat < 1) throw ConfigError("tabdiff needs numeric and cat columns");
  if (cfg.vocab < 3) throw ConfigError("tabdiff vocab must include healthy, MASK and a code");
  if (cfg.sigma_min <= 0.0 || cfg.sigma_max <= cfg.sigma_min)
    throw ConfigError("need 0 < sigma_min < sigma_max");
  if (cfg.t_min <= 0.0 || cfg.t_min >= 1.0) throw ConfigError("t_min must be inside (0,1)");
  if (cfg.d_model % cfg.n_heads != 0) throw ConfigError("d_model not divisible by n_heads");
}

void check_t(double t) {
  if (!(t >= 0.0 && t <= 1.0))
    throw RangeError("diffusion time " + std::to_string(t) + " outside [0,1]");
}

Tensor time_feats(double t, int d) {
  auto out = tensor(1, d);
  for (int i = 0; i < d; ++i) {
    const double freq = std::pow(1000.0, -2.0 * (i / 2) / d);
    const double x = 1000.0 * t * freq;
    out->value[i] = (i % 2 == 0) ? std::sin(x) : std::cos(x);
  }
  return out;
}

// 1 x d_organ learned exponents rho = 1 + softplus(raw).
Tensor rho_graph(const Tabdiff& m) {
  return add_scalar(softplus(m.params.get("rho_raw")), 1.0);
}
Tensor kappa_graph(const Tabdiff& m) {
  return add_scalar(softplus(m.params.get("kappa_raw")), 1.0);
}

// sigma(t) = exp(ln smin + (ln smax - ln smin) * t^rho), in-graph.
Tensor sigma_graph(const Tabdiff& m, double t) {
  const double lmin = std::log(m.cfg.sigma_min);
  const double lmax = std::log(m.cfg.sigma_max);
  auto t_pow = exp_t(scale(rho_graph(m), std::log(t)));  // t^rho, t > 0
  return exp_t(add_scalar(scale(t_pow, lmax - lmin), lmin));
}

Tensor row_tensor(const std::vector<double>& v) {
  return tensor(1, static_cast<int>(v.size()), v);
}

// Full (non-causal) pre-norm attention block.
Tensor encoder_block(const ParamStore& p, const std::string& pf, const Tensor& x, int n_heads) {
  const int d = x->cols;
  const int dh = d / n_heads;
  auto normed = layer_norm(x, p.get(pf + "ln1_g"), p.get(pf + "ln1_b"));
  auto q = matmul(normed, p.get(pf + "wq"));
  auto k = matmul(normed, p.get(pf + "wk"));
  auto v = matmul(normed, p.get(pf + "wv"));
  std::vector<Tensor> heads;
  for (int i = 0; i < n_heads; ++i) {
    auto att = softmax_rows(scale(
        matmul_nt(slice_cols(q, i * dh, dh), slice_cols(k, i * dh, dh)), 1.0 / std::sqrt(dh)));
    heads.push_back(matmul(att, slice_cols(v, i * dh, dh)));
  }
  auto mid = add(x, matmul(concat_cols(heads), p.get(pf + "wo")));
  auto normed2 = layer_norm(mid, p.get(pf + "ln2_g"), p.get(pf + "ln2_b"));
  auto h = relu(add_rows(matmul(normed2, p.get(pf + "w1")), p.get(pf + "b1")));
  return add(mid, add_rows(matmul(h, p.get(pf + "w2")), p.get(pf + "b2")));
}

// Token matrix: numeric columns then categorical columns, with the time
// embedding added to every row.
Tensor build_tokens(const Tabdiff& m, const Tensor& gamma_t_row, const std::vector<int>& tokens,
                    double t, bool null_condition) {
  const auto& p = m.params;
  if (static_cast<int>(tokens.size()) != m.cfg.n_cat)
    throw DimensionError("expected " + std::to_string(m.cfg.n_cat) + " condition tokens, got " +
                         std::to_string(tokens.size()));
  for (int tok : tokens)
    if (tok < 0 || tok >= m.cfg.vocab)
      throw VocabError("condition token " + std::to_string(tok) + " outside vocab");
  // numeric rows: col_emb_i + gamma_i * dir_i
  auto scaled = transpose(mul_rows(transpose(p.get("num_dir")), gamma_t_row));
  auto num_rows = add(p.get("num_col_emb"), scaled);
  Tensor cat_rows;
  if (null_condition) {
    std::vector<Tensor> reps(static_cast<std::size_t>(m.cfg.n_cat), p.get("null_cat"));
    cat_rows = add(p.get("cat_col_emb"), concat_rows(reps));
  } else {
    cat_rows = add(p.get("cat_col_emb"), embedding_lookup(p.get("cat_table"), tokens));
  }
  auto x = concat_rows({num_rows, cat_rows});
  auto t_emb = matmul(time_feats(t, m.cfg.d_model), p.get("time_proj"));
  for (int l = 0; l < m.cfg.n_layers; ++l) {
    // re-add the time embedding at each layer input
    x = encoder_block(m.params, "enc" + std::to_string(l) + "/", add_rows(x, t_emb),
                      m.cfg.n_heads);
  }
  return x;
}

Tensor ones_col(int n) {
  return tensor(n, 1, std::vector<double>(static_cast<std::size_t>(n), 1.0));
}

}  // namespace

Tabdiff make_tabdiff(const TabdiffConfig& cfg, std::uint64_t seed) {
  check_config(cfg);
  Tabdiff m;
  m.cfg = cfg;
  Rng rng(seed);
  auto& p = m.params;
  const int d = cfg.d_model;
  const double s = cfg.init_scale;
  p.create_zero("rho_raw", 1, cfg.d_organ);   // softplus(0)+1 = 1+ln2 at init
  p.create_zero("kappa_raw", 1, cfg.n_cat);
  p.create("num_col_emb", cfg.d_organ, d, rng, s);
  p.create("num_dir", cfg.d_organ, d, rng, 1.0);
  p.create("cat_col_emb", cfg.n_cat, d, rng, s);
  p.create("cat_table", cfg.vocab, d, rng, 1.0);
  p.create("null_cat", 1, d, rng, 1.0);
  p.create("time_proj", d, d, rng, s);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string pf = "enc" + std::to_string(l) + "/";
    for (const char* w : {"wq", "wk", "wv", "wo"}) p.create(pf + w, d, d, rng, s);
    p.create(pf + "w1", d, 2 * d, rng, s);
    p.create_zero(pf + "b1", 1, 2 * d);
    p.create(pf + "w2", 2 * d, d, rng, s);
    p.create_zero(pf + "b2", 1, d);
    for (const char* g : {"ln1_g", "ln2_g"}) {
      auto t = p.create_zero(pf + g, 1, d);
      std::fill(t->value.begin(), t->value.end(), 1.0);
    }
    for (const char* b : {"ln1_b", "ln2_b"}) p.create_zero(pf + b, 1, d);
  }
  p.create("num_head", cfg.d_organ, d, rng, s);
  p.create_zero("num_head_b", 1, cfg.d_organ);
  p.create("cat_head", d, cfg.vocab, rng, s);
  p.create_zero("cat_head_b", 1, cfg.vocab);
  // small unconditional denoiser
  p.create("phi/w1", cfg.d_organ + 16, cfg.phi_hidden, rng, s);
  p.create_zero("phi/b1", 1, cfg.phi_hidden);
  p.create("phi/w2", cfg.phi_hidden, cfg.d_organ, rng, s);
  p.create_zero("phi/b2", 1, cfg.d_organ);
  return m;
}

std::vector<double> num_sigma(const Tabdiff& m, double t) {
  check_t(t);
  std::vector<double> out(static_cast<std::size_t>(m.cfg.d_organ));
  if (t == 0.0) {
    std::fill(out.begin(), out.end(), m.cfg.sigma_min);
    return out;
  }
  if (t == 1.0) {
    std::fill(out.begin(), out.end(), m.cfg.sigma_max);
    return out;
  }
  auto s = sigma_graph(m, t);
  out = s->value;
  return out;
}

double cat_alpha(const Tabdiff& m, int col, double t) {
  check_t(t);
  if (col < 0 || col >= m.cfg.n_cat) throw RangeError("categorical column out of range");
  const double kappa = 1.0 + std::log1p(std::exp(m.params.get("kappa_raw")->value[col]));
  if (t == 0.0) return 1.0;
  if (t == 1.0) return 0.0;
  return std::pow(1.0 - t, kappa);
}

std::vector<double> forward_num(const Tabdiff& m, const std::vector<double>& traits, double t,
                                const std::vector<double>& eps) {
  if (traits.size() != eps.size() || static_cast<int>(traits.size()) != m.cfg.d_organ)
    throw DimensionError("forward_num: trait/eps length mismatch");
  auto sigma = num_sigma(m, t);
  std::vector<double> out(traits.size());
  for (std::size_t i = 0; i < traits.size(); ++i) out[i] = traits[i] + sigma[i] * eps[i];
  return out;
}

std::vector<int> forward_cat(const Tabdiff& m, const std::vector<int>& tokens, double t,
                             Rng& rng) {
  check_t(t);
  if (static_cast<int>(tokens.size()) != m.cfg.n_cat)
    throw DimensionError("forward_cat: token count mismatch");
  std::vector<int> out(tokens.size());
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    if (tokens[j] == kMaskToken) throw DataError("forward_cat input already contains MASK");
    out[j] = rng.uniform() < cat_alpha(m, static_cast<int>(j), t) ? tokens[j] : kMaskToken;
  }
  return out;
}

Tensor predict_num(const Tabdiff& m, const std::vector<double>& gamma_t,
                   const std::vector<int>& tokens, double t, bool null_condition) {
  check_t(t);
  auto h = build_tokens(m, row_tensor(gamma_t), tokens, t, null_condition);
  auto h_num = slice_rows(h, 0, m.cfg.d_organ);
  // per-column head: elementwise product with the column's head row, summed
  auto per_col = matmul(mul(h_num, m.params.get("num_head")), ones_col(m.cfg.d_model));
  return add(transpose(per_col), m.params.get("num_head_b"));
}

Tensor predict_cat_logits(const Tabdiff& m, const std::vector<double>& gamma_t,
                          const std::vector<int>& tokens, double t) {
  check_t(t);
  auto h = build_tokens(m, row_tensor(gamma_t), tokens, t, false);
  auto h_cat = slice_rows(h, m.cfg.d_organ, m.cfg.n_cat);
  return add_rows(matmul(h_cat, m.params.get("cat_head")), m.params.get("cat_head_b"));
}

Tensor predict_phi(const Tabdiff& m, const std::vector<double>& gamma_t, double t) {
  check_t(t);
  if (static_cast<int>(gamma_t.size()) != m.cfg.d_organ)
    throw DimensionError("phi input length mismatch");
  auto x = concat_cols({row_tensor(gamma_t), time_feats(t, 16)});
  auto h = relu(add_rows(matmul(x, m.params.get("phi/w1")), m.params.get("phi/b1")));
  return add_rows(matmul(h, m.params.get("phi/w2")), m.params.get("phi/b2"));
}

TabLossParts tabdiff_loss(const Tabdiff& m, const TabRow& row, double t,
                          const std::vector<double>& eps, const std::vector<int>& masked,
                          bool null_condition) {
  if (t < m.cfg.t_min || t > 1.0)
    throw RangeError("training time " + std::to_string(t) + " outside [t_min, 1]");
  // numeric branch: gamma_t built in-graph so gradients reach the exponents
  auto eps_row = row_tensor(eps);
  auto gamma_t = add(row_tensor(row.traits), mul(sigma_graph(m, t), eps_row));
  // numeric branch conditions on the clean tokens (matching generation, where
  // the condition is fully observed); the categorical branch sees the masked
  // state it must invert.
  auto h_clean = build_tokens(m, gamma_t, row.tokens, t, null_condition);
  auto h_num = slice_rows(h_clean, 0, m.cfg.d_organ);
  auto per_col = matmul(mul(h_num, m.params.get("num_head")), ones_col(m.cfg.d_model));
  auto eps_hat = add(transpose(per_col), m.params.get("num_head_b"));
  TabLossParts parts;
  parts.num = scale(mse_loss(eps_hat, eps_row), static_cast<double>(m.cfg.d_organ));

  // categorical branch: masked positions only, ELBO weight from the learned
  // kappa (clamped away from t=0 by the t_min floor)
  auto h_masked = build_tokens(m, gamma_t, masked, t, false);
  auto h_cat = slice_rows(h_masked, m.cfg.d_organ, m.cfg.n_cat);
  auto logits = add_rows(matmul(h_cat, m.params.get("cat_head")), m.params.get("cat_head_b"));
  auto nll = scale(transpose(gather_cols(log_softmax_rows(logits), row.tokens)), -1.0);
  auto kappa = kappa_graph(m);
  const double l1t = std::log(1.0 - std::min(t, 1.0 - 1e-12));
  auto alpha = exp_t(scale(kappa, l1t));                         // (1-t)^kappa
  auto aprime = mul(kappa, exp_t(scale(add_scalar(kappa, -1.0), l1t)));
  auto inv_one_minus_alpha =
      exp_t(scale(log_t(add_scalar(scale(alpha, -1.0), 1.0)), -1.0));
  auto weight = mul(aprime, inv_one_minus_alpha);
  // the weight behaves like 1/t near t=0; clamp at 100 (constant rescale so
  // gradients still reach kappa) to keep rare small-t draws from spiking
  std::vector<double> clamp_row(static_cast<std::size_t>(m.cfg.n_cat), 1.0);
  bool clamped = false;
  for (int j = 0; j < m.cfg.n_cat; ++j)
    if (weight->value[j] > 100.0) {
      clamp_row[j] = 100.0 / weight->value[j];
      clamped = true;
    }
  if (clamped) weight = mul(weight, row_tensor(clamp_row));
  std::vector<double> mask_sel(masked.size(), 0.0);
  for (std::size_t j = 0; j < masked.size(); ++j)
    if (masked[j] == kMaskToken) mask_sel[j] = 1.0;
  parts.cat = sum_all(mul(mul(weight, row_tensor(mask_sel)), nll));
  parts.total = add(scale(parts.num, m.cfg.lambda_num), scale(parts.cat, m.cfg.lambda_cat));
  return parts;
}

std::vector<int> reverse_step_cat(const Tabdiff& m, const std::vector<int>& s_t, double t,
                                  double s, const Tensor& logits, Rng& rng) {
  check_t(t);
  check_t(s);
  if (s >= t) throw RangeError("reverse step requires s < t");
  if (logits->rows != static_cast<int>(s_t.size()) || logits->cols != m.cfg.vocab)
    throw DimensionError("reverse_step_cat: logits shape mismatch");
  std::vector<int> out = s_t;
  for (std::size_t j = 0; j < s_t.size(); ++j) {
    if (s_t[j] != kMaskToken) continue;
    const double a_t = cat_alpha(m, static_cast<int>(j), t);
    const double a_s = cat_alpha(m, static_cast<int>(j), s);
    const double p_unmask = (a_s - a_t) / (1.0 - a_t);
    if (rng.uniform() >= p_unmask) continue;
    // sample a non-MASK class from the column's softmax
    double mx = -1e300;
    for (int c = 0; c < m.cfg.vocab; ++c)
      if (c != kMaskToken) mx = std::max(mx, logits->at(static_cast<int>(j), c));
    double z = 0.0;
    std::vector<double> p(static_cast<std::size_t>(m.cfg.vocab), 0.0);
    for (int c = 0; c < m.cfg.vocab; ++c) {
      if (c == kMaskToken) continue;
      p[c] = std::exp(logits->at(static_cast<int>(j), c) - mx);
      z += p[c];
    }
    double u = rng.uniform() * z;
    int pick = 0;
    for (int c = 0; c < m.cfg.vocab; ++c) {
      if (c == kMaskToken) continue;
      u -= p[c];
      pick = c;
      if (u <= 0.0) break;
    }
    out[j] = pick;
  }
  return out;
}

Tensor cfg_num(const Tabdiff& m, const std::vector<double>& gamma_t,
               const std::vector<int>& tokens, double t, double omega) {
  auto cond = predict_num(m, gamma_t, tokens, t, false);
  if (omega == 0.0) return cond;
  auto uncond = predict_phi(m, gamma_t, t);
  return sub(scale(cond, 1.0 + omega), scale(uncond, omega));
}

Tabdiff train_tabdiff(const std::vector<TabRow>& rows, const TabdiffConfig& cfg,
                      const TabTrainConfig& train_cfg, std::uint64_t seed) {
  if (rows.empty()) throw DataError("tabdiff training needs rows");
  for (const auto& r : rows)
    if (static_cast<int>(r.traits.size()) != cfg.d_organ ||
        static_cast<int>(r.tokens.size()) != cfg.n_cat)
      throw DimensionError("tabdiff row shape mismatch");
  auto model = make_tabdiff(cfg, seed);
  Rng rng(seed ^ 0x746162646966ULL);
  Adam opt({train_cfg.lr});
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    // cosine decay to 10% of the base rate settles the late epochs
    const double frac = train_cfg.epochs > 1
                            ? static_cast<double>(epoch) / (train_cfg.epochs - 1)
                            : 0.0;
    opt.set_lr(train_cfg.lr * (0.55 + 0.45 * std::cos(3.14159265358979323846 * frac)));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.integer(i)]);
    double tot = 0, tot_num = 0, tot_cat = 0;
    for (std::size_t idx : order) {
      const auto& row = rows[idx];
      const double t = cfg.t_min + (1.0 - cfg.t_min) * rng.uniform();
      std::vector<double> eps(static_cast<std::size_t>(cfg.d_organ));
      for (auto& e : eps) e = rng.gauss();
      auto masked = forward_cat(model, row.tokens, t, rng);
      const bool drop = rng.uniform() < cfg.cond_dropout;
      model.params.zero_grad();
      auto parts = tabdiff_loss(model, row, t, eps, masked, drop);
      // the unconditional denoiser trains on the marginal in the same pass
      auto gamma_t = forward_num(model, row.traits, t, eps);
      auto phi_loss = scale(mse_loss(predict_phi(model, gamma_t, t), row_tensor(eps)),
                            static_cast<double>(cfg.d_organ));
      auto loss = add(parts.total, phi_loss);
      backward(loss);
      const double v = loss->scalar();
      if (!std::isfinite(v))
        throw TrainError("non-finite tabdiff loss at epoch " + std::to_string(epoch) + ", t=" +
                         std::to_string(t));
      tot += v;
      tot_num += parts.num->scalar();
      tot_cat += parts.cat->scalar();
      opt.step(model.params);
    }
    const double inv = 1.0 / static_cast<double>(order.size());
    model.loss_curve.push_back(tot * inv);
    model.loss_num_curve.push_back(tot_num * inv);
    model.loss_cat_curve.push_back(tot_cat * inv);
  }
  model.trained = true;
  return model;
}

std::vector<double> generate_tabular(const Tabdiff& m, const std::vector<int>& condition,
                                     int steps, double omega, std::uint64_t seed) {
  if (!m.trained) throw StateError("generate_tabular on an untrained model");
  if (steps < 1) throw ConfigError("need at least one sampling step");
  Rng rng(seed);
  const std::vector<int> fixed = condition;  // never modified below
  std::vector<double> gamma(static_cast<std::size_t>(m.cfg.d_organ));
  {
    auto sig1 = num_sigma(m, 1.0);
    for (std::size_t i = 0; i < gamma.size(); ++i) gamma[i] = sig1[i] * rng.gauss();
  }
  for (int k = 0; k < steps; ++k) {
    const double t = 1.0 - (1.0 - m.cfg.t_min) * k / steps;
    const double s_time =
        (k + 1 == steps) ? 0.0 : 1.0 - (1.0 - m.cfg.t_min) * (k + 1) / steps;
    auto sig_t = num_sigma(m, t);
    auto sig_s = num_sigma(m, s_time);
    auto eps_hat = cfg_num(m, gamma, fixed, t, omega);
    for (std::size_t i = 0; i < gamma.size(); ++i) {
      const double x0 = gamma[i] - sig_t[i] * eps_hat->value[i];
      const double r2 = (sig_s[i] * sig_s[i]) / (sig_t[i] * sig_t[i]);
      double next = x0 + r2 * (gamma[i] - x0);
      if (s_time > 0.0) next += sig_s[i] * std::sqrt(std::max(0.0, 1.0 - r2)) * rng.gauss();
      gamma[i] = next;
    }
  }
  return gamma;
}

TabEval evaluate_tabular(const std::vector<std::vector<double>>& generated,
                         const std::vector<std::vector<double>>& reference) {
  if (generated.empty() || reference.empty()) throw DataError("evaluate_tabular: empty input");
  const std::size_t d = reference[0].size();
  for (const auto& r : generated)
    if (r.size() != d) throw DimensionError("evaluate_tabular: trait width mismatch");
  for (const auto& r : reference)
    if (r.size() != d) throw DimensionError("evaluate_tabular: trait width mismatch");
  TabEval ev;
  for (std::size_t i = 0; i < d; ++i) {
    // RMSE over paired rows (up to the shorter set)
    const std::size_t n_pair = std::min(generated.size(), reference.size());
    double se = 0.0;
    for (std::size_t r = 0; r < n_pair; ++r) {
      const double diff = generated[r][i] - reference[r][i];
      se += diff * diff;
    }
    ev.rmse.push_back(std::sqrt(se / static_cast<double>(n_pair)));
    // 1-D Wasserstein via sorted empirical quantile functions
    std::vector<double> a, b;
    for (const auto& r : generated) a.push_back(r[i]);
    for (const auto& r : reference) b.push_back(r[i]);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const int grid = 1000;
    double wd = 0.0;
    for (int q = 0; q < grid; ++q) {
      const double u = (q + 0.5) / grid;
      const double qa = a[std::min(a.size() - 1, static_cast<std::size_t>(u * a.size()))];
      const double qb = b[std::min(b.size() - 1, static_cast<std::size_t>(u * b.size()))];
      wd += std::fabs(qa - qb);
    }
    ev.wd.push_back(wd / grid);
  }
  return ev;
}

TraitStats fit_trait_stats(const std::vector<std::vector<double>>& traits) {
  if (traits.empty()) throw DataError("fit_trait_stats: empty input");
  const std::size_t d = traits[0].size();
  TraitStats st;
  st.mean.assign(d, 0.0);
  st.stddev.assign(d, 0.0);
  for (const auto& r : traits) {
    if (r.size() != d) throw DimensionError("fit_trait_stats: ragged input");
    for (std::size_t i = 0; i < d; ++i) st.mean[i] += r[i];
  }
  for (auto& m : st.mean) m /= static_cast<double>(traits.size());
  for (const auto& r : traits)
    for (std::size_t i = 0; i < d; ++i) {
      const double e = r[i] - st.mean[i];
      st.stddev[i] += e * e;
    }
  for (auto& s : st.stddev) {
    s = std::sqrt(s / static_cast<double>(traits.size()));
    if (s < 1e-12) s = 1.0;  // constant column: leave it centered only
  }
  return st;
}

std::vector<double> normalize_traits(const std::vector<double>& traits, const TraitStats& st) {
  if (traits.size() != st.mean.size()) throw DimensionError("normalize_traits: width mismatch");
  std::vector<double> out(traits.size());
  for (std::size_t i = 0; i < traits.size(); ++i)
    out[i] = (traits[i] - st.mean[i]) / st.stddev[i];
  return out;
}

std::vector<double> denormalize_traits(const std::vector<double>& traits, const TraitStats& st) {
  if (traits.size() != st.mean.size()) throw DimensionError("denormalize_traits: width mismatch");
  std::vector<double> out(traits.size());
  for (std::size_t i = 0; i < traits.size(); ++i)
    out[i] = traits[i] * st.stddev[i] + st.mean[i];
  return out;
}

std::vector<TabRow> build_tab_rows(const Cohort& cohort, const std::string& organ,
                                   const Vocabulary& vocab, const TemporalGrid& grid,
                                   int window, const TraitStats& stats) {
  if (window < 1) throw ConfigError("condition window must be positive");
  std::vector<TabRow> rows;
  for (const auto& s : cohort.subjects) {
    auto it = s.tabular.find(organ);
    if (it == s.tabular.end()) continue;
    auto ts = tokenize(s.seq, grid, vocab, 1 << 20);
    TabRow row;
    row.traits = normalize_traits(it->second.traits, stats);
    std::vector<int> recent;
    for (std::size_t i = 0; i < ts.tokens.size(); ++i)
      if (ts.ages[i] <= static_cast<int>(it->second.measured_at_age))
        recent.push_back(ts.tokens[i]);
    row.tokens.assign(static_cast<std::size_t>(window), kHealthyToken);
    const std::size_t take = std::min<std::size_t>(recent.size(), window);
    for (std::size_t i = 0; i < take; ++i)
      row.tokens[window - take + i] = recent[recent.size() - take + i];
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError("no subject carries organ " + organ);
  return rows;
}

void save_tabdiff(const Tabdiff& model, const std::string& path) {
  save_checkpoint(path, model.params, model.trained ? "trained" : "");
}

Tabdiff load_tabdiff(const std::string& path, const TabdiffConfig& cfg) {
  check_config(cfg);
  Tabdiff m;
  m.cfg = cfg;
  m.trained = load_checkpoint_into_new(path, m.params) == "trained";
  return m;
}

}  // namespace diffdt
