#include "diffdt/mediation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace diffdt {

namespace {

void check_head_config(const HeadConfig& cfg, bool connectivity) {
  if (cfg.vocab < 2) throw ConfigError("head vocab too small");
  if (cfg.d_model % cfg.n_heads != 0) throw ConfigError("d_model not divisible by n_heads");
  if (cfg.trait_bin_max < 1) throw ConfigError("trait bin range must be positive");
  if (connectivity) {
    if (cfg.conn_n < 2) throw ConfigError("connectivity head needs conn_n >= 2");
  } else if (cfg.d_organ < 1) {
    throw ConfigError("tabular head needs d_organ >= 1");
  }
}

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

void create_blocks(ParamStore& p, int n_layers, int d, Rng& rng, double s) {
  for (int l = 0; l < n_layers; ++l) {
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
}

int trait_bin(double value, int bin_max) {
  const int b = static_cast<int>(std::lround(value));
  return std::clamp(b, -bin_max, bin_max) + bin_max;  // shifted to [0, 2*bin_max]
}

Tensor head_logits(const PredictiveHead& head, const Tensor& rows) {
  auto x = rows;
  const int layers = head.connectivity ? head.cfg.conn_layers : head.cfg.n_layers;
  for (int l = 0; l < layers; ++l)
    x = encoder_block(head.params, "enc" + std::to_string(l) + "/", x, head.cfg.n_heads);
  Tensor pooled;
  if (head.connectivity) {
    // learned classification query over the encoded matrix rows
    auto k = matmul(x, head.params.get("att_k"));
    auto v = matmul(x, head.params.get("att_v"));
    auto att = softmax_rows(
        scale(matmul_nt(head.params.get("cls_q"), k), 1.0 / std::sqrt(head.cfg.d_model)));
    pooled = matmul(att, v);
  } else {
    pooled = slice_rows(x, 0, 1);  // CLS row
  }
  return add_rows(matmul(pooled, head.params.get("out_w")), head.params.get("out_b"));
}

Tensor tab_head_rows(const PredictiveHead& head, const std::vector<double>& traits) {
  if (static_cast<int>(traits.size()) != head.cfg.d_organ)
    throw DimensionError("head expected " + std::to_string(head.cfg.d_organ) + " traits, got " +
                         std::to_string(traits.size()));
  std::vector<int> bins;
  for (double v : traits) {
    if (!std::isfinite(v)) throw DataError("non-finite trait value");
    bins.push_back(trait_bin(v, head.cfg.trait_bin_max));
  }
  auto trait_rows = embedding_lookup(head.params.get("bin_table"), bins);
  auto x = concat_rows({head.params.get("cls_tok"), trait_rows});
  return add(x, head.params.get("pos_emb"));
}

Tensor conn_head_rows(const PredictiveHead& head, const spdgeo::Mat& m) {
  if (m.n != head.cfg.conn_n)
    throw DimensionError("head expected " + std::to_string(head.cfg.conn_n) + "x" +
                         std::to_string(head.cfg.conn_n) + " matrices");
  auto rows = tensor(m.n, m.n, m.a);
  return add(matmul(rows, head.params.get("row_proj")), head.params.get("pos_emb"));
}

template <typename Pair, typename RowFn>
PredictiveHead finetune_head(PredictiveHead head, const std::vector<Pair>& pairs,
                             const HeadTrainConfig& train_cfg, std::uint64_t seed,
                             const RowFn& rows_of) {
  if (pairs.empty()) throw DataError("head finetuning needs pairs");
  for (const auto& pr : pairs)
    if (pr.next_code < 0 || pr.next_code >= head.cfg.vocab)
      throw VocabError("head target " + std::to_string(pr.next_code) + " outside vocab");
  Rng rng(seed ^ 0x68656164ULL);
  Adam opt({train_cfg.lr});
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.integer(i)]);
    double tot = 0.0;
    for (std::size_t idx : order) {
      head.params.zero_grad();
      auto logits = head_logits(head, rows_of(head, pairs[idx]));
      auto loss = cross_entropy_with_logits(logits, {pairs[idx].next_code});
      backward(loss);
      const double v = loss->scalar();
      if (!std::isfinite(v)) throw TrainError("non-finite head loss");
      tot += v;
      opt.step(head.params);
    }
    head.loss_curve.push_back(tot / static_cast<double>(order.size()));
  }
  head.trained = true;
  return head;
}

std::vector<double> softmax_vector(const Tensor& logits) {
  double mx = *std::max_element(logits->value.begin(), logits->value.end());
  std::vector<double> out(logits->value.size());
  double z = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(logits->value[i] - mx);
    z += out[i];
  }
  for (auto& v : out) v /= z;
  return out;
}

// Symmetric matrix square root with eigenvalues clamped at zero.
spdgeo::Mat sym_sqrt(const spdgeo::Mat& m) {
  std::vector<double> w;
  spdgeo::Mat v;
  spdgeo::jacobi_eigen(m, w, v);
  spdgeo::Mat out;
  out.n = m.n;
  out.a.assign(static_cast<std::size_t>(m.n) * m.n, 0.0);
  for (int i = 0; i < m.n; ++i)
    for (int j = 0; j < m.n; ++j) {
      double s = 0.0;
      for (int k = 0; k < m.n; ++k)
        s += v.at(i, k) * std::sqrt(std::max(0.0, w[k])) * v.at(j, k);
      out.at(i, j) = s;
    }
  return out;
}

spdgeo::Mat sample_covariance(const std::vector<std::vector<double>>& set,
                              std::vector<double>& mean_out) {
  const int d = static_cast<int>(set[0].size());
  mean_out.assign(static_cast<std::size_t>(d), 0.0);
  for (const auto& row : set) {
    if (static_cast<int>(row.size()) != d)
      throw DimensionError("frechet feature rows must share a width");
    for (int i = 0; i < d; ++i) mean_out[i] += row[i];
  }
  for (auto& v : mean_out) v /= static_cast<double>(set.size());
  spdgeo::Mat cov;
  cov.n = d;
  cov.a.assign(static_cast<std::size_t>(d) * d, 0.0);
  for (const auto& row : set)
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        cov.at(i, j) += (row[i] - mean_out[i]) * (row[j] - mean_out[j]);
  for (auto& v : cov.a) v /= static_cast<double>(set.size());
  for (int i = 0; i < d; ++i) cov.at(i, i) += 1e-6;
  return cov;
}

}  // namespace

PredictiveHead make_tab_head(const HeadConfig& cfg, std::uint64_t seed) {
  check_head_config(cfg, false);
  PredictiveHead head;
  head.cfg = cfg;
  head.connectivity = false;
  Rng rng(seed);
  auto& p = head.params;
  const int d = cfg.d_model;
  const double s = cfg.init_scale;
  p.create("bin_table", 2 * cfg.trait_bin_max + 1, d, rng, 1.0);
  p.create("cls_tok", 1, d, rng, 1.0);
  p.create("pos_emb", cfg.d_organ + 1, d, rng, s);
  create_blocks(p, cfg.n_layers, d, rng, s);
  p.create("out_w", d, cfg.vocab, rng, s);
  p.create_zero("out_b", 1, cfg.vocab);
  return head;
}

PredictiveHead make_conn_head(const HeadConfig& cfg, std::uint64_t seed) {
  check_head_config(cfg, true);
  PredictiveHead head;
  head.cfg = cfg;
  head.connectivity = true;
  Rng rng(seed);
  auto& p = head.params;
  const int d = cfg.d_model;
  const double s = cfg.init_scale;
  p.create("row_proj", cfg.conn_n, d, rng, 1.0 / std::sqrt(cfg.conn_n));
  p.create("pos_emb", cfg.conn_n, d, rng, s);
  create_blocks(p, cfg.conn_layers, d, rng, s);
  p.create("cls_q", 1, d, rng, 1.0);
  p.create("att_k", d, d, rng, s);
  p.create("att_v", d, d, rng, s);
  p.create("out_w", d, cfg.vocab, rng, s);
  p.create_zero("out_b", 1, cfg.vocab);
  return head;
}

Tensor tab_head_logits(const PredictiveHead& head, const std::vector<double>& traits) {
  if (head.connectivity) throw StateError("tabular logits requested from a connectivity head");
  return head_logits(head, tab_head_rows(head, traits));
}

Tensor conn_head_logits(const PredictiveHead& head, const spdgeo::Mat& matrix) {
  if (!head.connectivity) throw StateError("connectivity logits requested from a tabular head");
  return head_logits(head, conn_head_rows(head, matrix));
}

PredictiveHead finetune_tab_head(const std::vector<TabHeadPair>& pairs, const HeadConfig& cfg,
                                 const HeadTrainConfig& train_cfg, std::uint64_t seed) {
  return finetune_head(make_tab_head(cfg, seed), pairs, train_cfg, seed,
                       [](const PredictiveHead& h, const TabHeadPair& pr) {
                         return tab_head_rows(h, pr.traits);
                       });
}

PredictiveHead finetune_conn_head(const std::vector<ConnHeadPair>& pairs, const HeadConfig& cfg,
                                  const HeadTrainConfig& train_cfg, std::uint64_t seed) {
  return finetune_head(make_conn_head(cfg, seed), pairs, train_cfg, seed,
                       [](const PredictiveHead& h, const ConnHeadPair& pr) {
                         return conn_head_rows(h, pr.matrix);
                       });
}

void save_head(const PredictiveHead& head, const std::string& path) {
  save_checkpoint(path, head.params, head.trained ? "trained" : "");
}

PredictiveHead load_head(const std::string& path, const HeadConfig& cfg, bool connectivity) {
  check_head_config(cfg, connectivity);
  PredictiveHead head;
  head.cfg = cfg;
  head.connectivity = connectivity;
  head.trained = load_checkpoint_into_new(path, head.params) == "trained";
  return head;
}

std::vector<double> mediated_infer_connectivity(const ArModel& ar, const LdmModel& ldm,
                                                Vqvae& vqvae, const PredictiveHead& head,
                                                const TokenStream& history, std::uint64_t seed) {
  if (ar.loss_curve.empty()) throw StateError("mediated inference needs a trained armodel");
  if (ldm.loss_curve.empty()) throw StateError("mediated inference needs a trained choleskyldm");
  if (!head.trained) throw StateError("mediated inference needs a trained predictive head");
  if (history.tokens.empty()) throw DataError("empty history");
  auto hist = extract_history(ar, history, static_cast<int>(history.tokens.size()) - 1);
  auto yhat = slice_rows(hist, hist->rows - 1, 1);
  Rng rng(seed);
  auto sample = ldm_sample(ldm, vqvae, yhat, rng);
  return softmax_vector(conn_head_logits(head, sample.matrix));
}

std::vector<double> mediated_infer_tabular(const Tabdiff& generator, const PredictiveHead& head,
                                           const std::vector<int>& condition, int steps,
                                           double omega, std::uint64_t seed) {
  if (!generator.trained) throw StateError("mediated inference needs a trained tabdiff");
  if (!head.trained) throw StateError("mediated inference needs a trained predictive head");
  auto traits = generate_tabular(generator, condition, steps, omega, seed);
  return softmax_vector(tab_head_logits(head, traits));
}

EventSequence counterfactual_do(const EventSequence& history, const CounterfactualSpec& spec) {
  if (spec.exposure.empty()) throw ConfigError("empty exposure code");
  bool found = false;
  EventSequence out;
  out.subject_id = history.subject_id;
  for (const auto& e : history.events) {
    if (e.code == spec.exposure)
      found = true;
    else
      out.events.push_back(e);
  }
  if (!found)
    throw NotFoundError("exposure " + spec.exposure + " absent from the factual history");
  return out;
}

std::vector<std::vector<double>> twin_features(const Vqvae& vqvae,
                                               const std::vector<spdgeo::Mat>& matrices) {
  std::vector<std::vector<double>> out;
  out.reserve(matrices.size());
  for (const auto& m : matrices) out.push_back(vq_encode(vqvae, m)->value);
  return out;
}

double frechet_distance(const std::vector<std::vector<double>>& set_a,
                        const std::vector<std::vector<double>>& set_b) {
  if (set_a.size() < 2 || set_b.size() < 2)
    throw DataError("frechet distance needs >= 2 samples per set");
  std::vector<double> mu_a, mu_b;
  auto cov_a = sample_covariance(set_a, mu_a);
  auto cov_b = sample_covariance(set_b, mu_b);
  if (mu_a.size() != mu_b.size()) throw DimensionError("frechet feature widths differ");
  double dist = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i)
    dist += (mu_a[i] - mu_b[i]) * (mu_a[i] - mu_b[i]);
  for (int i = 0; i < cov_a.n; ++i) dist += cov_a.at(i, i) + cov_b.at(i, i);
  // tr((S_A S_B)^{1/2}) = tr((S_A^{1/2} S_B S_A^{1/2})^{1/2}), symmetric form
  auto ra = sym_sqrt(cov_a);
  spdgeo::Mat inner;
  inner.n = cov_a.n;
  inner.a.assign(cov_a.a.size(), 0.0);
  for (int i = 0; i < inner.n; ++i)
    for (int j = 0; j < inner.n; ++j) {
      double s = 0.0;
      for (int k = 0; k < inner.n; ++k)
        for (int l = 0; l < inner.n; ++l)
          s += ra.at(i, k) * cov_b.at(k, l) * ra.at(l, j);
      inner.at(i, j) = s;
    }
  // symmetrize against accumulated roundoff before the eigensolve
  for (int i = 0; i < inner.n; ++i)
    for (int j = i + 1; j < inner.n; ++j) {
      const double s = 0.5 * (inner.at(i, j) + inner.at(j, i));
      inner.at(i, j) = s;
      inner.at(j, i) = s;
    }
  std::vector<double> w;
  spdgeo::Mat v;
  spdgeo::jacobi_eigen(inner, w, v);
  for (double lam : w) dist -= 2.0 * std::sqrt(std::max(0.0, lam));
  return dist;
}

double mean_accuracy_topology(const std::vector<spdgeo::Mat>& generated,
                              const std::vector<spdgeo::Mat>& reference,
                              const std::vector<double>& thresholds) {
  if (generated.size() != reference.size() || generated.empty())
    throw DimensionError("topology accuracy needs matched non-empty sets");
  if (thresholds.empty()) throw ConfigError("no thresholds given");
  double acc_sum = 0.0;
  for (double th : thresholds) {
    long correct = 0, total = 0;
    for (std::size_t p = 0; p < generated.size(); ++p) {
      const auto& g = generated[p];
      const auto& r = reference[p];
      if (g.n != r.n) throw DimensionError("topology accuracy: matrix size mismatch");
      for (int i = 0; i < g.n; ++i)
        for (int j = i + 1; j < g.n; ++j) {
          const bool eg = std::fabs(g.at(i, j)) > th;
          const bool er = std::fabs(r.at(i, j)) > th;
          if (eg == er) ++correct;
          ++total;
        }
    }
    acc_sum += static_cast<double>(correct) / static_cast<double>(total);
  }
  return acc_sum / static_cast<double>(thresholds.size());
}

double pearson_matrices(const std::vector<spdgeo::Mat>& generated,
                        const std::vector<spdgeo::Mat>& reference) {
  if (generated.size() != reference.size() || generated.empty())
    throw DimensionError("pearson needs matched non-empty sets");
  double sum = 0.0;
  for (std::size_t p = 0; p < generated.size(); ++p) {
    const auto& g = generated[p];
    const auto& r = reference[p];
    if (g.n != r.n) throw DimensionError("pearson: matrix size mismatch");
    std::vector<double> x, y;
    for (int i = 0; i < g.n; ++i)
      for (int j = i; j < g.n; ++j) {
        x.push_back(g.at(i, j));
        y.push_back(r.at(i, j));
      }
    sum += pearson_r(x, y);
  }
  return sum / static_cast<double>(generated.size());
}

AteReport estimate_ate(const Cohort& cohort, const std::vector<std::vector<double>>& features,
                       const AteConfig& cfg, std::uint64_t seed) {
  const auto& subjects = cohort.subjects;
  if (features.size() != subjects.size())
    throw DimensionError("one feature row per subject required");
  if (subjects.empty()) throw DataError("empty cohort");
  if (!cohort.spec.has_value() || cohort.spec->pairs.empty())
    throw ConfigError("cohort has no configured pairs");
  const int d = static_cast<int>(features[0].size());
  for (const auto& f : features)
    if (static_cast<int>(f.size()) != d) throw DimensionError("ragged feature rows");

  AteReport report;
  const double cutoff_age = static_cast<double>(cohort.spec->measurement_age);
  for (const auto& pair : cohort.spec->pairs) {
    std::vector<int> exposed(subjects.size(), 0), outcome(subjects.size(), 0);
    long n_exp = 0, n_out = 0;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
      for (const auto& e : subjects[i].seq.events) {
        if (e.code == pair.exposure) exposed[i] = 1;
        if (e.code == pair.outcome && e.age > cutoff_age) outcome[i] = 1;
      }
      n_exp += exposed[i];
      n_out += outcome[i];
    }
    if (n_exp < cfg.min_exposed || subjects.size() - n_exp < cfg.min_exposed) {
      report.skipped.push_back(AteSkip{pair.exposure, pair.outcome, "exposure counts below floor"});
      continue;
    }
    if (n_out < cfg.min_outcome) {
      report.skipped.push_back(AteSkip{pair.exposure, pair.outcome, "outcome count below floor"});
      continue;
    }

    // 2-layer propensity MLP: features -> exposure logit
    ParamStore p;
    Rng rng(seed ^ std::hash<std::string>{}(pair.exposure + "->" + pair.outcome));
    p.create("w1", d, cfg.hidden, rng, 0.1);
    p.create_zero("b1", 1, cfg.hidden);
    p.create("w2", cfg.hidden, 2, rng, 0.1);
    p.create_zero("b2", 1, 2);
    Adam opt({cfg.lr});
    std::vector<std::size_t> order(subjects.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.integer(i)]);
      for (std::size_t idx : order) {
        p.zero_grad();
        auto x = tensor(1, d, features[idx]);
        auto h = relu(add_rows(matmul(x, p.get("w1")), p.get("b1")));
        auto logits = add_rows(matmul(h, p.get("w2")), p.get("b2"));
        auto loss = cross_entropy_with_logits(logits, {exposed[idx]});
        backward(loss);
        if (!std::isfinite(loss->scalar())) throw TrainError("non-finite propensity loss");
        opt.step(p);
      }
    }

    // clipped Hajek inverse-propensity estimate
    double w1_sum = 0, w1_y = 0, w0_sum = 0, w0_y = 0;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
      auto x = tensor(1, d, features[i]);
      auto h = relu(add_rows(matmul(x, p.get("w1")), p.get("b1")));
      auto logits = add_rows(matmul(h, p.get("w2")), p.get("b2"));
      double pi = 1.0 / (1.0 + std::exp(logits->value[0] - logits->value[1]));
      pi = std::clamp(pi, cfg.clip_lo, cfg.clip_hi);
      if (exposed[i]) {
        w1_sum += 1.0 / pi;
        w1_y += outcome[i] / pi;
      } else {
        w0_sum += 1.0 / (1.0 - pi);
        w0_y += outcome[i] / (1.0 - pi);
      }
    }
    AteRow row;
    row.exposure = pair.exposure;
    row.outcome = pair.outcome;
    row.n_exposed = n_exp;
    row.n_outcome = n_out;
    double exp_mean = 0, unexp_mean = 0;
    long unexp = 0;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
      if (exposed[i])
        exp_mean += outcome[i];
      else {
        unexp_mean += outcome[i];
        ++unexp;
      }
    }
    row.empirical = exp_mean / static_cast<double>(n_exp) -
                    unexp_mean / static_cast<double>(unexp);
    row.model = w1_y / w1_sum - w0_y / w0_sum;
    row.abs_error = std::fabs(row.empirical - row.model);
    report.rows.push_back(row);
  }
  if (!report.rows.empty()) {
    for (const auto& r : report.rows) report.mean_abs_error += r.abs_error;
    report.mean_abs_error /= static_cast<double>(report.rows.size());
  }
  return report;
}

double ate_error_vs_analytic(const AteReport& report, const StructuralModelSpec& spec) {
  if (report.rows.empty()) throw DataError("empty ATE report");
  double sum = 0.0;
  for (const auto& row : report.rows)
    sum += std::fabs(row.model - analytic_ate(spec, row.exposure, row.outcome));
  return sum / static_cast<double>(report.rows.size());
}

}  // namespace diffdt
