#include "diffdt/armodel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace diffdt {

namespace {

void check_config(const ArConfig& cfg) {
  if (cfg.d_phi <= 0 || cfg.n_layers <= 0 || cfg.n_heads <= 0 || cfg.max_len <= 0 ||
      cfg.d_mlp <= 0)
    throw ConfigError("ar model dimensions must be positive");
  if (cfg.d_phi % cfg.n_heads != 0)
    throw ConfigError("d_phi (" + std::to_string(cfg.d_phi) + ") not divisible by n_heads (" +
                      std::to_string(cfg.n_heads) + ")");
}

// Fixed sinusoidal features of age-in-years, one row per token.
Tensor age_sinusoid(const std::vector<int>& ages, int d) {
  auto out = tensor(static_cast<int>(ages.size()), d);
  for (std::size_t t = 0; t < ages.size(); ++t)
    for (int i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -2.0 * (i / 2) / d);
      const double x = ages[t] * freq;
      out->at(static_cast<int>(t), i) = (i % 2 == 0) ? std::sin(x) : std::cos(x);
    }
  return out;
}

Tensor block_forward(const ArModel& m, const std::string& prefix, const Tensor& x) {
  const auto& p = m.params;
  const int d = m.cfg.d_phi;
  const int h = m.cfg.n_heads;
  const int dh = d / h;
  auto normed = layer_norm(x, p.get(prefix + "ln1_g"), p.get(prefix + "ln1_b"));
  auto q = matmul(normed, p.get(prefix + "wq"));
  auto k = matmul(normed, p.get(prefix + "wk"));
  auto v = matmul(normed, p.get(prefix + "wv"));
  std::vector<Tensor> heads;
  heads.reserve(h);
  for (int i = 0; i < h; ++i) {
    auto qi = slice_cols(q, i * dh, dh);
    auto ki = slice_cols(k, i * dh, dh);
    auto vi = slice_cols(v, i * dh, dh);
    auto att = causal_softmax_rows(scale(matmul_nt(qi, ki), 1.0 / std::sqrt(dh)));
    heads.push_back(matmul(att, vi));
  }
  auto attn = matmul(concat_cols(heads), p.get(prefix + "wo"));
  auto mid = add(x, attn);
  auto normed2 = layer_norm(mid, p.get(prefix + "ln2_g"), p.get(prefix + "ln2_b"));
  auto hidden = relu(add_rows(matmul(normed2, p.get(prefix + "w1")), p.get(prefix + "b1")));
  auto mlp = add_rows(matmul(hidden, p.get(prefix + "w2")), p.get(prefix + "b2"));
  return add(mid, mlp);
}

}  // namespace

ArModel make_ar_model(const ArConfig& cfg, const Vocabulary& vocab, std::uint64_t seed) {
  check_config(cfg);
  ArModel m;
  m.cfg = cfg;
  m.vocab_size = vocab.size();
  m.vocab_hash = vocab.content_hash();
  Rng rng(seed);
  const int d = cfg.d_phi;
  const double s = cfg.init_scale;
  m.params.create("embed_icd", vocab.size(), d, rng, s);
  m.params.create("age_proj", d, d, rng, s);
  m.params.create_zero("age_bias", 1, d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string pf = "block" + std::to_string(l) + "/";
    for (const char* w : {"wq", "wk", "wv", "wo"}) m.params.create(pf + w, d, d, rng, s);
    m.params.create(pf + "w1", d, cfg.d_mlp, rng, s);
    m.params.create_zero(pf + "b1", 1, cfg.d_mlp);
    m.params.create(pf + "w2", cfg.d_mlp, d, rng, s);
    m.params.create_zero(pf + "b2", 1, d);
    for (const char* g : {"ln1_g", "ln2_g"}) {
      auto t = m.params.create_zero(pf + g, 1, d);
      std::fill(t->value.begin(), t->value.end(), 1.0);
    }
    for (const char* b : {"ln1_b", "ln2_b"}) m.params.create_zero(pf + b, 1, d);
  }
  {
    auto t = m.params.create_zero("lnf_g", 1, d);
    std::fill(t->value.begin(), t->value.end(), 1.0);
  }
  m.params.create_zero("lnf_b", 1, d);
  m.params.create("head_w1", d, d, rng, s);
  m.params.create_zero("head_b1", 1, d);
  m.params.create("head_w2", d, vocab.size(), rng, s);
  m.params.create_zero("head_b2", 1, vocab.size());
  return m;
}

Tensor ar_embed_input(const ArModel& m, const TokenStream& stream) {
  if (stream.tokens.empty()) throw DataError("empty token stream");
  if (stream.tokens.size() != stream.ages.size())
    throw DataError("token/age length mismatch");
  for (int t : stream.tokens)
    if (t < 0 || t >= m.vocab_size)
      throw VocabError("token index " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(m.vocab_size));
  auto tok = embedding_lookup(m.params.get("embed_icd"), stream.tokens);
  auto age = add_rows(matmul(age_sinusoid(stream.ages, m.cfg.d_phi), m.params.get("age_proj")),
                      m.params.get("age_bias"));
  return add(tok, age);
}

ArForward ar_forward(const ArModel& m, const TokenStream& stream) {
  if (static_cast<int>(stream.tokens.size()) > m.cfg.max_len)
    throw RangeError("stream length " + std::to_string(stream.tokens.size()) +
                     " exceeds max_len " + std::to_string(m.cfg.max_len));
  auto x = ar_embed_input(m, stream);
  for (int l = 0; l < m.cfg.n_layers; ++l)
    x = block_forward(m, "block" + std::to_string(l) + "/", x);
  auto hist = layer_norm(x, m.params.get("lnf_g"), m.params.get("lnf_b"));
  auto hidden = relu(add_rows(matmul(hist, m.params.get("head_w1")), m.params.get("head_b1")));
  auto logits = add_rows(matmul(hidden, m.params.get("head_w2")), m.params.get("head_b2"));
  return {logits, hist};
}

ArModel train_ar(const Cohort& cohort, const Vocabulary& vocab, const TemporalGrid& grid,
                 const ArConfig& cfg, const ArTrainConfig& train_cfg, std::uint64_t seed) {
  auto model = make_ar_model(cfg, vocab, seed);
  std::vector<TokenStream> streams;
  for (const auto& s : cohort.subjects) {
    auto ts = tokenize(s.seq, grid, vocab, cfg.max_len);
    if (ts.tokens.size() >= 2) streams.push_back(std::move(ts));
  }
  if (streams.empty()) throw DataError("no trainable streams (all shorter than 2 tokens)");
  Rng rng(seed ^ 0x7261696E5F6172ULL);
  Adam opt({train_cfg.lr});
  std::vector<std::size_t> order(streams.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.integer(i)]);
    double total = 0.0;
    for (std::size_t idx : order) {
      const auto& ts = streams[idx];
      const int t_len = static_cast<int>(ts.tokens.size());
      model.params.zero_grad();
      auto fwd = ar_forward(model, ts);
      std::vector<int> targets(ts.tokens.begin() + 1, ts.tokens.end());
      auto loss = cross_entropy_with_logits(slice_rows(fwd.logits, 0, t_len - 1), targets);
      backward(loss);
      const double v = loss->scalar();
      if (!std::isfinite(v))
        throw TrainError("non-finite AR loss at epoch " + std::to_string(epoch) +
                         ", subject stream " + std::to_string(idx));
      total += v;
      opt.step(model.params);
    }
    model.loss_curve.push_back(total / static_cast<double>(order.size()));
  }
  return model;
}

Tensor extract_history(const ArModel& model, const TokenStream& stream, int up_to) {
  if (up_to < 0 || up_to >= static_cast<int>(stream.tokens.size()))
    throw RangeError("history position " + std::to_string(up_to) + " outside stream of length " +
                     std::to_string(stream.tokens.size()));
  return slice_rows(ar_forward(model, stream).history, 0, up_to + 1);
}

TokenStream ar_sample(const ArModel& model, const TemporalGrid& grid, Rng& rng) {
  TokenStream out;
  out.tokens.push_back(kHealthyToken);
  out.ages.push_back(grid.age_min);
  for (int age = grid.age_min; age <= grid.age_max;) {
    if (static_cast<int>(out.tokens.size()) >= model.cfg.max_len) break;
    auto fwd = ar_forward(model, out);
    const int last = fwd.logits->rows - 1;
    std::vector<double> p(model.vocab_size);
    double mx = -1e300;
    for (int c = 0; c < model.vocab_size; ++c) mx = std::max(mx, fwd.logits->at(last, c));
    double z = 0.0;
    for (int c = 0; c < model.vocab_size; ++c) {
      p[c] = std::exp(fwd.logits->at(last, c) - mx);
      z += p[c];
    }
    double u = rng.uniform() * z;
    int pick = 0;
    for (int c = 0; c < model.vocab_size; ++c) {
      u -= p[c];
      if (u <= 0.0) {
        pick = c;
        break;
      }
    }
    if (pick == kMaskToken) pick = kHealthyToken;  // MASK never appears in data
    // healthy advances the year; a disease stays within the current year
    const int next_age = (pick == kHealthyToken) ? age + 1 : age;
    if (next_age > grid.age_max) break;
    out.tokens.push_back(pick);
    out.ages.push_back(next_age);
    age = next_age;
  }
  return out;
}

double auc_score(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc: score/label length mismatch");
  long n_pos = 0, n_neg = 0;
  for (int l : labels) (l ? ++n_pos : ++n_neg);
  if (n_pos == 0 || n_neg == 0)
    throw DataError("auc undefined without both positive and negative labels");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // average ranks over tie groups
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]]) rank_sum_pos += avg_rank;
    i = j;
  }
  return (rank_sum_pos - 0.5 * n_pos * (n_pos + 1)) / (static_cast<double>(n_pos) * n_neg);
}

ArEvalReport evaluate_auc_f1(const ArModel& model, const Cohort& val, const Vocabulary& vocab,
                             const TemporalGrid& grid) {
  if (vocab.content_hash() != model.vocab_hash)
    throw VocabError("validation vocabulary does not match the model's vocabulary");
  const int v_size = vocab.size();
  std::vector<std::vector<double>> scores(v_size);  // per disease, per instance
  std::vector<std::vector<int>> labels(v_size);
  std::vector<long> tp(v_size, 0), fp(v_size, 0), fn(v_size, 0);
  double ce = 0.0;
  long n_inst = 0, n_correct = 0;
  for (const auto& s : val.subjects) {
    auto ts = tokenize(s.seq, grid, vocab, model.cfg.max_len);
    if (ts.tokens.size() < 2) continue;
    auto fwd = ar_forward(model, ts);
    auto probs = softmax_rows(fwd.logits);
    for (int t = 0; t + 1 < static_cast<int>(ts.tokens.size()); ++t) {
      const int target = ts.tokens[static_cast<std::size_t>(t) + 1];
      ce -= std::log(std::max(probs->at(t, target), 1e-300));
      ++n_inst;
      int argmax = 0;
      for (int c = 1; c < v_size; ++c)
        if (probs->at(t, c) > probs->at(t, argmax)) argmax = c;
      if (argmax == target) ++n_correct;
      for (int c = kMaskToken + 1; c < v_size; ++c) {
        scores[c].push_back(probs->at(t, c));
        labels[c].push_back(target == c ? 1 : 0);
      }
      if (argmax > kMaskToken) (argmax == target ? ++tp[argmax] : ++fp[argmax]);
      if (target > kMaskToken && argmax != target) ++fn[target];
    }
  }
  if (n_inst == 0) throw DataError("validation cohort has no scorable positions");
  ArEvalReport report;
  report.cross_entropy_nats = ce / static_cast<double>(n_inst);
  report.argmax_accuracy = static_cast<double>(n_correct) / static_cast<double>(n_inst);
  double auc_sum = 0.0, f1_sum = 0.0;
  for (int c = kMaskToken + 1; c < v_size; ++c) {
    const long n_pos = std::accumulate(labels[c].begin(), labels[c].end(), 0L);
    if (n_pos == 0) {
      report.excluded.push_back(vocab.code(c));
      continue;
    }
    DiseaseMetric dm;
    dm.code = vocab.code(c);
    dm.n_pos = n_pos;
    dm.auc = auc_score(scores[c], labels[c]);
    const double prec = tp[c] + fp[c] > 0
                            ? static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fp[c])
                            : 0.0;
    const double rec = static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fn[c]);
    dm.f1 = (prec + rec > 0.0) ? 2.0 * prec * rec / (prec + rec) : 0.0;
    auc_sum += dm.auc;
    f1_sum += dm.f1;
    report.per_disease.push_back(std::move(dm));
  }
  if (report.per_disease.empty())
    throw DataError("no disease has a positive label in the validation cohort");
  report.macro_auc = auc_sum / static_cast<double>(report.per_disease.size());
  report.macro_f1 = f1_sum / static_cast<double>(report.per_disease.size());
  return report;
}

void save_ar_model(const ArModel& model, const std::string& path) {
  save_checkpoint(path, model.params, model.vocab_hash);
}

ArModel load_ar_model(const std::string& path, const ArConfig& cfg) {
  check_config(cfg);
  ArModel m;
  m.cfg = cfg;
  m.vocab_hash = load_checkpoint_into_new(path, m.params);
  m.vocab_size = m.params.get("embed_icd")->rows;
  // checkpoints do not carry the per-epoch curve; a sentinel restores the
  // trained state that downstream inference checks
  m.loss_curve = {0.0};
  return m;
}

}  // namespace diffdt
