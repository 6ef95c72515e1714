// Pipeline command-line entry point: cohort generation, staged training, twin
// generation, mediated inference, counterfactuals, evaluation, and benchmarks.
// Exit codes: 0 success, 2 config error, 3 data error, 4 missing dependency.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "diffdt/armodel.hpp"
#include "diffdt/choleskyldm.hpp"
#include "diffdt/cohort.hpp"
#include "diffdt/common.hpp"
#include "diffdt/mediation.hpp"
#include "diffdt/spdgeo.hpp"
#include "diffdt/spdvqvae.hpp"
#include "diffdt/tabdiff.hpp"
#include "diffdt/tokenizer.hpp"

namespace fs = std::filesystem;
using namespace diffdt;

namespace {

struct DependencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Key-value config with a closed schema.

const std::map<std::string, std::string>& config_defaults() {
  static const std::map<std::string, std::string> defaults = {
      {"cohort.n_subjects", "200"},
      {"cohort.age_min", "40"},
      {"cohort.age_max", "70"},
      {"cohort.latent_dim", "4"},
      {"cohort.n_codes", "12"},
      {"cohort.measurement_age", "55"},
      {"cohort.conn_dim", "16"},
      {"cohort.conn_rank", "0"},
      {"cohort.organs", "heart:3:0.2"},
      {"cohort.pair_deltas", ""},
      {"cohort.two_class", "false"},
      {"cohort.class_trait_shift", "0"},
      {"cohort.class_conn_shift", "0"},
      {"cohort.class_hazard_shift", "0"},
      {"cohort.hazard_bias", "-3.0"},
      {"cohort.hazard_w_scale", "0.7"},
      {"cohort.exposure_confounding", "0.8"},
      {"cohort.outcome_trait_scale", "0.8"},
      {"cohort.outcome_bias", "-2.2"},
      {"cohort.ate_organ", ""},
      {"split.ratio", "0.8"},
      {"ar.d_phi", "32"},
      {"ar.n_layers", "2"},
      {"ar.n_heads", "2"},
      {"ar.d_mlp", "64"},
      {"ar.max_len", "64"},
      {"ar.epochs", "10"},
      {"ar.lr", "1e-3"},
      {"vqvae.n_q", "4"},
      {"vqvae.d", "16"},
      {"vqvae.n_code", "32"},
      {"vqvae.beta", "0.25"},
      {"vqvae.h1", "128"},
      {"vqvae.h2", "96"},
      {"vqvae.h3", "64"},
      {"vqvae.epochs", "30"},
      {"vqvae.lr", "1e-3"},
      {"ldm.t_steps", "100"},
      {"ldm.c_hid", "16"},
      {"ldm.w1", "64"},
      {"ldm.w2", "96"},
      {"ldm.w3", "128"},
      {"ldm.t_emb", "16"},
      {"ldm.epochs", "60"},
      {"ldm.lr", "1e-3"},
      {"tab.window", "4"},
      {"tab.sigma_max", "10"},
      {"tab.d_model", "32"},
      {"tab.n_layers", "2"},
      {"tab.n_heads", "4"},
      {"tab.phi_hidden", "24"},
      {"tab.cond_dropout", "0.1"},
      {"tab.epochs", "40"},
      {"tab.lr", "1e-3"},
      {"head.d_model", "32"},
      {"head.n_layers", "6"},
      {"head.n_heads", "8"},
      {"head.conn_layers", "2"},
      {"head.trait_bin_max", "10"},
      {"head.epochs", "10"},
      {"head.lr", "1e-3"},
      {"gen.steps", "50"},
      {"gen.omega", "0.5"},
      {"ate.min_exposed", "5"},
      {"ate.min_outcome", "5"},
      {"ate.hidden", "16"},
      {"ate.epochs", "60"},
      {"ate.lr", "1e-2"},
  };
  return defaults;
}

using ConfigMap = std::map<std::string, std::string>;

ConfigMap load_config(const std::string& path) {
  ConfigMap cfg = config_defaults();
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (config_defaults().find(key) == config_defaults().end())
      throw ConfigError("unknown config key: " + key);
    cfg[key] = value;
  }
  return cfg;
}

int cfg_int(const ConfigMap& c, const std::string& k) {
  try {
    return std::stoi(c.at(k));
  } catch (const std::exception&) {
    throw ConfigError("config key " + k + " is not an integer: " + c.at(k));
  }
}

double cfg_double(const ConfigMap& c, const std::string& k) {
  try {
    return std::stod(c.at(k));
  } catch (const std::exception&) {
    throw ConfigError("config key " + k + " is not a number: " + c.at(k));
  }
}

bool cfg_bool(const ConfigMap& c, const std::string& k) {
  const std::string& v = c.at(k);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key " + k + " is not a boolean: " + v);
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

CohortConfig cohort_config(const ConfigMap& c) {
  CohortConfig cc;
  cc.n_subjects = cfg_int(c, "cohort.n_subjects");
  cc.age_min = cfg_int(c, "cohort.age_min");
  cc.age_max = cfg_int(c, "cohort.age_max");
  cc.latent_dim = cfg_int(c, "cohort.latent_dim");
  cc.n_codes = cfg_int(c, "cohort.n_codes");
  cc.measurement_age = cfg_int(c, "cohort.measurement_age");
  cc.conn_dim = cfg_int(c, "cohort.conn_dim");
  cc.conn_rank = cfg_int(c, "cohort.conn_rank");
  cc.hazard_bias = cfg_double(c, "cohort.hazard_bias");
  cc.hazard_w_scale = cfg_double(c, "cohort.hazard_w_scale");
  cc.exposure_confounding = cfg_double(c, "cohort.exposure_confounding");
  cc.outcome_trait_scale = cfg_double(c, "cohort.outcome_trait_scale");
  cc.outcome_bias = cfg_double(c, "cohort.outcome_bias");
  cc.ate_organ = c.at("cohort.ate_organ");
  cc.two_class = cfg_bool(c, "cohort.two_class");
  cc.class_trait_shift = cfg_double(c, "cohort.class_trait_shift");
  cc.class_hazard_shift = cfg_double(c, "cohort.class_hazard_shift");
  cc.class_conn_shift = cfg_double(c, "cohort.class_conn_shift");
  for (const auto& spec : split_list(c.at("cohort.organs"), ',')) {
    auto parts = split_list(spec, ':');
    if (parts.size() != 3)
      throw ConfigError("cohort.organs entry must be name:dim:sigma, got " + spec);
    cc.organs.push_back({parts[0], std::stoi(parts[1]), std::stod(parts[2])});
  }
  for (const auto& d : split_list(c.at("cohort.pair_deltas"), ','))
    cc.pair_deltas.push_back(std::stod(d));
  return cc;
}

ArConfig ar_config(const ConfigMap& c) {
  ArConfig a;
  a.d_phi = cfg_int(c, "ar.d_phi");
  a.n_layers = cfg_int(c, "ar.n_layers");
  a.n_heads = cfg_int(c, "ar.n_heads");
  a.d_mlp = cfg_int(c, "ar.d_mlp");
  a.max_len = cfg_int(c, "ar.max_len");
  return a;
}

VqvaeConfig vqvae_config(const ConfigMap& c) {
  VqvaeConfig v;
  v.n = cfg_int(c, "cohort.conn_dim");
  v.n_q = cfg_int(c, "vqvae.n_q");
  v.d = cfg_int(c, "vqvae.d");
  v.n_code = cfg_int(c, "vqvae.n_code");
  v.beta = cfg_double(c, "vqvae.beta");
  v.enc_h1 = cfg_int(c, "vqvae.h1");
  v.enc_h2 = cfg_int(c, "vqvae.h2");
  v.enc_h3 = cfg_int(c, "vqvae.h3");
  return v;
}

LdmConfig ldm_config(const ConfigMap& c) {
  LdmConfig l;
  l.n_q = cfg_int(c, "vqvae.n_q");
  l.d = cfg_int(c, "vqvae.d");
  l.d_phi = cfg_int(c, "ar.d_phi");
  l.c_hid = cfg_int(c, "ldm.c_hid");
  l.w1 = cfg_int(c, "ldm.w1");
  l.w2 = cfg_int(c, "ldm.w2");
  l.w3 = cfg_int(c, "ldm.w3");
  l.t_emb = cfg_int(c, "ldm.t_emb");
  return l;
}

TabdiffConfig tab_config(const ConfigMap& c, int d_organ, int vocab) {
  TabdiffConfig t;
  t.d_organ = d_organ;
  t.n_cat = cfg_int(c, "tab.window");
  t.vocab = vocab;
  t.sigma_max = cfg_double(c, "tab.sigma_max");
  t.d_model = cfg_int(c, "tab.d_model");
  t.n_layers = cfg_int(c, "tab.n_layers");
  t.n_heads = cfg_int(c, "tab.n_heads");
  t.phi_hidden = cfg_int(c, "tab.phi_hidden");
  t.cond_dropout = cfg_double(c, "tab.cond_dropout");
  return t;
}

HeadConfig head_config(const ConfigMap& c, int vocab, int d_organ, int conn_n) {
  HeadConfig h;
  h.vocab = vocab;
  h.d_model = cfg_int(c, "head.d_model");
  h.n_layers = cfg_int(c, "head.n_layers");
  h.n_heads = cfg_int(c, "head.n_heads");
  h.conn_layers = cfg_int(c, "head.conn_layers");
  h.trait_bin_max = cfg_int(c, "head.trait_bin_max");
  h.d_organ = d_organ;
  h.conn_n = conn_n;
  return h;
}

// ---------------------------------------------------------------------------
// Manifest and hashing.

std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot hash missing file " + p.string());
  std::uint64_t h = 1469598103934665603ULL;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
    if (!in) break;
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return out;
}

void manifest_append(const fs::path& exp, const std::string& stage, std::uint64_t seed,
                     const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs,
                     double seconds) {
  fs::create_directories(exp);
  std::ofstream out(exp / "manifest.txt", std::ios::app);
  out << "stage=" << stage << " seed=" << seed << " wall_s=" << seconds;
  for (const auto& p : inputs) out << " in:" << p.filename().string() << "=" << file_hash(p);
  for (const auto& p : outputs) out << " out:" << p.filename().string() << "=" << file_hash(p);
  out << "\n";
}

void write_resolved(const fs::path& exp, const std::string& stage, const ConfigMap& cfg) {
  fs::create_directories(exp);
  std::ofstream out(exp / (stage + ".resolved.cfg"));
  for (const auto& [k, v] : cfg) out << k << " = " << v << "\n";
}

void require_dependency(const fs::path& p, const std::string& stage) {
  if (!fs::exists(p))
    throw DependencyError("stage " + stage + " requires missing checkpoint " + p.string());
}

void write_loss_curve(const fs::path& p, const std::vector<double>& curve) {
  std::ofstream out(p);
  out.precision(10);
  for (double v : curve) out << v << "\n";
}

class StageTimer {
 public:
  StageTimer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// Shared pipeline helpers.

Vocabulary load_vocab_checked(const fs::path& exp, const std::string& stage) {
  const fs::path p = exp / "vocab.txt";
  require_dependency(p, stage);
  return Vocabulary::load(p.string());
}

Cohort load_cohort_dir(const std::string& dir) {
  if (!fs::exists(fs::path(dir)))
    throw DataError("cohort directory " + dir + " does not exist");
  return load_cohort(dir);
}

TemporalGrid cohort_grid(const Cohort& c) { return TemporalGrid{c.age_min, c.age_max}; }

// Tokens at ages <= age, most recent `window`, healthy-padded in front.
std::vector<int> recent_window(const TokenStream& ts, double age, int window) {
  std::vector<int> recent;
  for (std::size_t i = 0; i < ts.tokens.size(); ++i)
    if (ts.ages[i] <= static_cast<int>(age)) recent.push_back(ts.tokens[i]);
  std::vector<int> out(static_cast<std::size_t>(window), kHealthyToken);
  const std::size_t take = std::min<std::size_t>(recent.size(), window);
  for (std::size_t i = 0; i < take; ++i)
    out[window - take + i] = recent[recent.size() - take + i];
  return out;
}

// History embedding row at the last token with age <= cutoff.
Tensor history_row(const ArModel& ar, const TokenStream& ts, double cutoff) {
  int last = -1;
  for (std::size_t i = 0; i < ts.tokens.size(); ++i)
    if (ts.ages[i] <= static_cast<int>(cutoff)) last = static_cast<int>(i);
  if (last < 0) throw DataError("no history before the cutoff age");
  auto hist = extract_history(ar, ts, last);
  return slice_rows(hist, hist->rows - 1, 1);
}

int organ_dim(const Cohort& cohort, const std::string& organ) {
  for (const auto& s : cohort.subjects) {
    auto it = s.tabular.find(organ);
    if (it != s.tabular.end()) return static_cast<int>(it->second.traits.size());
  }
  throw DataError("no subject carries organ " + organ);
}

// Next event strictly after the biomarker measurement age; healthy otherwise.
int next_code_after(const Subject& s, const Vocabulary& vocab, double age) {
  for (const auto& e : s.seq.events)
    if (e.age > age) return vocab.index(e.code);
  return kHealthyToken;
}

void save_trait_stats(const TraitStats& st, const fs::path& p) {
  std::ofstream out(p);
  out.precision(17);
  out << "mean";
  for (double v : st.mean) out << " " << v;
  out << "\nstddev";
  for (double v : st.stddev) out << " " << v;
  out << "\n";
}

TraitStats load_trait_stats(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot read trait stats " + p.string());
  TraitStats st;
  std::string line, tag;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    ss >> tag;
    double v;
    std::vector<double>* dst = tag == "mean" ? &st.mean : (tag == "stddev" ? &st.stddev : nullptr);
    if (!dst) throw DataError("bad trait stats line: " + line);
    while (ss >> v) dst->push_back(v);
  }
  if (st.mean.size() != st.stddev.size() || st.mean.empty())
    throw DataError("malformed trait stats file " + p.string());
  return st;
}

void write_matrix(std::ostream& out, const spdgeo::Mat& m) {
  out.precision(10);
  out << m.n << "\n";
  for (int i = 0; i < m.n; ++i) {
    for (int j = 0; j < m.n; ++j) out << (j ? " " : "") << m.at(i, j);
    out << "\n";
  }
}

std::vector<spdgeo::Mat> conn_matrices(const Cohort& cohort) {
  std::vector<spdgeo::Mat> out;
  for (const auto& s : cohort.subjects)
    if (s.connectivity.has_value()) out.push_back(s.connectivity->matrix);
  if (out.empty()) throw DataError("cohort has no connectivity observations");
  return out;
}

// ---------------------------------------------------------------------------
// Commands.

struct CommonArgs {
  std::string config;
  std::string cohort_dir;
  std::string out = "exp";
  std::string organ = "heart";
  std::uint64_t seed = 1;
  int steps = 0;      // 0: take gen.steps from config
  double omega = -1;  // <0: take gen.omega from config
  int workers = 1;
};

int cmd_cohort_gen(const CommonArgs& a) {
  StageTimer timer;
  auto cfg = load_config(a.config);
  auto cohort = generate_synthetic_cohort(cohort_config(cfg), a.seed);
  fs::create_directories(a.out);
  save_cohort(cohort, a.out);
  write_resolved(a.out, "cohort_gen", cfg);
  std::vector<fs::path> outputs;
  for (const char* f : {"events.txt", "tabular.txt", "matrices.spdm", "spec.txt", "meta.txt"})
    if (fs::exists(fs::path(a.out) / f)) outputs.push_back(fs::path(a.out) / f);
  manifest_append(a.out, "cohort_gen", a.seed, {}, outputs, timer.seconds());
  std::cout << "cohort gen: " << cohort.subjects.size() << " subjects -> " << a.out << "\n";
  return 0;
}

int cmd_cohort_split(const CommonArgs& a, double ratio) {
  StageTimer timer;
  auto cohort = load_cohort_dir(a.cohort_dir);
  auto [train, val] = split_train_val(cohort, ratio, a.seed);
  save_cohort(train, (fs::path(a.out) / "train").string());
  save_cohort(val, (fs::path(a.out) / "val").string());
  manifest_append(a.out, "cohort_split", a.seed, {},
                  {fs::path(a.out) / "train" / "events.txt", fs::path(a.out) / "val" / "events.txt"},
                  timer.seconds());
  std::cout << "cohort split: " << train.subjects.size() << " train / " << val.subjects.size()
            << " val -> " << a.out << "\n";
  return 0;
}

int cmd_train_ar(const CommonArgs& a) {
  StageTimer timer;
  auto cfg = load_config(a.config);
  auto cohort = load_cohort_dir(a.cohort_dir);
  auto vocab = Vocabulary::build(cohort);
  ArTrainConfig tc{cfg_int(cfg, "ar.epochs"), cfg_double(cfg, "ar.lr")};
  auto model = train_ar(cohort, vocab, cohort_grid(cohort), ar_config(cfg), tc, a.seed);
  fs::create_directories(a.out);
  const fs::path vocab_path = fs::path(a.out) / "vocab.txt";
  const fs::path ckpt = fs::path(a.out) / "ar.ddck";
  vocab.save(vocab_path.string());
  save_ar_model(model, ckpt.string());
  write_loss_curve(fs::path(a.out) / "ar_loss.txt", model.loss_curve);
  write_resolved(a.out, "train_ar", cfg);
  manifest_append(a.out, "train_ar", a.seed, {fs::path(a.cohort_dir) / "events.txt"},
                  {ckpt, vocab_path}, timer.seconds());
  std::cout << "train ar: final loss " << model.loss_curve.back() << " -> " << ckpt.string()
            << "\n";
  return 0;
}

int cmd_train_vqvae(const CommonArgs& a) {
  StageTimer timer;
  auto cfg = load_config(a.config);
  auto cohort = load_cohort_dir(a.cohort_dir);
  auto mats = conn_matrices(cohort);
  VqTrainConfig tc;
  tc.epochs = cfg_int(cfg, "vqvae.epochs");
  tc.lr = cfg_double(cfg, "vqvae.lr");
  VqTrainReport report;
  auto model = train_vqvae(mats, vqvae_config(cfg), tc, a.seed, &report);
  fs::create_directories(a.out);
  const fs::path ckpt = fs::path(a.out) / "vqvae.ddck";
  save_vqvae(model, ckpt.string());
  write_loss_curve(fs::path(a.out) / "vqvae_loss.txt", report.total);
  write_resolved(a.out, "train_vqvae", cfg);
  manifest_append(a.out, "train_vqvae", a.seed, {fs::path(a.cohort_dir) / "matrices.spdm"},
                  {ckpt}, timer.seconds());
  std::cout << "train vqvae: final loss " << report.total.back() << ", recon pearson "
            << vq_reconstruction_pearson(model, mats) << " -> " << ckpt.string() << "\n";
  return 0;
}

int cmd_train_ldm(const CommonArgs& a) {
  StageTimer timer;
  auto cfg = load_config(a.config);
  const fs::path ar_ckpt = fs::path(a.out) / "ar.ddck";
  const fs::path vq_ckpt = fs::path(a.out) / "vqvae.ddck";
  require_dependency(ar_ckpt, "ldm");
  require_dependency(vq_ckpt, "ldm");
  auto cohort = load_cohort_dir(a.cohort_dir);
  auto vocab = load_vocab_checked(a.out, "ldm");
  auto ar = load_ar_model(ar_ckpt.string(), ar_config(cfg));
  auto vq = load_vqvae(vq_ckpt.string(), vqvae_config(cfg));
  auto grid = cohort_grid(cohort);
  // twins are trained only at the age each subject has ground truth
  std::vector<LdmPair> pairs;
  for (const auto& s : cohort.subjects) {
    if (!s.connectivity.has_value()) continue;
    auto ts = tokenize(s.seq, grid, vocab, ar.cfg.max_len);
    auto z = vq_quantize(vq_encode(vq, s.connectivity->matrix), vq.params.get("codebook"));
    pairs.push_back({z.vectors, history_row(ar, ts, s.connectivity->measured_at_age)});
  }
  LdmTrainConfig tc{cfg_int(cfg, "ldm.epochs"), cfg_double(cfg, "ldm.lr")};
  auto schedule = NoiseSchedule::linear(cfg_int(cfg, "ldm.t_steps"));
  auto model = train_ldm(pairs, ldm_config(cfg), schedule, tc, a.seed);
  const fs::path ckpt = fs::path(a.out) / "ldm.ddck";
  save_ldm(model, ckpt.string());
  write_loss_curve(fs::path(a.out) / "ldm_loss.txt", model.loss_curve);
  write_resolved(a.out, "train_ldm", cfg);
  manifest_append(a.out, "train_ldm", a.seed, {ar_ckpt, vq_ckpt}, {ckpt}, timer.seconds());
  std::cout << "train ldm: " << pairs.size() << " pairs, final loss " << model.loss_curve.back()
            << " -> " << ckpt.string() << "\n";
  return 0;
}

int cmd_train_tabdiff(const CommonArgs& a) {
  StageTimer timer;
  auto cfg = load_config(a.config);
  const fs::path ar_ckpt = fs::path(a.out) / "ar.ddck";
  require_dependency(ar_ckpt, "tabdiff");  // vocabulary comes from the ar stage
  auto cohort = load_cohort_dir(a.cohort_dir);
  auto vocab = load_vocab_checked(a.out, "tabdiff");
  auto grid = cohort_grid(cohort);
  std::vector<std::vector<double>> traits;
  for (const auto& s : cohort.subjects) {
    auto it = s.tabular.find(a.organ);
    if (it != s.tabular.end()) traits.push_back(it->second.traits);
  }
  if (traits.empty()) throw DataError("no subject carries organ " + a.organ);
  auto stats = fit_trait_stats(traits);
  auto rows = build_tab_rows(cohort, a.organ, vocab, grid, cfg_int(cfg, "tab.window"), stats);
  TabTrainConfig tc{cfg_int(cfg, "tab.epochs"), cfg_double(cfg, "tab.lr")};
  auto model = train_tabdiff(
      rows, tab_config(cfg, static_cast<int>(traits[0].size()), vocab.size()), tc, a.seed);
  const fs::path ckpt = fs::path(a.out) / ("tabdiff_" + a.organ + ".ddck");
  const fs::path stats_path = fs::path(a.out) / ("stats_" + a.organ + ".txt");
  save_tabdiff(model, ckpt.string());
  save_trait_stats(stats, stats_path);
  write_loss_curve(fs::path(a.out) / ("tabdiff_" + a.organ + "_loss.txt"), model.loss_curve);
  write_resolved(a.out, "train_tabdiff_" + a.organ, cfg);
  manifest_append(a.out, "train_tabdiff_" + a.organ, a.seed,
                  {fs::path(a.cohort_dir) / "tabular.txt"}, {ckpt, stats_path}, timer.seconds());
  std::cout << "train tabdiff[" << a.organ << "]: " << rows.size() << " rows, final loss "
            << model.loss_curve.back() << " -> " << ckpt.string() << "\n";
  return 0;
}

int cmd_train_head(const CommonArgs& a, const std::string& twin_source) {
  StageTimer timer;
  auto cfg = load_config(a.config);
  const fs::path ar_ckpt = fs::path(a.out) / "ar.ddck";
  require_dependency(ar_ckpt, "head");
  auto cohort = load_cohort_dir(a.cohort_dir);
  auto vocab = load_vocab_checked(a.out, "head");
  auto grid = cohort_grid(cohort);
  HeadTrainConfig tc{cfg_int(cfg, "head.epochs"), cfg_double(cfg, "head.lr")};
  PredictiveHead head;
  std::vector<fs::path> inputs{ar_ckpt};

  if (a.organ == "brain") {
    const fs::path vq_ckpt = fs::path(a.out) / "vqvae.ddck";
    require_dependency(vq_ckpt, "head");
    auto vq = load_vqvae(vq_ckpt.string(), vqvae_config(cfg));
    std::vector<ConnHeadPair> pairs;
    if (twin_source == "generated") {
      const fs::path ldm_ckpt = fs::path(a.out) / "ldm.ddck";
      require_dependency(ldm_ckpt, "head");
      inputs.push_back(ldm_ckpt);
      auto ar = load_ar_model(ar_ckpt.string(), ar_config(cfg));
      auto ldm = load_ldm(ldm_ckpt.string(), ldm_config(cfg),
                          NoiseSchedule::linear(cfg_int(cfg, "ldm.t_steps")));
      long i = 0;
      for (const auto& s : cohort.subjects) {
        if (!s.connectivity.has_value()) continue;
        auto ts = tokenize(s.seq, grid, vocab, ar.cfg.max_len);
        Rng rng(a.seed ^ static_cast<std::uint64_t>(++i) * 0x9E3779B97F4A7C15ULL);
        auto twin = ldm_sample(ldm, vq,
                               history_row(ar, ts, s.connectivity->measured_at_age), rng);
        pairs.push_back({twin.matrix,
                         next_code_after(s, vocab, s.connectivity->measured_at_age)});
      }
    } else {
      for (const auto& s : cohort.subjects) {
        if (!s.connectivity.has_value()) continue;
        pairs.push_back({s.connectivity->matrix,
                         next_code_after(s, vocab, s.connectivity->measured_at_age)});
      }
    }
    if (pairs.empty()) throw DataError("no connectivity training pairs");
    head = finetune_conn_head(
        pairs, head_config(cfg, vocab.size(), 0, pairs[0].matrix.n), tc, a.seed);
  } else {
    const fs::path stats_path = fs::path(a.out) / ("stats_" + a.organ + ".txt");
    std::vector<TabHeadPair> pairs;
    TraitStats stats;
    if (twin_source == "generated") {
      const fs::path tab_ckpt = fs::path(a.out) / ("tabdiff_" + a.organ + ".ddck");
      require_dependency(tab_ckpt, "head");
      require_dependency(stats_path, "head");
      inputs.push_back(tab_ckpt);
      stats = load_trait_stats(stats_path);
      auto gen = load_tabdiff(tab_ckpt.string(),
                              tab_config(cfg, static_cast<int>(stats.mean.size()), vocab.size()));
      long i = 0;
      for (const auto& s : cohort.subjects) {
        auto it = s.tabular.find(a.organ);
        if (it == s.tabular.end()) continue;
        auto ts = tokenize(s.seq, grid, vocab, 1 << 20);
        auto cond = recent_window(ts, it->second.measured_at_age, cfg_int(cfg, "tab.window"));
        auto traits = generate_tabular(gen, cond, cfg_int(cfg, "gen.steps"),
                                       cfg_double(cfg, "gen.omega"), a.seed + (++i));
        pairs.push_back({traits, next_code_after(s, vocab, it->second.measured_at_age)});
      }
    } else {
      std::vector<std::vector<double>> traits;
      for (const auto& s : cohort.subjects) {
        auto it = s.tabular.find(a.organ);
        if (it != s.tabular.end()) traits.push_back(it->second.traits);
      }
      if (traits.empty()) throw DataError("no subject carries organ " + a.organ);
      stats = fit_trait_stats(traits);
      for (const auto& s : cohort.subjects) {
        auto it = s.tabular.find(a.organ);
        if (it == s.tabular.end()) continue;
        pairs.push_back({normalize_traits(it->second.traits, stats),
                         next_code_after(s, vocab, it->second.measured_at_age)});
      }
    }
    if (pairs.empty()) throw DataError("no tabular training pairs");
    head = finetune_tab_head(
        pairs, head_config(cfg, vocab.size(), static_cast<int>(pairs[0].traits.size()), 0), tc,
        a.seed);
  }
  const fs::path ckpt = fs::path(a.out) / ("head_" + a.organ + ".ddck");
  save_head(head, ckpt.string());
  write_loss_curve(fs::path(a.out) / ("head_" + a.organ + "_loss.txt"), head.loss_curve);
  write_resolved(a.out, "train_head_" + a.organ, cfg);
  manifest_append(a.out, "train_head_" + a.organ, a.seed, inputs, {ckpt}, timer.seconds());
  std::cout << "train head[" << a.organ << "]: final loss " << head.loss_curve.back() << " -> "
            << ckpt.string() << "\n";
  return 0;
}

int cmd_generate(const CommonArgs& a) {
  StageTimer timer;
  auto cfg = load_config(a.config);
  auto cohort = load_cohort_dir(a.cohort_dir);
  auto vocab = load_vocab_checked(a.out, "generate");
  auto grid = cohort_grid(cohort);
  const int steps = a.steps > 0 ? a.steps : cfg_int(cfg, "gen.steps");
  const double omega = a.omega >= 0 ? a.omega : cfg_double(cfg, "gen.omega");
  fs::path out_file;
  if (a.organ == "brain") {
    const fs::path ar_ckpt = fs::path(a.out) / "ar.ddck";
    const fs::path vq_ckpt = fs::path(a.out) / "vqvae.ddck";
    const fs::path ldm_ckpt = fs::path(a.out) / "ldm.ddck";
    for (const auto& p : {ar_ckpt, vq_ckpt, ldm_ckpt}) require_dependency(p, "generate");
    auto ar = load_ar_model(ar_ckpt.string(), ar_config(cfg));
    auto vq = load_vqvae(vq_ckpt.string(), vqvae_config(cfg));
    auto ldm = load_ldm(ldm_ckpt.string(), ldm_config(cfg),
                        NoiseSchedule::linear(cfg_int(cfg, "ldm.t_steps")));
    out_file = fs::path(a.out) / "twins_brain.txt";
    std::ofstream out(out_file);
    long i = 0;
    for (const auto& s : cohort.subjects) {
      if (!s.connectivity.has_value()) continue;
      auto ts = tokenize(s.seq, grid, vocab, ar.cfg.max_len);
      Rng rng(a.seed ^ static_cast<std::uint64_t>(++i) * 0x9E3779B97F4A7C15ULL);
      auto twin =
          ldm_sample(ldm, vq, history_row(ar, ts, s.connectivity->measured_at_age), rng);
      out << "subject " << s.seq.subject_id << "\n";
      write_matrix(out, twin.matrix);
    }
  } else {
    const fs::path tab_ckpt = fs::path(a.out) / ("tabdiff_" + a.organ + ".ddck");
    const fs::path stats_path = fs::path(a.out) / ("stats_" + a.organ + ".txt");
    require_dependency(tab_ckpt, "generate");
    require_dependency(stats_path, "generate");
    auto stats = load_trait_stats(stats_path);
    auto gen = load_tabdiff(tab_ckpt.string(),
                            tab_config(cfg, static_cast<int>(stats.mean.size()), vocab.size()));
    out_file = fs::path(a.out) / ("twins_" + a.organ + ".txt");
    std::ofstream out(out_file);
    out.precision(10);
    long i = 0;
    for (const auto& s : cohort.subjects) {
      auto it = s.tabular.find(a.organ);
      if (it == s.tabular.end()) continue;
      auto ts = tokenize(s.seq, grid, vocab, 1 << 20);
      auto cond = recent_window(ts, it->second.measured_at_age, cfg_int(cfg, "tab.window"));
      auto z = generate_tabular(gen, cond, steps, omega, a.seed + (++i));
      auto traits = denormalize_traits(z, stats);
      out << "subject " << s.seq.subject_id;
      for (double v : traits) out << " " << v;
      out << "\n";
    }
  }
  manifest_append(a.out, "generate_" + a.organ, a.seed, {}, {out_file}, timer.seconds());
  std::cout << "generate[" << a.organ << "] -> " << out_file.string() << "\n";
  return 0;
}

const Subject& find_subject(const Cohort& cohort, long id) {
  for (const auto& s : cohort.subjects)
    if (s.seq.subject_id == id) return s;
  throw NotFoundError("subject " + std::to_string(id) + " not in cohort");
}

int cmd_infer(const CommonArgs& a, long subject_id, double age) {
  auto cfg = load_config(a.config);
  auto cohort = load_cohort_dir(a.cohort_dir);
  auto vocab = load_vocab_checked(a.out, "infer");
  auto grid = cohort_grid(cohort);
  const auto& subject = find_subject(cohort, subject_id);
  if (age < grid.age_min || age > grid.age_max)
    throw ConfigError("cutoff age outside the cohort grid");
  const fs::path head_ckpt = fs::path(a.out) / ("head_" + a.organ + ".ddck");
  require_dependency(head_ckpt, "infer");
  std::vector<double> dist;
  if (a.organ == "brain") {
    const fs::path ar_ckpt = fs::path(a.out) / "ar.ddck";
    const fs::path vq_ckpt = fs::path(a.out) / "vqvae.ddck";
    const fs::path ldm_ckpt = fs::path(a.out) / "ldm.ddck";
    for (const auto& p : {ar_ckpt, vq_ckpt, ldm_ckpt}) require_dependency(p, "infer");
    auto ar = load_ar_model(ar_ckpt.string(), ar_config(cfg));
    auto vq = load_vqvae(vq_ckpt.string(), vqvae_config(cfg));
    auto ldm = load_ldm(ldm_ckpt.string(), ldm_config(cfg),
                        NoiseSchedule::linear(cfg_int(cfg, "ldm.t_steps")));
    auto head = load_head(head_ckpt.string(),
                          head_config(cfg, vocab.size(), 0, cfg_int(cfg, "cohort.conn_dim")),
                          true);
    // truncate the stream at the cutoff age
    EventSequence trunc;
    trunc.subject_id = subject.seq.subject_id;
    for (const auto& e : subject.seq.events)
      if (e.age <= age) trunc.events.push_back(e);
    auto ts = tokenize(trunc, TemporalGrid{grid.age_min, static_cast<int>(age)}, vocab,
                       ar.cfg.max_len);
    dist = mediated_infer_connectivity(ar, ldm, vq, head, ts, a.seed);
  } else {
    const fs::path tab_ckpt = fs::path(a.out) / ("tabdiff_" + a.organ + ".ddck");
    const fs::path stats_path = fs::path(a.out) / ("stats_" + a.organ + ".txt");
    require_dependency(tab_ckpt, "infer");
    require_dependency(stats_path, "infer");
    auto stats = load_trait_stats(stats_path);
    auto gen = load_tabdiff(tab_ckpt.string(),
                            tab_config(cfg, static_cast<int>(stats.mean.size()), vocab.size()));
    auto head = load_head(head_ckpt.string(),
                          head_config(cfg, vocab.size(), static_cast<int>(stats.mean.size()), 0),
                          false);
    auto ts = tokenize(subject.seq, grid, vocab, 1 << 20);
    auto cond = recent_window(ts, age, cfg_int(cfg, "tab.window"));
    dist = mediated_infer_tabular(gen, head, cond,
                                  a.steps > 0 ? a.steps : cfg_int(cfg, "gen.steps"),
                                  a.omega >= 0 ? a.omega : cfg_double(cfg, "gen.omega"), a.seed);
  }
  std::vector<int> order(dist.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int x, int y) { return dist[x] > dist[y]; });
  std::cout.precision(8);
  for (std::size_t i = 0; i < order.size() && i < 10; ++i)
    std::cout << vocab.code(order[i]) << " " << dist[order[i]] << "\n";
  return 0;
}

int cmd_counterfactual(const CommonArgs& a, long subject_id, const std::string& exposure) {
  StageTimer timer;
  auto cfg = load_config(a.config);
  auto cohort = load_cohort_dir(a.cohort_dir);
  auto vocab = load_vocab_checked(a.out, "counterfactual");
  auto grid = cohort_grid(cohort);
  const fs::path ar_ckpt = fs::path(a.out) / "ar.ddck";
  const fs::path vq_ckpt = fs::path(a.out) / "vqvae.ddck";
  const fs::path ldm_ckpt = fs::path(a.out) / "ldm.ddck";
  for (const auto& p : {ar_ckpt, vq_ckpt, ldm_ckpt}) require_dependency(p, "counterfactual");
  auto ar = load_ar_model(ar_ckpt.string(), ar_config(cfg));
  auto vq = load_vqvae(vq_ckpt.string(), vqvae_config(cfg));
  auto ldm = load_ldm(ldm_ckpt.string(), ldm_config(cfg),
                      NoiseSchedule::linear(cfg_int(cfg, "ldm.t_steps")));
  const auto& subject = find_subject(cohort, subject_id);
  if (!subject.connectivity.has_value())
    throw DataError("subject has no connectivity observation");
  const double age = subject.connectivity->measured_at_age;
  auto do_seq = counterfactual_do(subject.seq, {exposure});
  auto ts_fact = tokenize(subject.seq, grid, vocab, ar.cfg.max_len);
  auto ts_do = tokenize(do_seq, grid, vocab, ar.cfg.max_len);
  // paired randomness: both twins consume the identical noise stream
  Rng rng_fact(a.seed);
  Rng rng_do(a.seed);
  auto twin_fact = ldm_sample(ldm, vq, history_row(ar, ts_fact, age), rng_fact);
  auto twin_do = ldm_sample(ldm, vq, history_row(ar, ts_do, age), rng_do);
  const fs::path out_file = fs::path(a.out) / ("counterfactual_" + std::to_string(subject_id) +
                                               "_" + exposure + ".txt");
  std::ofstream out(out_file);
  out << "factual\n";
  write_matrix(out, twin_fact.matrix);
  out << "do_healthy\n";
  write_matrix(out, twin_do.matrix);
  out.close();
  manifest_append(a.out, "counterfactual", a.seed, {ldm_ckpt}, {out_file}, timer.seconds());
  std::cout << "counterfactual: |factual - do| max "
            << spdgeo::max_abs_diff(twin_fact.matrix, twin_do.matrix) << " -> "
            << out_file.string() << "\n";
  return 0;
}

int cmd_evaluate_topology(const CommonArgs& a) {
  auto cfg = load_config(a.config);
  auto cohort = load_cohort_dir(a.cohort_dir);
  auto vocab = load_vocab_checked(a.out, "evaluate");
  auto grid = cohort_grid(cohort);
  const fs::path ar_ckpt = fs::path(a.out) / "ar.ddck";
  const fs::path vq_ckpt = fs::path(a.out) / "vqvae.ddck";
  const fs::path ldm_ckpt = fs::path(a.out) / "ldm.ddck";
  for (const auto& p : {ar_ckpt, vq_ckpt, ldm_ckpt}) require_dependency(p, "evaluate");
  auto ar = load_ar_model(ar_ckpt.string(), ar_config(cfg));
  auto vq = load_vqvae(vq_ckpt.string(), vqvae_config(cfg));
  auto ldm = load_ldm(ldm_ckpt.string(), ldm_config(cfg),
                      NoiseSchedule::linear(cfg_int(cfg, "ldm.t_steps")));
  std::vector<spdgeo::Mat> generated, reference;
  long i = 0;
  for (const auto& s : cohort.subjects) {
    if (!s.connectivity.has_value()) continue;
    auto ts = tokenize(s.seq, grid, vocab, ar.cfg.max_len);
    Rng rng(a.seed ^ static_cast<std::uint64_t>(++i) * 0x9E3779B97F4A7C15ULL);
    generated.push_back(
        ldm_sample(ldm, vq, history_row(ar, ts, s.connectivity->measured_at_age), rng).matrix);
    reference.push_back(s.connectivity->matrix);
  }
  if (generated.empty()) throw DataError("no connectivity observations to evaluate");
  double se = 0.0;
  long cnt = 0;
  std::vector<double> gen_entries, ref_entries;
  for (std::size_t p = 0; p < generated.size(); ++p)
    for (int r = 0; r < generated[p].n; ++r)
      for (int c = r; c < generated[p].n; ++c) {
        const double diff = generated[p].at(r, c) - reference[p].at(r, c);
        se += diff * diff;
        ++cnt;
        gen_entries.push_back(generated[p].at(r, c));
        ref_entries.push_back(reference[p].at(r, c));
      }
  std::sort(gen_entries.begin(), gen_entries.end());
  std::sort(ref_entries.begin(), ref_entries.end());
  double wd = 0.0;
  for (std::size_t k = 0; k < gen_entries.size(); ++k)
    wd += std::fabs(gen_entries[k] - ref_entries[k]);
  wd /= static_cast<double>(gen_entries.size());
  std::cout.precision(6);
  std::cout << "organ rmse wd r macc\n";
  std::cout << "brain " << std::sqrt(se / cnt) << " " << wd << " "
            << pearson_matrices(generated, reference) << " "
            << mean_accuracy_topology(generated, reference) << "\n";
  return 0;
}

int cmd_evaluate_tabular(const CommonArgs& a) {
  auto cfg = load_config(a.config);
  auto cohort = load_cohort_dir(a.cohort_dir);
  auto vocab = load_vocab_checked(a.out, "evaluate");
  auto grid = cohort_grid(cohort);
  const fs::path tab_ckpt = fs::path(a.out) / ("tabdiff_" + a.organ + ".ddck");
  const fs::path stats_path = fs::path(a.out) / ("stats_" + a.organ + ".txt");
  require_dependency(tab_ckpt, "evaluate");
  require_dependency(stats_path, "evaluate");
  auto stats = load_trait_stats(stats_path);
  auto gen = load_tabdiff(tab_ckpt.string(),
                          tab_config(cfg, static_cast<int>(stats.mean.size()), vocab.size()));
  std::vector<std::vector<double>> generated, reference;
  long i = 0;
  for (const auto& s : cohort.subjects) {
    auto it = s.tabular.find(a.organ);
    if (it == s.tabular.end()) continue;
    auto ts = tokenize(s.seq, grid, vocab, 1 << 20);
    auto cond = recent_window(ts, it->second.measured_at_age, cfg_int(cfg, "tab.window"));
    generated.push_back(generate_tabular(gen, cond,
                                         a.steps > 0 ? a.steps : cfg_int(cfg, "gen.steps"),
                                         a.omega >= 0 ? a.omega : cfg_double(cfg, "gen.omega"),
                                         a.seed + (++i)));
    reference.push_back(normalize_traits(it->second.traits, stats));
  }
  auto ev = evaluate_tabular(generated, reference);
  std::cout.precision(6);
  std::cout << "organ trait rmse wd\n";
  for (std::size_t t = 0; t < ev.rmse.size(); ++t)
    std::cout << a.organ << " " << t << " " << ev.rmse[t] << " " << ev.wd[t] << "\n";
  return 0;
}

int cmd_ate(const CommonArgs& a, const std::string& feature_source) {
  auto cfg = load_config(a.config);
  auto cohort = load_cohort_dir(a.cohort_dir);
  auto vocab = load_vocab_checked(a.out, "ate");
  auto grid = cohort_grid(cohort);
  const fs::path ar_ckpt = fs::path(a.out) / "ar.ddck";
  require_dependency(ar_ckpt, "ate");
  auto ar = load_ar_model(ar_ckpt.string(), ar_config(cfg));
  std::vector<std::vector<double>> features;
  const double cutoff =
      cohort.spec.has_value() ? cohort.spec->measurement_age : (grid.age_min + grid.age_max) / 2;
  if (feature_source == "twin") {
    const fs::path vq_ckpt = fs::path(a.out) / "vqvae.ddck";
    const fs::path ldm_ckpt = fs::path(a.out) / "ldm.ddck";
    for (const auto& p : {vq_ckpt, ldm_ckpt}) require_dependency(p, "ate");
    auto vq = load_vqvae(vq_ckpt.string(), vqvae_config(cfg));
    auto ldm = load_ldm(ldm_ckpt.string(), ldm_config(cfg),
                        NoiseSchedule::linear(cfg_int(cfg, "ldm.t_steps")));
    long i = 0;
    for (const auto& s : cohort.subjects) {
      auto ts = tokenize(s.seq, grid, vocab, ar.cfg.max_len);
      Rng rng(a.seed ^ static_cast<std::uint64_t>(++i) * 0x9E3779B97F4A7C15ULL);
      features.push_back(ldm_sample(ldm, vq, history_row(ar, ts, cutoff), rng).z0->value);
    }
  } else {
    for (const auto& s : cohort.subjects) {
      auto ts = tokenize(s.seq, grid, vocab, ar.cfg.max_len);
      features.push_back(history_row(ar, ts, cutoff)->value);
    }
  }
  AteConfig acfg;
  acfg.min_exposed = cfg_int(cfg, "ate.min_exposed");
  acfg.min_outcome = cfg_int(cfg, "ate.min_outcome");
  acfg.hidden = cfg_int(cfg, "ate.hidden");
  acfg.epochs = cfg_int(cfg, "ate.epochs");
  acfg.lr = cfg_double(cfg, "ate.lr");
  auto report = estimate_ate(cohort, features, acfg, a.seed);
  std::cout.precision(6);
  std::cout << "pair n_exposed n_outcome empirical model abs_error\n";
  for (const auto& row : report.rows)
    std::cout << row.exposure << "->" << row.outcome << " " << row.n_exposed << " "
              << row.n_outcome << " " << row.empirical << " " << row.model << " "
              << row.abs_error << "\n";
  for (const auto& sk : report.skipped)
    std::cout << "skipped " << sk.exposure << "->" << sk.outcome << ": " << sk.reason << "\n";
  std::cout << "mean_abs_error " << report.mean_abs_error << "\n";
  if (cohort.spec.has_value() && !report.rows.empty())
    std::cout << "mean_abs_error_vs_analytic " << ate_error_vs_analytic(report, *cohort.spec)
              << "\n";
  return 0;
}

int cmd_bench(const CommonArgs& a, const std::string& dims_csv) {
  auto cfg = load_config(a.config);
  auto lcfg = ldm_config(cfg);
  auto schedule = NoiseSchedule::linear(cfg_int(cfg, "ldm.t_steps"));
  auto model = make_ldm(lcfg, schedule, a.seed);
  Rng rng(a.seed);
  auto z = randn(lcfg.n_q, lcfg.d, rng, 1.0, false);
  auto yhat = randn(1, lcfg.d_phi, rng, 1.0, false);
  std::cout << "n eig_ms latent_ms ratio\n";
  std::cout.precision(4);
  for (const auto& tok : split_list(dims_csv, ',')) {
    const int n = std::stoi(tok);
    auto m = spdgeo::random_spd(n, rng);
    const int reps = 20;
    StageTimer t_eig;
    for (int r = 0; r < reps; ++r) m = spdgeo::eig_baseline_step(m, 0.01, rng);
    const double eig_ms = t_eig.seconds() * 1000.0 / reps;
    StageTimer t_lat;
    for (int r = 0; r < reps; ++r)
      ldm_denoise(model, z, schedule.t_steps / 2, yhat);
    const double lat_ms = t_lat.seconds() * 1000.0 / reps;
    std::cout << n << " " << eig_ms << " " << lat_ms << " " << eig_ms / lat_ms << "\n";
  }
  return 0;
}

int dispatch(int argc, char** argv) {
  CLI::App app{"disease-trajectory digital-twin pipeline"};
  app.require_subcommand(1);
  CommonArgs a;

  auto add_common = [&](CLI::App* cmd, bool needs_cohort) {
    cmd->add_option("--config", a.config, "key=value config file");
    cmd->add_option("--seed", a.seed, "random seed");
    cmd->add_option("--out", a.out, "experiment/output directory");
    cmd->add_option("--workers", a.workers, "worker pool size for evaluation");
    if (needs_cohort)
      cmd->add_option("--cohort", a.cohort_dir, "cohort directory")->required();
  };

  // cohort gen | split
  auto* cohort_cmd = app.add_subcommand("cohort", "cohort generation and splitting");
  cohort_cmd->require_subcommand(1);
  auto* gen_cmd = cohort_cmd->add_subcommand("gen", "generate a synthetic cohort");
  add_common(gen_cmd, false);
  double ratio = 0.8;
  auto* split_cmd = cohort_cmd->add_subcommand("split", "split into train/ and val/");
  add_common(split_cmd, true);
  split_cmd->add_option("--ratio", ratio, "train fraction");

  // train <stage>
  auto* train_cmd = app.add_subcommand("train", "staged model training");
  train_cmd->require_subcommand(1);
  std::string twin_source = "generated";
  std::map<std::string, CLI::App*> stages;
  for (const char* stage : {"ar", "vqvae", "ldm", "tabdiff", "head"}) {
    auto* c = train_cmd->add_subcommand(stage, std::string("train the ") + stage + " stage");
    add_common(c, true);
    if (std::string(stage) == "tabdiff" || std::string(stage) == "head")
      c->add_option("--organ", a.organ, "organ selector");
    if (std::string(stage) == "head")
      c->add_option("--twin-source", twin_source, "generated|real biomarkers for head training");
    stages[stage] = c;
  }

  auto* gen_twin_cmd = app.add_subcommand("generate", "emit digital twins for a cohort");
  add_common(gen_twin_cmd, true);
  gen_twin_cmd->add_option("--organ", a.organ, "organ selector");
  gen_twin_cmd->add_option("--steps", a.steps, "sampling steps");
  gen_twin_cmd->add_option("--omega", a.omega, "guidance strength");

  long subject_id = 0;
  double age = 55.0;
  auto* infer_cmd = app.add_subcommand("infer", "mediated next-disease inference");
  add_common(infer_cmd, true);
  infer_cmd->add_option("--subject", subject_id, "subject id")->required();
  infer_cmd->add_option("--age", age, "history cutoff age");
  infer_cmd->add_option("--organ", a.organ, "organ selector");
  infer_cmd->add_option("--steps", a.steps, "sampling steps");
  infer_cmd->add_option("--omega", a.omega, "guidance strength");

  std::string exposure;
  auto* cf_cmd = app.add_subcommand("counterfactual", "paired do(healthy) twin generation");
  add_common(cf_cmd, true);
  cf_cmd->add_option("--subject", subject_id, "subject id")->required();
  cf_cmd->add_option("--exposure", exposure, "exposure code to remove")->required();

  auto* eval_cmd = app.add_subcommand("evaluate", "fidelity reports");
  eval_cmd->require_subcommand(1);
  auto* topo_cmd = eval_cmd->add_subcommand("topology", "connectivity twin metrics");
  add_common(topo_cmd, true);
  auto* tabe_cmd = eval_cmd->add_subcommand("tabular", "trait twin metrics");
  add_common(tabe_cmd, true);
  tabe_cmd->add_option("--organ", a.organ, "organ selector");
  tabe_cmd->add_option("--steps", a.steps, "sampling steps");
  tabe_cmd->add_option("--omega", a.omega, "guidance strength");

  std::string feature_source = "twin";
  auto* ate_cmd = app.add_subcommand("ate", "inverse-propensity treatment effects");
  add_common(ate_cmd, true);
  ate_cmd->add_option("--features", feature_source, "twin|history propensity features");

  std::string dims = "16,32,64,116";
  auto* bench_cmd = app.add_subcommand("bench", "latent vs eigendecomposition step timing");
  add_common(bench_cmd, false);
  bench_cmd->add_option("--dims", dims, "comma-separated matrix sizes");

  CLI11_PARSE(app, argc, argv);

  if (gen_cmd->parsed()) return cmd_cohort_gen(a);
  if (split_cmd->parsed()) return cmd_cohort_split(a, ratio);
  if (stages["ar"]->parsed()) return cmd_train_ar(a);
  if (stages["vqvae"]->parsed()) return cmd_train_vqvae(a);
  if (stages["ldm"]->parsed()) return cmd_train_ldm(a);
  if (stages["tabdiff"]->parsed()) return cmd_train_tabdiff(a);
  if (stages["head"]->parsed()) return cmd_train_head(a, twin_source);
  if (gen_twin_cmd->parsed()) return cmd_generate(a);
  if (infer_cmd->parsed()) return cmd_infer(a, subject_id, age);
  if (cf_cmd->parsed()) return cmd_counterfactual(a, subject_id, exposure);
  if (topo_cmd->parsed()) return cmd_evaluate_topology(a);
  if (tabe_cmd->parsed()) return cmd_evaluate_tabular(a);
  if (ate_cmd->parsed()) return cmd_ate(a, feature_source);
  if (bench_cmd->parsed()) return cmd_bench(a, dims);
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NotFoundError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
