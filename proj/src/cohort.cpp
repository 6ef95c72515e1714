#include "diffdt/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace diffdt {

namespace {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(std::max(x, -700.0)));
}

std::uint64_t subject_seed(std::uint64_t seed, long subject_id) {
  std::uint64_t x = seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(subject_id + 1));
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  return x;
}

std::string synthetic_code(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%c%02d", 'A' + index % 20, 10 + index);
  return buf;
}

// Round to the float32 grid so the SPDM container round-trips exactly.
double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

struct PairRole {
  int pair_index = -1;
  bool is_exposure = false;
  bool is_outcome = false;
};

}  // namespace

int StructuralModelSpec::code_index(const std::string& code) const {
  for (std::size_t i = 0; i < codes.size(); ++i)
    if (codes[i] == code) return static_cast<int>(i);
  return -1;
}

Cohort generate_synthetic_cohort(const CohortConfig& config, std::uint64_t seed) {
  if (config.n_subjects < 1) throw ConfigError("n_subjects must be >= 1");
  if (config.n_codes < 1) throw ConfigError("n_codes must be >= 1");
  if (config.latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (config.age_min >= config.age_max) throw ConfigError("age range empty");
  if (config.measurement_age <= config.age_min || config.measurement_age >= config.age_max)
    throw ConfigError("measurement_age must lie strictly inside the age range");
  if (config.conn_dim == 1) throw ConfigError("conn_dim must be 0 or >= 2");
  for (const auto& organ : config.organs)
    if (organ.dim < 1) throw ConfigError("organ trait dim must be >= 1 for " + organ.name);
  const std::size_t n_pairs = config.pair_deltas.size();
  if (n_pairs * 2 + (config.two_class ? 1 : 0) > static_cast<std::size_t>(config.n_codes))
    throw ConfigError("not enough codes for the configured ATE pairs");
  if (n_pairs > 0 && config.organs.empty())
    throw ConfigError("ATE pairs require at least one organ");

  StructuralModelSpec spec;
  spec.latent_dim = config.latent_dim;
  spec.age_min = config.age_min;
  spec.age_max = config.age_max;
  spec.measurement_age = config.measurement_age;
  spec.conn_dim = config.conn_dim;
  spec.conn_rank = config.conn_rank > 0 ? config.conn_rank
                                        : std::max(config.latent_dim, config.conn_dim / 4);
  spec.conn_eps = config.conn_eps;
  spec.two_class = config.two_class;
  spec.class_trait_shift = config.class_trait_shift;
  spec.class_hazard_shift = config.class_hazard_shift;
  spec.class_conn_shift = config.class_conn_shift;

  for (int c = 0; c < config.n_codes; ++c) spec.codes.push_back(synthetic_code(c));
  if (config.two_class) spec.class_code = spec.codes.back();

  Rng coef_rng(seed ^ 0xC0EFC0EFC0EFC0EFULL);
  const int k = config.latent_dim;
  spec.hazard_bias.resize(config.n_codes);
  spec.hazard_w.resize(static_cast<std::size_t>(config.n_codes) * k);
  for (int c = 0; c < config.n_codes; ++c) {
    spec.hazard_bias[c] = config.hazard_bias - coef_rng.uniform();
    for (int j = 0; j < k; ++j)
      spec.hazard_w[static_cast<std::size_t>(c) * k + j] =
          config.hazard_w_scale * coef_rng.gauss();
  }
  for (const auto& organ : config.organs) {
    OrganSpec os;
    os.name = organ.name;
    os.dim = organ.dim;
    os.noise_sigma = organ.noise_sigma;
    os.loading.resize(static_cast<std::size_t>(organ.dim) * k);
    os.bias.resize(organ.dim);
    for (auto& v : os.loading) v = coef_rng.gauss() / std::sqrt(static_cast<double>(k));
    for (auto& v : os.bias) v = 0.3 * coef_rng.gauss();
    spec.organs.push_back(std::move(os));
  }
  if (config.conn_dim > 0) {
    spec.conn_b.resize(static_cast<std::size_t>(config.conn_dim) * spec.conn_rank);
    spec.conn_c.resize(static_cast<std::size_t>(spec.conn_rank) * k);
    for (auto& v : spec.conn_b)
      v = coef_rng.gauss() / std::sqrt(static_cast<double>(spec.conn_rank));
    for (auto& v : spec.conn_c) v = coef_rng.gauss();
  }
  if (n_pairs > 0) {
    spec.ate_organ = config.ate_organ.empty() ? config.organs.front().name : config.ate_organ;
    int organ_dim = -1;
    for (const auto& organ : spec.organs)
      if (organ.name == spec.ate_organ) organ_dim = organ.dim;
    if (organ_dim < 0) throw ConfigError("ate_organ not found: " + spec.ate_organ);
    for (std::size_t p = 0; p < n_pairs; ++p) {
      AtePair pair;
      pair.exposure = spec.codes[2 * p];
      pair.outcome = spec.codes[2 * p + 1];
      pair.delta = config.pair_deltas[p];
      pair.exposure_bias = config.exposure_bias + 0.2 * coef_rng.gauss();
      pair.outcome_bias = config.outcome_bias + 0.2 * coef_rng.gauss();
      pair.exposure_w.resize(organ_dim);
      pair.outcome_w.resize(organ_dim);
      for (auto& v : pair.exposure_w) v = config.exposure_confounding * coef_rng.gauss();
      for (auto& v : pair.outcome_w) v = config.outcome_trait_scale * coef_rng.gauss();
      spec.pairs.push_back(std::move(pair));
    }
  }

  // Role table: exposure/outcome/class codes leave the background hazard pool.
  std::vector<PairRole> roles(config.n_codes);
  for (std::size_t p = 0; p < spec.pairs.size(); ++p) {
    roles[spec.code_index(spec.pairs[p].exposure)] = {static_cast<int>(p), true, false};
    roles[spec.code_index(spec.pairs[p].outcome)] = {static_cast<int>(p), false, true};
  }
  const int class_idx = config.two_class ? spec.code_index(spec.class_code) : -1;

  Cohort cohort;
  cohort.age_min = config.age_min;
  cohort.age_max = config.age_max;
  cohort.spec = spec;

  for (long sid = 0; sid < config.n_subjects; ++sid) {
    Rng rng(subject_seed(seed, sid));
    Subject subject;
    subject.seq.subject_id = sid;

    std::vector<double> h(k);
    for (auto& v : h) v = rng.gauss();
    const bool cls = config.two_class && rng.bernoulli(0.5);

    for (const auto& organ : spec.organs) {
      TabularBiomarker bm;
      bm.organ = organ.name;
      bm.measured_at_age = spec.measurement_age;
      bm.traits.resize(organ.dim);
      for (int i = 0; i < organ.dim; ++i) {
        double v = organ.bias[i];
        for (int j = 0; j < k; ++j)
          v += organ.loading[static_cast<std::size_t>(i) * k + j] * h[j];
        v += organ.noise_sigma * rng.gauss();
        if (cls) v += spec.class_trait_shift;
        bm.traits[i] = v;
      }
      subject.tabular[organ.name] = std::move(bm);
    }

    const TabularBiomarker* ate_bm = nullptr;
    if (!spec.ate_organ.empty()) ate_bm = &subject.tabular.at(spec.ate_organ);

    if (config.conn_dim > 0) {
      const int n = config.conn_dim, r = spec.conn_rank;
      std::vector<double> diag(r);
      for (int i = 0; i < r; ++i) {
        double v = 0.0;
        for (int j = 0; j < k; ++j)
          v += spec.conn_c[static_cast<std::size_t>(i) * k + j] * h[j];
        if (cls) v += spec.class_conn_shift;
        diag[i] = softplus(v);
      }
      spdgeo::SpdMatrix m(n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) {
          double acc = 0.0;
          for (int q = 0; q < r; ++q)
            acc += spec.conn_b[static_cast<std::size_t>(i) * r + q] * diag[q] *
                   spec.conn_b[static_cast<std::size_t>(j) * r + q];
          if (i == j) acc += spec.conn_eps;
          const double rounded = to_f32(acc);
          m.at(i, j) = rounded;
          m.at(j, i) = rounded;
        }
      subject.connectivity = ConnectivityObservation{std::move(m),
                                                     static_cast<double>(spec.measurement_age)};
    }

    // Yearly event loop; every code is diagnosed at most once.
    std::vector<bool> occurred(config.n_codes, false);
    std::vector<bool> exposed(spec.pairs.size(), false);
    if (cls) {
      subject.seq.events.push_back({spec.class_code, static_cast<double>(config.age_min)});
      occurred[class_idx] = true;
    }
    for (int age = config.age_min; age <= config.age_max; ++age) {
      for (int c = 0; c < config.n_codes; ++c) {
        if (occurred[c]) continue;
        const PairRole& role = roles[c];
        double p = -1.0;
        if (c == class_idx) {
          continue;  // class marker handled above
        } else if (role.is_exposure) {
          if (age != spec.measurement_age) continue;
          const AtePair& pair = spec.pairs[role.pair_index];
          double logit = pair.exposure_bias;
          for (std::size_t i = 0; i < pair.exposure_w.size(); ++i)
            logit += pair.exposure_w[i] * ate_bm->traits[i];
          p = sigmoid(logit);
        } else if (role.is_outcome) {
          if (age <= spec.measurement_age) continue;
          const AtePair& pair = spec.pairs[role.pair_index];
          double logit = pair.outcome_bias + (exposed[role.pair_index] ? pair.delta : 0.0);
          for (std::size_t i = 0; i < pair.outcome_w.size(); ++i)
            logit += pair.outcome_w[i] * ate_bm->traits[i];
          p = sigmoid(logit);
        } else {
          double logit = spec.hazard_bias[c];
          for (int j = 0; j < k; ++j)
            logit += spec.hazard_w[static_cast<std::size_t>(c) * k + j] * h[j];
          if (cls) logit += spec.class_hazard_shift;
          p = sigmoid(logit);
        }
        if (rng.bernoulli(p)) {
          occurred[c] = true;
          if (role.is_exposure) exposed[role.pair_index] = true;
          subject.seq.events.push_back({spec.codes[c], static_cast<double>(age)});
        }
      }
    }
    cohort.subjects.push_back(std::move(subject));
  }
  return cohort;
}

namespace {

const AtePair& find_pair(const StructuralModelSpec& spec, const std::string& exposure,
                         const std::string& outcome) {
  for (const auto& pair : spec.pairs)
    if (pair.exposure == exposure && pair.outcome == outcome) return pair;
  throw NotFoundError("ATE pair not configured: " + exposure + "->" + outcome);
}

const OrganSpec& find_organ(const StructuralModelSpec& spec, const std::string& name) {
  for (const auto& organ : spec.organs)
    if (organ.name == name) return organ;
  throw NotFoundError("organ not found: " + name);
}

// Probability of the outcome firing in at least one of m years at logit
// (base + g + delta*x).
double outcome_prob(double base, double g, double delta, int m, bool exposed) {
  const double p = sigmoid(base + g + (exposed ? delta : 0.0));
  return 1.0 - std::pow(1.0 - p, m);
}

}  // namespace

double analytic_ate(const StructuralModelSpec& spec, const std::string& exposure,
                    const std::string& outcome) {
  const AtePair& pair = find_pair(spec, exposure, outcome);
  const OrganSpec& organ = find_organ(spec, spec.ate_organ);
  const int m = spec.age_max - spec.measurement_age;
  // g = outcome_w . traits is Gaussian (mixed over the two classes when the
  // two-class shift is active).
  double mu = 0.0;
  for (int i = 0; i < organ.dim; ++i) mu += pair.outcome_w[i] * organ.bias[i];
  double var = 0.0;
  for (int j = 0; j < spec.latent_dim; ++j) {
    double a = 0.0;
    for (int i = 0; i < organ.dim; ++i)
      a += pair.outcome_w[i] * organ.loading[static_cast<std::size_t>(i) * spec.latent_dim + j];
    var += a * a;
  }
  double w2 = 0.0;
  for (int i = 0; i < organ.dim; ++i) w2 += pair.outcome_w[i] * pair.outcome_w[i];
  var += organ.noise_sigma * organ.noise_sigma * w2;
  double shift = 0.0;
  if (spec.two_class) {
    double s = 0.0;
    for (int i = 0; i < organ.dim; ++i) s += pair.outcome_w[i];
    shift = spec.class_trait_shift * s;
  }
  const double sd = std::sqrt(std::max(var, 1e-300));
  // Simpson quadrature over +/- 10 sd around each class mean.
  auto integrate = [&](double mean) {
    const int steps = 4000;  // even
    const double lo = mean - 10.0 * sd, hi = mean + 10.0 * sd;
    const double dg = (hi - lo) / steps;
    double acc = 0.0;
    for (int i = 0; i <= steps; ++i) {
      const double g = lo + i * dg;
      const double phi = std::exp(-0.5 * (g - mean) * (g - mean) / (sd * sd)) /
                         (sd * std::sqrt(2.0 * 3.14159265358979323846));
      const double f = outcome_prob(pair.outcome_bias, g, pair.delta, m, true) -
                       outcome_prob(pair.outcome_bias, g, pair.delta, m, false);
      const double w = (i == 0 || i == steps) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
      acc += w * phi * f;
    }
    return acc * dg / 3.0;
  };
  if (!spec.two_class) return integrate(mu);
  return 0.5 * integrate(mu) + 0.5 * integrate(mu + shift);
}

double monte_carlo_ate(const StructuralModelSpec& spec, const std::string& exposure,
                       const std::string& outcome, long n, std::uint64_t seed) {
  const AtePair& pair = find_pair(spec, exposure, outcome);
  const OrganSpec& organ = find_organ(spec, spec.ate_organ);
  const int m = spec.age_max - spec.measurement_age;
  Rng rng(seed);
  double acc = 0.0;
  std::vector<double> h(spec.latent_dim);
  for (long it = 0; it < n; ++it) {
    for (auto& v : h) v = rng.gauss();
    const bool cls = spec.two_class && rng.bernoulli(0.5);
    double g = 0.0;
    for (int i = 0; i < organ.dim; ++i) {
      double trait = organ.bias[i];
      for (int j = 0; j < spec.latent_dim; ++j)
        trait += organ.loading[static_cast<std::size_t>(i) * spec.latent_dim + j] * h[j];
      trait += organ.noise_sigma * rng.gauss();
      if (cls) trait += spec.class_trait_shift;
      g += pair.outcome_w[i] * trait;
    }
    const double p1 = sigmoid(pair.outcome_bias + g + pair.delta);
    const double p0 = sigmoid(pair.outcome_bias + g);
    // Common uniforms across the do(1)/do(0) arms.
    bool y1 = false, y0 = false;
    for (int year = 0; year < m; ++year) {
      const double u = rng.uniform();
      y1 = y1 || u < p1;
      y0 = y0 || u < p0;
    }
    acc += (y1 ? 1.0 : 0.0) - (y0 ? 1.0 : 0.0);
  }
  return acc / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Persistence.

namespace {

namespace fs = std::filesystem;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_vector(std::ostream& os, const std::string& key, const std::vector<double>& v) {
  os << key << " =";
  for (double x : v) os << ' ' << fmt_double(x);
  os << '\n';
}

std::vector<double> parse_doubles(const std::string& payload) {
  std::vector<double> out;
  std::istringstream is(payload);
  double v;
  while (is >> v) out.push_back(v);
  return out;
}

void write_spec(const StructuralModelSpec& spec, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write spec: " + path);
  os << "latent_dim = " << spec.latent_dim << '\n';
  os << "age_min = " << spec.age_min << '\n';
  os << "age_max = " << spec.age_max << '\n';
  os << "measurement_age = " << spec.measurement_age << '\n';
  os << "conn_dim = " << spec.conn_dim << '\n';
  os << "conn_rank = " << spec.conn_rank << '\n';
  os << "conn_eps = " << fmt_double(spec.conn_eps) << '\n';
  os << "two_class = " << (spec.two_class ? 1 : 0) << '\n';
  os << "class_code = " << spec.class_code << '\n';
  os << "class_trait_shift = " << fmt_double(spec.class_trait_shift) << '\n';
  os << "class_hazard_shift = " << fmt_double(spec.class_hazard_shift) << '\n';
  os << "class_conn_shift = " << fmt_double(spec.class_conn_shift) << '\n';
  os << "ate_organ = " << spec.ate_organ << '\n';
  os << "codes =";
  for (const auto& c : spec.codes) os << ' ' << c;
  os << '\n';
  write_vector(os, "hazard_bias", spec.hazard_bias);
  write_vector(os, "hazard_w", spec.hazard_w);
  write_vector(os, "conn_b", spec.conn_b);
  write_vector(os, "conn_c", spec.conn_c);
  os << "n_organs = " << spec.organs.size() << '\n';
  for (const auto& organ : spec.organs) {
    os << "organ = " << organ.name << ' ' << organ.dim << ' '
       << fmt_double(organ.noise_sigma) << '\n';
    write_vector(os, "organ_loading", organ.loading);
    write_vector(os, "organ_bias", organ.bias);
  }
  os << "n_pairs = " << spec.pairs.size() << '\n';
  for (const auto& pair : spec.pairs) {
    os << "pair = " << pair.exposure << ' ' << pair.outcome << ' '
       << fmt_double(pair.delta) << ' ' << fmt_double(pair.exposure_bias) << ' '
       << fmt_double(pair.outcome_bias) << '\n';
    write_vector(os, "pair_exposure_w", pair.exposure_w);
    write_vector(os, "pair_outcome_w", pair.outcome_w);
  }
}

StructuralModelSpec read_spec(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read spec: " + path);
  StructuralModelSpec spec;
  std::string line;
  std::vector<std::pair<std::string, std::string>> entries;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("spec.txt: malformed line: " + line);
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.erase(s.begin());
      while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
        s.pop_back();
    };
    trim(key);
    trim(val);
    entries.emplace_back(key, val);
  }
  std::size_t i = 0;
  auto expect = [&](const std::string& key) -> std::string {
    if (i >= entries.size() || entries[i].first != key)
      throw DataError("spec.txt: expected key " + key);
    return entries[i++].second;
  };
  spec.latent_dim = std::stoi(expect("latent_dim"));
  spec.age_min = std::stoi(expect("age_min"));
  spec.age_max = std::stoi(expect("age_max"));
  spec.measurement_age = std::stoi(expect("measurement_age"));
  spec.conn_dim = std::stoi(expect("conn_dim"));
  spec.conn_rank = std::stoi(expect("conn_rank"));
  spec.conn_eps = std::stod(expect("conn_eps"));
  spec.two_class = std::stoi(expect("two_class")) != 0;
  spec.class_code = expect("class_code");
  spec.class_trait_shift = std::stod(expect("class_trait_shift"));
  spec.class_hazard_shift = std::stod(expect("class_hazard_shift"));
  spec.class_conn_shift = std::stod(expect("class_conn_shift"));
  spec.ate_organ = expect("ate_organ");
  {
    std::istringstream cs(expect("codes"));
    std::string c;
    while (cs >> c) spec.codes.push_back(c);
  }
  spec.hazard_bias = parse_doubles(expect("hazard_bias"));
  spec.hazard_w = parse_doubles(expect("hazard_w"));
  spec.conn_b = parse_doubles(expect("conn_b"));
  spec.conn_c = parse_doubles(expect("conn_c"));
  const int n_organs = std::stoi(expect("n_organs"));
  for (int o = 0; o < n_organs; ++o) {
    OrganSpec organ;
    std::istringstream os(expect("organ"));
    os >> organ.name >> organ.dim >> organ.noise_sigma;
    organ.loading = parse_doubles(expect("organ_loading"));
    organ.bias = parse_doubles(expect("organ_bias"));
    spec.organs.push_back(std::move(organ));
  }
  const int n_pairs = std::stoi(expect("n_pairs"));
  for (int p = 0; p < n_pairs; ++p) {
    AtePair pair;
    std::istringstream ps(expect("pair"));
    ps >> pair.exposure >> pair.outcome >> pair.delta >> pair.exposure_bias >>
        pair.outcome_bias;
    pair.exposure_w = parse_doubles(expect("pair_exposure_w"));
    pair.outcome_w = parse_doubles(expect("pair_outcome_w"));
    spec.pairs.push_back(std::move(pair));
  }
  return spec;
}

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}

}  // namespace

void save_cohort(const Cohort& cohort, const std::string& dir) {
  fs::create_directories(dir);
  {
    std::ofstream os(fs::path(dir) / "events.txt");
    if (!os) throw DataError("cannot write events file in " + dir);
    os << "# subject_id age code\n";
    for (const auto& subject : cohort.subjects)
      for (const auto& event : subject.seq.events)
        os << subject.seq.subject_id << ' ' << fmt_double(event.age) << ' '
           << event.code << '\n';
  }
  {
    std::ofstream os(fs::path(dir) / "tabular.txt");
    if (!os) throw DataError("cannot write tabular file in " + dir);
    os << "# subject_id organ age traits...\n";
    for (const auto& subject : cohort.subjects)
      for (const auto& [organ, bm] : subject.tabular) {
        os << subject.seq.subject_id << ' ' << organ << ' '
           << fmt_double(bm.measured_at_age);
        for (double v : bm.traits) os << ' ' << fmt_double(v);
        os << '\n';
      }
  }
  {
    std::ofstream os(fs::path(dir) / "matrices.spdm", std::ios::binary);
    if (!os) throw DataError("cannot write matrix container in " + dir);
    int n = 0;
    std::uint32_t count = 0;
    for (const auto& subject : cohort.subjects)
      if (subject.connectivity) {
        n = subject.connectivity->matrix.n;
        ++count;
      }
    os.write("SPDM", 4);
    write_u32(os, 1);  // version
    write_u32(os, static_cast<std::uint32_t>(n));
    write_u32(os, count);
    write_u32(os, 0);  // reserved
    for (const auto& subject : cohort.subjects) {
      if (!subject.connectivity) continue;
      write_u64(os, static_cast<std::uint64_t>(subject.seq.subject_id));
      write_u32(os, static_cast<std::uint32_t>(
                        std::lround(subject.connectivity->measured_at_age * 100.0)));
      std::vector<float> buf(subject.connectivity->matrix.a.begin(),
                             subject.connectivity->matrix.a.end());
      os.write(reinterpret_cast<const char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
  }
  {
    std::ofstream os(fs::path(dir) / "meta.txt");
    os << "age_min = " << cohort.age_min << '\n';
    os << "age_max = " << cohort.age_max << '\n';
    os << "n_subjects = " << cohort.subjects.size() << '\n';
    os << "has_spec = " << (cohort.spec ? 1 : 0) << '\n';
    // Subjects without events still need to exist after a round trip.
    os << "subject_ids =";
    for (const auto& subject : cohort.subjects) os << ' ' << subject.seq.subject_id;
    os << '\n';
  }
  if (cohort.spec) write_spec(*cohort.spec, (fs::path(dir) / "spec.txt").string());
}

Cohort load_cohort(const std::string& dir) {
  Cohort cohort;
  std::map<long, std::size_t> index;
  {
    std::ifstream is(fs::path(dir) / "meta.txt");
    if (!is) throw DataError("cannot read meta.txt in " + dir);
    std::string line;
    bool has_spec = false;
    while (std::getline(is, line)) {
      std::istringstream ls(line);
      std::string key, eq;
      ls >> key >> eq;
      if (key == "age_min") ls >> cohort.age_min;
      if (key == "age_max") ls >> cohort.age_max;
      if (key == "has_spec") {
        int v;
        ls >> v;
        has_spec = v != 0;
      }
      if (key == "subject_ids") {
        long sid;
        while (ls >> sid) {
          if (index.count(sid)) throw DataError("duplicate subject id " + std::to_string(sid));
          index[sid] = cohort.subjects.size();
          Subject subject;
          subject.seq.subject_id = sid;
          cohort.subjects.push_back(std::move(subject));
        }
      }
    }
    if (has_spec) cohort.spec = read_spec((fs::path(dir) / "spec.txt").string());
  }
  auto subject_at = [&](long sid, const char* where, long lineno) -> Subject& {
    auto it = index.find(sid);
    if (it == index.end())
      throw DataError(std::string(where) + ": unknown subject id " + std::to_string(sid) +
                      " at line " + std::to_string(lineno));
    return cohort.subjects[it->second];
  };
  {
    std::ifstream is(fs::path(dir) / "events.txt");
    if (!is) throw DataError("cannot read events.txt in " + dir);
    std::string line;
    long lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      long sid;
      double age;
      std::string code;
      if (!(ls >> sid >> age >> code))
        throw DataError("events.txt: parse error at line " + std::to_string(lineno));
      Subject& subject = subject_at(sid, "events.txt", lineno);
      if (!subject.seq.events.empty() && subject.seq.events.back().age > age)
        throw DataError("events.txt: ages not sorted for subject " + std::to_string(sid) +
                        " at line " + std::to_string(lineno));
      subject.seq.events.push_back({code, age});
    }
  }
  {
    std::ifstream is(fs::path(dir) / "tabular.txt");
    if (!is) throw DataError("cannot read tabular.txt in " + dir);
    std::string line;
    long lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      long sid;
      std::string organ;
      double age;
      if (!(ls >> sid >> organ >> age))
        throw DataError("tabular.txt: parse error at line " + std::to_string(lineno));
      TabularBiomarker bm;
      bm.organ = organ;
      bm.measured_at_age = age;
      double v;
      while (ls >> v) bm.traits.push_back(v);
      if (bm.traits.empty())
        throw DataError("tabular.txt: empty trait vector at line " + std::to_string(lineno));
      subject_at(sid, "tabular.txt", lineno).tabular[organ] = std::move(bm);
    }
  }
  {
    std::ifstream is(fs::path(dir) / "matrices.spdm", std::ios::binary);
    if (!is) throw DataError("cannot read matrices.spdm in " + dir);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "SPDM", 4) != 0)
      throw DataError("matrices.spdm: bad magic");
    std::uint32_t header[4];
    is.read(reinterpret_cast<char*>(header), 16);
    if (!is) throw DataError("matrices.spdm: truncated header");
    if (header[0] != 1)
      throw DataError("matrices.spdm: unsupported version " + std::to_string(header[0]));
    const int n = static_cast<int>(header[1]);
    const std::uint32_t count = header[2];
    const std::size_t payload = static_cast<std::size_t>(n) * n * sizeof(float) + 12;
    for (std::uint32_t r = 0; r < count; ++r) {
      std::uint64_t sid;
      std::uint32_t age_x100;
      std::vector<float> buf(static_cast<std::size_t>(n) * n);
      is.read(reinterpret_cast<char*>(&sid), 8);
      is.read(reinterpret_cast<char*>(&age_x100), 4);
      is.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
      if (!is) {
        throw DataError("matrices.spdm: truncated record " + std::to_string(r) +
                        ": expected " + std::to_string(payload) + " bytes, got " +
                        std::to_string(is.gcount()));
      }
      spdgeo::SpdMatrix m(n);
      for (std::size_t i = 0; i < buf.size(); ++i) m.a[i] = buf[i];
      subject_at(static_cast<long>(sid), "matrices.spdm", r).connectivity =
          ConnectivityObservation{std::move(m), age_x100 / 100.0};
    }
  }
  return cohort;
}

std::pair<Cohort, Cohort> split_train_val(const Cohort& cohort, double ratio,
                                          std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must be in (0,1)");
  const std::size_t n = cohort.subjects.size();
  if (n < 2) throw DataError("cannot split a cohort with fewer than 2 subjects");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n - 1; i > 0; --i)
    std::swap(order[i], order[rng.integer(i + 1)]);
  std::size_t n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  n_train = std::min(std::max<std::size_t>(n_train, 1), n - 1);
  Cohort train, val;
  train.age_min = val.age_min = cohort.age_min;
  train.age_max = val.age_max = cohort.age_max;
  train.spec = val.spec = cohort.spec;
  for (std::size_t i = 0; i < n; ++i) {
    (i < n_train ? train : val).subjects.push_back(cohort.subjects[order[i]]);
  }
  auto by_id = [](const Subject& a, const Subject& b) {
    return a.seq.subject_id < b.seq.subject_id;
  };
  std::sort(train.subjects.begin(), train.subjects.end(), by_id);
  std::sort(val.subjects.begin(), val.subjects.end(), by_id);
  return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------

std::pair<Cohort, MarkovCohortSpec> generate_markov_cohort(const MarkovConfig& config,
                                                           std::uint64_t seed) {
  if (config.n_codes < 1) throw ConfigError("markov cohort needs at least one code");
  MarkovCohortSpec mspec;
  for (int c = 0; c < config.n_codes; ++c) mspec.codes.push_back(synthetic_code(c));
  const int s = config.n_codes + 1;  // state 0 = healthy
  Rng rng(seed ^ 0x3A93A93A93A93A93ULL);
  mspec.trans.assign(s, std::vector<double>(s, 0.0));
  for (int i = 0; i < s; ++i) {
    // One dominant successor per state plus spread mass.
    const int mode = static_cast<int>(rng.integer(s));
    double z = 0.0;
    for (int j = 0; j < s; ++j) {
      mspec.trans[i][j] = (j == mode ? 1.0 : config.concentration * (0.2 + rng.uniform()));
      z += mspec.trans[i][j];
    }
    for (int j = 0; j < s; ++j) mspec.trans[i][j] /= z;
  }
  // Stationary distribution by power iteration.
  mspec.stationary.assign(s, 1.0 / s);
  for (int it = 0; it < 2000; ++it) {
    std::vector<double> next(s, 0.0);
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < s; ++j) next[j] += mspec.stationary[i] * mspec.trans[i][j];
    mspec.stationary = std::move(next);
  }
  mspec.conditional_entropy_nats = 0.0;
  mspec.bayes_accuracy = 0.0;
  for (int i = 0; i < s; ++i) {
    double h = 0.0, best = 0.0;
    for (int j = 0; j < s; ++j) {
      if (mspec.trans[i][j] > 0) h -= mspec.trans[i][j] * std::log(mspec.trans[i][j]);
      best = std::max(best, mspec.trans[i][j]);
    }
    mspec.conditional_entropy_nats += mspec.stationary[i] * h;
    mspec.bayes_accuracy += mspec.stationary[i] * best;
  }

  Cohort cohort;
  cohort.age_min = config.age_min;
  cohort.age_max = config.age_max;
  for (long sid = 0; sid < config.n_subjects; ++sid) {
    Rng srng(subject_seed(seed, sid));
    Subject subject;
    subject.seq.subject_id = sid;
    // Start from the stationary distribution.
    int state = 0;
    {
      double u = srng.uniform(), acc = 0.0;
      for (int j = 0; j < s; ++j) {
        acc += mspec.stationary[j];
        if (u < acc) {
          state = j;
          break;
        }
      }
    }
    for (int age = config.age_min; age <= config.age_max; ++age) {
      if (state > 0)
        subject.seq.events.push_back({mspec.codes[state - 1], static_cast<double>(age)});
      double u = srng.uniform(), acc = 0.0;
      int next = s - 1;
      for (int j = 0; j < s; ++j) {
        acc += mspec.trans[state][j];
        if (u < acc) {
          next = j;
          break;
        }
      }
      state = next;
    }
    cohort.subjects.push_back(std::move(subject));
  }
  return {std::move(cohort), std::move(mspec)};
}

}  // namespace diffdt
