#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffdt {

struct ConfigError : std::runtime_error { using std::runtime_error::runtime_error; };
struct DataError : std::runtime_error { using std::runtime_error::runtime_error; };
struct DimensionError : std::runtime_error { using std::runtime_error::runtime_error; };
struct VocabError : std::runtime_error { using std::runtime_error::runtime_error; };
struct RangeError : std::runtime_error { using std::runtime_error::runtime_error; };
struct NumericError : std::runtime_error { using std::runtime_error::runtime_error; };
struct StateError : std::runtime_error { using std::runtime_error::runtime_error; };
struct TrainError : std::runtime_error { using std::runtime_error::runtime_error; };
struct NotFoundError : std::runtime_error { using std::runtime_error::runtime_error; };

// Deterministic RNG. Gaussian draws go through Box-Muller on raw uniforms so
// the stream does not depend on the standard library's distribution
// implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double uniform() {
    // 53-bit mantissa uniform in [0, 1).
    return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
  }

  double gauss() {
    double u1 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Uniform integer in [0, n).
  std::uint64_t integer(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = gen_();
    while (x >= limit) x = gen_();
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t raw() { return gen_(); }

 private:
  std::mt19937_64 gen_;
};

// Sample Pearson correlation; throws DimensionError on length mismatch and
// NumericError when either side has zero variance.
double pearson_r(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace diffdt
