#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace bevfuse {

// Error taxonomy. The CLI maps these onto exit codes:
//   usage errors -> 1, data/config/io errors -> 2, invariant breaches -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ValueError : Error {
  using Error::Error;
};
struct ConfigError : ValueError {
  using ValueError::ValueError;
};
struct ParseError : ValueError {
  using ValueError::ValueError;
};
struct IoError : Error {
  using Error::Error;
};
struct InvariantError : Error {
  using Error::Error;
};
struct EmptySetError : Error {
  using Error::Error;
};

#define BEVFUSE_CHECK(cond, exc, msg)      \
  do {                                     \
    if (!(cond)) throw exc(std::string(msg)); \
  } while (0)

// Deterministic RNG. Distributions are hand-rolled on top of mt19937_64 so
// that streams are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(eng_() % static_cast<std::uint64_t>(hi - lo + 1));
  }

  // Box-Muller; one fresh pair per call, second value discarded.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::uint64_t next_u64() { return eng_(); }

 private:
  std::mt19937_64 eng_;
};

// Worker count for the parallel pooling path. All parallel code in this
// library must produce bit-identical results for any value >= 1.
int thread_count();

// Runs fn(begin, end) over contiguous chunks of [0, n) on `threads` workers.
void parallel_for(std::int64_t n, int threads, const std::function<void(std::int64_t, std::int64_t)>& fn);

std::uint64_t fnv1a64(const std::string& s);

}  // namespace bevfuse
