#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace td {

// Error carries a stable machine-readable code alongside the human message.
// The CLI prints these as "code: message" and exits nonzero.
struct Error : std::runtime_error {
  std::string code;
  Error(std::string c, const std::string& msg)
      : std::runtime_error(msg), code(std::move(c)) {}
};

[[noreturn]] void fail(const std::string& code, const std::string& msg);

#define TD_CHECK(cond, code, msg)   \
  do {                              \
    if (!(cond)) ::td::fail(code, msg); \
  } while (0)

// Deterministic counter-free PRNG (splitmix64 core). All randomness in the
// project flows through this type; std:: distributions are never used so that
// streams are reproducible across platforms and library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi);
  // Standard normal via Box-Muller; second sample cached.
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  // Stable combiner for deriving per-item seeds from a base seed and index.
  static uint64_t mix(uint64_t a, uint64_t b);

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Number of worker threads for data generation / filtering. Reads
// TASKDIFF_THREADS, falling back to hardware concurrency.
int worker_threads();

// Runs fn(i) for i in [0, n). Results that workers produce must be written to
// per-index slots; callers then reduce in index order so the outcome is
// independent of the thread count.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace td
