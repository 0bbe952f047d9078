#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace mtn {

std::uint64_t splitmix64(std::uint64_t x);

// Derive an independent stream seed from a master seed. Used for per-trial
// and per-epoch streams so runs are reproducible without sharing state.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

// Deterministic random source. All draws go through explicit helpers instead
// of <random> distributions, so the byte-for-byte sequence depends only on
// the seed, not on the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next() { return eng_(); }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

  // Engine state as text, for checkpoints. Restoring resumes the exact
  // draw sequence.
  std::string save_state() const;
  void restore_state(const std::string& state);

 private:
  std::mt19937_64 eng_;
};

}  // namespace mtn
