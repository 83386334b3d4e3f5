// Deterministic random streams.
//
// All randomness flows from a master seed through named substreams
// ("data", "init", "negatives", "eval", ...). Distributions are implemented
// here rather than taken from <random> so sequences are identical across
// standard library implementations.
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace mbp {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream, std::uint64_t index = 0);

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}
  static Rng stream(std::uint64_t master, std::string_view name, std::uint64_t index = 0) {
    return Rng(derive_seed(master, name, index));
  }

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, n); n must be positive.
  std::uint64_t uniform_int(std::uint64_t n);
  // Uniform on [0, 1) with 53 random bits.
  double uniform01();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }
  double normal();
  bool bernoulli(double p) { return uniform01() < p; }

  std::string state() const;
  void set_state(const std::string& s);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace mbp
