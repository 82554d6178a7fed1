#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace rctkg {

/// Stream domains; outcome sampling and tie-breaking never share a stream.
enum class StreamDomain : std::uint64_t {
  replicate = 1,
  outcomes = 2,
  tie_break = 3,
  prior = 4,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Order-sensitive hash of a seed path, e.g. (master, replicate, domain, cohort).
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(root);
  for (const std::uint64_t p : path) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

using Engine = std::mt19937_64;

inline Engine make_stream(std::uint64_t trial_seed, StreamDomain domain, std::uint64_t index) {
  return Engine(derive_seed(trial_seed, {static_cast<std::uint64_t>(domain), index}));
}

/// Per-cohort tie-break stream: identical (trial seed, cohort) gives identical decisions.
class TieBreakRng {
 public:
  TieBreakRng(std::uint64_t trial_seed, std::uint64_t cohort_index)
      : engine_(make_stream(trial_seed, StreamDomain::tie_break, cohort_index)) {}
  explicit TieBreakRng(Engine engine) : engine_(engine) {}

  /// Uniform integer in [0, n).
  std::size_t pick(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  Engine& engine() { return engine_; }

 private:
  Engine engine_;
};

}  // namespace rctkg
