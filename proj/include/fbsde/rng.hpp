#pragma once

#include <cstdint>
#include <random>

namespace fbsde {

// Stream splitting rule: every (seed, stream, path) triple owns an
// independent generator seeded through two rounds of splitmix64 mixing.
// Simulation order therefore never matters; any worker count reproduces
// the same draws path by path.
//   stream 0: forward increments
//   stream 1: Brownian-bridge refinement
//   stream 2+: utility draws (validation sampling, toy studies)

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t stream,
                                    std::uint64_t path) {
  return splitmix64(splitmix64(seed + 0x632be59bd9b4e019ULL * (stream + 1)) +
                    0x9e3779b97f4a7c15ULL * (path + 1));
}

/// Per-path random stream. One instance per (seed, stream, path).
class PathRng {
 public:
  PathRng(std::uint64_t seed, std::uint64_t stream, std::uint64_t path)
      : gen_(substream_seed(seed, stream, path)) {}

  double normal() { return normal_(gen_); }
  double uniform() { return uniform_(gen_); }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace fbsde
