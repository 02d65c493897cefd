#pragma once

#include <cstdint>
#include <random>

namespace gpssm {

// splitmix64 step; used to derive independent substream seeds from a master
// seed plus stream tags, so results are reproducible regardless of how work
// is scheduled.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed) { return splitmix64(seed); }

template <typename... Tags>
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag, Tags... rest) {
  return mix_seed(splitmix64(seed ^ splitmix64(tag)), rest...);
}

class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : engine_(seed) {}

  double normal() {
    std::normal_distribution<double> d;
    return d(engine_);
  }

  // uniform on [0, 1)
  double uniform() {
    std::uniform_real_distribution<double> d(0.0, 1.0);
    return d(engine_);
  }

  std::uint64_t next_u64() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace gpssm
