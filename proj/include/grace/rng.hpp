#pragma once

// Counter-based seeding: every random stream is a pure function of
// (global_seed, step, instance, rollout), so rollouts can be produced in any
// order or on any worker and still replay bit-identically.

#include <cstdint>
#include <random>

namespace grace {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct StreamKey {
  std::uint64_t global_seed = 0;
  std::uint64_t step = 0;
  std::uint64_t instance = 0;
  std::uint64_t rollout = 0;

  std::uint64_t id() const {
    std::uint64_t h = splitmix64(global_seed);
    h = splitmix64(h ^ splitmix64(step + 0x1000));
    h = splitmix64(h ^ splitmix64(instance + 0x2000));
    h = splitmix64(h ^ splitmix64(rollout + 0x3000));
    return h;
  }
};

class RngStream {
 public:
  explicit RngStream(StreamKey key) : id_(key.id()), engine_(id_) {}
  explicit RngStream(std::uint64_t seed) : id_(seed), engine_(seed) {}

  std::uint64_t id() const { return id_; }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t id_;
  std::mt19937_64 engine_;
};

}  // namespace grace
