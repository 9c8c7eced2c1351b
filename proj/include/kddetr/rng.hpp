#pragma once

#include <cstdint>

namespace kddetr {

// xoshiro256** seeded through splitmix64. The algorithm and constants are
// fixed so that datasets and initializations reproduce across platforms; do
// not swap this for a std:: engine or distribution (their outputs are
// implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  // Independent stream for (seed, index), e.g. one per generated scene.
  static Rng for_stream(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t next_u64();

  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);

  // Uniform integer on [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  // Standard normal via Box-Muller (no cached spare, so each call consumes
  // exactly two uniforms).
  double normal();

 private:
  std::uint64_t s_[4];
};

std::uint64_t splitmix64(std::uint64_t& state);

// FNV-1a over raw bytes; used for distillation-point consistency hashes.
std::uint64_t fnv1a(const void* data, std::size_t bytes,
                    std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace kddetr
