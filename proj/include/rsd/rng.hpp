#pragma once

#include <cstdint>

namespace rsd {

// Counter-based generator: the i-th draw of a stream is a pure function of
// (key, i), so any sample of a dataset can be regenerated from
// (seed, sample index) alone and parallel loops stay reproducible.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : key_(mix(seed ^ 0x243f6a8885a308d3ULL)) {}

  // Independent child stream identified by (tag, index).
  Rng stream(std::uint64_t tag, std::uint64_t index = 0) const;

  std::uint64_t next_u64();
  // Uniform on [0, 1).
  double uniform();
  // Uniform on (0, 1].
  double uniform_open_low() { return 1.0 - uniform(); }
  // Standard normal via Box-Muller; the sine branch is cached.
  double normal();
  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  static std::uint64_t mix(std::uint64_t z);

 private:
  struct FromKey {};
  Rng(FromKey, std::uint64_t key) : key_(key) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

// Fixed tags so that distinct subsystems never share a stream.
namespace stream_tag {
inline constexpr std::uint64_t kData = 1;
inline constexpr std::uint64_t kMask = 2;
inline constexpr std::uint64_t kNoise = 3;
inline constexpr std::uint64_t kTrain = 4;
inline constexpr std::uint64_t kInit = 5;
inline constexpr std::uint64_t kEval = 6;
inline constexpr std::uint64_t kTheory = 7;
inline constexpr std::uint64_t kDistill = 8;
inline constexpr std::uint64_t kSample = 9;
}  // namespace stream_tag

}  // namespace rsd
