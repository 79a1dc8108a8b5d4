#pragma once

#include <cmath>
#include <cstdint>

namespace srepa {

// Counter-based random stream: every draw is a pure function of
// (seed, stream, counter), so streams can be split without coupling and
// the full state serializes as three integers.
class RngStream {
 public:
  RngStream() = default;
  RngStream(std::uint64_t seed, std::uint64_t stream)
      : seed_(seed), stream_(stream), counter_(0) {}

  // Derive an independent substream; the child starts at counter 0.
  RngStream substream(std::uint64_t id) const {
    return RngStream(mix_(seed_ + 0x9e3779b97f4a7c15ull * (stream_ + 1)), id);
  }

  std::uint64_t next_u64() {
    std::uint64_t x = seed_ + 0x9e3779b97f4a7c15ull * (stream_ + 1) +
                      0xbf58476d1ce4e5b9ull * (++counter_);
    return mix_(x);
  }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; consumes two uniforms per draw so the state stays a plain
  // counter (no cached spare value to serialize).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // index in [0, n)
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

 private:
  static std::uint64_t mix_(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
  }

  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace srepa
