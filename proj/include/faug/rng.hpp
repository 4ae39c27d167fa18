#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace faug {

namespace detail {

// splitmix64 finalizer; the whole stream is a pure function of (key, counter).
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

// Counter-based splittable stream. Child streams derived via split() are
// statistically independent of the parent and of each other, so consuming
// draws in one never shifts another -- the property every seeded experiment
// here relies on.
class RngStream {
 public:
  explicit RngStream(uint64_t seed)
      : key_(detail::mix64(seed ^ 0x6a09e667f3bcc909ULL)) {}

  RngStream split(uint64_t tag) const {
    return RngStream(detail::mix64(key_ ^ detail::mix64(tag ^ 0xbb67ae8584caa73bULL)), 0, Internal{});
  }

  RngStream split(std::string_view name) const {
    return split(detail::fnv1a64(name));
  }

  RngStream split(std::string_view name, uint64_t tag) const {
    return split(name).split(tag);
  }

  uint64_t next_u64() {
    return detail::mix64(key_ ^ detail::mix64(counter_++ ^ 0x3c6ef372fe94f82bULL));
  }

  // uniform in [0, 1)
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  float uniform(float lo, float hi) {
    return static_cast<float>(lo + next_double() * (static_cast<double>(hi) - lo));
  }

  // Box-Muller; two draws per sample, no caching, so the draw count per
  // sample is fixed and replay never depends on call history.
  float normal(float mu, float sigma) {
    double u1 = 1.0 - next_double();  // (0, 1]
    double u2 = next_double();
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    return static_cast<float>(mu + sigma * z);
  }

  // uniform integer in [0, n)
  uint64_t next_below(uint64_t n) { return n ? next_u64() % n : 0; }

  // stream identity, recorded in artifacts so runs can be replayed
  uint64_t key() const { return key_; }

 private:
  struct Internal {};
  RngStream(uint64_t key, uint64_t counter, Internal) : key_(key), counter_(counter) {}

  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace faug
