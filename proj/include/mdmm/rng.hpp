#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace mdmm {

namespace detail {
inline constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += kGolden;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a ^ (b * kGolden + 0x7f4a7c15ULL);
  splitmix64(s);
  return splitmix64(s);
}

/// FNV-1a, fixed 64-bit variant; platform-independent string tags.
inline constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}
}  // namespace detail

/**
 * Hierarchical RNG key. Every consumer derives a named child key instead of
 * sharing a sequential stream, so adding or removing draws in one place
 * (e.g. changing a particle count) never perturbs draws elsewhere.
 */
struct RngKey {
  std::uint64_t v = 0;

  RngKey child(std::uint64_t tag) const { return RngKey{detail::mix(v, tag)}; }
  RngKey child(std::uint64_t tag_a, std::uint64_t tag_b) const { return child(tag_a).child(tag_b); }
  RngKey child(std::uint64_t a, std::uint64_t b, std::uint64_t c) const { return child(a).child(b).child(c); }

  RngKey child(std::string_view tag) const { return child(detail::fnv1a(tag)); }
  RngKey child(std::string_view tag, std::uint64_t b) const { return child(tag).child(b); }
  RngKey child(std::string_view tag, std::uint64_t b, std::uint64_t c) const { return child(tag).child(b).child(c); }
};

/**
 * Deterministic draw stream seeded from a key. Gaussians use Box-Muller on
 * splitmix64 uniforms (exactly two uniforms per draw, no cached spare), so the
 * draw count per call is fixed and platform-independent.
 */
class Rng {
 public:
  explicit Rng(RngKey key) : state_(key.v) {}

  std::uint64_t next_u64() { return detail::splitmix64(state_); }

  /// Uniform on (0, 1]; never zero so log() is safe.
  double uniform() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  double gaussian() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  void fill_gaussian(std::span<double> out) {
    for (double& x : out) x = gaussian();
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t state_;
};

/// Fisher-Yates shuffle driven by this library's Rng (std::shuffle is unspecified across platforms).
template <class T>
void shuffle(std::vector<T>& xs, Rng& rng) {
  for (size_t i = xs.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng.below(i));
    std::swap(xs[i - 1], xs[j]);
  }
}

}  // namespace mdmm
