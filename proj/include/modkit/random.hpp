#pragma once

// Portable random helpers. The standard distributions are implementation
// defined, so every draw that must be reproducible goes through these.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace modkit {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream keyed by (seed, a, b), e.g. (seed, generation, member).
inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t a = 0,
                                   std::uint64_t b = 0) {
  std::uint64_t k = splitmix64(seed);
  k = splitmix64(k ^ (a + 0x632be59bd9b4e019ULL));
  k = splitmix64(k ^ (b + 0x8cb92ba72f3d8dd7ULL));
  return std::mt19937_64(k);
}

inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

inline double standard_normal(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

template <typename T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[uniform_index(rng, i)]);
  }
}

// Radical inverse in the given prime base (Halton coordinate).
inline double radical_inverse(std::uint64_t index, unsigned base) {
  double result = 0.0;
  double f = 1.0 / base;
  while (index > 0) {
    result += f * static_cast<double>(index % base);
    index /= base;
    f /= base;
  }
  return result;
}

// Randomly shifted Halton points in [0,1)^dims.
inline std::vector<std::vector<double>> halton_points(std::size_t count,
                                                      std::size_t dims,
                                                      std::uint64_t seed) {
  static constexpr unsigned kPrimes[] = {2, 3, 5, 7, 11, 13};
  auto rng = make_stream(seed, 0x4a11);
  std::vector<double> shift(dims);
  for (auto& s : shift) s = uniform01(rng);
  std::vector<std::vector<double>> out(count, std::vector<double>(dims));
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t d = 0; d < dims; ++d) {
      double x = radical_inverse(i + 1, kPrimes[d % 6]) + shift[d];
      out[i][d] = x - std::floor(x);
    }
  }
  return out;
}

}  // namespace modkit
