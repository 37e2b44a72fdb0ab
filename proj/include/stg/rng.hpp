#pragma once

#include <cmath>
#include <cstdint>

#include "stg/tensor.hpp"

namespace stg {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

// SplitMix64 finalizer. Bijective on 64-bit values.
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Counter-based stream: draw i is a pure function of (seed, stream_id, i), so
// parallel chains can hold streams by value with no shared state. Gaussian
// draws consume whole Box-Muller pairs; an odd-length request still advances
// the counter by two for its final pair.
struct RngStream {
  std::uint64_t seed = 0;
  std::uint64_t stream_id = 0;
  std::uint64_t counter = 0;

  std::uint64_t key() const { return mix64(seed + kGolden * mix64(stream_id + kGolden)); }

  std::uint64_t next_u64() { return mix64(key() + kGolden * counter++); }

  // Uniform on (0, 1]; never 0, so log() below is safe.
  double next_uniform() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }
};

inline RngStream derive_stream(std::uint64_t seed, std::uint64_t stream_id) {
  return RngStream{seed, stream_id, 0};
}

// Child stream: independent of the parent's counter position, distinct per index.
inline RngStream substream(const RngStream& parent, std::uint64_t index) {
  return derive_stream(mix64(parent.seed + kGolden * parent.stream_id), index);
}

inline void gaussian_pair(RngStream& rng, double& z0, double& z1) {
  const double u1 = rng.next_uniform();
  const double u2 = rng.next_uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double th = 2.0 * M_PI * u2;
  z0 = r * std::cos(th);
  z1 = r * std::sin(th);
}

inline double gaussian_scalar(RngStream& rng) {
  double z0, z1;
  gaussian_pair(rng, z0, z1);
  return z0;
}

inline Tensor gaussian(RngStream& rng, const Shape& shape) {
  Tensor out(shape);
  const std::size_t n = out.size();
  std::size_t i = 0;
  while (i + 1 < n) {
    gaussian_pair(rng, out.data[i], out.data[i + 1]);
    i += 2;
  }
  if (i < n) {
    double z0, z1;
    gaussian_pair(rng, z0, z1);
    out.data[i] = z0;
  }
  return out;
}

}  // namespace stg
