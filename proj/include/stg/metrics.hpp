#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "stg/error.hpp"
#include "stg/oracle.hpp"
#include "stg/tensor.hpp"

namespace stg {

namespace detail {
inline double sq_dist(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return s;
}
}  // namespace detail

// Unbiased MMD^2 with RBF kernel exp(-|x-y|^2 / (2 bw^2)). May be slightly
// negative by estimator variance; reported raw, never clamped. The unbiased
// self terms divide by n(n-1), hence the two-row minimum per set.
inline double mmd_rbf(const std::vector<Tensor>& a, const std::vector<Tensor>& b,
                      double bandwidth) {
  if (a.size() < 2)
    throw ValidationError("mmd_rbf: first set has " + std::to_string(a.size()) +
                          " rows, need >= 2");
  if (b.size() < 2)
    throw ValidationError("mmd_rbf: second set has " + std::to_string(b.size()) +
                          " rows, need >= 2");
  if (!(bandwidth > 0.0)) throw ValidationError("mmd_rbf: bandwidth must be > 0");
  for (const auto& t : a) require_same_shape(a[0], t, "mmd_rbf");
  for (const auto& t : b) require_same_shape(a[0], t, "mmd_rbf");
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  const std::size_t m = a.size(), n = b.size();
  double kaa = 0.0, kbb = 0.0, kab = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) kaa += std::exp(-detail::sq_dist(a[i], a[j]) * inv);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) kbb += std::exp(-detail::sq_dist(b[i], b[j]) * inv);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) kab += std::exp(-detail::sq_dist(a[i], b[j]) * inv);
  return 2.0 * kaa / (static_cast<double>(m) * (m - 1)) +
         2.0 * kbb / (static_cast<double>(n) * (n - 1)) -
         2.0 * kab / (static_cast<double>(m) * n);
}

// Median pairwise distance (ignoring exact-zero pairs). Computed once on a
// reference set, then reused for every row of a sweep.
inline double median_heuristic_bandwidth(const std::vector<Tensor>& samples) {
  if (samples.size() < 2)
    throw ValidationError("median_heuristic_bandwidth: need >= 2 samples");
  std::vector<double> d2;
  d2.reserve(samples.size() * (samples.size() - 1) / 2);
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t j = i + 1; j < samples.size(); ++j) {
      const double d = detail::sq_dist(samples[i], samples[j]);
      if (d > 0.0) d2.push_back(d);
    }
  if (d2.empty())
    throw ValidationError("median_heuristic_bandwidth: all samples identical");
  std::nth_element(d2.begin(), d2.begin() + d2.size() / 2, d2.end());
  return std::sqrt(d2[d2.size() / 2]);
}

// Fraction of mixture components with at least one sample within
// radius_in_sds standard deviations of the component mean.
inline double mode_coverage(const std::vector<Tensor>& samples, const GaussianMixture& gm,
                            double radius_in_sds = 3.0) {
  if (!(radius_in_sds > 0.0)) throw ValidationError("mode_coverage: radius must be > 0");
  if (gm.components.empty()) throw ValidationError("mode_coverage: empty mixture");
  std::size_t hit = 0;
  for (const auto& comp : gm.components) {
    const double r2 = radius_in_sds * radius_in_sds * comp.variance;
    bool found = false;
    for (const auto& s : samples)
      if (detail::sq_dist(s, comp.mean) <= r2) {
        found = true;
        break;
      }
    hit += found ? 1 : 0;
  }
  return static_cast<double>(hit) / static_cast<double>(gm.components.size());
}

namespace detail {
inline void require_video(const Tensor& v, const char* who) {
  if (v.shape.size() != 4 || v.shape[1] != 1)
    throw ValidationError(std::string(who) + ": expected video [f,1,h,w], got " +
                          shape_str(v.shape));
}
}  // namespace detail

// Mean absolute difference between consecutive frames. Lower = smoother.
inline double flicker_score(const Tensor& video) {
  detail::require_video(video, "flicker_score");
  const std::size_t f = video.shape[0], px = video.shape[2] * video.shape[3];
  if (f < 2) throw ValidationError("flicker_score: need at least 2 frames");
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < f; ++i)
    for (std::size_t p = 0; p < px; ++p)
      s += std::abs(video.data[(i + 1) * px + p] - video.data[i * px + p]);
  return s / (static_cast<double>(f - 1) * px);
}

// Mean spatial gradient magnitude over forward differences.
inline double sharpness_proxy(const Tensor& video) {
  detail::require_video(video, "sharpness_proxy");
  const std::size_t f = video.shape[0], h = video.shape[2], w = video.shape[3];
  double s = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < f; ++i) {
    const double* fr = video.data.data() + i * h * w;
    for (std::size_t r = 0; r + 1 < h; ++r)
      for (std::size_t c = 0; c + 1 < w; ++c) {
        const double gx = fr[r * w + c + 1] - fr[r * w + c];
        const double gy = fr[(r + 1) * w + c] - fr[r * w + c];
        s += std::sqrt(gx * gx + gy * gy);
        ++count;
      }
  }
  return count ? s / count : 0.0;
}

namespace detail {
// Wrap a coordinate difference into [-period/2, period/2].
inline double wrap_delta(double d, double period) {
  d = std::fmod(d, period);
  if (d < -period / 2) d += period;
  if (d > period / 2) d -= period;
  return d;
}

// Circular (toroidal) centroid of one frame. Mass is min-subtracted so that
// adding a constant to all pixels changes nothing.
inline bool frame_centroid(const double* fr, std::size_t h, std::size_t w, double& cx,
                           double& cy) {
  double mn = fr[0];
  for (std::size_t p = 1; p < h * w; ++p) mn = std::min(mn, fr[p]);
  double total = 0.0, sx = 0.0, sy = 0.0, cxs = 0.0, cys = 0.0;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double m = fr[r * w + c] - mn;
      total += m;
      const double thx = 2.0 * M_PI * c / w;
      const double thy = 2.0 * M_PI * r / h;
      sx += m * std::sin(thx);
      cxs += m * std::cos(thx);
      sy += m * std::sin(thy);
      cys += m * std::cos(thy);
    }
  if (total < 1e-12) return false;
  cx = std::atan2(sx, cxs) * w / (2.0 * M_PI);
  cy = std::atan2(sy, cys) * h / (2.0 * M_PI);
  return true;
}
}  // namespace detail

// Mean per-frame displacement of the intensity centroid on the torus.
inline double dynamics_proxy(const Tensor& video) {
  detail::require_video(video, "dynamics_proxy");
  const std::size_t f = video.shape[0], h = video.shape[2], w = video.shape[3];
  if (f < 2) return 0.0;
  double s = 0.0;
  double px = 0.0, py = 0.0;
  bool have_prev = detail::frame_centroid(video.data.data(), h, w, px, py);
  for (std::size_t i = 1; i < f; ++i) {
    double cx = 0.0, cy = 0.0;
    const bool ok = detail::frame_centroid(video.data.data() + i * h * w, h, w, cx, cy);
    if (ok && have_prev) {
      const double dx = detail::wrap_delta(cx - px, static_cast<double>(w));
      const double dy = detail::wrap_delta(cy - py, static_cast<double>(h));
      s += std::sqrt(dx * dx + dy * dy);
    }
    if (ok) { px = cx; py = cy; have_prev = true; }
  }
  return s / static_cast<double>(f - 1);
}

// Per-probe cosine similarity between two epsilon functions, plus the mean.
using EpsProbeFn = std::function<Tensor(const Tensor& x_t, int t)>;

inline std::vector<double> alignment_cosines(const EpsProbeFn& a, const EpsProbeFn& b,
                                             const std::vector<std::pair<Tensor, int>>& probes) {
  if (probes.empty()) throw ValidationError("alignment_cosines: no probes");
  std::vector<double> out;
  out.reserve(probes.size());
  for (const auto& [x, t] : probes) {
    const Tensor ea = a(x, t), eb = b(x, t);
    require_same_shape(ea, eb, "alignment_cosines");
    const double na = norm(ea), nb = norm(eb);
    out.push_back((na > 0.0 && nb > 0.0) ? dot(ea, eb) / (na * nb) : 0.0);
  }
  return out;
}

inline double alignment_cosine(const EpsProbeFn& a, const EpsProbeFn& b,
                               const std::vector<std::pair<Tensor, int>>& probes) {
  const auto v = alignment_cosines(a, b, probes);
  double s = 0.0;
  for (double c : v) s += c;
  return s / static_cast<double>(v.size());
}

}  // namespace stg
