#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "stg/error.hpp"
#include "stg/rng.hpp"
#include "stg/schedule.hpp"
#include "stg/tensor.hpp"

namespace stg {

struct MixtureComponent {
  double weight = 0.0;
  Tensor mean;        // [D]
  double variance = 0.0;  // isotropic
};

// Mixture of isotropic Gaussians with optional per-component class labels.
// Under the forward process the marginal at step t stays a mixture with
// means sqrt(abar_t) mu_i and variances 1 - abar_t + abar_t sigma_i^2, so the
// exact score (and epsilon-prediction) is available at every noise level.
struct GaussianMixture {
  std::vector<MixtureComponent> components;
  std::optional<std::vector<int>> class_labels;  // component -> class

  std::size_t dim() const { return components.empty() ? 0 : components[0].mean.size(); }
};

inline void validate_mixture(const GaussianMixture& gm) {
  if (gm.components.empty()) throw ValidationError("mixture: no components");
  const std::size_t d = gm.components[0].mean.size();
  double wsum = 0.0;
  for (std::size_t i = 0; i < gm.components.size(); ++i) {
    const auto& c = gm.components[i];
    if (!(c.weight > 0.0))
      throw ValidationError("mixture: component " + std::to_string(i) + " weight must be > 0");
    if (!(c.variance > 0.0))
      throw ValidationError("mixture: component " + std::to_string(i) + " variance must be > 0");
    if (c.mean.size() != d)
      throw ValidationError("mixture: component " + std::to_string(i) + " dimension mismatch");
    wsum += c.weight;
  }
  if (std::abs(wsum - 1.0) > 1e-12)
    throw ValidationError("mixture: weights sum to " + std::to_string(wsum) + ", expected 1");
  if (gm.class_labels && gm.class_labels->size() != gm.components.size())
    throw ValidationError("mixture: class_labels length mismatch");
}

// log p_t(x) for the noised mixture, evaluated explicitly (used directly by
// the finite-difference tests, and internally by noised_epsilon).
inline double log_density_t(const GaussianMixture& gm, const Tensor& x, int t,
                            const NoiseSchedule& sched) {
  require_step(sched, t, "log_density_t");
  const double abar = sched.alpha_bar[t];
  const std::size_t d = x.size();
  const double half_log_2pi = 0.5 * std::log(2.0 * M_PI);
  double mx = -1e300;
  std::vector<double> terms(gm.components.size());
  for (std::size_t i = 0; i < gm.components.size(); ++i) {
    const auto& c = gm.components[i];
    const double s2 = 1.0 - abar + abar * c.variance;
    double d2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = x.data[j] - std::sqrt(abar) * c.mean.data[j];
      d2 += diff * diff;
    }
    terms[i] = std::log(c.weight) - 0.5 * d2 / s2 -
               static_cast<double>(d) * (half_log_2pi + 0.5 * std::log(s2));
    mx = std::max(mx, terms[i]);
  }
  double sum = 0.0;
  for (double v : terms) sum += std::exp(v - mx);
  return mx + std::log(sum);
}

// Exact epsilon-prediction: eps = -sqrt(1 - abar_t) * grad_x log p_t(x).
// Responsibilities are computed with log-sum-exp so far-tail x stay finite.
inline Tensor noised_epsilon(const GaussianMixture& gm, const Tensor& x, int t,
                             const NoiseSchedule& sched) {
  require_step(sched, t, "noised_epsilon");
  const double abar = sched.alpha_bar[t];
  if (!(abar > 0.0) || abar > 1.0)
    throw ValidationError("noised_epsilon: alpha_bar must be in (0, 1]");
  const std::size_t d = x.size();
  if (d != gm.dim())
    throw ValidationError("noised_epsilon: point dim " + std::to_string(d) +
                          " does not match mixture dim " + std::to_string(gm.dim()));
  const std::size_t m = gm.components.size();
  const double sqrt_abar = std::sqrt(abar);

  std::vector<double> logp(m);
  double mx = -1e300;
  for (std::size_t i = 0; i < m; ++i) {
    const auto& c = gm.components[i];
    const double s2 = 1.0 - abar + abar * c.variance;
    double d2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = x.data[j] - sqrt_abar * c.mean.data[j];
      d2 += diff * diff;
    }
    logp[i] = std::log(c.weight) - 0.5 * d2 / s2 -
              0.5 * static_cast<double>(d) * std::log(s2);
    mx = std::max(mx, logp[i]);
  }
  double denom = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    logp[i] = std::exp(logp[i] - mx);
    denom += logp[i];
  }

  Tensor score({d});
  for (std::size_t i = 0; i < m; ++i) {
    const auto& c = gm.components[i];
    const double s2 = 1.0 - abar + abar * c.variance;
    const double r = logp[i] / denom;
    for (std::size_t j = 0; j < d; ++j)
      score.data[j] += r * (sqrt_abar * c.mean.data[j] - x.data[j]) / s2;
  }
  Tensor eps({d});
  const double s = -std::sqrt(1.0 - abar);
  for (std::size_t j = 0; j < d; ++j) eps.data[j] = s * score.data[j];
  check_finite(eps, "noised_epsilon");
  return eps;
}

// Sub-mixture for one class, weights renormalized.
inline GaussianMixture condition_on_class(const GaussianMixture& gm, int class_id) {
  if (!gm.class_labels)
    throw ValidationError("condition_on_class: mixture has no class labels");
  GaussianMixture out;
  double wsum = 0.0;
  for (std::size_t i = 0; i < gm.components.size(); ++i)
    if ((*gm.class_labels)[i] == class_id) {
      out.components.push_back(gm.components[i]);
      wsum += gm.components[i].weight;
    }
  if (out.components.empty())
    throw ValidationError("condition_on_class: no components with class " +
                          std::to_string(class_id));
  for (auto& c : out.components) c.weight /= wsum;
  return out;
}

struct InflateVariance { double c = 2.0; };
struct MergeToMarginal {};
struct DropCondition {};
using WeakenMode = std::variant<InflateVariance, MergeToMarginal, DropCondition>;

// Builds a weak model from a reference mixture.
//   inflate_variance(c): every component variance scaled by c > 1 (labels kept),
//     the "same distribution, blurrier" weak model.
//   merge_to_marginal: forget the class structure of a labeled mixture; the
//     result is the unconditional marginal, the weak model CFG implicitly uses.
//   drop_condition: strip labels without touching components or weights.
inline GaussianMixture weaken(const GaussianMixture& gm, const WeakenMode& mode) {
  GaussianMixture out = gm;
  if (const auto* inf = std::get_if<InflateVariance>(&mode)) {
    if (!(inf->c > 1.0))
      throw ValidationError("weaken: inflate_variance factor must be > 1, got " +
                            std::to_string(inf->c));
    for (auto& c : out.components) c.variance *= inf->c;
    return out;
  }
  if (std::holds_alternative<MergeToMarginal>(mode)) {
    if (!gm.class_labels)
      throw ValidationError("weaken: merge_to_marginal needs a class-labeled mixture");
    out.class_labels.reset();
    return out;
  }
  out.class_labels.reset();
  return out;
}

// Effective variance of guidance on a single-Gaussian main/weak pair at the
// data level: 1 / ((1+w)/s2 - w/sb2). Errors when the combined precision is
// not positive (scale too large for this pair).
inline double guided_terminal_variance(double sigma_sq, double sigma_b_sq, double w) {
  if (!(sigma_sq > 0.0) || !(sigma_b_sq > 0.0))
    throw ValidationError("guided_terminal_variance: variances must be > 0");
  const double prec = (1.0 + w) / sigma_sq - w / sigma_b_sq;
  if (!(prec > 0.0))
    throw ValidationError("guided_terminal_variance: non-positive effective precision " +
                          std::to_string(prec) + " (scale too large for this pair)");
  return 1.0 / prec;
}

inline Tensor sample_mixture_point(const GaussianMixture& gm, RngStream& rng) {
  const double u = rng.next_uniform();
  double acc = 0.0;
  std::size_t pick = gm.components.size() - 1;
  for (std::size_t i = 0; i < gm.components.size(); ++i) {
    acc += gm.components[i].weight;
    if (u <= acc) { pick = i; break; }
  }
  const auto& c = gm.components[pick];
  const double sd = std::sqrt(c.variance);
  Tensor x = gaussian(rng, c.mean.shape);
  for (std::size_t j = 0; j < x.size(); ++j) x.data[j] = c.mean.data[j] + sd * x.data[j];
  return x;
}

inline std::vector<Tensor> sample_mixture(const GaussianMixture& gm, std::size_t n,
                                          RngStream& rng) {
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sample_mixture_point(gm, rng));
  return out;
}

}  // namespace stg
