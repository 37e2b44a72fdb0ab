#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "stg/error.hpp"
#include "stg/rng.hpp"
#include "stg/tensor.hpp"

namespace stg {

enum class VarianceKind { beta_tilde, beta };

// Discretized variance-preserving diffusion. Index t runs 0..T-1 with t=T-1
// the noisiest level; the reverse chain starts from N(0, I) at that level.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // per-step noise rate
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // cumulative product of alpha
  std::vector<double> sigma_sq;   // reverse-step variance, beta or beta_tilde
  VarianceKind kind = VarianceKind::beta_tilde;
};

inline void require_step(const NoiseSchedule& sched, int t, const char* who) {
  if (t < 0 || t >= sched.T)
    throw ValidationError(std::string(who) + ": step " + std::to_string(t) +
                          " outside [0, " + std::to_string(sched.T) + ")");
}

inline NoiseSchedule linear_schedule(int T, double beta_start, double beta_end,
                                     VarianceKind kind = VarianceKind::beta_tilde) {
  if (T < 2) throw ValidationError("linear_schedule: T must be >= 2, got " + std::to_string(T));
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
    throw ValidationError("linear_schedule: need 0 < beta_start <= beta_end < 1, got [" +
                          std::to_string(beta_start) + ", " + std::to_string(beta_end) + "]");
  NoiseSchedule s;
  s.T = T;
  s.kind = kind;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  s.sigma_sq.resize(T);
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    s.beta[t] = beta_start + (beta_end - beta_start) * static_cast<double>(t) /
                                 static_cast<double>(T - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    const double abar_prev = prod;
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
    s.sigma_sq[t] = (kind == VarianceKind::beta)
                        ? s.beta[t]
                        : (1.0 - abar_prev) / (1.0 - s.alpha_bar[t]) * s.beta[t];
  }
  return s;
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise
inline Tensor forward_marginal(const Tensor& x0, int t, const Tensor& noise,
                               const NoiseSchedule& sched) {
  require_step(sched, t, "forward_marginal");
  require_same_shape(x0, noise, "forward_marginal");
  const double a = std::sqrt(sched.alpha_bar[t]);
  const double b = std::sqrt(1.0 - sched.alpha_bar[t]);
  Tensor out(x0.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a * x0.data[i] + b * noise.data[i];
  return out;
}

// One reverse step. Mean is (x_t - ((1-alpha_t)/sqrt(1-abar_t)) eps) / sqrt(alpha_t);
// fresh noise sqrt(sigma_sq_t) z is added for t > 0, the final step is noiseless.
inline Tensor ancestral_step(const Tensor& x_t, const Tensor& eps_hat, int t,
                             const NoiseSchedule& sched, RngStream& rng) {
  require_step(sched, t, "ancestral_step");
  require_same_shape(x_t, eps_hat, "ancestral_step");
  const double coef = (1.0 - sched.alpha[t]) / std::sqrt(1.0 - sched.alpha_bar[t]);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha[t]);
  Tensor out(x_t.shape);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] = inv_sqrt_alpha * (x_t.data[i] - coef * eps_hat.data[i]);
  if (t > 0) {
    const double sd = std::sqrt(sched.sigma_sq[t]);
    const Tensor z = gaussian(rng, x_t.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += sd * z.data[i];
  }
  return out;
}

// x0_hat = (x_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t)
inline Tensor one_step_denoise(const Tensor& x_t, const Tensor& eps_hat, int t,
                               const NoiseSchedule& sched) {
  require_step(sched, t, "one_step_denoise");
  require_same_shape(x_t, eps_hat, "one_step_denoise");
  const double abar = sched.alpha_bar[t];
  if (!(abar > 0.0))
    throw ValidationError("one_step_denoise: alpha_bar[" + std::to_string(t) +
                          "] = 0, inversion undefined");
  const double a = std::sqrt(1.0 - abar);
  const double inv = 1.0 / std::sqrt(abar);
  Tensor out(x_t.shape);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] = inv * (x_t.data[i] - a * eps_hat.data[i]);
  return out;
}

}  // namespace stg
