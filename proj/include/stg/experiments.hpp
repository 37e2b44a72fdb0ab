#pragma once

// Analytic-oracle experiments: the closed-form Gaussian-mixture denoiser stands
// in for a trained network so guidance claims can be checked quantitatively.
// Everything here is deterministic under the given seed.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stg/error.hpp"
#include "stg/metrics.hpp"
#include "stg/oracle.hpp"
#include "stg/sampler.hpp"
#include "stg/schedule.hpp"
#include "stg/tensor.hpp"

namespace stg {

// Mixtures backing each guidance branch of a sampler run.
struct OracleBranches {
  GaussianMixture cond;
  std::optional<GaussianMixture> uncond;
  std::optional<GaussianMixture> weak_joint;
  std::optional<GaussianMixture> weak_spatial;
  std::optional<GaussianMixture> weak_temporal;
};

inline DenoiserBinding bind_oracle(const OracleBranches& branches,
                                   const NoiseSchedule& sched) {
  validate_mixture(branches.cond);
  const std::size_t d = branches.cond.dim();
  auto check = [&](const std::optional<GaussianMixture>& gm, const char* name) {
    if (!gm) return false;
    validate_mixture(*gm);
    if (gm->dim() != d)
      throw ValidationError(std::string("bind_oracle: branch '") + name +
                            "' has dimension " + std::to_string(gm->dim()) +
                            ", conditional has " + std::to_string(d));
    return true;
  };
  DenoiserBinding b;
  b.has_uncond = check(branches.uncond, "uncond");
  b.has_weak_joint = check(branches.weak_joint, "weak_joint");
  b.has_weak_spatial = check(branches.weak_spatial, "weak_spatial");
  b.has_weak_temporal = check(branches.weak_temporal, "weak_temporal");
  b.eps = [branches, sched](const Tensor& x, int t, EpsBranch br) {
    const GaussianMixture* gm = &branches.cond;
    switch (br) {
      case EpsBranch::cond: break;
      case EpsBranch::uncond: gm = &*branches.uncond; break;
      case EpsBranch::weak_joint: gm = &*branches.weak_joint; break;
      case EpsBranch::weak_spatial: gm = &*branches.weak_spatial; break;
      case EpsBranch::weak_temporal: gm = &*branches.weak_temporal; break;
    }
    return noised_epsilon(*gm, x, t, sched);
  };
  return b;
}

inline GaussianMixture unit_gaussian_mixture(std::size_t dim = 1) {
  GaussianMixture gm;
  gm.components.push_back({1.0, Tensor::zeros({dim}), 1.0});
  return gm;
}

// --- score exactness against finite differences of the explicit log-density ---

struct ScoreCheckResult {
  double max_rel_err = 0.0;
  std::size_t points = 0;
};

// Compares noised_epsilon to -sqrt(1-abar) times a central finite difference
// of log_density_t at random (x, t). Relative error is ||diff|| / ||fd||
// with a 1e-8 denominator floor.
inline ScoreCheckResult score_fd_check(std::uint64_t seed,
                                       std::size_t points_per_dim = 100) {
  const NoiseSchedule sched = linear_schedule(200, 1e-4, 0.02);
  const double h = 1e-5;
  ScoreCheckResult res;
  for (std::size_t dim : {1u, 2u, 5u}) {
    RngStream rng = derive_stream(seed, dim);
    GaussianMixture gm;
    double wsum = 0.0;
    std::vector<double> raw;
    for (int i = 0; i < 3; ++i) {
      Tensor mean({dim});
      for (std::size_t j = 0; j < dim; ++j) mean[j] = -2.0 + 4.0 * rng.next_uniform();
      const double var = 0.3 + 1.2 * rng.next_uniform();
      const double w = rng.next_uniform();
      raw.push_back(w);
      wsum += w;
      gm.components.push_back({w, std::move(mean), var});
    }
    for (int i = 0; i < 3; ++i) gm.components[i].weight = raw[i] / wsum;
    validate_mixture(gm);

    for (std::size_t p = 0; p < points_per_dim; ++p) {
      Tensor x({dim});
      for (std::size_t j = 0; j < dim; ++j) x[j] = -3.0 + 6.0 * rng.next_uniform();
      const int t = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(sched.T));
      const Tensor eps = noised_epsilon(gm, x, t, sched);
      Tensor fd({dim});
      const double s = -std::sqrt(1.0 - sched.alpha_bar[t]);
      for (std::size_t j = 0; j < dim; ++j) {
        Tensor xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        fd[j] = s * (log_density_t(gm, xp, t, sched) - log_density_t(gm, xm, t, sched)) /
                (2.0 * h);
      }
      const double rel = norm(sub(eps, fd)) / std::max(norm(fd), 1e-8);
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.points;
    }
  }
  return res;
}

// --- Gaussian sharpening: guided chain vs the closed-form combinator ---

// Effective epsilon gain of inflate-variance guidance on the unit Gaussian:
// eps_tilde = g(t) * sqrt(1-abar) * x with g = 1 + w (1 - 1/(1 + (c-1) abar)).
inline double guided_unit_gain(double abar, double inflate_c, double w) {
  return 1.0 + w * (1.0 - 1.0 / (1.0 + (inflate_c - 1.0) * abar));
}

// Exact terminal variance of the guided ancestral chain on the unit Gaussian,
// by the per-step linear recursion v <- m_t^2 v + sigma_t^2. This is the
// chain's true fixed point; it is NOT the tilted-density variance that
// guided_terminal_variance returns (the ancestral sampler sharpens the mean
// each step but keeps the unguided step noise, so it lands lower).
inline double sharpening_recursion_variance(const NoiseSchedule& sched, double inflate_c,
                                            double w) {
  double v = 1.0;
  for (int t = sched.T - 1; t >= 0; --t) {
    const double g = guided_unit_gain(sched.alpha_bar[t], inflate_c, w);
    const double m = (1.0 - (1.0 - sched.alpha[t]) * g) / std::sqrt(sched.alpha[t]);
    v = m * m * v + (t > 0 ? sched.sigma_sq[t] : 0.0);
  }
  return v;
}

struct SharpeningResult {
  double closed_form_target = 0.0;  // variance of the tilted density
  double recursion_variance = 0.0;  // exact chain fixed point
  double chain_mean = 0.0;
  double chain_variance = 0.0;      // measured over the sampled chains
  std::size_t chains = 0;
};

inline SharpeningResult sharpening_experiment(std::size_t chains, std::uint64_t seed,
                                              double inflate_c = 2.0, double w = 1.0) {
  const NoiseSchedule sched = linear_schedule(200, 1e-4, 0.02);
  OracleBranches br;
  br.cond = unit_gaussian_mixture();
  br.weak_joint = weaken(br.cond, InflateVariance{inflate_c});

  SamplerRun run;
  run.sched = sched;
  run.spec.stg = StgJoint{w};
  run.binding = bind_oracle(br, sched);
  run.state_shape = {1};
  run.seed = seed;
  run.chains = static_cast<int>(chains);
  const SampleResult out = sample(run);

  SharpeningResult res;
  res.closed_form_target = guided_terminal_variance(1.0, inflate_c, w);
  res.recursion_variance = sharpening_recursion_variance(sched, inflate_c, w);
  res.chains = chains;
  double s1 = 0.0, s2 = 0.0;
  for (const Tensor& x : out.samples) {
    s1 += x[0];
    s2 += x[0] * x[0];
  }
  const double n = static_cast<double>(chains);
  res.chain_mean = s1 / n;
  res.chain_variance = s2 / n - res.chain_mean * res.chain_mean;
  return res;
}

// --- mode-coverage sweeps on the 8-mode class-conditioned 2-D mixture ---

// Two classes of four modes each. Class 0 is the sampling target; class 1
// contributes a tight "repulsor" mode near the target's straggler at (-1, 0)
// plus three far modes, so marginal-anchored guidance actively pushes mass
// away from the straggler while aligned weakening does not.
inline GaussianMixture coverage_mixture() {
  GaussianMixture gm;
  auto comp = [](double w, double x, double y, double var) {
    return MixtureComponent{w, Tensor({2}, {x, y}), var};
  };
  gm.components = {
      comp(0.125, -1.0, 0.0, 0.16),  comp(0.125, 5.0, 0.5, 0.16),
      comp(0.125, 7.0, -0.5, 0.16),  comp(0.125, 9.0, 0.5, 0.16),
      comp(0.10, -1.5, 0.0, 0.06),   comp(0.4 / 3, -8.0, 0.5, 0.16),
      comp(0.4 / 3, -10.0, -0.5, 0.16), comp(0.4 / 3, -12.0, 0.5, 0.16),
  };
  gm.class_labels = std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1};
  validate_mixture(gm);
  return gm;
}

// Schedule for the coverage experiments: wider beta range than the default so
// 200 steps fully mix a [-12, 9] square.
inline NoiseSchedule coverage_schedule() { return linear_schedule(200, 1e-4, 0.05); }

struct CoverageArm {
  double scale = 0.0;
  double coverage = 0.0;            // over the 4 target-class modes
  double straggler_fraction = 0.0;  // sample mass within 3 sd of (-1, 0)
  std::vector<std::size_t> per_mode;
};

struct CoverageReport {
  std::vector<CoverageArm> cfg_analog;  // weak = merge_to_marginal
  std::vector<CoverageArm> aligned;     // weak = inflate_variance(2) of the target
  std::vector<CoverageArm> matched;     // weak = merge_to_marginal(inflate_variance(2))
  double bandwidth = 0.0;
  double mmd_base = 0.0;
  double mmd_aligned_last = 0.0;
  double mmd_cfg_last = 0.0;
  std::size_t n = 0;
};

namespace detail {

inline CoverageArm coverage_arm(const std::vector<Tensor>& samples,
                                const GaussianMixture& target, double scale) {
  CoverageArm arm;
  arm.scale = scale;
  arm.coverage = mode_coverage(samples, target, 3.0);
  arm.per_mode.resize(target.components.size(), 0);
  for (std::size_t c = 0; c < target.components.size(); ++c) {
    const double r2 = 9.0 * target.components[c].variance;
    for (const Tensor& s : samples)
      if (sq_dist(s, target.components[c].mean) <= r2) ++arm.per_mode[c];
  }
  arm.straggler_fraction =
      static_cast<double>(arm.per_mode[0]) / static_cast<double>(samples.size());
  return arm;
}

}  // namespace detail

// Runs the three guidance families over their scale grids with the production
// sampler and the analytic oracle. Same seed for every arm, so rows are
// paired comparisons. Also reports MMD-to-true-conditional for the baseline,
// the largest aligned scale, and the largest CFG-analog scale (bandwidth:
// median heuristic on the reference samples, frozen across rows).
inline CoverageReport coverage_experiment(std::size_t n, std::uint64_t seed) {
  if (n < 2000) throw ValidationError("coverage_experiment: need n >= 2000");
  const NoiseSchedule sched = coverage_schedule();
  const GaussianMixture full = coverage_mixture();
  const GaussianMixture cond = condition_on_class(full, 0);
  const GaussianMixture marginal = weaken(full, MergeToMarginal{});
  const GaussianMixture aligned_weak = weaken(cond, InflateVariance{2.0});
  const GaussianMixture matched_weak =
      weaken(weaken(full, InflateVariance{2.0}), MergeToMarginal{});

  auto run_arm = [&](const GuidanceSpec& spec, const OracleBranches& br) {
    SamplerRun run;
    run.sched = sched;
    run.spec = spec;
    run.binding = bind_oracle(br, sched);
    run.state_shape = {2};
    run.seed = seed;
    run.chains = static_cast<int>(n);
    return sample(run).samples;
  };

  CoverageReport rep;
  rep.n = n;

  std::vector<Tensor> base_samples, aligned_last, cfg_last;
  for (double lam : {0.0, 1.0, 2.0, 4.0, 12.0, 32.0}) {
    OracleBranches br;
    br.cond = cond;
    br.uncond = marginal;
    GuidanceSpec spec;
    spec.cfg_scale = lam;
    auto samples = run_arm(spec, br);
    rep.cfg_analog.push_back(detail::coverage_arm(samples, cond, lam));
    if (lam == 0.0) base_samples = samples;
    cfg_last = std::move(samples);
  }
  for (double w : {0.0, 1.0, 2.0, 4.0}) {
    OracleBranches br;
    br.cond = cond;
    br.weak_joint = aligned_weak;
    GuidanceSpec spec;
    spec.stg = StgJoint{w};
    auto samples = run_arm(spec, br);
    rep.aligned.push_back(detail::coverage_arm(samples, cond, w));
    aligned_last = std::move(samples);
  }
  for (double w : {2.0, 12.0}) {
    OracleBranches br;
    br.cond = cond;
    br.weak_joint = matched_weak;
    GuidanceSpec spec;
    spec.stg = StgJoint{w};
    rep.matched.push_back(detail::coverage_arm(run_arm(spec, br), cond, w));
  }

  RngStream ref_rng = derive_stream(seed, 0x7265666d6d64ULL);  // independent of arm streams
  const std::vector<Tensor> ref = sample_mixture(cond, 2000, ref_rng);
  rep.bandwidth = median_heuristic_bandwidth(
      std::vector<Tensor>(ref.begin(), ref.begin() + 500));
  auto head = [](const std::vector<Tensor>& v, std::size_t k) {
    return std::vector<Tensor>(v.begin(), v.begin() + std::min(k, v.size()));
  };
  rep.mmd_base = mmd_rbf(head(base_samples, 2000), ref, rep.bandwidth);
  rep.mmd_aligned_last = mmd_rbf(head(aligned_last, 2000), ref, rep.bandwidth);
  rep.mmd_cfg_last = mmd_rbf(head(cfg_last, 2000), ref, rep.bandwidth);
  return rep;
}

// --- restart contract on the unit Gaussian ---

struct RestartCheckResult {
  bool k0_bitwise = false;         // K=0 equals the plain run exactly
  double mean_forward = 0.0, var_forward = 0.0;    // K=2, forward_renoise
  double mean_gap = 0.0, var_gap = 0.0;            // K=2, variance_gap
  std::size_t chains = 0;
};

inline RestartCheckResult restart_experiment(std::size_t chains, std::uint64_t seed) {
  const NoiseSchedule sched = linear_schedule(200, 1e-4, 0.02);
  OracleBranches br;
  br.cond = unit_gaussian_mixture();

  SamplerRun run;
  run.sched = sched;
  run.binding = bind_oracle(br, sched);
  run.state_shape = {1};
  run.seed = seed;

  RestartConfig rc;
  rc.t_min = 150;
  rc.t_max = 190;

  RestartCheckResult res;
  res.chains = chains;

  {  // bitwise K=0 identity on a handful of chains
    run.chains = 16;
    const SampleResult plain = sample(run);
    SamplerRun with0 = run;
    rc.K = 0;
    with0.restart = rc;
    const SampleResult zero = sample_restart(with0);
    res.k0_bitwise = true;
    for (int c = 0; c < run.chains; ++c)
      if (plain.samples[c].data != zero.samples[c].data) res.k0_bitwise = false;
  }

  auto moments = [&](RestartNoise kind, double& mean_out, double& var_out) {
    SamplerRun r = run;
    r.chains = static_cast<int>(chains);
    rc.K = 2;
    rc.noise = kind;
    r.restart = rc;
    const SampleResult out = sample_restart(r);
    double s1 = 0.0, s2 = 0.0;
    for (const Tensor& x : out.samples) {
      s1 += x[0];
      s2 += x[0] * x[0];
    }
    const double nn = static_cast<double>(chains);
    mean_out = s1 / nn;
    var_out = s2 / nn - (s1 / nn) * (s1 / nn);
  };
  moments(RestartNoise::forward_renoise, res.mean_forward, res.var_forward);
  moments(RestartNoise::variance_gap, res.mean_gap, res.var_gap);
  return res;
}

}  // namespace stg
