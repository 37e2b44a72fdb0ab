#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stg/error.hpp"
#include "stg/guidance.hpp"
#include "stg/parallel.hpp"
#include "stg/rng.hpp"
#include "stg/schedule.hpp"
#include "stg/tensor.hpp"

namespace stg {

enum class EpsBranch { cond, uncond, weak_joint, weak_spatial, weak_temporal };

inline const char* branch_name(EpsBranch b) {
  switch (b) {
    case EpsBranch::cond: return "cond";
    case EpsBranch::uncond: return "uncond";
    case EpsBranch::weak_joint: return "weak_joint";
    case EpsBranch::weak_spatial: return "weak_spatial";
    case EpsBranch::weak_temporal: return "weak_temporal";
  }
  return "?";
}

// A denoiser bound to a run: predicts epsilon for whichever branches it
// advertises. Must be safe to call concurrently (read-only weights).
struct DenoiserBinding {
  std::function<Tensor(const Tensor& x_t, int t, EpsBranch)> eps;
  bool has_uncond = false;
  bool has_weak_joint = false;
  bool has_weak_spatial = false;
  bool has_weak_temporal = false;
};

enum class RestartNoise { variance_gap, forward_renoise };

struct RestartConfig {
  int t_min = 0;
  int t_max = 0;
  int K = 0;
  RestartNoise noise = RestartNoise::forward_renoise;
};

inline void validate_restart(const RestartConfig& r, int T) {
  if (!(0 <= r.t_min && r.t_min < r.t_max && r.t_max < T))
    throw ValidationError("restart: need 0 <= t_min < t_max < T, got t_min=" +
                          std::to_string(r.t_min) + " t_max=" + std::to_string(r.t_max) +
                          " T=" + std::to_string(T));
  if (r.K < 0) throw ValidationError("restart: K must be >= 0");
}

struct TraceRecord {
  int t = 0;
  int segment = 0;  // 0 = outer pass, k >= 1 = k-th restart pass
  std::optional<Tensor> x_t;
  std::optional<BranchSet> branches;
  Tensor eps_tilde;
};

struct SampleTrace {
  std::vector<TraceRecord> records;
};

struct SamplerRun {
  NoiseSchedule sched;
  GuidanceSpec spec;
  std::optional<RestartConfig> restart;
  DenoiserBinding binding;
  Shape state_shape;
  std::uint64_t seed = 0;
  int chains = 1;
  bool capture_trace = false;
  bool capture_branches = false;
  int trace_stride = 0;  // 0 picks max(1, T/10)
};

struct SampleResult {
  std::vector<Tensor> samples;      // one per chain
  std::vector<SampleTrace> traces;  // empty unless capture_trace
};

namespace detail {

// Stream purposes per chain. Restart noise (the jump AND every step inside a
// restart pass) lives on its own stream so that K=0 is bit-identical to the
// plain run and outer-loop draws do not depend on K.
inline RngStream chain_stream(std::uint64_t seed, int chain, int purpose) {
  return derive_stream(seed, static_cast<std::uint64_t>(chain) * 4 + purpose);
}
constexpr int kPurposeInit = 0;
constexpr int kPurposeStep = 1;
constexpr int kPurposeRestart = 2;

inline bool spec_needs(const GuidanceSpec& spec, EpsBranch b) {
  switch (b) {
    case EpsBranch::cond: return true;
    case EpsBranch::uncond: return spec.cfg_scale != 0.0;
    case EpsBranch::weak_joint: {
      const auto* j = std::get_if<StgJoint>(&spec.stg);
      return j && j->w != 0.0;
    }
    case EpsBranch::weak_spatial:
    case EpsBranch::weak_temporal: {
      const auto* f = std::get_if<StgFactorized>(&spec.stg);
      return f && (f->w1 != 0.0 || f->w2 != 0.0);
    }
  }
  return false;
}

inline void require_branch(const DenoiserBinding& binding, EpsBranch b) {
  const bool ok = (b == EpsBranch::cond) ||
                  (b == EpsBranch::uncond && binding.has_uncond) ||
                  (b == EpsBranch::weak_joint && binding.has_weak_joint) ||
                  (b == EpsBranch::weak_spatial && binding.has_weak_spatial) ||
                  (b == EpsBranch::weak_temporal && binding.has_weak_temporal);
  if (!ok)
    throw ValidationError(std::string("sampler: guidance needs branch '") + branch_name(b) +
                          "' but the denoiser binding does not provide it");
}

}  // namespace detail

// Evaluates exactly the branches the guidance settings need and combines them.
inline BranchSet eval_branches(const DenoiserBinding& binding, const GuidanceSpec& spec,
                               const Tensor& x, int t) {
  BranchSet b;
  b.cond = binding.eps(x, t, EpsBranch::cond);
  for (EpsBranch br : {EpsBranch::uncond, EpsBranch::weak_joint, EpsBranch::weak_spatial,
                       EpsBranch::weak_temporal}) {
    if (!detail::spec_needs(spec, br)) continue;
    detail::require_branch(binding, br);
    Tensor e = binding.eps(x, t, br);
    switch (br) {
      case EpsBranch::uncond: b.uncond = std::move(e); break;
      case EpsBranch::weak_joint: b.weak_joint = std::move(e); break;
      case EpsBranch::weak_spatial: b.weak_spatial = std::move(e); break;
      case EpsBranch::weak_temporal: b.weak_temporal = std::move(e); break;
      default: break;
    }
  }
  return b;
}

namespace detail {

inline void run_one_chain(const SamplerRun& run, int chain, Tensor& out_sample,
                          SampleTrace* trace) {
  const NoiseSchedule& sched = run.sched;
  const int T = sched.T;
  const int stride = run.trace_stride > 0 ? run.trace_stride : std::max(1, T / 10);

  RngStream init_rng = chain_stream(run.seed, chain, kPurposeInit);
  RngStream step_rng = chain_stream(run.seed, chain, kPurposeStep);
  RngStream restart_rng = chain_stream(run.seed, chain, kPurposeRestart);

  Tensor x = gaussian(init_rng, run.state_shape);

  auto guided_step = [&](int t, int segment, RngStream& rng) {
    BranchSet branches = eval_branches(run.binding, run.spec, x, t);
    Tensor eps_tilde = compose_cfg_stg(branches, run.spec);
    if (trace && (t % stride == 0 || t == T - 1)) {
      TraceRecord rec;
      rec.t = t;
      rec.segment = segment;
      rec.x_t = x;
      if (run.capture_branches) rec.branches = branches;
      rec.eps_tilde = eps_tilde;
      trace->records.push_back(std::move(rec));
    }
    x = ancestral_step(x, eps_tilde, t, sched, rng);
  };

  for (int t = T - 1; t >= 0; --t) {
    guided_step(t, 0, step_rng);
    if (run.restart && t == run.restart->t_min) {
      const RestartConfig& rc = *run.restart;
      for (int k = 0; k < rc.K; ++k) {
        if (rc.noise == RestartNoise::variance_gap) {
          const double gap = sched.alpha_bar[rc.t_min] - sched.alpha_bar[rc.t_max];
          const Tensor z = gaussian(restart_rng, run.state_shape);
          axpy(x, std::sqrt(gap), z);
        } else {
          const double ratio = sched.alpha_bar[rc.t_max] / sched.alpha_bar[rc.t_min];
          const Tensor z = gaussian(restart_rng, run.state_shape);
          const double a = std::sqrt(ratio), bcoef = std::sqrt(1.0 - ratio);
          for (std::size_t i = 0; i < x.size(); ++i)
            x.data[i] = a * x.data[i] + bcoef * z.data[i];
        }
        for (int t2 = rc.t_max; t2 >= rc.t_min; --t2) guided_step(t2, k + 1, restart_rng);
      }
    }
  }
  check_finite(x, "sample");
  out_sample = std::move(x);
}

}  // namespace detail

// Full reverse pass over all chains. Chains own disjoint RNG streams, so the
// result for chain c does not depend on how many chains run beside it.
inline SampleResult sample(const SamplerRun& run) {
  if (run.chains < 1) throw ValidationError("sampler: chains must be >= 1");
  if (run.sched.T < 2) throw ValidationError("sampler: schedule not initialized");
  if (run.restart) validate_restart(*run.restart, run.sched.T);
  validate_guidance_spec(run.spec);

  SampleResult res;
  res.samples.resize(run.chains);
  if (run.capture_trace) res.traces.resize(run.chains);
  parallel_for(static_cast<std::size_t>(run.chains), [&](std::size_t c) {
    detail::run_one_chain(run, static_cast<int>(c),
                          res.samples[c], run.capture_trace ? &res.traces[c] : nullptr);
  });
  return res;
}

inline SampleResult sample_restart(const SamplerRun& run) {
  if (!run.restart) throw ValidationError("sample_restart: run has no restart config");
  return sample(run);
}

// x0 estimates per branch at the listed steps, along chain 0 of the run.
// Emits the raw branches the guidance settings use plus the per-family combinations.
struct OneStepPrediction {
  int t = 0;
  std::vector<std::pair<std::string, Tensor>> x0_by_branch;
};

inline std::vector<OneStepPrediction> capture_one_step_predictions(
    const SamplerRun& run, const std::vector<int>& t_list) {
  for (int t : t_list) require_step(run.sched, t, "capture_one_step_predictions");
  std::vector<OneStepPrediction> out;
  if (t_list.empty()) return out;

  const NoiseSchedule& sched = run.sched;
  const int T = sched.T;
  RngStream init_rng = detail::chain_stream(run.seed, 0, detail::kPurposeInit);
  RngStream step_rng = detail::chain_stream(run.seed, 0, detail::kPurposeStep);
  Tensor x = gaussian(init_rng, run.state_shape);

  for (int t = T - 1; t >= 0; --t) {
    BranchSet branches = eval_branches(run.binding, run.spec, x, t);
    Tensor eps_tilde = compose_cfg_stg(branches, run.spec);
    if (std::find(t_list.begin(), t_list.end(), t) != t_list.end()) {
      OneStepPrediction pred;
      pred.t = t;
      auto emit = [&](const std::string& name, const Tensor& e) {
        pred.x0_by_branch.emplace_back(name, one_step_denoise(x, e, t, sched));
      };
      emit("cond", branches.cond);
      if (branches.uncond) emit("uncond", *branches.uncond);
      if (branches.weak_joint) emit("weak_joint", *branches.weak_joint);
      if (branches.weak_spatial) emit("weak_spatial", *branches.weak_spatial);
      if (branches.weak_temporal) emit("weak_temporal", *branches.weak_temporal);
      if (branches.uncond)
        emit("cfg", cfg_combine(branches.cond, *branches.uncond, run.spec.cfg_scale));
      if (const auto* j = std::get_if<StgJoint>(&run.spec.stg); j && branches.weak_joint)
        emit("stg", stg_combine(branches.cond, *branches.weak_joint, j->w));
      if (const auto* f = std::get_if<StgFactorized>(&run.spec.stg);
          f && branches.weak_spatial && branches.weak_temporal)
        emit("stg", f->orthogonalize
                        ? stg_orthogonalized(branches.cond, *branches.weak_spatial,
                                             *branches.weak_temporal, f->w1, f->w2)
                        : stg_factorized(branches.cond, *branches.weak_spatial,
                                         *branches.weak_temporal, f->w1, f->w2));
      emit("guided", eps_tilde);
      out.push_back(std::move(pred));
    }
    x = ancestral_step(x, eps_tilde, t, sched, step_rng);
  }
  return out;
}

}  // namespace stg
