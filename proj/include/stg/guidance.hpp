#pragma once

#include <optional>
#include <string>
#include <variant>

#include "stg/error.hpp"
#include "stg/tensor.hpp"

namespace stg {

enum class Axis { spatial, temporal, joint };
enum class PerturbMode { none, residual_skip, attention_skip, attention_blur };

// How to degrade the network into its own weak model. `layers` lists the
// blocks to hit; `axis` picks the attention sub-block in factorized mode.
// With residual_skip the whole listed layer becomes the identity, so `axis`
// is validated but has no effect there. materialize_identity routes
// attention_skip through an explicit identity attention matrix instead of
// bypassing the softmax; the two are equivalent and the flag exists so that
// equivalence can be asserted.
struct PerturbationConfig {
  PerturbMode mode = PerturbMode::none;
  std::vector<int> layers;
  Axis axis = Axis::spatial;
  double sigma_blur = 0.0;  // <= 0 selects the full-row-width default
  bool materialize_identity = false;
};

struct StgOff {};
struct StgJoint { double w = 0.0; };
struct StgFactorized {
  double w1 = 0.0;
  double w2 = 0.0;
  bool orthogonalize = false;
};
using StgSetting = std::variant<StgOff, StgJoint, StgFactorized>;

// All guidance knobs for one run. perturb drives the joint weak branch (or,
// in factorized mode, the spatial one); perturb_temporal drives the temporal
// weak branch. Oracle-backed runs ignore both and use a weakened mixture.
struct GuidanceSpec {
  double cfg_scale = 0.0;
  StgSetting stg = StgOff{};
  double rescale = 0.0;
  PerturbationConfig perturb;
  PerturbationConfig perturb_temporal;
};

inline void validate_guidance_spec(const GuidanceSpec& spec) {
  if (spec.cfg_scale < 0.0)
    throw ValidationError("guidance: cfg_scale must be >= 0");
  if (spec.rescale < 0.0 || spec.rescale > 1.0)
    throw ValidationError("guidance: rescale must be in [0, 1], got " +
                          std::to_string(spec.rescale));
}

// eps + lambda (eps - eps_uncond)
inline Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double lambda) {
  require_same_shape(eps_cond, eps_uncond, "cfg_combine");
  Tensor out = eps_cond;
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] += lambda * (eps_cond.data[i] - eps_uncond.data[i]);
  return out;
}

// eps + w (eps - eps_weak)
inline Tensor stg_combine(const Tensor& eps, const Tensor& eps_weak, double w) {
  require_same_shape(eps, eps_weak, "stg_combine");
  Tensor out = eps;
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] += w * (eps.data[i] - eps_weak.data[i]);
  return out;
}

// eps + w1 (eps - eps_s) + w2 (eps - eps_t)
inline Tensor stg_factorized(const Tensor& eps, const Tensor& eps_s, const Tensor& eps_t,
                             double w1, double w2) {
  require_same_shape(eps, eps_s, "stg_factorized");
  require_same_shape(eps, eps_t, "stg_factorized");
  Tensor out = eps;
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] += w1 * (eps.data[i] - eps_s.data[i]) + w2 * (eps.data[i] - eps_t.data[i]);
  return out;
}

// Projects the temporal delta off the spatial one before combining, so the
// two terms push in independent directions. A zero spatial delta leaves the
// temporal delta unprojected (the only continuous choice).
inline Tensor stg_orthogonalized(const Tensor& eps, const Tensor& eps_s, const Tensor& eps_t,
                                 double w1, double w2) {
  require_same_shape(eps, eps_s, "stg_orthogonalized");
  require_same_shape(eps, eps_t, "stg_orthogonalized");
  const Tensor ds = sub(eps, eps_s);
  Tensor dt = sub(eps, eps_t);
  const double ds2 = dot(ds, ds);
  if (ds2 > 0.0) axpy(dt, -dot(ds, dt) / ds2, ds);
  Tensor out = eps;
  axpy(out, w1, ds);
  axpy(out, w2, dt);
  return out;
}

// factor = rescale * (std(base)/std(guided)) + (1 - rescale); output = guided * factor.
// Standard deviation is the population value over all elements of the one
// sample, computed independently per call (one call per batch element).
inline Tensor rescale_output(const Tensor& eps_base, const Tensor& eps_guided, double rescale) {
  require_same_shape(eps_base, eps_guided, "rescale_output");
  if (rescale == 0.0) return eps_guided;
  if (rescale < 0.0 || rescale > 1.0)
    throw ValidationError("rescale_output: rescale must be in [0, 1]");
  const double sg = stddev(eps_guided);
  if (!(sg > 0.0))
    throw ValidationError("rescale_output: guided tensor has zero standard deviation");
  const double factor = rescale * (stddev(eps_base) / sg) + (1.0 - rescale);
  return scale(eps_guided, factor);
}

// The epsilon predictions one guided step may need.
struct BranchSet {
  Tensor cond;
  std::optional<Tensor> uncond;
  std::optional<Tensor> weak_joint;
  std::optional<Tensor> weak_spatial;
  std::optional<Tensor> weak_temporal;
};

// Additive composition: CFG delta plus skip-guidance delta(s), all taken from
// the conditional branch; rescaling (if any) uses the conditional prediction
// as the reference std. With every scale at zero this returns `cond` bit-exactly.
inline Tensor compose_cfg_stg(const BranchSet& b, const GuidanceSpec& spec) {
  validate_guidance_spec(spec);
  Tensor out = b.cond;
  if (spec.cfg_scale != 0.0) {
    if (!b.uncond)
      throw ValidationError("compose_cfg_stg: cfg_scale != 0 but no unconditional branch");
    require_same_shape(out, *b.uncond, "compose_cfg_stg");
    for (std::size_t i = 0; i < out.size(); ++i)
      out.data[i] += spec.cfg_scale * (b.cond.data[i] - b.uncond->data[i]);
  }
  if (const auto* j = std::get_if<StgJoint>(&spec.stg)) {
    if (j->w != 0.0) {
      if (!b.weak_joint)
        throw ValidationError("compose_cfg_stg: joint scale != 0 but no weak branch");
      require_same_shape(out, *b.weak_joint, "compose_cfg_stg");
      for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] += j->w * (b.cond.data[i] - b.weak_joint->data[i]);
    }
  } else if (const auto* f = std::get_if<StgFactorized>(&spec.stg)) {
    const bool need = f->w1 != 0.0 || f->w2 != 0.0;
    if (need) {
      if (!b.weak_spatial || !b.weak_temporal)
        throw ValidationError(
            "compose_cfg_stg: factorized scales need both spatial and temporal weak branches");
      require_same_shape(out, *b.weak_spatial, "compose_cfg_stg");
      require_same_shape(out, *b.weak_temporal, "compose_cfg_stg");
      Tensor ds = sub(b.cond, *b.weak_spatial);
      Tensor dt = sub(b.cond, *b.weak_temporal);
      if (f->orthogonalize) {
        const double ds2 = dot(ds, ds);
        if (ds2 > 0.0) axpy(dt, -dot(ds, dt) / ds2, ds);
      }
      axpy(out, f->w1, ds);
      axpy(out, f->w2, dt);
    }
  }
  if (spec.rescale > 0.0) out = rescale_output(b.cond, out, spec.rescale);
  return out;
}

}  // namespace stg
