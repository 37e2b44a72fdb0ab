#pragma once

// Guidance-scale sweeps: one sampler run per configured row, scored with the
// distribution and video metrics and serialized as CSV plus a JSON mirror.
// The RBF bandwidth is the median heuristic on the reference set, computed
// once per sweep and shared by every row so MMD columns are comparable.

#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stg/config.hpp"
#include "stg/guidance.hpp"
#include "stg/metrics.hpp"
#include "stg/sampler.hpp"

namespace stg {

struct MetricsRow {
  std::string config_id;
  double cfg_scale = 0.0;
  double stg_w = 0.0;
  double stg_w1 = 0.0;
  double stg_w2 = 0.0;
  double rescale = 0.0;
  double mmd = 0.0;
  double mode_coverage = 0.0;
  double flicker = 0.0;
  double sharpness = 0.0;
  double dynamics = 0.0;
  double alignment_cosine = 0.0;
};

inline constexpr const char* kMetricsCsvHeader =
    "config_id,cfg_scale,stg_w,stg_w1,stg_w2,rescale,"
    "mmd,mode_coverage,flicker,sharpness,dynamics,alignment_cosine";

inline std::string format_metric(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os << kMetricsCsvHeader << "\n";
  for (const MetricsRow& r : rows) {
    os << r.config_id;
    for (double v : {r.cfg_scale, r.stg_w, r.stg_w1, r.stg_w2, r.rescale, r.mmd,
                     r.mode_coverage, r.flicker, r.sharpness, r.dynamics,
                     r.alignment_cosine})
      os << "," << format_metric(v);
    os << "\n";
  }
  return os.str();
}

inline nlohmann::json metrics_to_json(const std::vector<MetricsRow>& rows,
                                      double bandwidth) {
  nlohmann::json arr = nlohmann::json::array();
  for (const MetricsRow& r : rows) {
    arr.push_back({{"config_id", r.config_id},
                   {"cfg_scale", r.cfg_scale},
                   {"stg_w", r.stg_w},
                   {"stg_w1", r.stg_w1},
                   {"stg_w2", r.stg_w2},
                   {"rescale", r.rescale},
                   {"mmd", r.mmd},
                   {"mode_coverage", r.mode_coverage},
                   {"flicker", r.flicker},
                   {"sharpness", r.sharpness},
                   {"dynamics", r.dynamics},
                   {"alignment_cosine", r.alignment_cosine}});
  }
  return nlohmann::json{{"bandwidth", bandwidth}, {"rows", arr}};
}

// Guidance spec for one sweep row: scales come from the row, the perturbation
// wiring (and the orthogonalize flag) from the base spec.
inline GuidanceSpec sweep_row_spec(const GuidanceSpec& base, const SweepRowConfig& row) {
  GuidanceSpec s = base;
  s.cfg_scale = row.cfg_scale;
  s.rescale = row.rescale;
  if (row.stg_w != 0.0) {
    s.stg = StgJoint{row.stg_w};
  } else if (row.stg_w1 != 0.0 || row.stg_w2 != 0.0) {
    StgFactorized f;
    f.w1 = row.stg_w1;
    f.w2 = row.stg_w2;
    if (const auto* bf = std::get_if<StgFactorized>(&base.stg))
      f.orthogonalize = bf->orthogonalize;
    s.stg = f;
  } else {
    s.stg = StgOff{};
  }
  return s;
}

inline MetricsRow make_metrics_row(const SweepRowConfig& row) {
  MetricsRow m;
  m.config_id = row.id;
  m.cfg_scale = row.cfg_scale;
  m.stg_w = row.stg_w;
  m.stg_w1 = row.stg_w1;
  m.stg_w2 = row.stg_w2;
  m.rescale = row.rescale;
  return m;
}

// Mean cosine between the conditional branch and the composed guided epsilon
// over fixed probe points: 1.0 when guidance is a no-op, drifting below as the
// guided direction departs from the conditional one.
inline double guided_alignment(const DenoiserBinding& binding, const GuidanceSpec& spec,
                               const std::vector<std::pair<Tensor, int>>& probes) {
  EpsProbeFn cond = [&](const Tensor& x, int t) {
    return binding.eps(x, t, EpsBranch::cond);
  };
  EpsProbeFn guided = [&](const Tensor& x, int t) {
    return compose_cfg_stg(eval_branches(binding, spec, x, t), spec);
  };
  return alignment_cosine(cond, guided, probes);
}

}  // namespace stg
