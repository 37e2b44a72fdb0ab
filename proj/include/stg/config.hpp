#pragma once

// JSON run configuration shared by every CLI verb. Parsing is strict: unknown
// keys and type mismatches raise ValidationError naming the dotted key path
// ("training.lr", "guidance.stg.mode", ...) so typos fail loudly instead of
// being silently ignored.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stg/denoiser.hpp"
#include "stg/error.hpp"
#include "stg/experiments.hpp"
#include "stg/guidance.hpp"
#include "stg/io.hpp"
#include "stg/oracle.hpp"
#include "stg/sampler.hpp"
#include "stg/schedule.hpp"
#include "stg/toydata.hpp"

namespace stg {

struct TrainingConfig {
  int steps = 500;
  int batch = 4;
  double lr = 1e-3;
  double p_uncond = 0.1;
};

struct DatasetConfig {
  int clips = 256;
  ToyDataConfig toy;
};

struct ModelConfig {
  Arch arch;
  std::string checkpoint;  // empty = no checkpoint configured
};

struct SamplingConfig {
  int chains = 4;
  std::optional<int> class_id = 0;  // nullopt = unconditional base branch
  int trace_stride = 0;             // 0 = sampler default (T/10)
  bool capture_branches = false;
};

// Analytic mixture backend: the full mixture plus how to derive the branches
// (condition on class_id if set, weaken steps applied in order).
struct OracleSpecConfig {
  GaussianMixture mixture;
  std::optional<int> class_id;
  std::vector<WeakenMode> weak;
};

struct SweepRowConfig {
  std::string id;
  double cfg_scale = 0.0;
  double stg_w = 0.0;
  double stg_w1 = 0.0;
  double stg_w2 = 0.0;
  double rescale = 0.0;
};

struct SweepConfig {
  int samples = 500;            // sampler chains per row
  int reference_samples = 500;  // reference set (also fixes the MMD bandwidth)
  int probes = 32;              // probe points for the alignment cosine
  std::vector<SweepRowConfig> rows;
};

struct VisualizeConfig {
  std::vector<int> t_list;
};

struct GradcheckConfig {
  int t = 120;
  double step = 1e-5;
  int entries_per_tensor = 5;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir;
  NoiseSchedule schedule = linear_schedule(200, 1e-4, 0.02);
  DatasetConfig dataset;
  ModelConfig model;
  TrainingConfig training;
  GuidanceSpec guidance;
  std::optional<RestartConfig> restart;
  SamplingConfig sampling;
  std::optional<OracleSpecConfig> oracle;
  SweepConfig sweep;
  VisualizeConfig visualize;
  GradcheckConfig gradcheck;
};

namespace cfg {

using json = nlohmann::json;

[[noreturn]] inline void fail(const std::string& path, const std::string& what) {
  throw ValidationError("config: " + path + ": " + what);
}

inline void check_keys(const json& j, const std::string& path,
                       std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) { known = true; break; }
    if (!known) fail(path.empty() ? item.key() : path + "." + item.key(), "unknown key");
  }
}

inline const json* find(const json& j, const std::string& key) {
  auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

inline std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

inline double num_at(const json& j, const std::string& path, const std::string& key,
                     double def) {
  const json* v = find(j, key);
  if (!v) return def;
  if (!v->is_number()) fail(join(path, key), "expected a number");
  return v->get<double>();
}

inline int int_at(const json& j, const std::string& path, const std::string& key, int def) {
  const json* v = find(j, key);
  if (!v) return def;
  if (!v->is_number_integer()) fail(join(path, key), "expected an integer");
  return v->get<int>();
}

inline bool bool_at(const json& j, const std::string& path, const std::string& key,
                    bool def) {
  const json* v = find(j, key);
  if (!v) return def;
  if (!v->is_boolean()) fail(join(path, key), "expected a boolean");
  return v->get<bool>();
}

inline std::string str_at(const json& j, const std::string& path, const std::string& key,
                          const std::string& def) {
  const json* v = find(j, key);
  if (!v) return def;
  if (!v->is_string()) fail(join(path, key), "expected a string");
  return v->get<std::string>();
}

inline std::vector<int> int_list_at(const json& j, const std::string& path,
                                    const std::string& key) {
  std::vector<int> out;
  const json* v = find(j, key);
  if (!v) return out;
  if (!v->is_array()) fail(join(path, key), "expected an array of integers");
  for (const auto& e : *v) {
    if (!e.is_number_integer()) fail(join(path, key), "expected an array of integers");
    out.push_back(e.get<int>());
  }
  return out;
}

inline PerturbMode parse_perturb_mode(const std::string& s, const std::string& path) {
  if (s == "none") return PerturbMode::none;
  if (s == "residual_skip") return PerturbMode::residual_skip;
  if (s == "attention_skip") return PerturbMode::attention_skip;
  if (s == "attention_blur") return PerturbMode::attention_blur;
  fail(path, "unknown perturbation mode '" + s +
                 "' (expected none | residual_skip | attention_skip | attention_blur)");
}

inline Axis parse_axis(const std::string& s, const std::string& path) {
  if (s == "spatial") return Axis::spatial;
  if (s == "temporal") return Axis::temporal;
  if (s == "joint") return Axis::joint;
  fail(path, "unknown axis '" + s + "' (expected spatial | temporal | joint)");
}

inline PerturbationConfig parse_perturb(const json& j, const std::string& path) {
  check_keys(j, path, {"mode", "layers", "axis", "sigma_blur", "materialize_identity"});
  PerturbationConfig p;
  p.mode = parse_perturb_mode(str_at(j, path, "mode", "none"), join(path, "mode"));
  p.layers = int_list_at(j, path, "layers");
  p.axis = parse_axis(str_at(j, path, "axis", "spatial"), join(path, "axis"));
  p.sigma_blur = num_at(j, path, "sigma_blur", 0.0);
  p.materialize_identity = bool_at(j, path, "materialize_identity", false);
  return p;
}

inline GuidanceSpec parse_guidance(const json& j, const std::string& path) {
  check_keys(j, path, {"cfg_scale", "rescale", "stg", "perturb", "perturb_temporal"});
  GuidanceSpec spec;
  spec.cfg_scale = num_at(j, path, "cfg_scale", 0.0);
  spec.rescale = num_at(j, path, "rescale", 0.0);
  if (spec.rescale < 0.0 || spec.rescale > 1.0)
    fail(join(path, "rescale"), "must lie in [0, 1]");
  if (const json* s = find(j, "stg")) {
    const std::string spath = join(path, "stg");
    check_keys(*s, spath, {"mode", "w", "w1", "w2", "orthogonalize"});
    const std::string mode = str_at(*s, spath, "mode", "off");
    if (mode == "off") {
      spec.stg = StgOff{};
    } else if (mode == "joint") {
      spec.stg = StgJoint{num_at(*s, spath, "w", 0.0)};
    } else if (mode == "factorized") {
      StgFactorized f;
      f.w1 = num_at(*s, spath, "w1", 0.0);
      f.w2 = num_at(*s, spath, "w2", 0.0);
      f.orthogonalize = bool_at(*s, spath, "orthogonalize", false);
      spec.stg = f;
    } else {
      fail(join(spath, "mode"), "unknown mode '" + mode +
                                    "' (expected off | joint | factorized)");
    }
  }
  if (const json* p = find(j, "perturb"))
    spec.perturb = parse_perturb(*p, join(path, "perturb"));
  if (const json* p = find(j, "perturb_temporal"))
    spec.perturb_temporal = parse_perturb(*p, join(path, "perturb_temporal"));
  return spec;
}

inline GaussianMixture parse_mixture(const json& j, const std::string& path) {
  GaussianMixture gm;
  const json* comps = find(j, "components");
  if (!comps) fail(path, "oracle needs either a preset or explicit components");
  if (!comps->is_array() || comps->empty())
    fail(join(path, "components"), "expected a non-empty array");
  std::size_t idx = 0;
  for (const auto& c : *comps) {
    const std::string cpath = join(path, "components[" + std::to_string(idx) + "]");
    check_keys(c, cpath, {"weight", "mean", "variance"});
    MixtureComponent mc;
    mc.weight = num_at(c, cpath, "weight", -1.0);
    mc.variance = num_at(c, cpath, "variance", -1.0);
    const json* mean = find(c, "mean");
    if (!mean || !mean->is_array() || mean->empty())
      fail(join(cpath, "mean"), "expected a non-empty array of numbers");
    mc.mean = Tensor::zeros({mean->size()});
    std::size_t d = 0;
    for (const auto& e : *mean) {
      if (!e.is_number()) fail(join(cpath, "mean"), "expected numbers");
      mc.mean[d++] = e.get<double>();
    }
    gm.components.push_back(std::move(mc));
    ++idx;
  }
  if (const json* labels = find(j, "class_labels")) {
    if (!labels->is_array() || labels->size() != gm.components.size())
      fail(join(path, "class_labels"), "expected one integer label per component");
    std::vector<int> lab;
    for (const auto& e : *labels) {
      if (!e.is_number_integer()) fail(join(path, "class_labels"), "expected integers");
      lab.push_back(e.get<int>());
    }
    gm.class_labels = std::move(lab);
  }
  validate_mixture(gm);
  return gm;
}

inline OracleSpecConfig parse_oracle(const json& j, const std::string& path) {
  check_keys(j, path,
             {"preset", "dim", "components", "class_labels", "class_id", "weak"});
  OracleSpecConfig oc;
  const std::string preset = str_at(j, path, "preset", "");
  if (!preset.empty()) {
    if (find(j, "components") || find(j, "class_labels"))
      fail(path, "preset and explicit components are mutually exclusive");
    if (preset == "unit_gaussian") {
      const int dim = int_at(j, path, "dim", 1);
      if (dim < 1) fail(join(path, "dim"), "must be >= 1");
      oc.mixture = unit_gaussian_mixture(static_cast<std::size_t>(dim));
    } else if (preset == "coverage") {
      oc.mixture = coverage_mixture();
    } else {
      fail(join(path, "preset"),
           "unknown preset '" + preset + "' (expected unit_gaussian | coverage)");
    }
  } else {
    if (find(j, "dim")) fail(join(path, "dim"), "only valid with preset unit_gaussian");
    oc.mixture = parse_mixture(j, path);
  }
  if (const json* c = find(j, "class_id")) {
    if (!c->is_number_integer()) fail(join(path, "class_id"), "expected an integer");
    oc.class_id = c->get<int>();
    if (!oc.mixture.class_labels)
      fail(join(path, "class_id"), "mixture has no class labels to condition on");
  }
  if (const json* w = find(j, "weak")) {
    if (!w->is_array()) fail(join(path, "weak"), "expected an array of weaken steps");
    std::size_t idx = 0;
    for (const auto& step : *w) {
      const std::string wpath = join(path, "weak[" + std::to_string(idx) + "]");
      check_keys(step, wpath, {"mode", "factor"});
      const std::string mode = str_at(step, wpath, "mode", "");
      if (mode == "inflate_variance") {
        oc.weak.push_back(InflateVariance{num_at(step, wpath, "factor", 2.0)});
      } else if (mode == "merge_to_marginal") {
        oc.weak.push_back(MergeToMarginal{});
      } else if (mode == "drop_condition") {
        oc.weak.push_back(DropCondition{});
      } else {
        fail(join(wpath, "mode"),
             "unknown weaken mode '" + mode +
                 "' (expected inflate_variance | merge_to_marginal | drop_condition)");
      }
      ++idx;
    }
  }
  return oc;
}

inline NoiseSchedule parse_schedule(const json& j, const std::string& path) {
  check_keys(j, path, {"steps", "beta_start", "beta_end", "variance"});
  const int steps = int_at(j, path, "steps", 200);
  const double b0 = num_at(j, path, "beta_start", 1e-4);
  const double b1 = num_at(j, path, "beta_end", 0.02);
  VarianceKind kind = VarianceKind::beta_tilde;
  const std::string v = str_at(j, path, "variance", "beta_tilde");
  if (v == "beta_tilde") kind = VarianceKind::beta_tilde;
  else if (v == "beta") kind = VarianceKind::beta;
  else fail(join(path, "variance"), "unknown variance '" + v + "' (expected beta_tilde | beta)");
  if (steps < 1) fail(join(path, "steps"), "must be >= 1");
  return linear_schedule(steps, b0, b1, kind);
}

}  // namespace cfg

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using namespace cfg;
  if (!j.is_object()) throw ValidationError("config: top level must be a JSON object");
  check_keys(j, "", {"seed", "out_dir", "schedule", "dataset", "model", "training",
                     "guidance", "restart", "sampling", "oracle", "sweep", "visualize",
                     "gradcheck"});
  RunConfig rc;

  if (const json* s = find(j, "seed")) {
    if (!s->is_number_integer() || s->get<std::int64_t>() < 0)
      fail("seed", "expected a non-negative integer");
    rc.seed = s->get<std::uint64_t>();
  }
  rc.out_dir = str_at(j, "", "out_dir", "");

  if (const json* s = find(j, "schedule")) rc.schedule = parse_schedule(*s, "schedule");

  if (const json* d = find(j, "dataset")) {
    check_keys(*d, "dataset",
               {"clips", "frames", "height", "width", "classes", "radius", "speed_min",
                "speed_max", "start_min", "start_max"});
    rc.dataset.clips = int_at(*d, "dataset", "clips", rc.dataset.clips);
    if (rc.dataset.clips < 0) fail("dataset.clips", "must be >= 0");
    auto& t = rc.dataset.toy;
    t.frames = int_at(*d, "dataset", "frames", t.frames);
    t.height = int_at(*d, "dataset", "height", t.height);
    t.width = int_at(*d, "dataset", "width", t.width);
    t.classes = int_at(*d, "dataset", "classes", t.classes);
    t.radius = num_at(*d, "dataset", "radius", t.radius);
    t.speed_min = num_at(*d, "dataset", "speed_min", t.speed_min);
    t.speed_max = num_at(*d, "dataset", "speed_max", t.speed_max);
    t.start_min = num_at(*d, "dataset", "start_min", t.start_min);
    t.start_max = num_at(*d, "dataset", "start_max", t.start_max);
    if (t.frames < 1 || t.height < 1 || t.width < 1)
      fail("dataset", "frames/height/width must be >= 1");
    if (t.classes < 1) fail("dataset.classes", "must be >= 1");
  }

  if (const json* m = find(j, "model")) {
    check_keys(*m, "model",
               {"layers", "dim", "heads", "attention", "checkpoint"});
    auto& a = rc.model.arch;
    const int layers = int_at(*m, "model", "layers", static_cast<int>(a.layers));
    const int dim = int_at(*m, "model", "dim", static_cast<int>(a.dim));
    const int heads = int_at(*m, "model", "heads", static_cast<int>(a.heads));
    if (layers < 1) fail("model.layers", "must be >= 1");
    if (dim < 1) fail("model.dim", "must be >= 1");
    if (heads < 1) fail("model.heads", "must be >= 1");
    a.layers = static_cast<std::size_t>(layers);
    a.dim = static_cast<std::size_t>(dim);
    a.heads = static_cast<std::size_t>(heads);
    const std::string attn = str_at(*m, "model", "attention", "factorized");
    if (attn == "factorized") a.attention_mode = AttentionMode::factorized;
    else if (attn == "joint") a.attention_mode = AttentionMode::joint;
    else fail("model.attention", "unknown mode '" + attn + "' (expected factorized | joint)");
    rc.model.checkpoint = str_at(*m, "model", "checkpoint", "");
  }
  // The model always renders the dataset geometry.
  rc.model.arch.frames = rc.dataset.toy.frames;
  rc.model.arch.height = rc.dataset.toy.height;
  rc.model.arch.width = rc.dataset.toy.width;
  rc.model.arch.classes = rc.dataset.toy.classes;
  validate_arch(rc.model.arch);

  if (const json* t = find(j, "training")) {
    check_keys(*t, "training", {"steps", "batch", "lr", "p_uncond"});
    rc.training.steps = int_at(*t, "training", "steps", rc.training.steps);
    rc.training.batch = int_at(*t, "training", "batch", rc.training.batch);
    rc.training.lr = num_at(*t, "training", "lr", rc.training.lr);
    rc.training.p_uncond = num_at(*t, "training", "p_uncond", rc.training.p_uncond);
    if (rc.training.steps < 0) fail("training.steps", "must be >= 0");
    if (rc.training.batch < 1) fail("training.batch", "must be >= 1");
    if (rc.training.lr < 0.0) fail("training.lr", "must be >= 0");
    if (rc.training.p_uncond < 0.0 || rc.training.p_uncond > 1.0)
      fail("training.p_uncond", "must lie in [0, 1]");
  }

  if (const json* g = find(j, "guidance")) rc.guidance = parse_guidance(*g, "guidance");
  // A perturbation that names no layer targets the last one.
  for (PerturbationConfig* p : {&rc.guidance.perturb, &rc.guidance.perturb_temporal})
    if (p->mode != PerturbMode::none && p->layers.empty())
      p->layers = {static_cast<int>(rc.model.arch.layers) - 1};

  if (const json* r = find(j, "restart")) {
    check_keys(*r, "restart", {"t_min", "t_max", "iterations", "noise"});
    RestartConfig rs;
    rs.t_min = int_at(*r, "restart", "t_min", 0);
    rs.t_max = int_at(*r, "restart", "t_max", 0);
    rs.K = int_at(*r, "restart", "iterations", 0);
    const std::string noise = str_at(*r, "restart", "noise", "forward_renoise");
    if (noise == "forward_renoise") rs.noise = RestartNoise::forward_renoise;
    else if (noise == "variance_gap") rs.noise = RestartNoise::variance_gap;
    else fail("restart.noise", "unknown noise '" + noise +
                                   "' (expected forward_renoise | variance_gap)");
    validate_restart(rs, rc.schedule.T);
    rc.restart = rs;
  }

  if (const json* s = find(j, "sampling")) {
    check_keys(*s, "sampling", {"chains", "class_id", "trace_stride", "capture_branches"});
    rc.sampling.chains = int_at(*s, "sampling", "chains", rc.sampling.chains);
    if (rc.sampling.chains < 1) fail("sampling.chains", "must be >= 1");
    const int cls = int_at(*s, "sampling", "class_id", 0);
    rc.sampling.class_id = cls < 0 ? std::nullopt : std::optional<int>(cls);
    rc.sampling.trace_stride = int_at(*s, "sampling", "trace_stride", 0);
    if (rc.sampling.trace_stride < 0) fail("sampling.trace_stride", "must be >= 0");
    rc.sampling.capture_branches = bool_at(*s, "sampling", "capture_branches", false);
  }

  if (const json* o = find(j, "oracle")) rc.oracle = cfg::parse_oracle(*o, "oracle");
  if (rc.oracle && !rc.model.checkpoint.empty())
    throw ValidationError(
        "config: model.checkpoint and oracle are mutually exclusive backends");

  if (const json* s = find(j, "sweep")) {
    check_keys(*s, "sweep", {"samples", "reference_samples", "probes", "rows"});
    rc.sweep.samples = int_at(*s, "sweep", "samples", rc.sweep.samples);
    rc.sweep.reference_samples =
        int_at(*s, "sweep", "reference_samples", rc.sweep.reference_samples);
    rc.sweep.probes = int_at(*s, "sweep", "probes", rc.sweep.probes);
    if (rc.sweep.samples < 2) fail("sweep.samples", "must be >= 2");
    if (rc.sweep.reference_samples < 2) fail("sweep.reference_samples", "must be >= 2");
    if (rc.sweep.probes < 1) fail("sweep.probes", "must be >= 1");
    if (const json* rows = find(*s, "rows")) {
      if (!rows->is_array()) fail("sweep.rows", "expected an array");
      std::size_t idx = 0;
      for (const auto& row : *rows) {
        const std::string rpath = "sweep.rows[" + std::to_string(idx) + "]";
        check_keys(row, rpath, {"id", "cfg_scale", "stg_w", "stg_w1", "stg_w2", "rescale"});
        SweepRowConfig rcfg;
        rcfg.id = str_at(row, rpath, "id", "row" + std::to_string(idx));
        rcfg.cfg_scale = num_at(row, rpath, "cfg_scale", 0.0);
        rcfg.stg_w = num_at(row, rpath, "stg_w", 0.0);
        rcfg.stg_w1 = num_at(row, rpath, "stg_w1", 0.0);
        rcfg.stg_w2 = num_at(row, rpath, "stg_w2", 0.0);
        rcfg.rescale = num_at(row, rpath, "rescale", 0.0);
        if (rcfg.stg_w != 0.0 && (rcfg.stg_w1 != 0.0 || rcfg.stg_w2 != 0.0))
          fail(rpath, "stg_w and stg_w1/stg_w2 are mutually exclusive");
        if (rcfg.rescale < 0.0 || rcfg.rescale > 1.0)
          fail(cfg::join(rpath, "rescale"), "must lie in [0, 1]");
        rc.sweep.rows.push_back(std::move(rcfg));
        ++idx;
      }
    }
  }

  if (const json* v = find(j, "visualize")) {
    check_keys(*v, "visualize", {"t_list"});
    rc.visualize.t_list = int_list_at(*v, "visualize", "t_list");
    for (int t : rc.visualize.t_list)
      if (t < 0 || t >= rc.schedule.T)
        fail("visualize.t_list", "step " + std::to_string(t) + " outside [0, " +
                                     std::to_string(rc.schedule.T) + ")");
  }

  if (const json* g = find(j, "gradcheck")) {
    check_keys(*g, "gradcheck", {"t", "step", "entries_per_tensor"});
    rc.gradcheck.t = int_at(*g, "gradcheck", "t", rc.gradcheck.t);
    rc.gradcheck.step = num_at(*g, "gradcheck", "step", rc.gradcheck.step);
    rc.gradcheck.entries_per_tensor =
        int_at(*g, "gradcheck", "entries_per_tensor", rc.gradcheck.entries_per_tensor);
    if (rc.gradcheck.t < 0 || rc.gradcheck.t >= rc.schedule.T)
      fail("gradcheck.t", "outside [0, " + std::to_string(rc.schedule.T) + ")");
    if (!(rc.gradcheck.step > 0.0)) fail("gradcheck.step", "must be > 0");
    if (rc.gradcheck.entries_per_tensor < 1)
      fail("gradcheck.entries_per_tensor", "must be >= 1");
  }

  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("config: " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace stg
