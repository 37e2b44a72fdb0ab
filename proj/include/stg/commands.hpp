#pragma once

// Implementations behind the CLI verbs. Each cmd_* takes a parsed RunConfig,
// an output directory (possibly empty for verbs that can run output-free) and
// a log stream; errors surface as ValidationError / RuntimeFault and are
// mapped to exit codes by the CLI entry point. Backends are loaded before any
// output path is created, so a failed run leaves no partial output tree.

#include <filesystem>
#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stg/config.hpp"
#include "stg/denoiser.hpp"
#include "stg/experiments.hpp"
#include "stg/io.hpp"
#include "stg/metrics.hpp"
#include "stg/oracle.hpp"
#include "stg/sampler.hpp"
#include "stg/schedule.hpp"
#include "stg/sweep.hpp"
#include "stg/toydata.hpp"

namespace stg {

// Stream ids for CLI-level draws. Sampler chains use ids chain*4+purpose, so
// anything above 2^32 stays disjoint for any realistic chain count.
namespace cli_stream {
constexpr std::uint64_t kDataset = (1ULL << 32) + 1;
constexpr std::uint64_t kBatchPick = (1ULL << 32) + 2;
constexpr std::uint64_t kBatchNoise = (1ULL << 32) + 3;
constexpr std::uint64_t kReference = (1ULL << 32) + 4;
constexpr std::uint64_t kProbes = (1ULL << 32) + 5;
constexpr std::uint64_t kGradcheckClip = (1ULL << 32) + 6;
}  // namespace cli_stream

inline std::string zero_pad(long v, int width) {
  std::ostringstream os;
  os << std::setw(width) << std::setfill('0') << v;
  return os.str();
}

// --- backend construction -------------------------------------------------

struct Backend {
  bool is_oracle = false;
  std::shared_ptr<const TransformerDenoiser> model;  // net backend only
  std::optional<OracleBranches> oracle;              // oracle backend only
  DenoiserBinding binding;
  Shape state_shape;
};

// Branches from the configured analytic mixture: conditional (optionally
// class-conditioned), unconditional (labels stripped), and one weak mixture
// (weaken steps applied in order, then conditioned if labels survive) that
// serves the joint, spatial and temporal slots alike.
inline OracleBranches make_oracle_branches(const OracleSpecConfig& oc) {
  const GaussianMixture& full = oc.mixture;
  OracleBranches b;
  b.cond = oc.class_id ? condition_on_class(full, *oc.class_id) : full;
  if (full.class_labels) b.uncond = weaken(full, DropCondition{});
  if (!oc.weak.empty()) {
    GaussianMixture weak = full;
    for (const WeakenMode& m : oc.weak) weak = weaken(weak, m);
    if (oc.class_id && weak.class_labels) weak = condition_on_class(weak, *oc.class_id);
    b.weak_joint = weak;
    b.weak_spatial = weak;
    b.weak_temporal = std::move(weak);
  }
  return b;
}

// Net binding: cond/uncond toggle the class embedding, weak branches re-run
// the forward pass with the configured perturbation.
inline DenoiserBinding bind_denoiser(std::shared_ptr<const TransformerDenoiser> model,
                                     const GuidanceSpec& spec,
                                     std::optional<int> class_id) {
  if (class_id && (*class_id < 0 ||
                   static_cast<std::size_t>(*class_id) >= model->arch.classes))
    throw ValidationError("sampling.class_id: out of range for " +
                          std::to_string(model->arch.classes) + " classes");
  std::optional<std::size_t> cls;
  if (class_id) cls = static_cast<std::size_t>(*class_id);
  const PerturbationConfig pj = spec.perturb;
  const PerturbationConfig pt = spec.perturb_temporal;

  DenoiserBinding b;
  b.has_uncond = true;
  b.has_weak_joint = pj.mode != PerturbMode::none;
  b.has_weak_spatial = pj.mode != PerturbMode::none;
  b.has_weak_temporal = pt.mode != PerturbMode::none;
  b.eps = [model, pj, pt, cls](const Tensor& x, int t, EpsBranch br) {
    static const PerturbationConfig kNone{};
    switch (br) {
      case EpsBranch::cond: return denoiser_forward(*model, x, t, cls, kNone);
      case EpsBranch::uncond: return denoiser_forward(*model, x, t, std::nullopt, kNone);
      case EpsBranch::weak_joint:
      case EpsBranch::weak_spatial: return denoiser_forward(*model, x, t, cls, pj);
      case EpsBranch::weak_temporal: return denoiser_forward(*model, x, t, cls, pt);
    }
    throw RuntimeFault("bind_denoiser: unknown branch");
  };
  return b;
}

inline void require_arch_match(const Arch& loaded, const Arch& configured) {
  auto mismatch = [](std::size_t a, std::size_t b) { return a != b; };
  if (mismatch(loaded.layers, configured.layers) || mismatch(loaded.dim, configured.dim) ||
      mismatch(loaded.heads, configured.heads) ||
      loaded.attention_mode != configured.attention_mode ||
      mismatch(loaded.frames, configured.frames) ||
      mismatch(loaded.height, configured.height) ||
      mismatch(loaded.width, configured.width) ||
      mismatch(loaded.classes, configured.classes))
    throw ValidationError(
        "model.checkpoint: stored architecture disagrees with the configured "
        "model/dataset sections");
}

inline TransformerDenoiser load_configured_model(const RunConfig& rc) {
  TransformerDenoiser model = load_checkpoint(rc.model.checkpoint);
  require_arch_match(model.arch, rc.model.arch);
  return model;
}

inline Backend make_backend(const RunConfig& rc) {
  Backend be;
  if (rc.oracle) {
    be.is_oracle = true;
    be.oracle = make_oracle_branches(*rc.oracle);
    be.binding = bind_oracle(*be.oracle, rc.schedule);
    be.state_shape = {be.oracle->cond.dim()};
    return be;
  }
  if (rc.model.checkpoint.empty())
    throw ValidationError("config: need either model.checkpoint or an oracle section");
  auto model = std::make_shared<const TransformerDenoiser>(load_configured_model(rc));
  be.model = model;
  be.binding = bind_denoiser(model, rc.guidance, rc.sampling.class_id);
  const Arch& a = model->arch;
  be.state_shape = {a.frames, 1, a.height, a.width};
  return be;
}

// --- shared serialization helpers ------------------------------------------

inline const char* perturb_mode_name(PerturbMode m) {
  switch (m) {
    case PerturbMode::none: return "none";
    case PerturbMode::residual_skip: return "residual_skip";
    case PerturbMode::attention_skip: return "attention_skip";
    case PerturbMode::attention_blur: return "attention_blur";
  }
  return "?";
}

inline const char* axis_name(Axis a) {
  switch (a) {
    case Axis::spatial: return "spatial";
    case Axis::temporal: return "temporal";
    case Axis::joint: return "joint";
  }
  return "?";
}

inline nlohmann::json perturb_to_json(const PerturbationConfig& p) {
  return {{"mode", perturb_mode_name(p.mode)},
          {"layers", p.layers},
          {"axis", axis_name(p.axis)},
          {"sigma_blur", p.sigma_blur},
          {"materialize_identity", p.materialize_identity}};
}

inline nlohmann::json guidance_to_json(const GuidanceSpec& spec) {
  nlohmann::json stg;
  if (std::holds_alternative<StgOff>(spec.stg)) {
    stg = {{"mode", "off"}};
  } else if (const auto* j = std::get_if<StgJoint>(&spec.stg)) {
    stg = {{"mode", "joint"}, {"w", j->w}};
  } else if (const auto* f = std::get_if<StgFactorized>(&spec.stg)) {
    stg = {{"mode", "factorized"},
           {"w1", f->w1},
           {"w2", f->w2},
           {"orthogonalize", f->orthogonalize}};
  }
  return {{"cfg_scale", spec.cfg_scale},
          {"rescale", spec.rescale},
          {"stg", stg},
          {"perturb", perturb_to_json(spec.perturb)},
          {"perturb_temporal", perturb_to_json(spec.perturb_temporal)}};
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  atomic_write_file(path, j.dump(2) + "\n");
}

// --- train ------------------------------------------------------------------

inline void cmd_train(const RunConfig& rc, const std::string& out_dir, std::ostream& log) {
  if (out_dir.empty())
    throw ValidationError("train: no output directory (set out_dir or pass --out)");
  const NoiseSchedule& sched = rc.schedule;
  const auto dataset = make_dataset(rc.dataset.clips, rc.dataset.toy.classes,
                                    derive_stream(rc.seed, cli_stream::kDataset),
                                    rc.dataset.toy);
  if (rc.training.steps > 0 && dataset.empty())
    throw ValidationError("train: training.steps > 0 needs dataset.clips >= 1");

  TransformerDenoiser model = init_denoiser(rc.model.arch, rc.seed);
  AdamState adam = make_adam_state(model);
  AdamConfig acfg;
  acfg.lr = rc.training.lr;

  const RngStream pick_root = derive_stream(rc.seed, cli_stream::kBatchPick);
  const RngStream noise_root = derive_stream(rc.seed, cli_stream::kBatchNoise);
  std::ostringstream csv;
  csv << "step,loss\n";
  double initial = 0.0, final_loss = 0.0;

  for (int k = 0; k < rc.training.steps; ++k) {
    RngStream pick = substream(pick_root, static_cast<std::uint64_t>(k));
    std::vector<const ToyClip*> batch;
    std::vector<int> ts;
    for (int b = 0; b < rc.training.batch; ++b) {
      batch.push_back(&dataset[pick.next_u64() % dataset.size()]);
      ts.push_back(static_cast<int>(pick.next_u64() % static_cast<std::uint64_t>(sched.T)));
    }
    TransformerDenoiser grads = zeros_like(model);
    const double loss =
        dsm_loss(model, sched, batch, ts, substream(noise_root, static_cast<std::uint64_t>(k)),
                 rc.training.p_uncond, &grads);
    adam_step(model, grads, adam, acfg);
    csv << k << "," << format_metric(loss) << "\n";
    if (k == 0) initial = loss;
    final_loss = loss;
    if (k % 50 == 0 || k + 1 == rc.training.steps)
      log << "step " << k << " loss " << format_metric(loss) << "\n";
  }

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path out(out_dir);
  atomic_write_file(out / "loss.csv", csv.str());
  save_checkpoint(model, (out / "checkpoint.stgckpt").string());
  if (rc.training.steps > 0)
    log << "trained " << rc.training.steps << " steps, initial loss "
        << format_metric(initial) << ", final loss " << format_metric(final_loss) << "\n";
  log << "wrote " << (out / "checkpoint.stgckpt").string() << " and "
      << (out / "loss.csv").string() << "\n";
}

// --- sample -----------------------------------------------------------------

inline nlohmann::json trace_to_json(const std::vector<SampleTrace>& traces) {
  nlohmann::json chains = nlohmann::json::array();
  for (const SampleTrace& tr : traces) {
    nlohmann::json recs = nlohmann::json::array();
    for (const TraceRecord& r : tr.records) {
      nlohmann::json rec{{"t", r.t},
                         {"segment", r.segment},
                         {"eps_norm", norm(r.eps_tilde)}};
      if (r.x_t) rec["x_norm"] = norm(*r.x_t);
      if (r.branches) {
        nlohmann::json b{{"cond", norm(r.branches->cond)}};
        if (r.branches->uncond) b["uncond"] = norm(*r.branches->uncond);
        if (r.branches->weak_joint) b["weak_joint"] = norm(*r.branches->weak_joint);
        if (r.branches->weak_spatial) b["weak_spatial"] = norm(*r.branches->weak_spatial);
        if (r.branches->weak_temporal) b["weak_temporal"] = norm(*r.branches->weak_temporal);
        rec["branch_norms"] = b;
      }
      recs.push_back(std::move(rec));
    }
    chains.push_back(std::move(recs));
  }
  return chains;
}

inline void cmd_sample(const RunConfig& rc, const std::string& out_dir, std::ostream& log) {
  if (out_dir.empty())
    throw ValidationError("sample: no output directory (set out_dir or pass --out)");
  Backend be = make_backend(rc);

  SamplerRun run;
  run.sched = rc.schedule;
  run.spec = rc.guidance;
  run.restart = rc.restart;
  run.binding = be.binding;
  run.state_shape = be.state_shape;
  run.seed = rc.seed;
  run.chains = rc.sampling.chains;
  run.capture_trace = true;
  run.capture_branches = rc.sampling.capture_branches;
  run.trace_stride = rc.sampling.trace_stride;
  const SampleResult res = sample(run);

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path out(out_dir);

  nlohmann::json per_chain = nlohmann::json::array();
  if (be.is_oracle) {
    std::ostringstream csv;
    csv << "chain";
    for (std::size_t d = 0; d < be.state_shape[0]; ++d) csv << ",c" << d;
    csv << "\n";
    for (std::size_t c = 0; c < res.samples.size(); ++c) {
      csv << c;
      for (double v : res.samples[c].data) csv << "," << format_metric(v);
      csv << "\n";
      per_chain.push_back({{"mean", mean(res.samples[c])},
                           {"std", stddev(res.samples[c])}});
    }
    atomic_write_file(out / "samples.csv", csv.str());
    log << "wrote " << (out / "samples.csv").string() << "\n";
  } else {
    for (std::size_t c = 0; c < res.samples.size(); ++c) {
      const auto dir = out / ("sample_" + zero_pad(static_cast<long>(c), 4));
      export_frames(res.samples[c], dir);
      per_chain.push_back({{"flicker", flicker_score(res.samples[c])},
                           {"sharpness", sharpness_proxy(res.samples[c])},
                           {"dynamics", dynamics_proxy(res.samples[c])}});
    }
    log << "wrote " << res.samples.size() << " sample directories under " << out_dir
        << "\n";
  }

  write_json(out / "metrics.json",
             {{"backend", be.is_oracle ? "oracle" : "model"},
              {"chains", rc.sampling.chains},
              {"seed", rc.seed},
              {"guidance", guidance_to_json(rc.guidance)},
              {"per_chain", per_chain}});
  write_json(out / "trace_summary.json", trace_to_json(res.traces));
  log << "wrote " << (out / "metrics.json").string() << " and "
      << (out / "trace_summary.json").string() << "\n";
}

// --- sweep ------------------------------------------------------------------

inline void cmd_sweep(const RunConfig& rc, const std::string& out_dir, std::ostream& log) {
  if (out_dir.empty())
    throw ValidationError("sweep: no output directory (set out_dir or pass --out)");
  if (rc.sweep.rows.empty())
    throw ValidationError("sweep.rows: need at least one row");
  Backend be = make_backend(rc);
  const NoiseSchedule& sched = rc.schedule;

  // Reference set: analytic samples from the conditional mixture, or rendered
  // clips (of the sampled class when one is set). Its median pairwise distance
  // fixes the RBF bandwidth for every row of this sweep.
  std::vector<Tensor> reference;
  RngStream ref_rng = derive_stream(rc.seed, cli_stream::kReference);
  if (be.is_oracle) {
    reference = sample_mixture(be.oracle->cond, static_cast<std::size_t>(rc.sweep.reference_samples),
                               ref_rng);
  } else {
    for (int i = 0; i < rc.sweep.reference_samples; ++i) {
      const int cls = rc.sampling.class_id ? *rc.sampling.class_id
                                           : i % rc.dataset.toy.classes;
      reference.push_back(generate_clip(cls, ref_rng, rc.dataset.toy).video);
    }
  }
  const double bandwidth = median_heuristic_bandwidth(reference);
  log << "reference set " << reference.size() << ", bandwidth "
      << format_metric(bandwidth) << "\n";

  // Probe points for the alignment column, shared by all rows.
  std::vector<std::pair<Tensor, int>> probes;
  RngStream probe_rng = derive_stream(rc.seed, cli_stream::kProbes);
  for (int p = 0; p < rc.sweep.probes; ++p) {
    Tensor x0 = be.is_oracle
                    ? sample_mixture_point(be.oracle->cond, probe_rng)
                    : generate_clip(rc.sampling.class_id ? *rc.sampling.class_id
                                                         : p % rc.dataset.toy.classes,
                                    probe_rng, rc.dataset.toy)
                          .video;
    const int t = static_cast<int>(probe_rng.next_u64() % static_cast<std::uint64_t>(sched.T));
    const Tensor noise = gaussian(probe_rng, x0.shape);
    probes.emplace_back(forward_marginal(x0, t, noise, sched), t);
  }

  std::vector<MetricsRow> rows;
  for (const SweepRowConfig& row : rc.sweep.rows) {
    const GuidanceSpec spec = sweep_row_spec(rc.guidance, row);
    SamplerRun run;
    run.sched = sched;
    run.spec = spec;
    run.restart = rc.restart;
    run.binding = be.binding;
    run.state_shape = be.state_shape;
    run.seed = rc.seed;  // same seed per row: arms are paired
    run.chains = rc.sweep.samples;
    const SampleResult res = sample(run);

    MetricsRow m = make_metrics_row(row);
    m.mmd = mmd_rbf(res.samples, reference, bandwidth);
    if (be.is_oracle) {
      m.mode_coverage = mode_coverage(res.samples, be.oracle->cond);
    } else {
      double fl = 0.0, sh = 0.0, dy = 0.0;
      for (const Tensor& v : res.samples) {
        fl += flicker_score(v);
        sh += sharpness_proxy(v);
        dy += dynamics_proxy(v);
      }
      const double inv = 1.0 / static_cast<double>(res.samples.size());
      m.flicker = fl * inv;
      m.sharpness = sh * inv;
      m.dynamics = dy * inv;
    }
    m.alignment_cosine = guided_alignment(be.binding, spec, probes);
    log << "row " << m.config_id << " mmd " << format_metric(m.mmd) << " coverage "
        << format_metric(m.mode_coverage) << " alignment "
        << format_metric(m.alignment_cosine) << "\n";
    rows.push_back(std::move(m));
  }

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path out(out_dir);
  atomic_write_file(out / "metrics.csv", metrics_csv(rows));
  write_json(out / "metrics.json", metrics_to_json(rows, bandwidth));
  log << "wrote " << (out / "metrics.csv").string() << " and "
      << (out / "metrics.json").string() << "\n";
}

// --- visualize ----------------------------------------------------------------

// Frames of one video tiled left to right into a single grayscale grid.
inline std::string video_grid_pgm(const Tensor& video) {
  const std::size_t f = video.shape[0], h = video.shape[2], w = video.shape[3];
  std::vector<double> grid(h * f * w);
  for (std::size_t fr = 0; fr < f; ++fr)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        grid[y * (f * w) + fr * w + x] = video.data[(fr * h + y) * w + x];
  return pgm_bytes(grid.data(), h, f * w);
}

inline void cmd_visualize(const RunConfig& rc, const std::string& out_dir,
                          std::ostream& log) {
  if (rc.visualize.t_list.empty()) {
    log << "visualize: t_list is empty, nothing to render\n";
    return;
  }
  if (out_dir.empty())
    throw ValidationError("visualize: no output directory (set out_dir or pass --out)");
  Backend be = make_backend(rc);
  if (be.is_oracle)
    throw ValidationError("visualize: needs a model checkpoint (oracle states are not videos)");

  SamplerRun run;
  run.sched = rc.schedule;
  run.spec = rc.guidance;
  run.restart = rc.restart;
  run.binding = be.binding;
  run.state_shape = be.state_shape;
  run.seed = rc.seed;
  run.chains = 1;
  const auto preds = capture_one_step_predictions(run, rc.visualize.t_list);

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path out(out_dir);
  nlohmann::json manifest = nlohmann::json::array();
  for (const OneStepPrediction& pred : preds) {
    const auto dir = out / ("t_" + zero_pad(pred.t, 4));
    std::filesystem::create_directories(dir);
    nlohmann::json names = nlohmann::json::array();
    for (const auto& [name, x0] : pred.x0_by_branch) {
      atomic_write_file(dir / (name + ".pgm"), video_grid_pgm(x0));
      names.push_back(name);
    }
    manifest.push_back({{"t", pred.t}, {"branches", names}});
  }
  write_json(out / "manifest.json", manifest);
  log << "rendered " << preds.size() << " step(s) under " << out_dir << "\n";
}

// --- gradcheck ----------------------------------------------------------------

inline void cmd_gradcheck(const RunConfig& rc, const std::string& out_dir,
                          std::ostream& log) {
  TransformerDenoiser model = rc.model.checkpoint.empty()
                                  ? init_denoiser(rc.model.arch, rc.seed)
                                  : load_configured_model(rc);
  RngStream clip_rng = derive_stream(rc.seed, cli_stream::kGradcheckClip);
  const ToyClip clip = generate_clip(0, clip_rng, rc.dataset.toy);
  const GradcheckReport rep =
      gradcheck(std::move(model), rc.schedule, clip, rc.gradcheck.t, rc.gradcheck.step,
                static_cast<std::size_t>(rc.gradcheck.entries_per_tensor),
                rc.seed * 2 + 1);
  for (const auto& tr : rep.per_tensor)
    log << tr.tensor << " " << format_metric(tr.max_rel_err) << "\n";
  log << "max_rel_err=" << format_metric(rep.max_rel_err) << "\n";
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    nlohmann::json per = nlohmann::json::array();
    for (const auto& tr : rep.per_tensor)
      per.push_back({{"tensor", tr.tensor}, {"max_rel_err", tr.max_rel_err}});
    write_json(std::filesystem::path(out_dir) / "gradcheck.json",
               {{"max_rel_err", rep.max_rel_err},
                {"step", rep.step},
                {"entries_per_tensor", rep.entries_per_tensor},
                {"per_tensor", per}});
  }
}

// --- oracle-demo ----------------------------------------------------------------

inline void cmd_oracle_demo(const RunConfig& rc, const std::string& out_dir,
                            std::ostream& log) {
  const ScoreCheckResult fd = score_fd_check(rc.seed);
  log << "score finite-difference check: max_rel_err " << format_metric(fd.max_rel_err)
      << " over " << fd.points << " points\n";

  const SharpeningResult sh = sharpening_experiment(2000, rc.seed);
  log << "guided 1-d chain: measured variance " << format_metric(sh.chain_variance)
      << ", recursion fixed point " << format_metric(sh.recursion_variance)
      << ", tilted-density target " << format_metric(sh.closed_form_target) << "\n";

  const RestartCheckResult rs = restart_experiment(1000, rc.seed);
  log << "restart: K=0 bitwise " << (rs.k0_bitwise ? "yes" : "NO") << ", K=2 var "
      << format_metric(rs.var_forward) << " (forward_renoise) / "
      << format_metric(rs.var_gap) << " (variance_gap)\n";

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_json(std::filesystem::path(out_dir) / "oracle_report.json",
               {{"score_fd", {{"max_rel_err", fd.max_rel_err}, {"points", fd.points}}},
                {"sharpening",
                 {{"chain_variance", sh.chain_variance},
                  {"chain_mean", sh.chain_mean},
                  {"recursion_variance", sh.recursion_variance},
                  {"closed_form_target", sh.closed_form_target},
                  {"chains", sh.chains}}},
                {"restart",
                 {{"k0_bitwise", rs.k0_bitwise},
                  {"mean_forward", rs.mean_forward},
                  {"var_forward", rs.var_forward},
                  {"mean_gap", rs.mean_gap},
                  {"var_gap", rs.var_gap},
                  {"chains", rs.chains}}}});
    log << "wrote " << (std::filesystem::path(out_dir) / "oracle_report.json").string()
        << "\n";
  }
}

}  // namespace stg
