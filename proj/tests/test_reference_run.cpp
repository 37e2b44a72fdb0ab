#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "stg/commands.hpp"

// Checks against the reference training run produced by the train_reference
// fixture. STG_REF_RUN points at its output directory; STG_CLI at the binary.

using namespace stg;
namespace fs = std::filesystem;

namespace {

fs::path ref_dir() {
  const char* p = std::getenv("STG_REF_RUN");
  if (!p || !*p) FAIL("STG_REF_RUN must point at the reference training output");
  return fs::path(p);
}

std::string cli_path() {
  const char* p = std::getenv("STG_CLI");
  if (!p || !*p) FAIL("STG_CLI must point at the built binary");
  return p;
}

std::vector<double> load_losses() {
  const std::string csv = read_file(ref_dir() / "loss.csv");
  std::vector<double> losses;
  std::size_t pos = csv.find('\n') + 1;
  while (pos < csv.size()) {
    const std::size_t comma = csv.find(',', pos);
    const std::size_t nl = csv.find('\n', pos);
    losses.push_back(std::stod(csv.substr(comma + 1, nl - comma - 1)));
    pos = nl + 1;
  }
  return losses;
}

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t n) {
  return std::accumulate(v.begin() + from, v.begin() + from + n, 0.0) /
         static_cast<double>(n);
}

}  // namespace

TEST_CASE("reference training run halves the denoising loss") {
  const std::vector<double> losses = load_losses();
  REQUIRE(losses.size() == 500);
  for (double l : losses) REQUIRE(std::isfinite(l));
  // batch-to-batch noise is large, so compare 10-step averages at the ends
  const double head = mean_of(losses, 0, 10);
  const double tail = mean_of(losses, losses.size() - 10, 10);
  INFO("head mean " << head << ", tail mean " << tail);
  CHECK(tail < 0.5 * head);
}

TEST_CASE("reference checkpoint stores the configured architecture") {
  const TransformerDenoiser model =
      load_checkpoint((ref_dir() / "checkpoint.stgckpt").string());
  CHECK(model.arch.layers == 4);
  CHECK(model.arch.dim == 16);
  CHECK(model.arch.heads == 1);
  CHECK(model.arch.attention_mode == AttentionMode::factorized);
  CHECK(model.arch.frames == 8);
  CHECK(model.arch.height == 8);
  CHECK(model.arch.width == 8);
  CHECK(model.arch.classes == 4);
}

TEST_CASE("guided sampling from the trained model stays finite and in range") {
  auto model = std::make_shared<const TransformerDenoiser>(
      load_checkpoint((ref_dir() / "checkpoint.stgckpt").string()));

  GuidanceSpec spec;
  spec.cfg_scale = 1.0;
  spec.stg = StgJoint{1.0};
  spec.perturb.mode = PerturbMode::attention_skip;
  spec.perturb.axis = Axis::spatial;
  spec.perturb.layers = {3};

  SamplerRun run;
  run.sched = linear_schedule(200, 1e-4, 0.02);
  run.spec = spec;
  run.binding = bind_denoiser(model, spec, 0);
  run.state_shape = {8, 1, 8, 8};
  run.seed = 5;
  run.chains = 1;
  const SampleResult res = sample(run);

  REQUIRE(res.samples.size() == 1);
  const Tensor& video = res.samples[0];
  REQUIRE(video.shape == Shape{8, 1, 8, 8});
  double lo = 1e300, hi = -1e300;
  for (double v : video.data) {
    REQUIRE(std::isfinite(v));
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  // trained on renders in [0, 1]; guided samples may overshoot a little
  CHECK(lo > -3.0);
  CHECK(hi < 4.0);
  CHECK(hi > 0.1);  // not a blank clip
}

TEST_CASE("guidance families disagree on rendered one-step grids") {
  const fs::path dir = fs::temp_directory_path() / "stg_ref_viz";
  fs::remove_all(dir);
  fs::create_directories(dir);

  const fs::path cfg = dir / "viz.json";
  {
    std::ofstream f(cfg);
    f << R"({
  "seed": 17,
  "model": {"checkpoint": ")" << (ref_dir() / "checkpoint.stgckpt").string() << R"("},
  "guidance": {
    "cfg_scale": 1.0,
    "stg": {"mode": "joint", "w": 1.0},
    "perturb": {"mode": "attention_skip", "axis": "spatial"}
  },
  "visualize": {"t_list": [170]}
}
)";
  }
  const fs::path out = dir / "out";
  const std::string cmd = cli_path() + " visualize --config " + cfg.string() + " --out " +
                          out.string() + " > " + (dir / "log.txt").string() + " 2>&1";
  REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);

  const fs::path step = out / "t_0170";
  for (const std::string b : {"cond", "uncond", "weak_joint", "cfg", "stg", "guided"})
    REQUIRE(fs::exists(step / (b + ".pgm")));
  CHECK(read_file(step / "cfg.pgm") != read_file(step / "stg.pgm"));
  CHECK(read_file(step / "cond.pgm") != read_file(step / "guided.pgm"));
}
