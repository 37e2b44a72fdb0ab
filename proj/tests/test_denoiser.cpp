#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "stg/denoiser.hpp"
#include "stg/io.hpp"
#include "stg/schedule.hpp"
#include "stg/toydata.hpp"

using namespace stg;

namespace {

// Small geometry keeps forward passes cheap; tests that mirror production
// conditions use the default Arch{} instead.
Arch small_arch(AttentionMode mode = AttentionMode::factorized) {
  Arch a;
  a.layers = 2;
  a.dim = 8;
  a.frames = 4;
  a.height = 4;
  a.width = 4;
  a.attention_mode = mode;
  return a;
}

ToyDataConfig small_toy() {
  ToyDataConfig t;
  t.frames = 4;
  t.height = 4;
  t.width = 4;
  return t;
}

Tensor random_input(const Arch& a, std::uint64_t seed) {
  RngStream rng = derive_stream(seed, 0);
  return gaussian(rng, {a.frames, 1, a.height, a.width});
}

bool same_params(const TransformerDenoiser& a, const TransformerDenoiser& b) {
  auto pa = param_list(a), pb = param_list(b);
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i].first != pb[i].first || pa[i].second->data != pb[i].second->data) return false;
  return true;
}

}  // namespace

TEST_CASE("arch validation") {
  Arch a = small_arch();
  CHECK_NOTHROW(validate_arch(a));
  a.dim = 7;
  CHECK_THROWS_AS(validate_arch(a), ValidationError);
  a = small_arch();
  a.layers = 0;
  CHECK_THROWS_AS(validate_arch(a), ValidationError);
  a = small_arch();
  a.heads = 2;
  CHECK_THROWS_AS(validate_arch(a), ValidationError);
  a = small_arch();
  a.frames = 0;
  CHECK_THROWS_AS(validate_arch(a), ValidationError);
}

TEST_CASE("parameter tensor counts per attention mode") {
  // global: class_emb, in_w, in_b, out_w, out_b = 5
  // per layer: attention blocks (6 tensors each) + mlp (6 tensors)
  const auto fact = init_denoiser(Arch{}, 1);
  CHECK(param_list(fact).size() == 5 + 4 * (2 * 6 + 6));  // 77

  Arch j;
  j.attention_mode = AttentionMode::joint;
  const auto joint = init_denoiser(j, 1);
  CHECK(param_list(joint).size() == 5 + 4 * (1 * 6 + 6));  // 53
}

TEST_CASE("init is deterministic in the seed") {
  const Arch a = small_arch();
  const auto m1 = init_denoiser(a, 3);
  const auto m2 = init_denoiser(a, 3);
  CHECK(same_params(m1, m2));
  const auto m3 = init_denoiser(a, 4);
  CHECK_FALSE(same_params(m1, m3));

  // layer-norm gains start at one, all biases at zero
  for (const auto& [name, t] : param_list(m1)) {
    if (name.ends_with("ln_g"))
      for (double v : t->data) REQUIRE(v == 1.0);
    if (name.ends_with("ln_b") || name.ends_with("b1") || name.ends_with("b2") ||
        name == "in_b" || name == "out_b")
      for (double v : t->data) REQUIRE(v == 0.0);
  }
}

TEST_CASE("forward is deterministic and sensitive to its inputs") {
  const Arch a = small_arch();
  const auto m = init_denoiser(a, 3);
  const Tensor x = random_input(a, 11);
  PerturbationConfig none;

  const Tensor e1 = denoiser_forward(m, x, 50, 0, none);
  const Tensor e2 = denoiser_forward(m, x, 50, 0, none);
  REQUIRE(e1.shape == x.shape);
  CHECK(e1.data == e2.data);

  CHECK(denoiser_forward(m, x, 51, 0, none).data != e1.data);       // timestep embeds
  CHECK(denoiser_forward(m, x, 50, 1, none).data != e1.data);       // class embeds
  CHECK(denoiser_forward(m, x, 50, std::nullopt, none).data != e1.data);  // null class row
}

TEST_CASE("forward input validation") {
  const Arch a = small_arch();
  const auto m = init_denoiser(a, 3);
  PerturbationConfig none;
  CHECK_THROWS_AS(denoiser_forward(m, Tensor::zeros({4, 1, 4, 5}), 10, 0, none),
                  ValidationError);
  CHECK_THROWS_AS(denoiser_forward(m, random_input(a, 1), -1, 0, none), ValidationError);
  CHECK_THROWS_AS(denoiser_forward(m, random_input(a, 1), 10, 7, none), ValidationError);

  PerturbationConfig skip;
  skip.mode = PerturbMode::residual_skip;
  skip.layers = {0};
  ForwardTrace trace;
  CHECK_THROWS_AS(denoiser_forward(m, random_input(a, 1), 10, 0, skip, &trace, true),
                  ValidationError);
}

TEST_CASE("perturbation validation") {
  const Arch fact = small_arch();
  PerturbationConfig p;
  p.mode = PerturbMode::attention_skip;
  p.layers = {};
  CHECK_THROWS_AS(validate_perturbation(fact, p), ValidationError);  // needs a layer
  p.layers = {2};
  CHECK_THROWS_AS(validate_perturbation(fact, p), ValidationError);  // out of range
  p.layers = {1};
  p.axis = Axis::joint;
  CHECK_THROWS_AS(validate_perturbation(fact, p), ValidationError);  // no joint axis
  p.axis = Axis::temporal;
  CHECK_NOTHROW(validate_perturbation(fact, p));

  const Arch joint = small_arch(AttentionMode::joint);
  p.axis = Axis::spatial;
  CHECK_THROWS_AS(validate_perturbation(joint, p), ValidationError);
  p.axis = Axis::joint;
  CHECK_NOTHROW(validate_perturbation(joint, p));

  // residual_skip ignores the axis on both model kinds
  p.mode = PerturbMode::residual_skip;
  p.axis = Axis::spatial;
  CHECK_NOTHROW(validate_perturbation(joint, p));
}

TEST_CASE("residual skip of every layer leaves only the projections") {
  const Arch a = small_arch();
  const auto m = init_denoiser(a, 5);
  const Tensor x = random_input(a, 21);
  PerturbationConfig all_skip;
  all_skip.mode = PerturbMode::residual_skip;
  all_skip.layers = {0, 1};
  const int t = 33;
  const Tensor eps = denoiser_forward(m, x, t, 2, all_skip);

  // By hand: out(in(x) + temb + pemb + class_emb[2]) per token.
  const std::size_t d = a.dim;
  std::vector<double> temb(d), pemb(d);
  sinusoid_into(static_cast<double>(t), d, temb.data());
  for (std::size_t n = 0; n < a.tokens(); ++n) {
    sinusoid_into(static_cast<double>(n), d, pemb.data());
    double acc = m.out_b[0];
    for (std::size_t j = 0; j < d; ++j)
      acc += m.out_w[j] *
             (m.in_w[j] * x[n] + m.in_b[j] + temb[j] + pemb[j] + m.class_emb[2 * d + j]);
    REQUIRE(eps[n] == Catch::Approx(acc).margin(1e-12));
  }
}

TEST_CASE("residual skip changes nothing before the target layer") {
  const Arch a = small_arch();
  const auto m = init_denoiser(a, 5);
  const Tensor x = random_input(a, 22);
  PerturbationConfig none;
  PerturbationConfig skip1;
  skip1.mode = PerturbMode::residual_skip;
  skip1.layers = {1};

  ForwardTrace base_trace, skip_trace;
  const Tensor base = denoiser_forward(m, x, 40, 0, none, &base_trace);
  const Tensor skipped = denoiser_forward(m, x, 40, 0, skip1, &skip_trace);
  REQUIRE(base_trace.layer_inputs.size() == a.layers + 1);
  REQUIRE(skip_trace.layer_inputs.size() == a.layers + 1);
  // inputs to layers 0 and 1 agree bitwise; the skip only shows up after
  CHECK(skip_trace.layer_inputs[0].data == base_trace.layer_inputs[0].data);
  CHECK(skip_trace.layer_inputs[1].data == base_trace.layer_inputs[1].data);
  CHECK(skip_trace.layer_inputs[2].data != base_trace.layer_inputs[2].data);
  CHECK(base.data != skipped.data);
  // the skipped layer passes its input through unchanged
  CHECK(skip_trace.layer_inputs[2].data == skip_trace.layer_inputs[1].data);
}

TEST_CASE("attention skip bypass equals the materialized identity matrix") {
  for (AttentionMode mode : {AttentionMode::factorized, AttentionMode::joint}) {
    const Arch a = small_arch(mode);
    const auto m = init_denoiser(a, 9);
    PerturbationConfig bypass;
    bypass.mode = PerturbMode::attention_skip;
    bypass.layers = {0, 1};
    bypass.axis = mode == AttentionMode::joint ? Axis::joint : Axis::temporal;
    PerturbationConfig materialized = bypass;
    materialized.materialize_identity = true;

    for (int i = 0; i < 20; ++i) {
      const Tensor x = random_input(a, 100 + i);
      const Tensor lhs = denoiser_forward(m, x, 7 * i, 1, bypass);
      const Tensor rhs = denoiser_forward(m, x, 7 * i, 1, materialized);
      double worst = 0.0;
      for (std::size_t j = 0; j < lhs.size(); ++j)
        worst = std::max(worst, std::abs(lhs[j] - rhs[j]));
      REQUIRE(worst <= 1e-12);
    }
  }
}

TEST_CASE("attention skip differs from the unperturbed forward") {
  const Arch a = small_arch();
  const auto m = init_denoiser(a, 9);
  const Tensor x = random_input(a, 55);
  PerturbationConfig none;
  PerturbationConfig skip;
  skip.mode = PerturbMode::attention_skip;
  skip.layers = {1};
  skip.axis = Axis::spatial;
  CHECK(denoiser_forward(m, x, 12, 0, skip).data !=
        denoiser_forward(m, x, 12, 0, none).data);
}

TEST_CASE("attention blur approaches identity as sigma shrinks") {
  const Arch a = small_arch();
  const auto m = init_denoiser(a, 9);
  const Tensor x = random_input(a, 66);
  PerturbationConfig none;
  const Tensor base = denoiser_forward(m, x, 25, 0, none);

  PerturbationConfig blur;
  blur.mode = PerturbMode::attention_blur;
  blur.layers = {0, 1};
  blur.axis = Axis::spatial;

  blur.sigma_blur = 1e-4;
  const Tensor tight = denoiser_forward(m, x, 25, 0, blur);
  double drift = 0.0;
  for (std::size_t j = 0; j < base.size(); ++j)
    drift = std::max(drift, std::abs(tight[j] - base[j]));
  CHECK(drift <= 1e-9);

  // the default width (sigma <= 0) flattens rows and must differ
  blur.sigma_blur = 0.0;
  CHECK(denoiser_forward(m, x, 25, 0, blur).data != base.data);
  // wider blur moves the output further from the sharp forward
  blur.sigma_blur = 0.5;
  const Tensor mid = denoiser_forward(m, x, 25, 0, blur);
  double mid_drift = 0.0;
  for (std::size_t j = 0; j < base.size(); ++j)
    mid_drift = std::max(mid_drift, std::abs(mid[j] - base[j]));
  CHECK(mid_drift > drift);
}

TEST_CASE("training noise draw consumes pairs then one uniform") {
  const ToyClip clip = render_clip(1, 3.0, 3.0, 1.0, small_toy());
  RngStream s = derive_stream(8, 8);
  const ClipDraw d = draw_training_noise(clip, s, 0.1);
  // 64 video elements = 32 Box-Muller pairs = 64 uniforms, then the coin.
  REQUIRE(d.noise.size() == 64);

  RngStream replay = derive_stream(8, 8);
  const Tensor expect = gaussian(replay, clip.video.shape);
  CHECK(d.noise.data == expect.data);
  CHECK(replay.counter == 64);

  // dropout extremes: p=0 always keeps the label, p=1 always drops it
  CHECK(draw_training_noise(clip, derive_stream(8, 8), 0.0).cls == std::size_t{1});
  CHECK_FALSE(draw_training_noise(clip, derive_stream(8, 8), 1.0).cls.has_value());
}

TEST_CASE("dsm loss accumulates gradients across calls") {
  const Arch a = small_arch();
  const auto m = init_denoiser(a, 13);
  const NoiseSchedule sched = linear_schedule(200, 1e-4, 0.02);
  RngStream clip_rng = derive_stream(1, 1);
  const ToyClip clip = generate_clip(0, clip_rng, small_toy());
  const std::vector<const ToyClip*> batch = {&clip};
  const std::vector<int> ts = {100};

  TransformerDenoiser once = zeros_like(m);
  const double l1 = dsm_loss(m, sched, batch, ts, derive_stream(2, 2), 0.1, &once);
  TransformerDenoiser twice = zeros_like(m);
  const double l2a = dsm_loss(m, sched, batch, ts, derive_stream(2, 2), 0.1, &twice);
  const double l2b = dsm_loss(m, sched, batch, ts, derive_stream(2, 2), 0.1, &twice);
  CHECK(l1 == l2a);
  CHECK(l2a == l2b);

  auto p1 = param_list(once), p2 = param_list(twice);
  for (std::size_t i = 0; i < p1.size(); ++i)
    for (std::size_t j = 0; j < p1[i].second->size(); ++j)
      REQUIRE((*p2[i].second)[j] == Catch::Approx(2.0 * (*p1[i].second)[j]).margin(1e-300));

  CHECK_THROWS_AS(dsm_loss(m, sched, {}, {}, derive_stream(2, 2), 0.1), ValidationError);
  CHECK_THROWS_AS(dsm_loss(m, sched, batch, {1, 2}, derive_stream(2, 2), 0.1),
                  ValidationError);
  CHECK_THROWS_AS(dsm_loss(m, sched, batch, ts, derive_stream(2, 2), 1.5), ValidationError);
}

TEST_CASE("one adam step moves weights by about the learning rate") {
  const Arch a = small_arch();
  auto m = init_denoiser(a, 17);
  const Tensor before = m.in_w;
  TransformerDenoiser grads = zeros_like(m);
  for (auto& v : grads.in_w.data) v = 1.0;

  AdamState state = make_adam_state(m);
  AdamConfig cfg;
  adam_step(m, grads, state, cfg);
  REQUIRE(state.step == 1);
  for (std::size_t j = 0; j < m.in_w.size(); ++j)
    REQUIRE(m.in_w[j] == Catch::Approx(before[j] - cfg.lr).epsilon(1e-4));
  // untouched tensors stay put when their gradient is zero
  CHECK(m.out_w.data == init_denoiser(a, 17).out_w.data);
}

TEST_CASE("thirty adam steps at least halve the training loss") {
  const Arch a = small_arch();
  auto m = init_denoiser(a, 19);
  const NoiseSchedule sched = linear_schedule(200, 1e-4, 0.02);
  RngStream data_rng = derive_stream(3, 3);
  const auto dataset = make_dataset(8, 4, data_rng, small_toy());
  std::vector<const ToyClip*> batch;
  for (const auto& c : dataset) batch.push_back(&c);

  AdamState state = make_adam_state(m);
  AdamConfig cfg;
  RngStream pick = derive_stream(3, 4);
  double first = 0.0, last = 0.0;
  for (int k = 0; k < 30; ++k) {
    std::vector<int> ts;
    for (std::size_t i = 0; i < batch.size(); ++i)
      ts.push_back(static_cast<int>(pick.next_u64() % 200));
    TransformerDenoiser grads = zeros_like(m);
    const double loss =
        dsm_loss(m, sched, batch, ts, substream(derive_stream(3, 5), k), 0.1, &grads);
    adam_step(m, grads, state, cfg);
    if (k == 0) first = loss;
    last = loss;
  }
  CHECK(last < 0.5 * first);
}

TEST_CASE("checkpoint round trip preserves every bit") {
  const auto dir = std::filesystem::temp_directory_path() / "stg_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "m.stgckpt").string();

  for (AttentionMode mode : {AttentionMode::factorized, AttentionMode::joint}) {
    const Arch a = small_arch(mode);
    const auto m = init_denoiser(a, 23);
    save_checkpoint(m, path);
    const auto back = load_checkpoint(path);
    CHECK(back.arch.attention_mode == mode);
    CHECK(back.arch.layers == a.layers);
    CHECK(back.arch.dim == a.dim);
    CHECK(same_params(m, back));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint loader rejects malformed files") {
  const auto dir = std::filesystem::temp_directory_path() / "stg_ckpt_bad";
  std::filesystem::create_directories(dir);
  const std::string good_path = (dir / "good.stgckpt").string();
  const auto m = init_denoiser(small_arch(), 29);
  save_checkpoint(m, good_path);
  const std::string good = read_file(good_path);

  auto write_variant = [&](const std::string& bytes) {
    const std::string p = (dir / "bad.stgckpt").string();
    atomic_write_file(p, bytes);
    return p;
  };

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(load_checkpoint(write_variant(bad_magic)), ValidationError);

  std::string bad_version = good;
  bad_version[8] = 9;
  CHECK_THROWS_AS(load_checkpoint(write_variant(bad_version)), ValidationError);

  std::string bad_mode = good;
  bad_mode[8 + 4 * 8] = 2;  // attention_mode field
  CHECK_THROWS_AS(load_checkpoint(write_variant(bad_mode)), ValidationError);

  CHECK_THROWS_AS(load_checkpoint(write_variant(good.substr(0, good.size() - 3))),
                  ValidationError);
  CHECK_THROWS_AS(load_checkpoint(write_variant(good + "xx")), ValidationError);
  CHECK_THROWS_AS(load_checkpoint((dir / "absent.stgckpt").string()), RuntimeFault);

  std::filesystem::remove_all(dir);
}

TEST_CASE("analytic gradients match finite differences") {
  // Mirrors the frozen audit configuration; entry picks for a smaller
  // entries_per_tensor are a subset, so the error can only shrink.
  const auto model = init_denoiser(Arch{}, 7);
  const NoiseSchedule sched = linear_schedule(200, 1e-4, 0.02);
  RngStream clip_rng = derive_stream(7, 99);
  const ToyClip clip = generate_clip(0, clip_rng);
  const GradcheckReport rep = gradcheck(model, sched, clip, 120, 1e-5, 3, 1234);
  REQUIRE(rep.per_tensor.size() == 77);
  CHECK(rep.max_rel_err < 1e-5);
  for (const auto& tr : rep.per_tensor) REQUIRE(tr.max_rel_err < 1e-5);
}

TEST_CASE("sinusoid embedding interleaves sin and cos") {
  std::vector<double> out(6);
  sinusoid_into(0.0, 6, out.data());
  CHECK(out[0] == 0.0);
  CHECK(out[1] == 1.0);
  CHECK(out[2] == 0.0);
  CHECK(out[3] == 1.0);

  sinusoid_into(2.5, 6, out.data());
  CHECK(out[0] == Catch::Approx(std::sin(2.5)));
  CHECK(out[1] == Catch::Approx(std::cos(2.5)));
}

TEST_CASE("attention groups partition the token grid") {
  Arch a = small_arch();
  const auto spatial = attention_groups(a, Axis::spatial);
  REQUIRE(spatial.size() == 4);          // one group per frame
  REQUIRE(spatial[0].size() == 16);      // h*w tokens
  CHECK(spatial[1][0] == 16);            // frame 1 starts after frame 0's tokens

  const auto temporal = attention_groups(a, Axis::temporal);
  REQUIRE(temporal.size() == 16);        // one group per pixel
  REQUIRE(temporal[3].size() == 4);      // one token per frame
  CHECK(temporal[3][2] == 2 * 16 + 3);   // strided by h*w

  const auto joint = attention_groups(a, Axis::joint);
  REQUIRE(joint.size() == 1);
  CHECK(joint[0].size() == a.tokens());
}
