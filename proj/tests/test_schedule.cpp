#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "stg/schedule.hpp"

using namespace stg;

namespace {
NoiseSchedule default_sched() { return linear_schedule(200, 1e-4, 0.02); }
}  // namespace

// Endpoint values recomputed with an independent cumulative-product
// implementation (numpy, float64).
TEST_CASE("linear schedule reference values") {
  const NoiseSchedule s = default_sched();
  REQUIRE(s.T == 200);
  CHECK(s.beta[0] == Catch::Approx(1e-4).epsilon(1e-12));
  CHECK(s.beta[199] == Catch::Approx(0.02).epsilon(1e-12));
  CHECK(s.beta[1] == Catch::Approx(1e-4 + (0.02 - 1e-4) / 199.0).epsilon(1e-12));
  CHECK(s.alpha[0] == Catch::Approx(0.9999).epsilon(1e-12));
  CHECK(s.alpha_bar[0] == Catch::Approx(0.9999).epsilon(1e-12));
  CHECK(s.alpha_bar[199] == Catch::Approx(0.132182754251).epsilon(1e-10));
  CHECK(s.alpha_bar[150] == Catch::Approx(0.315549510).epsilon(1e-8));
  CHECK(s.alpha_bar[190] == Catch::Approx(0.157959303).epsilon(1e-8));

  const NoiseSchedule long_s = linear_schedule(1000, 1e-4, 0.02);
  CHECK(long_s.alpha_bar[999] == Catch::Approx(4.0358297654e-05).epsilon(1e-8));
}

TEST_CASE("posterior variance beta_tilde") {
  const NoiseSchedule s = default_sched();
  // First step has no previous level to interpolate toward: beta_tilde[0] = 0.
  CHECK(s.sigma_sq[0] == 0.0);
  CHECK(s.sigma_sq[1] == Catch::Approx(6.66711114074e-05).epsilon(1e-9));
  CHECK(s.sigma_sq[199] == Catch::Approx(0.0199378300617).epsilon(1e-9));
  for (int t = 1; t < s.T; ++t) {
    const double expect =
        (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t];
    REQUIRE(s.sigma_sq[t] == Catch::Approx(expect).epsilon(1e-12));
    REQUIRE(s.sigma_sq[t] < s.beta[t]);  // posterior variance is the tighter one
  }
}

TEST_CASE("variance kind beta uses the raw rate") {
  const NoiseSchedule s = linear_schedule(200, 1e-4, 0.02, VarianceKind::beta);
  for (int t = 0; t < s.T; ++t) REQUIRE(s.sigma_sq[t] == s.beta[t]);
  // Both kinds share beta/alpha/alpha_bar.
  const NoiseSchedule tilde = default_sched();
  CHECK(s.alpha_bar == tilde.alpha_bar);
}

TEST_CASE("schedule validation") {
  CHECK_THROWS_AS(linear_schedule(1, 1e-4, 0.02), ValidationError);
  CHECK_THROWS_AS(linear_schedule(200, 0.0, 0.02), ValidationError);
  CHECK_THROWS_AS(linear_schedule(200, -1e-4, 0.02), ValidationError);
  CHECK_THROWS_AS(linear_schedule(200, 0.03, 0.02), ValidationError);
  CHECK_THROWS_AS(linear_schedule(200, 1e-4, 1.0), ValidationError);
  CHECK_NOTHROW(linear_schedule(2, 1e-4, 1e-4));
}

TEST_CASE("forward marginal matches closed form") {
  const NoiseSchedule s = default_sched();
  const Tensor x0({1}, {0.8});
  const Tensor noise({1}, {-1.1});
  const Tensor xt = forward_marginal(x0, 150, noise, s);
  CHECK(xt[0] == Catch::Approx(-0.460656402940941).epsilon(1e-12));

  // Degenerate noise level: t=0 keeps the signal almost intact.
  const Tensor x0b({2}, {1.0, -1.0});
  const Tensor zero({2}, {0.0, 0.0});
  const Tensor near = forward_marginal(x0b, 0, zero, s);
  CHECK(near[0] == Catch::Approx(std::sqrt(0.9999)).epsilon(1e-12));

  CHECK_THROWS_AS(forward_marginal(x0, 200, noise, s), ValidationError);
  CHECK_THROWS_AS(forward_marginal(x0, -1, noise, s), ValidationError);
  CHECK_THROWS_AS(forward_marginal(x0b, 10, noise, s), ValidationError);
}

TEST_CASE("ancestral step at t=0 is the noiseless mean") {
  const NoiseSchedule s = default_sched();
  const Tensor x({1}, {0.5});
  const Tensor eps({1}, {0.3});
  RngStream rng = derive_stream(9, 9);
  const Tensor out = ancestral_step(x, eps, 0, s, rng);
  CHECK(out[0] == Catch::Approx(0.497024851863905).epsilon(1e-12));
  CHECK(rng.counter == 0);  // no noise drawn on the final step
}

TEST_CASE("ancestral step at t>0 adds scaled posterior noise") {
  const NoiseSchedule s = default_sched();
  const Tensor x({1}, {0.7});
  const Tensor eps({1}, {-0.3});
  RngStream rng = derive_stream(9, 9);
  const Tensor out = ancestral_step(x, eps, 120, s, rng);
  // Pinned against mean + sqrt(beta_tilde[120]) * z where z is the first
  // gaussian of stream (9, 9): z = -1.4025963008708682.
  CHECK(out[0] == Catch::Approx(0.555899063022971).epsilon(1e-12));
  CHECK(rng.counter == 2);  // exactly one Box-Muller pair for one element

  // The same update decomposes as mean + sd * z with the replayed stream.
  RngStream replay = derive_stream(9, 9);
  double z0 = 0.0, z1 = 0.0;
  gaussian_pair(replay, z0, z1);
  const double coef = (1.0 - s.alpha[120]) / std::sqrt(1.0 - s.alpha_bar[120]);
  const double mean = (x[0] - coef * eps[0]) / std::sqrt(s.alpha[120]);
  CHECK(out[0] == Catch::Approx(mean + std::sqrt(s.sigma_sq[120]) * z0).epsilon(1e-14));

  CHECK_THROWS_AS(ancestral_step(x, eps, 200, s, rng), ValidationError);
}

TEST_CASE("one step denoise inverts the forward marginal") {
  const NoiseSchedule s = default_sched();
  const Tensor x({1}, {0.9});
  const Tensor eps({1}, {0.4});
  CHECK(one_step_denoise(x, eps, 150, s)[0] ==
        Catch::Approx(1.013059418108349).epsilon(1e-12));

  // forward_marginal with the true noise, then one_step_denoise with the same
  // noise, is an exact round trip at any level.
  const Tensor x0({3}, {0.2, -0.7, 1.3});
  RngStream rng = derive_stream(4, 2);
  const Tensor noise = gaussian(rng, x0.shape);
  for (int t : {0, 60, 199}) {
    const Tensor xt = forward_marginal(x0, t, noise, s);
    const Tensor rec = one_step_denoise(xt, noise, t, s);
    for (std::size_t i = 0; i < x0.size(); ++i)
      REQUIRE(rec[i] == Catch::Approx(x0[i]).margin(1e-12));
  }
}
