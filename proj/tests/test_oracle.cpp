#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "stg/oracle.hpp"
#include "stg/schedule.hpp"

using namespace stg;

namespace {

GaussianMixture two_comp() {
  GaussianMixture gm;
  gm.components = {{0.3, Tensor({1}, {-1.0}), 0.5},
                   {0.7, Tensor({1}, {2.0}), 1.5}};
  return gm;
}

GaussianMixture labeled() {
  GaussianMixture gm;
  gm.components = {{0.2, Tensor({1}, {-2.0}), 0.4},
                   {0.3, Tensor({1}, {0.0}), 0.6},
                   {0.5, Tensor({1}, {3.0}), 1.0}};
  gm.class_labels = std::vector<int>{0, 1, 0};
  return gm;
}

}  // namespace

TEST_CASE("mixture validation") {
  CHECK_THROWS_AS(validate_mixture(GaussianMixture{}), ValidationError);

  GaussianMixture gm = two_comp();
  CHECK_NOTHROW(validate_mixture(gm));

  gm.components[0].weight = 0.0;
  CHECK_THROWS_AS(validate_mixture(gm), ValidationError);
  gm = two_comp();
  gm.components[1].variance = -1.0;
  CHECK_THROWS_AS(validate_mixture(gm), ValidationError);
  gm = two_comp();
  gm.components[1].mean = Tensor({2}, {0.0, 0.0});
  CHECK_THROWS_AS(validate_mixture(gm), ValidationError);
  gm = two_comp();
  gm.components[0].weight = 0.4;  // sums to 1.1
  CHECK_THROWS_AS(validate_mixture(gm), ValidationError);
  gm = two_comp();
  gm.class_labels = std::vector<int>{0};
  CHECK_THROWS_AS(validate_mixture(gm), ValidationError);
}

// Both pins recomputed with an independent numpy implementation of the noised
// mixture (log-sum-exp over components, default 200-step schedule, t=60).
TEST_CASE("noised epsilon and log density reference values") {
  const NoiseSchedule s = linear_schedule(200, 1e-4, 0.02);
  const GaussianMixture gm = two_comp();
  const Tensor x({1}, {0.4});
  CHECK(noised_epsilon(gm, x, 60, s)[0] ==
        Catch::Approx(-0.095439767347325).epsilon(1e-12));
  CHECK(log_density_t(gm, x, 60, s) ==
        Catch::Approx(-1.887800260626203).epsilon(1e-12));
}

TEST_CASE("unit gaussian epsilon is exactly sqrt(1-abar) x") {
  const NoiseSchedule s = linear_schedule(200, 1e-4, 0.02);
  GaussianMixture gm;
  gm.components = {{1.0, Tensor({3}, {0.0, 0.0, 0.0}), 1.0}};
  // The noised marginal of N(0, I) is N(0, I) at every level, so the score is
  // -x and eps = sqrt(1 - abar) x with no mixture-weight terms involved.
  for (int t : {0, 60, 199}) {
    const Tensor x({3}, {0.3, -1.2, 2.5});
    const Tensor eps = noised_epsilon(gm, x, t, s);
    const double c = std::sqrt(1.0 - s.alpha_bar[t]);
    for (std::size_t j = 0; j < 3; ++j)
      REQUIRE(eps[j] == Catch::Approx(c * x[j]).margin(1e-14));
  }
}

TEST_CASE("epsilon matches a finite-difference score check") {
  const NoiseSchedule s = linear_schedule(200, 1e-4, 0.02);
  const GaussianMixture gm = two_comp();
  const double h = 1e-6;
  for (int t : {5, 60, 150, 199}) {
    for (double xv : {-2.0, 0.4, 3.5}) {
      const Tensor x({1}, {xv});
      const Tensor xp({1}, {xv + h});
      const Tensor xm({1}, {xv - h});
      const double fd_score =
          (log_density_t(gm, xp, t, s) - log_density_t(gm, xm, t, s)) / (2.0 * h);
      const double eps = noised_epsilon(gm, x, t, s)[0];
      REQUIRE(eps == Catch::Approx(-std::sqrt(1.0 - s.alpha_bar[t]) * fd_score)
                         .epsilon(1e-6));
    }
  }
}

TEST_CASE("far-tail inputs stay finite") {
  const NoiseSchedule s = linear_schedule(200, 1e-4, 0.02);
  const GaussianMixture gm = two_comp();
  for (double xv : {-1e6, 1e6, 1e8}) {
    const Tensor x({1}, {xv});
    const Tensor eps = noised_epsilon(gm, x, 100, s);
    REQUIRE(std::isfinite(eps[0]));
    // Far from all modes the responsibilities saturate and the pull is the
    // single-Gaussian one toward the winning component.
    REQUIRE(std::isfinite(log_density_t(gm, x, 100, s)));
  }
}

TEST_CASE("dimension mismatch is rejected") {
  const NoiseSchedule s = linear_schedule(200, 1e-4, 0.02);
  const GaussianMixture gm = two_comp();
  CHECK_THROWS_AS(noised_epsilon(gm, Tensor({2}, {0.0, 0.0}), 60, s), ValidationError);
  CHECK_THROWS_AS(noised_epsilon(gm, Tensor({1}, {0.0}), 200, s), ValidationError);
}

TEST_CASE("condition_on_class keeps and renormalizes the class slice") {
  const GaussianMixture gm = labeled();
  const GaussianMixture c0 = condition_on_class(gm, 0);
  REQUIRE(c0.components.size() == 2);
  CHECK(c0.components[0].weight == Catch::Approx(0.2 / 0.7).epsilon(1e-14));
  CHECK(c0.components[1].weight == Catch::Approx(0.5 / 0.7).epsilon(1e-14));
  CHECK(c0.components[0].mean[0] == -2.0);
  CHECK(c0.components[1].mean[0] == 3.0);
  CHECK_NOTHROW(validate_mixture(c0));

  const GaussianMixture c1 = condition_on_class(gm, 1);
  REQUIRE(c1.components.size() == 1);
  CHECK(c1.components[0].weight == 1.0);

  CHECK_THROWS_AS(condition_on_class(gm, 9), ValidationError);
  CHECK_THROWS_AS(condition_on_class(two_comp(), 0), ValidationError);
}

TEST_CASE("weaken modes") {
  const GaussianMixture gm = labeled();

  SECTION("inflate_variance scales variances, keeps labels and weights") {
    const GaussianMixture w = weaken(gm, InflateVariance{2.0});
    REQUIRE(w.class_labels.has_value());
    for (std::size_t i = 0; i < gm.components.size(); ++i) {
      CHECK(w.components[i].variance ==
            Catch::Approx(2.0 * gm.components[i].variance).epsilon(1e-14));
      CHECK(w.components[i].weight == gm.components[i].weight);
      CHECK(w.components[i].mean[0] == gm.components[i].mean[0]);
    }
    CHECK_THROWS_AS(weaken(gm, InflateVariance{1.0}), ValidationError);
    CHECK_THROWS_AS(weaken(gm, InflateVariance{0.5}), ValidationError);
  }

  SECTION("merge_to_marginal strips labels and requires them") {
    const GaussianMixture w = weaken(gm, MergeToMarginal{});
    CHECK_FALSE(w.class_labels.has_value());
    for (std::size_t i = 0; i < gm.components.size(); ++i)
      CHECK(w.components[i].weight == gm.components[i].weight);
    CHECK_THROWS_AS(weaken(two_comp(), MergeToMarginal{}), ValidationError);
  }

  SECTION("drop_condition strips labels, tolerates their absence") {
    CHECK_FALSE(weaken(gm, DropCondition{}).class_labels.has_value());
    CHECK_FALSE(weaken(two_comp(), DropCondition{}).class_labels.has_value());
  }
}

TEST_CASE("guided terminal variance of a gaussian pair") {
  CHECK(guided_terminal_variance(1.0, 2.0, 1.0) == Catch::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(guided_terminal_variance(1.0, 2.0, 0.0) == 1.0);  // scale 0: main model
  // Sharpening is monotone in the scale until the precision flips sign.
  CHECK(guided_terminal_variance(1.0, 2.0, 2.0) == Catch::Approx(0.5).epsilon(1e-14));
  CHECK_THROWS_AS(guided_terminal_variance(1.0, 2.0, -3.0), ValidationError);
  CHECK_THROWS_AS(guided_terminal_variance(0.0, 2.0, 1.0), ValidationError);
  CHECK_THROWS_AS(guided_terminal_variance(1.0, -2.0, 1.0), ValidationError);
}

TEST_CASE("sample_mixture hits components at their weights") {
  const GaussianMixture gm = two_comp();
  RngStream rng = derive_stream(12, 3);
  const std::vector<Tensor> pts = sample_mixture(gm, 20000, rng);
  REQUIRE(pts.size() == 20000);
  std::size_t below = 0;
  for (const Tensor& p : pts)
    if (p[0] < 0.5) ++below;
  // Exact mass below the midpoint x=0.5, tails included:
  const auto cdf = [](double z) { return 0.5 * (1.0 + std::erf(z / std::sqrt(2.0))); };
  const double expect = 0.3 * cdf((0.5 + 1.0) / std::sqrt(0.5)) +
                        0.7 * cdf((0.5 - 2.0) / std::sqrt(1.5));
  CHECK(static_cast<double>(below) / 20000.0 == Catch::Approx(expect).margin(0.015));

  double mean = 0.0;
  for (const Tensor& p : pts) mean += p[0];
  mean /= 20000.0;
  CHECK(mean == Catch::Approx(0.3 * -1.0 + 0.7 * 2.0).margin(0.05));
}
