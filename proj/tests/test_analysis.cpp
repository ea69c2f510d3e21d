#include <doctest.h>

#include <cmath>

#include "afl/analysis.hpp"
#include "afl/errors.hpp"
#include "afl/rng.hpp"

using namespace afl;

namespace {

std::vector<Eigen::VectorXd> gaussian_sample(int m, int dim, Rng& rng,
                                             double shift = 0.0) {
  std::vector<Eigen::VectorXd> out;
  out.reserve(m);
  for (int i = 0; i < m; ++i) {
    Eigen::VectorXd v(dim);
    for (int j = 0; j < dim; ++j) v(j) = rng.normal() + shift;
    out.push_back(v);
  }
  return out;
}

}  // namespace

TEST_CASE("energy distance: identical lists give zero in the biased form") {
  Rng rng(61);
  const auto a = gaussian_sample(30, 4, rng);
  CHECK(energy_distance(a, a, /*unbiased=*/false) == doctest::Approx(0.0));
}

TEST_CASE("energy distance: point masses") {
  Eigen::VectorXd u(3), v(3);
  u << 1.0, 0.0, -1.0;
  v << 0.5, 2.0, 0.0;
  const std::vector<Eigen::VectorXd> a{u}, b{v};
  const double expected = std::sqrt(2.0 * (u - v).norm());
  CHECK(energy_distance(a, b, /*unbiased=*/false) ==
        doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("energy distance: same distribution is near zero") {
  Rng rng(62);
  const auto a = gaussian_sample(200, 3, rng);
  const auto b = gaussian_sample(200, 3, rng);
  const double d = energy_distance(a, b);
  // Bootstrap standard error by resampling both sides.
  Rng boot(63);
  std::vector<double> reps;
  for (int rep = 0; rep < 60; ++rep) {
    std::vector<Eigen::VectorXd> ra, rb;
    for (int i = 0; i < 200; ++i) {
      ra.push_back(a[boot.below(200)]);
      rb.push_back(b[boot.below(200)]);
    }
    reps.push_back(energy_distance(ra, rb, /*unbiased=*/false));
  }
  double mean = 0.0, var = 0.0;
  for (double r : reps) mean += r;
  mean /= reps.size();
  for (double r : reps) var += (r - mean) * (r - mean);
  var /= (reps.size() - 1);
  CHECK(d <= mean + 3.0 * std::sqrt(var));
}

TEST_CASE("energy distance: symmetric, nonnegative, separated samples") {
  Rng rng(64);
  const auto a = gaussian_sample(50, 5, rng);
  const auto b = gaussian_sample(50, 5, rng, 3.0);
  const double dab = energy_distance(a, b);
  const double dba = energy_distance(b, a);
  CHECK(dab == doctest::Approx(dba));
  CHECK(dab > 1.0);
  CHECK(energy_distance_to_zero(a) >= 0.0);
}

TEST_CASE("bootstrap_band") {
  {
    const std::vector<double> constant(25, 3.14);
    const auto [lo, hi] = bootstrap_band(constant, 200, 0.68, 1);
    CHECK(lo == doctest::Approx(3.14));
    CHECK(hi == doctest::Approx(3.14));
  }
  {
    Rng rng(65);
    std::vector<double> sample(200);
    for (double& v : sample) v = rng.normal();
    const auto [lo, hi] = bootstrap_band(sample, 500, 0.68, 2);
    const double width = hi - lo;
    const double target = 2.0 / std::sqrt(200.0);
    CHECK(width > 0.7 * target);
    CHECK(width < 1.3 * target);
    // Order invariance.
    std::vector<double> shuffled = sample;
    std::reverse(shuffled.begin(), shuffled.end());
    const auto [lo2, hi2] = bootstrap_band(shuffled, 500, 0.68, 2);
    CHECK(lo == doctest::Approx(lo2));
    CHECK(hi == doctest::Approx(hi2));
  }
  {
    const std::vector<double> tiny(5, 1.0);
    CHECK_THROWS_AS(bootstrap_band(tiny, 100, 0.68, 1), DomainError);
  }
}

TEST_CASE("rate_fit") {
  {
    std::vector<double> x{10, 100, 1000, 10000}, y;
    for (double v : x) y.push_back(std::pow(v, -0.5));
    const RateFit fit = rate_fit(x, y);
    CHECK(fit.slope == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(fit.r2 == doctest::Approx(1.0));
  }
  {
    Rng rng(66);
    std::vector<double> x, y;
    for (int k = 0; k < 12; ++k) {
      const double xv = std::pow(2.0, k + 3);
      x.push_back(xv);
      y.push_back(3.0 / xv * (1.0 + 0.01 * rng.normal()));
    }
    const RateFit fit = rate_fit(x, y);
    CHECK(std::abs(fit.slope + 1.0) < 0.05);
  }
  {
    const std::vector<double> x{1, 2, 4}, y{2.5, 2.5, 2.5};
    const RateFit fit = rate_fit(x, y);
    CHECK(std::abs(fit.slope) < 1e-12);
  }
  {
    const std::vector<double> x{1, 2}, y{1, 1};
    CHECK_THROWS_AS(rate_fit(x, y), DomainError);
  }
}
