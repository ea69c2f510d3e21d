#include <doctest.h>

#include <cmath>

#include "afl/analysis.hpp"
#include "afl/errors.hpp"
#include "afl/fem.hpp"
#include "afl/rng.hpp"
#include "afl/seq_model.hpp"

using namespace afl;

namespace {

// Independent exhaustive minimizer used as the oracle for fem_optimal.
FemRecord brute_force(const DiagonalView& v, double eps2) {
  std::vector<double> levels = v.weights;
  levels.push_back(kDeltaInf);
  std::sort(levels.begin(), levels.end(), std::greater<double>());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  FemRecord best;
  best.e_star = 1e300;
  for (double lv : levels) {
    double ev = 0.0, eb = 0.0;
    for (std::size_t j = 0; j < v.weights.size(); ++j) {
      if (v.weights[j] >= lv) {
        ev += eps2;
      } else {
        eb += v.truth[j] * v.truth[j];
      }
    }
    if (ev + eb < best.e_star) {
      best.e_star = ev + eb;
      best.delta_star = lv;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("fem_at diagonal hand-enumerated fixture") {
  DiagonalView v{{0.9, 0.5, 0.1}, {1.0, 0.0, 0.2}};
  const FemRecord rec = fem_at(FeatureWeightView{v}, 0.7, 0.25);
  CHECK(rec.e_v == doctest::Approx(0.25));
  CHECK(rec.e_b == doctest::Approx(0.04));
  CHECK(rec.total == doctest::Approx(0.29));
  CHECK(rec.e_proj == 0.0);
}

TEST_CASE("flat initialization splits into d/n vs signal mass") {
  const int d = 50;
  const double n = 100.0;
  const double alpha2 = 0.01;
  DiagonalView v;
  v.weights.assign(d, alpha2);
  v.truth.assign(d, 0.0);
  v.truth[3] = 1.0;
  v.truth[11] = -1.0;
  v.truth[29] = 0.5;
  const double norm2 = 1.0 + 1.0 + 0.25;
  const FemRecord low = fem_at(FeatureWeightView{v}, alpha2, 1.0 / n);
  CHECK(low.e_v == doctest::Approx(d / n));
  CHECK(low.e_b == doctest::Approx(0.0));
  const FemRecord high = fem_at(FeatureWeightView{v}, 2 * alpha2, 1.0 / n);
  CHECK(high.e_v == doctest::Approx(0.0));
  CHECK(high.e_b == doctest::Approx(norm2));
  const FemRecord opt = fem_optimal(FeatureWeightView{v}, 1.0 / n);
  CHECK(opt.e_star == doctest::Approx(std::min(d / n, norm2)));
}

TEST_CASE("single-index projection error vanishes at alignment") {
  SingleIndexView v{1.0, 0.5, 4, {0.1, 1.0, 0.5, 0.2, 0.1}};
  CHECK(fem_at(FeatureWeightView{v}, 0.3, 0.01).e_proj == doctest::Approx(0.0));
  v.rho = -1.0;
  CHECK(fem_at(FeatureWeightView{v}, 0.3, 0.01).e_proj == doctest::Approx(0.0));
  v.rho = 0.5;
  const FemRecord rec = fem_at(FeatureWeightView{v}, 0.3, 0.01);
  double expected = 0.0;
  for (int r = 0; r <= 4; ++r) {
    expected += (1.0 - std::pow(0.25, r)) * v.gstar[r] * v.gstar[r];
  }
  CHECK(rec.e_proj == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("fem_optimal fixture, trivial truth, oracle equivalence") {
  {
    DiagonalView v{{0.9, 0.5, 0.1}, {1.0, 0.0, 0.2}};
    const FemRecord opt = fem_optimal(FeatureWeightView{v}, 0.25);
    CHECK(opt.delta_star == doctest::Approx(0.9));
    CHECK(opt.e_star == doctest::Approx(0.29));
  }
  {
    DiagonalView v{{0.9, 0.5, 0.1}, {0.0, 0.0, 0.0}};
    const FemRecord opt = fem_optimal(FeatureWeightView{v}, 0.25);
    CHECK(std::isinf(opt.delta_star));
    CHECK(opt.e_star == doctest::Approx(0.0));
  }
  Rng rng(31);
  for (int rep = 0; rep < 300; ++rep) {
    DiagonalView v;
    const int m = 1 + int(rng.below(50));
    for (int j = 0; j < m; ++j) {
      v.weights.push_back(rng.uniform());
      v.truth.push_back(0.3 * rng.normal());
    }
    const double eps2 = rng.uniform(1e-4, 0.2);
    const FemRecord a = fem_optimal(FeatureWeightView{v}, eps2);
    const FemRecord b = brute_force(v, eps2);
    CHECK(a.e_star == doctest::Approx(b.e_star).epsilon(1e-13));
    CHECK(a.delta_star == b.delta_star);
  }
}

TEST_CASE("fem_optimal breaks ties toward larger delta") {
  // Exact binary tie between delta = 1.0 and delta = 0.5 at 0.03125; the
  // scan must keep the larger level.
  DiagonalView v{{1.0, 0.5}, {0.5, 0.125}};
  const double eps2 = 0.015625;
  const FemRecord opt = fem_optimal(FeatureWeightView{v}, eps2);
  CHECK(opt.e_star == doctest::Approx(0.03125));
  CHECK(opt.delta_star == doctest::Approx(1.0));
}

TEST_CASE("E star depends only on the weight-induced order") {
  Rng rng(32);
  for (int rep = 0; rep < 50; ++rep) {
    DiagonalView v;
    const int m = 2 + int(rng.below(40));
    for (int j = 0; j < m; ++j) {
      v.weights.push_back(rng.uniform(0.01, 3.0));
      v.truth.push_back(rng.normal());
    }
    const double eps2 = rng.uniform(0.001, 0.5);
    const FemRecord a = fem_optimal(FeatureWeightView{v}, eps2);
    DiagonalView w = v;
    for (double& lv : w.weights) lv = std::atan(lv) + std::sqrt(lv);
    const FemRecord b = fem_optimal(FeatureWeightView{w}, eps2);
    CHECK(a.e_star == doctest::Approx(b.e_star).epsilon(1e-13));
  }
}

TEST_CASE("E(delta) is piecewise constant with breakpoints at weights") {
  DiagonalView v{{0.8, 0.4, 0.2}, {0.5, 0.3, 0.1}};
  const double eps2 = 0.05;
  // Between consecutive weight values the record must not change.
  for (auto [lo, hi] : {std::pair{0.2, 0.4}, std::pair{0.4, 0.8}}) {
    const FemRecord a = fem_at(FeatureWeightView{v}, lo + 0.35 * (hi - lo), eps2);
    const FemRecord b = fem_at(FeatureWeightView{v}, lo + 0.85 * (hi - lo), eps2);
    CHECK(a.total == doctest::Approx(b.total));
  }
  // Crossing a weight value changes the split.
  const FemRecord below = fem_at(FeatureWeightView{v}, 0.39, eps2);
  const FemRecord above = fem_at(FeatureWeightView{v}, 0.41, eps2);
  CHECK(below.total != above.total);
}

TEST_CASE("up_crossing_detect") {
  const double eps2 = 0.04;  // between 0.1^2 and 1.0^2
  // delta* = 0.9 here: j = 0 is an active signal, k = 1 inactive noise.
  DiagonalView before{{0.9, 0.3}, {1.0, 0.1}};
  SUBCASE("identical views have no crossing") {
    CHECK(up_crossing_detect(before, before, eps2).empty());
  }
  SUBCASE("signal dropping below a rising noise index is flagged") {
    DiagonalView after = before;
    after.weights[0] = 0.1;
    after.weights[1] = 0.7;
    const auto crossings = up_crossing_detect(before, after, eps2);
    REQUIRE(crossings.size() == 1);
    CHECK(crossings[0].first == 0);
    CHECK(crossings[0].second == 1);
  }
  SUBCASE("signals rising and noise falling can never cross") {
    Rng rng(33);
    for (int rep = 0; rep < 50; ++rep) {
      DiagonalView b2;
      const int m = 3 + int(rng.below(20));
      for (int j = 0; j < m; ++j) {
        b2.weights.push_back(rng.uniform(0.01, 1.0));
        b2.truth.push_back(rng.below(2) == 0 ? rng.uniform(0.5, 1.0) : 0.0);
      }
      DiagonalView a2 = b2;
      for (std::size_t j = 0; j < a2.weights.size(); ++j) {
        if (b2.truth[j] * b2.truth[j] >= eps2) {
          a2.weights[j] *= rng.uniform(1.0, 2.0);
        } else {
          a2.weights[j] *= rng.uniform(0.3, 1.0);
        }
      }
      CHECK(up_crossing_detect(b2, a2, eps2).empty());
    }
  }
}

TEST_CASE("sim_proj_bound_check cases") {
  std::vector<double> gstar(7, 0.0);
  for (int r = 1; r <= 6; ++r) gstar[r] = std::pow(double(r), -1.5);
  {
    const auto [lhs, rhs] = sim_proj_bound_check(0.0, 2.0, gstar);
    double sum = 0.0;
    for (int r = 1; r <= 6; ++r) sum += gstar[r] * gstar[r];
    CHECK(lhs == doctest::Approx(sum));
    CHECK(rhs == doctest::Approx(1.0));
  }
  {
    const auto [lhs, rhs] = sim_proj_bound_check(1.0 - 1e-6, 2.0, gstar);
    CHECK(rhs == doctest::Approx(1e-6));
    CHECK(lhs <= 10.0 * rhs);  // calibrated constant for this decay
    CHECK(lhs > 0.0);
  }
  {
    // alpha = 0.5 decay: the log-log slope of lhs vs (1 - rho) approaches 0.5.
    std::vector<double> g(4001, 0.0);
    for (int r = 1; r <= 4000; ++r) g[r] = std::pow(double(r), -0.75);
    std::vector<double> gaps{0.001, 0.01, 0.1}, lhss;
    for (double gap : gaps) {
      lhss.push_back(sim_proj_bound_check(1.0 - gap, 0.5, g).first);
    }
    const RateFit fit = rate_fit(gaps, lhss);
    CHECK(std::abs(fit.slope - 0.5) < 0.1);
  }
}

TEST_CASE("gd filter comparison stays within factor 4 away from the knee") {
  Rng rng(34);
  const double t = 7.0;
  DiagonalView v;
  for (int j = 0; j < 60; ++j) {
    const bool high = rng.below(2) == 0;
    v.weights.push_back(high ? rng.uniform(2.0 / t, 40.0 / t)
                             : rng.uniform(1e-4 / t, 0.5 / t));
    v.truth.push_back(rng.normal());
  }
  const GdFilterReport rep = gd_filter_report(v, t, 0.02);
  CHECK(rep.ratio_v <= 4.0);
  CHECK(rep.ratio_b <= 4.0);
}

TEST_CASE("multi-index FEM: nu path equals ambient path and simplex counts") {
  const int p = 2, r_max = 3;
  const RotInvCoeffs table = rot_inv_coeffs(p, r_max);
  MultiIndexView v;
  v.sigma = {0.8, 0.45};
  v.gamma = 0.5;
  v.r_max = r_max;
  v.hstar = {0.0, 1.0, 0.4, 0.15};
  v.nu = &table;

  MultiIndexView w;  // same truth through ambient coefficients
  w.sigma = v.sigma;
  w.gamma = v.gamma;
  w.r_max = r_max;
  for (int r = 0; r <= r_max; ++r) {
    for (const auto& [rr, nu] : table.nu[r]) {
      MultiIndex m(rr);
      for (int& e : m) e *= 2;
      w.ambient.emplace_back(m, nu * v.hstar[r]);
    }
  }
  for (double delta : {0.01, 0.1, 0.3, 0.7, 1.0}) {
    const FemRecord a = fem_at(FeatureWeightView{v}, delta, 0.003);
    const FemRecord b = fem_at(FeatureWeightView{w}, delta, 0.003);
    CHECK(a.e_proj == doctest::Approx(b.e_proj).epsilon(1e-12));
    CHECK(a.e_v == doctest::Approx(b.e_v).epsilon(1e-12));
    CHECK(a.e_b == doctest::Approx(b.e_b).epsilon(1e-12));
  }
  // E_V counts the full simplex of degrees below the cut.
  const double eps2 = 0.003;
  const FemRecord all_active =
      fem_at(FeatureWeightView{v}, std::exp(-v.gamma * 2 * r_max), eps2);
  double count = 0.0;
  for (int deg = 0; deg <= 2 * r_max; ++deg) count += binom(p + deg - 1, deg);
  CHECK(all_active.e_v == doctest::Approx(eps2 * count));
  // At full alignment the optimal error retains only the variance cost.
  MultiIndexView aligned = v;
  aligned.sigma = {1.0, 1.0};
  const FemRecord opt = fem_optimal(FeatureWeightView{aligned}, eps2);
  CHECK(opt.e_proj == doctest::Approx(0.0));
}
