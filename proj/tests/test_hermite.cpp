#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "afl/errors.hpp"
#include "afl/hermite.hpp"
#include "afl/index_flows.hpp"
#include "afl/quadrature.hpp"
#include "afl/rng.hpp"

using namespace afl;

namespace {

HermiteSeries random_series(int dim, int max_degree, Rng& rng) {
  HermiteSeries f;
  f.dim = dim;
  f.max_degree = max_degree;
  for (int deg = 0; deg <= max_degree; ++deg) {
    for_each_of_degree(dim, deg, [&](const MultiIndex& m) {
      f.add(m, rng.normal());
    });
  }
  return f;
}

}  // namespace

TEST_CASE("hermite_eval_1d closed forms") {
  CHECK(hermite_eval_1d(0, 3.7) == 1.0);
  // H2(x) = (x^2 - 1)/sqrt(2), one recurrence step from H0, H1.
  CHECK(hermite_eval_1d(2, 0.0) == doctest::Approx(-0.7071067811865476).epsilon(1e-14));
  // H3(x) = (x^3 - 3x)/sqrt(6).
  CHECK(hermite_eval_1d(3, 1.0) == doctest::Approx(-0.816496580927726).epsilon(1e-14));
  // Degree 4 closed form (x^4 - 6x^2 + 3)/sqrt(24) at a generic point.
  const double x = 1.37;
  const double h4 = (std::pow(x, 4) - 6 * x * x + 3) / std::sqrt(24.0);
  CHECK(hermite_eval_1d(4, x) == doctest::Approx(h4).epsilon(1e-13));
}

TEST_CASE("orthonormality under Gauss-Hermite quadrature") {
  const GaussHermiteRule rule = gauss_hermite(24);
  for (int m = 0; m <= 6; ++m) {
    for (int n = 0; n <= 6; ++n) {
      double acc = 0.0;
      for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
        acc += rule.weights[i] * hermite_eval_1d(m, rule.nodes[i]) *
               hermite_eval_1d(n, rule.nodes[i]);
      }
      CHECK(std::abs(acc - (m == n ? 1.0 : 0.0)) < 1e-8);
    }
  }
}

TEST_CASE("generating function partial sums") {
  for (double t : {0.3, 0.7}) {
    for (double x : {-2.0, -0.5, 0.0, 1.0, 2.0}) {
      double acc = 0.0;
      double tp = 1.0;
      for (int r = 0; r <= 20; ++r) {
        acc += hermite_eval_1d(r, x) * tp /
               std::exp(0.5 * log_factorial(r));
        tp *= t;
      }
      CHECK(std::abs(acc - std::exp(x * t - 0.5 * t * t)) < 1e-8);
    }
  }
}

TEST_CASE("series_eval basics") {
  HermiteSeries c;
  c.dim = 2;
  c.max_degree = 0;
  c.add({0, 0}, 2.5);
  const double x[2] = {1.3, -0.2};
  CHECK(series_eval(c, x) == doctest::Approx(2.5));

  HermiteSeries lin;
  lin.dim = 2;
  lin.max_degree = 1;
  lin.add({1, 0}, 1.0);
  lin.add({0, 1}, 1.0);
  const double y[2] = {0.5, -0.5};
  CHECK(series_eval(lin, y) == doctest::Approx(0.0).epsilon(1e-15));

  HermiteSeries sq;
  sq.dim = 2;
  sq.max_degree = 2;
  sq.add({2, 0}, 1.0);
  const double z[2] = {1.0, 1.0};
  CHECK(series_eval(sq, z) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("series_derivative exact rule and finite differences") {
  {
    HermiteSeries f;
    f.dim = 1;
    f.max_degree = 1;
    f.add({1}, 1.0);
    const HermiteSeries g = series_derivative(f, 0);
    CHECK(g.at({0}) == doctest::Approx(1.0));
    CHECK(g.coeffs.size() == 1);
  }
  {
    HermiteSeries f;
    f.dim = 2;
    f.max_degree = 2;
    f.add({2, 0}, 1.0);
    const HermiteSeries g = series_derivative(f, 0);
    CHECK(g.at({1, 0}) == doctest::Approx(std::sqrt(2.0)));
    CHECK(g.coeffs.size() == 1);
  }
  // Finite-difference oracle on a random degree-4 series.
  Rng rng(11);
  const HermiteSeries f = random_series(3, 4, rng);
  const HermiteSeries g = series_derivative(f, 0);
  const double h = 1e-5;
  for (int rep = 0; rep < 20; ++rep) {
    double x[3] = {rng.normal(), rng.normal(), rng.normal()};
    double xp[3] = {x[0] + h, x[1], x[2]};
    double xm[3] = {x[0] - h, x[1], x[2]};
    const double fd = (series_eval(f, xp) - series_eval(f, xm)) / (2 * h);
    CHECK(std::abs(fd - series_eval(g, x)) < 1e-6);
  }
}

TEST_CASE("series_mul_coordinate exact rule, oracle and overflow") {
  {
    HermiteSeries one;
    one.dim = 1;
    one.max_degree = 0;
    one.add({0}, 1.0);
    const HermiteSeries g = series_mul_coordinate(one, 0);
    CHECK(g.at({1}) == doctest::Approx(1.0));
    CHECK(g.coeffs.size() == 1);
  }
  {
    HermiteSeries f;
    f.dim = 1;
    f.max_degree = 1;
    f.add({1}, 1.0);
    const HermiteSeries g = series_mul_coordinate(f, 0);
    CHECK(g.at({2}) == doctest::Approx(std::sqrt(2.0)));
    CHECK(g.at({0}) == doctest::Approx(1.0));
  }
  Rng rng(12);
  const HermiteSeries f = random_series(2, 3, rng);
  const HermiteSeries g = series_mul_coordinate(f, 1);
  for (int rep = 0; rep < 20; ++rep) {
    double x[2] = {rng.normal(), rng.normal()};
    CHECK(std::abs(x[1] * series_eval(f, x) - series_eval(g, x)) < 1e-10);
  }
  CHECK_THROWS_AS(series_mul_coordinate(f, 0, 3), CapExceededError);
}

TEST_CASE("frame_change_coeff fixed cases") {
  {
    // m = (2) against n = (0,2) with R = u^T, u = e2 in R^2:
    // second identity of the inner-product corollary gives binom(2,n)^{1/2} u^n = 1.
    Eigen::MatrixXd R(1, 2);
    R << 0.0, 1.0;
    CHECK(frame_change_coeff({2}, {0, 2}, R) == doctest::Approx(1.0));
  }
  {
    Eigen::MatrixXd I2 = Eigen::MatrixXd::Identity(2, 2);
    CHECK(frame_change_coeff({1, 0}, {0, 1}, I2) == doctest::Approx(0.0));
  }
  {
    Eigen::MatrixXd rho(1, 1);
    rho << 0.62;
    CHECK(frame_change_coeff({3}, {3}, rho) ==
          doctest::Approx(std::pow(0.62, 3)).epsilon(1e-14));
    // Degree mismatch vanishes.
    CHECK(frame_change_coeff({3}, {2}, rho) == 0.0);
  }
  {
    // Table cap error.
    Eigen::MatrixXd R = Eigen::MatrixXd::Constant(3, 3, 0.3);
    CHECK_THROWS_AS(frame_change_coeff({4, 4, 4}, {4, 4, 4}, R, 10),
                    CapExceededError);
  }
}

TEST_CASE("frame change is an isometry for orthogonal frames") {
  // P_Q is isometric: the pushforward of H_m under an orthogonal Q must have
  // unit norm and orthogonal shells.
  Rng rng(13);
  Eigen::MatrixXd Q = random_stiefel(3, 3, rng);
  const MultiIndex ms[3] = {{2, 1, 0}, {1, 1, 1}, {0, 2, 1}};
  for (const auto& m : ms) {
    for (const auto& n : ms) {
      double acc = 0.0;
      for_each_of_degree(3, 3, [&](const MultiIndex& k) {
        acc += frame_change_coeff(m, k, Q.transpose()) *
               frame_change_coeff(n, k, Q.transpose());
      });
      CHECK(std::abs(acc - (m == n ? 1.0 : 0.0)) < 1e-12);
    }
  }
}

TEST_CASE("frame change matches Monte-Carlo one-dimensional projections") {
  Rng rng(14);
  Eigen::VectorXd u = random_unit_vector(4, rng);
  Eigen::VectorXd v = random_unit_vector(4, rng);
  const double dot = u.dot(v);
  Rng mc(15);
  for (int m = 1; m <= 3; ++m) {
    double acc = 0.0, acc2 = 0.0;
    const long N = 200000;
    for (long i = 0; i < N; ++i) {
      Eigen::VectorXd x(4);
      for (int j = 0; j < 4; ++j) x(j) = mc.normal();
      const double prod =
          hermite_eval_1d(m, u.dot(x)) * hermite_eval_1d(m, v.dot(x));
      acc += prod;
      acc2 += prod * prod;
    }
    const double mean = acc / N;
    const double se = std::sqrt((acc2 / N - mean * mean) / N);
    Eigen::MatrixXd R(1, 1);
    R << dot;
    const double exact = frame_change_coeff({m}, {m}, R);
    CHECK(std::abs(mean - exact) < 5.0 * se);
    CHECK(exact == doctest::Approx(std::pow(dot, m)).epsilon(1e-12));
  }
}

TEST_CASE("gauss_convolve identity, scaling, errors, Monte Carlo") {
  Rng rng(16);
  const HermiteSeries f = random_series(2, 3, rng);
  {
    const std::vector<double> ones{1.0, 1.0};
    const HermiteSeries g = gauss_convolve(f, ones);
    for (const auto& [m, c] : f.coeffs) CHECK(g.at(m) == doctest::Approx(c));
  }
  {
    HermiteSeries h;
    h.dim = 2;
    h.max_degree = 2;
    h.add({2, 0}, 1.0);
    h.add({0, 2}, 1.0);
    const std::vector<double> s{0.5, 0.0};
    const HermiteSeries g = gauss_convolve(h, s);
    CHECK(g.at({2, 0}) == doctest::Approx(0.25));
    CHECK(g.at({0, 2}) == doctest::Approx(0.0));
  }
  {
    const std::vector<double> bad{1.2, 0.3};
    CHECK_THROWS_AS(gauss_convolve(f, bad), DomainError);
  }
  {
    // Monte-Carlo oracle: E_xi f(sigma y + xi) with xi ~ N(0, 1 - sigma^2).
    HermiteSeries f1;
    f1.dim = 1;
    f1.max_degree = 3;
    f1.add({1}, 0.7);
    f1.add({2}, -0.4);
    f1.add({3}, 0.2);
    const double sigma = 0.7;
    const std::vector<double> sv{sigma};
    const HermiteSeries g = gauss_convolve(f1, sv);
    Rng mc(17);
    const double y = 0.83;
    double acc = 0.0, acc2 = 0.0;
    const long N = 1000000;
    for (long i = 0; i < N; ++i) {
      const double xi = std::sqrt(1.0 - sigma * sigma) * mc.normal();
      const double pt = sigma * y + xi;
      const double val = series_eval(f1, std::span<const double>(&pt, 1));
      acc += val;
      acc2 += val * val;
    }
    const double mean = acc / N;
    const double se = std::sqrt((acc2 / N - mean * mean) / N);
    const double exact = series_eval(g, std::span<const double>(&y, 1));
    CHECK(std::abs(mean - exact) < 3.0 * se);
  }
}

TEST_CASE("gauss_convolve composes multiplicatively") {
  Rng rng(18);
  const HermiteSeries f = random_series(3, 3, rng);
  const std::vector<double> s1{0.9, 0.4, 0.7}, s2{0.5, 0.8, 0.1};
  std::vector<double> s12(3);
  for (int i = 0; i < 3; ++i) s12[i] = s1[i] * s2[i];
  const HermiteSeries a = gauss_convolve(gauss_convolve(f, s1), s2);
  const HermiteSeries b = gauss_convolve(f, s12);
  for (const auto& [m, c] : b.coeffs) CHECK(a.at(m) == doctest::Approx(c));
}

TEST_CASE("rot_inv_coeffs fixed values and invariants") {
  {
    const RotInvCoeffs t = rot_inv_coeffs(2, 1);
    CHECK(t.C[1] == doctest::Approx(4.0));
    REQUIRE(t.nu[1].size() == 2);
    for (const auto& [rr, v] : t.nu[1]) {
      CHECK(v == doctest::Approx(1.0 / std::sqrt(2.0)));
    }
  }
  {
    const RotInvCoeffs t = rot_inv_coeffs(1, 4);
    for (int r = 0; r <= 4; ++r) {
      REQUIRE(t.nu[r].size() == 1);
      CHECK(t.nu[r][0].second == doctest::Approx(1.0));
      CHECK(t.C[r] == doctest::Approx(binom(2 * r, r)));
    }
  }
  {
    const RotInvCoeffs t = rot_inv_coeffs(3, 2);
    double sum = 0.0;
    std::vector<double> row(3, 0.0);
    for (const auto& [rr, v] : t.nu[2]) {
      sum += v * v;
      for (int k = 0; k < 3; ++k) row[k] += rr[k] * v * v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-10);
    for (int k = 0; k < 3; ++k) CHECK(std::abs(row[k] - 2.0 / 3.0) < 1e-10);
  }
}

TEST_CASE("phi_r values and dual path") {
  const RotInvCoeffs t = rot_inv_coeffs(3, 4);
  {
    const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(3, 3);
    for (int r = 0; r <= 4; ++r) CHECK(phi_r(I, t, r) == doctest::Approx(1.0));
  }
  {
    const double s = 0.73;
    const Eigen::MatrixXd S = s * Eigen::MatrixXd::Identity(3, 3);
    for (int r = 0; r <= 4; ++r) {
      CHECK(phi_r(S, t, r) == doctest::Approx(std::pow(s, 2 * r)).epsilon(1e-12));
    }
  }
  {
    Rng rng(19);
    for (int rep = 0; rep < 10; ++rep) {
      Eigen::MatrixXd Psi(3, 3);
      for (int i = 0; i < 9; ++i) Psi(i / 3, i % 3) = rng.normal();
      Psi *= 0.8 / Psi.operatorNorm();
      for (int r = 0; r <= 4; ++r) {
        CHECK(std::abs(phi_r(Psi, t, r) - phi_r_series(Psi, t, r)) < 1e-9);
      }
    }
  }
  {
    Eigen::MatrixXd big = 1.5 * Eigen::MatrixXd::Identity(3, 3);
    CHECK_THROWS_AS(phi_r(big, t, 1), DomainError);
  }
}

TEST_CASE("rotation-invariant basis gradient Gram identity") {
  for (int p : {2, 3}) {
    const RotInvCoeffs t = rot_inv_coeffs(p, 3);
    for (int r = 1; r <= 3; ++r) {
      const HermiteSeries hbar = rot_inv_basis_series(t, r);
      for (int i = 0; i < p; ++i) {
        const HermiteSeries di = series_derivative(hbar, i);
        for (int j = 0; j < p; ++j) {
          const HermiteSeries dj = series_derivative(hbar, j);
          double ip = 0.0;
          for (const auto& [m, c] : di.coeffs) ip += c * dj.at(m);
          const double target = i == j ? 2.0 * r / p : 0.0;
          CHECK(std::abs(ip - target) < 1e-9);
        }
      }
    }
  }
}

TEST_CASE("softmin_omega values and sandwich") {
  {
    const std::vector<double> x{0.3, 0.3};
    CHECK(softmin_omega(x, 10.0) ==
          doctest::Approx(0.3 - std::log(2.0) / 10.0).epsilon(1e-12));
  }
  {
    const std::vector<double> x{0.42};
    CHECK(softmin_omega(x, 3.0) == doctest::Approx(0.42).epsilon(1e-15));
  }
  {
    const std::vector<double> x{0.1, 0.9};
    CHECK(std::abs(softmin_omega(x, 1000.0) - 0.1) < 1e-6);
  }
  Rng rng(20);
  for (int rep = 0; rep < 100; ++rep) {
    const int p = 1 + int(rng.below(6));
    std::vector<double> x(p);
    for (double& v : x) v = rng.uniform();
    const double K = rng.uniform(0.5, 200.0);
    const double w = softmin_omega(x, K);
    const double mn = *std::min_element(x.begin(), x.end());
    CHECK(w <= mn + 1e-12);
    CHECK(w >= mn - std::log(double(p)) / K - 1e-12);
  }
}
