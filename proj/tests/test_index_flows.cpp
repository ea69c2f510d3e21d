#include <doctest.h>

#include <cmath>

#include "afl/errors.hpp"
#include "afl/index_flows.hpp"
#include "afl/rng.hpp"

using namespace afl;

TEST_CASE("noise field: determinism, variance scale, guard") {
  const NoiseField a = NoiseField::make(4, 3, 100, 5);
  const NoiseField b = NoiseField::make(4, 3, 100, 5);
  CHECK(a.shells == b.shells);
  MultiIndex m{1, 0, 2, 0};
  CHECK(a.at(m) == b.at(m));
  CHECK_THROWS_AS(NoiseField::make(40, 12, 100, 1), MemoryGuardError);
  const NoiseField z = NoiseField::zeros(4, 3);
  CHECK(z.at(m) == 0.0);
}

TEST_CASE("sim noise terms: zero noise and axis-aligned direction") {
  const int d = 5, r_max = 3;
  Eigen::VectorXd w = Eigen::VectorXd::Unit(d, 0);
  Eigen::VectorXd wstar = Eigen::VectorXd::Unit(d, 1);
  std::vector<double> g{0.0, 0.5, 0.2, 0.1};
  {
    const NoiseField zero = NoiseField::zeros(d, r_max);
    const SimNoise nz = sim_noise_terms(w, wstar, g, zero);
    for (double e : nz.e) CHECK(e == 0.0);
    CHECK(nz.tau == 0.0);
  }
  {
    const NoiseField noise = NoiseField::make(d, r_max, 50, 17);
    const SimNoise nz = sim_noise_terms(w, wstar, g, noise);
    for (int r = 0; r <= r_max; ++r) {
      MultiIndex pure(d, 0);
      pure[0] = r;
      CHECK(nz.e[r] == doctest::Approx(noise.at(pure)).epsilon(1e-12));
    }
  }
}

TEST_CASE("sim noise covariance matches <u,v>^r / n") {
  const int d = 6, r_max = 3;
  const long n = 50;
  Rng rng(71);
  const Eigen::VectorXd u = random_unit_vector(d, rng);
  const Eigen::VectorXd v = random_unit_vector(d, rng);
  const std::vector<double> g(r_max + 1, 0.0);
  const int draws = 2000;
  for (int r = 1; r <= 3; ++r) {
    double acc = 0.0, acc2 = 0.0;
    for (int k = 0; k < draws; ++k) {
      const NoiseField noise = NoiseField::make(d, r_max, n, 9000 + k);
      const double eu = sim_noise_terms(u, v, g, noise).e[r];
      const double ev = sim_noise_terms(v, u, g, noise).e[r];
      acc += eu * ev;
      acc2 += eu * ev * eu * ev;
    }
    const double mean = acc / draws;
    const double se = std::sqrt((acc2 / draws - mean * mean) / draws);
    const double target = std::pow(u.dot(v), r) / double(n);
    CHECK(std::abs(mean - target) <= 5.0 * se);
  }
}

TEST_CASE("sim population: stationary point and monotone alignment") {
  const int d = 8;
  SimTruth truth;
  truth.gstar = {0.0, 1.0, 0.5, 0.2};
  truth.wstar = Eigen::VectorXd::Unit(d, 0);
  SimFlowParams params;
  params.eps2 = 1e-3;

  SUBCASE("aligned state with matched link is stationary") {
    SimState s;
    s.t = 0.0;
    s.w = truth.wstar;
    s.g = truth.gstar;  // rho = 1: g_r = rho^r g*_r = g*_r
    const SimState next = sim_population_step(s, truth, params, 0.05);
    CHECK((next.w - s.w).norm() <= 1e-12);
    for (std::size_t r = 0; r < s.g.size(); ++r) {
      CHECK(std::abs(next.g[r] - s.g[r]) <= 1e-12);
    }
  }

  SUBCASE("alignment and signed coefficients are monotone") {
    params.t_end = 40.0;
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
      const SimRunResult run = sim_population_run(truth, params, seed);
      double prev = 0.0;
      for (const auto& snap : run.snaps) {
        CHECK(std::abs(snap.rho) >= prev - 1e-10);
        prev = std::abs(snap.rho);
        for (std::size_t r = 0; r < snap.g.size(); ++r) {
          CHECK(truth.gstar[r] * snap.g[r] >= -1e-12);
        }
      }
      CHECK(std::abs(run.snaps.back().rho) > 0.99);
    }
  }

  SUBCASE("FEM is nonincreasing along the population flow") {
    params.t_end = 40.0;
    const SimRunResult run = sim_population_run(truth, params, 12);
    for (std::size_t k = 1; k < run.snaps.size(); ++k) {
      CHECK(run.snaps[k].fem.e_star <= run.snaps[k - 1].fem.e_star + 1e-10);
    }
  }
}

TEST_CASE("sim sequence: zero-noise reduction and divergence guard") {
  const int d = 6;
  SimTruth truth;
  truth.gstar = {0.0, 1.0, 0.4};
  truth.wstar = Eigen::VectorXd::Unit(d, 0);
  SimFlowParams params;
  params.t_end = 15.0;
  params.eps2 = 1e-3;
  const NoiseField zero = NoiseField::zeros(d, 2);
  const SimRunResult noisy = sim_sequence_run(truth, zero, params, 4);
  const SimRunResult pop = sim_population_run(truth, params, 4);
  REQUIRE(noisy.snaps.size() == pop.snaps.size());
  for (std::size_t k = 0; k < noisy.snaps.size(); ++k) {
    CHECK(std::abs(noisy.snaps[k].rho - pop.snaps[k].rho) <= 1e-8);
    for (std::size_t r = 0; r < truth.gstar.size(); ++r) {
      CHECK(std::abs(noisy.snaps[k].g[r] - pop.snaps[k].g[r]) <= 1e-8);
    }
  }
}

TEST_CASE("sim initialization statistics") {
  const int d = 64;
  const int seeds = 500;
  Eigen::VectorXd wstar = Eigen::VectorXd::Unit(d, 0);
  int below_half = 0, tiny = 0;
  const double t = 0.25;
  for (int s = 0; s < seeds; ++s) {
    Rng rng = Rng::stream(200 + s, 5);
    const Eigen::VectorXd w = random_unit_vector(d, rng);
    const double rho = std::abs(w.dot(wstar));
    if (rho <= 0.5) ++below_half;
    if (rho < t / std::sqrt(double(d))) ++tiny;
  }
  CHECK(below_half >= 495);                   // |rho(0)| <= 1/2 in >= 99%
  CHECK(double(tiny) / seeds <= 1.0 * t);     // P(|rho| < t/sqrt(d)) <~ c t
}

TEST_CASE("stiefel projection") {
  Rng rng(72);
  const Eigen::MatrixXd W = random_stiefel(7, 3, rng);
  {
    Eigen::MatrixXd S(3, 3);
    S << 1.0, 0.2, -0.3, 0.2, 0.5, 0.1, -0.3, 0.1, 2.0;
    CHECK(stiefel_project(W, W * S).norm() <= 1e-12);
  }
  {
    Eigen::MatrixXd A(3, 3);
    A << 0.0, 0.4, -0.2, -0.4, 0.0, 0.7, 0.2, -0.7, 0.0;
    const Eigen::MatrixXd Z = W * A;
    CHECK((stiefel_project(W, Z) - Z).norm() <= 1e-12);
  }
  {
    Eigen::MatrixXd Z(7, 3);
    for (int i = 0; i < 21; ++i) Z(i / 3, i % 3) = rng.normal();
    const Eigen::MatrixXd T = stiefel_project(W, Z);
    CHECK((W.transpose() * T + T.transpose() * W).norm() <= 1e-10);
  }
}

TEST_CASE("random stiefel initialization scales like 1/sqrt(d)") {
  const int d = 100, p = 2;
  double smin = 1e300, smax = 0.0;
  for (int s = 0; s < 500; ++s) {
    Rng rng = Rng::stream(300 + s, 6);
    const Eigen::MatrixXd W = random_stiefel(d, p, rng);
    CHECK((W.transpose() * W - Eigen::MatrixXd::Identity(p, p)).norm() <= 1e-10);
    Eigen::MatrixXd Wstar = Eigen::MatrixXd::Identity(d, p);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(W.transpose() * Wstar);
    smin = std::min(smin, svd.singularValues().minCoeff() * std::sqrt(double(d)));
    smax = std::max(smax, svd.singularValues().maxCoeff() * std::sqrt(double(d)));
  }
  MESSAGE("empirical c1 = ", smin, ", c2 = ", smax);
  CHECK(smin > 1e-4);
  CHECK(smax < 40.0);
}

TEST_CASE("mim population: stationarity, monotonicity, p=1 reduction") {
  SUBCASE("aligned stationary point") {
    const RotInvCoeffs table = rot_inv_coeffs(2, 2);
    MimTruth truth;
    truth.hstar = {0.0, 1.0, 0.3};
    truth.Wstar = Eigen::MatrixXd::Identity(8, 2);
    MimFlowParams params;
    MimReducedState s;
    s.h = truth.hstar;
    s.s = {1.0, 1.0};
    const MimReducedState next =
        mim_population_step(s, truth, params, table, 0.05);
    for (int i = 0; i < 2; ++i) CHECK(std::abs(next.s[i] - 1.0) <= 1e-12);
    for (std::size_t r = 0; r < s.h.size(); ++r) {
      CHECK(std::abs(next.h[r] - s.h[r]) <= 1e-12);
    }
  }

  SUBCASE("phi_1 and omega nondecreasing") {
    const RotInvCoeffs table = rot_inv_coeffs(2, 2);
    MimTruth truth;
    truth.hstar = {0.0, 1.0, 0.25};
    truth.Wstar = Eigen::MatrixXd::Identity(16, 2);
    MimFlowParams params;
    params.t_end = 40.0;
    params.eps2 = 1e-3;
    for (std::uint64_t seed : {11ull, 12ull, 13ull}) {
      const MimRunResult run = mim_population_run(truth, params, table, seed);
      double prev_phi = -1.0, prev_omega = -1e9;
      for (const auto& snap : run.snaps) {
        CHECK(snap.phi[1] >= prev_phi - 1e-10);
        CHECK(snap.omega >= prev_omega - 1e-10);
        prev_phi = snap.phi[1];
        prev_omega = snap.omega;
        const double min_s2 = std::min(snap.sigma[0] * snap.sigma[0],
                                       snap.sigma[1] * snap.sigma[1]);
        CHECK(snap.omega <= min_s2 + 1e-10);
      }
      CHECK(run.snaps.back().phi[1] > 0.99);
    }
  }

  SUBCASE("p=1 collapses to the even single-index dynamics") {
    const int d = 12;
    const RotInvCoeffs table = rot_inv_coeffs(1, 2);
    MimTruth truth;
    truth.hstar = {0.0, 1.0, 0.3};
    truth.Wstar = Eigen::MatrixXd::Identity(d, 1);
    MimFlowParams mparams;
    mparams.dt = 0.005;
    mparams.t_end = 12.0;
    mparams.eps2 = 1e-3;
    const MimRunResult mim = mim_population_run(truth, mparams, table, 21);

    // Matched SIM instance: even link g*_{2r} = h*_r, weights mu_{2r}.
    SimTruth sim;
    sim.gstar = {0.0, 0.0, 1.0, 0.0, 0.3};
    sim.wstar = Eigen::VectorXd::Unit(d, 0);
    SimFlowParams sparams;
    sparams.gamma = mparams.gamma;
    sparams.dt = mparams.dt;
    sparams.t_end = mparams.t_end;
    sparams.eps2 = 1e-3;
    sparams.record_every = mparams.record_every;
    // Same seed stream so w(0) has rho(0)^2 = sigma(0)^2.
    Rng rng_m = Rng::stream(21, 6);
    const Eigen::MatrixXd W0 = random_stiefel(d, 1, rng_m);
    SimState s;
    s.t = 0.0;
    s.w = W0.col(0);
    if (s.w.dot(sim.wstar) < 0) s.w = -s.w;  // sigma is sign-free
    s.g.assign(5, 0.0);
    const long steps = std::lround(mparams.t_end / mparams.dt);
    std::vector<double> rho_path;
    rho_path.push_back(std::abs(s.w.dot(sim.wstar)));
    for (long k = 0; k < steps; ++k) {
      s = sim_population_step(s, sim, sparams, sparams.dt);
      if ((k + 1) % sparams.record_every == 0 || k + 1 == steps) {
        rho_path.push_back(std::abs(s.w.dot(sim.wstar)));
      }
    }
    REQUIRE(rho_path.size() == mim.snaps.size());
    for (std::size_t k = 0; k < mim.snaps.size(); ++k) {
      CHECK(std::abs(mim.snaps[k].sigma[0] - rho_path[k]) <= 1e-8);
    }
  }
}

TEST_CASE("mim noise terms: zero noise, axis frame, variance oracle") {
  const int d = 6, p = 2, r_max = 2;
  const RotInvCoeffs table = rot_inv_coeffs(p, r_max);
  Eigen::MatrixXd W = Eigen::MatrixXd::Identity(d, p);
  Eigen::MatrixXd Wstar = Eigen::MatrixXd::Zero(d, p);
  Wstar.col(0) = Eigen::VectorXd::Unit(d, 2);
  Wstar.col(1) = Eigen::VectorXd::Unit(d, 3);
  std::vector<double> h{0.0, 0.4, 0.1};
  {
    const NoiseField zero = NoiseField::zeros(d, 2 * r_max);
    const MimNoise nz = mim_noise_terms(W, h, Wstar, zero, 5.0, table);
    for (double e : nz.e) CHECK(e == 0.0);
    CHECK(nz.xi == 0.0);
    CHECK(nz.zeta == 0.0);
  }
  {
    // Axis-aligned W: e_1 = sum over |r'|=1 of nu_{r'} eps_{2r' embedded}.
    const NoiseField noise = NoiseField::make(d, 2 * r_max, 40, 23);
    const MimNoise nz = mim_noise_terms(W, h, Wstar, noise, 5.0, table);
    double expected = 0.0;
    for (const auto& [rr, nu] : table.nu[1]) {
      MultiIndex m(d, 0);
      for (int j = 0; j < p; ++j) m[j] = 2 * rr[j];
      expected += nu * noise.at(m);
    }
    CHECK(nz.e[1] == doctest::Approx(expected).epsilon(1e-10));
  }
  {
    // Var(e_r(W)) = (1/n) sum nu^2 = 1/n at any Stiefel point.
    const long n = 40;
    Rng rng(73);
    const Eigen::MatrixXd Wr = random_stiefel(d, p, rng);
    const std::vector<HermiteSeries> push = pushforward_rotinv_basis(Wr, table);
    const int draws = 2000;
    for (int r = 1; r <= r_max; ++r) {
      double acc = 0.0, acc2 = 0.0;
      for (int k = 0; k < draws; ++k) {
        const NoiseField noise = NoiseField::make(d, 2 * r_max, n, 5000 + k);
        const double e = noise_dot(push[r], noise);
        acc += e * e;
        acc2 += e * e * e * e;
      }
      const double mean = acc / draws;
      const double se = std::sqrt((acc2 / draws - mean * mean) / draws);
      CHECK(std::abs(mean - 1.0 / n) <= 5.0 * se);
    }
  }
}

TEST_CASE("mim xi noise drift has the singular-value variance") {
  // For g = Hbar_r the phi_1 noise drift satisfies
  // Var(xi) = (2r/p) Tr M (I - M) / n with M = Psi^T Psi.
  const int d = 6, p = 2, r_max = 2;
  const RotInvCoeffs table = rot_inv_coeffs(p, r_max);
  Rng rng(76);
  const Eigen::MatrixXd W = random_stiefel(d, p, rng);
  const Eigen::MatrixXd Wstar = random_stiefel(d, p, rng);
  const Eigen::MatrixXd M =
      (W.transpose() * Wstar).transpose() * (W.transpose() * Wstar);
  const long n = 40;
  const int r = 1;
  std::vector<double> h(r_max + 1, 0.0);
  h[r] = 1.0;
  const int draws = 600;
  double acc = 0.0, acc2 = 0.0;
  for (int k = 0; k < draws; ++k) {
    const NoiseField noise = NoiseField::make(d, 2 * r_max, n, 6000 + k);
    const MimNoise nz = mim_noise_terms(W, h, Wstar, noise, 8.0, table);
    acc += nz.xi * nz.xi;
    acc2 += std::pow(nz.xi, 4);
  }
  const double mean = acc / draws;
  const double se = std::sqrt((acc2 / draws - mean * mean) / draws);
  const double target =
      (2.0 * r / p) *
      (M * (Eigen::MatrixXd::Identity(p, p) - M)).trace() / double(n);
  CHECK(std::abs(mean - target) <= 5.0 * se);
}

TEST_CASE("mim full-W integration matches the reduced system without noise") {
  const int d = 8, p = 2, r_max = 2;
  const RotInvCoeffs table = rot_inv_coeffs(p, r_max);
  MimTruth truth;
  truth.hstar = {0.0, 1.0, 0.25};
  Rng rng(74);
  truth.Wstar = random_stiefel(d, p, rng);
  MimFlowParams params;
  params.dt = 0.01;
  params.t_end = 10.0;
  params.eps2 = 1e-3;
  const MimRunResult reduced = mim_population_run(truth, params, table, 31);
  const NoiseField zero = NoiseField::zeros(d, 2 * r_max);
  const MimRunResult full = mim_sequence_run(truth, zero, params, table, 31);
  REQUIRE(reduced.snaps.size() == full.snaps.size());
  for (std::size_t k = 0; k < reduced.snaps.size(); ++k) {
    for (int i = 0; i < p; ++i) {
      CHECK(std::abs(reduced.snaps[k].sigma[i] - full.snaps[k].sigma[i]) <=
            1e-6);
    }
    for (int r = 0; r <= r_max; ++r) {
      CHECK(std::abs(reduced.snaps[k].h[r] - full.snaps[k].h[r]) <= 1e-6);
    }
  }
  // Stiefel feasibility at the end of the full path.
  CHECK((full.final_W.transpose() * full.final_W -
         Eigen::MatrixXd::Identity(p, p))
            .norm() <= 1e-8);
}

TEST_CASE("svd_rate_check") {
  SUBCASE("diagonal path is exact") {
    auto path = [](double t) {
      Eigen::MatrixXd X = Eigen::MatrixXd::Zero(2, 2);
      X(0, 0) = 2.0 + std::sin(t);
      X(1, 1) = 1.0 + 0.3 * std::cos(t);
      return X;
    };
    const SvdRateReport rep = svd_rate_check(path, 0.1, 1.0, 7, 1e-5);
    CHECK_FALSE(rep.degenerate_warning);
    CHECK(rep.max_deviation <= 1e-6);
  }
  SUBCASE("random smooth path agrees at 1e-5") {
    Rng rng(75);
    Eigen::MatrixXd A(4, 3), B(4, 3), C(4, 3);
    for (int i = 0; i < 12; ++i) {
      A(i / 3, i % 3) = rng.normal();
      B(i / 3, i % 3) = 0.3 * rng.normal();
      C(i / 3, i % 3) = 0.2 * rng.normal();
    }
    auto path = [&](double t) -> Eigen::MatrixXd {
      return A + std::sin(t) * B + std::cos(2 * t) * C;
    };
    const SvdRateReport rep = svd_rate_check(path, 0.0, 1.5, 9, 1e-4);
    CHECK(rep.checked > 0);
    CHECK(rep.max_deviation <= 1e-5);
  }
  SUBCASE("crossing emits a warning and is skipped") {
    auto path = [](double t) {
      Eigen::MatrixXd X = Eigen::MatrixXd::Zero(2, 2);
      X(0, 0) = 1.0 + t;   // crosses X(1,1) at t = 0.5
      X(1, 1) = 2.0 - t;
      return X;
    };
    const SvdRateReport rep = svd_rate_check(path, 0.5, 0.5 + 1e-9, 2, 1e-6);
    CHECK(rep.degenerate_warning);
  }
}

TEST_CASE("memory guards for exact path noise") {
  SimTruth truth;
  truth.gstar = {0.0, 1.0};
  truth.wstar = Eigen::VectorXd::Unit(20, 0);
  SimFlowParams params;
  params.t_end = 1.0;
  const NoiseField noise = NoiseField::make(20, 1, 100, 1);
  CHECK_THROWS_AS(sim_sequence_run(truth, noise, params, 1), MemoryGuardError);
}
