#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "afl/fem.hpp"
#include "afl/hermite.hpp"
#include "afl/rng.hpp"
#include "afl/seq_model.hpp"

namespace afl {

// ---- Sequence-model noise --------------------------------------------------

// One N(0, 1/n) draw per multi-index of degree <= degree_cap, stored shell by
// shell in lexicographic order (shell_rank addresses an entry).
struct NoiseField {
  int dim = 0;
  int degree_cap = 0;
  long n = 0;
  std::uint64_t seed = 0;
  bool zero = false;
  std::vector<std::vector<double>> shells;

  static NoiseField make(int dim, int degree_cap, long n, std::uint64_t seed);
  static NoiseField zeros(int dim, int degree_cap);

  double at(const MultiIndex& m) const {
    if (zero) return 0.0;
    const int r = degree(m);
    if (r > degree_cap) return 0.0;
    return shells[r][shell_rank(m)];
  }
};

// eps-contraction of a sparse ambient series: sum_n c_n eps_n.
double noise_dot(const HermiteSeries& f, const NoiseField& noise);

// ---- Shared reporting ------------------------------------------------------

struct PhaseReport {
  double T0 = 0.0;
  double T1 = -1.0;  // first crossing of the alignment above 1/2
  double T2 = -1.0;  // first time the excess falls below 2x its plateau
  double plateau = 0.0;
  double final_excess = 0.0;
};

// ---- Single-index flows ----------------------------------------------------

struct SimTruth {
  std::vector<double> gstar;  // gstar[r], r = 0..r_max
  Eigen::VectorXd wstar;
};

struct SimFlowParams {
  double gamma = 0.5;   // lambda_r = exp(-gamma r)
  double dt = 0.02;
  double t_end = 50.0;
  int record_every = 10;
  double eps2 = 1e-4;   // effective noise level for the FEM curve
  double T0 = 1.0;
  double divergence_factor = 10.0;
};

struct SimState {
  double t = 0.0;
  Eigen::VectorXd w;
  std::vector<double> g;  // g[r], r = 0..r_max
};

struct SimSnapshot {
  double t = 0.0;
  double rho = 0.0;
  std::vector<double> g;
  FemRecord fem;
  double excess = 0.0;  // E*(Phi_w) - E*(Phi_{w*})
};

struct SimRunResult {
  std::vector<SimSnapshot> snaps;
  PhaseReport phases;
  bool sample_size_warning = false;
  SimState final_state;
};

// One RK4 step of the population dynamics; w is renormalized afterwards and
// rho is always recomputed from w.
SimState sim_population_step(const SimState& state, const SimTruth& truth,
                             const SimFlowParams& params, double dt);

SimRunResult sim_population_run(const SimTruth& truth,
                                const SimFlowParams& params,
                                std::uint64_t seed);

struct SimNoise {
  std::vector<double> e;  // e_r, r = 0..r_max
  Eigen::VectorXd E;      // tangential noise drift of w
  double tau = 0.0;       // <E, w*>
};

SimNoise sim_noise_terms(const Eigen::VectorXd& w,
                         const Eigen::VectorXd& wstar,
                         std::span<const double> g, const NoiseField& noise);

SimRunResult sim_sequence_run(const SimTruth& truth, const NoiseField& noise,
                              const SimFlowParams& params, std::uint64_t seed);

// ---- Stiefel geometry -------------------------------------------------------

// Tangent projection Z - W Sym(W^T Z) at W in St(d,p).
Eigen::MatrixXd stiefel_project(const Eigen::MatrixXd& W,
                                const Eigen::MatrixXd& Z);

// Uniform draw on St(d,p) (QR of a Gaussian matrix with sign fix).
Eigen::MatrixXd random_stiefel(int d, int p, Rng& rng);

Eigen::VectorXd random_unit_vector(int d, Rng& rng);

// ---- Multi-index flows -------------------------------------------------------

struct MimTruth {
  std::vector<double> hstar;  // hstar[r], r = 0..r_max (shells of degree 2r)
  Eigen::MatrixXd Wstar;      // d x p
};

struct MimFlowParams {
  double gamma = 0.5;   // mu_r = exp(-gamma r), full degree r
  double K = 0.0;       // softmin sharpness; 0 -> ceil(2 d log p), min 1
  double dt = 0.02;
  double t_end = 40.0;
  int record_every = 10;
  double eps2 = 1e-4;
  double T0 = 1.0;
  double divergence_factor = 10.0;
};

// Reduced population state: link coefficients and squared singular values.
struct MimReducedState {
  double t = 0.0;
  std::vector<double> h;  // h[r]
  std::vector<double> s;  // sigma_i^2
};

struct MimSnapshot {
  double t = 0.0;
  std::vector<double> sigma;
  std::vector<double> h;
  std::vector<double> phi;  // phi_r, r = 0..r_max
  double omega = 0.0;
  FemRecord fem;
  double excess = 0.0;
};

struct MimRunResult {
  std::vector<MimSnapshot> snaps;
  PhaseReport phases;
  MimReducedState final_reduced;
  Eigen::MatrixXd final_W;  // only for full-W runs
};

// One RK4 step of the closed reduced population system (h, sigma^2).
MimReducedState mim_population_step(const MimReducedState& state,
                                    const MimTruth& truth,
                                    const MimFlowParams& params,
                                    const RotInvCoeffs& table, double dt);

// Population run: draws W(0) ~ Unif(St(d,p)) for the initial singular values
// and then integrates the reduced system (it is closed in (h, sigma)).
MimRunResult mim_population_run(const MimTruth& truth,
                                const MimFlowParams& params,
                                const RotInvCoeffs& table, std::uint64_t seed);

struct MimNoise {
  std::vector<double> e;  // e_r
  double xi = 0.0;        // noise drift of phi_1
  double zeta = 0.0;      // noise drift of omega
};

// Exact Hermite-algebra noise terms at (W, h). K enters through exp(-K M)
// with M = Psi^T Psi.
MimNoise mim_noise_terms(const Eigen::MatrixXd& W, std::span<const double> h,
                         const Eigen::MatrixXd& Wstar, const NoiseField& noise,
                         double K, const RotInvCoeffs& table);

// Ambient coefficients of P_W Hbar_r for r = 0..table.r_max (shared by the
// noise terms and their covariance tests).
std::vector<HermiteSeries> pushforward_rotinv_basis(const Eigen::MatrixXd& W,
                                                    const RotInvCoeffs& table);

// Noisy run with full Stiefel integration of W; when `noise.zero` the path
// must reproduce the reduced sigma-ODE.
MimRunResult mim_sequence_run(const MimTruth& truth, const NoiseField& noise,
                              const MimFlowParams& params,
                              const RotInvCoeffs& table, std::uint64_t seed);

// ---- SVD dynamics check -----------------------------------------------------

struct SvdRateReport {
  double max_deviation = 0.0;
  bool degenerate_warning = false;
  int checked = 0;
};

// Compares finite-difference singular-value velocities along a matrix path
// against Diag(U^T Xdot V); points with singular-value gaps below 1e-6 are
// skipped with a warning.
SvdRateReport svd_rate_check(
    const std::function<Eigen::MatrixXd(double)>& path, double t0, double t1,
    int samples, double fd_step);

}  // namespace afl
