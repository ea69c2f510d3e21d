#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "afl/hermite.hpp"

namespace afl {

// ---- Truth specifications ------------------------------------------------

struct SparseMeanSpec {
  int d = 0;
  int sstar = 0;
  std::vector<double> magnitudes;  // one per nonzero entry
  double floor_c = 0.5;            // minimal |w*_j| over the support
};

// Nonzero coefficients at j(ell) = round(ell^q) with value c * ell^{-(p+1)/2};
// collisions resolved by bumping to the next free index.
struct MisalignedPQSpec {
  double p = 1.0;
  double q = 2.0;
  int ell_max = 0;
  double c = 1.0;
};

struct SingleIndexSpec {
  int d = 0;
  std::vector<double> gstar;  // gstar[r], r = 0..r_max
  Eigen::VectorXd wstar;      // unit vector in R^d
};

struct MultiIndexSpec {
  int d = 0;
  int p = 0;
  std::vector<double> hstar;  // hstar[r], r = 0..r_max (degree 2r shells)
  Eigen::MatrixXd Wstar;      // d x p, orthonormal columns
};

using TruthSpec =
    std::variant<SparseMeanSpec, MisalignedPQSpec, SingleIndexSpec,
                 MultiIndexSpec>;

// Validates the spec and returns the coefficient vector for the diagonal
// variants (SparseMean: length d; MisalignedPQ: length max resolved index+1,
// index 0 = constant basis function). Index models are validated only; their
// coefficients are exposed through the helpers below.
std::vector<double> make_truth(const TruthSpec& spec);

// Information exponent r0 = min{r >= 1 : gstar_r != 0}.
int information_exponent(std::span<const double> gstar);

// Ambient coefficients of a single-index truth up to degree r_max:
// f*_m = binom(r, m)^{1/2} w*^m g*_r with r = |m|.
HermiteSeries sim_ambient_series(const SingleIndexSpec& spec);

// Ambient coefficients of a rotation-invariant multi-index truth, assembled
// through the frame change with R = W*^T (test oracle; the flows never need
// the ambient truth explicitly).
HermiteSeries mim_ambient_series(const MultiIndexSpec& spec,
                                 const RotInvCoeffs& table);

// ---- Observations ----------------------------------------------------------

struct SequenceObservation {
  std::vector<double> z;
  std::vector<double> truth;  // same length as z
  double noise_var = 0.0;     // sigma^2 / n
  long n = 0;
  std::uint64_t seed = 0;
};

// One observation per index below index_cap (truth padded with zeros).
// Guarded at 1e7 indices.
SequenceObservation observe_sequence(const std::vector<double>& truth, long n,
                                     double sigma, std::size_t index_cap,
                                     std::uint64_t seed);

// ---- Sampled data ----------------------------------------------------------

struct SampleDataset {
  Eigen::MatrixXd x;   // n x d covariates (d = 1 for MisalignedPQ)
  Eigen::VectorXd y;
  std::string basis;   // "gaussian-identity" or "cosine01"
  double sigma = 0.0;
  std::uint64_t seed = 0;
};

// Supported for SparseMean (x ~ N(0, I_d)) and MisalignedPQ (x ~ U[0,1],
// cosine basis e_0 = 1, e_j = sqrt(2) cos(pi j x)). Index models raise
// DomainError (their empirical losses are out of scope).
SampleDataset sample_dataset(const TruthSpec& spec, long n, double sigma,
                             std::uint64_t seed);

double cosine_basis_eval(int j, double x);

// ---- Sequence-loss gradient decomposition ---------------------------------

// -grad(noisy loss) = -grad(population loss) + sum_j eps_j grad f_j.
// `pop_rhs` is the population flow right-hand side, `jac[j]` the parameter
// gradient of the j-th model coefficient.
std::vector<double> seq_loss_gradient_parts(
    std::span<const double> pop_rhs, std::span<const double> eps,
    const std::vector<std::vector<double>>& jac);

}  // namespace afl
