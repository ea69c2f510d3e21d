#pragma once

#include <Eigen/Dense>
#include <span>
#include <unordered_map>
#include <vector>

#include "afl/multi_index.hpp"

namespace afl {

// Normalized probabilist Hermite polynomials: <H_m, H_n>_{N(0,1)} = delta_mn,
// H_0 = 1, H_1 = x, sqrt(n+1) H_{n+1} = x H_n - sqrt(n) H_{n-1}.
double hermite_eval_1d(int m, double x);

// Sparse expansion f = sum_m c_m H_m over the tensorized Hermite basis.
struct HermiteSeries {
  int dim = 0;
  int max_degree = 0;
  std::unordered_map<MultiIndex, double, MultiIndexHash> coeffs;

  void add(const MultiIndex& m, double c);
  double at(const MultiIndex& m) const;
  // Drops entries below the fill-in threshold (1e-14).
  void prune();
  // Euclidean norm of the coefficients = L2 norm of the function.
  double norm() const;
};

double series_eval(const HermiteSeries& f, std::span<const double> x);

// Coefficients of d f / d x_i: g_m = sqrt(m_i + 1) f_{m + e_i}.
HermiteSeries series_derivative(const HermiteSeries& f, int i);

// Exact coefficients of x_i * f(x). Throws CapExceededError when the result
// degree would exceed `degree_budget` (default: f.max_degree + 1).
HermiteSeries series_mul_coordinate(const HermiteSeries& f, int i,
                                    int degree_budget = -1);

// E[H_m(P^T x) H_n(Q^T x)] for Stiefel P, Q and R = P^T Q:
// zero unless |m| = |n|, otherwise a signed sum of R^Y * sqrt(m! n!)/Y! over
// integer matrices Y with row sums m and column sums n. The enumeration
// aborts with CapExceededError past `table_cap` tables.
double frame_change_coeff(const MultiIndex& m, const MultiIndex& n,
                          const Eigen::MatrixXd& R,
                          long table_cap = 1000000);

// Gaussian channel A_Sigma: g_m = sigma^m f_m (with 0^0 = 1). Requires every
// sigma_j in [0,1].
HermiteSeries gauss_convolve(const HermiteSeries& f,
                             std::span<const double> sigma_diag);

// Expansion data of rotation-invariant functions in p dimensions:
// g = sum_r h_r Hbar_r with Hbar_r = sum_{|r|=r} nu_r H_{2r}.
struct RotInvCoeffs {
  int p = 0;
  int r_max = 0;
  // nu[r] lists (r-multi-index, nu_r) over the shell |r| = r.
  std::vector<std::vector<std::pair<MultiIndex, double>>> nu;
  // C[r] = 4^r (p/2)_r / r!
  std::vector<double> C;
};

RotInvCoeffs rot_inv_coeffs(int p, int r_max);

// Hbar_r as a HermiteSeries in p dimensions (degree 2r).
HermiteSeries rot_inv_basis_series(const RotInvCoeffs& table, int r);

// phi_r = sum_{|r|=r} nu_r^2 sigma^{2r}, from the singular values directly.
double phi_r_direct(std::span<const double> sigma, const RotInvCoeffs& table,
                    int r);

// Same quantity as [z^r] det(I - 4 Psi^T Psi z)^{-1/2} / C_r, extracted from
// the eigenvalues of Psi^T Psi by convolving p scalar power series.
double phi_r_series(const Eigen::MatrixXd& Psi, const RotInvCoeffs& table,
                    int r);

// Default entry point (direct path); throws DomainError when ||Psi|| exceeds
// 1 + 1e-9.
double phi_r(const Eigen::MatrixXd& Psi, const RotInvCoeffs& table, int r);

// Overflow-safe softmin omega = -(1/K) log sum_i exp(-K x_i); satisfies
// min(x) - log(p)/K <= omega <= min(x).
double softmin_omega(std::span<const double> x, double K);

}  // namespace afl
