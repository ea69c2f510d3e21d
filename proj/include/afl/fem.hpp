#pragma once

#include <limits>
#include <span>
#include <utility>
#include <variant>
#include <vector>

#include "afl/hermite.hpp"

namespace afl {

// One evaluation of the feature error measure at a truncation level.
struct FemRecord {
  double delta = 0.0;
  double e_proj = 0.0;
  double e_v = 0.0;
  double e_b = 0.0;
  double total = 0.0;
  // Filled by fem_optimal (equal to delta/total for a plain fem_at call).
  double delta_star = 0.0;
  double e_star = 0.0;
};

// Fixed-basis view: per-index weights plus truth coefficients.
struct DiagonalView {
  std::vector<double> weights;
  std::vector<double> truth;
};

// Single-index view: alignment rho, weights lambda_r = exp(-gamma r).
struct SingleIndexView {
  double rho = 0.0;
  double gamma = 0.5;
  int r_max = 0;
  std::vector<double> gstar;  // gstar[r], r = 0..r_max
};

// Multi-index view: singular values sigma_i of Psi = W^T W_*, weights
// mu_r = exp(-gamma r) keyed by full degree r. Rotation-invariant truth is
// handled through (nu, hstar); a general truth may be given as ambient
// coefficients instead.
struct MultiIndexView {
  std::vector<double> sigma;  // p entries in [0,1]
  double gamma = 0.5;
  int r_max = 0;              // half-degree cap of the truth
  std::vector<double> hstar;  // hstar[r], r = 0..r_max
  const RotInvCoeffs* nu = nullptr;
  // Optional general truth (multi-index in N^p -> coefficient).
  std::vector<std::pair<MultiIndex, double>> ambient;
};

using FeatureWeightView =
    std::variant<DiagonalView, SingleIndexView, MultiIndexView>;

FemRecord fem_at(const FeatureWeightView& view, double delta, double eps2);

// Minimizes over the finite candidate set {weight values} + {+inf}; ties are
// broken toward the larger delta (fewer active features).
FemRecord fem_optimal(const FeatureWeightView& view, double eps2);

// Sufficient-condition check that E* did not increase between two diagonal
// views: lists the (signal, noise) index pairs that crossed the optimal level
// in the wrong order. Empty result certifies a non-increasing step.
std::vector<std::pair<int, int>> up_crossing_detect(const DiagonalView& before,
                                                    const DiagonalView& after,
                                                    double eps2);

// Exact single-index projection error vs. its decay-rate envelope
// ((1-rho), (1-rho)log(1/(1-rho)) or (1-rho)^alpha depending on alpha).
std::pair<double, double> sim_proj_bound_check(double rho, double alpha,
                                               std::span<const double> gstar);

// Spectral-filter comparison for the gradient-descent estimator
// hat f_j = (1 - exp(-lambda_j t)) z_j against the hard threshold at
// delta = 1/t. Reported, not asserted: the two are close only when the
// lambda_j t stay away from 1.
struct GdFilterReport {
  double e_v_gd = 0.0;
  double e_b_gd = 0.0;
  double e_v_fem = 0.0;
  double e_b_fem = 0.0;
  double ratio_v = 0.0;  // max(e_v_gd/e_v_fem, e_v_fem/e_v_gd)
  double ratio_b = 0.0;
};

GdFilterReport gd_filter_report(const DiagonalView& view, double t,
                                double eps2);

inline constexpr double kDeltaInf = std::numeric_limits<double>::infinity();

}  // namespace afl
