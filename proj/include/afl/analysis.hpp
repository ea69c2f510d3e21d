#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace afl {

// Energy distance between two samples of coefficient vectors under the l2
// norm (= L2 of the functions). `unbiased` selects the U-statistic for the
// within-sample means; the biased V-statistic keeps the zero diagonal.
double energy_distance(const std::vector<Eigen::VectorXd>& a,
                       const std::vector<Eigen::VectorXd>& b,
                       bool unbiased = true);

// Distance to the zero function, biased (V-statistic) form:
// sqrt(2 mean ||a|| - mean ||a - a'||).
double energy_distance_to_zero(const std::vector<Eigen::VectorXd>& a);

// Percentile band of B resampled means at the given coverage level.
std::pair<double, double> bootstrap_band(std::span<const double> values, int B,
                                         double level, std::uint64_t seed);

struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

// Least-squares fit of log y against log x.
RateFit rate_fit(std::span<const double> x, std::span<const double> y);

double median(std::vector<double> v);

}  // namespace afl
