#pragma once

#include <functional>
#include <utility>
#include <vector>

namespace afl {

// Gauss-Hermite rule for the standard Gaussian weight (probabilist form):
// integral f dN(0,1) ~= sum w_i f(x_i). Exact for polynomials of degree
// 2n - 1. Oracle machinery for the identity checks; not used by the flows.
struct GaussHermiteRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

GaussHermiteRule gauss_hermite(int n);

// Composite 8-point Gauss-Legendre on [0,1] split into `intervals` panels.
double integrate_01(const std::function<double(double)>& f, int intervals);

}  // namespace afl
