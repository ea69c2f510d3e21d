#include "afl/quadrature.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "afl/errors.hpp"

namespace afl {

GaussHermiteRule gauss_hermite(int n) {
  if (n < 1) throw DomainError("gauss_hermite: n must be >= 1");
  // Golub-Welsch on the Jacobi matrix of the orthonormal Hermite recurrence
  // x p_k = sqrt(k+1) p_{k+1} + sqrt(k) p_{k-1}.
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    const double off = std::sqrt(static_cast<double>(k));
    J(k, k - 1) = off;
    J(k - 1, k) = off;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  GaussHermiteRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    rule.nodes[i] = es.eigenvalues()(i);
    const double v0 = es.eigenvectors()(0, i);
    rule.weights[i] = v0 * v0;  // total mass of N(0,1) is 1
  }
  return rule;
}

double integrate_01(const std::function<double(double)>& f, int intervals) {
  if (intervals < 1) throw DomainError("integrate_01: intervals must be >= 1");
  // 8-point Gauss-Legendre nodes/weights on [-1,1].
  static const double xs[8] = {
      -0.9602898564975363, -0.7966664774136267, -0.5255324099163290,
      -0.1834346424956498, 0.1834346424956498,  0.5255324099163290,
      0.7966664774136267,  0.9602898564975363};
  static const double ws[8] = {
      0.1012285362903763, 0.2223810344533745, 0.3137066458778873,
      0.3626837833783620, 0.3626837833783620, 0.3137066458778873,
      0.2223810344533745, 0.1012285362903763};
  const double h = 1.0 / intervals;
  double acc = 0.0;
  for (int k = 0; k < intervals; ++k) {
    const double mid = (k + 0.5) * h;
    for (int i = 0; i < 8; ++i) {
      acc += ws[i] * f(mid + 0.5 * h * xs[i]);
    }
  }
  return acc * 0.5 * h;
}

}  // namespace afl
