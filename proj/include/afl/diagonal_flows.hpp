#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "afl/seq_model.hpp"

namespace afl {

struct FlowConfig {
  double dt = 0.02;
  double t_end = 10.0;
  enum class Integrator { Rk4, Euler } integrator = Integrator::Rk4;
  double conservation_tol = 1e-6;
  int record_every = 10;     // snapshot cadence in steps
  bool keep_snapshots = true;
  double rate_cap = 0.1;     // enforce dt * max effective rate <= rate_cap
  int max_dt_halvings = 1;   // automatic retries on conservation drift
};

struct DiagState {
  double t = 0.0;
  int depth = 0;
  std::vector<double> theta;
  std::vector<double> beta;
  std::vector<double> b;  // empty when depth == 0

  double f(std::size_t j) const {
    double bd = 1.0;
    if (depth > 0) {
      for (int k = 0; k < depth; ++k) bd *= b[j];
    }
    return theta[j] * bd * beta[j];
  }
  double lambda_eff(std::size_t j) const {
    double bd = 1.0;
    if (depth > 0) {
      for (int k = 0; k < depth; ++k) bd *= b[j];
    }
    const double v = theta[j] * bd;
    return v * v;
  }
};

struct DiagTrajectory {
  std::vector<DiagState> snapshots;
  double dt_used = 0.0;
  int dt_halvings = 0;
  double max_conservation_drift = 0.0;
};

using DiagSnapshotFn = std::function<void(const DiagState&)>;

// Over-parameterized linear flow on sequence observations:
// theta_j' = beta_j (z_j - f_j), beta_j' = theta_j (z_j - f_j),
// theta_j(0) = alpha, beta_j(0) = 0.
DiagTrajectory flow_sparse_seq(const SequenceObservation& obs,
                               const FlowConfig& cfg, double alpha,
                               const DiagSnapshotFn& on_snapshot = nullptr);

// Diagonal adaptive flow, depth D >= 0, theta_j(0) = sqrt(lambda_j),
// b_j(0) = b0. Sequence loss decouples across coordinates.
DiagTrajectory flow_diag_seq(const SequenceObservation& obs,
                             const FlowConfig& cfg,
                             const std::vector<double>& lambda, int D,
                             double b0,
                             const DiagSnapshotFn& on_snapshot = nullptr);

// Empirical-loss counterpart of flow_sparse_seq; the residual runs through
// the empirical Gram matrix. When `sequence_reduction` is given, the Gram
// matrix is replaced by the identity and the noise by the sequence noise,
// which reproduces flow_sparse_seq exactly (diagnostic switch).
DiagTrajectory flow_sparse_empirical(
    const SampleDataset& data, const FlowConfig& cfg, double alpha,
    const SequenceObservation* sequence_reduction = nullptr,
    const DiagSnapshotFn& on_snapshot = nullptr);

// Empirical-loss diagonal flow on the cosine basis, truncated at J basis
// functions (J <= 5000).
DiagTrajectory flow_diag_empirical(const SampleDataset& data,
                                   const FlowConfig& cfg,
                                   const std::vector<double>& lambda, int D,
                                   double b0, int J,
                                   const DiagSnapshotFn& on_snapshot = nullptr);

// ---- Scalar dynamics oracles ----------------------------------------------

// Dense scalar trajectory of the depth-D two-layer cell with constant z.
struct ScalarPath {
  std::vector<double> t, theta, beta, b, f;
  double max_drift = 0.0;  // conservation drift along the path
};

ScalarPath integrate_scalar(double z, double lambda, int D, double b0,
                            double t_end, double dt);

struct LemmaCheck {
  std::string name;
  bool applicable = false;
  bool holds = false;
  double margin = 0.0;  // worst-case slack (negative = violated)
};

// Evaluates the one-dimensional comparison/noise/signal lemmas and the
// depth-D noise/signal case bounds on numerically integrated trajectories.
std::vector<LemmaCheck> onedim_oracles(double z, double z_weaker,
                                       double lambda, double lambda_weaker,
                                       int D, double b0, double t_end,
                                       double dt);

}  // namespace afl
