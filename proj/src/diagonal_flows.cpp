#include "afl/diagonal_flows.hpp"

#include <algorithm>
#include <cmath>

#include "afl/errors.hpp"

namespace afl {

namespace {

// Residual map: given model coefficients f, fill R with the gradient driver
// (z - f for sequence losses, empirical Gram residual otherwise).
using ResidualFn =
    std::function<void(const std::vector<double>&, std::vector<double>&)>;

struct Workspace {
  std::vector<double> f, r;
  std::vector<double> k_theta, k_beta, k_b;        // stage derivatives
  std::vector<double> acc_theta, acc_beta, acc_b;  // RK4 accumulators
  std::vector<double> th, be, bb;                  // stage state
};

void derivatives(const DiagState& init_shape, int D,
                 const std::vector<double>& theta,
                 const std::vector<double>& beta, const std::vector<double>& b,
                 const ResidualFn& residual, Workspace& ws) {
  const std::size_t J = theta.size();
  for (std::size_t j = 0; j < J; ++j) {
    double bd = 1.0;
    if (D > 0) {
      for (int k = 0; k < D; ++k) bd *= b[j];
    }
    ws.f[j] = theta[j] * bd * beta[j];
  }
  residual(ws.f, ws.r);
  for (std::size_t j = 0; j < J; ++j) {
    double bd = 1.0, bd1 = 1.0;
    if (D > 0) {
      for (int k = 0; k < D - 1; ++k) bd1 *= b[j];
      bd = bd1 * b[j];
    }
    ws.k_theta[j] = bd * beta[j] * ws.r[j];
    ws.k_beta[j] = theta[j] * bd * ws.r[j];
    if (D > 0) ws.k_b[j] = D * theta[j] * bd1 * beta[j] * ws.r[j];
  }
  (void)init_shape;
}

double conservation_drift(const DiagState& s, const std::vector<double>& lam0,
                          double b0) {
  double worst = 0.0;
  for (std::size_t j = 0; j < s.theta.size(); ++j) {
    const double q1 = s.theta[j] * s.theta[j] - s.beta[j] * s.beta[j] - lam0[j];
    worst = std::max(worst, std::abs(q1));
    if (s.depth > 0) {
      const double q2 =
          s.b[j] * s.b[j] - s.depth * s.beta[j] * s.beta[j] - b0 * b0;
      worst = std::max(worst, std::abs(q2));
    }
  }
  return worst;
}

DiagTrajectory integrate(const FlowConfig& cfg, int D,
                         const std::vector<double>& theta0,
                         const std::vector<double>& lam0, double b0,
                         double z_scale, const ResidualFn& residual,
                         const DiagSnapshotFn& on_snapshot) {
  const std::size_t J = theta0.size();
  // dt rule: dt * max effective rate <= rate_cap. The rate is bounded by the
  // initial weight plus the saturated scale (1 + |z|)^2.
  double lam_eff0 = 0.0;
  for (double l : lam0) lam_eff0 = std::max(lam_eff0, l);
  if (D > 0) {
    double bp = 1.0;
    for (int k = 0; k < 2 * D; ++k) bp *= b0;
    lam_eff0 *= bp;
  }
  const double rate = lam_eff0 + (1.0 + z_scale) * (1.0 + z_scale);
  // rate_cap <= 0 disables the clamp (callers that need exact step sizes
  // choose a conservative dt themselves).
  double dt = cfg.rate_cap > 0.0 ? std::min(cfg.dt, cfg.rate_cap / rate)
                                 : cfg.dt;

  DiagTrajectory out;
  for (int attempt = 0; attempt <= cfg.max_dt_halvings; ++attempt) {
    out.snapshots.clear();
    out.dt_used = dt;
    out.dt_halvings = attempt;
    out.max_conservation_drift = 0.0;

    DiagState s;
    s.t = 0.0;
    s.depth = D;
    s.theta = theta0;
    s.beta.assign(J, 0.0);
    if (D > 0) s.b.assign(J, b0);

    Workspace ws;
    ws.f.resize(J);
    ws.r.resize(J);
    ws.k_theta.resize(J);
    ws.k_beta.resize(J);
    ws.k_b.resize(D > 0 ? J : 0);
    ws.acc_theta.resize(J);
    ws.acc_beta.resize(J);
    ws.acc_b.resize(D > 0 ? J : 0);
    ws.th.resize(J);
    ws.be.resize(J);
    ws.bb.resize(D > 0 ? J : 0);

    const long steps = std::lround(std::ceil(cfg.t_end / dt - 1e-12));
    bool drifted = false;

    auto emit = [&](const DiagState& state) {
      if (on_snapshot) on_snapshot(state);
      if (cfg.keep_snapshots) out.snapshots.push_back(state);
    };
    emit(s);

    for (long step = 0; step < steps; ++step) {
      if (cfg.integrator == FlowConfig::Integrator::Euler) {
        derivatives(s, D, s.theta, s.beta, s.b, residual, ws);
        for (std::size_t j = 0; j < J; ++j) {
          s.theta[j] += dt * ws.k_theta[j];
          s.beta[j] += dt * ws.k_beta[j];
          if (D > 0) s.b[j] += dt * ws.k_b[j];
        }
      } else {
        static const double stage_w[4] = {1.0, 2.0, 2.0, 1.0};
        static const double stage_c[4] = {0.0, 0.5, 0.5, 1.0};
        std::fill(ws.acc_theta.begin(), ws.acc_theta.end(), 0.0);
        std::fill(ws.acc_beta.begin(), ws.acc_beta.end(), 0.0);
        std::fill(ws.acc_b.begin(), ws.acc_b.end(), 0.0);
        for (int stage = 0; stage < 4; ++stage) {
          if (stage == 0) {
            ws.th = s.theta;
            ws.be = s.beta;
            if (D > 0) ws.bb = s.b;
          } else {
            const double h = stage_c[stage] * dt;
            for (std::size_t j = 0; j < J; ++j) {
              ws.th[j] = s.theta[j] + h * ws.k_theta[j];
              ws.be[j] = s.beta[j] + h * ws.k_beta[j];
              if (D > 0) ws.bb[j] = s.b[j] + h * ws.k_b[j];
            }
          }
          derivatives(s, D, ws.th, ws.be, ws.bb, residual, ws);
          for (std::size_t j = 0; j < J; ++j) {
            ws.acc_theta[j] += stage_w[stage] * ws.k_theta[j];
            ws.acc_beta[j] += stage_w[stage] * ws.k_beta[j];
            if (D > 0) ws.acc_b[j] += stage_w[stage] * ws.k_b[j];
          }
        }
        for (std::size_t j = 0; j < J; ++j) {
          s.theta[j] += dt / 6.0 * ws.acc_theta[j];
          s.beta[j] += dt / 6.0 * ws.acc_beta[j];
          if (D > 0) s.b[j] += dt / 6.0 * ws.acc_b[j];
        }
      }
      s.t = (step + 1) * dt;

      const double drift = conservation_drift(s, lam0, b0);
      out.max_conservation_drift = std::max(out.max_conservation_drift, drift);
      if (drift > cfg.conservation_tol) {
        drifted = true;
        break;
      }
      if ((step + 1) % cfg.record_every == 0 || step + 1 == steps) emit(s);
    }

    if (!drifted) return out;
    dt *= 0.5;
  }
  throw InvariantError(
      "diagonal flow: conservation drift persists after dt halving");
}

double abs_max(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace

DiagTrajectory flow_sparse_seq(const SequenceObservation& obs,
                               const FlowConfig& cfg, double alpha,
                               const DiagSnapshotFn& on_snapshot) {
  if (!(alpha > 0.0)) throw DomainError("flow_sparse_seq: alpha must be > 0");
  const std::size_t J = obs.z.size();
  std::vector<double> theta0(J, alpha), lam0(J, alpha * alpha);
  const std::vector<double>& z = obs.z;
  ResidualFn residual = [&z](const std::vector<double>& f,
                             std::vector<double>& r) {
    for (std::size_t j = 0; j < f.size(); ++j) r[j] = z[j] - f[j];
  };
  return integrate(cfg, 0, theta0, lam0, 0.0, abs_max(z), residual,
                   on_snapshot);
}

DiagTrajectory flow_diag_seq(const SequenceObservation& obs,
                             const FlowConfig& cfg,
                             const std::vector<double>& lambda, int D,
                             double b0, const DiagSnapshotFn& on_snapshot) {
  if (lambda.size() != obs.z.size()) {
    throw DomainError("flow_diag_seq: lambda size mismatch");
  }
  if (D < 0) throw DomainError("flow_diag_seq: depth must be >= 0");
  if (D > 0 && !(b0 > 0.0)) throw DomainError("flow_diag_seq: b0 must be > 0");
  std::vector<double> theta0(lambda.size());
  for (std::size_t j = 0; j < lambda.size(); ++j) {
    if (!(lambda[j] > 0.0)) {
      throw DomainError("flow_diag_seq: lambda entries must be > 0");
    }
    theta0[j] = std::sqrt(lambda[j]);
  }
  const std::vector<double>& z = obs.z;
  ResidualFn residual = [&z](const std::vector<double>& f,
                             std::vector<double>& r) {
    for (std::size_t j = 0; j < f.size(); ++j) r[j] = z[j] - f[j];
  };
  return integrate(cfg, D, theta0, lambda, b0, abs_max(z), residual,
                   on_snapshot);
}

DiagTrajectory flow_sparse_empirical(const SampleDataset& data,
                                     const FlowConfig& cfg, double alpha,
                                     const SequenceObservation* sequence_reduction,
                                     const DiagSnapshotFn& on_snapshot) {
  if (!(alpha > 0.0)) {
    throw DomainError("flow_sparse_empirical: alpha must be > 0");
  }
  if (data.basis != "gaussian-identity") {
    throw DomainError("flow_sparse_empirical: needs a SparseMean dataset");
  }
  const long n = data.x.rows();
  const std::size_t d = static_cast<std::size_t>(data.x.cols());
  std::vector<double> theta0(d, alpha), lam0(d, alpha * alpha);

  if (sequence_reduction != nullptr) {
    // Diagnostic switch: Sigma-hat -> I, h -> sequence noise; the dynamics
    // reduce to the sequence flow on z = w* + eps.
    const std::vector<double>& z = sequence_reduction->z;
    if (z.size() != d) {
      throw DomainError("flow_sparse_empirical: reduction size mismatch");
    }
    ResidualFn residual = [&z](const std::vector<double>& f,
                               std::vector<double>& r) {
      for (std::size_t j = 0; j < f.size(); ++j) r[j] = z[j] - f[j];
    };
    return integrate(cfg, 0, theta0, lam0, 0.0, abs_max(z), residual,
                     on_snapshot);
  }

  // Precompute Sigma-hat = X^T X / n and c = X^T y / n; the residual is then
  // c - Sigma-hat w, which equals Sigma-hat (w* - w) + h.
  const Eigen::MatrixXd gram =
      (data.x.transpose() * data.x) / static_cast<double>(n);
  const Eigen::VectorXd c = (data.x.transpose() * data.y) / static_cast<double>(n);
  Eigen::VectorXd fvec(d), rvec(d);
  ResidualFn residual = [&gram, &c, &fvec, &rvec](const std::vector<double>& f,
                                                  std::vector<double>& r) {
    for (std::size_t j = 0; j < f.size(); ++j) fvec(j) = f[j];
    rvec.noalias() = c - gram * fvec;
    for (std::size_t j = 0; j < f.size(); ++j) r[j] = rvec(j);
  };
  return integrate(cfg, 0, theta0, lam0, 0.0, c.cwiseAbs().maxCoeff(),
                   residual, on_snapshot);
}

DiagTrajectory flow_diag_empirical(const SampleDataset& data,
                                   const FlowConfig& cfg,
                                   const std::vector<double>& lambda, int D,
                                   double b0, int J,
                                   const DiagSnapshotFn& on_snapshot) {
  if (data.basis != "cosine01") {
    throw DomainError("flow_diag_empirical: needs a MisalignedPQ dataset");
  }
  if (J < 1 || J > 5000) {
    throw DomainError("flow_diag_empirical: J must be in [1, 5000]");
  }
  if (static_cast<int>(lambda.size()) != J) {
    throw DomainError("flow_diag_empirical: lambda size must equal J");
  }
  const long n = data.x.rows();
  Eigen::MatrixXd design(n, J);
  for (long i = 0; i < n; ++i) {
    for (int j = 0; j < J; ++j) {
      design(i, j) = cosine_basis_eval(j, data.x(i, 0));
    }
  }
  const Eigen::MatrixXd gram =
      (design.transpose() * design) / static_cast<double>(n);
  const Eigen::VectorXd c =
      (design.transpose() * data.y) / static_cast<double>(n);

  std::vector<double> theta0(J);
  for (int j = 0; j < J; ++j) {
    if (!(lambda[j] > 0.0)) {
      throw DomainError("flow_diag_empirical: lambda entries must be > 0");
    }
    theta0[j] = std::sqrt(lambda[j]);
  }
  Eigen::VectorXd fvec(J), rvec(J);
  ResidualFn residual = [&gram, &c, &fvec, &rvec](const std::vector<double>& f,
                                                  std::vector<double>& r) {
    for (std::size_t j = 0; j < f.size(); ++j) fvec(j) = f[j];
    rvec.noalias() = c - gram * fvec;
    for (std::size_t j = 0; j < f.size(); ++j) r[j] = rvec(j);
  };
  return integrate(cfg, D, theta0, lambda, b0, c.cwiseAbs().maxCoeff(),
                   residual, on_snapshot);
}

// ---- Scalar oracles --------------------------------------------------------

ScalarPath integrate_scalar(double z, double lambda, int D, double b0,
                            double t_end, double dt) {
  if (!(lambda > 0.0)) throw DomainError("integrate_scalar: lambda must be > 0");
  ScalarPath path;
  double theta = std::sqrt(lambda), beta = 0.0, b = (D > 0 ? b0 : 1.0);
  const long steps = std::lround(std::ceil(t_end / dt - 1e-12));
  auto rhs = [&](double th, double be, double bb, double& dth, double& dbe,
                 double& dbb) {
    double bd = 1.0, bd1 = 1.0;
    if (D > 0) {
      for (int k = 0; k < D - 1; ++k) bd1 *= bb;
      bd = bd1 * bb;
    }
    const double res = z - th * bd * be;
    dth = bd * be * res;
    dbe = th * bd * res;
    dbb = D > 0 ? D * th * bd1 * be * res : 0.0;
  };
  auto push = [&](double t) {
    path.t.push_back(t);
    path.theta.push_back(theta);
    path.beta.push_back(beta);
    path.b.push_back(b);
    double bd = 1.0;
    for (int k = 0; k < D; ++k) bd *= b;
    path.f.push_back(theta * bd * beta);
    const double q1 = theta * theta - beta * beta - lambda;
    double drift = std::abs(q1);
    if (D > 0) {
      drift = std::max(drift, std::abs(b * b - D * beta * beta - b0 * b0));
    }
    path.max_drift = std::max(path.max_drift, drift);
  };
  push(0.0);
  for (long s = 0; s < steps; ++s) {
    double k1t, k1b, k1bb, k2t, k2b, k2bb, k3t, k3b, k3bb, k4t, k4b, k4bb;
    rhs(theta, beta, b, k1t, k1b, k1bb);
    rhs(theta + 0.5 * dt * k1t, beta + 0.5 * dt * k1b, b + 0.5 * dt * k1bb,
        k2t, k2b, k2bb);
    rhs(theta + 0.5 * dt * k2t, beta + 0.5 * dt * k2b, b + 0.5 * dt * k2bb,
        k3t, k3b, k3bb);
    rhs(theta + dt * k3t, beta + dt * k3b, b + dt * k3bb, k4t, k4b, k4bb);
    theta += dt / 6.0 * (k1t + 2 * k2t + 2 * k3t + k4t);
    beta += dt / 6.0 * (k1b + 2 * k2b + 2 * k3b + k4b);
    if (D > 0) b += dt / 6.0 * (k1bb + 2 * k2bb + 2 * k3bb + k4bb);
    push((s + 1) * dt);
  }
  return path;
}

std::vector<LemmaCheck> onedim_oracles(double z, double z_weaker,
                                       double lambda, double lambda_weaker,
                                       int D, double b0, double t_end,
                                       double dt) {
  std::vector<LemmaCheck> checks;
  const double tol = 1e-9;

  if (D == 0) {
    const ScalarPath a = integrate_scalar(z, lambda, 0, 0.0, t_end, dt);
    const ScalarPath w = integrate_scalar(z_weaker, lambda_weaker, 0, 0.0,
                                          t_end, dt);
    // Comparison: min |z| >= max |z'| and theta(0) >= theta'(0).
    {
      LemmaCheck c{"two_layer_comparison"};
      c.applicable =
          std::abs(z) >= std::abs(z_weaker) && lambda >= lambda_weaker;
      if (c.applicable) {
        double worst = 1e300;
        for (std::size_t i = 0; i < a.t.size(); ++i) {
          worst = std::min(worst, a.theta[i] - w.theta[i]);
        }
        c.margin = worst;
        c.holds = worst >= -tol;
      }
      checks.push_back(c);
    }
    // Noise upper bound: theta <= sqrt(2) lambda^{1/2} for t <= 1/(sqrt2 M).
    {
      LemmaCheck c{"two_layer_noise_upper"};
      c.applicable = std::abs(z) > 0.0;
      const double t_cap = 1.0 / (std::sqrt(2.0) * std::abs(z));
      double worst = 1e300;
      for (std::size_t i = 0; i < a.t.size() && a.t[i] <= t_cap; ++i) {
        worst = std::min(worst, std::sqrt(2.0 * lambda) - a.theta[i]);
      }
      c.margin = worst;
      c.holds = worst >= -tol;
      checks.push_back(c);
    }
    // Exponential envelope: theta <= lambda^{1/2} (1 + exp(sqrt2 t M)).
    {
      LemmaCheck c{"two_layer_noise_upper_exp"};
      c.applicable = true;
      double worst = 1e300;
      for (std::size_t i = 0; i < a.t.size(); ++i) {
        const double env = std::sqrt(lambda) *
                           (1.0 + std::exp(std::sqrt(2.0) * a.t[i] * std::abs(z)));
        worst = std::min(worst, env - a.theta[i]);
      }
      c.margin = worst;
      c.holds = worst >= -tol;
      checks.push_back(c);
    }
    // Signal lower bound: theta^2 >= m/2 for t >= m^{-1}(2 + log+ m/(2 lambda)).
    {
      LemmaCheck c{"two_layer_signal_lower"};
      const double m = std::abs(z);
      c.applicable = m > 0.0;
      if (c.applicable) {
        const double t_req =
            (2.0 + std::max(0.0, std::log(m / (2.0 * lambda)))) / m;
        c.applicable = t_req <= t_end;
        double worst = 1e300;
        bool any = false;
        for (std::size_t i = 0; i < a.t.size(); ++i) {
          if (a.t[i] >= t_req) {
            worst = std::min(worst, a.theta[i] * a.theta[i] - 0.5 * m);
            any = true;
          }
        }
        c.margin = any ? worst : 0.0;
        c.holds = c.applicable && any && worst >= -tol;
      }
      checks.push_back(c);
    }
    return checks;
  }

  // Depth-D cases.
  const ScalarPath a = integrate_scalar(z, lambda, D, b0, t_end, dt);
  double b0d = 1.0;
  for (int k = 0; k < D; ++k) b0d *= b0;
  const double cD = std::pow(2.0, (D + 1) / 2.0);

  // Comparison with matched b0.
  {
    LemmaCheck c{"multilayer_comparison"};
    c.applicable =
        std::abs(z) >= std::abs(z_weaker) && lambda >= lambda_weaker;
    if (c.applicable) {
      const ScalarPath w =
          integrate_scalar(z_weaker, lambda_weaker, D, b0, t_end, dt);
      double worst = 1e300;
      for (std::size_t i = 0; i < a.t.size(); ++i) {
        worst = std::min(worst, a.theta[i] - w.theta[i]);
      }
      c.margin = worst;
      c.holds = worst >= -tol;
    }
    checks.push_back(c);
  }
  // Noise case: requires lambda^{1/2} <= b0/sqrt(D).
  {
    LemmaCheck c{"multilayer_noise_case"};
    c.applicable = std::sqrt(lambda) <= b0 / std::sqrt(double(D)) &&
                   std::abs(z) > 0.0;
    if (c.applicable) {
      const double T1 = 1.0 / (cD * b0d * std::abs(z));
      const double t_exp_cap =
          (1.0 + std::log(b0 / (std::sqrt(double(D)) * std::sqrt(lambda)))) * T1;
      double worst = 1e300;
      for (std::size_t i = 0; i < a.t.size(); ++i) {
        double bd = 1.0;
        for (int k = 0; k < D; ++k) bd *= a.b[i];
        const double lam_eff_sqrt = a.theta[i] * bd;
        if (a.t[i] <= T1) {
          worst = std::min(worst, cD * std::sqrt(lambda) * b0d - lam_eff_sqrt);
        } else if (a.t[i] <= t_exp_cap) {
          const double env = cD * std::sqrt(lambda) * b0d *
                             std::exp(cD * b0d * std::abs(z) * (a.t[i] - T1));
          worst = std::min(worst, env - lam_eff_sqrt);
        }
      }
      c.margin = worst;
      c.holds = worst >= -tol;
    }
    checks.push_back(c);
  }
  // Signal case: time to reach lambda_eff^{1/2} >= |z|^{(D+1)/(D+2)}.
  {
    LemmaCheck c{"multilayer_signal_case"};
    const double m = std::abs(z);
    c.applicable = m > 0.0;
    if (c.applicable) {
      double bound;
      if (std::sqrt(lambda) <= b0 / std::sqrt(double(D))) {
        const double num =
            std::pow(std::pow(double(D), -0.5 * D) * m / 2.0, 1.0 / (D + 2));
        bound = 2.0 / (b0d * m) *
                (1.0 + std::max(0.0, std::log(num / std::sqrt(lambda))));
      } else {
        double b0d1 = 1.0;
        for (int k = 0; k < D - 1; ++k) b0d1 *= b0;
        double rj;
        if (D == 1) {
          rj = std::max(0.0, std::log(std::pow(D * m / 2.0, 1.0 / (D + 2)) / b0));
        } else {
          rj = 1.0 / (D - 1);
        }
        bound = 2.0 / (std::sqrt(double(D) * lambda) * b0d1 * m) * (1.0 + rj);
      }
      c.applicable = bound <= t_end;
      const double target = std::pow(m, double(D + 1) / (D + 2));
      double reach_time = 1e300;
      for (std::size_t i = 0; i < a.t.size(); ++i) {
        double bd = 1.0;
        for (int k = 0; k < D; ++k) bd *= a.b[i];
        if (a.theta[i] * bd >= target) {
          reach_time = a.t[i];
          break;
        }
      }
      c.margin = bound - reach_time;
      c.holds = c.applicable && reach_time <= bound + tol;
    }
    checks.push_back(c);
  }
  // Ultimate bound under b0/sqrt(D) <= lambda^{1/2} <= 1, checked whenever
  // the hypothesis holds.
  {
    LemmaCheck c{"multilayer_ultimate_bound"};
    c.applicable = b0 / std::sqrt(double(D)) <= std::sqrt(lambda) &&
                   std::sqrt(lambda) <= 1.0;
    if (c.applicable) {
      const double env =
          cD * std::sqrt(double(D)) *
          std::max({std::sqrt(lambda) * b0d,
                    std::pow(std::abs(z), double(D + 1) / (D + 2)),
                    std::abs(z) / b0});
      double worst = 1e300;
      for (std::size_t i = 0; i < a.t.size(); ++i) {
        double bd = 1.0;
        for (int k = 0; k < D; ++k) bd *= a.b[i];
        worst = std::min(worst, env - a.theta[i] * bd);
      }
      c.margin = worst;
      c.holds = worst >= -tol;
    }
    checks.push_back(c);
  }
  return checks;
}

}  // namespace afl
