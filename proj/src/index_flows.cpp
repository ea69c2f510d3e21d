#include "afl/index_flows.hpp"

#include <algorithm>
#include <cmath>

#include "afl/errors.hpp"

namespace afl {

namespace {

double pow_int(double x, int k) {
  double r = 1.0;
  for (int i = 0; i < k; ++i) r *= x;
  return r;
}

PhaseReport extract_phases(const std::vector<double>& t,
                           const std::vector<double>& align,
                           const std::vector<double>& excess, double T0) {
  PhaseReport rep;
  rep.T0 = T0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (align[i] >= 0.5) {
      rep.T1 = t[i];
      break;
    }
  }
  const std::size_t tail = std::max<std::size_t>(1, excess.size() / 10);
  std::vector<double> last(excess.end() - tail, excess.end());
  std::sort(last.begin(), last.end());
  rep.plateau = last[last.size() / 2];
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (excess[i] <= 2.0 * rep.plateau) {
      rep.T2 = t[i];
      break;
    }
  }
  if (!excess.empty()) rep.final_excess = excess.back();
  return rep;
}

}  // namespace

// ---- NoiseField -------------------------------------------------------------

NoiseField NoiseField::make(int dim, int degree_cap, long n,
                            std::uint64_t seed) {
  if (dim < 1 || degree_cap < 0 || n < 1) {
    throw DomainError("NoiseField: bad arguments");
  }
  if (ball_size(dim, degree_cap) > 10000000ULL) {
    throw MemoryGuardError("NoiseField: index count exceeds 1e7");
  }
  NoiseField f;
  f.dim = dim;
  f.degree_cap = degree_cap;
  f.n = n;
  f.seed = seed;
  f.shells.resize(degree_cap + 1);
  Rng rng = Rng::stream(seed, 4);
  const double sd = 1.0 / std::sqrt(static_cast<double>(n));
  for (int r = 0; r <= degree_cap; ++r) {
    f.shells[r].resize(shell_size(dim, r));
    for (double& v : f.shells[r]) v = sd * rng.normal();
  }
  return f;
}

NoiseField NoiseField::zeros(int dim, int degree_cap) {
  NoiseField f;
  f.dim = dim;
  f.degree_cap = degree_cap;
  f.n = 0;
  f.zero = true;
  return f;
}

double noise_dot(const HermiteSeries& f, const NoiseField& noise) {
  if (noise.zero) return 0.0;
  if (f.dim != noise.dim) throw DomainError("noise_dot: dimension mismatch");
  double s = 0.0;
  for (const auto& [m, c] : f.coeffs) s += c * noise.at(m);
  return s;
}

// ---- Single-index -----------------------------------------------------------

namespace {

struct SimDeriv {
  Eigen::VectorXd dw;
  std::vector<double> dg;
};

void sim_rhs(const Eigen::VectorXd& w_raw, const std::vector<double>& g,
             const SimTruth& truth, const SimFlowParams& params,
             const NoiseField* noise, SimDeriv& out) {
  const int r_max = static_cast<int>(truth.gstar.size()) - 1;
  // Stage states drift off the sphere at O(dt^2); the gradient formulas
  // assume ||w|| = 1, so evaluate the field on the retracted point.
  const Eigen::VectorXd w = w_raw.normalized();
  const double rho = w.dot(truth.wstar);
  SimNoise nz;
  if (noise != nullptr && !noise->zero) {
    nz = sim_noise_terms(w, truth.wstar, g, *noise);
  }
  out.dg.assign(r_max + 1, 0.0);
  double rho_pow = 1.0;  // rho^r
  double drift = 0.0;    // sum_r r g*_r g_r rho^{r-1}
  for (int r = 0; r <= r_max; ++r) {
    const double lam = std::exp(-params.gamma * r);
    double rhs = rho_pow * truth.gstar[r] - g[r];
    if (!nz.e.empty()) rhs += nz.e[r];
    out.dg[r] = lam * rhs;
    if (r >= 1) {
      drift += r * truth.gstar[r] * g[r] * (r == 1 ? 1.0 : pow_int(rho, r - 1));
    }
    rho_pow *= rho;
  }
  out.dw = drift * (truth.wstar - rho * w);
  if (nz.E.size() == w.size()) out.dw += nz.E;
}

SimRunResult run_sim(const SimTruth& truth, const SimFlowParams& params,
                     const NoiseField* noise, std::uint64_t seed) {
  const int d = static_cast<int>(truth.wstar.size());
  const int r_max = static_cast<int>(truth.gstar.size()) - 1;
  if (std::abs(truth.wstar.norm() - 1.0) > 1e-9) {
    throw DomainError("sim run: w* must be unit norm");
  }
  if (noise != nullptr && !noise->zero) {
    if (d > 16 || r_max > 6) {
      throw MemoryGuardError(
          "sim run: exact path noise requires d <= 16 and r_max <= 6");
    }
    if (noise->degree_cap < r_max) {
      throw DomainError("sim run: noise degree cap below r_max");
    }
  }

  SimRunResult result;
  const int r0 = information_exponent(truth.gstar);
  if (noise != nullptr && !noise->zero && noise->n > 0) {
    result.sample_size_warning =
        static_cast<double>(noise->n) < std::pow(double(d), 2 * r0 + 1);
  }

  Rng rng = Rng::stream(seed, 5);
  SimState s;
  s.t = 0.0;
  s.w = random_unit_vector(d, rng);
  // Sign canonicalization: flipping w together with the odd part of the link
  // leaves f unchanged, so start on the rho >= 0 branch.
  if (s.w.dot(truth.wstar) < 0.0) s.w = -s.w;
  s.g.assign(r_max + 1, 0.0);

  const double gstar_norm = [&] {
    double v = 0.0;
    for (double x : truth.gstar) v += x * x;
    return std::sqrt(v);
  }();

  // Reference value for the excess curve.
  SingleIndexView opt_view{1.0, params.gamma, r_max, truth.gstar};
  const double estar_opt = fem_optimal(opt_view, params.eps2).e_star;

  const long steps = std::lround(std::ceil(params.t_end / params.dt - 1e-12));
  std::vector<double> t_list, align_list, excess_list;

  auto snapshot = [&](const SimState& st) {
    SimSnapshot snap;
    snap.t = st.t;
    snap.rho = st.w.dot(truth.wstar);
    snap.g = st.g;
    SingleIndexView view{std::abs(snap.rho), params.gamma, r_max, truth.gstar};
    snap.fem = fem_optimal(view, params.eps2);
    snap.excess = snap.fem.e_star - estar_opt;
    t_list.push_back(snap.t);
    align_list.push_back(std::abs(snap.rho));
    excess_list.push_back(snap.excess);
    result.snaps.push_back(std::move(snap));
  };
  snapshot(s);

  SimDeriv k1, k2, k3, k4;
  Eigen::VectorXd wtmp(d);
  std::vector<double> gtmp(r_max + 1);
  const double dt = params.dt;
  for (long step = 0; step < steps; ++step) {
    sim_rhs(s.w, s.g, truth, params, noise, k1);
    wtmp = s.w + 0.5 * dt * k1.dw;
    for (int r = 0; r <= r_max; ++r) gtmp[r] = s.g[r] + 0.5 * dt * k1.dg[r];
    sim_rhs(wtmp, gtmp, truth, params, noise, k2);
    wtmp = s.w + 0.5 * dt * k2.dw;
    for (int r = 0; r <= r_max; ++r) gtmp[r] = s.g[r] + 0.5 * dt * k2.dg[r];
    sim_rhs(wtmp, gtmp, truth, params, noise, k3);
    wtmp = s.w + dt * k3.dw;
    for (int r = 0; r <= r_max; ++r) gtmp[r] = s.g[r] + dt * k3.dg[r];
    sim_rhs(wtmp, gtmp, truth, params, noise, k4);
    s.w += dt / 6.0 * (k1.dw + 2.0 * k2.dw + 2.0 * k3.dw + k4.dw);
    for (int r = 0; r <= r_max; ++r) {
      s.g[r] += dt / 6.0 * (k1.dg[r] + 2.0 * k2.dg[r] + 2.0 * k3.dg[r] + k4.dg[r]);
    }
    s.w.normalize();
    s.t = (step + 1) * dt;

    double gnorm = 0.0;
    for (double x : s.g) gnorm += x * x;
    if (std::sqrt(gnorm) > params.divergence_factor * gstar_norm) {
      throw InvariantError("sim run: link coefficients diverged");
    }
    if ((step + 1) % params.record_every == 0 || step + 1 == steps) snapshot(s);
  }

  result.phases = extract_phases(t_list, align_list, excess_list, params.T0);
  result.final_state = s;
  return result;
}

}  // namespace

SimState sim_population_step(const SimState& state, const SimTruth& truth,
                             const SimFlowParams& params, double dt) {
  const int r_max = static_cast<int>(truth.gstar.size()) - 1;
  SimDeriv k1, k2, k3, k4;
  SimState s = state;
  Eigen::VectorXd wtmp;
  std::vector<double> gtmp(r_max + 1);
  sim_rhs(s.w, s.g, truth, params, nullptr, k1);
  wtmp = s.w + 0.5 * dt * k1.dw;
  for (int r = 0; r <= r_max; ++r) gtmp[r] = s.g[r] + 0.5 * dt * k1.dg[r];
  sim_rhs(wtmp, gtmp, truth, params, nullptr, k2);
  wtmp = s.w + 0.5 * dt * k2.dw;
  for (int r = 0; r <= r_max; ++r) gtmp[r] = s.g[r] + 0.5 * dt * k2.dg[r];
  sim_rhs(wtmp, gtmp, truth, params, nullptr, k3);
  wtmp = s.w + dt * k3.dw;
  for (int r = 0; r <= r_max; ++r) gtmp[r] = s.g[r] + dt * k3.dg[r];
  sim_rhs(wtmp, gtmp, truth, params, nullptr, k4);
  s.w += dt / 6.0 * (k1.dw + 2.0 * k2.dw + 2.0 * k3.dw + k4.dw);
  for (int r = 0; r <= r_max; ++r) {
    s.g[r] += dt / 6.0 * (k1.dg[r] + 2.0 * k2.dg[r] + 2.0 * k3.dg[r] + k4.dg[r]);
  }
  s.w.normalize();
  s.t += dt;
  return s;
}

SimRunResult sim_population_run(const SimTruth& truth,
                                const SimFlowParams& params,
                                std::uint64_t seed) {
  return run_sim(truth, params, nullptr, seed);
}

SimNoise sim_noise_terms(const Eigen::VectorXd& w,
                         const Eigen::VectorXd& wstar,
                         std::span<const double> g, const NoiseField& noise) {
  const int d = static_cast<int>(w.size());
  const int r_max = static_cast<int>(g.size()) - 1;
  SimNoise out;
  out.e.assign(r_max + 1, 0.0);
  out.E = Eigen::VectorXd::Zero(d);
  if (noise.zero) return out;
  if (noise.dim != d) throw DomainError("sim_noise_terms: dimension mismatch");
  if (noise.degree_cap < r_max) {
    throw DomainError("sim_noise_terms: noise degree cap below r_max");
  }

  Eigen::VectorXd V = Eigen::VectorXd::Zero(d);
  std::vector<int> nz;
  nz.reserve(8);
  for (int r = 0; r <= r_max; ++r) {
    const double log_r_fact = log_factorial(r);
    std::size_t idx = 0;
    Eigen::VectorXd shell_grad = Eigen::VectorXd::Zero(d);
    double shell_e = 0.0;
    for_each_of_degree(d, r, [&](const MultiIndex& m) {
      const double eps = noise.shells[r][idx++];
      if (eps == 0.0) return;
      double logb = log_r_fact;
      nz.clear();
      for (int j = 0; j < d; ++j) {
        if (m[j] > 0) {
          logb -= log_factorial(m[j]);
          nz.push_back(j);
        }
      }
      const double c = std::exp(0.5 * logb);
      // w^m and its gradient, robust to zero coordinates.
      int zero_count = 0, zero_at = -1;
      double prod_nonzero = 1.0;
      for (int j : nz) {
        if (w(j) == 0.0) {
          ++zero_count;
          zero_at = j;
        } else {
          prod_nonzero *= pow_int(w(j), m[j]);
        }
      }
      if (zero_count == 0) {
        shell_e += c * prod_nonzero * eps;
        for (int j : nz) {
          shell_grad(j) += c * eps * m[j] * prod_nonzero / w(j);
        }
      } else if (zero_count == 1 && m[zero_at] == 1) {
        shell_grad(zero_at) += c * eps * prod_nonzero;
      }
    });
    out.e[r] = shell_e;
    if (r >= 1) V += g[r] * shell_grad;
  }
  out.E = V - w.dot(V) * w;
  out.tau = out.E.dot(wstar);
  return out;
}

SimRunResult sim_sequence_run(const SimTruth& truth, const NoiseField& noise,
                              const SimFlowParams& params, std::uint64_t seed) {
  return run_sim(truth, params, &noise, seed);
}

// ---- Stiefel geometry --------------------------------------------------------

Eigen::MatrixXd stiefel_project(const Eigen::MatrixXd& W,
                                const Eigen::MatrixXd& Z) {
  const Eigen::MatrixXd wtz = W.transpose() * Z;
  return Z - W * (0.5 * (wtz + wtz.transpose()));
}

Eigen::MatrixXd random_stiefel(int d, int p, Rng& rng) {
  Eigen::MatrixXd A(d, p);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < p; ++j) A(i, j) = rng.normal();
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(A);
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(d, p);
  const Eigen::MatrixXd R = qr.matrixQR().topRows(p).triangularView<Eigen::Upper>();
  for (int j = 0; j < p; ++j) {
    if (R(j, j) < 0.0) Q.col(j) = -Q.col(j);
  }
  return Q;
}

Eigen::VectorXd random_unit_vector(int d, Rng& rng) {
  Eigen::VectorXd v(d);
  for (int i = 0; i < d; ++i) v(i) = rng.normal();
  v.normalize();
  return v;
}

// ---- Multi-index -------------------------------------------------------------

namespace {

double mim_weight(double gamma, int full_degree) {
  return std::exp(-gamma * full_degree);
}

// phi_r evaluated on squared singular values s.
double phi_from_s(const RotInvCoeffs& table, int r,
                  const std::vector<double>& s) {
  if (r == 0) return 1.0;
  double acc = 0.0;
  for (const auto& [rr, v] : table.nu[r]) {
    double pw = 1.0;
    for (int j = 0; j < table.p; ++j) pw *= pow_int(s[j], rr[j]);
    acc += v * v * pw;
  }
  return acc;
}

// A_i = 4 sum_r h_r h*_r sum_{|rr|=r} rr_i nu^2 s^rr.
void mim_alignment_drive(const RotInvCoeffs& table,
                         const std::vector<double>& h,
                         const std::vector<double>& hstar,
                         const std::vector<double>& s, std::vector<double>& A) {
  const int p = table.p;
  A.assign(p, 0.0);
  const int r_max = static_cast<int>(hstar.size()) - 1;
  for (int r = 1; r <= r_max; ++r) {
    const double hh = h[r] * hstar[r];
    if (hh == 0.0) continue;
    for (const auto& [rr, v] : table.nu[r]) {
      double pw = v * v;
      for (int j = 0; j < p; ++j) pw *= pow_int(s[j], rr[j]);
      if (pw == 0.0) continue;
      for (int i = 0; i < p; ++i) {
        if (rr[i] > 0) A[i] += 4.0 * hh * rr[i] * pw;
      }
    }
  }
}

struct MimReducedDeriv {
  std::vector<double> dh, ds;
};

void mim_reduced_rhs(const std::vector<double>& h, const std::vector<double>& s,
                     const MimTruth& truth, const MimFlowParams& params,
                     const RotInvCoeffs& table, MimReducedDeriv& out) {
  const int r_max = static_cast<int>(truth.hstar.size()) - 1;
  out.dh.assign(r_max + 1, 0.0);
  for (int r = 0; r <= r_max; ++r) {
    const double mu = mim_weight(params.gamma, 2 * r);
    out.dh[r] = mu * (phi_from_s(table, r, s) * truth.hstar[r] - h[r]);
  }
  std::vector<double> A;
  mim_alignment_drive(table, h, truth.hstar, s, A);
  out.ds.assign(table.p, 0.0);
  for (int i = 0; i < table.p; ++i) out.ds[i] = (1.0 - s[i]) * A[i];
}

// Link-coefficient derivative series d g / d u_j in the p-dimensional frame.
HermiteSeries link_deriv_series(std::span<const double> h,
                                const RotInvCoeffs& table, int j) {
  HermiteSeries out;
  out.dim = table.p;
  const int r_max = static_cast<int>(h.size()) - 1;
  out.max_degree = std::max(0, 2 * r_max - 1);
  for (int r = 1; r <= r_max; ++r) {
    if (h[r] == 0.0) continue;
    for (const auto& [rr, v] : table.nu[r]) {
      if (rr[j] == 0) continue;
      MultiIndex m(rr);
      for (int& e : m) e *= 2;
      m[j] -= 1;
      out.add(m, h[r] * v * std::sqrt(2.0 * rr[j]));
    }
  }
  out.prune();
  return out;
}

// Dense per-degree coefficient table over ambient shells (indexed by
// shell_rank); the workhorse representation of pushforwards on the noisy
// integration path.
struct DenseByDegree {
  std::vector<std::vector<double>> values;  // values[deg], possibly empty
};

DenseByDegree dense_pushforward(
    const std::vector<std::pair<MultiIndex, double>>& link_terms, int d,
    const Eigen::MatrixXd& R, int max_deg) {
  DenseByDegree out;
  out.values.resize(max_deg + 1);
  std::vector<std::vector<const std::pair<MultiIndex, double>*>> by_degree(
      max_deg + 1);
  for (const auto& term : link_terms) {
    by_degree[degree(term.first)].push_back(&term);
  }
  for (int deg = 0; deg <= max_deg; ++deg) {
    if (by_degree[deg].empty()) continue;
    auto& dst = out.values[deg];
    dst.resize(shell_size(d, deg));
    std::size_t rank = 0;
    for_each_of_degree_fast(d, deg, [&](const MultiIndex& n) {
      double acc = 0.0;
      for (const auto* term : by_degree[deg]) {
        acc += term->second * frame_change_coeff(term->first, n, R);
      }
      dst[rank++] = acc;
    });
  }
  return out;
}

std::vector<std::pair<MultiIndex, double>> series_terms(
    const HermiteSeries& s) {
  std::vector<std::pair<MultiIndex, double>> terms(s.coeffs.begin(),
                                                   s.coeffs.end());
  return terms;
}

struct MimNoiseCore {
  std::vector<double> e;  // e_r
  Eigen::MatrixXd N;      // sum_n eps_n grad_W <P_W g, H_n>
};

MimNoiseCore mim_noise_core(const Eigen::MatrixXd& W,
                            std::span<const double> h,
                            const NoiseField& noise,
                            const RotInvCoeffs& table) {
  const int d = static_cast<int>(W.rows());
  const int p = static_cast<int>(W.cols());
  const int r_max = table.r_max;
  MimNoiseCore core;
  core.e.assign(r_max + 1, 0.0);
  core.N = Eigen::MatrixXd::Zero(d, p);
  if (noise.zero) return core;
  const Eigen::MatrixXd R = W.transpose();

  for (int r = 0; r <= r_max; ++r) {
    const DenseByDegree push = dense_pushforward(
        series_terms(rot_inv_basis_series(table, r)), d, R, 2 * r);
    const auto& coeffs = push.values[2 * r];
    const auto& eps = noise.shells[2 * r];
    double acc = 0.0;
    for (std::size_t k = 0; k < coeffs.size(); ++k) acc += coeffs[k] * eps[k];
    core.e[r] = acc;
  }

  for (int j = 0; j < p; ++j) {
    const DenseByDegree Gj =
        dense_pushforward(series_terms(link_deriv_series(h, table, j)), d, R,
                          std::max(0, 2 * r_max - 1));
    for (int deg = 0; deg < static_cast<int>(Gj.values.size()); ++deg) {
      const auto& coeffs = Gj.values[deg];
      if (coeffs.empty()) continue;
      const auto& eps_up = noise.shells[deg + 1];
      const auto* eps_down = deg > 0 ? &noise.shells[deg - 1] : nullptr;
      std::size_t rank = 0;
      MultiIndex scratch;
      for_each_of_degree_fast(d, deg, [&](const MultiIndex& n) {
        const double c = coeffs[rank++];
        if (c == 0.0) return;
        scratch = n;
        for (int i = 0; i < d; ++i) {
          // x_i H_n = sqrt(n_i + 1) H_{n+e_i} + sqrt(n_i) H_{n-e_i}
          scratch[i] += 1;
          double contrib =
              std::sqrt(double(n[i] + 1)) * eps_up[shell_rank(scratch)];
          scratch[i] -= 2;
          if (n[i] > 0) {
            contrib += std::sqrt(double(n[i])) * (*eps_down)[shell_rank(scratch)];
          }
          scratch[i] += 1;
          core.N(i, j) += c * contrib;
        }
      });
    }
  }
  return core;
}

// Sparse pushforward retained for the public surface (tests, covariance
// oracles); thin wrapper over the dense builder.
HermiteSeries pushforward_series(const HermiteSeries& link,
                                 const Eigen::MatrixXd& W) {
  const int d = static_cast<int>(W.rows());
  const DenseByDegree dense =
      dense_pushforward(series_terms(link), d, W.transpose(), link.max_degree);
  HermiteSeries out;
  out.dim = d;
  out.max_degree = link.max_degree;
  for (int deg = 0; deg < static_cast<int>(dense.values.size()); ++deg) {
    if (dense.values[deg].empty()) continue;
    std::size_t rank = 0;
    for_each_of_degree_fast(d, deg, [&](const MultiIndex& n) {
      const double c = dense.values[deg][rank++];
      if (std::abs(c) > 1e-14) out.add(n, c);
    });
  }
  return out;
}

// Cross Gram B_{jk} = <P_W d_j g, P_{W*} d_k g*> via the frame change at Psi.
Eigen::MatrixXd link_cross_gram(std::span<const double> h,
                                std::span<const double> hstar,
                                const Eigen::MatrixXd& Psi,
                                const RotInvCoeffs& table) {
  const int p = table.p;
  std::vector<HermiteSeries> dg(p), dgstar(p);
  for (int j = 0; j < p; ++j) {
    dg[j] = link_deriv_series(h, table, j);
    dgstar[j] = link_deriv_series(hstar, table, j);
  }
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(p, p);
  for (int j = 0; j < p; ++j) {
    for (int k = 0; k < p; ++k) {
      double acc = 0.0;
      for (const auto& [m, cm] : dg[j].coeffs) {
        for (const auto& [n, cn] : dgstar[k].coeffs) {
          if (degree(m) != degree(n)) continue;
          acc += cm * cn * frame_change_coeff(m, n, Psi);
        }
      }
      B(j, k) = acc;
    }
  }
  return B;
}

std::vector<double> singular_values(const Eigen::MatrixXd& Psi) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Psi);
  std::vector<double> s(svd.singularValues().data(),
                        svd.singularValues().data() + svd.singularValues().size());
  return s;
}

Eigen::MatrixXd polar_retract(const Eigen::MatrixXd& W) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(W.transpose() * W);
  const Eigen::VectorXd ev = es.eigenvalues();
  Eigen::VectorXd inv_sqrt(ev.size());
  for (int i = 0; i < ev.size(); ++i) {
    if (!(ev(i) > 0.0)) throw InvariantError("polar_retract: rank collapse");
    inv_sqrt(i) = 1.0 / std::sqrt(ev(i));
  }
  return W * es.eigenvectors() * inv_sqrt.asDiagonal() *
         es.eigenvectors().transpose();
}

double resolve_K(const MimFlowParams& params, int d, int p) {
  if (params.K > 0.0) return params.K;
  return std::max(1.0, std::ceil(2.0 * d * std::log(std::max(2, p))));
}

}  // namespace

MimReducedState mim_population_step(const MimReducedState& state,
                                    const MimTruth& truth,
                                    const MimFlowParams& params,
                                    const RotInvCoeffs& table, double dt) {
  MimReducedDeriv k1, k2, k3, k4;
  const int r_max = static_cast<int>(truth.hstar.size()) - 1;
  const int p = table.p;
  MimReducedState s = state;
  std::vector<double> htmp(r_max + 1), stmp(p);
  auto blend = [&](const MimReducedDeriv& k, double f) {
    for (int r = 0; r <= r_max; ++r) htmp[r] = s.h[r] + f * dt * k.dh[r];
    for (int i = 0; i < p; ++i) stmp[i] = s.s[i] + f * dt * k.ds[i];
  };
  mim_reduced_rhs(s.h, s.s, truth, params, table, k1);
  blend(k1, 0.5);
  mim_reduced_rhs(htmp, stmp, truth, params, table, k2);
  blend(k2, 0.5);
  mim_reduced_rhs(htmp, stmp, truth, params, table, k3);
  blend(k3, 1.0);
  mim_reduced_rhs(htmp, stmp, truth, params, table, k4);
  for (int r = 0; r <= r_max; ++r) {
    s.h[r] += dt / 6.0 * (k1.dh[r] + 2 * k2.dh[r] + 2 * k3.dh[r] + k4.dh[r]);
  }
  for (int i = 0; i < p; ++i) {
    s.s[i] += dt / 6.0 * (k1.ds[i] + 2 * k2.ds[i] + 2 * k3.ds[i] + k4.ds[i]);
    if (s.s[i] < -1e-8 || s.s[i] > 1.0 + 1e-8) {
      throw InvariantError("mim reduced step: sigma^2 left [0,1]");
    }
    s.s[i] = std::clamp(s.s[i], 0.0, 1.0);
  }
  s.t += dt;
  return s;
}

std::vector<HermiteSeries> pushforward_rotinv_basis(const Eigen::MatrixXd& W,
                                                    const RotInvCoeffs& table) {
  std::vector<HermiteSeries> out;
  out.reserve(table.r_max + 1);
  for (int r = 0; r <= table.r_max; ++r) {
    out.push_back(pushforward_series(rot_inv_basis_series(table, r), W));
  }
  return out;
}

namespace {

MimRunResult run_mim(const MimTruth& truth, const MimFlowParams& params,
                     const RotInvCoeffs& table, const NoiseField* noise,
                     std::uint64_t seed) {
  const int d = static_cast<int>(truth.Wstar.rows());
  const int p = static_cast<int>(truth.Wstar.cols());
  const int r_max = static_cast<int>(truth.hstar.size()) - 1;
  if (table.p != p || table.r_max < r_max) {
    throw DomainError("mim run: nu table mismatch");
  }
  const bool noisy = noise != nullptr && !noise->zero;
  const bool full_w = noise != nullptr;  // zero-noise full-W run when zeros()
  if (noisy || full_w) {
    if (p > 3 || d > 12 || r_max > 3) {
      throw MemoryGuardError(
          "mim run: exact path noise requires p <= 3, d <= 12, r_max <= 3");
    }
    if (noise->degree_cap < 2 * r_max) {
      throw DomainError("mim run: noise degree cap below 2 r_max");
    }
  }
  const double K = resolve_K(params, d, p);

  MimRunResult result;
  Rng rng = Rng::stream(seed, 6);
  Eigen::MatrixXd W = random_stiefel(d, p, rng);
  std::vector<double> h(r_max + 1, 0.0);

  const double hstar_norm = [&] {
    double v = 0.0;
    for (double x : truth.hstar) v += x * x;
    return std::sqrt(v);
  }();

  MultiIndexView opt_view;
  opt_view.sigma.assign(p, 1.0);
  opt_view.gamma = params.gamma;
  opt_view.r_max = r_max;
  opt_view.hstar = truth.hstar;
  opt_view.nu = &table;
  const double estar_opt = fem_optimal(opt_view, params.eps2).e_star;

  std::vector<double> t_list, align_list, excess_list;
  auto snapshot = [&](double t, const std::vector<double>& sigma,
                      const std::vector<double>& hh) {
    MimSnapshot snap;
    snap.t = t;
    snap.sigma = sigma;
    snap.h = hh;
    snap.phi.resize(r_max + 1);
    std::vector<double> s2(p);
    for (int i = 0; i < p; ++i) s2[i] = sigma[i] * sigma[i];
    for (int r = 0; r <= r_max; ++r) snap.phi[r] = phi_from_s(table, r, s2);
    snap.omega = softmin_omega(s2, K);
    MultiIndexView view = opt_view;
    view.sigma = sigma;
    snap.fem = fem_optimal(view, params.eps2);
    snap.excess = snap.fem.e_star - estar_opt;
    t_list.push_back(t);
    align_list.push_back(*std::min_element(s2.begin(), s2.end()));
    excess_list.push_back(snap.excess);
    result.snaps.push_back(std::move(snap));
  };

  const long steps = std::lround(std::ceil(params.t_end / params.dt - 1e-12));
  const double dt = params.dt;

  if (!full_w) {
    // Reduced path: sigma^2 from the random Stiefel draw, then the closed
    // (h, sigma) system.
    MimReducedState s;
    s.t = 0.0;
    s.h = h;
    const Eigen::MatrixXd Psi0 = W.transpose() * truth.Wstar;
    const std::vector<double> sv = singular_values(Psi0);
    s.s.resize(p);
    for (int i = 0; i < p; ++i) s.s[i] = sv[i] * sv[i];

    auto emit = [&](const MimReducedState& st) {
      std::vector<double> sigma(p);
      for (int i = 0; i < p; ++i) sigma[i] = std::sqrt(std::max(0.0, st.s[i]));
      snapshot(st.t, sigma, st.h);
    };
    emit(s);
    for (long step = 0; step < steps; ++step) {
      s = mim_population_step(s, truth, params, table, dt);
      double hnorm = 0.0;
      for (double x : s.h) hnorm += x * x;
      if (std::sqrt(hnorm) > params.divergence_factor * hstar_norm) {
        throw InvariantError("mim run: link coefficients diverged");
      }
      if ((step + 1) % params.record_every == 0 || step + 1 == steps) emit(s);
    }
    result.final_reduced = s;
  } else {
    // Full Stiefel integration; the noise drift is assembled once per step
    // and held over the four stages.
    auto emit = [&](double t, const Eigen::MatrixXd& Wc,
                    const std::vector<double>& hc) {
      const std::vector<double> sv = singular_values(Wc.transpose() * truth.Wstar);
      snapshot(t, sv, hc);
    };
    emit(0.0, W, h);

    std::vector<double> htmp(r_max + 1);
    Eigen::MatrixXd Wtmp;
    struct Deriv {
      Eigen::MatrixXd dW;
      std::vector<double> dh;
    } k1, k2, k3, k4;
    auto rhs = [&](const Eigen::MatrixXd& Wraw, const std::vector<double>& hc,
                   const MimNoiseCore& frozen, Deriv& out) {
      // Frame-change identities require orthonormal columns; retract the
      // stage state before evaluating the field.
      const Eigen::MatrixXd Wc = polar_retract(Wraw);
      const Eigen::MatrixXd Psi = Wc.transpose() * truth.Wstar;
      const std::vector<double> sv = singular_values(Psi);
      std::vector<double> s2(p);
      for (int i = 0; i < p; ++i) s2[i] = sv[i] * sv[i];
      out.dh.assign(r_max + 1, 0.0);
      for (int r = 0; r <= r_max; ++r) {
        const double mu = mim_weight(params.gamma, 2 * r);
        out.dh[r] =
            mu * (phi_from_s(table, r, s2) * truth.hstar[r] - hc[r] +
                  frozen.e[r]);
      }
      const Eigen::MatrixXd B = link_cross_gram(hc, truth.hstar, Psi, table);
      out.dW = stiefel_project(Wc, truth.Wstar * B.transpose() + frozen.N);
    };

    for (long step = 0; step < steps; ++step) {
      const MimNoiseCore frozen =
          noisy ? mim_noise_core(W, h, *noise, table) : MimNoiseCore{
                      std::vector<double>(r_max + 1, 0.0),
                      Eigen::MatrixXd::Zero(d, p)};
      rhs(W, h, frozen, k1);
      Wtmp = W + 0.5 * dt * k1.dW;
      for (int r = 0; r <= r_max; ++r) htmp[r] = h[r] + 0.5 * dt * k1.dh[r];
      rhs(Wtmp, htmp, frozen, k2);
      Wtmp = W + 0.5 * dt * k2.dW;
      for (int r = 0; r <= r_max; ++r) htmp[r] = h[r] + 0.5 * dt * k2.dh[r];
      rhs(Wtmp, htmp, frozen, k3);
      Wtmp = W + dt * k3.dW;
      for (int r = 0; r <= r_max; ++r) htmp[r] = h[r] + dt * k3.dh[r];
      rhs(Wtmp, htmp, frozen, k4);
      W += dt / 6.0 * (k1.dW + 2.0 * k2.dW + 2.0 * k3.dW + k4.dW);
      for (int r = 0; r <= r_max; ++r) {
        h[r] += dt / 6.0 * (k1.dh[r] + 2 * k2.dh[r] + 2 * k3.dh[r] + k4.dh[r]);
      }
      W = polar_retract(W);
      double hnorm = 0.0;
      for (double x : h) hnorm += x * x;
      if (std::sqrt(hnorm) > params.divergence_factor * hstar_norm) {
        throw InvariantError("mim run: link coefficients diverged");
      }
      if ((step + 1) % params.record_every == 0 || step + 1 == steps) {
        emit((step + 1) * dt, W, h);
      }
    }
    result.final_W = W;
    result.final_reduced.t = steps * dt;
    result.final_reduced.h = h;
    const std::vector<double> sv = singular_values(W.transpose() * truth.Wstar);
    result.final_reduced.s.resize(p);
    for (int i = 0; i < p; ++i) result.final_reduced.s[i] = sv[i] * sv[i];
  }

  result.phases = extract_phases(t_list, align_list, excess_list, params.T0);
  return result;
}

}  // namespace

MimRunResult mim_population_run(const MimTruth& truth,
                                const MimFlowParams& params,
                                const RotInvCoeffs& table,
                                std::uint64_t seed) {
  return run_mim(truth, params, table, nullptr, seed);
}

MimRunResult mim_sequence_run(const MimTruth& truth, const NoiseField& noise,
                              const MimFlowParams& params,
                              const RotInvCoeffs& table, std::uint64_t seed) {
  return run_mim(truth, params, table, &noise, seed);
}

MimNoise mim_noise_terms(const Eigen::MatrixXd& W, std::span<const double> h,
                         const Eigen::MatrixXd& Wstar, const NoiseField& noise,
                         double K, const RotInvCoeffs& table) {
  const int d = static_cast<int>(W.rows());
  const int p = static_cast<int>(W.cols());
  const int r_max = static_cast<int>(h.size()) - 1;
  MimNoise out;
  out.e.assign(r_max + 1, 0.0);
  if (noise.zero) return out;
  if (noise.degree_cap < 2 * r_max) {
    throw DomainError("mim_noise_terms: noise degree cap below 2 r_max");
  }

  const std::vector<HermiteSeries> push = pushforward_rotinv_basis(W, table);
  for (int r = 0; r <= r_max; ++r) out.e[r] = noise_dot(push[r], noise);

  // Ambient series of P_W g and its coordinate derivatives.
  HermiteSeries F;
  F.dim = d;
  F.max_degree = 2 * r_max;
  for (int r = 0; r <= r_max; ++r) {
    if (h[r] == 0.0) continue;
    for (const auto& [m, c] : push[r].coeffs) F.add(m, h[r] * c);
  }
  F.prune();
  std::vector<HermiteSeries> dF(d);
  for (int i = 0; i < d; ++i) dF[i] = series_derivative(F, i);

  const Eigen::MatrixXd Psi = W.transpose() * Wstar;
  const Eigen::MatrixXd M = Psi.transpose() * Psi;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
  Eigen::VectorXd expl(p);
  for (int i = 0; i < p; ++i) expl(i) = std::exp(-K * es.eigenvalues()(i));
  const Eigen::MatrixXd expM =
      es.eigenvectors() * expl.asDiagonal() * es.eigenvectors().transpose();
  const double trace_exp = expl.sum();

  const Eigen::MatrixXd Pperp =
      Eigen::MatrixXd::Identity(d, d) - W * W.transpose();
  const Eigen::MatrixXd A_xi = Wstar * Wstar.transpose() * Pperp;
  const Eigen::MatrixXd A_zeta = Wstar * expM * Wstar.transpose() * Pperp;

  auto contract = [&](const Eigen::MatrixXd& A) {
    HermiteSeries s;
    s.dim = d;
    s.max_degree = 2 * r_max;
    for (int i = 0; i < d; ++i) {
      if (dF[i].coeffs.empty()) continue;
      for (int j = 0; j < d; ++j) {
        if (std::abs(A(i, j)) < 1e-15) continue;
        const HermiteSeries mul = series_mul_coordinate(dF[i], j, 2 * r_max);
        for (const auto& [m, c] : mul.coeffs) s.add(m, A(i, j) * c);
      }
    }
    s.prune();
    return noise_dot(s, noise);
  };
  out.xi = contract(A_xi);
  out.zeta = contract(A_zeta) / trace_exp;
  return out;
}

// ---- SVD dynamics check --------------------------------------------------------

SvdRateReport svd_rate_check(
    const std::function<Eigen::MatrixXd(double)>& path, double t0, double t1,
    int samples, double fd_step) {
  if (samples < 2 || !(t1 > t0)) throw DomainError("svd_rate_check: bad window");
  SvdRateReport rep;
  for (int k = 0; k < samples; ++k) {
    const double t = t0 + (t1 - t0) * k / (samples - 1);
    const Eigen::MatrixXd Xm = path(t - fd_step);
    const Eigen::MatrixXd Xp = path(t + fd_step);
    const Eigen::MatrixXd X = path(t);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(
        X, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd sv = svd.singularValues();
    double min_gap = 1e300;
    for (int i = 0; i + 1 < sv.size(); ++i) {
      min_gap = std::min(min_gap, sv(i) - sv(i + 1));
    }
    if (sv.size() > 1 && min_gap < 1e-6) {
      rep.degenerate_warning = true;
      continue;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd_m(Xm), svd_p(Xp);
    const Eigen::VectorXd fd =
        (svd_p.singularValues() - svd_m.singularValues()) / (2.0 * fd_step);
    const Eigen::MatrixXd Xdot = (Xp - Xm) / (2.0 * fd_step);
    const Eigen::VectorXd pred =
        (svd.matrixU().transpose() * Xdot * svd.matrixV()).diagonal();
    rep.max_deviation =
        std::max(rep.max_deviation, (fd - pred).cwiseAbs().maxCoeff());
    ++rep.checked;
  }
  return rep;
}

}  // namespace afl
