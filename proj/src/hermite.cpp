#include "afl/hermite.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "afl/errors.hpp"

namespace afl {

namespace {
constexpr double kPruneTol = 1e-14;
}

double hermite_eval_1d(int m, double x) {
  if (m < 0) throw DomainError("hermite_eval_1d: negative degree");
  double hprev = 1.0;  // H_0
  if (m == 0) return hprev;
  double h = x;  // H_1
  for (int n = 1; n < m; ++n) {
    const double hnext =
        (x * h - std::sqrt(static_cast<double>(n)) * hprev) /
        std::sqrt(static_cast<double>(n + 1));
    hprev = h;
    h = hnext;
  }
  return h;
}

void HermiteSeries::add(const MultiIndex& m, double c) {
  if (c == 0.0) return;
  auto [it, inserted] = coeffs.emplace(m, c);
  if (!inserted) it->second += c;
}

double HermiteSeries::at(const MultiIndex& m) const {
  auto it = coeffs.find(m);
  return it == coeffs.end() ? 0.0 : it->second;
}

void HermiteSeries::prune() {
  for (auto it = coeffs.begin(); it != coeffs.end();) {
    if (std::abs(it->second) < kPruneTol) {
      it = coeffs.erase(it);
    } else {
      ++it;
    }
  }
}

double HermiteSeries::norm() const {
  double s = 0.0;
  for (const auto& [m, c] : coeffs) s += c * c;
  return std::sqrt(s);
}

double series_eval(const HermiteSeries& f, std::span<const double> x) {
  if (static_cast<int>(x.size()) != f.dim) {
    throw DomainError("series_eval: point dimension mismatch");
  }
  // Per-coordinate Hermite values up to the truncation degree.
  std::vector<std::vector<double>> h(f.dim);
  for (int j = 0; j < f.dim; ++j) {
    h[j].resize(f.max_degree + 1);
    h[j][0] = 1.0;
    if (f.max_degree >= 1) h[j][1] = x[j];
    for (int n = 1; n < f.max_degree; ++n) {
      h[j][n + 1] = (x[j] * h[j][n] - std::sqrt(double(n)) * h[j][n - 1]) /
                    std::sqrt(double(n + 1));
    }
  }
  double s = 0.0;
  for (const auto& [m, c] : f.coeffs) {
    double p = c;
    for (int j = 0; j < f.dim; ++j) {
      if (m[j] > 0) p *= h[j][m[j]];
    }
    s += p;
  }
  return s;
}

HermiteSeries series_derivative(const HermiteSeries& f, int i) {
  if (i < 0 || i >= f.dim) throw DomainError("series_derivative: bad coordinate");
  HermiteSeries g;
  g.dim = f.dim;
  g.max_degree = std::max(0, f.max_degree - 1);
  for (const auto& [m, c] : f.coeffs) {
    if (m[i] == 0) continue;
    MultiIndex k = m;
    k[i] -= 1;
    g.add(k, std::sqrt(static_cast<double>(m[i])) * c);
  }
  g.prune();
  return g;
}

HermiteSeries series_mul_coordinate(const HermiteSeries& f, int i,
                                    int degree_budget) {
  if (i < 0 || i >= f.dim) {
    throw DomainError("series_mul_coordinate: bad coordinate");
  }
  if (degree_budget < 0) degree_budget = f.max_degree + 1;
  HermiteSeries g;
  g.dim = f.dim;
  g.max_degree = degree_budget;
  // x H_n = sqrt(n+1) H_{n+1} + sqrt(n) H_{n-1}, applied in coordinate i.
  for (const auto& [m, c] : f.coeffs) {
    if (degree(m) + 1 > degree_budget) {
      throw CapExceededError(
          "series_mul_coordinate: result degree exceeds budget");
    }
    MultiIndex up = m;
    up[i] += 1;
    g.add(up, std::sqrt(static_cast<double>(m[i] + 1)) * c);
    if (m[i] > 0) {
      MultiIndex down = m;
      down[i] -= 1;
      g.add(down, std::sqrt(static_cast<double>(m[i])) * c);
    }
  }
  g.prune();
  return g;
}

namespace {

constexpr int kMaxFrameCols = 64;

// Exact double factorials for the table factors (degrees stay <= 16, so all
// products are exactly representable).
const std::array<double, 32>& factorial_table() {
  static const auto table = [] {
    std::array<double, 32> t{};
    t[0] = 1.0;
    for (int i = 1; i < 32; ++i) t[i] = t[i - 1] * i;
    return t;
  }();
  return table;
}

// Recursive transportation-table enumeration for frame_change_coeff.
// Rows are filled one at a time with compositions of m[row] over the columns
// with nonzero budget; the final row is forced by the remaining column sums.
struct TableEnum {
  const MultiIndex& m;
  const MultiIndex& n;
  const Eigen::MatrixXd& R;
  long cap;
  long visited = 0;
  int active[kMaxFrameCols];  // columns with n_j > 0
  int n_active = 0;
  int colrem[kMaxFrameCols];  // remaining budget per active slot
  double acc = 0.0;           // sum over tables of sqrt(m!n!) R^Y / Y!
  double sqrt_mn_fact;

  void run() {
    for (std::size_t c = 0; c < n.size(); ++c) {
      if (n[c] > 0) {
        active[n_active] = static_cast<int>(c);
        colrem[n_active] = n[c];
        ++n_active;
      }
    }
    if (n_active == 0) return;
    fill_row(0, 1.0, 1.0);
  }

  // row: current row; prod: product of R^{Y_ij}; facprod: product of Y_ij!.
  void fill_row(int row, double prod, double facprod) {
    const int p = static_cast<int>(m.size());
    const auto& fact = factorial_table();
    if (row == p - 1) {
      // The last row is forced to the remaining column sums.
      int placed = 0;
      double cellprod = 1.0;
      for (int t = 0; t < n_active; ++t) {
        const int v = colrem[t];
        placed += v;
        for (int k = 0; k < v; ++k) cellprod *= R(row, active[t]);
        facprod *= fact[v];
      }
      if (placed != m[row]) return;
      if (++visited > cap) {
        throw CapExceededError("frame_change_coeff: table cap exceeded");
      }
      acc += prod * cellprod * sqrt_mn_fact / facprod;
      return;
    }
    fill_cell(row, 0, m[row], prod, facprod);
  }

  void fill_cell(int row, int t, int rem, double prod, double facprod) {
    const auto& fact = factorial_table();
    if (t == n_active - 1) {
      // Last active column absorbs the remainder of this row.
      if (rem > colrem[t]) return;
      double cellprod = 1.0;
      for (int k = 0; k < rem; ++k) cellprod *= R(row, active[t]);
      if (rem > 0 && cellprod == 0.0) return;
      colrem[t] -= rem;
      fill_row(row + 1, prod * cellprod, facprod * fact[rem]);
      colrem[t] += rem;
      return;
    }
    const int vmax = std::min(rem, colrem[t]);
    double cellprod = 1.0;
    for (int v = 0; v <= vmax; ++v) {
      if (v == 0 || cellprod != 0.0) {
        colrem[t] -= v;
        fill_cell(row, t + 1, rem - v, prod * cellprod, facprod * fact[v]);
        colrem[t] += v;
      }
      cellprod *= R(row, active[t]);
    }
  }
};

}  // namespace

double frame_change_coeff(const MultiIndex& m, const MultiIndex& n,
                          const Eigen::MatrixXd& R, long table_cap) {
  if (R.rows() != static_cast<int>(m.size()) ||
      R.cols() != static_cast<int>(n.size())) {
    throw DomainError("frame_change_coeff: R shape does not match (m, n)");
  }
  if (n.size() > kMaxFrameCols) {
    throw DomainError("frame_change_coeff: too many columns");
  }
  if (degree(m) != degree(n)) return 0.0;
  if (degree(m) == 0) return 1.0;
  double mnfact = 1.0;
  for (int v : m) mnfact *= factorial_table()[v];
  for (int v : n) mnfact *= factorial_table()[v];
  TableEnum e{m, n, R, table_cap};
  e.sqrt_mn_fact = std::sqrt(mnfact);
  e.run();
  return e.acc;
}

HermiteSeries gauss_convolve(const HermiteSeries& f,
                             std::span<const double> sigma_diag) {
  if (static_cast<int>(sigma_diag.size()) != f.dim) {
    throw DomainError("gauss_convolve: sigma dimension mismatch");
  }
  for (double s : sigma_diag) {
    if (!(s >= -1e-12 && s <= 1.0 + 1e-12)) {
      throw DomainError("gauss_convolve: sigma entries must lie in [0,1]");
    }
  }
  HermiteSeries g;
  g.dim = f.dim;
  g.max_degree = f.max_degree;
  for (const auto& [m, c] : f.coeffs) {
    double scale = 1.0;
    for (int j = 0; j < f.dim; ++j) {
      const double s = std::clamp(sigma_diag[j], 0.0, 1.0);
      for (int t = 0; t < m[j]; ++t) scale *= s;  // 0^0 = 1 by skipping
    }
    g.add(m, scale * c);
  }
  g.prune();
  return g;
}

RotInvCoeffs rot_inv_coeffs(int p, int r_max) {
  if (p < 1 || r_max < 0) throw DomainError("rot_inv_coeffs: bad arguments");
  RotInvCoeffs table;
  table.p = p;
  table.r_max = r_max;
  table.nu.resize(r_max + 1);
  table.C.resize(r_max + 1);
  for (int r = 0; r <= r_max; ++r) {
    // C_r = 4^r (p/2)_r / r! computed in log space.
    double log_c = r * std::log(4.0) - log_factorial(r);
    for (int k = 0; k < r; ++k) log_c += std::log(p / 2.0 + k);
    table.C[r] = std::exp(log_c);
    for_each_of_degree(p, r, [&](const MultiIndex& rr) {
      // nu_r = C_r^{-1/2} binom(2r, r)^{1/2} with the multi-binomial.
      double log_b = 0.0;
      for (int v : rr) log_b += log_factorial(2 * v) - 2.0 * log_factorial(v);
      table.nu[r].emplace_back(rr, std::exp(0.5 * (log_b - log_c)));
    });
    double sum_sq = 0.0;
    for (const auto& [rr, v] : table.nu[r]) sum_sq += v * v;
    if (std::abs(sum_sq - 1.0) > 1e-10) {
      throw InvariantError("rot_inv_coeffs: nu normalization failed");
    }
  }
  return table;
}

HermiteSeries rot_inv_basis_series(const RotInvCoeffs& table, int r) {
  if (r < 0 || r > table.r_max) {
    throw DomainError("rot_inv_basis_series: r out of range");
  }
  HermiteSeries g;
  g.dim = table.p;
  g.max_degree = 2 * r;
  for (const auto& [rr, v] : table.nu[r]) {
    MultiIndex m(rr);
    for (int& e : m) e *= 2;
    g.add(m, v);
  }
  return g;
}

double phi_r_direct(std::span<const double> sigma, const RotInvCoeffs& table,
                    int r) {
  if (r == 0) return 1.0;
  if (r > table.r_max) throw DomainError("phi_r_direct: r out of range");
  if (static_cast<int>(sigma.size()) != table.p) {
    throw DomainError("phi_r_direct: sigma size mismatch");
  }
  double s = 0.0;
  for (const auto& [rr, v] : table.nu[r]) {
    double pw = 1.0;
    for (int j = 0; j < table.p; ++j) {
      for (int t = 0; t < 2 * rr[j]; ++t) pw *= sigma[j];
    }
    s += v * v * pw;
  }
  return s;
}

double phi_r_series(const Eigen::MatrixXd& Psi, const RotInvCoeffs& table,
                    int r) {
  if (r == 0) return 1.0;
  if (r > table.r_max) throw DomainError("phi_r_series: r out of range");
  const Eigen::MatrixXd M = Psi.transpose() * Psi;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
  const Eigen::VectorXd lam = es.eigenvalues();
  // Convolve the p scalar series (1 - 4 lam_i z)^{-1/2} up to order r.
  std::vector<double> acc(r + 1, 0.0);
  acc[0] = 1.0;
  std::vector<double> factor(r + 1), next(r + 1);
  for (int i = 0; i < lam.size(); ++i) {
    double lp = 1.0;
    for (int k = 0; k <= r; ++k) {
      factor[k] = binom(2 * k, k) * lp;
      lp *= std::max(lam(i), 0.0);
    }
    std::fill(next.begin(), next.end(), 0.0);
    for (int a = 0; a <= r; ++a) {
      if (acc[a] == 0.0) continue;
      for (int b = 0; a + b <= r; ++b) next[a + b] += acc[a] * factor[b];
    }
    acc.swap(next);
  }
  return acc[r] / table.C[r];
}

double phi_r(const Eigen::MatrixXd& Psi, const RotInvCoeffs& table, int r) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Psi);
  const Eigen::VectorXd sv = svd.singularValues();
  if (sv.size() > 0 && sv(0) > 1.0 + 1e-9) {
    throw DomainError("phi_r: operator norm of Psi exceeds 1");
  }
  std::vector<double> sigma(table.p, 0.0);
  for (int i = 0; i < std::min<int>(table.p, sv.size()); ++i) {
    sigma[i] = std::min(sv(i), 1.0);
  }
  return phi_r_direct(sigma, table, r);
}

double softmin_omega(std::span<const double> x, double K) {
  if (K <= 0.0) throw DomainError("softmin_omega: K must be positive");
  if (x.empty()) throw DomainError("softmin_omega: empty input");
  double xmin = x[0];
  for (double v : x) xmin = std::min(xmin, v);
  double s = 0.0;
  for (double v : x) s += std::exp(-K * (v - xmin));
  return xmin - std::log(s) / K;
}

}  // namespace afl
