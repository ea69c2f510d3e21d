#include "afl/fem.hpp"

#include <algorithm>
#include <cmath>

#include "afl/errors.hpp"

namespace afl {

namespace {

FemRecord fem_at_diagonal(const DiagonalView& v, double delta, double eps2) {
  if (v.weights.size() != v.truth.size()) {
    throw DomainError("fem_at: weights/truth size mismatch");
  }
  FemRecord rec;
  rec.delta = delta;
  for (std::size_t j = 0; j < v.weights.size(); ++j) {
    if (v.weights[j] >= delta) {
      rec.e_v += eps2;
    } else {
      rec.e_b += v.truth[j] * v.truth[j];
    }
  }
  rec.total = rec.e_proj + rec.e_v + rec.e_b;
  rec.delta_star = delta;
  rec.e_star = rec.total;
  return rec;
}

FemRecord fem_at_sim(const SingleIndexView& v, double delta, double eps2) {
  FemRecord rec;
  rec.delta = delta;
  const double rho2 = v.rho * v.rho;
  double rho2r = 1.0;
  for (int r = 0; r <= v.r_max; ++r) {
    const double g2 = v.gstar[r] * v.gstar[r];
    rec.e_proj += (1.0 - rho2r) * g2;
    const double lam = std::exp(-v.gamma * r);
    if (lam >= delta) {
      rec.e_v += eps2;
    } else {
      rec.e_b += rho2r * g2;
    }
    rho2r *= rho2;
  }
  rec.total = rec.e_proj + rec.e_v + rec.e_b;
  rec.delta_star = delta;
  rec.e_star = rec.total;
  return rec;
}

// Inner bias sum over the full-degree shell: sum_{|m|=deg} sigma^{2m} (g*_m)^2.
// For rotation-invariant truth only even shells carry mass and the sum is
// h_r^2 * phi_r evaluated at sigma^2.
double mim_shell_bias(const MultiIndexView& v, int deg) {
  if (v.nu != nullptr && !v.hstar.empty()) {
    if (deg % 2 != 0) return 0.0;
    std::vector<double> s2(v.sigma.size());
    for (std::size_t i = 0; i < v.sigma.size(); ++i) {
      s2[i] = v.sigma[i] * v.sigma[i];
    }
    const int r = deg / 2;
    return v.hstar[r] * v.hstar[r] * phi_r_direct(s2, *v.nu, r);
  }
  double s = 0.0;
  for (const auto& [m, g] : v.ambient) {
    if (degree(m) != deg) continue;
    double pw = 1.0;
    for (std::size_t j = 0; j < v.sigma.size(); ++j) {
      for (int t = 0; t < 2 * m[j]; ++t) pw *= v.sigma[j];
    }
    s += pw * g * g;
  }
  return s;
}

double mim_shell_mass(const MultiIndexView& v, int deg) {
  if (v.nu != nullptr && !v.hstar.empty()) {
    if (deg % 2 != 0) return 0.0;
    return v.hstar[deg / 2] * v.hstar[deg / 2];
  }
  double s = 0.0;
  for (const auto& [m, g] : v.ambient) {
    if (degree(m) == deg) s += g * g;
  }
  return s;
}

int mim_full_degree_cap(const MultiIndexView& v) {
  int cap = 2 * v.r_max;
  for (const auto& [m, g] : v.ambient) cap = std::max(cap, degree(m));
  return cap;
}

FemRecord fem_at_mim(const MultiIndexView& v, double delta, double eps2) {
  FemRecord rec;
  rec.delta = delta;
  const int p = static_cast<int>(v.sigma.size());
  const int cap = mim_full_degree_cap(v);
  for (int deg = 0; deg <= cap; ++deg) {
    rec.e_proj += mim_shell_mass(v, deg) - mim_shell_bias(v, deg);
    const double mu = std::exp(-v.gamma * deg);
    if (mu >= delta) {
      rec.e_v += eps2 * binom(p + deg - 1, deg);
    } else {
      rec.e_b += mim_shell_bias(v, deg);
    }
  }
  rec.total = rec.e_proj + rec.e_v + rec.e_b;
  rec.delta_star = delta;
  rec.e_star = rec.total;
  return rec;
}

std::vector<double> candidate_levels(const FeatureWeightView& view) {
  std::vector<double> levels;
  if (const auto* d = std::get_if<DiagonalView>(&view)) {
    levels = d->weights;
  } else if (const auto* s = std::get_if<SingleIndexView>(&view)) {
    for (int r = 0; r <= s->r_max; ++r) levels.push_back(std::exp(-s->gamma * r));
  } else if (const auto* m = std::get_if<MultiIndexView>(&view)) {
    for (int deg = 0; deg <= mim_full_degree_cap(*m); ++deg) {
      levels.push_back(std::exp(-m->gamma * deg));
    }
  }
  std::sort(levels.begin(), levels.end(), std::greater<double>());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  return levels;
}

}  // namespace

FemRecord fem_at(const FeatureWeightView& view, double delta, double eps2) {
  if (!(delta >= 0.0)) throw DomainError("fem_at: delta must be >= 0");
  if (!(eps2 > 0.0)) throw DomainError("fem_at: eps2 must be > 0");
  if (const auto* d = std::get_if<DiagonalView>(&view)) {
    return fem_at_diagonal(*d, delta, eps2);
  }
  if (const auto* s = std::get_if<SingleIndexView>(&view)) {
    return fem_at_sim(*s, delta, eps2);
  }
  return fem_at_mim(std::get<MultiIndexView>(view), delta, eps2);
}

namespace {

// Single sorted sweep over the candidate levels {weights} + {+inf}; ties are
// broken toward the larger level by strict improvement.
FemRecord fem_optimal_diagonal(const DiagonalView& v, double eps2) {
  if (v.weights.size() != v.truth.size()) {
    throw DomainError("fem_optimal: weights/truth size mismatch");
  }
  const std::size_t J = v.weights.size();
  std::vector<std::size_t> order(J);
  for (std::size_t j = 0; j < J; ++j) order[j] = j;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return v.weights[a] > v.weights[b];
  });
  double total_bias = 0.0;
  for (double f : v.truth) total_bias += f * f;

  FemRecord best;
  best.delta = kDeltaInf;
  best.e_b = total_bias;
  best.total = total_bias;
  best.delta_star = kDeltaInf;
  best.e_star = total_bias;

  double active_bias = 0.0;
  std::size_t k = 0;
  while (k < J) {
    const double level = v.weights[order[k]];
    // Absorb the whole tie group: delta = level activates all of it.
    while (k < J && v.weights[order[k]] == level) {
      const double f = v.truth[order[k]];
      active_bias += f * f;
      ++k;
    }
    const double e_v = eps2 * static_cast<double>(k);
    const double e_b = total_bias - active_bias;
    const double total = e_v + e_b;
    if (total < best.total) {
      best.delta = level;
      best.e_v = e_v;
      best.e_b = e_b;
      best.total = total;
      best.delta_star = level;
      best.e_star = total;
    }
  }
  return best;
}

}  // namespace

FemRecord fem_optimal(const FeatureWeightView& view, double eps2) {
  if (!(eps2 > 0.0)) throw DomainError("fem_optimal: eps2 must be > 0");
  if (const auto* d = std::get_if<DiagonalView>(&view)) {
    return fem_optimal_diagonal(*d, eps2);
  }
  // Candidates: +inf (nothing active) then the weight values in decreasing
  // order. Strict improvement keeps the largest minimizer.
  FemRecord best = fem_at(view, kDeltaInf, eps2);
  best.delta_star = kDeltaInf;
  best.e_star = best.total;
  for (double lv : candidate_levels(view)) {
    FemRecord rec = fem_at(view, lv, eps2);
    if (rec.total < best.total) {
      best = rec;
      best.delta_star = lv;
      best.e_star = rec.total;
    }
  }
  return best;
}

std::vector<std::pair<int, int>> up_crossing_detect(const DiagonalView& before,
                                                    const DiagonalView& after,
                                                    double eps2) {
  if (before.weights.size() != after.weights.size()) {
    throw DomainError("up_crossing_detect: index sets differ");
  }
  const FemRecord opt = fem_optimal(before, eps2);
  const double dstar = opt.delta_star;
  std::vector<int> signal, noise;
  for (std::size_t j = 0; j < before.weights.size(); ++j) {
    const double f2 = before.truth[j] * before.truth[j];
    if (before.weights[j] >= dstar && f2 >= eps2) {
      signal.push_back(static_cast<int>(j));
    } else if (before.weights[j] < dstar && f2 < eps2) {
      noise.push_back(static_cast<int>(j));
    }
  }
  std::vector<std::pair<int, int>> crossings;
  for (int j : signal) {
    for (int k : noise) {
      if (after.weights[j] <= after.weights[k]) crossings.emplace_back(j, k);
    }
  }
  return crossings;
}

std::pair<double, double> sim_proj_bound_check(double rho, double alpha,
                                               std::span<const double> gstar) {
  if (!(std::abs(rho) < 1.0)) {
    throw DomainError("sim_proj_bound_check: |rho| must be < 1");
  }
  double lhs = 0.0;
  double rho2r = 1.0;
  const double rho2 = rho * rho;
  for (std::size_t r = 0; r < gstar.size(); ++r) {
    lhs += (1.0 - rho2r) * gstar[r] * gstar[r];
    rho2r *= rho2;
  }
  const double gap = 1.0 - std::abs(rho);
  double rhs;
  if (alpha > 1.0) {
    rhs = gap;
  } else if (alpha == 1.0) {
    rhs = gap * std::log(1.0 / gap);
  } else {
    rhs = std::pow(gap, alpha);
  }
  return {lhs, rhs};
}

GdFilterReport gd_filter_report(const DiagonalView& view, double t,
                                double eps2) {
  if (!(t > 0.0)) throw DomainError("gd_filter_report: t must be > 0");
  GdFilterReport rep;
  for (std::size_t j = 0; j < view.weights.size(); ++j) {
    const double a = 1.0 - std::exp(-view.weights[j] * t);
    rep.e_v_gd += eps2 * a * a;
    rep.e_b_gd += (1.0 - a) * (1.0 - a) * view.truth[j] * view.truth[j];
  }
  const FemRecord rec = fem_at(view, 1.0 / t, eps2);
  rep.e_v_fem = rec.e_v;
  rep.e_b_fem = rec.e_b;
  auto sym_ratio = [](double a, double b) {
    if (a == 0.0 && b == 0.0) return 1.0;
    if (a == 0.0 || b == 0.0) return std::numeric_limits<double>::infinity();
    return std::max(a / b, b / a);
  };
  rep.ratio_v = sym_ratio(rep.e_v_gd, rep.e_v_fem);
  rep.ratio_b = sym_ratio(rep.e_b_gd, rep.e_b_fem);
  return rep;
}

}  // namespace afl
