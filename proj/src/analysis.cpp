#include "afl/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "afl/errors.hpp"
#include "afl/rng.hpp"

namespace afl {

namespace {

double cross_mean(const std::vector<Eigen::VectorXd>& a,
                  const std::vector<Eigen::VectorXd>& b) {
  double s = 0.0;
  for (const auto& u : a) {
    for (const auto& v : b) s += (u - v).norm();
  }
  return s / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

double within_mean(const std::vector<Eigen::VectorXd>& a, bool unbiased) {
  const std::size_t m = a.size();
  if (m < 2) {
    if (unbiased) throw DomainError("energy_distance: unbiased form needs >= 2 points");
    return 0.0;
  }
  double s = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) s += (a[i] - a[j]).norm();
  }
  s *= 2.0;
  const double denom = unbiased ? double(m) * double(m - 1) : double(m) * double(m);
  return s / denom;
}

}  // namespace

double energy_distance(const std::vector<Eigen::VectorXd>& a,
                       const std::vector<Eigen::VectorXd>& b, bool unbiased) {
  if (a.empty() || b.empty()) {
    throw DomainError("energy_distance: empty sample");
  }
  if (a[0].size() != b[0].size()) {
    throw DomainError("energy_distance: coefficient index sets differ");
  }
  const double d2 =
      2.0 * cross_mean(a, b) - within_mean(a, unbiased) - within_mean(b, unbiased);
  return std::sqrt(std::max(d2, 0.0));
}

double energy_distance_to_zero(const std::vector<Eigen::VectorXd>& a) {
  if (a.empty()) throw DomainError("energy_distance_to_zero: empty sample");
  double mean_norm = 0.0;
  for (const auto& u : a) mean_norm += u.norm();
  mean_norm /= static_cast<double>(a.size());
  const double d2 = 2.0 * mean_norm - within_mean(a, /*unbiased=*/false);
  return std::sqrt(std::max(d2, 0.0));
}

std::pair<double, double> bootstrap_band(std::span<const double> values, int B,
                                         double level, std::uint64_t seed) {
  if (values.size() < 10) {
    throw DomainError("bootstrap_band: needs at least 10 values");
  }
  if (B < 1 || !(level > 0.0 && level < 1.0)) {
    throw DomainError("bootstrap_band: bad parameters");
  }
  // Resampling from the sorted copy makes the band a function of the value
  // multiset only.
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  Rng rng = Rng::stream(seed, 3);
  std::vector<double> means(B);
  const std::size_t n = sorted.size();
  for (int b = 0; b < B; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += sorted[rng.below(n)];
    means[b] = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  auto pick = [&](double q) {
    const double pos = q * (B - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min<std::size_t>(lo + 1, B - 1);
    const double w = pos - static_cast<double>(lo);
    return (1.0 - w) * means[lo] + w * means[hi];
  };
  return {pick((1.0 - level) / 2.0), pick((1.0 + level) / 2.0)};
}

RateFit rate_fit(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 3) {
    throw DomainError("rate_fit: needs >= 3 matched points");
  }
  const std::size_t n = x.size();
  double last = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) {
      throw DomainError("rate_fit: x and y must be positive");
    }
    if (i > 0 && !(x[i] > last)) {
      throw DomainError("rate_fit: x must be strictly increasing");
    }
    last = x[i];
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lx = std::log(x[i]);
    const double ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double denom = n * sxx - sx * sx;
  RateFit fit;
  fit.slope = (n * sxy - sx * sy) / denom;
  fit.intercept = (sy - fit.slope * sx) / n;
  double ss_res = 0.0, ss_tot = 0.0;
  const double ym = sy / n;
  for (std::size_t i = 0; i < n; ++i) {
    const double ly = std::log(y[i]);
    const double pred = fit.intercept + fit.slope * std::log(x[i]);
    ss_res += (ly - pred) * (ly - pred);
    ss_tot += (ly - ym) * (ly - ym);
  }
  fit.r2 = ss_tot < 1e-30 ? 1.0 : 1.0 - ss_res / ss_tot;
  return fit;
}

double median(std::vector<double> v) {
  if (v.empty()) throw DomainError("median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace afl
