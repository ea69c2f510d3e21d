#include "afl/seq_model.hpp"

#include <cmath>
#include <unordered_set>

#include "afl/errors.hpp"
#include "afl/rng.hpp"

namespace afl {

namespace {

std::vector<double> make_sparse_mean(const SparseMeanSpec& s) {
  if (s.d < 1 || s.sstar < 1 || s.sstar > s.d) {
    throw DomainError("make_truth: SparseMean needs 1 <= sstar <= d");
  }
  if (static_cast<int>(s.magnitudes.size()) != s.sstar) {
    throw DomainError("make_truth: SparseMean needs sstar magnitudes");
  }
  for (double m : s.magnitudes) {
    if (std::abs(m) < s.floor_c) {
      throw DomainError("make_truth: SparseMean magnitude below signal floor");
    }
  }
  std::vector<double> w(s.d, 0.0);
  const int stride = s.d / s.sstar;
  for (int k = 0; k < s.sstar; ++k) w[k * stride] = s.magnitudes[k];
  return w;
}

std::vector<double> make_misaligned(const MisalignedPQSpec& s) {
  if (!(s.q > 1.0)) throw DomainError("make_truth: MisalignedPQ needs q > 1");
  if (!(s.p > 0.0)) throw DomainError("make_truth: MisalignedPQ needs p > 0");
  if (s.ell_max < 1) throw DomainError("make_truth: MisalignedPQ needs ell_max >= 1");
  std::unordered_set<long> used;
  std::vector<std::pair<long, double>> entries;
  long max_index = 0;
  for (int ell = 1; ell <= s.ell_max; ++ell) {
    long j = std::llround(std::pow(static_cast<double>(ell), s.q));
    if (j < 1) j = 1;
    while (used.count(j)) ++j;
    used.insert(j);
    entries.emplace_back(j, s.c * std::pow(double(ell), -(s.p + 1.0) / 2.0));
    max_index = std::max(max_index, j);
  }
  std::vector<double> f(static_cast<std::size_t>(max_index) + 1, 0.0);
  for (const auto& [j, v] : entries) f[static_cast<std::size_t>(j)] = v;
  return f;
}

void validate_sim(const SingleIndexSpec& s) {
  if (s.d < 1 || s.wstar.size() != s.d) {
    throw DomainError("make_truth: SingleIndex dimension mismatch");
  }
  if (std::abs(s.wstar.norm() - 1.0) > 1e-9) {
    throw DomainError("make_truth: SingleIndex direction must be unit norm");
  }
  if (information_exponent(s.gstar) < 0) {
    throw DomainError("make_truth: SingleIndex link has no nonzero g*_r, r >= 1");
  }
}

void validate_mim(const MultiIndexSpec& s) {
  if (s.d < 1 || s.p < 1 || s.Wstar.rows() != s.d || s.Wstar.cols() != s.p) {
    throw DomainError("make_truth: MultiIndex dimension mismatch");
  }
  const Eigen::MatrixXd g =
      s.Wstar.transpose() * s.Wstar - Eigen::MatrixXd::Identity(s.p, s.p);
  if (g.cwiseAbs().maxCoeff() > 1e-10) {
    throw DomainError("make_truth: W* columns must be orthonormal");
  }
  bool any = false;
  for (std::size_t r = 1; r < s.hstar.size(); ++r) {
    if (s.hstar[r] != 0.0) any = true;
  }
  if (!any) throw DomainError("make_truth: MultiIndex link has no signal shell");
}

}  // namespace

std::vector<double> make_truth(const TruthSpec& spec) {
  if (const auto* s = std::get_if<SparseMeanSpec>(&spec)) {
    return make_sparse_mean(*s);
  }
  if (const auto* s = std::get_if<MisalignedPQSpec>(&spec)) {
    return make_misaligned(*s);
  }
  if (const auto* s = std::get_if<SingleIndexSpec>(&spec)) {
    validate_sim(*s);
    return {};
  }
  validate_mim(std::get<MultiIndexSpec>(spec));
  return {};
}

int information_exponent(std::span<const double> gstar) {
  for (std::size_t r = 1; r < gstar.size(); ++r) {
    if (gstar[r] != 0.0) return static_cast<int>(r);
  }
  return -1;
}

HermiteSeries sim_ambient_series(const SingleIndexSpec& spec) {
  validate_sim(spec);
  const int r_max = static_cast<int>(spec.gstar.size()) - 1;
  HermiteSeries f;
  f.dim = spec.d;
  f.max_degree = r_max;
  for (int r = 0; r <= r_max; ++r) {
    if (spec.gstar[r] == 0.0) continue;
    for_each_of_degree(spec.d, r, [&](const MultiIndex& m) {
      double logb = log_factorial(r);
      double wpow = 1.0;
      for (int j = 0; j < spec.d; ++j) {
        logb -= log_factorial(m[j]);
        for (int t = 0; t < m[j]; ++t) wpow *= spec.wstar(j);
      }
      if (wpow == 0.0) return;
      f.add(m, std::exp(0.5 * logb) * wpow * spec.gstar[r]);
    });
  }
  f.prune();
  return f;
}

HermiteSeries mim_ambient_series(const MultiIndexSpec& spec,
                                 const RotInvCoeffs& table) {
  validate_mim(spec);
  const int r_max = static_cast<int>(spec.hstar.size()) - 1;
  if (table.p != spec.p || table.r_max < r_max) {
    throw DomainError("mim_ambient_series: nu table mismatch");
  }
  const Eigen::MatrixXd R = spec.Wstar.transpose();  // p x d
  HermiteSeries f;
  f.dim = spec.d;
  f.max_degree = 2 * r_max;
  for (int r = 0; r <= r_max; ++r) {
    if (spec.hstar[r] == 0.0) continue;
    for_each_of_degree(spec.d, 2 * r, [&](const MultiIndex& n) {
      double c = 0.0;
      for (const auto& [rr, v] : table.nu[r]) {
        MultiIndex m(rr);
        for (int& e : m) e *= 2;
        c += v * frame_change_coeff(m, n, R);
      }
      f.add(n, spec.hstar[r] * c);
    });
  }
  f.prune();
  return f;
}

SequenceObservation observe_sequence(const std::vector<double>& truth, long n,
                                     double sigma, std::size_t index_cap,
                                     std::uint64_t seed) {
  if (n < 1) throw DomainError("observe_sequence: n must be >= 1");
  if (index_cap > 10000000) {
    throw MemoryGuardError("observe_sequence: index count exceeds 1e7");
  }
  SequenceObservation obs;
  obs.n = n;
  obs.seed = seed;
  obs.noise_var = sigma * sigma / static_cast<double>(n);
  obs.truth.assign(index_cap, 0.0);
  for (std::size_t j = 0; j < std::min(index_cap, truth.size()); ++j) {
    obs.truth[j] = truth[j];
  }
  obs.z.resize(index_cap);
  Rng rng = Rng::stream(seed, 1);
  const double sd = std::sqrt(obs.noise_var);
  for (std::size_t j = 0; j < index_cap; ++j) {
    obs.z[j] = obs.truth[j] + sd * rng.normal();
  }
  return obs;
}

double cosine_basis_eval(int j, double x) {
  if (j == 0) return 1.0;
  return std::sqrt(2.0) * std::cos(3.14159265358979323846 * j * x);
}

SampleDataset sample_dataset(const TruthSpec& spec, long n, double sigma,
                             std::uint64_t seed) {
  if (n < 1) throw DomainError("sample_dataset: n must be >= 1");
  SampleDataset ds;
  ds.sigma = sigma;
  ds.seed = seed;
  Rng rng = Rng::stream(seed, 2);
  if (const auto* s = std::get_if<SparseMeanSpec>(&spec)) {
    const std::vector<double> w = make_truth(spec);
    ds.basis = "gaussian-identity";
    ds.x.resize(n, s->d);
    ds.y.resize(n);
    for (long i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int j = 0; j < s->d; ++j) {
        ds.x(i, j) = rng.normal();
        dot += ds.x(i, j) * w[j];
      }
      ds.y(i) = dot + sigma * rng.normal();
    }
    return ds;
  }
  if (std::get_if<MisalignedPQSpec>(&spec) != nullptr) {
    const std::vector<double> f = make_truth(spec);
    ds.basis = "cosine01";
    ds.x.resize(n, 1);
    ds.y.resize(n);
    for (long i = 0; i < n; ++i) {
      const double xi = rng.uniform();
      ds.x(i, 0) = xi;
      double val = 0.0;
      for (std::size_t j = 0; j < f.size(); ++j) {
        if (f[j] != 0.0) val += f[j] * cosine_basis_eval(static_cast<int>(j), xi);
      }
      ds.y(i) = val + sigma * rng.normal();
    }
    return ds;
  }
  throw DomainError("sample_dataset: unsupported truth variant (index models)");
}

std::vector<double> seq_loss_gradient_parts(
    std::span<const double> pop_rhs, std::span<const double> eps,
    const std::vector<std::vector<double>>& jac) {
  if (eps.size() != jac.size()) {
    throw DomainError("seq_loss_gradient_parts: index sets differ");
  }
  std::vector<double> rhs(pop_rhs.begin(), pop_rhs.end());
  for (std::size_t j = 0; j < jac.size(); ++j) {
    if (jac[j].size() != rhs.size()) {
      throw DomainError("seq_loss_gradient_parts: jacobian row size mismatch");
    }
    for (std::size_t k = 0; k < rhs.size(); ++k) rhs[k] += eps[j] * jac[j][k];
  }
  return rhs;
}

}  // namespace afl
