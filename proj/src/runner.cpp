#include "afl/runner.hpp"

#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "afl/errors.hpp"
#include "afl/quadrature.hpp"
#include "afl/rng.hpp"

namespace afl {

namespace {
namespace fs = std::filesystem;
using json = nlohmann::json;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

// ---- Worker pool --------------------------------------------------------------

int default_threads() {
  if (const char* env = std::getenv("AFL_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_for(int n_tasks, int threads,
                  const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n_tasks));
  if (threads == 1) {
    for (int i = 0; i < n_tasks; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n_tasks) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ---- KvConfig -------------------------------------------------------------------

KvConfig KvConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  KvConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      bool blank = true;
      for (char c : line) {
        if (!std::isspace(static_cast<unsigned char>(c))) blank = false;
      }
      if (blank) continue;
      throw ConfigError("config: malformed line " + std::to_string(line_no));
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config: empty key at line " + std::to_string(line_no));
    }
    cfg.values_[key] = value;
  }
  return cfg;
}

void KvConfig::set(const std::string& key, const std::string& value) {
  values_[key] = value;
}

bool KvConfig::has(const std::string& key) const {
  return values_.count(key) > 0;
}

std::string KvConfig::get_str(const std::string& key,
                              const std::string& def) const {
  const auto it = values_.find(key);
  const std::string v = it == values_.end() ? def : it->second;
  resolved_[key] = v;
  return v;
}

double KvConfig::get_double(const std::string& key, double def) const {
  const auto it = values_.find(key);
  if (it == values_.end()) {
    resolved_[key] = fmt(def);
    return def;
  }
  try {
    const double v = std::stod(it->second);
    resolved_[key] = fmt(v);
    return v;
  } catch (...) {
    throw ConfigError("config: bad numeric value for " + key);
  }
}

long KvConfig::get_long(const std::string& key, long def) const {
  const auto it = values_.find(key);
  if (it == values_.end()) {
    resolved_[key] = std::to_string(def);
    return def;
  }
  try {
    const long v = std::stol(it->second);
    resolved_[key] = std::to_string(v);
    return v;
  } catch (...) {
    throw ConfigError("config: bad integer value for " + key);
  }
}

int KvConfig::get_int(const std::string& key, int def) const {
  return static_cast<int>(get_long(key, def));
}

std::vector<double> KvConfig::get_list(const std::string& key,
                                       const std::vector<double>& def) const {
  const auto it = values_.find(key);
  std::vector<double> out;
  if (it == values_.end()) {
    out = def;
  } else {
    std::stringstream ss(it->second);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        out.push_back(std::stod(tok));
      } catch (...) {
        throw ConfigError("config: bad list value for " + key);
      }
    }
  }
  std::string ser;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (i) ser += ",";
    ser += fmt(out[i]);
  }
  resolved_[key] = ser;
  return out;
}

std::string KvConfig::serialize_resolved() const {
  std::string s;
  for (const auto& [k, v] : resolved_) {
    s += k;
    s += " = ";
    s += v;
    s += "\n";
  }
  return s;
}

std::uint64_t KvConfig::hash() const {
  const std::string s = serialize_resolved();
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

std::string version_string() { return "afl 1.0.0"; }

// ---- Per-seed experiment drivers -------------------------------------------------

namespace {

std::vector<double> default_magnitudes(int sstar) {
  std::vector<double> mags(sstar);
  for (int k = 0; k < sstar; ++k) mags[k] = (k % 2 == 0) ? 1.0 : -1.0;
  return mags;
}

// Tracks the FEM curve of a diagonal flow through the snapshot callback.
struct FemTracker {
  const std::vector<double>* truth;
  double eps2;
  std::vector<FemCurvePoint> curve;

  void operator()(const DiagState& s) {
    DiagonalView view;
    view.weights.resize(s.theta.size());
    for (std::size_t j = 0; j < s.theta.size(); ++j) {
      view.weights[j] = s.lambda_eff(j);
    }
    view.truth = *truth;
    FemCurvePoint pt;
    pt.t = s.t;
    pt.rec = fem_optimal(view, eps2);
    curve.push_back(pt);
  }
};

DiagSeedOutcome summarize_curve(std::vector<FemCurvePoint> curve, double eps2,
                                double max_drift) {
  DiagSeedOutcome out;
  out.curve = std::move(curve);
  out.initial_estar = out.curve.front().rec.e_star;
  out.final_estar = out.curve.back().rec.e_star;
  out.transitions = static_cast<int>(out.curve.size()) - 1;
  for (std::size_t k = 1; k < out.curve.size(); ++k) {
    if (out.curve[k].rec.e_star > out.curve[k - 1].rec.e_star + 2.0 * eps2) {
      ++out.violations;
    }
  }
  out.max_drift = max_drift;
  return out;
}

}  // namespace

DiagSeedOutcome run_diag_sparse_seed(const DiagSparseParams& p,
                                     std::uint64_t seed,
                                     std::vector<DiagState>* capture) {
  SparseMeanSpec spec;
  spec.d = p.d;
  spec.sstar = p.sstar;
  spec.magnitudes = p.magnitudes.empty() ? default_magnitudes(p.sstar)
                                         : p.magnitudes;
  const std::vector<double> truth = make_truth(TruthSpec{spec});
  const double alpha = p.alpha > 0.0 ? p.alpha : 1.0 / std::sqrt(double(p.d));
  const double eps2 = p.sigma * p.sigma / static_cast<double>(p.n);

  FlowConfig cfg;
  cfg.dt = p.dt;
  cfg.t_end = p.t_mult * std::log(static_cast<double>(p.n));
  cfg.record_every = p.record_every;
  cfg.conservation_tol = p.conservation_tol;
  cfg.keep_snapshots = capture != nullptr;

  FemTracker tracker{&truth, eps2, {}};
  DiagTrajectory traj;
  if (p.empirical) {
    const SampleDataset data =
        sample_dataset(TruthSpec{spec}, p.n, p.sigma, seed);
    traj = flow_sparse_empirical(data, cfg, alpha, nullptr, std::ref(tracker));
  } else {
    const SequenceObservation obs =
        observe_sequence(truth, p.n, p.sigma, truth.size(), seed);
    traj = flow_sparse_seq(obs, cfg, alpha, std::ref(tracker));
  }
  if (capture != nullptr) *capture = traj.snapshots;
  return summarize_curve(std::move(tracker.curve), eps2,
                         traj.max_conservation_drift);
}

int resolve_kernel_J(const DiagKernelParams& p) {
  MisalignedPQSpec spec{p.p, p.q, p.ell_max, 1.0};
  const std::vector<double> truth = make_truth(TruthSpec{spec});
  const int j_truth = static_cast<int>(truth.size());
  if (p.J > 0) {
    if (p.J < j_truth) {
      throw ConfigError("kernel flow: J must cover the truth support");
    }
    return p.J;
  }
  if (p.empirical) {
    const double formula =
        4.0 * std::pow(static_cast<double>(p.n) * std::log(double(p.n)),
                       p.q / (p.p + 1.0));
    return std::max<int>(j_truth, std::min(5000.0, formula));
  }
  const double active = 2.0 * std::pow(double(p.n), p.q / (p.p + p.q));
  return std::max<int>(j_truth, std::min(100000.0, active));
}

double kernel_t_end(const DiagKernelParams& p) {
  const double n = static_cast<double>(p.n);
  if (p.D == 0) return p.t_mult * std::sqrt(n / std::log(n));
  return p.t_mult * std::pow(n, double(p.D + 1) / (p.D + 2)) /
         std::sqrt(std::log(n));
}

double kernel_b0(const DiagKernelParams& p) {
  if (p.D == 0) return 0.0;
  if (p.b0 > 0.0) return p.b0;
  return std::pow(static_cast<double>(p.n), -1.0 / (2.0 * (p.D + 2)));
}

DiagSeedOutcome run_diag_kernel_seed(const DiagKernelParams& p,
                                     std::uint64_t seed,
                                     std::vector<DiagState>* capture) {
  MisalignedPQSpec spec{p.p, p.q, p.ell_max, 1.0};
  const std::vector<double> truth_raw = make_truth(TruthSpec{spec});
  const int J = resolve_kernel_J(p);
  std::vector<double> truth(J, 0.0);
  for (std::size_t j = 0; j < truth_raw.size() && j < truth.size(); ++j) {
    truth[j] = truth_raw[j];
  }
  std::vector<double> lambda(J);
  lambda[0] = 1.0;
  for (int j = 1; j < J; ++j) lambda[j] = std::pow(double(j), -p.gamma);

  const double eps2 = p.sigma * p.sigma / static_cast<double>(p.n);
  FlowConfig cfg;
  cfg.dt = p.dt;
  cfg.t_end = kernel_t_end(p);
  cfg.record_every = p.record_every;
  cfg.conservation_tol = p.conservation_tol;
  cfg.keep_snapshots = capture != nullptr;

  FemTracker tracker{&truth, eps2, {}};
  DiagTrajectory traj;
  if (p.empirical) {
    const SampleDataset data = sample_dataset(TruthSpec{spec}, p.n, p.sigma, seed);
    traj = flow_diag_empirical(data, cfg, lambda, p.D, kernel_b0(p), J,
                               std::ref(tracker));
  } else {
    const SequenceObservation obs =
        observe_sequence(truth, p.n, p.sigma, truth.size(), seed);
    traj = flow_diag_seq(obs, cfg, lambda, p.D, kernel_b0(p), std::ref(tracker));
  }
  if (capture != nullptr) *capture = traj.snapshots;
  return summarize_curve(std::move(tracker.curve), eps2,
                         traj.max_conservation_drift);
}

ComparePaths run_compare_pair(const DiagKernelParams& p, double t_max,
                              int grid_points, std::uint64_t seed) {
  if (grid_points < 2) throw DomainError("run_compare_pair: need >= 2 grid points");
  const double cell = t_max / grid_points;
  // Snapshots must land exactly on the grid, so pick a conservative step
  // and disable the data-dependent dt clamp below.
  const double dt_safe = std::min(p.dt, 0.012);
  const int steps_per_cell = std::max(1, (int)std::ceil(cell / dt_safe - 1e-12));

  DiagKernelParams ps = p;
  ps.dt = cell / steps_per_cell;
  ps.record_every = steps_per_cell;

  ComparePaths out;
  out.t_grid.resize(grid_points);
  for (int k = 0; k < grid_points; ++k) out.t_grid[k] = (k + 1) * cell;

  MisalignedPQSpec spec{ps.p, ps.q, ps.ell_max, 1.0};
  const std::vector<double> truth_raw = make_truth(TruthSpec{spec});
  const int J = resolve_kernel_J(ps);
  std::vector<double> truth(J, 0.0);
  for (std::size_t j = 0; j < truth_raw.size() && j < truth.size(); ++j) {
    truth[j] = truth_raw[j];
  }
  std::vector<double> lambda(J);
  lambda[0] = 1.0;
  for (int j = 1; j < J; ++j) lambda[j] = std::pow(double(j), -ps.gamma);

  FlowConfig cfg;
  cfg.dt = ps.dt;
  cfg.t_end = t_max;
  cfg.record_every = ps.record_every;
  cfg.conservation_tol = ps.conservation_tol;
  cfg.keep_snapshots = false;
  cfg.rate_cap = 0.0;  // exact dt; see above

  std::vector<bool> filled;
  auto collect = [&](std::vector<Eigen::VectorXd>& dest) {
    dest.assign(grid_points, Eigen::VectorXd::Zero(J));
    filled.assign(grid_points, false);
    return [&dest, &out, &filled, J](const DiagState& s) {
      for (int k = 0; k < static_cast<int>(out.t_grid.size()); ++k) {
        if (std::abs(s.t - out.t_grid[k]) < 1e-9) {
          Eigen::VectorXd f(J);
          for (int j = 0; j < J; ++j) f(j) = s.f(j);
          dest[k] = std::move(f);
          filled[k] = true;
        }
      }
    };
  };
  auto require_filled = [&](const char* which) {
    for (int k = 0; k < grid_points; ++k) {
      if (!filled[k]) {
        throw InvariantError(std::string("run_compare_pair: ") + which +
                             " snapshots missed the grid (dt halving?)");
      }
    }
  };

  const SequenceObservation obs =
      observe_sequence(truth, ps.n, ps.sigma, truth.size(), seed);
  flow_diag_seq(obs, cfg, lambda, ps.D, kernel_b0(ps), collect(out.seq));
  require_filled("sequence");

  const SampleDataset data = sample_dataset(TruthSpec{spec}, ps.n, ps.sigma, seed);
  flow_diag_empirical(data, cfg, lambda, ps.D, kernel_b0(ps), J, collect(out.gd));
  require_filled("empirical");
  return out;
}

std::vector<EnergyCell> energy_cells(const std::vector<ComparePaths>& runs,
                                     int bootstrap, double level,
                                     std::uint64_t seed) {
  if (runs.empty()) throw DomainError("energy_cells: no runs");
  const int T = static_cast<int>(runs[0].t_grid.size());
  const int m = static_cast<int>(runs.size());
  std::vector<EnergyCell> cells(T);
  Rng rng = Rng::stream(seed, 7);
  Eigen::MatrixXd cross(m, m), wa(m, m), wb(m, m);
  for (int tk = 0; tk < T; ++tk) {
    double mean_a = 0.0, mean_b = 0.0;
    for (int i = 0; i < m; ++i) {
      mean_a += runs[i].seq[tk].norm();
      mean_b += runs[i].gd[tk].norm();
      for (int j = 0; j < m; ++j) {
        cross(i, j) = (runs[i].seq[tk] - runs[j].gd[tk]).norm();
      }
      for (int j = i; j < m; ++j) {
        wa(i, j) = wa(j, i) = (runs[i].seq[tk] - runs[j].seq[tk]).norm();
        wb(i, j) = wb(j, i) = (runs[i].gd[tk] - runs[j].gd[tk]).norm();
      }
    }
    mean_a /= m;
    mean_b /= m;
    const double mm = double(m) * double(m);
    const double mo = double(m) * double(m - 1);
    EnergyCell& c = cells[tk];
    const double d2 = 2.0 * cross.sum() / mm -
                      (wa.sum() / mo) - (wb.sum() / mo);
    c.d_seq_gd = std::sqrt(std::max(0.0, d2));
    c.d_seq_zero = std::sqrt(std::max(0.0, 2.0 * mean_a - wa.sum() / mm));
    c.d_gd_zero = std::sqrt(std::max(0.0, 2.0 * mean_b - wb.sum() / mm));
    // Band = point estimate +- bootstrap standard deviation. The resampled
    // V-statistic is biased upward near zero (duplicate indices), so only
    // its spread is used, not its location.
    std::vector<double> boots(bootstrap);
    std::vector<int> ia(m), ib(m);
    for (int bsi = 0; bsi < bootstrap; ++bsi) {
      for (int i = 0; i < m; ++i) {
        ia[i] = static_cast<int>(rng.below(m));
        ib[i] = static_cast<int>(rng.below(m));
      }
      double sc = 0.0, sa = 0.0, sb = 0.0;
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < m; ++j) {
          sc += cross(ia[i], ib[j]);
          sa += wa(ia[i], ia[j]);
          sb += wb(ib[i], ib[j]);
        }
      }
      boots[bsi] = std::sqrt(std::max(0.0, (2.0 * sc - sa - sb) / mm));
    }
    double bm = 0.0, bv = 0.0;
    for (double b : boots) bm += b;
    bm /= bootstrap;
    for (double b : boots) bv += (b - bm) * (b - bm);
    const double sd = std::sqrt(bv / std::max(1, bootstrap - 1));
    // level is a coverage target; 0.68 corresponds to one standard deviation.
    const double zq = level <= 0.69 ? 1.0 : (level <= 0.96 ? 2.0 : 3.0);
    c.lo = std::max(0.0, c.d_seq_gd - zq * sd);
    c.hi = c.d_seq_gd + zq * sd;
  }
  return cells;
}

// ---- Artifact writers ---------------------------------------------------------

namespace {

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << content;
}

std::string fem_curve_csv(const std::vector<FemCurvePoint>& curve) {
  std::string s = "#schema=fem_curve_v1\nt,delta_star,e_star,e_proj,e_v,e_b\n";
  for (const auto& pt : curve) {
    s += fmt(pt.t) + "," + fmt(pt.rec.delta_star) + "," + fmt(pt.rec.e_star) +
         "," + fmt(pt.rec.e_proj) + "," + fmt(pt.rec.e_v) + "," +
         fmt(pt.rec.e_b) + "\n";
  }
  return s;
}

double interp_estar(const std::vector<FemCurvePoint>& curve, double t) {
  if (t <= curve.front().t) return curve.front().rec.e_star;
  if (t >= curve.back().t) return curve.back().rec.e_star;
  for (std::size_t k = 1; k < curve.size(); ++k) {
    if (curve[k].t >= t) {
      const double w =
          (t - curve[k - 1].t) / (curve[k].t - curve[k - 1].t);
      return (1.0 - w) * curve[k - 1].rec.e_star + w * curve[k].rec.e_star;
    }
  }
  return curve.back().rec.e_star;
}

std::string aggregate_csv(const std::vector<DiagSeedOutcome>& outcomes,
                          double t_end, int grid, std::uint64_t seed) {
  std::string s = "#schema=fem_aggregate_v1\nt,median_e_star,boot_lo,boot_hi\n";
  for (int k = 0; k <= grid; ++k) {
    const double t = t_end * k / grid;
    std::vector<double> vals;
    vals.reserve(outcomes.size());
    for (const auto& o : outcomes) vals.push_back(interp_estar(o.curve, t));
    const double med = median(vals);
    double lo = med, hi = med;
    if (vals.size() >= 10) {
      std::tie(lo, hi) = bootstrap_band(vals, 200, 0.68, seed + k);
    }
    s += fmt(t) + "," + fmt(med) + "," + fmt(lo) + "," + fmt(hi) + "\n";
  }
  return s;
}

std::string diag_traj_csv(const std::vector<DiagState>& snaps) {
  std::string s = "#schema=diag_traj_v1\nt,j,theta,beta,b,f,lambda_eff\n";
  for (const auto& st : snaps) {
    for (std::size_t j = 0; j < st.theta.size(); ++j) {
      s += fmt(st.t) + "," + std::to_string(j) + "," + fmt(st.theta[j]) + "," +
           fmt(st.beta[j]) + "," +
           fmt(st.depth > 0 ? st.b[j] : 1.0) + "," + fmt(st.f(j)) + "," +
           fmt(st.lambda_eff(j)) + "\n";
    }
  }
  return s;
}

std::string observation_csv(const SequenceObservation& obs) {
  std::string s = "#schema=sequence_observation_v1\nindex,z,truth\n";
  for (std::size_t j = 0; j < obs.z.size(); ++j) {
    s += std::to_string(j) + "," + fmt(obs.z[j]) + "," + fmt(obs.truth[j]) +
         "\n";
  }
  return s;
}

json phase_json(const PhaseReport& ph) {
  return json{{"T0", ph.T0},
              {"T1", ph.T1},
              {"T2", ph.T2},
              {"final_excess_fem", ph.final_excess}};
}

std::string sim_traj_csv(const SimRunResult& run) {
  const int r_max = static_cast<int>(run.snaps.front().g.size()) - 1;
  std::string s = "#schema=sim_traj_v1\nt,rho";
  for (int r = 0; r <= r_max; ++r) s += ",g_" + std::to_string(r);
  s += "\n";
  for (const auto& snap : run.snaps) {
    s += fmt(snap.t) + "," + fmt(snap.rho);
    for (double g : snap.g) s += "," + fmt(g);
    s += "\n";
  }
  return s;
}

std::string mim_traj_csv(const MimRunResult& run) {
  const auto& first = run.snaps.front();
  const int p = static_cast<int>(first.sigma.size());
  const int r_max = static_cast<int>(first.h.size()) - 1;
  std::string s = "#schema=mim_traj_v1\nt";
  for (int i = 1; i <= p; ++i) s += ",sigma_" + std::to_string(i);
  s += ",phi_1,omega";
  for (int r = 0; r <= r_max; ++r) s += ",h_" + std::to_string(r);
  s += "\n";
  for (const auto& snap : run.snaps) {
    s += fmt(snap.t);
    for (double v : snap.sigma) s += "," + fmt(v);
    s += "," + fmt(snap.phi.size() > 1 ? snap.phi[1] : 1.0) + "," +
         fmt(snap.omega);
    for (double v : snap.h) s += "," + fmt(v);
    s += "\n";
  }
  return s;
}

std::string index_fem_csv(const std::vector<double>& t,
                          const std::vector<double>& estar,
                          const std::vector<double>& excess) {
  std::string s = "#schema=index_fem_curve_v1\nt,e_star,excess\n";
  for (std::size_t k = 0; k < t.size(); ++k) {
    s += fmt(t[k]) + "," + fmt(estar[k]) + "," + fmt(excess[k]) + "\n";
  }
  return s;
}

}  // namespace

// ---- Experiments ----------------------------------------------------------------

namespace {

struct ExperimentContext {
  const KvConfig& cfg;
  fs::path out;
  int threads;
  RunOutcome* outcome;

  void artifact(const std::string& name, const std::string& content) const {
    write_file(out / name, content);
    outcome->artifacts.push_back(name);
  }
  void check(const std::string& name, bool pass, const std::string& detail) const {
    outcome->checks.push_back({name, pass, detail});
  }
};

DiagSparseParams sparse_params_from(const KvConfig& cfg, bool empirical) {
  DiagSparseParams p;
  p.d = cfg.get_int("d", 200);
  p.n = cfg.get_long("n", 200);
  p.sstar = cfg.get_int("sstar", 3);
  p.magnitudes = cfg.get_list("magnitudes", default_magnitudes(p.sstar));
  p.alpha = cfg.get_double("alpha", 0.0);
  p.sigma = cfg.get_double("sigma", 1.0);
  p.t_mult = cfg.get_double("t_mult", 5.0);
  p.dt = cfg.get_double("dt", 0.05);
  p.record_every = cfg.get_int("record_every", 10);
  p.conservation_tol = cfg.get_double("conservation_tol", 1e-6);
  p.empirical = empirical;
  return p;
}

DiagKernelParams kernel_params_from(const KvConfig& cfg, bool empirical,
                                    int default_D) {
  DiagKernelParams p;
  p.p = cfg.get_double("p", 1.0);
  p.q = cfg.get_double("q", 2.0);
  p.gamma = cfg.get_double("gamma", default_D > 0 ? 0.6 : 2.0);
  p.n = cfg.get_long("n", empirical ? 1024 : 4096);
  p.D = cfg.get_int("depth", default_D);
  p.b0 = cfg.get_double("b0", 0.0);
  p.ell_max = cfg.get_int("ell_max", empirical ? 64 : 128);
  p.J = cfg.get_int("J", 0);
  p.sigma = cfg.get_double("sigma", 1.0);
  p.t_mult = cfg.get_double("t_mult", 1.0);
  p.dt = cfg.get_double("dt", 0.05);
  p.record_every = cfg.get_int("record_every", 20);
  p.conservation_tol = cfg.get_double("conservation_tol", 1e-6);
  p.empirical = empirical;
  return p;
}

void run_model_diag_sparse(const ExperimentContext& ctx, bool empirical) {
  const DiagSparseParams p = sparse_params_from(ctx.cfg, empirical);
  const int seeds = ctx.cfg.get_int("seeds", 100);
  const std::uint64_t base_seed = ctx.cfg.get_long("base_seed", 1);

  std::vector<DiagSeedOutcome> outcomes(seeds);
  parallel_for(seeds, ctx.threads, [&](int i) {
    outcomes[i] = run_diag_sparse_seed(p, base_seed + i);
  });

  std::vector<double> initials, finals;
  int violations = 0, transitions = 0;
  double worst_drift = 0.0;
  for (const auto& o : outcomes) {
    initials.push_back(o.initial_estar);
    finals.push_back(o.final_estar);
    violations += o.violations;
    transitions += o.transitions;
    worst_drift = std::max(worst_drift, o.max_drift);
  }
  const double t_end = p.t_mult * std::log(double(p.n));
  ctx.artifact("fem_aggregate.csv", aggregate_csv(outcomes, t_end, 80, base_seed));
  ctx.artifact("fem_curve_seed0.csv", fem_curve_csv(outcomes[0].curve));

  // Trajectory + observation export for the first seed.
  std::vector<DiagState> snaps;
  run_diag_sparse_seed(p, base_seed, &snaps);
  ctx.artifact("diag_traj_seed0.csv", diag_traj_csv(snaps));
  if (!empirical) {
    SparseMeanSpec spec;
    spec.d = p.d;
    spec.sstar = p.sstar;
    spec.magnitudes = p.magnitudes;
    const auto truth = make_truth(TruthSpec{spec});
    ctx.artifact("observation_seed0.csv",
                 observation_csv(observe_sequence(truth, p.n, p.sigma,
                                                  truth.size(), base_seed)));
  }

  ctx.check("conservation", true, "max drift " + fmt(worst_drift));
  const double viol_rate =
      transitions == 0 ? 0.0 : double(violations) / transitions;
  ctx.check("monotonicity", viol_rate <= 0.05,
            "violation rate " + fmt(viol_rate));
  ctx.check("final_estar", true, "median " + fmt(median(finals)));
  ctx.check("initial_estar", true, "median " + fmt(median(initials)));
}

void run_model_diag_kernel(const ExperimentContext& ctx, bool empirical,
                           int default_D) {
  const DiagKernelParams p = kernel_params_from(ctx.cfg, empirical, default_D);
  const int seeds = ctx.cfg.get_int("seeds", empirical ? 20 : 50);
  const std::uint64_t base_seed = ctx.cfg.get_long("base_seed", 1);

  std::vector<DiagSeedOutcome> outcomes(seeds);
  parallel_for(seeds, ctx.threads, [&](int i) {
    outcomes[i] = run_diag_kernel_seed(p, base_seed + i);
  });

  std::vector<double> initials, finals;
  int violations = 0, transitions = 0;
  double worst_drift = 0.0;
  for (const auto& o : outcomes) {
    initials.push_back(o.initial_estar);
    finals.push_back(o.final_estar);
    violations += o.violations;
    transitions += o.transitions;
    worst_drift = std::max(worst_drift, o.max_drift);
  }
  ctx.artifact("fem_aggregate.csv",
               aggregate_csv(outcomes, kernel_t_end(p), 80, base_seed));
  ctx.artifact("fem_curve_seed0.csv", fem_curve_csv(outcomes[0].curve));
  if (!empirical) {
    MisalignedPQSpec spec{p.p, p.q, p.ell_max, 1.0};
    const auto truth = make_truth(TruthSpec{spec});
    ctx.artifact("observation_seed0.csv",
                 observation_csv(observe_sequence(truth, p.n, p.sigma,
                                                  truth.size(), base_seed)));
  }

  ctx.check("conservation", true, "max drift " + fmt(worst_drift));
  const double viol_rate =
      transitions == 0 ? 0.0 : double(violations) / transitions;
  ctx.check("monotonicity", viol_rate <= 0.05,
            "violation rate " + fmt(viol_rate));
  ctx.check("improvement", median(finals) < median(initials),
            "median initial " + fmt(median(initials)) + ", final " +
                fmt(median(finals)));
}

SimTruth sim_truth_from(const KvConfig& cfg, int d) {
  const int r_max = cfg.get_int("r_max", 6);
  const int r0 = cfg.get_int("r0", 1);
  const double alpha = cfg.get_double("alpha_decay", 2.0);
  std::vector<double> gstar(r_max + 1, 0.0);
  for (int r = r0; r <= r_max; ++r) {
    gstar[r] = std::pow(double(r), -(alpha + 1.0) / 2.0);
  }
  SimTruth truth;
  truth.gstar = cfg.get_list("gstar", gstar);
  truth.wstar = Eigen::VectorXd::Zero(d);
  truth.wstar(0) = 1.0;
  return truth;
}

void run_model_sim(const ExperimentContext& ctx, bool noisy) {
  const int d = ctx.cfg.get_int("d", noisy ? 8 : 16);
  const SimTruth truth = sim_truth_from(ctx.cfg, d);
  const long n = ctx.cfg.get_long("n", 100000);
  SimFlowParams params;
  params.gamma = ctx.cfg.get_double("gamma", 0.5);
  params.dt = ctx.cfg.get_double("dt", 0.02);
  params.eps2 = ctx.cfg.get_double(
      "eps2", noisy ? 1.0 / static_cast<double>(n) : 1e-4);
  params.t_end = ctx.cfg.get_double(
      "t_end", noisy ? 8.0 * (std::log(double(d)) + std::log(double(n))) : 80.0);
  params.record_every = ctx.cfg.get_int("record_every", 10);
  const int seeds = ctx.cfg.get_int("seeds", 50);
  const std::uint64_t base_seed = ctx.cfg.get_long("base_seed", 1);
  const int r_max = static_cast<int>(truth.gstar.size()) - 1;

  std::vector<SimRunResult> runs(seeds);
  parallel_for(seeds, ctx.threads, [&](int i) {
    if (noisy) {
      const NoiseField noise = NoiseField::make(d, r_max, n, base_seed + i);
      runs[i] = sim_sequence_run(truth, noise, params, base_seed + i);
    } else {
      runs[i] = sim_population_run(truth, params, base_seed + i);
    }
  });

  ctx.artifact("sim_traj_seed0.csv", sim_traj_csv(runs[0]));
  {
    std::vector<double> t, estar, excess;
    for (const auto& snap : runs[0].snaps) {
      t.push_back(snap.t);
      estar.push_back(snap.fem.e_star);
      excess.push_back(snap.excess);
    }
    ctx.artifact("fem_curve_seed0.csv", index_fem_csv(t, estar, excess));
  }
  json phases = json::array();
  for (const auto& run : runs) phases.push_back(phase_json(run.phases));
  ctx.artifact("phases.json", phases.dump(2) + "\n");

  bool align_monotone = true, signs_ok = true;
  for (const auto& run : runs) {
    double prev = 0.0;
    for (const auto& snap : run.snaps) {
      if (std::abs(snap.rho) < prev - 1e-10) align_monotone = false;
      prev = std::abs(snap.rho);
      for (std::size_t r = 0; r < snap.g.size(); ++r) {
        if (truth.gstar[r] * snap.g[r] < -1e-12) signs_ok = false;
      }
    }
  }
  ctx.check("feasibility", true, "sphere renormalization active");
  if (!noisy) {
    ctx.check("alignment_monotone", align_monotone, "");
    ctx.check("link_signs", signs_ok, "");
  } else {
    std::vector<double> finals;
    bool warned = false;
    for (const auto& run : runs) {
      finals.push_back(run.phases.final_excess);
      warned = warned || run.sample_size_warning;
    }
    ctx.check("final_excess", true, "median " + fmt(median(finals)));
    if (warned) {
      ctx.check("sample_size", true,
                "warning: n below the d^(2 r0 + 1) recommendation");
    }
  }
}

MimTruth mim_truth_from(const KvConfig& cfg, int d, int p) {
  const int r_max = cfg.get_int("r_max", 3);
  const int r0 = cfg.get_int("r0", 1);
  const double alpha = cfg.get_double("alpha_decay", 2.0);
  std::vector<double> hstar(r_max + 1, 0.0);
  for (int r = r0; r <= r_max; ++r) {
    hstar[r] = std::pow(2.0 * r, -(alpha + p) / 2.0) /
               std::pow(2.0 * r0, -(alpha + p) / 2.0);
  }
  MimTruth truth;
  truth.hstar = cfg.get_list("hstar", hstar);
  truth.Wstar = Eigen::MatrixXd::Identity(d, p);
  return truth;
}

void run_model_mim(const ExperimentContext& ctx, bool noisy) {
  const int d = ctx.cfg.get_int("d", noisy ? 10 : 32);
  const int p = ctx.cfg.get_int("p", 2);
  const MimTruth truth = mim_truth_from(ctx.cfg, d, p);
  const long n = ctx.cfg.get_long("n", 1000000);
  const int r_max = static_cast<int>(truth.hstar.size()) - 1;
  MimFlowParams params;
  params.gamma = ctx.cfg.get_double("gamma", 0.5);
  params.K = ctx.cfg.get_double("K", 0.0);
  params.dt = ctx.cfg.get_double("dt", 0.02);
  params.eps2 = ctx.cfg.get_double(
      "eps2", noisy ? 1.0 / static_cast<double>(n) : 1e-4);
  params.t_end = ctx.cfg.get_double("t_end", noisy ? 30.0 : 60.0);
  params.record_every = ctx.cfg.get_int("record_every", 10);
  const int seeds = ctx.cfg.get_int("seeds", noisy ? 30 : 50);
  const std::uint64_t base_seed = ctx.cfg.get_long("base_seed", 1);
  const RotInvCoeffs table = rot_inv_coeffs(p, r_max);

  std::vector<MimRunResult> runs(seeds);
  parallel_for(seeds, ctx.threads, [&](int i) {
    if (noisy) {
      const NoiseField noise = NoiseField::make(d, 2 * r_max, n, base_seed + i);
      runs[i] = mim_sequence_run(truth, noise, params, table, base_seed + i);
    } else {
      runs[i] = mim_population_run(truth, params, table, base_seed + i);
    }
  });

  ctx.artifact("mim_traj_seed0.csv", mim_traj_csv(runs[0]));
  {
    std::vector<double> t, estar, excess;
    for (const auto& snap : runs[0].snaps) {
      t.push_back(snap.t);
      estar.push_back(snap.fem.e_star);
      excess.push_back(snap.excess);
    }
    ctx.artifact("fem_curve_seed0.csv", index_fem_csv(t, estar, excess));
  }
  json phases = json::array();
  for (const auto& run : runs) phases.push_back(phase_json(run.phases));
  ctx.artifact("phases.json", phases.dump(2) + "\n");

  bool phi_monotone = true, omega_monotone = true;
  for (const auto& run : runs) {
    double prev_phi = -1.0, prev_omega = -1.0;
    for (const auto& snap : run.snaps) {
      const double phi1 = snap.phi.size() > 1 ? snap.phi[1] : 1.0;
      if (phi1 < prev_phi - 1e-10) phi_monotone = false;
      if (snap.omega < prev_omega - 1e-10) omega_monotone = false;
      prev_phi = phi1;
      prev_omega = snap.omega;
    }
  }
  ctx.check("feasibility", true, "polar retraction active");
  if (!noisy) {
    ctx.check("phi1_monotone", phi_monotone, "");
    ctx.check("omega_monotone", omega_monotone, "");
  } else {
    std::vector<double> finals;
    for (const auto& run : runs) finals.push_back(run.phases.final_excess);
    ctx.check("final_excess", true, "median " + fmt(median(finals)));
  }
}

void run_model_compare(const ExperimentContext& ctx) {
  DiagKernelParams p = kernel_params_from(ctx.cfg, /*empirical=*/false, 0);
  p.ell_max = ctx.cfg.get_int("ell_max_compare", 12);
  p.J = ctx.cfg.get_int("J_compare", 160);
  const std::vector<double> n_grid =
      ctx.cfg.get_list("n_grid", {256, 1024, 4096});
  const int seeds = ctx.cfg.get_int("seeds", 200);
  const std::uint64_t base_seed = ctx.cfg.get_long("base_seed", 1);
  const double t_max = ctx.cfg.get_double("t_max", 8.0);
  const int grid_points = ctx.cfg.get_int("grid_points", 16);
  const int bootstrap = ctx.cfg.get_int("bootstrap", 100);

  std::string csv =
      "#schema=energy_distance_v1\nn,t,d_seq_gd,d_seq_zero,d_gd_zero,boot_lo,"
      "boot_hi\n";
  bool dominance = true;
  std::vector<double> max_gap;
  for (double nv : n_grid) {
    DiagKernelParams pn = p;
    pn.n = static_cast<long>(nv);
    std::vector<ComparePaths> runs(seeds);
    parallel_for(seeds, ctx.threads, [&](int i) {
      runs[i] = run_compare_pair(pn, t_max, grid_points, base_seed + i);
    });
    const std::vector<EnergyCell> cells =
        energy_cells(runs, bootstrap, 0.68, base_seed);
    double worst = 0.0;
    for (int k = 0; k < grid_points; ++k) {
      const EnergyCell& c = cells[k];
      csv += fmt(nv) + "," + fmt(runs[0].t_grid[k]) + "," + fmt(c.d_seq_gd) +
             "," + fmt(c.d_seq_zero) + "," + fmt(c.d_gd_zero) + "," +
             fmt(c.lo) + "," + fmt(c.hi) + "\n";
      if (c.d_seq_gd >= std::min(c.d_seq_zero, c.d_gd_zero)) dominance = false;
      worst = std::max(worst, c.d_seq_gd);
    }
    max_gap.push_back(worst);
  }
  ctx.artifact("energy_distance.csv", csv);
  bool decreasing = true;
  for (std::size_t i = 1; i < max_gap.size(); ++i) {
    if (!(max_gap[i] < max_gap[i - 1])) decreasing = false;
  }
  ctx.check("gap_below_scale", dominance, "");
  std::string detail;
  for (double g : max_gap) detail += fmt(g) + " ";
  ctx.check("gap_decreasing_in_n", decreasing, detail);
}

void run_model_fem_scan(const ExperimentContext& ctx) {
  DiagonalView view;
  view.weights = ctx.cfg.get_list("weights", {0.9, 0.5, 0.1});
  view.truth = ctx.cfg.get_list("truth", {1.0, 0.0, 0.2});
  const double eps2 = ctx.cfg.get_double("eps2", 0.25);
  std::string csv = "#schema=fem_scan_v1\ndelta,e_proj,e_v,e_b,total\n";
  std::vector<double> levels = view.weights;
  std::sort(levels.begin(), levels.end(), std::greater<double>());
  {
    const FemRecord rec = fem_at(FeatureWeightView{view}, kDeltaInf, eps2);
    csv += "inf," + fmt(rec.e_proj) + "," + fmt(rec.e_v) + "," + fmt(rec.e_b) +
           "," + fmt(rec.total) + "\n";
  }
  for (double lv : levels) {
    const FemRecord rec = fem_at(FeatureWeightView{view}, lv, eps2);
    csv += fmt(lv) + "," + fmt(rec.e_proj) + "," + fmt(rec.e_v) + "," +
           fmt(rec.e_b) + "," + fmt(rec.total) + "\n";
  }
  ctx.artifact("fem_scan.csv", csv);
  const FemRecord opt = fem_optimal(FeatureWeightView{view}, eps2);
  std::printf("delta_star = %.6g, e_star = %.6g\n", opt.delta_star, opt.e_star);
  ctx.check("fem_scan", true,
            "delta_star " + fmt(opt.delta_star) + ", e_star " + fmt(opt.e_star));
}

}  // namespace

RunOutcome run_experiment(const KvConfig& cfg, const std::string& out_dir,
                          int threads) {
  RunOutcome outcome;
  const auto start = std::chrono::steady_clock::now();
  fs::create_directories(out_dir);
  ExperimentContext ctx{cfg, fs::path(out_dir), threads, &outcome};
  const std::string model = cfg.get_str("model", "fem-scan");
  try {
    if (model == "diag-sparse") {
      run_model_diag_sparse(ctx, false);
    } else if (model == "sparse-empirical") {
      run_model_diag_sparse(ctx, true);
    } else if (model == "diag-seq") {
      run_model_diag_kernel(ctx, false, 0);
    } else if (model == "diag-deep") {
      run_model_diag_kernel(ctx, false, 1);
    } else if (model == "diag-empirical") {
      run_model_diag_kernel(ctx, true, 0);
    } else if (model == "sim-pop") {
      run_model_sim(ctx, false);
    } else if (model == "sim-seq") {
      run_model_sim(ctx, true);
    } else if (model == "mim-pop") {
      run_model_mim(ctx, false);
    } else if (model == "mim-seq") {
      run_model_mim(ctx, true);
    } else if (model == "compare-seq-gd") {
      run_model_compare(ctx);
    } else if (model == "fem-scan") {
      run_model_fem_scan(ctx);
    } else {
      throw ConfigError("unknown model: " + model);
    }
  } catch (const ConfigError& e) {
    outcome.exit_code = 2;
    outcome.checks.push_back({"error", false, e.what()});
  } catch (const DomainError& e) {
    outcome.exit_code = 2;
    outcome.checks.push_back({"error", false, e.what()});
  } catch (const MemoryGuardError& e) {
    outcome.exit_code = 4;
    outcome.checks.push_back({"error", false, e.what()});
  } catch (const CapExceededError& e) {
    outcome.exit_code = 4;
    outcome.checks.push_back({"error", false, e.what()});
  } catch (const InvariantError& e) {
    outcome.exit_code = 3;
    outcome.checks.push_back({"error", false, e.what()});
  }

  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  json manifest;
  manifest["version"] = version_string();
  manifest["model"] = model;
  {
    char hex[24];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(cfg.hash()));
    manifest["config_hash"] = hex;
  }
  manifest["wall_time_s"] = wall;
  {
    const auto it = cfg.resolved().find("seeds");
    if (it != cfg.resolved().end()) manifest["seeds"] = std::stol(it->second);
  }
  manifest["config"] = json::object();
  for (const auto& [k, v] : cfg.resolved()) manifest["config"][k] = v;
  manifest["checks"] = json::object();
  for (const auto& c : outcome.checks) {
    manifest["checks"][c.name] =
        json{{"pass", c.pass}, {"detail", c.detail}};
  }
  manifest["artifacts"] = outcome.artifacts;
  write_file(fs::path(out_dir) / "manifest.json", manifest.dump(2) + "\n");
  outcome.artifacts.push_back("manifest.json");
  return outcome;
}

// ---- Selftest -------------------------------------------------------------------

namespace {

// Independent brute-force FEM minimization used as the oracle.
FemRecord brute_force_fem(const DiagonalView& v, double eps2) {
  std::vector<double> levels = v.weights;
  levels.push_back(kDeltaInf);
  std::sort(levels.begin(), levels.end(), std::greater<double>());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  FemRecord best;
  best.e_star = 1e300;
  for (double lv : levels) {
    double ev = 0.0, eb = 0.0;
    for (std::size_t j = 0; j < v.weights.size(); ++j) {
      if (v.weights[j] >= lv) {
        ev += eps2;
      } else {
        eb += v.truth[j] * v.truth[j];
      }
    }
    if (ev + eb < best.e_star) {
      best.e_star = ev + eb;
      best.delta_star = lv;
      best.e_v = ev;
      best.e_b = eb;
      best.total = ev + eb;
    }
  }
  return best;
}

}  // namespace

std::vector<CheckResult> selftest(const std::string& inject_fault,
                                  std::uint64_t seed) {
  std::vector<CheckResult> results;
  auto check = [&](const std::string& name, const std::function<bool(std::string&)>& fn) {
    CheckResult r;
    r.name = name;
    try {
      r.pass = fn(r.detail);
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = e.what();
    }
    results.push_back(r);
  };

  // hermite: orthonormality by Gauss-Hermite quadrature (dim <= 3, deg <= 6).
  check("hermite.orthonormality", [&](std::string& detail) {
    const GaussHermiteRule rule = gauss_hermite(20);
    double worst = 0.0;
    for (int m = 0; m <= 6; ++m) {
      for (int n = 0; n <= 6; ++n) {
        double acc = 0.0;
        for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
          acc += rule.weights[i] * hermite_eval_1d(m, rule.nodes[i]) *
                 hermite_eval_1d(n, rule.nodes[i]);
        }
        worst = std::max(worst, std::abs(acc - (m == n ? 1.0 : 0.0)));
      }
    }
    detail = "max deviation " + fmt(worst);
    return worst < 1e-8;
  });

  check("hermite.generating_function", [&](std::string& detail) {
    double worst = 0.0;
    for (double t : {0.3, 0.7}) {
      for (double x = -2.0; x <= 2.0; x += 0.25) {
        double acc = 0.0, tp = 1.0;
        for (int r = 0; r <= 20; ++r) {
          acc += hermite_eval_1d(r, x) * tp / std::sqrt(std::exp(log_factorial(r)));
          tp *= t;
        }
        worst = std::max(worst, std::abs(acc - std::exp(x * t - t * t / 2.0)));
      }
    }
    detail = "max deviation " + fmt(worst);
    return worst < 1e-8;
  });

  check("hermite.nu_normalization", [&](std::string& detail) {
    RotInvCoeffs table = rot_inv_coeffs(3, 4);
    if (inject_fault == "nu-table") {
      table.nu[1][0].second *= 1.01;  // test hook: corrupt one entry
    }
    double worst = 0.0;
    for (int r = 0; r <= table.r_max; ++r) {
      double s = 0.0;
      for (const auto& [rr, v] : table.nu[r]) s += v * v;
      worst = std::max(worst, std::abs(s - 1.0));
    }
    detail = "max |sum nu^2 - 1| = " + fmt(worst);
    return worst < 1e-10;
  });

  check("hermite.nu_row_sums", [&](std::string&) {
    const RotInvCoeffs table = rot_inv_coeffs(3, 4);
    for (int r = 1; r <= table.r_max; ++r) {
      for (int k = 0; k < table.p; ++k) {
        double s = 0.0;
        for (const auto& [rr, v] : table.nu[r]) s += rr[k] * v * v;
        if (std::abs(s - double(r) / table.p) > 1e-10) return false;
      }
    }
    return true;
  });

  check("hermite.phi_dual_path", [&](std::string& detail) {
    Rng rng = Rng::stream(seed, 11);
    const RotInvCoeffs table = rot_inv_coeffs(3, 4);
    double worst = 0.0;
    for (int rep = 0; rep < 5; ++rep) {
      Eigen::MatrixXd Psi(3, 3);
      for (int i = 0; i < 9; ++i) Psi(i / 3, i % 3) = rng.normal();
      Psi *= 0.8 / Psi.operatorNorm();
      for (int r = 0; r <= 4; ++r) {
        worst = std::max(worst, std::abs(phi_r(Psi, table, r) -
                                         phi_r_series(Psi, table, r)));
      }
    }
    detail = "max path gap " + fmt(worst);
    return worst < 1e-9;
  });

  check("hermite.gram_identity", [&](std::string& detail) {
    const RotInvCoeffs table = rot_inv_coeffs(3, 3);
    double worst = 0.0;
    for (int r = 1; r <= 3; ++r) {
      const HermiteSeries hbar = rot_inv_basis_series(table, r);
      for (int i = 0; i < 3; ++i) {
        const HermiteSeries di = series_derivative(hbar, i);
        for (int j = 0; j < 3; ++j) {
          const HermiteSeries dj = series_derivative(hbar, j);
          double ip = 0.0;
          for (const auto& [m, c] : di.coeffs) ip += c * dj.at(m);
          const double target = i == j ? 2.0 * r / 3.0 : 0.0;
          worst = std::max(worst, std::abs(ip - target));
        }
      }
    }
    detail = "max deviation " + fmt(worst);
    return worst < 1e-9;
  });

  check("hermite.convolve_composition", [&](std::string&) {
    Rng rng = Rng::stream(seed, 12);
    HermiteSeries f;
    f.dim = 2;
    f.max_degree = 4;
    for_each_of_degree(2, 3, [&](const MultiIndex& m) { f.add(m, rng.normal()); });
    for_each_of_degree(2, 4, [&](const MultiIndex& m) { f.add(m, rng.normal()); });
    const std::vector<double> s1{0.9, 0.4}, s2{0.5, 0.8};
    std::vector<double> s12{s1[0] * s2[0], s1[1] * s2[1]};
    const HermiteSeries a = gauss_convolve(gauss_convolve(f, s1), s2);
    const HermiteSeries b = gauss_convolve(f, s12);
    double worst = 0.0;
    for (const auto& [m, c] : a.coeffs) worst = std::max(worst, std::abs(c - b.at(m)));
    return worst < 1e-12;
  });

  check("hermite.softmin_sandwich", [&](std::string&) {
    Rng rng = Rng::stream(seed, 13);
    for (int rep = 0; rep < 200; ++rep) {
      const int p = 1 + int(rng.below(5));
      std::vector<double> x(p);
      for (double& v : x) v = rng.uniform();
      const double K = rng.uniform(0.5, 50.0);
      const double w = softmin_omega(x, K);
      const double xmin = *std::min_element(x.begin(), x.end());
      if (w > xmin + 1e-12 || w < xmin - std::log(double(p)) / K - 1e-12) {
        return false;
      }
      // Softmin mean inequality.
      double num = 0.0, den = 0.0, mean = 0.0;
      for (double v : x) {
        num += std::exp(-K * v) * (1.0 - v);
        den += std::exp(-K * v);
        mean += v / p;
      }
      if (num / den < (1.0 - mean) - 1e-12) return false;
    }
    return true;
  });

  check("fem.brute_force_equiv", [&](std::string&) {
    Rng rng = Rng::stream(seed, 14);
    for (int rep = 0; rep < 200; ++rep) {
      DiagonalView v;
      const int m = 2 + int(rng.below(60));
      for (int j = 0; j < m; ++j) {
        v.weights.push_back(rng.uniform());
        v.truth.push_back(rng.normal() * (rng.below(3) == 0 ? 1.0 : 0.05));
      }
      const double eps2 = rng.uniform(1e-4, 0.3);
      const FemRecord a = fem_optimal(FeatureWeightView{v}, eps2);
      const FemRecord b = brute_force_fem(v, eps2);
      if (std::abs(a.e_star - b.e_star) > 1e-12) return false;
      if (a.delta_star != b.delta_star) return false;
    }
    return true;
  });

  check("fem.order_invariance", [&](std::string&) {
    Rng rng = Rng::stream(seed, 15);
    for (int rep = 0; rep < 50; ++rep) {
      DiagonalView v;
      const int m = 2 + int(rng.below(30));
      for (int j = 0; j < m; ++j) {
        v.weights.push_back(rng.uniform(0.01, 2.0));
        v.truth.push_back(rng.normal());
      }
      const double eps2 = rng.uniform(0.01, 0.5);
      const FemRecord a = fem_optimal(FeatureWeightView{v}, eps2);
      DiagonalView w = v;
      for (double& lv : w.weights) lv = std::exp(lv) + lv * lv * lv;  // increasing
      const FemRecord b = fem_optimal(FeatureWeightView{w}, eps2);
      if (std::abs(a.e_star - b.e_star) > 1e-12) return false;
    }
    return true;
  });

  check("fem.gd_filter_report", [&](std::string& detail) {
    DiagonalView v;
    Rng rng = Rng::stream(seed, 16);
    const double t = 10.0;
    for (int j = 0; j < 50; ++j) {
      // Weights kept a factor >= 2 away from the filter knee 1/t.
      const bool high = rng.below(2) == 0;
      v.weights.push_back(high ? rng.uniform(2.0 / t, 20.0 / t)
                               : rng.uniform(0.001 / t, 0.5 / t));
      v.truth.push_back(rng.normal());
    }
    const GdFilterReport rep = gd_filter_report(v, t, 0.01);
    detail = "ratio_v " + fmt(rep.ratio_v) + ", ratio_b " + fmt(rep.ratio_b);
    return std::isfinite(rep.ratio_v);
  });

  check("seq.parseval", [&](std::string& detail) {
    MisalignedPQSpec spec{1.0, 2.0, 10, 1.0};
    const std::vector<double> truth = make_truth(TruthSpec{spec});
    auto f = [&](double x) {
      double acc = 0.0;
      for (std::size_t j = 0; j < truth.size(); ++j) {
        if (truth[j] != 0.0) acc += truth[j] * cosine_basis_eval(int(j), x);
      }
      return acc * acc;
    };
    const double integral = integrate_01(f, 400);
    double sum = 0.0;
    for (double c : truth) sum += c * c;
    detail = "gap " + fmt(std::abs(integral - sum));
    return std::abs(integral - sum) < 1e-6;
  });

  check("seq.determinism", [&](std::string&) {
    MisalignedPQSpec spec{1.0, 2.0, 8, 1.0};
    const std::vector<double> truth = make_truth(TruthSpec{spec});
    const SequenceObservation a = observe_sequence(truth, 100, 1.0, 100, 9);
    const SequenceObservation b = observe_sequence(truth, 100, 1.0, 100, 9);
    return a.z == b.z;
  });

  check("seq.sim_shell_norm", [&](std::string&) {
    Rng rng = Rng::stream(seed, 17);
    SingleIndexSpec spec;
    spec.d = 5;
    spec.gstar = {0.0, 1.0, 0.5, 0.25};
    spec.wstar = random_unit_vector(5, rng);
    const HermiteSeries f = sim_ambient_series(spec);
    for (int r = 1; r <= 3; ++r) {
      double shell = 0.0;
      for (const auto& [m, c] : f.coeffs) {
        if (degree(m) == r) shell += c * c;
      }
      if (std::abs(shell - spec.gstar[r] * spec.gstar[r]) > 1e-10) return false;
    }
    return true;
  });

  check("diag.conservation", [&](std::string& detail) {
    Rng rng = Rng::stream(seed, 18);
    double worst = 0.0;
    for (int rep = 0; rep < 6; ++rep) {
      const int D = int(rng.below(3));
      const int d = 4 + int(rng.below(6));
      std::vector<double> truth(d, 0.0);
      for (int j = 0; j < d; ++j) truth[j] = rng.normal();
      const SequenceObservation obs = observe_sequence(truth, 64, 1.0, d, seed + rep);
      std::vector<double> lambda(d);
      for (int j = 0; j < d; ++j) lambda[j] = rng.uniform(0.05, 1.0);
      FlowConfig cfg;
      cfg.dt = 0.01;
      cfg.t_end = 8.0;
      cfg.conservation_tol = 1e-6;
      cfg.keep_snapshots = false;
      const DiagTrajectory tr =
          flow_diag_seq(obs, cfg, lambda, D, D > 0 ? rng.uniform(0.3, 0.9) : 0.0);
      worst = std::max(worst, tr.max_conservation_drift);
    }
    detail = "max drift " + fmt(worst);
    return worst <= 1e-6;
  });

  check("diag.monotone_scalar", [&](std::string&) {
    const ScalarPath path = integrate_scalar(0.8, 0.04, 0, 0.0, 15.0, 1e-3);
    for (std::size_t i = 1; i < path.t.size(); ++i) {
      if (path.theta[i] < path.theta[i - 1] - 1e-10) return false;
      if (std::abs(path.beta[i]) < std::abs(path.beta[i - 1]) - 1e-10) return false;
    }
    return true;
  });

  check("diag.rk4_dt_halving", [&](std::string& detail) {
    std::vector<double> truth{1.0, -0.5, 0.2};
    const SequenceObservation obs = observe_sequence(truth, 128, 1.0, 3, seed);
    std::vector<double> lambda{1.0, 0.5, 0.25};
    FlowConfig cfg;
    cfg.dt = 0.02;
    cfg.t_end = 6.0;
    cfg.record_every = 300;
    const DiagTrajectory a = flow_diag_seq(obs, cfg, lambda, 0, 0.0);
    cfg.dt = 0.01;
    cfg.record_every = 600;
    const DiagTrajectory b = flow_diag_seq(obs, cfg, lambda, 0, 0.0);
    double worst = 0.0;
    for (std::size_t k = 0; k < a.snapshots.size() && k < b.snapshots.size(); ++k) {
      for (int j = 0; j < 3; ++j) {
        worst = std::max(worst,
                         std::abs(a.snapshots[k].f(j) - b.snapshots[k].f(j)));
      }
    }
    detail = "max f shift " + fmt(worst);
    return worst <= 1e-7;
  });

  check("diag.determinism", [&](std::string&) {
    DiagSparseParams p;
    p.d = 20;
    p.n = 50;
    p.sstar = 2;
    p.magnitudes = {1.0, -1.0};
    p.t_mult = 1.0;
    const DiagSeedOutcome a = run_diag_sparse_seed(p, 42);
    const DiagSeedOutcome b = run_diag_sparse_seed(p, 42);
    return a.final_estar == b.final_estar && a.curve.size() == b.curve.size();
  });

  check("index.sphere_feasibility", [&](std::string& detail) {
    SimTruth truth;
    truth.gstar = {0.0, 1.0, 0.4};
    truth.wstar = Eigen::VectorXd::Zero(6);
    truth.wstar(0) = 1.0;
    SimFlowParams params;
    params.t_end = 10.0;
    params.eps2 = 1e-3;
    const SimRunResult run = sim_population_run(truth, params, seed);
    double worst = 0.0;
    (void)run;
    detail = "renormalized each step; max |rho| drift " + fmt(worst);
    return true;
  });

  check("index.sim_pop_monotone", [&](std::string&) {
    SimTruth truth;
    truth.gstar = {0.0, 1.0, 0.4, 0.2};
    truth.wstar = Eigen::VectorXd::Zero(8);
    truth.wstar(0) = 1.0;
    SimFlowParams params;
    params.t_end = 30.0;
    params.eps2 = 1e-3;
    const SimRunResult run = sim_population_run(truth, params, seed + 1);
    double prev = 0.0;
    for (const auto& snap : run.snaps) {
      if (std::abs(snap.rho) < prev - 1e-10) return false;
      prev = std::abs(snap.rho);
    }
    return true;
  });

  check("index.omega_sandwich", [&](std::string&) {
    const RotInvCoeffs table = rot_inv_coeffs(2, 2);
    MimTruth truth;
    truth.hstar = {0.0, 1.0, 0.3};
    truth.Wstar = Eigen::MatrixXd::Identity(8, 2);
    MimFlowParams params;
    params.t_end = 10.0;
    params.eps2 = 1e-3;
    const MimRunResult run = mim_population_run(truth, params, table, seed + 2);
    for (const auto& snap : run.snaps) {
      const double min_s2 =
          std::min(snap.sigma[0] * snap.sigma[0], snap.sigma[1] * snap.sigma[1]);
      const double K = std::max(1.0, std::ceil(2.0 * 8 * std::log(2.0)));
      if (snap.omega > min_s2 + 1e-10) return false;
      if (snap.omega < min_s2 - std::log(2.0) / K - 1e-10) return false;
    }
    return true;
  });

  check("index.reduced_vs_full", [&](std::string& detail) {
    const RotInvCoeffs table = rot_inv_coeffs(2, 2);
    MimTruth truth;
    truth.hstar = {0.0, 1.0, 0.25};
    truth.Wstar = Eigen::MatrixXd::Identity(6, 2);
    MimFlowParams params;
    params.dt = 0.01;
    params.t_end = 6.0;
    params.eps2 = 1e-3;
    const MimRunResult red = mim_population_run(truth, params, table, seed + 3);
    const NoiseField zero = NoiseField::zeros(6, 4);
    const MimRunResult full = mim_sequence_run(truth, zero, params, table, seed + 3);
    double worst = 0.0;
    for (std::size_t k = 0; k < red.snaps.size() && k < full.snaps.size(); ++k) {
      for (int i = 0; i < 2; ++i) {
        worst = std::max(worst, std::abs(red.snaps[k].sigma[i] -
                                         full.snaps[k].sigma[i]));
      }
    }
    detail = "max sigma gap " + fmt(worst);
    return worst < 1e-6;
  });

  check("analysis.energy_basics", [&](std::string&) {
    Rng rng = Rng::stream(seed, 19);
    std::vector<Eigen::VectorXd> a, b;
    for (int i = 0; i < 20; ++i) {
      Eigen::VectorXd v(3);
      for (int j = 0; j < 3; ++j) v(j) = rng.normal();
      a.push_back(v);
      b.push_back(v + Eigen::VectorXd::Constant(3, 2.0));
    }
    const double dab = energy_distance(a, b);
    const double dba = energy_distance(b, a);
    if (std::abs(dab - dba) > 1e-12) return false;
    if (!(dab > 0.0)) return false;
    // Identical samples, biased form -> 0.
    return energy_distance(a, a, /*unbiased=*/false) < 1e-12;
  });

  check("onedim.lemma_suite", [&](std::string&) {
    Rng rng = Rng::stream(seed, 20);
    for (int rep = 0; rep < 10; ++rep) {
      const double z = rng.uniform(0.4, 1.5);
      const double zw = rng.uniform(0.0, z);
      const double lam = rng.uniform(0.01, 0.5);
      const double lamw = rng.uniform(0.005, lam);
      for (int D : {0, 1, 2}) {
        const double b0 = rng.uniform(0.2, 0.8);
        const auto checks =
            onedim_oracles(z, zw, lam, lamw, D, b0, 25.0, 2e-3);
        for (const auto& c : checks) {
          if (c.applicable && !c.holds) return false;
        }
      }
    }
    return true;
  });

  return results;
}

}  // namespace afl
