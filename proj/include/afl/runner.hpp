#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "afl/analysis.hpp"
#include "afl/diagonal_flows.hpp"
#include "afl/fem.hpp"
#include "afl/index_flows.hpp"

namespace afl {

// ---- Worker pool -------------------------------------------------------------

int default_threads();

// Runs fn(0..n_tasks-1) on a bounded pool; results must be stored by index so
// scheduling order cannot change the output.
void parallel_for(int n_tasks, int threads,
                  const std::function<void(int)>& fn);

// ---- Flat key=value configuration ---------------------------------------------

class KvConfig {
 public:
  static KvConfig parse_file(const std::string& path);
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  // Typed getters; every resolved value (including defaults) is recorded for
  // the manifest.
  std::string get_str(const std::string& key, const std::string& def) const;
  double get_double(const std::string& key, double def) const;
  long get_long(const std::string& key, long def) const;
  int get_int(const std::string& key, int def) const;
  std::vector<double> get_list(const std::string& key,
                               const std::vector<double>& def) const;

  const std::map<std::string, std::string>& resolved() const {
    return resolved_;
  }
  std::string serialize_resolved() const;
  std::uint64_t hash() const;

 private:
  std::map<std::string, std::string> values_;
  mutable std::map<std::string, std::string> resolved_;
};

// ---- Reusable per-seed experiment drivers --------------------------------------

struct FemCurvePoint {
  double t = 0.0;
  FemRecord rec;
};

struct DiagSeedOutcome {
  std::vector<FemCurvePoint> curve;
  double initial_estar = 0.0;
  double final_estar = 0.0;
  int violations = 0;   // E* increases beyond the 2 eps^2 step slack
  int transitions = 0;
  double max_drift = 0.0;
};

struct DiagSparseParams {
  int d = 200;
  long n = 200;
  int sstar = 3;
  std::vector<double> magnitudes;  // default alternating +-1
  double alpha = 0.0;              // default d^{-1/2}
  double sigma = 1.0;
  double t_mult = 5.0;             // t_end = t_mult * log(n)
  double dt = 0.05;
  int record_every = 10;
  double conservation_tol = 1e-6;
  bool empirical = false;
};

DiagSeedOutcome run_diag_sparse_seed(const DiagSparseParams& p,
                                     std::uint64_t seed,
                                     std::vector<DiagState>* capture = nullptr);

struct DiagKernelParams {
  double p = 1.0;
  double q = 2.0;
  double gamma = 2.0;
  long n = 4096;
  int D = 0;
  double b0 = 0.0;      // default n^{-1/(2(D+2))} when D >= 1
  int ell_max = 128;
  int J = 0;            // default: see resolve_kernel_J
  double sigma = 1.0;
  double t_mult = 1.0;  // scales the theorem stopping time
  double dt = 0.05;
  int record_every = 20;
  double conservation_tol = 1e-6;
  bool empirical = false;
};

int resolve_kernel_J(const DiagKernelParams& p);
double kernel_t_end(const DiagKernelParams& p);
double kernel_b0(const DiagKernelParams& p);
DiagSeedOutcome run_diag_kernel_seed(const DiagKernelParams& p,
                                     std::uint64_t seed,
                                     std::vector<DiagState>* capture = nullptr);

// Paired sequence/empirical coefficient paths sampled on a uniform t-grid.
struct ComparePaths {
  std::vector<double> t_grid;
  std::vector<Eigen::VectorXd> seq;  // coefficients at each grid time
  std::vector<Eigen::VectorXd> gd;
};

ComparePaths run_compare_pair(const DiagKernelParams& p, double t_max,
                              int grid_points, std::uint64_t seed);

// Energy-distance summary for one (n, t) cell computed from pairwise
// distance matrices, with a bootstrap band on D(seq, gd).
struct EnergyCell {
  double d_seq_gd = 0.0;
  double d_seq_zero = 0.0;
  double d_gd_zero = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

std::vector<EnergyCell> energy_cells(
    const std::vector<ComparePaths>& runs, int bootstrap,
    double level, std::uint64_t seed);

// ---- CLI-level entry points -----------------------------------------------------

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct RunOutcome {
  int exit_code = 0;
  std::vector<CheckResult> checks;
  std::vector<std::string> artifacts;
};

// Executes the configured experiment, writing CSV artifacts and a manifest
// under out_dir. Exit code: 0 ok, 2 config error, 3 invariant violation,
// 4 memory guard.
RunOutcome run_experiment(const KvConfig& cfg, const std::string& out_dir,
                          int threads);

// Full invariant suite; inject_fault is a test hook ("nu-table" corrupts the
// rotation-invariant coefficient table before its normalization check).
std::vector<CheckResult> selftest(const std::string& inject_fault = "",
                                  std::uint64_t seed = 20240801);

std::string version_string();

}  // namespace afl
