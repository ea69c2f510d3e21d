// Command-line runner for the adaptive feature lab: experiment execution,
// self test, FEM scans and config introspection.

#include <CLI11.hpp>
#include <cstdio>
#include <string>
#include <vector>

#include "afl/errors.hpp"
#include "afl/runner.hpp"

namespace {

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const afl::ConfigError*>(&e)) return 2;
  if (dynamic_cast<const afl::DomainError*>(&e)) return 2;
  if (dynamic_cast<const afl::InvariantError*>(&e)) return 3;
  if (dynamic_cast<const afl::MemoryGuardError*>(&e)) return 4;
  if (dynamic_cast<const afl::CapExceededError*>(&e)) return 4;
  return 1;
}

void apply_overrides(afl::KvConfig& cfg,
                     const std::vector<std::string>& overrides) {
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw afl::ConfigError("override must be key=value: " + kv);
    }
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
}

const char* kDefaultsByModel =
    "model = fem-scan            # diag-sparse | sparse-empirical | diag-seq |\n"
    "                            # diag-deep | diag-empirical | sim-pop | sim-seq |\n"
    "                            # mim-pop | mim-seq | compare-seq-gd | fem-scan\n"
    "seeds = (model dependent)   # number of independent runs\n"
    "base_seed = 1\n"
    "# diagonal models\n"
    "d = 200                     # ambient dimension (sparse)\n"
    "n = 200                     # samples / noise scale 1/n\n"
    "sstar = 3\n"
    "magnitudes = 1,-1,1         # sparse signal values (|.| >= 0.5)\n"
    "alpha = 0                   # 0 -> d^{-1/2}\n"
    "p = 1\nq = 2\ngamma = 2    # weights lambda_j = j^{-gamma}\n"
    "depth = 0                   # D\n"
    "b0 = 0                      # 0 -> n^{-1/(2(D+2))}\n"
    "ell_max = 128               # truth support: j(ell) = round(ell^q)\n"
    "J = 0                       # 0 -> automatic truncation\n"
    "sigma = 1\n"
    "t_mult = 1                  # scales the theorem stopping time\n"
    "dt = 0.05\nrecord_every = 20\nconservation_tol = 1e-6\n"
    "# index models\n"
    "r_max = 6 (sim) / 3 (mim)\n"
    "r0 = 1                      # information exponent (gstar starts here)\n"
    "alpha_decay = 2             # link coefficient decay exponent\n"
    "K = 0                       # 0 -> ceil(2 d log p)\n"
    "eps2 = 1/n (noisy) or 1e-4\n"
    "t_end = model dependent\n"
    "# compare-seq-gd\n"
    "n_grid = 256,1024,4096\nt_max = 8\ngrid_points = 16\nbootstrap = 100\n"
    "ell_max_compare = 12\nJ_compare = 160\n"
    "# fem-scan\n"
    "weights = 0.9,0.5,0.1\ntruth = 1,0,0.2\neps2 = 0.25\n";

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adaptive feature lab"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out";
  int seeds = -1;
  int threads = afl::default_threads();
  std::string model;
  std::vector<std::string> overrides;

  long n_flag = -1;
  int d_flag = -1, sstar_flag = -1;
  std::string n_grid_flag;

  CLI::App* run = app.add_subcommand("run", "run a configured experiment");
  run->add_option("--config", config_path, "config file (key = value lines)");
  run->add_option("--model", model, "experiment model");
  run->add_option("--seeds", seeds, "number of seeds");
  run->add_option("--out", out_dir, "output directory");
  run->add_option("--threads", threads, "worker threads (or AFL_THREADS)");
  run->add_option("--n", n_flag, "sample-count parameter");
  run->add_option("--d", d_flag, "ambient dimension");
  run->add_option("--sstar", sstar_flag, "sparsity of the sparse-mean truth");
  run->add_option("--n-grid", n_grid_flag, "comma list of n values");
  run->add_option("--set", overrides, "extra key=value overrides")
      ->take_all();

  CLI::App* self = app.add_subcommand("selftest", "run the invariant suite");
  std::string inject;
  self->add_option("--inject-fault", inject,
                   "test hook: corrupt an internal table (nu-table)");

  CLI::App* scan = app.add_subcommand("fem-scan", "optimal FEM of a fixture");
  std::vector<double> scan_weights{0.9, 0.5, 0.1};
  std::vector<double> scan_truth{1.0, 0.0, 0.2};
  double scan_eps2 = 0.25;
  scan->add_option("--weights", scan_weights, "feature weights");
  scan->add_option("--truth", scan_truth, "truth coefficients");
  scan->add_option("--eps2", scan_eps2, "effective noise level");

  CLI::App* defaults = app.add_subcommand("show-config-defaults",
                                          "list config keys and defaults");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      afl::KvConfig cfg;
      if (!config_path.empty()) cfg = afl::KvConfig::parse_file(config_path);
      if (!model.empty()) cfg.set("model", model);
      if (seeds >= 0) cfg.set("seeds", std::to_string(seeds));
      if (n_flag >= 0) cfg.set("n", std::to_string(n_flag));
      if (d_flag >= 0) cfg.set("d", std::to_string(d_flag));
      if (sstar_flag >= 0) cfg.set("sstar", std::to_string(sstar_flag));
      if (!n_grid_flag.empty()) cfg.set("n_grid", n_grid_flag);
      apply_overrides(cfg, overrides);
      const afl::RunOutcome outcome =
          afl::run_experiment(cfg, out_dir, threads);
      for (const auto& c : outcome.checks) {
        std::printf("[%s] %s %s\n", c.pass ? "ok" : "FAIL", c.name.c_str(),
                    c.detail.c_str());
      }
      return outcome.exit_code;
    }
    if (self->parsed()) {
      const auto results = afl::selftest(inject);
      bool all = true;
      for (const auto& c : results) {
        std::printf("[%s] %s %s\n", c.pass ? "ok" : "FAIL", c.name.c_str(),
                    c.detail.c_str());
        all = all && c.pass;
      }
      std::printf("%s\n", all ? "selftest: all checks passed"
                              : "selftest: FAILURES present");
      return all ? 0 : 3;
    }
    if (scan->parsed()) {
      afl::DiagonalView view{scan_weights, scan_truth};
      const afl::FemRecord rec =
          afl::fem_optimal(afl::FeatureWeightView{view}, scan_eps2);
      std::printf("delta_star = %.6g, e_star = %.6g\n", rec.delta_star,
                  rec.e_star);
      std::printf("e_v = %.6g, e_b = %.6g\n", rec.e_v, rec.e_b);
      return 0;
    }
    if (defaults->parsed()) {
      std::fputs(kDefaultsByModel, stdout);
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  }
  return 0;
}
