// sharpopt: train, verify, compare, gen-data.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sharpopt/format.hpp"
#include "sharpopt/harness.hpp"

namespace fs = std::filesystem;
using namespace sharpopt;

namespace {

/// Flags that map one-to-one onto config keys. Values are kept as strings and
/// applied after the --config file so that flags win.
struct ConfigFlags {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  std::string config_file;

  void add(CLI::App* app, const std::string& key, const std::string& help) {
    options[key] = app->add_option("--" + key, values[key], help);
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_file.empty()) apply_config_file(cfg, config_file);
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) set_config_value(cfg, key, values.at(key));
    }
    // A training file implies the csv dataset unless one was named explicitly.
    if (!cfg.csv.empty() && options.at("dataset")->count() == 0 && cfg.dataset == "two-moons") {
      cfg.dataset = "csv";
    }
    return cfg;
  }
};

void add_common_flags(CLI::App* app, ConfigFlags& f) {
  app->add_option("--config", f.config_file, "key=value file; flags override its values");
  f.add(app, "mode", "base | sam | delta-sam | per-instance-sam");
  f.add(app, "rho", "perturbation radius (default 0.05)");
  f.add(app, "eta", "instance-weight denominator floor (default 1e-4)");
  f.add(app, "sigma", "probe scale for the curvature estimators (default 1)");
  f.add(app, "optimizer", "sgd | adam (default adam)");
  f.add(app, "lr", "learning rate (default 0.01)");
  f.add(app, "batch-size", "batch size N (default 32)");
  f.add(app, "epochs", "epochs (default 50)");
  f.add(app, "seed", "seed for init, shuffling and probes (default 0)");
  f.add(app, "dataset", "two-moons | blobs | linreg | csv (default two-moons)");
  f.add(app, "csv", "training data file");
  f.add(app, "test-csv", "test data file (defaults to --csv)");
  f.add(app, "target-column", "target column of the csv files (default target)");
  f.add(app, "task", "classification | regression for csv data");
  f.add(app, "n-train", "synthetic training set size (default 512)");
  f.add(app, "n-test", "synthetic test set size (default 512)");
  f.add(app, "noise", "synthetic data noise (default 0.2)");
  f.add(app, "dims", "input dimension for blobs and linreg (default 2)");
  f.add(app, "classes", "number of blobs (default 3)");
  f.add(app, "hidden", "hidden width; 0 for a linear model (default 32)");
  f.add(app, "activation", "relu | tanh (default relu)");
  f.add(app, "probe-samples", "probe directions averaged per delta-sam step (default 1)");
  f.add(app, "oracle-cap", "largest batch accepted by per-instance-sam (default 64)");
  f.add(app, "zero-grad-threshold", "norm below which the ascent step is skipped (default 1e-12)");
  f.add(app, "diagnostics", "record cosine to the per-instance sharpness gradient (true|false)");
  f.add(app, "mc-samples", "Monte-Carlo samples for verify (default 10000)");
  f.add(app, "seeds", "number of seeds for compare (default 10)");
}

void print_summary(const TrainResult& r, const fs::path& dir) {
  std::cout << "run " << dir.string() << ": " << r.steps.size() << " steps, final test metric "
            << format_double(r.eval.final_test_metric) << "\n";
}

int cmd_train(const RunConfig& base, const std::string& out, bool sweep_rho, bool sweep_eta) {
  // Validate every configuration of the sweep before training any of them.
  struct Job {
    RunConfig cfg;
    fs::path dir;
  };
  std::vector<Job> jobs;
  const fs::path root = resolve_run_dir(out, base);
  const std::vector<double> rhos = sweep_rho ? rho_grid() : std::vector<double>{base.rho};
  const std::vector<double> etas = sweep_eta ? eta_grid() : std::vector<double>{base.eta};
  for (double rho : rhos) {
    for (double eta : etas) {
      RunConfig c = base;
      c.rho = rho;
      c.eta = eta;
      validate(c);
      fs::path dir = root;
      if (sweep_rho) dir /= "rho-" + format_double(rho);
      if (sweep_eta) dir /= "eta-" + format_double(eta);
      jobs.push_back({c, dir});
    }
  }
  for (const Job& j : jobs) print_summary(run_training(j.cfg, j.dir), j.dir);
  return exit_ok;
}

int cmd_verify(const RunConfig& cfg, const std::string& out) {
  VerifyOptions opts;
  opts.seed = cfg.seed;
  opts.mc_samples = cfg.mc_samples;
  opts.sigma = cfg.sigma;
  const auto start = std::chrono::steady_clock::now();
  const std::vector<CheckResult> results = run_verification(opts);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const std::string table = format_verify_table(results);
  std::cout << table;
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream(fs::path(out) / "verify.txt") << table;
  }
  bool ok = true;
  for (const CheckResult& r : results) ok = ok && r.passed;
  std::cerr << (ok ? "all checks passed" : "verification FAILED") << " in " << seconds << " s\n";
  return ok ? exit_ok : exit_verify_failed;
}

int cmd_compare(const RunConfig& cfg, const std::string& out) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < cfg.num_seeds; ++i) seeds.push_back(cfg.seed + i);
  const CompareTable t = run_compare(cfg, seeds, compare_modes(cfg));
  const std::string table = format_compare_table(t);
  std::cout << table;
  const fs::path dir =
      out.empty() ? output_root() / ("compare_" + cfg.dataset + "_seed" + std::to_string(cfg.seed))
                  : fs::path(out);
  fs::create_directories(dir);
  std::ofstream(dir / "config.txt") << format_config(cfg);
  std::ofstream(dir / "compare.tsv") << table;
  std::cout << "wrote " << (dir / "compare.tsv").string() << "\n";
  return exit_ok;
}

int cmd_gen_data(const RunConfig& cfg, const std::string& out) {
  validate(cfg);
  if (cfg.dataset == "csv") throw UsageError("gen-data writes synthetic datasets; --dataset csv is an input");
  const DataSplit d = load_dataset(cfg);
  const fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
  fs::create_directories(dir);
  save_csv((dir / "train.csv").string(), d.train);
  save_csv((dir / "test.csv").string(), d.test);
  std::cout << "wrote " << d.train.size() << " training and " << d.test.size() << " test rows ("
            << d.train.provenance << ") to " << dir.string() << "\n";
  return exit_ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sharpness-aware training: base, SAM, delta-SAM and per-instance SAM"};
  app.require_subcommand(1);

  ConfigFlags train_flags, verify_flags, compare_flags, gen_flags;
  std::string out_train, out_verify, out_compare, out_gen;
  bool sweep_rho = false, sweep_eta = false;

  CLI::App* train = app.add_subcommand("train", "train one model and write a run directory");
  add_common_flags(train, train_flags);
  train->add_option("--out", out_train, "run directory (default $SHARPOPT_OUT/<run> or runs/<run>)");
  train->add_flag("--sweep-rho", sweep_rho, "run rho in {0.01, 0.02, 0.05}, one subdirectory each");
  train->add_flag("--sweep-eta", sweep_eta, "run eta in {1e-4, 2e-4, 5e-4, 1e-3}, one subdirectory each");

  CLI::App* verify = app.add_subcommand("verify", "run the invariant battery and print a pass/fail table");
  add_common_flags(verify, verify_flags);
  verify->add_option("--out", out_verify, "also write the table to <out>/verify.txt");

  CLI::App* compare = app.add_subcommand("compare", "train every mode over several seeds");
  add_common_flags(compare, compare_flags);
  compare->add_option("--out", out_compare, "directory for compare.tsv");

  CLI::App* gen = app.add_subcommand("gen-data", "write a synthetic dataset as train.csv / test.csv");
  add_common_flags(gen, gen_flags);
  gen->add_option("--out", out_gen, "output directory (default .)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_usage;
  }

  try {
    if (*train) return cmd_train(train_flags.resolve(), out_train, sweep_rho, sweep_eta);
    if (*verify) return cmd_verify(verify_flags.resolve(), out_verify);
    if (*compare) return cmd_compare(compare_flags.resolve(), out_compare);
    if (*gen) return cmd_gen_data(gen_flags.resolve(), out_gen);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_usage;
  } catch (const ParameterError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_usage;
  } catch (const OracleCapExceeded& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_usage;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_usage;
  } catch (const NumericAbort& e) {
    std::cerr << "numeric abort: " << e.what();
    if (e.last_good()) std::cerr << " (last good step " << e.last_good()->step << ")";
    std::cerr << "\n";
    return exit_numeric_abort;
  }
  return exit_usage;
}
