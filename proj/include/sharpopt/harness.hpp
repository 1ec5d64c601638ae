#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sharpopt/data.hpp"
#include "sharpopt/optimizers.hpp"

namespace sharpopt {

/// Bad flags, bad config values or invalid combinations. Maps to exit code 2.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum ExitCode : int { exit_ok = 0, exit_verify_failed = 1, exit_usage = 2, exit_numeric_abort = 3 };

const std::vector<double>& rho_grid();  // 0.01, 0.02, 0.05
const std::vector<double>& eta_grid();  // 1e-4, 2e-4, 5e-4, 1e-3

struct RunConfig {
  ModeKind mode = ModeKind::base;
  double rho = 0.05;
  double eta = 1e-4;
  /// Probe scale for the Monte-Carlo estimators. Training probes are drawn with
  /// unit variance and rescaled to norm rho, so sigma cancels there.
  double sigma = 1.0;
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 0.01;
  std::size_t batch_size = 32;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;

  std::string dataset = "two-moons";  // two-moons | blobs | linreg | csv
  std::size_t n_train = 512;
  std::size_t n_test = 512;
  double noise = 0.2;
  std::size_t dims = 2;     // input dimension for blobs / linreg
  std::size_t classes = 3;  // blobs only
  std::string csv;
  std::string test_csv;
  std::string target_column = "target";
  Task task = Task::classification;

  std::size_t hidden = 32;  // 0 gives a linear model
  Activation activation = Activation::relu;

  std::size_t probe_samples = 1;
  std::size_t oracle_cap = 64;
  double zero_grad_threshold = 1e-12;
  bool diagnostics = false;

  std::size_t mc_samples = 10000;
  std::size_t num_seeds = 10;
};

/// Every field as key=value pairs, in a fixed order; feeding them back through
/// set_config_value reproduces the config.
std::vector<std::pair<std::string, std::string>> to_key_values(const RunConfig& cfg);
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
/// key=value lines; blank lines and lines starting with '#' are skipped.
void apply_config_file(RunConfig& cfg, const std::string& path);
std::string format_config(const RunConfig& cfg);

/// Rejects invalid combinations before any compute happens.
void validate(const RunConfig& cfg);

TrainConfig to_train_config(const RunConfig& cfg);
DataSplit load_dataset(const RunConfig& cfg);
Mlp build_model(const RunConfig& cfg, const Dataset& train_set);

/// One tab-separated line of key=value pairs (no trailing newline).
std::string format_step_record(const StepReport& r);
std::map<std::string, std::string> parse_record(const std::string& line);

/// $SHARPOPT_OUT if set, else "runs".
std::filesystem::path output_root();
/// Explicit --out wins, then output_root()/<run name>.
std::filesystem::path resolve_run_dir(const std::string& out_flag, const RunConfig& cfg);
std::string run_name(const RunConfig& cfg);

struct RunFiles {
  std::filesystem::path dir;
  std::filesystem::path config;   // config.txt
  std::filesystem::path metrics;  // metrics.tsv
  std::filesystem::path summary;  // summary.txt
};

RunFiles run_files(const std::filesystem::path& dir);

/// Trains and writes config echo, metrics stream and summary into `dir`. On a
/// numeric abort the summary records the failure before the exception propagates.
TrainResult run_training(const RunConfig& cfg, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Method comparison

struct CompareRow {
  ModeKind mode = ModeKind::base;
  std::vector<double> test_metric;  // one per seed
  double mean = 0.0;
  double stddev = 0.0;
  double fwd_recorded = 0.0;  // mean per step
  double fwd_unrecorded = 0.0;
  double bwd = 0.0;
  /// Seeds where this mode's test metric is at least base's (higher-is-better
  /// metrics) or at most base's (regression).
  std::size_t seeds_not_worse_than_base = 0;
};

struct CompareTable {
  Task task = Task::classification;
  std::vector<std::uint64_t> seeds;
  std::vector<CompareRow> rows;
  const CompareRow* row(ModeKind k) const;
};

/// Modes compared by default: base, sam, delta-sam, and per-instance-sam when
/// the batch fits under the oracle cap.
std::vector<ModeKind> compare_modes(const RunConfig& cfg);
CompareTable run_compare(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds,
                         const std::vector<ModeKind>& modes);
/// TSV with a header row; doubles are written round-trip exact.
std::string format_compare_table(const CompareTable& t);

// ---------------------------------------------------------------------------
// Verification battery

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  std::size_t mc_samples = 10000;
  double sigma = 1.0;
};

/// Relative tolerance on a_hat in the estimator check: 2% at 10^4 samples,
/// shrinking as 1/sqrt(n) down to 1%.
double estimator_tolerance(std::size_t mc_samples);

std::vector<CheckResult> run_verification(const VerifyOptions& opts);
std::string format_verify_table(const std::vector<CheckResult>& results);

}  // namespace sharpopt
