#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sharpopt/data.hpp"
#include "sharpopt/models.hpp"
#include "sharpopt/param_vector.hpp"
#include "sharpopt/perturbation.hpp"
#include "sharpopt/reweighting.hpp"
#include "sharpopt/rng.hpp"

namespace sharpopt {

enum class OptimizerKind { sgd, adam };

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer_kind(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static OptimizerConfig sgd(double lr = 0.1) { return {OptimizerKind::sgd, lr}; }
  static OptimizerConfig adam(double lr = 1e-3) { return {OptimizerKind::adam, lr}; }
};

/// Outer minimizer. Moments start at zero and are created on the first update.
class OptimizerState {
 public:
  explicit OptimizerState(OptimizerConfig cfg = {});

  const OptimizerConfig& config() const { return cfg_; }
  std::int64_t step_count() const { return step_count_; }
  const std::optional<ParamVector>& first_moment() const { return m_; }
  const std::optional<ParamVector>& second_moment() const { return v_; }

  /// One optimizer update of w along `grad`.
  ParamVector update(const ParamVector& w, const ParamVector& grad);

 private:
  OptimizerConfig cfg_;
  std::optional<ParamVector> m_;
  std::optional<ParamVector> v_;
  std::int64_t step_count_ = 0;
};

enum class ModeKind { base, sam, delta_sam, per_instance_sam };

std::string to_string(ModeKind k);
/// Accepts "base", "sam", "delta-sam", "per-instance-sam" (underscores also accepted).
ModeKind parse_mode_kind(const std::string& name);

struct TrainerMode {
  ModeKind kind = ModeKind::base;
  PerturbConfig perturb;
  double eta = 1e-4;
  /// Largest batch the per-instance reference accepts.
  std::size_t oracle_cap = 64;
  /// Shared probe directions averaged into the instance weights; 1 is the
  /// production setting, larger values are for verification.
  std::size_t probe_samples = 1;
  /// Compute cosine(eps*, per-instance sharpness gradient) each step. The
  /// extra passes are not counted.
  bool diagnostics = false;
};

/// Nonzero counts expected for one step of `kind` on a batch of n.
PassCounters expected_counters(const TrainerMode& mode, std::size_t n);

struct WeightSummary {
  double min = 0.0;
  double mean = 0.0;
  double max = 0.0;
};

struct StepReport {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  ModeKind mode = ModeKind::base;
  std::size_t batch_size = 0;
  double mean_loss = 0.0;
  /// ||eps*||; for per-instance SAM the mean of ||eps_i||.
  double perturbation_norm = 0.0;
  std::optional<WeightSummary> g_summary;
  PassCounters counters;
  std::optional<double> diagnostic_cosine;
  /// Ascent direction vanished; the step fell back to a plain update.
  bool perturbation_skipped = false;
  /// All instance weights were zero; uniform weights were used.
  bool uniform_fallback = false;
};

struct StepOutcome {
  ParamVector w;
  StepReport report;
};

/// Non-finite loss or gradient. Carries the last report that was fine.
class NumericAbort : public std::runtime_error {
 public:
  NumericAbort(const std::string& what, std::optional<StepReport> last_good = std::nullopt)
      : std::runtime_error(what), last_good_(std::move(last_good)) {}
  const std::optional<StepReport>& last_good() const { return last_good_; }

 private:
  std::optional<StepReport> last_good_;
};

/// The per-instance reference refuses batches above its cap.
class OracleCapExceeded : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

StepOutcome base_step(OptimizerState& state, const Model& model, const ParamVector& w,
                      const Batch& batch);

StepOutcome sam_step(OptimizerState& state, const Model& model, const ParamVector& w,
                     const Batch& batch, const PerturbConfig& cfg, bool diagnostics = false);

StepOutcome delta_sam_step(OptimizerState& state, const Model& model, const ParamVector& w,
                           const Batch& batch, const TrainerMode& mode, Rng& rng);

StepOutcome per_instance_sam_step(OptimizerState& state, const Model& model, const ParamVector& w,
                                  const Batch& batch, const PerturbConfig& cfg,
                                  std::size_t oracle_cap = 64);

/// Dispatches on mode.kind.
StepOutcome train_step(OptimizerState& state, const Model& model, const ParamVector& w,
                       const Batch& batch, const TrainerMode& mode, Rng& rng);

/// (1/N) sum_i [grad l_i(w + eps_i) - grad l_i(w)] with eps_i the per-instance
/// ascent steps. Not counted; used for diagnostics.
ParamVector per_instance_sharpness_gradient(const Model& model, const ParamVector& w,
                                            const Batch& batch, const PerturbConfig& cfg);

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  TrainerMode mode;
  OptimizerConfig optimizer;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  bool shuffle = true;
};

struct EpochReport {
  std::int64_t epoch = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  /// Accuracy for classification, mean squared error for regression.
  double train_metric = 0.0;
  double test_metric = 0.0;
};

struct EvalReport {
  Task task = Task::classification;
  std::vector<EpochReport> epochs;
  double final_train_metric = 0.0;
  double final_test_metric = 0.0;
  /// Average per-step counters over the run.
  double mean_fwd_recorded = 0.0;
  double mean_fwd_unrecorded = 0.0;
  double mean_bwd = 0.0;
};

struct TrainResult {
  ParamVector w;
  std::vector<StepReport> steps;
  EvalReport eval;
};

struct TrainCallbacks {
  std::function<void(const StepReport&)> on_step;
  std::function<void(const EpochReport&)> on_epoch;
};

struct Evaluation {
  double loss = 0.0;
  double metric = 0.0;
};

/// Mean loss plus accuracy (classification) or mean squared error (regression).
Evaluation evaluate(const Mlp& model, const ParamVector& w, const Dataset& data);

/// Fixed epoch budget. Weights come from model.init with the seed's init stream.
/// Throws NumericAbort on a non-finite loss.
TrainResult train(const TrainConfig& config, const Mlp& model, const Dataset& train_set,
                  const Dataset& test_set, const TrainCallbacks& callbacks = {});

}  // namespace sharpopt
