#include "sharpopt/optimizers.hpp"

#include <algorithm>
#include <cmath>

namespace sharpopt {
namespace {

void require_finite(double loss, const ParamVector& grad, const char* where) {
  if (!std::isfinite(loss)) throw NumericAbort(std::string(where) + ": non-finite loss");
  if (!grad.all_finite()) throw NumericAbort(std::string(where) + ": non-finite gradient");
}

/// Evaluates the outer gradient at w + eps and hands back the exact unperturbed w.
struct OuterGradient {
  ParamVector w;
  LossAndGradient at_perturbed;
};

OuterGradient outer_gradient(const Model& model, const ParamVector& w, const Batch& batch,
                             const ParamVector& eps, PassCounters& counters) {
  const PerturbedWeights perturbed = apply(w, eps);
  LossAndGradient lg = mean_loss_gradient(model, perturbed.weights(), batch, &counters);
  require_finite(lg.loss, lg.gradient, "outer step");
  ParamVector restored = revert(perturbed, eps);
  if (!(restored == w)) throw std::logic_error("perturbation round trip changed the weights");
  return {std::move(restored), std::move(lg)};
}

StepReport make_report(ModeKind kind, const Batch& batch, double mean_loss) {
  StepReport r;
  r.mode = kind;
  r.batch_size = batch.size();
  r.mean_loss = mean_loss;
  return r;
}

}  // namespace

std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw ParameterError("unknown optimizer '" + name + "' (expected sgd or adam)");
}

std::string to_string(ModeKind k) {
  switch (k) {
    case ModeKind::base: return "base";
    case ModeKind::sam: return "sam";
    case ModeKind::delta_sam: return "delta-sam";
    case ModeKind::per_instance_sam: return "per-instance-sam";
  }
  return "unknown";
}

ModeKind parse_mode_kind(const std::string& name) {
  std::string n = name;
  std::replace(n.begin(), n.end(), '_', '-');
  if (n == "base") return ModeKind::base;
  if (n == "sam") return ModeKind::sam;
  if (n == "delta-sam") return ModeKind::delta_sam;
  if (n == "per-instance-sam") return ModeKind::per_instance_sam;
  throw ParameterError("unknown mode '" + name +
                       "' (expected base, sam, delta-sam or per-instance-sam)");
}

PassCounters expected_counters(const TrainerMode& mode, std::size_t n) {
  const auto nn = static_cast<std::int64_t>(n);
  switch (mode.kind) {
    case ModeKind::base: return {1, 0, 1, nn};
    case ModeKind::sam: return {2, 0, 2, 2 * nn};
    case ModeKind::delta_sam: {
      const auto k = static_cast<std::int64_t>(mode.probe_samples);
      return {2, 3 * k, 2, (2 + 3 * k) * nn};
    }
    case ModeKind::per_instance_sam: return {2 * nn, 0, 2 * nn, 2 * nn};
  }
  return {};
}

OptimizerState::OptimizerState(OptimizerConfig cfg) : cfg_(cfg) {
  if (!(cfg_.learning_rate > 0.0)) throw ParameterError("learning rate must be positive");
}

ParamVector OptimizerState::update(const ParamVector& w, const ParamVector& grad) {
  ++step_count_;
  if (cfg_.kind == OptimizerKind::sgd) return w - cfg_.learning_rate * grad;

  if (!m_) {
    m_ = ParamVector(w.layout_ptr(), 0.0);
    v_ = ParamVector(w.layout_ptr(), 0.0);
  }
  ParamVector out = w;
  const double t = static_cast<double>(step_count_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t i = 0; i < w.dim(); ++i) {
    const double g = grad[i];
    (*m_)[i] = cfg_.beta1 * (*m_)[i] + (1.0 - cfg_.beta1) * g;
    (*v_)[i] = cfg_.beta2 * (*v_)[i] + (1.0 - cfg_.beta2) * g * g;
    const double mhat = (*m_)[i] / bc1;
    const double vhat = (*v_)[i] / bc2;
    out[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon);
  }
  return out;
}

StepOutcome base_step(OptimizerState& state, const Model& model, const ParamVector& w,
                      const Batch& batch) {
  PassCounters c;
  LossAndGradient lg = mean_loss_gradient(model, w, batch, &c);
  require_finite(lg.loss, lg.gradient, "base step");
  StepReport r = make_report(ModeKind::base, batch, lg.loss);
  r.counters = c;
  return {state.update(w, lg.gradient), r};
}

StepOutcome sam_step(OptimizerState& state, const Model& model, const ParamVector& w,
                     const Batch& batch, const PerturbConfig& cfg, bool diagnostics) {
  cfg.validate();
  PassCounters c;
  LossAndGradient lg = mean_loss_gradient(model, w, batch, &c);
  require_finite(lg.loss, lg.gradient, "sam ascent");
  StepReport r = make_report(ModeKind::sam, batch, lg.loss);

  ParamVector eps;
  try {
    eps = normalize_to_ball(lg.gradient, cfg.rho, cfg.zero_grad_threshold);
  } catch (const ZeroGradient&) {
    r.perturbation_skipped = true;
    r.counters = c;
    return {state.update(w, lg.gradient), r};
  }
  OuterGradient outer = outer_gradient(model, w, batch, eps, c);
  r.perturbation_norm = norm2(eps);
  r.counters = c;
  if (diagnostics) {
    r.diagnostic_cosine = cosine(eps, per_instance_sharpness_gradient(model, w, batch, cfg));
  }
  return {state.update(outer.w, outer.at_perturbed.gradient), r};
}

StepOutcome delta_sam_step(OptimizerState& state, const Model& model, const ParamVector& w,
                           const Batch& batch, const TrainerMode& mode, Rng& rng) {
  mode.perturb.validate();
  if (mode.probe_samples == 0) throw ParameterError("probe_samples must be at least 1");
  PassCounters c;
  const std::size_t n = batch.size();

  InstanceWeights g;
  g.eta = mode.eta;
  g.g.assign(n, 0.0);
  double mean_loss = 0.0;
  for (std::size_t k = 0; k < mode.probe_samples; ++k) {
    const ParamVector r = random_direction(rng, w.layout_ptr(), mode.perturb.rho);
    const ProbeLosses p = probe(model, w, batch, r, &c);
    if (k == 0) mean_loss = p.l0.mean();
    const InstanceWeights gk = instance_weights(p, mode.eta);
    for (std::size_t i = 0; i < n; ++i) g.g[i] += gk.g[i];
  }
  if (!std::isfinite(mean_loss)) throw NumericAbort("delta-sam probe: non-finite loss");
  for (double& v : g.g) v /= static_cast<double>(mode.probe_samples);
  if (!std::all_of(g.g.begin(), g.g.end(), [](double v) { return std::isfinite(v); })) {
    throw NumericAbort("delta-sam probe: non-finite instance weight");
  }

  StepReport report = make_report(ModeKind::delta_sam, batch, mean_loss);
  if (g.all_zero()) {
    g.g.assign(n, 1.0 / static_cast<double>(n));
    report.uniform_fallback = true;
  }
  report.g_summary = WeightSummary{g.min(), g.mean(), g.max()};

  ParamVector eps;
  try {
    eps = delta_sam_direction(model, w, batch, g, mode.perturb, &c);
  } catch (const ZeroGradient&) {
    LossAndGradient lg = mean_loss_gradient(model, w, batch, &c);
    require_finite(lg.loss, lg.gradient, "delta-sam fallback");
    report.perturbation_skipped = true;
    report.counters = c;
    return {state.update(w, lg.gradient), report};
  }
  OuterGradient outer = outer_gradient(model, w, batch, eps, c);
  report.perturbation_norm = norm2(eps);
  report.counters = c;
  if (mode.diagnostics) {
    report.diagnostic_cosine =
        cosine(eps, per_instance_sharpness_gradient(model, w, batch, mode.perturb));
  }
  return {state.update(outer.w, outer.at_perturbed.gradient), report};
}

StepOutcome per_instance_sam_step(OptimizerState& state, const Model& model, const ParamVector& w,
                                  const Batch& batch, const PerturbConfig& cfg,
                                  std::size_t oracle_cap) {
  cfg.validate();
  batch.validate();
  const std::size_t n = batch.size();
  if (n > oracle_cap) {
    throw OracleCapExceeded("per-instance SAM runs 2N forward/backward passes; batch size " +
                            std::to_string(n) + " exceeds the cap of " +
                            std::to_string(oracle_cap) +
                            " (use a smaller --batch-size or the sam/delta-sam modes)");
  }
  PassCounters c;
  ParamVector outer_sum(w.layout_ptr(), 0.0);
  double loss_sum = 0.0;
  double eps_norm_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    LossAndGradient lg = instance_loss_gradient(model, w, batch, i, &c);
    require_finite(lg.loss, lg.gradient, "per-instance ascent");
    loss_sum += lg.loss;
    ParamVector eps(w.layout_ptr(), 0.0);
    try {
      eps = normalize_to_ball(lg.gradient, cfg.rho, cfg.zero_grad_threshold);
    } catch (const ZeroGradient&) {
      // A fitted instance has no adversarial direction; eps_i stays zero.
    }
    eps_norm_sum += norm2(eps);
    const PerturbedWeights perturbed = apply(w, eps);
    LossAndGradient outer = instance_loss_gradient(model, perturbed.weights(), batch, i, &c);
    require_finite(outer.loss, outer.gradient, "per-instance outer step");
    if (!(revert(perturbed, eps) == w)) {
      throw std::logic_error("perturbation round trip changed the weights");
    }
    outer_sum += outer.gradient;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  StepReport r = make_report(ModeKind::per_instance_sam, batch, loss_sum * inv_n);
  r.perturbation_norm = eps_norm_sum * inv_n;
  r.counters = c;
  return {state.update(w, outer_sum * inv_n), r};
}

StepOutcome train_step(OptimizerState& state, const Model& model, const ParamVector& w,
                       const Batch& batch, const TrainerMode& mode, Rng& rng) {
  switch (mode.kind) {
    case ModeKind::base: return base_step(state, model, w, batch);
    case ModeKind::sam: return sam_step(state, model, w, batch, mode.perturb, mode.diagnostics);
    case ModeKind::delta_sam: return delta_sam_step(state, model, w, batch, mode, rng);
    case ModeKind::per_instance_sam:
      return per_instance_sam_step(state, model, w, batch, mode.perturb, mode.oracle_cap);
  }
  throw ParameterError("unknown trainer mode");
}

ParamVector per_instance_sharpness_gradient(const Model& model, const ParamVector& w,
                                            const Batch& batch, const PerturbConfig& cfg) {
  ParamVector acc(w.layout_ptr(), 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const LossAndGradient at_w = instance_loss_gradient(model, w, batch, i);
    ParamVector eps;
    try {
      eps = normalize_to_ball(at_w.gradient, cfg.rho, cfg.zero_grad_threshold);
    } catch (const ZeroGradient&) {
      continue;
    }
    acc += instance_loss_gradient(model, w + eps, batch, i).gradient;
    acc -= at_w.gradient;
  }
  return acc * (1.0 / static_cast<double>(batch.size()));
}

// ---------------------------------------------------------------------------

Evaluation evaluate(const Mlp& model, const ParamVector& w, const Dataset& data) {
  const Batch all = data.all();
  Evaluation e;
  const LossVector losses = per_instance_losses(model, w, all, false);
  e.loss = losses.mean();
  if (data.task == Task::regression) {
    e.metric = e.loss;
    return e;
  }
  const Tensor logits = forward(model, w, all.inputs, false);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    if (static_cast<double>(best) == all.targets[i]) ++correct;
  }
  e.metric = static_cast<double>(correct) / static_cast<double>(logits.rows());
  return e;
}

TrainResult train(const TrainConfig& config, const Mlp& model, const Dataset& train_set,
                  const Dataset& test_set, const TrainCallbacks& callbacks) {
  if (config.batch_size == 0) throw ParameterError("batch size must be positive");
  if (config.mode.kind == ModeKind::per_instance_sam && config.batch_size > config.mode.oracle_cap) {
    throw OracleCapExceeded("per-instance SAM is the expensive reference; batch size " +
                            std::to_string(config.batch_size) + " exceeds the cap of " +
                            std::to_string(config.mode.oracle_cap));
  }
  config.mode.perturb.validate();
  const Rng root(config.seed);
  Rng init_rng = root.fork(1);
  Rng shuffle_rng = root.fork(2);
  Rng probe_rng = root.fork(3);

  TrainResult result;
  result.eval.task = train_set.task;
  ParamVector w = model.init(init_rng);
  OptimizerState state(config.optimizer);
  std::optional<StepReport> last_good;
  std::int64_t step = 0;
  PassCounters totals;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (const Batch& batch : batches(train_set, config.batch_size, shuffle_rng, config.shuffle)) {
      StepOutcome out;
      try {
        out = train_step(state, model, w, batch, config.mode, probe_rng);
      } catch (const NumericAbort& e) {
        throw NumericAbort(e.what(), last_good);
      }
      if (!out.w.all_finite()) throw NumericAbort("update produced non-finite weights", last_good);
      if (!out.report.perturbation_skipped &&
          !(out.report.counters == expected_counters(config.mode, batch.size()))) {
        throw std::logic_error("pass counters of " + to_string(config.mode.kind) +
                               " step broke the mode's cost contract");
      }
      w = std::move(out.w);
      out.report.step = ++step;
      out.report.epoch = static_cast<std::int64_t>(epoch);
      totals += out.report.counters;
      if (callbacks.on_step) callbacks.on_step(out.report);
      last_good = out.report;
      result.steps.push_back(std::move(out.report));
    }
    const Evaluation tr = evaluate(model, w, train_set);
    const Evaluation te = evaluate(model, w, test_set);
    EpochReport er{static_cast<std::int64_t>(epoch), tr.loss, te.loss, tr.metric, te.metric};
    if (callbacks.on_epoch) callbacks.on_epoch(er);
    result.eval.epochs.push_back(er);
  }

  if (!result.eval.epochs.empty()) {
    result.eval.final_train_metric = result.eval.epochs.back().train_metric;
    result.eval.final_test_metric = result.eval.epochs.back().test_metric;
  }
  if (step > 0) {
    const double s = static_cast<double>(step);
    result.eval.mean_fwd_recorded = static_cast<double>(totals.fwd_recorded) / s;
    result.eval.mean_fwd_unrecorded = static_cast<double>(totals.fwd_unrecorded) / s;
    result.eval.mean_bwd = static_cast<double>(totals.bwd) / s;
  }
  result.w = std::move(w);
  return result;
}

}  // namespace sharpopt
