#include "doctest.h"

#include <cmath>

#include "sharpopt/optimizers.hpp"
#include "sharpopt/quadratic_oracle.hpp"

using namespace sharpopt;

namespace {

/// With plain SGD at lr = 1 the update is w - grad, so the outer gradient is w - w'.
ParamVector outer_gradient_of(const StepOutcome& out, const ParamVector& w) { return w - out.w; }

OptimizerState unit_sgd() { return OptimizerState(OptimizerConfig::sgd(1.0)); }

Batch duplicated_batch(Rng& rng, std::size_t copies) {
  Batch one;
  one.inputs = Tensor(Shape{1, 3});
  for (double& v : one.inputs.data()) v = rng.normal();
  one.targets = Tensor::vector({1.0});
  one.instance_ids = {0};
  const std::vector<std::size_t> rows(copies, 0);
  return one.select(rows);
}

Batch random_batch(Rng& rng, std::size_t n) {
  Batch b;
  b.inputs = Tensor(Shape{n, 3});
  for (double& v : b.inputs.data()) v = rng.normal();
  b.targets = Tensor(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    b.targets[i] = static_cast<double>(rng.below(2));
    b.instance_ids.push_back(i);
  }
  return b;
}

TrainerMode mode_of(ModeKind k) {
  TrainerMode m;
  m.kind = k;
  return m;
}

}  // namespace

TEST_CASE("sgd step on w^T w") {
  OptimizerState s(OptimizerConfig::sgd(0.1));
  const ParamVector w = ParamVector::from_values({1.0, 0.0});
  const ParamVector next = s.update(w, 2.0 * w);
  CHECK(next[0] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(next[1] == 0.0);
  CHECK(s.step_count() == 1);
  const ParamVector zero(w.layout_ptr(), 0.0);
  CHECK(s.update(w, zero) == w);
}

TEST_CASE("first adam step moves every coordinate by the learning rate") {
  Rng rng(3);
  OptimizerState s(OptimizerConfig::adam(0.01));
  const ParamVector w = gaussian_vector(rng, ParamLayout::flat(50), 1.0);
  // Coordinates well above epsilon_adam, so lr |g| / (|g| + eps) is lr to 1e-9.
  ParamVector g = gaussian_vector(rng, ParamLayout::flat(50), 1.0);
  for (std::size_t i = 0; i < g.dim(); ++i) g[i] += g[i] < 0.0 ? -0.5 : 0.5;
  const ParamVector next = s.update(w, g);
  for (std::size_t i = 0; i < w.dim(); ++i) {
    const double expected = 0.01 * std::abs(g[i]) / (std::abs(g[i]) + 1e-8);
    CHECK(std::abs(std::abs(next[i] - w[i]) - expected) < 1e-15);
    CHECK(std::abs(std::abs(next[i] - w[i]) - 0.01) < 1e-9);
    CHECK((next[i] - w[i]) * g[i] < 0.0);
  }
  REQUIRE(s.first_moment().has_value());
  CHECK(s.step_count() == 1);
}

TEST_CASE("optimizer names") {
  CHECK(parse_optimizer_kind("sgd") == OptimizerKind::sgd);
  CHECK(parse_optimizer_kind("adam") == OptimizerKind::adam);
  CHECK_THROWS_AS(parse_optimizer_kind("rmsprop"), ParameterError);
  CHECK_THROWS_AS(OptimizerState(OptimizerConfig::sgd(0.0)), ParameterError);
  for (ModeKind k : {ModeKind::base, ModeKind::sam, ModeKind::delta_sam, ModeKind::per_instance_sam}) {
    CHECK(parse_mode_kind(to_string(k)) == k);
  }
  CHECK(parse_mode_kind("delta_sam") == ModeKind::delta_sam);
  CHECK_THROWS_AS(parse_mode_kind("asam"), ParameterError);
}

TEST_CASE("sam outer gradient on a quadratic is grad l + H eps") {
  Rng rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    const QuadraticProblem p = QuadraticProblem::random(rng, 1 + rng.below(4), 6);
    const PerturbConfig cfg{0.1, 1e-12};
    OptimizerState s = unit_sgd();
    const ParamVector& w = p.anchor();
    const StepOutcome out = sam_step(s, p.model(), w, p.batch(), cfg);
    const ParamVector mean_grad = p.mean_gradient();
    const ParamVector eps = (cfg.rho / norm2(mean_grad)) * mean_grad;
    ParamVector expected = mean_grad;
    for (std::size_t i = 0; i < p.size(); ++i) {
      expected.axpy(p.a(i) * dot(p.b(i), eps) / static_cast<double>(p.size()), p.b(i));
    }
    CHECK(max_abs_diff(outer_gradient_of(out, w), expected) < 1e-9);
    CHECK(out.report.perturbation_norm == doctest::Approx(cfg.rho).epsilon(1e-12));
  }
}

TEST_CASE("all perturbing modes agree on a batch of identical instances") {
  const Mlp model({{3, 8, 2}, Activation::tanh, OutputHead::softmax_xent});
  Rng rng(6);
  const ParamVector w = model.init(rng);
  const Batch batch = duplicated_batch(rng, 5);
  const PerturbConfig cfg{0.05, 1e-12};
  OptimizerState s1 = unit_sgd(), s2 = unit_sgd(), s3 = unit_sgd();
  TrainerMode dm = mode_of(ModeKind::delta_sam);
  dm.perturb = cfg;
  Rng probe_rng(1);
  const ParamVector sam = sam_step(s1, model, w, batch, cfg).w;
  const StepOutcome delta = delta_sam_step(s2, model, w, batch, dm, probe_rng);
  const ParamVector inst = per_instance_sam_step(s3, model, w, batch, cfg).w;
  CHECK(max_abs_diff(sam, delta.w) < 1e-10);
  CHECK(max_abs_diff(sam, inst) < 1e-10);
  REQUIRE(delta.report.g_summary.has_value());
  CHECK(delta.report.g_summary->min == delta.report.g_summary->max);
}

TEST_CASE("all-zero instance weights fall back to the sam step") {
  // Linear losses have a vanishing second difference, so every weight is zero.
  Rng rng(21);
  std::vector<std::vector<double>> b(4, std::vector<double>(5));
  for (auto& row : b) {
    for (double& v : row) v = rng.normal();
  }
  const QuadraticProblem p = QuadraticProblem::from_gradients(b, {0.0, 0.0, 0.0, 0.0}, true);
  TrainerMode dm = mode_of(ModeKind::delta_sam);
  OptimizerState s1 = unit_sgd(), s2 = unit_sgd();
  Rng probe_rng(2);
  const StepOutcome delta = delta_sam_step(s1, p.model(), p.anchor(), p.batch(), dm, probe_rng);
  CHECK(delta.report.uniform_fallback);
  CHECK(max_abs_diff(delta.w, sam_step(s2, p.model(), p.anchor(), p.batch(), dm.perturb).w) <
        1e-10);
}

TEST_CASE("per-instance sam on a single instance is sam") {
  const Mlp model({{3, 8, 2}, Activation::relu, OutputHead::softmax_xent});
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const ParamVector w = model.init(rng);
    const Batch batch = random_batch(rng, 1);
    OptimizerState s1 = unit_sgd(), s2 = unit_sgd();
    const PerturbConfig cfg{0.05, 1e-12};
    CHECK(max_abs_diff(sam_step(s1, model, w, batch, cfg).w,
                       per_instance_sam_step(s2, model, w, batch, cfg).w) < 1e-12);
  }
}

TEST_CASE("sam approaches the base step as rho goes to zero") {
  const Mlp model({{3, 8, 2}, Activation::tanh, OutputHead::softmax_xent});
  Rng rng(8);
  const ParamVector w = model.init(rng);
  const Batch batch = random_batch(rng, 6);
  OptimizerState s1(OptimizerConfig::sgd(0.1)), s2(OptimizerConfig::sgd(0.1));
  const ParamVector base = base_step(s1, model, w, batch).w;
  const ParamVector sam = sam_step(s2, model, w, batch, {1e-12, 1e-300}).w;
  CHECK(max_abs_diff(base, sam) < 1e-8);
}

TEST_CASE("sam with a tripped zero-gradient threshold is the base step") {
  const Mlp model({{3, 8, 2}, Activation::tanh, OutputHead::softmax_xent});
  Rng rng(9);
  const ParamVector w = model.init(rng);
  const Batch batch = random_batch(rng, 6);
  OptimizerState s1(OptimizerConfig::adam(0.01)), s2(OptimizerConfig::adam(0.01));
  const StepOutcome base = base_step(s1, model, w, batch);
  const StepOutcome sam = sam_step(s2, model, w, batch, {0.05, 1e300});
  CHECK(sam.report.perturbation_skipped);
  CHECK(sam.w == base.w);
  CHECK(sam.report.counters == base.report.counters);
}

TEST_CASE("pass counters follow each mode's contract") {
  const Mlp model({{3, 8, 2}, Activation::relu, OutputHead::softmax_xent});
  Rng rng(10);
  const ParamVector w = model.init(rng);
  const Batch batch = random_batch(rng, 9);
  for (ModeKind k : {ModeKind::base, ModeKind::sam, ModeKind::delta_sam, ModeKind::per_instance_sam}) {
    CAPTURE(to_string(k));
    OptimizerState s;
    Rng probe_rng(3);
    const TrainerMode m = mode_of(k);
    const StepReport r = train_step(s, model, w, batch, m, probe_rng).report;
    CHECK(r.counters == expected_counters(m, 9));
  }
  CHECK(expected_counters(mode_of(ModeKind::base), 9) == PassCounters{1, 0, 1, 9});
  CHECK(expected_counters(mode_of(ModeKind::sam), 9) == PassCounters{2, 0, 2, 18});
  CHECK(expected_counters(mode_of(ModeKind::delta_sam), 9) == PassCounters{2, 3, 2, 45});
  CHECK(expected_counters(mode_of(ModeKind::per_instance_sam), 9) == PassCounters{18, 0, 18, 18});
}

TEST_CASE("per-instance sam refuses batches above its cap") {
  const Mlp model({{3, 2}, Activation::relu, OutputHead::softmax_xent});
  Rng rng(11);
  const ParamVector w = model.init(rng);
  OptimizerState s;
  CHECK_THROWS_AS(per_instance_sam_step(s, model, w, random_batch(rng, 65), {}), OracleCapExceeded);
  CHECK_NOTHROW(per_instance_sam_step(s, model, w, random_batch(rng, 64), {}));

  const DataSplit data = two_moons_split(200, 50, 0.1, 0);
  TrainConfig cfg;
  cfg.mode = mode_of(ModeKind::per_instance_sam);
  cfg.batch_size = 128;
  CHECK_THROWS_AS(train(cfg, Mlp({{2, 4, 2}, Activation::relu, OutputHead::softmax_xent}),
                        data.train, data.test),
                  OracleCapExceeded);
}

TEST_CASE("per-instance sam outer gradient splits into loss and sharpness parts") {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const QuadraticProblem p = QuadraticProblem::random(rng, 2 + rng.below(6), 8);
    const double rho = 0.1;
    OptimizerState s = unit_sgd();
    const StepOutcome out = per_instance_sam_step(s, p.model(), p.anchor(), p.batch(), {rho, 1e-12});
    const ParamVector sharp = outer_gradient_of(out, p.anchor()) - p.mean_gradient();
    CHECK(max_abs_diff(sharp, grad_r_inst(p, rho)) < 1e-9);
    CHECK(max_abs_diff(per_instance_sharpness_gradient(p.model(), p.anchor(), p.batch(), {rho, 1e-12}),
                       grad_r_inst(p, rho)) < 1e-9);
  }
}

TEST_CASE("delta-sam points closer to the per-instance sharpness gradient than sam (a = (1, 2))") {
  const QuadraticProblem p = QuadraticProblem::from_gradients({{1.0, 0.0}, {0.0, 1.0}}, {1.0, 2.0});
  TrainerMode dm = mode_of(ModeKind::delta_sam);
  dm.perturb = {1.0, 1e-12};
  dm.diagnostics = true;
  // In two dimensions a single probe is very noisy; average the weights over many probes.
  dm.probe_samples = 256;
  OptimizerState s1 = unit_sgd(), s2 = unit_sgd();
  Rng probe_rng(4);
  const StepReport delta =
      delta_sam_step(s1, p.model(), p.anchor(), p.batch(), dm, probe_rng).report;
  const StepReport sam = sam_step(s2, p.model(), p.anchor(), p.batch(), dm.perturb, true).report;
  REQUIRE(delta.diagnostic_cosine.has_value());
  REQUIRE(sam.diagnostic_cosine.has_value());
  CHECK(*sam.diagnostic_cosine == doctest::Approx(3.0 / std::sqrt(10.0)).epsilon(1e-12));
  CHECK(*delta.diagnostic_cosine > *sam.diagnostic_cosine);
  CHECK(delta.counters == expected_counters(dm, 2));
}

TEST_CASE("two-moons base training reaches 90% test accuracy") {
  const DataSplit data = two_moons_split(500, 500, 0.1, 0);
  TrainConfig cfg;
  cfg.optimizer = OptimizerConfig::adam(0.01);
  cfg.epochs = 200;
  const TrainResult r =
      train(cfg, Mlp({{2, 32, 2}, Activation::relu, OutputHead::softmax_xent}), data.train, data.test);
  MESSAGE("test accuracy " << r.eval.final_test_metric);
  CHECK(r.eval.final_test_metric > 0.90);
  CHECK(r.eval.mean_fwd_recorded == 1.0);
  CHECK(r.eval.mean_bwd == 1.0);
}

TEST_CASE("training is deterministic for every mode") {
  const DataSplit data = two_moons_split(120, 60, 0.15, 3);
  const Mlp model({{2, 8, 2}, Activation::tanh, OutputHead::softmax_xent});
  for (ModeKind k : {ModeKind::base, ModeKind::sam, ModeKind::delta_sam, ModeKind::per_instance_sam}) {
    TrainConfig cfg;
    cfg.mode = mode_of(k);
    cfg.epochs = 2;
    cfg.batch_size = 16;
    cfg.seed = 13;
    const TrainResult a = train(cfg, model, data.train, data.test);
    const TrainResult b = train(cfg, model, data.train, data.test);
    CHECK(a.w == b.w);
    REQUIRE(a.steps.size() == b.steps.size());
    for (std::size_t i = 0; i < a.steps.size(); ++i) {
      CHECK(a.steps[i].mean_loss == b.steps[i].mean_loss);
      CHECK(a.steps[i].perturbation_norm == b.steps[i].perturbation_norm);
    }
  }
}

TEST_CASE("a tripped threshold makes a sam run identical to a base run") {
  const DataSplit data = two_moons_split(100, 50, 0.1, 5);
  const Mlp model({{2, 8, 2}, Activation::relu, OutputHead::softmax_xent});
  TrainConfig base;
  base.epochs = 3;
  base.seed = 2;
  TrainConfig sam = base;
  sam.mode.kind = ModeKind::sam;
  sam.mode.perturb.zero_grad_threshold = 1e300;
  const TrainResult a = train(base, model, data.train, data.test);
  const TrainResult b = train(sam, model, data.train, data.test);
  CHECK(a.w == b.w);
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    CHECK(b.steps[i].perturbation_skipped);
    CHECK(a.steps[i].mean_loss == b.steps[i].mean_loss);
    CHECK(a.steps[i].counters == b.steps[i].counters);
  }
}

TEST_CASE("delta-sam weights stay finite and nonnegative during training") {
  const DataSplit data = two_moons_split(200, 50, 0.1, 6);
  TrainConfig cfg;
  cfg.mode.kind = ModeKind::delta_sam;
  cfg.epochs = 3;
  const TrainResult r =
      train(cfg, Mlp({{2, 16, 2}, Activation::relu, OutputHead::softmax_xent}), data.train, data.test);
  for (const StepReport& s : r.steps) {
    REQUIRE(s.g_summary.has_value());
    CHECK(std::isfinite(s.g_summary->max));
    CHECK(s.g_summary->min >= 0.0);
    CHECK(s.counters == PassCounters{2, 3, 2, static_cast<std::int64_t>(5 * s.batch_size)});
  }
}
