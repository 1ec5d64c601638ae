#include "sharpopt/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "sharpopt/format.hpp"
#include "sharpopt/quadratic_oracle.hpp"

namespace fs = std::filesystem;

namespace sharpopt {
namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  if (!parse_double(v, out)) throw UsageError(key + ": expected a number, got '" + v + "'");
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  if (t.empty() || !std::all_of(t.begin(), t.end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw UsageError(key + ": expected a nonnegative integer, got '" + v + "'");
  }
  try {
    return std::stoull(t);
  } catch (const std::out_of_range&) {
    throw UsageError(key + ": value out of range '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  if (t == "1" || t == "true" || t == "yes") return true;
  if (t == "0" || t == "false" || t == "no") return false;
  throw UsageError(key + ": expected true or false, got '" + v + "'");
}

std::string to_string(bool b) { return b ? "true" : "false"; }

/// Higher is better for accuracy, lower for regression error.
bool not_worse(Task task, double candidate, double reference) {
  return task == Task::classification ? candidate >= reference : candidate <= reference;
}

// ----- verification helpers ------------------------------------------------

ParamVector numeric_gradient(const std::function<double(const ParamVector&)>& f,
                             const ParamVector& w, double h) {
  ParamVector g(w.layout_ptr(), 0.0);
  for (std::size_t i = 0; i < w.dim(); ++i) {
    ParamVector plus = w, minus = w;
    plus[i] += h;
    minus[i] -= h;
    g[i] = (f(plus) - f(minus)) / (2.0 * h);
  }
  return g;
}

std::string sci(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

CheckResult check_norm_contract(Rng rng) {
  double worst_norm = 0.0, worst_scale = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 1 + rng.below(200);
    const ParamVector v = gaussian_vector(rng, ParamLayout::flat(d), std::exp(rng.uniform(-5, 5)));
    const double rho = rng.uniform(1e-3, 1.0);
    const ParamVector e = normalize_to_ball(v, rho);
    worst_norm = std::max(worst_norm, std::abs(norm2(e) - rho));
    const double c = std::exp(rng.uniform(-8, 8));
    worst_scale = std::max(worst_scale, max_abs_diff(normalize_to_ball(c * v, rho), e));
  }
  return {"norm contract", worst_norm < 1e-9 && worst_scale < 1e-12,
          "1000 directions: max | ||eps|| - rho | = " + sci(worst_norm) +
              ", max scale drift = " + sci(worst_scale)};
}

CheckResult check_mlp_gradients(Rng rng) {
  double worst = 0.0;
  for (Activation act : {Activation::tanh, Activation::relu}) {
    for (OutputHead head : {OutputHead::softmax_xent, OutputHead::mse}) {
      const Mlp model({{4, 6, 3}, act, head});
      const ParamVector w = model.init(rng);
      Batch b;
      b.inputs = Tensor(Shape{5, 4});
      for (double& v : b.inputs.data()) v = rng.normal();
      if (head == OutputHead::mse) {
        b.targets = Tensor(Shape{5, 3});
        for (double& v : b.targets.data()) v = rng.normal();
      } else {
        b.targets = Tensor(Shape{5});
        for (std::size_t i = 0; i < 5; ++i) b.targets[i] = static_cast<double>(rng.below(3));
      }
      for (std::size_t i = 0; i < 5; ++i) b.instance_ids.push_back(i);
      const ParamVector g = mean_loss_gradient(model, w, b).gradient;
      const ParamVector fd = numeric_gradient(
          [&](const ParamVector& x) { return per_instance_losses(model, x, b, false).mean(); }, w,
          1e-5);
      for (std::size_t i = 0; i < w.dim(); ++i) {
        const double denom = std::max({std::abs(g[i]), std::abs(fd[i]), 1e-6});
        worst = std::max(worst, std::abs(g[i] - fd[i]) / denom);
      }
    }
  }
  return {"mlp gradients vs finite differences", worst < 1e-5,
          "4 activation/head pairs: worst relative error " + sci(worst)};
}

CheckResult check_grad_r_inst(Rng rng) {
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const QuadraticProblem p = QuadraticProblem::random(rng, 1 + rng.below(8), 2 + rng.below(15));
    const double rho = rng.uniform(0.01, 0.5);
    const ParamVector exact = grad_r_inst(p, rho);
    const ParamVector fd = numeric_gradient(
        [&](const ParamVector& w) { return sharpness_inst_at(p, w, rho); }, p.anchor(), 1e-5);
    worst = std::max(worst, norm2(fd - exact) / norm2(exact));
  }
  return {"per-instance sharpness gradient vs finite differences", worst < 1e-6,
          "50 problems: worst relative error " + sci(worst)};
}

CheckResult check_exact_weights(Rng rng) {
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const QuadraticProblem p = QuadraticProblem::random(rng, 1 + rng.below(10), 2 + rng.below(30));
    worst = std::max(worst, std::abs(exact_weight_equivalence(p, 0.05) - 1.0));
  }
  return {"exact-weight cosine", worst < 1e-10, "50 problems: max |cos - 1| = " + sci(worst)};
}

CheckResult check_positivity(Rng rng) {
  std::size_t positive = 0;
  double worst_numeric = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const QuadraticProblem p = QuadraticProblem::random(rng, 8, 20);
    const SharpnessReport r = positivity_check(p, 0.05);
    if (!r.degenerate && r.dot > 0.0) ++positive;
    const double numeric = positivity_dot_numeric(p, 0.05);
    worst_numeric = std::max(worst_numeric, std::abs(numeric - r.dot) / std::abs(r.dot));
  }
  return {"positivity of the sharpness-gradient dot product",
          positive == 100 && worst_numeric < 1e-9,
          std::to_string(positive) + "/100 positive; closed form vs autodiff " + sci(worst_numeric)};
}

CheckResult check_second_difference(Rng rng) {
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const QuadraticProblem p = QuadraticProblem::random(rng, 6, 10);
    const ParamVector w = p.anchor() + gaussian_vector(rng, p.anchor().layout_ptr(), 0.2);
    for (int s = 0; s < 50; ++s) {
      const ParamVector r = gaussian_vector(rng, w.layout_ptr(), 0.1);
      const ProbeLosses pr = probe(p.model(), w, p.batch(), r);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double proj = dot(p.b(i), r);
        const double expected = p.a(i) * proj * proj;
        const double got = pr.l_plus[i] + pr.l_minus[i] - 2.0 * pr.l0[i];
        worst = std::max(worst, std::abs(got - expected) / std::max(1.0, std::abs(expected)));
      }
    }
  }
  return {"second-difference identity per sample", worst < 1e-9,
          "1000 probes x 6 instances: worst error " + sci(worst)};
}

CheckResult check_estimators(Rng rng, std::size_t n, double sigma) {
  const double tol = estimator_tolerance(n);
  const QuadraticProblem simple = QuadraticProblem::from_gradients({{1.0, 0.0}}, {2.0});
  Rng r1 = rng.fork(1);
  const CurvatureEstimate e1 =
      estimate_curvature(simple.model(), simple.anchor(), simple.batch(), sigma, n, r1);
  // grad_norm_sq_hat averages a scaled chi-square(1) variable, relative standard
  // error sqrt(2/n); it is held to 3 standard errors. a_hat is exact on rank-1
  // quadratics and held to the percentage tolerance.
  const double gn_err = std::abs(e1.grad_norm_sq_hat[0] - 1.0);
  const double gn_bound = 3.0 * e1.first_diff_sq_stderr[0] / (4.0 * sigma * sigma);
  const double a_err = std::abs(e1.a_hat[0] - 2.0) / 2.0;
  bool ok = gn_err <= gn_bound && a_err <= tol;

  // Monte-Carlo means against the expansion constants, within 3 standard errors.
  Rng r2 = rng.fork(2);
  const QuadraticProblem p = QuadraticProblem::random(r2, 6, 10);
  const CurvatureEstimate e2 = estimate_curvature(p.model(), p.anchor(), p.batch(), sigma, n, r2);
  std::size_t within = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double g2 = dot(p.b(i), p.b(i));
    const double first = 4.0 * sigma * sigma * g2;
    const double second = p.a(i) * sigma * sigma * g2;
    within += std::abs(e2.first_diff_sq_mean[i] - first) <= 3.0 * e2.first_diff_sq_stderr[i];
    within += std::abs(e2.second_diff_mean[i] - second) <= 3.0 * e2.second_diff_stderr[i];
  }
  ok = ok && within == 2 * p.size();
  return {"curvature estimators", ok,
          std::to_string(n) + " samples: |grad_norm_sq_hat - 1| = " + sci(gn_err) + " (3 SE " +
              sci(gn_bound) + "), rel |a_hat - 2| = " + sci(a_err) + " (tol " + sci(tol) + "); " +
              std::to_string(within) + "/" + std::to_string(2 * p.size()) + " means within 3 SE"};
}

/// Cosines of the delta-SAM and SAM perturbations against grad_r_inst.
std::pair<double, double> cosines_vs_inst(const QuadraticProblem& p, std::size_t probe_samples,
                                          Rng& rng) {
  TrainerMode m;
  m.kind = ModeKind::delta_sam;
  m.probe_samples = probe_samples;
  m.diagnostics = true;
  OptimizerState s1(OptimizerConfig::sgd(1.0)), s2(OptimizerConfig::sgd(1.0));
  const StepReport d = delta_sam_step(s1, p.model(), p.anchor(), p.batch(), m, rng).report;
  const StepReport s = sam_step(s2, p.model(), p.anchor(), p.batch(), m.perturb, true).report;
  return {d.diagnostic_cosine.value_or(0.0), s.diagnostic_cosine.value_or(0.0)};
}

CheckResult check_approximation(Rng rng) {
  constexpr std::size_t averaged = 32;
  std::size_t wins_avg = 0, wins_single = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const QuadraticProblem p = QuadraticProblem::random(rng, 8, 50);
    Rng probe_rng = rng.fork(static_cast<std::uint64_t>(trial));
    const auto [d1, s1] = cosines_vs_inst(p, 1, probe_rng);
    const auto [dk, sk] = cosines_vs_inst(p, averaged, probe_rng);
    wins_single += d1 >= s1;
    wins_avg += dk >= sk;
  }
  return {"delta-sam direction closer to per-instance sharpness than sam", wins_avg >= 95,
          std::to_string(wins_avg) + "/100 with weights averaged over " + std::to_string(averaged) +
              " probes; " + std::to_string(wins_single) + "/100 with a single probe"};
}

CheckResult check_reductions(Rng rng) {
  const Mlp model({{3, 8, 2}, Activation::tanh, OutputHead::softmax_xent});
  const ParamVector w = model.init(rng);
  Batch one;
  one.inputs = Tensor(Shape{1, 3});
  for (double& v : one.inputs.data()) v = rng.normal();
  one.targets = Tensor::vector({1.0});
  one.instance_ids = {0};
  const std::vector<std::size_t> rows(6, 0);
  const Batch dup = one.select(rows);
  TrainerMode dm;
  dm.kind = ModeKind::delta_sam;
  auto step = [&](ModeKind k, const Batch& b) {
    OptimizerState s(OptimizerConfig::sgd(1.0));
    TrainerMode m = dm;
    m.kind = k;
    Rng probe_rng = rng.fork(7);
    return train_step(s, model, w, b, m, probe_rng).w;
  };
  const ParamVector sam_dup = step(ModeKind::sam, dup);
  const double dup_delta = max_abs_diff(step(ModeKind::delta_sam, dup), sam_dup);
  const double dup_inst = max_abs_diff(step(ModeKind::per_instance_sam, dup), sam_dup);
  const double single = max_abs_diff(step(ModeKind::per_instance_sam, one), step(ModeKind::sam, one));
  return {"reduction identities", dup_delta < 1e-10 && dup_inst < 1e-10 && single < 1e-12,
          "duplicated batch: delta-sam " + sci(dup_delta) + ", per-instance " + sci(dup_inst) +
              "; N=1 per-instance vs sam " + sci(single)};
}

}  // namespace

const std::vector<double>& rho_grid() {
  static const std::vector<double> g{0.01, 0.02, 0.05};
  return g;
}

const std::vector<double>& eta_grid() {
  static const std::vector<double> g{1e-4, 2e-4, 5e-4, 1e-3};
  return g;
}

std::vector<std::pair<std::string, std::string>> to_key_values(const RunConfig& c) {
  return {
      {"mode", to_string(c.mode)},
      {"rho", format_double(c.rho)},
      {"eta", format_double(c.eta)},
      {"sigma", format_double(c.sigma)},
      {"optimizer", to_string(c.optimizer)},
      {"lr", format_double(c.lr)},
      {"batch-size", std::to_string(c.batch_size)},
      {"epochs", std::to_string(c.epochs)},
      {"seed", std::to_string(c.seed)},
      {"dataset", c.dataset},
      {"n-train", std::to_string(c.n_train)},
      {"n-test", std::to_string(c.n_test)},
      {"noise", format_double(c.noise)},
      {"dims", std::to_string(c.dims)},
      {"classes", std::to_string(c.classes)},
      {"csv", c.csv},
      {"test-csv", c.test_csv},
      {"target-column", c.target_column},
      {"task", to_string(c.task)},
      {"hidden", std::to_string(c.hidden)},
      {"activation", to_string(c.activation)},
      {"probe-samples", std::to_string(c.probe_samples)},
      {"oracle-cap", std::to_string(c.oracle_cap)},
      {"zero-grad-threshold", format_double(c.zero_grad_threshold)},
      {"diagnostics", to_string(c.diagnostics)},
      {"mc-samples", std::to_string(c.mc_samples)},
      {"seeds", std::to_string(c.num_seeds)},
  };
}

void set_config_value(RunConfig& c, const std::string& raw_key, const std::string& raw_value) {
  std::string key = trim(raw_key);
  std::replace(key.begin(), key.end(), '_', '-');
  const std::string v = trim(raw_value);
  try {
    if (key == "mode") c.mode = parse_mode_kind(v);
    else if (key == "rho") c.rho = to_double(key, v);
    else if (key == "eta") c.eta = to_double(key, v);
    else if (key == "sigma") c.sigma = to_double(key, v);
    else if (key == "optimizer") c.optimizer = parse_optimizer_kind(v);
    else if (key == "lr") c.lr = to_double(key, v);
    else if (key == "batch-size") c.batch_size = to_uint(key, v);
    else if (key == "epochs") c.epochs = to_uint(key, v);
    else if (key == "seed") c.seed = to_uint(key, v);
    else if (key == "dataset") c.dataset = v;
    else if (key == "n-train") c.n_train = to_uint(key, v);
    else if (key == "n-test") c.n_test = to_uint(key, v);
    else if (key == "noise") c.noise = to_double(key, v);
    else if (key == "dims") c.dims = to_uint(key, v);
    else if (key == "classes") c.classes = to_uint(key, v);
    else if (key == "csv") c.csv = v;
    else if (key == "test-csv") c.test_csv = v;
    else if (key == "target-column") c.target_column = v;
    else if (key == "task") {
      if (v == "classification") c.task = Task::classification;
      else if (v == "regression") c.task = Task::regression;
      else throw UsageError("task: expected classification or regression, got '" + v + "'");
    } else if (key == "hidden") c.hidden = to_uint(key, v);
    else if (key == "activation") {
      if (v == "relu") c.activation = Activation::relu;
      else if (v == "tanh") c.activation = Activation::tanh;
      else throw UsageError("activation: expected relu or tanh, got '" + v + "'");
    } else if (key == "probe-samples") c.probe_samples = to_uint(key, v);
    else if (key == "oracle-cap") c.oracle_cap = to_uint(key, v);
    else if (key == "zero-grad-threshold") c.zero_grad_threshold = to_double(key, v);
    else if (key == "diagnostics") c.diagnostics = to_bool(key, v);
    else if (key == "mc-samples") c.mc_samples = to_uint(key, v);
    else if (key == "seeds") c.num_seeds = to_uint(key, v);
    else throw UsageError("unknown config key '" + raw_key + "'");
  } catch (const ParameterError& e) {
    throw UsageError(e.what());
  }
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file '" + path + "'");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path + ":" + std::to_string(line_no) + ": expected key=value");
    }
    try {
      set_config_value(cfg, t.substr(0, eq), t.substr(eq + 1));
    } catch (const UsageError& e) {
      throw UsageError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : to_key_values(cfg)) out += k + "=" + v + "\n";
  return out;
}

void validate(const RunConfig& c) {
  if (!(c.rho > 0.0) || !std::isfinite(c.rho)) throw UsageError("--rho must be positive");
  if (!(c.eta > 0.0) || !std::isfinite(c.eta)) throw UsageError("--eta must be positive");
  if (!(c.sigma > 0.0) || !std::isfinite(c.sigma)) throw UsageError("--sigma must be positive");
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw UsageError("--lr must be positive");
  if (!(c.zero_grad_threshold > 0.0)) throw UsageError("--zero-grad-threshold must be positive");
  if (c.batch_size == 0) throw UsageError("--batch-size must be positive");
  if (c.probe_samples == 0) throw UsageError("--probe-samples must be at least 1");
  if (c.mc_samples < 2) throw UsageError("--mc-samples must be at least 2");
  if (c.num_seeds == 0) throw UsageError("--seeds must be at least 1");
  if (c.mode == ModeKind::per_instance_sam && c.batch_size > c.oracle_cap) {
    throw UsageError("per-instance-sam runs 2N forward and backward passes per step; --batch-size " +
                     std::to_string(c.batch_size) + " exceeds the oracle cap of " +
                     std::to_string(c.oracle_cap) + " (use sam or delta-sam for large batches)");
  }
  if (c.dataset == "csv") {
    if (c.csv.empty()) throw UsageError("--dataset csv needs --csv <path>");
  } else if (c.dataset == "two-moons" || c.dataset == "blobs" || c.dataset == "linreg") {
    if (c.n_train < 2 || c.n_test < 1) throw UsageError("--n-train must be >= 2 and --n-test >= 1");
    if (!(c.noise >= 0.0)) throw UsageError("--noise must be nonnegative");
    if (c.dataset == "blobs" && (c.classes < 2 || c.dims + 1 < c.classes)) {
      throw UsageError("blobs need --classes >= 2 and --dims >= classes - 1");
    }
    if (c.dims == 0) throw UsageError("--dims must be positive");
  } else {
    throw UsageError("unknown dataset '" + c.dataset + "' (expected two-moons, blobs, linreg or csv)");
  }
}

TrainConfig to_train_config(const RunConfig& c) {
  TrainConfig t;
  t.mode.kind = c.mode;
  t.mode.perturb = {c.rho, c.zero_grad_threshold};
  t.mode.eta = c.eta;
  t.mode.oracle_cap = c.oracle_cap;
  t.mode.probe_samples = c.probe_samples;
  t.mode.diagnostics = c.diagnostics;
  t.optimizer = {c.optimizer, c.lr};
  t.batch_size = c.batch_size;
  t.epochs = c.epochs;
  t.seed = c.seed;
  return t;
}

DataSplit load_dataset(const RunConfig& c) {
  if (c.dataset == "two-moons") return two_moons_split(c.n_train, c.n_test, c.noise, 0);
  if (c.dataset == "blobs") return blobs_split(c.n_train, c.n_test, c.dims, c.classes, 10.0, 0);
  if (c.dataset == "linreg") return linreg_split(c.n_train, c.n_test, c.dims, 1, c.noise, 0);
  if (c.dataset == "csv") {
    const CsvSchema schema{c.target_column, c.task};
    Dataset train = load_csv(c.csv, schema);
    Dataset test = load_csv(c.test_csv.empty() ? c.csv : c.test_csv, schema);
    test.split = Split::test;
    if (test.input_dim() != train.input_dim()) {
      throw UsageError("--test-csv has " + std::to_string(test.input_dim()) +
                       " feature columns, --csv has " + std::to_string(train.input_dim()));
    }
    if (c.task == Task::classification) {
      const std::size_t k = std::max(train.num_classes, test.num_classes);
      train.num_classes = test.num_classes = k;
    }
    return {std::move(train), std::move(test)};
  }
  throw UsageError("unknown dataset '" + c.dataset + "'");
}

Mlp build_model(const RunConfig& c, const Dataset& train_set) {
  MlpSpec spec;
  spec.layer_widths.push_back(train_set.input_dim());
  if (c.hidden > 0) spec.layer_widths.push_back(c.hidden);
  spec.layer_widths.push_back(train_set.output_dim());
  spec.activation = c.activation;
  spec.output_head = train_set.task == Task::classification ? OutputHead::softmax_xent : OutputHead::mse;
  return Mlp(spec);
}

std::string format_step_record(const StepReport& r) {
  std::string s;
  auto put = [&s](const std::string& k, const std::string& v) {
    if (!s.empty()) s += '\t';
    s += k + "=" + v;
  };
  put("step", std::to_string(r.step));
  put("epoch", std::to_string(r.epoch));
  put("mode", to_string(r.mode));
  put("batch_size", std::to_string(r.batch_size));
  put("mean_loss", format_double(r.mean_loss));
  put("perturbation_norm", format_double(r.perturbation_norm));
  if (r.g_summary) {
    put("g_min", format_double(r.g_summary->min));
    put("g_mean", format_double(r.g_summary->mean));
    put("g_max", format_double(r.g_summary->max));
  }
  put("fwd_recorded", std::to_string(r.counters.fwd_recorded));
  put("fwd_unrecorded", std::to_string(r.counters.fwd_unrecorded));
  put("bwd", std::to_string(r.counters.bwd));
  put("instance_evals", std::to_string(r.counters.instance_evals));
  if (r.diagnostic_cosine) put("diag_cosine", format_double(*r.diagnostic_cosine));
  put("skipped", r.perturbation_skipped ? "1" : "0");
  put("uniform_fallback", r.uniform_fallback ? "1" : "0");
  return s;
}

std::map<std::string, std::string> parse_record(const std::string& line) {
  std::map<std::string, std::string> out;
  std::size_t start = 0;
  while (start <= line.size()) {
    std::size_t end = line.find('\t', start);
    if (end == std::string::npos) end = line.size();
    const std::string field = line.substr(start, end - start);
    const auto eq = field.find('=');
    if (eq != std::string::npos) out[field.substr(0, eq)] = field.substr(eq + 1);
    start = end + 1;
  }
  return out;
}

std::string run_name(const RunConfig& c) {
  return to_string(c.mode) + "_" + c.dataset + "_seed" + std::to_string(c.seed);
}

fs::path output_root() {
  if (const char* env = std::getenv("SHARPOPT_OUT"); env && *env) return fs::path(env);
  return fs::path("runs");
}

fs::path resolve_run_dir(const std::string& out_flag, const RunConfig& cfg) {
  if (!out_flag.empty()) return fs::path(out_flag);
  return output_root() / run_name(cfg);
}

RunFiles run_files(const fs::path& dir) {
  return {dir, dir / "config.txt", dir / "metrics.tsv", dir / "summary.txt"};
}

TrainResult run_training(const RunConfig& cfg, const fs::path& dir) {
  validate(cfg);
  const DataSplit data = load_dataset(cfg);
  const Mlp model = build_model(cfg, data.train);
  const RunFiles files = run_files(dir);
  fs::create_directories(dir);
  {
    std::ofstream out(files.config);
    out << format_config(cfg);
  }
  std::ofstream metrics(files.metrics);
  std::vector<std::string> epoch_lines;
  TrainCallbacks cb;
  cb.on_step = [&metrics](const StepReport& r) { metrics << format_step_record(r) << '\n'; };
  cb.on_epoch = [&epoch_lines](const EpochReport& e) {
    epoch_lines.push_back("epoch=" + std::to_string(e.epoch) + "\ttrain_loss=" +
                          format_double(e.train_loss) + "\ttest_loss=" + format_double(e.test_loss) +
                          "\ttrain_metric=" + format_double(e.train_metric) +
                          "\ttest_metric=" + format_double(e.test_metric));
  };

  std::ofstream summary;
  auto write_header = [&]() {
    summary.open(files.summary);
    summary << "mode=" << to_string(cfg.mode) << "\n"
            << "dataset=" << data.train.provenance << "\n"
            << "task=" << to_string(data.train.task) << "\n"
            << "metric=" << (data.train.task == Task::classification ? "accuracy" : "mse") << "\n"
            << "model=" << model.describe() << "\n";
  };
  try {
    TrainResult r = train(to_train_config(cfg), model, data.train, data.test, cb);
    metrics.close();
    write_header();
    summary << "status=ok\n"
            << "steps=" << r.steps.size() << "\n"
            << "final_train_metric=" << format_double(r.eval.final_train_metric) << "\n"
            << "final_test_metric=" << format_double(r.eval.final_test_metric) << "\n";
    if (!r.eval.epochs.empty()) {
      summary << "final_train_loss=" << format_double(r.eval.epochs.back().train_loss) << "\n"
              << "final_test_loss=" << format_double(r.eval.epochs.back().test_loss) << "\n";
    }
    summary << "mean_fwd_recorded=" << format_double(r.eval.mean_fwd_recorded) << "\n"
            << "mean_fwd_unrecorded=" << format_double(r.eval.mean_fwd_unrecorded) << "\n"
            << "mean_bwd=" << format_double(r.eval.mean_bwd) << "\n";
    for (const std::string& line : epoch_lines) summary << line << "\n";
    return r;
  } catch (const NumericAbort& e) {
    metrics.close();
    write_header();
    summary << "status=numeric_abort\n"
            << "reason=" << e.what() << "\n";
    if (e.last_good()) summary << "last_good_step=" << e.last_good()->step << "\n";
    throw;
  }
}

// ---------------------------------------------------------------------------

const CompareRow* CompareTable::row(ModeKind k) const {
  for (const CompareRow& r : rows) {
    if (r.mode == k) return &r;
  }
  return nullptr;
}

std::vector<ModeKind> compare_modes(const RunConfig& cfg) {
  std::vector<ModeKind> m{ModeKind::base, ModeKind::sam, ModeKind::delta_sam};
  if (cfg.batch_size <= cfg.oracle_cap) m.push_back(ModeKind::per_instance_sam);
  return m;
}

CompareTable run_compare(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds,
                         const std::vector<ModeKind>& modes) {
  if (seeds.empty()) throw UsageError("compare needs at least one seed");
  RunConfig probe_cfg = cfg;
  for (ModeKind k : modes) {
    probe_cfg.mode = k;
    validate(probe_cfg);
  }
  const DataSplit data = load_dataset(cfg);
  const Mlp model = build_model(cfg, data.train);

  CompareTable t;
  t.task = data.train.task;
  t.seeds = seeds;
  for (ModeKind k : modes) {
    CompareRow row;
    row.mode = k;
    double rec = 0.0, unrec = 0.0, bwd = 0.0;
    for (std::uint64_t seed : seeds) {
      RunConfig c = cfg;
      c.mode = k;
      c.seed = seed;
      const TrainResult r = train(to_train_config(c), model, data.train, data.test);
      row.test_metric.push_back(r.eval.final_test_metric);
      rec += r.eval.mean_fwd_recorded;
      unrec += r.eval.mean_fwd_unrecorded;
      bwd += r.eval.mean_bwd;
    }
    const double n = static_cast<double>(seeds.size());
    row.fwd_recorded = rec / n;
    row.fwd_unrecorded = unrec / n;
    row.bwd = bwd / n;
    double sum = 0.0;
    for (double v : row.test_metric) sum += v;
    row.mean = sum / n;
    double sq = 0.0;
    for (double v : row.test_metric) sq += (v - row.mean) * (v - row.mean);
    row.stddev = seeds.size() > 1 ? std::sqrt(sq / (n - 1.0)) : 0.0;
    t.rows.push_back(std::move(row));
  }
  if (const CompareRow* base = t.row(ModeKind::base)) {
    const std::vector<double> ref = base->test_metric;
    for (CompareRow& r : t.rows) {
      r.seeds_not_worse_than_base = 0;
      for (std::size_t s = 0; s < ref.size(); ++s) {
        r.seeds_not_worse_than_base += not_worse(t.task, r.test_metric[s], ref[s]);
      }
    }
  }
  return t;
}

std::string format_compare_table(const CompareTable& t) {
  const CompareRow* sam = t.row(ModeKind::sam);
  std::string out =
      "mode\tseeds\tmetric\tmean\tstd\tnot_worse_than_base\tfwd_recorded\tfwd_unrecorded\tbwd\t"
      "extra_unrecorded_vs_sam\n";
  for (const CompareRow& r : t.rows) {
    out += to_string(r.mode) + "\t" + std::to_string(r.test_metric.size()) + "\t" +
           (t.task == Task::classification ? "accuracy" : "mse") + "\t" + format_double(r.mean) +
           "\t" + format_double(r.stddev) + "\t" + std::to_string(r.seeds_not_worse_than_base) + "\t" +
           format_double(r.fwd_recorded) + "\t" + format_double(r.fwd_unrecorded) + "\t" +
           format_double(r.bwd) + "\t" +
           (sam ? format_double(r.fwd_unrecorded - sam->fwd_unrecorded) : std::string("-")) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------

double estimator_tolerance(std::size_t mc_samples) {
  return std::max(0.01, 0.02 * std::sqrt(1e4 / static_cast<double>(mc_samples)));
}

std::vector<CheckResult> run_verification(const VerifyOptions& opts) {
  if (opts.mc_samples < 2) throw UsageError("--mc-samples must be at least 2");
  if (!(opts.sigma > 0.0)) throw UsageError("--sigma must be positive");
  const Rng root(opts.seed);
  return {
      check_norm_contract(root.fork(1)),
      check_mlp_gradients(root.fork(2)),
      check_grad_r_inst(root.fork(3)),
      check_exact_weights(root.fork(4)),
      check_positivity(root.fork(5)),
      check_second_difference(root.fork(6)),
      check_estimators(root.fork(7), opts.mc_samples, opts.sigma),
      check_approximation(root.fork(8)),
      check_reductions(root.fork(9)),
  };
}

std::string format_verify_table(const std::vector<CheckResult>& results) {
  std::size_t width = 0;
  for (const CheckResult& r : results) width = std::max(width, r.name.size());
  std::string out;
  for (const CheckResult& r : results) {
    out += std::string(r.passed ? "PASS  " : "FAIL  ") + r.name +
           std::string(width - r.name.size() + 2, ' ') + r.detail + "\n";
  }
  return out;
}

}  // namespace sharpopt
