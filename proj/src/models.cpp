#include "sharpopt/models.hpp"

#include <cmath>
#include <numeric>

namespace sharpopt {

namespace ad = autodiff;

void Batch::validate() const {
  const std::size_t n = instance_ids.size();
  if (n == 0) throw DimensionError("batch must contain at least one instance");
  if (inputs.rank() == 0 || inputs.extent(0) != n) {
    throw DimensionError("batch inputs " + shape_to_string(inputs.shape()) + " for " +
                         std::to_string(n) + " instances");
  }
  if (targets.rank() == 0 || targets.extent(0) != n) {
    throw DimensionError("batch targets " + shape_to_string(targets.shape()) + " for " +
                         std::to_string(n) + " instances");
  }
}

Batch Batch::select(std::span<const std::size_t> positions) const {
  Batch out;
  out.inputs = inputs.rows_slice(positions);
  out.targets = targets.rows_slice(positions);
  out.instance_ids.reserve(positions.size());
  for (std::size_t p : positions) out.instance_ids.push_back(instance_ids.at(p));
  return out;
}

Batch Batch::instance(std::size_t position) const {
  const std::size_t pos[] = {position};
  return select(pos);
}

double LossVector::mean() const {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

PassCounters& PassCounters::operator+=(const PassCounters& o) {
  fwd_recorded += o.fwd_recorded;
  fwd_unrecorded += o.fwd_unrecorded;
  bwd += o.bwd;
  instance_evals += o.instance_evals;
  return *this;
}

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }
std::string to_string(OutputHead h) { return h == OutputHead::softmax_xent ? "softmax_xent" : "mse"; }

// ---------------------------------------------------------------------------
// Mlp

Mlp::Mlp(MlpSpec spec) : spec_(std::move(spec)) {
  if (spec_.layer_widths.size() < 2) {
    throw ParameterError("an MLP needs at least input and output widths");
  }
  for (std::size_t w : spec_.layer_widths) {
    if (w == 0) throw ParameterError("MLP layer widths must be positive");
  }
  auto layout = std::make_shared<ParamLayout>();
  for (std::size_t l = 0; l + 1 < spec_.layer_widths.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l);
    layout->add(prefix + ".weight", Shape{spec_.layer_widths[l], spec_.layer_widths[l + 1]});
    layout->add(prefix + ".bias", Shape{spec_.layer_widths[l + 1]});
  }
  layout_ = std::move(layout);
}

std::string Mlp::describe() const {
  std::string out = "mlp(";
  for (std::size_t i = 0; i < spec_.layer_widths.size(); ++i) {
    if (i) out += "-";
    out += std::to_string(spec_.layer_widths[i]);
  }
  return out + ", " + to_string(spec_.activation) + ", " + to_string(spec_.output_head) + ")";
}

ParamVector Mlp::init(Rng& rng) const {
  ParamVector w(layout_);
  const double gain = spec_.activation == Activation::relu ? std::sqrt(2.0) : 1.0;
  for (const Segment& seg : layout_->segments()) {
    if (seg.shape.size() != 2) continue;  // biases stay zero
    const double stddev = gain / std::sqrt(static_cast<double>(seg.shape[0]));
    for (std::size_t i = 0; i < seg.size(); ++i) w[seg.offset + i] = stddev * rng.normal();
  }
  return w;
}

ad::Var Mlp::forward(ad::Tape& tape, const ad::Var& params, const Tensor& inputs) const {
  if (inputs.rank() != 2 || inputs.cols() != input_dim()) {
    throw DimensionError("model expects inputs of shape (N, " + std::to_string(input_dim()) +
                         "), got " + shape_to_string(inputs.shape()));
  }
  if (params.value().numel() != layout_->dim()) {
    throw DimensionError("parameter vector of dimension " +
                         std::to_string(params.value().numel()) + " for a model of dimension " +
                         std::to_string(layout_->dim()));
  }
  ad::Var h = tape.constant(inputs);
  const auto& segs = layout_->segments();
  for (std::size_t l = 0; l < num_layers(); ++l) {
    const Segment& ws = segs[2 * l];
    const Segment& bs = segs[2 * l + 1];
    ad::Var weight = ad::slice(params, ws.offset, ws.shape);
    ad::Var bias = ad::slice(params, bs.offset, bs.shape);
    h = ad::add_row_bias(ad::matmul(h, weight), bias);
    if (l + 1 < num_layers()) {
      h = spec_.activation == Activation::relu ? ad::relu(h) : ad::tanh(h);
    }
  }
  return h;
}

ad::Var Mlp::instance_losses(ad::Tape& tape, const ad::Var& params, const Batch& batch) const {
  batch.validate();
  ad::Var out = forward(tape, params, batch.inputs);
  if (spec_.output_head == OutputHead::softmax_xent) {
    if (batch.targets.rank() != 1) {
      throw DimensionError("class targets must have shape (N), got " +
                           shape_to_string(batch.targets.shape()));
    }
    return ad::softmax_cross_entropy(out, batch.targets.data());
  }
  if (batch.targets.numel() != batch.size() * output_dim()) {
    throw DimensionError("regression targets " + shape_to_string(batch.targets.shape()) +
                         " for outputs of width " + std::to_string(output_dim()));
  }
  return ad::squared_error(out, batch.targets);
}

// ---------------------------------------------------------------------------
// QuadraticLoss

QuadraticLoss::QuadraticLoss(ParamVector anchor, std::vector<double> base_losses, Tensor gradients,
                             std::vector<double> curvatures)
    : anchor_(std::move(anchor)),
      base_losses_(std::move(base_losses)),
      gradients_(std::move(gradients)),
      curvatures_(std::move(curvatures)) {
  const std::size_t m = base_losses_.size();
  if (gradients_.rank() != 2 || gradients_.rows() != m || gradients_.cols() != anchor_.dim() ||
      curvatures_.size() != m) {
    throw DimensionError("quadratic loss: inconsistent instance count or dimension");
  }
}

std::string QuadraticLoss::describe() const {
  return "quadratic(M=" + std::to_string(num_instances()) + ", D=" + std::to_string(anchor_.dim()) +
         ")";
}

ParamVector QuadraticLoss::gradient_row(std::size_t i) const {
  const std::size_t d = anchor_.dim();
  auto row = gradients_.data().subspan(i * d, d);
  return ParamVector(anchor_.layout_ptr(), std::vector<double>(row.begin(), row.end()));
}

Batch QuadraticLoss::batch_of(std::vector<std::size_t> instance_ids) const {
  const std::size_t n = instance_ids.size();
  Batch b;
  b.inputs = Tensor(Shape{n, 0});
  b.targets = Tensor(Shape{n}, 0.0);
  for (std::size_t i : instance_ids) {
    if (i >= num_instances()) throw DimensionError("quadratic instance id out of range");
  }
  b.instance_ids = std::move(instance_ids);
  return b;
}

Batch QuadraticLoss::full_batch() const {
  std::vector<std::size_t> ids(num_instances());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return batch_of(std::move(ids));
}

ad::Var QuadraticLoss::instance_losses(ad::Tape& tape, const ad::Var& params,
                                       const Batch& batch) const {
  batch.validate();
  const std::size_t n = batch.size();
  const std::size_t d = anchor_.dim();
  if (params.value().numel() != d) {
    throw DimensionError("parameter vector of dimension " +
                         std::to_string(params.value().numel()) + " for a quadratic of dimension " +
                         std::to_string(d));
  }
  Tensor rows = gradients_.rows_slice(batch.instance_ids);
  Tensor c(Shape{n});
  Tensor half_a(Shape{n});
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = batch.instance_ids[k];
    if (i >= num_instances()) throw DimensionError("quadratic instance id out of range");
    c[k] = base_losses_[i];
    half_a[k] = 0.5 * curvatures_[i];
  }
  ad::Var delta = ad::sub(params, tape.constant(Tensor(Shape{d}, anchor_.values())));
  ad::Var t = ad::reshape(ad::matmul(tape.constant(std::move(rows)), ad::reshape(delta, Shape{d, 1})),
                          Shape{n});
  ad::Var quad = ad::mul(tape.constant(std::move(half_a)), ad::square(t));
  return ad::add(ad::add(tape.constant(std::move(c)), t), quad);
}

// ---------------------------------------------------------------------------
// Evaluation entry points

Tensor forward(const Mlp& model, const ParamVector& w, const Tensor& inputs, bool record) {
  ad::Tape tape(record);
  ad::Var params = tape.parameters(w);
  return model.forward(tape, params, inputs).value();
}

LossVector per_instance_losses(const Model& model, const ParamVector& w, const Batch& batch,
                               bool record, PassCounters* counters) {
  ad::Tape tape(record);
  ad::Var params = tape.parameters(w);
  ad::Var losses = model.instance_losses(tape, params, batch);
  if (counters) {
    (record ? counters->fwd_recorded : counters->fwd_unrecorded) += 1;
    counters->instance_evals += static_cast<std::int64_t>(batch.size());
  }
  return LossVector{losses.value().values()};
}

namespace {

LossAndGradient weighted_pass(const Model& model, const ParamVector& w, const Batch& batch,
                              std::span<const double> g, PassCounters* counters) {
  ad::Tape tape(true);
  ad::Var params = tape.parameters(w);
  ad::Var losses = model.instance_losses(tape, params, batch);
  ad::Var total = ad::weighted_sum(losses, g);
  if (counters) {
    counters->fwd_recorded += 1;
    counters->instance_evals += static_cast<std::int64_t>(batch.size());
  }
  ParamVector grad = tape.backward(total);
  if (counters) counters->bwd += 1;
  return {total.value().item(), std::move(grad)};
}

}  // namespace

LossAndGradient mean_loss_gradient(const Model& model, const ParamVector& w, const Batch& batch,
                                   PassCounters* counters) {
  batch.validate();
  const std::vector<double> uniform(batch.size(), 1.0 / static_cast<double>(batch.size()));
  return weighted_pass(model, w, batch, uniform, counters);
}

ParamVector weighted_loss_gradient(const Model& model, const ParamVector& w, const Batch& batch,
                                   std::span<const double> g, PassCounters* counters) {
  batch.validate();
  if (g.size() != batch.size()) {
    throw DimensionError(std::to_string(g.size()) + " instance weights for a batch of " +
                         std::to_string(batch.size()));
  }
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(g[i] >= 0.0) || !std::isfinite(g[i])) {
      throw ParameterError("instance weight " + std::to_string(i) + " is " + std::to_string(g[i]) +
                           "; weights must be finite and nonnegative");
    }
  }
  return weighted_pass(model, w, batch, g, counters).gradient;
}

LossAndGradient instance_loss_gradient(const Model& model, const ParamVector& w,
                                       const Batch& batch, std::size_t position,
                                       PassCounters* counters) {
  const Batch single = batch.instance(position);
  const double one[] = {1.0};
  return weighted_pass(model, w, single, one, counters);
}

}  // namespace sharpopt
