#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sharpopt/autodiff.hpp"
#include "sharpopt/param_vector.hpp"
#include "sharpopt/rng.hpp"
#include "sharpopt/tensor.hpp"

namespace sharpopt {

/// N input/target pairs. Class targets are stored as whole numbers in a (N) tensor,
/// regression targets as (N, d_out).
struct Batch {
  Tensor inputs;
  Tensor targets;
  std::vector<std::size_t> instance_ids;

  std::size_t size() const { return instance_ids.size(); }
  /// Throws DimensionError unless N >= 1 and all leading extents equal N.
  void validate() const;
  /// Sub-batch made of the given positions (not instance ids).
  Batch select(std::span<const std::size_t> positions) const;
  Batch instance(std::size_t position) const;
};

/// One l_i(w) per batch element.
struct LossVector {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
  double mean() const;
};

/// Structural cost of a step: gradient-recorded forwards, grad-free forwards,
/// backwards. Each count is one batch-level pass.
struct PassCounters {
  std::int64_t fwd_recorded = 0;
  std::int64_t fwd_unrecorded = 0;
  std::int64_t bwd = 0;
  /// Per-instance loss evaluations across all forwards.
  std::int64_t instance_evals = 0;

  PassCounters& operator+=(const PassCounters& o);
  friend bool operator==(const PassCounters&, const PassCounters&) = default;
};

/// A differentiable per-instance loss l_i(w).
class Model {
 public:
  virtual ~Model() = default;

  virtual const LayoutPtr& layout() const = 0;
  virtual std::string describe() const = 0;
  /// Per-instance losses (N) for the batch, built on `params` (a flat var of dim D).
  virtual autodiff::Var instance_losses(autodiff::Tape& tape, const autodiff::Var& params,
                                        const Batch& batch) const = 0;
};

enum class Activation { relu, tanh };
enum class OutputHead { softmax_xent, mse };

std::string to_string(Activation a);
std::string to_string(OutputHead h);

/// Widths run from input to output: {d_in, h_1, ..., d_out}. Two widths give a
/// purely linear model.
struct MlpSpec {
  std::vector<std::size_t> layer_widths;
  Activation activation = Activation::relu;
  OutputHead output_head = OutputHead::softmax_xent;
};

class Mlp final : public Model {
 public:
  explicit Mlp(MlpSpec spec);

  const MlpSpec& spec() const { return spec_; }
  const LayoutPtr& layout() const override { return layout_; }
  std::string describe() const override;
  std::size_t input_dim() const { return spec_.layer_widths.front(); }
  std::size_t output_dim() const { return spec_.layer_widths.back(); }
  std::size_t num_layers() const { return spec_.layer_widths.size() - 1; }

  /// Scaled-normal weights (1/sqrt(fan_in), times sqrt(2) for relu), zero biases.
  ParamVector init(Rng& rng) const;

  /// Raw outputs (logits or regression predictions), shape (N, d_out).
  autodiff::Var forward(autodiff::Tape& tape, const autodiff::Var& params,
                        const Tensor& inputs) const;

  autodiff::Var instance_losses(autodiff::Tape& tape, const autodiff::Var& params,
                                const Batch& batch) const override;

 private:
  MlpSpec spec_;
  LayoutPtr layout_;
};

/// Synthetic losses l_i(w) = c_i + t_i + a_i t_i^2 / 2 with t_i = b_i^T (w - anchor).
/// At the anchor the gradient is b_i and the Hessian is a_i b_i b_i^T for every w.
/// Batch rows are selected through Batch::instance_ids; inputs are ignored.
class QuadraticLoss final : public Model {
 public:
  /// `gradients` holds one b_i per row, shape (M, D).
  QuadraticLoss(ParamVector anchor, std::vector<double> base_losses, Tensor gradients,
                std::vector<double> curvatures);

  const LayoutPtr& layout() const override { return anchor_.layout_ptr(); }
  std::string describe() const override;
  std::size_t num_instances() const { return base_losses_.size(); }
  const ParamVector& anchor() const { return anchor_; }
  const std::vector<double>& base_losses() const { return base_losses_; }
  const Tensor& gradients() const { return gradients_; }
  const std::vector<double>& curvatures() const { return curvatures_; }
  ParamVector gradient_row(std::size_t i) const;

  /// Batch over all instances in order, with placeholder inputs.
  Batch full_batch() const;
  Batch batch_of(std::vector<std::size_t> instance_ids) const;

  autodiff::Var instance_losses(autodiff::Tape& tape, const autodiff::Var& params,
                                const Batch& batch) const override;

 private:
  ParamVector anchor_;
  std::vector<double> base_losses_;
  Tensor gradients_;
  std::vector<double> curvatures_;
};

/// Plain forward of an MLP; with record = false no tape node is created.
Tensor forward(const Mlp& model, const ParamVector& w, const Tensor& inputs, bool record);

LossVector per_instance_losses(const Model& model, const ParamVector& w, const Batch& batch,
                               bool record, PassCounters* counters = nullptr);

struct LossAndGradient {
  double loss = 0.0;
  ParamVector gradient;
};

/// (l(w), grad l(w)) with l the batch mean of l_i; one recorded forward and one backward.
LossAndGradient mean_loss_gradient(const Model& model, const ParamVector& w, const Batch& batch,
                                   PassCounters* counters = nullptr);

/// grad(sum_i g_i l_i(w)) in a single recorded forward/backward.
/// Throws ParameterError on a negative or non-finite weight.
ParamVector weighted_loss_gradient(const Model& model, const ParamVector& w, const Batch& batch,
                                   std::span<const double> g, PassCounters* counters = nullptr);

/// grad l_i(w) for one batch position, via its own forward/backward.
LossAndGradient instance_loss_gradient(const Model& model, const ParamVector& w,
                                       const Batch& batch, std::size_t position,
                                       PassCounters* counters = nullptr);

}  // namespace sharpopt
