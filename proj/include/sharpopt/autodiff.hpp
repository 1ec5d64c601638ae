#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "sharpopt/param_vector.hpp"
#include "sharpopt/tensor.hpp"

namespace sharpopt::autodiff {

class Tape;

/// Errors from misuse of the tape (unrecorded root, non-scalar root, reuse).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A value flowing through a forward pass. Recorded vars point at a tape node;
/// unrecorded ones (constants, or anything computed with recording off) do not.
class Var {
 public:
  Var() = default;

  const Tensor& value() const { return *value_; }
  const Shape& shape() const { return value_->shape(); }
  bool recorded() const { return node_ >= 0; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

 private:
  friend class Tape;
  Var(std::shared_ptr<const Tensor> value, Tape* tape, int node)
      : value_(std::move(value)), tape_(tape), node_(node) {}

  std::shared_ptr<const Tensor> value_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

/// Accumulates local partials into the parents' gradients. A null parent
/// gradient means that parent is not recorded and needs nothing.
using BackwardFn = std::function<void(const Tensor& grad_out, Tensor* grad_a, Tensor* grad_b)>;

/// Single-use reverse-mode tape for one forward/backward pair.
///
/// With recording disabled no node is ever allocated; ops still compute values
/// with identical arithmetic, so recorded and unrecorded forwards agree exactly.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  /// Registers the differentiable leaf. At most one per tape.
  Var parameters(const ParamVector& w);
  Var constant(Tensor value);

  /// Gradient of a recorded scalar with respect to the registered parameters.
  /// Consumes the tape.
  ParamVector backward(const Var& root);

  /// Used by op implementations.
  Var record(Tensor value, const Var& a, const Var* b, BackwardFn fn);

 private:
  struct Node {
    int parent_a = -1;
    int parent_b = -1;
    Shape shape;
    BackwardFn fn;
  };

  std::vector<Node> nodes_;
  bool recording_;
  bool consumed_ = false;
  int param_node_ = -1;
  LayoutPtr param_layout_;
};

/// Total tape nodes allocated by this thread, for allocation assertions.
std::size_t nodes_allocated();

Var reshape(const Var& x, Shape shape);
/// Contiguous slice [offset, offset + numel(shape)) of a flat var, reshaped.
Var slice(const Var& x, std::size_t offset, Shape shape);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var add_scalar(const Var& x, double s);

/// (n, k) x (k, m) -> (n, m)
Var matmul(const Var& a, const Var& b);
/// (n, m) + broadcast (m)
Var add_row_bias(const Var& x, const Var& bias);

Var relu(const Var& x);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
Var square(const Var& x);

Var sum(const Var& x);
/// sum_i weights[i] * x[i] over a flat view; weights are constants.
Var weighted_sum(const Var& x, std::span<const double> weights);

/// Row-wise softmax cross-entropy: logits (n, c), integer class targets (n) -> (n).
Var softmax_cross_entropy(const Var& logits, std::span<const double> targets);
/// Row-wise mean squared error: pred (n, m), targets (n, m) -> (n).
Var squared_error(const Var& pred, const Tensor& targets);

}  // namespace sharpopt::autodiff
