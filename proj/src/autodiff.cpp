#include "sharpopt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace sharpopt::autodiff {
namespace {

thread_local std::size_t g_nodes_allocated = 0;

Var emit(Tensor value, const Var& a, const Var* b, BackwardFn fn) {
  Tape* tape = a.tape() ? a.tape() : (b ? b->tape() : nullptr);
  if (tape == nullptr) throw TapeError("operand is not bound to a tape");
  if (b && b->tape() && a.tape() && b->tape() != a.tape()) {
    throw TapeError("operands belong to different tapes");
  }
  return tape->record(std::move(value), a, b, std::move(fn));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

template <typename F, typename D>
Var unary_elementwise(const Var& x, F f, D dfdx) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
  auto keep_x = x;
  auto keep_out = std::make_shared<Tensor>(out);
  return emit(std::move(out), x, nullptr,
              [keep_x, keep_out, dfdx](const Tensor& g, Tensor* ga, Tensor*) {
                const Tensor& xin = keep_x.value();
                for (std::size_t i = 0; i < g.numel(); ++i) {
                  (*ga)[i] += g[i] * dfdx(xin[i], (*keep_out)[i]);
                }
              });
}

}  // namespace

std::size_t nodes_allocated() { return g_nodes_allocated; }

Var Tape::parameters(const ParamVector& w) {
  if (param_layout_) throw TapeError("tape already has a parameter leaf");
  param_layout_ = w.layout_ptr();
  auto value = std::make_shared<const Tensor>(Shape{w.dim()}, w.values());
  if (!recording_) return Var(std::move(value), this, -1);
  nodes_.push_back(Node{-1, -1, Shape{w.dim()}, nullptr});
  ++g_nodes_allocated;
  param_node_ = static_cast<int>(nodes_.size()) - 1;
  return Var(std::move(value), this, param_node_);
}

Var Tape::constant(Tensor value) {
  return Var(std::make_shared<const Tensor>(std::move(value)), this, -1);
}

Var Tape::record(Tensor value, const Var& a, const Var* b, BackwardFn fn) {
  const bool any_parent = a.recorded() || (b != nullptr && b->recorded());
  auto shared = std::make_shared<const Tensor>(std::move(value));
  if (!recording_ || !any_parent) return Var(std::move(shared), this, -1);
  nodes_.push_back(Node{a.node(), b ? b->node() : -1, shared->shape(), std::move(fn)});
  ++g_nodes_allocated;
  return Var(std::move(shared), this, static_cast<int>(nodes_.size()) - 1);
}

ParamVector Tape::backward(const Var& root) {
  if (consumed_) throw TapeError("backward called twice on the same tape");
  if (!root.recorded() || root.tape() != this) {
    throw TapeError("backward on a value that was not recorded on this tape");
  }
  if (root.value().numel() != 1) {
    throw TapeError("backward requires a scalar root, got shape " + shape_to_string(root.shape()));
  }
  if (param_node_ < 0) throw TapeError("backward on a tape without a parameter leaf");
  consumed_ = true;

  std::vector<Tensor> grads(nodes_.size());
  std::vector<bool> has_grad(nodes_.size(), false);
  const auto root_index = static_cast<std::size_t>(root.node());
  grads[root_index] = Tensor(nodes_[root_index].shape, 1.0);
  has_grad[root_index] = true;

  auto slot = [&](int parent) -> Tensor* {
    if (parent < 0) return nullptr;
    const auto p = static_cast<std::size_t>(parent);
    if (!has_grad[p]) {
      grads[p] = Tensor(nodes_[p].shape, 0.0);
      has_grad[p] = true;
    }
    return &grads[p];
  };

  for (std::size_t i = root_index + 1; i-- > 0;) {
    if (!has_grad[i] || !nodes_[i].fn) continue;
    Tensor* ga = slot(nodes_[i].parent_a);
    Tensor* gb = slot(nodes_[i].parent_b);
    nodes_[i].fn(grads[i], ga, gb);
  }

  const auto p = static_cast<std::size_t>(param_node_);
  if (!has_grad[p]) return ParamVector(param_layout_, 0.0);
  return ParamVector(param_layout_, grads[p].values());
}

Var reshape(const Var& x, Shape shape) {
  if (shape_numel(shape) != x.value().numel()) {
    throw DimensionError("reshape " + shape_to_string(x.shape()) + " -> " + shape_to_string(shape));
  }
  return emit(x.value().reshaped(std::move(shape)), x, nullptr,
              [](const Tensor& g, Tensor* ga, Tensor*) {
                for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
              });
}

Var slice(const Var& x, std::size_t offset, Shape shape) {
  const std::size_t n = shape_numel(shape);
  if (offset + n > x.value().numel()) {
    throw DimensionError("slice [" + std::to_string(offset) + ", " + std::to_string(offset + n) +
                         ") exceeds " + std::to_string(x.value().numel()) + " values");
  }
  auto src = x.value().data().subspan(offset, n);
  Tensor out(std::move(shape), std::vector<double>(src.begin(), src.end()));
  return emit(std::move(out), x, nullptr, [offset](const Tensor& g, Tensor* ga, Tensor*) {
    for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[offset + i] += g[i];
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return emit(std::move(out), a, &b, [](const Tensor& g, Tensor* ga, Tensor* gb) {
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (ga) (*ga)[i] += g[i];
      if (gb) (*gb)[i] += g[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return emit(std::move(out), a, &b, [](const Tensor& g, Tensor* ga, Tensor* gb) {
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (ga) (*ga)[i] += g[i];
      if (gb) (*gb)[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return emit(std::move(out), a, &b, [a, b](const Tensor& g, Tensor* ga, Tensor* gb) {
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (ga) (*ga)[i] += g[i] * b.value()[i];
      if (gb) (*gb)[i] += g[i] * a.value()[i];
    }
  });
}

Var scale(const Var& x, double s) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = s * x.value()[i];
  return emit(std::move(out), x, nullptr, [s](const Tensor& g, Tensor* ga, Tensor*) {
    for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += s * g[i];
  });
}

Var add_scalar(const Var& x, double s) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] + s;
  return emit(std::move(out), x, nullptr, [](const Tensor& g, Tensor* ga, Tensor*) {
    for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
  });
}

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw DimensionError("matmul: cannot multiply " + shape_to_string(av.shape()) + " by " +
                         shape_to_string(bv.shape()));
  }
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av.at(i, p);
      for (std::size_t j = 0; j < m; ++j) out.at(i, j) += aip * bv.at(p, j);
    }
  }
  return emit(std::move(out), a, &b, [a, b, n, k, m](const Tensor& g, Tensor* ga, Tensor* gb) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (ga) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j] * bv.at(p, j);
          (*ga)[i * k + p] += acc;
        }
    }
    if (gb) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av.at(i, p);
          for (std::size_t j = 0; j < m; ++j) (*gb)[p * m + j] += aip * g[i * m + j];
        }
    }
  });
}

Var add_row_bias(const Var& x, const Var& bias) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || bias.value().numel() != xv.cols()) {
    throw DimensionError("add_row_bias: bias of " + std::to_string(bias.value().numel()) +
                         " values for rows of shape " + shape_to_string(xv.shape()));
  }
  const std::size_t n = xv.rows(), m = xv.cols();
  Tensor out = xv;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) += bias.value()[j];
  return emit(std::move(out), x, &bias, [n, m](const Tensor& g, Tensor* ga, Tensor* gb) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        if (ga) (*ga)[i * m + j] += g[i * m + j];
        if (gb) (*gb)[j] += g[i * m + j];
      }
  });
}

Var relu(const Var& x) {
  return unary_elementwise(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Var tanh(const Var& x) {
  return unary_elementwise(
      x, [](double v) { return std::tanh(v); }, [](double, double out) { return 1.0 - out * out; });
}

Var sigmoid(const Var& x) {
  return unary_elementwise(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double out) { return out * (1.0 - out); });
}

Var square(const Var& x) {
  return unary_elementwise(
      x, [](double v) { return v * v; }, [](double in, double) { return 2.0 * in; });
}

Var sum(const Var& x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  return emit(Tensor::scalar(acc), x, nullptr, [](const Tensor& g, Tensor* ga, Tensor*) {
    const double up = g[0];
    for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += up;
  });
}

Var weighted_sum(const Var& x, std::span<const double> weights) {
  if (weights.size() != x.value().numel()) {
    throw DimensionError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(x.value().numel()) + " values");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += weights[i] * x.value()[i];
  std::vector<double> w(weights.begin(), weights.end());
  return emit(Tensor::scalar(acc), x, nullptr,
              [w = std::move(w)](const Tensor& g, Tensor* ga, Tensor*) {
                const double up = g[0];
                for (std::size_t i = 0; i < w.size(); ++i) (*ga)[i] += up * w[i];
              });
}

Var softmax_cross_entropy(const Var& logits, std::span<const double> targets) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || lv.rows() != targets.size()) {
    throw DimensionError("softmax_cross_entropy: logits " + shape_to_string(lv.shape()) + " for " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = lv.rows(), c = lv.cols();
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = targets[i];
    if (!(t >= 0.0) || t >= static_cast<double>(c) || t != std::floor(t)) {
      throw ParameterError("target id " + std::to_string(t) + " at row " + std::to_string(i) +
                           " outside class range [0, " + std::to_string(c) + ")");
    }
    labels[i] = static_cast<std::size_t>(t);
  }
  Tensor probs(Shape{n, c});
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = lv.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, lv.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(lv.at(i, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs.at(i, j) = std::exp(lv.at(i, j) - lse);
    out[i] = lse - lv.at(i, labels[i]);
  }
  return emit(std::move(out), logits, nullptr,
              [probs = std::move(probs), labels = std::move(labels), c](const Tensor& g, Tensor* ga,
                                                                        Tensor*) {
                for (std::size_t i = 0; i < labels.size(); ++i) {
                  for (std::size_t j = 0; j < c; ++j) {
                    const double onehot = j == labels[i] ? 1.0 : 0.0;
                    (*ga)[i * c + j] += g[i] * (probs.at(i, j) - onehot);
                  }
                }
              });
}

Var squared_error(const Var& pred, const Tensor& targets) {
  const Tensor& pv = pred.value();
  if (pv.rank() != 2 || shape_numel(targets.shape()) != pv.numel()) {
    throw DimensionError("squared_error: predictions " + shape_to_string(pv.shape()) +
                         " vs targets " + shape_to_string(targets.shape()));
  }
  const std::size_t n = pv.rows(), m = pv.cols();
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double d = pv.at(i, j) - targets[i * m + j];
      acc += d * d;
    }
    out[i] = acc / static_cast<double>(m);
  }
  return emit(std::move(out), pred, nullptr,
              [pred, targets, n, m](const Tensor& g, Tensor* ga, Tensor*) {
                const double inv_m = 1.0 / static_cast<double>(m);
                for (std::size_t i = 0; i < n; ++i)
                  for (std::size_t j = 0; j < m; ++j) {
                    const double d = pred.value()[i * m + j] - targets[i * m + j];
                    (*ga)[i * m + j] += 2.0 * inv_m * d * g[i];
                  }
              });
}

}  // namespace sharpopt::autodiff
