#include "sharpopt/param_vector.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace sharpopt {

ParamLayout& ParamLayout::add(std::string name, Shape shape) {
  Segment seg{std::move(name), std::move(shape), dim_};
  dim_ += seg.size();
  segments_.push_back(std::move(seg));
  return *this;
}

LayoutPtr ParamLayout::flat(std::size_t dim, std::string name) {
  auto layout = std::make_shared<ParamLayout>();
  layout->add(std::move(name), Shape{dim});
  return layout;
}

const Segment& ParamLayout::segment(const std::string& name) const {
  for (const auto& seg : segments_) {
    if (seg.name == name) return seg;
  }
  throw DimensionError("layout has no segment named '" + name + "'");
}

ParamVector::ParamVector(LayoutPtr layout, double fill)
    : layout_(std::move(layout)), data_(layout_ ? layout_->dim() : 0, fill) {}

ParamVector::ParamVector(LayoutPtr layout, std::vector<double> data)
    : layout_(std::move(layout)), data_(std::move(data)) {
  if (!layout_ || layout_->dim() != data_.size()) {
    throw DimensionError("parameter data of length " + std::to_string(data_.size()) +
                         " does not match layout dimension " +
                         std::to_string(layout_ ? layout_->dim() : 0));
  }
}

ParamVector ParamVector::from_values(std::vector<double> values) {
  auto layout = ParamLayout::flat(values.size());
  return ParamVector(std::move(layout), std::move(values));
}

std::span<const double> ParamVector::segment_data(const std::string& name) const {
  const Segment& seg = layout_->segment(name);
  return std::span<const double>(data_).subspan(seg.offset, seg.size());
}

Tensor ParamVector::segment_tensor(const std::string& name) const {
  const Segment& seg = layout_->segment(name);
  auto span = segment_data(name);
  return Tensor(seg.shape, std::vector<double>(span.begin(), span.end()));
}

bool ParamVector::compatible_with(const ParamVector& other) const {
  if (data_.size() != other.data_.size()) return false;
  if (layout_ == other.layout_) return true;
  return layout_ && other.layout_ && *layout_ == *other.layout_;
}

void ParamVector::require_compatible(const ParamVector& other, const char* op) const {
  if (!compatible_with(other)) {
    throw DimensionError(std::string(op) + ": parameter layouts differ (dim " +
                         std::to_string(dim()) + " vs " + std::to_string(other.dim()) + ")");
  }
}

ParamVector& ParamVector::operator+=(const ParamVector& other) {
  require_compatible(other, "add");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

ParamVector& ParamVector::operator-=(const ParamVector& other) {
  require_compatible(other, "subtract");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

ParamVector& ParamVector::operator*=(double scale) {
  for (double& v : data_) v *= scale;
  return *this;
}

ParamVector& ParamVector::axpy(double alpha, const ParamVector& x) {
  require_compatible(x, "axpy");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += alpha * x.data_[i];
  return *this;
}

bool operator==(const ParamVector& a, const ParamVector& b) {
  if (!a.compatible_with(b)) return false;
  return a.data_.empty() ||
         std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(double)) == 0;
}

bool ParamVector::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double dot(const ParamVector& a, const ParamVector& b) {
  if (!a.compatible_with(b)) throw DimensionError("dot: parameter layouts differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm2(const ParamVector& v) { return std::sqrt(dot(v, v)); }

double cosine(const ParamVector& a, const ParamVector& b) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

double max_abs_diff(const ParamVector& a, const ParamVector& b) {
  if (!a.compatible_with(b)) throw DimensionError("max_abs_diff: parameter layouts differ");
  double m = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace sharpopt
