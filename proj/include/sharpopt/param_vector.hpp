#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sharpopt/tensor.hpp"

namespace sharpopt {

/// A named block of a flattened parameter vector.
struct Segment {
  std::string name;
  Shape shape;
  std::size_t offset = 0;

  std::size_t size() const { return shape_numel(shape); }
  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Ordered segments partitioning [0, dim()) without gaps or overlaps.
class ParamLayout {
 public:
  ParamLayout() = default;

  /// Appends a segment at the current end of the layout.
  ParamLayout& add(std::string name, Shape shape);

  /// Single unnamed segment of `dim` coordinates.
  static std::shared_ptr<const ParamLayout> flat(std::size_t dim, std::string name = "w");

  const std::vector<Segment>& segments() const { return segments_; }
  const Segment& segment(const std::string& name) const;
  std::size_t dim() const { return dim_; }

  friend bool operator==(const ParamLayout&, const ParamLayout&) = default;

 private:
  std::vector<Segment> segments_;
  std::size_t dim_ = 0;
};

using LayoutPtr = std::shared_ptr<const ParamLayout>;

/// Flattened weights (or a perturbation) living in one D-dimensional space.
///
/// Vectors sharing a layout (by identity or by value) combine element-wise;
/// any other combination throws DimensionError.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(LayoutPtr layout, double fill = 0.0);
  ParamVector(LayoutPtr layout, std::vector<double> data);

  /// Convenience for tests and closed-form oracles: a single flat segment.
  static ParamVector from_values(std::vector<double> values);

  const LayoutPtr& layout_ptr() const { return layout_; }
  const ParamLayout& layout() const { return *layout_; }
  std::size_t dim() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<const double> segment_data(const std::string& name) const;
  Tensor segment_tensor(const std::string& name) const;

  bool compatible_with(const ParamVector& other) const;

  ParamVector& operator+=(const ParamVector& other);
  ParamVector& operator-=(const ParamVector& other);
  ParamVector& operator*=(double scale);
  /// this += alpha * x
  ParamVector& axpy(double alpha, const ParamVector& x);

  friend ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
  friend ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
  friend ParamVector operator*(double s, ParamVector a) { return a *= s; }
  friend ParamVector operator*(ParamVector a, double s) { return a *= s; }

  /// Bitwise equality of layout and stored values.
  friend bool operator==(const ParamVector& a, const ParamVector& b);

  bool all_finite() const;

 private:
  void require_compatible(const ParamVector& other, const char* op) const;

  LayoutPtr layout_;
  std::vector<double> data_;
};

double dot(const ParamVector& a, const ParamVector& b);
double norm2(const ParamVector& v);
/// Cosine similarity; 0 when either operand is the zero vector.
double cosine(const ParamVector& a, const ParamVector& b);
double max_abs_diff(const ParamVector& a, const ParamVector& b);

}  // namespace sharpopt
