#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace latmask {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float64 array.
class NDArray {
 public:
  NDArray() = default;
  explicit NDArray(Shape shape, double fill = 0.0);
  NDArray(Shape shape, std::vector<double> data);

  static NDArray scalar(double v) { return NDArray(Shape{}, std::vector<double>{v}); }
  static NDArray from(std::initializer_list<double> values);
  static NDArray matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  // Scalar value of a single-element array.
  double item() const;

  NDArray reshaped(Shape shape) const;
  bool all_finite() const;

  bool operator==(const NDArray& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Largest |a-b| over elements; shapes must match.
double max_abs_diff(const NDArray& a, const NDArray& b);

}  // namespace latmask
