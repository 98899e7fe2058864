#include "latmask/ndarray.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "latmask/errors.hpp"

namespace latmask {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

NDArray::NDArray(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

NDArray::NDArray(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel(shape_) != data_.size()) {
    throw ContractError("NDArray: shape " + shape_str(shape_) + " does not match " +
                        std::to_string(data_.size()) + " values");
  }
}

NDArray NDArray::from(std::initializer_list<double> values) {
  return NDArray(Shape{values.size()}, std::vector<double>(values));
}

NDArray NDArray::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> data;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& row : rows) {
    if (row.size() != cols) throw ContractError("NDArray::matrix: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return NDArray(Shape{rows.size(), cols}, std::move(data));
}

double NDArray::item() const {
  if (data_.size() != 1) {
    throw ContractError("item() on array of shape " + shape_str(shape_));
  }
  return data_[0];
}

NDArray NDArray::reshaped(Shape shape) const {
  return NDArray(std::move(shape), data_);
}

bool NDArray::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const NDArray& a, const NDArray& b) {
  if (a.shape() != b.shape()) {
    throw ContractError("max_abs_diff: shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace latmask
