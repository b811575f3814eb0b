#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace htcl {

/// Dense row-major tensor of doubles. Rank is arbitrary but almost all of
/// the code works with rank-2 (rows x cols) and treats 1x1 as a scalar.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v);
  static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }
  static Tensor row(std::vector<double> v);
  static Tensor matrix(int rows, int cols, std::vector<double> v);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int rows() const;
  int cols() const;
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  std::string shape_str() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
  double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

  /// Value of a 1x1 tensor.
  double item() const;

  bool all_finite() const;
  void fill(double v);
  void add_inplace(const Tensor& o);

private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

std::int64_t shape_numel(const std::vector<int>& shape);

}  // namespace htcl
