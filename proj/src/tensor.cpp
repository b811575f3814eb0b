#include "htcl/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace htcl {

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw std::invalid_argument("Tensor: shape " + shape_str() + " does not match data length " +
                                std::to_string(data_.size()));
  }
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

Tensor Tensor::row(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor({1, n}, std::move(v));
}

Tensor Tensor::matrix(int rows, int cols, std::vector<double> v) {
  return Tensor({rows, cols}, std::move(v));
}

int Tensor::rows() const {
  if (shape_.size() != 2) throw std::logic_error("Tensor::rows: rank-" + std::to_string(shape_.size()) + " tensor");
  return shape_[0];
}

int Tensor::cols() const {
  if (shape_.size() != 2) throw std::logic_error("Tensor::cols: rank-" + std::to_string(shape_.size()) + " tensor");
  return shape_[1];
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << "x";
    os << shape_[i];
  }
  if (shape_.empty()) os << "()";
  return os.str();
}

double Tensor::item() const {
  if (size() != 1) throw std::logic_error("Tensor::item: tensor has " + std::to_string(size()) + " entries");
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::fill(double v) {
  for (double& x : data_) x = v;
}

void Tensor::add_inplace(const Tensor& o) {
  if (!same_shape(o)) {
    throw std::invalid_argument("Tensor::add_inplace: shape mismatch " + shape_str() + " vs " + o.shape_str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
}

}  // namespace htcl
