#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace metacomp {

/// Dense 64-bit real array of rank 0 (scalar), 1 (vector) or 2 (matrix),
/// row-major. All model math in this project runs on doubles so that
/// finite-difference checks have enough precision to be meaningful.
class Tensor {
 public:
  Tensor() = default;

  static Tensor scalar(double v) {
    Tensor t;
    t.data_.assign(1, v);
    return t;
  }
  static Tensor vector(std::vector<double> v) {
    Tensor t;
    t.shape_ = {v.size()};
    t.data_ = std::move(v);
    return t;
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    if (v.size() != rows * cols) throw std::invalid_argument("Tensor::matrix: data size mismatch");
    Tensor t;
    t.shape_ = {rows, cols};
    t.data_ = std::move(v);
    return t;
  }
  static Tensor zeros(const std::vector<std::size_t>& shape) {
    Tensor t;
    t.shape_ = shape;
    t.data_.assign(t.count_(), 0.0);
    return t;
  }
  static Tensor full(const std::vector<std::size_t>& shape, double v) {
    Tensor t;
    t.shape_ = shape;
    t.data_.assign(t.count_(), v);
    return t;
  }

  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  const std::vector<std::size_t>& shape() const { return shape_; }
  /// Rows of a matrix; length of a vector; 1 for a scalar.
  std::size_t rows() const { return rank() == 2 ? shape_[0] : (rank() == 1 ? shape_[0] : 1); }
  /// Columns of a matrix; 1 otherwise.
  std::size_t cols() const { return rank() == 2 ? shape_[1] : 1; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;
  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

  std::string shape_str() const;

 private:
  std::size_t count_() const {
    std::size_t n = 1;
    for (auto s : shape_) n *= s;
    return n;
  }

  std::vector<std::size_t> shape_;   // empty = scalar
  std::vector<double> data_{0.0};
};

}  // namespace metacomp
