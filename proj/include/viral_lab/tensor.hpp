#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace viral {

using Shape = std::vector<std::size_t>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major float64 array. Every dimension is positive and
/// data().size() == product(shape) holds for the lifetime of the object.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);
  static Tensor from_matrix(const RowMatrix& m);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  /// Rows/cols view a rank-1 tensor as a single row; other ranks throw.
  std::size_t rows() const {
    if (shape_.size() == 2) return shape_[0];
    if (shape_.size() == 1) return 1;
    bad_rank("rows()");
  }
  std::size_t cols() const {
    if (shape_.empty() || shape_.size() > 2) bad_rank("cols()");
    return cols_;
  }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }

  /// Scalar value of a one-element tensor.
  double item() const;

  MatrixMap mat();
  ConstMatrixMap mat() const;

  std::span<const double> row(std::size_t r) const { return data().subspan(r * cols(), cols()); }
  std::span<double> row(std::size_t r) { return data().subspan(r * cols(), cols()); }

  Tensor reshaped(Shape shape) const;
  Tensor rows_slice(std::size_t begin, std::size_t count) const;

  bool all_finite() const;
  double max_abs() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  [[noreturn]] void bad_rank(const char* what) const;

  Shape shape_;
  // Aligned storage keeps Eigen's vectorized reductions independent of where
  // the heap happens to place a buffer, so runs are bit-reproducible.
  std::vector<double, Eigen::aligned_allocator<double>> data_;
  std::size_t cols_ = 0;  // last dimension for rank 1 and 2
};

/// Max |a - b| over matching shapes; throws ShapeError otherwise.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace viral
