#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace textrefiner::numkit {

// Dense row-major matrix of 64-bit reals. Value semantics throughout; all
// training math runs in double and narrows to float32 only at file
// boundaries.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix zeros(std::size_t rows, std::size_t cols);
  static Matrix full(std::size_t rows, std::size_t cols, double value);
  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double* row_ptr(std::size_t r) { return data_.data() + r * cols_; }
  const double* row_ptr(std::size_t r) const { return data_.data() + r * cols_; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_str() const;

  bool all_finite() const;
  void fill(double value);

  Matrix row(std::size_t r) const;                             // 1 x cols copy
  Matrix rows_slice(std::size_t begin, std::size_t count) const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Absolute elementwise closeness, used by tests and validators.
bool approx_equal(const Matrix& a, const Matrix& b, double tolerance);
double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace textrefiner::numkit
