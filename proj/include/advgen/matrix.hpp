#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace advgen {

// Row-major dense matrix of doubles. A batch of vectors is stored one per row.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix row_vector(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  void fill(double v);
  void resize(std::size_t rows, std::size_t cols, double fill = 0.0);

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape_string() const;

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace linalg {

// c = a * b
Matrix matmul(const Matrix& a, const Matrix& b);
// c += a * b
void matmul_acc(const Matrix& a, const Matrix& b, Matrix& c);
// c += a^T * b
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c);
// c += a * b^T
void matmul_nt_acc(const Matrix& a, const Matrix& b, Matrix& c);

// y += alpha * x (same shape)
void add_scaled(const Matrix& x, double alpha, Matrix& y);
// adds a 1 x cols row to every row of m
void add_row_broadcast(const Matrix& bias, Matrix& m);

void softmax_rows(Matrix& m);
void log_softmax_rows(Matrix& m);
std::size_t argmax(std::span<const double> v);

// GRU gate arithmetic shared by the training tape and the inference path.
// gx and gh are B x 3H pre-activations [reset | update | candidate]; writes
// the next state into h_next and, when non-null, the gate activations.
void gru_gates(const Matrix& gx, const Matrix& gh, const Matrix& h, Matrix& h_next,
               Matrix* reset = nullptr, Matrix* update = nullptr, Matrix* candidate = nullptr);

double sigmoid(double x);

double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace linalg
}  // namespace advgen
