#include "advgen/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "advgen/kernels.hpp"

namespace advgen {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw std::invalid_argument("matrix data size does not match shape");
  }
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Matrix::resize(std::size_t rows, std::size_t cols, double fill) {
  rows_ = rows;
  cols_ = cols;
  data_.assign(rows * cols, fill);
}

std::string Matrix::shape_string() const {
  return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

namespace linalg {
namespace {

void require(bool ok, const char* what, const Matrix& a, const Matrix& b) {
  if (!ok) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_string() +
                                " vs " + b.shape_string());
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  matmul_acc(a, b, c);
  return c;
}

void matmul_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  require(a.cols() == b.rows(), "matmul", a, b);
  require(c.rows() == a.rows() && c.cols() == b.cols(), "matmul output", c, b);
  const auto& k = kernels::active();
  const std::size_t n = b.cols();
  const std::size_t inner = a.cols();
  std::size_t i = 0;
  // Four output rows share each load of a row of b.
  for (; i + 4 <= a.rows(); i += 4) {
    double* c0 = c.data() + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    const double* a0 = a.data() + i * inner;
    for (std::size_t p = 0; p < inner; ++p) {
      const double coef[4] = {a0[p], a0[p + inner], a0[p + 2 * inner], a0[p + 3 * inner]};
      if (coef[0] == 0.0 && coef[1] == 0.0 && coef[2] == 0.0 && coef[3] == 0.0) continue;
      k.axpy4(coef, b.data() + p * n, c0, c1, c2, c3, n);
    }
  }
  for (; i < a.rows(); ++i) {
    double* ci = c.data() + i * n;
    const double* ai = a.data() + i * inner;
    for (std::size_t p = 0; p < inner; ++p) {
      if (ai[p] == 0.0) continue;
      k.axpy(ai[p], b.data() + p * n, ci, n);
    }
  }
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  require(a.rows() == b.rows(), "matmul_tn", a, b);
  require(c.rows() == a.cols() && c.cols() == b.cols(), "matmul_tn output", c, b);
  const auto& k = kernels::active();
  const std::size_t n = b.cols();
  const std::size_t m = a.cols();
  for (std::size_t p = 0; p < a.rows(); ++p) {
    const double* ap = a.data() + p * m;
    const double* bp = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      if (ap[i] == 0.0) continue;
      k.axpy(ap[i], bp, c.data() + i * n, n);
    }
  }
}

void matmul_nt_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  require(a.cols() == b.cols(), "matmul_nt", a, b);
  require(c.rows() == a.rows() && c.cols() == b.rows(), "matmul_nt output", c, b);
  const auto& k = kernels::active();
  const std::size_t inner = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.data() + i * inner;
    double* ci = c.data() + i * c.cols();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      ci[j] += k.dot(ai, b.data() + j * inner, inner);
    }
  }
}

void add_scaled(const Matrix& x, double alpha, Matrix& y) {
  require(x.same_shape(y), "add_scaled", x, y);
  kernels::active().axpy(alpha, x.data(), y.data(), x.size());
}

void add_row_broadcast(const Matrix& bias, Matrix& m) {
  if (bias.rows() != 1 || bias.cols() != m.cols()) {
    throw std::invalid_argument("bias broadcast: shape mismatch " + bias.shape_string() + " vs " +
                                m.shape_string());
  }
  const auto& k = kernels::active();
  for (std::size_t r = 0; r < m.rows(); ++r) k.axpy(1.0, bias.data(), m.row(r).data(), m.cols());
}

void softmax_rows(Matrix& m) {
  const auto& k = kernels::active();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double mx = k.max(row.data(), row.size());
    double total = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      total += v;
    }
    k.scale(1.0 / total, row.data(), row.size());
  }
}

void log_softmax_rows(Matrix& m) {
  const auto& k = kernels::active();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double mx = k.max(row.data(), row.size());
    double total = 0.0;
    for (double v : row) total += std::exp(v - mx);
    const double lse = mx + std::log(total);
    for (double& v : row) v -= lse;
  }
}

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void gru_gates(const Matrix& gx, const Matrix& gh, const Matrix& h, Matrix& h_next, Matrix* reset,
               Matrix* update, Matrix* candidate) {
  const std::size_t hidden = h.cols();
  if (gx.cols() != 3 * hidden || !gx.same_shape(gh) || gx.rows() != h.rows()) {
    throw std::invalid_argument("gru_gates: shape mismatch " + gx.shape_string() + ", " +
                                gh.shape_string() + ", " + h.shape_string());
  }
  h_next.resize(h.rows(), hidden);
  if (reset) reset->resize(h.rows(), hidden);
  if (update) update->resize(h.rows(), hidden);
  if (candidate) candidate->resize(h.rows(), hidden);
  for (std::size_t b = 0; b < h.rows(); ++b) {
    const double* x = gx.row(b).data();
    const double* g = gh.row(b).data();
    const double* hp = h.row(b).data();
    double* out = h_next.row(b).data();
    for (std::size_t j = 0; j < hidden; ++j) {
      const double r = sigmoid(x[j] + g[j]);
      const double z = sigmoid(x[hidden + j] + g[hidden + j]);
      const double n = std::tanh(x[2 * hidden + j] + r * g[2 * hidden + j]);
      out[j] = n + z * (hp[j] - n);
      if (reset) (*reset)(b, j) = r;
      if (update) (*update)(b, j) = z;
      if (candidate) (*candidate)(b, j) = n;
    }
  }
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "max_abs_diff", a, b);
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  return d;
}

}  // namespace linalg
}  // namespace advgen
