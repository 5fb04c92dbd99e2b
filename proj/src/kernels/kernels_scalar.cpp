#include "advgen/kernels.hpp"

#include <algorithm>

namespace advgen::kernels {
namespace {

double dot_scalar(const double* x, const double* y, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

void axpy_scalar(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void axpy4_scalar(const double* a, const double* x, double* y0, double* y1,
                  double* y2, double* y3, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    y0[i] += a[0] * v;
    y1[i] += a[1] * v;
    y2[i] += a[2] * v;
    y3[i] += a[3] * v;
  }
}

void mul_acc_scalar(const double* x, const double* y, double* z, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) z[i] += x[i] * y[i];
}

void scale_scalar(double a, double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= a;
}

double sum_scalar(const double* x, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

double max_scalar(const double* x, std::size_t n) {
  return *std::max_element(x, x + n);
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{Isa::kScalar, "scalar", dot_scalar,
                                 axpy_scalar,  axpy4_scalar, mul_acc_scalar,
                                 scale_scalar, sum_scalar,   max_scalar};
  return table;
}

}  // namespace advgen::kernels
