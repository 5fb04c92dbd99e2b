#pragma once

// Dense double-precision inner-loop kernels.
//
// Every kernel exists as a portable scalar reference and, on x86-64, as an
// AVX2/FMA variant. The variant is picked once at startup from CPUID; tests
// can force a specific table to check that both agree.

#include <cstddef>
#include <string_view>

namespace advgen::kernels {

enum class Isa { kScalar, kAvx2 };

struct KernelTable {
  Isa isa;
  std::string_view name;
  // sum_i x[i] * y[i]
  double (*dot)(const double* x, const double* y, std::size_t n);
  // y[i] += a * x[i]
  void (*axpy)(double a, const double* x, double* y, std::size_t n);
  // y0[i] += a[0] * x[i], ..., y3[i] += a[3] * x[i]
  void (*axpy4)(const double* a, const double* x, double* y0, double* y1,
                double* y2, double* y3, std::size_t n);
  // z[i] += x[i] * y[i]
  void (*mul_acc)(const double* x, const double* y, double* z, std::size_t n);
  // x[i] *= a
  void (*scale)(double a, double* x, std::size_t n);
  // sum_i x[i]
  double (*sum)(const double* x, std::size_t n);
  // max_i x[i]; n must be positive
  double (*max)(const double* x, std::size_t n);
};

const KernelTable& scalar_table();

// nullptr when the binary or the CPU lacks AVX2/FMA.
const KernelTable* avx2_table();

// The table used by the rest of the library.
const KernelTable& active();

// Overrides the runtime choice; used by equivalence tests and benchmarks.
// Throws std::invalid_argument if the requested ISA is unavailable.
void force_isa(Isa isa);

// Re-runs CPU detection.
void reset_isa();

}  // namespace advgen::kernels
