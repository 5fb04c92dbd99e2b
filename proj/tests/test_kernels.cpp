#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "advgen/kernels.hpp"
#include "advgen/matrix.hpp"
#include "doctest.h"

using namespace advgen;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

struct IsaGuard {
  ~IsaGuard() { kernels::reset_isa(); }
};

}  // namespace

TEST_CASE("scalar and avx2 kernels agree on every length up to 67") {
  const auto* simd = kernels::avx2_table();
  if (!simd) {
    MESSAGE("AVX2 unavailable; only the scalar table is exercised");
    return;
  }
  const auto& ref = kernels::scalar_table();
  for (std::size_t n = 1; n <= 67; ++n) {
    const auto x = random_vec(n, n);
    const auto y = random_vec(n, 1000 + n);
    const double tol = 1e-13 * static_cast<double>(n);

    CHECK(simd->dot(x.data(), y.data(), n) == doctest::Approx(ref.dot(x.data(), y.data(), n)).epsilon(tol));
    CHECK(simd->sum(x.data(), n) == doctest::Approx(ref.sum(x.data(), n)).epsilon(tol));
    CHECK(simd->max(x.data(), n) == ref.max(x.data(), n));

    auto ya = y;
    auto yb = y;
    ref.axpy(0.37, x.data(), ya.data(), n);
    simd->axpy(0.37, x.data(), yb.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(ya[i] == doctest::Approx(yb[i]).epsilon(1e-15));

    auto za = y;
    auto zb = y;
    ref.mul_acc(x.data(), y.data(), za.data(), n);
    simd->mul_acc(x.data(), y.data(), zb.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(za[i] == doctest::Approx(zb[i]).epsilon(1e-15));

    const double coef[4] = {0.5, -1.25, 2.0, 0.0};
    std::vector<std::vector<double>> ra(4, y), rb(4, y);
    ref.axpy4(coef, x.data(), ra[0].data(), ra[1].data(), ra[2].data(), ra[3].data(), n);
    simd->axpy4(coef, x.data(), rb[0].data(), rb[1].data(), rb[2].data(), rb[3].data(), n);
    for (int r = 0; r < 4; ++r) {
      for (std::size_t i = 0; i < n; ++i) CHECK(ra[r][i] == doctest::Approx(rb[r][i]).epsilon(1e-15));
    }

    auto sa = x;
    auto sb = x;
    ref.scale(-3.5, sa.data(), n);
    simd->scale(-3.5, sb.data(), n);
    CHECK(sa == sb);
  }
}

TEST_CASE("matmul variants agree across kernel tables and with a naive triple loop") {
  IsaGuard guard;
  Matrix a(7, 13);
  Matrix b(13, 9);
  const auto av = random_vec(a.size(), 1);
  const auto bv = random_vec(b.size(), 2);
  std::copy(av.begin(), av.end(), a.data());
  std::copy(bv.begin(), bv.end(), b.data());
  a(2, 3) = 0.0;  // exercises the zero-skip path

  Matrix naive(7, 9);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 9; ++j)
      for (std::size_t p = 0; p < 13; ++p) naive(i, j) += a(i, p) * b(p, j);

  std::vector<kernels::Isa> isas{kernels::Isa::kScalar};
  if (kernels::avx2_table()) isas.push_back(kernels::Isa::kAvx2);
  for (auto isa : isas) {
    kernels::force_isa(isa);
    CHECK(linalg::max_abs_diff(linalg::matmul(a, b), naive) < 1e-12);

    Matrix at(13, 7);
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t p = 0; p < 13; ++p) at(p, i) = a(i, p);
    Matrix tn(7, 9);
    linalg::matmul_tn_acc(at, b, tn);
    CHECK(linalg::max_abs_diff(tn, naive) < 1e-12);

    Matrix bt(9, 13);
    for (std::size_t p = 0; p < 13; ++p)
      for (std::size_t j = 0; j < 9; ++j) bt(j, p) = b(p, j);
    Matrix nt(7, 9);
    linalg::matmul_nt_acc(a, bt, nt);
    CHECK(linalg::max_abs_diff(nt, naive) < 1e-12);
  }
}

TEST_CASE("one-hot rows select table rows exactly") {
  Matrix table(6, 5);
  const auto tv = random_vec(table.size(), 3);
  std::copy(tv.begin(), tv.end(), table.data());
  Matrix onehot(6, 6);
  for (std::size_t i = 0; i < 6; ++i) onehot(i, 5 - i) = 1.0;
  const Matrix out = linalg::matmul(onehot, table);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t c = 0; c < 5; ++c) CHECK(out(i, c) == table(5 - i, c));
  }
}

TEST_CASE("forcing an unavailable ISA is rejected") {
  IsaGuard guard;
  if (kernels::avx2_table()) {
    kernels::force_isa(kernels::Isa::kAvx2);
    CHECK(kernels::active().isa == kernels::Isa::kAvx2);
  } else {
    CHECK_THROWS_AS(kernels::force_isa(kernels::Isa::kAvx2), std::invalid_argument);
  }
  kernels::force_isa(kernels::Isa::kScalar);
  CHECK(kernels::active().isa == kernels::Isa::kScalar);
}

TEST_CASE("softmax rows are normalised and shift invariant") {
  Matrix m(3, 8);
  const auto v = random_vec(m.size(), 4);
  std::copy(v.begin(), v.end(), m.data());
  Matrix shifted = m;
  for (double& x : shifted.flat()) x += 123.0;
  linalg::softmax_rows(m);
  linalg::softmax_rows(shifted);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (double x : m.row(r)) s += x;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(linalg::max_abs_diff(m, shifted) < 1e-12);
}
