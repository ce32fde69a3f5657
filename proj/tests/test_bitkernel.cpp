#include <doctest.h>

#include "bitformer/bitkernel.hpp"
#include "bitformer/errors.hpp"
#include "bitformer/numerics.hpp"
#include "bitformer/rng.hpp"
#include "bitformer/verify.hpp"

using namespace bitformer;

namespace {

DenseMatrix random_pm1(std::size_t r, std::size_t c, Rng& rng) {
  DenseMatrix m(r, c);
  for (double& v : m.values()) v = (rng() & 1) ? 1.0 : -1.0;
  return m;
}

DenseMatrix random_01(std::size_t r, std::size_t c, Rng& rng) {
  DenseMatrix m(r, c);
  for (double& v : m.values()) v = (rng() & 1) ? 1.0 : 0.0;
  return m;
}

}  // namespace

TEST_CASE("pack_signs") {
  const auto p = pack_signs(DenseMatrix::from_rows({{0.5, -0.5, 0.0}}));
  CHECK(p.bit(0, 0));
  CHECK_FALSE(p.bit(0, 1));
  CHECK(p.bit(0, 2));  // sign(0) = +1
  CHECK(p.padding_clear());

  const auto ones = pack_signs(DenseMatrix(1, 64, 0.25));
  REQUIRE(ones.words_per_row() == 1);
  CHECK(ones.words()[0] == ~std::uint64_t{0});

  Rng rng = substream(2, "pack");
  DenseMatrix m(3, 130);
  for (double& v : m.values()) v = standard_normal(rng);
  const auto un = unpack_signs(pack_signs(m));
  for (std::size_t i = 0; i < m.size(); ++i) CHECK(un[i] == (m[i] >= 0 ? 1.0 : -1.0));
  CHECK(pack_signs(m).padding_clear());
}

TEST_CASE("pack_nonzero round trip") {
  Rng rng = substream(3, "pack");
  const auto m = random_01(5, 70, rng);
  CHECK(unpack_01(pack_nonzero(m)) == m);
}

TEST_CASE("xnor_popcount_dot") {
  const auto a = pack_signs(DenseMatrix::from_rows({{1, -1, 1}}));
  const auto b = pack_signs(DenseMatrix::from_rows({{1, 1, -1}}));
  CHECK(xnor_popcount_dot(a.row(0), b.row(0), 3) == -1);

  Rng rng = substream(4, "dot");
  const auto x = random_pm1(1, 100, rng);
  const auto px = pack_signs(x);
  CHECK(xnor_popcount_dot(px.row(0), px.row(0), 100) == 100);

  const auto u = random_pm1(1, 200, rng), v = random_pm1(1, 200, rng);
  double dot = 0;
  for (std::size_t i = 0; i < 200; ++i) dot += u[i] * v[i];
  CHECK(xnor_popcount_dot(pack_signs(u).row(0), pack_signs(v).row(0), 200) == static_cast<int>(dot));

  const auto short_row = pack_signs(random_pm1(1, 64, rng));
  CHECK_THROWS_AS(xnor_popcount_dot(short_row.row(0), pack_signs(u).row(0), 200), DimensionError);
}

TEST_CASE("binary_gemm") {
  const auto a = DenseMatrix::from_rows({{1, -1}, {-1, 1}});
  const auto pa = pack_signs(a);
  const auto out = binary_gemm(pa, pa, 1.0);  // b stored transposed: bᵀ = a here
  CHECK(out == DenseMatrix::from_rows({{2, -2}, {-2, 2}}));
  CHECK(binary_gemm(pa, pa, 0.0) == DenseMatrix(2, 2, 0.0));

  Rng rng = substream(5, "gemm");
  const auto x = random_pm1(64, 96, rng), yt = random_pm1(80, 96, rng);
  const auto want = matmul_nt(x, yt);
  const auto counts = binary_gemm_counts(pack_signs(x), pack_signs(yt));
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t j = 0; j < 80; ++j) CHECK(counts(i, j) == static_cast<std::int32_t>(want(i, j)));
  const auto scaled = binary_gemm(pack_signs(x), pack_signs(yt), 0.37);
  for (std::size_t i = 0; i < scaled.size(); ++i) CHECK(std::abs(scaled[i] - 0.37 * want[i]) <= 1e-12);

  const auto sp = binary_gemm_scaled(pack_signs(x), pack_signs(yt), 0.37);
  CHECK(sp.accumulator == counts);
  CHECK(sp.readout() == scaled);

  CHECK_THROWS_AS(binary_gemm_counts(pack_signs(x), pack_signs(random_pm1(3, 95, rng))), DimensionError);
}

TEST_CASE("ternary_binary_gemm") {
  // [1,0]·[+1,−1]ᵀ: Att±·V = 2, 1·V = 0, (2 + 0) >> 1 = 1
  const auto att = pack_nonzero(DenseMatrix::from_rows({{1, 0}}));
  const auto v = pack_signs(DenseMatrix::from_rows({{1, -1}}));
  CHECK(ternary_binary_gemm(att, v)(0, 0) == 1);

  Rng rng = substream(6, "ternary");
  const auto zero = pack_nonzero(DenseMatrix(1, 16, 0.0));
  const auto vt = random_pm1(32, 16, rng);
  const auto z = ternary_binary_gemm(zero, pack_signs(vt));
  for (auto c : z.data) CHECK(c == 0);

  const auto a01 = random_01(16, 16, rng);
  const auto got = ternary_binary_gemm(pack_nonzero(a01), pack_signs(vt));
  const auto want = matmul_nt(a01, vt);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 32; ++j) CHECK(got(i, j) == static_cast<std::int32_t>(want(i, j)));
}

TEST_CASE("kernel and ternary property suites") {
  CHECK(verify_kernel(3, 50, 130).passed);
  CHECK(verify_ternary(3, 50, 130).passed);
}
