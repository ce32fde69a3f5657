// SPDX-License-Identifier: Apache-2.0
#include "bitformer/bitkernel.hpp"

#include <bit>

#include "bitformer/errors.hpp"

namespace bitformer {

PackedBitMatrix::PackedBitMatrix(std::size_t rows, std::size_t cols)
    : rows_(rows),
      cols_(cols),
      words_per_row_((cols + kWordBits - 1) / kWordBits),
      words_(rows * words_per_row_, 0) {}

bool PackedBitMatrix::bit(std::size_t r, std::size_t c) const {
  return (words_[r * words_per_row_ + c / kWordBits] >> (c % kWordBits)) & 1u;
}

void PackedBitMatrix::set_bit(std::size_t r, std::size_t c, bool on) {
  std::uint64_t& w = words_[r * words_per_row_ + c / kWordBits];
  const std::uint64_t m = std::uint64_t{1} << (c % kWordBits);
  w = on ? (w | m) : (w & ~m);
}

std::uint64_t PackedBitMatrix::tail_mask() const noexcept {
  const std::size_t rem = cols_ % kWordBits;
  return rem == 0 ? ~std::uint64_t{0} : ((std::uint64_t{1} << rem) - 1);
}

bool PackedBitMatrix::padding_clear() const noexcept {
  if (words_per_row_ == 0) return true;
  const std::uint64_t pad = ~tail_mask();
  for (std::size_t r = 0; r < rows_; ++r)
    if (words_[r * words_per_row_ + words_per_row_ - 1] & pad) return false;
  return true;
}

DenseMatrix ScaledBinaryProduct::readout() const {
  DenseMatrix out(accumulator.rows, accumulator.cols);
  for (std::size_t i = 0; i < accumulator.data.size(); ++i) out[i] = scale * accumulator.data[i];
  return out;
}

namespace {

template <typename Pred>
PackedBitMatrix pack_with(const DenseMatrix& m, Pred on) {
  PackedBitMatrix p(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto words = p.row(r);
    auto vals = m.row(r);
    for (std::size_t c = 0; c < vals.size(); ++c)
      if (on(vals[c])) words[c / PackedBitMatrix::kWordBits] |= std::uint64_t{1} << (c % PackedBitMatrix::kWordBits);
  }
  return p;
}

}  // namespace

PackedBitMatrix pack_signs(const DenseMatrix& m) {
  return pack_with(m, [](double v) { return v >= 0.0; });
}

PackedBitMatrix pack_nonzero(const DenseMatrix& m) {
  return pack_with(m, [](double v) { return v > 0.0; });
}

DenseMatrix unpack_signs(const PackedBitMatrix& p) {
  DenseMatrix m(p.rows(), p.cols());
  for (std::size_t r = 0; r < p.rows(); ++r)
    for (std::size_t c = 0; c < p.cols(); ++c) m(r, c) = p.bit(r, c) ? 1.0 : -1.0;
  return m;
}

DenseMatrix unpack_01(const PackedBitMatrix& p) {
  DenseMatrix m(p.rows(), p.cols());
  for (std::size_t r = 0; r < p.rows(); ++r)
    for (std::size_t c = 0; c < p.cols(); ++c) m(r, c) = p.bit(r, c) ? 1.0 : 0.0;
  return m;
}

std::int32_t xnor_popcount_dot(std::span<const std::uint64_t> a_row, std::span<const std::uint64_t> b_row,
                               std::size_t n) {
  const std::size_t words = (n + PackedBitMatrix::kWordBits - 1) / PackedBitMatrix::kWordBits;
  if (a_row.size() < words || b_row.size() < words) {
    throw DimensionError("xnor_popcount_dot: rows of " + std::to_string(a_row.size()) + " and " +
                         std::to_string(b_row.size()) + " words cannot hold " + std::to_string(n) + " bits");
  }
  if (words == 0) return 0;
  std::int64_t matches = 0;
  for (std::size_t w = 0; w + 1 < words; ++w) matches += std::popcount(~(a_row[w] ^ b_row[w]));
  const std::size_t rem = n % PackedBitMatrix::kWordBits;
  const std::uint64_t tail = rem == 0 ? ~std::uint64_t{0} : ((std::uint64_t{1} << rem) - 1);
  matches += std::popcount(~(a_row[words - 1] ^ b_row[words - 1]) & tail);
  return static_cast<std::int32_t>(2 * matches - static_cast<std::int64_t>(n));
}

IntMatrix binary_gemm_counts(const PackedBitMatrix& a, const PackedBitMatrix& b_transposed) {
  if (a.cols() != b_transposed.cols()) {
    throw DimensionError("binary_gemm: inner dimensions " + shape_of(a.rows(), a.cols()) + " and " +
                         shape_of(b_transposed.rows(), b_transposed.cols()) + " (b transposed)");
  }
  IntMatrix out(a.rows(), b_transposed.rows());
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ar = a.row(i);
    for (std::size_t j = 0; j < b_transposed.rows(); ++j) out(i, j) = xnor_popcount_dot(ar, b_transposed.row(j), n);
  }
  return out;
}

ScaledBinaryProduct binary_gemm_scaled(const PackedBitMatrix& a, const PackedBitMatrix& b_transposed,
                                       double scale) {
  return {binary_gemm_counts(a, b_transposed), scale};
}

DenseMatrix binary_gemm(const PackedBitMatrix& a, const PackedBitMatrix& b_transposed, double scale) {
  return binary_gemm_scaled(a, b_transposed, scale).readout();
}

IntMatrix ternary_binary_gemm(const PackedBitMatrix& att01, const PackedBitMatrix& v_transposed) {
  if (att01.cols() != v_transposed.cols()) {
    throw DimensionError("ternary_binary_gemm: attention " + shape_of(att01.rows(), att01.cols()) +
                         " vs values (transposed) " + shape_of(v_transposed.rows(), v_transposed.cols()));
  }
  const std::size_t n = att01.cols();
  // 1 ⊗ V_B: an all-ones row against each value column.
  PackedBitMatrix ones(1, n);
  for (std::size_t c = 0; c < n; ++c) ones.set_bit(0, c, true);
  std::vector<std::int32_t> column_sums(v_transposed.rows());
  for (std::size_t j = 0; j < v_transposed.rows(); ++j)
    column_sums[j] = xnor_popcount_dot(ones.row(0), v_transposed.row(j), n);

  IntMatrix out(att01.rows(), v_transposed.rows());
  for (std::size_t i = 0; i < att01.rows(); ++i) {
    auto ar = att01.row(i);
    for (std::size_t j = 0; j < v_transposed.rows(); ++j) {
      out(i, j) = (xnor_popcount_dot(ar, v_transposed.row(j), n) + column_sums[j]) >> 1;
    }
  }
  return out;
}

}  // namespace bitformer
