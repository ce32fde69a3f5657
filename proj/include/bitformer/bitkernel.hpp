// SPDX-License-Identifier: Apache-2.0
//
// Bit-packed ±1 linear algebra. A set bit encodes +1 and a clear bit -1
// (or 1 / 0 for the {0,1} attention operand). Rows are packed LSB-first into
// 64-bit words; padding bits past the logical column count stay 0 and every
// count is masked to the logical length.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bitformer/matrix.hpp"

namespace bitformer {

class PackedBitMatrix {
 public:
  static constexpr std::size_t kWordBits = 64;

  PackedBitMatrix() = default;
  PackedBitMatrix(std::size_t rows, std::size_t cols);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t words_per_row() const noexcept { return words_per_row_; }

  bool bit(std::size_t r, std::size_t c) const;
  void set_bit(std::size_t r, std::size_t c, bool on);

  std::span<const std::uint64_t> row(std::size_t r) const {
    return {words_.data() + r * words_per_row_, words_per_row_};
  }
  std::span<std::uint64_t> row(std::size_t r) { return {words_.data() + r * words_per_row_, words_per_row_}; }
  std::span<const std::uint64_t> words() const noexcept { return words_; }

  /// Mask of valid bits in the final word of each row.
  std::uint64_t tail_mask() const noexcept;
  /// True when no padding bit is set (the representation invariant).
  bool padding_clear() const noexcept;

  friend bool operator==(const PackedBitMatrix&, const PackedBitMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t words_per_row_ = 0;
  std::vector<std::uint64_t> words_;
};

/// Signed 32-bit accumulator matrix, row-major.
struct IntMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> data;

  IntMatrix() = default;
  IntMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0) {}
  std::int32_t& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  std::int32_t operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  friend bool operator==(const IntMatrix&, const IntMatrix&) = default;
};

/// α·(A ⊗ B): integer accumulator plus the real multiplier applied on readout.
struct ScaledBinaryProduct {
  IntMatrix accumulator;
  double scale = 1.0;

  DenseMatrix readout() const;
};

/// bit = 1 iff m[i,j] ≥ 0 (sign(0) = +1).
PackedBitMatrix pack_signs(const DenseMatrix& m);
/// bit = 1 iff m[i,j] > 0; used for {0, α} attention maps.
PackedBitMatrix pack_nonzero(const DenseMatrix& m);
/// ±1 expansion of the bits.
DenseMatrix unpack_signs(const PackedBitMatrix& p);
/// {0,1} expansion of the bits.
DenseMatrix unpack_01(const PackedBitMatrix& p);

/// Σ aᵢbᵢ over ±1 values of the first n positions: 2·popcount(XNOR) − n.
std::int32_t xnor_popcount_dot(std::span<const std::uint64_t> a_row, std::span<const std::uint64_t> b_row,
                               std::size_t n);

/// Integer ±1 product a · bᵀ where b is stored transposed (one row per output column).
IntMatrix binary_gemm_counts(const PackedBitMatrix& a, const PackedBitMatrix& b_transposed);
ScaledBinaryProduct binary_gemm_scaled(const PackedBitMatrix& a, const PackedBitMatrix& b_transposed,
                                       double scale);
DenseMatrix binary_gemm(const PackedBitMatrix& a, const PackedBitMatrix& b_transposed, double scale);

/// {0,1} × {±1} product through two XNOR-popcount products and a shift:
/// Att01·V = (Att±·V + 1·V) >> 1, where Att± maps 0 → −1.
/// v_transposed holds one packed row per output column of V.
IntMatrix ternary_binary_gemm(const PackedBitMatrix& att01, const PackedBitMatrix& v_transposed);

}  // namespace bitformer
