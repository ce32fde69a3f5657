// SPDX-License-Identifier: Apache-2.0
//
// Pure (tape-free) dense kernels. The differentiable wrappers in autograd.hpp
// call into these for both their forward and backward passes.
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "bitformer/matrix.hpp"

namespace bitformer {

/// a · b
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
/// a · bᵀ
DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b);
/// aᵀ · b
DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix transpose(const DenseMatrix& a);

DenseMatrix softmax_rows(const DenseMatrix& m);

struct LayerNormResult {
  DenseMatrix out;
  DenseMatrix normalized;          // x̂ before the affine step
  std::vector<double> inv_std;     // one per row
};

LayerNormResult layer_norm(const DenseMatrix& m, std::span<const double> gamma,
                           std::span<const double> beta, double eps);

double gelu(double x);
double gelu_derivative(double x);
DenseMatrix gelu(const DenseMatrix& m);

inline constexpr std::size_t kNoIgnore = static_cast<std::size_t>(-1);

/// Mean negative log-softmax over targets != ignore_index. Empty mean is 0.
double cross_entropy(const DenseMatrix& logits, std::span<const std::size_t> targets,
                     std::size_t ignore_index = kNoIgnore);

/// Gradient of cross_entropy with respect to logits.
DenseMatrix cross_entropy_grad(const DenseMatrix& logits, std::span<const std::size_t> targets,
                               std::size_t ignore_index = kNoIgnore);

std::size_t argmax(std::span<const double> v);

struct TruncatedSvd {
  DenseMatrix u;              // m × r, orthonormal columns
  std::vector<double> sigma;  // r, non-increasing
  DenseMatrix v;              // n × r, orthonormal columns
};

/// Top-`rank` singular triplets of m by power iteration on mᵀm with deflation.
/// Deterministic: the start vectors are fixed.
TruncatedSvd truncated_svd(const DenseMatrix& m, std::size_t rank, std::size_t iterations = 200);

}  // namespace bitformer
