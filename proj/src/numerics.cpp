// SPDX-License-Identifier: Apache-2.0
#include "bitformer/numerics.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "bitformer/errors.hpp"

namespace bitformer {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMajor>;
using View = Eigen::Map<RowMajor>;

ConstView view(const DenseMatrix& m) {
  return ConstView(m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}

View view(DenseMatrix& m) {
  return View(m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}

[[noreturn]] void shape_mismatch(const char* op, const DenseMatrix& a, const DenseMatrix& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                       b.shape_string());
}

}  // namespace

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) shape_mismatch("matmul", a, b);
  DenseMatrix out(a.rows(), b.cols());
  if (out.empty() || a.cols() == 0) return out;
  view(out).noalias() = view(a) * view(b);
  return out;
}

DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.cols()) shape_mismatch("matmul_nt", a, b);
  DenseMatrix out(a.rows(), b.rows());
  if (out.empty() || a.cols() == 0) return out;
  view(out).noalias() = view(a) * view(b).transpose();
  return out;
}

DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows()) shape_mismatch("matmul_tn", a, b);
  DenseMatrix out(a.cols(), b.cols());
  if (out.empty() || a.rows() == 0) return out;
  view(out).noalias() = view(a).transpose() * view(b);
  return out;
}

DenseMatrix transpose(const DenseMatrix& a) {
  DenseMatrix out(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  return out;
}

DenseMatrix softmax_rows(const DenseMatrix& m) {
  DenseMatrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto in = m.row(r);
    auto o = out.row(r);
    if (in.empty()) continue;
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] - mx);
      sum += o[c];
    }
    for (double& v : o) v /= sum;
  }
  return out;
}

LayerNormResult layer_norm(const DenseMatrix& m, std::span<const double> gamma,
                           std::span<const double> beta, double eps) {
  if (gamma.size() != m.cols() || beta.size() != m.cols()) {
    throw DimensionError("layer_norm: gamma/beta length " + std::to_string(gamma.size()) + "/" +
                         std::to_string(beta.size()) + " vs input " + m.shape_string());
  }
  if (!(eps > 0.0)) throw InvalidParameterError("layer_norm: eps must be positive");
  LayerNormResult res{DenseMatrix(m.rows(), m.cols()), DenseMatrix(m.rows(), m.cols()),
                      std::vector<double>(m.rows())};
  const double n = static_cast<double>(m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto x = m.row(r);
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    res.inv_std[r] = inv;
    for (std::size_t c = 0; c < x.size(); ++c) {
      const double xh = (x[c] - mean) * inv;
      res.normalized(r, c) = xh;
      res.out(r, c) = xh * gamma[c] + beta[c];
    }
  }
  return res;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;
}  // namespace

double gelu(double x) {
  const double u = kGeluC * (x + kGeluK * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_derivative(double x) {
  const double u = kGeluC * (x + kGeluK * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluK * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

DenseMatrix gelu(const DenseMatrix& m) {
  DenseMatrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = gelu(m[i]);
  return out;
}

namespace {

void check_targets(const DenseMatrix& logits, std::span<const std::size_t> targets,
                   std::size_t ignore_index) {
  if (targets.size() != logits.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         logits.shape_string());
  }
  for (std::size_t t : targets) {
    if (t != ignore_index && t >= logits.cols()) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " out of range for " +
                       std::to_string(logits.cols()) + " classes");
    }
  }
}

double log_sum_exp(std::span<const double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - mx);
  return mx + std::log(s);
}

}  // namespace

double cross_entropy(const DenseMatrix& logits, std::span<const std::size_t> targets,
                     std::size_t ignore_index) {
  check_targets(logits, targets, ignore_index);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (targets[r] == ignore_index) continue;
    total += log_sum_exp(logits.row(r)) - logits(r, targets[r]);
    ++count;
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

DenseMatrix cross_entropy_grad(const DenseMatrix& logits, std::span<const std::size_t> targets,
                               std::size_t ignore_index) {
  check_targets(logits, targets, ignore_index);
  DenseMatrix g(logits.rows(), logits.cols());
  std::size_t count = 0;
  for (std::size_t t : targets) count += (t != ignore_index);
  if (count == 0) return g;
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (targets[r] == ignore_index) continue;
    auto row = logits.row(r);
    const double lse = log_sum_exp(row);
    for (std::size_t c = 0; c < row.size(); ++c) g(r, c) = std::exp(row[c] - lse) * inv;
    g(r, targets[r]) -= inv;
  }
  return g;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

TruncatedSvd truncated_svd(const DenseMatrix& m, std::size_t rank, std::size_t iterations) {
  const std::size_t rows = m.rows(), cols = m.cols();
  rank = std::min({rank, rows, cols});
  TruncatedSvd out{DenseMatrix(rows, rank), std::vector<double>(rank, 0.0), DenseMatrix(cols, rank)};
  DenseMatrix residual = m;
  for (std::size_t k = 0; k < rank; ++k) {
    std::vector<double> v(cols);
    for (std::size_t j = 0; j < cols; ++j) v[j] = 1.0 + 0.01 * static_cast<double>((j * 7 + k * 13) % 17);
    std::vector<double> u(rows, 0.0);
    double sigma = 0.0;
    for (std::size_t it = 0; it < iterations; ++it) {
      // u = R v, v = Rᵀ u, normalized.
      for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += residual(i, j) * v[j];
        u[i] = s;
      }
      std::fill(v.begin(), v.end(), 0.0);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) v[j] += residual(i, j) * u[i];
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm == 0.0) break;
      for (double& x : v) x /= norm;
    }
    for (std::size_t i = 0; i < rows; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < cols; ++j) s += residual(i, j) * v[j];
      u[i] = s;
    }
    for (double x : u) sigma += x * x;
    sigma = std::sqrt(sigma);
    if (sigma > 0.0) {
      for (double& x : u) x /= sigma;
    } else {
      std::fill(v.begin(), v.end(), 0.0);
    }
    out.sigma[k] = sigma;
    for (std::size_t i = 0; i < rows; ++i) out.u(i, k) = u[i];
    for (std::size_t j = 0; j < cols; ++j) out.v(j, k) = v[j];
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) residual(i, j) -= sigma * u[i] * v[j];
  }
  return out;
}

}  // namespace bitformer
