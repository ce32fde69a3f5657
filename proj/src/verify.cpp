// SPDX-License-Identifier: Apache-2.0
#include "bitformer/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "bitformer/binattn.hpp"
#include "bitformer/bitkernel.hpp"
#include "bitformer/errors.hpp"
#include "bitformer/model.hpp"
#include "bitformer/numerics.hpp"
#include "bitformer/quant.hpp"
#include "bitformer/rng.hpp"

namespace bitformer {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

DenseMatrix normal_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  DenseMatrix m(r, c);
  for (double& v : m.values()) v = scale * standard_normal(rng);
  return m;
}

DenseMatrix uniform_matrix(Rng& rng, std::size_t r, std::size_t c, double lo, double hi) {
  DenseMatrix m(r, c);
  for (double& v : m.values()) v = uniform(rng, lo, hi);
  return m;
}

// Random real matrix with no exact zeros; its sign pattern is the ±1 operand.
DenseMatrix random_signs(Rng& rng, std::size_t r, std::size_t c) {
  DenseMatrix m(r, c);
  for (double& v : m.values()) v = (rng() & 1U) ? uniform(rng, 0.01, 1.0) : -uniform(rng, 0.01, 1.0);
  return m;
}

std::size_t dim(Rng& rng, std::size_t max_dim) { return 1 + uniform_index(rng, max_dim); }

}  // namespace

// ---------------------------------------------------------------------------
// Kernels

CheckResult verify_kernel(std::uint64_t seed, std::size_t instances, std::size_t max_dim) {
  const auto t0 = Clock::now();
  Rng rng = substream(seed, "verify-kernel");
  CheckResult res{"kernel", "binary_gemm == float GEMM of unpacked ±1 operands", true, {}, 0};
  for (std::size_t it = 0; it < instances && res.passed; ++it) {
    const std::size_t m = dim(rng, max_dim), k = dim(rng, max_dim), n = dim(rng, max_dim);
    const DenseMatrix a = random_signs(rng, m, k);
    const DenseMatrix bt = random_signs(rng, n, k);
    const IntMatrix counts = binary_gemm_counts(pack_signs(a), pack_signs(bt));
    const DenseMatrix oracle = matmul_nt(sign(a), sign(bt));
    for (std::size_t i = 0; i < m && res.passed; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (static_cast<double>(counts(i, j)) != oracle(i, j)) {
          res.passed = false;
          res.detail = "instance " + std::to_string(it) + " (" + std::to_string(m) + "x" + std::to_string(k) + "x" +
                       std::to_string(n) + ") differs at (" + std::to_string(i) + "," + std::to_string(j) + ")";
          break;
        }
      }
    }
  }
  res.seconds = seconds_since(t0);
  if (res.passed) res.detail = std::to_string(instances) + " instances exact, dims <= " + std::to_string(max_dim);
  return res;
}

CheckResult verify_ternary(std::uint64_t seed, std::size_t instances, std::size_t max_dim) {
  const auto t0 = Clock::now();
  Rng rng = substream(seed, "verify-ternary");
  CheckResult res{"ternary", "(Att±·V + 1·V) >> 1 == Att{0,1}·V", true, {}, 0};
  for (std::size_t it = 0; it < instances && res.passed; ++it) {
    const std::size_t m = dim(rng, max_dim), k = dim(rng, max_dim), n = dim(rng, max_dim);
    DenseMatrix att(m, k);
    const double density = uniform01(rng);
    for (double& v : att.values()) v = uniform01(rng) < density ? 1.0 : 0.0;
    const DenseMatrix vt = random_signs(rng, n, k);  // V stored transposed
    const IntMatrix trick = ternary_binary_gemm(pack_nonzero(att), pack_signs(vt));
    const DenseMatrix direct = matmul_nt(att, sign(vt));
    for (std::size_t i = 0; i < m && res.passed; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (static_cast<double>(trick(i, j)) != direct(i, j)) {
          res.passed = false;
          res.detail = "instance " + std::to_string(it) + " differs at (" + std::to_string(i) + "," +
                       std::to_string(j) + ")";
          break;
        }
      }
    }
  }
  res.seconds = seconds_since(t0);
  if (res.passed) res.detail = std::to_string(instances) + " instances exact";
  return res;
}

// ---------------------------------------------------------------------------
// Surrogate gradients

namespace {

using Leaves = std::vector<DenseMatrix>;

struct GradCase {
  std::string name;
  std::function<Leaves(Rng&)> sample;  // a point away from every kink
  std::function<Var(Tape&, const std::vector<Var>&)> op;
  std::function<DenseMatrix(const Leaves&)> surrogate;
};

double weighted_sum(const DenseMatrix& g, const DenseMatrix& out) {
  double s = 0;
  for (std::size_t i = 0; i < out.size(); ++i) s += g[i] * out[i];
  return s;
}

// Relative error between the op's backward and central differences of the
// surrogate, for the scalar Σ G ⊙ out with random G.
double gradient_error(const GradCase& c, Rng& rng) {
  Leaves x = c.sample(rng);
  ParameterSet ps;
  for (std::size_t i = 0; i < x.size(); ++i) ps.add("x" + std::to_string(i), x[i]);
  Tape tape;
  std::vector<Var> vars;
  for (std::size_t i = 0; i < x.size(); ++i) vars.push_back(tape.param(ps[i]));
  const Var out = c.op(tape, vars);
  const DenseMatrix g = normal_matrix(rng, out.rows(), out.cols());
  const Var loss = tape.record(DenseMatrix::scalar(weighted_sum(g, out.value())), {out},
                               [out, g](Tape& t, std::size_t self) {
                                 DenseMatrix d = g;
                                 d *= t.grad(self)[0];
                                 t.accumulate(out.id, d);
                               });
  tape.backward(loss);
  GradientBuffer buf(ps.size());
  tape.collect(buf, ps);

  constexpr double h = 1e-6;
  double diff2 = 0, an2 = 0, fd2 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const DenseMatrix* analytic = buf.get(i);
    for (std::size_t k = 0; k < x[i].size(); ++k) {
      const double keep = x[i][k];
      x[i][k] = keep + h;
      const double up = weighted_sum(g, c.surrogate(x));
      x[i][k] = keep - h;
      const double down = weighted_sum(g, c.surrogate(x));
      x[i][k] = keep;
      const double fd = (up - down) / (2 * h);
      const double an = analytic ? (*analytic)[k] : 0.0;
      diff2 += (an - fd) * (an - fd);
      an2 += an * an;
      fd2 += fd * fd;
    }
  }
  const double denom = std::max({std::sqrt(an2), std::sqrt(fd2), 1e-12});
  return std::sqrt(diff2) / denom;
}

DenseMatrix clip(const DenseMatrix& m, double lo, double hi) {
  DenseMatrix out = m;
  for (double& v : out.values()) v = std::clamp(v, lo, hi);
  return out;
}

bool near_any(double v, std::initializer_list<double> kinks, double margin) {
  for (double k : kinks)
    if (std::abs(v - k) < margin) return true;
  return false;
}

// Resamples until `ok` holds, so every finite-difference probe stays on one
// smooth piece of the surrogate.
Leaves sample_until(Rng& rng, const std::function<Leaves(Rng&)>& draw, const std::function<bool(const Leaves&)>& ok) {
  for (;;) {
    Leaves l = draw(rng);
    if (ok(l)) return l;
  }
}

DenseMatrix weight_surrogate(const DenseMatrix& w, WeightGranularity g) {
  DenseMatrix out(w.rows(), w.cols());
  const bool per_row = g == WeightGranularity::per_row;
  const std::size_t groups = per_row ? w.rows() : 1;
  const std::size_t len = per_row ? w.cols() : w.size();
  for (std::size_t gi = 0; gi < groups; ++gi) {
    double l1 = 0, sum = 0;
    for (std::size_t k = gi * len; k < (gi + 1) * len; ++k) {
      l1 += std::abs(w[k]);
      sum += w[k];
    }
    const double s = l1 / static_cast<double>(len), mean = sum / static_cast<double>(len);
    for (std::size_t k = gi * len; k < (gi + 1) * len; ++k) out[k] = s * std::clamp(w[k] - mean, -1.0, 1.0);
  }
  return out;
}

bool weight_point_ok(const DenseMatrix& w, WeightGranularity g) {
  const bool per_row = g == WeightGranularity::per_row;
  const std::size_t groups = per_row ? w.rows() : 1;
  const std::size_t len = per_row ? w.cols() : w.size();
  for (std::size_t gi = 0; gi < groups; ++gi) {
    double sum = 0;
    for (std::size_t k = gi * len; k < (gi + 1) * len; ++k) sum += w[k];
    const double mean = sum / static_cast<double>(len);
    for (std::size_t k = gi * len; k < (gi + 1) * len; ++k) {
      if (std::abs(w[k]) < 0.02 || near_any(w[k] - mean, {-1.0, 1.0}, 0.02)) return false;
    }
  }
  return true;
}

DenseMatrix gather(const DenseMatrix& t, const std::vector<std::size_t>& ids) {
  DenseMatrix out(ids.size(), t.cols());
  for (std::size_t r = 0; r < ids.size(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) out(r, c) = t(ids[r], c);
  return out;
}

DenseMatrix block(const DenseMatrix& m, std::size_t r0, std::size_t nr, std::size_t c0, std::size_t nc) {
  DenseMatrix out(nr, nc);
  for (std::size_t r = 0; r < nr; ++r)
    for (std::size_t c = 0; c < nc; ++c) out(r, c) = m(r0 + r, c0 + c);
  return out;
}

std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;
  auto normals = [](std::vector<std::pair<std::size_t, std::size_t>> shapes, double scale = 1.0) {
    return [shapes, scale](Rng& rng) {
      Leaves l;
      for (auto [r, c] : shapes) l.push_back(normal_matrix(rng, r, c, scale));
      return l;
    };
  };

  // Binarizers against their clip surrogates.
  cases.push_back({"sign (hardtanh surrogate)",
                   [](Rng& rng) {
                     return sample_until(
                         rng, [](Rng& r) { return Leaves{uniform_matrix(r, 4, 5, -2.0, 2.0)}; },
                         [](const Leaves& l) {
                           for (double v : l[0].values())
                             if (near_any(v, {-1.0, 1.0}, 0.02)) return false;
                           return true;
                         });
                   },
                   [](Tape&, const std::vector<Var>& v) { return ad::sign_ste(v[0]); },
                   [](const Leaves& l) { return clip(l[0], -1.0, 1.0); }});
  for (auto g : {WeightGranularity::per_row, WeightGranularity::per_tensor}) {
    const std::string gname = g == WeightGranularity::per_row ? "per-row" : "per-tensor";
    cases.push_back({"weight binarizer (" + gname + ")",
                     [g](Rng& rng) {
                       return sample_until(
                           rng, [](Rng& r) { return Leaves{uniform_matrix(r, 4, 6, -1.6, 1.6)}; },
                           [g](const Leaves& l) { return weight_point_ok(l[0], g); });
                     },
                     [g](Tape&, const std::vector<Var>& v) { return ad::binarize_weight(v[0], g); },
                     [g](const Leaves& l) { return weight_surrogate(l[0], g); }});
  }
  cases.push_back({"activation binarizer ±1 (a, alpha, beta)",
                   [](Rng& rng) {
                     return sample_until(
                         rng,
                         [](Rng& r) {
                           return Leaves{uniform_matrix(r, 4, 5, -2.5, 2.5), DenseMatrix::scalar(uniform(r, 0.3, 1.5)),
                                         DenseMatrix::scalar(uniform(r, -0.5, 0.5))};
                         },
                         [](const Leaves& l) {
                           for (double v : l[0].values())
                             if (near_any(v - l[2][0], {-1.0, 1.0}, 0.02)) return false;
                           return true;
                         });
                   },
                   [](Tape&, const std::vector<Var>& v) { return ad::binarize_activation_pm1(v[0], v[1], v[2]); },
                   [](const Leaves& l) {
                     DenseMatrix out(l[0].rows(), l[0].cols());
                     for (std::size_t i = 0; i < out.size(); ++i)
                       out[i] = l[1][0] * std::clamp(l[0][i] - l[2][0], -1.0, 1.0);
                     return out;
                   }});
  cases.push_back({"attention binarizer {0,1} (att, alpha, beta)",
                   [](Rng& rng) {
                     return sample_until(
                         rng,
                         [](Rng& r) {
                           return Leaves{uniform_matrix(r, 4, 5, 0.0, 1.0), DenseMatrix::scalar(uniform(r, 0.2, 0.8)),
                                         DenseMatrix::scalar(uniform(r, -0.1, 0.2))};
                         },
                         [](const Leaves& l) {
                           for (double v : l[0].values())
                             if (near_any(v - l[2][0], {0.0, l[1][0]}, 0.02)) return false;
                           return true;
                         });
                   },
                   [](Tape&, const std::vector<Var>& v) { return ad::binarize_attention_01(v[0], v[1], v[2]); },
                   [](const Leaves& l) {
                     DenseMatrix out(l[0].rows(), l[0].cols());
                     const double a = l[1][0], b = l[2][0];
                     for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * std::clamp((l[0][i] - b) / a, 0.0, 1.0);
                     return out;
                   }});

  // Primitives against their own forward definitions.
  cases.push_back({"matmul", normals({{3, 4}, {4, 5}}),
                   [](Tape&, const std::vector<Var>& v) { return ad::matmul(v[0], v[1]); },
                   [](const Leaves& l) { return matmul(l[0], l[1]); }});
  cases.push_back({"matmul_nt", normals({{3, 4}, {5, 4}}),
                   [](Tape&, const std::vector<Var>& v) { return ad::matmul_nt(v[0], v[1]); },
                   [](const Leaves& l) { return matmul_nt(l[0], l[1]); }});
  cases.push_back({"add", normals({{3, 4}, {3, 4}}),
                   [](Tape&, const std::vector<Var>& v) { return ad::add(v[0], v[1]); },
                   [](const Leaves& l) { return l[0] + l[1]; }});
  cases.push_back({"sub", normals({{3, 4}, {3, 4}}),
                   [](Tape&, const std::vector<Var>& v) { return ad::sub(v[0], v[1]); },
                   [](const Leaves& l) { return l[0] - l[1]; }});
  cases.push_back({"add_row", normals({{3, 4}, {1, 4}}),
                   [](Tape&, const std::vector<Var>& v) { return ad::add_row(v[0], v[1]); },
                   [](const Leaves& l) {
                     DenseMatrix out = l[0];
                     for (std::size_t r = 0; r < out.rows(); ++r)
                       for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += l[1][c];
                     return out;
                   }});
  cases.push_back({"scale", normals({{3, 4}}),
                   [](Tape&, const std::vector<Var>& v) { return ad::scale(v[0], -0.37); },
                   [](const Leaves& l) { return l[0] * -0.37; }});
  cases.push_back({"softmax_rows", normals({{3, 6}}, 2.0),
                   [](Tape&, const std::vector<Var>& v) { return ad::softmax_rows(v[0]); },
                   [](const Leaves& l) { return softmax_rows(l[0]); }});
  cases.push_back({"layer_norm (x, gamma, beta)", normals({{3, 6}, {1, 6}, {1, 6}}),
                   [](Tape&, const std::vector<Var>& v) { return ad::layer_norm(v[0], v[1], v[2], 1e-5); },
                   [](const Leaves& l) { return layer_norm(l[0], l[1].values(), l[2].values(), 1e-5).out; }});
  cases.push_back({"gelu", normals({{3, 5}}, 2.0), [](Tape&, const std::vector<Var>& v) { return ad::gelu(v[0]); },
                   [](const Leaves& l) { return gelu(l[0]); }});
  cases.push_back({"hardtanh",
                   [](Rng& rng) {
                     return sample_until(
                         rng, [](Rng& r) { return Leaves{uniform_matrix(r, 3, 5, -2.0, 2.0)}; },
                         [](const Leaves& l) {
                           for (double v : l[0].values())
                             if (near_any(v, {-1.0, 1.0}, 0.02)) return false;
                           return true;
                         });
                   },
                   [](Tape&, const std::vector<Var>& v) { return ad::hardtanh(v[0]); },
                   [](const Leaves& l) { return clip(l[0], -1.0, 1.0); }});
  const std::vector<std::size_t> targets{2, kNoIgnore, 0, 6};
  cases.push_back({"cross_entropy", normals({{4, 7}}, 2.0),
                   [targets](Tape&, const std::vector<Var>& v) { return ad::cross_entropy(v[0], targets, kNoIgnore); },
                   [targets](const Leaves& l) { return DenseMatrix::scalar(cross_entropy(l[0], targets, kNoIgnore)); }});
  const std::vector<std::size_t> ids{0, 3, 3, 1};
  cases.push_back({"gather_rows", normals({{5, 4}}),
                   [ids](Tape&, const std::vector<Var>& v) { return ad::gather_rows(v[0], ids); },
                   [ids](const Leaves& l) { return gather(l[0], ids); }});
  cases.push_back({"slice_cols", normals({{3, 7}}),
                   [](Tape&, const std::vector<Var>& v) { return ad::slice_cols(v[0], 2, 3); },
                   [](const Leaves& l) { return block(l[0], 0, 3, 2, 3); }});
  cases.push_back({"slice_rows", normals({{5, 3}}),
                   [](Tape&, const std::vector<Var>& v) { return ad::slice_rows(v[0], 1, 3); },
                   [](const Leaves& l) { return block(l[0], 1, 3, 0, 3); }});
  cases.push_back({"concat_cols", normals({{3, 2}, {3, 4}, {3, 1}}),
                   [](Tape&, const std::vector<Var>& v) { return ad::concat_cols(v); },
                   [](const Leaves& l) {
                     DenseMatrix out(3, 7);
                     std::size_t off = 0;
                     for (const auto& m : l) {
                       for (std::size_t r = 0; r < 3; ++r)
                         for (std::size_t c = 0; c < m.cols(); ++c) out(r, off + c) = m(r, c);
                       off += m.cols();
                     }
                     return out;
                   }});
  const DenseMatrix teacher = [] {
    Rng r = substream(7, "verify-teacher");
    return normal_matrix(r, 3, 6, 2.0);
  }();
  cases.push_back({"kl_divergence (T=2)", normals({{3, 6}}, 2.0),
                   [teacher](Tape&, const std::vector<Var>& v) { return ad::kl_divergence(v[0], teacher, 2.0); },
                   [teacher](const Leaves& l) {
                     const DenseMatrix p = softmax_rows(teacher * 0.5);
                     const DenseMatrix q = softmax_rows(l[0] * 0.5);
                     double kl = 0;
                     for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
                     return DenseMatrix::scalar(kl / static_cast<double>(p.rows()));
                   }});
  cases.push_back({"mse", normals({{3, 4}}),
                   [teacher](Tape&, const std::vector<Var>& v) { return ad::mse(v[0], block(teacher, 0, 3, 0, 4)); },
                   [teacher](const Leaves& l) {
                     const DenseMatrix t = block(teacher, 0, 3, 0, 4);
                     double s = 0;
                     for (std::size_t i = 0; i < t.size(); ++i) s += (l[0][i] - t[i]) * (l[0][i] - t[i]);
                     return DenseMatrix::scalar(s / static_cast<double>(t.size()));
                   }});
  return cases;
}

}  // namespace

std::vector<CheckResult> verify_gradients(std::uint64_t seed, std::size_t points, double tolerance) {
  std::vector<CheckResult> out;
  Rng rng = substream(seed, "verify-gradients");
  for (const GradCase& c : gradient_cases()) {
    const auto t0 = Clock::now();
    double worst = 0;
    for (std::size_t p = 0; p < points; ++p) worst = std::max(worst, gradient_error(c, rng));
    const bool ok = worst < tolerance;
    out.push_back(CheckResult{"gradients", c.name, ok,
                              std::to_string(points) + " points, max rel err " + fmt("%.2e", worst),
                              seconds_since(t0)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exact recovery of the score residual

CheckResult verify_recovery(std::uint64_t seed, std::size_t inputs, std::size_t hidden, double tolerance) {
  const auto t0 = Clock::now();
  Rng rng = substream(seed, "verify-recovery");
  CheckResult res{"recovery", "Q_B·K_Bᵀ + residual estimate == Q·Kᵀ at rank C", true, {}, 0};
  double worst = 0;
  for (std::size_t it = 0; it < inputs; ++it) {
    ParameterSet ps;
    ResidualEstimators est = ResidualEstimators::create(ps, "est", hidden, hidden);
    // Projections stored out×in, as in the model; A·Wᵀ is the projection.
    const DenseMatrix wq = normal_matrix(rng, hidden, hidden, 0.5);
    const DenseMatrix wk = normal_matrix(rng, hidden, hidden, 0.5);
    const DenseMatrix wq_b = binarize_weight(wq).simulated;
    const DenseMatrix wk_b = binarize_weight(wk).simulated;
    est.w_q->value = transpose(wq_b);
    est.w_k->value = transpose(wk_b);
    est.w_q_star->value = transpose(residual(wq, wq_b));
    est.w_k_star->value = transpose(residual(wk, wk_b));

    const DenseMatrix a = normal_matrix(rng, dim(rng, 16), hidden);
    const DenseMatrix full = matmul_nt(matmul_nt(a, wq), matmul_nt(a, wk));
    const DenseMatrix binary = matmul_nt(matmul_nt(a, wq_b), matmul_nt(a, wk_b));
    const DenseMatrix packed_path = binary + score_residual(a, est);
    Tape tape;
    const DenseMatrix tape_path = binary + score_residual(tape, tape.constant(a), est).value();
    for (std::size_t i = 0; i < full.size(); ++i) {
      worst = std::max({worst, std::abs(packed_path[i] - full[i]), std::abs(tape_path[i] - full[i])});
    }
  }
  res.passed = worst <= tolerance;
  res.detail = std::to_string(inputs) + " inputs, C=" + std::to_string(hidden) + ", max abs err " + fmt("%.2e", worst);
  res.seconds = seconds_since(t0);
  return res;
}

// ---------------------------------------------------------------------------
// Packed vs simulated whole-model forward

CheckResult verify_train_eval(std::uint64_t seed, std::size_t inputs, double tolerance) {
  const auto t0 = Clock::now();
  Rng rng = substream(seed, "verify-train-eval");
  CheckResult res{"train-eval", "packed forward == simulated forward per logit", true, {}, 0};
  double worst = 0;
  for (Variant variant : {Variant::bipft_a, Variant::bipft_b}) {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.vocab = 1000;
    cfg.variant = variant;
    cfg.estimator_rank = 2;
    cfg.seed = seed;
    Model model = Model::build(cfg);
    auto random_input = [&] {
      SequenceInput in;
      const std::size_t n = 2 + uniform_index(rng, cfg.max_seq - 1);
      const std::size_t split = 1 + uniform_index(rng, n - 1);
      for (std::size_t i = 0; i < n; ++i) {
        in.tokens.push_back(uniform_index(rng, cfg.vocab));
        in.segments.push_back(i < split ? 0 : 1);
      }
      return in;
    };
    std::vector<SequenceInput> calib;
    for (int i = 0; i < 4; ++i) calib.push_back(random_input());
    model.calibrate(calib);
    // Move every binarizer threshold off zero so the shift path is exercised.
    ParameterSet& ps = model.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const std::string& n = ps[i].name;
      if (n.ends_with(".act.beta") || n.ends_with("q_bin.beta") || n.ends_with("k_bin.beta") ||
          n.ends_with("v_bin.beta")) {
        ps[i].value[0] = 0.05 * standard_normal(rng);
      } else if (n.ends_with("att_bin.beta")) {
        ps[i].value[0] = 0.005 * standard_normal(rng);
      }
    }
    for (std::size_t it = 0; it < inputs; ++it) {
      const SequenceInput in = random_input();
      const ForwardValues sim = model.forward_values(in);
      const ForwardValues packed = model.forward_packed(in);
      for (std::size_t i = 0; i < sim.mlm_logits.size(); ++i)
        worst = std::max(worst, std::abs(sim.mlm_logits[i] - packed.mlm_logits[i]));
      for (std::size_t i = 0; i < sim.nsp_logits.size(); ++i)
        worst = std::max(worst, std::abs(sim.nsp_logits[i] - packed.nsp_logits[i]));
    }
  }
  res.passed = worst <= tolerance;
  res.detail = std::to_string(inputs) + " inputs x {bipft_a, bipft_b}, max abs logit diff " + fmt("%.2e", worst);
  res.seconds = seconds_since(t0);
  return res;
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& verify_suite_names() {
  static const std::vector<std::string> names{"kernel", "ternary", "gradients", "recovery", "train-eval"};
  return names;
}

std::vector<CheckResult> run_verify(const VerifyOptions& opts) {
  for (const auto& s : opts.only) {
    const auto& names = verify_suite_names();
    if (std::find(names.begin(), names.end(), s) == names.end()) {
      throw ConfigError("unknown verify suite '" + s + "' (kernel, ternary, gradients, recovery, train-eval)");
    }
  }
  auto wanted = [&](const std::string& s) {
    return opts.only.empty() || std::find(opts.only.begin(), opts.only.end(), s) != opts.only.end();
  };
  std::vector<CheckResult> out;
  if (wanted("kernel")) out.push_back(verify_kernel(opts.seed));
  if (wanted("ternary")) out.push_back(verify_ternary(opts.seed));
  if (wanted("gradients")) {
    auto g = verify_gradients(opts.seed);
    out.insert(out.end(), g.begin(), g.end());
  }
  if (wanted("recovery")) out.push_back(verify_recovery(opts.seed));
  if (wanted("train-eval")) out.push_back(verify_train_eval(opts.seed));
  return out;
}

std::string format_results(const std::vector<CheckResult>& results) {
  std::ostringstream o;
  for (const auto& r : results) {
    char head[64];
    std::snprintf(head, sizeof head, "%-4s  %-10s  ", r.passed ? "PASS" : "FAIL", r.suite.c_str());
    o << head << r.property << "  [" << r.detail << ", " << fmt("%.2f", r.seconds) << " s]\n";
  }
  return o.str();
}

}  // namespace bitformer
