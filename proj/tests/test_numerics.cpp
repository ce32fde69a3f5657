#include <doctest.h>

#include <cmath>
#include <vector>

#include "bitformer/errors.hpp"
#include "bitformer/numerics.hpp"
#include "bitformer/optim.hpp"
#include "bitformer/rng.hpp"

using namespace bitformer;

namespace {

DenseMatrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  DenseMatrix m(r, c);
  for (double& v : m.values()) v = standard_normal(rng);
  return m;
}

DenseMatrix naive_matmul(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      out(i, j) = static_cast<double>(s);
    }
  return out;
}

}  // namespace

TEST_CASE("matmul") {
  const auto a = DenseMatrix::from_rows({{1, 2}, {3, 4}});
  CHECK(matmul(a, DenseMatrix::identity(2)) == a);
  CHECK(matmul(DenseMatrix::from_rows({{1, -1}}), DenseMatrix::from_rows({{1}, {1}}))(0, 0) == 0.0);

  Rng rng = substream(7, "test");
  const auto x = random_matrix(5, 7, rng), y = random_matrix(7, 3, rng);
  const auto got = matmul(x, y), want = naive_matmul(x, y);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-12);

  const auto nt = matmul_nt(x, transpose(y)), tn = matmul_tn(transpose(x), y);
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(std::abs(nt[i] - want[i]) <= 1e-12);
    CHECK(std::abs(tn[i] - want[i]) <= 1e-12);
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    matmul(DenseMatrix(2, 3), DenseMatrix(2, 3));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
  }
}

TEST_CASE("softmax_rows") {
  auto s = softmax_rows(DenseMatrix::from_rows({{0, 0, 0}}));
  for (double v : s.values()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

  s = softmax_rows(DenseMatrix::from_rows({{1000, 0}}));
  CHECK(std::abs(s(0, 0) - 1) <= 1e-9);
  CHECK(std::abs(s(0, 1)) <= 1e-9);

  s = softmax_rows(DenseMatrix::from_rows({{1, 2, 3}}));
  const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int j = 0; j < 3; ++j) CHECK(std::abs(s(0, j) - static_cast<double>(std::exp(1.0L + j) / z)) <= 1e-12);
}

TEST_CASE("layer_norm") {
  const std::vector<double> g{1, 1, 1}, b{0, 0, 0};
  const auto flat = layer_norm(DenseMatrix::from_rows({{5, 5, 5}}), g, b, 1e-12);
  for (double v : flat.out.values()) CHECK(v == 0.0);

  const std::vector<double> g2{1, 1}, b2{0, 0};
  const auto r = layer_norm(DenseMatrix::from_rows({{1, -1}}), g2, b2, 1e-300);
  CHECK(r.out(0, 0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(r.out(0, 1) == doctest::Approx(-1.0).epsilon(1e-14));

  const std::vector<double> g3{2, 0.5}, b3{1, -1};
  const auto r3 = layer_norm(DenseMatrix::from_rows({{3, 1}}), g3, b3, 1e-300);
  CHECK(r3.out(0, 0) == doctest::Approx(3.0));
  CHECK(r3.out(0, 1) == doctest::Approx(-1.5));
}

TEST_CASE("gelu") {
  CHECK(gelu(0.0) == 0.0);
  CHECK(std::abs(gelu(10.0) - 10.0) <= 1e-6);
  CHECK(std::abs(gelu(-10.0)) <= 1e-6);
  for (double x : {-2.0, -0.3, 0.0, 0.7, 1.9}) {
    const double h = 1e-6;
    const double fd = (gelu(x + h) - gelu(x - h)) / (2 * h);
    CHECK(std::abs(fd - gelu_derivative(x)) <= 1e-8);
  }
}

TEST_CASE("cross_entropy") {
  const std::size_t v = 7;
  DenseMatrix logits(3, v, 0.25);
  const std::vector<std::size_t> t{0, 3, 6};
  CHECK(cross_entropy(logits, t) == doctest::Approx(std::log(7.0)).epsilon(1e-14));

  const std::vector<std::size_t> ignored{kNoIgnore, kNoIgnore, kNoIgnore};
  CHECK(cross_entropy(logits, ignored, kNoIgnore) == 0.0);
  const DenseMatrix g0 = cross_entropy_grad(logits, ignored, kNoIgnore);
  for (double g : g0.values()) CHECK(g == 0.0);

  Rng rng = substream(3, "ce");
  const auto l = random_matrix(4, 5, rng);
  const std::vector<std::size_t> tt{1, 4, 0, 2};
  long double want = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    long double z = 0;
    for (std::size_t j = 0; j < 5; ++j) z += std::exp(static_cast<long double>(l(i, j)));
    want += std::log(z) - l(i, tt[i]);
  }
  CHECK(std::abs(cross_entropy(l, tt) - static_cast<double>(want / 4)) <= 1e-10);

  const std::vector<std::size_t> bad{1, 9, 0, 2};
  CHECK_THROWS_AS(cross_entropy(l, bad), IndexError);
}

TEST_CASE("argmax and truncated svd") {
  const std::vector<double> v{0.1, 3.0, 2.9};
  CHECK(argmax(v) == 1);

  Rng rng = substream(5, "svd");
  const auto m = random_matrix(6, 4, rng);
  const auto svd = truncated_svd(m, 4, 500);
  DenseMatrix us = svd.u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t j = 0; j < 4; ++j) us(i, j) *= svd.sigma[j];
  const auto back = matmul_nt(us, svd.v);
  for (std::size_t i = 0; i < m.size(); ++i) CHECK(std::abs(back[i] - m[i]) <= 1e-8);
  for (std::size_t j = 1; j < 4; ++j) CHECK(svd.sigma[j] <= svd.sigma[j - 1]);
}

TEST_CASE("adamw") {
  ParameterSet ps;
  auto& p = ps.add("x", DenseMatrix::scalar(1.0), true);

  SUBCASE("zero gradient, no decay") {
    AdamWOptions o;
    o.weight_decay = 0;
    AdamW opt(o);
    opt.step(ps, 0.1);
    CHECK(p.value[0] == 1.0);
  }
  SUBCASE("one step, hand recurrence") {
    AdamWOptions o;
    o.weight_decay = 0;
    AdamW opt(o);
    p.grad = DenseMatrix::scalar(1.0);
    opt.step(ps, 0.1);
    // m = 0.1, v = 0.001; m̂ = 1, v̂ = 1 → Δ = 0.1·1/(1 + 1e-8)
    CHECK(p.value[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
  }
  SUBCASE("decoupled decay") {
    AdamW opt;  // weight_decay 0.01
    opt.step(ps, 0.1);
    CHECK(p.value[0] == doctest::Approx(1.0 - 0.1 * 0.01).epsilon(1e-15));
  }
  SUBCASE("frozen parameters are skipped") {
    AdamW opt;
    p.frozen = true;
    p.grad = DenseMatrix::scalar(1.0);
    opt.step(ps, 0.1);
    CHECK(p.value[0] == 1.0);
  }
}

TEST_CASE("linear_warmup_schedule") {
  CHECK(linear_warmup_schedule(0, 10, 100, 1e-3) == 0.0);
  CHECK(linear_warmup_schedule(10, 10, 100, 1e-3) == 1e-3);
  CHECK(linear_warmup_schedule(5, 10, 100, 1e-3) == doctest::Approx(5e-4));
  // midpoint of the decay segment: (100 − 55) / (100 − 10) of peak
  CHECK(linear_warmup_schedule(55, 10, 100, 1e-3) == doctest::Approx(1e-3 * 45.0 / 90.0));
  CHECK(linear_warmup_schedule(100, 10, 100, 1e-3) == 0.0);
  CHECK_THROWS_AS(linear_warmup_schedule(0, 20, 10, 1e-3), ConfigError);
}
