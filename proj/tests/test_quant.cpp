#include <doctest.h>

#include "bitformer/errors.hpp"
#include "bitformer/quant.hpp"
#include "bitformer/rng.hpp"

using namespace bitformer;

TEST_CASE("sign and sign_ste") {
  CHECK(sign(DenseMatrix::from_rows({{0.0, -0.0, -1e-300}})) == DenseMatrix::from_rows({{1, 1, -1}}));

  ParameterSet ps;
  const Parameter& p = ps.add("x", DenseMatrix::from_rows({{0.5, 1.5, -1.0, 0.0}}));
  Tape t;
  Var x = t.param(p);
  Var y = ad::sign_ste(x);
  CHECK(y.value() == DenseMatrix::from_rows({{1, 1, -1, 1}}));
  // Upstream 2 everywhere: passes inside |x| ≤ 1, blocked outside.
  Var loss = ad::scale(ad::matmul_nt(y, t.constant(DenseMatrix(1, 4, 1.0))), 2.0);
  t.backward(loss);
  const DenseMatrix& g = t.grad(x.id);
  CHECK(g[0] == 2.0);
  CHECK(g[1] == 0.0);
  CHECK(g[2] == 2.0);
  CHECK(g[3] == 2.0);
}

TEST_CASE("binarize_weight") {
  auto b = binarize_weight(DenseMatrix::from_rows({{2, -2, 2, -2}}));
  CHECK(b.scales[0] == 2.0);
  CHECK(b.simulated == DenseMatrix::from_rows({{2, -2, 2, -2}}));

  b = binarize_weight(DenseMatrix::from_rows({{1, 1, 1, 1}}));
  CHECK(b.means[0] == 1.0);
  CHECK(b.simulated == DenseMatrix::from_rows({{1, 1, 1, 1}}));

  b = binarize_weight(DenseMatrix::from_rows({{3, -1}}));
  CHECK(b.means[0] == 1.0);
  CHECK(b.scales[0] == 2.0);
  CHECK(b.simulated == DenseMatrix::from_rows({{2, -2}}));
  CHECK(unpack_signs(b.bits) == DenseMatrix::from_rows({{1, -1}}));

  // per-tensor: one scale and mean shared across rows
  b = binarize_weight(DenseMatrix::from_rows({{3, -1}, {1, 1}}), WeightGranularity::per_tensor);
  CHECK(b.scales[0] == 1.5);
  CHECK(b.scales[1] == 1.5);
  CHECK(b.simulated == DenseMatrix::from_rows({{1.5, -1.5}, {1.5, 1.5}}));
}

TEST_CASE("binarize_activation_pm1") {
  const auto a = DenseMatrix::from_rows({{0.7, -0.2}});
  CHECK(binarize_activation_pm1(a, 0.5, 0.1).simulated == DenseMatrix::from_rows({{0.5, -0.5}}));
  CHECK(binarize_activation_pm1(a, 1.0, 0.0).simulated == sign(a));
}

TEST_CASE("binarize_attention_01") {
  CHECK(binarize_attention_01(DenseMatrix::from_rows({{0.4, 0.6}}), 1.0, 0.0).simulated ==
        DenseMatrix::from_rows({{0, 1}}));
  const auto att = DenseMatrix::from_rows({{0.2, 0.9, 0.5}});
  const auto pruned = binarize_attention_01(att, 1.0, 1.9);
  for (double v : pruned.simulated.values()) CHECK(v == 0.0);
  // (0.4 − 0.1)/0.5 = 0.6 → level 1 → 0.5
  CHECK(binarize_attention_01(DenseMatrix::from_rows({{0.4}}), 0.5, 0.1).simulated[0] == 0.5);
  CHECK_THROWS_AS(binarize_attention_01(att, 0.0, 0.0), InvalidParameterError);
  CHECK_THROWS_AS(binarize_attention_01(att, -1.0, 0.0), InvalidParameterError);
}

TEST_CASE("residual") {
  const auto w = DenseMatrix::from_rows({{1.3}});
  CHECK(residual(w, w)[0] == 0.0);
  CHECK(residual(w, DenseMatrix::from_rows({{1.0}}))[0] == doctest::Approx(0.3).epsilon(1e-15));

  Rng rng = substream(9, "residual");
  DenseMatrix m(6, 9);
  for (double& v : m.values()) v = standard_normal(rng);
  const auto wb = binarize_weight(m).simulated;
  const auto back = wb + residual(m, wb);
  for (std::size_t i = 0; i < m.size(); ++i) CHECK(std::abs(back[i] - m[i]) <= 1e-12);
  CHECK_THROWS_AS(residual(m, DenseMatrix(9, 6)), DimensionError);
}

TEST_CASE("calibration sets alpha to the mean deviation") {
  ParameterSet ps;
  auto pm = ElasticBinarizer::create(ps, "pm", BinaryLevel::plus_minus_one, 1.0, 0.5);
  auto zo = ElasticBinarizer::create(ps, "zo", BinaryLevel::zero_one, 1.0, 0.0);
  Calibrator c;
  CHECK(c.observe(pm, DenseMatrix::from_rows({{1.5, -0.5}})) == 1.0);
  CHECK(c.observe(pm, DenseMatrix::from_rows({{3.5, 0.5}})) == 1.5);
  CHECK(c.observe(zo, DenseMatrix::from_rows({{0.25, 0.75}})) == 1.0);
  CHECK(c.observed() == 2);
  c.finalize();
  CHECK(pm.alpha_value() == 1.25);
  CHECK(zo.alpha_value() == 1.0);
}
