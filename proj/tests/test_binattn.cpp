#include <doctest.h>

#include <cmath>

#include "bitformer/binattn.hpp"
#include "bitformer/errors.hpp"
#include "bitformer/numerics.hpp"
#include "bitformer/verify.hpp"

using namespace bitformer;

namespace {

DenseMatrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double s = 1.0) {
  DenseMatrix m(r, c);
  for (double& v : m.values()) v = s * standard_normal(rng);
  return m;
}

AttentionLayerState make_layer(ParameterSet& ps, std::optional<std::size_t> rank, std::uint64_t seed = 4) {
  Rng rng = substream(seed, "layer");
  auto layer = AttentionLayerState::create(ps, "attn", 8, 2, rng, true, WeightGranularity::per_row, rank);
  // Spread the activation scales so the binary path is not degenerate.
  for (auto* set : {&layer.q_bin, &layer.k_bin, &layer.v_bin})
    for (auto& q : *set) q.alpha->value[0] = 0.05;
  for (auto& q : layer.att_bin) q.alpha->value[0] = 0.4;
  for (auto* l : {&layer.q_proj, &layer.k_proj, &layer.v_proj, &layer.out_proj}) l->input.alpha->value[0] = 0.8;
  return layer;
}

}  // namespace

TEST_CASE("constant scores give uniform attention") {
  ParameterSet ps;
  auto qb = ElasticBinarizer::create(ps, "q", BinaryLevel::plus_minus_one, 1.0, 0.0);
  auto kb = ElasticBinarizer::create(ps, "k", BinaryLevel::plus_minus_one, 1.0, 0.0);
  Rng rng = substream(1, "uniform");
  DenseMatrix q(5, 4);
  for (double& v : q.values()) v = 0.1 + uniform01(rng);
  Tape t;
  Var p = attention_scores_binary(t, t.constant(q), t.constant(q), qb, kb);
  for (double v : p.value().values()) CHECK(v == doctest::Approx(0.2).epsilon(1e-14));
  CHECK(attention_scores_packed(q, q, qb, kb) == p.value());
}

TEST_CASE("two-token hand case") {
  ParameterSet ps;
  auto qb = ElasticBinarizer::create(ps, "q", BinaryLevel::plus_minus_one, 1.0, 0.0);
  auto kb = ElasticBinarizer::create(ps, "k", BinaryLevel::plus_minus_one, 1.0, 0.0);
  const auto q = DenseMatrix::from_rows({{1, 1}, {1, -1}});
  // pre-softmax [[2,0],[0,2]]/√2
  const double e = std::exp(2.0 / std::sqrt(2.0));
  const auto p = attention_scores_packed(q, q, qb, kb);
  CHECK(p(0, 0) == doctest::Approx(e / (e + 1)).epsilon(1e-14));
  CHECK(p(0, 1) == doctest::Approx(1 / (e + 1)).epsilon(1e-14));
  CHECK(p(1, 1) == doctest::Approx(e / (e + 1)).epsilon(1e-14));
  CHECK_THROWS_AS(attention_scores_packed(q, DenseMatrix(3, 2), qb, kb), DimensionError);
}

TEST_CASE("score residual") {
  ParameterSet ps;
  auto est = ResidualEstimators::create(ps, "est", 3, 1);
  Rng rng = substream(2, "res");
  const auto a = random_matrix(4, 3, rng);
  const DenseMatrix zero = score_residual(a, est);
  for (double v : zero.values()) CHECK(v == 0.0);

  SUBCASE("single token, rank one, hand expansion") {
    est.w_q->value = DenseMatrix::from_rows({{1}, {2}, {0}});
    est.w_k->value = DenseMatrix::from_rows({{0}, {1}, {1}});
    est.w_q_star->value = DenseMatrix::from_rows({{0.5}, {0}, {1}});
    est.w_k_star->value = DenseMatrix::from_rows({{-1}, {0}, {2}});
    const auto x = DenseMatrix::from_rows({{1, -1, 2}});
    // x·w_q = −1, x·w_k = 1, x·w_q* = 2.5, x·w_k* = 3
    const double want = (-1) * 3 + 2.5 * 1 + 2.5 * 3;
    CHECK(score_residual(x, est)(0, 0) == doctest::Approx(want).epsilon(1e-15));
    Tape t;
    CHECK(score_residual(t, t.constant(x), est).value()(0, 0) == doctest::Approx(want).epsilon(1e-15));
  }
  SUBCASE("disabled estimator is a contract violation") {
    est.kq_enabled = false;
    CHECK_THROWS_AS(score_residual(a, est), ContractError);
    Tape t;
    CHECK_THROWS_AS(score_residual(t, t.constant(a), est), ContractError);
  }
}

TEST_CASE("exact recovery of the full-precision score") {
  const auto r = verify_recovery(1, 10, 8, 1e-8);
  INFO(r.detail);
  CHECK(r.passed);
}

TEST_CASE("disabled estimators reduce to the plain binary layer") {
  ParameterSet pa, pb;
  const auto plain = make_layer(pa, std::nullopt);
  auto with_est = make_layer(pb, 2);
  Rng rng = substream(3, "x");
  for (Parameter* p : with_est.estimators->factors())
    for (double& v : p->value.values()) v = 0.3 * standard_normal(rng);
  with_est.estimators->kq_enabled = false;
  with_est.estimators->v_enabled = false;

  const auto a = random_matrix(6, 8, rng);
  CHECK(attention_forward_packed(a, plain) == attention_forward_packed(a, with_est));
  Tape t1, t2;
  CHECK(attention_forward(t1, t1.constant(a), plain).value() ==
        attention_forward(t2, t2.constant(a), with_est).value());
}

TEST_CASE("zero value factor removes the value term") {
  ParameterSet pa, pb;
  auto off = make_layer(pa, 1);
  auto on = make_layer(pb, 1);
  off.estimators->v_enabled = false;
  Rng rng = substream(5, "x");
  on.estimators->v_v_star->value = random_matrix(8, 1, rng);  // u_v* stays zero
  const auto a = random_matrix(6, 8, rng);
  CHECK(attention_forward_packed(a, on) == attention_forward_packed(a, off));
}

TEST_CASE("estimator init follows the weight residual spectrum") {
  ParameterSet ps;
  auto layer = make_layer(ps, 8);
  layer.init_estimators_from_weights();
  // Full rank: w·wᵀ = U·S·Uᵀ for M = (W_q − W_qB)ᵀ = U·S·Vᵀ, so (w·wᵀ)² = M·Mᵀ.
  const auto& w = layer.q_proj.weight->value;
  const auto m = transpose(residual(w, binarize_weight(w).simulated));
  const auto& f = layer.estimators->w_q_star->value;
  const auto g = matmul_nt(f, f);
  const auto lhs = matmul(g, g), rhs = matmul_nt(m, m);
  for (std::size_t i = 0; i < lhs.size(); ++i) CHECK(std::abs(lhs[i] - rhs[i]) <= 1e-8);
}

TEST_CASE("attention input shape is checked") {
  ParameterSet ps;
  const auto layer = make_layer(ps, std::nullopt);
  CHECK_THROWS_AS(attention_forward_packed(DenseMatrix(3, 7), layer), DimensionError);
}
