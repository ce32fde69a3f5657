// SPDX-License-Identifier: Apache-2.0
#include "bitformer/binattn.hpp"

#include <cmath>

#include "bitformer/errors.hpp"
#include "bitformer/numerics.hpp"

namespace bitformer {

ResidualEstimators ResidualEstimators::create(ParameterSet& params, const std::string& prefix, std::size_t hidden,
                                              std::size_t rank) {
  if (rank == 0) throw ConfigError("estimator rank must be at least 1");
  ResidualEstimators e;
  e.rank = rank;
  e.w_q = &params.add(prefix + ".w_q", DenseMatrix(hidden, rank));
  e.w_k = &params.add(prefix + ".w_k", DenseMatrix(hidden, rank));
  e.w_q_star = &params.add(prefix + ".w_q_star", DenseMatrix(hidden, rank));
  e.w_k_star = &params.add(prefix + ".w_k_star", DenseMatrix(hidden, rank));
  e.u_v_star = &params.add(prefix + ".u_v_star", DenseMatrix(hidden, rank));
  e.v_v_star = &params.add(prefix + ".v_v_star", DenseMatrix(hidden, rank));
  return e;
}

void ResidualEstimators::zero() {
  for (Parameter* p : factors()) p->value.fill(0.0);
}

AttentionLayerState AttentionLayerState::create(ParameterSet& params, const std::string& prefix, std::size_t hidden,
                                                std::size_t heads, Rng& rng, bool binarized,
                                                WeightGranularity granularity,
                                                std::optional<std::size_t> estimator_rank) {
  if (heads == 0 || hidden % heads != 0) {
    throw ConfigError("hidden size " + std::to_string(hidden) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  AttentionLayerState s;
  s.hidden = hidden;
  s.heads = heads;
  s.head_dim = hidden / heads;
  s.binarized = binarized;
  s.q_proj = BinaryLinear::create(params, prefix + ".q", hidden, hidden, rng, binarized, granularity);
  s.k_proj = BinaryLinear::create(params, prefix + ".k", hidden, hidden, rng, binarized, granularity);
  s.v_proj = BinaryLinear::create(params, prefix + ".v", hidden, hidden, rng, binarized, granularity);
  s.out_proj = BinaryLinear::create(params, prefix + ".o", hidden, hidden, rng, binarized, granularity);
  if (binarized) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::string hp = prefix + ".head" + std::to_string(h);
      s.q_bin.push_back(ElasticBinarizer::create(params, hp + ".q_bin", BinaryLevel::plus_minus_one, 1.0, 0.0));
      s.k_bin.push_back(ElasticBinarizer::create(params, hp + ".k_bin", BinaryLevel::plus_minus_one, 1.0, 0.0));
      s.v_bin.push_back(ElasticBinarizer::create(params, hp + ".v_bin", BinaryLevel::plus_minus_one, 1.0, 0.0));
      s.att_bin.push_back(ElasticBinarizer::create(params, hp + ".att_bin", BinaryLevel::zero_one, 1.0, 0.0));
    }
    if (estimator_rank) s.estimators = ResidualEstimators::create(params, prefix + ".est", hidden, *estimator_rank);
  } else if (estimator_rank) {
    throw ConfigError("residual estimators require a binarized attention layer");
  }
  return s;
}

namespace {

// Factor for A·M ≈ A·(U S Vᵀ): columns U·√S (and V·√S for the right side).
void fill_left_factor(const DenseMatrix& m, Parameter& left, Parameter* right) {
  const std::size_t r = left.value.cols();
  TruncatedSvd svd = truncated_svd(m, r);
  left.value.fill(0.0);
  if (right) right->value.fill(0.0);
  for (std::size_t k = 0; k < svd.sigma.size(); ++k) {
    const double root = std::sqrt(svd.sigma[k]);
    for (std::size_t i = 0; i < svd.u.rows(); ++i) left.value(i, k) = svd.u(i, k) * root;
    if (right)
      for (std::size_t j = 0; j < svd.v.rows(); ++j) right->value(j, k) = svd.v(j, k) * root;
  }
}

}  // namespace

void AttentionLayerState::init_estimators_from_weights() {
  if (!estimators) return;
  ResidualEstimators& e = *estimators;
  // Projection weights are stored out×in; the A·W convention needs Wᵀ.
  auto binarized_of = [](const BinaryLinear& l) {
    return transpose(binarize_weight(l.weight->value, l.granularity).simulated);
  };
  auto residual_of = [](const BinaryLinear& l) {
    return transpose(residual(l.weight->value, binarize_weight(l.weight->value, l.granularity).simulated));
  };
  fill_left_factor(binarized_of(q_proj), *e.w_q, nullptr);
  fill_left_factor(binarized_of(k_proj), *e.w_k, nullptr);
  fill_left_factor(residual_of(q_proj), *e.w_q_star, nullptr);
  fill_left_factor(residual_of(k_proj), *e.w_k_star, nullptr);
  fill_left_factor(residual_of(v_proj), *e.u_v_star, e.v_v_star);
}

// ---------------------------------------------------------------------------
// Tape path

Var attention_scores_binary(Tape& tape, Var q, Var k, const ElasticBinarizer& q_bin, const ElasticBinarizer& k_bin,
                            std::optional<Var> score_residual_term, Calibrator* calib) {
  if (q.cols() != k.cols() || q.rows() != k.rows()) {
    throw DimensionError("attention scores: q " + q.value().shape_string() + " vs k " + k.value().shape_string());
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Var qb = ad::binarize_activation_pm1(q, binarizer_alpha(tape, q_bin, q.value(), calib), tape.param(*q_bin.beta));
  Var kb = ad::binarize_activation_pm1(k, binarizer_alpha(tape, k_bin, k.value(), calib), tape.param(*k_bin.beta));
  Var s = ad::matmul_nt(qb, kb);
  if (score_residual_term) s = ad::add(s, *score_residual_term);
  return ad::softmax_rows(ad::scale(s, inv_sqrt));
}

Var score_residual(Tape& tape, Var a, const ResidualEstimators& est) {
  if (!est.kq_enabled) throw ContractError("score_residual: key/query estimator is disabled");
  if (a.cols() != est.w_q->value.rows()) {
    throw DimensionError("score_residual: input " + a.value().shape_string() + " for estimator hidden size " +
                         std::to_string(est.w_q->value.rows()));
  }
  Var aq = ad::matmul(a, tape.param(*est.w_q));
  Var ak = ad::matmul(a, tape.param(*est.w_k));
  Var aq_s = ad::matmul(a, tape.param(*est.w_q_star));
  Var ak_s = ad::matmul(a, tape.param(*est.w_k_star));
  Var r = ad::add(ad::matmul_nt(aq, ak_s), ad::matmul_nt(aq_s, ak));
  return ad::add(r, ad::matmul_nt(aq_s, ak_s));
}

Var attention_forward(Tape& tape, Var a, const AttentionLayerState& layer, Calibrator* calib) {
  if (a.cols() != layer.hidden) {
    throw DimensionError("attention_forward: input " + a.value().shape_string() + " for hidden size " +
                         std::to_string(layer.hidden));
  }
  Var q = layer.q_proj.forward(tape, a, calib);
  Var k = layer.k_proj.forward(tape, a, calib);
  Var v = layer.v_proj.forward(tape, a, calib);
  const std::size_t d = layer.head_dim;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));

  std::optional<Var> kq_residual;
  std::optional<Var> value_low_rank;  // A·u_v*
  const ResidualEstimators* est = layer.estimators ? &*layer.estimators : nullptr;
  if (est && est->kq_enabled) kq_residual = score_residual(tape, a, *est);
  if (est && est->v_enabled) value_low_rank = ad::matmul(a, tape.param(*est->u_v_star));

  std::vector<Var> heads;
  heads.reserve(layer.heads);
  for (std::size_t h = 0; h < layer.heads; ++h) {
    Var qh = ad::slice_cols(q, h * d, d);
    Var kh = ad::slice_cols(k, h * d, d);
    Var vh = ad::slice_cols(v, h * d, d);
    if (!layer.binarized) {
      Var p = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt));
      heads.push_back(ad::matmul(p, vh));
      continue;
    }
    Var p = attention_scores_binary(tape, qh, kh, layer.q_bin[h], layer.k_bin[h], kq_residual, calib);
    const ElasticBinarizer& ab = layer.att_bin[h];
    Var att = ad::binarize_attention_01(p, binarizer_alpha(tape, ab, p.value(), calib), tape.param(*ab.beta));
    const ElasticBinarizer& vq = layer.v_bin[h];
    Var vb = ad::binarize_activation_pm1(vh, binarizer_alpha(tape, vq, vh.value(), calib), tape.param(*vq.beta));
    Var out = ad::matmul(att, vb);
    if (value_low_rank) {
      Var vh_factor = ad::slice_rows(tape.param(*est->v_v_star), h * d, d);
      out = ad::add(out, ad::matmul_nt(ad::matmul(att, *value_low_rank), vh_factor));
    }
    heads.push_back(out);
  }
  return layer.out_proj.forward(tape, ad::concat_cols(heads), calib);
}

// ---------------------------------------------------------------------------
// Packed path

namespace {

DenseMatrix columns(const DenseMatrix& m, std::size_t start, std::size_t count) {
  DenseMatrix out(m.rows(), count);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = m(r, start + c);
  return out;
}

DenseMatrix row_block(const DenseMatrix& m, std::size_t start, std::size_t count) {
  DenseMatrix out(count, m.cols());
  for (std::size_t r = 0; r < count; ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = m(start + r, c);
  return out;
}

}  // namespace

DenseMatrix attention_scores_packed(const DenseMatrix& q, const DenseMatrix& k, const ElasticBinarizer& q_bin,
                                    const ElasticBinarizer& k_bin, const DenseMatrix* score_residual_term) {
  if (!q.same_shape(k)) throw DimensionError("attention scores: q " + q.shape_string() + " vs k " + k.shape_string());
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  const BinarizedActivation qb = binarize_activation_pm1(q, q_bin.alpha_value(), q_bin.beta_value());
  const BinarizedActivation kb = binarize_activation_pm1(k, k_bin.alpha_value(), k_bin.beta_value());
  // K_B is row-major n×d, i.e. already the transposed layout binary_gemm wants.
  DenseMatrix s = binary_gemm(qb.bits, kb.bits, qb.scale * kb.scale);
  if (score_residual_term) s += *score_residual_term;
  s *= inv_sqrt;
  return softmax_rows(s);
}

DenseMatrix score_residual(const DenseMatrix& a, const ResidualEstimators& est) {
  if (!est.kq_enabled) throw ContractError("score_residual: key/query estimator is disabled");
  if (a.cols() != est.w_q->value.rows()) {
    throw DimensionError("score_residual: input " + a.shape_string() + " for estimator hidden size " +
                         std::to_string(est.w_q->value.rows()));
  }
  const DenseMatrix aq = matmul(a, est.w_q->value);
  const DenseMatrix ak = matmul(a, est.w_k->value);
  const DenseMatrix aq_s = matmul(a, est.w_q_star->value);
  const DenseMatrix ak_s = matmul(a, est.w_k_star->value);
  DenseMatrix r = matmul_nt(aq, ak_s) + matmul_nt(aq_s, ak);
  return r + matmul_nt(aq_s, ak_s);
}

DenseMatrix attention_forward_packed(const DenseMatrix& a, const AttentionLayerState& layer) {
  if (a.cols() != layer.hidden) {
    throw DimensionError("attention_forward: input " + a.shape_string() + " for hidden size " +
                         std::to_string(layer.hidden));
  }
  const DenseMatrix q = layer.q_proj.forward_packed(a);
  const DenseMatrix k = layer.k_proj.forward_packed(a);
  const DenseMatrix v = layer.v_proj.forward_packed(a);
  const std::size_t n = a.rows();
  const std::size_t d = layer.head_dim;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));
  const ResidualEstimators* est = layer.estimators ? &*layer.estimators : nullptr;

  std::optional<DenseMatrix> kq_residual;
  std::optional<DenseMatrix> value_low_rank;
  if (est && est->kq_enabled) kq_residual = score_residual(a, *est);
  if (est && est->v_enabled) value_low_rank = matmul(a, est->u_v_star->value);

  DenseMatrix concat(n, layer.hidden);
  for (std::size_t h = 0; h < layer.heads; ++h) {
    const DenseMatrix qh = columns(q, h * d, d);
    const DenseMatrix kh = columns(k, h * d, d);
    const DenseMatrix vh = columns(v, h * d, d);
    DenseMatrix out(n, d);
    if (!layer.binarized) {
      out = matmul(softmax_rows(matmul_nt(qh, kh) * inv_sqrt), vh);
    } else {
      const DenseMatrix p =
          attention_scores_packed(qh, kh, layer.q_bin[h], layer.k_bin[h], kq_residual ? &*kq_residual : nullptr);
      const ElasticBinarizer& ab = layer.att_bin[h];
      const BinarizedActivation att = binarize_attention_01(p, ab.alpha_value(), ab.beta_value());
      const ElasticBinarizer& vq = layer.v_bin[h];
      const BinarizedActivation vb = binarize_activation_pm1(transpose(vh), vq.alpha_value(), vq.beta_value());
      const IntMatrix counts = ternary_binary_gemm(att.bits, vb.bits);
      const double scale = att.scale * vb.scale;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out(i, j) = scale * counts(i, j);
      if (value_low_rank) {
        out += matmul_nt(matmul(att.simulated, *value_low_rank), row_block(est->v_v_star->value, h * d, d));
      }
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) concat(i, h * d + j) = out(i, j);
  }
  return layer.out_proj.forward_packed(concat);
}

}  // namespace bitformer
