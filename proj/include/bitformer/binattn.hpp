// SPDX-License-Identifier: Apache-2.0
//
// Binary self-attention with optional low-rank estimators of the
// binarization residual polynomials.
//
// Scores:  softmax((Q_B·K_Bᵀ + R) / √d_k), with the residual estimate
//          R = (A·w_q)(A·w_k*)ᵀ + (A·w_q*)(A·w_k)ᵀ + (A·w_q*)(A·w_k*)ᵀ
//          computed once per layer on the unsplit input A and shared by heads.
// Values:  Att_B·V_B + Att_B·(A·u_v*)·v_v*ᵀ, where the value residual
//          W_v* ≈ u_v*·v_v*ᵀ is a rank-r factor pair and each head takes its
//          d_k-row slice of v_v*.
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "bitformer/autograd.hpp"
#include "bitformer/quant.hpp"

namespace bitformer {

struct ResidualEstimators {
  std::size_t rank = 1;
  Parameter* w_q = nullptr;       // C × r
  Parameter* w_k = nullptr;       // C × r
  Parameter* w_q_star = nullptr;  // C × r
  Parameter* w_k_star = nullptr;  // C × r
  Parameter* u_v_star = nullptr;  // C × r
  Parameter* v_v_star = nullptr;  // C × r, row block h·d_k.. belongs to head h
  bool kq_enabled = true;
  bool v_enabled = true;

  static ResidualEstimators create(ParameterSet& params, const std::string& prefix, std::size_t hidden,
                                   std::size_t rank);
  std::vector<Parameter*> factors() const { return {w_q, w_k, w_q_star, w_k_star, u_v_star, v_v_star}; }
  void zero();
};

struct AttentionLayerState {
  std::size_t hidden = 0;
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  bool binarized = true;
  BinaryLinear q_proj, k_proj, v_proj, out_proj;
  std::vector<ElasticBinarizer> q_bin, k_bin, v_bin;  // ±1, one per head
  std::vector<ElasticBinarizer> att_bin;              // {0,1}, one per head
  std::optional<ResidualEstimators> estimators;

  static AttentionLayerState create(ParameterSet& params, const std::string& prefix, std::size_t hidden,
                                    std::size_t heads, Rng& rng, bool binarized, WeightGranularity granularity,
                                    std::optional<std::size_t> estimator_rank);

  /// Fits the estimator factors to the current projection weights: starred
  /// factors from the top singular directions of W − W_B, unstarred from W_B.
  void init_estimators_from_weights();
};

// --- tape (float-simulated) path -------------------------------------------

/// softmax((Q_B·K_Bᵀ [+ residual]) / √d_k) for one head.
Var attention_scores_binary(Tape& tape, Var q, Var k, const ElasticBinarizer& q_bin, const ElasticBinarizer& k_bin,
                            std::optional<Var> score_residual_term = std::nullopt, Calibrator* calib = nullptr);
Var score_residual(Tape& tape, Var a, const ResidualEstimators& est);
/// Full attention sublayer: projections, per-head binary attention,
/// estimator terms, concatenation and output projection.
Var attention_forward(Tape& tape, Var a, const AttentionLayerState& layer, Calibrator* calib = nullptr);

// --- packed-kernel (inference) path ----------------------------------------

DenseMatrix attention_scores_packed(const DenseMatrix& q, const DenseMatrix& k, const ElasticBinarizer& q_bin,
                                    const ElasticBinarizer& k_bin, const DenseMatrix* score_residual_term = nullptr);
DenseMatrix score_residual(const DenseMatrix& a, const ResidualEstimators& est);
DenseMatrix attention_forward_packed(const DenseMatrix& a, const AttentionLayerState& layer);

}  // namespace bitformer
