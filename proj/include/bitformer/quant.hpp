// SPDX-License-Identifier: Apache-2.0
//
// Binarizers and their straight-through backward passes.
//
// Each binarizer's backward pass is the exact gradient of a clip surrogate:
//   sign            : hardtanh(x)
//   weight          : s(w) · clip(w − mean(w), −1, 1),  s = ‖w‖₁ / n
//   activation ±1   : α · clip(a − β, −1, 1)
//   attention {0,1} : α · clip((att − β) / α, 0, 1)
// while the forward pass emits the hard two-level value.
#pragma once

#include <cstddef>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "bitformer/autograd.hpp"
#include "bitformer/bitkernel.hpp"
#include "bitformer/matrix.hpp"
#include "bitformer/rng.hpp"

namespace bitformer {

enum class WeightGranularity { per_row, per_tensor };
enum class BinaryLevel { plus_minus_one, zero_one };

/// Floor applied to trainable binarizer scales after every optimizer step.
inline constexpr double kAlphaFloor = std::numeric_limits<double>::epsilon();

inline double sign_of(double x) { return x >= 0.0 ? 1.0 : -1.0; }

struct BinarizedWeight {
  DenseMatrix simulated;        // s_r · sign(w − mean) per group
  PackedBitMatrix bits;         // sign pattern of (w − mean)
  std::vector<double> scales;   // one per row (per_tensor: repeated)
  std::vector<double> means;
};

struct BinarizedActivation {
  DenseMatrix simulated;  // values in {−α, +α} or {0, α}
  PackedBitMatrix bits;
  double scale = 1.0;
};

DenseMatrix sign(const DenseMatrix& x);
BinarizedWeight binarize_weight(const DenseMatrix& w, WeightGranularity granularity = WeightGranularity::per_row);
BinarizedActivation binarize_activation_pm1(const DenseMatrix& a, double alpha, double beta);
BinarizedActivation binarize_attention_01(const DenseMatrix& att, double alpha, double beta);
/// full − binarized.
DenseMatrix residual(const DenseMatrix& full, const DenseMatrix& binarized);

/// Trainable scale/shift pair of an elastic binarizer.
struct ElasticBinarizer {
  Parameter* alpha = nullptr;  // 1×1, bounded below by kAlphaFloor
  Parameter* beta = nullptr;   // 1×1
  BinaryLevel level = BinaryLevel::plus_minus_one;

  static ElasticBinarizer create(ParameterSet& params, const std::string& prefix, BinaryLevel level,
                                 double alpha0, double beta0);
  double alpha_value() const { return alpha->value[0]; }
  double beta_value() const { return beta->value[0]; }
};

/// Collects mean|a − β| per binarizer over a calibration pass (doubled for
/// {0,1} binarizers, whose threshold sits at α/2) and writes the result into
/// α afterwards. While observing, the binarizer uses the statistic of its
/// current input as α.
class Calibrator {
 public:
  double observe(const ElasticBinarizer& q, const DenseMatrix& a);
  void finalize() const;
  std::size_t observed() const noexcept { return stats_.size(); }

 private:
  struct Stat {
    Parameter* alpha = nullptr;
    double sum = 0.0;
    std::size_t count = 0;
  };
  std::map<std::size_t, Stat> stats_;
};

namespace ad {

Var sign_ste(Var x);
Var binarize_weight(Var w, WeightGranularity granularity = WeightGranularity::per_row);
Var binarize_activation_pm1(Var a, Var alpha, Var beta);
Var binarize_attention_01(Var att, Var alpha, Var beta);

}  // namespace ad

/// Binary linear layer: out = Q_B(A) · Q_B(W)ᵀ + b. With `binarized` off it is
/// an ordinary full-precision linear (teacher models).
struct BinaryLinear {
  Parameter* weight = nullptr;  // out × in
  Parameter* bias = nullptr;    // 1 × out
  ElasticBinarizer input;       // ±1 activation binarizer; unset when !binarized
  bool binarized = true;
  WeightGranularity granularity = WeightGranularity::per_row;

  static BinaryLinear create(ParameterSet& params, const std::string& prefix, std::size_t in,
                             std::size_t out, Rng& rng, bool binarized, WeightGranularity granularity,
                             double init_std = 0.02);

  std::size_t in_features() const { return weight->value.cols(); }
  std::size_t out_features() const { return weight->value.rows(); }

  /// Float-simulated forward on a tape.
  Var forward(Tape& tape, Var x, Calibrator* calib = nullptr) const;
  /// Inference forward through the packed XNOR-popcount kernel.
  DenseMatrix forward_packed(const DenseMatrix& x) const;
};

/// α for the activation binarizer: the calibration statistic when a calibrator
/// is observing, otherwise the parameter value. Recorded as a parameter leaf
/// only outside calibration.
Var binarizer_alpha(Tape& tape, const ElasticBinarizer& q, const DenseMatrix& input, Calibrator* calib);

}  // namespace bitformer
