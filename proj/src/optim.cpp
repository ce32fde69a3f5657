// SPDX-License-Identifier: Apache-2.0
#include "bitformer/optim.hpp"

#include <algorithm>
#include <cmath>

#include "bitformer/errors.hpp"

namespace bitformer {

double global_grad_norm(const ParameterSet& params) {
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i)
    for (double g : params[i].grad.values()) sq += g * g;
  return std::sqrt(sq);
}

void AdamW::step(ParameterSet& params, double lr) {
  if (lr < 0.0) throw InvalidParameterError("AdamW: negative learning rate");
  if (state_.size() < params.size()) state_.resize(params.size());
  ++t_;

  double grad_scale = 1.0;
  if (opts_.clip_global_norm) {
    const double norm = global_grad_norm(params);
    if (norm > *opts_.clip_global_norm) grad_scale = *opts_.clip_global_norm / norm;
  }

  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    if (p.frozen) continue;
    Moments& s = state_[i];
    if (s.m.empty()) {
      s.m = DenseMatrix(p.value.rows(), p.value.cols());
      s.v = DenseMatrix(p.value.rows(), p.value.cols());
    }
    if (!p.grad.same_shape(p.value)) {
      throw DimensionError("AdamW: gradient " + p.grad.shape_string() + " for parameter '" + p.name +
                           "' " + p.value.shape_string());
    }
    const double decay = p.decay ? opts_.weight_decay : 0.0;
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k] * grad_scale;
      s.m[k] = opts_.beta1 * s.m[k] + (1.0 - opts_.beta1) * g;
      s.v[k] = opts_.beta2 * s.v[k] + (1.0 - opts_.beta2) * g * g;
      const double mhat = s.m[k] / bc1;
      const double vhat = s.v[k] / bc2;
      p.value[k] -= lr * (mhat / (std::sqrt(vhat) + opts_.eps) + decay * p.value[k]);
    }
    if (p.lower_bound) {
      for (double& v : p.value.values()) v = std::max(v, *p.lower_bound);
    }
  }
}

double linear_warmup_schedule(std::size_t step, std::size_t warmup_steps, std::size_t total_steps,
                              double peak_lr) {
  if (warmup_steps > total_steps) {
    throw ConfigError("warmup_steps " + std::to_string(warmup_steps) + " exceeds total_steps " +
                      std::to_string(total_steps));
  }
  if (step > total_steps) {
    throw ConfigError("schedule step " + std::to_string(step) + " beyond total_steps " +
                      std::to_string(total_steps));
  }
  if (step < warmup_steps) {
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (total_steps == warmup_steps) return peak_lr;
  return peak_lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup_steps);
}

}  // namespace bitformer
