// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "bitformer/autograd.hpp"

namespace bitformer {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::optional<double> clip_global_norm;  // off unless set
};

/// AdamW with bias-corrected moments and decoupled weight decay. Decay is
/// applied only to parameters flagged with Parameter::decay; lower bounds
/// (binarizer scales) are enforced after each update.
class AdamW {
 public:
  explicit AdamW(AdamWOptions opts = {}) : opts_(opts) {}

  void step(ParameterSet& params, double lr);
  std::size_t steps_taken() const noexcept { return t_; }
  const AdamWOptions& options() const noexcept { return opts_; }

 private:
  struct Moments {
    DenseMatrix m, v;
  };
  AdamWOptions opts_;
  std::vector<Moments> state_;
  std::size_t t_ = 0;
};

/// Linear ramp 0→peak over warmup_steps, then linear decay to 0 at total_steps.
double linear_warmup_schedule(std::size_t step, std::size_t warmup_steps, std::size_t total_steps,
                              double peak_lr);

double global_grad_norm(const ParameterSet& params);

}  // namespace bitformer
