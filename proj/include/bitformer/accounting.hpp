// SPDX-License-Identifier: Apache-2.0
//
// Closed-form operation and storage accounting for a model config.
//
// Convention (printed with every report):
//   * one MAC = 2 FLOPs; a 1-bit MAC (XNOR + popcount lane) counts 1/64 of a
//     full-precision MAC;
//   * elementwise full-precision work is counted directly in FLOPs: add or
//     scale 1, layer norm 4, softmax 2, GeLU 4 per element; sign extraction
//     is folded into bit packing and not counted;
//   * sizes: 1-bit parameters at 1/8 byte, full-precision parameters at 4
//     bytes, 1 MB = 10⁶ bytes;
//   * pretraining heads (MLM, NSP) are excluded from FLOPs and size and
//     reported separately.
#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "bitformer/model.hpp"

namespace bitformer {

struct AccountingReport {
  ModelConfig config;
  std::size_t seq_len = 0;

  double binary_macs = 0;      // per sequence
  double fp_macs = 0;          // per sequence
  double elementwise_flops = 0;
  double equivalent_gflops = 0;

  double fp_reference_macs = 0;  // same config, nothing binarized
  double fp_reference_elementwise_flops = 0;
  double fp_reference_gflops = 0;

  std::size_t binary_params = 0;
  std::size_t fp_params = 0;
  std::size_t backbone_params = 0;  // latent parameters, heads excluded
  std::size_t head_params = 0;      // MLM + NSP, excluded from the totals
  double size_mb = 0;
  double fp_reference_size_mb = 0;

  static std::string convention();
  /// metric=value lines, fixed key order.
  std::vector<std::pair<std::string, double>> metrics() const;
  std::string to_text() const;
};

AccountingReport equivalent_flops(const ModelConfig& config, std::size_t seq_len);
inline AccountingReport equivalent_flops(const ModelConfig& config) {
  return equivalent_flops(config, config.max_seq);
}

/// Latent backbone parameters (embeddings, embedding norm, encoder blocks).
std::size_t backbone_parameter_count(const ModelConfig& config);
/// MLM and NSP head parameters.
std::size_t head_parameter_count(const ModelConfig& config);

}  // namespace bitformer
