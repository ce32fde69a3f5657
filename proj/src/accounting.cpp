// SPDX-License-Identifier: Apache-2.0
#include "bitformer/accounting.hpp"

#include <cstdio>
#include <sstream>

namespace bitformer {

namespace {

constexpr double kLayerNormFlops = 4;
constexpr double kSoftmaxFlops = 2;
constexpr double kGeluFlops = 4;

struct Dims {
  double n, c, h, f, r, rows;
};

Dims dims_of(const ModelConfig& cfg, std::size_t seq) {
  return Dims{static_cast<double>(seq),
              static_cast<double>(cfg.hidden),
              static_cast<double>(cfg.heads),
              static_cast<double>(cfg.ffn_dim),
              static_cast<double>(cfg.has_estimators() ? cfg.estimator_rank : 0),
              static_cast<double>(cfg.vocab + cfg.max_seq + cfg.segments)};
}

std::size_t binarizer_scalars(const ModelConfig& cfg) {
  // α, β for six linear inputs plus q/k/v/attention binarizers per head.
  return cfg.full_precision ? 0 : 2 * (6 + 4 * cfg.heads);
}

}  // namespace

std::size_t backbone_parameter_count(const ModelConfig& cfg) {
  const std::size_t c = cfg.hidden, f = cfg.ffn_dim;
  std::size_t n = (cfg.vocab + cfg.max_seq + cfg.segments) * c + 2 * c;
  std::size_t layer = 4 * (c * c + c) + (c * f + f) + (f * c + c) + 4 * c + binarizer_scalars(cfg);
  if (cfg.has_estimators()) layer += 6 * c * cfg.estimator_rank;
  return n + cfg.layers * layer;
}

std::size_t head_parameter_count(const ModelConfig& cfg) {
  return (cfg.vocab * cfg.hidden + cfg.vocab) + (2 * cfg.hidden + 2);
}

AccountingReport equivalent_flops(const ModelConfig& cfg, std::size_t seq_len) {
  AccountingReport rep;
  rep.config = cfg;
  rep.seq_len = seq_len;
  const Dims d = dims_of(cfg, seq_len);
  const double layers = static_cast<double>(cfg.layers);
  const double n = d.n, c = d.c, h = d.h, f = d.f, r = d.r;

  // Shared by both paths: embedding sum and norm, two residual adds and two
  // norms per block, softmax, GeLU.
  const double emb_elementwise = 2 * n * c + kLayerNormFlops * n * c;
  const double layer_elementwise = 2 * n * c + 2 * kLayerNormFlops * n * c + kSoftmaxFlops * n * n * h +
                                   kGeluFlops * n * f;
  const double linear_macs = n * (4 * c * c + 2 * c * f);

  // Full-precision reference: every product in floating point; biases and
  // the 1/√d_k score scaling counted as elementwise.
  rep.fp_reference_macs = layers * (linear_macs + 2 * n * n * c);
  rep.fp_reference_elementwise_flops =
      emb_elementwise + layers * (layer_elementwise + n * (5 * c + f) + n * n * h);
  rep.fp_reference_gflops = (2 * rep.fp_reference_macs + rep.fp_reference_elementwise_flops) * 1e-9;

  if (cfg.full_precision) {
    rep.fp_macs = rep.fp_reference_macs;
    rep.elementwise_flops = rep.fp_reference_elementwise_flops;
  } else {
    // Q·Kᵀ is one binary product; Att{0,1}·V takes two (sign-form product
    // plus the all-ones product) before the shift.
    rep.binary_macs = layers * (linear_macs + n * n * c + 2 * n * n * c);
    // Scale-and-bias readout of each linear output, the score scale α_q·α_k/√d_k,
    // and the α_att·α_v readout of attention·V.
    double layer_fp = n * (5 * c + f) + n * n * h + n * c;
    double layer_elt = layer_elementwise;
    if (r > 0) {
      layer_fp += 5 * n * c * r       // A·w for w_q, w_k, w_q*, w_k*, u_v*
                  + 3 * n * n * r     // three rank-r score products
                  + h * n * n * r     // Att_B·(A·u_v*) per head
                  + n * c * r;        // ·v_hᵀ per head
      layer_elt += n * n * h + n * c;  // adding both estimates
    }
    rep.fp_macs = layers * layer_fp;
    rep.elementwise_flops = emb_elementwise + 3 * n * c /* embedding row scales */ + layers * layer_elt;
  }
  rep.equivalent_gflops = (2 * (rep.binary_macs / 64.0 + rep.fp_macs) + rep.elementwise_flops) * 1e-9;

  rep.backbone_params = backbone_parameter_count(cfg);
  rep.head_params = head_parameter_count(cfg);
  if (cfg.full_precision) {
    rep.fp_params = rep.backbone_params;
  } else {
    const std::size_t cc = cfg.hidden, ff = cfg.ffn_dim;
    const std::size_t table_rows = cfg.vocab + cfg.max_seq + cfg.segments;
    rep.binary_params = table_rows * cc + cfg.layers * (4 * cc * cc + 2 * cc * ff);
    const std::size_t out_rows = 5 * cc + ff;  // outputs of the six linears
    const std::size_t weight_scales =
        cfg.granularity == WeightGranularity::per_row ? out_rows : 6;
    std::size_t per_layer = weight_scales + out_rows /* biases */ + 4 * cc /* norms */ + binarizer_scalars(cfg);
    if (cfg.has_estimators()) per_layer += 6 * cc * cfg.estimator_rank;
    rep.fp_params = table_rows /* embedding row scales */ + 2 * cc + cfg.layers * per_layer;
  }
  rep.size_mb = (static_cast<double>(rep.binary_params) / 8.0 + 4.0 * static_cast<double>(rep.fp_params)) * 1e-6;
  rep.fp_reference_size_mb = 4.0 * static_cast<double>(backbone_parameter_count([&] {
                               ModelConfig fp = cfg;
                               fp.full_precision = true;
                               return fp;
                             }())) * 1e-6;
  return rep;
}

std::string AccountingReport::convention() {
  return "1 MAC = 2 FLOPs; 1-bit MAC = 1/64 MAC; elementwise FLOPs: add/scale 1, layernorm 4, softmax 2, gelu 4; "
         "sign extraction folded into packing; size: 1-bit param = 1/8 byte, fp param = 4 bytes, MB = 1e6 bytes; "
         "heads (MLM, NSP) excluded; norms, biases, scales, binarizer alpha/beta and estimators full precision";
}

std::vector<std::pair<std::string, double>> AccountingReport::metrics() const {
  return {
      {"seq_len", static_cast<double>(seq_len)},
      {"binary_macs", binary_macs},
      {"fp_macs", fp_macs},
      {"elementwise_flops", elementwise_flops},
      {"equivalent_gflops", equivalent_gflops},
      {"fp_reference_gflops", fp_reference_gflops},
      {"binary_params", static_cast<double>(binary_params)},
      {"fp_params", static_cast<double>(fp_params)},
      {"backbone_params", static_cast<double>(backbone_params)},
      {"head_params_excluded", static_cast<double>(head_params)},
      {"size_mb", size_mb},
      {"fp_reference_size_mb", fp_reference_size_mb},
  };
}

std::string AccountingReport::to_text() const {
  std::ostringstream o;
  o << "config: layers=" << config.layers << " hidden=" << config.hidden << " heads=" << config.heads
    << " ffn=" << config.ffn_dim << " vocab=" << config.vocab << " variant=" << to_string(config.variant)
    << (config.has_estimators() ? " rank=" + std::to_string(config.estimator_rank) : std::string()) << '\n';
  o << "convention: " << convention() << '\n';
  char buf[64];
  for (const auto& [k, v] : metrics()) {
    std::snprintf(buf, sizeof buf, "%.6g", v);
    o << k << '=' << buf << '\n';
  }
  return o.str();
}

}  // namespace bitformer
