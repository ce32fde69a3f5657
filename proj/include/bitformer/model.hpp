// SPDX-License-Identifier: Apache-2.0
//
// Binary BERT-style encoder: binarized token/position/segment embeddings,
// post-LN blocks of binary attention + binary FFN, full-precision norms and
// heads. Every forward exists twice: a float-simulated tape path used for
// training and a packed-kernel path used for evaluation; the two must agree.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bitformer/autograd.hpp"
#include "bitformer/binattn.hpp"
#include "bitformer/quant.hpp"

namespace bitformer {

enum class Variant { baseline, bipft_a, bipft_b };

std::string to_string(Variant v);
/// Accepts "baseline", "bipft_a"/"bipft-a", "bipft_b"/"bipft-b".
Variant parse_variant(std::string_view s);

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t max_seq = 64;
  std::size_t vocab = 4096;
  std::size_t segments = 2;
  Variant variant = Variant::bipft_a;
  std::size_t estimator_rank = 1;
  WeightGranularity granularity = WeightGranularity::per_row;
  bool full_precision = false;  // teacher models: nothing is binarized
  std::uint64_t seed = 1;
  double ln_eps = 1e-12;

  static ModelConfig tiny();
  static ModelConfig base();
  /// Named preset ("tiny", "base") or a path to a key=value config file.
  static ModelConfig resolve(const std::string& name_or_path);

  bool has_estimators() const { return variant == Variant::bipft_b && !full_precision; }
  std::size_t head_dim() const { return heads ? hidden / heads : 0; }

  /// Every violated invariant, one message each; empty when valid.
  std::vector<std::string> violations() const;
  /// Throws ConfigError listing all violations.
  void validate() const;

  /// Canonical key=value text, one key per line in a fixed order.
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
  /// Overrides fields from key=value text on top of *this.
  void apply_text(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

struct EncoderBlock {
  AttentionLayerState attn;
  Parameter* ln1_gamma = nullptr;
  Parameter* ln1_beta = nullptr;
  BinaryLinear ffn_in;   // C → ffn_dim
  BinaryLinear ffn_out;  // ffn_dim → C
  Parameter* ln2_gamma = nullptr;
  Parameter* ln2_beta = nullptr;
};

struct Embeddings {
  Parameter* token = nullptr;     // vocab × C
  Parameter* position = nullptr;  // max_seq × C
  Parameter* segment = nullptr;   // segments × C
  Parameter* ln_gamma = nullptr;
  Parameter* ln_beta = nullptr;
};

struct FullPrecisionHead {
  Parameter* weight = nullptr;  // out × C
  Parameter* bias = nullptr;    // 1 × out
};

struct SequenceInput {
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> segments;  // empty → all zero
};

struct ForwardVars {
  std::vector<Var> hiddens;  // embedding output, then each block: L + 1 entries
  Var mlm_logits;            // seq × vocab
  Var nsp_logits;            // 1 × 2
};

struct ForwardValues {
  std::vector<DenseMatrix> hiddens;
  DenseMatrix mlm_logits;
  DenseMatrix nsp_logits;
};

class Model {
 public:
  /// Deterministic build from config.seed; throws ConfigError on an invalid config.
  static Model build(const ModelConfig& config);

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// Independent copy with identical parameter values.
  Model clone() const;

  const ModelConfig& config() const noexcept { return config_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }
  const std::vector<EncoderBlock>& blocks() const noexcept { return blocks_; }
  std::vector<EncoderBlock>& blocks() noexcept { return blocks_; }
  const Embeddings& embeddings() const noexcept { return emb_; }

  /// Tape forward. With a calibrator attached the activation binarizers use
  /// their input statistics as α and the calibrator records them.
  ForwardVars forward(Tape& tape, const SequenceInput& in, Calibrator* calib = nullptr) const;
  /// Float-simulated forward without gradient bookkeeping.
  ForwardValues forward_values(const SequenceInput& in) const;
  /// Evaluation forward through the packed XNOR-popcount kernels.
  ForwardValues forward_packed(const SequenceInput& in) const;
  /// Final hidden state, as forward_values(...).hiddens.back().
  DenseMatrix encode(const SequenceInput& in) const;

  /// Sets every activation binarizer α to mean|a − β| over `batch`.
  void calibrate(std::span<const SequenceInput> batch);
  bool calibrated() const noexcept { return calibrated_; }
  void mark_calibrated() noexcept { calibrated_ = true; }
  /// Refits estimator factors from the current projection weights (bipft_b).
  void init_estimators();

  /// Classification head on the [CLS] state; created on demand.
  FullPrecisionHead& ensure_classifier(std::size_t classes);
  const std::optional<FullPrecisionHead>& classifier() const noexcept { return classifier_; }
  Var classify(Tape& tape, Var final_hidden) const;

  /// Parameters of embeddings and encoder blocks (everything but heads).
  std::size_t backbone_parameter_count() const;
  /// Marks all non-head parameters frozen.
  void freeze_body(bool frozen);

  /// Copies matching parameter values from `other` (same names and shapes);
  /// returns the number copied.
  std::size_t copy_parameters_from(const Model& other);

 private:
  explicit Model(const ModelConfig& config) : config_(config) {}
  void check_input(const SequenceInput& in) const;
  bool is_head(const Parameter& p) const;

  ModelConfig config_;
  ParameterSet params_;
  Embeddings emb_;
  std::vector<EncoderBlock> blocks_;
  FullPrecisionHead mlm_;
  FullPrecisionHead nsp_;
  std::optional<FullPrecisionHead> classifier_;
  bool calibrated_ = false;
};

}  // namespace bitformer
