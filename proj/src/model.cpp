// SPDX-License-Identifier: Apache-2.0
#include "bitformer/model.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "bitformer/errors.hpp"
#include "bitformer/numerics.hpp"
#include "bitformer/rng.hpp"

namespace bitformer {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::bipft_a: return "bipft_a";
    case Variant::bipft_b: return "bipft_b";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  if (s == "baseline") return Variant::baseline;
  if (s == "bipft_a" || s == "bipft-a") return Variant::bipft_a;
  if (s == "bipft_b" || s == "bipft-b") return Variant::bipft_b;
  throw ConfigError("unknown variant '" + std::string(s) + "' (expected baseline, bipft_a or bipft_b)");
}

// ---------------------------------------------------------------------------
// ModelConfig

ModelConfig ModelConfig::tiny() { return ModelConfig{}; }

ModelConfig ModelConfig::base() {
  ModelConfig c;
  c.layers = 12;
  c.hidden = 768;
  c.heads = 12;
  c.ffn_dim = 3072;
  c.max_seq = 512;
  c.vocab = 30522;
  return c;
}

ModelConfig ModelConfig::resolve(const std::string& name_or_path) {
  if (name_or_path == "tiny") return tiny();
  if (name_or_path == "base") return base();
  std::ifstream in(name_or_path);
  if (!in) throw ConfigError("config '" + name_or_path + "' is neither a preset (tiny, base) nor a readable file");
  std::stringstream ss;
  ss << in.rdbuf();
  ModelConfig c = tiny();
  c.apply_text(ss.str());
  return c;
}

std::vector<std::string> ModelConfig::violations() const {
  std::vector<std::string> v;
  if (hidden == 0) v.push_back("hidden must be positive");
  if (heads == 0) v.push_back("heads must be positive");
  if (hidden != 0 && heads != 0 && hidden % heads != 0) {
    v.push_back("hidden " + std::to_string(hidden) + " not divisible by heads " + std::to_string(heads));
  }
  if (ffn_dim == 0) v.push_back("ffn_dim must be positive");
  if (max_seq < 3) v.push_back("max_seq must be at least 3 ([CLS] x [SEP])");
  if (vocab < 5) v.push_back("vocab " + std::to_string(vocab) + " < 5 reserved specials");
  if (segments == 0 || segments > 2) v.push_back("segments must be 1 or 2");
  if (variant == Variant::bipft_b && estimator_rank == 0) v.push_back("bipft_b requires estimator rank >= 1");
  if (variant == Variant::bipft_b && estimator_rank > hidden) {
    v.push_back("estimator rank " + std::to_string(estimator_rank) + " exceeds hidden " + std::to_string(hidden));
  }
  if (!(ln_eps > 0.0)) v.push_back("ln_eps must be positive");
  return v;
}

void ModelConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid model config:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ConfigError(msg);
}

namespace {

std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  std::uint64_t out = 0;
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end) throw ConfigError("config key '" + key + "': expected integer, got '" + value + "'");
  return out;
}

}  // namespace

std::string ModelConfig::to_text() const {
  std::ostringstream o;
  o << "layers=" << layers << '\n'
    << "hidden=" << hidden << '\n'
    << "heads=" << heads << '\n'
    << "ffn_dim=" << ffn_dim << '\n'
    << "max_seq=" << max_seq << '\n'
    << "vocab=" << vocab << '\n'
    << "segments=" << segments << '\n'
    << "variant=" << to_string(variant) << '\n'
    << "rank=" << estimator_rank << '\n'
    << "granularity=" << (granularity == WeightGranularity::per_row ? "per_row" : "per_tensor") << '\n'
    << "full_precision=" << (full_precision ? 1 : 0) << '\n'
    << "seed=" << seed << '\n'
    << "ln_eps=" << format_double(ln_eps) << '\n';
  return o.str();
}

void ModelConfig::apply_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line without '=': '" + t + "'");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key == "layers") layers = parse_uint(key, value);
    else if (key == "hidden") hidden = parse_uint(key, value);
    else if (key == "heads") heads = parse_uint(key, value);
    else if (key == "ffn_dim") ffn_dim = parse_uint(key, value);
    else if (key == "max_seq") max_seq = parse_uint(key, value);
    else if (key == "vocab") vocab = parse_uint(key, value);
    else if (key == "segments") segments = parse_uint(key, value);
    else if (key == "variant") variant = parse_variant(value);
    else if (key == "rank") estimator_rank = parse_uint(key, value);
    else if (key == "granularity") {
      if (value == "per_row") granularity = WeightGranularity::per_row;
      else if (value == "per_tensor") granularity = WeightGranularity::per_tensor;
      else throw ConfigError("config key 'granularity': expected per_row or per_tensor, got '" + value + "'");
    } else if (key == "full_precision") full_precision = parse_uint(key, value) != 0;
    else if (key == "seed") seed = parse_uint(key, value);
    else if (key == "ln_eps") {
      try {
        ln_eps = std::stod(value);
      } catch (const std::exception&) {
        throw ConfigError("config key 'ln_eps': expected number, got '" + value + "'");
      }
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  c.apply_text(text);
  return c;
}

// ---------------------------------------------------------------------------
// Construction

namespace {

DenseMatrix normal_init(std::size_t rows, std::size_t cols, Rng& rng, double stddev) {
  DenseMatrix m(rows, cols);
  for (double& v : m.values()) v = stddev * standard_normal(rng);
  return m;
}

FullPrecisionHead make_head(ParameterSet& params, const std::string& prefix, std::size_t out, std::size_t in,
                            Rng& rng) {
  FullPrecisionHead h;
  h.weight = &params.add(prefix + ".weight", normal_init(out, in, rng, 0.02), /*decay=*/true);
  h.bias = &params.add(prefix + ".bias", DenseMatrix(1, out));
  return h;
}

void make_ln(ParameterSet& params, const std::string& prefix, std::size_t c, Parameter*& gamma, Parameter*& beta) {
  gamma = &params.add(prefix + ".gamma", DenseMatrix(1, c, 1.0));
  beta = &params.add(prefix + ".beta", DenseMatrix(1, c));
}

std::vector<std::size_t> iota_ids(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace

Model Model::build(const ModelConfig& config) {
  config.validate();
  Model m(config);
  Rng rng = substream(config.seed, "init");
  const std::size_t c = config.hidden;
  const bool bin = !config.full_precision;
  ParameterSet& p = m.params_;

  m.emb_.token = &p.add("emb.token", normal_init(config.vocab, c, rng, 0.02), true);
  m.emb_.position = &p.add("emb.position", normal_init(config.max_seq, c, rng, 0.02), true);
  m.emb_.segment = &p.add("emb.segment", normal_init(config.segments, c, rng, 0.02), true);
  make_ln(p, "emb.ln", c, m.emb_.ln_gamma, m.emb_.ln_beta);

  std::optional<std::size_t> rank;
  if (config.has_estimators()) rank = config.estimator_rank;
  m.blocks_.reserve(config.layers);
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l);
    EncoderBlock b;
    b.attn = AttentionLayerState::create(p, pre + ".attn", c, config.heads, rng, bin, config.granularity, rank);
    make_ln(p, pre + ".ln1", c, b.ln1_gamma, b.ln1_beta);
    b.ffn_in = BinaryLinear::create(p, pre + ".ffn_in", c, config.ffn_dim, rng, bin, config.granularity);
    b.ffn_out = BinaryLinear::create(p, pre + ".ffn_out", config.ffn_dim, c, rng, bin, config.granularity);
    make_ln(p, pre + ".ln2", c, b.ln2_gamma, b.ln2_beta);
    m.blocks_.push_back(std::move(b));
  }
  m.mlm_ = make_head(p, "mlm", config.vocab, c, rng);
  m.nsp_ = make_head(p, "nsp", 2, c, rng);
  m.init_estimators();
  return m;
}

void Model::init_estimators() {
  for (auto& b : blocks_) b.attn.init_estimators_from_weights();
}

Model Model::clone() const {
  Model m = build(config_);
  if (classifier_) m.ensure_classifier(classifier_->weight->value.rows());
  m.copy_parameters_from(*this);
  m.calibrated_ = calibrated_;
  return m;
}

std::size_t Model::copy_parameters_from(const Model& other) {
  std::size_t copied = 0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& dst = params_[i];
    const Parameter* src = other.params_.find(dst.name);
    if (!src || !src->value.same_shape(dst.value)) continue;
    dst.value = src->value;
    ++copied;
  }
  return copied;
}

FullPrecisionHead& Model::ensure_classifier(std::size_t classes) {
  if (classes < 2) throw ConfigError("classifier needs at least 2 classes");
  if (classifier_) {
    if (classifier_->weight->value.rows() != classes) {
      throw ConfigError("classifier already has " + std::to_string(classifier_->weight->value.rows()) +
                        " classes, requested " + std::to_string(classes));
    }
    return *classifier_;
  }
  Rng rng = substream(config_.seed, "classifier");
  classifier_ = make_head(params_, "cls", classes, config_.hidden, rng);
  return *classifier_;
}

Var Model::classify(Tape& tape, Var final_hidden) const {
  if (!classifier_) throw ContractError("classify: model has no classifier head");
  Var cls = ad::slice_rows(final_hidden, 0, 1);
  return ad::add_row(ad::matmul_nt(cls, tape.param(*classifier_->weight)), tape.param(*classifier_->bias));
}

bool Model::is_head(const Parameter& p) const {
  return p.name.starts_with("mlm.") || p.name.starts_with("nsp.") || p.name.starts_with("cls.");
}

std::size_t Model::backbone_parameter_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (!is_head(params_[i])) n += params_[i].value.size();
  return n;
}

void Model::freeze_body(bool frozen) {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (!is_head(params_[i])) params_[i].frozen = frozen;
}

// ---------------------------------------------------------------------------
// Forward passes

void Model::check_input(const SequenceInput& in) const {
  const std::size_t n = in.tokens.size();
  if (n == 0) throw DimensionError("forward: empty sequence");
  if (n > config_.max_seq) {
    throw DimensionError("forward: sequence length " + std::to_string(n) + " exceeds max_seq " +
                         std::to_string(config_.max_seq));
  }
  for (std::size_t t : in.tokens) {
    if (t >= config_.vocab) {
      throw IndexError("forward: token id " + std::to_string(t) + " >= vocab " + std::to_string(config_.vocab));
    }
  }
  if (!in.segments.empty()) {
    if (in.segments.size() != n) {
      throw DimensionError("forward: " + std::to_string(in.segments.size()) + " segment ids for " +
                           std::to_string(n) + " tokens");
    }
    for (std::size_t s : in.segments) {
      if (s >= config_.segments) throw IndexError("forward: segment id " + std::to_string(s) + " out of range");
    }
  }
}

namespace {

std::vector<std::size_t> segments_of(const SequenceInput& in) {
  return in.segments.empty() ? std::vector<std::size_t>(in.tokens.size(), 0) : in.segments;
}

Var head_forward(Tape& tape, Var x, const FullPrecisionHead& h) {
  return ad::add_row(ad::matmul_nt(x, tape.param(*h.weight)), tape.param(*h.bias));
}

DenseMatrix head_forward(const DenseMatrix& x, const FullPrecisionHead& h) {
  DenseMatrix out = matmul_nt(x, h.weight->value);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += h.bias->value[c];
  return out;
}

DenseMatrix ln_values(const DenseMatrix& x, const Parameter& g, const Parameter& b, double eps) {
  return layer_norm(x, g.value.values(), b.value.values(), eps).out;
}

DenseMatrix gather(const DenseMatrix& table, const std::vector<std::size_t>& ids) {
  DenseMatrix out(ids.size(), table.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    auto src = table.row(ids[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

}  // namespace

ForwardVars Model::forward(Tape& tape, const SequenceInput& in, Calibrator* calib) const {
  check_input(in);
  const std::size_t n = in.tokens.size();
  auto embed = [&](const Parameter& table, std::vector<std::size_t> ids) {
    Var rows = ad::gather_rows(tape.param(table), std::move(ids));
    return config_.full_precision ? rows : ad::binarize_weight(rows, WeightGranularity::per_row);
  };
  Var x = ad::add(ad::add(embed(*emb_.token, in.tokens), embed(*emb_.position, iota_ids(n))),
                  embed(*emb_.segment, segments_of(in)));
  x = ad::layer_norm(x, tape.param(*emb_.ln_gamma), tape.param(*emb_.ln_beta), config_.ln_eps);

  ForwardVars out;
  out.hiddens.push_back(x);
  for (const EncoderBlock& b : blocks_) {
    Var y = attention_forward(tape, x, b.attn, calib);
    Var h = ad::layer_norm(ad::add(x, y), tape.param(*b.ln1_gamma), tape.param(*b.ln1_beta), config_.ln_eps);
    Var f = b.ffn_out.forward(tape, ad::gelu(b.ffn_in.forward(tape, h, calib)), calib);
    x = ad::layer_norm(ad::add(h, f), tape.param(*b.ln2_gamma), tape.param(*b.ln2_beta), config_.ln_eps);
    out.hiddens.push_back(x);
  }
  out.mlm_logits = head_forward(tape, x, mlm_);
  out.nsp_logits = head_forward(tape, ad::slice_rows(x, 0, 1), nsp_);
  return out;
}

ForwardValues Model::forward_values(const SequenceInput& in) const {
  Tape tape;
  ForwardVars v = forward(tape, in);
  ForwardValues out;
  for (Var h : v.hiddens) out.hiddens.push_back(h.value());
  out.mlm_logits = v.mlm_logits.value();
  out.nsp_logits = v.nsp_logits.value();
  return out;
}

ForwardValues Model::forward_packed(const SequenceInput& in) const {
  check_input(in);
  const std::size_t n = in.tokens.size();
  auto embed = [&](const Parameter& table, const std::vector<std::size_t>& ids) {
    DenseMatrix rows = gather(table.value, ids);
    return config_.full_precision ? rows : binarize_weight(rows, WeightGranularity::per_row).simulated;
  };
  DenseMatrix x = embed(*emb_.token, in.tokens);
  x += embed(*emb_.position, iota_ids(n));
  x += embed(*emb_.segment, segments_of(in));
  x = ln_values(x, *emb_.ln_gamma, *emb_.ln_beta, config_.ln_eps);

  ForwardValues out;
  out.hiddens.push_back(x);
  for (const EncoderBlock& b : blocks_) {
    DenseMatrix h = x + attention_forward_packed(x, b.attn);
    h = ln_values(h, *b.ln1_gamma, *b.ln1_beta, config_.ln_eps);
    DenseMatrix f = b.ffn_out.forward_packed(gelu(b.ffn_in.forward_packed(h)));
    x = ln_values(h + f, *b.ln2_gamma, *b.ln2_beta, config_.ln_eps);
    out.hiddens.push_back(x);
  }
  out.mlm_logits = head_forward(x, mlm_);
  DenseMatrix cls(1, x.cols());
  std::copy(x.row(0).begin(), x.row(0).end(), cls.row(0).begin());
  out.nsp_logits = head_forward(cls, nsp_);
  return out;
}

DenseMatrix Model::encode(const SequenceInput& in) const { return forward_values(in).hiddens.back(); }

void Model::calibrate(std::span<const SequenceInput> batch) {
  Calibrator calib;
  for (const SequenceInput& in : batch) {
    Tape tape;
    forward(tape, in, &calib);
  }
  calib.finalize();
  calibrated_ = true;
}

}  // namespace bitformer
