#include <doctest.h>

#include <cmath>

#include "bitformer/accounting.hpp"
#include "bitformer/errors.hpp"
#include "bitformer/model.hpp"
#include "bitformer/verify.hpp"

using namespace bitformer;

namespace {

ModelConfig small(Variant v = Variant::bipft_a) {
  ModelConfig c = ModelConfig::tiny();
  c.vocab = 1000;
  c.variant = v;
  return c;
}

SequenceInput seq(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng = substream(seed, "seq");
  SequenceInput in;
  for (std::size_t i = 0; i < n; ++i) in.tokens.push_back(5 + uniform_index(rng, vocab - 5));
  in.segments.assign(n, 0);
  for (std::size_t i = n / 2; i < n; ++i) in.segments[i] = 1;
  return in;
}

}  // namespace

TEST_CASE("tiny model builds and runs a forward pass") {
  const Model m = Model::build(small());
  const auto out = m.forward_values(seq(16, 1000, 1));
  CHECK(out.hiddens.size() == 3);
  CHECK(out.hiddens.back().rows() == 16);
  CHECK(out.hiddens.back().cols() == 64);
  CHECK(out.mlm_logits.rows() == 16);
  CHECK(out.mlm_logits.cols() == 1000);
  CHECK(out.nsp_logits.rows() == 1);
  CHECK(out.nsp_logits.cols() == 2);
  CHECK(out.mlm_logits.all_finite());
}

TEST_CASE("parameter count") {
  // The closed form agrees with a built model...
  for (Variant v : {Variant::bipft_a, Variant::bipft_b}) {
    const ModelConfig c = small(v);
    CHECK(Model::build(c).backbone_parameter_count() == backbone_parameter_count(c));
  }
  // ...and puts the base config at 110M within 2%.
  const double n = static_cast<double>(backbone_parameter_count(ModelConfig::base()));
  CHECK(std::abs(n - 110e6) / 110e6 <= 0.02);
}

TEST_CASE("deterministic build") {
  const Model a = Model::build(small(Variant::bipft_b));
  const Model b = Model::build(small(Variant::bipft_b));
  REQUIRE(a.params().size() == b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CHECK(a.params()[i].name == b.params()[i].name);
    CHECK(a.params()[i].value == b.params()[i].value);
  }
  ModelConfig other = small(Variant::bipft_b);
  other.seed = 2;
  CHECK(Model::build(other).params().at("emb.token").value != a.params().find("emb.token")->value);
}

TEST_CASE("variants differ only where they should") {
  const Model a = Model::build(small(Variant::bipft_a));
  const Model b = Model::build(small(Variant::bipft_b));
  CHECK(a.params().find("layer0.attn.est.w_q") == nullptr);
  CHECK(b.params().find("layer0.attn.est.w_q") != nullptr);
  ModelConfig fp = small();
  fp.full_precision = true;
  const Model t = Model::build(fp);
  CHECK(t.params().find("layer0.attn.head0.q_bin.alpha") == nullptr);
}

TEST_CASE("invalid config lists every violation") {
  ModelConfig c = small();
  c.hidden = 30;
  c.heads = 4;
  c.vocab = 3;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("divisible") != std::string::npos);
    CHECK(msg.find("vocab") != std::string::npos);
  }
  CHECK(c.violations().size() == 2);
  CHECK_THROWS_AS(Model::build(c), ConfigError);
}

TEST_CASE("config text round trip") {
  ModelConfig c = ModelConfig::base();
  c.variant = Variant::bipft_b;
  c.estimator_rank = 3;
  c.ln_eps = 1e-7;
  CHECK(ModelConfig::from_text(c.to_text()) == c);
  CHECK(parse_variant("bipft-b") == Variant::bipft_b);
  CHECK(parse_variant("baseline") == Variant::baseline);
  CHECK_THROWS_AS(parse_variant("bipft-c"), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_text("layers=two\n"), ConfigError);
  CHECK_THROWS_AS(ModelConfig::resolve("/nonexistent/config.txt"), ConfigError);
}

TEST_CASE("input contract") {
  const Model m = Model::build(small());
  SequenceInput bad = seq(4, 1000, 2);
  bad.tokens[1] = 1000;
  CHECK_THROWS_AS(m.forward_values(bad), IndexError);
  CHECK_THROWS_AS(m.forward_values(SequenceInput{}), DimensionError);
  CHECK_THROWS_AS(m.forward_values(seq(65, 1000, 2)), DimensionError);
  SequenceInput mism = seq(4, 1000, 2);
  mism.segments.pop_back();
  CHECK_THROWS_AS(m.forward_values(mism), DimensionError);
}

TEST_CASE("tape and value forwards agree exactly") {
  Model m = Model::build(small(Variant::bipft_b));
  const auto in = seq(12, 1000, 3);
  m.calibrate(std::vector<SequenceInput>{in});
  Tape t;
  const auto v = m.forward(t, in);
  const auto w = m.forward_values(in);
  CHECK(v.mlm_logits.value() == w.mlm_logits);
  CHECK(v.nsp_logits.value() == w.nsp_logits);
  CHECK(m.encode(in) == w.hiddens.back());
}

TEST_CASE("packed and simulated forwards agree") {
  const auto r = verify_train_eval(2, 5, 1e-8);
  INFO(r.detail);
  CHECK(r.passed);
}

TEST_CASE("clone, copy and freeze") {
  Model a = Model::build(small());
  Model b = a.clone();
  const auto in = seq(8, 1000, 4);
  CHECK(a.forward_values(in).mlm_logits == b.forward_values(in).mlm_logits);

  ModelConfig other = small();
  other.seed = 9;
  Model c = Model::build(other);
  CHECK(c.copy_parameters_from(a) == a.params().size());
  CHECK(c.forward_values(in).mlm_logits == a.forward_values(in).mlm_logits);

  a.ensure_classifier(3);
  REQUIRE(a.classifier());
  CHECK(a.classifier()->weight->value.rows() == 3);
  a.freeze_body(true);
  CHECK(a.params().at("emb.token").frozen);
  CHECK_FALSE(a.params().at("cls.weight").frozen);
  CHECK_FALSE(a.params().at("mlm.weight").frozen);
}
