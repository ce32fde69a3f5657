#include <doctest.h>

#include <cmath>
#include <sstream>

#include "bitformer/errors.hpp"
#include "bitformer/pretrain.hpp"

using namespace bitformer;

namespace {

const char* kTwoDocs =
    "the cat sat on the mat\n"
    "the mat was red\n"
    "\n"
    "a dog ran far\n"
    "the dog slept\n"
    "then it woke\n";

ModelConfig small_model(std::size_t vocab) {
  ModelConfig c = ModelConfig::tiny();
  c.vocab = vocab;
  c.hidden = 16;
  c.heads = 2;
  c.ffn_dim = 32;
  c.max_seq = 32;
  return c;
}

ToyCorpusOptions small_toy() {
  ToyCorpusOptions o;
  o.documents = 40;
  return o;
}

}  // namespace

TEST_CASE("tokenizer") {
  const Tokenizer t = Tokenizer::build({"b a a", "c B"}, 100);
  REQUIRE(t.size() == kNumSpecials + 3);
  CHECK(t.words()[kClsId] == "[CLS]");
  CHECK(t.words()[kMaskId] == "[MASK]");
  // a (2), b (2) tie → alphabetical, then c
  CHECK(t.id("a") == 5);
  CHECK(t.id("b") == 6);
  CHECK(t.id("c") == 7);
  CHECK(t.id("zebra") == kUnkId);
  CHECK(t.encode("C  a unknown") == std::vector<std::size_t>{7, 5, kUnkId});
  CHECK(Tokenizer::build({"b a a", "c B"}, 6).size() == 6);
  CHECK(Tokenizer::from_words(t.words()).encode("a b c") == t.encode("a b c"));
}

TEST_CASE("corpus parsing") {
  const auto docs = split_documents(kTwoDocs);
  REQUIRE(docs.size() == 2);
  CHECK(docs[0].size() == 2);
  CHECK(docs[1].size() == 3);
  const Corpus c = build_corpus(kTwoDocs);
  CHECK(c.documents.size() == 2);
  CHECK(c.documents[1].sentences[1] == c.tokenizer.encode("the dog slept"));
}

TEST_CASE("toy corpus is deterministic and well formed") {
  const auto o = small_toy();
  const std::string a = make_toy_corpus(o);
  CHECK(a == make_toy_corpus(o));
  const Corpus c = build_corpus(a);
  CHECK(c.documents.size() == 40);
  for (const auto& d : c.documents) {
    CHECK(d.sentences.size() >= o.min_sentences);
    CHECK(d.sentences.size() <= o.max_sentences);
  }
  std::istringstream task(make_toy_classification(o, 20, 3));
  std::size_t lines = 0;
  for (std::string line; std::getline(task, line); ++lines) CHECK((line.rfind("0\t", 0) == 0 || line.rfind("1\t", 0) == 0));
  CHECK(lines == 20);
}

TEST_CASE("masking statistics") {
  Rng rng = substream(1, "mask-test");
  TokenBatch batch;
  std::size_t tokens = 0;
  while (tokens < 200000) {
    Example ex;
    ex.input.tokens.push_back(kClsId);
    for (int i = 0; i < 62; ++i) ex.input.tokens.push_back(kNumSpecials + uniform_index(rng, 995));
    ex.input.tokens.push_back(kSepId);
    tokens += 62;
    batch.examples.push_back(std::move(ex));
  }
  Rng mask_rng = substream(2, "mask-test");
  const MaskingReport r = mask_tokens(batch, 1000, mask_rng);
  CHECK(r.maskable == tokens);
  const double sel = static_cast<double>(r.selected) / static_cast<double>(r.maskable);
  CHECK(std::abs(sel - 0.15) <= 0.005);
  const double s = static_cast<double>(r.selected);
  CHECK(std::abs(r.to_mask / s - 0.8) <= 0.01);
  CHECK(std::abs(r.kept / s - 0.1) <= 0.01);
  CHECK(std::abs(r.randomized / s - 0.1) <= 0.01);
  CHECK(r.to_mask + r.kept + r.randomized == r.selected);

  for (const auto& ex : batch.examples) {
    CHECK(ex.mlm_labels.front() == kIgnoreLabel);
    CHECK(ex.mlm_labels.back() == kIgnoreLabel);
    for (std::size_t t : ex.input.tokens) CHECK(t < 1000);
  }
}

TEST_CASE("masking edge cases") {
  TokenBatch only_specials;
  only_specials.examples.push_back(Example{{{kClsId, kSepId, kSepId}, {}}, {}, 0, false});
  Rng rng = substream(3, "mask-test");
  const auto r = mask_tokens(only_specials, 100, rng);
  CHECK(r.skipped == 1);
  CHECK(r.warnings.size() == 1);
  CHECK(only_specials.examples[0].skipped);
  for (std::size_t l : only_specials.examples[0].mlm_labels) CHECK(l == kIgnoreLabel);

  TokenBatch a, b;
  for (int i = 0; i < 20; ++i) {
    Example ex;
    ex.input.tokens = {kClsId, 7, 8, 9, 10, 11, 12, kSepId};
    a.examples.push_back(ex);
    b.examples.push_back(ex);
  }
  Rng r1 = substream(4, "m"), r2 = substream(4, "m");
  mask_tokens(a, 100, r1);
  mask_tokens(b, 100, r2);
  for (std::size_t i = 0; i < a.examples.size(); ++i) {
    CHECK(a.examples[i].input.tokens == b.examples[i].input.tokens);
    CHECK(a.examples[i].mlm_labels == b.examples[i].mlm_labels);
  }
}

TEST_CASE("NSP pairs") {
  const Corpus c = build_corpus(kTwoDocs);
  Rng rng = substream(5, "nsp");
  const auto pairs = make_nsp_pairs(c, rng, 1000);
  std::size_t pos = 0;
  for (const auto& p : pairs) pos += p.label;
  CHECK(std::abs(static_cast<double>(pos) / 1000 - 0.5) <= 0.03);

  // A positive from the two-sentence document is exactly (s1, s2).
  const auto& d0 = c.documents[0].sentences;
  for (const auto& p : pairs)
    if (p.label == 1 && p.a == d0[0]) CHECK(p.b == d0[1]);

  Corpus single;
  single.documents.push_back(c.documents[0]);
  single.tokenizer = c.tokenizer;
  CHECK_THROWS_AS(NspSampler(single, Rng(1)), ConfigError);
}

TEST_CASE("pair framing") {
  const Example ex = frame_pair(SentencePair{{10, 11, 12, 13, 14}, {20, 21}, 1}, 8);
  CHECK(ex.input.tokens == std::vector<std::size_t>{kClsId, 10, 11, 12, kSepId, 20, 21, kSepId});
  CHECK(ex.input.segments == std::vector<std::size_t>{0, 0, 0, 0, 0, 1, 1, 1});
  CHECK(ex.nsp_label == 1);
  CHECK(frame_single({9, 9, 9}, 4).input.tokens == std::vector<std::size_t>{kClsId, 9, 9, kSepId});
}

TEST_CASE("distillation losses") {
  Rng rng = substream(6, "distill");
  DenseMatrix logits(3, 5), h0(3, 4), h1(3, 4);
  for (auto* m : {&logits, &h0, &h1})
    for (double& v : m->values()) v = standard_normal(rng);
  const DistillTargets same{logits, {h0, h1}};
  const auto zero = distill_losses(logits, {h0, h1}, same);
  CHECK(zero.logit == 0.0);
  CHECK(zero.rep == 0.0);

  DenseMatrix shifted = h1;
  for (double& v : shifted.values()) v += 0.3;
  // one of two layers off by c: mean over layers of c² and 0
  CHECK(distill_losses(logits, {h0, shifted}, same).rep == doctest::Approx(0.09 / 2).epsilon(1e-14));

  DenseMatrix student(3, 5);
  for (double& v : student.values()) v = standard_normal(rng);
  const double temp = 2.0;
  long double kl = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    long double zt = 0, zs = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      zt += std::exp(static_cast<long double>(logits(i, j)) / temp);
      zs += std::exp(static_cast<long double>(student(i, j)) / temp);
    }
    for (std::size_t j = 0; j < 5; ++j) {
      const long double pt = std::exp(static_cast<long double>(logits(i, j)) / temp) / zt;
      const long double ps = std::exp(static_cast<long double>(student(i, j)) / temp) / zs;
      kl += pt * std::log(pt / ps);
    }
  }
  CHECK(std::abs(distill_losses(student, {h0, h1}, same, temp).logit - static_cast<double>(kl / 3)) <= 1e-10);
  CHECK_THROWS_AS(distill_losses(student, {h0}, same), ContractError);
}

TEST_CASE("total loss") {
  CHECK(total_loss(LossTerms{}, true) == 0.0);
  CHECK(total_loss(LossTerms{0.5, 0.2, 0.1, 0.3}, true) == doctest::Approx(1.1).epsilon(1e-15));
  CHECK(total_loss(LossTerms{0.5, 0.2, 0.1, 0.3}, false) == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("pretraining loop") {
  const Corpus corpus = build_corpus(make_toy_corpus(small_toy()));
  ModelConfig cfg = small_model(corpus.tokenizer.size());
  PretrainOptions o;
  o.steps = 6;
  o.batch_size = 4;
  o.peak_lr = 1e-3;

  SUBCASE("zero steps leave the model untouched") {
    Model m = Model::build(cfg);
    const Model before = m.clone();
    o.steps = 0;
    CHECK(pretrain_loop(m, corpus, nullptr, o).log.empty());
    for (std::size_t i = 0; i < m.params().size(); ++i) CHECK(m.params()[i].value == before.params()[i].value);
  }
  SUBCASE("same seed, same log and parameters") {
    Model a = Model::build(cfg), b = Model::build(cfg);
    std::ostringstream la, lb;
    o.metrics_log = &la;
    pretrain_loop(a, corpus, nullptr, o);
    o.metrics_log = &lb;
    pretrain_loop(b, corpus, nullptr, o);
    CHECK(la.str() == lb.str());
    for (std::size_t i = 0; i < a.params().size(); ++i) CHECK(a.params()[i].value == b.params()[i].value);
    std::istringstream in(la.str());
    std::string header;
    std::getline(in, header);
    CHECK(header == "step\tloss_mlm\tloss_nsp\tloss_rep\tloss_logit\tlr\tmasked_acc");
  }
  SUBCASE("distillation from a cloned teacher starts at zero") {
    ModelConfig fp = cfg;
    fp.full_precision = true;
    const Model teacher = Model::build(fp);
    Model student = teacher.clone();
    o.steps = 1;
    const auto r = pretrain_loop(student, corpus, &teacher, o);
    CHECK(r.log.front().loss.logit == 0.0);
    CHECK(r.log.front().loss.rep == 0.0);
  }
  SUBCASE("a non-finite parameter aborts with its name") {
    Model m = Model::build(cfg);
    m.params().at("layer1.ffn_in.weight").value[3] = std::nan("");
    CHECK(first_non_finite_parameter(m.params()) == std::optional<std::string>("layer1.ffn_in.weight"));
    try {
      pretrain_loop(m, corpus, nullptr, o);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
    }
  }
}

TEST_CASE("labeled data and finetuning") {
  const auto toy = small_toy();
  const Corpus corpus = build_corpus(make_toy_corpus(toy));
  ModelConfig cfg = small_model(corpus.tokenizer.size());

  CHECK_THROWS_AS(parse_labeled("2\tword\n", corpus.tokenizer, 32, 2), DataError);
  CHECK_THROWS_AS(parse_labeled("x\tword\n", corpus.tokenizer, 32, 2), DataError);
  CHECK_THROWS_AS(parse_labeled("1 word\n", corpus.tokenizer, 32, 2), DataError);
  const auto pair = parse_labeled("1\ta b\tc\n\n", corpus.tokenizer, 32, 2);
  REQUIRE(pair.examples.size() == 1);
  CHECK(pair.examples[0].input.segments.back() == 1);

  const LabeledDataset data = parse_labeled(make_toy_classification(toy, 200, 4), corpus.tokenizer, 32, 2);
  CHECK(data.examples.size() == 200);

  SUBCASE("zero epochs: untrained head is near chance") {
    Model m = Model::build(cfg);
    FinetuneOptions fo;
    fo.epochs = 0;
    const auto r = finetune(m, data, data, fo);
    CHECK(r.epoch_loss.empty());
    CHECK(std::abs(r.eval_accuracy - 0.5) <= 0.1 + 1e-12);
  }
  SUBCASE("frozen body leaves the encoder unchanged") {
    Model m = Model::build(cfg);
    m.calibrate(std::vector<SequenceInput>{data.examples[0].input});
    const DenseMatrix before = m.params().at("layer0.ffn_in.weight").value;
    FinetuneOptions fo;
    fo.epochs = 1;
    fo.lr = 1e-3;
    fo.freeze_body = true;
    finetune(m, data, data, fo);
    CHECK(m.params().at("layer0.ffn_in.weight").value == before);
    CHECK_FALSE(m.params().at("layer0.ffn_in.weight").frozen);
  }
}
