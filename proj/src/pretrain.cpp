// SPDX-License-Identifier: Apache-2.0
#include "bitformer/pretrain.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "bitformer/errors.hpp"
#include "bitformer/numerics.hpp"
#include "bitformer/optim.hpp"
#include "bitformer/parallel.hpp"

namespace bitformer {

// ---------------------------------------------------------------------------
// Tokenizer & corpus

namespace {

const std::vector<std::string>& specials() {
  static const std::vector<std::string> s{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  return s;
}

std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

}  // namespace

Tokenizer Tokenizer::from_words(std::vector<std::string> words) {
  if (words.size() < kNumSpecials || !std::equal(specials().begin(), specials().end(), words.begin())) {
    throw DataError("tokenizer vocabulary must start with [PAD] [UNK] [CLS] [SEP] [MASK]");
  }
  Tokenizer t;
  t.words_ = std::move(words);
  for (std::size_t i = 0; i < t.words_.size(); ++i) {
    if (!t.ids_.emplace(t.words_[i], i).second) throw DataError("duplicate vocabulary entry '" + t.words_[i] + "'");
  }
  return t;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& sentences, std::size_t max_vocab) {
  if (max_vocab < kNumSpecials) throw ConfigError("max_vocab must leave room for the 5 specials");
  std::map<std::string, std::size_t> freq;
  for (const auto& s : sentences)
    for (auto& w : split_words(s)) ++freq[w];
  // Words are lowercased, so the upper-case specials cannot collide.
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words = specials();
  for (const auto& [w, n] : ranked) {
    if (words.size() >= max_vocab) break;
    words.push_back(w);
  }
  return from_words(std::move(words));
}

std::size_t Tokenizer::id(std::string_view word) const {
  const auto it = ids_.find(std::string(word));
  return it == ids_.end() ? kUnkId : it->second;
}

std::vector<std::size_t> Tokenizer::encode(std::string_view sentence) const {
  std::vector<std::size_t> ids;
  for (const auto& w : split_words(sentence)) ids.push_back(id(w));
  return ids;
}

std::vector<std::vector<std::string>> split_documents(const std::string& text) {
  std::vector<std::vector<std::string>> docs(1);
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (split_words(line).empty()) {
      if (!docs.back().empty()) docs.emplace_back();
      continue;
    }
    docs.back().push_back(line);
  }
  if (docs.back().empty()) docs.pop_back();
  return docs;
}

Corpus build_corpus(const std::string& text, const Tokenizer& tokenizer) {
  Corpus c;
  c.tokenizer = tokenizer;
  for (const auto& doc : split_documents(text)) {
    Document d;
    for (const auto& s : doc) d.sentences.push_back(tokenizer.encode(s));
    c.documents.push_back(std::move(d));
  }
  return c;
}

Corpus build_corpus(const std::string& text, std::size_t max_vocab) {
  std::vector<std::string> all;
  for (auto& doc : split_documents(text))
    for (auto& s : doc) all.push_back(std::move(s));
  return build_corpus(text, Tokenizer::build(all, max_vocab));
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Toy data

namespace {

constexpr const char* kSyllables[] = {"ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "pe", "su",
                                      "bo", "da", "fe", "gu", "hi", "jo", "ki", "ma", "no", "po"};
constexpr std::size_t kSyllableCount = std::size(kSyllables);
constexpr std::size_t kNounsPerTopic = 12;
constexpr std::size_t kVerbsPerTopic = 6;
constexpr std::size_t kAdjectivesPerTopic = 6;

std::string topic_word(std::size_t topic, std::size_t k, char kind) {
  return std::string(kSyllables[topic % kSyllableCount]) + kSyllables[k % kSyllableCount] +
         kSyllables[(topic / kSyllableCount + 3 * k + 7) % kSyllableCount] + kind;
}

struct ToyGrammar {
  Rng& rng;

  std::string noun(std::size_t t) { return topic_word(t, uniform_index(rng, kNounsPerTopic), 'n'); }
  std::string verb(std::size_t t) { return topic_word(t, uniform_index(rng, kVerbsPerTopic), 's'); }
  std::string adj(std::size_t t) { return topic_word(t, uniform_index(rng, kAdjectivesPerTopic), 'y'); }

  // Returns the sentence; `object` is updated to the sentence's object noun.
  std::string sentence(std::size_t t, std::string& object) {
    const std::string subject = object.empty() ? noun(t) : object;
    object = noun(t);
    // Draw every word before concatenating: operand evaluation order of a
    // chained + is unspecified, and the stream must be consumed in one order.
    const std::size_t form = uniform_index(rng, 3);
    const std::string v = verb(t);
    const std::string a = adj(t);
    switch (form) {
      case 0: return "the " + subject + " " + v + " the " + a + " " + object;
      case 1: return "a " + a + " " + subject + " often " + v + " a " + object;
      default: {
        const std::string other = noun(t);
        return "the " + subject + " and the " + other + " " + v + " the very " + a + " " + object;
      }
    }
  }
};

void check_toy(const ToyCorpusOptions& o) {
  if (o.topics < 2 || o.topics > kSyllableCount) throw ConfigError("toy corpus: topics must be in [2, 20]");
  if (o.documents < 2) throw ConfigError("toy corpus: at least 2 documents");
  if (o.min_sentences < 1 || o.max_sentences < o.min_sentences) throw ConfigError("toy corpus: bad sentence range");
}

}  // namespace

std::string make_toy_corpus(const ToyCorpusOptions& opts) {
  check_toy(opts);
  Rng rng = substream(opts.seed, "toy-corpus");
  ToyGrammar g{rng};
  std::ostringstream out;
  for (std::size_t d = 0; d < opts.documents; ++d) {
    if (d) out << '\n';
    const std::size_t topic = uniform_index(rng, opts.topics);
    const std::size_t n = opts.min_sentences + uniform_index(rng, opts.max_sentences - opts.min_sentences + 1);
    std::string object;
    for (std::size_t s = 0; s < n; ++s) out << g.sentence(topic, object) << '\n';
  }
  return out.str();
}

std::string make_toy_classification(const ToyCorpusOptions& opts, std::size_t examples, std::uint64_t seed) {
  check_toy(opts);
  Rng rng = substream(seed, "toy-task");
  ToyGrammar g{rng};
  std::ostringstream out;
  for (std::size_t i = 0; i < examples; ++i) {
    const std::size_t topic = uniform_index(rng, opts.topics);
    std::string object;
    out << (topic % 2) << '\t' << g.sentence(topic, object) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Masking & pairs

MaskingReport mask_tokens(TokenBatch& batch, std::size_t vocab, Rng& rng) {
  if (vocab <= kNumSpecials) throw ConfigError("mask_tokens: vocabulary has no non-special tokens");
  MaskingReport rep;
  for (std::size_t e = 0; e < batch.examples.size(); ++e) {
    Example& ex = batch.examples[e];
    auto& tokens = ex.input.tokens;
    ex.mlm_labels.assign(tokens.size(), kIgnoreLabel);
    std::size_t maskable = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const std::size_t t = tokens[i];
      if (t == kClsId || t == kSepId || t == kPadId) continue;
      ++maskable;
      if (uniform01(rng) >= kMaskSelectProb) continue;
      ++rep.selected;
      ex.mlm_labels[i] = t;
      const double u = uniform01(rng);
      if (u < 0.8) {
        tokens[i] = kMaskId;
        ++rep.to_mask;
      } else if (u < 0.9) {
        ++rep.kept;
      } else {
        tokens[i] = kNumSpecials + uniform_index(rng, vocab - kNumSpecials);
        ++rep.randomized;
      }
    }
    rep.maskable += maskable;
    ex.skipped = maskable == 0;
    if (ex.skipped) {
      ++rep.skipped;
      rep.warnings.push_back("example " + std::to_string(e) + " has no maskable token; skipped");
    }
  }
  return rep;
}

NspSampler::NspSampler(const Corpus& corpus, Rng rng) : corpus_(&corpus), rng_(rng) {
  if (corpus.documents.size() < 2) throw ConfigError("NSP needs at least 2 documents for negative pairs");
  for (std::size_t d = 0; d < corpus.documents.size(); ++d) {
    if (corpus.documents[d].sentences.empty()) throw DataError("document " + std::to_string(d) + " is empty");
    if (corpus.documents[d].sentences.size() >= 2) multi_sentence_docs_.push_back(d);
  }
  if (multi_sentence_docs_.empty()) throw ConfigError("NSP needs a document with at least 2 sentences");
}

SentencePair NspSampler::next() {
  const auto& docs = corpus_->documents;
  SentencePair p;
  if (uniform01(rng_) < 0.5) {
    const auto& doc = docs[multi_sentence_docs_[uniform_index(rng_, multi_sentence_docs_.size())]];
    const std::size_t i = uniform_index(rng_, doc.sentences.size() - 1);
    p.a = doc.sentences[i];
    p.b = doc.sentences[i + 1];
    p.label = 1;
  } else {
    const std::size_t d1 = uniform_index(rng_, docs.size());
    std::size_t d2 = uniform_index(rng_, docs.size() - 1);
    if (d2 >= d1) ++d2;
    p.a = docs[d1].sentences[uniform_index(rng_, docs[d1].sentences.size())];
    p.b = docs[d2].sentences[uniform_index(rng_, docs[d2].sentences.size())];
    p.label = 0;
  }
  return p;
}

std::vector<SentencePair> make_nsp_pairs(const Corpus& corpus, Rng& rng, std::size_t count) {
  NspSampler s(corpus, Rng(rng()));
  std::vector<SentencePair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(s.next());
  return out;
}

Example frame_pair(const SentencePair& pair, std::size_t max_seq) {
  if (max_seq < 3) throw ConfigError("frame_pair: max_seq must be at least 3");
  Sentence a = pair.a, b = pair.b;
  while (a.size() + b.size() + 3 > max_seq) {
    if (a.size() >= b.size()) a.pop_back();
    else b.pop_back();
  }
  Example ex;
  auto& t = ex.input.tokens;
  auto& s = ex.input.segments;
  t.push_back(kClsId);
  t.insert(t.end(), a.begin(), a.end());
  t.push_back(kSepId);
  s.assign(t.size(), 0);
  t.insert(t.end(), b.begin(), b.end());
  t.push_back(kSepId);
  s.resize(t.size(), 1);
  ex.mlm_labels.assign(t.size(), kIgnoreLabel);
  ex.nsp_label = pair.label;
  return ex;
}

Example frame_single(const Sentence& sentence, std::size_t max_seq) {
  if (max_seq < 2) throw ConfigError("frame_single: max_seq must be at least 2");
  Example ex;
  auto& t = ex.input.tokens;
  t.push_back(kClsId);
  t.insert(t.end(), sentence.begin(), sentence.begin() + std::min(sentence.size(), max_seq - 2));
  t.push_back(kSepId);
  ex.input.segments.assign(t.size(), 0);
  ex.mlm_labels.assign(t.size(), kIgnoreLabel);
  return ex;
}

// ---------------------------------------------------------------------------
// Losses

namespace {

void check_distill_shapes(std::size_t student_layers, const DistillTargets& t) {
  if (student_layers != t.hiddens.size()) {
    throw ContractError("distillation: student has " + std::to_string(student_layers) + " hidden states, teacher " +
                        std::to_string(t.hiddens.size()));
  }
}

}  // namespace

DistillLosses distill_losses(const DenseMatrix& student_logits, const std::vector<DenseMatrix>& student_hiddens,
                             const DistillTargets& targets, double temperature) {
  check_distill_shapes(student_hiddens.size(), targets);
  Tape tape;
  std::vector<Var> hs;
  for (const auto& h : student_hiddens) hs.push_back(tape.constant(h));
  DistillVars v = distill_losses(hs, tape.constant(student_logits), targets, temperature);
  return DistillLosses{v.logit.value()[0], v.rep.value()[0]};
}

DistillVars distill_losses(const std::vector<Var>& student_hiddens, Var student_logits,
                           const DistillTargets& targets, double temperature) {
  check_distill_shapes(student_hiddens.size(), targets);
  Tape& tape = *student_logits.tape;
  DistillVars out;
  out.logit = ad::kl_divergence(student_logits, targets.logits, temperature);
  if (student_hiddens.empty()) {
    out.rep = tape.constant(DenseMatrix::scalar(0.0));
    return out;
  }
  Var rep = ad::mse(student_hiddens[0], targets.hiddens[0]);
  for (std::size_t i = 1; i < student_hiddens.size(); ++i) {
    rep = ad::add(rep, ad::mse(student_hiddens[i], targets.hiddens[i]));
  }
  out.rep = ad::scale(rep, 1.0 / static_cast<double>(student_hiddens.size()));
  return out;
}

double total_loss(const LossTerms& t, bool distill) {
  double total = t.mlm + t.nsp;
  if (distill) total += t.rep + t.logit;
  return total;
}

// ---------------------------------------------------------------------------
// Training

void write_metrics_header(std::ostream& out) {
  out << "step\tloss_mlm\tloss_nsp\tloss_rep\tloss_logit\tlr\tmasked_acc\n";
}

void write_metrics_line(std::ostream& out, const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.6f\n", m.step, m.loss.mlm, m.loss.nsp,
                m.loss.rep, m.loss.logit, m.lr, m.masked_acc);
  out << buf;
}

std::optional<std::string> first_non_finite_parameter(const ParameterSet& params) {
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!params[i].value.all_finite()) return params[i].name;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!params[i].grad.empty() && !params[i].grad.all_finite()) return params[i].name + " (gradient)";
  return std::nullopt;
}

namespace {

struct SequenceOutcome {
  GradientBuffer grads;
  double mlm_sum = 0;  // summed CE over masked positions
  std::size_t masked = 0;
  std::size_t correct = 0;
  double nsp = 0;
  double rep = 0;
  double logit = 0;
  std::size_t positions = 0;
  std::optional<std::string> bad_tensor;
};

std::vector<std::size_t> masked_targets(const Example& ex, std::size_t& count) {
  count = 0;
  for (std::size_t l : ex.mlm_labels) count += (l != kIgnoreLabel);
  return ex.mlm_labels;
}

// First non-finite tensor among the forward outputs, in computation order.
std::optional<std::string> first_non_finite(const ForwardVars& f) {
  for (std::size_t i = 0; i < f.hiddens.size(); ++i) {
    if (!f.hiddens[i].value().all_finite()) {
      return i == 0 ? std::string("embedding output") : "hidden state of layer " + std::to_string(i - 1);
    }
  }
  if (!f.mlm_logits.value().all_finite()) return std::string("MLM logits");
  if (!f.nsp_logits.value().all_finite()) return std::string("NSP logits");
  return std::nullopt;
}

TokenBatch next_batch(NspSampler& sampler, std::size_t batch_size, std::size_t max_seq) {
  TokenBatch b;
  b.examples.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) b.examples.push_back(frame_pair(sampler.next(), max_seq));
  return b;
}

std::vector<SequenceInput> inputs_of(const TokenBatch& b) {
  std::vector<SequenceInput> in;
  for (const auto& e : b.examples) in.push_back(e.input);
  return in;
}

}  // namespace

PretrainResult pretrain_loop(Model& model, const Corpus& corpus, const Model* teacher, const PretrainOptions& opts) {
  const ModelConfig& cfg = model.config();
  if (corpus.tokenizer.size() > cfg.vocab) {
    throw ConfigError("tokenizer has " + std::to_string(corpus.tokenizer.size()) + " entries, model vocab " +
                      std::to_string(cfg.vocab));
  }
  if (opts.batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(opts.warmup_frac >= 0.0 && opts.warmup_frac <= 1.0)) throw ConfigError("warmup fraction must be in [0, 1]");
  if (teacher) {
    const ModelConfig& tc = teacher->config();
    if (tc.layers != cfg.layers || tc.hidden != cfg.hidden || tc.vocab != cfg.vocab) {
      throw ContractError("teacher must match the student's layers, hidden size and vocab");
    }
  }
  PretrainResult result;
  if (opts.metrics_log) write_metrics_header(*opts.metrics_log);
  if (opts.steps == 0) return result;

  NspSampler sampler(corpus, substream(opts.seed, "nsp"));
  Rng mask_rng = substream(opts.seed, "mask");
  AdamWOptions adam;
  adam.weight_decay = opts.weight_decay;
  AdamW optim(adam);
  const auto warmup = static_cast<std::size_t>(std::llround(opts.warmup_frac * static_cast<double>(opts.steps)));
  ParameterSet& params = model.params();

  for (std::size_t step = 1; step <= opts.steps; ++step) {
    TokenBatch batch = next_batch(sampler, opts.batch_size, cfg.max_seq);
    if (!model.calibrated()) {
      const auto calib_inputs = inputs_of(batch);
      model.calibrate(calib_inputs);
    }
    const MaskingReport mrep = mask_tokens(batch, cfg.vocab, mask_rng);
    result.masking.maskable += mrep.maskable;
    result.masking.selected += mrep.selected;
    result.masking.skipped += mrep.skipped;

    const auto& ex = batch.examples;
    std::size_t total_masked = 0, total_positions = 0, live = 0;
    for (const auto& e : ex) {
      if (e.skipped) continue;
      std::size_t c = 0;
      masked_targets(e, c);
      total_masked += c;
      total_positions += e.input.tokens.size();
      ++live;
    }

    std::vector<SequenceOutcome> outcomes(ex.size());
    parallel_for(ex.size(), [&](std::size_t i) {
      const Example& e = ex[i];
      SequenceOutcome& o = outcomes[i];
      if (e.skipped) return;
      Tape tape;
      ForwardVars f = model.forward(tape, e.input);
      std::size_t count = 0;
      auto targets = masked_targets(e, count);
      Var mlm = ad::cross_entropy(f.mlm_logits, targets, kIgnoreLabel);
      Var nsp = ad::cross_entropy(f.nsp_logits, {e.nsp_label});
      o.masked = count;
      o.mlm_sum = mlm.value()[0] * static_cast<double>(count);
      o.nsp = nsp.value()[0];
      o.positions = e.input.tokens.size();
      for (std::size_t p = 0; p < targets.size(); ++p) {
        if (targets[p] == kIgnoreLabel) continue;
        o.correct += argmax(f.mlm_logits.value().row(p)) == targets[p];
      }
      // Batch objective = mean over masked tokens (MLM), over sequences (NSP)
      // and over positions (distillation); each sequence carries its share.
      const double w_mlm = total_masked ? static_cast<double>(count) / static_cast<double>(total_masked) : 0.0;
      const double w_seq = 1.0 / static_cast<double>(live);
      const double w_pos = static_cast<double>(o.positions) / static_cast<double>(total_positions);
      Var loss = ad::add(ad::scale(mlm, w_mlm), ad::scale(nsp, w_seq));
      if (teacher) {
        const ForwardValues tv = teacher->forward_values(e.input);
        DistillTargets dt{tv.mlm_logits, tv.hiddens};
        DistillVars dv = distill_losses(f.hiddens, f.mlm_logits, dt, opts.temperature);
        o.rep = dv.rep.value()[0];
        o.logit = dv.logit.value()[0];
        loss = ad::add(loss, ad::scale(ad::add(dv.rep, dv.logit), w_pos));
      }
      if (!std::isfinite(loss.value()[0])) {
        o.bad_tensor = first_non_finite(f);
        if (!o.bad_tensor) o.bad_tensor = first_non_finite_parameter(params);
        if (!o.bad_tensor) o.bad_tensor = "loss";
        return;
      }
      tape.backward(loss);
      o.grads = GradientBuffer(params.size());
      tape.collect(o.grads, params);
    });

    StepMetrics m;
    m.step = step;
    std::size_t correct = 0;
    double mlm_sum = 0;
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
      const auto& o = outcomes[i];
      if (o.bad_tensor) {
        throw NumericError("non-finite loss at step " + std::to_string(step) + " (sequence " + std::to_string(i) +
                           "): first non-finite tensor: " + *o.bad_tensor);
      }
      if (ex[i].skipped) continue;
      mlm_sum += o.mlm_sum;
      correct += o.correct;
      m.loss.nsp += o.nsp / static_cast<double>(live);
      m.loss.rep += o.rep * static_cast<double>(o.positions) / static_cast<double>(total_positions);
      m.loss.logit += o.logit * static_cast<double>(o.positions) / static_cast<double>(total_positions);
    }
    if (live == 0) continue;
    m.loss.mlm = total_masked ? mlm_sum / static_cast<double>(total_masked) : 0.0;
    m.masked_acc = total_masked ? static_cast<double>(correct) / static_cast<double>(total_masked) : 0.0;
    m.total = total_loss(m.loss, teacher != nullptr);

    params.zero_grad();
    for (const auto& o : outcomes)
      if (o.grads.size()) o.grads.flush_into(params);
    if (auto bad = first_non_finite_parameter(params)) {
      throw NumericError("non-finite gradient at step " + std::to_string(step) + ": first non-finite tensor: " + *bad);
    }
    m.lr = linear_warmup_schedule(step, warmup, opts.steps, opts.peak_lr);
    optim.step(params, m.lr);

    result.log.push_back(m);
    if (opts.metrics_log) write_metrics_line(*opts.metrics_log, m);
    if (opts.on_step) opts.on_step(m);
  }
  return result;
}

std::vector<Example> make_eval_set(const Corpus& corpus, std::size_t count, std::size_t max_seq, std::uint64_t seed) {
  NspSampler sampler(corpus, substream(seed, "eval-pairs"));
  Rng rng = substream(seed, "eval-mask");
  TokenBatch b = next_batch(sampler, count, max_seq);
  mask_tokens(b, corpus.tokenizer.size(), rng);
  return std::move(b.examples);
}

double evaluate_mlm(const Model& model, const std::vector<Example>& examples) {
  std::vector<double> sums(examples.size(), 0.0);
  std::vector<std::size_t> counts(examples.size(), 0);
  parallel_for(examples.size(), [&](std::size_t i) {
    const Example& e = examples[i];
    if (e.skipped) return;
    const ForwardValues f = model.forward_values(e.input);
    std::size_t c = 0;
    for (std::size_t l : e.mlm_labels) c += (l != kIgnoreLabel);
    counts[i] = c;
    if (c) sums[i] = cross_entropy(f.mlm_logits, e.mlm_labels, kIgnoreLabel) * static_cast<double>(c);
  });
  double total = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    total += sums[i];
    n += counts[i];
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------
// Finetuning

LabeledDataset parse_labeled(const std::string& text, const Tokenizer& tokenizer, std::size_t max_seq,
                             std::size_t classes) {
  LabeledDataset ds;
  ds.classes = classes;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (split_words(line).empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1) {
      fields.push_back(line.substr(start, tab - start));
    }
    fields.push_back(line.substr(start));
    if (fields.size() < 2 || fields.size() > 3) {
      throw DataError("line " + std::to_string(lineno) + ": expected label<TAB>sentence[<TAB>sentence]");
    }
    std::size_t label = 0;
    try {
      std::size_t used = 0;
      const long long v = std::stoll(fields[0], &used);
      if (used != fields[0].size() || v < 0) throw std::invalid_argument("label");
      label = static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw DataError("line " + std::to_string(lineno) + ": label '" + fields[0] + "' is not a class index");
    }
    if (label >= classes) {
      throw DataError("line " + std::to_string(lineno) + ": label " + std::to_string(label) + " outside [0, " +
                      std::to_string(classes) + ")");
    }
    Example framed = fields.size() == 3
                         ? frame_pair(SentencePair{tokenizer.encode(fields[1]), tokenizer.encode(fields[2]), 0}, max_seq)
                         : frame_single(tokenizer.encode(fields[1]), max_seq);
    ds.examples.push_back(LabeledExample{std::move(framed.input), label});
  }
  return ds;
}

double classification_accuracy(const Model& model, const LabeledDataset& data) {
  if (!model.classifier()) throw ContractError("classification_accuracy: model has no classifier head");
  std::vector<char> hit(data.examples.size(), 0);
  parallel_for(data.examples.size(), [&](std::size_t i) {
    Tape tape;
    ForwardVars f = model.forward(tape, data.examples[i].input);
    Var logits = model.classify(tape, f.hiddens.back());
    hit[i] = argmax(logits.value().row(0)) == data.examples[i].label;
  });
  if (data.examples.empty()) return 0.0;
  return static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / static_cast<double>(data.examples.size());
}

FinetuneResult finetune(Model& model, const LabeledDataset& train, const LabeledDataset& eval,
                        const FinetuneOptions& opts) {
  if (opts.batch_size == 0) throw ConfigError("batch size must be positive");
  for (const auto& e : train.examples)
    if (e.label >= train.classes) throw DataError("label " + std::to_string(e.label) + " outside class range");
  model.ensure_classifier(train.classes);
  model.freeze_body(opts.freeze_body);
  ParameterSet& params = model.params();
  AdamW optim(AdamWOptions{});
  Rng shuffle = substream(opts.seed, "shuffle");
  FinetuneResult res;

  std::vector<std::size_t> order(train.examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle);
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t n = std::min(opts.batch_size, order.size() - start);
      std::vector<GradientBuffer> grads(n);
      std::vector<double> losses(n, 0.0);
      parallel_for(n, [&](std::size_t i) {
        const LabeledExample& e = train.examples[order[start + i]];
        Tape tape;
        ForwardVars f = model.forward(tape, e.input);
        Var loss = ad::scale(ad::cross_entropy(model.classify(tape, f.hiddens.back()), {e.label}),
                             1.0 / static_cast<double>(n));
        losses[i] = loss.value()[0];
        tape.backward(loss);
        grads[i] = GradientBuffer(params.size());
        tape.collect(grads[i], params);
      });
      params.zero_grad();
      for (std::size_t i = 0; i < n; ++i) {
        grads[i].flush_into(params);
        epoch_loss += losses[i];
      }
      if (!std::isfinite(epoch_loss)) {
        const auto bad = first_non_finite_parameter(params);
        throw NumericError("non-finite finetuning loss: first non-finite tensor: " + bad.value_or("loss"));
      }
      optim.step(params, opts.lr);
    }
    const double batches = std::ceil(static_cast<double>(order.size()) / static_cast<double>(opts.batch_size));
    res.epoch_loss.push_back(batches > 0 ? epoch_loss / batches : 0.0);
  }
  model.freeze_body(false);
  res.train_accuracy = classification_accuracy(model, train);
  res.eval_accuracy = eval.examples.empty() ? 0.0 : classification_accuracy(model, eval);
  return res;
}

}  // namespace bitformer
