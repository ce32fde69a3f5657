// SPDX-License-Identifier: Apache-2.0
//
// Pretraining data pipeline and objectives: tokenizer, corpus, MLM masking,
// NSP pairs, distillation losses and the training / finetuning loops.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "bitformer/model.hpp"
#include "bitformer/rng.hpp"

namespace bitformer {

// --- tokenizer & corpus -------------------------------------------------------

inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kUnkId = 1;
inline constexpr std::size_t kClsId = 2;
inline constexpr std::size_t kSepId = 3;
inline constexpr std::size_t kMaskId = 4;
inline constexpr std::size_t kNumSpecials = 5;
inline constexpr std::size_t kIgnoreLabel = kNoIgnore;

/// Whitespace tokenizer over lowercased text with a frequency-capped vocabulary.
class Tokenizer {
 public:
  /// Vocabulary: the five specials, then words by descending frequency (ties
  /// alphabetical) until `max_vocab` entries.
  static Tokenizer build(const std::vector<std::string>& sentences, std::size_t max_vocab);
  /// From a full word list whose first five entries are the specials.
  static Tokenizer from_words(std::vector<std::string> words);

  std::vector<std::size_t> encode(std::string_view sentence) const;
  std::size_t id(std::string_view word) const;
  std::size_t size() const noexcept { return words_.size(); }
  const std::vector<std::string>& words() const noexcept { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> ids_;
};

using Sentence = std::vector<std::size_t>;

struct Document {
  std::vector<Sentence> sentences;
};

struct Corpus {
  std::vector<Document> documents;
  Tokenizer tokenizer;
};

/// Blank-line-separated documents of newline-separated sentences.
std::vector<std::vector<std::string>> split_documents(const std::string& text);
Corpus build_corpus(const std::string& text, std::size_t max_vocab = 4096);
Corpus build_corpus(const std::string& text, const Tokenizer& tokenizer);
std::string read_text_file(const std::filesystem::path& path);

// --- synthetic toy data -------------------------------------------------------

struct ToyCorpusOptions {
  std::size_t topics = 8;
  std::size_t documents = 400;
  std::size_t min_sentences = 3;
  std::size_t max_sentences = 8;
  std::uint64_t seed = 1;
};

/// Topic-structured documents: each document draws its content words from
/// one topic, and each sentence opens with the previous sentence's object,
/// so both masked words and sentence adjacency are predictable.
std::string make_toy_corpus(const ToyCorpusOptions& opts);
/// Labeled lines "label<TAB>sentence" with label = topic parity.
std::string make_toy_classification(const ToyCorpusOptions& opts, std::size_t examples, std::uint64_t seed);

// --- examples, masking, NSP ---------------------------------------------------

struct Example {
  SequenceInput input;
  std::vector<std::size_t> mlm_labels;  // kIgnoreLabel where not selected
  std::size_t nsp_label = 0;            // 1: B follows A in one document
  bool skipped = false;                 // no maskable token
};

/// Variable-length examples; each sequence runs on its own tape, so no padding
/// is materialized.
struct TokenBatch {
  std::vector<Example> examples;
};

struct MaskingReport {
  std::size_t maskable = 0;
  std::size_t selected = 0;
  std::size_t to_mask = 0;
  std::size_t kept = 0;
  std::size_t randomized = 0;
  std::size_t skipped = 0;
  std::vector<std::string> warnings;
};

inline constexpr double kMaskSelectProb = 0.15;

/// Selects each maskable position ([CLS], [SEP], [PAD] excluded) with
/// probability 0.15; selected positions become [MASK] (80%), stay (10%) or
/// become a uniform non-special token (10%). Labels carry the original id.
MaskingReport mask_tokens(TokenBatch& batch, std::size_t vocab, Rng& rng);

struct SentencePair {
  Sentence a, b;
  std::size_t label = 0;
};

/// Draws balanced NSP pairs: positives are consecutive sentences of one
/// document, negatives pair sentences of two different documents.
class NspSampler {
 public:
  NspSampler(const Corpus& corpus, Rng rng);
  SentencePair next();

 private:
  const Corpus* corpus_;
  Rng rng_;
  std::vector<std::size_t> multi_sentence_docs_;
};

std::vector<SentencePair> make_nsp_pairs(const Corpus& corpus, Rng& rng, std::size_t count);

/// [CLS] A [SEP] B [SEP], truncating the longer segment from its end until
/// the pair fits max_seq.
Example frame_pair(const SentencePair& pair, std::size_t max_seq);
Example frame_single(const Sentence& s, std::size_t max_seq);

// --- losses -------------------------------------------------------------------

struct DistillTargets {
  DenseMatrix logits;               // seq × vocab
  std::vector<DenseMatrix> hiddens;  // L + 1
};

struct DistillLosses {
  double logit = 0;
  double rep = 0;
};

/// ℓ_logit = KL(softmax(t/T) ‖ softmax(s/T)) averaged over positions;
/// ℓ_rep = mean over layers of the per-element MSE.
DistillLosses distill_losses(const DenseMatrix& student_logits, const std::vector<DenseMatrix>& student_hiddens,
                             const DistillTargets& targets, double temperature = 1.0);

struct DistillVars {
  Var logit;
  Var rep;
};
DistillVars distill_losses(const std::vector<Var>& student_hiddens, Var student_logits,
                           const DistillTargets& targets, double temperature = 1.0);

struct LossTerms {
  double mlm = 0;
  double nsp = 0;
  double rep = 0;
  double logit = 0;
};

/// ℓ_MLM + ℓ_NSP (+ ℓ_rep + ℓ_logit when distilling), unweighted.
double total_loss(const LossTerms& t, bool distill);

// --- training -----------------------------------------------------------------

struct StepMetrics {
  std::size_t step = 0;
  LossTerms loss;
  double lr = 0;
  double masked_acc = 0;
  double total = 0;
};

struct PretrainOptions {
  std::size_t steps = 500;
  std::size_t batch_size = 32;
  double peak_lr = 2e-4;
  double warmup_frac = 0.05;
  double weight_decay = 0.01;
  double temperature = 1.0;
  std::uint64_t seed = 1;
  std::ostream* metrics_log = nullptr;
  std::function<void(const StepMetrics&)> on_step;
};

struct PretrainResult {
  std::vector<StepMetrics> log;
  MaskingReport masking;
};

void write_metrics_header(std::ostream& out);
void write_metrics_line(std::ostream& out, const StepMetrics& m);

/// AdamW over the model's latent parameters with linear warmup/decay. An
/// uncalibrated model is calibrated on the first batch before step 1.
/// Throws NumericError naming the first non-finite tensor.
PretrainResult pretrain_loop(Model& model, const Corpus& corpus, const Model* teacher, const PretrainOptions& opts);

/// Fixed masked NSP examples for held-out evaluation (seeded independently
/// of training).
std::vector<Example> make_eval_set(const Corpus& corpus, std::size_t count, std::size_t max_seq, std::uint64_t seed);
/// Mean cross entropy over every masked position of the set.
double evaluate_mlm(const Model& model, const std::vector<Example>& examples);

// --- finetuning ---------------------------------------------------------------

struct LabeledExample {
  SequenceInput input;
  std::size_t label = 0;
};

struct LabeledDataset {
  std::vector<LabeledExample> examples;
  std::size_t classes = 2;
};

/// Lines "label<TAB>sentence_a[<TAB>sentence_b]".
LabeledDataset parse_labeled(const std::string& text, const Tokenizer& tokenizer, std::size_t max_seq,
                             std::size_t classes = 2);

struct FinetuneOptions {
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  double lr = 2e-5;
  std::uint64_t seed = 1;
  bool freeze_body = false;
};

struct FinetuneResult {
  std::vector<double> epoch_loss;
  double train_accuracy = 0;
  double eval_accuracy = 0;
};

FinetuneResult finetune(Model& model, const LabeledDataset& train, const LabeledDataset& eval,
                        const FinetuneOptions& opts);
double classification_accuracy(const Model& model, const LabeledDataset& data);

/// Name of the first parameter or tensor holding a NaN/Inf, if any.
std::optional<std::string> first_non_finite_parameter(const ParameterSet& params);

}  // namespace bitformer
