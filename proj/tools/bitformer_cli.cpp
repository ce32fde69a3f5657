// SPDX-License-Identifier: Apache-2.0
//
// bitformer: pretrain, finetune, verify, bench, inspect, make-corpus.
// Exit codes: 0 ok, 1 verification failure, 2 usage / missing input,
// 3 numeric abort, 4 checkpoint schema mismatch.
#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "bitformer/accounting.hpp"
#include "bitformer/bitkernel.hpp"
#include "bitformer/checkpoint.hpp"
#include "bitformer/errors.hpp"
#include "bitformer/model.hpp"
#include "bitformer/numerics.hpp"
#include "bitformer/pretrain.hpp"
#include "bitformer/verify.hpp"

#ifndef BITFORMER_BUILD_ID
#define BITFORMER_BUILD_ID "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace bitformer;

namespace {

enum Exit { kOk = 0, kVerifyFailed = 1, kUsage = 2, kNumeric = 3, kSchema = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json config_json(const ModelConfig& c) {
  json j;
  std::istringstream in(c.to_text());
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) j[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return j;
}

// Written when a command starts (before any model state is touched) and
// rewritten with the end time and outputs when it finishes.
class Manifest {
 public:
  Manifest(std::string command, fs::path path) : path_(std::move(path)) {
    j_["command"] = std::move(command);
    j_["build_id"] = BITFORMER_BUILD_ID;
    j_["start_time"] = utc_now();
    j_["end_time"] = nullptr;
  }
  json& operator[](const char* key) { return j_[key]; }
  void write() const {
    if (path_.empty()) return;
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    std::ofstream out(path_);
    if (!out) throw IoError("cannot write manifest '" + path_.string() + "'");
    out << j_.dump(2) << '\n';
  }
  void finish(const std::string& status) {
    j_["end_time"] = utc_now();
    j_["status"] = status;
    write();
  }

 private:
  fs::path path_;
  json j_;
};

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing ") + what);
  if (!fs::is_regular_file(path)) throw UsageError(std::string(what) + " '" + path + "' does not exist");
}

struct ModelFlags {
  std::string config = "tiny";
  std::string variant;
  std::optional<std::size_t> rank;
  bool full_precision = false;

  void add(CLI::App* app) {
    app->add_option("--config", config, "preset (tiny, base) or key=value config file")->capture_default_str();
    app->add_option("--variant", variant, "baseline | bipft-a | bipft-b");
    app->add_option("--rank", rank, "estimator rank for bipft-b");
    app->add_flag("--full-precision", full_precision, "no binarization (teacher models)");
  }
  ModelConfig resolve(std::uint64_t seed) const {
    ModelConfig c = ModelConfig::resolve(config);
    if (!variant.empty()) c.variant = parse_variant(variant);
    if (rank) c.estimator_rank = *rank;
    if (full_precision) c.full_precision = true;
    c.seed = seed;
    return c;
  }
};

// --- pretrain -----------------------------------------------------------------

struct PretrainArgs {
  ModelFlags model;
  std::string corpus, teacher, init_from, out = "run";
  std::size_t steps = 500, batch = 32, max_vocab = 4096;
  double lr = 2e-4, warmup_frac = 0.05, temperature = 1.0;
  std::uint64_t seed = 1;
};

int cmd_pretrain(const PretrainArgs& a) {
  require_file(a.corpus, "--corpus");
  if (!a.teacher.empty()) require_file(a.teacher, "--teacher");
  if (!a.init_from.empty()) require_file(a.init_from, "--init-from");
  const fs::path out(a.out);
  Manifest manifest("pretrain", out / "manifest.json");

  std::optional<LoadedCheckpoint> teacher;
  if (!a.teacher.empty()) teacher = load_checkpoint(a.teacher);
  const std::string text = read_text_file(a.corpus);
  // A teacher fixes the vocabulary; otherwise it is built from the corpus.
  Corpus corpus = teacher && !teacher->vocab.empty() ? build_corpus(text, Tokenizer::from_words(teacher->vocab))
                                                     : build_corpus(text, a.max_vocab);
  ModelConfig cfg = a.model.resolve(a.seed);
  cfg.vocab = corpus.tokenizer.size();

  manifest["config"] = config_json(cfg);
  manifest["seed"] = a.seed;
  manifest["options"] = {{"corpus", a.corpus},       {"teacher", a.teacher}, {"init_from", a.init_from},
                         {"steps", a.steps},         {"batch", a.batch},     {"lr", a.lr},
                         {"warmup_frac", a.warmup_frac}, {"temperature", a.temperature},
                         {"max_vocab", a.max_vocab}};
  manifest["outputs"] = {{"checkpoint", (out / "model.ckpt").string()},
                         {"metrics", (out / "metrics.tsv").string()}};
  manifest.write();

  Model model = Model::build(cfg);
  if (!a.init_from.empty()) {
    const std::size_t n = init_from_checkpoint(model, a.init_from);
    std::cerr << "initialized " << n << " tensors from " << a.init_from << '\n';
  }
  std::ofstream metrics(out / "metrics.tsv");
  PretrainOptions opts;
  opts.steps = a.steps;
  opts.batch_size = a.batch;
  opts.peak_lr = a.lr;
  opts.warmup_frac = a.warmup_frac;
  opts.temperature = a.temperature;
  opts.seed = a.seed;
  opts.metrics_log = &metrics;
  const PretrainResult r = pretrain_loop(model, corpus, teacher ? &teacher->model : nullptr, opts);
  save_checkpoint(model, out / "model.ckpt", corpus.tokenizer.words());
  if (!r.log.empty()) {
    const auto& last = r.log.back();
    std::cout << "steps=" << r.log.size() << " loss_mlm=" << last.loss.mlm << " loss_nsp=" << last.loss.nsp
              << " masked_acc=" << last.masked_acc << '\n';
  }
  if (r.masking.skipped) std::cerr << r.masking.skipped << " example(s) without maskable tokens were skipped\n";
  std::cout << "checkpoint: " << (out / "model.ckpt").string() << '\n';
  manifest.finish("ok");
  return kOk;
}

// --- finetune -----------------------------------------------------------------

struct FinetuneArgs {
  ModelFlags model;
  std::string checkpoint, train, eval, corpus, out = "finetune";
  std::size_t epochs = 3, batch = 32, classes = 2, max_vocab = 4096;
  double lr = 2e-5;
  std::uint64_t seed = 1;
  bool freeze_body = false;
  bool model_flags_given = false;
};

int cmd_finetune(const FinetuneArgs& a) {
  require_file(a.train, "--train");
  if (!a.eval.empty()) require_file(a.eval, "--eval");
  if (a.checkpoint.empty() && a.corpus.empty()) {
    throw UsageError("finetune needs --checkpoint, or --corpus to build a vocabulary for a from-scratch model");
  }
  if (!a.checkpoint.empty()) require_file(a.checkpoint, "--checkpoint");
  if (a.checkpoint.empty()) require_file(a.corpus, "--corpus");
  const fs::path out(a.out);
  Manifest manifest("finetune", out / "manifest.json");

  std::optional<Model> model;
  std::optional<Tokenizer> tok;
  if (!a.checkpoint.empty()) {
    std::optional<ModelConfig> expected;
    if (a.model_flags_given) {
      ModelConfig stored = peek_checkpoint_config(a.checkpoint);
      ModelConfig want = a.model.resolve(stored.seed);
      want.vocab = stored.vocab;
      want.max_seq = stored.max_seq;
      expected = want;
    }
    LoadedCheckpoint ck = load_checkpoint(a.checkpoint, expected);
    if (ck.vocab.empty()) throw UsageError("checkpoint '" + a.checkpoint + "' carries no vocabulary");
    tok = Tokenizer::from_words(ck.vocab);
    model.emplace(std::move(ck.model));
  } else {
    Corpus c = build_corpus(read_text_file(a.corpus), a.max_vocab);
    tok = c.tokenizer;
    ModelConfig cfg = a.model.resolve(a.seed);
    cfg.vocab = tok->size();
    model.emplace(Model::build(cfg));
  }
  manifest["config"] = config_json(model->config());
  manifest["seed"] = a.seed;
  manifest["options"] = {{"checkpoint", a.checkpoint}, {"train", a.train},   {"eval", a.eval},
                         {"corpus", a.corpus},         {"epochs", a.epochs}, {"batch", a.batch},
                         {"lr", a.lr},                 {"classes", a.classes}, {"freeze_body", a.freeze_body}};
  manifest.write();

  const std::size_t max_seq = model->config().max_seq;
  const LabeledDataset train = parse_labeled(read_text_file(a.train), *tok, max_seq, a.classes);
  const LabeledDataset eval =
      a.eval.empty() ? LabeledDataset{} : parse_labeled(read_text_file(a.eval), *tok, max_seq, a.classes);
  if (!model->calibrated()) {
    std::vector<SequenceInput> calib;
    for (std::size_t i = 0; i < std::min<std::size_t>(a.batch, train.examples.size()); ++i)
      calib.push_back(train.examples[i].input);
    model->calibrate(calib);
  }
  FinetuneOptions fo;
  fo.epochs = a.epochs;
  fo.batch_size = a.batch;
  fo.lr = a.lr;
  fo.seed = a.seed;
  fo.freeze_body = a.freeze_body;
  const FinetuneResult r = finetune(*model, train, eval, fo);
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) std::cout << "epoch " << e + 1 << " loss=" << r.epoch_loss[e] << '\n';
  std::cout << "train_accuracy=" << r.train_accuracy << '\n';
  if (!a.eval.empty()) std::cout << "eval_accuracy=" << r.eval_accuracy << '\n';
  save_checkpoint(*model, out / "model.ckpt", tok->words());
  manifest["outputs"] = {{"checkpoint", (out / "model.ckpt").string()}};
  manifest["results"] = {{"train_accuracy", r.train_accuracy}, {"eval_accuracy", r.eval_accuracy}};
  manifest.finish("ok");
  return kOk;
}

// --- verify -------------------------------------------------------------------

int cmd_verify(std::uint64_t seed, const std::vector<std::string>& only, const std::string& manifest_path) {
  Manifest manifest("verify", manifest_path);
  manifest["seed"] = seed;
  manifest["options"] = {{"only", only}};
  manifest.write();
  VerifyOptions vo;
  vo.seed = seed;
  for (const auto& o : only) {
    std::stringstream ss(o);
    for (std::string part; std::getline(ss, part, ',');)
      if (!part.empty()) vo.only.push_back(part);
  }
  const auto results = run_verify(vo);
  std::cout << format_results(results);
  std::size_t failed = 0;
  for (const auto& r : results)
    if (!r.passed) {
      ++failed;
      std::cerr << "verification failed: " << r.suite << ": " << r.property << " (" << r.detail << ")\n";
    }
  std::cout << (failed ? "FAILED " + std::to_string(failed) + " of " : "all passed: ") << results.size()
            << " properties\n";
  manifest.finish(failed ? "failed" : "ok");
  return failed ? kVerifyFailed : kOk;
}

// --- bench --------------------------------------------------------------------

double gemm_ratio(std::size_t m, std::size_t k, std::size_t n) {
  Rng rng = substream(1, "bench");
  DenseMatrix a(m, k), bt(n, k);
  for (double& v : a.values()) v = standard_normal(rng);
  for (double& v : bt.values()) v = standard_normal(rng);
  const auto pa = pack_signs(a), pb = pack_signs(bt);
  auto time_it = [](auto&& fn) {
    int reps = 0;
    const auto t0 = std::chrono::steady_clock::now();
    double elapsed = 0;
    do {
      fn();
      ++reps;
      elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    } while (elapsed < 0.3);
    return elapsed / reps;
  };
  volatile double sink = 0;
  const double t_float = time_it([&] { sink = sink + matmul_nt(a, bt)[0]; });
  const double t_bin = time_it([&] { sink = sink + binary_gemm_counts(pa, pb)(0, 0); });
  return t_float / t_bin;
}

int cmd_bench(const ModelFlags& flags, std::size_t seq, std::uint64_t seed) {
  const ModelConfig cfg = flags.resolve(seed);
  cfg.validate();
  const AccountingReport rep = equivalent_flops(cfg, seq);
  std::cout << rep.to_text();
  const std::size_t c = std::min<std::size_t>(cfg.hidden, 768);
  const double ratio = gemm_ratio(seq, c, c);
  std::cout << "packed_vs_float_gemm_speedup=" << ratio << "  (" << seq << "x" << c << " by " << c << "x" << c
            << ", this host)\n";
  return kOk;
}

// --- inspect ------------------------------------------------------------------

int cmd_inspect(const std::string& path) {
  require_file(path, "--checkpoint");
  const LoadedCheckpoint ck = load_checkpoint(path);
  std::cout << ck.model.config().to_text();
  std::cout << "vocab_entries=" << ck.vocab.size() << '\n';
  const ParameterSet& ps = ck.model.params();
  std::cout << "tensors=" << ps.size() << " scalars=" << ps.scalar_count()
            << " backbone_scalars=" << ck.model.backbone_parameter_count() << '\n';
  for (std::size_t i = 0; i < ps.size(); ++i)
    std::cout << "  " << ps[i].name << ' ' << ps[i].value.shape_string() << '\n';
  return kOk;
}

// --- make-corpus --------------------------------------------------------------

int cmd_make_corpus(const std::string& out, const std::string& task_out, std::size_t documents,
                    std::size_t task_examples, std::uint64_t seed) {
  ToyCorpusOptions o;
  o.documents = documents;
  o.seed = seed;
  std::ofstream(out) << make_toy_corpus(o);
  std::cout << "corpus: " << out << '\n';
  if (!task_out.empty()) {
    std::ofstream(task_out) << make_toy_classification(o, task_examples, seed);
    std::cout << "task: " << task_out << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bitformer: binary transformer pretraining toolkit"};
  app.require_subcommand(1);

  PretrainArgs pa;
  auto* pre = app.add_subcommand("pretrain", "pretrain a binary (or full-precision) encoder");
  pa.model.add(pre);
  pre->add_option("--corpus", pa.corpus, "plain-text corpus (blank-line separated documents)");
  pre->add_option("--teacher", pa.teacher, "full-precision teacher checkpoint for distillation");
  pre->add_option("--init-from", pa.init_from, "initialize latent weights from a checkpoint");
  pre->add_option("--out", pa.out, "output directory")->capture_default_str();
  pre->add_option("--steps", pa.steps)->capture_default_str();
  pre->add_option("--batch", pa.batch)->capture_default_str();
  pre->add_option("--lr", pa.lr, "peak learning rate")->capture_default_str();
  pre->add_option("--warmup-frac", pa.warmup_frac)->capture_default_str();
  pre->add_option("--temperature", pa.temperature, "distillation temperature")->capture_default_str();
  pre->add_option("--max-vocab", pa.max_vocab)->capture_default_str();
  pre->add_option("--seed", pa.seed)->capture_default_str();

  FinetuneArgs fa;
  auto* fin = app.add_subcommand("finetune", "finetune a classification head on the [CLS] state");
  fa.model.add(fin);
  fin->add_option("--checkpoint", fa.checkpoint, "pretrained checkpoint (omit to start from scratch)");
  fin->add_option("--corpus", fa.corpus, "corpus for the vocabulary of a from-scratch model");
  fin->add_option("--train", fa.train, "labeled data: label<TAB>sentence[<TAB>sentence]");
  fin->add_option("--eval", fa.eval, "held-out labeled data");
  fin->add_option("--out", fa.out)->capture_default_str();
  fin->add_option("--epochs", fa.epochs)->capture_default_str();
  fin->add_option("--batch", fa.batch)->capture_default_str();
  fin->add_option("--lr", fa.lr)->capture_default_str();
  fin->add_option("--classes", fa.classes)->capture_default_str();
  fin->add_option("--max-vocab", fa.max_vocab)->capture_default_str();
  fin->add_option("--seed", fa.seed)->capture_default_str();
  fin->add_flag("--freeze-body", fa.freeze_body, "train only the classification head");

  std::uint64_t verify_seed = 1;
  std::vector<std::string> only;
  std::string verify_manifest;
  auto* ver = app.add_subcommand("verify", "run the built-in property suites");
  ver->add_option("--seed", verify_seed)->capture_default_str();
  ver->add_option("--only", only, "suite(s): kernel, ternary, gradients, recovery, train-eval");
  ver->add_option("--manifest", verify_manifest, "write a run manifest here");

  ModelFlags bench_flags;
  std::size_t bench_seq = 128;
  std::uint64_t bench_seed = 1;
  auto* ben = app.add_subcommand("bench", "operation/size accounting and kernel throughput");
  bench_flags.add(ben);
  ben->add_option("--seq", bench_seq, "sequence length for the accounting")->capture_default_str();
  ben->add_option("--seed", bench_seed)->capture_default_str();

  std::string inspect_path;
  auto* ins = app.add_subcommand("inspect", "print a checkpoint's config and tensor table");
  ins->add_option("--checkpoint", inspect_path)->required();

  std::string corpus_out = "toy_corpus.txt", task_out;
  std::size_t documents = 400, task_examples = 1000;
  std::uint64_t corpus_seed = 1;
  auto* mk = app.add_subcommand("make-corpus", "write the synthetic toy corpus (and labeled task)");
  mk->add_option("--out", corpus_out)->capture_default_str();
  mk->add_option("--task-out", task_out, "also write labeled task lines here");
  mk->add_option("--documents", documents)->capture_default_str();
  mk->add_option("--task-examples", task_examples)->capture_default_str();
  mk->add_option("--seed", corpus_seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*pre) return cmd_pretrain(pa);
    if (*fin) {
      fa.model_flags_given = fin->count("--variant") || fin->count("--rank") || fin->count("--config");
      return cmd_finetune(fa);
    }
    if (*ver) return cmd_verify(verify_seed, only, verify_manifest);
    if (*ben) return cmd_bench(bench_flags, bench_seq, bench_seed);
    if (*ins) return cmd_inspect(inspect_path);
    if (*mk) return cmd_make_corpus(corpus_out, task_out, documents, task_examples, corpus_seed);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << '\n';
    return kNumeric;
  } catch (const SchemaError& e) {
    std::cerr << "schema mismatch: " << e.what() << '\n';
    return kSchema;
  } catch (const VersionError& e) {
    std::cerr << "schema mismatch: " << e.what() << '\n';
    return kSchema;
  } catch (const ChecksumError& e) {
    std::cerr << "corrupt checkpoint: " << e.what() << '\n';
    return kSchema;
  } catch (const TruncatedFileError& e) {
    std::cerr << "corrupt checkpoint: " << e.what() << '\n';
    return kSchema;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
