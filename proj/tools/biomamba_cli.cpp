// SPDX-License-Identifier: Apache-2.0
// biomamba: tokenizer training, pretraining, QA fine-tuning, evaluation and
// generation from the command line.
//
// Exit status: 0 success, 1 usage error, 2 data or parse error, 3 numeric abort.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "biomamba/biomamba.hpp"

namespace bm = biomamba;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f || !(f << text)) throw bm::InputError("cannot write '" + path.string() + "'");
}

bm::config::RunConfig resolve(const std::string& config_file, const std::vector<std::string>& overrides) {
  bm::config::RunConfig c;
  if (!config_file.empty()) bm::config::apply_file(c, config_file);
  bm::config::apply_overrides(c, overrides);
  return c;
}

bm::data::Vocabulary vocabulary_of(const bm::checkpoint::CheckpointMeta& meta) {
  return bm::data::vocabulary_from_merges(meta.merges);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw bm::InputError("cannot create output directory '" + dir + "': " + ec.message());
}

// ---------------------------------------------------------------------------

struct TokenizerArgs {
  std::vector<std::string> corpus;
  std::size_t vocab_size = 0;
  std::string out;
};

int cmd_tokenizer_train(const TokenizerArgs& a) {
  std::vector<std::string> docs;
  for (const auto& p : a.corpus) docs.push_back(bm::data::read_file(p));
  const auto vocab = bm::data::train_bpe(docs, a.vocab_size);
  bm::data::save_vocabulary(vocab, a.out);
  std::cout << "vocabulary: " << vocab.size() << " tokens (" << vocab.merges().size() << " merges) -> " << a.out
            << "\n";
  return 0;
}

struct PretrainArgs {
  std::string config, out, resume, vocab;
  std::vector<std::string> corpus, overrides;
};

int cmd_pretrain(const PretrainArgs& a) {
  auto cfg = resolve(a.config, a.overrides);
  const auto vocab = a.vocab.empty() ? bm::data::Vocabulary{} : bm::data::load_vocabulary(a.vocab);
  cfg.model.vocab_size = vocab.size();
  cfg.validate();
  ensure_dir(a.out);
  write_text(fs::path(a.out) / "resolved.cfg", bm::config::to_text(cfg));

  const auto corpus = bm::data::encode_corpus_files(a.corpus, vocab);
  bm::data::BatchStream stream(corpus, cfg.model.context_len, cfg.tokens_per_batch, cfg.model.seed);
  auto tc = cfg.train_config();
  tc.out_dir = a.out;
  tc.vocab_merges = vocab.merge_strings();
  tc.log = &std::cout;

  bm::model::LMModel<float> m;
  auto opt = bm::train::fresh_optimizer<float>(tc);
  if (!a.resume.empty()) {
    auto loaded = bm::checkpoint::load_checkpoint<float>(a.resume);
    if (!(loaded.model.config == cfg.model))
      throw bm::ValidationError("resume: checkpoint model config does not match the resolved config");
    if (loaded.meta.merges != tc.vocab_merges)
      throw bm::ValidationError("resume: checkpoint was trained with a different vocabulary");
    opt = bm::train::load_optimizer<float>(bm::train::optimizer_path(a.resume));
    if (opt.step != loaded.meta.step)
      throw bm::FormatError("resume: optimizer state is at step " + std::to_string(opt.step) + ", checkpoint at " +
                            std::to_string(loaded.meta.step));
    m = std::move(loaded.model);
    stream.skip(opt.step * cfg.grad_accum);
    std::cout << "resuming at step " << opt.step + 1 << "\n";
  } else {
    m = bm::model::init_model<float>(cfg.model);
  }
  std::ofstream log(fs::path(a.out) / "train.log", a.resume.empty() ? std::ios::trunc : std::ios::app);
  tc.log_file = &log;
  std::cout << "corpus: " << corpus.size() << " tokens, parameters: " << m.parameter_count() << "\n";
  bm::train::pretrain_loop(m, stream, cfg.schedule, tc, opt);
  std::cout << "wrote " << (fs::path(a.out) / "final.bmck").string() << "\n";
  return 0;
}

struct FinetuneArgs {
  std::string ckpt, qa, out, config;
  std::vector<std::string> overrides;
};

int cmd_finetune(const FinetuneArgs& a) {
  auto loaded = bm::checkpoint::load_checkpoint<float>(a.ckpt);
  auto cfg = resolve(a.config, a.overrides);
  cfg.model = loaded.model.config;  // architecture comes from the checkpoint
  cfg.validate();
  const auto vocab = vocabulary_of(loaded.meta);
  const auto examples = bm::data::load_squad_qa_file(a.qa);
  std::size_t skipped = 0;
  const auto spans = bm::train::prepare_qa(examples, vocab, cfg.model.context_len, &skipped);
  std::cout << "examples: " << examples.size() << ", usable: " << spans.size() << ", n_skipped: " << skipped << "\n";
  if (skipped) std::cerr << "warning: skipped " << skipped << " examples whose answer does not fit the context\n";

  ensure_dir(a.out);
  write_text(fs::path(a.out) / "resolved.cfg", bm::config::to_text(cfg));
  std::ofstream log(fs::path(a.out) / "train.log", std::ios::trunc);
  auto tc = cfg.train_config();
  tc.out_dir = a.out;
  tc.vocab_merges = loaded.meta.merges;
  tc.log = &std::cout;
  tc.log_file = &log;
  bm::train::finetune_qa_loop(loaded.model, spans, cfg.qa_schedule, tc, cfg.model.seed);
  std::cout << "wrote " << (fs::path(a.out) / "finetuned.bmck").string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, qa, out;
  std::vector<std::string> corpus;
  std::size_t top_k = 5, max_answer_tokens = 30;
};

int cmd_eval(const EvalArgs& a) {
  if (a.corpus.empty() && a.qa.empty()) throw UsageError("eval needs --corpus, --qa, or both");
  const auto loaded = bm::checkpoint::load_checkpoint<float>(a.ckpt);
  const auto vocab = vocabulary_of(loaded.meta);
  bm::eval::EvalReport report;
  if (!a.corpus.empty()) {
    const auto corpus = bm::data::encode_corpus_files(a.corpus, vocab);
    report.lm = bm::eval::corpus_cross_entropy(loaded.model, corpus, loaded.model.config.context_len);
  }
  if (!a.qa.empty()) {
    if (!loaded.model.has_qa_head()) throw bm::InputError(a.ckpt + ": checkpoint has no QA head; run finetune first");
    const auto examples = bm::data::load_squad_qa_file(a.qa);
    report.qa = bm::eval::evaluate_qa(loaded.model, vocab, examples, {a.top_k, a.max_answer_tokens});
  }
  bm::eval::print_report(report, std::cout);
  if (!a.out.empty()) write_text(a.out, bm::eval::report_to_json(report).dump(2) + "\n");
  return 0;
}

struct GenerateArgs {
  std::string ckpt, prompt;
  bm::model::GenerateOptions opt;
};

int cmd_generate(const GenerateArgs& a) {
  const auto loaded = bm::checkpoint::load_checkpoint<float>(a.ckpt);
  const auto vocab = vocabulary_of(loaded.meta);
  std::cout << bm::model::generate(loaded.model, vocab, a.prompt, a.opt) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Selective state-space language models: tokenize, pretrain, fine-tune, evaluate, generate"};
  app.require_subcommand(1);

  TokenizerArgs tok;
  auto* c_tok = app.add_subcommand("tokenizer-train", "Learn a byte-level BPE vocabulary");
  c_tok->add_option("--corpus", tok.corpus, "Corpus text files")->required()->check(CLI::ExistingFile);
  c_tok->add_option("--vocab-size", tok.vocab_size, "Target vocabulary size (>= 260)")
      ->required()
      ->check(CLI::Range(std::size_t{bm::data::kBaseVocab}, std::size_t{1} << 20));
  c_tok->add_option("--out", tok.out, "Vocabulary file to write")->required();

  PretrainArgs pre;
  auto* c_pre = app.add_subcommand("pretrain", "Next-token pretraining");
  c_pre->add_option("--config", pre.config, "key = value config file")->check(CLI::ExistingFile);
  c_pre->add_option("--corpus", pre.corpus, "Corpus text files")->required()->check(CLI::ExistingFile);
  c_pre->add_option("--out", pre.out, "Output directory")->required();
  c_pre->add_option("--resume", pre.resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  c_pre->add_option("--vocab", pre.vocab, "Vocabulary file (default: bytes only)")->check(CLI::ExistingFile);
  c_pre->add_option("--set", pre.overrides, "Config override key=value (repeatable)");

  FinetuneArgs ft;
  auto* c_ft = app.add_subcommand("finetune", "Extractive QA fine-tuning");
  c_ft->add_option("--ckpt", ft.ckpt, "Pretrained checkpoint")->required()->check(CLI::ExistingFile);
  c_ft->add_option("--qa", ft.qa, "SQuAD-format JSON")->required()->check(CLI::ExistingFile);
  c_ft->add_option("--out", ft.out, "Output directory")->required();
  c_ft->add_option("--config", ft.config, "key = value config file")->check(CLI::ExistingFile);
  c_ft->add_option("--set", ft.overrides, "Config override key=value (repeatable)");

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Perplexity / cross-entropy and QA metrics");
  c_ev->add_option("--ckpt", ev.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_ev->add_option("--corpus", ev.corpus, "Held-out corpus files")->check(CLI::ExistingFile);
  c_ev->add_option("--qa", ev.qa, "SQuAD-format JSON")->check(CLI::ExistingFile);
  c_ev->add_option("--out", ev.out, "Report JSON path");
  c_ev->add_option("--top-k", ev.top_k, "Candidate spans per question")->check(CLI::PositiveNumber);
  c_ev->add_option("--max-answer-tokens", ev.max_answer_tokens, "Longest span, in tokens past the start");

  GenerateArgs gen;
  auto* c_gen = app.add_subcommand("generate", "Continue a prompt");
  c_gen->add_option("--ckpt", gen.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_gen->add_option("--prompt", gen.prompt, "Prompt text")->required();
  c_gen->add_option("--max-new", gen.opt.max_new, "Tokens to generate");
  c_gen->add_option("--temperature", gen.opt.temperature, "0 = greedy")->check(CLI::NonNegativeNumber);
  c_gen->add_option("--top-k", gen.opt.top_k, "Sample from the k most likely tokens (0 = all)");
  c_gen->add_option("--seed", gen.opt.seed, "Sampling seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*c_tok) return cmd_tokenizer_train(tok);
    if (*c_pre) return cmd_pretrain(pre);
    if (*c_ft) return cmd_finetune(ft);
    if (*c_ev) return cmd_eval(ev);
    if (*c_gen) return cmd_generate(gen);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const bm::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const bm::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
