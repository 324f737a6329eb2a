// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "biomamba/data/batching.hpp"
#include "biomamba/data/squad.hpp"
#include "biomamba/model.hpp"

namespace biomamba::eval {

using data::TokenId;

struct CrossEntropy {
  double nats = 0;  // mean per target token
  std::uint64_t token_count = 0;
};

// Mean -log p(token | prefix) over non-overlapping windows of context_len,
// with each window evaluated independently.
template <class T>
CrossEntropy corpus_cross_entropy(const model::LMModel<T>& m, std::span<const TokenId> corpus,
                                  std::size_t context_len, std::size_t rows_per_forward = 8) {
  if (corpus.size() < 2) throw InputError("cross-entropy needs a corpus of at least 2 tokens");
  if (context_len < 2) throw ContractError("context_len must be at least 2");
  NoGradScope<T> no_grad;
  const auto windows = data::lm_windows(corpus.size(), context_len);
  std::vector<std::size_t> order(windows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t V = m.config.vocab_size;
  double sum = 0;
  std::uint64_t count = 0;
  for (std::size_t b0 = 0; b0 < order.size(); b0 += rows_per_forward) {
    const std::size_t n = std::min(rows_per_forward, order.size() - b0);
    auto batch = data::assemble_batch(corpus, windows, std::span<const std::size_t>(order).subspan(b0, n),
                                      context_len, data::SpecialIds{}.pad);
    auto logits = model::lm_forward(m, batch.inputs, batch.batch, batch.context_len);
    const auto d = logits.data();
    for (std::size_t r = 0; r < batch.targets.size(); ++r) {
      if (!batch.valid[r]) continue;
      const T* row = d.data() + r * V;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double z = 0;
      for (std::size_t j = 0; j < V; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
      sum += mx + std::log(z) - static_cast<double>(row[batch.targets[r]]);
      ++count;
    }
  }
  if (!std::isfinite(sum)) throw NumericError("cross-entropy is not finite");
  return {sum / static_cast<double>(count), count};
}

template <class T>
double perplexity(const model::LMModel<T>& m, std::span<const TokenId> corpus, std::size_t context_len) {
  return std::exp(corpus_cross_entropy(m, corpus, context_len).nats);
}

struct SpanCandidate {
  std::size_t start = 0, end = 0;  // inclusive token indices
  double score = 0;
};

// Best k spans by start[s] + end[e] over s <= e <= s + max_answer_tokens,
// skipping positions whose logit is -inf. Ties go to smaller s, then smaller e.
template <class T>
std::vector<SpanCandidate> extract_top_k_spans(std::span<const T> start, std::span<const T> end, std::size_t k = 5,
                                               std::size_t max_answer_tokens = 30) {
  if (start.size() != end.size()) throw DimensionError("extract_top_k_spans: logit vectors differ in length");
  if (k == 0) throw ContractError("extract_top_k_spans: k must be at least 1");
  auto better = [](const SpanCandidate& a, const SpanCandidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.start != b.start) return a.start < b.start;
    return a.end < b.end;
  };
  std::vector<SpanCandidate> top;  // kept sorted, size <= k
  const std::size_t n = start.size();
  for (std::size_t s = 0; s < n; ++s) {
    if (!std::isfinite(static_cast<double>(start[s]))) continue;
    const std::size_t last = std::min(n - 1, s + max_answer_tokens);
    for (std::size_t e = s; e <= last; ++e) {
      if (!std::isfinite(static_cast<double>(end[e]))) continue;
      SpanCandidate c{s, e, static_cast<double>(start[s]) + static_cast<double>(end[e])};
      if (top.size() == k && !better(c, top.back())) continue;
      top.insert(std::upper_bound(top.begin(), top.end(), c, better), c);
      if (top.size() > k) top.pop_back();
    }
  }
  return top;
}

struct RankedAnswer {
  std::string text;
  double score = 0;
};
using RankedAnswers = std::vector<RankedAnswer>;

inline bool matches_any(const std::string& prediction, const std::vector<std::string>& golds) {
  const auto p = data::normalize_answer(prediction);
  return std::any_of(golds.begin(), golds.end(), [&](const std::string& g) { return data::normalize_answer(g) == p; });
}

inline double exact_match_accuracy(const std::vector<std::string>& predictions,
                                   const std::vector<std::vector<std::string>>& golds) {
  if (predictions.empty()) throw InputError("exact match over an empty question set");
  if (predictions.size() != golds.size()) throw ContractError("exact match: predictions and golds differ in count");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hits += matches_any(predictions[i], golds[i]);
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

inline double mean_reciprocal_rank(const std::vector<RankedAnswers>& ranked,
                                   const std::vector<std::vector<std::string>>& golds) {
  if (ranked.empty()) throw InputError("MRR over an empty question set");
  if (ranked.size() != golds.size()) throw ContractError("MRR: rankings and golds differ in count");
  double sum = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i)
    for (std::size_t r = 0; r < ranked[i].size(); ++r)
      if (matches_any(ranked[i][r].text, golds[i])) {
        sum += 1.0 / static_cast<double>(r + 1);
        break;
      }
  return sum / static_cast<double>(ranked.size());
}

struct QAOptions {
  std::size_t k = 5;
  std::size_t max_answer_tokens = 30;
};

struct QAResult {
  double acc = 0, mrr = 0;
  std::size_t n_evaluated = 0, n_skipped = 0;
  std::vector<RankedAnswers> ranked;
};

// Examples without a placeable answer are skipped and counted, as in
// fine-tuning. A question with no legal span gets an empty ranking.
template <class T>
QAResult evaluate_qa(const model::LMModel<T>& m, const data::Vocabulary& vocab,
                     const std::vector<data::QAExample>& examples, const QAOptions& opt = {}) {
  QAResult res;
  std::vector<std::string> top1;
  std::vector<std::vector<std::string>> golds;
  for (const auto& ex : examples) {
    auto span = data::map_answer_to_token_span(ex, vocab, m.config.context_len);
    if (!span) {
      ++res.n_skipped;
      continue;
    }
    const auto lg = model::qa_forward(m, span->tokens, span->context_begin);
    const auto cands = extract_top_k_spans<T>(lg.start, lg.end, opt.k, opt.max_answer_tokens);
    RankedAnswers ranked;
    for (const auto& c : cands) {
      data::EncodedSequence piece(span->tokens.begin() + static_cast<std::ptrdiff_t>(c.start),
                                  span->tokens.begin() + static_cast<std::ptrdiff_t>(c.end + 1));
      ranked.push_back({data::decode(piece, vocab), c.score});
    }
    top1.push_back(ranked.empty() ? std::string{} : ranked.front().text);
    std::vector<std::string> g;
    for (const auto& a : ex.answers) g.push_back(a.text);
    golds.push_back(std::move(g));
    res.ranked.push_back(std::move(ranked));
  }
  res.n_evaluated = top1.size();
  if (res.n_evaluated == 0) throw InputError("no QA examples could be evaluated (all skipped)");
  res.acc = exact_match_accuracy(top1, golds);
  res.mrr = mean_reciprocal_rank(res.ranked, golds);
  return res;
}

struct EvalReport {
  std::optional<CrossEntropy> lm;
  std::optional<QAResult> qa;

  double perplexity() const { return std::exp(lm.value().nats); }
};

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j = nlohmann::json::object();
  if (r.lm) {
    j["cross_entropy"] = r.lm->nats;
    j["perplexity"] = r.perplexity();
    j["token_count"] = r.lm->token_count;
  }
  if (r.qa) {
    j["acc"] = r.qa->acc;
    j["mrr"] = r.qa->mrr;
    j["n_evaluated"] = r.qa->n_evaluated;
    j["n_skipped"] = r.qa->n_skipped;
  }
  return j;
}

inline void print_report(const EvalReport& r, std::ostream& os) {
  auto row = [&](const char* k, const std::string& v) {
    os << "  " << k << std::string(14 - std::string(k).size(), ' ') << v << "\n";
  };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  os << "metric        value\n";
  if (r.lm) {
    row("cross_entropy", num(r.lm->nats));
    row("perplexity", num(r.perplexity()));
    row("token_count", std::to_string(r.lm->token_count));
  }
  if (r.qa) {
    row("acc", num(r.qa->acc));
    row("mrr", num(r.qa->mrr));
    row("n_evaluated", std::to_string(r.qa->n_evaluated));
    row("n_skipped", std::to_string(r.qa->n_skipped));
  }
}

}  // namespace biomamba::eval
