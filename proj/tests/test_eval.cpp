// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "biomamba/eval.hpp"
#include "biomamba/train.hpp"
#include "toy_data.hpp"

namespace bm = biomamba;
namespace md = biomamba::model;
namespace ev = biomamba::eval;

namespace {

md::ModelConfig tiny(md::BlockType type = md::BlockType::kSSM) {
  md::ModelConfig c;
  c.block_type = type;
  c.n_layers = 2;
  c.d_model = 32;
  c.d_inner = 64;
  c.n_state = 8;
  c.n_heads = 2;
  c.head_dim = 16;
  c.context_len = 32;
  c.seed = 4;
  return c;
}

template <class T>
void zero_all(const md::LMModel<T>& m) {
  for (auto p : m.parameters())
    for (auto& v : p.tensor.mutable_data()) v = T(0);
}

std::vector<bm::data::TokenId> random_corpus(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<bm::data::TokenId> out(n);
  for (auto& t : out) t = static_cast<bm::data::TokenId>(bm::uniform_below(rng, 256));
  return out;
}

const double kInf = std::numeric_limits<double>::infinity();

std::vector<ev::SpanCandidate> brute_force(const std::vector<double>& s, const std::vector<double>& e, std::size_t k,
                                           std::size_t max_len) {
  std::vector<ev::SpanCandidate> all;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = i; j < e.size() && j <= i + max_len; ++j)
      if (std::isfinite(s[i]) && std::isfinite(e[j])) all.push_back({i, j, s[i] + e[j]});
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return std::tie(b.score, a.start, a.end) < std::tie(a.score, b.start, b.end);
  });
  if (all.size() > k) all.resize(k);
  return all;
}

}  // namespace

TEST(CrossEntropy, UniformModelGivesLogVocab) {
  for (auto type : {md::BlockType::kSSM, md::BlockType::kTransformer, md::BlockType::kRNN}) {
    auto m = md::init_model<double>(tiny(type));
    zero_all(m);
    const auto corpus = random_corpus(300, 1);
    auto ce = ev::corpus_cross_entropy(m, corpus, 32);
    EXPECT_NEAR(ce.nats, std::log(260.0), 1e-12);
    // 300 tokens in 10 windows: 290 targets.
    EXPECT_EQ(ce.token_count, 290u);
    EXPECT_NEAR(ev::perplexity(m, corpus, 32) / 260.0, 1.0, 1e-6);
  }
}

TEST(CrossEntropy, MatchesAggregatedLmLoss) {
  auto m = md::init_model<float>(tiny());
  const auto corpus = random_corpus(1000, 2);
  auto ce = ev::corpus_cross_entropy(m, corpus, 32, 3);
  double sum = 0, count = 0;
  for (const auto& b : bm::data::build_lm_batches(corpus, 32, 32 * 5, 0)) {
    bm::NoGradScope<float> ng;
    auto loss = md::lm_loss(md::lm_forward(m, b.inputs, b.batch, b.context_len), b.targets, b.valid);
    sum += static_cast<double>(loss.item()) * static_cast<double>(b.valid_count());
    count += static_cast<double>(b.valid_count());
  }
  EXPECT_NEAR(ce.nats, sum / count, 1e-6);
}

TEST(CrossEntropy, CertainModelGivesZero) {
  // Zeroed RNN blocks pass the embedding through; the untied head puts a
  // logit of 3200 on token 65 for that embedding.
  auto c = tiny(md::BlockType::kRNN);
  c.tie_embeddings = false;
  auto m = md::init_model<double>(c);
  zero_all(m);
  for (auto p : m.parameters())
    if (p.name.find("gain") != std::string::npos)
      for (auto& v : p.tensor.mutable_data()) v = 1;
  auto emb = m.token_embedding.mutable_data();
  auto head = m.untied_head.mutable_data();
  for (std::size_t j = 0; j < 32; ++j) emb[65 * 32 + j] = 1, head[65 * 32 + j] = 100;
  std::vector<bm::data::TokenId> corpus(100, 65);
  EXPECT_NEAR(ev::corpus_cross_entropy(m, corpus, 32).nats, 0.0, 1e-12);
}

TEST(CrossEntropy, RejectsShortCorpus) {
  auto m = md::init_model<float>(tiny());
  std::vector<bm::data::TokenId> one{5};
  EXPECT_THROW(ev::corpus_cross_entropy(m, one, 32), bm::InputError);
}

TEST(Metrics, ReportedRowsAreSelfConsistent) {
  // Two-decimal perplexity / cross-entropy pairs as they are usually reported.
  EXPECT_EQ(std::round(std::log(505.62) * 100) / 100, 6.23);
  EXPECT_EQ(std::round(std::log(4535.04) * 100) / 100, 8.42);
  // PPL 2.93 and CE 1.07 agree up to rounding of both: exp of some CE in
  // [1.065, 1.075) rounds to 2.93.
  const double lo = std::max(1.065, std::log(2.925)), hi = std::min(1.075, std::log(2.935));
  EXPECT_LT(lo, hi);
  EXPECT_NEAR(std::exp(1.075), 2.93, 0.005);
}

TEST(TopK, DominantSpan) {
  std::vector<double> s(10, 0), e(10, 0);
  s[3] = 10;
  e[5] = 10;
  auto top = ev::extract_top_k_spans<double>(s, e, 5, 30);
  ASSERT_FALSE(top.empty());
  EXPECT_EQ(top[0].start, 3u);
  EXPECT_EQ(top[0].end, 5u);
  EXPECT_EQ(top.size(), 5u);
}

TEST(TopK, ZeroMaxLengthGivesSingleTokenSpans) {
  std::vector<double> s{1, 4, 2, 0}, e{0, 1, 5, 3};
  auto top = ev::extract_top_k_spans<double>(s, e, 10, 0);
  ASSERT_EQ(top.size(), 4u);
  for (const auto& c : top) EXPECT_EQ(c.start, c.end);
  EXPECT_EQ(top[0].start, 2u);  // 2 + 5
}

TEST(TopK, AllMaskedIsEmpty) {
  std::vector<double> s(6, -kInf), e(6, -kInf);
  EXPECT_TRUE(ev::extract_top_k_spans<double>(s, e).empty());
  EXPECT_THROW(ev::extract_top_k_spans<double>(s, e, 0), bm::ContractError);
}

TEST(TopK, MatchesBruteForce) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + bm::uniform_below(rng, 32);
    const std::size_t k = 1 + bm::uniform_below(rng, 8);
    const std::size_t max_len = bm::uniform_below(rng, 12);
    const std::size_t masked = bm::uniform_below(rng, n + 1);
    std::vector<double> s(n), e(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Small integers make ties common.
      s[i] = i < masked ? -kInf : static_cast<double>(bm::uniform_below(rng, 5));
      e[i] = i < masked ? -kInf : static_cast<double>(bm::uniform_below(rng, 5));
    }
    auto got = ev::extract_top_k_spans<double>(s, e, k, max_len);
    auto want = brute_force(s, e, k, max_len);
    ASSERT_EQ(got.size(), want.size()) << trial;
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].start, want[i].start) << trial;
      EXPECT_EQ(got[i].end, want[i].end) << trial;
      EXPECT_EQ(got[i].score, want[i].score) << trial;
    }
  }
}

TEST(Metrics, ExactMatch) {
  EXPECT_EQ(ev::exact_match_accuracy({"spermidine"}, {{"spermidine"}}), 1.0);
  EXPECT_EQ(ev::exact_match_accuracy({"The spermidine."}, {{"spermidine"}}), 1.0);
  EXPECT_EQ(ev::exact_match_accuracy({"x", "y"}, {{"a"}, {"b", "c"}}), 0.0);
  EXPECT_EQ(ev::exact_match_accuracy({"x", "c"}, {{"a"}, {"b", "c"}}), 0.5);
  EXPECT_THROW(ev::exact_match_accuracy({}, {}), bm::InputError);
}

TEST(Metrics, ReciprocalRank) {
  auto ranked = [](std::vector<std::string> xs) {
    ev::RankedAnswers r;
    for (auto& x : xs) r.push_back({x, 0});
    return r;
  };
  EXPECT_EQ(ev::mean_reciprocal_rank({ranked({"a", "b"}), ranked({"c"})}, {{"a"}, {"c"}}), 1.0);
  EXPECT_NEAR(ev::mean_reciprocal_rank({ranked({"g", "x", "y"}), ranked({"x", "g"}), ranked({"x", "y", "z", "g"})},
                                       {{"g"}, {"g"}, {"g"}}),
              (1 + 0.5 + 0.25) / 3, 1e-15);
  EXPECT_EQ(ev::mean_reciprocal_rank({ranked({"x"}), ranked({})}, {{"g"}, {"g"}}), 0.0);
  EXPECT_THROW(ev::mean_reciprocal_rank({}, {}), bm::InputError);
}

TEST(Metrics, MrrBoundsAccAndIgnoresOrder) {
  std::mt19937_64 rng(3);
  const std::vector<std::string> words = {"a1", "b2", "c3", "d4", "e5", "f6"};
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + bm::uniform_below(rng, 12);
    std::vector<ev::RankedAnswers> ranked(n);
    std::vector<std::vector<std::string>> golds(n);
    std::vector<std::string> top1(n);
    for (std::size_t q = 0; q < n; ++q) {
      const std::size_t len = bm::uniform_below(rng, 6);
      for (std::size_t r = 0; r < len; ++r) ranked[q].push_back({words[bm::uniform_below(rng, words.size())], 0});
      golds[q] = {words[bm::uniform_below(rng, words.size())]};
      top1[q] = ranked[q].empty() ? "" : ranked[q][0].text;
    }
    const double acc = ev::exact_match_accuracy(top1, golds), mrr = ev::mean_reciprocal_rank(ranked, golds);
    EXPECT_GE(mrr, acc);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<ev::RankedAnswers> r2;
    std::vector<std::vector<std::string>> g2;
    std::vector<std::string> t2;
    for (auto i : perm) r2.push_back(ranked[i]), g2.push_back(golds[i]), t2.push_back(top1[i]);
    EXPECT_NEAR(ev::exact_match_accuracy(t2, g2), acc, 1e-12);
    EXPECT_NEAR(ev::mean_reciprocal_rank(r2, g2), mrr, 1e-12);
  }
}

TEST(QA, FinetuneOverfitsToyTrainingSet) {
  const auto examples = toy::factoid_examples(50, 1);
  bm::data::Vocabulary vocab;
  auto c = tiny();
  c.context_len = 128;
  auto m = md::init_model<float>(c);
  std::size_t skipped = 0;
  const auto spans = bm::train::prepare_qa(examples, vocab, c.context_len, &skipped);
  ASSERT_EQ(skipped, 0u);
  bm::train::finetune_qa_loop(m, spans, {20, 400, 5e-3, 1e-5}, {}, 0);
  auto res = ev::evaluate_qa(m, vocab, examples);
  EXPECT_EQ(res.n_evaluated, 50u);
  EXPECT_GE(res.acc, 0.9);
  EXPECT_GE(res.mrr, res.acc);
}

TEST(Report, JsonFieldsAndDefinitionalPerplexity) {
  ev::EvalReport r;
  r.lm = ev::CrossEntropy{1.07, 100};
  auto j = ev::report_to_json(r);
  EXPECT_EQ(j["perplexity"].get<double>(), std::exp(1.07));
  EXPECT_FALSE(j.contains("acc"));
  r.qa = ev::QAResult{0.5, 0.75, 4, 1, {}};
  j = ev::report_to_json(r);
  EXPECT_EQ(j["n_skipped"].get<std::size_t>(), 1u);
  EXPECT_EQ(j["mrr"].get<double>(), 0.75);
}
