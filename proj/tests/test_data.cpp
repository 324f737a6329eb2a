// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include "biomamba/data/batching.hpp"
#include "biomamba/data/squad.hpp"
#include "biomamba/data/tokenizer.hpp"

namespace bd = biomamba::data;
namespace bm = biomamba;
using biomamba::uniform_below;

namespace {

// Applies each merge in turn as a full left-to-right pass.
bd::EncodedSequence reference_encode(const std::string& text, const bd::Vocabulary& v) {
  bd::EncodedSequence s;
  for (unsigned char c : text) s.push_back(c);
  for (const auto& m : v.merges()) {
    bd::EncodedSequence out;
    for (std::size_t i = 0; i < s.size();) {
      if (i + 1 < s.size() && s[i] == m.left && s[i + 1] == m.right) {
        out.push_back(m.result);
        i += 2;
      } else {
        out.push_back(s[i++]);
      }
    }
    s = std::move(out);
  }
  return s;
}

void append_utf8(std::string& s, std::uint32_t cp) {
  if (cp < 0x80) {
    s.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    s.push_back(static_cast<char>(0xc0 | (cp >> 6)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  } else if (cp < 0x10000) {
    s.push_back(static_cast<char>(0xe0 | (cp >> 12)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  } else {
    s.push_back(static_cast<char>(0xf0 | (cp >> 18)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3f)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  }
}

std::string random_utf8(std::mt19937_64& rng, std::size_t max_cp) {
  std::uniform_int_distribution<std::size_t> len(0, max_cp);
  std::uniform_int_distribution<int> plane(0, 3);
  std::string s;
  for (std::size_t i = 0, n = len(rng); i < n; ++i) {
    std::uint32_t cp = 0;
    switch (plane(rng)) {
      case 0: cp = std::uniform_int_distribution<std::uint32_t>(0x20, 0x7e)(rng); break;
      case 1: cp = std::uniform_int_distribution<std::uint32_t>(0x80, 0x7ff)(rng); break;
      case 2:
        do cp = std::uniform_int_distribution<std::uint32_t>(0x800, 0xffff)(rng);
        while (cp >= 0xd800 && cp <= 0xdfff);
        break;
      default: cp = std::uniform_int_distribution<std::uint32_t>(0x10000, 0x10ffff)(rng);
    }
    append_utf8(s, cp);
  }
  return s;
}

const char* kBioText =
    "alpha-synuclein aggregates in dopaminergic neurons. the protein alpha-synuclein binds lipid membranes. "
    "mutations in the gene encoding alpha-synuclein cause familial parkinson disease. ";

}  // namespace

TEST(BPE, FirstMergeIsMostFrequentPair) {
  auto v = bd::train_bpe({"aaab aaab"}, 261);
  ASSERT_EQ(v.merges().size(), 1u);
  EXPECT_EQ(v.merge_strings()[0], std::make_pair(std::string("a"), std::string("a")));
  EXPECT_EQ(v.size(), 261u);
}

TEST(BPE, BoundaryAndNoRepeats) {
  auto v = bd::train_bpe({"aaab aaab"}, 260);
  EXPECT_TRUE(v.merges().empty());
  EXPECT_EQ(v.size(), 260u);
  auto u = bd::train_bpe({"abcdefg"}, 400);
  EXPECT_TRUE(u.merges().empty());
  EXPECT_THROW(bd::train_bpe({""}, 300), bm::InputError);
  EXPECT_THROW(bd::train_bpe({"abc"}, 259), bm::InputError);
}

TEST(BPE, TieBreakIsLexicographic) {
  // "ab" and "cd" both occur twice; ("a","b") sorts first.
  auto v = bd::train_bpe({"cdab cdab"}, 261);
  EXPECT_EQ(v.merge_strings()[0], std::make_pair(std::string("a"), std::string("b")));
}

TEST(BPE, DeterministicAndMatchesBruteForceCounts) {
  std::vector<std::string> corpus{kBioText, "the quick brown fox jumps over the lazy dog"};
  auto a = bd::train_bpe(corpus, 300);
  auto b = bd::train_bpe(corpus, 300);
  EXPECT_EQ(a.merge_strings(), b.merge_strings());
  EXPECT_GT(a.merges().size(), 10u);
  // The first merge must be the maximal-count pair under brute-force counting.
  std::map<std::pair<char, char>, int> counts;
  for (const auto& doc : corpus)
    for (std::size_t i = 0; i + 1 < doc.size(); ++i) ++counts[{doc[i], doc[i + 1]}];
  int best = 0;
  std::pair<char, char> best_pair{};
  for (const auto& [p, c] : counts)
    if (c > best) best = c, best_pair = p;
  EXPECT_EQ(a.merge_strings()[0].first, std::string(1, best_pair.first));
  EXPECT_EQ(a.merge_strings()[0].second, std::string(1, best_pair.second));
}

TEST(Encode, EmptyAndIdentityWithoutMerges) {
  bd::Vocabulary v;
  EXPECT_TRUE(bd::encode("", v).empty());
  auto e = bd::encode("héllo", v);
  const std::string s = "héllo";
  ASSERT_EQ(e.size(), s.size());
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(e[i], static_cast<unsigned char>(s[i]));
}

TEST(Encode, MatchesSequentialMergeOracle) {
  auto v = bd::train_bpe({kBioText, "aaaaaaa bbbbbbb abababab"}, 360);
  std::mt19937_64 rng(7);
  const std::string alphabet = "abeilnoprstuy- .";
  for (int trial = 0; trial < 500; ++trial) {
    std::string s;
    const std::size_t n = std::uniform_int_distribution<std::size_t>(0, 80)(rng);
    for (std::size_t i = 0; i < n; ++i) s.push_back(alphabet[uniform_below(rng, alphabet.size())]);
    ASSERT_EQ(bd::encode(s, v), reference_encode(s, v)) << s;
  }
  EXPECT_EQ(bd::encode(kBioText, v), reference_encode(kBioText, v));
}

TEST(Encode, NeverEmitsSpecials) {
  auto v = bd::train_bpe({kBioText}, 320);
  for (auto id : bd::encode(kBioText, v)) EXPECT_FALSE(v.is_special(id));
}

TEST(Decode, RoundTripAndSpecials) {
  auto v = bd::train_bpe({kBioText}, 320);
  const std::string s = "α-synuclein";
  EXPECT_EQ(bd::decode(bd::encode(s, v), v), s);
  EXPECT_EQ(bd::decode({}, v), "");
  auto e = bd::encode("ab", v);
  e.insert(e.begin() + 1, v.specials().pad);
  e.push_back(v.specials().eos);
  EXPECT_EQ(bd::decode(e, v), "ab");
  EXPECT_THROW(bd::decode({static_cast<bd::TokenId>(v.size())}, v), bm::InputError);
}

TEST(Decode, InvalidUtf8BecomesReplacementCharacter) {
  bd::Vocabulary v;
  // Lone continuation byte, truncated 2-byte lead, overlong encoding, surrogate.
  EXPECT_EQ(bd::decode({'a', 0x80, 'b'}, v), "a\xEF\xBF\xBD" "b");
  EXPECT_EQ(bd::decode({0xC3}, v), "\xEF\xBF\xBD");
  EXPECT_EQ(bd::decode({0xC0, 0xAF}, v), "\xEF\xBF\xBD\xEF\xBF\xBD");
  EXPECT_EQ(bd::decode({0xED, 0xA0, 0x80}, v), "\xEF\xBF\xBD\xEF\xBF\xBD\xEF\xBF\xBD");
}

TEST(Decode, RandomUtf8RoundTrip) {
  std::mt19937_64 rng(11);
  std::vector<std::string> corpus;
  for (int i = 0; i < 50; ++i) corpus.push_back(random_utf8(rng, 40));
  auto v = bd::train_bpe(corpus, 400);
  for (int i = 0; i < 2000; ++i) {
    const auto s = random_utf8(rng, 30);
    ASSERT_EQ(bd::decode(bd::encode(s, v), v), s);
  }
}

TEST(VocabFile, RoundTripAndErrors) {
  auto v = bd::train_bpe({kBioText}, 300);
  const auto text = bd::vocabulary_to_string(v);
  EXPECT_EQ(text.substr(0, text.find('\n')), "bpe-vocab v1 " + std::to_string(v.size()));
  auto w = bd::vocabulary_from_string(text);
  EXPECT_EQ(w.size(), v.size());
  EXPECT_EQ(w.merge_strings(), v.merge_strings());
  EXPECT_EQ(bd::encode(kBioText, w), bd::encode(kBioText, v));
  EXPECT_EQ(bd::vocabulary_to_string(bd::Vocabulary{}), "bpe-vocab v1 260\n");
  EXPECT_THROW(bd::vocabulary_from_string("bpe-vocab v2 260\n"), bm::ParseError);
  EXPECT_THROW(bd::vocabulary_from_string("bpe-vocab v1 261\n"), bm::ParseError);
  EXPECT_THROW(bd::vocabulary_from_string("bpe-vocab v1 261\n61 zz\n"), bm::ParseError);
}

TEST(Batching, TenTokensContextFive) {
  std::vector<bd::TokenId> corpus{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  auto batches = bd::build_lm_batches(corpus, 5, 5, 1);
  ASSERT_EQ(batches.size(), 2u);
  std::set<bd::TokenId> firsts;
  for (const auto& b : batches) {
    ASSERT_EQ(b.batch, 1u);
    firsts.insert(b.inputs[0]);
    for (std::size_t t = 0; t < 4; ++t) {
      EXPECT_EQ(b.targets[t], b.inputs[t + 1]);
      EXPECT_EQ(b.valid[t], 1);
    }
    EXPECT_EQ(b.valid[4], 0);
  }
  EXPECT_EQ(firsts, (std::set<bd::TokenId>{1, 6}));
  EXPECT_THROW(bd::build_lm_batches(std::vector<bd::TokenId>{1}, 5, 5, 1), bm::InputError);
  EXPECT_THROW(bd::build_lm_batches(corpus, 1, 5, 1), bm::ContractError);
}

TEST(Batching, ValidCountAndShiftProperty) {
  std::mt19937_64 rng(3);
  for (std::size_t n : {2u, 3u, 17u, 100u, 101u, 257u, 1000u}) {
    for (std::size_t ctx : {2u, 5u, 16u, 64u}) {
      std::vector<bd::TokenId> corpus(n);
      for (auto& t : corpus) t = static_cast<bd::TokenId>(uniform_below(rng, 256));
      auto batches = bd::build_lm_batches(corpus, ctx, 3 * ctx, 9);
      std::size_t valid = 0;
      for (const auto& b : batches) {
        valid += b.valid_count();
        for (std::size_t i = 0; i < b.inputs.size(); ++i)
          if (b.valid[i]) EXPECT_EQ(b.targets[i], b.inputs[i + 1]);
      }
      EXPECT_EQ(valid, n - (n + ctx - 1) / ctx) << "n=" << n << " ctx=" << ctx;
    }
  }
}

TEST(Batching, SeedDeterminesOrder) {
  std::vector<bd::TokenId> corpus(500);
  for (std::size_t i = 0; i < corpus.size(); ++i) corpus[i] = static_cast<bd::TokenId>(i % 250);
  auto a = bd::build_lm_batches(corpus, 10, 20, 5);
  auto b = bd::build_lm_batches(corpus, 10, 20, 5);
  auto c = bd::build_lm_batches(corpus, 10, 20, 6);
  ASSERT_EQ(a.size(), b.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].inputs, b[i].inputs);
    differs |= a[i].inputs != c[i].inputs;
  }
  EXPECT_TRUE(differs);
}

TEST(Batching, StreamCoversEveryWindowPerEpoch) {
  std::vector<bd::TokenId> corpus(95);
  for (std::size_t i = 0; i < corpus.size(); ++i) corpus[i] = static_cast<bd::TokenId>(i);
  bd::BatchStream stream(corpus, 10, 30, 4);
  ASSERT_EQ(stream.windows(), 10u);
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::multiset<bd::TokenId> starts;
    for (int i = 0; i < 4; ++i) {
      auto b = stream.next();
      for (std::size_t r = 0; r < b.batch; ++r) starts.insert(b.inputs[r * 10]);
    }
    EXPECT_EQ(starts.size(), 10u);
    EXPECT_EQ(std::set<bd::TokenId>(starts.begin(), starts.end()).size(), 10u);
  }
}

namespace {

std::string squad_json(const std::vector<std::tuple<std::string, std::string, std::string, int>>& rows) {
  nlohmann::json qas = nlohmann::json::array();
  std::string context;
  nlohmann::json paragraphs = nlohmann::json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& [ctx, q, ans, start] = rows[i];
    paragraphs.push_back({{"context", ctx},
                          {"qas", {{{"id", "q" + std::to_string(i)},
                                    {"question", q},
                                    {"answers", {{{"text", ans}, {"answer_start", start}}}}}}}});
  }
  return nlohmann::json{{"version", "1.1"}, {"data", {{{"title", "t"}, {"paragraphs", paragraphs}}}}}.dump();
}

}  // namespace

TEST(Squad, LoadsAndValidates) {
  const std::string ctx = "Spermidine extends lifespan in yeast.";
  auto ex = bd::load_squad_qa_string(squad_json({{ctx, "What extends lifespan?", "Spermidine", 0}}));
  ASSERT_EQ(ex.size(), 1u);
  EXPECT_EQ(ex[0].id, "q0");
  EXPECT_EQ(ex[0].answers[0].text, "Spermidine");
  EXPECT_TRUE(bd::load_squad_qa_string(R"({"data": []})").empty());
  try {
    bd::load_squad_qa_string(squad_json({{ctx, "What?", "Spermidine", 3}}));
    FAIL();
  } catch (const bm::ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("q0"), std::string::npos);
  }
}

TEST(Squad, AnswerStartCountsCodePoints) {
  const std::string ctx = "α-synuclein and β-amyloid";
  // "β-amyloid" starts at code point 16 but byte 17.
  auto ex = bd::load_squad_qa_string(squad_json({{ctx, "Which?", "β-amyloid", 16}}));
  EXPECT_EQ(ex.size(), 1u);
  EXPECT_THROW(bd::load_squad_qa_string(squad_json({{ctx, "Which?", "β-amyloid", 17}})), bm::ValidationError);
}

TEST(Squad, MissingFieldNamesPath) {
  try {
    bd::load_squad_qa_string(R"({"data": [{"paragraphs": [{"context": "x", "qas": [{"id": "a", "answers": []}]}]}]})");
    FAIL();
  } catch (const bm::ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("$.data[0].paragraphs[0].qas[0].question"), std::string::npos) << e.what();
  }
  EXPECT_THROW(bd::load_squad_qa_string("{not json"), bm::ParseError);
  EXPECT_THROW(bd::load_squad_qa_string(R"({"data": 3})"), bm::ParseError);
}

TEST(Squad, LoadsFactoidTrainCardinality) {
  // A document with the 4b-factoid training set's size: 327 questions.
  std::vector<std::tuple<std::string, std::string, std::string, int>> rows;
  for (int i = 0; i < 327; ++i)
    rows.emplace_back("Gene G" + std::to_string(i) + " encodes protein P" + std::to_string(i) + ".",
                      "What does G" + std::to_string(i) + " encode?", "protein P" + std::to_string(i),
                      static_cast<int>(("Gene G" + std::to_string(i) + " encodes ").size()));
  EXPECT_EQ(bd::load_squad_qa_string(squad_json(rows)).size(), 327u);
}

TEST(SpanMapping, WholeContextAndTruncation) {
  auto v = bd::train_bpe({kBioText}, 320);
  bd::QAExample ex{"x", "what?", "alpha-synuclein", {{"alpha-synuclein", 0}}};
  auto span = bd::map_answer_to_token_span(ex, v, 256);
  ASSERT_TRUE(span.has_value());
  EXPECT_EQ(span->start, span->context_begin);
  EXPECT_EQ(span->end, span->tokens.size() - 1);

  bd::QAExample far{"y", "q", std::string(300, 'z') + " target", {{"target", 301}}};
  EXPECT_FALSE(bd::map_answer_to_token_span(far, bd::Vocabulary{}, 64).has_value());
  EXPECT_TRUE(bd::map_answer_to_token_span(far, bd::Vocabulary{}, 512).has_value());
}

TEST(SpanMapping, DecodedSpanContainsAnswer) {
  auto v = bd::train_bpe({kBioText}, 360);
  std::mt19937_64 rng(21);
  const std::string words[] = {"alpha", "synuclein", "protein", "binds", "neurons", "the", "lipid", "gene", "αβ"};
  for (int trial = 0; trial < 1000; ++trial) {
    std::string ctx;
    const std::size_t n = 3 + uniform_below(rng, 20);
    for (std::size_t i = 0; i < n; ++i) ctx += (i ? " " : "") + words[uniform_below(rng, std::size(words))];
    const auto cps = bd::code_point_offsets(ctx);
    const std::size_t ncp = cps.size() - 1;
    const std::size_t a = uniform_below(rng, ncp);
    const std::size_t b = a + 1 + uniform_below(rng, ncp - a);
    const std::string answer = ctx.substr(cps[a], cps[b] - cps[a]);
    bd::QAExample ex{"r", "question here", ctx, {{answer, a}}};
    auto span = bd::map_answer_to_token_span(ex, v, 512);
    ASSERT_TRUE(span.has_value());
    // Decode raw bytes of the span so partial code points stay comparable.
    std::string bytes;
    for (std::size_t t = span->start; t <= span->end; ++t) bytes += v.token(span->tokens[t]);
    EXPECT_NE(bytes.find(answer), std::string::npos) << answer << " in " << bytes;
  }
}

TEST(Normalize, SquadConvention) {
  EXPECT_EQ(bd::normalize_answer("The spermidine."), "spermidine");
  EXPECT_EQ(bd::normalize_answer("spermidine"), "spermidine");
  EXPECT_EQ(bd::normalize_answer("  An   apple, a DAY "), "apple day");
  EXPECT_EQ(bd::normalize_answer("theory"), "theory");
  EXPECT_EQ(bd::normalize_answer("α-Synuclein"), "αsynuclein");
}
