// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cctype>
#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "biomamba/data/batching.hpp"
#include "biomamba/data/tokenizer.hpp"

namespace biomamba::data {

struct Answer {
  std::string text;
  std::size_t answer_start = 0;  // code-point offset into the context
};

struct QAExample {
  std::string id;
  std::string question;
  std::string context;
  std::vector<Answer> answers;
};

// Byte offset of every code point, plus a trailing entry for the end.
inline std::vector<std::size_t> code_point_offsets(std::string_view s) {
  std::vector<std::size_t> off;
  for (std::size_t i = 0; i < s.size(); ++i)
    if ((static_cast<unsigned char>(s[i]) & 0xc0) != 0x80) off.push_back(i);
  off.push_back(s.size());
  return off;
}

inline std::size_t code_point_count(std::string_view s) { return code_point_offsets(s).size() - 1; }

// Byte range [begin, end) of an answer inside its context, or nullopt when
// answer_start does not point at the answer text.
inline std::optional<std::pair<std::size_t, std::size_t>> answer_byte_range(const QAExample& ex, const Answer& a) {
  const auto off = code_point_offsets(ex.context);
  if (a.answer_start >= off.size()) return std::nullopt;
  const std::size_t b = off[a.answer_start];
  if (b + a.text.size() > ex.context.size() || ex.context.compare(b, a.text.size(), a.text) != 0) return std::nullopt;
  return std::make_pair(b, b + a.text.size());
}

namespace detail {
inline const nlohmann::json& need(const nlohmann::json& node, const char* key, const std::string& path) {
  if (!node.is_object() || !node.contains(key)) throw ParseError("missing field '" + path + "." + key + "'");
  return node.at(key);
}

inline std::string need_string(const nlohmann::json& node, const char* key, const std::string& path) {
  const auto& v = need(node, key, path);
  if (!v.is_string()) throw ParseError("field '" + path + "." + key + "' must be a string");
  return v.get<std::string>();
}

inline const nlohmann::json& need_array(const nlohmann::json& node, const char* key, const std::string& path) {
  const auto& v = need(node, key, path);
  if (!v.is_array()) throw ParseError("field '" + path + "." + key + "' must be an array");
  return v;
}
}  // namespace detail

// SQuAD v1.1 layout: data[].paragraphs[].{context, qas[].{id, question,
// answers[].{text, answer_start}}}.
inline std::vector<QAExample> load_squad_qa(const nlohmann::json& doc) {
  using detail::need_array;
  using detail::need_string;
  std::vector<QAExample> out;
  std::vector<std::string> mismatched;
  const auto& data = need_array(doc, "data", "$");
  for (std::size_t d = 0; d < data.size(); ++d) {
    const std::string dp = "$.data[" + std::to_string(d) + "]";
    const auto& paragraphs = need_array(data[d], "paragraphs", dp);
    for (std::size_t p = 0; p < paragraphs.size(); ++p) {
      const std::string pp = dp + ".paragraphs[" + std::to_string(p) + "]";
      const std::string context = need_string(paragraphs[p], "context", pp);
      const auto& qas = need_array(paragraphs[p], "qas", pp);
      for (std::size_t q = 0; q < qas.size(); ++q) {
        const std::string qp = pp + ".qas[" + std::to_string(q) + "]";
        QAExample ex;
        ex.id = need_string(qas[q], "id", qp);
        ex.question = need_string(qas[q], "question", qp);
        ex.context = context;
        const auto& answers = need_array(qas[q], "answers", qp);
        bool ok = true;
        for (std::size_t a = 0; a < answers.size(); ++a) {
          const std::string ap = qp + ".answers[" + std::to_string(a) + "]";
          Answer ans;
          ans.text = need_string(answers[a], "text", ap);
          const auto& start = detail::need(answers[a], "answer_start", ap);
          if (!start.is_number_integer() || start.get<std::int64_t>() < 0)
            throw ParseError("field '" + ap + ".answer_start' must be a non-negative integer");
          ans.answer_start = start.get<std::size_t>();
          ex.answers.push_back(ans);
          ok = ok && answer_byte_range(ex, ans).has_value();
        }
        if (!ok) mismatched.push_back(ex.id);
        out.push_back(std::move(ex));
      }
    }
  }
  if (!mismatched.empty()) {
    std::string ids;
    for (const auto& id : mismatched) ids += (ids.empty() ? "" : ", ") + id;
    throw ValidationError("answer_start does not point at the answer text for example(s): " + ids);
  }
  return out;
}

inline std::vector<QAExample> load_squad_qa_string(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed JSON at $: ") + e.what());
  }
  return load_squad_qa(doc);
}

inline std::vector<QAExample> load_squad_qa_file(const std::string& path) {
  try {
    return load_squad_qa_string(read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

// Token-level layout of one QA input: question <sep> context, truncated to
// context_len. start/end are inclusive indices into `tokens`.
struct QASpan {
  EncodedSequence tokens;
  std::size_t context_begin = 0;
  std::size_t start = 0, end = 0;
  std::size_t answer_index = 0;
};

struct QALayout {
  EncodedSequence tokens;
  std::size_t context_begin = 0;
  std::vector<std::size_t> token_byte_begin;  // per context token, into the context
};

inline QALayout layout_qa(const QAExample& ex, const Vocabulary& vocab, std::size_t context_len) {
  QALayout l;
  l.tokens = encode(ex.question, vocab);
  l.tokens.push_back(vocab.specials().sep);
  l.context_begin = l.tokens.size();
  const auto ctx = encode(ex.context, vocab);
  std::size_t byte = 0;
  for (TokenId t : ctx) {
    if (l.tokens.size() >= context_len) break;
    l.token_byte_begin.push_back(byte);
    byte += vocab.token(t).size();
    l.tokens.push_back(t);
  }
  if (l.tokens.size() > context_len) l.tokens.resize(context_len);
  return l;
}

// First answer whose token span fits inside the truncated window, or
// nullopt (skip) when none does.
inline std::optional<QASpan> map_answer_to_token_span(const QAExample& ex, const Vocabulary& vocab,
                                                      std::size_t context_len) {
  auto l = layout_qa(ex, vocab, context_len);
  if (l.context_begin >= l.tokens.size()) return std::nullopt;
  const std::size_t n_ctx = l.tokens.size() - l.context_begin;
  for (std::size_t a = 0; a < ex.answers.size(); ++a) {
    auto range = answer_byte_range(ex, ex.answers[a]);
    if (!range || range->first == range->second) continue;
    const auto [bb, be] = *range;
    // Last token starting at or before bb, last token starting before be.
    auto first_after = [&](std::size_t byte) {
      return static_cast<std::size_t>(std::upper_bound(l.token_byte_begin.begin(), l.token_byte_begin.end(), byte) -
                                      l.token_byte_begin.begin());
    };
    const std::size_t s = first_after(bb) - 1;
    const std::size_t e = first_after(be - 1) - 1;
    if (e >= n_ctx) continue;
    // The last kept token must reach past the answer end.
    const std::size_t e_end = e + 1 < l.token_byte_begin.size() ? l.token_byte_begin[e + 1]
                                                                : l.token_byte_begin[e] + vocab.token(l.tokens[l.context_begin + e]).size();
    if (e_end < be) continue;
    QASpan span;
    span.tokens = l.tokens;
    span.context_begin = l.context_begin;
    span.start = l.context_begin + s;
    span.end = l.context_begin + e;
    span.answer_index = a;
    return span;
  }
  return std::nullopt;
}

// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
// whitespace.
inline std::string normalize_answer(std::string_view s) {
  std::string cleaned;
  for (char c : s) {
    const auto u = static_cast<unsigned char>(c);
    if (u < 0x80 && std::ispunct(u)) continue;
    cleaned.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : c);
  }
  std::string out;
  std::size_t i = 0;
  while (i < cleaned.size()) {
    while (i < cleaned.size() && std::isspace(static_cast<unsigned char>(cleaned[i]))) ++i;
    std::size_t j = i;
    while (j < cleaned.size() && !std::isspace(static_cast<unsigned char>(cleaned[j]))) ++j;
    if (j > i) {
      const std::string_view w(cleaned.data() + i, j - i);
      if (w != "a" && w != "an" && w != "the") {
        if (!out.empty()) out.push_back(' ');
        out.append(w);
      }
    }
    i = j;
  }
  return out;
}

}  // namespace biomamba::data
