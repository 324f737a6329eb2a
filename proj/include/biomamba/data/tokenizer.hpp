// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <queue>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "biomamba/error.hpp"

namespace biomamba::data {

using TokenId = std::int32_t;
using EncodedSequence = std::vector<TokenId>;

struct SpecialIds {
  TokenId pad = 256;
  TokenId bos = 257;
  TokenId eos = 258;
  TokenId sep = 259;
};

inline constexpr std::size_t kBaseVocab = 260;

// Byte-level vocabulary. Ids 0..255 are single bytes, 256..259 specials,
// 260.. tokens created by merges. Specials have display names in
// id_to_token but are absent from token_to_id, so no byte-string maps to
// them.
class Vocabulary {
 public:
  struct Merge {
    TokenId left, right, result;
  };

  Vocabulary() {
    for (int b = 0; b < 256; ++b) add_token(std::string(1, static_cast<char>(b)));
    for (const char* name : {"<pad>", "<bos>", "<eos>", "<sep>"}) id_to_token_.emplace_back(name);
  }

  std::size_t size() const { return id_to_token_.size(); }
  const SpecialIds& specials() const { return specials_; }
  bool is_special(TokenId id) const { return id >= specials_.pad && id <= specials_.sep; }
  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= size())
      throw InputError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
    return id_to_token_[id];
  }
  // -1 when the byte-string is not a token.
  TokenId find(std::string_view bytes) const {
    auto it = token_to_id_.find(std::string(bytes));
    return it == token_to_id_.end() ? -1 : it->second;
  }
  const std::vector<Merge>& merges() const { return merges_; }
  std::vector<std::pair<std::string, std::string>> merge_strings() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& m : merges_) out.emplace_back(id_to_token_[m.left], id_to_token_[m.right]);
    return out;
  }

  // Appends a merge; a result byte-string seen before reuses its id.
  TokenId add_merge(TokenId left, TokenId right) {
    if (is_special(left) || is_special(right)) throw ContractError("merges never involve special tokens");
    const std::string joined = token(left) + token(right);
    TokenId id = find(joined);
    if (id < 0) id = add_token(joined);
    merges_.push_back({left, right, id});
    rank_[pair_key(left, right)].push_back(merges_.size() - 1);
    return id;
  }

  // First merge rank >= min_rank of an adjacent pair, or -1. A pair can be
  // merged twice when a later merge recreates one of its tokens.
  std::int64_t rank(TokenId left, TokenId right, std::int64_t min_rank = 0) const {
    auto it = rank_.find(pair_key(left, right));
    if (it == rank_.end()) return -1;
    for (std::size_t r : it->second)
      if (static_cast<std::int64_t>(r) >= min_rank) return static_cast<std::int64_t>(r);
    return -1;
  }

  static std::uint64_t pair_key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
  }

 private:
  TokenId add_token(std::string bytes) {
    const auto id = static_cast<TokenId>(id_to_token_.size());
    token_to_id_.emplace(bytes, id);
    id_to_token_.push_back(std::move(bytes));
    return id;
  }

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<Merge> merges_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> rank_;
  SpecialIds specials_;
};

// Greedy BPE over the byte streams of `corpus` (pairs never span two
// documents). Each round merges the most frequent adjacent pair, counting
// overlapping occurrences and replacing non-overlapping ones left to right;
// ties go to the lexicographically smallest (left, right) byte-string pair.
// Stops at target_vocab or when no pair occurs twice.
inline Vocabulary train_bpe(const std::vector<std::string>& corpus, std::size_t target_vocab) {
  if (target_vocab < kBaseVocab)
    throw InputError("target vocabulary must be at least " + std::to_string(kBaseVocab));
  std::size_t total = 0;
  for (const auto& doc : corpus) total += doc.size();
  if (total == 0) throw InputError("cannot train a tokenizer on an empty corpus");

  Vocabulary vocab;
  std::vector<EncodedSequence> docs;
  for (const auto& doc : corpus) {
    EncodedSequence s(doc.size());
    for (std::size_t i = 0; i < doc.size(); ++i) s[i] = static_cast<unsigned char>(doc[i]);
    docs.push_back(std::move(s));
  }

  while (vocab.size() < target_vocab) {
    std::unordered_map<std::uint64_t, std::uint64_t> counts;
    for (const auto& s : docs)
      for (std::size_t i = 0; i + 1 < s.size(); ++i) ++counts[Vocabulary::pair_key(s[i], s[i + 1])];
    std::uint64_t best_key = 0, best_count = 0;
    for (const auto& [key, count] : counts) {
      if (count < best_count) continue;
      if (count == best_count) {
        const auto l = static_cast<TokenId>(key >> 32), r = static_cast<TokenId>(key & 0xffffffffu);
        const auto bl = static_cast<TokenId>(best_key >> 32), br = static_cast<TokenId>(best_key & 0xffffffffu);
        const auto& ls = vocab.token(l);
        const auto& bls = vocab.token(bl);
        if (ls > bls || (ls == bls && vocab.token(r) >= vocab.token(br))) continue;
      }
      best_key = key;
      best_count = count;
    }
    if (best_count < 2) break;
    const auto left = static_cast<TokenId>(best_key >> 32), right = static_cast<TokenId>(best_key & 0xffffffffu);
    const TokenId merged = vocab.add_merge(left, right);
    for (auto& s : docs) {
      std::size_t w = 0;
      for (std::size_t i = 0; i < s.size();) {
        if (i + 1 < s.size() && s[i] == left && s[i + 1] == right) {
          s[w++] = merged;
          i += 2;
        } else {
          s[w++] = s[i++];
        }
      }
      s.resize(w);
    }
  }
  return vocab;
}

// Bytes, then merges in training order. Occurrences of one merge are
// replaced left to right before the next merge is considered, which
// reproduces the segmentation training produced.
inline EncodedSequence encode(std::string_view text, const Vocabulary& vocab) {
  const std::size_t n = text.size();
  EncodedSequence ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<unsigned char>(text[i]);
  if (vocab.merges().empty() || n < 2) return ids;

  // Doubly linked list over byte positions; a candidate is (rank, position).
  std::vector<std::int64_t> prev(n), next(n);
  for (std::size_t i = 0; i < n; ++i) {
    prev[i] = static_cast<std::int64_t>(i) - 1;
    next[i] = i + 1 < n ? static_cast<std::int64_t>(i + 1) : -1;
  }
  std::vector<bool> alive(n, true);
  using Cand = std::pair<std::int64_t, std::int64_t>;
  std::priority_queue<Cand, std::vector<Cand>, std::greater<>> heap;
  std::int64_t current = 0;
  auto push = [&](std::int64_t pos) {
    if (pos < 0 || next[pos] < 0) return;
    const auto r = vocab.rank(ids[pos], ids[next[pos]], current);
    if (r >= 0) heap.emplace(r, pos);
  };
  for (std::size_t i = 0; i + 1 < n; ++i) push(static_cast<std::int64_t>(i));
  while (!heap.empty()) {
    const auto [r, pos] = heap.top();
    heap.pop();
    if (!alive[pos] || next[pos] < 0) continue;
    if (r < current) {
      push(pos);  // a later duplicate of this pair may still apply
      continue;
    }
    const auto& m = vocab.merges()[r];
    const std::int64_t right = next[pos];
    if (ids[pos] != m.left || ids[right] != m.right) continue;
    current = r;
    ids[pos] = m.result;
    alive[right] = false;
    next[pos] = next[right];
    if (next[right] >= 0) prev[next[right]] = pos;
    push(prev[pos]);
    push(pos);
  }
  EncodedSequence out;
  for (std::int64_t i = 0; i >= 0; i = next[i]) out.push_back(ids[i]);
  return out;
}

// Replaces every ill-formed UTF-8 subsequence with U+FFFD.
inline std::string sanitize_utf8(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  const auto* p = reinterpret_cast<const unsigned char*>(s.data());
  const std::size_t n = s.size();
  std::size_t i = 0;
  while (i < n) {
    const unsigned char c = p[i];
    std::size_t len = 0;
    std::uint32_t cp = 0, min = 0;
    if (c < 0x80) {
      out.push_back(static_cast<char>(c));
      ++i;
      continue;
    } else if ((c & 0xe0) == 0xc0) {
      len = 2, cp = c & 0x1f, min = 0x80;
    } else if ((c & 0xf0) == 0xe0) {
      len = 3, cp = c & 0x0f, min = 0x800;
    } else if ((c & 0xf8) == 0xf0) {
      len = 4, cp = c & 0x07, min = 0x10000;
    }
    bool ok = len != 0 && i + len <= n;
    for (std::size_t k = 1; ok && k < len; ++k) {
      if ((p[i + k] & 0xc0) != 0x80) ok = false;
      else cp = (cp << 6) | (p[i + k] & 0x3f);
    }
    if (ok && (cp < min || cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff))) ok = false;
    if (ok) {
      out.append(s.substr(i, len));
      i += len;
    } else {
      out += "\xEF\xBF\xBD";
      ++i;
    }
  }
  return out;
}

inline std::string decode(const EncodedSequence& tokens, const Vocabulary& vocab) {
  std::string bytes;
  for (TokenId id : tokens) {
    const auto& t = vocab.token(id);
    if (!vocab.is_special(id)) bytes += t;
  }
  return sanitize_utf8(bytes);
}

namespace detail {
inline std::string to_hex(std::string_view s) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (unsigned char c : s) {
    out.push_back(digits[c >> 4]);
    out.push_back(digits[c & 15]);
  }
  return out;
}

inline std::string from_hex(std::string_view h) {
  if (h.size() % 2) throw ParseError("odd-length hex string '" + std::string(h) + "'");
  auto nibble = [&](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw ParseError("invalid hex digit in '" + std::string(h) + "'");
  };
  std::string out;
  for (std::size_t i = 0; i < h.size(); i += 2) out.push_back(static_cast<char>(nibble(h[i]) * 16 + nibble(h[i + 1])));
  return out;
}
}  // namespace detail

// Rebuilds a vocabulary from ordered merge byte-strings.
inline Vocabulary vocabulary_from_merges(const std::vector<std::pair<std::string, std::string>>& merges) {
  Vocabulary v;
  for (const auto& [l, r] : merges) {
    const TokenId a = v.find(l), b = v.find(r);
    if (a < 0 || b < 0) throw ParseError("merge refers to unknown token '" + detail::to_hex(a < 0 ? l : r) + "'");
    v.add_merge(a, b);
  }
  return v;
}

inline std::string vocabulary_to_string(const Vocabulary& v) {
  std::ostringstream os;
  os << "bpe-vocab v1 " << v.size() << "\n";
  for (const auto& [l, r] : v.merge_strings()) os << detail::to_hex(l) << " " << detail::to_hex(r) << "\n";
  return os.str();
}

inline Vocabulary vocabulary_from_string(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw ParseError("vocabulary file is empty");
  std::istringstream head(line);
  std::string magic, version;
  std::size_t declared = 0;
  if (!(head >> magic >> version >> declared) || magic != "bpe-vocab")
    throw ParseError("line 1: expected 'bpe-vocab v1 <V>'");
  if (version != "v1") throw ParseError("line 1: unsupported vocabulary version '" + version + "'");
  std::vector<std::pair<std::string, std::string>> merges;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string a, b, extra;
    if (!(ls >> a >> b) || (ls >> extra)) throw ParseError("line " + std::to_string(lineno) + ": expected two hex fields");
    try {
      merges.emplace_back(detail::from_hex(a), detail::from_hex(b));
    } catch (const ParseError& e) {
      throw ParseError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  auto v = vocabulary_from_merges(merges);
  if (v.size() != declared)
    throw ParseError("vocabulary header declares " + std::to_string(declared) + " tokens but merges yield " +
                     std::to_string(v.size()));
  return v;
}

inline void save_vocabulary(const Vocabulary& v, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write vocabulary to '" + path + "'");
  f << vocabulary_to_string(v);
  if (!f) throw InputError("failed writing vocabulary to '" + path + "'");
}

inline Vocabulary load_vocabulary(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot read vocabulary '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return vocabulary_from_string(ss.str());
}

}  // namespace biomamba::data
