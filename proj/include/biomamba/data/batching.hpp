// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "biomamba/data/tokenizer.hpp"
#include "biomamba/rng.hpp"

namespace biomamba::data {

struct LMBatch {
  std::size_t batch = 0;
  std::size_t context_len = 0;
  std::vector<TokenId> inputs;       // [batch x context_len], pad-filled
  std::vector<TokenId> targets;      // inputs shifted left by one
  std::vector<std::uint8_t> valid;   // 1 where targets[i] is a real next token

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto v : valid) n += v;
    return n;
  }
};

// Contiguous non-overlapping windows [i*ctx, min((i+1)*ctx, N)).
struct Window {
  std::size_t begin, length;
};

inline std::vector<Window> lm_windows(std::size_t corpus_len, std::size_t context_len) {
  std::vector<Window> w;
  for (std::size_t b = 0; b < corpus_len; b += context_len) {
    const std::size_t len = std::min(context_len, corpus_len - b);
    if (len >= 2) w.push_back({b, len});  // a 1-token tail has no target
  }
  return w;
}

inline void fisher_yates(std::vector<std::size_t>& order, std::mt19937_64& rng) {
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_below(rng, i)]);
}

inline LMBatch assemble_batch(std::span<const TokenId> corpus, const std::vector<Window>& windows,
                              std::span<const std::size_t> picks, std::size_t context_len, TokenId pad) {
  LMBatch b;
  b.batch = picks.size();
  b.context_len = context_len;
  b.inputs.assign(b.batch * context_len, pad);
  b.targets.assign(b.batch * context_len, pad);
  b.valid.assign(b.batch * context_len, 0);
  for (std::size_t r = 0; r < picks.size(); ++r) {
    const auto& w = windows[picks[r]];
    for (std::size_t t = 0; t < w.length; ++t) b.inputs[r * context_len + t] = corpus[w.begin + t];
    for (std::size_t t = 0; t + 1 < w.length; ++t) {
      b.targets[r * context_len + t] = corpus[w.begin + t + 1];
      b.valid[r * context_len + t] = 1;
    }
  }
  return b;
}

inline std::size_t rows_per_batch(std::size_t tokens_per_batch, std::size_t context_len) {
  return std::max<std::size_t>(1, tokens_per_batch / context_len);
}

// One epoch of shuffled batches. Rows per batch = tokens_per_batch /
// context_len (at least one); the last batch may be smaller.
inline std::vector<LMBatch> build_lm_batches(std::span<const TokenId> corpus, std::size_t context_len,
                                             std::size_t tokens_per_batch, std::uint64_t seed,
                                             TokenId pad = SpecialIds{}.pad) {
  if (context_len < 2) throw ContractError("context_len must be at least 2");
  if (corpus.size() < 2) throw InputError("corpus must contain at least 2 tokens");
  const auto windows = lm_windows(corpus.size(), context_len);
  std::vector<std::size_t> order(windows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto rng = rng_stream(seed, "batching");
  fisher_yates(order, rng);
  const std::size_t rows = rows_per_batch(tokens_per_batch, context_len);
  std::vector<LMBatch> out;
  for (std::size_t i = 0; i < order.size(); i += rows) {
    const std::size_t n = std::min(rows, order.size() - i);
    out.push_back(assemble_batch(corpus, windows, std::span<const std::size_t>(order).subspan(i, n), context_len, pad));
  }
  return out;
}

// Endless batch source for training: reshuffles the windows at every epoch
// from a single "batching" stream, so position in the stream fully
// determines the next batch.
class BatchStream {
 public:
  BatchStream(std::vector<TokenId> corpus, std::size_t context_len, std::size_t tokens_per_batch, std::uint64_t seed,
              TokenId pad = SpecialIds{}.pad)
      : corpus_(std::move(corpus)), context_len_(context_len), pad_(pad), rng_(rng_stream(seed, "batching")) {
    if (context_len < 2) throw ContractError("context_len must be at least 2");
    if (corpus_.size() < 2) throw InputError("corpus must contain at least 2 tokens");
    windows_ = lm_windows(corpus_.size(), context_len);
    rows_ = rows_per_batch(tokens_per_batch, context_len);
    order_.resize(windows_.size());
  }

  LMBatch next() {
    if (cursor_ >= order_.size() || cursor_ == 0) {
      for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
      fisher_yates(order_, rng_);
      cursor_ = 0;
    }
    const std::size_t n = std::min(rows_, order_.size() - cursor_);
    auto b = assemble_batch(corpus_, windows_, std::span<const std::size_t>(order_).subspan(cursor_, n), context_len_,
                            pad_);
    cursor_ += n;
    if (cursor_ >= order_.size()) cursor_ = 0;
    ++served_;
    return b;
  }

  // Advance without assembling (used when resuming).
  void skip(std::size_t batches) {
    for (std::size_t i = 0; i < batches; ++i) next();
  }

  std::size_t served() const { return served_; }
  std::size_t windows() const { return windows_.size(); }

 private:
  std::vector<TokenId> corpus_;
  std::size_t context_len_;
  TokenId pad_;
  std::mt19937_64 rng_;
  std::vector<Window> windows_;
  std::vector<std::size_t> order_;
  std::size_t rows_ = 1, cursor_ = 0, served_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Concatenates files in argument order with <eos> between them.
inline EncodedSequence encode_corpus_files(const std::vector<std::string>& paths, const Vocabulary& vocab) {
  EncodedSequence all;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    if (i) all.push_back(vocab.specials().eos);
    auto e = encode(read_file(paths[i]), vocab);
    all.insert(all.end(), e.begin(), e.end());
  }
  return all;
}

}  // namespace biomamba::data
