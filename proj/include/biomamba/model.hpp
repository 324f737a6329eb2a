// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "biomamba/baselines.hpp"
#include "biomamba/data/tokenizer.hpp"
#include "biomamba/ops.hpp"
#include "biomamba/param.hpp"
#include "biomamba/rng.hpp"
#include "biomamba/ssm.hpp"

namespace biomamba::model {

using baselines::NormKind;
using data::TokenId;
using ssm::ScanMode;

enum class BlockType { kSSM, kTransformer, kRNN };

inline const char* to_string(BlockType b) {
  switch (b) {
    case BlockType::kSSM: return "ssm";
    case BlockType::kTransformer: return "transformer";
    case BlockType::kRNN: return "rnn";
  }
  return "?";
}

inline BlockType parse_block_type(const std::string& s) {
  if (s == "ssm") return BlockType::kSSM;
  if (s == "transformer") return BlockType::kTransformer;
  if (s == "rnn") return BlockType::kRNN;
  throw ValidationError("block_type must be ssm, transformer or rnn, got '" + s + "'");
}

inline NormKind parse_norm(const std::string& s) {
  if (s == "rms") return NormKind::kRMS;
  if (s == "layer") return NormKind::kLayer;
  throw ValidationError("norm must be rms or layer, got '" + s + "'");
}

inline const char* to_string(NormKind n) { return n == NormKind::kRMS ? "rms" : "layer"; }

inline ScanMode parse_scan(const std::string& s) {
  if (s == "recurrent") return ScanMode::kRecurrent;
  if (s == "parallel") return ScanMode::kParallel;
  throw ValidationError("scan must be recurrent or parallel, got '" + s + "'");
}

struct ModelConfig {
  BlockType block_type = BlockType::kSSM;
  std::size_t n_layers = 4;
  std::size_t d_model = 128;
  std::size_t d_inner = 256;  // SSM inner width; RNN hidden width
  std::size_t n_state = 16;
  std::size_t n_heads = 2;
  std::size_t head_dim = 64;
  std::size_t k_conv = 4;
  std::size_t dt_rank = 0;  // 0: ceil(d_model / 16)
  std::size_t d_ff = 0;     // 0: 4 * d_model
  std::size_t context_len = 256;
  std::size_t vocab_size = 260;
  bool tie_embeddings = true;
  bool dynamic_d = false;
  NormKind norm = NormKind::kRMS;
  ScanMode scan = ScanMode::kRecurrent;
  std::uint64_t seed = 0;

  std::size_t resolved_dt_rank() const { return dt_rank ? dt_rank : (d_model + 15) / 16; }
  std::size_t resolved_d_ff() const { return d_ff ? d_ff : 4 * d_model; }

  ssm::SSMDims ssm_dims() const {
    ssm::SSMDims d;
    d.d_model = d_model;
    d.d_inner = d_inner;
    d.n_state = n_state;
    d.k_conv = k_conv;
    d.dt_rank = resolved_dt_rank();
    d.dynamic_d = dynamic_d;
    return d;
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ContractError(std::string("model config: ") + name + " must be positive");
    };
    positive(n_layers, "n_layers");
    positive(d_model, "d_model");
    positive(d_inner, "d_inner");
    positive(n_state, "n_state");
    positive(k_conv, "k_conv");
    positive(vocab_size, "vocab_size");
    if (context_len < 2) throw ContractError("model config: context_len must be at least 2");
    if (vocab_size < data::kBaseVocab)
      throw ContractError("model config: vocab_size must cover the 260 byte and special ids");
    if (block_type == BlockType::kTransformer) {
      positive(n_heads, "n_heads");
      if (n_heads * head_dim != d_model)
        throw ContractError("model config: n_heads * head_dim must equal d_model for transformer blocks");
    }
    if (norm == NormKind::kLayer && d_model < 2) throw ContractError("model config: layer norm needs d_model >= 2");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"block_type", to_string(c.block_type)},
          {"n_layers", c.n_layers},
          {"d_model", c.d_model},
          {"d_inner", c.d_inner},
          {"n_state", c.n_state},
          {"n_heads", c.n_heads},
          {"head_dim", c.head_dim},
          {"k_conv", c.k_conv},
          {"dt_rank", c.dt_rank},
          {"d_ff", c.d_ff},
          {"context_len", c.context_len},
          {"vocab_size", c.vocab_size},
          {"tie_embeddings", c.tie_embeddings},
          {"dynamic_d", c.dynamic_d},
          {"norm", to_string(c.norm)},
          {"scan", ssm::to_string(c.scan)},
          {"seed", c.seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.block_type = parse_block_type(j.at("block_type").get<std::string>());
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_inner = j.at("d_inner").get<std::size_t>();
    c.n_state = j.at("n_state").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.head_dim = j.at("head_dim").get<std::size_t>();
    c.k_conv = j.at("k_conv").get<std::size_t>();
    c.dt_rank = j.at("dt_rank").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.context_len = j.at("context_len").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.tie_embeddings = j.at("tie_embeddings").get<bool>();
    c.dynamic_d = j.at("dynamic_d").get<bool>();
    c.norm = parse_norm(j.at("norm").get<std::string>());
    c.scan = parse_scan(j.at("scan").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  return c;
}

template <class T>
struct Layer {
  baselines::NormParams<T> norm;  // pre-norm of the block (attention sublayer for transformers)
  ssm::MambaBlockParams<T> ssm;
  baselines::TransformerBlockParams<T> transformer;
  baselines::RNNParams<T> rnn;
};

template <class T>
struct LMModel {
  ModelConfig config;
  Tensor<T> token_embedding;  // [vocab x d_model]
  Tensor<T> positions;        // [context_len x d_model], transformer only
  std::vector<Layer<T>> layers;
  baselines::NormParams<T> final_norm;
  Tensor<T> untied_head;  // [vocab x d_model] when not tied
  Tensor<T> qa_head;      // [d_model x 2] once attached

  const Tensor<T>& lm_head() const { return config.tie_embeddings ? token_embedding : untied_head; }
  bool has_qa_head() const { return static_cast<bool>(qa_head); }

  ParamList<T> parameters() const {
    ParamList<T> out;
    out.push_back({"embed", token_embedding, true});
    if (positions) out.push_back({"positions", positions, true});
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      const auto& l = layers[i];
      l.norm.collect(p + "norm.", out);
      switch (config.block_type) {
        case BlockType::kSSM: l.ssm.collect(p, out); break;
        case BlockType::kTransformer: l.transformer.collect(p, out); break;
        case BlockType::kRNN: l.rnn.collect(p, out); break;
      }
    }
    final_norm.collect("final_norm.", out);
    if (!config.tie_embeddings) out.push_back({"lm_head", untied_head, true});
    if (qa_head) out.push_back({"qa_head", qa_head, true});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }
};

template <class T>
LMModel<T> init_model(const ModelConfig& config) {
  config.validate();
  LMModel<T> m;
  m.config = config;
  Initializer<T> init(config.seed);
  m.token_embedding = init.normal({config.vocab_size, config.d_model}, 0.02);
  if (config.block_type == BlockType::kTransformer)
    m.positions = init.normal({config.context_len, config.d_model}, 0.02);
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    Layer<T> l;
    l.norm = baselines::NormParams<T>::make(config.d_model, config.norm);
    switch (config.block_type) {
      case BlockType::kSSM: l.ssm = ssm::init_block<T>(config.ssm_dims(), init); break;
      case BlockType::kTransformer:
        l.transformer =
            baselines::init_transformer<T>(config.d_model, config.n_heads, config.resolved_d_ff(), config.norm, init);
        break;
      case BlockType::kRNN: l.rnn = baselines::init_rnn<T>(config.d_model, config.d_inner, init); break;
    }
    m.layers.push_back(std::move(l));
  }
  m.final_norm = baselines::NormParams<T>::make(config.d_model, config.norm);
  if (!config.tie_embeddings) m.untied_head = init.normal({config.vocab_size, config.d_model}, 0.02);
  return m;
}

template <class T>
void attach_qa_head(LMModel<T>& m) {
  if (!m.qa_head) m.qa_head = Tensor<T>::zeros({m.config.d_model, 2}, true);
}

namespace detail {
inline void check_tokens(std::span<const TokenId> tokens, std::size_t batch, std::size_t len, const ModelConfig& c) {
  if (len == 0 || batch == 0 || tokens.size() != batch * len)
    throw ContractError("lm_forward: " + std::to_string(tokens.size()) + " tokens do not form [" +
                        std::to_string(batch) + " x " + std::to_string(len) + "]");
  if (len > c.context_len)
    throw ContractError("lm_forward: sequence of " + std::to_string(len) + " exceeds context_len " +
                        std::to_string(c.context_len));
  for (auto t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size)
      throw InputError("lm_forward: token id " + std::to_string(t) + " outside vocabulary");
}
}  // namespace detail

// Final-norm hidden states H [batch*len x d_model].
template <class T>
Tensor<T> hidden_states(const LMModel<T>& m, std::span<const TokenId> tokens, std::size_t batch, std::size_t len) {
  detail::check_tokens(tokens, batch, len, m.config);
  auto x = embedding(m.token_embedding, tokens);
  if (m.positions) x = baselines::positional_embed(x, m.positions, len);
  for (const auto& l : m.layers) {
    switch (m.config.block_type) {
      case BlockType::kSSM: x = add(x, ssm::mamba_block_forward(l.ssm, l.norm.apply(x), len, m.config.scan)); break;
      case BlockType::kRNN: x = add(x, baselines::rnn_forward(l.rnn, l.norm.apply(x), len).output); break;
      case BlockType::kTransformer: x = baselines::transformer_block_forward(l.transformer, l.norm, x, len, true); break;
    }
  }
  return m.final_norm.apply(x);
}

// Logits [batch x len x vocab].
template <class T>
Tensor<T> lm_forward(const LMModel<T>& m, std::span<const TokenId> tokens, std::size_t batch, std::size_t len) {
  auto logits = matmul_nt(hidden_states(m, tokens, batch, len), m.lm_head());
  return reshape(logits, {batch, len, m.config.vocab_size});
}

// Mean next-token cross-entropy (nats) over positions with mask != 0.
template <class T>
Tensor<T> lm_loss(const Tensor<T>& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask) {
  const std::size_t v = logits.dim(logits.rank() - 1);
  return cross_entropy(reshape(logits, {logits.numel() / v, v}), targets, mask);
}

// ---------------------------------------------------------------------------
// QA span head

template <class T>
struct QALogits {
  std::vector<T> start, end;  // length = sequence length; -inf outside the context segment
};

// -(log p_start[s] + log p_end[e]) / 2 with both distributions restricted to
// rows [context_begin, T) of `logits` [T x 2].
template <class T>
Tensor<T> qa_span_loss(const Tensor<T>& logits, std::size_t context_begin, std::size_t s, std::size_t e) {
  const std::size_t len = logits.rows();
  if (logits.cols() != 2) throw DimensionError("qa_span_loss: logits must be [T x 2]");
  if (context_begin >= len || s < context_begin || e < context_begin || s >= len || e >= len)
    throw ContractError("qa_span_loss: gold span outside the context segment");
  auto lg = logits.data();
  std::vector<T> probs(len * 2, T(0));
  double loss = 0;
  for (std::size_t col = 0; col < 2; ++col) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t t = context_begin; t < len; ++t) mx = std::max(mx, lg[t * 2 + col]);
    double sum = 0;
    for (std::size_t t = context_begin; t < len; ++t) sum += std::exp(static_cast<double>(lg[t * 2 + col] - mx));
    for (std::size_t t = context_begin; t < len; ++t)
      probs[t * 2 + col] = static_cast<T>(std::exp(static_cast<double>(lg[t * 2 + col] - mx)) / sum);
    const std::size_t gold = col == 0 ? s : e;
    loss += static_cast<double>(mx) + std::log(sum) - static_cast<double>(lg[gold * 2 + col]);
  }
  auto out = Tensor<T>::scalar(static_cast<T>(loss / 2));
  return biomamba::detail::record(out, {logits}, "qa_span_loss", [logits, probs = std::move(probs), s, e,
                                                                  context_begin, len](TensorNode<T>& o) {
    T* g = biomamba::detail::grad_of(logits);
    if (!g) return;
    const T h = o.grad[0] / T(2);
    for (std::size_t t = context_begin; t < len; ++t)
      for (std::size_t col = 0; col < 2; ++col) g[t * 2 + col] += h * probs[t * 2 + col];
    g[s * 2] -= h;
    g[e * 2 + 1] -= h;
  });
}

template <class T>
Tensor<T> qa_logits_tensor(const LMModel<T>& m, std::span<const TokenId> tokens) {
  if (!m.has_qa_head()) throw ContractError("qa_forward: model has no QA head; attach one first");
  return matmul(hidden_states(m, tokens, 1, tokens.size()), m.qa_head);
}

template <class T>
QALogits<T> qa_forward(const LMModel<T>& m, std::span<const TokenId> tokens, std::size_t context_begin) {
  NoGradScope<T> no_grad;
  auto lg = qa_logits_tensor(m, tokens);
  QALogits<T> out;
  const T ninf = -std::numeric_limits<T>::infinity();
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    out.start.push_back(t < context_begin ? ninf : lg.data()[t * 2]);
    out.end.push_back(t < context_begin ? ninf : lg.data()[t * 2 + 1]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generation

struct GenerateOptions {
  std::size_t max_new = 32;
  double temperature = 0;  // 0: greedy
  std::size_t top_k = 0;   // 0: full vocabulary
  std::uint64_t seed = 0;
  bool streaming = true;   // ssm only; baselines always re-run the window
};

namespace detail {

template <class T>
TokenId pick_token(std::span<const T> logits, const GenerateOptions& opt, std::mt19937_64& rng) {
  const data::SpecialIds sp;
  auto banned = [&](std::size_t id) {
    return id == static_cast<std::size_t>(sp.pad) || id == static_cast<std::size_t>(sp.bos) ||
           id == static_cast<std::size_t>(sp.sep);
  };
  if (opt.temperature <= 0) {
    std::size_t best = 0;
    T bv = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < logits.size(); ++i)
      if (!banned(i) && logits[i] > bv) bv = logits[i], best = i;
    return static_cast<TokenId>(best);
  }
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (!banned(i)) cand.emplace_back(static_cast<double>(logits[i]) / opt.temperature, i);
  std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  if (opt.top_k && opt.top_k < cand.size()) cand.resize(opt.top_k);
  const double mx = cand.front().first;
  double sum = 0;
  for (auto& c : cand) sum += (c.first = std::exp(c.first - mx));
  double u = uniform_unit(rng) * sum;
  for (const auto& c : cand) {
    if (u < c.first) return static_cast<TokenId>(c.second);
    u -= c.first;
  }
  return static_cast<TokenId>(cand.back().second);
}

template <class T>
std::vector<T> last_row_logits(const LMModel<T>& m, const Tensor<T>& h) {
  const std::size_t d = m.config.d_model, rows = h.numel() / d;
  auto last = Tensor<T>::from({1, d}, std::vector<T>(h.data().begin() + (rows - 1) * d, h.data().end()));
  auto lg = matmul_nt(last, m.lm_head());
  return {lg.data().begin(), lg.data().end()};
}

}  // namespace detail

// Streaming inference over an ssm stack: per-layer recurrent states carried
// across calls.
template <class T>
class SSMStream {
 public:
  explicit SSMStream(const LMModel<T>& m) : m_(m) {
    if (m.config.block_type != BlockType::kSSM) throw ContractError("SSMStream needs ssm blocks");
    for (std::size_t i = 0; i < m.layers.size(); ++i) states_.push_back(ssm::SSMState<T>::zeros(m.config.ssm_dims()));
  }

  // Feeds tokens and returns next-token logits after the last one.
  std::vector<T> feed(std::span<const TokenId> tokens) {
    NoGradScope<T> no_grad;
    if (tokens.empty()) throw ContractError("SSMStream: nothing to feed");
    for (auto t : tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= m_.config.vocab_size)
        throw InputError("SSMStream: token id " + std::to_string(t) + " outside vocabulary");
    auto x = embedding(m_.token_embedding, tokens);
    for (std::size_t i = 0; i < m_.layers.size(); ++i) {
      const auto& l = m_.layers[i];
      x = add(x, ssm::mamba_block_forward_stateful(l.ssm, l.norm.apply(x), states_[i]));
    }
    return detail::last_row_logits(m_, m_.final_norm.apply(x));
  }

 private:
  const LMModel<T>& m_;
  std::vector<ssm::SSMState<T>> states_;
};

// Next-token logits for the last position of `tokens` via a full forward
// over the trailing context window.
template <class T>
std::vector<T> reforward_logits(const LMModel<T>& m, std::span<const TokenId> tokens) {
  NoGradScope<T> no_grad;
  const std::size_t len = std::min(tokens.size(), m.config.context_len);
  auto window = tokens.subspan(tokens.size() - len);
  return detail::last_row_logits(m, hidden_states(m, window, 1, len));
}

// Continues `prompt` by up to max_new tokens, stopping after <eos>. Returns
// only the new tokens.
template <class T>
std::vector<TokenId> generate_tokens(const LMModel<T>& m, std::vector<TokenId> prompt, const GenerateOptions& opt) {
  if (prompt.size() > m.config.context_len)
    throw InputError("prompt of " + std::to_string(prompt.size()) + " tokens exceeds context_len " +
                     std::to_string(m.config.context_len));
  if (prompt.empty()) prompt.push_back(data::SpecialIds{}.bos);
  auto rng = rng_stream(opt.seed, "sampling");
  std::vector<TokenId> out;
  if (opt.max_new == 0) return out;
  const bool stream = opt.streaming && m.config.block_type == BlockType::kSSM;
  std::optional<SSMStream<T>> s;
  std::vector<T> logits;
  if (stream) {
    s.emplace(m);
    logits = s->feed(prompt);
  } else {
    logits = reforward_logits(m, std::span<const TokenId>(prompt));
  }
  std::vector<TokenId> seq = prompt;
  for (std::size_t i = 0; i < opt.max_new; ++i) {
    const TokenId next = detail::pick_token<T>(logits, opt, rng);
    out.push_back(next);
    if (next == data::SpecialIds{}.eos || i + 1 == opt.max_new) break;
    seq.push_back(next);
    if (stream) {
      const TokenId one[1] = {next};
      logits = s->feed(one);
    } else {
      logits = reforward_logits(m, std::span<const TokenId>(seq));
    }
  }
  return out;
}

template <class T>
std::string generate(const LMModel<T>& m, const data::Vocabulary& vocab, const std::string& prompt,
                     const GenerateOptions& opt) {
  auto ids = data::encode(prompt, vocab);
  for (auto t : ids)
    if (static_cast<std::size_t>(t) >= m.config.vocab_size)
      throw InputError("prompt token outside the model vocabulary; vocabulary and checkpoint disagree");
  return data::decode(generate_tokens(m, std::move(ids), opt), vocab);
}

}  // namespace biomamba::model
