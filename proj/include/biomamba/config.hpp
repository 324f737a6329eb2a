// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "biomamba/data/batching.hpp"
#include "biomamba/model.hpp"
#include "biomamba/train.hpp"

// Flat `key = value` run configuration. '#' starts a comment. Resolution
// order is defaults, then the config file, then command-line overrides.
namespace biomamba::config {

struct RunConfig {
  model::ModelConfig model;
  train::LRSchedule schedule;
  std::size_t tokens_per_batch = 8192;
  std::size_t grad_accum = 1;
  double clip = 1.0;
  double beta1 = 0.9, beta2 = 0.95, adam_eps = 1e-8, weight_decay = 0.1;
  std::size_t checkpoint_every = 100;
  std::size_t log_every = 10;
  // QA fine-tuning
  train::LRSchedule qa_schedule{20, 400, 1e-3, 1e-5};
  std::size_t qa_batch = 8;
  // QA evaluation
  std::size_t top_k_spans = 5;
  std::size_t max_answer_tokens = 30;

  train::TrainConfig train_config() const {
    train::TrainConfig t;
    t.grad_accum = grad_accum;
    t.clip = clip;
    t.beta1 = beta1;
    t.beta2 = beta2;
    t.eps = adam_eps;
    t.weight_decay = weight_decay;
    t.checkpoint_every = checkpoint_every;
    t.log_every = log_every;
    t.qa_batch = qa_batch;
    return t;
  }

  void validate() const {
    try {
      model.validate();
      schedule.validate();
      qa_schedule.validate();
    } catch (const ContractError& e) {
      throw ValidationError(std::string("config: ") + e.what());
    }
    if (grad_accum == 0 || tokens_per_batch == 0 || qa_batch == 0 || top_k_spans == 0)
      throw ValidationError("config: grad_accum, tokens_per_batch, qa_batch and top_k_spans must be positive");
    if (!(clip > 0)) throw ValidationError("config: clip must be positive");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::size_t to_count(const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ValidationError("expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double to_real(const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ValidationError("expected a number, got '" + v + "'");
}

inline bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ValidationError("expected true or false, got '" + v + "'");
}

inline std::string real_str(double d) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  return buf;
}

struct Key {
  const char* name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define BM_COUNT(key, field) \
  Key{key, [](RunConfig& c, const std::string& v) { c.field = to_count(v); }, [](const RunConfig& c) { return std::to_string(c.field); }}
#define BM_REAL(key, field) \
  Key{key, [](RunConfig& c, const std::string& v) { c.field = to_real(v); }, [](const RunConfig& c) { return real_str(c.field); }}
#define BM_BOOL(key, field)                                                         \
  Key{key, [](RunConfig& c, const std::string& v) { c.field = to_bool(v); }, \
      [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }}

inline const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      Key{"block_type", [](RunConfig& c, const std::string& v) { c.model.block_type = model::parse_block_type(v); },
          [](const RunConfig& c) { return std::string(model::to_string(c.model.block_type)); }},
      BM_COUNT("n_layers", model.n_layers),
      BM_COUNT("d_model", model.d_model),
      BM_COUNT("d_inner", model.d_inner),
      BM_COUNT("n_state", model.n_state),
      BM_COUNT("n_heads", model.n_heads),
      BM_COUNT("head_dim", model.head_dim),
      BM_COUNT("k_conv", model.k_conv),
      BM_COUNT("dt_rank", model.dt_rank),
      BM_COUNT("d_ff", model.d_ff),
      BM_COUNT("context_len", model.context_len),
      BM_COUNT("vocab_size", model.vocab_size),
      BM_BOOL("tie_embeddings", model.tie_embeddings),
      BM_BOOL("dynamic_d", model.dynamic_d),
      Key{"norm", [](RunConfig& c, const std::string& v) { c.model.norm = model::parse_norm(v); },
          [](const RunConfig& c) { return std::string(model::to_string(c.model.norm)); }},
      Key{"scan", [](RunConfig& c, const std::string& v) { c.model.scan = model::parse_scan(v); },
          [](const RunConfig& c) {
            return std::string(c.model.scan == ssm::ScanMode::kParallel ? "parallel" : "recurrent");
          }},
      Key{"seed", [](RunConfig& c, const std::string& v) { c.model.seed = to_count(v); },
          [](const RunConfig& c) { return std::to_string(c.model.seed); }},
      BM_COUNT("steps", schedule.total_steps),
      BM_COUNT("warmup_steps", schedule.warmup_steps),
      BM_REAL("peak_lr", schedule.peak_lr),
      BM_REAL("min_lr", schedule.min_lr),
      BM_COUNT("tokens_per_batch", tokens_per_batch),
      BM_COUNT("grad_accum", grad_accum),
      BM_REAL("clip", clip),
      BM_REAL("beta1", beta1),
      BM_REAL("beta2", beta2),
      BM_REAL("adam_eps", adam_eps),
      BM_REAL("weight_decay", weight_decay),
      BM_COUNT("checkpoint_every", checkpoint_every),
      BM_COUNT("log_every", log_every),
      BM_COUNT("qa_steps", qa_schedule.total_steps),
      BM_COUNT("qa_warmup_steps", qa_schedule.warmup_steps),
      BM_REAL("qa_peak_lr", qa_schedule.peak_lr),
      BM_REAL("qa_min_lr", qa_schedule.min_lr),
      BM_COUNT("qa_batch", qa_batch),
      BM_COUNT("top_k_spans", top_k_spans),
      BM_COUNT("max_answer_tokens", max_answer_tokens),
  };
  return k;
}

#undef BM_COUNT
#undef BM_REAL
#undef BM_BOOL

}  // namespace detail

inline void set_value(RunConfig& c, const std::string& key, const std::string& value, const std::string& where) {
  for (const auto& k : detail::keys())
    if (key == k.name) {
      try {
        k.set(c, value);
      } catch (const ValidationError& e) {
        throw ValidationError(where + ": " + key + ": " + e.what());
      }
      return;
    }
  throw ValidationError(where + ": unknown config key '" + key + "'");
}

// Applies the `key = value` lines of `text`; `source` names the input in
// error messages, which carry 1-based line numbers.
inline void apply_text(RunConfig& c, const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    const auto body = detail::trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(n);
    if (eq == std::string::npos) throw ParseError(where + ": expected 'key = value'");
    const auto key = detail::trim(body.substr(0, eq)), value = detail::trim(body.substr(eq + 1));
    if (key.empty() || value.empty()) throw ParseError(where + ": expected 'key = value'");
    set_value(c, key, value, where);
  }
}

inline void apply_file(RunConfig& c, const std::string& path) { apply_text(c, data::read_file(path), path); }

// `key=value` overrides from the command line.
inline void apply_overrides(RunConfig& c, const std::vector<std::string>& kvs) {
  for (const auto& kv : kvs) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ValidationError("override '" + kv + "' is not key=value");
    set_value(c, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)), "--set");
  }
}

// Every key, one per line, in a form apply_text reads back exactly.
inline std::string to_text(const RunConfig& c) {
  std::string out;
  for (const auto& k : detail::keys()) out += std::string(k.name) + " = " + k.get(c) + "\n";
  return out;
}

}  // namespace biomamba::config
