// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "biomamba/checkpoint.hpp"
#include "biomamba/data/batching.hpp"
#include "biomamba/data/squad.hpp"
#include "biomamba/model.hpp"

namespace biomamba::train {

struct LRSchedule {
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 2000;
  double peak_lr = 6e-4;
  double min_lr = 1e-5;

  void validate() const {
    if (warmup_steps == 0 || warmup_steps >= total_steps)
      throw ContractError("schedule: need 0 < warmup_steps < total_steps");
    if (min_lr > peak_lr || min_lr < 0) throw ContractError("schedule: need 0 <= min_lr <= peak_lr");
  }
};

// Linear warmup to peak, then cosine decay to min_lr at total_steps.
inline double lr_at(const LRSchedule& s, std::size_t step) {
  if (step >= s.total_steps) return s.min_lr;
  if (step < s.warmup_steps)
    return s.peak_lr * static_cast<double>(step + 1) / static_cast<double>(s.warmup_steps);
  const double progress =
      static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1 + std::cos(M_PI * progress));
}

struct ClipResult {
  double norm = 0;   // global L2 norm before clipping
  double scale = 1;  // factor applied
};

template <class T>
ClipResult clip_gradients(const ParamList<T>& params, double max_norm = 1.0) {
  double sq = 0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  }
  ClipResult r;
  r.norm = std::sqrt(sq);
  if (!std::isfinite(r.norm)) throw NumericError("non-finite gradient norm; step aborted");
  if (r.norm > max_norm) {
    r.scale = max_norm / r.norm;
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      auto t = p.tensor;
      for (auto& g : t.mutable_grad()) g = static_cast<T>(g * r.scale);
    }
  }
  return r;
}

template <class T>
struct OptimizerState {
  std::uint64_t step = 0;
  std::uint64_t tokens = 0;  // target tokens seen, for logging across resumes
  double beta1 = 0.9, beta2 = 0.95, eps = 1e-8, weight_decay = 0.1;
  std::map<std::string, std::vector<T>> m, v;
};

// One decoupled AdamW update:
//   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
//   theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta)
// with weight decay only on params flagged `decay`.
template <class T>
void adamw_step(const ParamList<T>& params, OptimizerState<T>& st, double lr) {
  ++st.step;
  const double c1 = 1 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1 - std::pow(st.beta2, static_cast<double>(st.step));
  for (const auto& p : params) {
    auto t = p.tensor;
    const std::size_t n = t.numel();
    auto& m = st.m[p.name];
    auto& v = st.v[p.name];
    if (m.empty()) m.assign(n, T(0)), v.assign(n, T(0));
    if (m.size() != n || v.size() != n) throw ContractError("adamw: moment shape mismatch for " + p.name);
    auto theta = t.mutable_data();
    const bool has = t.has_grad();
    const double wd = p.decay ? st.weight_decay : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double g = has ? static_cast<double>(t.grad()[i]) : 0.0;
      const double mi = st.beta1 * m[i] + (1 - st.beta1) * g;
      const double vi = st.beta2 * v[i] + (1 - st.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / c1, vhat = vi / c2;
      const double th = theta[i];
      theta[i] = static_cast<T>(th - lr * (mhat / (std::sqrt(vhat) + st.eps) + wd * th));
    }
  }
}

template <class T>
void zero_grads(const ParamList<T>& params) {
  for (const auto& p : params) {
    auto t = p.tensor;
    t.zero_grad();
  }
}

template <class T>
void save_optimizer(const OptimizerState<T>& st, const std::string& path) {
  checkpoint::Container c;
  c.header = {{"kind", "adamw"}, {"step", st.step},   {"tokens", st.tokens},
              {"beta1", st.beta1}, {"beta2", st.beta2}, {"eps", st.eps},
              {"weight_decay", st.weight_decay}};
  for (const auto& [name, m] : st.m) {
    c.arrays.push_back({"m." + name, {m.size()}, std::vector<float>(m.begin(), m.end())});
    const auto& v = st.v.at(name);
    c.arrays.push_back({"v." + name, {v.size()}, std::vector<float>(v.begin(), v.end())});
  }
  checkpoint::write_container(path, c);
}

template <class T>
OptimizerState<T> load_optimizer(const std::string& path) {
  auto c = checkpoint::read_container(path);
  if (c.header.value("kind", "") != "adamw") throw FormatError(path + ": not an optimizer state file");
  OptimizerState<T> st;
  st.step = c.header.at("step").get<std::uint64_t>();
  st.tokens = c.header.value("tokens", std::uint64_t{0});
  st.beta1 = c.header.at("beta1").get<double>();
  st.beta2 = c.header.at("beta2").get<double>();
  st.eps = c.header.at("eps").get<double>();
  st.weight_decay = c.header.at("weight_decay").get<double>();
  for (auto& a : c.arrays) {
    auto& dst = a.name.rfind("m.", 0) == 0 ? st.m : st.v;
    dst[a.name.substr(2)] = std::vector<T>(a.values.begin(), a.values.end());
  }
  return st;
}

// Sidecar path for the optimizer state of a checkpoint.
inline std::string optimizer_path(const std::string& checkpoint_path) {
  auto p = std::filesystem::path(checkpoint_path);
  return (p.parent_path() / (p.stem().string() + ".opt")).string();
}

struct StepRecord {
  std::size_t step = 0;
  double loss = 0, lr = 0, gnorm = 0;
  std::uint64_t tokens = 0;
  double wall_seconds = 0;
};

struct TrainReport {
  std::vector<StepRecord> steps;
  std::size_t skipped_examples = 0;
};

inline std::string format_record(const StepRecord& r) {
  std::ostringstream os;
  os << "step=" << r.step << " loss=" << std::setprecision(6) << std::fixed << r.loss << std::defaultfloat
     << " lr=" << std::setprecision(6) << r.lr << " gnorm=" << r.gnorm << " tokens=" << r.tokens;
  return os.str();
}

struct TrainConfig {
  std::size_t grad_accum = 1;
  double clip = 1.0;
  double beta1 = 0.9, beta2 = 0.95, eps = 1e-8, weight_decay = 0.1;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::string out_dir;               // empty: write nothing
  std::size_t log_every = 1;
  std::ostream* log = nullptr;        // e.g. &std::cout
  std::ostream* log_file = nullptr;
  std::vector<std::pair<std::string, std::string>> vocab_merges;  // stored in checkpoints
  std::size_t qa_batch = 8;
};

template <class T>
OptimizerState<T> fresh_optimizer(const TrainConfig& c) {
  OptimizerState<T> st;
  st.beta1 = c.beta1;
  st.beta2 = c.beta2;
  st.eps = c.eps;
  st.weight_decay = c.weight_decay;
  return st;
}

namespace detail {

template <class T>
void emit(const TrainConfig& c, const StepRecord& r, bool force) {
  if (!force && (c.log_every == 0 || r.step % c.log_every)) return;
  const auto line = format_record(r);
  if (c.log) *c.log << line << "\n" << std::flush;
  if (c.log_file) *c.log_file << line << "\n" << std::flush;
}

template <class T>
void write_checkpoint(const model::LMModel<T>& m, const OptimizerState<T>& st, const TrainConfig& c,
                      const std::string& name, std::size_t step) {
  if (c.out_dir.empty()) return;
  std::filesystem::create_directories(c.out_dir);
  const auto path = (std::filesystem::path(c.out_dir) / name).string();
  // Optimizer first: a model checkpoint on disk always has its sidecar.
  save_optimizer(st, optimizer_path(path));
  checkpoint::save_checkpoint(m, path, {c.vocab_merges, step});
}

template <class T>
void require_finite_loss(double loss, std::size_t step) {
  if (!std::isfinite(loss))
    throw NumericError("loss became non-finite at step " + std::to_string(step) +
                       "; the last written checkpoint is the last good state");
}

}  // namespace detail

// Next-token pretraining from optimizer step `opt.step` to schedule.total_steps.
// The stream must already be positioned for that step (see BatchStream::skip).
template <class T>
TrainReport pretrain_loop(model::LMModel<T>& m, data::BatchStream& stream, const LRSchedule& schedule,
                          const TrainConfig& cfg, OptimizerState<T>& opt) {
  schedule.validate();
  if (cfg.grad_accum == 0) throw ContractError("grad_accum must be positive");
  const auto params = m.parameters();
  TrainReport report;
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t first = opt.step;
  for (std::size_t step = first; step < schedule.total_steps; ++step) {
    zero_grads(params);
    double loss_sum = 0;
    for (std::size_t micro = 0; micro < cfg.grad_accum; ++micro) {
      auto batch = stream.next();
      Tape<T> tape;
      TapeScope<T> scope(tape);
      auto logits = model::lm_forward(m, batch.inputs, batch.batch, batch.context_len);
      auto loss = model::lm_loss(logits, batch.targets, batch.valid);
      loss_sum += static_cast<double>(loss.item());
      tape.backward(scale(loss, static_cast<T>(1.0 / cfg.grad_accum)));
      opt.tokens += batch.valid_count();
    }
    StepRecord r;
    r.step = step + 1;
    r.loss = loss_sum / static_cast<double>(cfg.grad_accum);
    detail::require_finite_loss<T>(r.loss, r.step);
    r.gnorm = clip_gradients(params, cfg.clip).norm;
    r.lr = lr_at(schedule, step);
    adamw_step(params, opt, r.lr);
    r.tokens = opt.tokens;
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.steps.push_back(r);
    detail::emit<T>(cfg, r, step == first || r.step == schedule.total_steps);
    if (cfg.checkpoint_every && r.step % cfg.checkpoint_every == 0 && r.step != schedule.total_steps)
      detail::write_checkpoint(m, opt, cfg, "step-" + std::to_string(r.step) + ".bmck", r.step);
  }
  detail::write_checkpoint(m, opt, cfg, "final.bmck", schedule.total_steps);
  return report;
}

template <class T>
TrainReport pretrain_loop(model::LMModel<T>& m, data::BatchStream& stream, const LRSchedule& schedule,
                          const TrainConfig& cfg) {
  auto opt = fresh_optimizer<T>(cfg);
  return pretrain_loop(m, stream, schedule, cfg, opt);
}

// Maps examples to spans, counting the ones that cannot be placed.
inline std::vector<data::QASpan> prepare_qa(const std::vector<data::QAExample>& examples,
                                            const data::Vocabulary& vocab, std::size_t context_len,
                                            std::size_t* skipped = nullptr) {
  std::vector<data::QASpan> spans;
  std::size_t skip = 0;
  for (const auto& ex : examples) {
    auto s = data::map_answer_to_token_span(ex, vocab, context_len);
    if (s) spans.push_back(std::move(*s));
    else ++skip;
  }
  if (skipped) *skipped = skip;
  return spans;
}

// Span fine-tuning: each step averages the span loss over `qa_batch`
// examples drawn in a seeded shuffled order.
template <class T>
TrainReport finetune_qa_loop(model::LMModel<T>& m, const std::vector<data::QASpan>& spans,
                             const LRSchedule& schedule, const TrainConfig& cfg, std::uint64_t seed) {
  schedule.validate();
  if (spans.empty()) throw InputError("no usable QA examples after span mapping");
  model::attach_qa_head(m);
  const auto params = m.parameters();
  auto opt = fresh_optimizer<T>(cfg);
  auto rng = rng_stream(seed, "batching");
  std::vector<std::size_t> order(spans.size());
  std::size_t cursor = order.size();
  TrainReport report;
  const auto t0 = std::chrono::steady_clock::now();
  std::uint64_t tokens = 0;
  const std::size_t per_step = std::max<std::size_t>(1, std::min(cfg.qa_batch, spans.size()));
  for (std::size_t step = 0; step < schedule.total_steps; ++step) {
    zero_grads(params);
    double loss_sum = 0;
    for (std::size_t k = 0; k < per_step; ++k) {
      if (cursor >= order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        data::fisher_yates(order, rng);
        cursor = 0;
      }
      const auto& sp = spans[order[cursor++]];
      Tape<T> tape;
      TapeScope<T> scope(tape);
      auto loss = model::qa_span_loss(model::qa_logits_tensor(m, sp.tokens), sp.context_begin, sp.start, sp.end);
      loss_sum += static_cast<double>(loss.item());
      tape.backward(scale(loss, static_cast<T>(1.0 / per_step)));
      tokens += sp.tokens.size();
    }
    StepRecord r;
    r.step = step + 1;
    r.loss = loss_sum / static_cast<double>(per_step);
    detail::require_finite_loss<T>(r.loss, r.step);
    r.gnorm = clip_gradients(params, cfg.clip).norm;
    r.lr = lr_at(schedule, step);
    adamw_step(params, opt, r.lr);
    r.tokens = tokens;
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.steps.push_back(r);
    detail::emit<T>(cfg, r, r.step == schedule.total_steps);
  }
  detail::write_checkpoint(m, opt, cfg, "finetuned.bmck", schedule.total_steps);
  return report;
}

}  // namespace biomamba::train
