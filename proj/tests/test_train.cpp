// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <regex>
#include <sstream>

#include "biomamba/train.hpp"

namespace bm = biomamba;
namespace md = biomamba::model;
namespace tr = biomamba::train;
namespace fs = std::filesystem;

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
  c.seed = 3;
  return c;
}

std::vector<bm::data::TokenId> pattern_corpus(std::size_t n) {
  const std::string text = "the kinase phosphorylates the substrate. ";
  std::vector<bm::data::TokenId> out;
  for (std::size_t i = 0; out.size() < n; ++i) out.push_back(static_cast<unsigned char>(text[i % text.size()]));
  return out;
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "biomamba_test_train" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

bm::Tensor<double> scalar_param(double v) {
  auto t = bm::Tensor<double>::zeros({1}, true);
  t.mutable_data()[0] = v;
  return t;
}

void set_grad(bm::Tensor<double> t, double g) { t.mutable_grad()[0] = g; }

}  // namespace

TEST(Schedule, WarmupCosineAndClamp) {
  tr::LRSchedule s{10, 110, 1e-3, 1e-5};
  EXPECT_DOUBLE_EQ(tr::lr_at(s, 0), 1e-4);
  EXPECT_DOUBLE_EQ(tr::lr_at(s, 9), 1e-3);
  EXPECT_DOUBLE_EQ(tr::lr_at(s, 10), 1e-3);
  EXPECT_NEAR(tr::lr_at(s, 60), 0.5 * (1e-3 + 1e-5), 1e-15);
  EXPECT_DOUBLE_EQ(tr::lr_at(s, 110), 1e-5);
  EXPECT_DOUBLE_EQ(tr::lr_at(s, 5000), 1e-5);
  for (std::size_t i = 10; i < 110; ++i) EXPECT_LE(tr::lr_at(s, i + 1), tr::lr_at(s, i));
  EXPECT_THROW((tr::LRSchedule{0, 10}.validate()), bm::ContractError);
  EXPECT_THROW((tr::LRSchedule{10, 10}.validate()), bm::ContractError);
}

TEST(AdamW, SingleScalarStep) {
  // m_hat = 0.5, v_hat = 0.25, so theta' = 1 - 0.1 * (0.5 / (0.5 + eps) + 0.1).
  auto oracle = [](double theta, double g, double lr, double wd, double eps) {
    const double m = 0.1 * g, v = 0.05 * g * g;
    const double mh = m / 0.1, vh = v / 0.05;
    return theta - lr * (mh / (std::sqrt(vh) + eps) + wd * theta);
  };
  for (double eps : {1e-8, 0.0}) {
    auto th = scalar_param(1.0);
    bm::ParamList<double> ps{{"theta", th, true}};
    set_grad(th, 0.5);
    tr::OptimizerState<double> st;
    st.eps = eps;
    tr::adamw_step(ps, st, 0.1);
    EXPECT_NEAR(th.data()[0], oracle(1.0, 0.5, 0.1, 0.1, eps), 1e-12);
    // eps shifts the result by lr * eps / sqrt(v_hat) at most.
    EXPECT_NEAR(th.data()[0], 0.89, 0.1 * eps / 0.5 + 1e-12);
  }
}

TEST(AdamW, DecayOnlyOnFlaggedParams) {
  auto a = scalar_param(2.0), b = scalar_param(2.0);
  bm::ParamList<double> ps{{"a", a, true}, {"b", b, false}};
  set_grad(a, 0.0);
  set_grad(b, 0.0);
  tr::OptimizerState<double> st;
  tr::adamw_step(ps, st, 0.1);
  EXPECT_NEAR(a.data()[0], 2.0 - 0.1 * 0.1 * 2.0, 1e-15);
  EXPECT_EQ(b.data()[0], 2.0);
}

TEST(AdamW, ConvergesOnQuadratic) {
  // f(x, y) = (x - 3)^2 + 10 (y + 1)^2
  auto x = scalar_param(0.0), y = scalar_param(0.0);
  bm::ParamList<double> ps{{"x", x, false}, {"y", y, false}};
  tr::OptimizerState<double> st;
  tr::LRSchedule sched{10, 200, 0.2, 1e-5};
  for (std::size_t step = 0; step < 200; ++step) {
    set_grad(x, 2 * (x.data()[0] - 3));
    set_grad(y, 20 * (y.data()[0] + 1));
    tr::adamw_step(ps, st, tr::lr_at(sched, step));
  }
  EXPECT_NEAR(x.data()[0], 3.0, 1e-3);
  EXPECT_NEAR(y.data()[0], -1.0, 1e-3);
}

TEST(Clip, ScalesToMaxNormAndRejectsNonFinite) {
  auto a = scalar_param(0), b = scalar_param(0);
  bm::ParamList<double> ps{{"a", a, true}, {"b", b, true}};
  set_grad(a, 3);
  set_grad(b, 4);
  auto r = tr::clip_gradients(ps, 1.0);
  EXPECT_DOUBLE_EQ(r.norm, 5.0);
  EXPECT_DOUBLE_EQ(r.scale, 0.2);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-15);
  set_grad(a, 0.3);
  set_grad(b, 0.4);
  EXPECT_DOUBLE_EQ(tr::clip_gradients(ps, 1.0).scale, 1.0);
  set_grad(a, std::numeric_limits<double>::quiet_NaN());
  EXPECT_THROW(tr::clip_gradients(ps, 1.0), bm::NumericError);
}

TEST(Pretrain, TiedStorageSurvivesUpdates) {
  auto m = md::init_model<float>(tiny());
  bm::data::BatchStream stream(pattern_corpus(400), 32, 64, 1);
  tr::pretrain_loop(m, stream, {2, 5, 1e-3}, {});
  EXPECT_EQ(m.lm_head().node().get(), m.token_embedding.node().get());
}

TEST(Pretrain, LossDecreasesAndLogsFormat) {
  auto m = md::init_model<float>(tiny());
  bm::data::BatchStream stream(pattern_corpus(2000), 32, 128, 1);
  std::ostringstream log;
  tr::TrainConfig cfg;
  cfg.log = &log;
  auto rep = tr::pretrain_loop(m, stream, {5, 50, 3e-3}, cfg);
  ASSERT_EQ(rep.steps.size(), 50u);
  EXPECT_NEAR(rep.steps.front().loss, std::log(260.0), 0.3);
  EXPECT_LT(rep.steps.back().loss, rep.steps.front().loss - 1.0);
  const std::regex line(R"(step=\d+ loss=[0-9.]+ lr=[0-9.e+-]+ gnorm=[0-9.e+-]+ tokens=\d+)");
  std::istringstream in(log.str());
  std::string l;
  std::size_t n = 0;
  while (std::getline(in, l)) {
    EXPECT_TRUE(std::regex_match(l, line)) << l;
    ++n;
  }
  EXPECT_EQ(n, 50u);
}

TEST(Pretrain, MemorizesRepeatedSequences) {
  // Ten fixed 32-token sequences, each repeated: the model should fit them.
  std::vector<bm::data::TokenId> corpus;
  std::mt19937_64 rng(11);
  std::vector<std::vector<bm::data::TokenId>> seqs(10);
  for (auto& s : seqs)
    for (int i = 0; i < 32; ++i) s.push_back(static_cast<bm::data::TokenId>(bm::uniform_below(rng, 256)));
  for (int rep = 0; rep < 4; ++rep)
    for (auto& s : seqs) corpus.insert(corpus.end(), s.begin(), s.end());
  auto m = md::init_model<float>(tiny());
  bm::data::BatchStream stream(corpus, 32, 320, 2);
  auto rep = tr::pretrain_loop(m, stream, {20, 300, 1e-2, 1e-4}, {});
  EXPECT_LT(rep.steps.back().loss, 0.1);
}

TEST(Pretrain, DeterministicAndResumable) {
  const auto dir = fresh_dir("resume");
  const tr::LRSchedule sched{3, 12, 2e-3};
  tr::TrainConfig cfg;
  cfg.checkpoint_every = 6;
  cfg.out_dir = (dir / "a").string();
  cfg.grad_accum = 2;

  auto m1 = md::init_model<float>(tiny());
  bm::data::BatchStream s1(pattern_corpus(1500), 32, 64, 9);
  auto r1 = tr::pretrain_loop(m1, s1, sched, cfg);
  ASSERT_TRUE(fs::exists(dir / "a" / "step-6.bmck"));
  ASSERT_TRUE(fs::exists(dir / "a" / "step-6.opt"));
  ASSERT_TRUE(fs::exists(dir / "a" / "final.bmck"));

  auto m2 = md::init_model<float>(tiny());
  bm::data::BatchStream s2(pattern_corpus(1500), 32, 64, 9);
  cfg.out_dir.clear();
  auto r2 = tr::pretrain_loop(m2, s2, sched, cfg);
  for (std::size_t i = 0; i < r1.steps.size(); ++i) EXPECT_EQ(r1.steps[i].loss, r2.steps[i].loss);

  auto loaded = bm::checkpoint::load_checkpoint<float>((dir / "a" / "step-6.bmck").string());
  EXPECT_EQ(loaded.meta.step, 6u);
  auto opt = tr::load_optimizer<float>(tr::optimizer_path((dir / "a" / "step-6.bmck").string()));
  EXPECT_EQ(opt.step, 6u);
  bm::data::BatchStream s3(pattern_corpus(1500), 32, 64, 9);
  s3.skip(6 * cfg.grad_accum);
  std::ostringstream log;
  cfg.log = &log;
  auto r3 = tr::pretrain_loop(loaded.model, s3, sched, cfg, opt);
  ASSERT_EQ(r3.steps.size(), 6u);
  EXPECT_EQ(r3.steps.front().step, 7u);
  EXPECT_EQ(r3.steps.back().tokens, r1.steps.back().tokens);
  EXPECT_EQ(log.str().rfind("step=7 ", 0), 0u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(r3.steps[i].loss, r1.steps[6 + i].loss);
  auto p1 = m1.parameters(), p3 = loaded.model.parameters();
  for (std::size_t i = 0; i < p1.size(); ++i) {
    auto a = p1[i].tensor.data(), b = p3[i].tensor.data();
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << p1[i].name;
  }
}

TEST(Pretrain, NonFiniteLossAbortsWithoutOverwriting) {
  const auto dir = fresh_dir("nan");
  auto m = md::init_model<float>(tiny());
  bm::data::BatchStream s(pattern_corpus(400), 32, 64, 1);
  tr::TrainConfig cfg;
  cfg.out_dir = dir.string();
  cfg.checkpoint_every = 2;
  tr::pretrain_loop(m, s, {1, 4, 1e-3}, cfg);
  const auto before = fs::last_write_time(dir / "final.bmck");
  for (auto& v : m.token_embedding.mutable_data()) v = std::numeric_limits<float>::quiet_NaN();
  bm::data::BatchStream s2(pattern_corpus(400), 32, 64, 1);
  EXPECT_THROW(tr::pretrain_loop(m, s2, {1, 4, 1e-3}, cfg), bm::NumericError);
  EXPECT_EQ(fs::last_write_time(dir / "final.bmck"), before);
  EXPECT_NO_THROW(bm::checkpoint::load_checkpoint<float>((dir / "final.bmck").string()));
}

TEST(Finetune, RejectsEmptyExampleSet) {
  auto m = md::init_model<float>(tiny());
  EXPECT_THROW(tr::finetune_qa_loop(m, {}, {1, 4, 1e-3}, {}, 0), bm::InputError);
}
