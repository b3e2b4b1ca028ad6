#include "support.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <sstream>

using namespace mvcodot;
using ag::Var;
using test::tiny_config;

namespace {

const PreparedData& tiny_data() {
  static const PreparedData d = prepare_data(tiny_config());
  return d;
}

Batch first_batch(const PreparedData& d, std::size_t n = 4) { return make_batch(case_pointers(d.train, 0, n)); }

}  // namespace

TEST(Schedules, WarmupPeaksAtBaseRate) {
  const double base = 1e-3, warm = 200;
  EXPECT_NEAR(lr_pretrain(warm, base, warm), base, 1e-18);
  EXPECT_NEAR(lr_pretrain(4 * warm, base, warm), base / 2, 1e-18);
  EXPECT_NEAR(lr_pretrain(1, base, warm), base / warm, 1e-18);
  EXPECT_EQ(lr_pretrain(0, base, warm), lr_pretrain(1, base, warm));
  for (int s = 1; s < 2000; ++s) EXPECT_LE(lr_pretrain(s, base, warm), base * (1 + 1e-12));
  EXPECT_LT(lr_pretrain(warm - 1, base, warm), lr_pretrain(warm, base, warm));
  EXPECT_LT(lr_pretrain(warm + 1, base, warm), lr_pretrain(warm, base, warm));
}

TEST(Schedules, CosineAnnealingIsPeriodic) {
  const double lr = 1e-4, floor = 0.01;
  EXPECT_NEAR(lr_rl(0, lr, 15, floor), lr, 1e-18);
  EXPECT_NEAR(lr_rl(7.5, lr, 15, floor), 0.5 * (lr + floor * lr), 1e-18);
  for (double e = 0; e < 15; e += 0.5) EXPECT_NEAR(lr_rl(e + 15, lr, 15, floor), lr_rl(e, lr, 15, floor), 1e-18);
  for (int e = 1; e < 15; ++e) EXPECT_LT(lr_rl(e, lr, 15, floor), lr_rl(e - 1, lr, 15, floor));
  EXPECT_GT(lr_rl(14.99, lr, 15, floor), floor * lr);
}

TEST(Schedules, AlternationPattern) {
  std::string s;
  for (int t = 0; t < 10; ++t) s += alternate_schedule(t, 3, 2) == Branch::generation ? 'g' : 'c';
  EXPECT_EQ(s, "gggccgggcc");
  for (int t = 0; t < 5; ++t) EXPECT_EQ(alternate_schedule(t, 1, 0), Branch::generation);
  EXPECT_THROW(alternate_schedule(0, 0, 1), std::invalid_argument);
}

TEST(Schedules, RewardWeightParsing) {
  EXPECT_EQ(parse_reward_weights("2,2,1,1,2,2").w, (std::array<double, 6>{2, 2, 1, 1, 2, 2}));
  EXPECT_THROW(parse_reward_weights("1,1"), ConfigError);
}

TEST(Scst, EqualRewardsGiveExactlyZeroGradient) {
  const PreparedData& d = tiny_data();
  Trainer t(tiny_config("mvco_fusion"), d);
  Model& m = t.model();
  Batch b = first_batch(d);
  m.params().zero_grad();
  GenerationInput in = m.generation_input(b, true, &t.rng());
  auto mem = m.encode(in.features);
  std::mt19937_64 rng(3);
  auto sample = generator::batch_sample(m.decoder(), mem, 12, rng);
  const auto r = sequence_rewards(sample.ids, b.references, d.vocab, {});
  scst_loss(sample.logprob_sum, r, r).backward();
  long touched = 0;
  for (const auto& [name, p] : m.params().all()) {
    if (p.grad().size() == 0) continue;
    ++touched;
    EXPECT_EQ(p.grad().cwiseAbs().maxCoeff(), 0.0) << name;
  }
  EXPECT_GT(touched, 0);
}

TEST(Scst, AdvantageSignsTheGradient) {
  Var lp = Var::parameter(Matrix::Zero(2, 1));
  scst_loss(lp, {1.0, 0.0}, {0.5, 0.5}).backward();
  EXPECT_DOUBLE_EQ(lp.grad()(0, 0), -0.25);
  EXPECT_DOUBLE_EQ(lp.grad()(1, 0), 0.25);
  EXPECT_THROW(scst_loss(lp, {1.0}, {1.0}), std::invalid_argument);
}

TEST(Trainer, WiringRoutesGradientsPerMode) {
  const PreparedData& d = tiny_data();
  Batch b = first_batch(d);
  struct Expect {
    const char* mode;
    bool concat, views, dot;
  };
  for (auto e : {Expect{"base_cat", true, false, false}, Expect{"mvco_cat", true, false, false},
                 Expect{"mvco_fusion", false, true, false}, Expect{"mvco_dot", false, true, true}}) {
    Trainer t(tiny_config(e.mode), d);
    t.pretrain_step_generation(b);
    const auto& p = t.model().params();
    EXPECT_EQ(p.grad_norm("vision.phi_concat") > 0, e.concat) << e.mode;
    EXPECT_EQ(p.grad_norm("vision.phi_frontal") > 0, e.views) << e.mode;
    EXPECT_EQ(p.grad_norm("dot.") > 0, e.dot) << e.mode;
    EXPECT_EQ(p.grad_norm("mvco.") > 0, false) << e.mode;
    EXPECT_GT(p.grad_norm("decoder."), 0) << e.mode;
    if (std::string(e.mode) != "base_cat") {
      t.pretrain_step_contrastive(b);
      EXPECT_GT(p.grad_norm("mvco."), 0) << e.mode;
      EXPECT_GT(p.grad_norm("vision.phi_frontal"), 0) << e.mode;
      EXPECT_GT(p.grad_norm("vision.phi_lateral"), 0) << e.mode;
      EXPECT_EQ(p.grad_norm("dot."), 0) << e.mode;
    }
  }
}

TEST(Trainer, StackedStreamsMatchSeparateStreams) {
  const PreparedData& d = tiny_data();
  Trainer t(tiny_config("mvco_cat"), d);
  Batch b = first_batch(d, 5);
  auto [f, l] = t.model().paired_semantics(b);
  EXPECT_LT((f.x.value() - t.model().view_stream(b, ViewTag::frontal).semantic.x.value()).norm(), 1e-12);
  EXPECT_LT((l.x.value() - t.model().view_stream(b, ViewTag::lateral).semantic.x.value()).norm(), 1e-12);
}

TEST(Trainer, SeparateOptimizersPerBranch) {
  const PreparedData& d = tiny_data();
  Trainer t(tiny_config("mvco_fusion"), d);
  Batch b = first_batch(d);
  t.pretrain_step_generation(b);
  t.pretrain_step_generation(b);
  t.pretrain_step_contrastive(b);
  EXPECT_EQ(t.optimizer().steps(), 2);
  EXPECT_EQ(t.contrastive_optimizer().steps(), 1);
  EXPECT_EQ(t.current_pretrain_lr(Branch::contrastive), lr_pretrain(2, 1e-2, 10));
}

TEST(Trainer, LogStructureAndActionFrequencies) {
  const PreparedData& d = tiny_data();
  Trainer t(tiny_config("mvco_dot"), d);
  TrainLog log;
  int epochs_seen = 0;
  t.run(log, [&](Trainer&) { ++epochs_seen; });
  EXPECT_EQ(epochs_seen, 3);
  EXPECT_EQ(t.state().phase, "done");
  const auto epochs = log.of_type("epoch");
  ASSERT_EQ(epochs.size(), 3u);
  for (const auto& e : epochs) {
    const auto& a = e.at("actions");
    EXPECT_NEAR(a.at("frontal").get<double>() + a.at("lateral").get<double>() + a.at("fusion").get<double>(), 1.0, 1e-12);
    EXPECT_TRUE(e.contains("val"));
  }
  EXPECT_TRUE(epochs[0].contains("mean_mvco"));
  EXPECT_FALSE(epochs[2].contains("mean_mvco"));
  EXPECT_EQ(epochs[2].at("phase"), "rl");
  long xe = 0, con = 0, rl = 0;
  for (const auto& s : log.of_type("step")) {
    const std::string k = s.at("kind");
    xe += k == "xe";
    con += k == "mvco";
    rl += k == "rl";
    EXPECT_GT(s.at("lr").get<double>(), 0.0);
  }
  EXPECT_EQ(xe, 2 * 7);  // 42 training cases in batches of 6
  EXPECT_EQ(rl, 7);
  EXPECT_EQ(con, 2 * 3);  // one contrastive step after every two generation steps
}

TEST(Trainer, RunsAreDeterministic) {
  const PreparedData& d = tiny_data();
  Trainer a(tiny_config("mvco_dot"), d), b(tiny_config("mvco_dot"), d);
  TrainLog la, lb;
  a.run(la);
  b.run(lb);
  EXPECT_EQ(la.to_jsonl(), lb.to_jsonl());
  const auto pa = checkpoint::snapshot_parameters(a.model().params());
  const auto pb = checkpoint::snapshot_parameters(b.model().params());
  for (const auto& [name, m] : pa) EXPECT_TRUE(m == pb.at(name)) << name;
}

TEST(Trainer, ResumeReproducesUninterruptedRun) {
  const PreparedData& d = tiny_data();
  Config cfg = tiny_config("mvco_dot");
  cfg.train.pretrain_epochs = 3;
  cfg.train.rl_epochs = 2;
  Trainer full(cfg, d);
  TrainLog full_log;
  std::vector<checkpoint::Checkpoint> snaps;
  std::vector<std::string> logs;
  full.run(full_log, [&](Trainer& t) {
    snaps.push_back(t.make_checkpoint(true));
    logs.push_back(full_log.to_jsonl());
  });
  ASSERT_EQ(snaps.size(), 5u);
  for (std::size_t k : {std::size_t{1}, std::size_t{3}}) {
    const auto path = std::filesystem::temp_directory_path() / "mvcodot_test_resume.ckpt";
    checkpoint::save(snaps[k], path);
    Trainer resumed(cfg, d);
    resumed.restore(checkpoint::load(path));
    TrainLog log;
    std::istringstream in(logs[k]);
    std::string line;
    while (std::getline(in, line)) log.append(nlohmann::json::parse(line));
    resumed.run(log);
    EXPECT_EQ(log.to_jsonl(), full_log.to_jsonl()) << k;
    const auto a = checkpoint::snapshot_parameters(full.model().params());
    const auto b = checkpoint::snapshot_parameters(resumed.model().params());
    for (const auto& [name, m] : a) EXPECT_TRUE(m == b.at(name)) << name << " after resume at " << k;
  }
}

TEST(Trainer, RestoreRejectsForeignVocabulary) {
  const PreparedData& d = tiny_data();
  Trainer t(tiny_config(), d);
  auto ck = t.make_checkpoint(false);
  ck.vocabulary.push_back("zzz");
  Trainer u(tiny_config(), d);
  EXPECT_THROW(u.restore(ck), CheckpointError);
}

TEST(Evaluate, ViewConditionsAndDecoders) {
  const PreparedData& d = tiny_data();
  Trainer t(tiny_config("mvco_dot"), d);
  for (Decode dec : {Decode::greedy, Decode::beam}) {
    for (const auto& views : experiments::input_conditions()) {
      const EvalResult r = evaluate(t.model(), d.test, d.vocab, dec, views);
      EXPECT_EQ(r.candidates.size(), d.test.size());
      for (double v : r.report.as_array()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
    }
  }
  EXPECT_THROW(parse_decode("sample"), ConfigError);
}

TEST(Evaluate, BeamOfOneEqualsGreedy) {
  const PreparedData& d = tiny_data();
  Config cfg = tiny_config("mvco_fusion");
  cfg.gen.beam = 1;
  Trainer t(cfg, d);
  TrainLog log;
  t.run(log);
  EXPECT_EQ(evaluate(t.model(), d.test, d.vocab, Decode::beam).candidates,
            evaluate(t.model(), d.test, d.vocab, Decode::greedy).candidates);
}

TEST(Data, VocabularyComesFromTrainingSplitOnly) {
  const PreparedData& d = tiny_data();
  std::set<std::string> train_tokens;
  for (const auto& c : d.train) train_tokens.insert(c.reference.begin(), c.reference.end());
  for (const auto& t : d.vocab.regular_tokens()) EXPECT_TRUE(train_tokens.count(t)) << t;
  EXPECT_EQ(d.train.size() + d.val.size() + d.test.size(), 60u);
  EXPECT_EQ(d.regions, 4);
}
