// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "evla/error.hpp"
#include "evla/seed.hpp"
#include "evla/trainer.hpp"
#include "test_util.hpp"

namespace evla {
namespace {

PolicyConfig tiny_policy(MaskMode mode) {
  PolicyConfig cfg;
  cfg.model_dim = 16;
  cfg.encoder.model_dim = 16;
  cfg.encoder.feature_a = 8;
  cfg.encoder.feature_b = 8;
  cfg.n_heads = 2;
  cfg.mlp_hidden = 32;
  cfg.action_bins = 16;
  cfg.mask_mode = mode;
  return cfg;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.batch_size = 4;
  t.steps = 6;
  t.eval_every = 3;
  t.train_size = 40;
  t.val_size = 12;
  t.lr = 1e-3;
  return t;
}

TEST(TrainConfig, ValidationAndRoundTrip) {
  TrainConfig t;
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), Error);
  t = TrainConfig{};
  t.steps = 0;
  EXPECT_THROW(t.validate(), Error);
  t = tiny_train();
  const auto back = TrainConfig::from_kv(t.to_kv());
  EXPECT_EQ(back.to_kv(), t.to_kv());
}

TEST(Argmax, RestrictedToDimensionBlock) {
  PolicyConfig cfg = tiny_policy(MaskMode::kJoint);
  std::vector<double> row(cfg.vocab(), 0.0);
  row[0] = 5.0;  // a text token wins globally
  row[static_cast<std::size_t>(cfg.action_token(2, 7))] = 1.0;
  EXPECT_EQ(argmax_token(row, cfg, 2, false), 0);
  EXPECT_EQ(argmax_token(row, cfg, 2, true), cfg.action_token(2, 7));
  // Ties resolve to the lowest id of the block.
  EXPECT_EQ(argmax_token(row, cfg, 3, true), cfg.action_token(3, 0));
}

TEST(Evaluate, PerfectLogitsScoreOne) {
  const PolicyConfig cfg = tiny_policy(MaskMode::kJoint);
  const auto eps = gen_dataset(4, 200, Split::kTrain, TaskConfig{});
  const ActionCodec codec = fit_codec_for(eps, cfg, TrainConfig{});
  double max_half = 0.0;
  for (std::size_t d = 0; d < codec.dims(); ++d)
    for (std::size_t b = 0; b < codec.bins(); ++b) max_half = std::max(max_half, 0.5 * codec.bin_width(d, b));
  for (const Episode& ep : eps) {
    const auto labels = codec.tokenize(ep.action);
    Tensor logits = Tensor::zeros(cfg.action_dims, cfg.vocab());
    for (std::size_t d = 0; d < cfg.action_dims; ++d) logits.at(d, static_cast<std::size_t>(labels[d])) = 10.0;
    for (bool restrict_to_dim : {true, false}) {
      const auto s = score_action_logits(logits, labels, ep.action, codec, cfg, restrict_to_dim);
      EXPECT_EQ(s.correct, cfg.action_dims);
      EXPECT_TRUE(s.all_correct);
      // Every dim is off by at most half a bin.
      EXPECT_LE(s.l2_error, std::sqrt(static_cast<double>(cfg.action_dims)) * max_half + 1e-15);
    }
  }
}

TEST(Evaluate, EmptySetIsError) {
  const PolicyConfig cfg = tiny_policy(MaskMode::kJoint);
  const auto p = init_params(cfg);
  const auto eps = gen_dataset(4, 20, Split::kTrain, TaskConfig{});
  const ActionCodec codec = fit_codec_for(eps, cfg, TrainConfig{});
  EXPECT_THROW(evaluate(p, cfg, std::span<const Episode>(), codec, MaskMode::kJoint), Error);
}

// Exchangeable head columns make the restricted argmax uniform over the B
// bins of a slot, so a fresh init scores 1/B in expectation. Each init
// contributes D positions; inits are independent.
TEST(Evaluate, RandomInitAccuracyIsChance) {
  PolicyConfig cfg;  // default toy config, B = 256
  const TaskConfig task;
  const auto train = gen_dataset(11, 500, Split::kTrain, task);
  const ActionCodec codec = fit_codec_for(train, cfg, TrainConfig{});
  const std::size_t inits = 1500;
  const auto eps = gen_dataset(12, inits, Split::kVal, task);
  std::size_t correct = 0;
  std::size_t positions = 0;
  for (std::size_t i = 0; i < inits; ++i) {
    cfg.seed = 1000 + i;
    const auto p = init_params(cfg);
    const auto m = evaluate(p, cfg, std::span(eps).subspan(i, 1), codec, MaskMode::kJoint);
    correct += static_cast<std::size_t>(std::lround(m.token_accuracy * m.positions));
    positions += m.positions;
  }
  ASSERT_GE(positions, 10000u);
  const double p0 = 1.0 / 256.0;
  const double n = static_cast<double>(positions);
  const double sigma = std::sqrt(n * p0 * (1 - p0));
  EXPECT_NEAR(static_cast<double>(correct), n * p0, 3 * sigma) << correct << " of " << positions;
}

TEST(Training, SupervisionOnlyOnActionPositions) {
  for (MaskMode mode : {MaskMode::kJoint, MaskMode::kCausal}) {
    const PolicyConfig cfg = tiny_policy(mode);
    auto p = init_params(cfg);
    const auto eps = gen_dataset(5, 20, Split::kTrain, TaskConfig{});
    const ActionCodec codec = fit_codec_for(eps, cfg, TrainConfig{});
    const Episode& ep = eps[3];

    // Reference: logits for every position, loss masked to the action rows.
    auto ex = make_example(p, cfg, ep, codec, mode);
    const std::size_t T = ex.sequence.layout.total();
    std::vector<int> all_rows(T);
    std::iota(all_rows.begin(), all_rows.end(), 0);
    PolicyTape tape;
    forward_rows(p, cfg, ex.sequence.embeddings, ex.mask, all_rows, &tape);
    std::vector<int> labels(T, 0);
    std::vector<std::uint8_t> supervised(T, 0);
    for (std::size_t d = 0; d < cfg.action_dims; ++d) {
      labels[ex.sequence.layout.action_begin() + d] = ex.action_labels[d];
      supervised[ex.sequence.layout.action_begin() + d] = 1;
    }
    const auto ce = cross_entropy_logits(tape.logits, labels, supervised);
    cross_entropy_backward(tape.logits, labels, supervised, ce);
    for (std::size_t r = 0; r < ex.sequence.layout.prefix_len; ++r) {
      for (double g : tape.logits.grad().subspan(r * cfg.vocab(), cfg.vocab())) ASSERT_EQ(g, 0.0);
    }
    policy_backward(p, cfg, tape);
    std::vector<double> full_grad;
    for (auto& [name, t] : p.named())
      if (name == "lm_head" || name == "layer1.mlp.w2") full_grad.insert(full_grad.end(), t->grad().begin(), t->grad().end());

    p.zero_grad();
    auto ex2 = make_example(p, cfg, ep, codec, mode);
    const auto r = example_step(p, cfg, ex2, ep, codec, 1.0, true);
    EXPECT_NEAR(r.loss, ce.loss, 1e-12);
    std::vector<double> head_grad;
    for (auto& [name, t] : p.named())
      if (name == "lm_head" || name == "layer1.mlp.w2") head_grad.insert(head_grad.end(), t->grad().begin(), t->grad().end());
    ASSERT_EQ(full_grad.size(), head_grad.size());
    for (std::size_t i = 0; i < full_grad.size(); ++i) EXPECT_NEAR(full_grad[i], head_grad[i], 1e-12);
  }
}

TEST(Training, ZeroLearningRateLeavesParamsUnchanged) {
  const PolicyConfig cfg = tiny_policy(MaskMode::kJoint);
  auto p = init_params(cfg);
  const auto before = params_checksum(p);
  const auto eps = gen_dataset(6, 8, Split::kTrain, TaskConfig{});
  const ActionCodec codec = fit_codec_for(eps, cfg, TrainConfig{});
  TrainConfig t = tiny_train();
  t.lr = 0.0;
  AdamState adam = AdamState::zeros(p);
  const auto m = train_step(p, cfg, eps, codec, t, adam);
  EXPECT_GT(m.grad_norm, 0.0);
  EXPECT_EQ(params_checksum(p), before);
}

TEST(Training, StepIsIndependentOfThreadCount) {
  const PolicyConfig cfg = tiny_policy(MaskMode::kCausal);
  const auto eps = gen_dataset(7, 5, Split::kTrain, TaskConfig{});
  const ActionCodec codec = fit_codec_for(eps, cfg, TrainConfig{});
  std::vector<std::uint64_t> sums;
  for (std::size_t threads : {1u, 2u, 3u}) {
    auto p = init_params(cfg);
    TrainConfig t = tiny_train();
    t.threads = threads;
    AdamState adam = AdamState::zeros(p);
    for (int s = 0; s < 2; ++s) train_step(p, cfg, eps, codec, t, adam);
    sums.push_back(params_checksum(p));
  }
  EXPECT_EQ(sums[0], sums[1]);
  EXPECT_EQ(sums[0], sums[2]);
}

// Feeding slot t its own label instead of the previous one must change the
// loss; an off-by-one in teacher forcing would leave it unchanged.
TEST(Training, TeacherForcingShiftChangesLoss) {
  const PolicyConfig cfg = tiny_policy(MaskMode::kCausal);
  auto p = init_params(cfg);
  const auto eps = gen_dataset(8, 20, Split::kTrain, TaskConfig{});
  const ActionCodec codec = fit_codec_for(eps, cfg, TrainConfig{});
  for (const Episode& ep : eps) {
    TrainingExample ex = make_example(p, cfg, ep, codec, MaskMode::kCausal);
    const double shifted = example_step(p, cfg, ex, ep, codec, 0.0, true).loss;
    std::vector<SlotSource> unshifted;
    for (int label : ex.action_labels) unshifted.push_back(SlotSource::token(label));
    ex.sequence = assemble_sequence(p, cfg, ex.encoder.out, ex.instruction, unshifted);
    const double leaked = example_step(p, cfg, ex, ep, codec, 0.0, true).loss;
    EXPECT_GT(std::abs(shifted - leaked), 1e-9);
  }
}

// Training cost is one forward per episode in either regime, so the step
// rates should be close. Rounds alternate to spread out machine noise.
TEST(Training, JointAndCausalStepRatesAreComparable) {
  const auto eps = gen_dataset(9, 8, Split::kTrain, TaskConfig{});
  std::vector<double> ratios;
  for (int round = 0; round < 5; ++round) {
    double ms[2] = {0.0, 0.0};
    for (MaskMode mode : {MaskMode::kJoint, MaskMode::kCausal}) {
      PolicyConfig cfg;
      cfg.mask_mode = mode;
      auto p = init_params(cfg);
      const ActionCodec codec = fit_codec_for(eps, cfg, TrainConfig{});
      TrainConfig t;
      AdamState adam = AdamState::zeros(p);
      const auto t0 = std::chrono::steady_clock::now();
      for (int s = 0; s < 3; ++s) train_step(p, cfg, eps, codec, t, adam);
      ms[mode == MaskMode::kJoint ? 0 : 1] =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    ratios.push_back(ms[0] / ms[1]);
  }
  std::sort(ratios.begin(), ratios.end());
  const double median = ratios[ratios.size() / 2];
  EXPECT_GT(median, 1.0 / 1.2);
  EXPECT_LT(median, 1.2);
}

TEST(Training, ClippingBoundsTheUpdateInput) {
  const PolicyConfig cfg = tiny_policy(MaskMode::kJoint);
  auto p = init_params(cfg);
  for (auto& [name, t] : p.named()) {
    double* g = t->grad_data();
    for (std::size_t i = 0; i < t->size(); ++i) g[i] = 1.0;
  }
  TrainConfig t;
  t.clip_norm = 1.0;
  AdamState adam = AdamState::zeros(p);
  const double norm = adam_update(p, adam, t);
  EXPECT_NEAR(norm, std::sqrt(static_cast<double>(p.parameter_count())), 1e-9);
  // After clipping every element's gradient is 1 / norm; Adam's first moment
  // holds (1 - beta1) times that.
  EXPECT_NEAR(adam.m[0][0], (1 - t.beta1) / norm, 1e-15);
}

TEST(RunTraining, DeterministicArtifacts) {
  TrainingInputs in;
  in.policy = tiny_policy(MaskMode::kJoint);
  in.train = tiny_train();
  in.record_wall_clock = false;
  const auto a = run_training(in);
  const auto b = run_training(in);
  EXPECT_EQ(encode_checkpoint(a.checkpoint), encode_checkpoint(b.checkpoint));
  EXPECT_EQ(a.csv, b.csv);
  ASSERT_EQ(a.rows.size(), 2u);
  EXPECT_EQ(a.rows[0].step, 3u);
  EXPECT_EQ(a.rows[1].step, 6u);
}

TEST(RunTraining, CsvLayoutAndEvalConsistency) {
  TrainingInputs in;
  in.policy = tiny_policy(MaskMode::kCausal);
  in.train = tiny_train();
  in.train.steps = 7;
  in.run_config.set("run.name", std::string("unit"));
  const auto out = run_training(in);
  ASSERT_EQ(out.rows.size(), 3u);
  EXPECT_EQ(out.rows.back().step, 7u);

  std::istringstream lines(out.csv);
  std::string line;
  bool header_seen = false;
  std::size_t comments = 0;
  std::size_t data = 0;
  while (std::getline(lines, line)) {
    if (line.starts_with("# ")) {
      EXPECT_FALSE(header_seen);
      ++comments;
    } else if (!header_seen) {
      EXPECT_EQ(line, kMetricsHeader);
      header_seen = true;
    } else {
      ++data;
    }
  }
  EXPECT_GT(comments, 10u);
  EXPECT_EQ(data, 3u);
  EXPECT_NE(out.csv.find("# train.lr=0.001"), std::string::npos);
  EXPECT_NE(out.csv.find("# run.name=unit"), std::string::npos);
  EXPECT_NE(out.csv.find("# mask.mode=causal"), std::string::npos);

  const auto val = gen_dataset(derive_seed(in.train.seed, "data"), in.train.val_size, Split::kVal,
                               TaskConfig{});
  const auto& ck = out.checkpoint;
  const auto ev = evaluate(ck.params, ck.policy, val, ck.codec, MaskMode::kCausal);
  EXPECT_EQ(ev.token_accuracy, out.rows.back().val_accuracy);
  EXPECT_EQ(ev.loss, out.rows.back().val_loss);
}

// Golden record: the seed, step count and learning rate of the single-episode
// overfit run live in tests/golden/overfit.txt.
TEST(RunTraining, SingleEpisodeOverfitsInBothModes) {
  std::ifstream golden(std::string(EVLA_GOLDEN_DIR) + "/overfit.txt");
  ASSERT_TRUE(golden);
  std::stringstream text;
  text << golden.rdbuf();
  const KeyValues g = KeyValues::parse(text.str(), "overfit.txt");
  for (MaskMode mode : {MaskMode::kJoint, MaskMode::kCausal}) {
    TrainingInputs in;
    in.policy.mask_mode = mode;
    in.train.steps = static_cast<std::size_t>(g.get_uint("steps"));
    in.train.lr = g.get_double("lr");
    in.train.seed = g.get_uint("seed");
    in.train.batch_size = 1;
    in.train.eval_every = in.train.steps;
    const Episode ep = gen_episode(g.get_uint("episode_seed"), TaskConfig{});
    // The codec still needs a spread of actions; the single episode is the
    // only thing trained and evaluated on.
    std::vector<Episode> fit = gen_dataset(1, 64, Split::kTrain, TaskConfig{});
    fit.insert(fit.begin(), ep);
    in.codec = fit_codec_for(fit, in.policy, in.train);
    in.train_set = std::vector<Episode>{ep};
    in.val_set = std::vector<Episode>{ep};
    const auto out = run_training(in);
    EXPECT_EQ(out.final_val.token_accuracy, 1.0) << to_string(mode);
  }
}

}  // namespace
}  // namespace evla
