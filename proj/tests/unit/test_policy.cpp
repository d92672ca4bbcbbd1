// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numeric>

#include "evla/codec.hpp"
#include "evla/error.hpp"
#include "evla/grad_check.hpp"
#include "evla/policy.hpp"
#include "evla/toy_world.hpp"
#include "evla/trainer.hpp"
#include "test_util.hpp"

namespace evla {
namespace {

using testing::random_tensor;

PolicyConfig small_config(std::size_t dim = 16, std::size_t bins = 4) {
  PolicyConfig cfg;
  cfg.model_dim = dim;
  cfg.encoder.model_dim = dim;
  cfg.encoder.feature_a = 6;
  cfg.encoder.feature_b = 5;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.mlp_hidden = 2 * dim;
  cfg.action_bins = bins;
  cfg.seed = 5;
  return cfg;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TEST(InitParams, DeterministicInSeed) {
  PolicyConfig cfg;
  const auto a = init_params(cfg);
  const auto b = init_params(cfg);
  EXPECT_EQ(params_checksum(a), params_checksum(b));
  cfg.seed = 1;
  EXPECT_NE(params_checksum(a), params_checksum(init_params(cfg)));
}

TEST(InitParams, ShapesFollowConfig) {
  const PolicyConfig cfg;
  const auto p = init_params(cfg);
  EXPECT_EQ(p.token_embedding.shape(), (Shape{cfg.vocab(), cfg.model_dim}));
  EXPECT_EQ(p.position_embedding.shape(), (Shape{cfg.max_seq_len, cfg.model_dim}));
  EXPECT_EQ(p.lm_head.shape(), (Shape{cfg.model_dim, cfg.vocab()}));
  EXPECT_EQ(p.action_queries.shape(), (Shape{cfg.action_dims, cfg.model_dim}));
  EXPECT_EQ(p.layers.size(), cfg.n_layers);
  for (const auto& [name, t] : p.named()) t->assert_finite(name);
}

TEST(PolicyConfig, Validation) {
  PolicyConfig cfg;
  cfg.n_heads = 5;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = PolicyConfig{};
  cfg.action_bins = 1;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = PolicyConfig{};
  cfg.vocab_size = cfg.text_vocab_size + 3;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = PolicyConfig{};
  EXPECT_EQ(PolicyConfig::from_kv(cfg.to_kv()).to_kv(), cfg.to_kv());
}

TEST(InitParams, LogitScaleMatchesGolden) {
  const PolicyConfig cfg;
  const auto p = init_params(cfg);
  const Episode ep = gen_episode(1, TaskConfig{});
  const Tensor img = encode_image(ep.image, p.encoder, cfg.encoder);
  const std::vector<int> instr = {ep.instruction};
  const auto slots = joint_slots(cfg.action_dims);
  const auto seq = assemble_sequence(p, cfg, img, instr, slots);
  const Tensor logits = forward(p, cfg, seq.embeddings, build_mask(seq.layout, cfg.mask_mode));
  double mean = 0.0;
  for (double v : logits.values()) mean += v;
  mean /= static_cast<double>(logits.size());
  double var = 0.0;
  for (double v : logits.values()) var += (v - mean) * (v - mean);
  const double std_dev = std::sqrt(var / static_cast<double>(logits.size()));
  EXPECT_GE(std_dev, 0.1);
  EXPECT_LE(std_dev, 10.0);

  std::ifstream golden(std::string(EVLA_GOLDEN_DIR) + "/init_logit_std.txt");
  ASSERT_TRUE(golden) << "missing golden file";
  std::string line;
  double recorded = -1.0;
  while (std::getline(golden, line)) {
    if (line.starts_with("logit_std=")) recorded = std::stod(line.substr(10));
  }
  EXPECT_NEAR(std_dev, recorded, 1e-9) << "measured " << std_dev;
}

// One layer, dim 4, single position: with the attention output projection
// zeroed, the block reduces to x + MLP(LN2(x)). Recomputed here with plain
// loops.
TEST(Forward, HandComputedSinglePosition) {
  PolicyConfig cfg;
  cfg.model_dim = 4;
  cfg.encoder = {.image_size = 4, .patch_size = 4, .feature_a = 2, .feature_b = 2, .model_dim = 4};
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.mlp_hidden = 3;
  cfg.text_vocab_size = 2;
  cfg.action_bins = 2;
  cfg.action_dims = 1;
  cfg.max_seq_len = 4;
  auto p = init_params(cfg);
  auto& L = p.layers[0];
  L.wo.fill(0.0);
  L.bo.fill(0.0);
  L.ln2_gain = random_tensor({4}, 3, 0.5);
  L.ln2_bias = random_tensor({4}, 4, 0.5);
  L.b1 = random_tensor({3}, 5, 0.5);
  L.b2 = random_tensor({4}, 6, 0.5);
  p.lnf_gain = random_tensor({4}, 7, 0.5);
  p.lnf_bias = random_tensor({4}, 8, 0.5);
  const Tensor x = random_tensor({1, 4}, 9);

  AttentionMask mask(1);
  mask.set(0, 0, true);
  const Tensor logits = forward(p, cfg, x, mask);

  auto ln = [&](std::vector<double> v, const Tensor& g, const Tensor& b) {
    double mu = 0.0;
    for (double e : v) mu += e / 4.0;
    double var = 0.0;
    for (double e : v) var += (e - mu) * (e - mu) / 4.0;
    for (std::size_t i = 0; i < 4; ++i) v[i] = (v[i] - mu) / std::sqrt(var + cfg.ln_eps) * g[i] + b[i];
    return v;
  };
  const std::vector<double> x0(x.values().begin(), x.values().end());
  const auto h = ln(x0, L.ln2_gain, L.ln2_bias);
  std::vector<double> mid(3);
  for (std::size_t j = 0; j < 3; ++j) {
    double s = L.b1[j];
    for (std::size_t i = 0; i < 4; ++i) s += h[i] * L.w1.at(i, j);
    mid[j] = 0.5 * s * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (s + 0.044715 * s * s * s)));
  }
  std::vector<double> y = x0;
  for (std::size_t i = 0; i < 4; ++i) {
    double s = L.b2[i];
    for (std::size_t j = 0; j < 3; ++j) s += mid[j] * L.w2.at(j, i);
    y[i] += s;
  }
  const auto z = ln(y, p.lnf_gain, p.lnf_bias);
  ASSERT_EQ(logits.shape(), (Shape{1, cfg.vocab()}));
  for (std::size_t v = 0; v < cfg.vocab(); ++v) {
    double s = 0.0;
    for (std::size_t i = 0; i < 4; ++i) s += z[i] * p.lm_head.at(i, v);
    EXPECT_NEAR(logits.at(0, v), s, 1e-12);
  }
}

TEST(Forward, CausalPerturbationOnlyReachesLaterPositions) {
  PolicyConfig cfg = small_config();
  const auto p = init_params(cfg);
  const std::size_t T = 24;
  const auto mask = build_mask({17, 7}, MaskMode::kCausal);
  const Tensor x = random_tensor({T, cfg.model_dim}, 1);
  const Tensor base = forward(p, cfg, x, mask);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::uint64_t trial = 0; trial < 3; ++trial) {
      Tensor y = x;
      const Tensor noise = random_tensor({cfg.model_dim}, 100 * t + trial);
      for (std::size_t j = 0; j < cfg.model_dim; ++j) y.at(t, j) += noise[j];
      const Tensor out = forward(p, cfg, y, mask);
      for (std::size_t r = 0; r < t; ++r) {
        EXPECT_LE(max_abs_diff(out.row(r), base.row(r)), 1e-12) << "t=" << t << " r=" << r;
      }
      EXPECT_GT(max_abs_diff(out.row(t), base.row(t)), 1e-9);
    }
  }
}

TEST(Forward, JointActionRowsSeeEveryPrefixPosition) {
  PolicyConfig cfg = small_config();
  const auto p = init_params(cfg);
  const SequenceLayout layout{17, 7};
  for (bool full : {false, true}) {
    const auto mask = build_mask(layout, MaskMode::kJoint, {full});
    const Tensor x = random_tensor({24, cfg.model_dim}, 2);
    const Tensor base = forward(p, cfg, x, mask);
    for (std::size_t t = 0; t < layout.prefix_len; ++t) {
      Tensor y = x;
      y.at(t, 0) += 1e-4;
      const Tensor out = forward(p, cfg, y, mask);
      for (std::size_t r = layout.action_begin(); r < layout.total(); ++r) {
        EXPECT_GT(max_abs_diff(out.row(r), base.row(r)), 1e-12) << "prefix " << t << " row " << r;
      }
    }
  }
}

TEST(Forward, HeadRowsMatchFullForward) {
  PolicyConfig cfg = small_config();
  const auto p = init_params(cfg);
  const auto mask = build_mask({17, 7}, MaskMode::kJoint);
  const Tensor x = random_tensor({24, cfg.model_dim}, 3);
  const Tensor full = forward(p, cfg, x, mask);
  const std::vector<int> rows = {17, 20, 23};
  const Tensor some = forward_rows(p, cfg, x, mask, rows);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(max_abs_diff(some.row(i), full.row(static_cast<std::size_t>(rows[i]))), 0.0);
  }
}

TEST(Forward, TooLongIsConfigError) {
  PolicyConfig cfg = small_config();
  const auto p = init_params(cfg);
  const std::size_t T = cfg.max_seq_len + 1;
  try {
    forward(p, cfg, Tensor::zeros(T, cfg.model_dim), AttentionMask::causal(T));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
}

TEST(ForwardCached, EmptyCacheFullSequenceEqualsForward) {
  PolicyConfig cfg = small_config();
  const auto p = init_params(cfg);
  const auto mask = AttentionMask::causal(24);
  const Tensor x = random_tensor({24, cfg.model_dim}, 4);
  const Tensor full = forward(p, cfg, x, mask);
  KvCache cache = KvCache::empty(cfg);
  std::vector<int> all(24);
  std::iota(all.begin(), all.end(), 0);
  const Tensor cached = forward_cached(p, cfg, x, cache, mask, all);
  EXPECT_LE(max_abs_diff(cached.values(), full.values()), 1e-10);
  EXPECT_EQ(cache.length, 24u);
}

TEST(ForwardCached, IncrementalMatchesFullForward) {
  PolicyConfig cfg = small_config();
  const auto p = init_params(cfg);
  const std::size_t T = 24;
  const auto mask = AttentionMask::causal(T);
  const Tensor x = random_tensor({T, cfg.model_dim}, 5);
  const Tensor full = forward(p, cfg, x, mask);

  KvCache cache = KvCache::empty(cfg);
  Tensor prefix = Tensor::zeros(21, cfg.model_dim);
  std::copy(x.data(), x.data() + prefix.size(), prefix.data());
  const std::vector<int> last = {20};
  const Tensor first = forward_cached(p, cfg, prefix, cache, mask, last);
  EXPECT_LE(max_abs_diff(first.row(0), full.row(20)), 1e-10);
  const std::vector<int> only = {0};
  for (std::size_t t = 21; t < T; ++t) {
    Tensor one(Shape{1, cfg.model_dim}, x.row(t));
    const Tensor out = forward_cached(p, cfg, one, cache, mask, only);
    EXPECT_LE(max_abs_diff(out.row(0), full.row(t)), 1e-10) << "position " << t;
  }
}

TEST(ForwardCached, RejectsMismatchedCache) {
  PolicyConfig cfg = small_config();
  const auto p = init_params(cfg);
  KvCache cache = KvCache::empty(cfg);
  cache.keys.pop_back();
  cache.values.pop_back();
  const std::vector<int> rows = {0};
  try {
    forward_cached(p, cfg, Tensor::zeros(1, cfg.model_dim), cache, AttentionMask::causal(1), rows);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kState);
  }
  KvCache ok = KvCache::empty(cfg);
  // A joint mask lets the first action row see later action slots.
  EXPECT_THROW(forward_cached(p, cfg, Tensor::zeros(18, cfg.model_dim), ok,
                              build_mask({17, 7}, MaskMode::kJoint), rows),
               Error);
}

TEST(AssembleSequence, LayoutAndLinearity) {
  const PolicyConfig cfg;
  auto p = init_params(cfg);
  const Tensor img = Tensor::zeros(16, cfg.model_dim);
  p.token_embedding.fill(0.0);
  const std::vector<int> instr = {3};
  const auto slots = joint_slots(cfg.action_dims);
  const auto seq = assemble_sequence(p, cfg, img, instr, slots);
  EXPECT_EQ(seq.layout.total(), 24u);
  EXPECT_EQ(seq.layout.prefix_len, 17u);
  EXPECT_EQ(seq.layout.action_begin(), 24u - cfg.action_dims);
  for (std::size_t i = 0; i < 24; ++i) {
    for (std::size_t j = 0; j < cfg.model_dim; ++j) {
      double want = p.position_embedding.at(i, j);
      if (i >= 17) want += p.action_queries.at(i - 17, j);
      EXPECT_EQ(seq.embeddings.at(i, j), want);
    }
  }
  const auto too_many = joint_slots(cfg.max_seq_len - 16);
  try {
    assemble_sequence(p, cfg, img, instr, too_many);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
}

TEST(Policy, ZeroProjectorMakesLogitsImageIndependent) {
  const PolicyConfig cfg;
  auto p = init_params(cfg);
  p.encoder.wp.fill(0.0);
  p.encoder.bp.fill(0.0);
  const TaskConfig task;
  const auto a = gen_episode(1, task);
  auto b = gen_episode(2, task);
  b.instruction = a.instruction;
  const std::vector<int> instr = {a.instruction};
  const auto slots = joint_slots(cfg.action_dims);
  auto logits_for = [&](const Episode& ep) {
    const Tensor img = encode_image(ep.image, p.encoder, cfg.encoder);
    const auto seq = assemble_sequence(p, cfg, img, instr, slots);
    return forward(p, cfg, seq.embeddings, build_mask(seq.layout, MaskMode::kJoint));
  };
  ASSERT_NE(a.image, b.image);
  const Tensor la = logits_for(a);
  const Tensor lb = logits_for(b);
  EXPECT_EQ(max_abs_diff(la.values(), lb.values()), 0.0);
}

TEST(Policy, TeacherForcedSlotsShiftLabels) {
  const std::vector<int> tokens = {10, 20, 30};
  const auto slots = teacher_forced_slots(tokens);
  ASSERT_EQ(slots.size(), 3u);
  EXPECT_EQ(slots[0].kind, SlotSource::Kind::kQuery);
  EXPECT_EQ(slots[1].kind, SlotSource::Kind::kToken);
  EXPECT_EQ(slots[1].index, 10);
  EXPECT_EQ(slots[2].index, 20);
}

// Full policy loss, encoder included, through both regimes.
void check_policy_gradient(MaskMode mode, bool full_bidirectional) {
  PolicyConfig cfg = small_config(8, 3);
  cfg.mask_mode = mode;
  cfg.joint_full_bidirectional = full_bidirectional;
  auto p = init_params(cfg);
  const TaskConfig task;
  const auto eps = gen_dataset(1, 20, Split::kTrain, task);
  const ActionCodec codec = fit_codec_for(eps, cfg, TrainConfig{});
  const Episode& ep = eps[0];

  Differentiable f;
  f.value = [&] {
    auto ex = make_example(p, cfg, ep, codec, mode);
    return example_step(p, cfg, ex, ep, codec, 0.0, true).loss;
  };
  f.gradient = [&] {
    auto ex = make_example(p, cfg, ep, codec, mode);
    example_step(p, cfg, ex, ep, codec, 1.0, true);
  };
  std::vector<Tensor*> params;
  for (auto& [name, t] : p.named()) params.push_back(t);
  const auto report = grad_check(f, params, {.step = 1e-5, .tol = 1e-4});
  EXPECT_TRUE(report.passed()) << "max rel err " << report.max_rel_error;
  for (std::size_t i = 0; i < std::min<std::size_t>(report.failures.size(), 5); ++i) {
    const auto& fl = report.failures[i];
    ADD_FAILURE() << p.named()[fl.param].first << "[" << fl.element << "] analytic "
                  << fl.analytic << " numeric " << fl.numeric;
  }
  EXPECT_EQ(report.checked, p.parameter_count());
}

TEST(PolicyGradient, JointMatchesFiniteDifferences) { check_policy_gradient(MaskMode::kJoint, false); }
TEST(PolicyGradient, JointFullBidirectional) { check_policy_gradient(MaskMode::kJoint, true); }
TEST(PolicyGradient, CausalMatchesFiniteDifferences) { check_policy_gradient(MaskMode::kCausal, false); }

}  // namespace
}  // namespace evla
