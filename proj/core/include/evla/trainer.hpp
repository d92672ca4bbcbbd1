// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evla/checkpoint.hpp"
#include "evla/codec.hpp"
#include "evla/encoder.hpp"
#include "evla/kv.hpp"
#include "evla/mask.hpp"
#include "evla/policy.hpp"
#include "evla/toy_world.hpp"

namespace evla {

// The training regime (joint or causal) is PolicyConfig::mask_mode.
struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t steps = 2000;
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::size_t eval_every = 250;
  std::uint64_t seed = 0;
  std::size_t train_size = 65536;
  std::size_t val_size = 512;
  double quantile_lo = 0.01;
  double quantile_hi = 0.99;
  // Argmax over the slot's own token block when scoring.
  bool restrict_argmax = true;
  // Worker threads for per-episode forward/backward. Not part of the
  // resolved config: results do not depend on it.
  std::size_t threads = 1;

  void validate() const;
  // `train.*` keys.
  KeyValues to_kv() const;
  static TrainConfig from_kv(const KeyValues& kv);
};

// One row of the metrics CSV.
struct MetricsRow {
  std::size_t step = 0;
  double train_loss = 0.0;
  double action_token_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double wall_ms_per_step = 0.0;
  double vector_accuracy = 0.0;  // val episodes with every action token right
};

inline constexpr const char* kMetricsHeader =
    "step,train_loss,action_token_accuracy,val_loss,val_accuracy,wall_ms_per_step,"
    "vector_accuracy";

struct EvalMetrics {
  double loss = 0.0;             // mean cross entropy per action position
  double token_accuracy = 0.0;   // fraction of action positions right
  double vector_accuracy = 0.0;  // fraction of episodes with all D right
  double l2_error = 0.0;         // mean ||detokenize(pred) - action||_2
  std::size_t positions = 0;
  std::size_t episodes = 0;
};

// Index of the largest logit in `row`, optionally restricted to the token
// block of action dimension `dim`. Ties resolve to the lowest index.
int argmax_token(std::span<const double> row, const PolicyConfig& cfg, std::size_t dim,
                 bool restrict_to_dim);

// Accuracy bookkeeping for one episode's [D x V] action logits.
struct ActionScore {
  std::vector<int> predicted;
  std::size_t correct = 0;
  bool all_correct = false;
  double l2_error = 0.0;
};
ActionScore score_action_logits(const Tensor& logits, std::span<const int> labels,
                                std::span<const double> action, const ActionCodec& codec,
                                const PolicyConfig& cfg, bool restrict_to_dim);

// Everything needed to run one episode through the policy in a given regime.
struct TrainingExample {
  EncoderForward encoder;
  std::vector<int> instruction;
  std::vector<SlotSource> slots;
  AssembledSequence sequence;
  AttentionMask mask;
  std::vector<int> action_labels;   // D tokens
  std::vector<int> head_rows;       // the D action positions
};

TrainingExample make_example(const PolicyParams& params, const PolicyConfig& cfg,
                             const Episode& episode, const ActionCodec& codec,
                             MaskMode mode);

struct ExampleResult {
  double loss = 0.0;
  ActionScore score;
};

// Forward, cross entropy over the action positions, and (when weight != 0)
// backward with d(total)/d(loss) = weight, accumulating into params' grads.
ExampleResult example_step(PolicyParams& params, const PolicyConfig& cfg,
                           TrainingExample& ex, const Episode& episode,
                           const ActionCodec& codec, double weight,
                           bool restrict_to_dim);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;

  static AdamState zeros(const PolicyParams& params);
};

// Clips the global gradient norm to clip_norm (if > 0) and applies one Adam
// update. Returns the pre-clip norm.
double adam_update(PolicyParams& params, AdamState& state, const TrainConfig& cfg);

struct StepMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
  double grad_norm = 0.0;
};

// One optimizer step over `batch`. Per-episode gradients are reduced in
// batch order, so the result does not depend on cfg.threads.
StepMetrics train_step(PolicyParams& params, const PolicyConfig& pcfg,
                       std::span<const Episode> batch, const ActionCodec& codec,
                       const TrainConfig& cfg, AdamState& state);

EvalMetrics evaluate(const PolicyParams& params, const PolicyConfig& pcfg,
                     std::span<const Episode> episodes, const ActionCodec& codec,
                     MaskMode mode, bool restrict_argmax = true);

ActionCodec fit_codec_for(std::span<const Episode> episodes, const PolicyConfig& pcfg,
                          const TrainConfig& tcfg);

struct TrainingInputs {
  PolicyConfig policy;
  TrainConfig train;
  TaskConfig task;
  std::optional<std::vector<Episode>> train_set;  // generated when absent
  std::optional<std::vector<Episode>> val_set;
  std::optional<ActionCodec> codec;  // fitted on train_set when absent
  KeyValues run_config;  // echoed into every artifact
  std::string out_dir;   // when set, checkpoint.bin / metrics.csv / codec.txt go here
  bool record_wall_clock = true;
};

struct TrainingOutcome {
  Checkpoint checkpoint;
  std::vector<MetricsRow> rows;
  std::string csv;
  EvalMetrics final_val;
};

// Seeds derive from train.seed: data ("data"), init ("init"), shuffling
// ("shuffle", epoch).
TrainingOutcome run_training(TrainingInputs inputs);

std::string format_metrics_csv(const KeyValues& run_config,
                               std::span<const MetricsRow> rows);

}  // namespace evla
