// SPDX-License-Identifier: Apache-2.0

#include "evla/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <thread>

#include "evla/binary_io.hpp"
#include "evla/error.hpp"
#include "evla/seed.hpp"

namespace evla {

void TrainConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::kConfig, "train config: " + what);
  };
  check(batch_size >= 1, "batch_size must be >= 1");
  check(steps >= 1, "steps must be >= 1");
  check(std::isfinite(lr) && lr >= 0.0, "lr must be finite and >= 0");
  check(beta1 >= 0.0 && beta1 < 1.0, "beta1 must be in [0, 1)");
  check(beta2 >= 0.0 && beta2 < 1.0, "beta2 must be in [0, 1)");
  check(adam_eps > 0.0, "adam_eps must be > 0");
  check(eval_every >= 1, "eval_every must be >= 1");
  check(train_size >= 1, "train_size must be >= 1");
  check(val_size >= 1, "val_size must be >= 1");
  check(quantile_lo >= 0.0 && quantile_lo < quantile_hi && quantile_hi <= 1.0,
        "need 0 <= quantile_lo < quantile_hi <= 1");
  check(threads >= 1, "threads must be >= 1");
}

KeyValues TrainConfig::to_kv() const {
  KeyValues kv;
  kv.set("train.batch_size", static_cast<std::uint64_t>(batch_size));
  kv.set("train.steps", static_cast<std::uint64_t>(steps));
  kv.set("train.lr", lr);
  kv.set("train.beta1", beta1);
  kv.set("train.beta2", beta2);
  kv.set("train.adam_eps", adam_eps);
  kv.set("train.clip_norm", clip_norm);
  kv.set("train.eval_every", static_cast<std::uint64_t>(eval_every));
  kv.set("train.seed", seed);
  kv.set("train.train_size", static_cast<std::uint64_t>(train_size));
  kv.set("train.val_size", static_cast<std::uint64_t>(val_size));
  kv.set("train.quantile_lo", quantile_lo);
  kv.set("train.quantile_hi", quantile_hi);
  kv.set("train.restrict_argmax", restrict_argmax);
  return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv) {
  TrainConfig c;
  auto size = [&](const char* key, std::size_t& field) {
    if (kv.contains(key)) field = static_cast<std::size_t>(kv.get_uint(key));
  };
  auto real = [&](const char* key, double& field) {
    if (kv.contains(key)) field = kv.get_double(key);
  };
  size("train.batch_size", c.batch_size);
  size("train.steps", c.steps);
  real("train.lr", c.lr);
  real("train.beta1", c.beta1);
  real("train.beta2", c.beta2);
  real("train.adam_eps", c.adam_eps);
  real("train.clip_norm", c.clip_norm);
  size("train.eval_every", c.eval_every);
  if (kv.contains("train.seed")) c.seed = kv.get_uint("train.seed");
  size("train.train_size", c.train_size);
  size("train.val_size", c.val_size);
  real("train.quantile_lo", c.quantile_lo);
  real("train.quantile_hi", c.quantile_hi);
  if (kv.contains("train.restrict_argmax")) c.restrict_argmax = kv.get_bool("train.restrict_argmax");
  return c;
}

int argmax_token(std::span<const double> row, const PolicyConfig& cfg, std::size_t dim,
                 bool restrict_to_dim) {
  std::size_t begin = 0;
  std::size_t end = row.size();
  if (restrict_to_dim) {
    begin = static_cast<std::size_t>(cfg.action_range_begin(dim));
    end = begin + cfg.action_bins;
  }
  std::size_t best = begin;
  for (std::size_t i = begin + 1; i < end; ++i) {
    if (row[i] > row[best]) best = i;
  }
  return static_cast<int>(best);
}

ActionScore score_action_logits(const Tensor& logits, std::span<const int> labels,
                                std::span<const double> action, const ActionCodec& codec,
                                const PolicyConfig& cfg, bool restrict_to_dim) {
  const std::size_t dims = cfg.action_dims;
  if (logits.rows() != dims || labels.size() != dims || action.size() != dims) {
    fail(ErrorKind::kDimension, "score_action_logits: expected " + std::to_string(dims) +
                                    " rows, got logits " + shape_string(logits.shape()));
  }
  ActionScore s;
  s.predicted.resize(dims);
  for (std::size_t d = 0; d < dims; ++d) {
    s.predicted[d] = argmax_token(logits.row(d), cfg, d, restrict_to_dim);
    if (s.predicted[d] == labels[d]) ++s.correct;
  }
  s.all_correct = s.correct == dims;

  // Unrestricted argmax can leave the dimension's block; such a slot decodes
  // to the block's nearest end for the L2 figure.
  std::vector<int> legal = s.predicted;
  for (std::size_t d = 0; d < dims; ++d) {
    const int lo = codec.vocab_offset(d);
    const int hi = lo + static_cast<int>(codec.bins()) - 1;
    legal[d] = std::clamp(legal[d], lo, hi);
  }
  const auto decoded = codec.detokenize(legal);
  double sq = 0.0;
  for (std::size_t d = 0; d < dims; ++d) sq += (decoded[d] - action[d]) * (decoded[d] - action[d]);
  s.l2_error = std::sqrt(sq);
  return s;
}

TrainingExample make_example(const PolicyParams& params, const PolicyConfig& cfg,
                             const Episode& episode, const ActionCodec& codec,
                             MaskMode mode) {
  TrainingExample ex;
  ex.encoder = encode_image_forward(episode.image, params.encoder, cfg.encoder);
  ex.instruction = {episode.instruction};
  ex.action_labels = codec.tokenize(episode.action);
  ex.slots = mode == MaskMode::kJoint ? joint_slots(cfg.action_dims)
                                      : teacher_forced_slots(ex.action_labels);
  ex.sequence = assemble_sequence(params, cfg, ex.encoder.out, ex.instruction, ex.slots);
  ex.mask = build_mask(ex.sequence.layout, mode, {cfg.joint_full_bidirectional});
  ex.head_rows.resize(cfg.action_dims);
  std::iota(ex.head_rows.begin(), ex.head_rows.end(),
            static_cast<int>(ex.sequence.layout.action_begin()));
  return ex;
}

ExampleResult example_step(PolicyParams& params, const PolicyConfig& cfg,
                           TrainingExample& ex, const Episode& episode,
                           const ActionCodec& codec, double weight,
                           bool restrict_to_dim) {
  PolicyTape tape;
  const bool backward = weight != 0.0;
  Tensor logits = forward_rows(params, cfg, ex.sequence.embeddings, ex.mask, ex.head_rows,
                               backward ? &tape : nullptr);
  if (!backward) tape.logits = std::move(logits);
  const std::vector<std::uint8_t> all(cfg.action_dims, 1);
  const CrossEntropyOutput ce = cross_entropy_logits(tape.logits, ex.action_labels, all);

  ExampleResult r;
  r.loss = ce.loss;
  r.score = score_action_logits(tape.logits, ex.action_labels, episode.action, codec, cfg,
                                restrict_to_dim);
  if (!backward) return r;

  cross_entropy_backward(tape.logits, ex.action_labels, all, ce, weight);
  policy_backward(params, cfg, tape);
  ex.sequence.embeddings = std::move(tape.residual[0]);
  assemble_sequence_backward(params, ex.encoder.out, ex.instruction, ex.slots, ex.sequence);
  encode_image_backward(params.encoder, ex.encoder);
  return r;
}

AdamState AdamState::zeros(const PolicyParams& params) {
  AdamState s;
  for (const auto& [name, t] : params.named()) {
    s.m.emplace_back(t->size(), 0.0);
    s.v.emplace_back(t->size(), 0.0);
  }
  return s;
}

double adam_update(PolicyParams& params, AdamState& state, const TrainConfig& cfg) {
  auto named = params.named();
  if (state.m.size() != named.size()) {
    fail(ErrorKind::kState, "adam_update: optimizer state does not match the parameters");
  }
  double sq = 0.0;
  for (auto& [name, t] : named) {
    if (!t->has_grad()) continue;
    for (double g : t->grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) fail(ErrorKind::kContract, "adam_update: non-finite gradient norm");
  const double clip = cfg.clip_norm > 0.0 && norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t j = 0; j < named.size(); ++j) {
    Tensor& p = *named[j].second;
    if (!p.has_grad()) continue;
    auto& m = state.m[j];
    auto& v = state.v[j];
    const auto g = p.grad();
    double* w = p.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      w[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
    }
  }
  return norm;
}

namespace {

// Adds every parameter gradient into acc, laid out in named() order.
void add_grads(PolicyParams& params, std::vector<double>& acc) {
  std::size_t off = 0;
  for (auto& [name, t] : params.named()) {
    if (t->has_grad()) {
      const auto g = t->grad();
      for (std::size_t i = 0; i < g.size(); ++i) acc[off + i] += g[i];
    }
    off += t->size();
  }
}

void load_grads(PolicyParams& params, const std::vector<double>& flat) {
  std::size_t off = 0;
  for (auto& [name, t] : params.named()) {
    double* g = t->grad_data();
    std::copy(flat.begin() + off, flat.begin() + off + t->size(), g);
    off += t->size();
  }
}

struct Partial {
  double loss = 0.0;
  std::size_t correct = 0;
};

Partial run_example(PolicyParams& params, const PolicyConfig& pcfg, const Episode& ep,
                    const ActionCodec& codec, double weight, bool restrict_to_dim) {
  params.zero_grad();
  TrainingExample ex = make_example(params, pcfg, ep, codec, pcfg.mask_mode);
  const ExampleResult r = example_step(params, pcfg, ex, ep, codec, weight, restrict_to_dim);
  return Partial{r.loss, r.score.correct};
}

}  // namespace

StepMetrics train_step(PolicyParams& params, const PolicyConfig& pcfg,
                       std::span<const Episode> batch, const ActionCodec& codec,
                       const TrainConfig& cfg, AdamState& state) {
  if (batch.empty()) fail(ErrorKind::kContract, "train_step: empty batch");
  const std::size_t n = batch.size();
  const double weight = 1.0 / static_cast<double>(n);
  const std::size_t workers = std::min(cfg.threads, n);

  // Per-example gradients are summed in batch order whatever the thread
  // count, so the update does not depend on it.
  std::vector<double> acc(params.parameter_count(), 0.0);
  double loss = 0.0;
  std::size_t correct = 0;
  if (workers <= 1) {
    for (const Episode& ep : batch) {
      const Partial p = run_example(params, pcfg, ep, codec, weight, cfg.restrict_argmax);
      add_grads(params, acc);
      loss += p.loss;
      correct += p.correct;
    }
  } else {
    std::vector<Partial> parts(n);
    std::vector<std::vector<double>> grads(n);
    std::vector<PolicyParams> replicas(workers, params);
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < n; i += workers) {
          parts[i] = run_example(replicas[w], pcfg, batch[i], codec, weight,
                                 cfg.restrict_argmax);
          grads[i].assign(acc.size(), 0.0);
          add_grads(replicas[w], grads[i]);
        }
      });
    }
    pool.clear();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += grads[i][j];
      loss += parts[i].loss;
      correct += parts[i].correct;
    }
  }
  load_grads(params, acc);

  StepMetrics m;
  m.loss = loss / static_cast<double>(n);
  m.accuracy = static_cast<double>(correct) / static_cast<double>(n * pcfg.action_dims);
  m.grad_norm = adam_update(params, state, cfg);
  return m;
}

EvalMetrics evaluate(const PolicyParams& params, const PolicyConfig& pcfg,
                     std::span<const Episode> episodes, const ActionCodec& codec,
                     MaskMode mode, bool restrict_argmax) {
  if (episodes.empty()) fail(ErrorKind::kContract, "evaluate: empty evaluation set");
  EvalMetrics m;
  const std::vector<std::uint8_t> all(pcfg.action_dims, 1);
  std::size_t correct = 0;
  std::size_t exact = 0;
  for (const Episode& ep : episodes) {
    const TrainingExample ex = make_example(params, pcfg, ep, codec, mode);
    const Tensor logits =
        forward_rows(params, pcfg, ex.sequence.embeddings, ex.mask, ex.head_rows);
    const CrossEntropyOutput ce = cross_entropy_logits(logits, ex.action_labels, all);
    const ActionScore s =
        score_action_logits(logits, ex.action_labels, ep.action, codec, pcfg, restrict_argmax);
    m.loss += ce.loss;
    m.l2_error += s.l2_error;
    correct += s.correct;
    exact += s.all_correct ? 1 : 0;
  }
  const double n = static_cast<double>(episodes.size());
  m.episodes = episodes.size();
  m.positions = episodes.size() * pcfg.action_dims;
  m.loss /= n;
  m.l2_error /= n;
  m.token_accuracy = static_cast<double>(correct) / static_cast<double>(m.positions);
  m.vector_accuracy = static_cast<double>(exact) / n;
  return m;
}

ActionCodec fit_codec_for(std::span<const Episode> episodes, const PolicyConfig& pcfg,
                          const TrainConfig& tcfg) {
  std::vector<std::vector<double>> actions;
  actions.reserve(episodes.size());
  for (const Episode& ep : episodes) actions.push_back(ep.action);
  return fit_codec(actions, pcfg.action_bins, tcfg.quantile_lo, tcfg.quantile_hi,
                   pcfg.text_vocab_size);
}

std::string format_metrics_csv(const KeyValues& run_config, std::span<const MetricsRow> rows) {
  std::string out = run_config.format("# ");
  out += kMetricsHeader;
  out += '\n';
  for (const MetricsRow& r : rows) {
    out += std::to_string(r.step);
    for (double v : {r.train_loss, r.action_token_accuracy, r.val_loss, r.val_accuracy,
                     r.wall_ms_per_step, r.vector_accuracy}) {
      out += ',';
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

namespace {

// Endless stream of training indices, reshuffled at every epoch boundary.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed) : order_(n), seed_(seed) { reshuffle(); }

  std::size_t next() {
    if (pos_ == order_.size()) {
      ++epoch_;
      reshuffle();
    }
    return order_[pos_++];
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(seed_, "shuffle", epoch_));
    std::shuffle(order_.begin(), order_.end(), rng);
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::size_t pos_ = 0;
};

}  // namespace

TrainingOutcome run_training(TrainingInputs in) {
  TrainConfig& tcfg = in.train;
  PolicyConfig& pcfg = in.policy;
  tcfg.validate();
  in.task.validate();
  pcfg.seed = derive_seed(tcfg.seed, "init");
  pcfg.validate();
  if (in.task.action_dims != pcfg.action_dims) {
    fail(ErrorKind::kConfig, "task.action_dims (" + std::to_string(in.task.action_dims) +
                                 ") != model.action_dims (" +
                                 std::to_string(pcfg.action_dims) + ")");
  }
  if (in.task.palette_size > pcfg.text_vocab_size) {
    fail(ErrorKind::kConfig, "model.text_vocab must cover every instruction color (" +
                                 std::to_string(in.task.palette_size) + ")");
  }
  if (in.task.image_size != pcfg.encoder.image_size) {
    fail(ErrorKind::kConfig, "task.image_size != model.image_size");
  }

  const std::uint64_t data_seed = derive_seed(tcfg.seed, "data");
  std::vector<Episode> train =
      in.train_set ? std::move(*in.train_set)
                   : gen_dataset(data_seed, tcfg.train_size, Split::kTrain, in.task);
  std::vector<Episode> val =
      in.val_set ? std::move(*in.val_set)
                 : gen_dataset(data_seed, tcfg.val_size, Split::kVal, in.task);
  if (train.empty() || val.empty()) fail(ErrorKind::kContract, "run_training: empty dataset");

  KeyValues config = in.run_config;
  config.merge(in.task.to_kv());
  config.merge(tcfg.to_kv());
  config.merge(pcfg.to_kv());

  TrainingOutcome out;
  out.checkpoint.policy = pcfg;
  out.checkpoint.config = config;
  out.checkpoint.codec = in.codec ? std::move(*in.codec) : fit_codec_for(train, pcfg, tcfg);
  if (out.checkpoint.codec.dims() != pcfg.action_dims ||
      out.checkpoint.codec.bins() != pcfg.action_bins ||
      out.checkpoint.codec.text_vocab_size() != pcfg.text_vocab_size) {
    fail(ErrorKind::kConfig, "run_training: codec does not match the model config");
  }
  PolicyParams& params = out.checkpoint.params;
  params = init_params(pcfg);
  AdamState adam = AdamState::zeros(params);
  EpochSampler sampler(train.size(), tcfg.seed);

  std::vector<Episode> batch(tcfg.batch_size);
  double loss_sum = 0.0;
  double acc_sum = 0.0;
  std::size_t since = 0;
  auto window_start = std::chrono::steady_clock::now();
  for (std::size_t step = 1; step <= tcfg.steps; ++step) {
    for (auto& ep : batch) ep = train[sampler.next()];
    const StepMetrics sm = train_step(params, pcfg, batch, out.checkpoint.codec, tcfg, adam);
    loss_sum += sm.loss;
    acc_sum += sm.accuracy;
    ++since;
    if (step % tcfg.eval_every == 0 || step == tcfg.steps) {
      const auto now = std::chrono::steady_clock::now();
      const double ms = std::chrono::duration<double, std::milli>(now - window_start).count();
      const EvalMetrics ev =
          evaluate(params, pcfg, val, out.checkpoint.codec, pcfg.mask_mode, tcfg.restrict_argmax);
      MetricsRow row;
      row.step = step;
      row.train_loss = loss_sum / static_cast<double>(since);
      row.action_token_accuracy = acc_sum / static_cast<double>(since);
      row.val_loss = ev.loss;
      row.val_accuracy = ev.token_accuracy;
      row.vector_accuracy = ev.vector_accuracy;
      row.wall_ms_per_step = in.record_wall_clock ? ms / static_cast<double>(since) : 0.0;
      out.rows.push_back(row);
      out.final_val = ev;
      loss_sum = acc_sum = 0.0;
      since = 0;
      window_start = std::chrono::steady_clock::now();
    }
  }
  params.zero_grad();
  for (auto& [name, t] : params.named()) t->drop_grad();

  out.csv = format_metrics_csv(config, out.rows);
  if (!in.out_dir.empty()) {
    const std::filesystem::path dir(in.out_dir);
    save_checkpoint((dir / "checkpoint.bin").string(), out.checkpoint);
    write_file((dir / "metrics.csv").string(), out.csv);
    write_file((dir / "codec.txt").string(),
               config.format("# ") + out.checkpoint.codec.describe());
  }
  return out;
}

}  // namespace evla
