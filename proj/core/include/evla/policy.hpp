// SPDX-License-Identifier: Apache-2.0

// Decoder-style transformer over [image patches | instruction | action slots].
//
// Block order is pre-LayerNorm:
//   x += Attn(LN1(x)) under the attention mask;  x += MLP(LN2(x))
// followed by a final LayerNorm and a bias-free LM head. Positions are
// learned absolute embeddings added when the sequence is assembled.
//
// Vocabulary layout: ids [0, text_vocab) are text; action dimension d owns
// the disjoint block [text_vocab + d * bins, text_vocab + (d + 1) * bins).

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "evla/encoder.hpp"
#include "evla/kv.hpp"
#include "evla/mask.hpp"
#include "evla/ops.hpp"
#include "evla/tensor.hpp"

namespace evla {

struct PolicyConfig {
  EncoderConfig encoder;
  std::size_t model_dim = 32;
  std::size_t n_layers = 3;
  std::size_t n_heads = 4;
  std::size_t mlp_hidden = 128;
  std::size_t text_vocab_size = 8;
  std::size_t action_bins = 256;
  std::size_t action_dims = 7;
  std::size_t vocab_size = 0;  // 0 selects text_vocab_size + action_dims * action_bins
  std::size_t max_seq_len = 32;
  MaskMode mask_mode = MaskMode::kJoint;
  bool joint_full_bidirectional = false;
  GeluKind gelu = GeluKind::kTanh;
  double ln_eps = 1e-5;
  std::uint64_t seed = 0;

  std::size_t vocab() const {
    return vocab_size ? vocab_size : text_vocab_size + action_dims * action_bins;
  }
  std::size_t head_dim() const { return model_dim / n_heads; }
  int action_token(std::size_t dim, std::size_t bin) const {
    return static_cast<int>(text_vocab_size + dim * action_bins + bin);
  }
  int action_range_begin(std::size_t dim) const { return action_token(dim, 0); }

  // Throws a config error when an invariant does not hold.
  void validate() const;

  // `model.*` / `mask.*` keys.
  KeyValues to_kv() const;
  static PolicyConfig from_kv(const KeyValues& kv);
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, wv, bv, wo, bo;  // keys carry no bias
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
};

struct PolicyParams {
  EncoderParams encoder;
  Tensor token_embedding;  // [V x d]
  Tensor position_embedding;  // [max_seq_len x d]
  Tensor action_queries;  // [D x d]
  std::vector<LayerParams> layers;
  Tensor lnf_gain, lnf_bias;
  Tensor lm_head;  // [d x V]

  // Stable order; names are the checkpoint blob names.
  std::vector<std::pair<std::string, Tensor*>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;
  std::size_t parameter_count() const;
  void zero_grad();
};

// Deterministic in cfg.seed. Linear weights ~ N(0, 1/fan_in); embeddings
// and action queries ~ N(0, 0.1^2); LayerNorm gains 1, all biases 0.
PolicyParams init_params(const PolicyConfig& cfg);

// FNV-1a over the raw bytes of every parameter, in named() order.
std::uint64_t params_checksum(const PolicyParams& params);

// What fills one action slot: a learned action query or the embedding of a
// vocabulary token.
struct SlotSource {
  enum class Kind { kQuery, kToken };
  Kind kind = Kind::kQuery;
  int index = 0;

  static SlotSource query(int i) { return {Kind::kQuery, i}; }
  static SlotSource token(int id) { return {Kind::kToken, id}; }
};

// Joint regime: slot d holds action query d.
std::vector<SlotSource> joint_slots(std::size_t action_dims);
// Autoregressive regime with teacher forcing: slot 0 holds action query 0
// and slot t > 0 holds the embedding of token t - 1, so slot t predicts
// token t.
std::vector<SlotSource> teacher_forced_slots(std::span<const int> action_tokens);

struct AssembledSequence {
  Tensor embeddings;  // [T x d], positions included
  SequenceLayout layout;
};

// [img_emb ; embed(instruction) ; slots] + position_embedding[0..T).
// With no slots this is the prefix alone.
AssembledSequence assemble_sequence(const PolicyParams& params,
                                    const PolicyConfig& cfg,
                                    const Tensor& img_emb,
                                    std::span<const int> instruction_tokens,
                                    std::span<const SlotSource> slots);
// Routes the gradient held by `seq.embeddings` into the embedding tables,
// the action queries, and `img_emb`'s gradient.
void assemble_sequence_backward(PolicyParams& params, Tensor& img_emb,
                                std::span<const int> instruction_tokens,
                                std::span<const SlotSource> slots,
                                const AssembledSequence& seq);

// Embedding of the slot at absolute position `pos` (position included).
Tensor slot_embedding(const PolicyParams& params, const PolicyConfig& cfg,
                      const SlotSource& slot, std::size_t pos);

struct AttentionHeadTape {
  Tensor q, k, v;      // [rows x head_dim] slices
  Tensor q_scaled;
  Tensor scores;       // [rows x context]
  Tensor probs;
  Tensor context;      // [rows x head_dim]
};

struct LayerTape {
  LayerNormOutput ln1;
  Tensor q, k, v;
  std::vector<AttentionHeadTape> heads;
  Tensor attn;       // concatenated heads
  Tensor attn_out;   // after the output projection
  Tensor x_mid;      // residual after attention
  LayerNormOutput ln2;
  Tensor mlp_pre;
  Tensor mlp_act;
  Tensor mlp_out;
};

// Everything the backward pass needs from one forward.
struct PolicyTape {
  std::vector<Tensor> residual;  // residual[0] = input, residual[l + 1] = layer l output
  std::vector<LayerTape> layers;
  std::vector<std::uint8_t> allow;  // [T x T]
  std::vector<int> head_rows;
  Tensor head_in;                   // residual.back() rows in head_rows
  LayerNormOutput lnf;
  Tensor logits;                    // [head_rows x V]
};

// Full-sequence logits [T x V].
Tensor forward(const PolicyParams& params, const PolicyConfig& cfg,
               const Tensor& embeddings, const AttentionMask& mask);

// Logits only for `head_rows` ([head_rows.size() x V]). With `tape`, every
// intermediate is kept for policy_backward.
Tensor forward_rows(const PolicyParams& params, const PolicyConfig& cfg,
                    const Tensor& embeddings, const AttentionMask& mask,
                    std::span<const int> head_rows, PolicyTape* tape = nullptr);

// Consumes tape.logits' gradient; accumulates parameter gradients and leaves
// the input gradient in tape.residual[0].
void policy_backward(PolicyParams& params, const PolicyConfig& cfg,
                     PolicyTape& tape);

// Per-layer keys and values for the positions processed so far.
struct KvCache {
  std::vector<Tensor> keys;    // [length x d] per layer
  std::vector<Tensor> values;
  std::size_t length = 0;

  static KvCache empty(const PolicyConfig& cfg) {
    KvCache c;
    c.keys.resize(cfg.n_layers);
    c.values.resize(cfg.n_layers);
    return c;
  }
};

// Processes `new_embeddings` as positions [cache.length, cache.length + n)
// attending to the cached positions plus themselves under rows of `mask`
// (which must cover at least cache.length + n positions and must not let a
// new row see beyond cache.length + n). Appends to the cache and returns
// logits for the new rows listed in `head_rows` (relative indices).
Tensor forward_cached(const PolicyParams& params, const PolicyConfig& cfg,
                      const Tensor& new_embeddings, KvCache& cache,
                      const AttentionMask& mask, std::span<const int> head_rows);

// Matrix-product FLOPs of the trunk for `new_rows` positions attending to
// `context` positions, plus the LM head on `head_rows` rows.
std::uint64_t forward_flops(const PolicyConfig& cfg, std::size_t new_rows,
                            std::size_t context, std::size_t head_rows);
// Matrix-product FLOPs of encode_image.
std::uint64_t encoder_flops(const PolicyConfig& cfg);

}  // namespace evla
