// SPDX-License-Identifier: Apache-2.0

#include "evla/policy.hpp"

#include <cmath>
#include <cstring>
#include <random>

#include "evla/error.hpp"
#include "evla/seed.hpp"

namespace evla {

void PolicyConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::kConfig, "policy config: " + what);
  };
  encoder.validate();
  check(encoder.model_dim == model_dim, "encoder output dim must equal model_dim");
  check(model_dim >= 1 && n_heads >= 1 && model_dim % n_heads == 0,
        "model_dim must be a positive multiple of n_heads");
  check(n_layers >= 1, "n_layers must be >= 1");
  check(mlp_hidden >= 1, "mlp_hidden must be >= 1");
  check(text_vocab_size >= 1, "text_vocab_size must be >= 1");
  check(action_dims >= 1, "action_dims must be >= 1");
  check(action_bins >= 2, "action_bins must be >= 2");
  check(vocab() >= text_vocab_size + action_dims * action_bins,
        "vocab_size must cover the text vocabulary plus one bin block per "
        "action dimension");
  check(max_seq_len >= encoder.n_patches() + 1 + action_dims,
        "max_seq_len shorter than patches + instruction + action slots");
  check(ln_eps > 0.0, "ln_eps must be > 0");
}

KeyValues PolicyConfig::to_kv() const {
  KeyValues kv;
  kv.set("model.image_size", static_cast<std::uint64_t>(encoder.image_size));
  kv.set("model.channels", static_cast<std::uint64_t>(encoder.channels));
  kv.set("model.patch_size", static_cast<std::uint64_t>(encoder.patch_size));
  kv.set("model.encoder_a_dim", static_cast<std::uint64_t>(encoder.feature_a));
  kv.set("model.encoder_b_dim", static_cast<std::uint64_t>(encoder.feature_b));
  kv.set("model.dim", static_cast<std::uint64_t>(model_dim));
  kv.set("model.layers", static_cast<std::uint64_t>(n_layers));
  kv.set("model.heads", static_cast<std::uint64_t>(n_heads));
  kv.set("model.mlp_hidden", static_cast<std::uint64_t>(mlp_hidden));
  kv.set("model.text_vocab", static_cast<std::uint64_t>(text_vocab_size));
  kv.set("model.bins", static_cast<std::uint64_t>(action_bins));
  kv.set("model.action_dims", static_cast<std::uint64_t>(action_dims));
  kv.set("model.vocab", static_cast<std::uint64_t>(vocab_size));
  kv.set("model.max_seq_len", static_cast<std::uint64_t>(max_seq_len));
  kv.set("model.gelu", std::string(gelu == GeluKind::kTanh ? "tanh" : "erf"));
  kv.set("model.ln_eps", ln_eps);
  kv.set("model.seed", seed);
  kv.set("mask.mode", to_string(mask_mode));
  kv.set("mask.joint_full_bidirectional", joint_full_bidirectional);
  return kv;
}

PolicyConfig PolicyConfig::from_kv(const KeyValues& kv) {
  PolicyConfig c;
  auto size = [&](const char* key, std::size_t& field) {
    if (kv.contains(key)) field = static_cast<std::size_t>(kv.get_uint(key));
  };
  size("model.image_size", c.encoder.image_size);
  size("model.channels", c.encoder.channels);
  size("model.patch_size", c.encoder.patch_size);
  size("model.encoder_a_dim", c.encoder.feature_a);
  size("model.encoder_b_dim", c.encoder.feature_b);
  size("model.dim", c.model_dim);
  size("model.layers", c.n_layers);
  size("model.heads", c.n_heads);
  size("model.mlp_hidden", c.mlp_hidden);
  size("model.text_vocab", c.text_vocab_size);
  size("model.bins", c.action_bins);
  size("model.action_dims", c.action_dims);
  size("model.vocab", c.vocab_size);
  size("model.max_seq_len", c.max_seq_len);
  if (kv.contains("model.gelu")) {
    const std::string& g = kv.get("model.gelu");
    if (g == "tanh") {
      c.gelu = GeluKind::kTanh;
    } else if (g == "erf") {
      c.gelu = GeluKind::kErf;
    } else {
      fail(ErrorKind::kConfig, "model.gelu must be tanh or erf, got '" + g + "'");
    }
  }
  if (kv.contains("model.ln_eps")) c.ln_eps = kv.get_double("model.ln_eps");
  if (kv.contains("model.seed")) c.seed = kv.get_uint("model.seed");
  if (kv.contains("mask.mode")) c.mask_mode = parse_mask_mode(kv.get("mask.mode"));
  if (kv.contains("mask.joint_full_bidirectional")) {
    c.joint_full_bidirectional = kv.get_bool("mask.joint_full_bidirectional");
  }
  c.encoder.model_dim = c.model_dim;
  return c;
}

std::vector<std::pair<std::string, Tensor*>> PolicyParams::named() {
  std::vector<std::pair<std::string, Tensor*>> out = encoder.named();
  out.emplace_back("embed.token", &token_embedding);
  out.emplace_back("embed.position", &position_embedding);
  out.emplace_back("embed.action_queries", &action_queries);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    LayerParams& L = layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.gain", &L.ln1_gain);
    out.emplace_back(p + "ln1.bias", &L.ln1_bias);
    out.emplace_back(p + "attn.wq", &L.wq);
    out.emplace_back(p + "attn.bq", &L.bq);
    out.emplace_back(p + "attn.wk", &L.wk);
    out.emplace_back(p + "attn.wv", &L.wv);
    out.emplace_back(p + "attn.bv", &L.bv);
    out.emplace_back(p + "attn.wo", &L.wo);
    out.emplace_back(p + "attn.bo", &L.bo);
    out.emplace_back(p + "ln2.gain", &L.ln2_gain);
    out.emplace_back(p + "ln2.bias", &L.ln2_bias);
    out.emplace_back(p + "mlp.w1", &L.w1);
    out.emplace_back(p + "mlp.b1", &L.b1);
    out.emplace_back(p + "mlp.w2", &L.w2);
    out.emplace_back(p + "mlp.b2", &L.b2);
  }
  out.emplace_back("final_ln.gain", &lnf_gain);
  out.emplace_back("final_ln.bias", &lnf_bias);
  out.emplace_back("lm_head", &lm_head);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> PolicyParams::named() const {
  auto mutable_list = const_cast<PolicyParams*>(this)->named();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mutable_list.size());
  for (auto& [name, t] : mutable_list) out.emplace_back(std::move(name), t);
  return out;
}

std::size_t PolicyParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t->size();
  return n;
}

void PolicyParams::zero_grad() {
  for (auto& [name, t] : named()) t->zero_grad();
}

namespace {

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

Tensor weight(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  return normal_tensor({fan_in, fan_out}, 1.0 / std::sqrt(double(fan_in)), rng);
}

Tensor ones(std::size_t n) {
  Tensor t = Tensor::vector(n);
  t.fill(1.0);
  return t;
}

constexpr double kEmbeddingStd = 0.1;
// Patch embeddings arrive at unit scale; positions must be comparable or
// attention cannot tell the cells apart early in training.
constexpr double kPositionStd = 1.0;

}  // namespace

PolicyParams init_params(const PolicyConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(derive_seed(cfg.seed, "policy.init"));
  const std::size_t d = cfg.model_dim;
  const std::size_t v = cfg.vocab();
  PolicyParams p;
  p.encoder = init_encoder_params(cfg.encoder, rng);
  p.token_embedding = normal_tensor({v, d}, kEmbeddingStd, rng);
  p.position_embedding = normal_tensor({cfg.max_seq_len, d}, kPositionStd, rng);
  p.action_queries = normal_tensor({cfg.action_dims, d}, kEmbeddingStd, rng);
  p.layers.resize(cfg.n_layers);
  for (LayerParams& L : p.layers) {
    L.ln1_gain = ones(d);
    L.ln1_bias = Tensor::vector(d);
    L.wq = weight(d, d, rng);
    L.bq = Tensor::vector(d);
    L.wk = weight(d, d, rng);
    L.wv = weight(d, d, rng);
    L.bv = Tensor::vector(d);
    L.wo = weight(d, d, rng);
    L.bo = Tensor::vector(d);
    L.ln2_gain = ones(d);
    L.ln2_bias = Tensor::vector(d);
    L.w1 = weight(d, cfg.mlp_hidden, rng);
    L.b1 = Tensor::vector(cfg.mlp_hidden);
    L.w2 = weight(cfg.mlp_hidden, d, rng);
    L.b2 = Tensor::vector(d);
  }
  p.lnf_gain = ones(d);
  p.lnf_bias = Tensor::vector(d);
  p.lm_head = weight(d, v, rng);
  return p;
}

std::uint64_t params_checksum(const PolicyParams& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : params.named()) {
    h = fnv1a64(name, h);
    const auto* bytes = reinterpret_cast<const char*>(t->data());
    h = fnv1a64(std::string_view(bytes, t->size() * sizeof(double)), h);
  }
  return h;
}

std::vector<SlotSource> joint_slots(std::size_t action_dims) {
  std::vector<SlotSource> slots;
  for (std::size_t i = 0; i < action_dims; ++i) {
    slots.push_back(SlotSource::query(static_cast<int>(i)));
  }
  return slots;
}

std::vector<SlotSource> teacher_forced_slots(std::span<const int> action_tokens) {
  std::vector<SlotSource> slots;
  if (action_tokens.empty()) return slots;
  slots.push_back(SlotSource::query(0));
  for (std::size_t t = 0; t + 1 < action_tokens.size(); ++t) {
    slots.push_back(SlotSource::token(action_tokens[t]));
  }
  return slots;
}

namespace {

const double* slot_row(const PolicyParams& params, const PolicyConfig& cfg,
                       const SlotSource& slot) {
  if (slot.kind == SlotSource::Kind::kQuery) {
    if (slot.index < 0 || static_cast<std::size_t>(slot.index) >= cfg.action_dims) {
      fail(ErrorKind::kConfig, "action query index " + std::to_string(slot.index) +
                                   " out of range");
    }
    return params.action_queries.row(static_cast<std::size_t>(slot.index)).data();
  }
  if (slot.index < 0 || static_cast<std::size_t>(slot.index) >= cfg.vocab()) {
    fail(ErrorKind::kConfig, "slot token " + std::to_string(slot.index) +
                                 " outside the vocabulary");
  }
  return params.token_embedding.row(static_cast<std::size_t>(slot.index)).data();
}

}  // namespace

AssembledSequence assemble_sequence(const PolicyParams& params,
                                    const PolicyConfig& cfg,
                                    const Tensor& img_emb,
                                    std::span<const int> instruction_tokens,
                                    std::span<const SlotSource> slots) {
  const std::size_t d = cfg.model_dim;
  if (img_emb.cols() != d) {
    fail(ErrorKind::kDimension, "assemble_sequence: image embeddings " +
                                    shape_string(img_emb.shape()) +
                                    " do not have model_dim columns");
  }
  const std::size_t n_img = img_emb.rows();
  const std::size_t prefix = n_img + instruction_tokens.size();
  const std::size_t total = prefix + slots.size();
  if (total > cfg.max_seq_len) {
    fail(ErrorKind::kConfig, "assemble_sequence: sequence length " +
                                 std::to_string(total) + " exceeds max_seq_len " +
                                 std::to_string(cfg.max_seq_len));
  }
  AssembledSequence seq{Tensor::zeros(total, d), {prefix, slots.size()}};
  for (std::size_t i = 0; i < total; ++i) {
    const double* src = nullptr;
    if (i < n_img) {
      src = img_emb.row(i).data();
    } else if (i < prefix) {
      const int id = instruction_tokens[i - n_img];
      if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab()) {
        fail(ErrorKind::kConfig, "instruction token " + std::to_string(id) +
                                     " outside the vocabulary");
      }
      src = params.token_embedding.row(static_cast<std::size_t>(id)).data();
    } else {
      src = slot_row(params, cfg, slots[i - prefix]);
    }
    const auto pos = params.position_embedding.row(i);
    auto out = seq.embeddings.row(i);
    for (std::size_t j = 0; j < d; ++j) out[j] = src[j] + pos[j];
  }
  return seq;
}

void assemble_sequence_backward(PolicyParams& params, Tensor& img_emb,
                                std::span<const int> instruction_tokens,
                                std::span<const SlotSource> slots,
                                const AssembledSequence& seq) {
  if (!seq.embeddings.has_grad()) return;
  const auto g = seq.embeddings.grad();
  const std::size_t d = seq.embeddings.cols();
  const std::size_t n_img = img_emb.rows();
  const std::size_t prefix = seq.layout.prefix_len;
  double* dpos = params.position_embedding.grad_data();
  double* dimg = img_emb.grad_data();
  double* dtok = params.token_embedding.grad_data();
  double* dquery = params.action_queries.grad_data();
  for (std::size_t i = 0; i < seq.layout.total(); ++i) {
    const double* gi = g.data() + i * d;
    double* dst = nullptr;
    if (i < n_img) {
      dst = dimg + i * d;
    } else if (i < prefix) {
      dst = dtok + static_cast<std::size_t>(instruction_tokens[i - n_img]) * d;
    } else {
      const SlotSource& s = slots[i - prefix];
      dst = (s.kind == SlotSource::Kind::kQuery ? dquery : dtok) +
            static_cast<std::size_t>(s.index) * d;
    }
    for (std::size_t j = 0; j < d; ++j) {
      dst[j] += gi[j];
      dpos[i * d + j] += gi[j];
    }
  }
}

Tensor slot_embedding(const PolicyParams& params, const PolicyConfig& cfg,
                      const SlotSource& slot, std::size_t pos) {
  if (pos >= cfg.max_seq_len) {
    fail(ErrorKind::kConfig, "slot position " + std::to_string(pos) +
                                 " exceeds max_seq_len");
  }
  const std::size_t d = cfg.model_dim;
  Tensor out = Tensor::zeros(1, d);
  const double* src = slot_row(params, cfg, slot);
  const auto p = params.position_embedding.row(pos);
  for (std::size_t j = 0; j < d; ++j) out[j] = src[j] + p[j];
  return out;
}

namespace {

// One transformer block over `x` ([n x d]). `allow` is [n x context] where
// context = cached rows + n. When cache_k/cache_v are given they hold the
// previous keys/values on entry and the extended ones on exit.
Tensor layer_forward(const LayerParams& L, const PolicyConfig& cfg,
                     const Tensor& x, std::span<const std::uint8_t> allow,
                     Tensor* cache_k, Tensor* cache_v, LayerTape& t) {
  t.ln1 = layer_norm(x, L.ln1_gain, L.ln1_bias, cfg.ln_eps);
  t.q = linear(t.ln1.out, L.wq, L.bq);
  t.k = matmul(t.ln1.out, L.wk);  // a key bias would cancel in the softmax
  t.v = linear(t.ln1.out, L.wv, L.bv);

  const Tensor* keys = &t.k;
  const Tensor* values = &t.v;
  if (cache_k != nullptr) {
    if (cache_k->size() != 0) {
      const Tensor* kp[] = {cache_k, &t.k};
      const Tensor* vp[] = {cache_v, &t.v};
      *cache_k = concat_rows(kp);
      *cache_v = concat_rows(vp);
    } else {
      *cache_k = t.k;
      *cache_v = t.v;
    }
    keys = cache_k;
    values = cache_v;
  }

  const std::size_t hd = cfg.head_dim();
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  t.heads.resize(cfg.n_heads);
  t.attn = Tensor::zeros(x.rows(), cfg.model_dim);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    AttentionHeadTape& ht = t.heads[h];
    ht.q = slice_cols(t.q, h * hd, hd);
    ht.k = slice_cols(*keys, h * hd, hd);
    ht.v = slice_cols(*values, h * hd, hd);
    ht.q_scaled = scale(ht.q, sc);
    ht.scores = matmul_nt(ht.q_scaled, ht.k);
    ht.probs = masked_softmax_rows(ht.scores, allow);
    ht.context = matmul(ht.probs, ht.v);
    assign_cols(t.attn, h * hd, ht.context);
  }
  t.attn_out = linear(t.attn, L.wo, L.bo);
  t.x_mid = add(x, t.attn_out);
  t.ln2 = layer_norm(t.x_mid, L.ln2_gain, L.ln2_bias, cfg.ln_eps);
  t.mlp_pre = linear(t.ln2.out, L.w1, L.b1);
  t.mlp_act = gelu(t.mlp_pre, cfg.gelu);
  t.mlp_out = linear(t.mlp_act, L.w2, L.b2);
  return add(t.x_mid, t.mlp_out);
}

void layer_backward(LayerParams& L, const PolicyConfig& cfg, Tensor& x_in,
                    LayerTape& t, const Tensor& x_out) {
  add_backward(t.x_mid, t.mlp_out, x_out);
  linear_backward(t.mlp_act, L.w2, L.b2, t.mlp_out);
  gelu_backward(t.mlp_pre, t.mlp_act, cfg.gelu);
  linear_backward(t.ln2.out, L.w1, L.b1, t.mlp_pre);
  layer_norm_backward(t.x_mid, L.ln2_gain, L.ln2_bias, t.ln2);
  add_backward(x_in, t.attn_out, t.x_mid);
  linear_backward(t.attn, L.wo, L.bo, t.attn_out);

  const std::size_t hd = cfg.head_dim();
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto dattn = t.attn.grad();
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    AttentionHeadTape& ht = t.heads[h];
    double* dctx = ht.context.grad_data();
    for (std::size_t r = 0; r < ht.context.rows(); ++r) {
      for (std::size_t j = 0; j < hd; ++j) {
        dctx[r * hd + j] += dattn[r * cfg.model_dim + h * hd + j];
      }
    }
    matmul_backward(ht.probs, ht.v, ht.context);
    softmax_rows_backward(ht.scores, ht.probs);
    matmul_nt_backward(ht.q_scaled, ht.k, ht.scores);
    scale_backward(ht.q, sc, ht.q_scaled);
    slice_cols_backward(t.q, h * hd, ht.q);
    slice_cols_backward(t.k, h * hd, ht.k);
    slice_cols_backward(t.v, h * hd, ht.v);
  }
  linear_backward(t.ln1.out, L.wq, L.bq, t.q);
  matmul_backward(t.ln1.out, L.wk, t.k);
  linear_backward(t.ln1.out, L.wv, L.bv, t.v);
  layer_norm_backward(x_in, L.ln1_gain, L.ln1_bias, t.ln1);
}

void check_head_rows(std::span<const int> rows, std::size_t n) {
  for (int r : rows) {
    if (r < 0 || static_cast<std::size_t>(r) >= n) {
      fail(ErrorKind::kDimension, "head row " + std::to_string(r) +
                                      " outside sequence of length " +
                                      std::to_string(n));
    }
  }
}

Tensor apply_head(const PolicyParams& params, const PolicyConfig& cfg,
                  const Tensor& hidden, std::span<const int> head_rows,
                  PolicyTape* tape) {
  if (head_rows.empty()) return Tensor();
  if (tape != nullptr) {
    tape->head_rows.assign(head_rows.begin(), head_rows.end());
    tape->head_in = gather_rows(hidden, head_rows);
    tape->lnf = layer_norm(tape->head_in, params.lnf_gain, params.lnf_bias, cfg.ln_eps);
    tape->logits = matmul(tape->lnf.out, params.lm_head);
    return tape->logits;
  }
  const Tensor rows = gather_rows(hidden, head_rows);
  const LayerNormOutput ln = layer_norm(rows, params.lnf_gain, params.lnf_bias, cfg.ln_eps);
  return matmul(ln.out, params.lm_head);
}

}  // namespace

Tensor forward(const PolicyParams& params, const PolicyConfig& cfg,
               const Tensor& embeddings, const AttentionMask& mask) {
  std::vector<int> rows(embeddings.rows());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(i);
  return forward_rows(params, cfg, embeddings, mask, rows);
}

Tensor forward_rows(const PolicyParams& params, const PolicyConfig& cfg,
                    const Tensor& embeddings, const AttentionMask& mask,
                    std::span<const int> head_rows, PolicyTape* tape) {
  const std::size_t t = embeddings.rows();
  if (embeddings.cols() != cfg.model_dim) {
    fail(ErrorKind::kDimension, "forward: embeddings " +
                                    shape_string(embeddings.shape()) +
                                    " do not have model_dim columns");
  }
  if (t > cfg.max_seq_len) {
    fail(ErrorKind::kConfig, "forward: sequence length " + std::to_string(t) +
                                 " exceeds max_seq_len " +
                                 std::to_string(cfg.max_seq_len));
  }
  if (mask.size() != t) {
    fail(ErrorKind::kDimension, "forward: mask size " + std::to_string(mask.size()) +
                                    " != sequence length " + std::to_string(t));
  }
  check_head_rows(head_rows, t);

  if (tape == nullptr) {
    const std::vector<std::uint8_t> allow = mask.block(0, t, t);
    Tensor x = embeddings;
    x.drop_grad();
    LayerTape scratch;
    for (const LayerParams& L : params.layers) {
      x = layer_forward(L, cfg, x, allow, nullptr, nullptr, scratch);
    }
    return apply_head(params, cfg, x, head_rows, nullptr);
  }

  tape->allow = mask.block(0, t, t);
  tape->residual.assign(cfg.n_layers + 1, Tensor());
  tape->layers.assign(cfg.n_layers, LayerTape());
  tape->residual[0] = embeddings;
  tape->residual[0].drop_grad();
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    tape->residual[l + 1] = layer_forward(params.layers[l], cfg, tape->residual[l],
                                          tape->allow, nullptr, nullptr,
                                          tape->layers[l]);
  }
  return apply_head(params, cfg, tape->residual.back(), head_rows, tape);
}

void policy_backward(PolicyParams& params, const PolicyConfig& cfg,
                     PolicyTape& tape) {
  if (tape.layers.size() != cfg.n_layers) {
    fail(ErrorKind::kState, "policy_backward: tape does not match config");
  }
  matmul_backward(tape.lnf.out, params.lm_head, tape.logits);
  layer_norm_backward(tape.head_in, params.lnf_gain, params.lnf_bias, tape.lnf);
  gather_rows_backward(tape.residual.back(), tape.head_rows, tape.head_in);
  for (std::size_t l = cfg.n_layers; l-- > 0;) {
    layer_backward(params.layers[l], cfg, tape.residual[l], tape.layers[l],
                   tape.residual[l + 1]);
  }
}

Tensor forward_cached(const PolicyParams& params, const PolicyConfig& cfg,
                      const Tensor& new_embeddings, KvCache& cache,
                      const AttentionMask& mask, std::span<const int> head_rows) {
  if (cache.keys.size() != cfg.n_layers || cache.values.size() != cfg.n_layers) {
    fail(ErrorKind::kState, "forward_cached: cache has " +
                                std::to_string(cache.keys.size()) +
                                " layers, config has " +
                                std::to_string(cfg.n_layers));
  }
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (cache.keys[l].rows() != cache.length ||
        cache.values[l].rows() != cache.length ||
        (cache.length > 0 && cache.keys[l].cols() != cfg.model_dim)) {
      fail(ErrorKind::kState, "forward_cached: layer " + std::to_string(l) +
                                  " cache does not hold " +
                                  std::to_string(cache.length) + " positions");
    }
  }
  if (new_embeddings.cols() != cfg.model_dim) {
    fail(ErrorKind::kDimension, "forward_cached: embeddings " +
                                    shape_string(new_embeddings.shape()) +
                                    " do not have model_dim columns");
  }
  const std::size_t n = new_embeddings.rows();
  const std::size_t context = cache.length + n;
  if (context > cfg.max_seq_len) {
    fail(ErrorKind::kConfig, "forward_cached: " + std::to_string(context) +
                                 " positions exceed max_seq_len");
  }
  if (mask.size() < context) {
    fail(ErrorKind::kDimension, "forward_cached: mask smaller than context");
  }
  for (std::size_t q = cache.length; q < context; ++q) {
    for (std::size_t k = context; k < mask.size(); ++k) {
      if (mask.allow(q, k)) {
        fail(ErrorKind::kState, "forward_cached: mask row " + std::to_string(q) +
                                    " attends a position not yet processed");
      }
    }
  }
  check_head_rows(head_rows, n);

  const std::vector<std::uint8_t> allow = mask.block(cache.length, n, context);
  Tensor x = new_embeddings;
  x.drop_grad();
  LayerTape scratch;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    x = layer_forward(params.layers[l], cfg, x, allow, &cache.keys[l],
                      &cache.values[l], scratch);
  }
  cache.length = context;
  return apply_head(params, cfg, x, head_rows, nullptr);
}

std::uint64_t forward_flops(const PolicyConfig& cfg, std::size_t new_rows,
                            std::size_t context, std::size_t head_rows) {
  const std::uint64_t n = new_rows;
  const std::uint64_t d = cfg.model_dim;
  const std::uint64_t h = cfg.mlp_hidden;
  const std::uint64_t ctx = context;
  const std::uint64_t per_layer = 3 * 2 * n * d * d  // q, k, v
                                  + 2 * n * d * ctx  // scores, all heads
                                  + 2 * n * ctx * d  // probs * values
                                  + 2 * n * d * d    // output projection
                                  + 2 * n * d * h + 2 * n * h * d;  // MLP
  return cfg.n_layers * per_layer +
         2ULL * head_rows * d * static_cast<std::uint64_t>(cfg.vocab());
}

std::uint64_t encoder_flops(const PolicyConfig& cfg) {
  const EncoderConfig& e = cfg.encoder;
  const std::uint64_t p = e.n_patches();
  const std::uint64_t in = e.patch_dim();
  return 2 * p * in * e.feature_a + 2 * p * in * e.feature_b +
         2 * p * (e.feature_a + e.feature_b) * e.model_dim;
}

}  // namespace evla
