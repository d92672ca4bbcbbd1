// SPDX-License-Identifier: Apache-2.0

#include "evla/decode.hpp"

#include <algorithm>
#include <chrono>
#include <exception>
#include <numeric>
#include <thread>

#include "evla/error.hpp"
#include "evla/trainer.hpp"

namespace evla {
namespace {

using Clock = std::chrono::steady_clock;

std::int64_t elapsed_ns(Clock::time_point since) {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - since).count();
}

int pick_token(std::span<const double> row, const PolicyConfig& cfg, std::size_t dim,
               const DecodeOptions& options) {
  const int tok = argmax_token(row, cfg, dim, options.restrict_to_dim);
  const int begin = cfg.action_range_begin(dim);
  const int end = begin + static_cast<int>(cfg.action_bins);
  if (tok < begin || tok >= end) {
    fail(ErrorKind::kDecode, "decode: dimension " + std::to_string(dim) + " emitted token " +
                                 std::to_string(tok) + " outside its range [" +
                                 std::to_string(begin) + ", " + std::to_string(end) + ")");
  }
  return tok;
}

void check_inputs(const PolicyConfig& cfg, const ActionCodec& codec) {
  if (!codec.fitted()) fail(ErrorKind::kState, "decode: codec is not fitted");
  if (codec.dims() != cfg.action_dims || codec.bins() != cfg.action_bins ||
      codec.text_vocab_size() != cfg.text_vocab_size) {
    fail(ErrorKind::kConfig, "decode: codec does not match the model's action vocabulary");
  }
}

void copy_row(Tensor& dst, std::size_t row, const Tensor& src) {
  const auto in = src.row(0);
  auto out = dst.row(row);
  std::copy(in.begin(), in.end(), out.begin());
}

}  // namespace

std::string to_string(DecodePath path) {
  switch (path) {
    case DecodePath::kJoint: return "joint";
    case DecodePath::kArCache: return "ar_cache";
    case DecodePath::kArNoCache: return "ar_nocache";
  }
  return "unknown";
}

DecodePath parse_decode_path(const std::string& text) {
  if (text == "joint") return DecodePath::kJoint;
  if (text == "ar_cache") return DecodePath::kArCache;
  if (text == "ar_nocache") return DecodePath::kArNoCache;
  fail(ErrorKind::kConfig, "unknown decode path '" + text +
                               "' (expected joint, ar_cache or ar_nocache)");
}

DecodeResult decode_joint(const PolicyParams& params, const PolicyConfig& cfg,
                          const Episode& episode, const ActionCodec& codec,
                          const DecodeOptions& options) {
  check_inputs(cfg, codec);
  DecodeResult r;
  r.trace.path = DecodePath::kJoint;
  if (cfg.mask_mode != MaskMode::kJoint) {
    r.trace.regime_mismatch = true;
    r.trace.notes.push_back("parameters were trained with the causal mask; joint decoding "
                            "runs them out of distribution");
  }
  const std::uint64_t flops0 = flop_counter::count();
  const auto t0 = Clock::now();

  const Tensor img = encode_image(episode.image, params.encoder, cfg.encoder);
  const int instruction[] = {episode.instruction};
  const std::vector<SlotSource> slots = joint_slots(cfg.action_dims);
  const AssembledSequence seq = assemble_sequence(params, cfg, img, instruction, slots);
  const AttentionMask mask =
      build_mask(seq.layout, MaskMode::kJoint, {cfg.joint_full_bidirectional});
  std::vector<int> rows(cfg.action_dims);
  std::iota(rows.begin(), rows.end(), static_cast<int>(seq.layout.action_begin()));
  r.trace.prefix_ns = elapsed_ns(t0);

  const auto t1 = Clock::now();
  r.logits = forward_rows(params, cfg, seq.embeddings, mask, rows);
  r.trace.trunk_forwards = 1;
  r.trace.token_forwards = 1;
  r.trace.rows_per_forward.push_back(seq.layout.total());
  r.tokens.resize(cfg.action_dims);
  for (std::size_t d = 0; d < cfg.action_dims; ++d) {
    r.tokens[d] = pick_token(r.logits.row(d), cfg, d, options);
  }
  r.trace.decode_ns = elapsed_ns(t1);
  r.trace.flops = flop_counter::count() - flops0;
  r.action = codec.detokenize(r.tokens);
  return r;
}

DecodeResult decode_autoregressive(const PolicyParams& params, const PolicyConfig& cfg,
                                   const Episode& episode, const ActionCodec& codec,
                                   bool use_cache, const DecodeOptions& options) {
  check_inputs(cfg, codec);
  const std::size_t dims = cfg.action_dims;
  DecodeResult r;
  r.trace.path = use_cache ? DecodePath::kArCache : DecodePath::kArNoCache;
  if (cfg.mask_mode != MaskMode::kCausal) {
    r.trace.regime_mismatch = true;
    r.trace.notes.push_back("parameters were trained with the joint mask; autoregressive "
                            "decoding runs them out of distribution");
  }
  const std::uint64_t flops0 = flop_counter::count();
  const auto t0 = Clock::now();

  const Tensor img = encode_image(episode.image, params.encoder, cfg.encoder);
  const int instruction[] = {episode.instruction};
  const AssembledSequence prefix = assemble_sequence(params, cfg, img, instruction, {});
  const std::size_t p = prefix.layout.prefix_len;
  const AttentionMask full_mask = AttentionMask::causal(p + dims);

  KvCache cache = KvCache::empty(cfg);
  if (use_cache) {
    forward_cached(params, cfg, prefix.embeddings, cache, full_mask, {});
  } else {
    forward_rows(params, cfg, prefix.embeddings, AttentionMask::causal(p), {});
  }
  r.trace.trunk_forwards = 1;
  r.trace.prefix_forwards = 1;
  r.trace.rows_per_forward.push_back(p);
  r.trace.prefix_ns = elapsed_ns(t0);

  const auto t1 = Clock::now();
  r.logits = Tensor::zeros(dims, cfg.vocab());
  r.tokens.reserve(dims);
  // Slot t holds query 0 (t = 0) or the embedding of token t - 1.
  std::vector<SlotSource> slots;
  slots.reserve(dims);
  for (std::size_t t = 0; t < dims; ++t) {
    slots.push_back(t == 0 ? SlotSource::query(0) : SlotSource::token(r.tokens.back()));
    Tensor logits;
    if (use_cache) {
      const Tensor emb = slot_embedding(params, cfg, slots.back(), p + t);
      const int head[] = {0};
      logits = forward_cached(params, cfg, emb, cache, full_mask, head);
      r.trace.rows_per_forward.push_back(1);
    } else {
      const AssembledSequence seq = assemble_sequence(params, cfg, img, instruction, slots);
      const int head[] = {static_cast<int>(p + t)};
      logits = forward_rows(params, cfg, seq.embeddings, AttentionMask::causal(p + t + 1), head);
      r.trace.rows_per_forward.push_back(p + t + 1);
    }
    ++r.trace.trunk_forwards;
    ++r.trace.token_forwards;
    copy_row(r.logits, t, logits);
    r.tokens.push_back(pick_token(logits.row(0), cfg, t, options));
  }
  r.trace.decode_ns = elapsed_ns(t1);
  r.trace.flops = flop_counter::count() - flops0;
  r.action = codec.detokenize(r.tokens);
  return r;
}

DecodeResult decode(DecodePath path, const PolicyParams& params, const PolicyConfig& cfg,
                    const Episode& episode, const ActionCodec& codec,
                    const DecodeOptions& options) {
  switch (path) {
    case DecodePath::kJoint: return decode_joint(params, cfg, episode, codec, options);
    case DecodePath::kArCache:
      return decode_autoregressive(params, cfg, episode, codec, true, options);
    case DecodePath::kArNoCache:
      return decode_autoregressive(params, cfg, episode, codec, false, options);
  }
  fail(ErrorKind::kContract, "decode: unknown path");
}

std::vector<DecodeResult> decode_many(DecodePath path, const PolicyParams& params,
                                      const PolicyConfig& cfg,
                                      std::span<const Episode> episodes,
                                      const ActionCodec& codec, std::size_t threads,
                                      const DecodeOptions& options) {
  if (threads == 0) fail(ErrorKind::kConfig, "decode_many: threads must be >= 1");
  std::vector<DecodeResult> out(episodes.size());
  const std::size_t workers = std::min(threads, std::max<std::size_t>(episodes.size(), 1));
  std::vector<std::exception_ptr> errors(workers);
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t i = w; i < episodes.size(); i += workers) {
        out[i] = decode(path, params, cfg, episodes[i], codec, options);
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work, w);
  work(0);
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

SequenceLayout decode_layout(const PolicyConfig& cfg) {
  return {cfg.encoder.n_patches() + 1, cfg.action_dims};
}

std::uint64_t count_flops(const PolicyConfig& cfg, const SequenceLayout& layout,
                          DecodePath path) {
  const std::size_t p = layout.prefix_len;
  const std::size_t dims = layout.action_len;
  std::uint64_t total = encoder_flops(cfg);
  if (path == DecodePath::kJoint) {
    return total + forward_flops(cfg, p + dims, p + dims, dims);
  }
  total += forward_flops(cfg, p, p, 0);
  for (std::size_t t = 1; t <= dims; ++t) {
    total += path == DecodePath::kArCache ? forward_flops(cfg, 1, p + t, 1)
                                          : forward_flops(cfg, p + t, p + t, 1);
  }
  return total;
}

}  // namespace evla
