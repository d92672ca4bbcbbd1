// SPDX-License-Identifier: Apache-2.0

// Inference paths over one episode:
//
//   joint       one trunk forward over [prefix | D action queries] under the
//               joint mask; all D tokens are read off that pass.
//   ar_cache    prefix forward that fills a KV cache, then D single-row
//               steps, each feeding back the previous token's embedding.
//   ar_nocache  prefix forward, then D steps that recompute the whole
//               sequence so far (prefix + t positions at step t).
//
// Both autoregressive paths emit the same tokens.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evla/codec.hpp"
#include "evla/mask.hpp"
#include "evla/policy.hpp"
#include "evla/tensor.hpp"
#include "evla/toy_world.hpp"

namespace evla {

enum class DecodePath { kJoint, kArCache, kArNoCache };

std::string to_string(DecodePath path);
DecodePath parse_decode_path(const std::string& text);

struct DecodeOptions {
  // Argmax over each slot's own token block. When false the argmax runs over
  // the whole vocabulary and an out-of-block token is a decode error.
  bool restrict_to_dim = true;
};

struct DecodeTrace {
  DecodePath path = DecodePath::kJoint;
  std::size_t trunk_forwards = 0;   // calls into the transformer trunk
  std::size_t prefix_forwards = 0;  // trunk calls that emitted no token
  std::size_t token_forwards = 0;   // trunk calls that emitted >= 1 token
  std::vector<std::size_t> rows_per_forward;
  std::uint64_t flops = 0;          // instrumented matrix-product FLOPs
  std::int64_t prefix_ns = 0;       // image encoding, assembly, prefix pass
  std::int64_t decode_ns = 0;       // token-emitting passes
  // The parameters were trained under the other attention regime.
  bool regime_mismatch = false;
  std::vector<std::string> notes;
};

struct DecodeResult {
  std::vector<int> tokens;     // D action tokens
  std::vector<double> action;  // detokenized bin centers
  Tensor logits;               // [D x V], row t produced token t
  DecodeTrace trace;
};

DecodeResult decode_joint(const PolicyParams& params, const PolicyConfig& cfg,
                          const Episode& episode, const ActionCodec& codec,
                          const DecodeOptions& options = {});

DecodeResult decode_autoregressive(const PolicyParams& params, const PolicyConfig& cfg,
                                   const Episode& episode, const ActionCodec& codec,
                                   bool use_cache, const DecodeOptions& options = {});

DecodeResult decode(DecodePath path, const PolicyParams& params, const PolicyConfig& cfg,
                    const Episode& episode, const ActionCodec& codec,
                    const DecodeOptions& options = {});

// Throughput mode: decodes every episode, spreading them over `threads`
// workers. Results are in episode order and match sequential decoding.
std::vector<DecodeResult> decode_many(DecodePath path, const PolicyParams& params,
                                      const PolicyConfig& cfg,
                                      std::span<const Episode> episodes,
                                      const ActionCodec& codec, std::size_t threads,
                                      const DecodeOptions& options = {});

// Sequence layout of one decode: image patches plus the one instruction
// token, then D action slots.
SequenceLayout decode_layout(const PolicyConfig& cfg);

// Analytic matrix-product FLOPs of one decode, encoder included:
//   joint       enc + fwd(T rows, T context, D head rows)
//   ar_cache    enc + fwd(P, P, 0) + sum_t fwd(1, P + t, 1)
//   ar_nocache  enc + fwd(P, P, 0) + sum_t fwd(P + t, P + t, 1)
// with P = layout.prefix_len, T = P + D and t = 1..D.
std::uint64_t count_flops(const PolicyConfig& cfg, const SequenceLayout& layout,
                          DecodePath path);

}  // namespace evla
