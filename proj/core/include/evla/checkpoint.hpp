// SPDX-License-Identifier: Apache-2.0

// Checkpoint container, all integers little-endian:
//
//   "EVLACKPT"  u32 version
//   u32 length + config text (key=value lines, full resolved run config)
//   u32 blob count, then per blob:
//     u32 length + name, u8 dtype (1 = f64), u32 rank, rank x u64 dims,
//     prod(dims) x f64 data
//   u64 FNV-1a checksum of every byte from the blob count to the last blob

#pragma once

#include <cstdint>
#include <string>

#include "evla/codec.hpp"
#include "evla/kv.hpp"
#include "evla/policy.hpp"

namespace evla {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  KeyValues config;  // must contain the model.* keys of `policy`
  PolicyConfig policy;
  PolicyParams params;
  ActionCodec codec;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace evla
