// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace evla {

enum class MaskMode { kCausal, kJoint };

std::string to_string(MaskMode mode);
MaskMode parse_mask_mode(const std::string& text);

// Prefix (image patches + instruction) followed by the action slots, which
// always occupy the last `action_len` positions.
struct SequenceLayout {
  std::size_t prefix_len = 0;
  std::size_t action_len = 0;

  std::size_t total() const { return prefix_len + action_len; }
  std::size_t action_begin() const { return prefix_len; }
  bool is_action(std::size_t pos) const { return pos >= prefix_len && pos < total(); }
};

// allow(q, k): query position q may attend to key position k.
class AttentionMask {
 public:
  AttentionMask() = default;
  explicit AttentionMask(std::size_t size);

  // Lower-triangular mask of the given size.
  static AttentionMask causal(std::size_t size);

  std::size_t size() const { return size_; }
  bool allow(std::size_t q, std::size_t k) const { return bits_[q * size_ + k] != 0; }
  void set(std::size_t q, std::size_t k, bool value) { bits_[q * size_ + k] = value; }

  // Row-major allow bits for rows [row_begin, row_begin + rows) and columns
  // [0, cols).
  std::vector<std::uint8_t> block(std::size_t row_begin, std::size_t rows,
                                  std::size_t cols) const;
  std::span<const std::uint8_t> bits() const { return bits_; }

  // Rows as bit strings, e.g. "1100".
  std::vector<std::string> row_strings() const;

  bool operator==(const AttentionMask&) const = default;

 private:
  std::size_t size_ = 0;
  std::vector<std::uint8_t> bits_;
};

struct MaskOptions {
  // Joint mode only: every position attends every position instead of
  // keeping the prefix causal.
  bool joint_full_bidirectional = false;
};

// Causal: allow(q, k) = k <= q everywhere.
// Joint: prefix rows stay causal; every action row attends all positions.
AttentionMask build_mask(const SequenceLayout& layout, MaskMode mode,
                         const MaskOptions& options = {});

}  // namespace evla
