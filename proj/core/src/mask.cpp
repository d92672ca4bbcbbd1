// SPDX-License-Identifier: Apache-2.0

#include "evla/mask.hpp"

#include "evla/error.hpp"

namespace evla {

std::string to_string(MaskMode mode) {
  return mode == MaskMode::kCausal ? "causal" : "joint";
}

MaskMode parse_mask_mode(const std::string& text) {
  if (text == "causal") return MaskMode::kCausal;
  if (text == "joint") return MaskMode::kJoint;
  fail(ErrorKind::kConfig, "unknown mask mode '" + text + "' (want causal|joint)");
}

AttentionMask::AttentionMask(std::size_t size)
    : size_(size), bits_(size * size, 0) {}

AttentionMask AttentionMask::causal(std::size_t size) {
  AttentionMask m(size);
  for (std::size_t q = 0; q < size; ++q) {
    for (std::size_t k = 0; k <= q; ++k) m.set(q, k, true);
  }
  return m;
}

std::vector<std::uint8_t> AttentionMask::block(std::size_t row_begin,
                                               std::size_t rows,
                                               std::size_t cols) const {
  if (row_begin + rows > size_ || cols > size_) {
    fail(ErrorKind::kDimension, "mask block exceeds mask size " + std::to_string(size_));
  }
  std::vector<std::uint8_t> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = bits_[(row_begin + r) * size_ + c];
    }
  }
  return out;
}

std::vector<std::string> AttentionMask::row_strings() const {
  std::vector<std::string> rows(size_, std::string(size_, '0'));
  for (std::size_t q = 0; q < size_; ++q) {
    for (std::size_t k = 0; k < size_; ++k) {
      if (allow(q, k)) rows[q][k] = '1';
    }
  }
  return rows;
}

AttentionMask build_mask(const SequenceLayout& layout, MaskMode mode,
                         const MaskOptions& options) {
  if (layout.action_len == 0) fail(ErrorKind::kConfig, "mask: action_len must be >= 1");
  const std::size_t t = layout.total();
  if (mode == MaskMode::kCausal) return AttentionMask::causal(t);

  if (options.joint_full_bidirectional) {
    AttentionMask m(t);
    for (std::size_t q = 0; q < t; ++q) {
      for (std::size_t k = 0; k < t; ++k) m.set(q, k, true);
    }
    return m;
  }
  AttentionMask m = AttentionMask::causal(t);
  for (std::size_t q = layout.action_begin(); q < t; ++q) {
    for (std::size_t k = 0; k < t; ++k) m.set(q, k, true);
  }
  return m;
}

}  // namespace evla
