// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace evla {

// Uniform per-dimension binning between fitted clip bounds. Bins are
// left-closed and right-open except the last, which is closed. Dimension d
// emits tokens in [vocab_offset(d), vocab_offset(d) + bins).
class ActionCodec {
 public:
  ActionCodec() = default;

  // Builds a codec from explicit per-dimension edges (B + 1 ascending values
  // per dimension), as stored in a checkpoint.
  static ActionCodec from_edges(std::vector<std::vector<double>> edges,
                                std::size_t text_vocab_size);

  bool fitted() const { return !edges_.empty(); }
  std::size_t dims() const { return edges_.size(); }
  std::size_t bins() const { return edges_.empty() ? 0 : edges_.front().size() - 1; }
  std::size_t text_vocab_size() const { return text_vocab_; }

  double lower(std::size_t dim) const { return edges_[dim].front(); }
  double upper(std::size_t dim) const { return edges_[dim].back(); }
  const std::vector<double>& edges(std::size_t dim) const { return edges_[dim]; }
  double center(std::size_t dim, std::size_t bin) const {
    return 0.5 * (edges_[dim][bin] + edges_[dim][bin + 1]);
  }
  double bin_width(std::size_t dim, std::size_t bin) const {
    return edges_[dim][bin + 1] - edges_[dim][bin];
  }
  int vocab_offset(std::size_t dim) const {
    return static_cast<int>(text_vocab_ + dim * bins());
  }

  // Bin index of `value` in `dim` after clipping to the bounds.
  std::size_t bin_of(std::size_t dim, double value) const;

  // One token per dimension. Non-finite input is a contract error.
  std::vector<int> tokenize(std::span<const double> action) const;
  // Bin centers. A token outside its dimension's range is a decode error.
  std::vector<double> detokenize(std::span<const int> tokens) const;

  // Human-readable dump of bounds, edges and token ranges.
  std::string describe() const;

  // Warnings raised while fitting (degenerate dimensions).
  const std::vector<std::string>& warnings() const { return warnings_; }

  bool operator==(const ActionCodec& o) const {
    return edges_ == o.edges_ && text_vocab_ == o.text_vocab_;
  }

 private:
  friend ActionCodec fit_codec(std::span<const std::vector<double>>, std::size_t,
                               double, double, std::size_t);
  void require_fitted() const;

  std::vector<std::vector<double>> edges_;
  std::size_t text_vocab_ = 0;
  std::vector<std::string> warnings_;
};

// Linear-interpolated empirical quantile of sorted data at q in [0, 1]
// (position q * (n - 1)).
double quantile_sorted(std::span<const double> sorted, double q);

// Clip bounds at the per-dimension empirical quantiles (quantile_lo,
// quantile_hi), then `bins` uniform bins between them. A dimension whose two
// quantiles coincide is widened by a small symmetric pad and a warning is
// recorded.
ActionCodec fit_codec(std::span<const std::vector<double>> actions, std::size_t bins,
                      double quantile_lo = 0.01, double quantile_hi = 0.99,
                      std::size_t text_vocab_size = 0);

}  // namespace evla
