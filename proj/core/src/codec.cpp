// SPDX-License-Identifier: Apache-2.0

#include "evla/codec.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "evla/error.hpp"
#include "evla/kv.hpp"

namespace evla {

double quantile_sorted(std::span<const double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

namespace {

// Same value as quantile_sorted on the sorted copy, via selection.
double quantile_select(std::vector<double>& values, double q) {
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  std::nth_element(values.begin(), values.begin() + lo, values.end());
  const double vlo = values[lo];
  const double vhi =
      hi == lo ? vlo : *std::min_element(values.begin() + lo + 1, values.end());
  const double frac = pos - static_cast<double>(lo);
  return vlo + frac * (vhi - vlo);
}

std::vector<double> uniform_edges(double lo, double hi, std::size_t bins) {
  std::vector<double> e(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) {
    e[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  }
  e[bins] = hi;
  return e;
}

}  // namespace

ActionCodec fit_codec(std::span<const std::vector<double>> actions, std::size_t bins,
                      double quantile_lo, double quantile_hi,
                      std::size_t text_vocab_size) {
  if (actions.size() < 2) fail(ErrorKind::kConfig, "codec fit: need at least 2 samples");
  if (bins < 2) fail(ErrorKind::kConfig, "codec fit: need at least 2 bins");
  if (!(quantile_lo >= 0.0 && quantile_lo < quantile_hi && quantile_hi <= 1.0)) {
    fail(ErrorKind::kConfig, "codec fit: quantiles must satisfy 0 <= lo < hi <= 1");
  }
  const std::size_t dims = actions.front().size();
  if (dims == 0) fail(ErrorKind::kConfig, "codec fit: zero-dimensional actions");
  for (const auto& a : actions) {
    if (a.size() != dims) fail(ErrorKind::kDimension, "codec fit: ragged action list");
  }

  ActionCodec codec;
  codec.text_vocab_ = text_vocab_size;
  std::vector<double> column(actions.size());
  for (std::size_t d = 0; d < dims; ++d) {
    for (std::size_t i = 0; i < actions.size(); ++i) {
      column[i] = actions[i][d];
      if (!std::isfinite(column[i])) {
        fail(ErrorKind::kContract, "codec fit: non-finite action value");
      }
    }
    double lo = quantile_select(column, quantile_lo);
    double hi = quantile_select(column, quantile_hi);
    if (!(hi > lo)) {
      // Each padded bin spans several ulps of the value.
      const double pad = std::max(1.0, std::abs(lo)) * 4.0 *
                         static_cast<double>(bins) *
                         std::numeric_limits<double>::epsilon();
      codec.warnings_.push_back("codec fit: dimension " + std::to_string(d) +
                                " is degenerate at " + format_double(lo) +
                                "; widened by +-" + format_double(pad));
      hi = lo + pad;
      lo = lo - pad;
    }
    codec.edges_.push_back(uniform_edges(lo, hi, bins));
  }
  return codec;
}

ActionCodec ActionCodec::from_edges(std::vector<std::vector<double>> edges,
                                    std::size_t text_vocab_size) {
  if (edges.empty()) fail(ErrorKind::kConfig, "codec: no dimensions");
  const std::size_t n = edges.front().size();
  if (n < 3) fail(ErrorKind::kConfig, "codec: need at least 2 bins");
  for (const auto& e : edges) {
    if (e.size() != n) fail(ErrorKind::kConfig, "codec: ragged edge lists");
    for (std::size_t i = 0; i + 1 < e.size(); ++i) {
      if (!(e[i] < e[i + 1])) fail(ErrorKind::kConfig, "codec: edges not strictly ascending");
    }
  }
  ActionCodec c;
  c.edges_ = std::move(edges);
  c.text_vocab_ = text_vocab_size;
  return c;
}

void ActionCodec::require_fitted() const {
  if (!fitted()) fail(ErrorKind::kState, "codec used before fit");
}

std::size_t ActionCodec::bin_of(std::size_t dim, double value) const {
  const auto& e = edges_[dim];
  const double v = std::clamp(value, e.front(), e.back());
  const auto it = std::upper_bound(e.begin(), e.end(), v);
  const auto idx = static_cast<std::size_t>(it - e.begin());
  return std::min(idx == 0 ? 0 : idx - 1, bins() - 1);
}

std::vector<int> ActionCodec::tokenize(std::span<const double> action) const {
  require_fitted();
  if (action.size() != dims()) {
    fail(ErrorKind::kDimension, "tokenize: action has " + std::to_string(action.size()) +
                                    " dims, codec has " + std::to_string(dims()));
  }
  std::vector<int> tokens(dims());
  for (std::size_t d = 0; d < dims(); ++d) {
    if (!std::isfinite(action[d])) {
      fail(ErrorKind::kContract, "tokenize: non-finite value in dim " + std::to_string(d));
    }
    tokens[d] = vocab_offset(d) + static_cast<int>(bin_of(d, action[d]));
  }
  return tokens;
}

std::vector<double> ActionCodec::detokenize(std::span<const int> tokens) const {
  require_fitted();
  if (tokens.size() != dims()) {
    fail(ErrorKind::kDimension, "detokenize: got " + std::to_string(tokens.size()) +
                                    " tokens, codec has " + std::to_string(dims()) +
                                    " dims");
  }
  std::vector<double> out(dims());
  for (std::size_t d = 0; d < dims(); ++d) {
    const int bin = tokens[d] - vocab_offset(d);
    if (bin < 0 || static_cast<std::size_t>(bin) >= bins()) {
      fail(ErrorKind::kDecode, "detokenize: token " + std::to_string(tokens[d]) +
                                   " is outside dim " + std::to_string(d) +
                                   " range [" + std::to_string(vocab_offset(d)) + "," +
                                   std::to_string(vocab_offset(d) + bins()) + ")");
    }
    out[d] = center(d, static_cast<std::size_t>(bin));
  }
  return out;
}

std::string ActionCodec::describe() const {
  std::ostringstream os;
  os << "# action codec: " << dims() << " dims x " << bins()
     << " bins, left-closed bins, last bin closed\n";
  os << "text_vocab=" << text_vocab_ << "\n";
  for (std::size_t d = 0; d < dims(); ++d) {
    os << "dim" << d << ".lower=" << format_double(lower(d)) << "\n";
    os << "dim" << d << ".upper=" << format_double(upper(d)) << "\n";
    os << "dim" << d << ".tokens=" << vocab_offset(d) << ".."
       << vocab_offset(d) + static_cast<int>(bins()) - 1 << "\n";
    os << "dim" << d << ".edges=";
    for (std::size_t i = 0; i < edges_[d].size(); ++i) {
      if (i) os << ',';
      os << format_double(edges_[d][i]);
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace evla
