// SPDX-License-Identifier: Apache-2.0

#include "evla/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "evla/error.hpp"

namespace evla {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kUsage: return "usage error";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kState: return "state error";
    case ErrorKind::kDecode: return "decode error";
    case ErrorKind::kFile: return "file error";
    case ErrorKind::kContract: return "contract violation";
  }
  return "error";
}

namespace alloc_stats {
namespace {
thread_local std::size_t g_current = 0;
thread_local std::size_t g_peak = 0;
}  // namespace

std::size_t current_bytes() { return g_current; }
std::size_t peak_bytes() { return g_peak; }
void reset_peak() { g_peak = g_current; }

void record_alloc(std::size_t bytes) {
  g_current += bytes;
  g_peak = std::max(g_peak, g_current);
}
void record_free(std::size_t bytes) { g_current -= bytes; }

}  // namespace alloc_stats

namespace flop_counter {
namespace {
thread_local std::uint64_t g_flops = 0;
}  // namespace

std::uint64_t count() { return g_flops; }
void reset() { g_flops = 0; }
void add(std::uint64_t flops) { g_flops += flops; }

}  // namespace flop_counter

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {
std::size_t element_count(const Shape& shape) {
  for (std::size_t d : shape) {
    if (d == 0) fail(ErrorKind::kDimension, "zero-sized dimension in shape " + shape_string(shape));
  }
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}
}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_.assign(element_count(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::span<const double> values)
    : shape_(std::move(shape)) {
  if (element_count(shape_) != values.size()) {
    fail(ErrorKind::kDimension,
         "shape " + shape_string(shape_) + " does not hold " +
             std::to_string(values.size()) + " values");
  }
  data_.assign(values.begin(), values.end());
}

Tensor Tensor::from_rows(
    std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n = rows.size();
  const std::size_t m = n ? rows.begin()->size() : 0;
  Tensor t(Shape{n, m});
  std::size_t r = 0;
  for (const auto& row : rows) {
    if (row.size() != m) fail(ErrorKind::kDimension, "ragged row list");
    std::copy(row.begin(), row.end(), t.data() + r * m);
    ++r;
  }
  return t;
}

std::size_t Tensor::rows() const {
  if (shape_.size() <= 1) return shape_.empty() ? 0 : 1;
  return data_.size() / shape_.back();
}

std::size_t Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

void Tensor::enable_grad() {
  if (grad_.size() != data_.size()) grad_.assign(data_.size(), 0.0);
}

void Tensor::zero_grad() {
  if (grad_.size() == data_.size()) {
    std::fill(grad_.begin(), grad_.end(), 0.0);
  } else {
    enable_grad();
  }
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

void Tensor::assert_finite(const std::string& what) const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      fail(ErrorKind::kDimension,
           what + ": non-finite value at flat index " + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < grad_.size(); ++i) {
    if (!std::isfinite(grad_[i])) {
      fail(ErrorKind::kDimension,
           what + ": non-finite gradient at flat index " + std::to_string(i));
    }
  }
}

}  // namespace evla
