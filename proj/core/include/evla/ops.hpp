// SPDX-License-Identifier: Apache-2.0

// Differentiable primitives. Every forward op returns a fresh tensor; the
// matching *_backward reads the output's gradient and accumulates into the
// gradients of the inputs (allocating them on first touch). An output with
// no gradient is treated as a zero upstream gradient.
//
// Broadcasting is limited to adding a bias vector to every row; any other
// shape mix is a dimension error.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "evla/tensor.hpp"

namespace evla {

// [m x k] * [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
void matmul_backward(Tensor& a, Tensor& b, const Tensor& out);

// [m x k] * [n x k]^T -> [m x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);
void matmul_nt_backward(Tensor& a, Tensor& b, const Tensor& out);

// x * w + bias (bias added to every row).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
void linear_backward(Tensor& x, Tensor& w, Tensor& bias, const Tensor& out);

// x[r, :] + bias for every row r.
Tensor add_bias(const Tensor& x, const Tensor& bias);
void add_bias_backward(Tensor& x, Tensor& bias, const Tensor& out);

Tensor add(const Tensor& a, const Tensor& b);
void add_backward(Tensor& a, Tensor& b, const Tensor& out);

Tensor scale(const Tensor& x, double factor);
void scale_backward(Tensor& x, double factor, const Tensor& out);

// Row-wise softmax with max subtraction.
Tensor softmax_rows(const Tensor& x);
// Softmax over the allowed entries of each row only; disallowed entries get
// probability exactly 0. `allow` is row-major with x.size() entries and every
// row must allow at least one entry.
Tensor masked_softmax_rows(const Tensor& x, std::span<const std::uint8_t> allow);
// Valid for both softmax variants.
void softmax_rows_backward(Tensor& x, const Tensor& out);

struct LayerNormOutput {
  Tensor out;
  std::vector<double> mean;
  std::vector<double> rstd;
};

// Per-row (x - mean) / sqrt(var + eps) * gain + bias, biased variance.
LayerNormOutput layer_norm(const Tensor& x, const Tensor& gain,
                           const Tensor& bias, double eps);
void layer_norm_backward(Tensor& x, Tensor& gain, Tensor& bias,
                         const LayerNormOutput& fwd);

enum class GeluKind { kTanh, kErf };

// Default is the tanh approximation
// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& x, GeluKind kind = GeluKind::kTanh);
void gelu_backward(Tensor& x, const Tensor& out,
                   GeluKind kind = GeluKind::kTanh);

struct CrossEntropyOutput {
  double loss = 0.0;        // mean over supervised rows
  std::size_t count = 0;    // number of supervised rows
  Tensor probs;             // softmax of the logits, supervised rows only valid
};

// Mean negative log-softmax over rows with mask[r] != 0.
CrossEntropyOutput cross_entropy_logits(const Tensor& logits,
                                        std::span<const int> labels,
                                        std::span<const std::uint8_t> mask);
// Accumulates upstream * dloss/dlogits into logits' gradient. Rows with
// mask 0 receive exactly zero.
void cross_entropy_backward(Tensor& logits, std::span<const int> labels,
                            std::span<const std::uint8_t> mask,
                            const CrossEntropyOutput& fwd,
                            double upstream = 1.0);

// Row-wise [a | b].
Tensor concat_cols(const Tensor& a, const Tensor& b);
void concat_cols_backward(Tensor& a, Tensor& b, const Tensor& out);

// Columns [begin, begin + count) of x.
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
void slice_cols_backward(Tensor& x, std::size_t begin, const Tensor& out);

// Writes `part` into columns [begin, begin + part.cols()) of `dst`.
void assign_cols(Tensor& dst, std::size_t begin, const Tensor& part);

// Stacks tensors with a common column count.
Tensor concat_rows(std::span<const Tensor* const> parts);
void concat_rows_backward(std::span<Tensor* const> parts, const Tensor& out);

// Embedding lookup: out[i, :] = table[ids[i], :].
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
void gather_rows_backward(Tensor& table, std::span<const int> ids,
                          const Tensor& out);

}  // namespace evla
