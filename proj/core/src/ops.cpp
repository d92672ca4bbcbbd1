// SPDX-License-Identifier: Apache-2.0

#include "evla/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <vector>

#include "evla/error.hpp"

namespace evla {
namespace {

// The message is only built on failure; these checks sit on hot paths.
template <class Message>
void require(bool ok, Message&& what) {
  if (!ok) fail(ErrorKind::kDimension, what());
}

std::string pair_string(const Tensor& a, const Tensor& b) {
  return shape_string(a.shape()) + " and " + shape_string(b.shape());
}

// Each output element is accumulated in an order fixed by the shape alone:
// ascending over the inner index, or for long nt rows four interleaved
// partial sums. Results never depend on blocking or thread count.

// Columns [j0, n) of rows [0, rows) with a plain loop.
void gemm_tail(const double* a, const double* b, double* c, std::size_t rows,
               std::size_t k, std::size_t n, std::size_t j0) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* cr = c + r * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double arp = a[r * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = j0; j < n; ++j) cr[j] += arp * bp[j];
    }
  }
}

#if defined(__AVX__)

// Register-blocked micro-kernel: kRows x 16 outputs held in four-wide
// vectors across the whole inner loop.
using Vec4 = double __attribute__((vector_size(32)));
constexpr std::size_t kRows = 4;
constexpr std::size_t kCols = 16;

inline Vec4 load4(const double* p) {
  Vec4 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store4(double* p, Vec4 v) { std::memcpy(p, &v, sizeof v); }

template <std::size_t R>
void gemm_block(const double* a, const double* b, double* c, std::size_t k,
                std::size_t n, std::size_t j0) {
  Vec4 acc[R][4];
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t q = 0; q < 4; ++q) acc[r][q] = load4(c + r * n + j0 + 4 * q);
  }
  for (std::size_t p = 0; p < k; ++p) {
    const double* bp = b + p * n + j0;
    const Vec4 b0 = load4(bp), b1 = load4(bp + 4), b2 = load4(bp + 8), b3 = load4(bp + 12);
    for (std::size_t r = 0; r < R; ++r) {
      const double x = a[r * k + p];
      const Vec4 xv = {x, x, x, x};
      acc[r][0] += xv * b0;
      acc[r][1] += xv * b1;
      acc[r][2] += xv * b2;
      acc[r][3] += xv * b3;
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t q = 0; q < 4; ++q) store4(c + r * n + j0 + 4 * q, acc[r][q]);
  }
}

template <std::size_t R>
void gemm_rows(const double* a, const double* b, double* c, std::size_t k,
               std::size_t n) {
  std::size_t j0 = 0;
  for (; j0 + kCols <= n; j0 += kCols) gemm_block<R>(a, b, c, k, n, j0);
  if (j0 < n) gemm_tail(a, b, c, R, k, n, j0);
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn_kernel(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + kRows <= m; i += kRows) gemm_rows<kRows>(a + i * k, b, c + i * n, k, n);
  for (; i < m; ++i) gemm_rows<1>(a + i * k, b, c + i * n, k, n);
}

// c[m x n] += a[m x k] * b[n x k]^T as dot products with four lanes of
// partial sums, reduced in a fixed order.
void gemm_nt_kernel(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  const std::size_t k4 = k - k % 4;
  for (std::size_t j = 0; j < n; ++j) {
    const double* bj = b + j * k;
    std::size_t i = 0;
    for (; i + kRows <= m; i += kRows) {
      Vec4 acc[kRows] = {};
      for (std::size_t p = 0; p < k4; p += 4) {
        const Vec4 bv = load4(bj + p);
        for (std::size_t r = 0; r < kRows; ++r) acc[r] += load4(a + (i + r) * k + p) * bv;
      }
      for (std::size_t r = 0; r < kRows; ++r) {
        double s = (acc[r][0] + acc[r][1]) + (acc[r][2] + acc[r][3]);
        for (std::size_t p = k4; p < k; ++p) s += a[(i + r) * k + p] * bj[p];
        c[(i + r) * n + j] += s;
      }
    }
    for (; i < m; ++i) {
      Vec4 acc = {};
      for (std::size_t p = 0; p < k4; p += 4) acc += load4(a + i * k + p) * load4(bj + p);
      double s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
      for (std::size_t p = k4; p < k; ++p) s += a[i * k + p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

#else

void gemm_nn_kernel(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  gemm_tail(a, b, c, m, k, n, 0);
}

void gemm_nt_kernel(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  const std::size_t k4 = k - k % 4;
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s[4] = {0.0, 0.0, 0.0, 0.0};
      for (std::size_t p = 0; p < k4; p += 4) {
        for (std::size_t q = 0; q < 4; ++q) s[q] += ai[p + q] * bj[p + q];
      }
      double total = (s[0] + s[1]) + (s[2] + s[3]);
      for (std::size_t p = k4; p < k; ++p) total += ai[p] * bj[p];
      c[i * n + j] += total;
    }
  }
}

#endif

constexpr std::size_t kLongDot = 256;

// Thread-local scratch for the transposed operand; grows but never shrinks.
const double* transposed(const double* x, std::size_t rows, std::size_t cols) {
  thread_local std::vector<double> scratch;
  if (scratch.size() < rows * cols) scratch.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) scratch[c * rows + r] = x[r * cols + c];
  }
  return scratch.data();
}

void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  flop_counter::add(2ULL * m * k * n);
  gemm_nn_kernel(a, b, c, m, k, n);
}

// c[m x n] += a[m x k] * b[n x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  flop_counter::add(2ULL * m * k * n);
  // Long rows favour dot products; short ones a transposed copy of b.
  if (k >= kLongDot) {
    gemm_nt_kernel(a, b, c, m, k, n);
  } else {
    gemm_nn_kernel(a, transposed(b, n, k), c, m, k, n);
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  flop_counter::add(2ULL * m * k * n);
  gemm_nn_kernel(transposed(a, m, k), b, c, k, m, n);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

double gelu_value(double x, GeluKind kind) {
  if (kind == GeluKind::kErf) {
    return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  }
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_derivative(double x, GeluKind kind) {
  if (kind == GeluKind::kErf) {
    const double pdf =
        std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)) + x * pdf;
  }
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) +
         0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.rows(), [&] { return std::string("matmul: inner dimensions differ for " + pair_string(a, b)); });
  Tensor c = Tensor::zeros(a.rows(), b.cols());
  gemm_nn(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

void matmul_backward(Tensor& a, Tensor& b, const Tensor& out) {
  if (!out.has_grad()) return;
  const double* dc = out.grad().data();
  // dA = dC * B^T, dB = A^T * dC
  gemm_nt(dc, b.data(), a.grad_data(), a.rows(), b.cols(), a.cols());
  gemm_tn(a.data(), dc, b.grad_data(), a.rows(), a.cols(), b.cols());
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.cols(), [&] { return std::string("matmul_nt: inner dimensions differ for " + pair_string(a, b)); });
  Tensor c = Tensor::zeros(a.rows(), b.rows());
  gemm_nt(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.rows());
  return c;
}

void matmul_nt_backward(Tensor& a, Tensor& b, const Tensor& out) {
  if (!out.has_grad()) return;
  const double* dc = out.grad().data();
  // C = A B^T: dA = dC * B, dB = dC^T * A
  gemm_nn(dc, b.data(), a.grad_data(), a.rows(), b.rows(), a.cols());
  gemm_tn(dc, a.data(), b.grad_data(), a.rows(), b.rows(), a.cols());
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require(x.cols() == w.rows(), [&] { return std::string("linear: inner dimensions differ for " + pair_string(x, w)); });
  require(bias.size() == w.cols(), [&] { return std::string("linear: bias " + shape_string(bias.shape()) +
              " does not match weight " + shape_string(w.shape())); });
  Tensor out = Tensor::zeros(x.rows(), w.cols());
  const std::size_t n = w.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    std::copy(bias.data(), bias.data() + n, out.data() + r * n);
  }
  gemm_nn(x.data(), w.data(), out.data(), x.rows(), x.cols(), n);
  return out;
}

void linear_backward(Tensor& x, Tensor& w, Tensor& bias, const Tensor& out) {
  if (!out.has_grad()) return;
  matmul_backward(x, w, out);
  const auto g = out.grad();
  double* db = bias.grad_data();
  const std::size_t n = w.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t j = 0; j < n; ++j) db[j] += g[r * n + j];
  }
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require(bias.size() == x.cols(), [&] { return std::string("add_bias: bias " + shape_string(bias.shape()) +
              " does not match rows of " + shape_string(x.shape())); });
  Tensor out = x;
  out.drop_grad();
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double* o = out.data() + r * n;
    for (std::size_t j = 0; j < n; ++j) o[j] += bias[j];
  }
  return out;
}

void add_bias_backward(Tensor& x, Tensor& bias, const Tensor& out) {
  if (!out.has_grad()) return;
  const auto g = out.grad();
  double* dx = x.grad_data();
  double* db = bias.grad_data();
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t j = 0; j < n; ++j) {
      dx[r * n + j] += g[r * n + j];
      db[j] += g[r * n + j];
    }
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), [&] { return std::string("add: shapes differ: " + pair_string(a, b)); });
  Tensor out = a;
  out.drop_grad();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

void add_backward(Tensor& a, Tensor& b, const Tensor& out) {
  if (!out.has_grad()) return;
  const auto g = out.grad();
  double* da = a.grad_data();
  double* db = b.grad_data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    da[i] += g[i];
    db[i] += g[i];
  }
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = x;
  out.drop_grad();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factor;
  return out;
}

void scale_backward(Tensor& x, double factor, const Tensor& out) {
  if (!out.has_grad()) return;
  const auto g = out.grad();
  double* dx = x.grad_data();
  for (std::size_t i = 0; i < g.size(); ++i) dx[i] += factor * g[i];
}

Tensor softmax_rows(const Tensor& x) {
  require(x.cols() >= 1, [&] { return std::string("softmax_rows: empty last dimension"); });
  Tensor out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= sum;
  }
  return out;
}

Tensor masked_softmax_rows(const Tensor& x, std::span<const std::uint8_t> allow) {
  require(allow.size() == x.size(), [&] { return std::string("masked_softmax_rows: mask size does not match " +
              shape_string(x.shape())); });
  Tensor out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    auto o = out.row(r);
    const std::uint8_t* ok = allow.data() + r * n;
    double mx = 0.0;
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (ok[j] && (!any || in[j] > mx)) {
        mx = in[j];
        any = true;
      }
    }
    require(any, [&] { return std::string("masked_softmax_rows: row " + std::to_string(r) +
                     " has no allowed entry"); });
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = ok[j] ? std::exp(in[j] - mx) : 0.0;
      sum += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= sum;
  }
  return out;
}

void softmax_rows_backward(Tensor& x, const Tensor& out) {
  if (!out.has_grad()) return;
  const auto g = out.grad();
  double* dx = x.grad_data();
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* p = out.data() + r * n;
    const double* gp = g.data() + r * n;
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += p[j] * gp[j];
    for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += p[j] * (gp[j] - dot);
  }
}

LayerNormOutput layer_norm(const Tensor& x, const Tensor& gain,
                           const Tensor& bias, double eps) {
  const std::size_t d = x.cols();
  require(d >= 1, [&] { return std::string("layer_norm: empty last dimension"); });
  require(gain.size() == d && bias.size() == d, [&] { return std::string("layer_norm: affine parameters do not match " +
              shape_string(x.shape())); });
  if (!(eps > 0.0)) fail(ErrorKind::kConfig, "layer_norm: eps must be > 0");
  LayerNormOutput res{Tensor(x.shape()), std::vector<double>(x.rows()),
                      std::vector<double>(x.rows())};
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    res.mean[r] = mean;
    res.rstd[r] = rstd;
    auto o = res.out.row(r);
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = (in[j] - mean) * rstd * gain[j] + bias[j];
    }
  }
  return res;
}

void layer_norm_backward(Tensor& x, Tensor& gain, Tensor& bias,
                         const LayerNormOutput& fwd) {
  if (!fwd.out.has_grad()) return;
  const auto g = fwd.out.grad();
  const std::size_t d = x.cols();
  double* dx = x.grad_data();
  double* dg = gain.grad_data();
  double* db = bias.grad_data();
  std::vector<double> xhat(d), dxhat(d);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    const double* gr = g.data() + r * d;
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[j] = (in[j] - fwd.mean[r]) * fwd.rstd[r];
      dxhat[j] = gr[j] * gain[j];
      dg[j] += gr[j] * xhat[j];
      db[j] += gr[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat[j];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      dx[r * d + j] +=
          fwd.rstd[r] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
    }
  }
}

Tensor gelu(const Tensor& x, GeluKind kind) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu_value(x[i], kind);
  return out;
}

void gelu_backward(Tensor& x, const Tensor& out, GeluKind kind) {
  if (!out.has_grad()) return;
  const auto g = out.grad();
  double* dx = x.grad_data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    dx[i] += g[i] * gelu_derivative(x[i], kind);
  }
}

CrossEntropyOutput cross_entropy_logits(const Tensor& logits,
                                        std::span<const int> labels,
                                        std::span<const std::uint8_t> mask) {
  const std::size_t t = logits.rows();
  const std::size_t v = logits.cols();
  require(labels.size() == t && mask.size() == t, [&] { return std::string("cross_entropy_logits: labels/mask length does not match " +
              shape_string(logits.shape())); });
  CrossEntropyOutput res;
  res.probs = Tensor(logits.shape());
  double total = 0.0;
  for (std::size_t r = 0; r < t; ++r) {
    if (!mask[r]) continue;
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= v) {
      fail(ErrorKind::kDimension,
           "cross_entropy_logits: label " + std::to_string(labels[r]) +
               " outside [0," + std::to_string(v) + ")");
    }
    const auto z = logits.row(r);
    auto p = res.probs.row(r);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      p[j] = std::exp(z[j] - mx);
      sum += p[j];
    }
    for (std::size_t j = 0; j < v; ++j) p[j] /= sum;
    total += std::log(sum) + mx - z[labels[r]];
    ++res.count;
  }
  if (res.count == 0) {
    fail(ErrorKind::kContract, "cross_entropy_logits: no supervised positions");
  }
  res.loss = total / static_cast<double>(res.count);
  return res;
}

void cross_entropy_backward(Tensor& logits, std::span<const int> labels,
                            std::span<const std::uint8_t> mask,
                            const CrossEntropyOutput& fwd, double upstream) {
  const std::size_t v = logits.cols();
  double* dz = logits.grad_data();
  const double w = upstream / static_cast<double>(fwd.count);
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (!mask[r]) continue;
    const auto p = fwd.probs.row(r);
    for (std::size_t j = 0; j < v; ++j) dz[r * v + j] += w * p[j];
    dz[r * v + labels[r]] -= w;
  }
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require(a.rows() == b.rows(), [&] { return std::string("concat_cols: row counts differ for " + pair_string(a, b)); });
  Tensor out = Tensor::zeros(a.rows(), a.cols() + b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto o = out.row(r);
    std::copy(a.row(r).begin(), a.row(r).end(), o.begin());
    std::copy(b.row(r).begin(), b.row(r).end(), o.begin() + a.cols());
  }
  return out;
}

void concat_cols_backward(Tensor& a, Tensor& b, const Tensor& out) {
  if (!out.has_grad()) return;
  const auto g = out.grad();
  double* da = a.grad_data();
  double* db = b.grad_data();
  const std::size_t n = out.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t j = 0; j < a.cols(); ++j) da[r * a.cols() + j] += g[r * n + j];
    for (std::size_t j = 0; j < b.cols(); ++j) {
      db[r * b.cols() + j] += g[r * n + a.cols() + j];
    }
  }
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require(count >= 1 && begin + count <= x.cols(), [&] { return std::string("slice_cols: range out of bounds for " + shape_string(x.shape())); });
  Tensor out = Tensor::zeros(x.rows(), count);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    std::copy(in.begin() + begin, in.begin() + begin + count, out.row(r).begin());
  }
  return out;
}

void slice_cols_backward(Tensor& x, std::size_t begin, const Tensor& out) {
  if (!out.has_grad()) return;
  const auto g = out.grad();
  double* dx = x.grad_data();
  const std::size_t n = out.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t j = 0; j < n; ++j) dx[r * x.cols() + begin + j] += g[r * n + j];
  }
}

void assign_cols(Tensor& dst, std::size_t begin, const Tensor& part) {
  require(part.rows() == dst.rows() && begin + part.cols() <= dst.cols(), [&] { return std::string("assign_cols: " + pair_string(part, dst)); });
  for (std::size_t r = 0; r < dst.rows(); ++r) {
    std::copy(part.row(r).begin(), part.row(r).end(), dst.row(r).begin() + begin);
  }
}

Tensor concat_rows(std::span<const Tensor* const> parts) {
  require(!parts.empty(), [&] { return std::string("concat_rows: no parts"); });
  const std::size_t n = parts.front()->cols();
  std::size_t rows = 0;
  for (const Tensor* p : parts) {
    require(p->cols() == n, [&] { return std::string("concat_rows: column counts differ for " +
                                pair_string(*parts.front(), *p)); });
    rows += p->rows();
  }
  Tensor out = Tensor::zeros(rows, n);
  double* o = out.data();
  for (const Tensor* p : parts) o = std::copy(p->data(), p->data() + p->size(), o);
  return out;
}

void concat_rows_backward(std::span<Tensor* const> parts, const Tensor& out) {
  if (!out.has_grad()) return;
  const double* g = out.grad().data();
  for (Tensor* p : parts) {
    double* dp = p->grad_data();
    for (std::size_t i = 0; i < p->size(); ++i) dp[i] += g[i];
    g += p->size();
  }
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require(!ids.empty(), [&] { return std::string("gather_rows: empty id list"); });
  const std::size_t n = table.cols();
  Tensor out = Tensor::zeros(ids.size(), n);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows()) {
      fail(ErrorKind::kDimension, "gather_rows: id " + std::to_string(ids[i]) +
                                      " outside table " +
                                      shape_string(table.shape()));
    }
    const auto src = table.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

void gather_rows_backward(Tensor& table, std::span<const int> ids,
                          const Tensor& out) {
  if (!out.has_grad()) return;
  const auto g = out.grad();
  double* dt = table.grad_data();
  const std::size_t n = table.cols();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    double* dst = dt + static_cast<std::size_t>(ids[i]) * n;
    for (std::size_t j = 0; j < n; ++j) dst[j] += g[i * n + j];
  }
}

}  // namespace evla
