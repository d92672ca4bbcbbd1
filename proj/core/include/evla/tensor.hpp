// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace evla {

// Byte accounting for every buffer owned by a Tensor. Counters are
// thread-local, so a measurement only sees allocations made by the
// measuring thread.
namespace alloc_stats {

std::size_t current_bytes();
std::size_t peak_bytes();
// Sets the peak watermark to the current live byte count.
void reset_peak();

void record_alloc(std::size_t bytes);
void record_free(std::size_t bytes);

}  // namespace alloc_stats

// Counts multiply-add FLOPs (2*m*k*n per product) executed by the matrix
// product kernels on the calling thread.
namespace flop_counter {

std::uint64_t count();
void reset();
void add(std::uint64_t flops);

}  // namespace flop_counter

template <typename T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    alloc_stats::record_alloc(n * sizeof(T));
    return static_cast<T*>(::operator new(n * sizeof(T)));
  }
  void deallocate(T* p, std::size_t n) noexcept {
    alloc_stats::record_free(n * sizeof(T));
    ::operator delete(p);
  }

  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, TrackingAllocator<double>>;
using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

// Dense row-major array of doubles with an optional gradient buffer of the
// same length. Most code treats tensors as 2-D (rows x cols); a 1-D tensor
// of length n behaves as a single row.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::span<const double> values);

  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return Tensor(Shape{rows, cols});
  }
  static Tensor vector(std::size_t n) { return Tensor(Shape{n}); }
  static Tensor from_rows(
      std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rank() const { return shape_.size(); }
  // Product of all dims but the last.
  std::size_t rows() const;
  // Last dim.
  std::size_t cols() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }
  std::span<double> row(std::size_t r) {
    return std::span<double>(data_).subspan(r * cols(), cols());
  }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }

  bool has_grad() const { return !grad_.empty(); }
  // Allocates a zeroed gradient if none is present.
  void enable_grad();
  void zero_grad();
  void drop_grad() { Buffer().swap(grad_); }
  std::span<double> grad() { return grad_; }
  std::span<const double> grad() const { return grad_; }
  // Gradient buffer, allocated on first use.
  double* grad_data() {
    enable_grad();
    return grad_.data();
  }

  void fill(double value);
  // Throws a dimension error if any element of data (or grad) is NaN/Inf.
  void assert_finite(const std::string& what = "tensor") const;

 private:
  Shape shape_;
  Buffer data_;
  Buffer grad_;
};

}  // namespace evla
