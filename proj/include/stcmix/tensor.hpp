// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace stcmix {

class Rng;

using Shape = std::vector<size_t>;

/// Dense row-major double tensor. Values are owned, slices copy; there is no
/// view aliasing anywhere in this codebase.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Shape shape); // zero-filled
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor from(std::initializer_list<double> values); // 1-D, mostly for tests
  static Tensor randn(Shape shape, Rng& rng);
  static Tensor uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0);

  const Shape& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t dim(size_t i) const;
  size_t size() const { return data_.size(); }
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_str() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }

  size_t offset(std::span<const size_t> index) const;
  double& at(std::initializer_list<size_t> index);
  double at(std::initializer_list<size_t> index) const;

  Tensor reshape(Shape new_shape) const;

  Tensor& add_(const Tensor& other);
  Tensor& sub_(const Tensor& other);
  Tensor& mul_(const Tensor& other); // elementwise
  Tensor& scale_(double factor);
  Tensor add(const Tensor& other) const;
  Tensor mul(const Tensor& other) const;
  Tensor scaled(double factor) const;
  void fill(double value);

  double sum() const;
  double mean() const;
  bool all_finite() const;
  bool bitwise_equal(const Tensor& other) const;

private:
  Shape shape_;
  std::vector<double> data_;
};

/// (M,K) x (K,N) -> (M,N).
Tensor matmul(const Tensor& a, const Tensor& b);

/// Copies an axis-aligned box of `extents` from src@src_lo into dst@dst_lo.
/// Ranks must match; boxes must fit inside both tensors.
void copy_region(Tensor& dst, std::span<const size_t> dst_lo, const Tensor& src,
                 std::span<const size_t> src_lo, std::span<const size_t> extents);

Tensor slice_region(const Tensor& src, std::span<const size_t> lo,
                    std::span<const size_t> extents);

/// Scales each row of a (D,) or (B,D) tensor to unit Euclidean norm.
/// A zero row is a degenerate input and throws std::domain_error.
Tensor l2_normalize(const Tensor& rows);

struct CrossEntropyResult {
  double loss = 0.0;         // mean over rows of -log softmax[target]
  Tensor grad;               // (softmax - onehot) / B
  double accuracy = 0.0;     // fraction of rows with argmax == target
};

CrossEntropyResult softmax_cross_entropy(const Tensor& logits,
                                         std::span<const size_t> targets);

// Binary blob format: magic "NDT1", u32 rank, u32 extents[rank], f64 payload,
// all little-endian.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

} // namespace stcmix
