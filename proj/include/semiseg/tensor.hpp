#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "semiseg/error.hpp"

namespace semiseg {

/// Storage aligned for Eigen's vector units. Vectorized reductions peel
/// according to the buffer address, so alignment keeps results bit-stable.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense row-major array. Images are rank 3 (C, H, W), batches rank 4
/// (N, C, H, W).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape, T fill = T{}) : shape_(std::move(shape)) {
    for (int d : shape_) {
      if (d < 0) throw ArgumentError("Tensor: negative dimension");
    }
    data_.assign(count(shape_), fill);
  }
  Tensor(std::vector<int> shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (data_.size() != count(shape_)) throw ArgumentError("Tensor: data size does not match shape");
  }

  [[nodiscard]] const std::vector<int>& shape() const noexcept { return shape_; }
  [[nodiscard]] int rank() const noexcept { return static_cast<int>(shape_.size()); }
  [[nodiscard]] int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  [[nodiscard]] T* data() noexcept { return data_.data(); }
  [[nodiscard]] const T* data() const noexcept { return data_.data(); }
  [[nodiscard]] std::span<T> values() noexcept { return data_; }
  [[nodiscard]] std::span<const T> values() const noexcept { return data_; }
  [[nodiscard]] const AlignedVector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // rank-3 access
  T& operator()(int c, int y, int x) noexcept { return data_[offset3(c, y, x)]; }
  const T& operator()(int c, int y, int x) const noexcept { return data_[offset3(c, y, x)]; }
  // rank-4 access
  T& operator()(int n, int c, int y, int x) noexcept { return data_[offset4(n, c, y, x)]; }
  const T& operator()(int n, int c, int y, int x) const noexcept { return data_[offset4(n, c, y, x)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  [[nodiscard]] bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

  template <typename U>
  [[nodiscard]] Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  /// Plane (last two dims) of item `n` channel `c` for rank-4, or channel `n`
  /// for rank-3 when c is omitted.
  [[nodiscard]] std::size_t plane_size() const noexcept {
    return rank() >= 2 ? static_cast<std::size_t>(shape_[shape_.size() - 1]) * shape_[shape_.size() - 2] : size();
  }

  Tensor& operator+=(const Tensor& o) {
    check_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    check_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  static std::size_t count(const std::vector<int>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }
  [[nodiscard]] std::size_t offset3(int c, int y, int x) const noexcept {
    return (static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x;
  }
  [[nodiscard]] std::size_t offset4(int n, int c, int y, int x) const noexcept {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  }
  void check_same(const Tensor& o, const char* op) const {
    if (!same_shape(o)) throw ArgumentError(std::string("Tensor ") + op + ": shape mismatch");
  }

  std::vector<int> shape_;
  AlignedVector<T> data_;
};

inline constexpr int kDefaultIgnoreIndex = 255;

/// Normalized image, shape (C, H, W).
using ImageTensor = Tensor<float>;

/// Per-pixel class indices with a reserved ignore value.
struct LabelMask {
  int height = 0;
  int width = 0;
  std::vector<std::int32_t> data;
  std::int32_t ignore_index = kDefaultIgnoreIndex;

  LabelMask() = default;
  LabelMask(int h, int w, std::int32_t fill = 0, std::int32_t ignore = kDefaultIgnoreIndex)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill), ignore_index(ignore) {}

  std::int32_t& at(int y, int x) noexcept { return data[static_cast<std::size_t>(y) * width + x]; }
  [[nodiscard]] std::int32_t at(int y, int x) const noexcept { return data[static_cast<std::size_t>(y) * width + x]; }
  [[nodiscard]] std::size_t size() const noexcept { return data.size(); }

  friend bool operator==(const LabelMask&, const LabelMask&) = default;
};

/// Stacks equally shaped rank-3 tensors into one rank-4 batch.
template <typename T, typename U = T>
Tensor<T> stack(std::span<const Tensor<U>> items) {
  if (items.empty()) throw ArgumentError("stack: empty batch");
  const auto& s = items.front().shape();
  if (s.size() != 3) throw ArgumentError("stack: items must be rank 3");
  Tensor<T> out({static_cast<int>(items.size()), s[0], s[1], s[2]});
  std::size_t off = 0;
  for (const auto& it : items) {
    if (it.shape() != s) throw ArgumentError("stack: items differ in shape");
    for (std::size_t i = 0; i < it.size(); ++i) out[off + i] = static_cast<T>(it[i]);
    off += it.size();
  }
  return out;
}

/// Item `n` of a rank-4 batch as a rank-3 tensor.
template <typename T>
Tensor<T> unstack_item(const Tensor<T>& batch, int n) {
  if (batch.rank() != 4 || n < 0 || n >= batch.dim(0)) throw ArgumentError("unstack_item: bad index");
  const std::size_t per = batch.size() / static_cast<std::size_t>(batch.dim(0));
  std::vector<T> d(batch.data() + per * n, batch.data() + per * (n + 1));
  return Tensor<T>({batch.dim(1), batch.dim(2), batch.dim(3)}, std::move(d));
}

}  // namespace semiseg
