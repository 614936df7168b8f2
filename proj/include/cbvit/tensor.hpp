#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <vector>

namespace cbvit {

// Dense row-major n-d array of floating point values. Shape is fixed at
// construction. Gradient tracking lives in graph.hpp; a Tensor by itself is
// just storage plus shape bookkeeping.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), T(0)) {}

  Tensor(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != data_.size())
      throw std::invalid_argument("tensor: shape does not match data size");
  }

  static Tensor full(std::vector<int> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  static Tensor row(std::vector<T> v) {
    const int n = static_cast<int>(v.size());
    return Tensor({n}, std::move(v));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const int r = static_cast<int>(rows.size());
    if (r == 0) throw std::invalid_argument("tensor: empty matrix literal");
    const int c = static_cast<int>(rows.begin()->size());
    std::vector<T> data;
    data.reserve(static_cast<std::size_t>(r) * c);
    for (const auto& row : rows) {
      if (static_cast<int>(row.size()) != c)
        throw std::invalid_argument("tensor: ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int extent(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool is_scalar() const { return data_.size() == 1; }

  // Row/column view with all leading axes flattened: a [B, N, d] tensor is
  // B*N rows of d columns. Every row-wise op in the library uses this view.
  int cols() const { return shape_.empty() ? 0 : shape_.back(); }
  int rows() const {
    return cols() == 0 ? 0 : static_cast<int>(data_.size() / static_cast<std::size_t>(cols()));
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T* row_ptr(int r) { return data_.data() + static_cast<std::size_t>(r) * cols(); }
  const T* row_ptr(int r) const { return data_.data() + static_cast<std::size_t>(r) * cols(); }

  T& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  T at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

 private:
  static std::size_t checked_numel(const std::vector<int>& s) {
    if (s.empty()) return 0;
    std::size_t n = 1;
    for (int e : s) {
      if (e <= 0) throw std::invalid_argument("tensor: extents must be positive");
      n *= static_cast<std::size_t>(e);
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<T> data_;
};

}  // namespace cbvit
