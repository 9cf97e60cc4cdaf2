#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tavlo/error.hpp"

namespace tavlo {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// Cache-line aligned storage. Eigen's vectorized reductions peel leading
// elements up to the first aligned address, so fixing the base alignment
// keeps summation order, and therefore results, independent of the heap.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <class S>
using Storage = std::vector<S, AlignedAllocator<S>>;

// Dense row-major n-d array with value semantics.
template <class S>
class Tensor {
 public:
  using value_type = S;

  Tensor() = default;
  explicit Tensor(Shape shape, S fill = S(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, Storage<S> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_size();
  }
  Tensor(Shape shape, const std::vector<S>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_size();
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::span<S> span() { return data_; }
  std::span<const S> span() const { return data_; }
  Storage<S>& vec() { return data_; }
  const Storage<S>& vec() const { return data_; }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    std::size_t off = 0, k = 0;
    for (std::size_t i : idx) off = off * shape_[k++] + i;
    return off;
  }
  S& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const S& at(std::initializer_list<std::size_t> idx) const {
    return data_[offset(idx)];
  }

  // Same storage, new shape; element count must agree.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != size())
      throw InvalidInput("cannot reshape " + shape_str(shape_) + " to " +
                         shape_str(s));
    return Tensor(std::move(s), data_);
  }
  void reshape_inplace(Shape s) {
    if (shape_numel(s) != size())
      throw InvalidInput("cannot reshape " + shape_str(shape_) + " to " +
                         shape_str(s));
    shape_ = std::move(s);
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](S v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_size() const {
    if (data_.size() != shape_numel(shape_))
      throw InvalidInput("tensor data size " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
  }

  Shape shape_;
  Storage<S> data_;
};

template <class S>
S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw InvalidInput("shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  S m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, static_cast<S>(std::abs(a[i] - b[i])));
  return m;
}

}  // namespace tavlo
