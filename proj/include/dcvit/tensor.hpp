// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dcvit/error.hpp"

namespace dcvit {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// 64-byte aligned allocator; fixed alignment keeps vectorised kernels on
/// the same code path (and therefore the same rounding) on every run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major tensor handle.
///
/// Copies share storage (like a reference-counted array). Use clone() for an
/// independent deep copy. Storage carries the data buffer, an optional
/// same-sized gradient buffer and the requires_grad flag; the shape lives on
/// the handle so view() can reinterpret a buffer without copying.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : storage_(std::make_shared<Storage>()) {}

  explicit BasicTensor(Shape shape, T fill = T(0))
      : storage_(std::make_shared<Storage>()), shape_(std::move(shape)) {
    check_extents();
    storage_->data.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
  }

  BasicTensor(Shape shape, std::span<const T> values)
      : storage_(std::make_shared<Storage>()), shape_(std::move(shape)) {
    check_extents();
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape_))
      throw DimensionError(detail::concat("tensor of shape ", shape_str(shape_), " given ",
                                          values.size(), " values"));
    storage_->data.assign(values.begin(), values.end());
  }

  BasicTensor(Shape shape, std::initializer_list<T> values)
      : BasicTensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T(0)); }
  static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), T(1)); }
  static BasicTensor scalar(T v) { return BasicTensor(Shape{}, v); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const {
    return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i));
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(storage_->data.size()); }
  bool empty() const { return storage_->data.empty(); }

  /// Extent of the trailing axis; 1 for scalars.
  std::int64_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::int64_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  std::span<T> data() { return {storage_->data.data(), storage_->data.size()}; }
  std::span<const T> data() const { return {storage_->data.data(), storage_->data.size()}; }
  T* ptr() { return storage_->data.data(); }
  const T* ptr() const { return storage_->data.data(); }

  T& operator[](std::int64_t i) { return storage_->data[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return storage_->data[static_cast<std::size_t>(i)]; }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape_));
    return storage_->data[0];
  }

  bool requires_grad() const { return storage_->requires_grad; }
  void set_requires_grad(bool on) { storage_->requires_grad = on; }

  bool has_grad() const { return storage_->has_grad; }
  std::span<T> grad() const { return {storage_->grad.data(), storage_->grad.size()}; }

  /// Allocates a zero gradient buffer if absent. Handles are shallow, so this
  /// is available through const handles (backward closures hold const copies).
  std::span<T> ensure_grad() const {
    if (!storage_->has_grad) {
      storage_->grad.assign(storage_->data.size(), T(0));
      storage_->has_grad = true;
    }
    return grad();
  }
  void zero_grad() {
    if (!storage_->grad.empty()) std::fill(storage_->grad.begin(), storage_->grad.end(), T(0));
  }
  void clear_grad() {
    storage_->grad.clear();
    storage_->grad.shrink_to_fit();
    storage_->has_grad = false;
  }

  /// Same buffer under another shape with equal element count.
  BasicTensor view(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw DimensionError("view " + shape_str(shape) + " of tensor " + shape_str(shape_));
    BasicTensor t(*this);
    t.shape_ = std::move(shape);
    return t;
  }

  /// Deep copy of the data; gradient is not copied and requires_grad is off.
  BasicTensor clone() const {
    return BasicTensor(shape_, std::span<const T>(storage_->data.data(), storage_->data.size()));
  }

  bool shares_storage(const BasicTensor& other) const { return storage_ == other.storage_; }

  template <typename U>
  BasicTensor<U> cast() const {
    BasicTensor<U> out(shape_);
    for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>((*this)[i]);
    return out;
  }

  bool all_finite() const {
    return std::all_of(storage_->data.begin(), storage_->data.end(),
                       [](T v) { return std::isfinite(v); });
  }

  bool bit_equal(const BasicTensor& other) const {
    return shape_ == other.shape_ &&
           std::equal(storage_->data.begin(), storage_->data.end(), other.storage_->data.begin(),
                      other.storage_->data.end(), [](T a, T b) {
                        return std::memcmp(&a, &b, sizeof(T)) == 0;
                      });
  }

 private:
  struct Storage {
    Buffer<T> data;
    Buffer<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
  };

  void check_extents() const {
    for (auto e : shape_)
      if (e < 0) throw DimensionError("negative extent in shape " + shape_str(shape_));
  }

  std::shared_ptr<Storage> storage_;
  Shape shape_;
};

using Tensor = BasicTensor<float>;

}  // namespace dcvit
