/* Copyright 2026 The PST Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pst {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand extents do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An index fell outside its valid range; carries the offending value.
class IndexError : public Error {
 public:
  IndexError(const std::string& what, std::size_t index)
      : Error(what), index_(index) {}
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

/// A documented precondition or usage contract was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// The autodiff engine was asked to record an operation it cannot
/// differentiate.
class CapabilityError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

/// Stored normalization statistics are invalid (e.g. negative variance).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Two independent counts that must agree did not.
class AccountingError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : Error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Malformed serialized data; carries the byte offset where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class IoError : public Error {
 public:
  IoError(const std::string& what, std::string path)
      : Error(what + ": " + path), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// ---------------------------------------------------------------------------
// Shape
// ---------------------------------------------------------------------------

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Dense row-major tensor. A default-constructed tensor is "unset" (rank 0,
/// no storage); every constructed tensor has rank >= 1 and extents >= 1.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " +
                           std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  /// Builds a rank-2 tensor from nested rows.
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(m * n);
    for (const auto& row : rows) {
      if (row.size() != n) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({m, n}, std::move(data));
  }

  static Tensor vector(std::initializer_list<T> values) {
    return Tensor({values.size()}, std::vector<T>(values));
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  T& at(std::size_t c, std::size_t i, std::size_t j) {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }
  const T& at(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }

  /// Same storage, new extents. Element count must be preserved.
  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  /// Element-wise value equality (so +0 == -0); use bit_equal for bytes.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor rank must be >= 1");
    for (std::size_t e : shape) {
      if (e == 0) {
        throw DimensionError("tensor extents must be >= 1, got " +
                             shape_str(shape));
      }
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

template <class T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                    [](T x, T y) {
                      return std::memcmp(&x, &y, sizeof(T)) == 0;
                    });
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff: shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(),
                     [](T v) { return std::isfinite(v); });
}

// Debug-only guard: ops producing non-finite output from finite input.
template <class T>
inline void debug_check_finite([[maybe_unused]] const Tensor<T>& t,
                               [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  if (!all_finite(t)) {
    throw NumericError(std::string(op) + " produced a non-finite value");
  }
#endif
}

// ---------------------------------------------------------------------------
// FeatureMap / TokenMatrix
// ---------------------------------------------------------------------------

/// One pyramid level: a [C, H, W] tensor.
template <class T>
class FeatureMap {
 public:
  FeatureMap() = default;
  FeatureMap(std::size_t channels, std::size_t height, std::size_t width,
             T fill = T{0})
      : tensor_({channels, height, width}, fill) {}
  explicit FeatureMap(Tensor<T> tensor) : tensor_(std::move(tensor)) {
    if (tensor_.rank() != 3) {
      throw DimensionError("feature map requires rank 3, got " +
                           shape_str(tensor_.shape()));
    }
  }

  std::size_t channels() const { return tensor_.extent(0); }
  std::size_t height() const { return tensor_.extent(1); }
  std::size_t width() const { return tensor_.extent(2); }

  T& at(std::size_t c, std::size_t y, std::size_t x) {
    return tensor_.at(c, y, x);
  }
  const T& at(std::size_t c, std::size_t y, std::size_t x) const {
    return tensor_.at(c, y, x);
  }

  const Tensor<T>& tensor() const& { return tensor_; }
  Tensor<T>& tensor() & { return tensor_; }
  Tensor<T> tensor() && { return std::move(tensor_); }

  friend bool operator==(const FeatureMap& a, const FeatureMap& b) {
    return a.tensor_ == b.tensor_;
  }

 private:
  Tensor<T> tensor_;
};

struct GridDims {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t count() const { return height * width; }
  friend bool operator==(const GridDims&, const GridDims&) = default;
};

/// A [N, d] token matrix. When the tokens came from a spatial grid the
/// originating (H, W) is kept so the flattening can be undone.
template <class T>
class TokenMatrix {
 public:
  TokenMatrix() = default;
  explicit TokenMatrix(Tensor<T> tensor,
                       std::optional<GridDims> grid = std::nullopt)
      : tensor_(std::move(tensor)), grid_(grid) {
    if (tensor_.rank() != 2) {
      throw DimensionError("token matrix requires rank 2, got " +
                           shape_str(tensor_.shape()));
    }
    if (grid_ && grid_->count() != tensor_.extent(0)) {
      throw DimensionError("token count " + std::to_string(tensor_.extent(0)) +
                           " != H*W of provenance " +
                           std::to_string(grid_->count()));
    }
  }

  std::size_t tokens() const { return tensor_.extent(0); }
  std::size_t dim() const { return tensor_.extent(1); }
  const std::optional<GridDims>& grid() const { return grid_; }

  const Tensor<T>& tensor() const& { return tensor_; }
  Tensor<T> tensor() && { return std::move(tensor_); }

 private:
  Tensor<T> tensor_;
  std::optional<GridDims> grid_;
};

}  // namespace pst
