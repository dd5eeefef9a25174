#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mudman/common.hpp"

namespace mudman {

/// Dense row-major matrix. Storage is counted by TrackingAllocator.
template <typename T>
class Matrix {
 public:
  using value_type = T;
  using Storage = std::vector<T, TrackingAllocator<T>>;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return {data_.data(), data_.size()}; }
  std::span<const T> span() const { return {data_.data(), data_.size()}; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* row(std::size_t r) { return data_.data() + r * cols_; }
  const T* row(std::size_t r) const { return data_.data() + r * cols_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Matrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Storage data_;
};

template <typename T>
double squared_norm(const Matrix<T>& m) {
  double s = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) s += static_cast<double>(m[i]) * m[i];
  return s;
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  for (std::size_t i = 0; i < m.size(); ++i)
    if (!std::isfinite(m[i])) return false;
  return true;
}

// ----------------------------------------------------------------------------
// Kernels. Shapes are the caller's responsibility; loops are ordered so the
// innermost index walks contiguous memory.
// ----------------------------------------------------------------------------

/// out[n, m] = sum_k a[n, k] * b[k, m]
template <typename T>
void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  out = Matrix<T>(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    T* o = out.row(i);
    const T* ar = a.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ar[p];
      const T* br = b.row(p);
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

/// out[n, k] (+)= sum_m a[n, m] * b[k, m]   (a times b transposed)
template <typename T>
void matmul_bt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out, bool accumulate) {
  const std::size_t n = a.rows(), m = a.cols(), k = b.rows();
  if (!accumulate) out = Matrix<T>(n, k);
  // Transposing b keeps the inner loop a contiguous axpy instead of a reduction.
  std::vector<T> bt(m * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < m; ++j) bt[j * k + p] = b(p, j);
  for (std::size_t i = 0; i < n; ++i) {
    const T* ar = a.row(i);
    T* o = out.row(i);
    for (std::size_t j = 0; j < m; ++j) {
      const T av = ar[j];
      const T* br = bt.data() + j * k;
      for (std::size_t p = 0; p < k; ++p) o[p] += av * br[p];
    }
  }
}

/// out[k, m] += sum_n a[n, k] * b[n, m]   (a transposed times b)
template <typename T>
void matmul_at_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const T* ar = a.row(i);
    const T* br = b.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ar[p];
      if (av == T(0)) continue;
      T* o = out.row(p);
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

// ----------------------------------------------------------------------------
// Named matrix collections
// ----------------------------------------------------------------------------

/// Ordered name -> matrix map. Iteration follows insertion order.
template <typename T>
class NamedMatrices {
 public:
  struct Entry {
    std::string name;
    Matrix<T> value;
  };

  void add(std::string name, Matrix<T> value) {
    MUDMAN_REQUIRE(!index_.contains(name), "duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(value)});
  }

  bool contains(const std::string& name) const { return index_.contains(name); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  const Matrix<T>& at(const std::string& name) const { return entries_[index_of(name)].value; }
  Matrix<T>& at(const std::string& name) { return entries_[index_of(name)].value; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("unknown parameter: " + name);
    return it->second;
  }

  const Entry& entry(std::size_t i) const { return entries_[i]; }
  Entry& entry(std::size_t i) { return entries_[i]; }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
  }

  bool same_keys(const NamedMatrices& o) const {
    if (o.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (entries_[i].name != o.entries_[i].name || !entries_[i].value.same_shape(o.entries_[i].value))
        return false;
    return true;
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& e : entries_) s += mudman::squared_norm(e.value);
    return s;
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  void fill(T v) {
    for (auto& e : entries_) e.value.fill(v);
  }

  bool operator==(const NamedMatrices& o) const {
    if (o.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (entries_[i].name != o.entries_[i].name || !(entries_[i].value == o.entries_[i].value))
        return false;
    return true;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Gradients over a subset of registry names (same shapes).
template <typename T>
using GradientSet = NamedMatrices<T>;

}  // namespace mudman
