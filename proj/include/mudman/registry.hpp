#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mudman/matrix.hpp"

namespace mudman {

/// Named weight matrices with a modification stamp per entry. Read access is
/// free; every mutable access takes a fresh stamp.
template <typename T>
class StampedMatrices {
 public:
  void add(std::string name, Matrix<T> value) {
    values_.add(std::move(name), std::move(value));
    stamps_.push_back(next_stamp());
  }

  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  bool contains(const std::string& name) const { return values_.contains(name); }
  std::size_t index_of(const std::string& name) const { return values_.index_of(name); }
  const std::string& name(std::size_t i) const { return values_.entry(i).name; }

  const Matrix<T>& at(std::size_t i) const { return values_.entry(i).value; }
  const Matrix<T>& at(const std::string& name) const { return values_.at(name); }

  Matrix<T>& mutable_at(std::size_t i) {
    stamps_[i] = next_stamp();
    return values_.entry(i).value;
  }
  Matrix<T>& mutable_at(const std::string& name) { return mutable_at(values_.index_of(name)); }

  std::uint64_t stamp(std::size_t i) const { return stamps_[i]; }

  const NamedMatrices<T>& values() const { return values_; }
  std::vector<std::string> names() const { return values_.names(); }
  std::size_t element_count() const { return values_.element_count(); }

  bool all_finite() const {
    for (const auto& e : values_)
      if (!mudman::all_finite(e.value)) return false;
    return true;
  }

  /// Value equality; stamps are ignored.
  bool operator==(const StampedMatrices& o) const { return values_ == o.values_; }

 private:
  NamedMatrices<T> values_;
  std::vector<std::uint64_t> stamps_;
};

template <typename T>
using ParamRegistry = StampedMatrices<T>;

/// Replacement values for a subset of registry entries (adversary weights).
template <typename T>
using WeightOverlay = StampedMatrices<T>;

/// Ordered set of parameter names eligible for unlearning updates.
class InterventionSet {
 public:
  InterventionSet() = default;
  explicit InterventionSet(std::vector<std::string> names) : names_(std::move(names)) {
    for (std::size_t i = 0; i < names_.size(); ++i)
      for (std::size_t j = 0; j < i; ++j)
        MUDMAN_REQUIRE(names_[i] != names_[j], "duplicate intervention parameter: " + names_[i]);
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  bool empty() const { return names_.empty(); }
  bool contains(const std::string& n) const {
    for (const auto& x : names_)
      if (x == n) return true;
    return false;
  }
  bool operator==(const InterventionSet&) const = default;

 private:
  std::vector<std::string> names_;
};

}  // namespace mudman
