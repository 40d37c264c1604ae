// Copyright 2026 The mmfed Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mmfed/tensor.hpp"

namespace mmfed {

/// Ordered (name, shape) partition of a flat parameter sequence.
class ShapeIndex {
 public:
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset = 0;
    std::size_t size = 0;
  };

  ShapeIndex() = default;
  explicit ShapeIndex(const std::vector<std::pair<std::string, Shape>>& layout) {
    for (const auto& [name, shape] : layout) add(name, shape);
  }

  void add(const std::string& name, const Shape& shape) {
    if (by_name_.contains(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    by_name_.emplace(name, entries_.size());
    entries_.push_back(Entry{name, shape, total_, shape_numel(shape)});
    total_ += entries_.back().size;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t total() const { return total_; }
  std::size_t count() const { return entries_.size(); }
  bool contains(const std::string& name) const { return by_name_.contains(name); }
  const Entry& at(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return entries_[it->second];
  }
  std::size_t position(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
  }

  friend bool operator==(const ShapeIndex& a, const ShapeIndex& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      if (a.entries_[i].name != b.entries_[i].name || a.entries_[i].shape != b.entries_[i].shape) return false;
    }
    return true;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> by_name_;
  std::size_t total_ = 0;
};

/// Flat model state exchanged by the federation protocol. Value-semantic;
/// the shape index is shared immutably between copies.
class ParamVector {
 public:
  ParamVector() : index_(std::make_shared<const ShapeIndex>()) {}
  explicit ParamVector(std::shared_ptr<const ShapeIndex> index, double fill = 0.0)
      : index_(std::move(index)), values_(index_->total(), fill) {}
  ParamVector(std::shared_ptr<const ShapeIndex> index, std::vector<double> values)
      : index_(std::move(index)), values_(std::move(values)) {
    if (values_.size() != index_->total()) {
      throw ShapeError("parameter values length " + std::to_string(values_.size()) +
                       " does not match shape index total " + std::to_string(index_->total()));
    }
  }

  /// Convenience for plain vectors: a single entry named "x".
  static ParamVector from_values(std::vector<double> values) {
    auto idx = std::make_shared<ShapeIndex>();
    idx->add("x", Shape{values.size()});
    return ParamVector(std::move(idx), std::move(values));
  }

  const ShapeIndex& index() const { return *index_; }
  const std::shared_ptr<const ShapeIndex>& index_ptr() const { return index_; }
  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<const double> view(const std::string& name) const {
    const auto& e = index_->at(name);
    return std::span<const double>(values_).subspan(e.offset, e.size);
  }
  std::span<double> view(const std::string& name) {
    const auto& e = index_->at(name);
    return std::span<double>(values_).subspan(e.offset, e.size);
  }
  Tensor tensor(std::size_t entry) const {
    const auto& e = index_->entries().at(entry);
    return Tensor(e.shape, std::vector<double>(values_.begin() + static_cast<std::ptrdiff_t>(e.offset),
                                               values_.begin() + static_cast<std::ptrdiff_t>(e.offset + e.size)));
  }

  /// One tensor per index entry, in index order.
  std::vector<Tensor> unflatten() const {
    std::vector<Tensor> out;
    out.reserve(index_->count());
    for (std::size_t i = 0; i < index_->count(); ++i) out.push_back(tensor(i));
    return out;
  }

  static ParamVector flatten(std::shared_ptr<const ShapeIndex> index, const std::vector<Tensor>& tensors) {
    if (tensors.size() != index->count()) {
      throw ShapeError("flatten: expected " + std::to_string(index->count()) + " tensors, got " +
                       std::to_string(tensors.size()));
    }
    std::vector<double> values;
    values.reserve(index->total());
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& e = index->entries()[i];
      if (tensors[i].shape() != e.shape) {
        throw ShapeError("flatten: '" + e.name + "' expects " + shape_str(e.shape) + ", got " +
                         shape_str(tensors[i].shape()));
      }
      values.insert(values.end(), tensors[i].data().begin(), tensors[i].data().end());
    }
    return ParamVector(std::move(index), std::move(values));
  }

  /// Euclidean norm. Falls back to a rescaled sum when the plain sum of
  /// squares overflows or underflows, so large finite vectors have a finite
  /// norm.
  double norm() const {
    double s = 0.0;
    for (double v : values_) s += v * v;
    if (std::isnan(s) || (s >= std::numeric_limits<double>::min() && s < HUGE_VAL)) return std::sqrt(s);
    double m = 0.0;
    for (double v : values_) m = std::max(m, std::abs(v));
    if (m == 0.0 || std::isinf(m)) return m;
    double t = 0.0;
    for (double v : values_) t += (v / m) * (v / m);
    return m * std::sqrt(t);
  }
  bool all_finite() const {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool compatible(const ParamVector& o) const { return index_ == o.index_ || *index_ == *o.index_; }
  void require_compatible(const ParamVector& o, const char* op) const {
    if (!compatible(o)) throw ShapeError(std::string(op) + ": parameter shape indices differ");
  }

  ParamVector& operator+=(const ParamVector& o) {
    require_compatible(o, "ParamVector +=");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
    return *this;
  }
  ParamVector& operator-=(const ParamVector& o) {
    require_compatible(o, "ParamVector -=");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= o.values_[i];
    return *this;
  }
  ParamVector& operator*=(double c) {
    for (double& v : values_) v *= c;
    return *this;
  }
  friend ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
  friend ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
  friend ParamVector operator*(ParamVector a, double c) { return a *= c; }

  ParamVector zeros_like() const { return ParamVector(index_, 0.0); }

  friend bool operator==(const ParamVector& a, const ParamVector& b) {
    return a.compatible(b) && a.values_ == b.values_;
  }

 private:
  std::shared_ptr<const ShapeIndex> index_;
  std::vector<double> values_;
};

}  // namespace mmfed
