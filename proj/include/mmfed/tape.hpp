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

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mmfed/tensor.hpp"

namespace mmfed::ad {

using NodeId = std::size_t;

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

/// Append-only record of a forward computation. Node ids are assigned in
/// creation order, so inputs always precede outputs and a single descending
/// sweep is a valid reverse topological order.
///
/// A tape is a single-threaded unit of work; independent tapes share nothing.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, NodeId)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), requires_grad, {}});
    return Var{this, nodes_.size() - 1};
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an operator output. The backward closure is dropped when no
  /// input requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& in : inputs) {
      if (in.tape != this) throw std::logic_error("operand recorded on a different tape");
      needs = needs || nodes_[in.id].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), needs, needs ? std::move(fn) : BackwardFn{}});
    return Var{this, nodes_.size() - 1};
  }
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& in : inputs) {
      if (in.tape != this) throw std::logic_error("operand recorded on a different tape");
      needs = needs || nodes_[in.id].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), needs, needs ? std::move(fn) : BackwardFn{}});
    return Var{this, nodes_.size() - 1};
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, zero-allocated on first touch.
  Tensor& grad_slot(NodeId id) {
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    Tensor& g = grads_[id];
    if (g.shape() != nodes_[id].value.shape() || (g.empty() && !nodes_[id].value.empty())) {
      g = Tensor(nodes_[id].value.shape(), 0.0);
    }
    return g;
  }
  bool has_grad(NodeId id) const { return touched(id); }
  /// Accumulated gradient, or zeros for nodes the loss does not reach.
  Tensor grad(Var v) const {
    if (has_grad(v.id)) return grads_[v.id];
    return Tensor(nodes_.at(v.id).value.shape(), 0.0);
  }
  /// Gradient of `v` without a copy; only valid when has_grad(v.id).
  const Tensor& grad_ref(Var v) const { return grads_.at(v.id); }

  /// Reverse sweep from a scalar loss. Each node is visited at most once, in
  /// strictly descending id order.
  void backward(Var loss) {
    if (loss.tape != this) throw std::logic_error("loss belongs to a different tape");
    if (nodes_[loss.id].value.rank() != 0) {
      throw ShapeError("backward() needs a scalar loss, got shape " +
                       shape_str(nodes_[loss.id].value.shape()));
    }
    grads_.assign(nodes_.size(), Tensor{});
    touched_.assign(nodes_.size(), false);
    grad_slot(loss.id)[0] = 1.0;
    touched_[loss.id] = true;
    for (NodeId id = loss.id + 1; id-- > 0;) {
      const Node& n = nodes_[id];
      if (!touched_[id] || !n.requires_grad || !n.backward) continue;
      n.backward(*this, id);
    }
  }

  /// Adds `g` into the gradient of `target` (used by backward closures).
  void accumulate(Var target, std::span<const double> g) {
    if (!nodes_[target.id].requires_grad) return;
    Tensor& slot = grad_slot(target.id);
    mark(target.id);
    double* p = slot.ptr();
    for (std::size_t i = 0; i < g.size(); ++i) p[i] += g[i];
  }
  /// Mutable gradient of `target` for closures that scatter in place.
  Tensor* accumulator(Var target) {
    if (!nodes_[target.id].requires_grad) return nullptr;
    mark(target.id);
    return &grad_slot(target.id);
  }

  // Branch bookkeeping for finite-difference harnesses: piecewise operators
  // fold their active pattern into this hash when tracking is on.
  void set_branch_tracking(bool on) { track_branches_ = on; }
  bool branch_tracking() const { return track_branches_; }
  void fold_branch(std::uint64_t v) {
    branch_hash_ ^= v + 0x9e3779b97f4a7c15ULL + (branch_hash_ << 6) + (branch_hash_ >> 2);
  }
  std::uint64_t branch_signature() const { return branch_hash_; }

  // Operation counters used for complexity accounting.
  void add_flops(std::uint64_t mac2, std::uint64_t bias_adds = 0) {
    flops_ += mac2;
    bias_adds_ += bias_adds;
  }
  std::uint64_t flops() const { return flops_; }
  std::uint64_t bias_adds() const { return bias_adds_; }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
  };

  void mark(NodeId id) {
    if (touched_.size() < nodes_.size()) touched_.resize(nodes_.size(), false);
    touched_[id] = true;
  }
  bool touched(NodeId id) const { return id < touched_.size() && touched_[id]; }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<bool> touched_;
  bool track_branches_ = false;
  std::uint64_t branch_hash_ = 0;
  std::uint64_t flops_ = 0;
  std::uint64_t bias_adds_ = 0;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

/// Runs the reverse sweep and returns the gradient of every gradient-requiring
/// leaf in `params`; leaves the loss does not reach get zeros.
inline std::vector<Tensor> backward(Tape& tape, Var loss, const std::vector<Var>& params) {
  tape.backward(loss);
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Var& p : params) out.push_back(tape.grad(p));
  return out;
}

}  // namespace mmfed::ad
