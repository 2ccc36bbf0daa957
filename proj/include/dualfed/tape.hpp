// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <limits>
#include <vector>

#include "dualfed/numerics.hpp"

namespace dualfed {

/// Reverse-mode gradient tape over dense matrices.
///
/// Every operation appends one node holding its value; `backward` walks the
/// nodes in reverse insertion order, which is a reverse topological order
/// because operands always precede their results. Only nodes that depend on a
/// `parameter` leaf carry gradients; constants never do.
///
/// A tape is single-owner and is meant to be built, differentiated once, and
/// discarded.
class Tape {
 public:
  class Var {
   public:
    Var() = default;
    std::size_t id() const { return id_; }
    bool valid() const { return id_ != kInvalid; }

   private:
    friend class Tape;
    static constexpr std::size_t kInvalid = std::numeric_limits<std::size_t>::max();
    explicit Var(std::size_t id) : id_(id) {}
    std::size_t id_ = kInvalid;
  };

  Var constant(Matrix value);
  Var parameter(Matrix value);

  const Matrix& value(Var v) const { return node(v).value; }
  double scalar(Var v) const;
  // Gradient of the last `backward` loss; zeros when no path reached `v`.
  Matrix grad(Var v) const;
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  // ShapeError unless the loss is 1x1, NumericError if it is not finite.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  // Number of nodes whose backward rule ran during the last `backward`.
  std::size_t backward_visits() const { return visits_; }

  // -- primitives --
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var cwise_product(Var a, Var b);
  Var scale(Var a, double s);
  Var add_scalar(Var a, double s);
  // Elementwise product with a constant matrix of the same shape.
  Var cwise_product(Var a, const Matrix& c);
  Var tanh(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var abs(Var a);
  Var clamp(Var a, double lo, double hi);
  Var minimum(Var a, Var b);

  // Each column scaled to unit L2 norm.
  Var normalize_columns(Var a);
  // Column-wise log(softmax(a / tau)).
  Var log_softmax_columns(Var a, double tau);
  // out(j, i) = a(index(j, i), i)
  Var gather(Var a, const Eigen::MatrixXi& index);

  Var sum(Var a);
  Var mean(Var a);
  // r x c -> r x 1
  Var row_sums(Var a);
  // log|a| where mask is set, 0 (and no gradient) elsewhere.
  Var masked_log_abs(Var a, const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>& mask);

 private:
  using Backprop = std::function<void(Tape&, const Matrix& upstream)>;

  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backprop backprop;
  };

  const Node& node(Var v) const;
  Var push(Matrix value, bool requires_grad, Backprop backprop);
  void accumulate(Var target, const Matrix& g);
  bool any_grad(Var a) const { return node(a).requires_grad; }
  bool any_grad(Var a, Var b) const { return node(a).requires_grad || node(b).requires_grad; }

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

}  // namespace dualfed
