// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

#include "dualfed/tape.hpp"

#include <cmath>
#include <string>

namespace dualfed {
namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": operand shapes " + shape_string(a.rows(), a.cols()) +
                     " and " + shape_string(b.rows(), b.cols()) + " differ");
  }
}

}  // namespace

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || v.id_ >= nodes_.size()) throw std::out_of_range("Tape: variable not on tape");
  return nodes_[v.id_];
}

Tape::Var Tape::push(Matrix value, bool requires_grad, Backprop backprop) {
  nodes_.push_back(Node{std::move(value), Matrix(), requires_grad,
                        requires_grad ? std::move(backprop) : Backprop()});
  return Var(nodes_.size() - 1);
}

void Tape::accumulate(Var target, const Matrix& g) {
  Node& n = nodes_[target.id_];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

Tape::Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Tape::Var Tape::parameter(Matrix value) { return push(std::move(value), true, nullptr); }

double Tape::scalar(Var v) const {
  const Matrix& m = value(v);
  if (m.size() != 1) throw ShapeError("Tape::scalar: value is " + shape_string(m.rows(), m.cols()));
  return m(0, 0);
}

Matrix Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  const double l = scalar(loss);
  if (!std::isfinite(l)) throw NumericError("backward: loss is not finite");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  visits_ = 0;
  nodes_[loss.id_].grad = Matrix::Constant(1, 1, 1.0);
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0 || !n.backprop) continue;
    // copy: the rule may append to other nodes' grads but never to its own
    const Matrix upstream = n.grad;
    n.backprop(*this, upstream);
    ++visits_;
  }
}

Tape::Var Tape::matmul(Var a, Var b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  if (va.cols() != vb.rows()) {
    throw ShapeError("matmul: " + shape_string(va.rows(), va.cols()) + " times " +
                     shape_string(vb.rows(), vb.cols()));
  }
  return push(va * vb, any_grad(a, b), [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.requires_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

Tape::Var Tape::transpose(Var a) {
  return push(value(a).transpose(), any_grad(a),
              [a](Tape& t, const Matrix& g) { t.accumulate(a, g.transpose()); });
}

Tape::Var Tape::add(Var a, Var b) {
  require_same_shape(value(a), value(b), "add");
  return push(value(a) + value(b), any_grad(a, b), [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Tape::Var Tape::sub(Var a, Var b) {
  require_same_shape(value(a), value(b), "sub");
  return push(value(a) - value(b), any_grad(a, b), [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Tape::Var Tape::cwise_product(Var a, Var b) {
  require_same_shape(value(a), value(b), "cwise_product");
  return push(value(a).cwiseProduct(value(b)), any_grad(a, b), [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
    if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
  });
}

Tape::Var Tape::cwise_product(Var a, const Matrix& c) {
  require_same_shape(value(a), c, "cwise_product");
  return push(value(a).cwiseProduct(c), any_grad(a),
              [a, c](Tape& t, const Matrix& g) { t.accumulate(a, g.cwiseProduct(c)); });
}

Tape::Var Tape::scale(Var a, double s) {
  return push(value(a) * s, any_grad(a), [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); });
}

Tape::Var Tape::add_scalar(Var a, double s) {
  return push((value(a).array() + s).matrix(), any_grad(a),
              [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

Tape::Var Tape::tanh(Var a) {
  Matrix y = value(a).array().tanh().matrix();
  const std::size_t self = nodes_.size();
  return push(std::move(y), any_grad(a), [a, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.nodes_[self].value;
    t.accumulate(a, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

Tape::Var Tape::exp(Var a) {
  Matrix y = value(a).array().exp().matrix();
  const std::size_t self = nodes_.size();
  return push(std::move(y), any_grad(a), [a, self](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(t.nodes_[self].value));
  });
}

Tape::Var Tape::log(Var a) {
  return push(value(a).array().log().matrix(), any_grad(a), [a](Tape& t, const Matrix& g) {
    t.accumulate(a, (g.array() / t.value(a).array()).matrix());
  });
}

Tape::Var Tape::abs(Var a) {
  return push(value(a).cwiseAbs(), any_grad(a), [a](Tape& t, const Matrix& g) {
    t.accumulate(a, (g.array() * t.value(a).array().sign()).matrix());
  });
}

Tape::Var Tape::clamp(Var a, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lower bound above upper bound");
  return push(value(a).cwiseMax(lo).cwiseMin(hi), any_grad(a),
              [a, lo, hi](Tape& t, const Matrix& g) {
                const auto& x = t.value(a).array();
                t.accumulate(a, ((x >= lo && x <= hi).cast<double>() * g.array()).matrix());
              });
}

Tape::Var Tape::minimum(Var a, Var b) {
  require_same_shape(value(a), value(b), "minimum");
  return push(value(a).cwiseMin(value(b)), any_grad(a, b), [a, b](Tape& t, const Matrix& g) {
    // ties route to the first operand
    const auto pick_a = (t.value(a).array() <= t.value(b).array()).cast<double>();
    t.accumulate(a, (pick_a * g.array()).matrix());
    t.accumulate(b, ((1.0 - pick_a) * g.array()).matrix());
  });
}

Tape::Var Tape::normalize_columns(Var a) {
  Matrix y = dualfed::normalize_columns(value(a));
  const std::size_t self = nodes_.size();
  return push(std::move(y), any_grad(a), [a, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.nodes_[self].value;
    const Matrix& x = t.value(a);
    Matrix dx(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double n = x.col(j).norm();
      dx.col(j) = (g.col(j) - y.col(j) * y.col(j).dot(g.col(j))) / n;
    }
    t.accumulate(a, dx);
  });
}

Tape::Var Tape::log_softmax_columns(Var a, double tau) {
  Matrix y = dualfed::log_softmax_columns(value(a), tau);
  const std::size_t self = nodes_.size();
  return push(std::move(y), any_grad(a), [a, self, tau](Tape& t, const Matrix& g) {
    const Matrix p = t.nodes_[self].value.array().exp().matrix();
    Matrix dx = g;
    for (Eigen::Index j = 0; j < g.cols(); ++j) dx.col(j) -= p.col(j) * g.col(j).sum();
    t.accumulate(a, dx / tau);
  });
}

Tape::Var Tape::gather(Var a, const Eigen::MatrixXi& index) {
  const Matrix& x = value(a);
  if (index.cols() != x.cols()) {
    throw ShapeError("gather: index has " + std::to_string(index.cols()) + " columns, value has " +
                     std::to_string(x.cols()));
  }
  Matrix y(index.rows(), index.cols());
  for (Eigen::Index i = 0; i < index.cols(); ++i) {
    for (Eigen::Index j = 0; j < index.rows(); ++j) {
      const int r = index(j, i);
      if (r < 0 || r >= x.rows()) throw ShapeError("gather: row index out of range");
      y(j, i) = x(r, i);
    }
  }
  return push(std::move(y), any_grad(a), [a, index](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    Matrix dx = Matrix::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < index.cols(); ++i) {
      for (Eigen::Index j = 0; j < index.rows(); ++j) dx(index(j, i), i) += g(j, i);
    }
    t.accumulate(a, dx);
  });
}

Tape::Var Tape::sum(Var a) {
  return push(Matrix::Constant(1, 1, value(a).sum()), any_grad(a), [a](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    t.accumulate(a, Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

Tape::Var Tape::mean(Var a) {
  const Matrix& x = value(a);
  if (x.size() == 0) throw ShapeError("mean: empty operand");
  const double n = static_cast<double>(x.size());
  return push(Matrix::Constant(1, 1, x.sum() / n), any_grad(a), [a, n](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    t.accumulate(a, Matrix::Constant(x.rows(), x.cols(), g(0, 0) / n));
  });
}

Tape::Var Tape::row_sums(Var a) {
  return push(value(a).rowwise().sum(), any_grad(a), [a](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    t.accumulate(a, g.replicate(1, x.cols()));
  });
}

Tape::Var Tape::masked_log_abs(Var a,
                               const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>& mask) {
  const Matrix& x = value(a);
  if (mask.rows() != x.rows() || mask.cols() != x.cols()) {
    throw ShapeError("masked_log_abs: mask shape differs from operand");
  }
  Matrix y = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (mask(i)) y(i) = std::log(std::abs(x(i)));
  }
  return push(std::move(y), any_grad(a), [a, mask](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    Matrix dx = Matrix::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if (mask(i)) dx(i) = g(i) / x(i);
    }
    t.accumulate(a, dx);
  });
}

}  // namespace dualfed
