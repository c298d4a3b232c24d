#pragma once

#include "mixar/common.hpp"

#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace mixar::nn {

/// A named trainable (or frozen) array. Gradients accumulate into `grad`
/// across backward passes until zeroed.
struct Parameter {
  Matrix value;
  Matrix grad;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(Matrix v) : value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

using NamedParameters = std::vector<std::pair<std::string, Parameter*>>;

Index count_scalars(const NamedParameters& params, bool trainable_only = true);

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode recording of a computation over dense matrices.
///
/// Nodes are stored in a deque so references to values stay valid while the
/// graph grows. A tape is single-use: build, call backward() once, discard.
class Tape {
 public:
  using BackwardFn = std::function<void(const Matrix& grad_out)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Matrix value);
  Var param(Parameter& p);

  /// Record the output of an op. `backward` is dropped when no parent needs
  /// a gradient.
  Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn backward);
  Var record(Matrix value, const std::vector<Var>& parents, BackwardFn backward);

  const Matrix& value(Var v) const { return nodes_[v.id()].value; }
  bool needs_grad(Var v) const { return nodes_[v.id()].needs_grad; }

  /// Gradient buffer for `v`, zero-initialized on first access.
  Matrix& grad(Var v);

  /// Backpropagate from a 1x1 node; parameter gradients are accumulated.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  /// Bytes held by recorded values and gradient buffers.
  std::size_t bytes() const;

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  bool grad_enabled_;
  std::deque<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(*this); }

}  // namespace mixar::nn
