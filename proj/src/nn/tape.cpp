#include "mixar/nn/tape.hpp"

namespace mixar::nn {

Index count_scalars(const NamedParameters& params, bool trainable_only) {
  Index total = 0;
  for (const auto& [name, p] : params) {
    if (!trainable_only || p->trainable) total += p->size();
  }
  return total;
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(Parameter& p) {
  const bool needs = grad_enabled_ && p.trainable;
  nodes_.push_back(Node{p.value, {}, needs, {}, needs ? &p : nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, BackwardFn backward) {
  bool needs = false;
  if (grad_enabled_) {
    for (const Var& p : parents) needs = needs || (p.valid() && needs_grad(p));
  }
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}, nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Matrix value, const std::vector<Var>& parents, BackwardFn backward) {
  bool needs = false;
  if (grad_enabled_) {
    for (const Var& p : parents) needs = needs || (p.valid() && needs_grad(p));
  }
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}, nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Matrix& Tape::grad(Var v) {
  Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  require(loss.rows() == 1 && loss.cols() == 1, "backward: loss must be a scalar");
  if (!needs_grad(loss)) return;
  grad(loss)(0, 0) += 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(n.grad);
    if (n.param != nullptr) {
      if (n.param->grad.size() == 0) n.param->zero_grad();
      n.param->grad += n.grad;
    }
  }
}

std::size_t Tape::bytes() const {
  std::size_t total = 0;
  for (const auto& n : nodes_) total += static_cast<std::size_t>(n.value.size() + n.grad.size()) * sizeof(double);
  return total;
}

}  // namespace mixar::nn
