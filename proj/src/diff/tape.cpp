#include "roadforge/diff/tape.hpp"

#include "roadforge/common/error.hpp"

namespace roadforge::diff {

Parameter::Parameter(std::string n, Tensor v)
    : name(std::move(n)),
      value(std::move(v)),
      grad(Tensor::zeros_like(value)),
      first_moment(Tensor::zeros_like(value)),
      second_moment(Tensor::zeros_like(value)) {}

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) {
  nodes_.push_back({std::move(value), {}, {}, {}, nullptr, false});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Parameter& p) {
  nodes_.push_back({p.value, {}, {}, {}, &p, record_});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::push(Tensor value, std::vector<int> inputs, Backward backward) {
  bool needs = false;
  if (record_) {
    for (int i : inputs) needs = needs || nodes_[static_cast<std::size_t>(i)].needs_grad;
  }
  Node node{std::move(value), {}, {}, {}, nullptr, needs};
  if (needs) {
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) n.grad = Tensor::zeros_like(n.value);
  return n.grad;
}

const Tensor* Tape::grad_if_any(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.grad.empty() && !n.value.empty() ? nullptr : &n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) fail(ErrorCode::InvalidArgument, "loss belongs to another tape");
  if (value(loss.id).size() != 1) {
    fail(ErrorCode::NotScalarLoss, "loss has shape " + shape_string(value(loss.id).shape()));
  }
  if (!nodes_[static_cast<std::size_t>(loss.id)].needs_grad) return;
  for (auto& n : nodes_) n.grad = Tensor();
  grad(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param) n.param->grad.accumulate(n.grad);
  }
}

}  // namespace roadforge::diff
