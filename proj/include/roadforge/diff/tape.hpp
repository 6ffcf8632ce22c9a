#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "roadforge/diff/tensor.hpp"

namespace roadforge::diff {

/// Trainable tensor with its gradient accumulator and Adam moments.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor first_moment;
  Tensor second_moment;
  std::int64_t step = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor v);

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const std::vector<int>& shape() const { return value().shape(); }
};

/// Records forward values in creation order, which is a topological order, so
/// backward is a single reverse sweep. A tape is not thread-safe; use one per
/// thread.
class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  /// With record = false no backward closures are kept (inference).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor value);
  Var param(Parameter& p);
  /// Registers an op output. `backward` is dropped when no input needs grad.
  Var push(Tensor value, std::vector<int> inputs, Backward backward);

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  /// Gradient buffer of a node, allocated on first use.
  Tensor& grad(int id);
  const Tensor* grad_if_any(int id) const;

  /// Seeds d(loss)/d(loss) = 1 and sweeps backwards; parameter leaves add
  /// into Parameter::grad, so repeated calls accumulate. Throws NotScalarLoss.
  void backward(Var loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> inputs;
    Backward backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  bool record_;
};

}  // namespace roadforge::diff
