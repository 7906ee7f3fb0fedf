#include "gmln/autograd.hpp"

#include <algorithm>

namespace gmln {

namespace {

Tensor sum_tensors(const Tensor& a, const Tensor& b) {
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>(T) {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  });
  return out;
}

}  // namespace

void GradSink::add(std::size_t input, const Tensor& grad) {
  const int id = inputs_.at(input);
  if (id < 0) return;
  tape_.accumulate(id, grad);
}

int Tape::push(Node node, DType dtype) {
  if (dtype_ && *dtype_ != dtype)
    throw ContractError("tape holds " + std::string(dtype_name(*dtype_)) +
                        " values; got " + std::string(dtype_name(dtype)));
  dtype_ = dtype;
  nodes_.push_back(std::move(node));
  grads_.emplace_back();
  return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::leaf(const Tensor& value) {
  if (!value.defined()) throw ContractError("leaf from undefined tensor");
  if (auto it = leaf_by_storage_.find(value.storage_id()); it != leaf_by_storage_.end()) {
    if (nodes_[it->second].shape != value.shape())
      throw ContractError("leaf re-registered with a different shape");
    if (value.dtype() != *dtype_) throw ContractError("leaf re-registered with a different dtype");
    return Var{value, this, it->second};
  }
  Node n;
  n.op = "leaf";
  n.shape = value.shape();
  n.is_leaf = true;
  const int id = push(std::move(n), value.dtype());
  leaf_by_storage_.emplace(value.storage_id(), id);
  leaf_values_.push_back(value);
  return Var{value, this, id};
}

Var Tape::record(std::string_view op, Tensor out, std::initializer_list<Var> inputs,
                 BackwardFn backward) {
  return record(op, std::move(out), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(std::string_view op, Tensor out, const std::vector<Var>& inputs,
                 BackwardFn backward) {
  Tape* tape = nullptr;
  for (const auto& in : inputs) {
    if (!in.tracked()) continue;
    if (tape && tape != in.tape)
      throw ContractError(std::string(op) + ": inputs recorded on different tapes");
    tape = in.tape;
  }
  if (!tape) return constant(std::move(out));
  Node n;
  n.op = std::string(op);
  n.inputs.reserve(inputs.size());
  for (const auto& in : inputs) n.inputs.push_back(in.tracked() ? in.id : -1);
  n.backward = std::move(backward);
  n.shape = out.shape();
  const int id = tape->push(std::move(n), out.dtype());
  return Var{std::move(out), tape, id};
}

void Tape::accumulate(int id, const Tensor& grad) {
  const auto& node = nodes_.at(id);
  if (grad.shape() != node.shape)
    throw ContractError(node.op + ": gradient shape " + to_string(grad.shape()) +
                        " does not match value shape " + to_string(node.shape));
  auto& slot = grads_[id];
  // Stored gradients are never mutated in place: a backward function may hand the
  // same tensor to several inputs.
  slot = slot.defined() ? sum_tensors(slot, grad) : grad;
}

void Tape::backward(const Var& loss) {
  if (loss.tape != this) throw ContractError("backward: loss is not recorded on this tape");
  if (loss.value.numel() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  grads_[loss.id] = Tensor::full(loss.shape(), 1.0, loss.dtype());
  for (int id = loss.id; id >= 0; --id) {
    auto& node = nodes_[id];
    if (node.is_leaf) continue;
    if (grads_[id].defined() && node.backward) {
      GradSink sink(*this, node.inputs);
      node.backward(grads_[id], sink);
    }
    node.backward = nullptr;
    grads_[id] = Tensor();
  }
}

const Tensor& Tape::grad(const Var& v) const {
  static const Tensor empty;
  if (v.tape != this || v.id < 0) return empty;
  return grads_.at(v.id);
}

Tensor Tape::grad_of(const Tensor& leaf_value) const {
  auto it = leaf_by_storage_.find(leaf_value.storage_id());
  if (it == leaf_by_storage_.end()) return Tensor();
  return grads_[it->second];
}

}  // namespace gmln
