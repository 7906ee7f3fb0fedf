#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "gmln/tensor.hpp"

namespace gmln {

class Tape;

/// A value in a computation. Tracked values carry a handle into the tape that
/// recorded them; untracked values behave as constants.
struct Var {
  Tensor value;
  Tape* tape = nullptr;
  int id = -1;

  const Shape& shape() const { return value.shape(); }
  std::int64_t dim(int axis) const { return value.dim(axis); }
  int rank() const { return value.rank(); }
  DType dtype() const { return value.dtype(); }
  bool tracked() const { return tape != nullptr; }
};

inline Var constant(Tensor value) { return Var{std::move(value), nullptr, -1}; }

/// Receives input gradients from one node's backward function.
class GradSink {
 public:
  bool wants(std::size_t input) const { return inputs_[input] >= 0; }
  void add(std::size_t input, const Tensor& grad);

 private:
  friend class Tape;
  GradSink(Tape& tape, const std::vector<int>& inputs) : tape_(tape), inputs_(inputs) {}
  Tape& tape_;
  const std::vector<int>& inputs_;
};

using BackwardFn = std::function<void(const Tensor& grad_out, GradSink& sink)>;

/// Define-by-run reverse-mode tape. Nodes are appended in execution order, so the
/// node list is topologically sorted. Single writer: one forward/backward owns it.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a differentiable leaf. Repeated calls with the same buffer return the
  /// same handle, so parameters shared across a forward pass accumulate one gradient.
  Var leaf(const Tensor& value);

  /// Records `out = op(inputs)`. Returns an untracked Var when no input is tracked.
  static Var record(std::string_view op, Tensor out, std::initializer_list<Var> inputs,
                    BackwardFn backward);
  static Var record(std::string_view op, Tensor out, const std::vector<Var>& inputs,
                    BackwardFn backward);

  /// Propagates d(loss)/d(node) to every node reachable from `loss`. Releases saved
  /// activations; only leaf gradients survive.
  void backward(const Var& loss);

  /// Gradient of a tracked value (undefined Tensor if it received none).
  const Tensor& grad(const Var& v) const;
  /// Gradient of the leaf registered for `leaf_value`'s buffer.
  Tensor grad_of(const Tensor& leaf_value) const;

  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(int id) const { return nodes_.at(id).op; }
  const std::vector<int>& inputs_of(int id) const { return nodes_.at(id).inputs; }

 private:
  friend class GradSink;
  struct Node {
    std::string op;
    std::vector<int> inputs;
    BackwardFn backward;
    Shape shape;
    bool is_leaf = false;
  };

  int push(Node node, DType dtype);
  void accumulate(int id, const Tensor& grad);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::unordered_map<const void*, int> leaf_by_storage_;
  // Holding leaf buffers keeps their addresses from being recycled while keyed above.
  std::vector<Tensor> leaf_values_;
  std::optional<DType> dtype_;
};

namespace detail {
inline thread_local std::uint64_t* kink_digest = nullptr;
}

/// While alive, piecewise-linear activations fold their active/inactive pattern into a
/// digest. Finite-difference checks compare digests to detect steps across a kink.
class KinkProbe {
 public:
  KinkProbe() : previous_(detail::kink_digest) { detail::kink_digest = &digest_; }
  ~KinkProbe() { detail::kink_digest = previous_; }
  KinkProbe(const KinkProbe&) = delete;
  KinkProbe& operator=(const KinkProbe&) = delete;
  std::uint64_t digest() const { return digest_; }

 private:
  std::uint64_t digest_ = 1469598103934665603ull;
  std::uint64_t* previous_;
};

}  // namespace gmln
