#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gmln/autograd.hpp"
#include "gmln/kernels.hpp"
#include "gmln/ops.hpp"

namespace gmln {

struct ParamEntry {
  std::string name;
  Tensor value;
  bool buffer = false;  // persisted but not trained (e.g. batch-norm running stats)
};

/// Ordered registry of named parameters and buffers. Each parameter draws its initial
/// values from a stream derived from (seed, name), so models that differ only in
/// optional submodules still share the values of every common parameter.
class ParamRegistry {
 public:
  ParamRegistry(DType dtype, std::uint64_t seed) : dtype_(dtype), seed_(seed) {}

  /// Uniform in [-bound, bound).
  Tensor uniform(const std::string& name, Shape shape, double bound);
  Tensor constant(const std::string& name, Shape shape, double value);
  Tensor buffer(const std::string& name, Shape shape, double value);

  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<ParamEntry> parameters() const;
  const ParamEntry* find(const std::string& name) const;
  /// Scalar count over trainable parameters.
  std::int64_t param_count() const;
  DType dtype() const { return dtype_; }

 private:
  Tensor add(const std::string& name, Tensor value, bool buffer);
  DType dtype_;
  std::uint64_t seed_;
  std::vector<ParamEntry> entries_;
};

/// Per-forward state: the tape to record on (null for inference) and the mode.
struct Context {
  Tape* tape = nullptr;
  bool training = false;
  Var operator()(const Tensor& param) const { return tape ? tape->leaf(param) : constant(param); }
};

namespace nn {

class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(ParamRegistry& reg, const std::string& name, const ConvSpec& spec, bool bias = true);
  Var operator()(const Context& ctx, const Var& x) const;
  const ConvSpec& spec() const { return spec_; }
  Tensor weight, bias;

 private:
  ConvSpec spec_;
};

class ConvTranspose3d {
 public:
  ConvTranspose3d() = default;
  ConvTranspose3d(ParamRegistry& reg, const std::string& name, const ConvSpec& spec,
                  bool bias = true);
  Var operator()(const Context& ctx, const Var& x) const;
  const ConvSpec& spec() const { return spec_; }
  Tensor weight, bias;

 private:
  ConvSpec spec_;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& name, int in_features, int out_features,
         bool bias = true);
  Var operator()(const Context& ctx, const Var& x) const;
  Tensor weight, bias;
};

class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(ParamRegistry& reg, const std::string& name, int channels, int groups);
  Var operator()(const Context& ctx, const Var& x) const;
  Tensor gamma, beta;

 private:
  int groups_ = 1;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamRegistry& reg, const std::string& name, int features);
  Var operator()(const Context& ctx, const Var& x) const;
  Tensor gamma, beta;
};

class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(ParamRegistry& reg, const std::string& name, int channels);
  /// Train mode updates the running statistics held in the registry.
  ops::BatchNormResult operator()(const Context& ctx, const Var& x) const;
  Tensor gamma, beta;
  mutable ops::BatchNormState state;
};

/// Tokens (B, N, C) <-> volume (B, C, d, h, w).
Var to_tokens(const Var& volume);
Var to_volume(const Var& tokens, const Dims3& dims);

}  // namespace nn
}  // namespace gmln
