#include "gmln/nn.hpp"

#include <cmath>

#include "gmln/rng.hpp"

namespace gmln {

Tensor ParamRegistry::add(const std::string& name, Tensor value, bool buffer) {
  if (find(name)) throw ContractError("duplicate parameter name: " + name);
  entries_.push_back({name, value, buffer});
  return value;
}

Tensor ParamRegistry::uniform(const std::string& name, Shape shape, double bound) {
  Rng rng(seed_, name);
  return add(name, random_uniform(shape, rng, -bound, bound, dtype_), false);
}

Tensor ParamRegistry::constant(const std::string& name, Shape shape, double value) {
  return add(name, Tensor::full(std::move(shape), value, dtype_), false);
}

Tensor ParamRegistry::buffer(const std::string& name, Shape shape, double value) {
  return add(name, Tensor::full(std::move(shape), value, dtype_), true);
}

std::vector<ParamEntry> ParamRegistry::parameters() const {
  std::vector<ParamEntry> out;
  for (const auto& e : entries_)
    if (!e.buffer) out.push_back(e);
  return out;
}

const ParamEntry* ParamRegistry::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

std::int64_t ParamRegistry::param_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_)
    if (!e.buffer) n += e.value.numel();
  return n;
}

namespace nn {

namespace {
std::optional<Var> maybe(const Context& ctx, const Tensor& t) {
  if (!t.defined()) return std::nullopt;
  return ctx(t);
}
}  // namespace

Conv3d::Conv3d(ParamRegistry& reg, const std::string& name, const ConvSpec& spec, bool bias)
    : spec_(spec) {
  spec.validate(false);
  const double bound = 1.0 / std::sqrt(static_cast<double>(spec.in_channels * spec.kernel_volume()));
  weight = reg.uniform(name + ".weight", spec.conv_weight_shape(), bound);
  if (bias) this->bias = reg.uniform(name + ".bias", {spec.out_channels}, bound);
}

Var Conv3d::operator()(const Context& ctx, const Var& x) const {
  return ops::conv3d(x, ctx(weight), maybe(ctx, bias), spec_);
}

ConvTranspose3d::ConvTranspose3d(ParamRegistry& reg, const std::string& name,
                                 const ConvSpec& spec, bool bias)
    : spec_(spec) {
  spec.validate(true);
  // Each output voxel sums about Cin * prod(k / s) products.
  double taps = spec.in_channels;
  for (int a = 0; a < 3; ++a) taps *= static_cast<double>(spec.kernel[a]) / spec.stride[a];
  const double bound = 1.0 / std::sqrt(std::max(taps, 1.0));
  weight = reg.uniform(name + ".weight", spec.transposed_weight_shape(), bound);
  if (bias) this->bias = reg.uniform(name + ".bias", {spec.out_channels}, bound);
}

Var ConvTranspose3d::operator()(const Context& ctx, const Var& x) const {
  return ops::conv_transpose3d(x, ctx(weight), maybe(ctx, bias), spec_);
}

Linear::Linear(ParamRegistry& reg, const std::string& name, int in_features, int out_features,
               bool bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  weight = reg.uniform(name + ".weight", {out_features, in_features}, bound);
  if (bias) this->bias = reg.uniform(name + ".bias", {out_features}, bound);
}

Var Linear::operator()(const Context& ctx, const Var& x) const {
  return ops::linear(x, ctx(weight), maybe(ctx, bias));
}

GroupNorm::GroupNorm(ParamRegistry& reg, const std::string& name, int channels, int groups)
    : groups_(groups) {
  if (groups < 1 || channels % groups != 0)
    throw SpecError(name + ": " + std::to_string(channels) + " channels not divisible into " +
                    std::to_string(groups) + " groups");
  gamma = reg.constant(name + ".gamma", {channels}, 1.0);
  beta = reg.constant(name + ".beta", {channels}, 0.0);
}

Var GroupNorm::operator()(const Context& ctx, const Var& x) const {
  return ops::group_norm(x, groups_, ctx(gamma), ctx(beta));
}

LayerNorm::LayerNorm(ParamRegistry& reg, const std::string& name, int features) {
  gamma = reg.constant(name + ".gamma", {features}, 1.0);
  beta = reg.constant(name + ".beta", {features}, 0.0);
}

Var LayerNorm::operator()(const Context& ctx, const Var& x) const {
  return ops::layer_norm(x, ctx(gamma), ctx(beta));
}

BatchNorm::BatchNorm(ParamRegistry& reg, const std::string& name, int channels) {
  gamma = reg.constant(name + ".gamma", {channels}, 1.0);
  beta = reg.constant(name + ".beta", {channels}, 0.0);
  state.running_mean = reg.buffer(name + ".running_mean", {channels}, 0.0);
  state.running_var = reg.buffer(name + ".running_var", {channels}, 1.0);
  state.tracked_batches = reg.buffer(name + ".tracked_batches", {1}, 0.0);
}

ops::BatchNormResult BatchNorm::operator()(const Context& ctx, const Var& x) const {
  return ops::batch_norm(x, ctx(gamma), ctx(beta), state, ctx.training);
}

Var to_tokens(const Var& volume) {
  if (volume.rank() != 5) throw ShapeError("to_tokens: expected (B, C, D, H, W), got " + to_string(volume.shape()));
  const auto B = volume.dim(0), C = volume.dim(1);
  const auto N = volume.dim(2) * volume.dim(3) * volume.dim(4);
  return ops::permute(ops::reshape(volume, {B, C, N}), {0, 2, 1});
}

Var to_volume(const Var& tokens, const Dims3& dims) {
  if (tokens.rank() != 3) throw ShapeError("to_volume: expected (B, N, C), got " + to_string(tokens.shape()));
  const auto B = tokens.dim(0), C = tokens.dim(2);
  return ops::reshape(ops::permute(tokens, {0, 2, 1}), {B, C, dims[0], dims[1], dims[2]});
}

}  // namespace nn
}  // namespace gmln
