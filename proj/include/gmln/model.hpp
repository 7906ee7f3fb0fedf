#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gmln/nn.hpp"

namespace gmln {

inline constexpr int kModalities = 4;  // T1, T1ce, T2, FLAIR, in that order
inline constexpr std::array<const char*, kModalities> kModalityNames{"T1", "T1ce", "T2", "FLAIR"};

struct M2aeSpec {
  int in_channels = 1;
  int out_channels = 16;
  int reduce_channels = 0;  // 0: max(out/4, 4)
  int groups = 4;
  int resolved_reduce() const { return reduce_channels > 0 ? reduce_channels : std::max(out_channels / 4, 4); }
};

/// Per-modality multi-scale encoder: four conv+ReLU branches (1x1; 1x1 then 3x3;
/// 1x1 then 5x5; avg-pool then 1x1), concatenated, group-normalized, then a residual
/// 3x3 conv over the activated features added back to the concatenation.
class M2ae {
 public:
  M2ae() = default;
  M2ae(ParamRegistry& reg, const std::string& name, const M2aeSpec& spec);
  Var operator()(const Context& ctx, const Var& x) const;
  /// Output before the residual branch is added (the branch concatenation).
  Var branches(const Context& ctx, const Var& x) const;
  const M2aeSpec& spec() const { return spec_; }

  nn::Conv3d b1, b2_reduce, b2, b3_reduce, b3, b4;
  nn::GroupNorm norm;
  nn::Conv3d residual;

 private:
  M2aeSpec spec_;
};

/// Graph interaction across the four modality feature maps. Each modality is a node;
/// edge weights come from modality-specific relation encoders over pooled pairs.
class G2mcim {
 public:
  G2mcim() = default;
  G2mcim(ParamRegistry& reg, const std::string& name, int channels, double slope = 0.01);

  /// V (B, 4, C) -> R (B, 4, 4, 2C) with R[b, i, j] = V[b, i] ++ V[b, j].
  static Var relation_pairs(const Var& pooled);
  /// R (B, 4, 4, 2C) -> S (B, 4, 4, C), softmax over the sender axis j.
  Var edge_weights(const Context& ctx, const Var& pairs) const;
  /// Z (B, 4, C, D, H, W), S (B, 4, 4, C) -> Y (B, 4, C, D, H, W) with
  /// Y_i = Z_i + sum_j S[:, i, j, :] * Z_j (channel-wise, broadcast over voxels).
  static Var fuse(const Var& stacked, const Var& weights);
  /// Four (B, C, D, H, W) maps -> (B, 4C, D, H, W).
  Var operator()(const Context& ctx, const std::vector<Var>& modalities) const;

  std::array<nn::Linear, kModalities> encode_in, encode_out;
  /// Edge weights from the most recent forward, for inspection.
  mutable Tensor last_weights;

 private:
  int channels_ = 0;
  double slope_ = 0.01;
};

struct StageSpec {
  int in_channels = 64;
  int dim = 32;
  int patch_kernel = 4;
  int patch_stride = 4;
  int patch_padding = 0;
  int heads = 2;
  int blocks = 2;
  int reduction = 4;
  int mlp_hidden = 64;
};

/// Pre-norm block: spatial-reduction self-attention then a LeakyReLU MLP, both residual.
class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(ParamRegistry& reg, const std::string& name, const StageSpec& spec);
  Var operator()(const Context& ctx, const Var& tokens, const Dims3& grid) const;
  /// Attention probabilities (B, heads, N, N') from the most recent forward.
  mutable Tensor last_attention;

  nn::LayerNorm norm1, kv_norm, norm2;
  nn::Linear query, key, value, proj, fc1, fc2;
  nn::Conv3d reduce;  // absent when reduction == 1

 private:
  StageSpec spec_;
};

class TransformerStage {
 public:
  TransformerStage() = default;
  TransformerStage(ParamRegistry& reg, const std::string& name, const StageSpec& spec);
  /// (B, Cin, D, H, W) -> (B, dim, D/s, H/s, W/s).
  Var operator()(const Context& ctx, const Var& x) const;
  const StageSpec& spec() const { return spec_; }

  nn::Conv3d embed;
  nn::LayerNorm embed_norm;
  std::vector<AttentionBlock> blocks;

 private:
  StageSpec spec_;
};

struct VrumSpec {
  int in_channels = 32;
  int out_channels = 16;
  int factor = 2;  // 2 or 4
  int mid_channels() const { return out_channels / 2; }
};

/// Dual-branch upsampler. Branch A interpolates by factor/2, refines with a 3x3 conv and
/// LeakyReLU, then a stride-2 transposed conv. Branch B runs k=3 and k=5 transposed convs
/// at the full factor, fuses them with conv + batch norm + ReLU. A 1x1 conv merges both.
class Vrum {
 public:
  Vrum() = default;
  Vrum(ParamRegistry& reg, const std::string& name, const VrumSpec& spec);
  Var operator()(const Context& ctx, const Var& x) const;
  /// Branch outputs before the final merge, for shape and artifact diagnostics.
  std::pair<Var, Var> branch_outputs(const Context& ctx, const Var& x) const;
  const VrumSpec& spec() const { return spec_; }

  nn::Conv3d refine;
  nn::ConvTranspose3d refine_up;
  nn::ConvTranspose3d small, large;
  nn::Conv3d fuse;
  nn::BatchNorm fuse_norm;
  nn::Conv3d merge;
  mutable bool last_fallback = false;

 private:
  VrumSpec spec_;
};

struct ModelConfig {
  int encoder_channels = 16;  // per modality
  int groups = 4;
  std::array<StageSpec, 3> stages;
  std::array<int, 3> decoder_channels{64, 32, 16};
  int classes = 4;
  bool use_g2mcim = true;
  std::uint64_t seed = 0;
  DType dtype = DType::f32;

  /// Sizes used for all experiments (kept under five million parameters).
  static ModelConfig reference();
  /// Narrow variant for gradient checks and fast tests.
  static ModelConfig tiny();
  /// Required multiple for every spatial input dimension.
  int spatial_multiple() const;
};

class GmlnModel {
 public:
  explicit GmlnModel(const ModelConfig& config);
  GmlnModel(const GmlnModel&) = delete;
  GmlnModel& operator=(const GmlnModel&) = delete;

  /// (B, 4, D, H, W) -> logits (B, classes, D, H, W).
  Var forward(const Context& ctx, const Var& x) const;
  /// Inference without a tape; eval-mode normalization.
  Tensor predict(const Tensor& x) const;
  /// Fused encoder output (B, 4C, D, H, W), for inspection.
  Var encode(const Context& ctx, const Var& x) const;

  ParamRegistry& registry() { return registry_; }
  const ParamRegistry& registry() const { return registry_; }
  std::int64_t param_count() const { return registry_.param_count(); }
  const ModelConfig& config() const { return config_; }
  std::uint32_t version() const { return version_; }
  void set_version(std::uint32_t v) { version_ = v; }
  /// True when the last eval-mode forward hit a batch norm with no recorded statistics.
  bool used_fallback_stats() const { return fallback_; }

  std::array<M2ae, kModalities> encoders;
  G2mcim interaction;
  std::array<TransformerStage, 3> stages;
  std::array<Vrum, 3> decoders;
  std::array<nn::Conv3d, 2> skips;
  nn::Conv3d head;

 private:
  ModelConfig config_;
  ParamRegistry registry_;
  std::uint32_t version_ = 0;
  mutable bool fallback_ = false;
};

}  // namespace gmln
