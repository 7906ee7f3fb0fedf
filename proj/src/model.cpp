#include "gmln/model.hpp"

#include <cmath>

namespace gmln {

using ops::concat;
using ops::permute;
using ops::reshape;

// ---- M2AE ----

M2ae::M2ae(ParamRegistry& reg, const std::string& name, const M2aeSpec& spec) : spec_(spec) {
  if (spec.out_channels % 4 != 0)
    throw SpecError(name + ": out_channels " + std::to_string(spec.out_channels) +
                    " must be divisible by 4");
  const int cin = spec.in_channels, quarter = spec.out_channels / 4, cr = spec.resolved_reduce();
  b1 = nn::Conv3d(reg, name + ".b1", ConvSpec::cube(cin, quarter, 1));
  b2_reduce = nn::Conv3d(reg, name + ".b2_reduce", ConvSpec::cube(cin, cr, 1));
  b2 = nn::Conv3d(reg, name + ".b2", ConvSpec::cube(cr, quarter, 3, 1, 1));
  b3_reduce = nn::Conv3d(reg, name + ".b3_reduce", ConvSpec::cube(cin, cr, 1));
  b3 = nn::Conv3d(reg, name + ".b3", ConvSpec::cube(cr, quarter, 5, 1, 2));
  b4 = nn::Conv3d(reg, name + ".b4", ConvSpec::cube(cin, quarter, 1));
  norm = nn::GroupNorm(reg, name + ".norm", spec.out_channels, spec.groups);
  residual = nn::Conv3d(reg, name + ".residual",
                        ConvSpec::cube(spec.out_channels, spec.out_channels, 3, 1, 1));
}

Var M2ae::branches(const Context& ctx, const Var& x) const {
  if (x.rank() != 5) throw ShapeError("m2ae: expected (B, C, D, H, W), got " + to_string(x.shape()));
  for (int a = 2; a < 5; ++a)
    if (x.dim(a) < 5)
      throw ShapeError("m2ae: spatial axis " + std::to_string(a) + " has size " +
                       std::to_string(x.dim(a)) + ", needs at least 5 for the 5x5 branch");
  auto y1 = ops::relu(b1(ctx, x));
  auto y2 = ops::relu(b2(ctx, ops::relu(b2_reduce(ctx, x))));
  auto y3 = ops::relu(b3(ctx, ops::relu(b3_reduce(ctx, x))));
  auto y4 = ops::relu(b4(ctx, ops::avg_pool3d(x, 3, 1, 1)));
  return concat({y1, y2, y3, y4}, 1);
}

Var M2ae::operator()(const Context& ctx, const Var& x) const {
  auto y = branches(ctx, x);
  auto z = residual(ctx, ops::relu(norm(ctx, y)));
  return ops::add(z, y);
}

// ---- G2MCIM ----

G2mcim::G2mcim(ParamRegistry& reg, const std::string& name, int channels, double slope)
    : channels_(channels), slope_(slope) {
  for (int i = 0; i < kModalities; ++i) {
    const std::string n = name + ".relation" + std::to_string(i);
    encode_in[i] = nn::Linear(reg, n + ".in", 2 * channels, channels);
    encode_out[i] = nn::Linear(reg, n + ".out", channels, channels);
  }
}

Var G2mcim::relation_pairs(const Var& v) {
  if (v.rank() != 3 || v.dim(1) != kModalities)
    throw ShapeError("relation_pairs: expected (B, 4, C), got " + to_string(v.shape()));
  const auto B = v.dim(0), C = v.dim(2);
  auto receiver = ops::expand(reshape(v, {B, kModalities, 1, C}), {B, kModalities, kModalities, C});
  auto sender = ops::expand(reshape(v, {B, 1, kModalities, C}), {B, kModalities, kModalities, C});
  return concat({receiver, sender}, 3);
}

Var G2mcim::edge_weights(const Context& ctx, const Var& r) const {
  if (r.rank() != 4 || r.dim(1) != kModalities || r.dim(2) != kModalities || r.dim(3) != 2 * channels_)
    throw ShapeError("edge_weights: expected (B, 4, 4, " + std::to_string(2 * channels_) + "), got " +
                     to_string(r.shape()));
  const auto B = r.dim(0);
  std::vector<Var> rows;
  for (int i = 0; i < kModalities; ++i) {
    auto pairs = reshape(ops::narrow(r, 1, i, 1), {B, kModalities, 2 * channels_});
    auto a = encode_out[i](ctx, ops::leaky_relu(encode_in[i](ctx, pairs), slope_));
    rows.push_back(reshape(ops::softmax(a, 1), {B, 1, kModalities, channels_}));
  }
  return concat(rows, 1);
}

Var G2mcim::fuse(const Var& z, const Var& s) {
  if (z.rank() != 6 || z.dim(1) != kModalities)
    throw ShapeError("fuse: expected (B, 4, C, D, H, W), got " + to_string(z.shape()));
  const auto B = z.dim(0), C = z.dim(2), M = z.dim(3) * z.dim(4) * z.dim(5);
  if (s.shape() != Shape{B, kModalities, kModalities, C})
    throw ShapeError("fuse: weights " + to_string(s.shape()) + " do not match features " +
                     to_string(z.shape()));
  auto f = reshape(z, {B, kModalities, C, M});
  // (B, C, i, j) x (B, C, j, M) -> (B, C, i, M)
  auto u = ops::matmul(permute(s, {0, 3, 1, 2}), permute(f, {0, 2, 1, 3}));
  return reshape(ops::add(f, permute(u, {0, 2, 1, 3})), z.shape());
}

Var G2mcim::operator()(const Context& ctx, const std::vector<Var>& m) const {
  if (m.size() != kModalities) throw ShapeError("g2mcim: expected 4 modality maps");
  for (const auto& v : m)
    if (v.shape() != m[0].shape())
      throw ShapeError("g2mcim: modality map " + to_string(v.shape()) + " differs from " +
                       to_string(m[0].shape()));
  if (m[0].rank() != 5 || m[0].dim(1) != channels_)
    throw ShapeError("g2mcim: expected (B, " + std::to_string(channels_) + ", D, H, W), got " +
                     to_string(m[0].shape()));
  const auto B = m[0].dim(0), D = m[0].dim(2), H = m[0].dim(3), W = m[0].dim(4);
  auto joined = concat(m, 1);
  auto pooled = reshape(ops::global_avg_pool(joined), {B, kModalities, channels_});
  auto s = edge_weights(ctx, relation_pairs(pooled));
  last_weights = s.value;
  auto y = fuse(reshape(joined, {B, kModalities, channels_, D, H, W}), s);
  return reshape(y, joined.shape());
}

// ---- transformer ----

AttentionBlock::AttentionBlock(ParamRegistry& reg, const std::string& name, const StageSpec& spec)
    : spec_(spec) {
  if (spec.dim % spec.heads != 0)
    throw SpecError(name + ": dim " + std::to_string(spec.dim) + " not divisible by " +
                    std::to_string(spec.heads) + " heads");
  norm1 = nn::LayerNorm(reg, name + ".norm1", spec.dim);
  query = nn::Linear(reg, name + ".query", spec.dim, spec.dim);
  if (spec.reduction > 1) {
    reduce = nn::Conv3d(reg, name + ".reduce",
                        ConvSpec::cube(spec.dim, spec.dim, spec.reduction, spec.reduction));
    kv_norm = nn::LayerNorm(reg, name + ".kv_norm", spec.dim);
  }
  key = nn::Linear(reg, name + ".key", spec.dim, spec.dim);
  value = nn::Linear(reg, name + ".value", spec.dim, spec.dim);
  proj = nn::Linear(reg, name + ".proj", spec.dim, spec.dim);
  norm2 = nn::LayerNorm(reg, name + ".norm2", spec.dim);
  fc1 = nn::Linear(reg, name + ".fc1", spec.dim, spec.mlp_hidden);
  fc2 = nn::Linear(reg, name + ".fc2", spec.mlp_hidden, spec.dim);
}

Var AttentionBlock::operator()(const Context& ctx, const Var& t, const Dims3& grid) const {
  const auto B = t.dim(0), N = t.dim(1);
  const int h = spec_.heads, dk = spec_.dim / h;
  auto x = norm1(ctx, t);
  auto q = permute(reshape(query(ctx, x), {B, N, h, dk}), {0, 2, 1, 3});
  Var kv = x;
  if (spec_.reduction > 1) {
    for (int a = 0; a < 3; ++a)
      if (grid[a] % spec_.reduction != 0)
        throw ShapeError("attention: token grid axis " + std::to_string(a) + " of size " +
                         std::to_string(grid[a]) + " not divisible by reduction " +
                         std::to_string(spec_.reduction));
    kv = kv_norm(ctx, nn::to_tokens(reduce(ctx, nn::to_volume(x, grid))));
  }
  const auto Nk = kv.dim(1);
  auto k = permute(reshape(key(ctx, kv), {B, Nk, h, dk}), {0, 2, 3, 1});
  auto v = permute(reshape(value(ctx, kv), {B, Nk, h, dk}), {0, 2, 1, 3});
  auto attn = ops::softmax(ops::scale(ops::matmul(q, k), 1.0 / std::sqrt(static_cast<double>(dk))), 3);
  last_attention = attn.value;
  auto o = reshape(permute(ops::matmul(attn, v), {0, 2, 1, 3}), {B, N, spec_.dim});
  auto y = ops::add(t, proj(ctx, o));
  auto mlp = fc2(ctx, ops::leaky_relu(fc1(ctx, norm2(ctx, y)), 0.01));
  return ops::add(y, mlp);
}

TransformerStage::TransformerStage(ParamRegistry& reg, const std::string& name,
                                   const StageSpec& spec)
    : spec_(spec) {
  embed = nn::Conv3d(reg, name + ".embed",
                     ConvSpec::cube(spec.in_channels, spec.dim, spec.patch_kernel,
                                    spec.patch_stride, spec.patch_padding));
  embed_norm = nn::LayerNorm(reg, name + ".embed_norm", spec.dim);
  for (int b = 0; b < spec.blocks; ++b)
    blocks.emplace_back(reg, name + ".block" + std::to_string(b), spec);
}

Var TransformerStage::operator()(const Context& ctx, const Var& x) const {
  if (x.rank() != 5) throw ShapeError("stage: expected (B, C, D, H, W), got " + to_string(x.shape()));
  for (int a = 2; a < 5; ++a)
    if (x.dim(a) % spec_.patch_stride != 0)
      throw ShapeError("stage: spatial axis " + std::to_string(a) + " of size " +
                       std::to_string(x.dim(a)) + " is not a multiple of the embed stride " +
                       std::to_string(spec_.patch_stride));
  auto v = embed(ctx, x);
  const Dims3 grid{v.dim(2), v.dim(3), v.dim(4)};
  auto t = embed_norm(ctx, nn::to_tokens(v));
  for (const auto& blk : blocks) t = blk(ctx, t, grid);
  return nn::to_volume(t, grid);
}

// ---- VRUM ----

Vrum::Vrum(ParamRegistry& reg, const std::string& name, const VrumSpec& spec) : spec_(spec) {
  if (spec.factor != 2 && spec.factor != 4)
    throw SpecError(name + ": upsample factor must be 2 or 4, got " + std::to_string(spec.factor));
  const int c = spec.in_channels, mid = spec.mid_channels(), f = spec.factor;
  if (mid < 1) throw SpecError(name + ": out_channels must be at least 2");
  refine = nn::Conv3d(reg, name + ".refine", ConvSpec::cube(c, c, 3, 1, 1));
  refine_up = nn::ConvTranspose3d(reg, name + ".refine_up", ConvSpec::cube(c, c, 4, 2, 1));
  small = nn::ConvTranspose3d(reg, name + ".small", ConvSpec::cube(c, mid, 3, f, 1, f - 1));
  large = nn::ConvTranspose3d(reg, name + ".large", ConvSpec::cube(c, mid, 5, f, 2, f - 1));
  fuse = nn::Conv3d(reg, name + ".fuse", ConvSpec::cube(2 * mid, mid, 3, 1, 1));
  fuse_norm = nn::BatchNorm(reg, name + ".fuse_norm", mid);
  merge = nn::Conv3d(reg, name + ".merge", ConvSpec::cube(c + mid, spec.out_channels, 1));
}

std::pair<Var, Var> Vrum::branch_outputs(const Context& ctx, const Var& x) const {
  const int f = spec_.factor;
  Var interp = f == 2 ? x : ops::trilinear_upsample3d(x, {f / 2, f / 2, f / 2});
  auto a = refine_up(ctx, ops::leaky_relu(refine(ctx, interp), 0.01));
  auto cat = concat({small(ctx, x), large(ctx, x)}, 1);
  auto bn = fuse_norm(ctx, fuse(ctx, cat));
  last_fallback = bn.used_fallback_stats;
  return {a, ops::relu(bn.out)};
}

Var Vrum::operator()(const Context& ctx, const Var& x) const {
  auto [a, b] = branch_outputs(ctx, x);
  if (a.shape()[2] != b.shape()[2] || a.shape()[3] != b.shape()[3] || a.shape()[4] != b.shape()[4])
    throw ShapeError("vrum: branch sizes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                     " disagree");
  return merge(ctx, concat({a, b}, 1));
}

// ---- model ----

ModelConfig ModelConfig::reference() {
  ModelConfig c;
  c.encoder_channels = 16;
  c.groups = 4;
  c.stages[0] = {.in_channels = 64, .dim = 32, .patch_kernel = 4, .patch_stride = 4,
                 .patch_padding = 0, .heads = 2, .blocks = 2, .reduction = 4, .mlp_hidden = 128};
  c.stages[1] = {.in_channels = 32, .dim = 64, .patch_kernel = 2, .patch_stride = 2,
                 .patch_padding = 0, .heads = 4, .blocks = 2, .reduction = 2, .mlp_hidden = 256};
  c.stages[2] = {.in_channels = 64, .dim = 160, .patch_kernel = 2, .patch_stride = 2,
                 .patch_padding = 0, .heads = 8, .blocks = 2, .reduction = 1, .mlp_hidden = 320};
  c.decoder_channels = {64, 32, 16};
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.encoder_channels = 4;
  c.groups = 2;
  c.stages[0] = {.in_channels = 16, .dim = 8, .patch_kernel = 4, .patch_stride = 4,
                 .patch_padding = 0, .heads = 2, .blocks = 1, .reduction = 2, .mlp_hidden = 8};
  c.stages[1] = {.in_channels = 8, .dim = 8, .patch_kernel = 2, .patch_stride = 2,
                 .patch_padding = 0, .heads = 2, .blocks = 1, .reduction = 1, .mlp_hidden = 8};
  c.stages[2] = {.in_channels = 8, .dim = 8, .patch_kernel = 2, .patch_stride = 2,
                 .patch_padding = 0, .heads = 2, .blocks = 1, .reduction = 1, .mlp_hidden = 8};
  c.decoder_channels = {8, 8, 4};
  return c;
}

int ModelConfig::spatial_multiple() const {
  int m = 1;
  for (const auto& s : stages) m *= s.patch_stride;
  return m;
}

GmlnModel::GmlnModel(const ModelConfig& config)
    : config_(config), registry_(config.dtype, config.seed) {
  const int c2 = config.encoder_channels;
  for (int i = 0; i < kModalities; ++i)
    encoders[i] = M2ae(registry_, std::string("encoder.") + kModalityNames[i],
                       {.in_channels = 1, .out_channels = c2, .groups = config.groups});
  if (config.use_g2mcim) interaction = G2mcim(registry_, "interaction", c2);
  if (config.stages[0].in_channels != kModalities * c2)
    throw SpecError("first stage must take " + std::to_string(kModalities * c2) + " channels");
  for (int s = 0; s < 3; ++s) {
    if (s > 0 && config.stages[s].in_channels != config.stages[s - 1].dim)
      throw SpecError("stage " + std::to_string(s) + " input channels must equal the previous dim");
    stages[s] = TransformerStage(registry_, "stage" + std::to_string(s), config.stages[s]);
  }
  const auto& dc = config.decoder_channels;
  decoders[0] = Vrum(registry_, "decoder0", {.in_channels = config.stages[2].dim, .out_channels = dc[0],
                                             .factor = config.stages[2].patch_stride});
  decoders[1] = Vrum(registry_, "decoder1", {.in_channels = dc[0], .out_channels = dc[1],
                                             .factor = config.stages[1].patch_stride});
  decoders[2] = Vrum(registry_, "decoder2", {.in_channels = dc[1], .out_channels = dc[2],
                                             .factor = config.stages[0].patch_stride});
  skips[0] = nn::Conv3d(registry_, "skip0", ConvSpec::cube(config.stages[1].dim, dc[0], 1));
  skips[1] = nn::Conv3d(registry_, "skip1", ConvSpec::cube(config.stages[0].dim, dc[1], 1));
  head = nn::Conv3d(registry_, "head", ConvSpec::cube(dc[2], config.classes, 1));
}

Var GmlnModel::encode(const Context& ctx, const Var& x) const {
  if (x.rank() != 5 || x.dim(1) != kModalities)
    throw ShapeError("model input must be (B, 4, D, H, W), got " + to_string(x.shape()));
  const int m = config_.spatial_multiple();
  for (int a = 2; a < 5; ++a)
    if (x.dim(a) % m != 0)
      throw ShapeError("model input spatial axis " + std::to_string(a) + " has size " +
                       std::to_string(x.dim(a)) + "; every spatial size must be a multiple of " +
                       std::to_string(m));
  std::vector<Var> feats;
  for (int i = 0; i < kModalities; ++i) feats.push_back(encoders[i](ctx, ops::narrow(x, 1, i, 1)));
  return config_.use_g2mcim ? interaction(ctx, feats) : concat(feats, 1);
}

Var GmlnModel::forward(const Context& ctx, const Var& x) const {
  auto fused = encode(ctx, x);
  auto s1 = stages[0](ctx, fused);
  auto s2 = stages[1](ctx, s1);
  auto s3 = stages[2](ctx, s2);
  auto d1 = ops::add(decoders[0](ctx, s3), skips[0](ctx, s2));
  auto d2 = ops::add(decoders[1](ctx, d1), skips[1](ctx, s1));
  auto d3 = decoders[2](ctx, d2);
  fallback_ = false;
  for (const auto& d : decoders) fallback_ = fallback_ || d.last_fallback;
  return head(ctx, d3);
}

Tensor GmlnModel::predict(const Tensor& x) const {
  Context ctx;
  return forward(ctx, constant(x.dtype() == config_.dtype ? x : x.to(config_.dtype))).value;
}

}  // namespace gmln
