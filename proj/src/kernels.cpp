#include "gmln/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

namespace gmln {

using Index = std::int64_t;

ConvSpec ConvSpec::cube(int in_channels, int out_channels, int kernel, int stride, int padding,
                        int output_padding) {
  ConvSpec s;
  s.kernel = {kernel, kernel, kernel};
  s.stride = {stride, stride, stride};
  s.padding = {padding, padding, padding};
  s.output_padding = {output_padding, output_padding, output_padding};
  s.in_channels = in_channels;
  s.out_channels = out_channels;
  return s;
}

void ConvSpec::validate(bool transposed) const {
  static constexpr const char* kAxis[] = {"D", "H", "W"};
  if (in_channels < 1 || out_channels < 1) throw SpecError("conv: channel counts must be >= 1");
  for (int a = 0; a < 3; ++a) {
    const std::string ax = kAxis[a];
    if (kernel[a] < 1) throw SpecError("conv: kernel on axis " + ax + " must be >= 1");
    if (stride[a] < 1) throw SpecError("conv: stride on axis " + ax + " must be >= 1");
    if (padding[a] < 0 || padding[a] >= kernel[a])
      throw SpecError("conv: padding on axis " + ax + " must satisfy 0 <= pad < kernel");
    if (transposed) {
      if (output_padding[a] < 0 || output_padding[a] >= stride[a])
        throw SpecError("conv_transpose: output_padding on axis " + ax +
                        " must satisfy 0 <= out_pad < stride");
    } else if (output_padding[a] != 0) {
      throw SpecError("conv: output_padding applies to transposed convolution only");
    }
  }
}

Index ConvSpec::kernel_volume() const {
  return Index{kernel[0]} * kernel[1] * kernel[2];
}

Dims3 ConvSpec::conv_output(const Dims3& in) const {
  Dims3 out{};
  for (int a = 0; a < 3; ++a) {
    const Index span = in[a] + 2 * padding[a] - kernel[a];
    out[a] = span < 0 ? 0 : span / stride[a] + 1;
  }
  return out;
}

Dims3 ConvSpec::transposed_output(const Dims3& in) const {
  Dims3 out{};
  for (int a = 0; a < 3; ++a)
    out[a] = (in[a] - 1) * stride[a] - 2 * padding[a] + kernel[a] + output_padding[a];
  return out;
}

Shape ConvSpec::conv_weight_shape() const {
  return {out_channels, in_channels, kernel[0], kernel[1], kernel[2]};
}

Shape ConvSpec::transposed_weight_shape() const {
  return {in_channels, out_channels, kernel[0], kernel[1], kernel[2]};
}

namespace kernels {
namespace {

constexpr const char* kAxisNames[] = {"B", "C", "D", "H", "W"};

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

Index ceil_div(Index a, Index b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }

Dims3 spatial(const Shape& s) { return {s[2], s[3], s[4]}; }

void require_volume(const Tensor& x, const char* op) {
  if (x.rank() != 5)
    throw ShapeError(std::string(op) + ": expected rank-5 (B,C,D,H,W), got " +
                     to_string(x.shape()));
}

void require_dims(const char* op, const Shape& got, const Shape& want, const char* what) {
  if (got.size() != want.size())
    throw ShapeError(std::string(op) + ": " + what + " has shape " + to_string(got) +
                     ", expected " + to_string(want));
  for (std::size_t a = 0; a < got.size(); ++a)
    if (got[a] != want[a])
      throw ShapeError(std::string(op) + ": " + what + " axis " + std::to_string(a) + " is " +
                       std::to_string(got[a]) + ", expected " + std::to_string(want[a]) +
                       " (shape " + to_string(got) + " vs " + to_string(want) + ")");
}

/// Sliding-window correspondence between a large grid and a small grid: the small grid
/// is the output of a convolution over the large one (or the input of the transposed
/// convolution that produces it).
struct Geometry {
  Index channels;
  Dims3 big;
  Dims3 small;
  Vec3 k, s, p;

  Index taps() const { return Index{k[0]} * k[1] * k[2]; }
  Index rows() const { return channels * taps(); }
  Index big_n() const { return big[0] * big[1] * big[2]; }
  Index small_n() const { return small[0] * small[1] * small[2]; }
  Index small_plane() const { return small[1] * small[2]; }
  bool pointwise() const {
    return k == Vec3{1, 1, 1} && s == Vec3{1, 1, 1} && p == Vec3{0, 0, 0} && big == small;
  }
  /// Depth slices of the small grid per im2col block.
  Index slab() const {
    constexpr Index kBudget = Index{1} << 22;
    const Index per = std::max<Index>(1, rows() * small_plane());
    return std::clamp<Index>(kBudget / per, 1, small[0]);
  }
};

template <class T, bool kGather>
void window_pass(T* vol, T* cols, const Geometry& g, Index d0, Index d1) {
  const Index D = g.big[0], H = g.big[1], W = g.big[2];
  const Index oh_n = g.small[1], ow_n = g.small[2];
  const Index ncols = (d1 - d0) * oh_n * ow_n;
  Index row = 0;
  for (Index c = 0; c < g.channels; ++c) {
    T* vc = vol + c * D * H * W;
    for (int kd = 0; kd < g.k[0]; ++kd)
      for (int kh = 0; kh < g.k[1]; ++kh)
        for (int kw = 0; kw < g.k[2]; ++kw, ++row) {
          T* crow = cols + row * ncols;
          const Index sw = g.s[2];
          const Index lo = std::clamp<Index>(ceil_div(g.p[2] - kw, sw), 0, ow_n);
          const Index hi = std::clamp<Index>(ceil_div(W + g.p[2] - kw, sw), lo, ow_n);
          for (Index od = d0; od < d1; ++od) {
            const Index id = od * g.s[0] - g.p[0] + kd;
            for (Index oh = 0; oh < oh_n; ++oh) {
              const Index ih = oh * g.s[1] - g.p[1] + kh;
              T* seg = crow + ((od - d0) * oh_n + oh) * ow_n;
              const bool inside = id >= 0 && id < D && ih >= 0 && ih < H;
              if constexpr (kGather) {
                if (!inside) {
                  std::fill(seg, seg + ow_n, T{0});
                  continue;
                }
                const T* line = vc + (id * H + ih) * W;
                std::fill(seg, seg + lo, T{0});
                const T* src = line + lo * sw - g.p[2] + kw;
                if (sw == 1) {
                  std::copy(src, src + (hi - lo), seg + lo);
                } else {
                  for (Index ow = lo; ow < hi; ++ow) seg[ow] = src[(ow - lo) * sw];
                }
                std::fill(seg + hi, seg + ow_n, T{0});
              } else {
                if (!inside) continue;
                T* line = vc + (id * H + ih) * W;
                T* dst = line + lo * sw - g.p[2] + kw;
                for (Index ow = lo; ow < hi; ++ow) dst[(ow - lo) * sw] += seg[ow];
              }
            }
          }
        }
  }
}

template <class T>
void im2col(const T* vol, const Geometry& g, Index d0, Index d1, T* cols) {
  window_pass<T, true>(const_cast<T*>(vol), cols, g, d0, d1);
}

template <class T>
void col2im(const T* cols, const Geometry& g, Index d0, Index d1, T* vol) {
  window_pass<T, false>(vol, const_cast<T*>(cols), g, d0, d1);
}

template <class T>
void add_bias(T* out, const T* bias, Index batch, Index channels, Index n) {
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c) {
      T* o = out + (b * channels + c) * n;
      const T v = bias[c];
      for (Index i = 0; i < n; ++i) o[i] += v;
    }
}

Geometry conv_geometry(const ConvSpec& spec, const Dims3& in, int channels) {
  Geometry g;
  g.channels = channels;
  g.big = in;
  g.small = spec.conv_output(in);
  g.k = spec.kernel;
  g.s = spec.stride;
  g.p = spec.padding;
  return g;
}

Geometry transposed_geometry(const ConvSpec& spec, const Dims3& in) {
  Geometry g;
  g.channels = spec.out_channels;
  g.small = in;
  g.big = spec.transposed_output(in);
  g.k = spec.kernel;
  g.s = spec.stride;
  g.p = spec.padding;
  return g;
}

void check_conv_output(const char* op, const Dims3& out) {
  for (int a = 0; a < 3; ++a)
    if (out[a] < 1)
      throw ShapeError(std::string(op) + ": output axis " + kAxisNames[a + 2] +
                       " would be empty; input too small for kernel/padding");
}

void check_conv_input(const char* op, const Tensor& x, const Tensor& w, const ConvSpec& spec,
                      bool transposed) {
  spec.validate(transposed);
  require_volume(x, op);
  if (x.dim(1) != spec.in_channels)
    throw ShapeError(std::string(op) + ": channel axis C of input is " +
                     std::to_string(x.dim(1)) + ", spec expects " +
                     std::to_string(spec.in_channels));
  require_dims(op, w.shape(),
               transposed ? spec.transposed_weight_shape() : spec.conv_weight_shape(), "weight");
  if (w.dtype() != x.dtype()) throw ContractError(std::string(op) + ": weight dtype differs");
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvSpec& spec) {
  check_conv_input("conv3d", x, w, spec, false);
  if (bias) require_dims("conv3d", bias->shape(), {spec.out_channels}, "bias");
  const Geometry g = conv_geometry(spec, spatial(x.shape()), spec.in_channels);
  check_conv_output("conv3d", g.small);
  const Index B = x.dim(0), Cout = spec.out_channels;
  Tensor out({B, Cout, g.small[0], g.small[1], g.small[2]}, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xp = x.data<T>().data();
    T* op = out.mutable_data<T>().data();
    CMapMat<T> wm(w.data<T>().data(), Cout, g.rows());
    std::vector<T> cols;
    for (Index b = 0; b < B; ++b) {
      const T* xb = xp + b * g.channels * g.big_n();
      MapMat<T> ob(op + b * Cout * g.small_n(), Cout, g.small_n());
      if (g.pointwise()) {
        ob.noalias() = wm * CMapMat<T>(xb, g.channels, g.big_n());
        continue;
      }
      const Index slab = g.slab();
      for (Index d0 = 0; d0 < g.small[0]; d0 += slab) {
        const Index d1 = std::min(d0 + slab, g.small[0]);
        const Index len = (d1 - d0) * g.small_plane();
        cols.resize(static_cast<std::size_t>(g.rows() * len));
        im2col(xb, g, d0, d1, cols.data());
        ob.middleCols(d0 * g.small_plane(), len).noalias() =
            wm * CMapMat<T>(cols.data(), g.rows(), len);
      }
    }
    if (bias) add_bias(op, bias->data<T>().data(), B, Cout, g.small_n());
  });
  return out;
}

Tensor conv3d_grad_input(const Tensor& grad_out, const Tensor& w, const ConvSpec& spec,
                         const Shape& x_shape) {
  const Geometry g = conv_geometry(spec, spatial(x_shape), spec.in_channels);
  const Index B = x_shape[0], Cout = spec.out_channels;
  Tensor gx(x_shape, grad_out.dtype());
  dispatch(grad_out.dtype(), [&]<class T>(T) {
    const T* gp = grad_out.data<T>().data();
    T* gxp = gx.mutable_data<T>().data();
    CMapMat<T> wm(w.data<T>().data(), Cout, g.rows());
    std::vector<T> cols;
    for (Index b = 0; b < B; ++b) {
      CMapMat<T> gb(gp + b * Cout * g.small_n(), Cout, g.small_n());
      T* gxb = gxp + b * g.channels * g.big_n();
      if (g.pointwise()) {
        MapMat<T>(gxb, g.channels, g.big_n()).noalias() = wm.transpose() * gb;
        continue;
      }
      const Index slab = g.slab();
      for (Index d0 = 0; d0 < g.small[0]; d0 += slab) {
        const Index d1 = std::min(d0 + slab, g.small[0]);
        const Index len = (d1 - d0) * g.small_plane();
        cols.resize(static_cast<std::size_t>(g.rows() * len));
        MapMat<T>(cols.data(), g.rows(), len).noalias() =
            wm.transpose() * gb.middleCols(d0 * g.small_plane(), len);
        col2im(cols.data(), g, d0, d1, gxb);
      }
    }
  });
  return gx;
}

Tensor conv3d_grad_weight(const Tensor& x, const Tensor& grad_out, const ConvSpec& spec) {
  const Geometry g = conv_geometry(spec, spatial(x.shape()), spec.in_channels);
  const Index B = x.dim(0), Cout = spec.out_channels;
  Tensor gw(spec.conv_weight_shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xp = x.data<T>().data();
    const T* gp = grad_out.data<T>().data();
    MapMat<T> gwm(gw.mutable_data<T>().data(), Cout, g.rows());
    std::vector<T> cols;
    for (Index b = 0; b < B; ++b) {
      const T* xb = xp + b * g.channels * g.big_n();
      CMapMat<T> gb(gp + b * Cout * g.small_n(), Cout, g.small_n());
      if (g.pointwise()) {
        gwm.noalias() += gb * CMapMat<T>(xb, g.channels, g.big_n()).transpose();
        continue;
      }
      const Index slab = g.slab();
      for (Index d0 = 0; d0 < g.small[0]; d0 += slab) {
        const Index d1 = std::min(d0 + slab, g.small[0]);
        const Index len = (d1 - d0) * g.small_plane();
        cols.resize(static_cast<std::size_t>(g.rows() * len));
        im2col(xb, g, d0, d1, cols.data());
        gwm.noalias() += gb.middleCols(d0 * g.small_plane(), len) *
                         CMapMat<T>(cols.data(), g.rows(), len).transpose();
      }
    }
  });
  return gw;
}

Tensor conv_transpose3d(const Tensor& x, const Tensor& w, const Tensor* bias,
                        const ConvSpec& spec) {
  check_conv_input("conv_transpose3d", x, w, spec, true);
  if (bias) require_dims("conv_transpose3d", bias->shape(), {spec.out_channels}, "bias");
  const Geometry g = transposed_geometry(spec, spatial(x.shape()));
  check_conv_output("conv_transpose3d", g.big);
  const Index B = x.dim(0), Cin = spec.in_channels, Cout = spec.out_channels;
  Tensor out({B, Cout, g.big[0], g.big[1], g.big[2]}, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xp = x.data<T>().data();
    T* op = out.mutable_data<T>().data();
    CMapMat<T> wm(w.data<T>().data(), Cin, g.rows());
    std::vector<T> cols;
    for (Index b = 0; b < B; ++b) {
      CMapMat<T> xb(xp + b * Cin * g.small_n(), Cin, g.small_n());
      T* ob = op + b * Cout * g.big_n();
      if (g.pointwise()) {
        MapMat<T>(ob, Cout, g.big_n()).noalias() = wm.transpose() * xb;
        continue;
      }
      const Index slab = g.slab();
      for (Index d0 = 0; d0 < g.small[0]; d0 += slab) {
        const Index d1 = std::min(d0 + slab, g.small[0]);
        const Index len = (d1 - d0) * g.small_plane();
        cols.resize(static_cast<std::size_t>(g.rows() * len));
        MapMat<T>(cols.data(), g.rows(), len).noalias() =
            wm.transpose() * xb.middleCols(d0 * g.small_plane(), len);
        col2im(cols.data(), g, d0, d1, ob);
      }
    }
    if (bias) add_bias(op, bias->data<T>().data(), B, Cout, g.big_n());
  });
  return out;
}

Tensor conv_transpose3d_grad_input(const Tensor& grad_out, const Tensor& w, const ConvSpec& spec,
                                   const Shape& x_shape) {
  const Geometry g = transposed_geometry(spec, spatial(x_shape));
  const Index B = x_shape[0], Cin = spec.in_channels, Cout = spec.out_channels;
  Tensor gx(x_shape, grad_out.dtype());
  dispatch(grad_out.dtype(), [&]<class T>(T) {
    const T* gp = grad_out.data<T>().data();
    T* gxp = gx.mutable_data<T>().data();
    CMapMat<T> wm(w.data<T>().data(), Cin, g.rows());
    std::vector<T> cols;
    for (Index b = 0; b < B; ++b) {
      const T* gb = gp + b * Cout * g.big_n();
      MapMat<T> gxb(gxp + b * Cin * g.small_n(), Cin, g.small_n());
      if (g.pointwise()) {
        gxb.noalias() = wm * CMapMat<T>(gb, Cout, g.big_n());
        continue;
      }
      const Index slab = g.slab();
      for (Index d0 = 0; d0 < g.small[0]; d0 += slab) {
        const Index d1 = std::min(d0 + slab, g.small[0]);
        const Index len = (d1 - d0) * g.small_plane();
        cols.resize(static_cast<std::size_t>(g.rows() * len));
        im2col(gb, g, d0, d1, cols.data());
        gxb.middleCols(d0 * g.small_plane(), len).noalias() =
            wm * CMapMat<T>(cols.data(), g.rows(), len);
      }
    }
  });
  return gx;
}

Tensor conv_transpose3d_grad_weight(const Tensor& x, const Tensor& grad_out,
                                    const ConvSpec& spec) {
  const Geometry g = transposed_geometry(spec, spatial(x.shape()));
  const Index B = x.dim(0), Cin = spec.in_channels, Cout = spec.out_channels;
  Tensor gw(spec.transposed_weight_shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xp = x.data<T>().data();
    const T* gp = grad_out.data<T>().data();
    MapMat<T> gwm(gw.mutable_data<T>().data(), Cin, g.rows());
    std::vector<T> cols;
    for (Index b = 0; b < B; ++b) {
      CMapMat<T> xb(xp + b * Cin * g.small_n(), Cin, g.small_n());
      const T* gb = gp + b * Cout * g.big_n();
      if (g.pointwise()) {
        gwm.noalias() += xb * CMapMat<T>(gb, Cout, g.big_n()).transpose();
        continue;
      }
      const Index slab = g.slab();
      for (Index d0 = 0; d0 < g.small[0]; d0 += slab) {
        const Index d1 = std::min(d0 + slab, g.small[0]);
        const Index len = (d1 - d0) * g.small_plane();
        cols.resize(static_cast<std::size_t>(g.rows() * len));
        im2col(gb, g, d0, d1, cols.data());
        gwm.noalias() += xb.middleCols(d0 * g.small_plane(), len) *
                         CMapMat<T>(cols.data(), g.rows(), len).transpose();
      }
    }
  });
  return gw;
}

Tensor channel_sum(const Tensor& grad_out) {
  const Index B = grad_out.dim(0), C = grad_out.dim(1);
  const Index n = grad_out.numel() / (B * C);
  Tensor out({C}, grad_out.dtype());
  dispatch(grad_out.dtype(), [&]<class T>(T) {
    const T* g = grad_out.data<T>().data();
    T* o = out.mutable_data<T>().data();
    for (Index b = 0; b < B; ++b)
      for (Index c = 0; c < C; ++c) {
        const T* p = g + (b * C + c) * n;
        double acc = 0;
        for (Index i = 0; i < n; ++i) acc += p[i];
        o[c] += static_cast<T>(acc);
      }
  });
  return out;
}

namespace {

struct PoolGeometry {
  Dims3 in, out;
  int k, s, p;
};

PoolGeometry pool_geometry(const Shape& x_shape, int kernel, int stride, int padding) {
  if (kernel < 1 || stride < 1 || padding < 0 || padding >= kernel)
    throw SpecError("avg_pool3d: need kernel >= 1, stride >= 1, 0 <= pad < kernel");
  PoolGeometry g{spatial(x_shape), {}, kernel, stride, padding};
  for (int a = 0; a < 3; ++a) {
    const Index span = g.in[a] + 2 * padding - kernel;
    if (span < 0)
      throw ShapeError(std::string("avg_pool3d: axis ") + kAxisNames[a + 2] +
                       " too small for the window");
    g.out[a] = span / stride + 1;
  }
  return g;
}

template <class T, bool kForward>
void pool_pass(const PoolGeometry& g, Index planes, const T* src, T* dst) {
  const Index D = g.in[0], H = g.in[1], W = g.in[2];
  const Index Do = g.out[0], Ho = g.out[1], Wo = g.out[2];
  const T inv = T(1) / static_cast<T>(Index{g.k} * g.k * g.k);
  for (Index pl = 0; pl < planes; ++pl) {
    const Index in_off = pl * D * H * W, out_off = pl * Do * Ho * Wo;
    for (Index od = 0; od < Do; ++od)
      for (Index oh = 0; oh < Ho; ++oh)
        for (Index ow = 0; ow < Wo; ++ow) {
          const Index o = out_off + (od * Ho + oh) * Wo + ow;
          T acc = 0;
          const T gv = kForward ? T(0) : src[o] * inv;
          for (int kd = 0; kd < g.k; ++kd) {
            const Index id = od * g.s - g.p + kd;
            if (id < 0 || id >= D) continue;
            for (int kh = 0; kh < g.k; ++kh) {
              const Index ih = oh * g.s - g.p + kh;
              if (ih < 0 || ih >= H) continue;
              for (int kw = 0; kw < g.k; ++kw) {
                const Index iw = ow * g.s - g.p + kw;
                if (iw < 0 || iw >= W) continue;
                const Index i = in_off + (id * H + ih) * W + iw;
                if constexpr (kForward)
                  acc += src[i];
                else
                  dst[i] += gv;
              }
            }
          }
          if constexpr (kForward) dst[o] = acc * inv;
        }
  }
}

}  // namespace

Tensor avg_pool3d(const Tensor& x, int kernel, int stride, int padding) {
  require_volume(x, "avg_pool3d");
  const PoolGeometry g = pool_geometry(x.shape(), kernel, stride, padding);
  Tensor out({x.dim(0), x.dim(1), g.out[0], g.out[1], g.out[2]}, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    pool_pass<T, true>(g, x.dim(0) * x.dim(1), x.data<T>().data(), out.mutable_data<T>().data());
  });
  return out;
}

Tensor avg_pool3d_grad(const Tensor& grad_out, const Shape& x_shape, int kernel, int stride,
                       int padding) {
  const PoolGeometry g = pool_geometry(x_shape, kernel, stride, padding);
  Tensor gx(x_shape, grad_out.dtype());
  dispatch(grad_out.dtype(), [&]<class T>(T) {
    pool_pass<T, false>(g, x_shape[0] * x_shape[1], grad_out.data<T>().data(),
                        gx.mutable_data<T>().data());
  });
  return gx;
}

namespace {

struct LerpTap {
  Index lo, hi;
  double frac;
};

std::vector<LerpTap> lerp_taps(Index in_size, int factor) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(in_size * factor));
  for (Index o = 0; o < in_size * factor; ++o) {
    double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
    const auto lo = static_cast<Index>(std::floor(src));
    const Index hi = std::min(lo + 1, in_size - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Tensor upsample_linear_axis(const Tensor& x, int axis, int factor) {
  if (factor < 1) throw SpecError("upsample: factor must be >= 1");
  axis = normalize_axis(axis, x.rank());
  if (factor == 1) return x.clone();
  const Index n = x.dim(axis);
  Index outer = 1, inner = 1;
  for (int a = 0; a < axis; ++a) outer *= x.dim(a);
  for (int a = axis + 1; a < x.rank(); ++a) inner *= x.dim(a);
  Shape out_shape = x.shape();
  out_shape[axis] = n * factor;
  Tensor out(out_shape, x.dtype());
  const auto taps = lerp_taps(n, factor);
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xs = x.data<T>().data();
    T* os = out.mutable_data<T>().data();
    const Index no = n * factor;
    for (Index o = 0; o < outer; ++o)
      for (Index j = 0; j < no; ++j) {
        const auto& t = taps[j];
        const T w1 = static_cast<T>(t.frac), w0 = T(1) - w1;
        const T* a = xs + (o * n + t.lo) * inner;
        const T* b = xs + (o * n + t.hi) * inner;
        T* dst = os + (o * no + j) * inner;
        for (Index i = 0; i < inner; ++i) dst[i] = w0 * a[i] + w1 * b[i];
      }
  });
  return out;
}

Tensor upsample_linear_axis_grad(const Tensor& grad_out, int axis, int factor,
                                 std::int64_t in_size) {
  axis = normalize_axis(axis, grad_out.rank());
  if (factor == 1) return grad_out.clone();
  Index outer = 1, inner = 1;
  for (int a = 0; a < axis; ++a) outer *= grad_out.dim(a);
  for (int a = axis + 1; a < grad_out.rank(); ++a) inner *= grad_out.dim(a);
  Shape in_shape = grad_out.shape();
  in_shape[axis] = in_size;
  Tensor gx(in_shape, grad_out.dtype());
  const auto taps = lerp_taps(in_size, factor);
  dispatch(grad_out.dtype(), [&]<class T>(T) {
    const T* gs = grad_out.data<T>().data();
    T* xs = gx.mutable_data<T>().data();
    const Index no = in_size * factor;
    for (Index o = 0; o < outer; ++o)
      for (Index j = 0; j < no; ++j) {
        const auto& t = taps[j];
        const T w1 = static_cast<T>(t.frac), w0 = T(1) - w1;
        T* a = xs + (o * in_size + t.lo) * inner;
        T* b = xs + (o * in_size + t.hi) * inner;
        const T* src = gs + (o * no + j) * inner;
        for (Index i = 0; i < inner; ++i) {
          a[i] += w0 * src[i];
          b[i] += w1 * src[i];
        }
      }
  });
  return gx;
}

}  // namespace kernels
}  // namespace gmln
