#pragma once

#include <array>
#include <cstdint>

#include "gmln/tensor.hpp"

namespace gmln {

using Vec3 = std::array<int, 3>;
using Dims3 = std::array<std::int64_t, 3>;

/// Geometry of a 3D convolution or transposed convolution, per spatial axis (D, H, W).
struct ConvSpec {
  Vec3 kernel{1, 1, 1};
  Vec3 stride{1, 1, 1};
  Vec3 padding{0, 0, 0};
  Vec3 output_padding{0, 0, 0};  // transposed only
  int in_channels = 1;
  int out_channels = 1;

  static ConvSpec cube(int in_channels, int out_channels, int kernel, int stride = 1,
                       int padding = 0, int output_padding = 0);

  /// Throws SpecError unless padding < kernel and (transposed) output_padding < stride.
  void validate(bool transposed) const;
  std::int64_t kernel_volume() const;
  Dims3 conv_output(const Dims3& in) const;
  Dims3 transposed_output(const Dims3& in) const;
  Shape conv_weight_shape() const;        // (Cout, Cin, kd, kh, kw)
  Shape transposed_weight_shape() const;  // (Cin, Cout, kd, kh, kw)
};

/// Raw forward/backward kernels on plain tensors. Volumes are (B, C, D, H, W).
namespace kernels {

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvSpec& spec);
Tensor conv3d_grad_input(const Tensor& grad_out, const Tensor& w, const ConvSpec& spec,
                         const Shape& x_shape);
Tensor conv3d_grad_weight(const Tensor& x, const Tensor& grad_out, const ConvSpec& spec);

Tensor conv_transpose3d(const Tensor& x, const Tensor& w, const Tensor* bias,
                        const ConvSpec& spec);
Tensor conv_transpose3d_grad_input(const Tensor& grad_out, const Tensor& w, const ConvSpec& spec,
                                   const Shape& x_shape);
Tensor conv_transpose3d_grad_weight(const Tensor& x, const Tensor& grad_out,
                                    const ConvSpec& spec);

/// Sum of a (B, C, ...) gradient over every axis except C.
Tensor channel_sum(const Tensor& grad_out);

/// Mean pooling with zero padding; the divisor is always the full window volume.
Tensor avg_pool3d(const Tensor& x, int kernel, int stride, int padding);
Tensor avg_pool3d_grad(const Tensor& grad_out, const Shape& x_shape, int kernel, int stride,
                       int padding);

/// Linear interpolation by an integer factor along one axis, half-pixel source
/// coordinates clamped to the valid range. Applied per axis it gives trilinear.
Tensor upsample_linear_axis(const Tensor& x, int axis, int factor);
Tensor upsample_linear_axis_grad(const Tensor& grad_out, int axis, int factor,
                                 std::int64_t in_size);

}  // namespace kernels
}  // namespace gmln
