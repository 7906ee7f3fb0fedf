#include "gmln/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace gmln::ops {

namespace {

using Index = std::int64_t;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

std::vector<Index> contiguous_strides(const Shape& s) {
  std::vector<Index> st(s.size(), 1);
  for (int a = static_cast<int>(s.size()) - 2; a >= 0; --a) st[a] = st[a + 1] * s[a + 1];
  return st;
}

/// Visits every element of `shape` in row-major order, calling fn(flat, offset) where
/// offset advances by `strides` (which may be zero or permuted).
template <class Fn>
void walk(const Shape& shape, const std::vector<Index>& strides, Fn&& fn) {
  const int r = static_cast<int>(shape.size());
  const Index n = numel(shape);
  if (r == 0 || n == 0) return;
  const Index inner = shape[r - 1], istride = strides[r - 1];
  std::vector<Index> idx(r, 0);
  Index off = 0;
  for (Index flat = 0; flat < n; flat += inner) {
    for (Index i = 0; i < inner; ++i) fn(flat + i, off + i * istride);
    for (int a = r - 2; a >= 0; --a) {
      ++idx[a];
      off += strides[a];
      if (idx[a] < shape[a]) break;
      off -= strides[a] * shape[a];
      idx[a] = 0;
    }
  }
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
  if (a.dtype() != b.dtype()) throw ContractError(std::string(op) + ": dtypes differ");
}

template <class Fn>
Tensor map_unary(const Tensor& x, Fn fn) {
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    auto xs = x.data<T>();
    auto os = out.mutable_data<T>();
    for (std::size_t i = 0; i < os.size(); ++i) os[i] = fn(xs[i]);
  });
  return out;
}

template <class Fn>
Tensor map_binary(const Tensor& a, const Tensor& b, Fn fn) {
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>(T) {
    auto as = a.data<T>();
    auto bs = b.data<T>();
    auto os = out.mutable_data<T>();
    for (std::size_t i = 0; i < os.size(); ++i) os[i] = fn(as[i], bs[i]);
  });
  return out;
}

Tensor scaled(const Tensor& x, double f) {
  return dispatch(x.dtype(), [&]<class T>(T) {
    const T s = static_cast<T>(f);
    return map_unary(x, [s](T v) { return v * s; });
  });
}

void fold_kink_pattern(const Tensor& x) {
  std::uint64_t* digest = detail::kink_digest;
  if (!digest) return;
  dispatch(x.dtype(), [&]<class T>(T) {
    std::uint64_t h = *digest;
    for (T v : x.data<T>()) h = (h ^ static_cast<std::uint64_t>(v > T(0))) * 1099511628211ull;
    *digest = h;
  });
}

Tensor sum_to(const Tensor& g, const Shape& target) {
  // Reduces broadcast axes (target dim 1) of g.
  Tensor out(target, g.dtype());
  auto st = contiguous_strides(target);
  for (std::size_t a = 0; a < target.size(); ++a)
    if (target[a] == 1 && g.shape()[a] != 1) st[a] = 0;
  dispatch(g.dtype(), [&]<class T>(T) {
    auto gs = g.data<T>();
    auto os = out.mutable_data<T>();
    walk(g.shape(), st, [&](Index flat, Index off) { os[off] += gs[flat]; });
  });
  return out;
}

}  // namespace

Var conv3d(const Var& x, const Var& w, const std::optional<Var>& bias, const ConvSpec& spec) {
  Tensor out = kernels::conv3d(x.value, w.value, bias ? &bias->value : nullptr, spec);
  std::vector<Var> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return Tape::record("conv3d", std::move(out), inputs,
                      [xv = x.value, wv = w.value, spec](const Tensor& g, GradSink& s) {
                        if (s.wants(0))
                          s.add(0, kernels::conv3d_grad_input(g, wv, spec, xv.shape()));
                        if (s.wants(1)) s.add(1, kernels::conv3d_grad_weight(xv, g, spec));
                        if (s.wants(2)) s.add(2, kernels::channel_sum(g));
                      });
}

Var conv_transpose3d(const Var& x, const Var& w, const std::optional<Var>& bias,
                     const ConvSpec& spec) {
  Tensor out = kernels::conv_transpose3d(x.value, w.value, bias ? &bias->value : nullptr, spec);
  std::vector<Var> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return Tape::record(
      "conv_transpose3d", std::move(out), inputs,
      [xv = x.value, wv = w.value, spec](const Tensor& g, GradSink& s) {
        if (s.wants(0))
          s.add(0, kernels::conv_transpose3d_grad_input(g, wv, spec, xv.shape()));
        if (s.wants(1)) s.add(1, kernels::conv_transpose3d_grad_weight(xv, g, spec));
        if (s.wants(2)) s.add(2, kernels::channel_sum(g));
      });
}

Var trilinear_upsample3d(const Var& x, const Vec3& factor) {
  if (x.rank() != 5)
    throw ShapeError("trilinear_upsample3d: expected (B,C,D,H,W), got " + to_string(x.shape()));
  for (int f : factor)
    if (f < 1) throw SpecError("trilinear_upsample3d: factor must be >= 1");
  Tensor out = x.value;
  for (int a = 0; a < 3; ++a) out = kernels::upsample_linear_axis(out, a + 2, factor[a]);
  const Shape in_shape = x.shape();
  return Tape::record("trilinear_upsample3d", std::move(out), {x},
                      [in_shape, factor](const Tensor& g, GradSink& s) {
                        Tensor gx = g;
                        for (int a = 2; a >= 0; --a)
                          gx = kernels::upsample_linear_axis_grad(gx, a + 2, factor[a],
                                                                  in_shape[a + 2]);
                        s.add(0, gx);
                      });
}

Var avg_pool3d(const Var& x, int kernel, int stride, int padding) {
  Tensor out = kernels::avg_pool3d(x.value, kernel, stride, padding);
  return Tape::record("avg_pool3d", std::move(out), {x},
                      [shape = x.shape(), kernel, stride, padding](const Tensor& g, GradSink& s) {
                        s.add(0, kernels::avg_pool3d_grad(g, shape, kernel, stride, padding));
                      });
}

Var global_avg_pool(const Var& x) {
  if (x.rank() < 3)
    throw ShapeError("global_avg_pool: expected (B,C,...), got " + to_string(x.shape()));
  const Index B = x.dim(0), C = x.dim(1), n = x.value.numel() / (B * C);
  Tensor out({B, C}, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xs = x.value.data<T>().data();
    T* os = out.mutable_data<T>().data();
    for (Index i = 0; i < B * C; ++i) {
      double acc = 0;
      for (Index j = 0; j < n; ++j) acc += xs[i * n + j];
      os[i] = static_cast<T>(acc / static_cast<double>(n));
    }
  });
  return Tape::record("global_avg_pool", std::move(out), {x},
                      [shape = x.shape(), n](const Tensor& g, GradSink& s) {
                        Tensor gx(shape, g.dtype());
                        dispatch(g.dtype(), [&]<class T>(T) {
                          const T* gs = g.data<T>().data();
                          T* o = gx.mutable_data<T>().data();
                          const T inv = T(1) / static_cast<T>(n);
                          for (Index i = 0; i < g.numel(); ++i)
                            std::fill(o + i * n, o + (i + 1) * n, gs[i] * inv);
                        });
                        s.add(0, gx);
                      });
}

namespace {

/// Statistics of contiguous (or channel-strided) normalization groups.
struct NormStats {
  std::vector<double> mean, rstd;
};

/// Shared backward for normalizations whose groups are described by `group_of(i)`.
/// xhat = (x - mean) * rstd ; y = gamma[c] * xhat + beta[c].
template <class T, class GroupOf, class ChannelOf>
void norm_backward(const T* x, const T* g, const T* gamma, const NormStats& st, Index n,
                   Index channels, Index group_size, GroupOf group_of, ChannelOf channel_of, T* gx, T* ggamma,
                   T* gbeta, bool batch_stats) {
  const std::size_t ng = st.mean.size();
  std::vector<double> sum_g(ng, 0.0), sum_gx(ng, 0.0), acc_gamma(channels, 0.0),
      acc_beta(channels, 0.0);
  for (Index i = 0; i < n; ++i) {
    const Index grp = group_of(i), c = channel_of(i);
    const double xhat = (x[i] - st.mean[grp]) * st.rstd[grp];
    const double gh = static_cast<double>(g[i]) * gamma[c];
    sum_g[grp] += gh;
    sum_gx[grp] += gh * xhat;
    acc_gamma[c] += g[i] * xhat;
    acc_beta[c] += g[i];
  }
  for (Index c = 0; c < channels; ++c) {
    ggamma[c] = static_cast<T>(acc_gamma[c]);
    gbeta[c] = static_cast<T>(acc_beta[c]);
  }
  if (!gx) return;
  const double inv = 1.0 / static_cast<double>(group_size);
  for (Index i = 0; i < n; ++i) {
    const Index grp = group_of(i), c = channel_of(i);
    const double gh = static_cast<double>(g[i]) * gamma[c];
    if (!batch_stats) {
      gx[i] = static_cast<T>(gh * st.rstd[grp]);
      continue;
    }
    const double xhat = (x[i] - st.mean[grp]) * st.rstd[grp];
    gx[i] = static_cast<T>(st.rstd[grp] * (gh - inv * sum_g[grp] - xhat * inv * sum_gx[grp]));
  }
}

void require_affine(const char* op, const Var& gamma, const Var& beta, Index channels) {
  if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels})
    throw ShapeError(std::string(op) + ": affine parameters must have shape (" +
                     std::to_string(channels) + ")");
}

}  // namespace

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps) {
  if (x.rank() < 2) throw ShapeError("group_norm: expected (B,C,...)");
  const Index B = x.dim(0), C = x.dim(1);
  if (groups < 1 || C % groups != 0)
    throw SpecError("group_norm: " + std::to_string(C) + " channels not divisible into " +
                    std::to_string(groups) + " groups");
  require_affine("group_norm", gamma, beta, C);
  const Index S = x.value.numel() / (B * C);
  const Index gsize = (C / groups) * S;
  auto stats = std::make_shared<NormStats>();
  stats->mean.resize(B * groups);
  stats->rstd.resize(B * groups);
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xs = x.value.data<T>().data();
    const T* ga = gamma.value.data<T>().data();
    const T* be = beta.value.data<T>().data();
    T* os = out.mutable_data<T>().data();
    for (Index grp = 0; grp < B * groups; ++grp) {
      const T* p = xs + grp * gsize;
      double m = 0;
      for (Index i = 0; i < gsize; ++i) m += p[i];
      m /= static_cast<double>(gsize);
      double v = 0;
      for (Index i = 0; i < gsize; ++i) v += (p[i] - m) * (p[i] - m);
      v /= static_cast<double>(gsize);
      stats->mean[grp] = m;
      stats->rstd[grp] = 1.0 / std::sqrt(v + eps);
      for (Index i = 0; i < gsize; ++i) {
        const Index c = (grp % groups) * (C / groups) + i / S;
        os[grp * gsize + i] =
            static_cast<T>((p[i] - m) * stats->rstd[grp] * ga[c] + be[c]);
      }
    }
  });
  return Tape::record(
      "group_norm", std::move(out), {x, gamma, beta},
      [xv = x.value, gv = gamma.value, stats, C, S, gsize](const Tensor& g, GradSink& s) {
        Tensor gx(xv.shape(), g.dtype()), gg({C}, g.dtype()), gb({C}, g.dtype());
        dispatch(g.dtype(), [&]<class T>(T) {
          norm_backward<T>(
              xv.data<T>().data(), g.data<T>().data(), gv.data<T>().data(), *stats, xv.numel(), C,
              gsize, [gsize](Index i) { return i / gsize; },
              [C, S](Index i) { return (i / S) % C; },
              s.wants(0) ? gx.mutable_data<T>().data() : nullptr, gg.mutable_data<T>().data(),
              gb.mutable_data<T>().data(), true);
        });
        if (s.wants(0)) s.add(0, gx);
        s.add(1, gg);
        s.add(2, gb);
      });
}

BatchNormResult batch_norm(const Var& x, const Var& gamma, const Var& beta,
                           BatchNormState& state, bool training, double momentum, double eps) {
  if (x.rank() < 2) throw ShapeError("batch_norm: expected (B,C,...)");
  const Index B = x.dim(0), C = x.dim(1);
  require_affine("batch_norm", gamma, beta, C);
  if (state.running_mean.shape() != Shape{C} || state.running_var.shape() != Shape{C})
    throw ShapeError("batch_norm: running statistics must have " + std::to_string(C) +
                     " channels");
  const Index S = x.value.numel() / (B * C);
  const Index count = B * S;
  BatchNormResult result;
  auto stats = std::make_shared<NormStats>();
  stats->mean.assign(C, 0.0);
  stats->rstd.assign(C, 0.0);
  const double tracked = state.tracked_batches.defined() ? state.tracked_batches.item() : 0.0;
  if (!training && tracked <= 0) result.used_fallback_stats = true;
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xs = x.value.data<T>().data();
    const T* ga = gamma.value.data<T>().data();
    const T* be = beta.value.data<T>().data();
    T* os = out.mutable_data<T>().data();
    if (training) {
      std::vector<double> var(C, 0.0);
      for (Index b = 0; b < B; ++b)
        for (Index c = 0; c < C; ++c) {
          const T* p = xs + (b * C + c) * S;
          for (Index i = 0; i < S; ++i) stats->mean[c] += p[i];
        }
      for (Index c = 0; c < C; ++c) stats->mean[c] /= static_cast<double>(count);
      for (Index b = 0; b < B; ++b)
        for (Index c = 0; c < C; ++c) {
          const T* p = xs + (b * C + c) * S;
          for (Index i = 0; i < S; ++i) var[c] += (p[i] - stats->mean[c]) * (p[i] - stats->mean[c]);
        }
      T* rm = state.running_mean.mutable_data<T>().data();
      T* rv = state.running_var.mutable_data<T>().data();
      for (Index c = 0; c < C; ++c) {
        const double biased = var[c] / static_cast<double>(count);
        const double unbiased = count > 1 ? var[c] / static_cast<double>(count - 1) : biased;
        stats->rstd[c] = 1.0 / std::sqrt(biased + eps);
        rm[c] = static_cast<T>((1 - momentum) * rm[c] + momentum * stats->mean[c]);
        rv[c] = static_cast<T>((1 - momentum) * rv[c] + momentum * unbiased);
      }
      if (state.tracked_batches.defined()) state.tracked_batches.fill(tracked + 1);
    } else {
      const T* rm = state.running_mean.data<T>().data();
      const T* rv = state.running_var.data<T>().data();
      for (Index c = 0; c < C; ++c) {
        stats->mean[c] = result.used_fallback_stats ? 0.0 : rm[c];
        stats->rstd[c] = 1.0 / std::sqrt((result.used_fallback_stats ? 1.0 : rv[c]) + eps);
      }
    }
    for (Index b = 0; b < B; ++b)
      for (Index c = 0; c < C; ++c) {
        const Index off = (b * C + c) * S;
        for (Index i = 0; i < S; ++i)
          os[off + i] =
              static_cast<T>((xs[off + i] - stats->mean[c]) * stats->rstd[c] * ga[c] + be[c]);
      }
  });
  result.out = Tape::record(
      training ? "batch_norm_train" : "batch_norm_eval", std::move(out), {x, gamma, beta},
      [xv = x.value, gv = gamma.value, stats, C, S, count, training](const Tensor& g,
                                                                    GradSink& s) {
        Tensor gx(xv.shape(), g.dtype()), gg({C}, g.dtype()), gb({C}, g.dtype());
        dispatch(g.dtype(), [&]<class T>(T) {
          norm_backward<T>(
              xv.data<T>().data(), g.data<T>().data(), gv.data<T>().data(), *stats, xv.numel(), C,
              count, [C, S](Index i) { return (i / S) % C; },
              [C, S](Index i) { return (i / S) % C; },
              s.wants(0) ? gx.mutable_data<T>().data() : nullptr, gg.mutable_data<T>().data(),
              gb.mutable_data<T>().data(), training);
        });
        if (s.wants(0)) s.add(0, gx);
        s.add(1, gg);
        s.add(2, gb);
      });
  return result;
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Index C = x.dim(-1);
  require_affine("layer_norm", gamma, beta, C);
  const Index rows = x.value.numel() / C;
  auto stats = std::make_shared<NormStats>();
  stats->mean.resize(rows);
  stats->rstd.resize(rows);
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xs = x.value.data<T>().data();
    const T* ga = gamma.value.data<T>().data();
    const T* be = beta.value.data<T>().data();
    T* os = out.mutable_data<T>().data();
    for (Index r = 0; r < rows; ++r) {
      const T* p = xs + r * C;
      double m = 0;
      for (Index c = 0; c < C; ++c) m += p[c];
      m /= static_cast<double>(C);
      double v = 0;
      for (Index c = 0; c < C; ++c) v += (p[c] - m) * (p[c] - m);
      v /= static_cast<double>(C);
      stats->mean[r] = m;
      stats->rstd[r] = 1.0 / std::sqrt(v + eps);
      for (Index c = 0; c < C; ++c)
        os[r * C + c] = static_cast<T>((p[c] - m) * stats->rstd[r] * ga[c] + be[c]);
    }
  });
  return Tape::record("layer_norm", std::move(out), {x, gamma, beta},
                      [xv = x.value, gv = gamma.value, stats, C](const Tensor& g, GradSink& s) {
                        Tensor gx(xv.shape(), g.dtype()), gg({C}, g.dtype()), gb({C}, g.dtype());
                        dispatch(g.dtype(), [&]<class T>(T) {
                          norm_backward<T>(
                              xv.data<T>().data(), g.data<T>().data(), gv.data<T>().data(),
                              *stats, xv.numel(), C, C, [C](Index i) { return i / C; },
                              [C](Index i) { return i % C; },
                              s.wants(0) ? gx.mutable_data<T>().data() : nullptr,
                              gg.mutable_data<T>().data(), gb.mutable_data<T>().data(), true);
                        });
                        if (s.wants(0)) s.add(0, gx);
                        s.add(1, gg);
                        s.add(2, gb);
                      });
}

Var linear(const Var& x, const Var& w, const std::optional<Var>& bias) {
  if (w.rank() != 2) throw ShapeError("linear: weight must be (Fout, Fin)");
  const Index fin = w.dim(1), fout = w.dim(0);
  if (x.dim(-1) != fin)
    throw ShapeError("linear: trailing axis of input is " + std::to_string(x.dim(-1)) +
                     ", weight expects " + std::to_string(fin));
  if (bias && bias->shape() != Shape{fout})
    throw ShapeError("linear: bias must have shape (" + std::to_string(fout) + ")");
  const Index rows = x.value.numel() / fin;
  Shape out_shape = x.shape();
  out_shape.back() = fout;
  Tensor out(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    MapMat<T> o(out.mutable_data<T>().data(), rows, fout);
    o.noalias() = CMapMat<T>(x.value.data<T>().data(), rows, fin) *
                  CMapMat<T>(w.value.data<T>().data(), fout, fin).transpose();
    if (bias) {
      const T* b = bias->value.data<T>().data();
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < fout; ++c) o(r, c) += b[c];
    }
  });
  std::vector<Var> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return Tape::record("linear", std::move(out), inputs,
                      [xv = x.value, wv = w.value, rows, fin, fout](const Tensor& g, GradSink& s) {
                        dispatch(g.dtype(), [&]<class T>(T) {
                          CMapMat<T> gm(g.data<T>().data(), rows, fout);
                          if (s.wants(0)) {
                            Tensor gx(xv.shape(), g.dtype());
                            MapMat<T>(gx.mutable_data<T>().data(), rows, fin).noalias() =
                                gm * CMapMat<T>(wv.data<T>().data(), fout, fin);
                            s.add(0, gx);
                          }
                          if (s.wants(1)) {
                            Tensor gw(wv.shape(), g.dtype());
                            MapMat<T>(gw.mutable_data<T>().data(), fout, fin).noalias() =
                                gm.transpose() * CMapMat<T>(xv.data<T>().data(), rows, fin);
                            s.add(1, gw);
                          }
                          if (s.wants(2)) {
                            Tensor gb({fout}, g.dtype());
                            T* b = gb.mutable_data<T>().data();
                            for (Index r = 0; r < rows; ++r)
                              for (Index c = 0; c < fout; ++c) b[c] += gm(r, c);
                            s.add(2, gb);
                          }
                        });
                      });
}

namespace {

struct BatchLayout {
  Shape out_lead;
  std::vector<Index> a_off, b_off;  // per output batch, matrix offset into a / b
  Shape a_lead, b_lead;
};

BatchLayout batch_layout(const Shape& a, const Shape& b) {
  BatchLayout L;
  L.a_lead.assign(a.begin(), a.end() - 2);
  L.b_lead.assign(b.begin(), b.end() - 2);
  const std::size_t r = std::max(L.a_lead.size(), L.b_lead.size());
  Shape al(r - L.a_lead.size(), 1), bl(r - L.b_lead.size(), 1);
  al.insert(al.end(), L.a_lead.begin(), L.a_lead.end());
  bl.insert(bl.end(), L.b_lead.begin(), L.b_lead.end());
  L.out_lead.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (al[i] != bl[i] && al[i] != 1 && bl[i] != 1)
      throw ShapeError("matmul: leading dims " + to_string(a) + " and " + to_string(b) +
                       " do not broadcast");
    L.out_lead[i] = std::max(al[i], bl[i]);
  }
  const Index amat = a[a.size() - 2] * a.back(), bmat = b[b.size() - 2] * b.back();
  auto sa = contiguous_strides(al), sb = contiguous_strides(bl);
  for (std::size_t i = 0; i < r; ++i) {
    if (al[i] == 1) sa[i] = 0;
    if (bl[i] == 1) sb[i] = 0;
  }
  const Index nb = numel(L.out_lead);
  L.a_off.resize(nb);
  L.b_off.resize(nb);
  if (r == 0) {
    L.a_off[0] = L.b_off[0] = 0;
    return L;
  }
  walk(L.out_lead, sa, [&](Index f, Index o) { L.a_off[f] = o * amat; });
  walk(L.out_lead, sb, [&](Index f, Index o) { L.b_off[f] = o * bmat; });
  return L;
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul: operands must have rank >= 2");
  const Index m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k)
    throw ShapeError("matmul: inner dims differ, " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  auto layout = std::make_shared<BatchLayout>(batch_layout(a.shape(), b.shape()));
  Shape out_shape = layout->out_lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape, a.dtype());
  dispatch(a.dtype(), [&]<class T>(T) {
    const T* ap = a.value.data<T>().data();
    const T* bp = b.value.data<T>().data();
    T* op = out.mutable_data<T>().data();
    for (std::size_t i = 0; i < layout->a_off.size(); ++i)
      MapMat<T>(op + i * m * n, m, n).noalias() =
          CMapMat<T>(ap + layout->a_off[i], m, k) * CMapMat<T>(bp + layout->b_off[i], k, n);
  });
  return Tape::record(
      "matmul", std::move(out), {a, b},
      [av = a.value, bv = b.value, layout, m, k, n](const Tensor& g, GradSink& s) {
        dispatch(g.dtype(), [&]<class T>(T) {
          const T* gp = g.data<T>().data();
          const T* ap = av.data<T>().data();
          const T* bp = bv.data<T>().data();
          Tensor ga, gb;
          if (s.wants(0)) ga = Tensor(av.shape(), g.dtype());
          if (s.wants(1)) gb = Tensor(bv.shape(), g.dtype());
          for (std::size_t i = 0; i < layout->a_off.size(); ++i) {
            CMapMat<T> gm(gp + i * m * n, m, n);
            if (ga.defined())
              MapMat<T>(ga.mutable_data<T>().data() + layout->a_off[i], m, k).noalias() +=
                  gm * CMapMat<T>(bp + layout->b_off[i], k, n).transpose();
            if (gb.defined())
              MapMat<T>(gb.mutable_data<T>().data() + layout->b_off[i], k, n).noalias() +=
                  CMapMat<T>(ap + layout->a_off[i], m, k).transpose() * gm;
          }
          if (ga.defined()) s.add(0, ga);
          if (gb.defined()) s.add(1, gb);
        });
      });
}

Var relu(const Var& x) {
  fold_kink_pattern(x.value);
  Tensor out = dispatch(x.dtype(), [&]<class T>(T) {
    return map_unary(x.value, [](T v) { return v > T(0) ? v : T(0); });
  });
  return Tape::record("relu", std::move(out), {x}, [xv = x.value](const Tensor& g, GradSink& s) {
    s.add(0, dispatch(g.dtype(), [&]<class T>(T) {
            return map_binary(g, xv, [](T gv, T v) { return v > T(0) ? gv : T(0); });
          }));
  });
}

Var leaky_relu(const Var& x, double slope) {
  fold_kink_pattern(x.value);
  Tensor out = dispatch(x.dtype(), [&]<class T>(T) {
    const T a = static_cast<T>(slope);
    return map_unary(x.value, [a](T v) { return v >= T(0) ? v : a * v; });
  });
  return Tape::record("leaky_relu", std::move(out), {x},
                      [xv = x.value, slope](const Tensor& g, GradSink& s) {
                        s.add(0, dispatch(g.dtype(), [&]<class T>(T) {
                                const T a = static_cast<T>(slope);
                                return map_binary(g, xv,
                                                  [a](T gv, T v) { return v >= T(0) ? gv : a * gv; });
                              }));
                      });
}

namespace {

struct AxisView {
  Index outer, n, inner;
};

AxisView axis_view(const Shape& s, int axis) {
  AxisView v{1, s[axis], 1};
  for (int a = 0; a < axis; ++a) v.outer *= s[a];
  for (std::size_t a = axis + 1; a < s.size(); ++a) v.inner *= s[a];
  return v;
}

template <class T>
void softmax_rows(const T* x, T* y, const AxisView& v, bool log_space) {
  for (Index o = 0; o < v.outer; ++o)
    for (Index i = 0; i < v.inner; ++i) {
      const Index base = o * v.n * v.inner + i;
      T mx = x[base];
      for (Index j = 1; j < v.n; ++j) mx = std::max(mx, x[base + j * v.inner]);
      double z = 0;
      for (Index j = 0; j < v.n; ++j) z += std::exp(static_cast<double>(x[base + j * v.inner] - mx));
      const double lz = std::log(z);
      for (Index j = 0; j < v.n; ++j) {
        const double shifted = static_cast<double>(x[base + j * v.inner] - mx);
        y[base + j * v.inner] = static_cast<T>(log_space ? shifted - lz : std::exp(shifted) / z);
      }
    }
}

}  // namespace

Var softmax(const Var& x, int axis) {
  axis = normalize_axis(axis, x.rank());
  const AxisView v = axis_view(x.shape(), axis);
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    softmax_rows(x.value.data<T>().data(), out.mutable_data<T>().data(), v, false);
  });
  return Tape::record("softmax", out, {x}, [y = out, v](const Tensor& g, GradSink& s) {
    Tensor gx(y.shape(), y.dtype());
    dispatch(y.dtype(), [&]<class T>(T) {
      const T* ys = y.data<T>().data();
      const T* gs = g.data<T>().data();
      T* o = gx.mutable_data<T>().data();
      for (Index a = 0; a < v.outer; ++a)
        for (Index i = 0; i < v.inner; ++i) {
          const Index base = a * v.n * v.inner + i;
          double dot = 0;
          for (Index j = 0; j < v.n; ++j) dot += gs[base + j * v.inner] * ys[base + j * v.inner];
          for (Index j = 0; j < v.n; ++j) {
            const Index k = base + j * v.inner;
            o[k] = static_cast<T>(ys[k] * (gs[k] - dot));
          }
        }
    });
    s.add(0, gx);
  });
}

Var log_softmax(const Var& x, int axis) {
  axis = normalize_axis(axis, x.rank());
  const AxisView v = axis_view(x.shape(), axis);
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    softmax_rows(x.value.data<T>().data(), out.mutable_data<T>().data(), v, true);
  });
  return Tape::record("log_softmax", out, {x}, [y = out, v](const Tensor& g, GradSink& s) {
    Tensor gx(y.shape(), y.dtype());
    dispatch(y.dtype(), [&]<class T>(T) {
      const T* ys = y.data<T>().data();
      const T* gs = g.data<T>().data();
      T* o = gx.mutable_data<T>().data();
      for (Index a = 0; a < v.outer; ++a)
        for (Index i = 0; i < v.inner; ++i) {
          const Index base = a * v.n * v.inner + i;
          double total = 0;
          for (Index j = 0; j < v.n; ++j) total += gs[base + j * v.inner];
          for (Index j = 0; j < v.n; ++j) {
            const Index k = base + j * v.inner;
            o[k] = static_cast<T>(gs[k] - std::exp(static_cast<double>(ys[k])) * total);
          }
        }
    });
    s.add(0, gx);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  Tensor out = dispatch(a.dtype(), [&]<class T>(T) {
    return map_binary(a.value, b.value, [](T x, T y) { return x + y; });
  });
  return Tape::record("add", std::move(out), {a, b}, [](const Tensor& g, GradSink& s) {
    s.add(0, g);
    s.add(1, g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  Tensor out = dispatch(a.dtype(), [&]<class T>(T) {
    return map_binary(a.value, b.value, [](T x, T y) { return x - y; });
  });
  return Tape::record("sub", std::move(out), {a, b}, [](const Tensor& g, GradSink& s) {
    s.add(0, g);
    if (s.wants(1)) s.add(1, scaled(g, -1.0));
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  Tensor out = dispatch(a.dtype(), [&]<class T>(T) {
    return map_binary(a.value, b.value, [](T x, T y) { return x * y; });
  });
  return Tape::record("mul", std::move(out), {a, b},
                      [av = a.value, bv = b.value](const Tensor& g, GradSink& s) {
                        dispatch(g.dtype(), [&]<class T>(T) {
                          auto prod = [](T x, T y) { return x * y; };
                          if (s.wants(0)) s.add(0, map_binary(g, bv, prod));
                          if (s.wants(1)) s.add(1, map_binary(g, av, prod));
                        });
                      });
}

Var div(const Var& a, const Var& b) {
  require_same_shape("div", a, b);
  Tensor out = dispatch(a.dtype(), [&]<class T>(T) {
    return map_binary(a.value, b.value, [](T x, T y) { return x / y; });
  });
  return Tape::record("div", out, {a, b},
                      [q = out, bv = b.value](const Tensor& g, GradSink& s) {
                        dispatch(g.dtype(), [&]<class T>(T) {
                          Tensor gb = map_binary(g, bv, [](T x, T y) { return x / y; });
                          if (s.wants(1))
                            s.add(1, map_binary(gb, q, [](T x, T y) { return -x * y; }));
                          s.add(0, gb);
                        });
                      });
}

Var scale(const Var& x, double factor) {
  return Tape::record("scale", scaled(x.value, factor), {x},
                      [factor](const Tensor& g, GradSink& s) { s.add(0, scaled(g, factor)); });
}

Var add_scalar(const Var& x, double value) {
  Tensor out = dispatch(x.dtype(), [&]<class T>(T) {
    const T c = static_cast<T>(value);
    return map_unary(x.value, [c](T v) { return v + c; });
  });
  return Tape::record("add_scalar", std::move(out), {x},
                      [](const Tensor& g, GradSink& s) { s.add(0, g); });
}

Var square(const Var& x) {
  Tensor out =
      dispatch(x.dtype(), [&]<class T>(T) { return map_unary(x.value, [](T v) { return v * v; }); });
  return Tape::record("square", std::move(out), {x}, [xv = x.value](const Tensor& g, GradSink& s) {
    s.add(0, dispatch(g.dtype(), [&]<class T>(T) {
            return map_binary(g, xv, [](T gv, T v) { return T(2) * v * gv; });
          }));
  });
}

Var sum(const Var& x) {
  Tensor out({1}, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    double acc = 0;
    for (T v : x.value.data<T>()) acc += v;
    out.mutable_data<T>()[0] = static_cast<T>(acc);
  });
  return Tape::record("sum", std::move(out), {x}, [shape = x.shape()](const Tensor& g, GradSink& s) {
    s.add(0, Tensor::full(shape, g.item(), g.dtype()));
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value.numel())); }

Var sum_axes(const Var& x, const std::vector<int>& axes) {
  Shape out_shape = x.shape();
  for (int a : axes) out_shape[normalize_axis(a, x.rank())] = 1;
  Tensor out = sum_to(x.value, out_shape);
  return Tape::record("sum_axes", std::move(out), {x},
                      [shape = x.shape()](const Tensor& g, GradSink& s) {
                        Tensor gx(shape, g.dtype());
                        auto st = contiguous_strides(g.shape());
                        for (std::size_t a = 0; a < shape.size(); ++a)
                          if (g.shape()[a] == 1) st[a] = 0;
                        dispatch(g.dtype(), [&]<class T>(T) {
                          auto gs = g.data<T>();
                          auto o = gx.mutable_data<T>();
                          walk(shape, st, [&](Index flat, Index off) { o[flat] = gs[off]; });
                        });
                        s.add(0, gx);
                      });
}

Var concat(const std::vector<Var>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  axis = normalize_axis(axis, xs[0].rank());
  Shape out_shape = xs[0].shape();
  out_shape[axis] = 0;
  for (const auto& x : xs) {
    if (x.rank() != xs[0].rank()) throw ShapeError("concat: rank mismatch");
    for (int a = 0; a < x.rank(); ++a)
      if (a != axis && x.dim(a) != xs[0].dim(a))
        throw ShapeError("concat: axis " + std::to_string(a) + " differs: " +
                         to_string(x.shape()) + " vs " + to_string(xs[0].shape()));
    out_shape[axis] += x.dim(axis);
  }
  Index outer = 1, inner = 1;
  for (int a = 0; a < axis; ++a) outer *= out_shape[a];
  for (std::size_t a = axis + 1; a < out_shape.size(); ++a) inner *= out_shape[a];
  const Index out_row = out_shape[axis] * inner;
  Tensor out(out_shape, xs[0].dtype());
  std::vector<Index> sizes;
  dispatch(out.dtype(), [&]<class T>(T) {
    T* o = out.mutable_data<T>().data();
    Index col = 0;
    for (const auto& x : xs) {
      const Index row = x.dim(axis) * inner;
      const T* p = x.value.data<T>().data();
      for (Index r = 0; r < outer; ++r) std::copy(p + r * row, p + (r + 1) * row, o + r * out_row + col);
      col += row;
      sizes.push_back(x.dim(axis));
    }
  });
  std::vector<Shape> shapes;
  for (const auto& x : xs) shapes.push_back(x.shape());
  return Tape::record("concat", std::move(out), xs,
                      [shapes, outer, inner, out_row, axis](const Tensor& g, GradSink& s) {
                        dispatch(g.dtype(), [&]<class T>(T) {
                          const T* gp = g.data<T>().data();
                          Index col = 0;
                          for (std::size_t i = 0; i < shapes.size(); ++i) {
                            const Index row = shapes[i][axis] * inner;
                            if (s.wants(i)) {
                              Tensor gi(shapes[i], g.dtype());
                              T* d = gi.mutable_data<T>().data();
                              for (Index r = 0; r < outer; ++r)
                                std::copy(gp + r * out_row + col, gp + r * out_row + col + row,
                                          d + r * row);
                              s.add(i, gi);
                            }
                            col += row;
                          }
                        });
                      });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value.reshaped(std::move(shape));
  return Tape::record("reshape", std::move(out), {x},
                      [in_shape = x.shape()](const Tensor& g, GradSink& s) {
                        s.add(0, g.reshaped(in_shape));
                      });
}

Var expand(const Var& x, Shape shape) {
  if (shape.size() != x.shape().size())
    throw ShapeError("expand: rank of " + to_string(shape) + " differs from input " +
                     to_string(x.shape()));
  auto st = contiguous_strides(x.shape());
  for (std::size_t a = 0; a < shape.size(); ++a) {
    if (x.shape()[a] == shape[a]) continue;
    if (x.shape()[a] != 1)
      throw ShapeError("expand: axis " + std::to_string(a) + " of size " +
                       std::to_string(x.shape()[a]) + " cannot broadcast to " +
                       std::to_string(shape[a]));
    st[a] = 0;
  }
  Tensor out(shape, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    auto xs = x.value.data<T>();
    auto o = out.mutable_data<T>();
    walk(shape, st, [&](Index flat, Index off) { o[flat] = xs[off]; });
  });
  return Tape::record("expand", std::move(out), {x},
                      [in_shape = x.shape()](const Tensor& g, GradSink& s) {
                        s.add(0, sum_to(g, in_shape));
                      });
}

Var permute(const Var& x, const std::vector<int>& order) {
  const int r = x.rank();
  if (static_cast<int>(order.size()) != r) throw ShapeError("permute: order length != rank");
  std::vector<int> seen(r, 0);
  for (int a : order) {
    if (a < 0 || a >= r || seen[a]++) throw ShapeError("permute: invalid axis order");
  }
  const auto in_st = contiguous_strides(x.shape());
  Shape out_shape(r);
  std::vector<Index> st(r);
  for (int a = 0; a < r; ++a) {
    out_shape[a] = x.dim(order[a]);
    st[a] = in_st[order[a]];
  }
  Tensor out(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    auto xs = x.value.data<T>();
    auto o = out.mutable_data<T>();
    walk(out_shape, st, [&](Index flat, Index off) { o[flat] = xs[off]; });
  });
  return Tape::record("permute", std::move(out), {x},
                      [in_shape = x.shape(), out_shape, st](const Tensor& g, GradSink& s) {
                        Tensor gx(in_shape, g.dtype());
                        dispatch(g.dtype(), [&]<class T>(T) {
                          auto gs = g.data<T>();
                          auto o = gx.mutable_data<T>();
                          walk(out_shape, st, [&](Index flat, Index off) { o[off] = gs[flat]; });
                        });
                        s.add(0, gx);
                      });
}

Var narrow(const Var& x, int axis, std::int64_t start, std::int64_t length) {
  axis = normalize_axis(axis, x.rank());
  if (start < 0 || length < 1 || start + length > x.dim(axis))
    throw ShapeError("narrow: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") outside axis of size " +
                     std::to_string(x.dim(axis)));
  const AxisView v = axis_view(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Tensor out(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xs = x.value.data<T>().data();
    T* o = out.mutable_data<T>().data();
    for (Index r = 0; r < v.outer; ++r)
      std::copy(xs + (r * v.n + start) * v.inner, xs + (r * v.n + start + length) * v.inner,
                o + r * length * v.inner);
  });
  return Tape::record("narrow", std::move(out), {x},
                      [in_shape = x.shape(), v, start, length](const Tensor& g, GradSink& s) {
                        Tensor gx(in_shape, g.dtype());
                        dispatch(g.dtype(), [&]<class T>(T) {
                          const T* gs = g.data<T>().data();
                          T* o = gx.mutable_data<T>().data();
                          for (Index r = 0; r < v.outer; ++r)
                            std::copy(gs + r * length * v.inner, gs + (r + 1) * length * v.inner,
                                      o + (r * v.n + start) * v.inner);
                        });
                        s.add(0, gx);
                      });
}

}  // namespace gmln::ops
