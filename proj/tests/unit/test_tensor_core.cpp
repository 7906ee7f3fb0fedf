#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "gmln/gradcheck.hpp"
#include "gmln/gradsuite.hpp"
#include "gmln/ops.hpp"
#include "gmln/rng.hpp"
#include "oracles.hpp"

using namespace gmln;

namespace {

Var cst(Tensor t) { return constant(std::move(t)); }

std::vector<double> values(const Var& v) { return v.value.to_vector(); }

void expect_near_all(const std::vector<double>& got, const std::vector<double>& want, double tol) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], tol) << "index " << i;
}

}  // namespace

// ---- tensor basics ----

TEST(Tensor, RejectsNonPositiveDims) {
  EXPECT_THROW(Tensor({2, 0, 3}, DType::f32), ShapeError);
  EXPECT_THROW(Tensor::from_values({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
}

TEST(Tensor, DataLengthMatchesShape) {
  Tensor t({2, 3, 4, 5, 6}, DType::f32);
  EXPECT_EQ(t.numel(), 720);
  EXPECT_EQ(t.data<float>().size(), 720u);
  EXPECT_THROW(t.data<double>(), ContractError);
}

TEST(Tensor, RowMajorWidthFastest) {
  auto t = Tensor::from_values({1, 1, 2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  EXPECT_EQ(t.at(1), 1.0);  // (d0,h0,w1)
  EXPECT_EQ(t.at(2), 2.0);  // (d0,h1,w0)
}

TEST(Tape, RejectsMixedDtypes) {
  Tape tape;
  tape.leaf(Tensor::zeros({2}, DType::f64));
  EXPECT_THROW(tape.leaf(Tensor::zeros({2}, DType::f32)), ContractError);
}

// ---- conv3d ----

TEST(Conv3d, IdentityKernel) {
  Rng rng(1);
  auto x = random_uniform({2, 1, 3, 4, 5}, rng);
  auto spec = ConvSpec::cube(1, 1, 1);
  auto y = ops::conv3d(cst(x), cst(Tensor::full({1, 1, 1, 1, 1}, 1.0, DType::f64)),
                       cst(Tensor::zeros({1}, DType::f64)), spec);
  expect_near_all(values(y), x.to_vector(), 0.0);
}

TEST(Conv3d, SizeFormula) {
  auto x = Tensor::zeros({1, 2, 4, 4, 4}, DType::f64);
  auto spec = ConvSpec::cube(2, 3, 3, 1, 1);
  auto y = ops::conv3d(cst(x), cst(Tensor::zeros(spec.conv_weight_shape(), DType::f64)),
                       std::nullopt, spec);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 4, 4, 4}));
}

TEST(Conv3d, LineKernelExample) {
  ConvSpec spec;
  spec.kernel = {1, 1, 3};
  spec.padding = {0, 0, 1};
  auto x = Tensor::from_values({1, 1, 1, 1, 3}, {1, 2, 3});
  auto w = Tensor::full({1, 1, 1, 1, 3}, 1.0, DType::f64);
  auto ref = oracle::conv3d(x, w, nullptr, spec);
  // Frozen from the nested-loop oracle.
  expect_near_all(ref.to_vector(), {3, 6, 5}, 0.0);
  expect_near_all(values(ops::conv3d(cst(x), cst(w), std::nullopt, spec)), {3, 6, 5}, 1e-12);
}

TEST(Conv3d, ChannelMismatchNamesAxis) {
  auto spec = ConvSpec::cube(3, 2, 3, 1, 1);
  try {
    ops::conv3d(cst(Tensor::zeros({1, 2, 4, 4, 4}, DType::f64)),
                cst(Tensor::zeros(spec.conv_weight_shape(), DType::f64)), std::nullopt, spec);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos) << e.what();
  }
}

TEST(Conv3d, OutputMustBePositive) {
  auto spec = ConvSpec::cube(1, 1, 5);
  EXPECT_THROW(ops::conv3d(cst(Tensor::zeros({1, 1, 3, 8, 8}, DType::f64)),
                           cst(Tensor::zeros(spec.conv_weight_shape(), DType::f64)),
                           std::nullopt, spec),
               ShapeError);
}

TEST(ConvSpec, PaddingMustBeBelowKernel) {
  EXPECT_THROW(ConvSpec::cube(1, 1, 3, 1, 3).validate(false), SpecError);
}

// ---- conv_transpose3d ----

TEST(ConvTranspose3d, SizeExamples) {
  EXPECT_EQ(ConvSpec::cube(1, 1, 4, 2, 1, 0).transposed_output({8, 8, 8})[0], 16);
  EXPECT_EQ(ConvSpec::cube(1, 1, 3, 2, 1, 1).transposed_output({4, 4, 4})[0], 8);
}

TEST(ConvTranspose3d, ScatterExample) {
  ConvSpec spec;
  spec.kernel = {1, 1, 2};
  spec.stride = {1, 1, 2};
  auto x = Tensor::from_values({1, 1, 1, 1, 2}, {1, 2});
  auto w = Tensor::full({1, 1, 1, 1, 2}, 1.0, DType::f64);
  auto ref = oracle::conv_transpose3d(x, w, nullptr, spec);
  expect_near_all(ref.to_vector(), {1, 1, 2, 2}, 0.0);
  expect_near_all(values(ops::conv_transpose3d(cst(x), cst(w), std::nullopt, spec)),
                  {1, 1, 2, 2}, 1e-12);
}

TEST(ConvTranspose3d, OutputPaddingMustBeBelowStride) {
  auto spec = ConvSpec::cube(1, 1, 3, 2, 1, 2);
  EXPECT_THROW(ops::conv_transpose3d(cst(Tensor::zeros({1, 1, 2, 2, 2}, DType::f64)),
                                     cst(Tensor::zeros(spec.transposed_weight_shape(), DType::f64)),
                                     std::nullopt, spec),
               SpecError);
}

TEST(ConvTranspose3d, SizeLawGrid) {
  for (int k : {3, 4, 5})
    for (int s : {1, 2, 4})
      for (int p : {0, 1, 2})
        for (int op = 0; op < s; ++op) {
          if (p >= k) continue;
          auto spec = ConvSpec::cube(1, 2, k, s, p, op);
          for (std::int64_t in : {1, 2, 3}) {
            const std::int64_t want = (in - 1) * s - 2 * p + k + op;
            if (want < 1) continue;
            EXPECT_EQ(spec.transposed_output({in, in, in})[0], want);
            auto y = ops::conv_transpose3d(
                cst(Tensor::zeros({1, 1, in, in, in}, DType::f64)),
                cst(Tensor::zeros(spec.transposed_weight_shape(), DType::f64)), std::nullopt, spec);
            EXPECT_EQ(y.shape(), (Shape{1, 2, want, want, want}))
                << "k=" << k << " s=" << s << " p=" << p << " op=" << op << " in=" << in;
          }
        }
}

// ---- oracle equivalence, 100 random cases each ----

namespace {

struct RandomConvCase {
  Tensor x, w, b;
  ConvSpec spec;
};

RandomConvCase random_conv_case(Rng& rng, bool transposed) {
  for (;;) {
    ConvSpec spec;
    for (int a = 0; a < 3; ++a) {
      spec.kernel[a] = 1 + static_cast<int>(rng.below(4));
      spec.stride[a] = 1 + static_cast<int>(rng.below(3));
      spec.padding[a] = static_cast<int>(rng.below(spec.kernel[a]));
      spec.output_padding[a] = transposed ? static_cast<int>(rng.below(spec.stride[a])) : 0;
    }
    spec.in_channels = 1 + static_cast<int>(rng.below(3));
    spec.out_channels = 1 + static_cast<int>(rng.below(3));
    const std::int64_t B = 1 + rng.below(2);
    Dims3 in{1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6)};
    auto out = transposed ? spec.transposed_output(in) : spec.conv_output(in);
    bool ok = true;
    for (int a = 0; a < 3; ++a) ok = ok && out[a] >= 1 && out[a] <= 6;
    if (!ok) continue;
    RandomConvCase c;
    c.spec = spec;
    c.x = random_uniform({B, spec.in_channels, in[0], in[1], in[2]}, rng);
    c.w = random_uniform(transposed ? spec.transposed_weight_shape() : spec.conv_weight_shape(), rng);
    c.b = random_uniform({spec.out_channels}, rng);
    return c;
  }
}

}  // namespace

TEST(OracleEquivalence, Conv3dRandom) {
  Rng rng(101);
  for (int t = 0; t < 100; ++t) {
    auto c = random_conv_case(rng, false);
    auto got = kernels::conv3d(c.x, c.w, &c.b, c.spec);
    EXPECT_LE(oracle::max_abs_diff(got, oracle::conv3d(c.x, c.w, &c.b, c.spec)), 1e-10) << "case " << t;
  }
}

TEST(OracleEquivalence, ConvTranspose3dRandom) {
  Rng rng(202);
  for (int t = 0; t < 100; ++t) {
    auto c = random_conv_case(rng, true);
    auto got = kernels::conv_transpose3d(c.x, c.w, &c.b, c.spec);
    EXPECT_LE(oracle::max_abs_diff(got, oracle::conv_transpose3d(c.x, c.w, &c.b, c.spec)), 1e-10)
        << "case " << t;
  }
}

TEST(OracleEquivalence, AvgPool3dRandom) {
  Rng rng(303);
  for (int t = 0; t < 100; ++t) {
    const int k = 1 + static_cast<int>(rng.below(3));
    const int s = 1 + static_cast<int>(rng.below(2));
    const int p = static_cast<int>(rng.below(k));
    Shape shape{1 + rng.below(2), 1 + rng.below(3), 0, 0, 0};
    for (int a = 2; a < 5; ++a) shape[a] = std::max<std::int64_t>(k - 2 * p, 1) + rng.below(4);
    auto x = random_uniform(shape, rng);
    EXPECT_LE(oracle::max_abs_diff(kernels::avg_pool3d(x, k, s, p), oracle::avg_pool3d(x, k, s, p)),
              1e-10)
        << "case " << t;
  }
}

TEST(OracleEquivalence, TrilinearRandom) {
  Rng rng(404);
  for (int t = 0; t < 30; ++t) {
    const int f = 1 + static_cast<int>(rng.below(4));
    auto x = random_uniform({1, 2, 1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4)}, rng);
    auto y = ops::trilinear_upsample3d(cst(x), {f, f, f});
    EXPECT_LE(oracle::max_abs_diff(y.value, oracle::trilinear(x, {f, f, f})), 1e-12) << "case " << t;
  }
}

TEST(Adjoint, ConvTransposeIsAdjointOfConv) {
  Rng rng(505);
  for (int t = 0; t < 40; ++t) {
    auto c = random_conv_case(rng, false);
    const Dims3 in{c.x.dim(2), c.x.dim(3), c.x.dim(4)};
    auto out = c.spec.conv_output(in);
    ConvSpec tspec = c.spec;
    tspec.in_channels = c.spec.out_channels;
    tspec.out_channels = c.spec.in_channels;
    for (int a = 0; a < 3; ++a) {
      // Pick the output padding that maps back onto the original input size.
      const std::int64_t base = (out[a] - 1) * c.spec.stride[a] - 2 * c.spec.padding[a] + c.spec.kernel[a];
      tspec.output_padding[a] = static_cast<int>(in[a] - base);
    }
    auto y = random_uniform({c.x.dim(0), c.spec.out_channels, out[0], out[1], out[2]}, rng);
    const double lhs = oracle::dot(kernels::conv3d(c.x, c.w, nullptr, c.spec), y);
    const double rhs = oracle::dot(c.x, kernels::conv_transpose3d(y, c.w, nullptr, tspec));
    EXPECT_NEAR(lhs, rhs, 1e-8) << "case " << t;
  }
}

// ---- trilinear ----

TEST(Trilinear, ConstantStaysConstant) {
  auto x = Tensor::full({1, 2, 3, 3, 3}, 4.25, DType::f64);
  auto y = ops::trilinear_upsample3d(cst(x), {2, 2, 2});
  const auto v = values(y);
  for (double e : v) EXPECT_EQ(e, 4.25);
  double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  EXPECT_EQ(mean, 4.25);
}

TEST(Trilinear, LineExample) {
  auto x = Tensor::from_values({1, 1, 1, 1, 2}, {0, 2});
  auto ref = oracle::trilinear(x, {1, 1, 2});
  expect_near_all(ref.to_vector(), {0.0, 0.5, 1.5, 2.0}, 1e-15);
  expect_near_all(values(ops::trilinear_upsample3d(cst(x), {1, 1, 2})), {0.0, 0.5, 1.5, 2.0}, 1e-15);
}

TEST(Trilinear, DimsScale) {
  auto y = ops::trilinear_upsample3d(cst(Tensor::zeros({1, 3, 8, 8, 8})), {2, 2, 2});
  EXPECT_EQ(y.shape(), (Shape{1, 3, 16, 16, 16}));
}

TEST(Trilinear, StaysWithinInputRange) {
  Rng rng(606);
  for (int t = 0; t < 20; ++t) {
    auto x = random_uniform({1, 1, 3, 4, 2}, rng, -5, 5);
    auto xs = x.to_vector();
    const double lo = *std::min_element(xs.begin(), xs.end());
    const double hi = *std::max_element(xs.begin(), xs.end());
    for (double v : values(ops::trilinear_upsample3d(cst(x), {3, 2, 4}))) {
      EXPECT_GE(v, lo);
      EXPECT_LE(v, hi);
    }
  }
}

TEST(Trilinear, RejectsZeroFactor) {
  EXPECT_THROW(ops::trilinear_upsample3d(cst(Tensor::zeros({1, 1, 2, 2, 2})), {0, 1, 1}), SpecError);
}

// ---- pooling ----

TEST(AvgPool3d, ConstantInterior) {
  auto y = ops::avg_pool3d(cst(Tensor::full({1, 1, 5, 5, 5}, 2.0, DType::f64)));
  EXPECT_DOUBLE_EQ(y.value.at(((2 * 5) + 2) * 5 + 2), 2.0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 5, 5, 5}));
}

TEST(AvgPool3d, CenterImpulse) {
  auto x = Tensor::zeros({1, 1, 3, 3, 3}, DType::f64);
  x.mutable_data<double>()[13] = 1.0;
  EXPECT_NEAR(oracle::avg_pool3d(x, 3, 1, 1).at(13), 1.0 / 27.0, 1e-15);
  auto y = ops::avg_pool3d(cst(x));
  EXPECT_NEAR(y.value.at(13), 1.0 / 27.0, 1e-15);
  // Corner windows still divide by 27.
  EXPECT_NEAR(y.value.at(0), 1.0 / 27.0, 1e-15);
}

TEST(GlobalAvgPool, Examples) {
  auto x = Tensor::from_values({1, 1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(ops::global_avg_pool(cst(x)).value.item(), 2.5);
  auto y = ops::global_avg_pool(cst(Tensor::full({2, 64, 8, 8, 8}, 3.0)));
  EXPECT_EQ(y.shape(), (Shape{2, 64}));
  EXPECT_FLOAT_EQ(static_cast<float>(y.value.at(77)), 3.0f);
}

// ---- normalization ----

TEST(GroupNorm, GroupStatistics) {
  Rng rng(707);
  auto x = random_uniform({2, 8, 2, 3, 3}, rng, -3, 7);
  auto y = ops::group_norm(cst(x), 4, cst(Tensor::full({8}, 1.0, DType::f64)),
                           cst(Tensor::zeros({8}, DType::f64)));
  auto v = values(y);
  const std::int64_t group = 2 * 18;
  for (std::int64_t g = 0; g < 8; ++g) {
    double m = 0, s = 0;
    for (std::int64_t i = 0; i < group; ++i) m += v[g * group + i];
    m /= group;
    for (std::int64_t i = 0; i < group; ++i) s += (v[g * group + i] - m) * (v[g * group + i] - m);
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(s / group, 1.0, 1e-4);
  }
  // Already normalized input passes through up to the eps effect.
  auto z = ops::group_norm(y, 4, cst(Tensor::full({8}, 1.0, DType::f64)),
                           cst(Tensor::zeros({8}, DType::f64)));
  EXPECT_LE(oracle::max_abs_diff(z.value, y.value), 1e-4);
}

TEST(GroupNorm, ClosedForm) {
  auto x = Tensor::from_values({1, 2, 1, 1, 1}, {0, 2});
  auto y = ops::group_norm(cst(x), 1, cst(Tensor::full({2}, 1.0, DType::f64)),
                           cst(Tensor::zeros({2}, DType::f64)), 1e-12);
  expect_near_all(values(y), {-1, 1}, 1e-9);
}

TEST(GroupNorm, IndivisibleChannels) {
  EXPECT_THROW(ops::group_norm(cst(Tensor::zeros({1, 6, 1, 1, 1}, DType::f64)), 4,
                               cst(Tensor::full({6}, 1.0, DType::f64)),
                               cst(Tensor::zeros({6}, DType::f64))),
               SpecError);
}

namespace {
ops::BatchNormState fresh_state(std::int64_t c) {
  return {Tensor::zeros({c}, DType::f64), Tensor::full({c}, 1.0, DType::f64),
          Tensor::zeros({1}, DType::f64)};
}
}  // namespace

TEST(BatchNorm, TrainStatistics) {
  Rng rng(808);
  auto x = random_uniform({3, 2, 2, 2, 2}, rng, -1, 5);
  auto st = fresh_state(2);
  auto r = ops::batch_norm(cst(x), cst(Tensor::full({2}, 1.0, DType::f64)),
                           cst(Tensor::zeros({2}, DType::f64)), st, true);
  auto v = values(r.out);
  for (int c = 0; c < 2; ++c) {
    double m = 0, s = 0;
    int n = 0;
    for (int b = 0; b < 3; ++b)
      for (int i = 0; i < 8; ++i, ++n) m += v[(b * 2 + c) * 8 + i];
    m /= n;
    for (int b = 0; b < 3; ++b)
      for (int i = 0; i < 8; ++i) s += std::pow(v[(b * 2 + c) * 8 + i] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(s / n, 1.0, 1e-4);
  }
  EXPECT_EQ(st.tracked_batches.item(), 1.0);
  EXPECT_NE(st.running_mean.at(0), 0.0);
}

TEST(BatchNorm, EvalWithUnitStatsIsIdentity) {
  Rng rng(809);
  auto x = random_uniform({1, 2, 2, 2, 2}, rng);
  auto st = fresh_state(2);
  st.tracked_batches.fill(1.0);
  auto r = ops::batch_norm(cst(x), cst(Tensor::full({2}, 1.0, DType::f64)),
                           cst(Tensor::zeros({2}, DType::f64)), st, false);
  EXPECT_FALSE(r.used_fallback_stats);
  EXPECT_LE(oracle::max_abs_diff(r.out.value, x), 1e-5);
}

TEST(BatchNorm, ClosedFormAndFallback) {
  auto x = Tensor::from_values({2, 1, 1, 1, 1}, {1, 3});
  auto st = fresh_state(1);
  auto g = cst(Tensor::full({1}, 1.0, DType::f64));
  auto b = cst(Tensor::zeros({1}, DType::f64));
  auto ev = ops::batch_norm(cst(x), g, b, st, false);
  EXPECT_TRUE(ev.used_fallback_stats);
  auto tr = ops::batch_norm(cst(x), g, b, st, true, 0.1, 1e-12);
  expect_near_all(values(tr.out), {-1, 1}, 1e-9);
}

TEST(LayerNorm, Examples) {
  auto one = cst(Tensor::full({2}, 1.0, DType::f64));
  auto zero = cst(Tensor::zeros({2}, DType::f64));
  expect_near_all(values(ops::layer_norm(cst(Tensor::from_values({1, 2}, {0, 2})), one, zero, 1e-12)),
                  {-1, 1}, 1e-9);
  expect_near_all(values(ops::layer_norm(cst(Tensor::full({1, 2}, 5.0, DType::f64)), one, zero)),
                  {0, 0}, 0.0);
  auto y = ops::layer_norm(cst(Tensor::from_values({1, 2}, {0, 2})),
                           cst(Tensor::full({2}, 2.0, DType::f64)),
                           cst(Tensor::full({2}, 1.0, DType::f64)), 1e-12);
  expect_near_all(values(y), {-1, 3}, 1e-9);
}

// ---- dense algebra ----

TEST(Linear, Examples) {
  Rng rng(909);
  auto x = random_uniform({3, 4}, rng);
  auto eye = Tensor::zeros({4, 4}, DType::f64);
  for (int i = 0; i < 4; ++i) eye.mutable_data<double>()[i * 5] = 1.0;
  expect_near_all(values(ops::linear(cst(x), cst(eye), cst(Tensor::zeros({4}, DType::f64)))),
                  x.to_vector(), 0.0);
  auto y = ops::linear(cst(Tensor::from_values({2}, {1, 2})), cst(Tensor::from_values({1, 2}, {1, 1})),
                       cst(Tensor::from_values({1}, {1})));
  expect_near_all(values(y), {4}, 0.0);
  auto r = ops::linear(cst(Tensor::zeros({2, 4, 32})), cst(Tensor::zeros({16, 32})), std::nullopt);
  EXPECT_EQ(r.shape(), (Shape{2, 4, 16}));
  EXPECT_THROW(ops::linear(cst(Tensor::zeros({2, 5})), cst(Tensor::zeros({3, 4})), std::nullopt),
               ShapeError);
}

TEST(Matmul, Examples) {
  Rng rng(1001);
  auto b = random_uniform({2, 3}, rng);
  auto eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  expect_near_all(values(ops::matmul(cst(eye), cst(b))), b.to_vector(), 0.0);
  expect_near_all(values(ops::matmul(cst(Tensor::from_values({1, 2}, {1, 2})),
                                     cst(Tensor::from_values({2, 1}, {3, 4})))),
                  {11}, 0.0);
  auto s = ops::matmul(cst(Tensor::zeros({2, 4, 7, 5})), cst(Tensor::zeros({2, 4, 5, 7})));
  EXPECT_EQ(s.shape(), (Shape{2, 4, 7, 7}));
  EXPECT_THROW(ops::matmul(cst(Tensor::zeros({2, 3})), cst(Tensor::zeros({4, 2}))), ShapeError);
}

TEST(Matmul, BroadcastsLeadingDims) {
  Rng rng(1002);
  auto a = random_uniform({2, 3, 4}, rng);
  auto b = random_uniform({4, 5}, rng);
  auto y = ops::matmul(cst(a), cst(b)).value.to_vector();
  auto av = a.to_vector(), bv = b.to_vector();
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 5; ++j) {
        double acc = 0;
        for (int k = 0; k < 4; ++k) acc += av[(n * 3 + i) * 4 + k] * bv[k * 5 + j];
        EXPECT_NEAR(y[(n * 3 + i) * 5 + j], acc, 1e-12);
      }
}

// ---- pointwise ----

TEST(Softmax, Examples) {
  expect_near_all(values(ops::softmax(cst(Tensor::full({1, 5}, 0.3, DType::f64)), 1)),
                  std::vector<double>(5, 0.2), 1e-15);
  expect_near_all(values(ops::softmax(cst(Tensor::from_values({2}, {0, std::log(3.0)})), 0)),
                  {0.25, 0.75}, 1e-15);
}

TEST(Softmax, SumsToOneForLargeLogits) {
  Rng rng(1101);
  for (double mag : {1.0, 100.0, 1e4}) {
    auto x = random_uniform({3, 6, 4}, rng, -mag, mag);
    for (int axis : {0, 1, 2}) {
      auto y = ops::softmax(cst(x), axis).value;
      auto s = ops::sum_axes(cst(y), {axis}).value.to_vector();
      for (double v : s) EXPECT_NEAR(v, 1.0, 1e-6) << "mag " << mag << " axis " << axis;
      for (double v : y.to_vector()) EXPECT_TRUE(std::isfinite(v) && v >= 0.0);
    }
  }
}

TEST(Activation, Examples) {
  auto x = cst(Tensor::from_values({3}, {-1, 2, 0}));
  expect_near_all(values(ops::relu(x)), {0, 2, 0}, 0.0);
  expect_near_all(values(ops::leaky_relu(x, 0.01)), {-0.01, 2, 0}, 1e-16);
}

// ---- shape algebra ----

TEST(ShapeAlgebra, ConcatReshape) {
  std::vector<Var> parts(4, cst(Tensor::zeros({2, 16, 2, 2, 2})));
  EXPECT_EQ(ops::concat(parts, 1).shape(), (Shape{2, 64, 2, 2, 2}));
  auto r = ops::reshape(cst(Tensor::zeros({2, 4, 16, 2, 3, 4})), {2, 4, 16, 24});
  EXPECT_EQ(r.shape(), (Shape{2, 4, 16, 24}));
  EXPECT_THROW(ops::reshape(cst(Tensor::zeros({2, 3})), {7}), ShapeError);
  EXPECT_THROW(ops::concat({cst(Tensor::zeros({2, 3})), cst(Tensor::zeros({3, 3}))}, 1), ShapeError);
}

TEST(ShapeAlgebra, ExpandGradientSumsCopies) {
  Tape tape;
  auto x = tape.leaf(Tensor::from_values({1, 3}, {1, 2, 3}));
  auto y = ops::expand(x, {4, 3});
  tape.backward(ops::sum(ops::scale(y, 2.5)));
  expect_near_all(tape.grad(x).to_vector(), {10, 10, 10}, 1e-15);
}

TEST(ShapeAlgebra, PermuteNarrow) {
  auto x = Tensor::from_values({2, 3}, {0, 1, 2, 3, 4, 5});
  expect_near_all(values(ops::permute(cst(x), {1, 0})), {0, 3, 1, 4, 2, 5}, 0.0);
  expect_near_all(values(ops::narrow(cst(x), 1, 1, 2)), {1, 2, 4, 5}, 0.0);
}

// ---- backward ----

TEST(Backward, SumAndSquare) {
  Tape tape;
  auto x = tape.leaf(Tensor::from_values({2, 2}, {1, -2, 3, 0.5}));
  tape.backward(ops::sum(x));
  expect_near_all(tape.grad(x).to_vector(), {1, 1, 1, 1}, 0.0);

  Tape t2;
  auto y = t2.leaf(Tensor::from_values({2, 2}, {1, -2, 3, 0.5}));
  t2.backward(ops::scale(ops::sum(ops::square(y)), 0.5));
  expect_near_all(t2.grad(y).to_vector(), {1, -2, 3, 0.5}, 1e-15);
}

TEST(Backward, FanOutAccumulates) {
  Tape tape;
  auto x = tape.leaf(Tensor::from_values({2}, {1, 2}));
  auto y = ops::add(ops::mul(x, x), x);  // x^2 + x
  tape.backward(ops::sum(y));
  expect_near_all(tape.grad(x).to_vector(), {3, 5}, 1e-15);
}

TEST(Backward, NonScalarLoss) {
  Tape tape;
  auto x = tape.leaf(Tensor::zeros({2}, DType::f64));
  EXPECT_THROW(tape.backward(ops::scale(x, 2.0)), ContractError);
}

TEST(Backward, TopologicalOrder) {
  Tape tape;
  auto x = tape.leaf(Tensor::from_values({3}, {1, 2, 3}));
  auto y = ops::softmax(ops::scale(x, 2.0), 0);
  ops::sum(ops::mul(y, x));
  for (int id = 0; id < static_cast<int>(tape.size()); ++id)
    for (int in : tape.inputs_of(id)) EXPECT_LT(in, id);
}

TEST(Backward, ParameterGradShapes) {
  Tape tape;
  Rng rng(1201);
  auto spec = ConvSpec::cube(2, 3, 3, 2, 1);
  auto w = random_uniform(spec.conv_weight_shape(), rng);
  auto b = random_uniform({3}, rng);
  auto out = ops::conv3d(constant(random_uniform({1, 2, 5, 5, 5}, rng)), tape.leaf(w),
                         tape.leaf(b), spec);
  tape.backward(ops::mean(out));
  EXPECT_EQ(tape.grad_of(w).shape(), w.shape());
  EXPECT_EQ(tape.grad_of(b).shape(), b.shape());
}

// ---- grad_check ----

TEST(GradCheck, LinearIsExact) {
  Rng rng(1301);
  auto r = grad_check(
      [](Tape&, const std::vector<Var>& in) {
        return probe_loss(ops::linear(in[0], in[1], in[2]), 9);
      },
      {random_uniform({3, 4}, rng), random_uniform({2, 4}, rng), random_uniform({2}, rng)},
      // Central differences are exact for affine maps at any step; a wide step keeps
      // cancellation noise below the tolerance.
      {.step = 1e-2});
  EXPECT_LT(r.max_rel_error, 1e-10) << r.worst;
}

TEST(GradCheck, Conv3dExample) {
  Rng rng(1302);
  auto spec = ConvSpec::cube(2, 3, 3, 1, 1);
  auto r = grad_check(
      [&](Tape&, const std::vector<Var>& in) {
        return probe_loss(ops::conv3d(in[0], in[1], in[2], spec), 3);
      },
      {random_uniform({2, 2, 3, 4, 5}, rng), random_uniform(spec.conv_weight_shape(), rng),
       random_uniform({3}, rng)},
      {.step = 1e-5});
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(GradCheck, ReportsNonFinite) {
  EXPECT_THROW(grad_check([](Tape&, const std::vector<Var>& in) {
                 return ops::sum(ops::div(in[0], in[1]));
               },
                            {Tensor::from_values({1}, {1.0}), Tensor::from_values({1}, {0.0})}),
               NumericError);
}

TEST(GradCheck, RequiresFloat64) {
  EXPECT_THROW(grad_check([](Tape&, const std::vector<Var>& in) { return ops::sum(in[0]); },
                          {Tensor::zeros({2}, DType::f32)}),
               ContractError);
}

class EveryOp : public ::testing::TestWithParam<int> {};

TEST_P(EveryOp, PassesGradCheckOverThreeSeeds) {
  const auto cases = op_grad_cases();
  const auto& c = cases.at(GetParam());
  for (std::uint64_t seed : {11u, 22u, 33u}) {
    auto r = c.run(seed);
    EXPECT_LT(r.max_rel_error, 1e-4) << c.name << " seed " << seed << ": " << r.worst;
    EXPECT_GT(r.checked, 0);
  }
}

INSTANTIATE_TEST_SUITE_P(Ops, EveryOp, ::testing::Range(0, static_cast<int>(op_grad_cases().size())),
                         [](const auto& info) { return op_grad_cases()[info.param].name; });
