#include "gmln/gradsuite.hpp"

#include <chrono>

#include "gmln/model.hpp"
#include "gmln/ops.hpp"
#include "gmln/rng.hpp"

namespace gmln {

namespace {

// A check over fresh random inputs of the given shapes.
GradCase op_case(std::string name, std::vector<Shape> shapes, TensorProgram program) {
  return {name, [name, shapes, program](std::uint64_t seed) {
            Rng rng(seed, name);
            std::vector<Tensor> inputs;
            for (const auto& s : shapes) inputs.push_back(random_uniform(s, rng));
            return grad_check(program, inputs, {.step = 1e-5, .max_coords_per_input = 64, .seed = seed});
          }};
}

std::vector<Tensor> with_params(Tensor x, const ParamRegistry& reg) {
  std::vector<Tensor> in{std::move(x)};
  for (const auto& e : reg.parameters()) in.push_back(e.value);
  return in;
}

}  // namespace

std::vector<GradCase> op_grad_cases() {
  auto conv = ConvSpec::cube(2, 2, 3, 2, 1);
  auto convt = ConvSpec::cube(2, 3, 3, 2, 1, 1);
  return {
      op_case("conv3d", {{1, 2, 4, 3, 5}, conv.conv_weight_shape(), {2}},
              [conv](Tape&, const std::vector<Var>& v) { return probe_loss(ops::conv3d(v[0], v[1], v[2], conv), 1); }),
      op_case("conv_transpose3d", {{1, 2, 2, 3, 2}, convt.transposed_weight_shape(), {3}},
              [convt](Tape&, const std::vector<Var>& v) {
                return probe_loss(ops::conv_transpose3d(v[0], v[1], v[2], convt), 2);
              }),
      op_case("trilinear", {{1, 2, 2, 3, 2}},
              [](Tape&, const std::vector<Var>& v) { return probe_loss(ops::trilinear_upsample3d(v[0], {2, 3, 1}), 3); }),
      op_case("avg_pool3d", {{1, 2, 3, 3, 4}},
              [](Tape&, const std::vector<Var>& v) { return probe_loss(ops::avg_pool3d(v[0]), 4); }),
      op_case("global_avg_pool", {{2, 3, 2, 2, 2}},
              [](Tape&, const std::vector<Var>& v) { return probe_loss(ops::global_avg_pool(v[0]), 5); }),
      op_case("group_norm", {{2, 4, 2, 2, 2}, {4}, {4}},
              [](Tape&, const std::vector<Var>& v) { return probe_loss(ops::group_norm(v[0], 2, v[1], v[2]), 6); }),
      op_case("batch_norm", {{2, 3, 2, 1, 2}, {3}, {3}},
              [](Tape&, const std::vector<Var>& v) {
                ops::BatchNormState st{Tensor::zeros({3}, DType::f64), Tensor::full({3}, 1.0, DType::f64),
                                       Tensor::zeros({1}, DType::f64)};
                return probe_loss(ops::batch_norm(v[0], v[1], v[2], st, true).out, 7);
              }),
      op_case("layer_norm", {{3, 5}, {5}, {5}},
              [](Tape&, const std::vector<Var>& v) { return probe_loss(ops::layer_norm(v[0], v[1], v[2]), 8); }),
      op_case("linear", {{2, 3, 4}, {5, 4}, {5}},
              [](Tape&, const std::vector<Var>& v) { return probe_loss(ops::linear(v[0], v[1], v[2]), 9); }),
      op_case("matmul", {{2, 3, 4}, {2, 4, 2}},
              [](Tape&, const std::vector<Var>& v) { return probe_loss(ops::matmul(v[0], v[1]), 10); }),
      op_case("matmul_broadcast", {{2, 3, 4}, {4, 2}},
              [](Tape&, const std::vector<Var>& v) { return probe_loss(ops::matmul(v[0], v[1]), 11); }),
      op_case("relu", {{4, 5}}, [](Tape&, const std::vector<Var>& v) { return probe_loss(ops::relu(v[0]), 12); }),
      op_case("leaky_relu", {{4, 5}},
              [](Tape&, const std::vector<Var>& v) { return probe_loss(ops::leaky_relu(v[0], 0.01), 13); }),
      op_case("softmax", {{3, 4}}, [](Tape&, const std::vector<Var>& v) { return probe_loss(ops::softmax(v[0], 1), 14); }),
      op_case("log_softmax", {{3, 4}},
              [](Tape&, const std::vector<Var>& v) { return probe_loss(ops::log_softmax(v[0], 0), 15); }),
      op_case("add_sub_mul", {{3, 2}, {3, 2}},
              [](Tape&, const std::vector<Var>& v) {
                return probe_loss(ops::mul(ops::add(v[0], v[1]), ops::sub(v[0], v[1])), 16);
              }),
      op_case("div", {{3, 2}, {3, 2}},
              [](Tape&, const std::vector<Var>& v) {
                return probe_loss(ops::div(v[0], ops::add_scalar(ops::square(v[1]), 1.0)), 17);
              }),
      op_case("scale_sum_mean", {{3, 2}},
              [](Tape&, const std::vector<Var>& v) {
                return ops::add(ops::scale(ops::sum(ops::square(v[0])), 0.3), ops::mean(v[0]));
              }),
      op_case("sum_axes", {{2, 3, 4}},
              [](Tape&, const std::vector<Var>& v) { return probe_loss(ops::sum_axes(v[0], {0, 2}), 18); }),
      op_case("concat", {{2, 1, 3}, {2, 2, 3}},
              [](Tape&, const std::vector<Var>& v) { return probe_loss(ops::concat({v[0], v[1], v[0]}, 1), 19); }),
      op_case("reshape_permute", {{2, 3, 4}},
              [](Tape&, const std::vector<Var>& v) {
                return probe_loss(ops::permute(ops::reshape(v[0], {6, 4}), {1, 0}), 20);
              }),
      op_case("expand", {{2, 1, 3}},
              [](Tape&, const std::vector<Var>& v) { return probe_loss(ops::expand(v[0], {2, 4, 3}), 21); }),
      op_case("narrow", {{2, 5}},
              [](Tape&, const std::vector<Var>& v) { return probe_loss(ops::narrow(v[0], 1, 1, 3), 22); }),
  };
}

std::vector<GradCase> block_grad_cases(bool include_model) {
  std::vector<GradCase> cases{
      {"M2AE",
       [](std::uint64_t seed) {
         ParamRegistry reg(DType::f64, seed);
         M2ae enc(reg, "e", {.in_channels = 1, .out_channels = 8, .groups = 2});
         Rng rng(seed, "m2ae-input");
         return grad_check(
             [&](Tape& tape, const std::vector<Var>& in) { return probe_loss(enc(Context{&tape, true}, in[0]), seed); },
             with_params(random_uniform({1, 1, 5, 5, 5}, rng), reg),
             {.step = 1e-5, .max_coords_per_input = 12, .seed = seed});
       }},
      {"G2MCIM",
       [](std::uint64_t seed) {
         ParamRegistry reg(DType::f64, seed);
         G2mcim g(reg, "g", 2);
         Rng rng(seed, "g2-input");
         std::vector<Tensor> in;
         for (int i = 0; i < 4; ++i) in.push_back(random_uniform({1, 2, 2, 2, 2}, rng));
         for (const auto& e : reg.parameters()) in.push_back(e.value);
         // The relation output bias is shift-invariant under the sender softmax.
         return grad_check(
             [&](Tape& tape, const std::vector<Var>& v) {
               return probe_loss(g(Context{&tape, true}, {v[0], v[1], v[2], v[3]}), seed);
             },
             in, {.step = 1e-5, .max_coords_per_input = 16, .seed = seed, .zero_tolerance = 1e-8});
       }},
      {"transformer_stage",
       [](std::uint64_t seed) {
         ParamRegistry reg(DType::f64, seed);
         StageSpec spec{.in_channels = 2, .dim = 4, .patch_kernel = 2, .patch_stride = 2,
                        .heads = 2, .blocks = 1, .reduction = 2, .mlp_hidden = 6};
         TransformerStage st(reg, "s", spec);
         Rng rng(seed, "stage-input");
         return grad_check(
             [&](Tape& tape, const std::vector<Var>& in) { return probe_loss(st(Context{&tape, true}, in[0]), seed); },
             with_params(random_uniform({1, 2, 4, 4, 4}, rng), reg),
             {.step = 1e-5, .max_coords_per_input = 12, .seed = seed});
       }},
  };
  for (int f : {2, 4})
    cases.push_back({"VRUM_x" + std::to_string(f), [f](std::uint64_t seed) {
                       ParamRegistry reg(DType::f64, seed);
                       Vrum up(reg, "u", {.in_channels = 2, .out_channels = 2, .factor = f});
                       Rng rng(seed, "vrum-input");
                       // The fuse conv bias is cancelled by the following batch norm.
                       return grad_check(
                           [&](Tape& tape, const std::vector<Var>& in) {
                             return probe_loss(up(Context{&tape, true}, in[0]), seed);
                           },
                           with_params(random_uniform({2, 2, 2, 2, 2}, rng), reg),
                           {.step = 1e-5, .max_coords_per_input = 12, .seed = seed, .zero_tolerance = 1e-8});
                     }});
  if (include_model)
    cases.push_back({"full_model_tiny", [](std::uint64_t seed) {
                       auto cfg = ModelConfig::tiny();
                       cfg.dtype = DType::f64;
                       cfg.seed = seed;
                       GmlnModel model(cfg);
                       Rng rng(seed, "model-input");
                       return grad_check(
                           [&](Tape& tape, const std::vector<Var>& in) {
                             // One output voxel; it still depends on every parameter.
                             auto y = model.forward(Context{&tape, true}, in[0]);
                             for (int a = 2; a < 5; ++a) y = ops::narrow(y, a, 4, 1);
                             return probe_loss(y, seed);
                           },
                           with_params(random_uniform({1, 4, 16, 16, 16}, rng, 0, 2), model.registry()),
                           {.step = 1e-5, .max_coords_per_input = 2, .seed = seed, .zero_tolerance = 1e-8});
                     }});
  return cases;
}

std::vector<GradSuiteRow> run_grad_suite(const std::vector<GradCase>& cases, const std::vector<std::uint64_t>& seeds) {
  std::vector<GradSuiteRow> rows;
  for (const auto& c : cases) {
    GradSuiteRow row;
    row.name = c.name;
    const auto t0 = std::chrono::steady_clock::now();
    for (auto seed : seeds) {
      const auto r = c.run(seed);
      row.checked += r.checked;
      if (r.max_rel_error >= row.max_rel_error) {
        row.max_rel_error = r.max_rel_error;
        row.worst = "seed " + std::to_string(seed) + ": " + r.worst;
      }
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace gmln
