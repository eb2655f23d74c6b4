#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "motionmae/autodiff.hpp"
#include "motionmae/gradcheck.hpp"
#include "motionmae/model.hpp"
#include "motionmae/rng.hpp"
#include "motionmae/targets.hpp"
#include "motionmae/tokenizer.hpp"
#include "motionmae/training.hpp"
#include "motionmae/video.hpp"

namespace mmae {

struct GradCheckCase {
  std::string name;
  LossBuilder loss;
  std::vector<Tensor> params;
};

struct GradCheckLine {
  std::string name;
  GradCheckResult result;
  bool passed = false;
};

inline constexpr double kGradCheckTolerance = 1e-4;

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

// Contracts an op's output with fixed random weights so every output element
// contributes a distinct amount to the scalar.
inline Var project(Var y, const Tensor& w) { return ad::sum(ad::mul(y, y.tape->constant(w))); }

}  // namespace detail

// One case per differentiable primitive, each reduced to a scalar by a random projection.
inline std::vector<GradCheckCase> primitive_cases(std::uint64_t seed = 7) {
  using detail::project;
  using detail::random_tensor;
  Rng rng(seed);
  std::vector<GradCheckCase> cases;
  auto add_case = [&](std::string name, std::vector<Tensor> params, Shape out_shape, auto op) {
    Tensor w = random_tensor(std::move(out_shape), rng);
    cases.push_back({std::move(name),
                     [w, op](Tape&, std::span<const Var> p) { return project(op(p), w); },
                     std::move(params)});
  };

  add_case("matmul", {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}, {3, 2},
           [](auto p) { return ad::matmul(p[0], p[1]); });
  add_case("matmul_nt", {random_tensor({3, 4}, rng), random_tensor({2, 4}, rng)}, {3, 2},
           [](auto p) { return ad::matmul_nt(p[0], p[1]); });
  add_case("add", {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}, {3, 4},
           [](auto p) { return ad::add(p[0], p[1]); });
  add_case("sub", {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}, {3, 4},
           [](auto p) { return ad::sub(p[0], p[1]); });
  add_case("mul", {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}, {3, 4},
           [](auto p) { return ad::mul(p[0], p[1]); });
  add_case("scale", {random_tensor({3, 4}, rng)}, {3, 4}, [](auto p) { return ad::scale(p[0], -0.7); });
  add_case("add_bias", {random_tensor({3, 4}, rng), random_tensor({4}, rng)}, {3, 4},
           [](auto p) { return ad::add_bias(p[0], p[1]); });
  add_case("transpose", {random_tensor({3, 4}, rng)}, {4, 3}, [](auto p) { return ad::transpose(p[0]); });
  add_case("softmax_rows", {random_tensor({3, 4}, rng, -2.0, 2.0)}, {3, 4},
           [](auto p) { return ad::softmax(p[0], 1); });
  add_case("softmax_cols", {random_tensor({3, 4}, rng, -2.0, 2.0)}, {3, 4},
           [](auto p) { return ad::softmax(p[0], 0); });
  add_case("layer_norm", {random_tensor({3, 5}, rng), random_tensor({5}, rng, 0.5, 1.5), random_tensor({5}, rng)},
           {3, 5}, [](auto p) { return ad::layer_norm(p[0], p[1], p[2], 1e-6); });
  add_case("gelu", {random_tensor({3, 4}, rng, -3.0, 3.0)}, {3, 4}, [](auto p) { return ad::gelu(p[0]); });
  add_case("slice_cols", {random_tensor({3, 5}, rng)}, {3, 2}, [](auto p) { return ad::slice_cols(p[0], 1, 2); });
  add_case("concat_cols", {random_tensor({3, 2}, rng), random_tensor({3, 3}, rng)}, {3, 5},
           [](auto p) { return ad::concat_cols({p[0], p[1]}); });
  add_case("gather_rows", {random_tensor({4, 3}, rng)}, {3, 3},
           [](auto p) { return ad::gather_rows(p[0], {2, 0, 2}); });
  add_case("merge_rows", {random_tensor({2, 3}, rng), random_tensor({3}, rng)}, {5, 3},
           [](auto p) { return ad::merge_rows(p[0], {1, 3}, p[1], {0, 2, 4}, 5); });
  add_case("mean_rows", {random_tensor({4, 3}, rng)}, {1, 3}, [](auto p) { return ad::mean_rows(p[0]); });
  add_case("square", {random_tensor({3, 4}, rng)}, {3, 4}, [](auto p) { return ad::square(p[0]); });
  add_case("mean", {random_tensor({3, 4}, rng)}, {1}, [](auto p) { return ad::mean(p[0]); });

  const Tensor target = random_tensor({3, 4}, rng);
  for (LossKind kind : {LossKind::mse, LossKind::l1, LossKind::smooth_l1}) {
    // Offsets keep |pred - target| away from the kinks at 0 (L1) and 1 (Huber).
    Tensor pred = target;
    for (std::size_t i = 0; i < pred.numel(); ++i) pred[i] += (i % 2 ? 1.0 : -1.0) * (i % 3 ? 0.4 : 1.7);
    cases.push_back({"loss_" + std::string(loss_kind_name(kind)),
                     [target, kind](Tape&, std::span<const Var> p) { return ad::reconstruction_loss(p[0], target, kind); },
                     {pred}});
  }
  cases.push_back({"cross_entropy",
                   [](Tape&, std::span<const Var> p) { return ad::cross_entropy(p[0], 2); },
                   {random_tensor({1, 5}, rng, -2.0, 2.0)}});
  return cases;
}

// Tiny pretraining model (encoder depth 2, E=16, grid 2x2x2, both heads) and
// its masked objective with fixed clip and mask.
struct EndToEndSetup {
  Model model;
  Clip clip;
  Mask mask;
  CubeSize cube;
  TargetBundle targets;
  ModelState state;
};

inline EndToEndSetup end_to_end_setup(std::uint64_t seed = 11, double init_std = 0.3) {
  const CubeSize cube{2, 4};
  Rng rng(seed);
  Clip clip(4, 8, 8, 1);
  for (float& v : clip.data()) v = static_cast<float>(uniform01(rng));
  const TokenGrid grid = make_grid(4, 8, 8, 1, cube);
  EncoderConfig enc{2, 16, 2, 2, 0};
  DecoderConfig dec;
  dec.depth = 1, dec.embed_dim = 8, dec.heads = 2, dec.mlp_ratio = 2;
  Model model(make_model_config(grid, enc, dec, TargetKind::both, 0));
  const Mask mask = mask_from_indices(grid.count(), {1, 2, 4, 7});
  TargetConfig tc;
  TargetBundle targets = make_targets(clip, mask, grid, tc);
  ModelState state = model.init(seed, init_std);
  return {std::move(model), std::move(clip), mask, cube, std::move(targets), std::move(state)};
}

inline GradCheckCase end_to_end_case(std::uint64_t seed = 11) {
  auto setup = std::make_shared<EndToEndSetup>(end_to_end_setup(seed));
  GradCheckCase c;
  c.name = "end_to_end_masked_objective";
  c.params = setup->state.params;
  c.loss = [setup](Tape& tape, std::span<const Var> p) {
    const auto out = setup->model.forward_pretrain(tape, p, setup->clip, setup->mask, setup->cube);
    Var ls = masked_loss(*out.space, *setup->targets.space, setup->mask, LossKind::mse);
    Var lt = masked_loss(*out.time, *setup->targets.time, setup->mask, LossKind::mse);
    return total_loss(ls, lt, 1.0);
  };
  return c;
}

// Fourth-order differences at h = 1e-3: the end-to-end objective has gradient
// coordinates near 1e-8 that plain central differences cannot resolve to 1e-4.
inline std::vector<GradCheckLine> run_gradcheck_suite(double eps = 1e-3, Stencil stencil = Stencil::fourth_order) {
  auto cases = primitive_cases();
  cases.push_back(end_to_end_case());
  std::vector<GradCheckLine> lines;
  for (auto& c : cases) {
    GradCheckLine line{c.name, finite_diff_check(c.loss, c.params, eps, stencil), false};
    line.passed = line.result.max_rel_error < kGradCheckTolerance;
    lines.push_back(std::move(line));
  }
  return lines;
}

}  // namespace mmae
