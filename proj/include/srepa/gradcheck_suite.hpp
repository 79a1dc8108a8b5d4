#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "srepa/align.hpp"
#include "srepa/flow.hpp"
#include "srepa/gradcheck.hpp"
#include "srepa/rng.hpp"

namespace srepa {

struct GradSuiteResult {
  std::string name;
  double max_rel_error = 0;
  bool passed = true;
};

// Finite-difference verification of every differentiable op and of each
// composed training loss, 10 seeded random instances per case. Losses are
// checked against the student path only; teacher inputs enter as constants,
// matching how gradients flow in training.
inline std::vector<GradSuiteResult> run_gradcheck_suite(std::uint64_t seed,
                                                        double tol) {
  std::vector<GradSuiteResult> results;
  RngStream rng(seed, 0x6c);

  auto sum_sq = [](Var<double> y) {
    return reduce_all(mul(y, y), Reduce::Sum);
  };

  auto run_case = [&](const std::string& name,
                      const std::vector<std::vector<std::size_t>>& shapes,
                      const CheckedFn& fn) {
    GradSuiteResult r;
    r.name = name;
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<Tensor<double>> point;
      for (const auto& s : shapes)
        point.push_back(Tensor<double>::random_uniform(s, rng));
      auto check = grad_check(name, fn, point, 1e-3, tol);
      r.max_rel_error = std::max(r.max_rel_error, check.max_rel_error);
      r.passed = r.passed && check.passed;
    }
    results.push_back(std::move(r));
  };

  using Vars = std::vector<Var<double>>;

  run_case("add", {{3, 2}, {3, 2}}, [&](Tape<double>&, const Vars& xs) {
    return sum_sq(add(xs[0], xs[1]));
  });
  run_case("sub", {{3, 2}, {3, 2}}, [&](Tape<double>&, const Vars& xs) {
    return sum_sq(sub(xs[0], xs[1]));
  });
  run_case("mul", {{3, 2}, {3, 2}}, [&](Tape<double>&, const Vars& xs) {
    return reduce_all(mul(xs[0], xs[1]), Reduce::Sum);
  });
  run_case("affine", {{3, 2}}, [&](Tape<double>&, const Vars& xs) {
    return reduce_all(affine(xs[0], 2.5, -0.5), Reduce::Sum);
  });
  run_case("matmul", {{3, 4}, {4, 2}}, [&](Tape<double>&, const Vars& xs) {
    return sum_sq(matmul(xs[0], xs[1]));
  });
  run_case("transpose", {{3, 2}}, [&](Tape<double>&, const Vars& xs) {
    return sum_sq(transpose(xs[0]));
  });
  run_case("row_l2_normalize", {{3, 4}}, [&](Tape<double>&, const Vars& xs) {
    return sum_sq(row_l2_normalize(xs[0]));
  });
  run_case("row_softmax", {{3, 4}}, [&](Tape<double>&, const Vars& xs) {
    return sum_sq(row_softmax(xs[0], 0.4));
  });
  run_case("silu", {{3, 4}}, [&](Tape<double>&, const Vars& xs) {
    return sum_sq(activation(xs[0], Activation::Silu));
  });
  run_case("gelu", {{3, 4}}, [&](Tape<double>&, const Vars& xs) {
    return sum_sq(activation(xs[0], Activation::Gelu));
  });
  run_case("tanh", {{3, 4}}, [&](Tape<double>&, const Vars& xs) {
    return sum_sq(activation(xs[0], Activation::Tanh));
  });
  run_case("layer_norm", {{3, 4}, {4}, {4}},
           [&](Tape<double>&, const Vars& xs) {
             return sum_sq(layer_norm(xs[0], xs[1], xs[2]));
           });
  run_case("reduce_mean", {{3, 4}}, [&](Tape<double>&, const Vars& xs) {
    return sum_sq(reduce_axis(xs[0], Reduce::Mean, 1));
  });
  run_case("extract_offdiagonal", {{4, 4}},
           [&](Tape<double>&, const Vars& xs) {
             return sum_sq(extract_offdiagonal(xs[0]));
           });
  run_case("log_floor", {{3, 4}}, [&](Tape<double>&, const Vars& xs) {
    return sum_sq(log_floor(affine(xs[0], 0.25, 2.0)));
  });
  run_case("slice_concat", {{3, 4}}, [&](Tape<double>&, const Vars& xs) {
    auto a = slice_cols(xs[0], 0, 2);
    auto b = slice_cols(xs[0], 2, 2);
    auto y = concat_cols<double>({b, a});
    return sum_sq(slice_rows(y, 1, 2));
  });
  run_case("repeat_rows", {{2, 4}}, [&](Tape<double>&, const Vars& xs) {
    return sum_sq(repeat_rows(xs[0], 3));
  });
  run_case("add_row_broadcast", {{3, 4}, {4}},
           [&](Tape<double>&, const Vars& xs) {
             return sum_sq(add_row_broadcast(xs[0], xs[1]));
           });

  // Composed losses. Teacher features and flow endpoints are constants in
  // training, so they are fixed per trial rather than differentiated.
  auto run_loss_case =
      [&](const std::string& name,
          const std::vector<std::vector<std::size_t>>& input_shapes,
          const std::vector<std::vector<std::size_t>>& const_shapes,
          auto build) {
        GradSuiteResult r;
        r.name = name;
        // centered points: all-positive features would make every row pair
        // nearly parallel and drown the small gradients in FD noise
        auto centered = [&](const std::vector<std::size_t>& s) {
          auto t = Tensor<double>::random_uniform(s, rng);
          for (auto& v : t.data) v = 2.0 * v - 1.0;
          return t;
        };
        for (int trial = 0; trial < 10; ++trial) {
          std::vector<Tensor<double>> point, constants;
          for (const auto& s : input_shapes) point.push_back(centered(s));
          for (const auto& s : const_shapes) constants.push_back(centered(s));
          CheckedFn fn = [&constants, build](Tape<double>& tape,
                                             const Vars& xs) {
            return build(tape, xs, constants);
          };
          auto check = grad_check(name, fn, point, 1e-3, tol);
          r.max_rel_error = std::max(r.max_rel_error, check.max_rel_error);
          r.passed = r.passed && check.passed;
        }
        results.push_back(std::move(r));
      };

  run_loss_case("flow_matching_loss", {{4, 3}}, {{4, 3}, {4, 3}},
                [](Tape<double>&, const Vars& xs,
                   const std::vector<Tensor<double>>& consts) {
                  return fm_loss(xs[0], consts[0], consts[1]);
                });

  for (std::size_t n : {2, 3, 4, 5}) {
    auto align_case = [&](const char* label, LossWeights<double> w,
                          auto pick) {
      run_loss_case(
          label + std::string("_n") + std::to_string(n), {{n, 3}}, {{n, 3}},
          [w, pick](Tape<double>& tape, const Vars& xs,
                    const std::vector<Tensor<double>>& consts) {
            FeatureMap<double> teacher{make_constant(tape, consts[0]),
                                       FeatureKind::TeacherRaw};
            FeatureMap<double> student{xs[0], FeatureKind::StudentRaw};
            return pick(total_alignment_loss(teacher, student, w));
          });
    };
    LossWeights<double> pw{1.0, 0.0, StrucVariant::None, 0.2, 0.2};
    align_case("pointwise_alignment", pw,
               [](const AlignmentLossBreakdown<double>& b) {
                 return b.loss_proj;
               });
    LossWeights<double> mse{0.0, 1.0, StrucVariant::Mse, 0.2, 0.2};
    align_case("gram_mse", mse, [](const AlignmentLossBreakdown<double>& b) {
      return b.loss_struc;
    });
    LossWeights<double> kl{0.0, 1.0, StrucVariant::Kl, 0.2, 0.4};
    align_case("relational_kl", kl,
               [](const AlignmentLossBreakdown<double>& b) {
                 return b.loss_struc;
               });
    LossWeights<double> total_mse{1.0, 2.0, StrucVariant::Mse, 0.2, 0.2};
    align_case("combined_mse", total_mse,
               [](const AlignmentLossBreakdown<double>& b) {
                 return b.combined;
               });
    LossWeights<double> total_kl{1.0, 0.5, StrucVariant::Kl, 0.2, 0.2};
    align_case("combined_kl", total_kl,
               [](const AlignmentLossBreakdown<double>& b) {
                 return b.combined;
               });

    // full objective: flow matching plus weighted alignment
    run_loss_case(
        "total_objective_n" + std::to_string(n), {{n, 3}, {n, 3}},
        {{n, 3}, {n, 3}, {n, 3}},
        [](Tape<double>& tape, const Vars& xs,
           const std::vector<Tensor<double>>& consts) {
          FeatureMap<double> teacher{make_constant(tape, consts[0]),
                                     FeatureKind::TeacherRaw};
          FeatureMap<double> student{xs[1], FeatureKind::StudentRaw};
          LossWeights<double> w{1.0, 2.0, StrucVariant::Mse, 0.2, 0.2};
          auto breakdown = total_alignment_loss(teacher, student, w);
          auto fm = fm_loss(xs[0], consts[1], consts[2]);
          return total_training_loss(fm, breakdown);
        });
  }

  return results;
}

}  // namespace srepa
