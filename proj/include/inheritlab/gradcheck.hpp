#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "inheritlab/tape.hpp"

namespace ilab {

// Builds a scalar loss on `tape` from leaves holding the given inputs.
using LossBuilder = std::function<Var(Tape& tape, std::span<const Var> inputs)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t entries = 0;
};

// Compares reverse-mode gradients of `build` against central differences with
// step h. Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckResult gradcheck(const std::vector<Tensor>& inputs, const LossBuilder& build,
                          double h = 1e-5, double floor = 1e-6);

struct PrimitiveCheck {
  std::string op;
  std::size_t cases = 0;
  double max_rel_error = 0.0;
};

// Runs `cases` random gradient checks for every differentiable primitive.
std::vector<PrimitiveCheck> check_all_primitives(std::uint64_t seed, std::size_t cases);

}  // namespace ilab
