#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "duplex/numerics/params.hpp"
#include "duplex/numerics/tape.hpp"

namespace duplex::num {

struct GradCheckReport {
  /// Max over parameter tensors of |a - c| / (|a| + |c| + 1e-8), where a and c
  /// are the analytic and central-difference gradients of that tensor and
  /// |.| is the Euclidean norm over the checked elements.
  double max_rel_err = 0.0;
  std::string worst_param;
  /// Largest per-element absolute disagreement, for diagnostics.
  double max_abs_err = 0.0;
  std::size_t elements_checked = 0;
};

/// Builds a scalar loss on the given tape from the current parameter values.
using LossBuilder = std::function<Var(Tape&, ParamStore&)>;

/// Central-difference stencil. The five-point form cancels the eps^2
/// truncation term, so a larger eps can lift the difference above f32
/// round-off in deep losses.
enum class Stencil { three_point, five_point };

/// Compares reverse-mode gradients against central differences. `eps` must
/// lie in [1e-4, 1e-2]. At most `max_per_param` evenly strided elements of
/// each tensor are perturbed (0 = all). Throws if two evaluations of the loss
/// at the same point disagree.
GradCheckReport finite_diff_grad_check(const LossBuilder& loss, ParamStore& params, float eps,
                                       std::size_t max_per_param = 0,
                                       Stencil stencil = Stencil::three_point);

}  // namespace duplex::num
