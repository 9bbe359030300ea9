#include "duplex/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace duplex::num {

namespace {

double evaluate(const LossBuilder& loss, ParamStore& params) {
  Tape tape(false);
  Var l = loss(tape, params);
  if (l.value().size() != 1) throw NumericError("grad check: loss is not scalar");
  return l.value()[0];
}

}  // namespace

GradCheckReport finite_diff_grad_check(const LossBuilder& loss, ParamStore& params, float eps,
                                       std::size_t max_per_param, Stencil stencil) {
  if (!(eps >= 1e-4F && eps <= 1e-2F)) {
    throw NumericError("grad check: eps " + std::to_string(eps) + " outside [1e-4, 1e-2]");
  }
  const double base = evaluate(loss, params);
  if (evaluate(loss, params) != base) {
    throw NumericError("grad check: loss is not deterministic");
  }

  params.zero_grad();
  {
    Tape tape(true);
    Var l = loss(tape, params);
    tape.backward(l);
  }

  GradCheckReport report;
  for (auto& [name, p] : params.entries()) {
    const std::size_t n = p.value.size();
    const std::size_t stride =
        (max_per_param == 0 || n <= max_per_param) ? 1 : (n + max_per_param - 1) / max_per_param;
    double diff_sq = 0.0;
    double a_sq = 0.0;
    double c_sq = 0.0;
    for (std::size_t i = 0; i < n; i += stride) {
      const float orig = p.value[i];
      auto at = [&](float offset) {
        p.value[i] = orig + offset;
        const double f = evaluate(loss, params);
        p.value[i] = orig;
        return f;
      };
      // step measured on the stored f32 values, not the nominal eps
      const double h = (static_cast<double>(orig + eps) - static_cast<double>(orig - eps)) / 2.0;
      double central = (at(eps) - at(-eps)) / (2.0 * h);
      if (stencil == Stencil::five_point) {
        central = (8.0 * (at(eps) - at(-eps)) - (at(2.0F * eps) - at(-2.0F * eps))) / (12.0 * h);
      }
      const double analytic = p.grad[i];
      diff_sq += (analytic - central) * (analytic - central);
      a_sq += analytic * analytic;
      c_sq += central * central;
      report.max_abs_err = std::max(report.max_abs_err, std::abs(analytic - central));
      ++report.elements_checked;
    }
    const double rel = std::sqrt(diff_sq) / (std::sqrt(a_sq) + std::sqrt(c_sq) + 1e-8);
    if (report.worst_param.empty() || rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_param = name;
    }
  }
  return report;
}

}  // namespace duplex::num
