#include "duplex/numerics/optim.hpp"

#include <cmath>

namespace duplex::num {

double AdamW::step(ParamStore& params, const std::map<std::string, float>& lr_by_group) {
  auto rate_for = [&](const std::string& group) {
    auto it = lr_by_group.find(group);
    return it == lr_by_group.end() ? 0.0F : it->second;
  };

  double sq = 0.0;
  for (auto& [name, p] : params.entries()) {
    if (rate_for(p.group) == 0.0F) continue;
    check_finite(p.grad, "gradient of " + name);
    for (float g : p.grad.values()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  const double clip =
      (cfg_.clip_norm > 0.0F && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;

  ++steps_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(steps_));

  for (auto& [name, p] : params.entries()) {
    const float lr = rate_for(p.group);
    if (lr == 0.0F) continue;
    Array& m = moments_[("m/" + name)];
    Array& v = moments_[("v/" + name)];
    if (m.shape() != p.value.shape()) m = Array(p.value.shape());
    if (v.shape() != p.value.shape()) v = Array(p.value.shape());
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i] * clip;
      m[i] = static_cast<float>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g);
      v[i] = static_cast<float>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double w = p.value[i];
      w -= lr * cfg_.weight_decay * w;
      w -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      p.value[i] = static_cast<float>(w);
    }
  }
  return norm;
}

}  // namespace duplex::num
