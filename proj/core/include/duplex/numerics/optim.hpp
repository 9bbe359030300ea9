#pragma once

#include <map>
#include <string>

#include "duplex/numerics/params.hpp"

namespace duplex::num {

struct AdamWConfig {
  float beta1 = 0.9F;
  float beta2 = 0.999F;
  float eps = 1e-8F;
  float weight_decay = 0.0F;
  /// Global gradient-norm clip over the trainable groups; <= 0 disables.
  float clip_norm = 1.0F;
};

/// AdamW with per-group learning rates. Groups absent from the rate map (or
/// with rate 0) are frozen: their values and moments are never touched.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// Returns the pre-clip gradient norm over trainable parameters.
  double step(ParamStore& params, const std::map<std::string, float>& lr_by_group);

  std::size_t steps() const { return steps_; }
  void set_steps(std::size_t s) { steps_ = s; }
  const AdamWConfig& config() const { return cfg_; }

  /// Moment buffers keyed "m/<param>" and "v/<param>".
  std::map<std::string, Array>& moments() { return moments_; }
  const std::map<std::string, Array>& moments() const { return moments_; }

 private:
  AdamWConfig cfg_;
  std::size_t steps_ = 0;
  std::map<std::string, Array> moments_;
};

}  // namespace duplex::num
