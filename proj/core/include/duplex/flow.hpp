#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "duplex/numerics/array.hpp"
#include "duplex/numerics/tape.hpp"

namespace duplex::flow {

class FlowError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// (1 - t) x0 + t x1
num::Array ot_interpolate(const num::Array& x0, const num::Array& x1, float t);
/// Chunked version: rows [c * rows_per_chunk, (c+1) * rows_per_chunk) use t[c].
num::Array ot_interpolate_chunks(const num::Array& x0, const num::Array& x1,
                                 const std::vector<float>& t_chunks, std::size_t rows_per_chunk);
/// x1 - x0
num::Array fm_target(const num::Array& x0, const num::Array& x1);
/// Mean squared error of v_pred against x1 - x0 over every element.
float fm_loss(const num::Array& v_pred, const num::Array& x0, const num::Array& x1);
/// Recorded loss; rows with weight 0 (the guide chunk) are excluded.
num::Var fm_loss(num::Var v_pred, const num::Array& target, const std::vector<float>& row_weights);

/// T i.i.d. uniform(0,1) timesteps, one per frame chunk.
std::vector<float> sample_chunk_timesteps(std::size_t chunks, std::mt19937_64& rng);

struct GuidedLatents {
  num::Array latents;
  std::vector<float> t_chunks;
  /// Per-row loss weight: 0 on the guide chunk, 1 elsewhere.
  std::vector<float> row_weights;
  std::size_t guide_index = 1;  // 1-based chunk position, also its temporal index + 1
};

/// Overwrites chunk `guide_index` (1-based) with the clean latent z and sets
/// its timestep to 1. The chunk keeps its temporal position.
GuidedLatents inject_guide(const num::Array& x_t, const std::vector<float>& t_chunks,
                           const num::Array& z, std::size_t guide_index,
                           std::size_t rows_per_chunk);

/// Future guide past the window (guide_index > T): z is appended as an extra
/// clean chunk with t = 1 and zero loss weight. Its temporal index is set by
/// the caller's position map.
GuidedLatents append_guide(const num::Array& x_t, const std::vector<float>& t_chunks,
                           const num::Array& z, std::size_t guide_index,
                           std::size_t rows_per_chunk);

/// v_uncond + s (v_cond - v_uncond)
num::Array cfg_combine(const num::Array& v_uncond, const num::Array& v_cond, float s);

enum class Method { euler, midpoint };
std::string_view to_string(Method m);
Method parse_method(std::string_view name);

struct SamplerConfig {
  std::size_t steps = 25;
  Method method = Method::midpoint;
  float cfg_scale = 2.0F;
  std::size_t guide_index = 1;
};

/// Clean chunk held fixed during integration.
struct GuideSpec {
  std::size_t index = 1;  // 1-based
  num::Array latent;
  std::size_t rows_per_chunk = 1;
};

/// Velocity field evaluated at state x and time t (shared by every free chunk).
using VelocityFn = std::function<num::Array(const num::Array& x, float t)>;

/// Fixed-step integration of dx/dt = v from t=0 to t=1 on a uniform grid.
/// With a guide, the guide chunk is restored to z after every evaluation
/// point, so it is bit-identical at the end. Throws FlowError naming the step
/// when the field returns non-finite values.
num::Array ode_integrate(const VelocityFn& velocity, const num::Array& x0,
                         const SamplerConfig& cfg, const GuideSpec* guide = nullptr);

/// Training draw for diffusion forcing with arbitrary-position guidance.
struct FlowSample {
  num::Array x0;
  num::Array x1;
  std::vector<float> t_chunks;
  std::size_t guide_index = 1;
  num::Array guide_latent;
};

/// Draws noise, per-chunk timesteps (or one shared timestep when
/// `diffusion_forcing` is false) and a uniform guide position in [1, T + F],
/// where F is the number of clean chunks in `future` (frames after the window).
FlowSample draw_flow_sample(const num::Array& x1, std::size_t chunks, std::size_t rows_per_chunk,
                            bool diffusion_forcing, std::mt19937_64& rng,
                            const num::Array* future = nullptr);

/// Rows of chunk `index` (1-based).
num::Array chunk_rows(const num::Array& x, std::size_t index, std::size_t rows_per_chunk);

}  // namespace duplex::flow
