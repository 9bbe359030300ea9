#include "duplex/flow.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace duplex::flow {

num::Array ot_interpolate(const num::Array& x0, const num::Array& x1, float t) {
  num::require_same_shape(x0, x1, "ot_interpolate");
  if (!(t >= 0.0F && t <= 1.0F)) {
    throw FlowError("ot_interpolate: t = " + std::to_string(t) + " outside [0, 1]");
  }
  num::Array out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0F - t) * x0[i] + t * x1[i];
  return out;
}

num::Array ot_interpolate_chunks(const num::Array& x0, const num::Array& x1,
                                 const std::vector<float>& t_chunks, std::size_t rows_per_chunk) {
  num::require_same_shape(x0, x1, "ot_interpolate_chunks");
  if (t_chunks.size() * rows_per_chunk != x0.rows()) {
    throw FlowError("ot_interpolate_chunks: " + std::to_string(t_chunks.size()) + " chunks of " +
                    std::to_string(rows_per_chunk) + " rows for " + std::to_string(x0.rows()) +
                    " rows");
  }
  num::Array out(x0.shape());
  const std::size_t c = x0.cols();
  for (std::size_t r = 0; r < x0.rows(); ++r) {
    const float t = t_chunks[r / rows_per_chunk];
    if (!(t >= 0.0F && t <= 1.0F)) throw FlowError("ot_interpolate_chunks: t outside [0, 1]");
    for (std::size_t j = 0; j < c; ++j) {
      out(r, j) = (1.0F - t) * x0(r, j) + t * x1(r, j);
    }
  }
  return out;
}

num::Array fm_target(const num::Array& x0, const num::Array& x1) {
  num::require_same_shape(x0, x1, "fm_target");
  num::Array u(x0.shape());
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = x1[i] - x0[i];
  return u;
}

float fm_loss(const num::Array& v_pred, const num::Array& x0, const num::Array& x1) {
  num::require_same_shape(v_pred, x0, "fm_loss");
  num::require_same_shape(x0, x1, "fm_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < v_pred.size(); ++i) {
    // the target is rounded to f32 exactly as fm_target stores it
    const float u = x1[i] - x0[i];
    const double d = static_cast<double>(v_pred[i]) - u;
    acc += d * d;
  }
  return static_cast<float>(acc / static_cast<double>(v_pred.size()));
}

num::Var fm_loss(num::Var v_pred, const num::Array& target,
                 const std::vector<float>& row_weights) {
  return num::masked_mse(v_pred, target, row_weights);
}

std::vector<float> sample_chunk_timesteps(std::size_t chunks, std::mt19937_64& rng) {
  // open interval: nextafter keeps 0 out, the half-open distribution keeps 1 out
  std::uniform_real_distribution<float> dist(std::nextafter(0.0F, 1.0F), 1.0F);
  std::vector<float> t(chunks);
  for (auto& v : t) v = dist(rng);
  return t;
}

num::Array chunk_rows(const num::Array& x, std::size_t index, std::size_t rows_per_chunk) {
  if (index == 0 || index * rows_per_chunk > x.rows()) {
    throw FlowError("chunk index " + std::to_string(index) + " outside [1, " +
                    std::to_string(x.rows() / std::max<std::size_t>(rows_per_chunk, 1)) + "]");
  }
  const std::size_t c = x.cols();
  num::Array out = num::Array::matrix(rows_per_chunk, c);
  std::copy_n(x.data() + (index - 1) * rows_per_chunk * c, rows_per_chunk * c, out.data());
  return out;
}

namespace {

void write_chunk(num::Array& x, const num::Array& z, std::size_t index,
                 std::size_t rows_per_chunk) {
  if (z.rows() != rows_per_chunk || z.cols() != x.cols()) {
    throw FlowError("guide latent " + num::shape_string(z.shape()) + " does not fit a chunk of " +
                    std::to_string(rows_per_chunk) + " rows x " + std::to_string(x.cols()));
  }
  std::copy_n(z.data(), z.size(), x.data() + (index - 1) * rows_per_chunk * x.cols());
}

}  // namespace

GuidedLatents inject_guide(const num::Array& x_t, const std::vector<float>& t_chunks,
                           const num::Array& z, std::size_t guide_index,
                           std::size_t rows_per_chunk) {
  const std::size_t chunks = t_chunks.size();
  if (guide_index < 1 || guide_index > chunks) {
    throw FlowError("guide index " + std::to_string(guide_index) + " outside [1, " +
                    std::to_string(chunks) + "]");
  }
  if (chunks * rows_per_chunk != x_t.rows()) {
    throw FlowError("inject_guide: chunk layout does not match latents");
  }
  GuidedLatents g;
  g.latents = x_t;
  write_chunk(g.latents, z, guide_index, rows_per_chunk);
  g.t_chunks = t_chunks;
  g.t_chunks[guide_index - 1] = 1.0F;
  g.row_weights.assign(x_t.rows(), 1.0F);
  for (std::size_t r = 0; r < rows_per_chunk; ++r) {
    g.row_weights[(guide_index - 1) * rows_per_chunk + r] = 0.0F;
  }
  g.guide_index = guide_index;
  return g;
}

GuidedLatents append_guide(const num::Array& x_t, const std::vector<float>& t_chunks,
                           const num::Array& z, std::size_t guide_index,
                           std::size_t rows_per_chunk) {
  const std::size_t chunks = t_chunks.size();
  if (guide_index <= chunks) {
    throw FlowError("append_guide: index " + std::to_string(guide_index) +
                    " is inside the window; use inject_guide");
  }
  if (chunks * rows_per_chunk != x_t.rows()) {
    throw FlowError("append_guide: chunk layout does not match latents");
  }
  if (z.rows() != rows_per_chunk || z.cols() != x_t.cols()) {
    throw FlowError("guide latent " + num::shape_string(z.shape()) + " does not fit a chunk of " +
                    std::to_string(rows_per_chunk) + " rows x " + std::to_string(x_t.cols()));
  }
  GuidedLatents g;
  g.latents = num::Array::matrix(x_t.rows() + rows_per_chunk, x_t.cols());
  std::copy_n(x_t.data(), x_t.size(), g.latents.data());
  std::copy_n(z.data(), z.size(), g.latents.data() + x_t.size());
  g.t_chunks = t_chunks;
  g.t_chunks.push_back(1.0F);
  g.row_weights.assign(x_t.rows(), 1.0F);
  g.row_weights.resize(g.latents.rows(), 0.0F);
  g.guide_index = guide_index;
  return g;
}

num::Array cfg_combine(const num::Array& v_uncond, const num::Array& v_cond, float s) {
  num::require_same_shape(v_uncond, v_cond, "cfg_combine");
  if (!(s >= 0.0F)) throw FlowError("cfg_combine: negative guidance scale");
  if (s == 1.0F) return v_cond;
  if (s == 0.0F) return v_uncond;
  num::Array v(v_cond.shape());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = v_uncond[i] + s * (v_cond[i] - v_uncond[i]);
  return v;
}

std::string_view to_string(Method m) { return m == Method::euler ? "euler" : "midpoint"; }

Method parse_method(std::string_view name) {
  if (name == "euler") return Method::euler;
  if (name == "midpoint") return Method::midpoint;
  throw FlowError("unknown sampler method '" + std::string(name) + "'; valid: euler, midpoint");
}

num::Array ode_integrate(const VelocityFn& velocity, const num::Array& x0,
                         const SamplerConfig& cfg, const GuideSpec* guide) {
  if (cfg.steps < 1) throw FlowError("ode_integrate: steps must be >= 1");
  // the trajectory is carried in double and rounded once per evaluation, so
  // rounding does not build up over the steps
  num::Array x = x0;
  if (guide) write_chunk(x, guide->latent, guide->index, guide->rows_per_chunk);
  std::vector<double> state(x.values().begin(), x.values().end());
  const double h = 1.0 / static_cast<double>(cfg.steps);

  auto eval = [&](const num::Array& at, double t, std::size_t step) {
    num::Array v = velocity(at, static_cast<float>(t));
    num::require_same_shape(v, at, "velocity field");
    if (!num::all_finite(v)) {
      throw FlowError("ode_integrate: non-finite velocity at step " + std::to_string(step));
    }
    return v;
  };
  auto round = [&](const std::vector<double>& from) {
    num::Array out(x0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(from[i]);
    if (guide) write_chunk(out, guide->latent, guide->index, guide->rows_per_chunk);
    return out;
  };
  auto advance = [](const std::vector<double>& from, const num::Array& v, double dt) {
    std::vector<double> out(from.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = from[i] + dt * v[i];
    return out;
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double t = static_cast<double>(step) * h;
    if (cfg.method == Method::euler) {
      state = advance(state, eval(x, t, step), h);
    } else {
      const num::Array mid = round(advance(state, eval(x, t, step), 0.5 * h));
      state = advance(state, eval(mid, t + 0.5 * h, step), h);
    }
    x = round(state);
  }
  return x;
}

FlowSample draw_flow_sample(const num::Array& x1, std::size_t chunks, std::size_t rows_per_chunk,
                            bool diffusion_forcing, std::mt19937_64& rng,
                            const num::Array* future) {
  if (chunks * rows_per_chunk != x1.rows()) {
    throw FlowError("draw_flow_sample: chunk layout does not match data");
  }
  FlowSample s;
  s.x1 = x1;
  s.x0 = num::Array(x1.shape());
  std::normal_distribution<float> normal(0.0F, 1.0F);
  for (auto& v : s.x0.values()) v = normal(rng);
  if (diffusion_forcing) {
    s.t_chunks = sample_chunk_timesteps(chunks, rng);
  } else {
    s.t_chunks.assign(chunks, sample_chunk_timesteps(1, rng).front());
  }
  const std::size_t ahead = future ? future->rows() / rows_per_chunk : 0;
  std::uniform_int_distribution<std::size_t> pick(1, chunks + ahead);
  s.guide_index = pick(rng);
  s.guide_latent = s.guide_index <= chunks
                       ? chunk_rows(x1, s.guide_index, rows_per_chunk)
                       : chunk_rows(*future, s.guide_index - chunks, rows_per_chunk);
  return s;
}

}  // namespace duplex::flow
