#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "duplex/numerics/array.hpp"
#include "duplex/numerics/tape.hpp"
#include "duplex/positional.hpp"

namespace duplex::attn {

/// Smallest admissible Gaussian width, in frames.
inline constexpr float kSigmaFloor = 1e-3F;
/// Penalty used for hard masks; exp(-kMaskPenalty) underflows to exactly 0.
inline constexpr float kMaskPenalty = 1e9F;

struct HeadParams {
  float sigma = 1.0F;
  float alpha = 0.0F;
  bool operator==(const HeadParams&) const = default;
};

/// Per-head (sigma, alpha) pairs. Valid schedules have sigma >= floor and
/// nondecreasing, alpha >= 0 and nonincreasing, and alpha == 0 on the last
/// (widest) head.
struct HeadSchedule {
  std::vector<HeadParams> heads;

  std::size_t size() const { return heads.size(); }
  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
  bool operator==(const HeadSchedule&) const = default;
};

/// alpha * (1 - exp(-(i-j)^2 / (2 sigma^2))). Sigma below the floor is
/// clamped to it and a warning is logged.
float gaussian_bias(float i, float j, float alpha, float sigma);

/// Sigma geometric from sigma_min to sigma_max; alpha_h = alpha_max *
/// sigma_min / sigma_h (the same geometric ratio, inverted), with the last
/// head forced to alpha = 0.
HeadSchedule build_head_schedule(std::size_t num_heads, float sigma_min, float sigma_max,
                                 float alpha_max);

/// All heads share sigma and alpha = 0: the unbiased schedule.
HeadSchedule zero_schedule(std::size_t num_heads, float sigma = 1.0F);

/// slope * |i - j|
float alibi_bias(float i, float j, float slope);
/// m_h = 2^(-8(h+1)/H)
std::vector<float> alibi_slopes(std::size_t num_heads);

enum class Variant { spatial2d, rope3d, rope3d_alibi, rope3d_mhgk };

std::string_view to_string(Variant v);
/// Throws std::invalid_argument listing the valid names.
Variant parse_variant(std::string_view name);
std::vector<Variant> all_variants();

/// One attention-fusion strategy plus whatever parameters it needs.
struct AttentionVariant {
  Variant tag = Variant::rope3d_mhgk;
  HeadSchedule schedule;     // rope3d_mhgk
  std::vector<float> slopes; // rope3d_alibi

  bool uses_rope() const { return tag != Variant::spatial2d; }
};

/// Gaussian penalty matrix for one head: rows follow q_idx, columns k_idx.
num::Array gaussian_bias_matrix(const pos::TemporalIndexMap& q_idx,
                                const pos::TemporalIndexMap& k_idx, const HeadParams& head);

/// Precomputed per-head penalty matrices (subtracted from the logits).
/// An empty list means no penalty at all.
struct AttentionPlan {
  std::size_t heads = 1;
  std::vector<num::Array> penalties;
};

/// Builds the plan for a variant. Throws on index maps whose frame counts
/// disagree (spatial2d) or head-count mismatches.
AttentionPlan make_plan(const AttentionVariant& variant, const pos::TemporalIndexMap& q_idx,
                        const pos::TemporalIndexMap& k_idx, std::size_t heads);

/// Recorded multi-head attention over already-projected q, k, v:
/// per head softmax(q_h k_h^T / sqrt(d_h) - P_h) v_h, heads concatenated.
num::Var multihead_attention(num::Var q, num::Var k, num::Var v, const AttentionPlan& plan);

/// Same computation on plain arrays; optionally returns per-head weights.
num::Array multihead_attention(const num::Array& q, const num::Array& k, const num::Array& v,
                               const AttentionPlan& plan,
                               std::vector<num::Array>* weights = nullptr);

/// Cross-attention with Gaussian kernels. RoPE must already be applied to q
/// and k; one head per schedule entry.
num::Array mhgk_cross_attention(const num::Array& video_q, const num::Array& audio_k,
                                const num::Array& audio_v, const pos::TemporalIndexMap& v_idx,
                                const pos::TemporalIndexMap& a_idx, const HeadSchedule& schedule,
                                std::vector<num::Array>* weights = nullptr);

/// Unbiased 3D cross-attention.
num::Array plain_cross_attention(const num::Array& video_q, const num::Array& audio_k,
                                 const num::Array& audio_v, std::size_t heads);

/// Per-frame attention: video frame l sees only audio latents of frame l.
num::Array spatial2d_cross_attention(const num::Array& video_q, const num::Array& audio_k,
                                     const num::Array& audio_v,
                                     const pos::TemporalIndexMap& v_idx,
                                     const pos::TemporalIndexMap& a_idx, std::size_t heads,
                                     std::vector<num::Array>* weights = nullptr);

}  // namespace duplex::attn
