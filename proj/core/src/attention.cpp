#include "duplex/attention.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>

namespace duplex::attn {

namespace {

std::atomic<std::uint64_t> g_sigma_clamps{0};

float clamp_sigma(float sigma) {
  if (sigma >= kSigmaFloor) return sigma;
  // first occurrence only; schedules are evaluated once per latent pair
  if (g_sigma_clamps.fetch_add(1) == 0) {
    spdlog::warn("gaussian bias: sigma {} below floor {}, clamping", sigma, kSigmaFloor);
  }
  return kSigmaFloor;
}

std::size_t frame_count(const pos::TemporalIndexMap& m) {
  float hi = 0.0F;
  for (float t : m.t) hi = std::max(hi, t);
  return m.t.empty() ? 0 : static_cast<std::size_t>(std::floor(hi)) + 1;
}

}  // namespace

void HeadSchedule::validate() const {
  if (heads.empty()) throw std::invalid_argument("head schedule: no heads");
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const auto& hp = heads[h];
    if (!(hp.sigma >= kSigmaFloor)) {
      throw std::invalid_argument("head schedule: head " + std::to_string(h) + " sigma " +
                                  std::to_string(hp.sigma) + " below floor");
    }
    if (!(hp.alpha >= 0.0F)) {
      throw std::invalid_argument("head schedule: head " + std::to_string(h) +
                                  " has negative alpha");
    }
    if (h > 0 && hp.sigma < heads[h - 1].sigma) {
      throw std::invalid_argument("head schedule: sigma decreases at head " + std::to_string(h));
    }
    if (h > 0 && hp.alpha > heads[h - 1].alpha) {
      throw std::invalid_argument("head schedule: alpha increases at head " + std::to_string(h));
    }
  }
  if (heads.back().alpha != 0.0F) {
    throw std::invalid_argument("head schedule: widest head must have alpha 0");
  }
}

float gaussian_bias(float i, float j, float alpha, float sigma) {
  const double s = clamp_sigma(sigma);
  const double d = static_cast<double>(i) - j;
  return static_cast<float>(alpha * (1.0 - std::exp(-(d * d) / (2.0 * s * s))));
}

HeadSchedule build_head_schedule(std::size_t num_heads, float sigma_min, float sigma_max,
                                 float alpha_max) {
  if (num_heads < 2) throw std::invalid_argument("head schedule: need at least 2 heads");
  if (!(sigma_min > 0.0F)) throw std::invalid_argument("head schedule: sigma_min must be > 0");
  if (sigma_max < sigma_min) {
    throw std::invalid_argument("head schedule: sigma_max below sigma_min");
  }
  if (alpha_max < 0.0F) throw std::invalid_argument("head schedule: alpha_max must be >= 0");
  HeadSchedule s;
  const double ratio = static_cast<double>(sigma_max) / sigma_min;
  for (std::size_t h = 0; h < num_heads; ++h) {
    const double frac = static_cast<double>(h) / static_cast<double>(num_heads - 1);
    double sigma = sigma_min * std::pow(ratio, frac);
    if (h == 0) sigma = sigma_min;
    if (h + 1 == num_heads) sigma = sigma_max;
    const double alpha = alpha_max * std::pow(ratio, -frac);
    s.heads.push_back({clamp_sigma(static_cast<float>(sigma)),
                       h + 1 == num_heads ? 0.0F : static_cast<float>(alpha)});
  }
  s.validate();
  return s;
}

HeadSchedule zero_schedule(std::size_t num_heads, float sigma) {
  HeadSchedule s;
  s.heads.assign(num_heads, HeadParams{clamp_sigma(sigma), 0.0F});
  return s;
}

float alibi_bias(float i, float j, float slope) {
  return slope * std::abs(i - j);
}

std::vector<float> alibi_slopes(std::size_t num_heads) {
  std::vector<float> m;
  for (std::size_t h = 0; h < num_heads; ++h) {
    m.push_back(static_cast<float>(
        std::exp2(-8.0 * static_cast<double>(h + 1) / static_cast<double>(num_heads))));
  }
  return m;
}

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::spatial2d: return "spatial2d";
    case Variant::rope3d: return "rope3d";
    case Variant::rope3d_alibi: return "rope3d_alibi";
    case Variant::rope3d_mhgk: return "rope3d_mhgk";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  for (auto v : all_variants()) {
    if (to_string(v) == name) return v;
  }
  throw std::invalid_argument("unknown attention variant '" + std::string(name) +
                              "'; valid: spatial2d, rope3d, rope3d_alibi, rope3d_mhgk");
}

std::vector<Variant> all_variants() {
  return {Variant::spatial2d, Variant::rope3d, Variant::rope3d_alibi, Variant::rope3d_mhgk};
}

num::Array gaussian_bias_matrix(const pos::TemporalIndexMap& q_idx,
                                const pos::TemporalIndexMap& k_idx, const HeadParams& head) {
  num::Array b = num::Array::matrix(q_idx.size(), k_idx.size());
  for (std::size_t r = 0; r < q_idx.size(); ++r) {
    for (std::size_t c = 0; c < k_idx.size(); ++c) {
      b(r, c) = gaussian_bias(q_idx.t[r], k_idx.t[c], head.alpha, head.sigma);
    }
  }
  return b;
}

AttentionPlan make_plan(const AttentionVariant& variant, const pos::TemporalIndexMap& q_idx,
                        const pos::TemporalIndexMap& k_idx, std::size_t heads) {
  if (heads == 0) throw std::invalid_argument("attention plan: zero heads");
  AttentionPlan plan;
  plan.heads = heads;
  switch (variant.tag) {
    case Variant::rope3d:
      break;
    case Variant::rope3d_mhgk: {
      if (variant.schedule.size() != heads) {
        throw std::invalid_argument("attention plan: schedule has " +
                                    std::to_string(variant.schedule.size()) + " heads, layer has " +
                                    std::to_string(heads));
      }
      for (const auto& hp : variant.schedule.heads) {
        plan.penalties.push_back(gaussian_bias_matrix(q_idx, k_idx, hp));
      }
      break;
    }
    case Variant::rope3d_alibi: {
      const auto slopes = variant.slopes.empty() ? alibi_slopes(heads) : variant.slopes;
      if (slopes.size() != heads) {
        throw std::invalid_argument("attention plan: " + std::to_string(slopes.size()) +
                                    " alibi slopes for " + std::to_string(heads) + " heads");
      }
      for (float m : slopes) {
        num::Array b = num::Array::matrix(q_idx.size(), k_idx.size());
        for (std::size_t r = 0; r < q_idx.size(); ++r) {
          for (std::size_t c = 0; c < k_idx.size(); ++c) {
            b(r, c) = alibi_bias(q_idx.t[r], k_idx.t[c], m);
          }
        }
        plan.penalties.push_back(std::move(b));
      }
      break;
    }
    case Variant::spatial2d: {
      if (frame_count(q_idx) != frame_count(k_idx)) {
        throw std::invalid_argument("spatial2d: video spans " +
                                    std::to_string(frame_count(q_idx)) + " frames, audio spans " +
                                    std::to_string(frame_count(k_idx)));
      }
      num::Array mask = num::Array::matrix(q_idx.size(), k_idx.size());
      for (std::size_t r = 0; r < q_idx.size(); ++r) {
        for (std::size_t c = 0; c < k_idx.size(); ++c) {
          mask(r, c) = std::floor(q_idx.t[r]) == std::floor(k_idx.t[c]) ? 0.0F : kMaskPenalty;
        }
      }
      plan.penalties.assign(heads, mask);
      break;
    }
  }
  return plan;
}

namespace {

void check_plan(const AttentionPlan& plan, std::size_t q_rows, std::size_t k_rows,
                std::size_t width) {
  if (plan.heads == 0 || width % plan.heads != 0) {
    throw std::invalid_argument("attention: width " + std::to_string(width) +
                                " not divisible by " + std::to_string(plan.heads) + " heads");
  }
  if (!plan.penalties.empty()) {
    if (plan.penalties.size() != plan.heads) {
      throw std::invalid_argument("attention: penalty count differs from head count");
    }
    for (const auto& p : plan.penalties) {
      if (p.rows() != q_rows || p.cols() != k_rows) {
        throw std::invalid_argument("attention: index maps cover " + std::to_string(p.rows()) +
                                    "x" + std::to_string(p.cols()) + " latents, arrays have " +
                                    std::to_string(q_rows) + "x" + std::to_string(k_rows));
      }
    }
  }
}

}  // namespace

num::Var multihead_attention(num::Var q, num::Var k, num::Var v, const AttentionPlan& plan) {
  const std::size_t width = q.value().cols();
  check_plan(plan, q.value().rows(), k.value().rows(), width);
  if (k.value().cols() != width || v.value().rows() != k.value().rows()) {
    throw std::invalid_argument("attention: q/k/v shapes disagree");
  }
  const std::size_t dh = width / plan.heads;
  const std::size_t dv = v.value().cols() / plan.heads;
  const float inv_sqrt = 1.0F / std::sqrt(static_cast<float>(dh));
  num::Tape& tape = *q.tape();
  std::vector<num::Var> outs;
  outs.reserve(plan.heads);
  for (std::size_t h = 0; h < plan.heads; ++h) {
    num::Var qh = plan.heads == 1 ? q : num::slice_cols(q, h * dh, (h + 1) * dh);
    num::Var kh = plan.heads == 1 ? k : num::slice_cols(k, h * dh, (h + 1) * dh);
    num::Var vh = plan.heads == 1 ? v : num::slice_cols(v, h * dv, (h + 1) * dv);
    num::Var s = num::scale(num::matmul_nt(qh, kh), inv_sqrt);
    if (!plan.penalties.empty()) s = num::sub(s, tape.constant(plan.penalties[h]));
    outs.push_back(num::matmul(num::softmax_rows(s), vh));
  }
  return plan.heads == 1 ? outs.front() : num::concat_cols(outs);
}

num::Array multihead_attention(const num::Array& q, const num::Array& k, const num::Array& v,
                               const AttentionPlan& plan, std::vector<num::Array>* weights) {
  const std::size_t width = q.cols();
  check_plan(plan, q.rows(), k.rows(), width);
  if (k.cols() != width || v.rows() != k.rows()) {
    throw std::invalid_argument("attention: q/k/v shapes disagree");
  }
  const std::size_t dh = width / plan.heads;
  const std::size_t dv = v.cols() / plan.heads;
  const float inv_sqrt = 1.0F / std::sqrt(static_cast<float>(dh));
  num::Array out = num::Array::matrix(q.rows(), v.cols());
  if (weights) weights->clear();
  auto block = [](const num::Array& a, std::size_t c0, std::size_t w) {
    num::Array b = num::Array::matrix(a.rows(), w);
    for (std::size_t r = 0; r < a.rows(); ++r) {
      for (std::size_t j = 0; j < w; ++j) b(r, j) = a(r, c0 + j);
    }
    return b;
  };
  for (std::size_t h = 0; h < plan.heads; ++h) {
    num::Array s = num::matmul_nt(block(q, h * dh, dh), block(k, h * dh, dh));
    for (auto& x : s.values()) x *= inv_sqrt;
    if (!plan.penalties.empty()) {
      for (std::size_t i = 0; i < s.size(); ++i) s[i] -= plan.penalties[h][i];
    }
    num::Array p = num::softmax_rows(s);
    num::Array o = num::matmul(p, block(v, h * dv, dv));
    for (std::size_t r = 0; r < o.rows(); ++r) {
      for (std::size_t j = 0; j < dv; ++j) out(r, h * dv + j) = o(r, j);
    }
    if (weights) weights->push_back(std::move(p));
  }
  return out;
}

num::Array mhgk_cross_attention(const num::Array& video_q, const num::Array& audio_k,
                                const num::Array& audio_v, const pos::TemporalIndexMap& v_idx,
                                const pos::TemporalIndexMap& a_idx, const HeadSchedule& schedule,
                                std::vector<num::Array>* weights) {
  if (v_idx.size() != video_q.rows() || a_idx.size() != audio_k.rows()) {
    throw std::invalid_argument("mhgk: index maps (" + std::to_string(v_idx.size()) + ", " +
                                std::to_string(a_idx.size()) + ") do not match arrays (" +
                                std::to_string(video_q.rows()) + ", " +
                                std::to_string(audio_k.rows()) + ")");
  }
  AttentionVariant variant{Variant::rope3d_mhgk, schedule, {}};
  return multihead_attention(video_q, audio_k, audio_v,
                             make_plan(variant, v_idx, a_idx, schedule.size()), weights);
}

num::Array plain_cross_attention(const num::Array& video_q, const num::Array& audio_k,
                                 const num::Array& audio_v, std::size_t heads) {
  AttentionPlan plan;
  plan.heads = heads;
  return multihead_attention(video_q, audio_k, audio_v, plan);
}

num::Array spatial2d_cross_attention(const num::Array& video_q, const num::Array& audio_k,
                                     const num::Array& audio_v,
                                     const pos::TemporalIndexMap& v_idx,
                                     const pos::TemporalIndexMap& a_idx, std::size_t heads,
                                     std::vector<num::Array>* weights) {
  if (v_idx.size() != video_q.rows() || a_idx.size() != audio_k.rows()) {
    throw std::invalid_argument("spatial2d: index maps do not match arrays");
  }
  AttentionVariant variant{Variant::spatial2d, {}, {}};
  return multihead_attention(video_q, audio_k, audio_v, make_plan(variant, v_idx, a_idx, heads),
                             weights);
}

}  // namespace duplex::attn
