#include "duplex/conditioner.hpp"

#include <cmath>
#include <stdexcept>

#include "duplex/attention.hpp"

namespace duplex::audio {

std::size_t LayeredAudioFeatures::total_dim() const {
  std::size_t d = 0;
  for (const auto& l : layers) d += l.cols();
  return d;
}

void LayeredAudioFeatures::validate() const {
  if (layers.size() < 2) {
    throw std::invalid_argument("audio features: need at least 2 layers, got " +
                                std::to_string(layers.size()));
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].rows() != latents()) {
      throw std::invalid_argument("audio features: layer " + std::to_string(i) + " spans " +
                                  std::to_string(layers[i].rows()) + " latents, expected " +
                                  std::to_string(latents()));
    }
  }
}

std::vector<Window> window_partition(std::size_t latent_count, std::size_t num_frames,
                                     std::size_t per_frame, long left_context) {
  if (left_context < 0) throw std::invalid_argument("window partition: negative left context");
  if (per_frame == 0) throw std::invalid_argument("window partition: zero latents per frame");
  if (latent_count != num_frames * per_frame) {
    throw std::invalid_argument("window partition: " + std::to_string(latent_count) +
                                " latents for " + std::to_string(num_frames) + " frames of " +
                                std::to_string(per_frame));
  }
  const auto lc = static_cast<std::size_t>(left_context);
  std::vector<Window> out;
  out.reserve(num_frames);
  for (std::size_t l = 0; l < num_frames; ++l) {
    Window w;
    w.frame = l;
    w.first_frame = l >= lc ? l - lc : 0;
    w.begin = w.first_frame * per_frame;
    w.end = (l + 1) * per_frame;
    out.push_back(w);
  }
  return out;
}

num::Array window_rows(const num::Array& features, const Window& w) {
  const std::size_t c = features.cols();
  num::Array out = num::Array::matrix(w.length(), c);
  for (std::size_t r = 0; r < w.length(); ++r) {
    for (std::size_t j = 0; j < c; ++j) out(r, j) = features(w.begin + r, j);
  }
  return out;
}

AudioConditioner::AudioConditioner(std::string name, std::string group, ConditionerConfig cfg,
                                   num::ParamStore& params)
    : name_(std::move(name)), group_(std::move(group)), cfg_(cfg), params_(&params) {
  if (cfg_.fused_dim % 2 != 0) {
    throw std::invalid_argument("conditioner: fused_dim must be even for rotary keys");
  }
  if (cfg_.queries == 0) throw std::invalid_argument("conditioner: need at least one query");
  const std::size_t in = cfg_.layers * cfg_.layer_dim;
  const std::size_t da = cfg_.fused_dim;
  params.add_linear_weight(name_ + ".fuse.w", in, da, group_);
  params.add_zeros(name_ + ".fuse.b", {1, da}, group_);
  params.add_normal(name_ + ".qformer.queries", {cfg_.queries, da}, 0.02F, group_);
  params.add_linear_weight(name_ + ".qformer.wk", da, da, group_);
  params.add_linear_weight(name_ + ".qformer.wv", da, da, group_);
  params.add_normal(name_ + ".null_tokens", {cfg_.per_frame, da}, 0.02F, group_);
}

num::Param& AudioConditioner::p(const std::string& suffix) const {
  return params_->at(name_ + "." + suffix);
}

namespace {

num::Array concat_layers(const LayeredAudioFeatures& f) {
  f.validate();
  const std::size_t d = f.total_dim();
  num::Array x = num::Array::matrix(f.latents(), d);
  std::size_t off = 0;
  for (const auto& layer : f.layers) {
    for (std::size_t r = 0; r < f.latents(); ++r) {
      for (std::size_t j = 0; j < layer.cols(); ++j) x(r, off + j) = layer(r, j);
    }
    off += layer.cols();
  }
  return x;
}

}  // namespace

num::Array AudioConditioner::fuse_layers(const LayeredAudioFeatures& f) const {
  return num::linear_map(concat_layers(f), p("fuse.w").value, p("fuse.b").value);
}

num::Var AudioConditioner::fuse_layers(num::Tape& tape, const LayeredAudioFeatures& f) const {
  num::Var x = tape.constant(concat_layers(f));
  if (x.value().cols() != p("fuse.w").value.rows()) {
    throw std::invalid_argument("conditioner " + name_ + ": features are " +
                                std::to_string(x.value().cols()) + " wide, fusion expects " +
                                std::to_string(p("fuse.w").value.rows()));
  }
  return num::linear(x, tape.param(p("fuse.w")), tape.param(p("fuse.b")));
}

num::Array AudioConditioner::aggregate_window(const num::Array& window,
                                              const std::vector<float>& positions, float anchor,
                                              num::Array* weights) const {
  if (window.rows() == 0) throw std::invalid_argument("aggregate_window: empty window");
  if (positions.size() != window.rows()) {
    throw std::invalid_argument("aggregate_window: positions do not match window rows");
  }
  const std::size_t da = cfg_.fused_dim;
  num::Array keys = num::matmul(window, p("qformer.wk").value);
  num::rope_rotate_inplace(keys, positions, da, cfg_.rope_base, false);
  num::Array values = num::matmul(window, p("qformer.wv").value);
  num::Array q = p("qformer.queries").value;
  std::vector<float> qpos(q.rows(), anchor);
  num::rope_rotate_inplace(q, qpos, da, cfg_.rope_base, false);
  num::Array s = num::matmul_nt(q, keys);
  const float inv = 1.0F / std::sqrt(static_cast<float>(da));
  for (auto& v : s.values()) v *= inv;
  num::Array a = num::softmax_rows(s);
  num::Array out = num::matmul(a, values);
  if (weights) *weights = std::move(a);
  return out;
}

num::Var AudioConditioner::null_features(num::Tape& tape, std::size_t frames) const {
  std::vector<std::size_t> rows;
  rows.reserve(frames * cfg_.per_frame);
  for (std::size_t l = 0; l < frames; ++l) {
    for (std::size_t s = 0; s < cfg_.per_frame; ++s) rows.push_back(s);
  }
  return num::gather_rows(tape.param(p("null_tokens")), rows);
}

ConditionTokens AudioConditioner::encode_stream(num::Tape& tape, const LayeredAudioFeatures* audio,
                                                std::size_t frames, bool conditional) const {
  if (conditional) {
    if (audio == nullptr) {
      throw std::invalid_argument("conditioner " + name_ + ": conditional pass without audio");
    }
    if (audio->frames != frames || audio->per_frame != cfg_.per_frame) {
      throw std::invalid_argument("conditioner " + name_ + ": audio has " +
                                  std::to_string(audio->frames) + " frames x " +
                                  std::to_string(audio->per_frame) + ", expected " +
                                  std::to_string(frames) + " x " +
                                  std::to_string(cfg_.per_frame));
    }
    return aggregate_all(tape, fuse_layers(tape, *audio), frames, true);
  }
  return aggregate_all(tape, null_features(tape, frames), frames, false);
}

ConditionTokens AudioConditioner::aggregate_all(num::Tape& tape, num::Var fused,
                                                std::size_t frames, bool conditional) const {
  const std::size_t da = cfg_.fused_dim;
  const std::size_t n = cfg_.queries;
  const auto positions = pos::audio_index_map(frames, cfg_.per_frame, pos::Source::talk_audio);
  num::Var keys = num::rope_rows(num::matmul(fused, tape.param(p("qformer.wk"))), positions.t,
                                 da, cfg_.rope_base);
  num::Var values = num::matmul(fused, tape.param(p("qformer.wv")));
  num::Var queries = tape.param(p("qformer.queries"));
  const float inv = 1.0F / std::sqrt(static_cast<float>(da));

  const auto windows = window_partition(fused.value().rows(), frames, cfg_.per_frame,
                                        static_cast<long>(cfg_.left_context));
  // all windows at once: row block w holds the N queries rotated to frame w,
  // and keys outside window w are pushed to exactly zero weight
  std::vector<std::size_t> qrows;
  std::vector<float> qpos;
  num::Array mask = num::Array::matrix(windows.size() * n, fused.value().rows(), attn::kMaskPenalty);
  ConditionTokens out;
  out.conditional = conditional;
  out.indices.source = pos::Source::condition_tokens;
  for (const auto& w : windows) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t r = qrows.size();
      qrows.push_back(i);
      qpos.push_back(static_cast<float>(w.frame));
      out.indices.t.push_back(static_cast<float>(w.frame));
      for (std::size_t c = w.begin; c < w.end; ++c) mask(r, c) = 0.0F;
    }
  }
  num::Var q = num::rope_rows(num::gather_rows(queries, qrows), qpos, da, cfg_.rope_base);
  num::Var s = num::sub(num::scale(num::matmul_nt(q, keys), inv), tape.constant(std::move(mask)));
  out.tokens = num::matmul(num::softmax_rows(s), values);
  return out;
}

}  // namespace duplex::audio
