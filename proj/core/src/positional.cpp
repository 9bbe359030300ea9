#include "duplex/positional.hpp"

#include <stdexcept>
#include <string>

namespace duplex::pos {

std::string_view to_string(Source s) {
  switch (s) {
    case Source::video: return "video";
    case Source::talk_audio: return "talk-audio";
    case Source::listen_audio: return "listen-audio";
    case Source::condition_tokens: return "condition-tokens";
  }
  return "unknown";
}

void RopeConfig::validate() const {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw std::invalid_argument("rope: head_dim must be even, got " + std::to_string(head_dim));
  }
  if (!(base > 1.0F)) throw std::invalid_argument("rope: base must exceed 1");
}

float video_temporal_index(std::size_t flat_index, const VideoGrid& grid) {
  if (grid.spatial() == 0) throw std::invalid_argument("video index: empty spatial grid");
  if (flat_index >= grid.latents()) {
    throw std::out_of_range("video index: latent " + std::to_string(flat_index) +
                            " outside " + std::to_string(grid.latents()) + " latents");
  }
  return static_cast<float>(flat_index / grid.spatial());
}

float audio_temporal_index(std::size_t k, std::size_t per_frame) {
  if (per_frame == 0) throw std::invalid_argument("audio index: zero latents per frame");
  return static_cast<float>(k / per_frame) +
         static_cast<float>(k % per_frame) / static_cast<float>(per_frame);
}

TemporalIndexMap video_index_map(const VideoGrid& grid) {
  TemporalIndexMap m{Source::video, {}};
  m.t.reserve(grid.latents());
  for (std::size_t i = 0; i < grid.latents(); ++i) m.t.push_back(video_temporal_index(i, grid));
  return m;
}

TemporalIndexMap audio_index_map(std::size_t frames, std::size_t per_frame, Source source) {
  TemporalIndexMap m{source, {}};
  m.t.reserve(frames * per_frame);
  for (std::size_t k = 0; k < frames * per_frame; ++k) {
    m.t.push_back(audio_temporal_index(k, per_frame));
  }
  return m;
}

num::Array apply_rope(const num::Array& vectors, const TemporalIndexMap& indices,
                      const RopeConfig& cfg) {
  cfg.validate();
  if (vectors.cols() != cfg.head_dim) {
    throw std::invalid_argument("rope: last dimension " + std::to_string(vectors.cols()) +
                                " != head_dim " + std::to_string(cfg.head_dim));
  }
  num::Array out = vectors;
  num::rope_rotate_inplace(out, indices.t, cfg.head_dim, cfg.base, false);
  return out;
}

num::Var apply_rope(num::Var vectors, const TemporalIndexMap& indices, const RopeConfig& cfg) {
  cfg.validate();
  return num::rope_rows(vectors, indices.t, cfg.head_dim, cfg.base);
}

}  // namespace duplex::pos
