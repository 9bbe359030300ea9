#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "duplex/numerics/array.hpp"
#include "duplex/numerics/tape.hpp"

namespace duplex::pos {

enum class Source { video, talk_audio, listen_audio, condition_tokens };

std::string_view to_string(Source s);

/// Per-latent temporal coordinate, in units of video frames.
struct TemporalIndexMap {
  Source source = Source::video;
  std::vector<float> t;

  std::size_t size() const { return t.size(); }
  bool operator==(const TemporalIndexMap&) const = default;
};

struct VideoGrid {
  std::size_t frames = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t spatial() const { return height * width; }
  std::size_t latents() const { return frames * height * width; }
};

struct RopeConfig {
  std::size_t head_dim = 8;
  float base = 10000.0F;

  /// Throws std::invalid_argument on odd head_dim or base <= 1.
  void validate() const;
};

/// floor(flat_index / (H*W)). Throws std::out_of_range past the last latent.
float video_temporal_index(std::size_t flat_index, const VideoGrid& grid);
/// floor(k/S) + (k mod S)/S. Throws std::invalid_argument when S == 0.
float audio_temporal_index(std::size_t k, std::size_t per_frame);

TemporalIndexMap video_index_map(const VideoGrid& grid);
TemporalIndexMap audio_index_map(std::size_t frames, std::size_t per_frame, Source source);

/// Rotates each head_dim-wide block of every row by its temporal index.
num::Array apply_rope(const num::Array& vectors, const TemporalIndexMap& indices,
                      const RopeConfig& cfg);
num::Var apply_rope(num::Var vectors, const TemporalIndexMap& indices, const RopeConfig& cfg);

}  // namespace duplex::pos
