#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "duplex/numerics/array.hpp"
#include "duplex/numerics/params.hpp"
#include "duplex/numerics/tape.hpp"
#include "duplex/positional.hpp"

namespace duplex::audio {

/// Stack of per-layer encoder features. Every layer is (frames * S) x d_layer.
struct LayeredAudioFeatures {
  std::size_t frames = 0;
  std::size_t per_frame = 1;
  std::vector<num::Array> layers;

  std::size_t latents() const { return frames * per_frame; }
  std::size_t total_dim() const;
  /// Throws std::invalid_argument on fewer than 2 layers or mismatched extents.
  void validate() const;
};

struct ConditionerConfig {
  std::size_t layers = 3;
  std::size_t layer_dim = 4;
  std::size_t per_frame = 2;
  std::size_t fused_dim = 32;
  std::size_t queries = 4;
  std::size_t left_context = 2;
  float rope_base = 10000.0F;
};

/// A causal window of audio latents belonging to one video frame.
struct Window {
  std::size_t frame = 0;        // anchor frame l
  std::size_t first_frame = 0;  // max(0, l - left_context)
  std::size_t begin = 0;        // first latent row
  std::size_t end = 0;          // one past the last latent row
  std::size_t length() const { return end - begin; }
};

/// One window per frame covering frames [l - left_context, l], clipped at 0.
std::vector<Window> window_partition(std::size_t latent_count, std::size_t num_frames,
                                     std::size_t per_frame, long left_context);

/// Rows [w.begin, w.end) of `features`.
num::Array window_rows(const num::Array& features, const Window& w);

/// Conditioning tokens produced for one stream: W*N rows; every token of
/// window l carries temporal index l.
struct ConditionTokens {
  num::Var tokens;
  pos::TemporalIndexMap indices;
  bool conditional = true;
};

/// Per-stream adaptive audio injector. Parameters live in a shared store
/// under "<name>." with the given group tag, so talk and listen instances are
/// disjoint by construction.
class AudioConditioner {
 public:
  AudioConditioner(std::string name, std::string group, ConditionerConfig cfg,
                   num::ParamStore& params);

  const ConditionerConfig& config() const { return cfg_; }
  const std::string& name() const { return name_; }
  const std::string& group() const { return group_; }

  /// Concatenate layers along features, project to fused_dim.
  num::Array fuse_layers(const LayeredAudioFeatures& f) const;
  num::Var fuse_layers(num::Tape& tape, const LayeredAudioFeatures& f) const;

  /// Learnable queries attend over one window of fused features whose
  /// latents sit at `positions`; the queries sit at the window's anchor frame.
  /// Returns N x fused_dim tokens; `weights` receives the N x len softmax.
  num::Array aggregate_window(const num::Array& window, const std::vector<float>& positions,
                              float anchor, num::Array* weights = nullptr) const;

  /// Conditional path: fuse, partition, aggregate. Unconditional path: the
  /// learned null sequence stands in for the fused features; `audio` may be
  /// null and is ignored. Output shape is identical on both paths.
  ConditionTokens encode_stream(num::Tape& tape, const LayeredAudioFeatures* audio,
                                std::size_t frames, bool conditional) const;

  /// Fused features of the null path for a given frame count.
  num::Var null_features(num::Tape& tape, std::size_t frames) const;

 private:
  num::Param& p(const std::string& suffix) const;
  ConditionTokens aggregate_all(num::Tape& tape, num::Var fused, std::size_t frames,
                                bool conditional) const;

  std::string name_;
  std::string group_;
  ConditionerConfig cfg_;
  num::ParamStore* params_;
};

}  // namespace duplex::audio
