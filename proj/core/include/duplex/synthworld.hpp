#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "duplex/conditioner.hpp"
#include "duplex/numerics/array.hpp"
#include "duplex/positional.hpp"

namespace duplex::synth {

/// How the per-frame loudness envelope of a stream evolves.
enum class Envelope {
  /// Independent draw every frame (articulation-rate changes).
  per_frame,
  /// Piecewise constant with random turn boundaries (conversation-rate changes).
  turns,
};

struct WorldConfig {
  std::size_t frames = 32;
  std::size_t per_frame = 2;   // audio latents per video frame (S)
  std::size_t feature_dim = 4; // per encoder layer
  std::size_t height = 2;
  std::size_t width = 2;
  std::size_t channels = 8;
  std::size_t context_horizon = 16;  // K
  float nuisance_std = 0.05F;
  float silence_prob = 0.3F;
  float turn_switch_prob = 0.125F;
  /// Clean frames rendered past the window, usable as future guides.
  std::size_t future_frames = 8;

  pos::VideoGrid grid() const { return {frames, height, width}; }
};

inline constexpr std::size_t kLipChannel = 0;
inline constexpr std::size_t kReactChannel = 1;
inline constexpr std::size_t kIdentityBegin = 2;
inline constexpr std::size_t kIdentityEnd = 4;

struct Oracle {
  std::vector<float> lip;
  std::vector<float> react;
  std::vector<float> identity;  // kIdentityEnd - kIdentityBegin values
};

struct SynthSample {
  audio::LayeredAudioFeatures talk;
  audio::LayeredAudioFeatures listen;
  /// (frames * H * W) x channels, frame-major.
  num::Array video;
  /// (future_frames * H * W) x channels: the frames right after the window.
  num::Array future;
  Oracle oracle;
};

/// Three encoder layers over envelope-modulated, 3-tap smoothed Gaussian
/// noise: layer 0 raw, layer 1 trailing mean over 1 frame, layer 2 trailing
/// mean over 8 frames. Deterministic in `seed`.
audio::LayeredAudioFeatures gen_audio_stream(std::uint64_t seed, std::size_t frames,
                                             std::size_t per_frame, std::size_t dim,
                                             Envelope envelope = Envelope::per_frame,
                                             const WorldConfig& cfg = {});

/// Design per-feature variance of layer 0 under the configured envelope law.
double design_variance(const WorldConfig& cfg);

/// RMS of layer 0 over the S x d values of each frame.
std::vector<float> frame_energy(const audio::LayeredAudioFeatures& stream);

struct Rendered {
  num::Array video;
  Oracle oracle;
};

/// lip = tanh(talk energy of frame l); react = tanh(mean listen energy over
/// frames [l - K, l]); identity channels constant; the rest nuisance noise
/// plus a fixed centred spatial offset.
Rendered render_targets(const audio::LayeredAudioFeatures& talk,
                        const audio::LayeredAudioFeatures& listen, std::uint64_t identity_seed,
                        const WorldConfig& cfg);

/// First `frames` frames of a stream.
audio::LayeredAudioFeatures truncate_frames(const audio::LayeredAudioFeatures& f,
                                            std::size_t frames);

SynthSample make_sample(std::uint64_t seed, const WorldConfig& cfg);

struct Dataset {
  std::vector<SynthSample> samples;
  std::vector<std::size_t> train;
  std::vector<std::size_t> eval;
};

/// n independent samples and a deterministic 90/10 split.
Dataset make_dataset(std::size_t n, const WorldConfig& cfg, std::uint64_t seed);

struct OracleScores {
  double lip_corr = 0.0;
  double react_corr = 0.0;
  double identity_retention = 0.0;
  double motion_var = 0.0;
  bool lip_degenerate = false;
  bool react_degenerate = false;
};

/// Pearson correlation; returns 0 and sets `degenerate` when either series
/// has zero variance.
double pearson(const std::vector<double>& a, const std::vector<double>& b, bool& degenerate);

/// Per-frame mean of one channel over the spatial latents.
std::vector<double> channel_series(const num::Array& video, const pos::VideoGrid& grid,
                                   std::size_t channel);

OracleScores oracle_scores(const num::Array& generated, const SynthSample& sample,
                           const WorldConfig& cfg);

}  // namespace duplex::synth
