#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "duplex/attention.hpp"
#include "duplex/conditioner.hpp"
#include "duplex/flow.hpp"
#include "duplex/numerics/optim.hpp"
#include "duplex/numerics/params.hpp"
#include "duplex/numerics/tape.hpp"
#include "duplex/positional.hpp"
#include "duplex/synthworld.hpp"

namespace duplex::model {

inline const std::string kBackbone = "backbone";
inline const std::string kTalkAdapter = "talk_adapter";
inline const std::string kListenAdapter = "listen_adapter";

/// Inputs to build_head_schedule; sigma_max <= 0 means 2 * frames.
struct ScheduleSpec {
  float sigma_min = 0.5F;
  float sigma_max = 0.0F;
  float alpha_max = 20.0F;
};

struct DuplexModelConfig {
  std::size_t depth = 4;
  std::size_t dim = 64;
  std::size_t heads = 8;
  std::size_t frames = 32;
  std::size_t height = 2;
  std::size_t width = 2;
  std::size_t channels = 8;
  std::size_t mlp_ratio = 4;
  float rope_base = 10000.0F;
  /// Future guide slots past the window: guide_index may reach frames + guide_margin.
  std::size_t guide_margin = 8;
  attn::Variant variant = attn::Variant::rope3d_mhgk;
  ScheduleSpec talk_schedule;
  ScheduleSpec listen_schedule;
  audio::ConditionerConfig conditioner;

  pos::VideoGrid grid() const { return {frames, height, width}; }
  std::size_t rows() const { return frames * height * width; }
  std::size_t head_dim() const { return dim / heads; }
  /// Throws std::invalid_argument on inconsistent sizes.
  void validate() const;
};

enum class Stage { none, talking, duplex };
std::string to_string(Stage s);
Stage parse_stage(const std::string& s);

/// Query checksums captured during an instrumented forward, one per block.
struct ForwardTrace {
  std::vector<std::uint64_t> talk_query;
  std::vector<std::uint64_t> listen_query;
};

/// Toy full-duplex denoiser. Parameters are partitioned into backbone,
/// talk_adapter and listen_adapter groups.
class DuplexModel {
 public:
  DuplexModel(DuplexModelConfig cfg, std::uint64_t seed);
  // conditioners hold a pointer into params_
  DuplexModel(const DuplexModel&) = delete;
  DuplexModel& operator=(const DuplexModel&) = delete;

  const DuplexModelConfig& config() const { return cfg_; }
  num::ParamStore& params() { return params_; }
  const num::ParamStore& params() const { return params_; }
  const audio::AudioConditioner& talk() const { return talk_; }
  const audio::AudioConditioner& listen() const { return listen_; }
  const attn::AttentionVariant& talk_variant() const { return talk_variant_; }
  const attn::AttentionVariant& listen_variant() const { return listen_variant_; }

  /// Highest training stage completed so far.
  Stage stage() const { return stage_; }
  void set_stage(Stage s) { stage_ = s; }

  /// Predicted velocity for one sequence. `listen` may be null (talking
  /// stage). When `guide` is given its chunk is written into x_t (index <= T)
  /// or appended after the window at temporal index guide.index - 1, with
  /// timestep 1 either way. The output always covers the T window chunks.
  num::Var forward(num::Tape& tape, const num::Array& x_t, const std::vector<float>& t_chunks,
                   const audio::ConditionTokens& talk, const audio::ConditionTokens* listen,
                   const flow::GuideSpec* guide = nullptr, ForwardTrace* trace = nullptr) const;

 private:
  num::Var param(num::Tape& tape, const std::string& name) const;
  num::Var timestep_embedding(num::Tape& tape, const std::vector<float>& t_chunks) const;
  num::Var cross_attention(num::Tape& tape, num::Var query, const audio::ConditionTokens& tokens,
                           const std::string& prefix, const attn::AttentionPlan& plan) const;

  /// Row layout and cross-attention plans for one sequence shape.
  struct Layout {
    pos::TemporalIndexMap video_idx;
    attn::AttentionPlan talk_plan;
    attn::AttentionPlan listen_plan;
    std::vector<std::size_t> row_chunk;
    std::vector<std::size_t> row_spatial;
    /// spatial2d only: zero rows for an appended guide, which has no audio frame.
    num::Array ca_row_mask;
  };
  Layout make_layout(std::size_t appended_index) const;

  DuplexModelConfig cfg_;
  num::ParamStore params_;
  audio::AudioConditioner talk_;
  audio::AudioConditioner listen_;
  attn::AttentionVariant talk_variant_;
  attn::AttentionVariant listen_variant_;
  pos::TemporalIndexMap token_idx_;
  attn::AttentionPlan self_plan_;
  /// [0] is the plain window; [k] has a guide appended at index T + k.
  std::vector<Layout> layouts_;
  std::vector<std::size_t> window_rows_;
  Stage stage_ = Stage::none;
};

/// Variant-specific attention parameters for one stream.
attn::AttentionVariant make_variant(const DuplexModelConfig& cfg, const ScheduleSpec& spec);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch = 4;
  float lr_backbone = 2e-3F;
  float lr_adapter = 2e-3F;
  float cfg_dropout = 0.1F;
  bool diffusion_forcing = true;
  std::uint64_t seed = 0;
  num::AdamWConfig adam;
};

/// Learning rate per parameter group for a stage. Groups not listed stay frozen.
std::map<std::string, float> lr_map(Stage stage, const TrainConfig& cfg);

struct History {
  std::vector<float> loss;
  std::vector<double> grad_norm;
};

/// Optimizer and progress that survive a checkpoint/resume cycle.
struct TrainState {
  num::AdamW optimizer;
  std::size_t step = 0;
};

/// Per-sample masked flow-matching loss (guide chunk excluded) recorded on
/// `tape`. The RNG drives noise, timesteps, guide position and CFG dropout.
num::Var sample_loss(num::Tape& tape, const DuplexModel& model, const synth::SynthSample& sample,
                     Stage stage, const TrainConfig& cfg, std::mt19937_64& rng);

/// Runs `steps` optimizer steps from `state.step`. Talking stage freezes the
/// listen adapter; duplex stage requires a model that completed talking.
/// Throws TrainingError on a non-finite loss, naming the step.
History train(DuplexModel& model, const synth::Dataset& data, Stage stage,
              const TrainConfig& cfg, TrainState& state, std::size_t steps,
              const std::function<void(std::size_t, float)>& on_step = {});

struct GenerateOptions {
  flow::SamplerConfig sampler;
  std::uint64_t noise_seed = 0;
  /// Use the listen stream (duplex) or skip it entirely (talking).
  bool use_listen = true;
};

/// Encodes both streams, integrates the flow from seeded noise with the
/// reference latent held at sampler.guide_index, returns the latents.
num::Array generate(const DuplexModel& model, const audio::LayeredAudioFeatures& talk_audio,
                    const audio::LayeredAudioFeatures* listen_audio, const num::Array& reference,
                    const GenerateOptions& opts);

/// Checkpoint with the partition map and training progress.
void save_model(const DuplexModel& model, const TrainState* state,
                const std::filesystem::path& stem);
/// Loads parameters (and optimizer state when `state` is given).
void load_model(DuplexModel& model, TrainState* state, const std::filesystem::path& stem);

}  // namespace duplex::model
