#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "duplex/attention.hpp"
#include "duplex/flow.hpp"
#include "duplex/model.hpp"
#include "duplex/synthworld.hpp"

namespace duplex::config {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataSection {
  std::size_t samples = 64;
  std::uint64_t seed = 1;
  synth::WorldConfig world;
};

struct ModelSection {
  std::size_t depth = 4;
  std::size_t dim = 64;
  std::size_t heads = 8;
  std::size_t mlp_ratio = 4;
  float rope_base = 10000.0F;
  std::size_t guide_margin = 8;
  std::uint64_t seed = 7;
};

struct AttentionSection {
  attn::Variant variant = attn::Variant::rope3d_mhgk;
  model::ScheduleSpec talk;
  model::ScheduleSpec listen;
};

struct ConditionerSection {
  std::size_t fused_dim = 32;
  std::size_t queries = 4;
  std::size_t left_context = 2;
  float rope_base = 10000.0F;
};

struct FlowSection {
  flow::SamplerConfig sampler;
  std::uint64_t noise_seed = 11;
  bool diffusion_forcing = true;
};

struct TrainSection {
  std::size_t talking_steps = 1500;
  std::size_t duplex_steps = 1000;
  std::size_t batch = 4;
  float lr_backbone = 1e-3F;
  float lr_adapter = 2e-3F;
  float cfg_dropout = 0.1F;
  float weight_decay = 0.0F;
  float clip_norm = 1.0F;
  std::uint64_t seed = 3;
  /// Steps between intermediate checkpoints; 0 keeps only the final one.
  std::size_t checkpoint_every = 0;
  /// Stage-1 checkpoint stem required by the duplex stage.
  std::string stage1_checkpoint;
};

struct HarnessSection {
  std::vector<attn::Variant> variants = attn::all_variants();
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::size_t> guide_indices{1, 16, 33, 34, 40};
  /// Eval samples scored per cell; 0 uses the whole eval split.
  std::size_t eval_samples = 0;
  /// Worker threads; 0 means one per logical processor.
  std::size_t jobs = 0;
  /// Write measured wall-clock into the CSV seconds column. Off by default so
  /// reruns produce identical bytes; timings always go to a sidecar file.
  bool record_seconds = false;
};

struct RunConfig {
  DataSection data;
  ModelSection model;
  AttentionSection attention;
  ConditionerSection conditioner;
  FlowSection flow;
  TrainSection train;
  HarnessSection harness;

  synth::WorldConfig world() const;
  model::DuplexModelConfig model_config() const;
  model::TrainConfig train_config() const;
  /// Throws ConfigError when sections disagree or values are out of range.
  void validate() const;
};

/// Parses a JSON document. Missing keys keep their defaults; unknown keys and
/// type mismatches throw ConfigError naming the dotted path.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Fully resolved document with every field, in a fixed key order.
std::string to_json(const RunConfig& cfg);
/// 16 hex digits of FNV-1a over to_json(cfg).
std::string config_hash(const RunConfig& cfg);

/// Reduced sizes that train in about a minute per cell on one core.
RunConfig toy_preset();

std::vector<std::uint64_t> parse_seed_list(const std::string& csv);
std::vector<std::size_t> parse_index_list(const std::string& csv);

}  // namespace duplex::config
