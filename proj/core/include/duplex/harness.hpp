#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "duplex/config.hpp"
#include "duplex/model.hpp"
#include "duplex/synthworld.hpp"

namespace duplex::harness {

class HarnessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentRecord {
  std::string config_hash;
  std::string variant;
  std::size_t guide_index = 1;
  /// Cell seed, or "mean" for an aggregate row.
  std::string seed;
  double lip_corr = 0.0;
  double react_corr = 0.0;
  double identity_retention = 0.0;
  double motion_var = 0.0;
  double final_loss = 0.0;
  /// CSV column: wall-clock only when harness.record_seconds is set, else 0.
  double seconds = 0.0;
  /// Always measured; not part of the CSV.
  double wall_seconds = 0.0;

  bool is_mean() const { return seed == "mean"; }
};

using Table = std::vector<ExperimentRecord>;

/// A model trained through both configured stages on one cell's data.
struct TrainedCell {
  std::unique_ptr<model::DuplexModel> model;
  synth::Dataset data;
  double final_loss = 0.0;
  double seconds = 0.0;
};

/// Dataset, initial parameters and training RNG are all derived from the
/// cell seed, never from the variant, so variants compare on equal footing.
TrainedCell train_cell(const config::RunConfig& cfg, std::uint64_t seed);

/// The dataset a cell with this seed trains and evaluates on.
synth::Dataset cell_dataset(const config::RunConfig& cfg, std::uint64_t seed);

/// Mean oracle scores over the eval split (first eval_samples of it), each
/// sample generated with its own ground-truth frame as the guide.
synth::OracleScores evaluate(const model::DuplexModel& model, const synth::Dataset& data,
                             const config::RunConfig& cfg, std::size_t guide_index,
                             std::uint64_t seed);

/// Clean chunk used as the guide at `index` (1-based; past the window it
/// comes from the sample's future frames).
num::Array guide_latent(const synth::SynthSample& sample, const config::RunConfig& cfg,
                        std::size_t index);

/// One cell per (variant, seed); per-seed rows then, with two or more seeds,
/// one mean row per variant. Cells run on up to `jobs` threads; row order is
/// fixed regardless. A failing cell rethrows tagged with its variant.
Table run_ablation(const std::vector<attn::Variant>& variants, const config::RunConfig& base,
                   const std::vector<std::uint64_t>& seeds, std::size_t jobs);

/// One trained model per seed, sampled once per guide index. When `trained`
/// is given it replaces training (single seed, its data from the first seed).
Table run_guide_sweep(const std::vector<std::size_t>& indices, const config::RunConfig& cfg,
                      const std::vector<std::uint64_t>& seeds, std::size_t jobs,
                      const model::DuplexModel* trained = nullptr);

/// Appends a mean row per (variant, guide_index) group when it has >= 2 rows.
void append_means(Table& table);

inline constexpr const char* kCsvHeader =
    "variant,guide_index,seed,lip_corr,react_corr,identity_retention,motion_var,final_loss,seconds";

/// Header plus one line per record, numbers at 6 significant digits. Throws
/// on an empty table (no file is created) or an unwritable path.
void emit_csv(const Table& table, const std::filesystem::path& path);
Table parse_csv(const std::filesystem::path& path);

struct Verdict {
  std::string rule;
  bool pass = false;
  std::string detail;
};

/// Directional checks of the attention ablation on seed-mean rows (or the
/// single seed rows). Rules whose variants are missing are not reported.
std::vector<Verdict> ablation_verdicts(const Table& table);

/// Guide-sweep checks: first-frame identity trails the best other index by
/// >= 0.03, and the index nearest the window end moves less than the best.
std::vector<Verdict> sweep_verdicts(const Table& table, std::size_t frames);

/// Resolved worker count: 0 means hardware concurrency, at least 1.
std::size_t resolve_jobs(std::size_t jobs);

}  // namespace duplex::harness
