#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "duplex/numerics/array.hpp"
#include "duplex/numerics/params.hpp"

namespace duplex::num {

/// One named tensor in a checkpoint. `group` is the partition tag ("-" when
/// the tensor has none).
struct TensorRecord {
  std::string name;
  std::string group;
  Array value;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const;
};

/// Writes `<stem>.manifest` (text: name, group, shape, byte offset, count)
/// and `<stem>.f32` (flat little-endian f32 payload).
void save_checkpoint(const std::filesystem::path& stem, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& stem);

std::filesystem::path manifest_path(const std::filesystem::path& stem);
std::filesystem::path payload_path(const std::filesystem::path& stem);
bool checkpoint_exists(const std::filesystem::path& stem);

/// Snapshot of every parameter, tagged with its group.
Checkpoint params_to_checkpoint(const ParamStore& params);
/// Copies tensors into an existing store. Every store parameter must be
/// present with a matching shape and group.
void load_params(ParamStore& params, const Checkpoint& ckpt);

}  // namespace duplex::num
