#include "duplex/numerics/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace duplex::num {

namespace {

constexpr const char* kMagic = "duplex-checkpoint 1";

void require_token(const std::string& s, const char* what) {
  if (s.empty() || std::any_of(s.begin(), s.end(), [](char c) {
        return c == ' ' || c == '\t' || c == '\n' || c == '\r';
      })) {
    throw NumericError(std::string("checkpoint: invalid ") + what + " '" + s + "'");
  }
}

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xFFU) << 24) | ((v & 0xFF00U) << 8) | ((v >> 8) & 0xFF00U) | (v >> 24);
  }
}

}  // namespace

const TensorRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::filesystem::path manifest_path(const std::filesystem::path& stem) {
  return std::filesystem::path(stem.string() + ".manifest");
}

std::filesystem::path payload_path(const std::filesystem::path& stem) {
  return std::filesystem::path(stem.string() + ".f32");
}

bool checkpoint_exists(const std::filesystem::path& stem) {
  return std::filesystem::exists(manifest_path(stem)) &&
         std::filesystem::exists(payload_path(stem));
}

void save_checkpoint(const std::filesystem::path& stem, const Checkpoint& ckpt) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  std::ofstream manifest(manifest_path(stem), std::ios::binary | std::ios::trunc);
  std::ofstream payload(payload_path(stem), std::ios::binary | std::ios::trunc);
  if (!manifest || !payload) {
    throw NumericError("checkpoint: cannot write " + stem.string());
  }
  manifest << kMagic << '\n';
  for (const auto& [k, v] : ckpt.meta) {
    require_token(k, "meta key");
    if (v.find('\n') != std::string::npos) throw NumericError("checkpoint: multi-line meta " + k);
    manifest << "meta " << k << ' ' << v << '\n';
  }
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    require_token(t.name, "tensor name");
    require_token(t.group, "tensor group");
    manifest << "tensor " << t.name << ' ' << t.group << ' ';
    const auto& shape = t.value.shape();
    for (std::size_t i = 0; i < shape.size(); ++i) manifest << (i ? "," : "") << shape[i];
    manifest << ' ' << offset << ' ' << t.value.size() << '\n';
    for (float f : t.value.values()) {
      const std::uint32_t le = to_le(std::bit_cast<std::uint32_t>(f));
      payload.write(reinterpret_cast<const char*>(&le), sizeof le);
    }
    offset += t.value.size() * sizeof(float);
  }
  if (!manifest || !payload) throw NumericError("checkpoint: write failed for " + stem.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& stem) {
  std::ifstream manifest(manifest_path(stem), std::ios::binary);
  if (!manifest) throw NumericError("checkpoint: missing manifest " + manifest_path(stem).string());
  std::ifstream payload(payload_path(stem), std::ios::binary);
  if (!payload) throw NumericError("checkpoint: missing payload " + payload_path(stem).string());

  std::string line;
  std::getline(manifest, line);
  if (line != kMagic) throw NumericError("checkpoint: bad header in " + stem.string());

  Checkpoint ckpt;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string kind;
    is >> kind;
    if (kind == "meta") {
      std::string key;
      is >> key;
      std::string value;
      std::getline(is, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      ckpt.meta[key] = value;
    } else if (kind == "tensor") {
      TensorRecord t;
      std::string shape_text;
      std::uint64_t offset = 0;
      std::size_t count = 0;
      is >> t.name >> t.group >> shape_text >> offset >> count;
      if (!is) throw NumericError("checkpoint: malformed tensor line '" + line + "'");
      Shape shape;
      std::istringstream ss(shape_text);
      std::string dim;
      while (std::getline(ss, dim, ',')) shape.push_back(std::stoull(dim));
      if (shape_product(shape) != count) {
        throw NumericError("checkpoint: tensor " + t.name + " shape/count mismatch");
      }
      std::vector<float> data(count);
      payload.seekg(static_cast<std::streamoff>(offset));
      for (auto& f : data) {
        std::uint32_t le = 0;
        payload.read(reinterpret_cast<char*>(&le), sizeof le);
        f = std::bit_cast<float>(to_le(le));
      }
      if (!payload) throw NumericError("checkpoint: truncated payload for " + t.name);
      t.value = Array(std::move(shape), std::move(data));
      ckpt.tensors.push_back(std::move(t));
    } else {
      throw NumericError("checkpoint: unknown manifest entry '" + kind + "'");
    }
  }
  return ckpt;
}

Checkpoint params_to_checkpoint(const ParamStore& params) {
  Checkpoint ckpt;
  ckpt.meta["param_seed"] = std::to_string(params.seed());
  for (const auto& [name, p] : params.entries()) {
    ckpt.tensors.push_back({name, p.group.empty() ? "-" : p.group, p.value});
  }
  return ckpt;
}

void load_params(ParamStore& params, const Checkpoint& ckpt) {
  for (auto& [name, p] : params.entries()) {
    const TensorRecord* t = ckpt.find(name);
    if (t == nullptr) throw NumericError("checkpoint: missing parameter " + name);
    if (t->value.shape() != p.value.shape()) {
      throw NumericError("checkpoint: parameter " + name + " has shape " +
                         shape_string(t->value.shape()) + ", expected " +
                         shape_string(p.value.shape()));
    }
    if (t->group != (p.group.empty() ? "-" : p.group)) {
      throw NumericError("checkpoint: parameter " + name + " is in group " + t->group +
                         ", expected " + p.group);
    }
    p.value = t->value;
  }
}

}  // namespace duplex::num
