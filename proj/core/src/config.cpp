#include "duplex/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <json.hpp>

namespace duplex::config {

using Json = nlohmann::ordered_json;

// seeds and sizes share one integer reader
static_assert(std::is_same_v<std::uint64_t, std::size_t>);

namespace {

// Both directions walk the same field list, so the reader and the writer
// cannot drift apart.
class Reader {
 public:
  explicit Reader(const Json& root) { stack_.push_back({&root, ""}); }

  void section(const std::string& key, const std::function<void()>& body) {
    const Json* parent = stack_.back().node;
    const std::string path = join(key);
    seen_.back().insert(key);
    if (parent == nullptr || !parent->contains(key)) {
      stack_.push_back({nullptr, path});
    } else {
      const Json& node = parent->at(key);
      if (!node.is_object()) throw ConfigError(path + ": expected an object");
      stack_.push_back({&node, path});
    }
    seen_.emplace_back();
    body();
    check_unknown();
    seen_.pop_back();
    stack_.pop_back();
  }

  template <typename T>
  void field(const std::string& key, T& dst) {
    seen_.back().insert(key);
    const Json* node = stack_.back().node;
    if (node == nullptr || !node->contains(key)) return;
    const Json& v = node->at(key);
    try {
      convert(v, dst);
    } catch (const Json::exception& e) {
      throw ConfigError(join(key) + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(join(key) + ": " + e.what());
    }
  }

  void finish() { check_unknown(); }

 private:
  struct Frame {
    const Json* node;
    std::string path;
  };

  std::string join(const std::string& key) const {
    return stack_.back().path.empty() ? key : stack_.back().path + "." + key;
  }

  void check_unknown() const {
    const Json* node = stack_.back().node;
    if (node == nullptr) return;
    for (const auto& [k, _] : node->items()) {
      if (seen_.back().count(k) == 0) throw ConfigError("unknown config key '" + join(k) + "'");
    }
  }

  static void convert(const Json& v, std::size_t& dst) {
    if (!v.is_number_unsigned()) throw std::invalid_argument("expected a non-negative integer");
    dst = v.get<std::size_t>();
  }
  static void convert(const Json& v, float& dst) {
    if (!v.is_number()) throw std::invalid_argument("expected a number");
    dst = v.get<float>();
  }
  static void convert(const Json& v, bool& dst) {
    if (!v.is_boolean()) throw std::invalid_argument("expected true or false");
    dst = v.get<bool>();
  }
  static void convert(const Json& v, std::string& dst) {
    if (!v.is_string()) throw std::invalid_argument("expected a string");
    dst = v.get<std::string>();
  }
  static void convert(const Json& v, attn::Variant& dst) {
    if (!v.is_string()) throw std::invalid_argument("expected a variant name");
    dst = attn::parse_variant(v.get<std::string>());
  }
  static void convert(const Json& v, flow::Method& dst) {
    if (!v.is_string()) throw std::invalid_argument("expected euler or midpoint");
    try {
      dst = flow::parse_method(v.get<std::string>());
    } catch (const flow::FlowError& e) {
      throw std::invalid_argument(e.what());
    }
  }
  template <typename T>
  static void convert(const Json& v, std::vector<T>& dst) {
    if (!v.is_array()) throw std::invalid_argument("expected a list");
    std::vector<T> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) convert(v[i], out[i]);
    dst = std::move(out);
  }

  std::vector<Frame> stack_;
  std::vector<std::set<std::string>> seen_{1};
};

class Writer {
 public:
  void section(const std::string& key, const std::function<void()>& body) {
    stack_.push_back(Json::object());
    body();
    Json done = std::move(stack_.back());
    stack_.pop_back();
    stack_.back()[key] = std::move(done);
  }

  template <typename T>
  void field(const std::string& key, const T& v) {
    stack_.back()[key] = encode(v);
  }

  Json result() const { return stack_.front(); }

 private:
  template <typename T>
  static Json encode(const T& v) {
    return Json(v);
  }
  // shortest decimal that reads back as the same float, so 1e-3 prints as 0.001
  static Json encode(const float& f) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, f);
    return std::strtod(std::string(buf, r.ptr).c_str(), nullptr);
  }
  static Json encode(const attn::Variant& v) { return std::string(attn::to_string(v)); }
  static Json encode(const flow::Method& m) { return std::string(flow::to_string(m)); }
  static Json encode(const std::vector<attn::Variant>& vs) {
    Json a = Json::array();
    for (auto v : vs) a.push_back(std::string(attn::to_string(v)));
    return a;
  }

  std::vector<Json> stack_{Json::object()};
};

template <typename V, typename C>
void visit(V& v, C& c) {
  v.section("data", [&] {
    v.field("samples", c.data.samples);
    v.field("seed", c.data.seed);
    auto& w = c.data.world;
    v.field("frames", w.frames);
    v.field("per_frame", w.per_frame);
    v.field("feature_dim", w.feature_dim);
    v.field("height", w.height);
    v.field("width", w.width);
    v.field("channels", w.channels);
    v.field("context_horizon", w.context_horizon);
    v.field("nuisance_std", w.nuisance_std);
    v.field("silence_prob", w.silence_prob);
    v.field("turn_switch_prob", w.turn_switch_prob);
    v.field("future_frames", w.future_frames);
  });
  v.section("model", [&] {
    v.field("depth", c.model.depth);
    v.field("dim", c.model.dim);
    v.field("heads", c.model.heads);
    v.field("mlp_ratio", c.model.mlp_ratio);
    v.field("rope_base", c.model.rope_base);
    v.field("guide_margin", c.model.guide_margin);
    v.field("seed", c.model.seed);
  });
  v.section("attention", [&] {
    v.field("variant", c.attention.variant);
    for (auto* stream : {&c.attention.talk, &c.attention.listen}) {
      v.section(stream == &c.attention.talk ? "talk" : "listen", [&] {
        v.field("sigma_min", stream->sigma_min);
        v.field("sigma_max", stream->sigma_max);
        v.field("alpha_max", stream->alpha_max);
      });
    }
  });
  v.section("conditioner", [&] {
    v.field("fused_dim", c.conditioner.fused_dim);
    v.field("queries", c.conditioner.queries);
    v.field("left_context", c.conditioner.left_context);
    v.field("rope_base", c.conditioner.rope_base);
  });
  v.section("flow", [&] {
    v.field("steps", c.flow.sampler.steps);
    v.field("method", c.flow.sampler.method);
    v.field("cfg_scale", c.flow.sampler.cfg_scale);
    v.field("guide_index", c.flow.sampler.guide_index);
    v.field("noise_seed", c.flow.noise_seed);
    v.field("diffusion_forcing", c.flow.diffusion_forcing);
  });
  v.section("train", [&] {
    v.field("talking_steps", c.train.talking_steps);
    v.field("duplex_steps", c.train.duplex_steps);
    v.field("batch", c.train.batch);
    v.field("lr_backbone", c.train.lr_backbone);
    v.field("lr_adapter", c.train.lr_adapter);
    v.field("cfg_dropout", c.train.cfg_dropout);
    v.field("weight_decay", c.train.weight_decay);
    v.field("clip_norm", c.train.clip_norm);
    v.field("seed", c.train.seed);
    v.field("checkpoint_every", c.train.checkpoint_every);
    v.field("stage1_checkpoint", c.train.stage1_checkpoint);
  });
  v.section("harness", [&] {
    v.field("variants", c.harness.variants);
    v.field("seeds", c.harness.seeds);
    v.field("guide_indices", c.harness.guide_indices);
    v.field("eval_samples", c.harness.eval_samples);
    v.field("jobs", c.harness.jobs);
    v.field("record_seconds", c.harness.record_seconds);
  });
}

}  // namespace

synth::WorldConfig RunConfig::world() const { return data.world; }

model::DuplexModelConfig RunConfig::model_config() const {
  model::DuplexModelConfig m;
  m.depth = model.depth;
  m.dim = model.dim;
  m.heads = model.heads;
  m.mlp_ratio = model.mlp_ratio;
  m.rope_base = model.rope_base;
  m.guide_margin = model.guide_margin;
  m.frames = data.world.frames;
  m.height = data.world.height;
  m.width = data.world.width;
  m.channels = data.world.channels;
  m.variant = attention.variant;
  m.talk_schedule = attention.talk;
  m.listen_schedule = attention.listen;
  m.conditioner.layers = 3;
  m.conditioner.layer_dim = data.world.feature_dim;
  m.conditioner.per_frame = data.world.per_frame;
  m.conditioner.fused_dim = conditioner.fused_dim;
  m.conditioner.queries = conditioner.queries;
  m.conditioner.left_context = conditioner.left_context;
  m.conditioner.rope_base = conditioner.rope_base;
  return m;
}

model::TrainConfig RunConfig::train_config() const {
  model::TrainConfig t;
  t.steps = train.talking_steps;
  t.batch = train.batch;
  t.lr_backbone = train.lr_backbone;
  t.lr_adapter = train.lr_adapter;
  t.cfg_dropout = train.cfg_dropout;
  t.diffusion_forcing = flow.diffusion_forcing;
  t.seed = train.seed;
  t.adam.weight_decay = train.weight_decay;
  t.adam.clip_norm = train.clip_norm;
  return t;
}

void RunConfig::validate() const {
  try {
    model_config().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (data.samples == 0) throw ConfigError("data.samples must be >= 1");
  if (data.world.channels < synth::kIdentityEnd) throw ConfigError("data.channels must be >= 4");
  if (data.world.future_frames < model.guide_margin) {
    throw ConfigError("data.future_frames must cover model.guide_margin");
  }
  if (flow.sampler.steps == 0) throw ConfigError("flow.steps must be >= 1");
  if (!(flow.sampler.cfg_scale >= 0.0F)) throw ConfigError("flow.cfg_scale must be >= 0");
  const std::size_t max_index = data.world.frames + model.guide_margin;
  if (flow.sampler.guide_index < 1 || flow.sampler.guide_index > max_index) {
    throw ConfigError("flow.guide_index must be in [1, " + std::to_string(max_index) + "]");
  }
  if (train.batch == 0) throw ConfigError("train.batch must be >= 1");
  if (!(train.cfg_dropout >= 0.0F && train.cfg_dropout <= 1.0F)) {
    throw ConfigError("train.cfg_dropout must be in [0, 1]");
  }
  if (!(train.lr_backbone >= 0.0F) || !(train.lr_adapter >= 0.0F)) {
    throw ConfigError("learning rates must be >= 0");
  }
  for (std::size_t i : harness.guide_indices) {
    if (i < 1 || i > max_index) {
      throw ConfigError("harness.guide_indices: " + std::to_string(i) + " outside [1, " +
                        std::to_string(max_index) + "]");
    }
  }
}

RunConfig parse_config(const std::string& text) {
  Json root;
  try {
    root = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig cfg;
  Reader r(root);
  visit(r, cfg);
  r.finish();
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_json(const RunConfig& cfg) {
  Writer w;
  visit(w, cfg);
  return w.result().dump(2) + "\n";
}

std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_json(cfg)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunConfig toy_preset() {
  RunConfig c;
  c.model.depth = 2;
  c.model.dim = 32;
  c.model.heads = 4;
  c.conditioner.fused_dim = 16;
  c.conditioner.queries = 2;
  return c;
}

namespace {

template <typename T>
std::vector<T> parse_list(const std::string& csv, const char* what) {
  std::vector<T> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      if (item.front() == '-') throw std::invalid_argument("negative");
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw ConfigError(std::string("bad ") + what + " '" + item + "'");
    out.push_back(static_cast<T>(v));
  }
  return out;
}

}  // namespace

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
  return parse_list<std::uint64_t>(csv, "seed");
}

std::vector<std::size_t> parse_index_list(const std::string& csv) {
  return parse_list<std::size_t>(csv, "index");
}

}  // namespace duplex::config
