#include "cli.hpp"

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <ostream>
#include <sstream>

#include "duplex/config.hpp"
#include "duplex/harness.hpp"
#include "duplex/model.hpp"
#include "duplex/numerics/checkpoint.hpp"

namespace duplex::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Run directories are append-only: a file that already exists is an error.
void write_new(const fs::path& path, const std::string& text) {
  if (fs::exists(path)) throw std::runtime_error("refusing to overwrite " + path.string());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void append_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// First free "<stem>.json", "<stem>-2.json", ... for per-invocation sidecars.
fs::path fresh_sidecar(const fs::path& dir, const std::string& stem) {
  fs::path p = dir / (stem + ".json");
  for (int n = 2; fs::exists(p); ++n) p = dir / (stem + "-" + std::to_string(n) + ".json");
  return p;
}

struct Common {
  std::string config;
  std::optional<std::size_t> jobs;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON run config (defaults apply to missing keys)");
  sub->add_option("--jobs", c.jobs, "worker threads (default: logical processors)");
}

config::RunConfig resolve(const Common& c, const fs::path& fallback = {}) {
  config::RunConfig cfg;
  if (!c.config.empty()) {
    cfg = config::load_config(c.config);
  } else if (!fallback.empty() && fs::exists(fallback)) {
    cfg = config::load_config(fallback);
  }
  if (c.jobs) cfg.harness.jobs = *c.jobs;
  return cfg;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void write_timings(const fs::path& dir, const std::string& stem, const Json& j) {
  write_new(fresh_sidecar(dir, stem), j.dump(2) + "\n");
}

int report(const std::vector<harness::Verdict>& verdicts, std::ostream& out) {
  bool ok = true;
  for (const auto& v : verdicts) {
    out << (v.pass ? "PASS " : "FAIL ") << v.rule << " (" << v.detail << ")\n";
    ok = ok && v.pass;
  }
  return ok ? kExitOk : kExitChecksFailed;
}

// ---- train ----

struct TrainArgs {
  Common common;
  std::string stage;
  std::string resume;
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_steps;
};

std::string ckpt_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt-%06zu", step);
  return buf;
}

// Highest-numbered ckpt-NNNNNN stem in a run directory.
std::optional<fs::path> latest_checkpoint(const fs::path& dir) {
  std::optional<fs::path> best;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("ckpt-", 0) != 0 || e.path().extension() != ".manifest") continue;
    const fs::path stem = dir / e.path().stem();
    if (!best || stem.filename().string() > best->filename().string()) best = stem;
  }
  return best;
}

int cmd_train(TrainArgs& a, std::ostream& out) {
  const auto t0 = Clock::now();
  fs::path dir;
  config::RunConfig cfg;
  model::Stage stage;
  std::uint64_t seed = 0;
  const bool resuming = !a.resume.empty();
  if (resuming) {
    dir = a.resume;
    if (!fs::exists(dir / "config.json") || !fs::exists(dir / "run.json")) {
      throw std::runtime_error("--resume " + dir.string() + " is not a train run directory");
    }
    cfg = config::load_config(dir / "config.json");
    const auto run = Json::parse(read_text(dir / "run.json"));
    stage = model::parse_stage(run.at("stage").get<std::string>());
    seed = run.at("seed").get<std::uint64_t>();
    if (!a.stage.empty() && model::parse_stage(a.stage) != stage) {
      throw UsageError("--stage " + a.stage + " does not match the resumed run (" +
                       model::to_string(stage) + ")");
    }
  } else {
    if (a.stage.empty()) throw UsageError("train needs --stage talking|duplex");
    stage = model::parse_stage(a.stage);
    cfg = resolve(a.common);
    if (!a.checkpoint.empty()) cfg.train.stage1_checkpoint = a.checkpoint;
    seed = a.seed.value_or(cfg.harness.seeds.empty() ? 0 : cfg.harness.seeds.front());
  }
  if (stage == model::Stage::duplex) {
    const auto& p = cfg.train.stage1_checkpoint;
    if (p.empty()) {
      throw std::runtime_error("duplex stage needs train.stage1_checkpoint (or --checkpoint)");
    }
    if (!num::checkpoint_exists(p)) {
      throw std::runtime_error("stage-1 checkpoint not found: " + p + " (expected " + p +
                               ".manifest and " + num::payload_path(p).string() + ")");
    }
  }
  if (!resuming) {
    dir = new_run_dir(run_root(), "train-" + model::to_string(stage));
    write_new(dir / "config.json", config::to_json(cfg));
    Json run;
    run["command"] = "train";
    run["stage"] = model::to_string(stage);
    run["seed"] = seed;
    run["config_hash"] = config::config_hash(cfg);
    write_new(dir / "run.json", run.dump(2) + "\n");
    write_new(dir / "history.csv", "step,loss,grad_norm\n");
  }

  const auto data = harness::cell_dataset(cfg, seed);
  model::DuplexModel m(cfg.model_config(), num::mix_seed(cfg.model.seed, seed));
  model::TrainConfig tc = cfg.train_config();
  tc.seed = num::mix_seed(cfg.train.seed, seed);
  model::TrainState state{num::AdamW(tc.adam), 0};
  if (stage == model::Stage::duplex) {
    model::load_model(m, nullptr, cfg.train.stage1_checkpoint);
    if (m.stage() == model::Stage::none) {
      throw std::runtime_error(cfg.train.stage1_checkpoint + " has not completed the talking stage");
    }
    // duplex runs start from the finished stage-1 model with a fresh optimizer
    m.set_stage(model::Stage::talking);
  }
  if (resuming) {
    const auto ck = latest_checkpoint(dir);
    if (!ck) throw std::runtime_error("no checkpoint to resume in " + dir.string());
    const model::Stage base = m.stage();
    model::load_model(m, &state, *ck);
    m.set_stage(base);
    spdlog::info("resuming {} at step {}", ck->string(), state.step);
  }

  const std::size_t total =
      stage == model::Stage::talking ? cfg.train.talking_steps : cfg.train.duplex_steps;
  std::size_t stop = total;
  if (a.max_steps) stop = std::min(total, state.step + *a.max_steps);
  const std::size_t every = cfg.train.checkpoint_every;

  const model::Stage base = m.stage();
  std::ostringstream pending;
  auto flush = [&](const std::string& stem) {
    model::save_model(m, &state, dir / stem);
    append_text(dir / "history.csv", pending.str());
    pending.str("");
  };
  while (state.step < stop) {
    std::size_t chunk = stop - state.step;
    if (every > 0) chunk = std::min(chunk, every - state.step % every);
    auto h = model::train(m, data, stage, tc, state, chunk);
    const std::size_t first = state.step - chunk;
    for (std::size_t i = 0; i < h.loss.size(); ++i) {
      pending << first + i << ',' << fmt(h.loss[i]) << ',' << fmt(h.grad_norm[i]) << '\n';
    }
    // a partial run must not claim the stage as completed
    if (state.step < total) m.set_stage(base);
    if ((every > 0 && state.step % every == 0) || state.step == stop) {
      if (!fs::exists(dir / (ckpt_name(state.step) + ".manifest"))) flush(ckpt_name(state.step));
    }
  }
  if (!pending.str().empty()) flush(ckpt_name(state.step));
  if (state.step >= total) {
    m.set_stage(stage);
    if (!num::checkpoint_exists(dir / "final")) model::save_model(m, &state, dir / "final");
  }

  Json t;
  t["command"] = "train";
  t["stage"] = model::to_string(stage);
  t["steps_done"] = state.step;
  t["seconds"] = seconds_since(t0);
  write_timings(dir, "timings", t);
  out << "run_dir " << dir.string() << '\n';
  out << (state.step >= total ? "final " + (dir / "final").string()
                              : "stopped at step " + std::to_string(state.step))
      << '\n';
  return kExitOk;
}

// ---- sample ----

struct SampleArgs {
  Common common;
  std::string checkpoint;
  std::optional<std::size_t> guide_index;
  std::optional<float> cfg_scale;
  std::optional<std::uint64_t> seed;
  std::size_t sample = 0;
};

int cmd_sample(SampleArgs& a, std::ostream& out) {
  const auto t0 = Clock::now();
  if (!num::checkpoint_exists(a.checkpoint)) {
    throw std::runtime_error("checkpoint not found: " + a.checkpoint);
  }
  auto cfg = resolve(a.common, fs::path(a.checkpoint).parent_path() / "config.json");
  if (a.guide_index) cfg.flow.sampler.guide_index = *a.guide_index;
  if (a.cfg_scale) cfg.flow.sampler.cfg_scale = *a.cfg_scale;
  cfg.validate();
  std::uint64_t seed = cfg.harness.seeds.empty() ? 0 : cfg.harness.seeds.front();
  const fs::path run_json = fs::path(a.checkpoint).parent_path() / "run.json";
  if (fs::exists(run_json)) seed = Json::parse(read_text(run_json)).at("seed").get<std::uint64_t>();
  if (a.seed) seed = *a.seed;

  model::DuplexModel m(cfg.model_config(), 0);
  model::load_model(m, nullptr, a.checkpoint);
  const auto data = harness::cell_dataset(cfg, seed);
  const auto& ids = data.eval.empty() ? data.train : data.eval;
  if (a.sample >= ids.size()) {
    throw UsageError("--sample " + std::to_string(a.sample) + " outside the " +
                     std::to_string(ids.size()) + "-sample eval split");
  }
  const std::size_t id = ids[a.sample];
  const auto& s = data.samples[id];
  model::GenerateOptions opts;
  opts.sampler = cfg.flow.sampler;
  opts.use_listen = m.stage() == model::Stage::duplex;
  opts.noise_seed = num::mix_seed(num::mix_seed(cfg.flow.noise_seed, seed), id);
  const auto gen = model::generate(m, s.talk, &s.listen,
                                   harness::guide_latent(s, cfg, opts.sampler.guide_index), opts);
  const auto sc = synth::oracle_scores(gen, s, cfg.world());

  const fs::path dir = new_run_dir(run_root(), "sample");
  write_new(dir / "config.json", config::to_json(cfg));
  num::Checkpoint ck;
  ck.meta["checkpoint"] = a.checkpoint;
  ck.meta["sample"] = std::to_string(id);
  ck.tensors.push_back({"latents", "output", gen});
  num::save_checkpoint(dir / "latents", ck);
  harness::ExperimentRecord r;
  r.config_hash = config::config_hash(cfg);
  r.variant = std::string(attn::to_string(cfg.attention.variant));
  r.guide_index = cfg.flow.sampler.guide_index;
  r.seed = std::to_string(seed);
  r.lip_corr = sc.lip_corr;
  r.react_corr = sc.react_corr;
  r.identity_retention = sc.identity_retention;
  r.motion_var = sc.motion_var;
  harness::emit_csv({r}, dir / "metrics.csv");
  Json t;
  t["command"] = "sample";
  t["seconds"] = seconds_since(t0);
  write_timings(dir, "timings", t);

  out << "run_dir " << dir.string() << '\n';
  out << "lip_corr=" << fmt(sc.lip_corr) << " react_corr=" << fmt(sc.react_corr)
      << " identity_retention=" << fmt(sc.identity_retention)
      << " motion_var=" << fmt(sc.motion_var) << '\n';
  return kExitOk;
}

// ---- ablate / sweep-guide ----

struct AblateArgs {
  Common common;
  std::optional<std::string> variants;
  std::optional<std::string> seeds;
};

std::vector<attn::Variant> parse_variants(const std::string& csv) {
  if (csv == "all") return attn::all_variants();
  std::vector<attn::Variant> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(attn::parse_variant(item));
  }
  return out;
}

Json timing_rows(const harness::Table& t) {
  Json rows = Json::array();
  for (const auto& r : t) {
    if (r.is_mean()) continue;
    rows.push_back({{"variant", r.variant},
                    {"guide_index", r.guide_index},
                    {"seed", r.seed},
                    {"seconds", r.wall_seconds}});
  }
  return rows;
}

int cmd_ablate(AblateArgs& a, std::ostream& out) {
  auto cfg = resolve(a.common);
  if (a.variants) {
    try {
      cfg.harness.variants = parse_variants(*a.variants);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (a.seeds) cfg.harness.seeds = config::parse_seed_list(*a.seeds);
  if (cfg.harness.variants.empty()) throw UsageError("--variants is empty; use 'all' or a list");
  if (cfg.harness.seeds.empty()) throw UsageError("--seeds is empty");

  const fs::path dir = new_run_dir(run_root(), "ablate");
  write_new(dir / "config.json", config::to_json(cfg));
  const auto table =
      harness::run_ablation(cfg.harness.variants, cfg, cfg.harness.seeds, cfg.harness.jobs);
  harness::emit_csv(table, dir / "ablation.csv");
  write_timings(dir, "timings", Json{{"command", "ablate"}, {"cells", timing_rows(table)}});
  out << "run_dir " << dir.string() << '\n';
  out << "csv " << (dir / "ablation.csv").string() << '\n';
  return report(harness::ablation_verdicts(table), out);
}

struct SweepArgs {
  Common common;
  std::optional<std::string> indices;
  std::optional<std::string> seeds;
  std::string checkpoint;
};

int cmd_sweep(SweepArgs& a, std::ostream& out) {
  auto cfg = resolve(a.common, a.checkpoint.empty()
                                   ? fs::path{}
                                   : fs::path(a.checkpoint).parent_path() / "config.json");
  if (a.indices) cfg.harness.guide_indices = config::parse_index_list(*a.indices);
  if (a.seeds) cfg.harness.seeds = config::parse_seed_list(*a.seeds);
  if (cfg.harness.guide_indices.empty()) throw UsageError("--indices is empty");
  if (cfg.harness.seeds.empty()) throw UsageError("--seeds is empty");
  cfg.validate();

  std::optional<model::DuplexModel> trained;
  if (!a.checkpoint.empty()) {
    trained.emplace(cfg.model_config(), 0);
    model::load_model(*trained, nullptr, a.checkpoint);
    const fs::path run_json = fs::path(a.checkpoint).parent_path() / "run.json";
    if (!a.seeds && fs::exists(run_json)) {
      cfg.harness.seeds = {Json::parse(read_text(run_json)).at("seed").get<std::uint64_t>()};
    }
  }
  const fs::path dir = new_run_dir(run_root(), "sweep");
  write_new(dir / "config.json", config::to_json(cfg));
  const auto table = harness::run_guide_sweep(cfg.harness.guide_indices, cfg, cfg.harness.seeds,
                                              cfg.harness.jobs, trained ? &*trained : nullptr);
  harness::emit_csv(table, dir / "sweep.csv");
  write_timings(dir, "timings", Json{{"command", "sweep-guide"}, {"cells", timing_rows(table)}});
  out << "run_dir " << dir.string() << '\n';
  out << "csv " << (dir / "sweep.csv").string() << '\n';
  return report(harness::sweep_verdicts(table, cfg.data.world.frames), out);
}

}  // namespace

fs::path run_root() {
  const char* env = std::getenv("DUPLEX_RUN_DIR");
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path new_run_dir(const fs::path& root, const std::string& prefix) {
  fs::create_directories(root);
  for (int n = 1;; ++n) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "-%03d", n);
    const fs::path p = root / (prefix + buf);
    // create_directory reports false when the path already exists
    if (fs::create_directory(p)) return p;
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"duplex: toy full-duplex talking-head training and ablations"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train one stage; writes checkpoints and loss history");
  add_common(t, train.common);
  t->add_option("--stage", train.stage, "talking or duplex");
  t->add_option("--resume", train.resume, "continue an interrupted train run directory");
  t->add_option("--checkpoint", train.checkpoint, "stage-1 checkpoint stem for --stage duplex");
  t->add_option("--seed", train.seed, "cell seed (default: first harness seed)");
  t->add_option("--max-steps", train.max_steps, "stop after this many steps (resumable)");

  SampleArgs sample;
  auto* s = app.add_subcommand("sample", "generate one eval sample from a checkpoint");
  add_common(s, sample.common);
  s->add_option("--checkpoint", sample.checkpoint, "checkpoint stem")->required();
  s->add_option("--guide-index", sample.guide_index, "guide position, 1..frames+margin");
  s->add_option("--cfg-scale", sample.cfg_scale, "classifier-free guidance scale");
  s->add_option("--seed", sample.seed, "cell seed (default: the checkpoint's run seed)");
  s->add_option("--sample", sample.sample, "position in the eval split");

  AblateArgs ablate;
  auto* ab = app.add_subcommand("ablate", "attention-variant ablation; prints ordering verdicts");
  add_common(ab, ablate.common);
  ab->add_option("--variants", ablate.variants, "comma list or 'all'");
  ab->add_option("--seeds", ablate.seeds, "comma list of cell seeds");

  SweepArgs sweep;
  auto* sw = app.add_subcommand("sweep-guide", "guide-index sweep; prints ordering verdicts");
  add_common(sw, sweep.common);
  sw->add_option("--indices", sweep.indices, "comma list of guide indices");
  sw->add_option("--seeds", sweep.seeds, "comma list of cell seeds");
  sw->add_option("--checkpoint", sweep.checkpoint, "sample this model instead of training");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (*t) return cmd_train(train, out);
    if (*s) return cmd_sample(sample, out);
    if (*ab) return cmd_ablate(ablate, out);
    if (*sw) return cmd_sweep(sweep, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const config::ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitUsage;
}

}  // namespace duplex::cli
