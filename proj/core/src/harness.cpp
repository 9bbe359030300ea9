#include "duplex/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

namespace duplex::harness {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Runs body(i) for i in [0, n) on up to `jobs` threads. The first exception
// wins and is rethrown once every worker has stopped.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& body) {
  jobs = std::min(resolve_jobs(jobs), std::max<std::size_t>(n, 1));
  if (jobs <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < jobs; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n && !failed; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
          failed = true;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

double tail_mean(const std::vector<float>& v, std::size_t n) {
  if (v.empty()) return 0.0;
  n = std::min(n, v.size());
  double s = 0.0;
  for (std::size_t i = v.size() - n; i < v.size(); ++i) s += v[i];
  return s / static_cast<double>(n);
}

ExperimentRecord make_record(const config::RunConfig& cfg, const std::string& hash,
                             std::size_t guide_index, std::uint64_t seed,
                             const synth::OracleScores& sc, double final_loss, double secs) {
  ExperimentRecord r;
  r.config_hash = hash;
  r.variant = std::string(attn::to_string(cfg.attention.variant));
  r.guide_index = guide_index;
  r.seed = std::to_string(seed);
  r.lip_corr = sc.lip_corr;
  r.react_corr = sc.react_corr;
  r.identity_retention = sc.identity_retention;
  r.motion_var = sc.motion_var;
  r.final_loss = final_loss;
  r.wall_seconds = secs;
  r.seconds = cfg.harness.record_seconds ? secs : 0.0;
  return r;
}

}  // namespace

std::size_t resolve_jobs(std::size_t jobs) {
  if (jobs == 0) jobs = std::thread::hardware_concurrency();
  return std::max<std::size_t>(jobs, 1);
}

synth::Dataset cell_dataset(const config::RunConfig& cfg, std::uint64_t seed) {
  return synth::make_dataset(cfg.data.samples, cfg.world(), num::mix_seed(cfg.data.seed, seed));
}

TrainedCell train_cell(const config::RunConfig& cfg, std::uint64_t seed) {
  const auto t0 = Clock::now();
  TrainedCell cell;
  cell.data = cell_dataset(cfg, seed);
  cell.model = std::make_unique<model::DuplexModel>(cfg.model_config(),
                                                    num::mix_seed(cfg.model.seed, seed));
  model::TrainConfig tc = cfg.train_config();
  tc.seed = num::mix_seed(cfg.train.seed, seed);
  const std::string tag = std::string(attn::to_string(cfg.attention.variant)) + "/seed " +
                          std::to_string(seed);

  model::TrainState talking{num::AdamW(tc.adam), 0};
  auto hist = model::train(*cell.model, cell.data, model::Stage::talking, tc, talking,
                           cfg.train.talking_steps);
  spdlog::info("{}: talking stage {} steps, loss {:.4f}", tag, cfg.train.talking_steps,
               tail_mean(hist.loss, 50));
  if (cfg.train.duplex_steps > 0) {
    model::TrainState duplex{num::AdamW(tc.adam), 0};
    hist = model::train(*cell.model, cell.data, model::Stage::duplex, tc, duplex,
                        cfg.train.duplex_steps);
    spdlog::info("{}: duplex stage {} steps, loss {:.4f}", tag, cfg.train.duplex_steps,
                 tail_mean(hist.loss, 50));
  }
  cell.final_loss = tail_mean(hist.loss, 50);
  cell.seconds = seconds_since(t0);
  return cell;
}

num::Array guide_latent(const synth::SynthSample& sample, const config::RunConfig& cfg,
                        std::size_t index) {
  const std::size_t frames = cfg.data.world.frames;
  const std::size_t hw = cfg.data.world.height * cfg.data.world.width;
  if (index >= 1 && index <= frames) return flow::chunk_rows(sample.video, index, hw);
  if (index > frames && (index - frames) * hw <= sample.future.rows()) {
    return flow::chunk_rows(sample.future, index - frames, hw);
  }
  throw HarnessError("guide index " + std::to_string(index) + " outside [1, " +
                     std::to_string(frames + sample.future.rows() / hw) + "]");
}

synth::OracleScores evaluate(const model::DuplexModel& model, const synth::Dataset& data,
                             const config::RunConfig& cfg, std::size_t guide_index,
                             std::uint64_t seed) {
  std::vector<std::size_t> ids = data.eval.empty() ? data.train : data.eval;
  if (cfg.harness.eval_samples > 0 && ids.size() > cfg.harness.eval_samples) {
    ids.resize(cfg.harness.eval_samples);
  }
  model::GenerateOptions opts;
  opts.sampler = cfg.flow.sampler;
  opts.sampler.guide_index = guide_index;
  opts.use_listen = model.stage() == model::Stage::duplex;

  synth::OracleScores mean;
  for (std::size_t n = 0; n < ids.size(); ++n) {
    const auto& sample = data.samples[ids[n]];
    opts.noise_seed = num::mix_seed(num::mix_seed(cfg.flow.noise_seed, seed), ids[n]);
    const num::Array gen = model::generate(model, sample.talk, &sample.listen,
                                           guide_latent(sample, cfg, guide_index), opts);
    const auto sc = synth::oracle_scores(gen, sample, cfg.world());
    mean.lip_corr += sc.lip_corr;
    mean.react_corr += sc.react_corr;
    mean.identity_retention += sc.identity_retention;
    mean.motion_var += sc.motion_var;
    mean.lip_degenerate = mean.lip_degenerate || sc.lip_degenerate;
    mean.react_degenerate = mean.react_degenerate || sc.react_degenerate;
  }
  const double k = static_cast<double>(ids.size());
  mean.lip_corr /= k;
  mean.react_corr /= k;
  mean.identity_retention /= k;
  mean.motion_var /= k;
  return mean;
}

Table run_ablation(const std::vector<attn::Variant>& variants, const config::RunConfig& base,
                   const std::vector<std::uint64_t>& seeds, std::size_t jobs) {
  if (variants.empty()) throw HarnessError("ablation: no variants");
  if (seeds.empty()) throw HarnessError("ablation: no seeds");
  struct Cell {
    attn::Variant variant;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (auto v : variants) {
    for (auto s : seeds) cells.push_back({v, s});
  }
  const std::string hash = config::config_hash(base);
  Table rows(cells.size());
  parallel_for(cells.size(), jobs, [&](std::size_t i) {
    config::RunConfig cfg = base;
    cfg.attention.variant = cells[i].variant;
    const std::string name(attn::to_string(cells[i].variant));
    try {
      const auto t0 = Clock::now();
      auto cell = train_cell(cfg, cells[i].seed);
      const auto sc = evaluate(*cell.model, cell.data, cfg, cfg.flow.sampler.guide_index,
                               cells[i].seed);
      rows[i] = make_record(cfg, hash, cfg.flow.sampler.guide_index, cells[i].seed, sc,
                            cell.final_loss, seconds_since(t0));
      spdlog::info("{}/seed {}: lip {:.3f} react {:.3f} identity {:.3f} motion {:.4f}", name,
                   cells[i].seed, sc.lip_corr, sc.react_corr, sc.identity_retention,
                   sc.motion_var);
    } catch (const std::exception& e) {
      throw HarnessError("variant " + name + " seed " + std::to_string(cells[i].seed) + ": " +
                         e.what());
    }
  });
  append_means(rows);
  return rows;
}

Table run_guide_sweep(const std::vector<std::size_t>& indices, const config::RunConfig& cfg,
                      const std::vector<std::uint64_t>& seeds, std::size_t jobs,
                      const model::DuplexModel* trained) {
  if (indices.empty()) throw HarnessError("guide sweep: no indices");
  if (seeds.empty()) throw HarnessError("guide sweep: no seeds");
  const std::size_t limit = cfg.data.world.frames + cfg.model.guide_margin;
  for (std::size_t i : indices) {
    if (i < 1 || i > limit) {
      throw HarnessError("guide index " + std::to_string(i) + " outside [1, " +
                         std::to_string(limit) + "]");
    }
  }
  const std::string hash = config::config_hash(cfg);
  const std::vector<std::uint64_t> used =
      trained ? std::vector<std::uint64_t>{seeds.front()} : seeds;

  // train every seed first, then fan the (seed, index) samplings out
  std::vector<TrainedCell> cells(used.size());
  if (!trained) {
    parallel_for(used.size(), jobs, [&](std::size_t s) { cells[s] = train_cell(cfg, used[s]); });
  } else {
    cells[0].data = cell_dataset(cfg, used[0]);
  }
  Table rows(used.size() * indices.size());
  parallel_for(rows.size(), jobs, [&](std::size_t k) {
    const std::size_t s = k / indices.size();
    const std::size_t idx = indices[k % indices.size()];
    const auto t0 = Clock::now();
    const model::DuplexModel& m = trained ? *trained : *cells[s].model;
    const auto sc = evaluate(m, cells[s].data, cfg, idx, used[s]);
    rows[k] = make_record(cfg, hash, idx, used[s], sc, cells[s].final_loss, seconds_since(t0));
    spdlog::info("guide {}/seed {}: identity {:.4f} motion {:.4f} lip {:.3f}", idx, used[s],
                 sc.identity_retention, sc.motion_var, sc.lip_corr);
  });
  append_means(rows);
  return rows;
}

void append_means(Table& table) {
  std::vector<std::pair<std::string, std::size_t>> order;
  std::map<std::pair<std::string, std::size_t>, std::vector<const ExperimentRecord*>> groups;
  for (const auto& r : table) {
    if (r.is_mean()) continue;
    const auto key = std::make_pair(r.variant, r.guide_index);
    if (groups.find(key) == groups.end()) order.push_back(key);
    groups[key].push_back(&r);
  }
  Table means;
  for (const auto& key : order) {
    const auto& g = groups[key];
    if (g.size() < 2) continue;
    ExperimentRecord m;
    m.config_hash = g.front()->config_hash;
    m.variant = key.first;
    m.guide_index = key.second;
    m.seed = "mean";
    const double n = static_cast<double>(g.size());
    for (const auto* r : g) {
      m.lip_corr += r->lip_corr / n;
      m.react_corr += r->react_corr / n;
      m.identity_retention += r->identity_retention / n;
      m.motion_var += r->motion_var / n;
      m.final_loss += r->final_loss / n;
      m.seconds += r->seconds / n;
      m.wall_seconds += r->wall_seconds / n;
    }
    means.push_back(m);
  }
  table.insert(table.end(), means.begin(), means.end());
}

namespace {

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

void emit_csv(const Table& table, const std::filesystem::path& path) {
  if (table.empty()) throw HarnessError("emit_csv: empty table, nothing written");
  std::ostringstream os;
  os << kCsvHeader << '\n';
  for (const auto& r : table) {
    os << r.variant << ',' << r.guide_index << ',' << r.seed << ',' << fmt6(r.lip_corr) << ','
       << fmt6(r.react_corr) << ',' << fmt6(r.identity_retention) << ',' << fmt6(r.motion_var)
       << ',' << fmt6(r.final_loss) << ',' << fmt6(r.seconds) << '\n';
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw HarnessError("emit_csv: cannot write " + path.string());
  out << os.str();
  if (!out) throw HarnessError("emit_csv: write failed for " + path.string());
}

Table parse_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw HarnessError("parse_csv: cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) {
    throw HarnessError("parse_csv: unexpected header in " + path.string());
  }
  Table t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 9) throw HarnessError("parse_csv: malformed line '" + line + "'");
    ExperimentRecord r;
    r.variant = f[0];
    r.guide_index = std::stoul(f[1]);
    r.seed = f[2];
    r.lip_corr = std::stod(f[3]);
    r.react_corr = std::stod(f[4]);
    r.identity_retention = std::stod(f[5]);
    r.motion_var = std::stod(f[6]);
    r.final_loss = std::stod(f[7]);
    r.seconds = std::stod(f[8]);
    t.push_back(r);
  }
  return t;
}

namespace {

// Seed-mean rows when present, otherwise the lone per-seed row.
std::map<std::string, const ExperimentRecord*> summary_by_variant(const Table& table) {
  std::map<std::string, const ExperimentRecord*> out;
  for (const auto& r : table) {
    auto it = out.find(r.variant);
    if (it == out.end() || (r.is_mean() && !it->second->is_mean())) out[r.variant] = &r;
  }
  return out;
}

std::map<std::size_t, const ExperimentRecord*> summary_by_index(const Table& table) {
  std::map<std::size_t, const ExperimentRecord*> out;
  for (const auto& r : table) {
    auto it = out.find(r.guide_index);
    if (it == out.end() || (r.is_mean() && !it->second->is_mean())) out[r.guide_index] = &r;
  }
  return out;
}

std::string cmp(const char* what, double a, double b) {
  return std::string(what) + " " + fmt6(a) + " vs " + fmt6(b);
}

}  // namespace

std::vector<Verdict> ablation_verdicts(const Table& table) {
  const auto by = summary_by_variant(table);
  auto get = [&](attn::Variant v) -> const ExperimentRecord* {
    auto it = by.find(std::string(attn::to_string(v)));
    return it == by.end() ? nullptr : it->second;
  };
  const auto* mhgk = get(attn::Variant::rope3d_mhgk);
  const auto* rope = get(attn::Variant::rope3d);
  const auto* alibi = get(attn::Variant::rope3d_alibi);
  const auto* flat = get(attn::Variant::spatial2d);
  std::vector<Verdict> out;
  if (mhgk && rope) {
    out.push_back({"lip_corr(rope3d_mhgk) >= lip_corr(rope3d) + 0.05",
                   mhgk->lip_corr >= rope->lip_corr + 0.05,
                   cmp("lip_corr", mhgk->lip_corr, rope->lip_corr)});
  }
  if (mhgk && flat) {
    out.push_back({"react_corr(rope3d_mhgk) >= react_corr(spatial2d) + 0.05",
                   mhgk->react_corr >= flat->react_corr + 0.05,
                   cmp("react_corr", mhgk->react_corr, flat->react_corr)});
  }
  if (mhgk && alibi) {
    out.push_back({"lip_corr(rope3d_mhgk) >= lip_corr(rope3d_alibi)",
                   mhgk->lip_corr >= alibi->lip_corr,
                   cmp("lip_corr", mhgk->lip_corr, alibi->lip_corr)});
  }
  return out;
}

std::vector<Verdict> sweep_verdicts(const Table& table, std::size_t frames) {
  const auto by = summary_by_index(table);
  std::vector<Verdict> out;
  const auto first = by.find(1);
  const ExperimentRecord* best = nullptr;
  const ExperimentRecord* nearest = nullptr;
  // the first slot past the window is the closest a guide can sit to it
  const double anchor = static_cast<double>(frames) + 1.0;
  for (const auto& [idx, r] : by) {
    if (idx == 1) continue;
    if (!best || r->identity_retention > best->identity_retention) best = r;
    const double d = std::abs(static_cast<double>(idx) - anchor);
    if (!nearest || d < std::abs(static_cast<double>(nearest->guide_index) - anchor)) nearest = r;
  }
  if (first != by.end() && best) {
    out.push_back({"identity(guide 1) + 0.03 <= identity(best index " +
                       std::to_string(best->guide_index) + ")",
                   first->second->identity_retention + 0.03 <= best->identity_retention,
                   cmp("identity_retention", first->second->identity_retention,
                       best->identity_retention)});
  }
  if (best && nearest) {
    out.push_back({"motion_var(nearest index " + std::to_string(nearest->guide_index) +
                       ") < motion_var(best index " + std::to_string(best->guide_index) + ")",
                   nearest->motion_var < best->motion_var,
                   cmp("motion_var", nearest->motion_var, best->motion_var)});
  }
  return out;
}

}  // namespace duplex::harness
