#include "duplex/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include <spdlog/spdlog.h>

#include "duplex/numerics/checkpoint.hpp"

namespace duplex::model {

void DuplexModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (depth == 0 || dim == 0 || heads == 0 || frames == 0 || channels == 0) {
    fail("depth, dim, heads, frames and channels must be >= 1");
  }
  if (height == 0 || width == 0) fail("spatial grid must be at least 1x1");
  if (dim % heads != 0) {
    fail("dim " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) +
         " heads");
  }
  if (head_dim() % 2 != 0) fail("head dim must be even for rotary embedding");
  if (dim % 2 != 0) fail("dim must be even for the timestep embedding");
  if (mlp_ratio == 0) fail("mlp_ratio must be >= 1");
  if (guide_margin > frames / 4) {
    fail("guide_margin " + std::to_string(guide_margin) + " exceeds frames/4 = " +
         std::to_string(frames / 4));
  }
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::none: return "none";
    case Stage::talking: return "talking";
    case Stage::duplex: return "duplex";
  }
  return "none";
}

Stage parse_stage(const std::string& s) {
  if (s == "none") return Stage::none;
  if (s == "talking") return Stage::talking;
  if (s == "duplex") return Stage::duplex;
  throw std::invalid_argument("unknown stage '" + s + "'; valid: talking, duplex");
}

attn::AttentionVariant make_variant(const DuplexModelConfig& cfg, const ScheduleSpec& spec) {
  attn::AttentionVariant v;
  v.tag = cfg.variant;
  if (cfg.variant == attn::Variant::rope3d_mhgk) {
    const float smax = spec.sigma_max > 0.0F ? spec.sigma_max : 2.0F * static_cast<float>(cfg.frames);
    v.schedule = attn::build_head_schedule(cfg.heads, spec.sigma_min, smax, spec.alpha_max);
  } else if (cfg.variant == attn::Variant::rope3d_alibi) {
    v.slopes = attn::alibi_slopes(cfg.heads);
  }
  return v;
}

namespace {

std::string blk(std::size_t b) { return "blk" + std::to_string(b) + "."; }

void add_layernorm(num::ParamStore& ps, const std::string& name, std::size_t d,
                   const std::string& group) {
  ps.add_constant(name + ".g", {1, d}, 1.0F, group);
  ps.add_zeros(name + ".b", {1, d}, group);
}

audio::ConditionerConfig checked(audio::ConditionerConfig c, const DuplexModelConfig& m) {
  m.validate();
  return c;
}

}  // namespace

DuplexModel::DuplexModel(DuplexModelConfig cfg, std::uint64_t seed)
    : cfg_(cfg),
      params_(seed),
      talk_("talk", kTalkAdapter, checked(cfg.conditioner, cfg), params_),
      listen_("listen", kListenAdapter, cfg.conditioner, params_),
      talk_variant_(make_variant(cfg, cfg.talk_schedule)),
      listen_variant_(make_variant(cfg, cfg.listen_schedule)) {
  const std::size_t d = cfg_.dim;
  const std::size_t da = cfg_.conditioner.fused_dim;
  const std::size_t hw = cfg_.height * cfg_.width;

  params_.add_linear_weight("in.w", cfg_.channels, d, kBackbone);
  params_.add_zeros("in.b", {1, d}, kBackbone);
  params_.add_normal("spatial.emb", {hw, d}, 0.02F, kBackbone);
  params_.add_linear_weight("temb.w1", d, d, kBackbone);
  params_.add_zeros("temb.b1", {1, d}, kBackbone);
  params_.add_linear_weight("temb.w2", d, d, kBackbone);
  params_.add_zeros("temb.b2", {1, d}, kBackbone);
  for (std::size_t b = 0; b < cfg_.depth; ++b) {
    const std::string p = blk(b);
    add_layernorm(params_, p + "ln1", d, kBackbone);
    for (const char* w : {"self.wq", "self.wk", "self.wv", "self.wo"}) {
      params_.add_linear_weight(p + w, d, d, kBackbone);
    }
    add_layernorm(params_, p + "ln2", d, kBackbone);
    add_layernorm(params_, p + "ln3", d, kBackbone);
    params_.add_linear_weight(p + "mlp.w1", d, cfg_.mlp_ratio * d, kBackbone);
    params_.add_zeros(p + "mlp.b1", {1, cfg_.mlp_ratio * d}, kBackbone);
    params_.add_linear_weight(p + "mlp.w2", cfg_.mlp_ratio * d, d, kBackbone);
    params_.add_zeros(p + "mlp.b2", {1, d}, kBackbone);

    // the video query is shared by both streams and trained with the talk adapter
    params_.add_linear_weight(p + "ca.wq", d, d, kTalkAdapter);
    params_.add_linear_weight(p + "talk.wk", da, d, kTalkAdapter);
    params_.add_linear_weight(p + "talk.wv", da, d, kTalkAdapter);
    params_.add_linear_weight(p + "talk.wo", d, d, kTalkAdapter);

    params_.add_linear_weight(p + "listen.wk", da, d, kListenAdapter);
    params_.add_linear_weight(p + "listen.wv", da, d, kListenAdapter);
    params_.add_zeros(p + "listen.wo", {d, d}, kListenAdapter);
  }
  add_layernorm(params_, "out.ln", d, kBackbone);
  params_.add_linear_weight("out.w", d, cfg_.channels, kBackbone);
  params_.add_zeros("out.b", {1, cfg_.channels}, kBackbone);

  token_idx_.source = pos::Source::condition_tokens;
  for (std::size_t l = 0; l < cfg_.frames; ++l) {
    for (std::size_t n = 0; n < cfg_.conditioner.queries; ++n) {
      token_idx_.t.push_back(static_cast<float>(l));
    }
  }
  self_plan_.heads = cfg_.heads;
  layouts_.push_back(make_layout(0));
  for (std::size_t k = 1; k <= cfg_.guide_margin; ++k) layouts_.push_back(make_layout(cfg_.frames + k));
  window_rows_.resize(cfg_.rows());
  for (std::size_t r = 0; r < cfg_.rows(); ++r) window_rows_[r] = r;
}

DuplexModel::Layout DuplexModel::make_layout(std::size_t appended_index) const {
  const std::size_t hw = cfg_.height * cfg_.width;
  Layout lay;
  lay.video_idx = pos::video_index_map(cfg_.grid());
  std::size_t chunks = cfg_.frames;
  if (appended_index > 0) {
    for (std::size_t s = 0; s < hw; ++s) {
      lay.video_idx.t.push_back(static_cast<float>(appended_index - 1));
    }
    ++chunks;
  }
  if (cfg_.variant == attn::Variant::spatial2d && appended_index > 0) {
    // per-frame attention has nothing to offer a frame past the audio: build
    // the window plan, pad the guide rows and mask their output to zero
    const auto window = pos::video_index_map(cfg_.grid());
    lay.talk_plan = attn::make_plan(talk_variant_, window, token_idx_, cfg_.heads);
    lay.listen_plan = attn::make_plan(listen_variant_, window, token_idx_, cfg_.heads);
    for (auto* plan : {&lay.talk_plan, &lay.listen_plan}) {
      for (auto& pen : plan->penalties) {
        num::Array padded = num::Array::matrix(pen.rows() + hw, pen.cols());
        std::copy_n(pen.data(), pen.size(), padded.data());
        pen = std::move(padded);
      }
    }
    lay.ca_row_mask = num::Array::matrix(chunks * hw, cfg_.dim, 1.0F);
    std::fill_n(lay.ca_row_mask.data() + cfg_.rows() * cfg_.dim, hw * cfg_.dim, 0.0F);
  } else {
    lay.talk_plan = attn::make_plan(talk_variant_, lay.video_idx, token_idx_, cfg_.heads);
    lay.listen_plan = attn::make_plan(listen_variant_, lay.video_idx, token_idx_, cfg_.heads);
  }
  for (std::size_t r = 0; r < chunks * hw; ++r) {
    lay.row_chunk.push_back(r / hw);
    lay.row_spatial.push_back(r % hw);
  }
  return lay;
}

num::Var DuplexModel::param(num::Tape& tape, const std::string& name) const {
  // forward never writes parameter values; the tape only keeps a pointer for backward
  return tape.param(const_cast<num::ParamStore&>(params_).at(name));
}

num::Var DuplexModel::timestep_embedding(num::Tape& tape,
                                         const std::vector<float>& t_chunks) const {
  const std::size_t d = cfg_.dim;
  const std::size_t half = d / 2;
  num::Array e = num::Array::matrix(t_chunks.size(), d);
  for (std::size_t c = 0; c < t_chunks.size(); ++c) {
    for (std::size_t k = 0; k < half; ++k) {
      const double f = std::exp(-std::log(10000.0) * static_cast<double>(k) / half);
      const double a = 1000.0 * t_chunks[c] * f;
      e(c, k) = static_cast<float>(std::sin(a));
      e(c, half + k) = static_cast<float>(std::cos(a));
    }
  }
  num::Var h = num::gelu(num::linear(tape.constant(std::move(e)), param(tape, "temb.w1"),
                                     param(tape, "temb.b1")));
  return num::linear(h, param(tape, "temb.w2"), param(tape, "temb.b2"));
}

num::Var DuplexModel::cross_attention(num::Tape& tape, num::Var query,
                                      const audio::ConditionTokens& tokens,
                                      const std::string& prefix,
                                      const attn::AttentionPlan& plan) const {
  num::Var k = num::matmul(tokens.tokens, param(tape, prefix + "wk"));
  if (cfg_.variant != attn::Variant::spatial2d) {
    k = num::rope_rows(k, tokens.indices.t, cfg_.head_dim(), cfg_.rope_base);
  }
  num::Var v = num::matmul(tokens.tokens, param(tape, prefix + "wv"));
  return num::matmul(attn::multihead_attention(query, k, v, plan), param(tape, prefix + "wo"));
}

num::Var DuplexModel::forward(num::Tape& tape, const num::Array& x_t,
                              const std::vector<float>& t_chunks,
                              const audio::ConditionTokens& talk,
                              const audio::ConditionTokens* listen, const flow::GuideSpec* guide,
                              ForwardTrace* trace) const {
  if (x_t.rows() != cfg_.rows() || x_t.cols() != cfg_.channels) {
    throw std::invalid_argument("forward: latents are " + num::shape_string(x_t.shape()) +
                                ", model expects " + std::to_string(cfg_.rows()) + "x" +
                                std::to_string(cfg_.channels));
  }
  if (t_chunks.size() != cfg_.frames) {
    throw std::invalid_argument("forward: " + std::to_string(t_chunks.size()) +
                                " chunk timesteps for " + std::to_string(cfg_.frames) + " frames");
  }
  auto check_tokens = [&](const audio::ConditionTokens& tk, const char* name) {
    if (!tk.tokens.valid() || tk.tokens.tape() != &tape) {
      throw std::invalid_argument(std::string("forward: ") + name + " tokens not on this tape");
    }
    if (tk.indices.t != token_idx_.t || tk.tokens.value().rows() != token_idx_.size()) {
      throw std::invalid_argument(std::string("forward: ") + name + " tokens span " +
                                  std::to_string(tk.indices.size()) +
                                  " positions that do not match the " +
                                  std::to_string(cfg_.frames) + "-frame latent window");
    }
  };
  check_tokens(talk, "talk");
  if (listen) check_tokens(*listen, "listen");

  const std::size_t hd = cfg_.head_dim();
  const float base = cfg_.rope_base;
  const std::size_t hw = cfg_.height * cfg_.width;
  num::Array x = x_t;
  std::vector<float> t = t_chunks;
  const Layout* lay = &layouts_.front();
  if (guide) {
    if (guide->index < 1 || guide->index > cfg_.frames + cfg_.guide_margin) {
      throw flow::FlowError("guide index " + std::to_string(guide->index) + " outside [1, " +
                            std::to_string(cfg_.frames + cfg_.guide_margin) + "]");
    }
    auto g = guide->index <= cfg_.frames
                 ? flow::inject_guide(x, t, guide->latent, guide->index, hw)
                 : flow::append_guide(x, t, guide->latent, guide->index, hw);
    x = std::move(g.latents);
    t = std::move(g.t_chunks);
    if (guide->index > cfg_.frames) lay = &layouts_[guide->index - cfg_.frames];
  }
  const auto& vidx = lay->video_idx.t;

  num::Var h = num::linear(tape.constant(std::move(x)), param(tape, "in.w"), param(tape, "in.b"));
  h = num::add(h, num::gather_rows(param(tape, "spatial.emb"), lay->row_spatial));
  h = num::add(h, num::gather_rows(timestep_embedding(tape, t), lay->row_chunk));

  for (std::size_t b = 0; b < cfg_.depth; ++b) {
    const std::string p = blk(b);
    num::Var a = num::layernorm_rows(h, param(tape, p + "ln1.g"), param(tape, p + "ln1.b"));
    num::Var q = num::rope_rows(num::matmul(a, param(tape, p + "self.wq")), vidx, hd, base);
    num::Var k = num::rope_rows(num::matmul(a, param(tape, p + "self.wk")), vidx, hd, base);
    num::Var v = num::matmul(a, param(tape, p + "self.wv"));
    h = num::add(h, num::matmul(attn::multihead_attention(q, k, v, self_plan_),
                                param(tape, p + "self.wo")));

    num::Var c = num::layernorm_rows(h, param(tape, p + "ln2.g"), param(tape, p + "ln2.b"));
    num::Var query = num::matmul(c, param(tape, p + "ca.wq"));
    if (cfg_.variant != attn::Variant::spatial2d) query = num::rope_rows(query, vidx, hd, base);
    if (trace) trace->talk_query.push_back(num::checksum(query.value()));
    auto masked = [&](num::Var o) {
      return lay->ca_row_mask.empty() ? o : num::mul(o, tape.constant(lay->ca_row_mask));
    };
    h = num::add(h, masked(cross_attention(tape, query, talk, p + "talk.", lay->talk_plan)));
    if (listen) {
      if (trace) trace->listen_query.push_back(num::checksum(query.value()));
      h = num::add(h,
                   masked(cross_attention(tape, query, *listen, p + "listen.", lay->listen_plan)));
    }

    num::Var m = num::layernorm_rows(h, param(tape, p + "ln3.g"), param(tape, p + "ln3.b"));
    num::Var f = num::gelu(num::linear(m, param(tape, p + "mlp.w1"), param(tape, p + "mlp.b1")));
    h = num::add(h, num::linear(f, param(tape, p + "mlp.w2"), param(tape, p + "mlp.b2")));
  }
  if (h.value().rows() != cfg_.rows()) h = num::gather_rows(h, window_rows_);
  num::Var o = num::layernorm_rows(h, param(tape, "out.ln.g"), param(tape, "out.ln.b"));
  return num::linear(o, param(tape, "out.w"), param(tape, "out.b"));
}

std::map<std::string, float> lr_map(Stage stage, const TrainConfig& cfg) {
  std::map<std::string, float> m{{kBackbone, cfg.lr_backbone}, {kTalkAdapter, cfg.lr_adapter}};
  if (stage == Stage::duplex) m[kListenAdapter] = cfg.lr_adapter;
  return m;
}

num::Var sample_loss(num::Tape& tape, const DuplexModel& model, const synth::SynthSample& sample,
                     Stage stage, const TrainConfig& cfg, std::mt19937_64& rng) {
  const auto& mc = model.config();
  const std::size_t hw = mc.height * mc.width;
  if (sample.future.rows() < mc.guide_margin * hw) {
    throw std::invalid_argument("sample_loss: sample has " +
                                std::to_string(sample.future.rows() / hw) +
                                " future frames, guide_margin needs " +
                                std::to_string(mc.guide_margin));
  }
  num::Array future_chunks = num::Array::matrix(mc.guide_margin * hw, mc.channels);
  std::copy_n(sample.future.data(), future_chunks.size(), future_chunks.data());
  auto fs = flow::draw_flow_sample(sample.video, mc.frames, hw, cfg.diffusion_forcing, rng,
                                   &future_chunks);
  const num::Array xt = flow::ot_interpolate_chunks(fs.x0, fs.x1, fs.t_chunks, hw);
  const num::Array target = flow::fm_target(fs.x0, fs.x1);
  // in-window guides are substituted here so their rows drop out of the loss;
  // future guides are appended inside forward and never reach the output
  std::optional<flow::GuidedLatents> in_window;
  std::optional<flow::GuideSpec> future;
  if (fs.guide_index <= mc.frames) {
    in_window = flow::inject_guide(xt, fs.t_chunks, fs.guide_latent, fs.guide_index, hw);
  } else {
    future = flow::GuideSpec{fs.guide_index, fs.guide_latent, hw};
  }

  // joint drop trains the pass used at sampling time; per-stream drops on top
  std::uniform_real_distribution<float> u01(0.0F, 1.0F);
  const bool joint = u01(rng) < cfg.cfg_dropout;
  const bool talk_drop = u01(rng) < cfg.cfg_dropout;
  const bool listen_drop = u01(rng) < cfg.cfg_dropout;

  auto talk = model.talk().encode_stream(tape, &sample.talk, mc.frames, !(joint || talk_drop));
  std::optional<audio::ConditionTokens> listen;
  if (stage == Stage::duplex) {
    listen = model.listen().encode_stream(tape, &sample.listen, mc.frames,
                                          !(joint || listen_drop));
  }
  const audio::ConditionTokens* lp = listen ? &*listen : nullptr;
  if (in_window) {
    num::Var v = model.forward(tape, in_window->latents, in_window->t_chunks, talk, lp);
    return flow::fm_loss(v, target, in_window->row_weights);
  }
  num::Var v = model.forward(tape, xt, fs.t_chunks, talk, lp, &*future);
  return flow::fm_loss(v, target, std::vector<float>(xt.rows(), 1.0F));
}

namespace {

std::string norm_report(const num::ParamStore& ps) {
  std::ostringstream os;
  os << "parameter norms:";
  for (const auto& [g, n] : ps.group_norms()) os << ' ' << g << '=' << n;
  return os.str();
}

}  // namespace

History train(DuplexModel& model, const synth::Dataset& data, Stage stage,
              const TrainConfig& cfg, TrainState& state, std::size_t steps,
              const std::function<void(std::size_t, float)>& on_step) {
  if (stage == Stage::none) throw TrainingError("train: stage must be talking or duplex");
  if (stage == Stage::duplex && model.stage() == Stage::none) {
    throw TrainingError("train: duplex stage requires a model that completed the talking stage");
  }
  if (data.train.empty()) throw TrainingError("train: empty training split");
  if (cfg.batch == 0) throw TrainingError("train: batch must be >= 1");

  const auto lrs = lr_map(stage, cfg);
  const float inv_batch = 1.0F / static_cast<float>(cfg.batch);
  History hist;
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t step = state.step;
    std::mt19937_64 rng(num::mix_seed(cfg.seed, step));
    std::uniform_int_distribution<std::size_t> pick(0, data.train.size() - 1);
    model.params().zero_grad();
    double total = 0.0;
    try {
      for (std::size_t b = 0; b < cfg.batch; ++b) {
        const auto& sample = data.samples[data.train[pick(rng)]];
        num::Tape tape(true);
        num::Var loss = sample_loss(tape, model, sample, stage, cfg, rng);
        total += loss.value()[0];
        tape.backward(num::scale(loss, inv_batch));
      }
    } catch (const num::NumericError& e) {
      throw TrainingError("training diverged at step " + std::to_string(step) + ": " + e.what() +
                          "; " + norm_report(model.params()));
    }
    const auto loss = static_cast<float>(total / static_cast<double>(cfg.batch));
    if (!std::isfinite(loss)) {
      throw TrainingError("non-finite loss at step " + std::to_string(step) + "; " +
                          norm_report(model.params()));
    }
    const double gnorm = state.optimizer.step(model.params(), lrs);
    if (!std::isfinite(gnorm)) {
      throw TrainingError("non-finite gradient at step " + std::to_string(step) + "; " +
                          norm_report(model.params()));
    }
    hist.loss.push_back(loss);
    hist.grad_norm.push_back(gnorm);
    ++state.step;
    if (on_step) on_step(step, loss);
  }
  if (static_cast<int>(stage) > static_cast<int>(model.stage())) model.set_stage(stage);
  return hist;
}

namespace {

audio::ConditionTokens rebind(num::Tape& tape, const audio::ConditionTokens& tk) {
  audio::ConditionTokens out;
  out.tokens = tape.constant(tk.tokens.value());
  out.indices = tk.indices;
  out.conditional = tk.conditional;
  return out;
}

}  // namespace

num::Array generate(const DuplexModel& model, const audio::LayeredAudioFeatures& talk_audio,
                    const audio::LayeredAudioFeatures* listen_audio, const num::Array& reference,
                    const GenerateOptions& opts) {
  const auto& mc = model.config();
  const std::size_t hw = mc.height * mc.width;
  const auto& sc = opts.sampler;
  if (sc.guide_index < 1 || sc.guide_index > mc.frames + mc.guide_margin) {
    throw flow::FlowError("guide index " + std::to_string(sc.guide_index) + " outside [1, " +
                          std::to_string(mc.frames + mc.guide_margin) + "]");
  }
  const bool use_listen = opts.use_listen && listen_audio != nullptr;

  num::Tape enc(false);
  const auto talk_c = model.talk().encode_stream(enc, &talk_audio, mc.frames, true);
  const auto talk_u = model.talk().encode_stream(enc, nullptr, mc.frames, false);
  std::optional<audio::ConditionTokens> listen_c;
  std::optional<audio::ConditionTokens> listen_u;
  if (use_listen) {
    listen_c = model.listen().encode_stream(enc, listen_audio, mc.frames, true);
    listen_u = model.listen().encode_stream(enc, nullptr, mc.frames, false);
  }

  const flow::GuideSpec guide{sc.guide_index, reference, hw};
  auto pass = [&](const num::Array& x, const std::vector<float>& t,
                  const audio::ConditionTokens& talk,
                  const std::optional<audio::ConditionTokens>& listen) {
    num::Tape tape(false);
    const auto tk = rebind(tape, talk);
    std::optional<audio::ConditionTokens> ls;
    if (listen) ls = rebind(tape, *listen);
    num::Array v = model.forward(tape, x, t, tk, ls ? &*ls : nullptr, &guide).value();
    return v;
  };
  const flow::VelocityFn velocity = [&](const num::Array& x, float t) {
    const std::vector<float> tc(mc.frames, t);
    num::Array vc = pass(x, tc, talk_c, listen_c);
    if (sc.cfg_scale == 1.0F) return vc;
    return flow::cfg_combine(pass(x, tc, talk_u, listen_u), vc, sc.cfg_scale);
  };

  std::mt19937_64 rng(opts.noise_seed);
  std::normal_distribution<float> normal(0.0F, 1.0F);
  num::Array x0 = num::Array::matrix(mc.rows(), mc.channels);
  for (auto& v : x0.values()) v = normal(rng);
  // a future guide has no chunk in the window, so nothing to hold fixed
  return flow::ode_integrate(velocity, x0, sc, sc.guide_index <= mc.frames ? &guide : nullptr);
}

namespace {

std::map<std::string, std::string> shape_meta(const DuplexModelConfig& c) {
  return {{"model.depth", std::to_string(c.depth)},
          {"model.dim", std::to_string(c.dim)},
          {"model.heads", std::to_string(c.heads)},
          {"model.frames", std::to_string(c.frames)},
          {"model.height", std::to_string(c.height)},
          {"model.width", std::to_string(c.width)},
          {"model.channels", std::to_string(c.channels)},
          {"model.guide_margin", std::to_string(c.guide_margin)},
          {"model.variant", std::string(attn::to_string(c.variant))}};
}

}  // namespace

void save_model(const DuplexModel& model, const TrainState* state,
                const std::filesystem::path& stem) {
  num::Checkpoint ck = num::params_to_checkpoint(model.params());
  for (auto& [k, v] : shape_meta(model.config())) ck.meta[k] = v;
  ck.meta["stage"] = to_string(model.stage());
  if (state) {
    ck.meta["train.step"] = std::to_string(state->step);
    ck.meta["optim.steps"] = std::to_string(state->optimizer.steps());
    for (const auto& [name, m] : state->optimizer.moments()) {
      ck.tensors.push_back({"optim/" + name, "optim", m});
    }
  }
  num::save_checkpoint(stem, ck);
}

void load_model(DuplexModel& model, TrainState* state, const std::filesystem::path& stem) {
  const num::Checkpoint ck = num::load_checkpoint(stem);
  for (const auto& [k, v] : shape_meta(model.config())) {
    const auto it = ck.meta.find(k);
    if (it == ck.meta.end() || it->second != v) {
      throw num::NumericError("checkpoint " + stem.string() + ": " + k + " is " +
                              (it == ck.meta.end() ? std::string("missing") : it->second) +
                              ", model has " + v);
    }
  }
  num::load_params(model.params(), ck);
  const auto st = ck.meta.find("stage");
  model.set_stage(st == ck.meta.end() ? Stage::none : parse_stage(st->second));
  if (state) {
    const auto step = ck.meta.find("train.step");
    const auto osteps = ck.meta.find("optim.steps");
    if (step == ck.meta.end() || osteps == ck.meta.end()) {
      throw num::NumericError("checkpoint " + stem.string() + " carries no optimizer state");
    }
    state->step = std::stoull(step->second);
    state->optimizer.set_steps(std::stoull(osteps->second));
    auto& mom = state->optimizer.moments();
    mom.clear();
    const std::string prefix = "optim/";
    for (const auto& t : ck.tensors) {
      if (t.name.rfind(prefix, 0) == 0) mom[t.name.substr(prefix.size())] = t.value;
    }
  }
}

}  // namespace duplex::model
