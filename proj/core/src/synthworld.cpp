#include "duplex/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "duplex/numerics/params.hpp"

namespace duplex::synth {

namespace {

constexpr float kAmpLow = 0.2F;
constexpr float kAmpHigh = 1.5F;
constexpr float kFeatureMean = 1.0F;

float draw_amplitude(std::mt19937_64& rng, const WorldConfig& cfg) {
  std::uniform_real_distribution<float> u01(0.0F, 1.0F);
  if (u01(rng) < cfg.silence_prob) return 0.0F;
  std::uniform_real_distribution<float> amp(kAmpLow, kAmpHigh);
  return amp(rng);
}

num::Array trailing_mean(const num::Array& x, std::size_t span) {
  num::Array out(x.shape());
  const std::size_t c = x.cols();
  for (std::size_t k = 0; k < x.rows(); ++k) {
    const std::size_t lo = k + 1 >= span ? k + 1 - span : 0;
    for (std::size_t j = 0; j < c; ++j) {
      double s = 0.0;
      for (std::size_t m = lo; m <= k; ++m) s += x(m, j);
      out(k, j) = static_cast<float>(s / static_cast<double>(k - lo + 1));
    }
  }
  return out;
}

}  // namespace

audio::LayeredAudioFeatures gen_audio_stream(std::uint64_t seed, std::size_t frames,
                                             std::size_t per_frame, std::size_t dim,
                                             Envelope envelope, const WorldConfig& cfg) {
  if (frames == 0 || per_frame == 0 || dim == 0) {
    throw std::invalid_argument("gen_audio_stream: frames, S and d must be >= 1");
  }
  std::mt19937_64 rng(num::mix_seed(seed, 0xA0D10ULL));
  std::uniform_real_distribution<float> u01(0.0F, 1.0F);

  std::vector<float> env(frames);
  float current = draw_amplitude(rng, cfg);
  for (std::size_t l = 0; l < frames; ++l) {
    if (envelope == Envelope::per_frame) {
      env[l] = draw_amplitude(rng, cfg);
    } else {
      if (l > 0 && u01(rng) < cfg.turn_switch_prob) current = draw_amplitude(rng, cfg);
      env[l] = current;
    }
  }

  const std::size_t n = frames * per_frame;
  std::normal_distribution<float> normal(0.0F, 1.0F);
  // n + 2 raw draws per feature so every smoothed latent has both neighbours
  num::Array raw = num::Array::matrix(n + 2, dim);
  for (auto& v : raw.values()) v = normal(rng);
  const float norm = 1.0F / std::sqrt(6.0F);  // taps (1, 2, 1): variance 6
  num::Array base = num::Array::matrix(n, dim);
  for (std::size_t k = 0; k < n; ++k) {
    const float e = env[k / per_frame];
    for (std::size_t j = 0; j < dim; ++j) {
      const float g = (raw(k, j) + 2.0F * raw(k + 1, j) + raw(k + 2, j)) * norm;
      base(k, j) = e * (kFeatureMean + g);
    }
  }

  audio::LayeredAudioFeatures f;
  f.frames = frames;
  f.per_frame = per_frame;
  f.layers.push_back(base);
  f.layers.push_back(trailing_mean(base, per_frame));
  f.layers.push_back(trailing_mean(base, 8 * per_frame));
  return f;
}

double design_variance(const WorldConfig& cfg) {
  const double active = 1.0 - cfg.silence_prob;
  const double a = kAmpLow;
  const double b = kAmpHigh;
  const double e1 = active * (a + b) / 2.0;
  const double e2 = active * (b * b * b - a * a * a) / (3.0 * (b - a));
  const double m = kFeatureMean;
  return e2 * (m * m + 1.0) - (e1 * m) * (e1 * m);
}

std::vector<float> frame_energy(const audio::LayeredAudioFeatures& stream) {
  stream.validate();
  const auto& base = stream.layers.front();
  std::vector<float> e(stream.frames);
  const std::size_t s = stream.per_frame;
  for (std::size_t l = 0; l < stream.frames; ++l) {
    double acc = 0.0;
    for (std::size_t k = l * s; k < (l + 1) * s; ++k) {
      for (float v : base.row(k)) acc += static_cast<double>(v) * v;
    }
    e[l] = static_cast<float>(std::sqrt(acc / static_cast<double>(s * base.cols())));
  }
  return e;
}

Rendered render_targets(const audio::LayeredAudioFeatures& talk,
                        const audio::LayeredAudioFeatures& listen, std::uint64_t identity_seed,
                        const WorldConfig& cfg) {
  if (talk.frames != listen.frames) {
    throw std::invalid_argument("render_targets: talk has " + std::to_string(talk.frames) +
                                " frames, listen has " + std::to_string(listen.frames));
  }
  if (cfg.channels < kIdentityEnd) {
    throw std::invalid_argument("render_targets: need at least 4 channels");
  }
  const std::size_t frames = talk.frames;
  const std::size_t hw = cfg.height * cfg.width;
  const auto talk_e = frame_energy(talk);
  const auto listen_e = frame_energy(listen);

  Rendered out;
  out.oracle.lip.resize(frames);
  out.oracle.react.resize(frames);
  for (std::size_t l = 0; l < frames; ++l) {
    out.oracle.lip[l] = std::tanh(talk_e[l]);
    const std::size_t lo = l >= cfg.context_horizon ? l - cfg.context_horizon : 0;
    double s = 0.0;
    for (std::size_t m = lo; m <= l; ++m) s += listen_e[m];
    out.oracle.react[l] = static_cast<float>(std::tanh(s / static_cast<double>(l - lo + 1)));
  }

  std::mt19937_64 rng(num::mix_seed(identity_seed, 0x1D0ULL));
  std::uniform_real_distribution<float> id_dist(-1.0F, 1.0F);
  for (std::size_t c = kIdentityBegin; c < kIdentityEnd; ++c) {
    out.oracle.identity.push_back(id_dist(rng));
  }
  std::normal_distribution<float> nuisance(0.0F, cfg.nuisance_std);

  out.video = num::Array::matrix(frames * hw, cfg.channels);
  for (std::size_t l = 0; l < frames; ++l) {
    for (std::size_t s = 0; s < hw; ++s) {
      auto row = out.video.row(l * hw + s);
      row[kLipChannel] = out.oracle.lip[l];
      row[kReactChannel] = out.oracle.react[l];
      for (std::size_t c = kIdentityBegin; c < kIdentityEnd; ++c) {
        row[c] = out.oracle.identity[c - kIdentityBegin];
      }
      for (std::size_t c = kIdentityEnd; c < cfg.channels; ++c) {
        const float centred = static_cast<float>((s + c) % hw) - (static_cast<float>(hw) - 1) / 2;
        row[c] = 0.1F * centred + nuisance(rng);
      }
    }
  }
  return out;
}

audio::LayeredAudioFeatures truncate_frames(const audio::LayeredAudioFeatures& f,
                                            std::size_t frames) {
  if (frames > f.frames) throw std::invalid_argument("truncate_frames: stream is too short");
  audio::LayeredAudioFeatures out;
  out.frames = frames;
  out.per_frame = f.per_frame;
  const std::size_t n = frames * f.per_frame;
  for (const auto& layer : f.layers) {
    num::Array l = num::Array::matrix(n, layer.cols());
    std::copy_n(layer.data(), n * layer.cols(), l.data());
    out.layers.push_back(std::move(l));
  }
  return out;
}

SynthSample make_sample(std::uint64_t seed, const WorldConfig& cfg) {
  // render past the window so later frames can serve as future guides
  const std::size_t total = cfg.frames + cfg.future_frames;
  const auto talk = gen_audio_stream(num::mix_seed(seed, 1), total, cfg.per_frame,
                                     cfg.feature_dim, Envelope::per_frame, cfg);
  const auto listen = gen_audio_stream(num::mix_seed(seed, 2), total, cfg.per_frame,
                                       cfg.feature_dim, Envelope::turns, cfg);
  WorldConfig full = cfg;
  full.frames = total;
  auto r = render_targets(talk, listen, num::mix_seed(seed, 3), full);

  SynthSample s;
  s.talk = truncate_frames(talk, cfg.frames);
  s.listen = truncate_frames(listen, cfg.frames);
  const std::size_t hw = cfg.height * cfg.width;
  const std::size_t split = cfg.frames * hw * cfg.channels;
  s.video = num::Array::matrix(cfg.frames * hw, cfg.channels);
  std::copy_n(r.video.data(), split, s.video.data());
  s.future = num::Array::matrix(cfg.future_frames * hw, cfg.channels);
  std::copy_n(r.video.data() + split, s.future.size(), s.future.data());
  s.oracle = std::move(r.oracle);
  s.oracle.lip.resize(cfg.frames);
  s.oracle.react.resize(cfg.frames);
  return s;
}

Dataset make_dataset(std::size_t n, const WorldConfig& cfg, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("make_dataset: n must be >= 1");
  Dataset d;
  d.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) d.samples.push_back(make_sample(num::mix_seed(seed, i), cfg));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(num::mix_seed(seed, 0x5B11ULL));
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_eval = n < 2 ? 0 : std::max<std::size_t>(1, n / 10);
  d.eval.assign(order.begin(), order.begin() + static_cast<long>(n_eval));
  d.train.assign(order.begin() + static_cast<long>(n_eval), order.end());
  std::sort(d.eval.begin(), d.eval.end());
  std::sort(d.train.begin(), d.train.end());
  return d;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b, bool& degenerate) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument("pearson: series lengths differ or are empty");
  }
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0;
  double saa = 0.0;
  double sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 1e-12 * n || sbb <= 1e-12 * n) {
    degenerate = true;
    return 0.0;
  }
  degenerate = false;
  return sab / std::sqrt(saa * sbb);
}

std::vector<double> channel_series(const num::Array& video, const pos::VideoGrid& grid,
                                   std::size_t channel) {
  const std::size_t hw = grid.spatial();
  std::vector<double> s(grid.frames, 0.0);
  for (std::size_t l = 0; l < grid.frames; ++l) {
    for (std::size_t p = 0; p < hw; ++p) s[l] += video(l * hw + p, channel);
    s[l] /= static_cast<double>(hw);
  }
  return s;
}

OracleScores oracle_scores(const num::Array& generated, const SynthSample& sample,
                           const WorldConfig& cfg) {
  num::require_same_shape(generated, sample.video, "oracle_scores");
  const auto grid = cfg.grid();
  OracleScores sc;
  const auto lip = channel_series(generated, grid, kLipChannel);
  const auto react = channel_series(generated, grid, kReactChannel);
  const std::vector<double> lip_ref(sample.oracle.lip.begin(), sample.oracle.lip.end());
  const std::vector<double> react_ref(sample.oracle.react.begin(), sample.oracle.react.end());
  sc.lip_corr = pearson(lip, lip_ref, sc.lip_degenerate);
  sc.react_corr = pearson(react, react_ref, sc.react_degenerate);

  double err = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < generated.rows(); ++r) {
    for (std::size_t c = kIdentityBegin; c < kIdentityEnd; ++c) {
      const double id = sample.oracle.identity[c - kIdentityBegin];
      err += std::abs(generated(r, c) - id) / (1.0 + std::abs(id));
      ++count;
    }
  }
  sc.identity_retention = 1.0 - err / static_cast<double>(count);

  auto variance = [](const std::vector<double>& s) {
    const double m = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
    double v = 0.0;
    for (double x : s) v += (x - m) * (x - m);
    return v / static_cast<double>(s.size());
  };
  sc.motion_var = 0.5 * (variance(lip) + variance(react));
  return sc;
}

}  // namespace duplex::synth
