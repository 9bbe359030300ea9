#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <stdexcept>

#include "duplex/conditioner.hpp"
#include "test_util.hpp"

namespace audio = duplex::audio;
namespace num = duplex::num;
using duplex::testing::naive_matmul;
using duplex::testing::random_array;

namespace {

audio::ConditionerConfig small_cfg() {
  audio::ConditionerConfig c;
  c.layers = 3;
  c.layer_dim = 4;
  c.per_frame = 2;
  c.fused_dim = 8;
  c.queries = 3;
  c.left_context = 2;
  return c;
}

audio::LayeredAudioFeatures random_features(std::size_t frames, const audio::ConditionerConfig& c,
                                            std::mt19937_64& rng) {
  audio::LayeredAudioFeatures f;
  f.frames = frames;
  f.per_frame = c.per_frame;
  for (std::size_t l = 0; l < c.layers; ++l) {
    f.layers.push_back(random_array(frames * c.per_frame, c.layer_dim, rng));
  }
  return f;
}

}  // namespace

TEST(WindowPartition, ZeroContextGivesDisjointFrames) {
  auto ws = audio::window_partition(12, 4, 3, 0);
  ASSERT_EQ(ws.size(), 4U);
  for (std::size_t l = 0; l < 4; ++l) {
    EXPECT_EQ(ws[l].begin, 3 * l);
    EXPECT_EQ(ws[l].end, 3 * l + 3);
  }
}

TEST(WindowPartition, FirstWindowIsClipped) {
  auto ws = audio::window_partition(24, 6, 4, 2);
  EXPECT_EQ(ws[0].first_frame, 0U);
  EXPECT_EQ(ws[0].begin, 0U);
  EXPECT_EQ(ws[0].end, 4U);
}

TEST(WindowPartition, HandCountWithOverlap) {
  auto ws = audio::window_partition(24, 6, 4, 2);
  EXPECT_EQ(ws[5].length(), 12U);
  EXPECT_EQ(ws[5].first_frame, 3U);
  EXPECT_EQ(ws[5].begin, 12U);
  EXPECT_EQ(ws[5].end, 24U);
}

TEST(WindowPartition, RejectsNegativeContextAndLengthMismatch) {
  EXPECT_THROW(audio::window_partition(8, 4, 2, -1), std::invalid_argument);
  EXPECT_THROW(audio::window_partition(9, 4, 2, 1), std::invalid_argument);
}

TEST(WindowPartitionProperty, OneCausalWindowPerFrame) {
  for (std::size_t frames = 1; frames <= 12; ++frames) {
    for (long lc = 0; lc <= 5; ++lc) {
      auto ws = audio::window_partition(frames * 3, frames, 3, lc);
      ASSERT_EQ(ws.size(), frames);
      for (const auto& w : ws) {
        EXPECT_EQ(w.end, (w.frame + 1) * 3);  // never past the anchor frame
        EXPECT_EQ(w.first_frame, w.frame >= std::size_t(lc) ? w.frame - lc : 0);
      }
    }
  }
}

TEST(FuseLayers, SelectorProjectionReturnsFirstLayer) {
  auto c = small_cfg();
  c.layers = 2;
  c.fused_dim = 4;
  num::ParamStore ps(1);
  audio::AudioConditioner cond("talk", "talk_adapter", c, ps);
  auto& w = ps.at("talk.fuse.w").value;
  w.fill(0.0F);
  for (std::size_t i = 0; i < 4; ++i) w(i, i) = 1.0F;
  std::mt19937_64 rng(1);
  audio::LayeredAudioFeatures f{3, 2, {}};
  auto layer = random_array(6, 4, rng);
  f.layers = {layer, layer};
  EXPECT_EQ(cond.fuse_layers(f), layer);
}

TEST(FuseLayers, ZeroInputGivesBias) {
  auto c = small_cfg();
  num::ParamStore ps(2);
  audio::AudioConditioner cond("talk", "talk_adapter", c, ps);
  auto& b = ps.at("talk.fuse.b").value;
  for (std::size_t j = 0; j < b.size(); ++j) b[j] = 0.1F * float(j);
  audio::LayeredAudioFeatures f{2, 2, {}};
  for (std::size_t l = 0; l < 3; ++l) f.layers.push_back(num::Array::matrix(4, 4));
  auto y = cond.fuse_layers(f);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    for (std::size_t j = 0; j < y.cols(); ++j) EXPECT_EQ(y(r, j), b[j]);
  }
}

TEST(FuseLayers, MatchesManualConcatAndMatmul) {
  auto c = small_cfg();
  num::ParamStore ps(3);
  audio::AudioConditioner cond("talk", "talk_adapter", c, ps);
  ps.at("talk.fuse.b").value.fill(0.5F);
  std::mt19937_64 rng(2);
  auto f = random_features(5, c, rng);
  num::Array cat = num::Array::matrix(10, 12);
  for (std::size_t r = 0; r < 10; ++r) {
    for (std::size_t l = 0; l < 3; ++l) {
      for (std::size_t j = 0; j < 4; ++j) cat(r, 4 * l + j) = f.layers[l](r, j);
    }
  }
  auto ref = naive_matmul(cat, ps.at("talk.fuse.w").value);
  for (auto& v : ref.values()) v += 0.5F;
  EXPECT_LE(num::max_abs_diff(cond.fuse_layers(f), ref), 1e-6F);
}

TEST(FuseLayers, RejectsSingleLayerAndExtentMismatch) {
  auto c = small_cfg();
  num::ParamStore ps(4);
  audio::AudioConditioner cond("talk", "talk_adapter", c, ps);
  audio::LayeredAudioFeatures one{2, 2, {num::Array::matrix(4, 4)}};
  EXPECT_THROW(cond.fuse_layers(one), std::invalid_argument);
  audio::LayeredAudioFeatures ragged{
      2, 2, {num::Array::matrix(4, 4), num::Array::matrix(3, 4), num::Array::matrix(4, 4)}};
  EXPECT_THROW(cond.fuse_layers(ragged), std::invalid_argument);
}

TEST(AggregateWindow, IdenticalKeysGiveValueProjection) {
  auto c = small_cfg();
  num::ParamStore ps(5);
  audio::AudioConditioner cond("talk", "talk_adapter", c, ps);
  std::mt19937_64 rng(3);
  auto v = random_array(1, 8, rng);
  num::Array window = num::Array::matrix(6, 8);
  for (std::size_t r = 0; r < 6; ++r) {
    for (std::size_t j = 0; j < 8; ++j) window(r, j) = v(0, j);
  }
  // same position for every row makes the rotated keys identical too
  auto out = cond.aggregate_window(window, std::vector<float>(6, 2.0F), 2.0F);
  auto proj = naive_matmul(v, ps.at("talk.qformer.wv").value);
  ASSERT_EQ(out.rows(), 3U);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out(i, j), proj(0, j), 1e-6);
  }
}

TEST(AggregateWindow, SingleLatentSingleQuery) {
  auto c = small_cfg();
  c.queries = 1;
  num::ParamStore ps(6);
  audio::AudioConditioner cond("talk", "talk_adapter", c, ps);
  std::mt19937_64 rng(4);
  auto x = random_array(1, 8, rng);
  auto out = cond.aggregate_window(x, {0.5F}, 0.0F);
  EXPECT_LE(num::max_abs_diff(out, naive_matmul(x, ps.at("talk.qformer.wv").value)), 1e-6F);
}

TEST(AggregateWindow, AttentionRowsSumToOne) {
  auto c = small_cfg();
  num::ParamStore ps(7);
  audio::AudioConditioner cond("talk", "talk_adapter", c, ps);
  std::mt19937_64 rng(5);
  num::Array w;
  cond.aggregate_window(random_array(6, 8, rng), {1.0F, 1.5F, 2.0F, 2.5F, 3.0F, 3.5F}, 3.0F, &w);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double s = 0.0;
    for (float v : w.row(r)) {
      EXPECT_GE(v, 0.0F);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(AggregateWindow, EmptyWindowThrows) {
  num::ParamStore ps(8);
  audio::AudioConditioner cond("talk", "talk_adapter", small_cfg(), ps);
  EXPECT_THROW(cond.aggregate_window(num::Array::matrix(0, 8), {}, 0.0F), std::invalid_argument);
}

TEST(EncodeStream, BatchedWindowsMatchPerWindowAggregation) {
  auto c = small_cfg();
  num::ParamStore ps(9);
  audio::AudioConditioner cond("talk", "talk_adapter", c, ps);
  std::mt19937_64 rng(6);
  auto f = random_features(7, c, rng);
  num::Tape t(false);
  auto tokens = cond.encode_stream(t, &f, 7, true);
  auto fused = cond.fuse_layers(f);
  auto idx = duplex::pos::audio_index_map(7, c.per_frame, duplex::pos::Source::talk_audio);
  for (const auto& w : audio::window_partition(14, 7, 2, 2)) {
    std::vector<float> positions(idx.t.begin() + w.begin, idx.t.begin() + w.end);
    auto ref = cond.aggregate_window(audio::window_rows(fused, w), positions, float(w.frame));
    for (std::size_t i = 0; i < c.queries; ++i) {
      for (std::size_t j = 0; j < c.fused_dim; ++j) {
        EXPECT_NEAR(tokens.tokens.value()(w.frame * c.queries + i, j), ref(i, j), 1e-5);
      }
    }
  }
}

TEST(EncodeStream, ShapesAndIndicesMatchAcrossPaths) {
  auto c = small_cfg();
  num::ParamStore ps(10);
  audio::AudioConditioner cond("listen", "listen_adapter", c, ps);
  std::mt19937_64 rng(7);
  auto f = random_features(6, c, rng);
  num::Tape t(false);
  auto cond_tokens = cond.encode_stream(t, &f, 6, true);
  auto null_tokens = cond.encode_stream(t, nullptr, 6, false);
  EXPECT_EQ(cond_tokens.tokens.value().shape(), null_tokens.tokens.value().shape());
  EXPECT_EQ(cond_tokens.indices, null_tokens.indices);
  EXPECT_EQ(cond_tokens.tokens.value().rows(), 6U * c.queries);
  EXPECT_TRUE(cond_tokens.conditional);
  EXPECT_FALSE(null_tokens.conditional);
  for (std::size_t r = 0; r < cond_tokens.indices.size(); ++r) {
    EXPECT_EQ(cond_tokens.indices.t[r], static_cast<float>(r / c.queries));
  }
}

TEST(EncodeStream, UnconditionalIgnoresAudio) {
  auto c = small_cfg();
  num::ParamStore ps(11);
  audio::AudioConditioner cond("talk", "talk_adapter", c, ps);
  std::mt19937_64 rng(8);
  auto f1 = random_features(5, c, rng);
  auto f2 = random_features(5, c, rng);
  num::Tape t(false);
  auto a = cond.encode_stream(t, &f1, 5, false);
  auto b = cond.encode_stream(t, &f2, 5, false);
  auto n = cond.encode_stream(t, nullptr, 5, false);
  EXPECT_EQ(a.tokens.value(), b.tokens.value());
  EXPECT_EQ(a.tokens.value(), n.tokens.value());
}

TEST(EncodeStream, ConditionalWithoutAudioThrows) {
  num::ParamStore ps(12);
  audio::AudioConditioner cond("talk", "talk_adapter", small_cfg(), ps);
  num::Tape t(false);
  EXPECT_THROW(cond.encode_stream(t, nullptr, 4, true), std::invalid_argument);
}

TEST(EncodeStreamProperty, TokenCountIndependentOfContent) {
  auto c = small_cfg();
  num::ParamStore ps(13);
  audio::AudioConditioner cond("talk", "talk_adapter", c, ps);
  std::mt19937_64 rng(9);
  for (std::size_t frames = 1; frames <= 9; ++frames) {
    auto f = random_features(frames, c, rng);
    for (auto& l : f.layers) {
      for (auto& v : l.values()) v *= float(frames);
    }
    num::Tape t(false);
    EXPECT_EQ(cond.encode_stream(t, &f, frames, true).tokens.value().rows(), frames * c.queries);
  }
}

TEST(EncodeStreamProperty, FutureAudioDoesNotLeakBackwards) {
  auto c = small_cfg();
  num::ParamStore ps(14);
  audio::AudioConditioner cond("talk", "talk_adapter", c, ps);
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<std::size_t> pick(0, 9);
  for (int trial = 0; trial < 20; ++trial) {
    auto f = random_features(10, c, rng);
    const std::size_t l = pick(rng);
    auto g = f;
    for (auto& layer : g.layers) {
      for (std::size_t r = (l + 1) * c.per_frame; r < layer.rows(); ++r) {
        for (auto& v : layer.row(r)) v += 5.0F * float(trial + 1);
      }
    }
    num::Tape t(false);
    auto a = cond.encode_stream(t, &f, 10, true);
    auto b = cond.encode_stream(t, &g, 10, true);
    for (std::size_t r = 0; r < a.indices.size(); ++r) {
      if (a.indices.t[r] > static_cast<float>(l)) continue;
      for (std::size_t j = 0; j < c.fused_dim; ++j) {
        EXPECT_EQ(a.tokens.value()(r, j), b.tokens.value()(r, j)) << "l=" << l << " row " << r;
      }
    }
  }
}

TEST(Conditioner, StreamsOwnDisjointParameters) {
  num::ParamStore ps(15);
  audio::AudioConditioner talk("talk", "talk_adapter", small_cfg(), ps);
  audio::AudioConditioner listen("listen", "listen_adapter", small_cfg(), ps);
  std::size_t talk_n = 0;
  std::size_t listen_n = 0;
  for (const auto& [name, p] : ps.entries()) {
    if (p.group == "talk_adapter") {
      EXPECT_EQ(name.rfind("talk.", 0), 0U) << name;
      ++talk_n;
    } else {
      EXPECT_EQ(p.group, "listen_adapter");
      EXPECT_EQ(name.rfind("listen.", 0), 0U) << name;
      ++listen_n;
    }
  }
  EXPECT_EQ(talk_n, listen_n);
  EXPECT_GT(talk_n, 0U);
}
