#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <stdexcept>

#include "duplex/positional.hpp"
#include "test_util.hpp"

namespace pos = duplex::pos;
namespace num = duplex::num;
using duplex::testing::dot;
using duplex::testing::random_array;
using duplex::testing::row_norm;

TEST(VideoIndex, HandExamples) {
  EXPECT_EQ(pos::video_temporal_index(0, {3, 2, 2}), 0.0F);
  EXPECT_EQ(pos::video_temporal_index(4, {3, 2, 2}), 1.0F);
  EXPECT_EQ(pos::video_temporal_index(11, {2, 2, 3}), 1.0F);
}

TEST(VideoIndex, OutOfRangeThrows) {
  EXPECT_THROW(pos::video_temporal_index(12, {3, 2, 2}), std::out_of_range);
}

TEST(VideoIndex, EverySpatialLatentOfFrameSharesIndex) {
  const pos::VideoGrid grid{5, 2, 3};
  auto map = pos::video_index_map(grid);
  ASSERT_EQ(map.size(), grid.latents());
  EXPECT_EQ(map.source, pos::Source::video);
  for (std::size_t k = 0; k < map.size(); ++k) {
    EXPECT_EQ(map.t[k], static_cast<float>(k / 6));
  }
}

TEST(AudioIndex, HandExamples) {
  EXPECT_EQ(pos::audio_temporal_index(0, 4), 0.0F);
  EXPECT_EQ(pos::audio_temporal_index(5, 4), 1.25F);
  EXPECT_EQ(pos::audio_temporal_index(7, 1), 7.0F);
}

TEST(AudioIndex, ZeroPerFrameThrows) {
  EXPECT_THROW(pos::audio_temporal_index(3, 0), std::invalid_argument);
}

TEST(AudioIndex, StaysWithinItsFrame) {
  for (std::size_t s = 1; s <= 5; ++s) {
    for (std::size_t k = 0; k < 40; ++k) {
      const float t = pos::audio_temporal_index(k, s);
      const float frame = static_cast<float>(k / s);
      EXPECT_GE(t, frame);
      EXPECT_LT(t, frame + 1.0F);
    }
  }
}

TEST(AudioIndex, TalkAndListenStreamsAlign) {
  auto talk = pos::audio_index_map(32, 2, pos::Source::talk_audio);
  auto listen = pos::audio_index_map(32, 2, pos::Source::listen_audio);
  EXPECT_EQ(talk.t, listen.t);
  EXPECT_NE(talk.source, listen.source);
}

TEST(RopeConfig, RejectsOddHeadDimAndSmallBase) {
  EXPECT_THROW((pos::RopeConfig{7, 10000.0F}.validate()), std::invalid_argument);
  EXPECT_THROW((pos::RopeConfig{8, 1.0F}.validate()), std::invalid_argument);
  EXPECT_NO_THROW((pos::RopeConfig{8, 10000.0F}.validate()));
}

TEST(Rope, ZeroIndexIsIdentity) {
  std::mt19937_64 rng(1);
  auto v = random_array(6, 8, rng);
  pos::TemporalIndexMap idx{pos::Source::video, std::vector<float>(6, 0.0F)};
  EXPECT_EQ(pos::apply_rope(v, idx, {8, 10000.0F}), v);
}

TEST(Rope, OddHeadDimThrows) {
  pos::TemporalIndexMap idx{pos::Source::video, {1.0F}};
  EXPECT_ANY_THROW(pos::apply_rope(num::Array::matrix(1, 7), idx, {7, 10000.0F}));
}

TEST(Rope, PreservesNorm) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(0.0F, 64.0F);
  auto v = random_array(50, 8, rng);
  pos::TemporalIndexMap idx{pos::Source::video, {}};
  for (std::size_t r = 0; r < 50; ++r) idx.t.push_back(u(rng));
  auto out = pos::apply_rope(v, idx, {8, 10000.0F});
  for (std::size_t r = 0; r < 50; ++r) EXPECT_NEAR(row_norm(out, r), row_norm(v, r), 1e-5);
}

TEST(Rope, FirstPairRotatesByIndex) {
  // Pair 0 has frequency 1, so index pi/2 maps (1, 0) to (0, 1).
  pos::TemporalIndexMap idx{pos::Source::video, {static_cast<float>(M_PI / 2)}};
  auto out = pos::apply_rope(num::Array::from_rows({{1.0F, 0.0F, 0.0F, 0.0F}}), idx, {4, 100.0F});
  EXPECT_NEAR(out(0, 0), 0.0F, 1e-7);
  EXPECT_NEAR(out(0, 1), 1.0F, 1e-7);
}

TEST(RopeProperty, InnerProductDependsOnlyOnOffset) {
  std::mt19937_64 rng(3);
  // Quarter-frame grid, as audio indices are; keeps i + d exact in f32.
  std::uniform_int_distribution<int> ui(0, 160);
  const float shifts[] = {1.0F, 3.5F, 100.0F};
  const pos::RopeConfig cfg{8, 10000.0F};
  for (int trial = 0; trial < 100; ++trial) {
    auto q = random_array(1, 8, rng);
    auto k = random_array(1, 8, rng);
    const float i = 0.25F * static_cast<float>(ui(rng));
    const float j = 0.25F * static_cast<float>(ui(rng));
    const float d = shifts[trial % 3];
    auto at = [&](const num::Array& v, float t) {
      return pos::apply_rope(v, {pos::Source::video, {t}}, cfg);
    };
    const double base = dot(at(q, i), 0, at(k, j), 0);
    const double moved = dot(at(q, i + d), 0, at(k, j + d), 0);
    EXPECT_NEAR(base, moved, 1e-5) << "i=" << i << " j=" << j << " d=" << d;
  }
}

TEST(Rope, RecordedVersionMatchesArrayVersion) {
  std::mt19937_64 rng(4);
  auto v = random_array(3, 8, rng);
  pos::TemporalIndexMap idx{pos::Source::talk_audio, {0.5F, 2.0F, 9.25F}};
  num::Tape t(false);
  auto rec = pos::apply_rope(t.constant(v), idx, {8, 10000.0F});
  EXPECT_EQ(rec.value(), pos::apply_rope(v, idx, {8, 10000.0F}));
}
