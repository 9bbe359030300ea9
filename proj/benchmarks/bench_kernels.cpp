#include <benchmark/benchmark.h>

#include <random>

#include "duplex/attention.hpp"
#include "duplex/config.hpp"
#include "duplex/model.hpp"
#include "duplex/numerics/array.hpp"
#include "duplex/positional.hpp"

namespace attn = duplex::attn;
namespace pos = duplex::pos;
namespace num = duplex::num;
namespace model = duplex::model;

namespace {

num::Array random_array(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0F, 1.0F);
  num::Array a = num::Array::matrix(rows, cols);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = n(rng);
  return a;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_array(n, n, 1);
  const auto b = random_array(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(num::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

// Video queries of the default grid (32 frames x 2 x 2) over 32 frames of
// condition tokens.
struct CrossInputs {
  num::Array q = random_array(128, 64, 3);
  num::Array k = random_array(128, 64, 4);
  num::Array v = random_array(128, 64, 5);
  pos::TemporalIndexMap vi = pos::video_index_map({32, 2, 2});
  pos::TemporalIndexMap ai = pos::audio_index_map(32, 4, pos::Source::condition_tokens);
};

void BM_CrossAttention(benchmark::State& state) {
  const CrossInputs in;
  const auto variant = static_cast<attn::Variant>(state.range(0));
  attn::AttentionVariant av{variant, attn::build_head_schedule(8, 0.5F, 64.0F, 20.0F),
                            attn::alibi_slopes(8)};
  const auto plan = attn::make_plan(av, in.vi, in.ai, 8);
  for (auto _ : state) benchmark::DoNotOptimize(attn::multihead_attention(in.q, in.k, in.v, plan));
  state.SetLabel(std::string(attn::to_string(variant)));
}
BENCHMARK(BM_CrossAttention)->DenseRange(0, 3);

void BM_PlanBuild(benchmark::State& state) {
  const CrossInputs in;
  attn::AttentionVariant av{attn::Variant::rope3d_mhgk,
                            attn::build_head_schedule(8, 0.5F, 64.0F, 20.0F), {}};
  for (auto _ : state) benchmark::DoNotOptimize(attn::make_plan(av, in.vi, in.ai, 8));
}
BENCHMARK(BM_PlanBuild);

void BM_TrainStep(benchmark::State& state) {
  const auto run = duplex::config::toy_preset();
  const auto data = duplex::synth::make_dataset(8, run.world(), 1);
  model::DuplexModel m(run.model_config(), 2);
  const auto tc = run.train_config();
  model::TrainState ts{num::AdamW(tc.adam), 0};
  for (auto _ : state) model::train(m, data, model::Stage::talking, tc, ts, 1);
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
