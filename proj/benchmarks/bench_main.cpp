#include <benchmark/benchmark.h>

#include <random>

#include "mca/attention.hpp"
#include "mca/data.hpp"
#include "mca/model.hpp"
#include "mca/moments.hpp"
#include "mca/ops.hpp"
#include "mca/train.hpp"

namespace {

mca::Tensor random_input(std::size_t n, std::size_t c, std::size_t side) {
  std::mt19937_64 rng(7);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> v(n * c * side * side);
  for (auto& x : v) x = dist(rng);
  return mca::Tensor(mca::Shape{n, c, side, side}, std::move(v));
}

void BM_CentralMoment3(benchmark::State& state) {
  const auto x = random_input(32, static_cast<std::size_t>(state.range(0)), 16);
  for (auto _ : state) benchmark::DoNotOptimize(mca::central_moment(x, 3));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(x.size()));
}
BENCHMARK(BM_CentralMoment3)->Arg(16)->Arg(64);

void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = random_input(16, c, 16);
  const mca::Tensor w(mca::Shape{c, c, 3, 3}, 0.01f);
  for (auto _ : state) benchmark::DoNotOptimize(mca::conv2d(x, w, 1, 1));
}
BENCHMARK(BM_Conv2d)->Arg(16)->Arg(64);

void BM_AttentionForward(benchmark::State& state) {
  const auto x = random_input(32, 64, 8);
  std::mt19937_64 rng(1);
  const mca::AttentionConfig configs[] = {mca::mca_e(), mca::mca_s(), mca::se_attention(), mca::eca_attention()};
  auto block = mca::make_attention<float>(configs[state.range(0)], 64, rng);
  state.SetLabel(configs[state.range(0)].name());
  for (auto _ : state) benchmark::DoNotOptimize(block->forward(x, false).output);
}
BENCHMARK(BM_AttentionForward)->DenseRange(0, 3);

void BM_TrainStep(benchmark::State& state) {
  mca::ModelSpec spec;
  spec.norm = mca::NormKind::batch;
  spec.attention = state.range(0) ? mca::mca_e() : mca::no_attention();
  mca::Model<float> model(spec, 1);
  const auto data = mca::make_moment_dataset(32, 4, 3, 16, 3);
  mca::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 32;
  cfg.flip_prob = 0.0;
  state.SetLabel(spec.attention.name());
  for (auto _ : state) benchmark::DoNotOptimize(mca::train(model, data, cfg).steps);
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
