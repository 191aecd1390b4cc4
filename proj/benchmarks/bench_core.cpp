#include <benchmark/benchmark.h>

#include "ctm/eval.hpp"
#include "ctm/geometry.hpp"
#include "ctm/nn/layers.hpp"
#include "ctm/postproc.hpp"
#include "ctm/rng.hpp"

namespace {

using namespace ctm;

void BM_Conv3dForward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const int c = static_cast<int>(state.range(1));
  nn::Conv3d<float> conv(c, c);
  Rng rng(1);
  conv.init(rng);
  nn::Tensor<float> x(nn::Shape{1, c, n, n, n});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.normal());
  for (auto _ : state) benchmark::DoNotOptimize(conv.forward(x, nn::Mode::Eval));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n) * n * n * 27 * c * c);
}
BENCHMARK(BM_Conv3dForward)->Args({32, 8})->Args({32, 16})->Args({16, 32})->Unit(benchmark::kMillisecond);

LabelMask speckle_mask(int n, double density) {
  Rng rng(2);
  std::vector<std::uint8_t> v(static_cast<std::size_t>(n) * n * n);
  for (auto& x : v) x = rng.uniform() < density ? static_cast<std::uint8_t>(1 + rng.below(5)) : 0;
  return LabelMask(GridGeometry{Dims(n, n, n), Spacing(1, 1, 1), {0, 0, 0}}, std::move(v));
}

void BM_ConnectedComponents(benchmark::State& state) {
  const auto m = speckle_mask(static_cast<int>(state.range(0)), 0.3);
  for (auto _ : state) benchmark::DoNotOptimize(post::connected_components(m, 26));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(m.size()));
}
BENCHMARK(BM_ConnectedComponents)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_DistanceTransform(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Dims d(n, n, n);
  std::vector<std::uint8_t> region(d.count(), 0);
  for (int z = 2; z < n - 2; ++z)
    for (int y = 2; y < n - 2; ++y)
      for (int x = 2; x < n - 2; ++x) region[d.index(x, y, z)] = 1;
  for (auto _ : state) {
    benchmark::DoNotOptimize(geo::euclidean_distance_transform(region, d, Spacing(1.5, 1.5, 1.5)));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(d.count()));
}
BENCHMARK(BM_DistanceTransform)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_RocAuc(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  std::vector<float> scores(n);
  std::vector<std::uint8_t> pos(n);
  for (std::size_t i = 0; i < n; ++i) {
    pos[i] = rng.uniform() < 0.1;
    scores[i] = static_cast<float>(rng.uniform() * 0.7 + (pos[i] ? 0.3 : 0.0));
  }
  for (auto _ : state) benchmark::DoNotOptimize(eval::roc_auc(scores, pos));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_RocAuc)->Arg(1 << 16)->Arg(1 << 20)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
