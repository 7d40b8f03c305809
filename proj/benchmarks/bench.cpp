#include <benchmark/benchmark.h>

#include <vector>

#include "irs/autograd.hpp"
#include "irs/baselines.hpp"
#include "irs/irn.hpp"
#include "irs/path.hpp"
#include "irs/rng.hpp"

using namespace irs;

namespace {

std::vector<float> random_values(std::size_t n, std::uint64_t seed) {
  auto rng = derive_stream(seed, "bench");
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(uniform_real(rng) - 0.5);
  return v;
}

irn::IrnConfig lastfm_config() {
  irn::IrnConfig c;
  c.d = 40;
  c.d_user = 10;
  c.layers = 5;
  c.heads = 4;
  c.l_max = 50;
  c.w_t = 1.0;
  return c;
}

}  // namespace

static void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    nn::gemm(a.data(), b.data(), c.data(), n, n, n, false, false, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Gemm)->Arg(40)->Arg(128)->Arg(256);

static void BM_Attention(benchmark::State& state) {
  const std::size_t batch = static_cast<std::size_t>(state.range(0)), m = 50, heads = 4, d = 40;
  const nn::Tensor<float> q({batch * m, d}, random_values(batch * m * d, 3));
  const nn::Tensor<float> k({batch * m, d}, random_values(batch * m * d, 4));
  const nn::Tensor<float> v({batch * m, d}, random_values(batch * m * d, 5));
  irn::IrnConfig cfg = lastfm_config();
  const auto one = irn::build_pim<float>(cfg, 1.0);
  nn::Tensor<float> bias({batch, m, m});
  for (std::size_t b = 0; b < batch; ++b) std::copy(one.values().begin(), one.values().end(), bias.data() + b * m * m);
  for (auto _ : state) {
    nn::Tape<float> tape;
    tape.set_grad_enabled(false);
    auto out = nn::attention(tape.constant(q), tape.constant(k), tape.constant(v), tape.constant(bias), heads);
    benchmark::DoNotOptimize(out.value().data());
  }
}
BENCHMARK(BM_Attention)->Arg(1)->Arg(16);

static void BM_TrainStep(benchmark::State& state) {
  irn::IrnModel model(lastfm_config(), 3000, 1000, 7);
  const std::size_t batch = 32, m = 50;
  auto rng = derive_stream(8, "bench-batch");
  std::vector<ItemId> ids(batch * m);
  for (auto& x : ids) x = uniform_int(rng, 1, 3000);
  std::vector<UserId> users(batch);
  for (auto& u : users) u = uniform_int(rng, 1, 1000);
  std::vector<std::int64_t> targets;
  for (std::size_t b = 0; b < batch; ++b) {
    auto t = irn::window_targets(std::vector<ItemId>(ids.begin() + b * m, ids.begin() + (b + 1) * m));
    targets.insert(targets.end(), t.begin(), t.end());
  }
  for (auto _ : state) {
    nn::Tape<float> tape;
    tape.backward(nn::cross_entropy(model.forward(tape, ids, users), targets, -1));
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

static void BM_GeneratePath(benchmark::State& state) {
  irn::IrnConfig cfg = lastfm_config();
  irn::IrnModel model(cfg, 3000, 1000, 9);
  irn::IrnScorer scorer(model);
  std::vector<ItemId> history;
  for (ItemId i = 1; i <= 30; ++i) history.push_back(i * 7);
  const auto M = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    auto p = generate_path(scorer, history, 2999, 5, M, true, "irn");
    benchmark::DoNotOptimize(p.items.data());
  }
}
BENCHMARK(BM_GeneratePath)->Arg(20)->Unit(benchmark::kMillisecond);

static void BM_Dijkstra(benchmark::State& state) {
  auto rng = derive_stream(10, "bench-graph");
  const std::size_t n = 3000;
  std::vector<std::vector<ItemId>> seqs(2000);
  for (auto& s : seqs)
    for (int j = 0; j < 50; ++j) s.push_back(uniform_int(rng, 1, static_cast<std::int64_t>(n)));
  auto graph = baselines::ItemGraph::build(seqs, n);
  for (auto _ : state) {
    auto p = baselines::dijkstra_path(graph, 1, 2999, 20);
    benchmark::DoNotOptimize(p.items.data());
  }
}
BENCHMARK(BM_Dijkstra);
BENCHMARK_MAIN();
