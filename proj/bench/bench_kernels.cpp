// Serial reference kernels against their OpenMP counterparts.
//   ./bench_kernels --benchmark_filter=opd
#include <benchmark/benchmark.h>

#include "mopd/batch.hpp"
#include "mopd/eval.hpp"

using namespace mopd;

namespace {

constexpr std::size_t kBatch = 32;

Execution exec_of(const benchmark::State& state) {
  return state.range(0) == 0 ? Execution::serial : Execution::parallel;
}

const PolicyParams& student() {
  static const auto p = PolicyParams::random(Architecture{}, 1, 0.3);
  return p;
}

const TeacherEnsemble& ensemble() {
  static const TeacherEnsemble e({PolicyParams::random(Architecture{}, 2, 0.3), PolicyParams::random(Architecture{}, 3, 0.3),
                                  PolicyParams::random(Architecture{}, 4, 0.3)},
                                 {0.3, 0.4, 0.3});
  return e;
}

SamplerConfig sampler() {
  SamplerConfig cfg;
  cfg.max_len = 48;
  cfg.seed = 11;
  return cfg;
}

const std::vector<Trajectory>& rollouts() {
  static const auto t = sample_batch(student(), {}, sampler(), 0, kBatch, Execution::serial);
  return t;
}

std::vector<Sequence> bodies() {
  std::vector<Sequence> out;
  for (const auto& t : rollouts()) out.push_back(t.body);
  return out;
}

void label(benchmark::State& state) {
  state.SetLabel(state.range(0) == 0 ? "serial" : "parallel x" + std::to_string(max_threads()));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * kBatch));
}

void BM_sample_batch(benchmark::State& state) {
  std::uint64_t stream = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(sample_batch(student(), {}, sampler(), stream, kBatch, exec_of(state)));
    stream += kBatch;
  }
  label(state);
}

void BM_opd_batch(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(opd_batch(student(), ensemble(), rollouts(), 0.5, exec_of(state)));
  label(state);
}

void BM_nll_batch(benchmark::State& state) {
  std::vector<Example> batch;
  for (const auto& s : bodies()) batch.push_back({{}, s});
  for (auto _ : state) benchmark::DoNotOptimize(nll_batch(student(), batch, exec_of(state)));
  label(state);
}

void BM_novelty_batch(benchmark::State& state) {
  static const auto reference = sequences_of(generate_natural_corpus(5, 2000, {24, 48}));
  const auto seqs = bodies();
  for (auto _ : state) benchmark::DoNotOptimize(novelty_batch(seqs, reference, exec_of(state)));
  label(state);
}

}  // namespace

BENCHMARK(BM_sample_batch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_opd_batch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_nll_batch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_novelty_batch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
