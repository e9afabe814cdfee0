#include <benchmark/benchmark.h>

#include "ilrr/diffusion.hpp"
#include "ilrr/model.hpp"
#include "ilrr/steering.hpp"
#include "ilrr/toylab.hpp"

using namespace ilrr;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    Matrix m(r, c);
    for (float& v : m.values()) v = static_cast<float>(rng.normal());
    return m;
}

Denoiser default_model() {
    DenoiserConfig cfg;
    cfg.vocab_size = static_cast<std::uint32_t>(Vocabulary::from_grammar(ToyGrammar::default_grammar()).size());
    Rng rng(1);
    return init_denoiser(cfg, rng);
}

TokenSeq masked_seq(const Denoiser& m, std::size_t n) {
    TokenSeq s;
    s.prompt_len = 1;
    s.ids.assign(n, static_cast<TokenId>(m.config.mask_token_id));
    s.ids[0] = 2;
    return s;
}

void bm_matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix a = random_matrix(n, 64, 1), b = random_matrix(64, 256, 2);
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
    state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n * 64 * 256));
}
BENCHMARK(bm_matmul)->Arg(16)->Arg(64)->Arg(128);

void bm_forward(benchmark::State& state) {
    const Denoiser m = default_model();
    const TokenSeq s = masked_seq(m, static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(forward_with_taps(m, s));
}
BENCHMARK(bm_forward)->Arg(17)->Arg(49)->Arg(128)->Unit(benchmark::kMillisecond);

void bm_avg_pool(benchmark::State& state) {
    const Matrix h = random_matrix(static_cast<std::size_t>(state.range(0)), 64, 3);
    const int k = static_cast<int>(state.range(1));
    for (auto _ : state) benchmark::DoNotOptimize(avg_pool_1d(h, k, PoolNorm::Count));
}
BENCHMARK(bm_avg_pool)->Args({16, 6})->Args({128, 6})->Args({128, 1});

void bm_spatial_update(benchmark::State& state) {
    const Matrix hx = random_matrix(48, 64, 4), hy = random_matrix(12, 64, 5);
    SteerConfig cfg;
    cfg.kernel = 6;
    cfg.mode = SteerMode::SpatiallyModulated;
    cfg.wave_freq = 7.0;
    for (auto _ : state) benchmark::DoNotOptimize(spatially_modulated_update(hx, hy, 1.0f, cfg));
}
BENCHMARK(bm_spatial_update);

// One full sampling run, unsteered vs steered on every step.
void bm_sample(benchmark::State& state) {
    const Denoiser m = default_model();
    const std::vector<TokenId> prompt = {2};
    const NoiseSchedule schedule(16, 16, ScheduleKind::Linear);
    SampleOptions opts;
    if (state.range(0)) {
        SteerConfig sc;
        sc.layers = {{3, 1.0f}, {4, 1.0f}, {5, 1.0f}, {6, 1.0f}};
        for (int t = 1; t <= 16; ++t) sc.steps.insert(t);
        sc.kernel = 6;
        opts.steer = sc;
        opts.reference.assign(16, 3);
    }
    std::uint64_t seed = 0;
    for (auto _ : state) benchmark::DoNotOptimize(sample(m, prompt, 16, schedule, opts, Rng(seed++)));
}
BENCHMARK(bm_sample)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
