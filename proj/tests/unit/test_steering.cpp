#include <cmath>
#include <numbers>

#include "doctest.h"
#include "helpers.hpp"
#include "ilrr/diffusion.hpp"
#include "ilrr/errors.hpp"
#include "ilrr/steering.hpp"

using namespace ilrr;
using testutil::column;
using testutil::random_matrix;

namespace {

// Straight from the definitions, no shared code with the library.
Matrix pool_oracle(const Matrix& h, int k, bool by_kernel = false) {
    const int n = static_cast<int>(h.rows()), r = k / 2;
    Matrix out(h.rows(), h.cols());
    for (int i = 0; i < n; ++i)
        for (std::size_t c = 0; c < h.cols(); ++c) {
            double s = 0;
            int cnt = 0;
            for (int j = i - r; j <= i + r; ++j)
                if (j >= 0 && j < n) {
                    s += h(j, c);
                    ++cnt;
                }
            out(i, c) = float(s / (by_kernel ? k : cnt));
        }
    return out;
}

Matrix down_oracle(const Matrix& h, std::size_t ny) {
    const std::size_t nx = h.rows();
    Matrix out(ny, h.cols());
    for (std::size_t i = 0; i < ny; ++i) {
        const std::size_t lo = i * nx / ny, hi = (i + 1) * nx / ny;
        for (std::size_t c = 0; c < h.cols(); ++c) {
            double s = 0;
            for (std::size_t j = lo; j < hi; ++j) s += h(j, c);
            out(i, c) = float(s / double(hi - lo));
        }
    }
    return out;
}

Matrix up_oracle(const Matrix& h, std::size_t nx) {
    const std::size_t ny = h.rows();
    Matrix out(nx, h.cols());
    for (std::size_t j = 0; j < nx; ++j) {
        const double x = nx == 1 ? 0.0 : double(j) * double(ny - 1) / double(nx - 1);
        const auto lo = static_cast<std::size_t>(std::floor(x));
        const std::size_t hi = std::min(lo + 1, ny - 1);
        const double frac = x - double(lo);
        for (std::size_t c = 0; c < h.cols(); ++c) out(j, c) = float((1 - frac) * h(lo, c) + frac * h(hi, c));
    }
    return out;
}

std::vector<float> values(const Matrix& m) { return {m.values().begin(), m.values().end()}; }

void check_close(const Matrix& got, std::vector<float> want, float tol = 1e-5f) {
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(got.values()[i] == doctest::Approx(want[i]).epsilon(tol));
}

}  // namespace

TEST_CASE("avg pool examples") {
    check_close(avg_pool_1d(column({1, 2, 3, 4, 5}), 3), {1.5f, 2, 3, 4, 4.5f});
    Rng rng(1);
    const Matrix h = random_matrix(6, 3, rng);
    CHECK(avg_pool_1d(h, 1) == h);
    Matrix constant(7, 2);
    for (std::size_t r = 0; r < 7; ++r) {
        constant(r, 0) = 2.5f;
        constant(r, 1) = -1.25f;
    }
    CHECK(avg_pool_1d(constant, 5) == constant);
    CHECK_THROWS_AS(avg_pool_1d(h, 0), ConfigError);
    // kernel normalization divides by k even at the edges
    check_close(avg_pool_1d(column({3, 3, 3}), 3, PoolNorm::Kernel), {2, 3, 2});
}

TEST_CASE("avg pool matches the windowed-mean oracle") {
    Rng rng(2);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + rng.below(16), d = 1 + rng.below(4);
        const int k = 1 + static_cast<int>(rng.below(9));
        const Matrix h = random_matrix(n, d, rng);
        REQUIRE(max_abs_diff(avg_pool_1d(h, k), pool_oracle(h, k)) <= 1e-6f);
        REQUIRE(max_abs_diff(avg_pool_1d(h, k, PoolNorm::Kernel), pool_oracle(h, k, true)) <= 1e-6f);
    }
}

TEST_CASE("avg pool is linear") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const Matrix u = random_matrix(11, 3, rng), v = random_matrix(11, 3, rng);
        const float a = rng.normal(), b = rng.normal();
        Matrix mix(11, 3);
        for (std::size_t i = 0; i < mix.size(); ++i) mix.values()[i] = a * u.values()[i] + b * v.values()[i];
        const Matrix pu = avg_pool_1d(u, 5), pv = avg_pool_1d(v, 5);
        Matrix want(11, 3);
        for (std::size_t i = 0; i < want.size(); ++i) want.values()[i] = a * pu.values()[i] + b * pv.values()[i];
        CHECK(max_abs_diff(avg_pool_1d(mix, 5), want) <= 1e-5f);
    }
}

TEST_CASE("ilrr update") {
    Rng rng(4);
    const Matrix hx = random_matrix(8, 4, rng), hy = random_matrix(8, 4, rng);
    CHECK(ilrr_update(hx, hy, 0.0f, 3) == hx);
    CHECK(max_abs_diff(ilrr_update(hx, hx, 2.7f, 3), hx) == 0.0f);
    CHECK(max_abs_diff(ilrr_update(hx, hy, 1.0f, 1), hy) <= 1e-6f);
    CHECK_THROWS_AS(ilrr_update(hx, random_matrix(7, 4, rng), 1.0f, 3), ContractError);

    // affine in alpha
    const Matrix one = ilrr_update(hx, hy, 1.0f, 6);
    for (float a : {0.25f, 0.8f, 1.7f}) {
        Matrix want = hx;
        for (std::size_t i = 0; i < want.size(); ++i) want.values()[i] += a * (one.values()[i] - hx.values()[i]);
        CHECK(max_abs_diff(ilrr_update(hx, hy, a, 6), want) <= 1e-5f);
    }
    // matches the formula written out
    const Matrix ax = pool_oracle(hx, 6), ay = pool_oracle(hy, 6);
    Matrix want = hx;
    for (std::size_t i = 0; i < want.size(); ++i) want.values()[i] += 0.6f * (ay.values()[i] - ax.values()[i]);
    CHECK(max_abs_diff(ilrr_update(hx, hy, 0.6f, 6), want) <= 1e-5f);
}

TEST_CASE("adaptive downsample") {
    Rng rng(5);
    const Matrix h = random_matrix(6, 2, rng);
    CHECK(adaptive_downsample(h, 6) == h);
    check_close(adaptive_downsample(column({1, 2, 3, 4}), 2), {1.5f, 3.5f});
    check_close(adaptive_downsample(column({1, 2, 3, 4, 5}), 2), {1.5f, 4.0f});
    CHECK_THROWS_AS(adaptive_downsample(h, 7), ContractError);
    CHECK_THROWS_AS(adaptive_downsample(h, 0), ContractError);
}

TEST_CASE("linear upsample") {
    Rng rng(6);
    const Matrix h = random_matrix(5, 3, rng);
    CHECK(max_abs_diff(linear_upsample(h, 5), h) == 0.0f);
    check_close(linear_upsample(column({0, 1}), 3), {0, 0.5f, 1});
    check_close(linear_upsample(column({1, 3, 5}), 5), {1, 2, 3, 4, 5});
    check_close(linear_upsample(column({7}), 4), {7, 7, 7, 7});
    CHECK_THROWS_AS(linear_upsample(h, 4), ContractError);
}

TEST_CASE("resampling matches closed forms on all lengths up to 16") {
    Rng rng(7);
    for (std::size_t nx = 1; nx <= 16; ++nx)
        for (std::size_t ny = 1; ny <= nx; ++ny) {
            const Matrix big = random_matrix(nx, 2, rng), small = random_matrix(ny, 2, rng);
            REQUIRE(max_abs_diff(adaptive_downsample(big, ny), down_oracle(big, ny)) <= 1e-6f);
            REQUIRE(max_abs_diff(linear_upsample(small, nx), up_oracle(small, nx)) <= 1e-6f);
            // constants survive the round trip exactly
            const Matrix c(ny, 2, 1.75f);
            REQUIRE(adaptive_downsample(linear_upsample(c, nx), ny) == c);
        }
}

TEST_CASE("modulation wave") {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        const float a = float(rng.uniform() * 3);
        const double f = 0.1 + rng.uniform() * 20;
        const std::size_t n = 1 + rng.below(600);
        const auto w = modulation_wave(a, f, n);
        REQUIRE(w.size() == n);
        CHECK(w[0] == a);
        for (float x : w) REQUIRE((x >= 0.0f && x <= a));
    }
    const auto w = modulation_wave(1.0f, 7.0, 512);
    CHECK(w[36] <= 0.01f);
    CHECK(w[37] <= 0.01f);
    // seven full periods: scan cyclically so the tail rising toward w_N = w_0 is not a peak
    int maxima = 0;
    const std::size_t n = w.size();
    for (std::size_t i = 0; i < n; ++i) {
        const float prev = w[(i + n - 1) % n];
        const float next = w[(i + 1) % n];
        maxima += w[i] > prev && w[i] >= next;
    }
    CHECK(maxima == 7);
}

TEST_CASE("spatially modulated update") {
    SUBCASE("hand example") {
        const std::vector<float> w(4, 1.0f);
        check_close(spatially_modulated_update(column({0, 0, 0, 0}), column({2, 4}), w, 1),
                    {2, 8.0f / 3, 10.0f / 3, 4}, 1e-3f);
    }
    Rng rng(9);
    const Matrix hx = random_matrix(12, 3, rng), hy = random_matrix(4, 3, rng);
    SUBCASE("zero weights are the identity") {
        CHECK(spatially_modulated_update(hx, hy, std::vector<float>(12, 0.0f), 3) == hx);
        SteerConfig cfg;
        CHECK(spatially_modulated_update(hx, hy, 0.0f, cfg) == hx);
    }
    SUBCASE("equal lengths with constant wave reduce to the standard update") {
        const Matrix hy12 = random_matrix(12, 3, rng);
        SteerConfig cfg;
        cfg.kernel = 5;
        cfg.wave_freq.reset();
        CHECK(max_abs_diff(spatially_modulated_update(hx, hy12, 0.7f, cfg), ilrr_update(hx, hy12, 0.7f, 5)) <=
              1e-6f);
    }
    SUBCASE("matches the composed oracle") {
        const auto w = modulation_wave(0.9f, 2.0, 12);
        const Matrix dir = up_oracle([&] {
            Matrix d = pool_oracle(hy, 3);
            const Matrix dx = down_oracle(pool_oracle(hx, 3), 4);
            for (std::size_t i = 0; i < d.size(); ++i) d.values()[i] -= dx.values()[i];
            return d;
        }(), 12);
        Matrix want = hx;
        for (std::size_t r = 0; r < 12; ++r)
            for (std::size_t c = 0; c < 3; ++c) want(r, c) += w[r] * dir(r, c);
        CHECK(max_abs_diff(spatially_modulated_update(hx, hy, w, 3), want) <= 1e-5f);
    }
    SUBCASE("reference longer than generation") {
        CHECK_THROWS_AS(spatially_modulated_update(hy, hx, std::vector<float>(4, 1.0f), 3), ContractError);
    }
}

TEST_CASE("steer config validation") {
    SteerConfig cfg;
    cfg.layers = {{3, 1.0f}};
    cfg.steps = {1, 5};
    CHECK_NOTHROW(cfg.validate(8, 5));
    CHECK_THROWS_AS(cfg.validate(2, 5), ConfigError);
    CHECK_THROWS_AS(cfg.validate(8, 4), ConfigError);
    cfg.layers = {{0, 1.0f}};
    CHECK_THROWS_AS(make_hooks(cfg, 8), ConfigError);
    cfg.layers = {{9, 1.0f}};
    CHECK_THROWS_AS(make_hooks(cfg, 8), ConfigError);
    cfg.layers = {{2, -1.0f}};
    CHECK_THROWS_AS(cfg.validate(8, 5), ConfigError);
    cfg.layers = {{2, 1.0f}};
    cfg.kernel = 0;
    CHECK_THROWS_AS(cfg.validate(8, 5), ConfigError);
    cfg.kernel = 3;
    cfg.wave_freq = 0.0;
    CHECK_THROWS_AS(cfg.validate(8, 5), ConfigError);
}

TEST_CASE("hooks apply the per-layer alpha") {
    SteerConfig cfg;
    cfg.layers = {{3, 0.8f}, {5, 1.0f}};
    cfg.steps = {1};
    cfg.kernel = 1;
    cfg.span = SteeringSpan::Full;
    const auto hooks = make_hooks(cfg, 6);
    REQUIRE(hooks.size() == 2);
    const Matrix sentinel(4, 2, 1.0f);
    for (const auto& hook : hooks) {
        Matrix h(4, 2, 0.0f);
        hook.apply(HookContext{hook.layer, 1, 0, 0}, h, &sentinel);
        const float want = hook.layer == 3 ? 0.8f : 1.0f;
        for (float v : h.values()) CHECK(v == doctest::Approx(want));
        // outside T_s nothing happens
        Matrix idle(4, 2, 0.0f);
        hook.apply(HookContext{hook.layer, 2, 0, 0}, idle, &sentinel);
        CHECK(idle == Matrix(4, 2, 0.0f));
    }
    CHECK(make_hooks(SteerConfig{}, 6).empty());
}

TEST_CASE("hooks steer only the response span by default") {
    SteerConfig cfg;
    cfg.layers = {{1, 1.0f}};
    cfg.steps = {1};
    cfg.kernel = 1;
    const auto hooks = make_hooks(cfg, 2);
    const Matrix ref(5, 2, 3.0f);
    Matrix h(5, 2, 0.0f);
    hooks[0].apply(HookContext{1, 1, 2, 2}, h, &ref);
    for (std::size_t r = 0; r < 5; ++r) CHECK(h(r, 0) == (r < 2 ? 0.0f : 3.0f));
    Matrix nocomp(5, 2);
    CHECK_THROWS_AS(hooks[0].apply(HookContext{1, 1, 2, 2}, nocomp, nullptr), ContractError);
}

TEST_CASE("fire counts equal layers times steps") {
    const auto model = testutil::tiny_model(3, 3);
    const std::vector<TokenId> prompt = {4};
    const int T = 6;
    NoiseSchedule s(T, 6);
    Rng pick(10);
    for (int trial = 0; trial < 8; ++trial) {
        SteerConfig cfg;
        for (int l = 1; l <= 3; ++l)
            if (trial == 0 ? l == 2 : pick.uniform() < 0.6) cfg.layers[l] = 1.0f;
        if (trial == 0) {
            cfg.steps = {1};
        } else {
            for (int t = 1; t <= T; ++t)
                if (pick.uniform() < 0.5) cfg.steps.insert(t);
        }
        cfg.kernel = 3;
        int fired = 0;
        SampleOptions opts;
        opts.sampler = TokenSampler::with_temperature(1.0f);
        opts.steer = cfg;
        opts.reference = {3, 4, 5, 6, 7, 8};
        opts.observer = [&](const HookEvent&) { ++fired; };
        sample(model, prompt, 6, s, opts, Rng(trial));
        CHECK(fired == static_cast<int>(cfg.layers.size() * cfg.steps.size()));
    }
}

TEST_CASE("self reference gives a zero delta") {
    const auto model = testutil::tiny_model(3, 3);
    SteerConfig cfg;
    cfg.layers = {{1, 1.0f}, {2, 1.0f}, {3, 1.0f}};
    cfg.steps = {4};
    float worst = 0.0f;
    const TokenSeq seq{{4, 5, 1, 7, 1, 9, 2}, 2};
    NfeCounter nfe;
    const auto pair = paired_forward(model, seq, seq, cfg, 4, nfe,
                                     [&](const HookEvent& e) { worst = std::max(worst, e.max_abs_direction); });
    CHECK(worst < 1e-6f);
    CHECK(max_abs_diff(pair.gen.logits, forward_with_taps(model, seq).logits) < 1e-6f);
    CHECK(nfe.forward_passes == 2);
    // outside T_s only one pass runs
    paired_forward(model, seq, seq, cfg, 3, nfe);
    CHECK(nfe.forward_passes == 3);
}
