#include <cmath>
#include <map>
#include <numbers>

#include "doctest.h"
#include "helpers.hpp"
#include "ilrr/diffusion.hpp"
#include "ilrr/errors.hpp"
#include "ilrr/toylab.hpp"

using namespace ilrr;

namespace {

constexpr TokenId kMask = 1;

std::vector<TokenId> ref_tokens(std::size_t n, TokenId base = 3) {
    std::vector<TokenId> r(n);
    for (std::size_t i = 0; i < n; ++i) r[i] = static_cast<TokenId>(base + i % 7);
    return r;
}

SteerConfig full_steer(int T, float alpha = 1.0f) {
    SteerConfig sc;
    sc.layers = {{1, alpha}, {2, alpha}};
    for (int t = 1; t <= T; ++t) sc.steps.insert(t);
    sc.kernel = 3;
    return sc;
}

}  // namespace

TEST_CASE("schedule endpoints and unmasking plan") {
    for (auto kind : {ScheduleKind::Linear, ScheduleKind::Cosine}) {
        NoiseSchedule s(10, 25, kind);
        CHECK(s.mask_prob(0) == 0.0);
        CHECK(s.mask_prob(10) == 1.0);
        for (int t = 1; t <= 10; ++t) CHECK(s.mask_prob(t) >= s.mask_prob(t - 1));
    }
    NoiseSchedule lin(4, 10);
    CHECK(lin.mask_prob(2) == doctest::Approx(0.5));
    CHECK(lin.unmask_count(4) == 3);
    CHECK(lin.unmask_count(3) == 3);
    CHECK(lin.unmask_count(2) == 2);
    CHECK(lin.unmask_count(1) == 2);
    CHECK(lin.masked_after(4) == 7);
    CHECK(lin.masked_after(1) == 0);
    NoiseSchedule cos(4, 10, ScheduleKind::Cosine);
    CHECK(cos.mask_prob(2) == doctest::Approx(1.0 - std::cos(std::numbers::pi / 4)));
    CHECK_THROWS_AS(NoiseSchedule(0, 5), ConfigError);
}

TEST_CASE("corrupt examples") {
    const TokenSeq x0{{4, 5, 6, 7, 8, 9, 10, 11}, 2};
    NoiseSchedule s(10, 6);
    Rng rng(1);
    CHECK(corrupt(x0, 0, s, kMask, rng) == x0);
    const auto all = corrupt(x0, 10, s, kMask, rng);
    CHECK(all.prompt_len == 2);
    CHECK(all.ids[0] == 4);
    CHECK(all.ids[1] == 5);
    for (TokenId id : all.response()) CHECK(id == kMask);
    CHECK_THROWS_AS(corrupt(x0, 11, s, kMask, rng), ContractError);
    CHECK_THROWS_AS(corrupt(x0, -1, s, kMask, rng), ContractError);
}

TEST_CASE("corrupt masks at the scheduled rate and only with the mask token") {
    const TokenSeq x0{ref_tokens(22), 2};
    NoiseSchedule s(10, 20);
    Rng rng(2);
    std::size_t masked = 0, total = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        const auto y = corrupt(x0, 5, s, kMask, rng);
        REQUIRE(y.ids[0] == x0.ids[0]);
        REQUIRE(y.ids[1] == x0.ids[1]);
        for (std::size_t i = 2; i < y.size(); ++i) {
            REQUIRE((y.ids[i] == kMask || y.ids[i] == x0.ids[i]));
            masked += y.ids[i] == kMask;
            ++total;
        }
    }
    CHECK(std::fabs(double(masked) / double(total) - 0.5) <= 0.02);
}

TEST_CASE("token sampler modes") {
    Rng rng(3);
    const std::vector<float> logits = {0.5f, 9.0f, 2.0f, 1.0f, 0.2f};
    SUBCASE("greedy skips the banned id") {
        CHECK(TokenSampler::greedy().draw(logits, 1, rng) == 2);
        const std::vector<float> onehot = {-1e9f, -1e9f, -1e9f, 0.0f, -1e9f};
        CHECK(TokenSampler::greedy().draw(onehot, 1, rng) == 3);
    }
    SUBCASE("tiny temperature equals greedy") {
        const auto s = TokenSampler::with_temperature(1e-4f);
        for (int i = 0; i < 100; ++i) REQUIRE(s.draw(logits, 1, rng) == 2);
    }
    SUBCASE("temperature 1 follows the posterior") {
        const std::vector<float> l = {0.0f, 0.0f, std::log(2.0f), std::log(5.0f), 0.0f};
        // banned id 1 removed: weights 1, 2, 5, 1 over ids 0, 2, 3, 4
        std::map<TokenId, int> hist;
        const auto s = TokenSampler::with_temperature(1.0f);
        for (int i = 0; i < 10000; ++i) ++hist[s.draw(l, 1, rng)];
        CHECK(hist[1] == 0);
        CHECK(std::fabs(hist[0] / 10000.0 - 1.0 / 9) <= 0.02);
        CHECK(std::fabs(hist[2] / 10000.0 - 2.0 / 9) <= 0.02);
        CHECK(std::fabs(hist[3] / 10000.0 - 5.0 / 9) <= 0.02);
        CHECK(std::fabs(hist[4] / 10000.0 - 1.0 / 9) <= 0.02);
    }
    SUBCASE("top-k restricts support") {
        const auto s = TokenSampler::with_top_k(2, 5.0f);
        for (int i = 0; i < 500; ++i) {
            const auto id = s.draw(logits, 1, rng);
            REQUIRE((id == 2 || id == 3));
        }
    }
    SUBCASE("invalid settings") {
        CHECK_THROWS_AS(TokenSampler::with_temperature(0.0f).validate(), ConfigError);
        CHECK_THROWS_AS(TokenSampler::with_temperature(-1.0f).validate(), ConfigError);
        CHECK_THROWS_AS(TokenSampler::with_top_k(0).validate(), ConfigError);
    }
}

TEST_CASE("reverse step") {
    const auto model = testutil::tiny_model();
    NoiseSchedule s(4, 6);
    auto sampler = TokenSampler::with_temperature(1.0f);

    SUBCASE("nothing masked returns the input without a forward pass") {
        const TokenSeq x{{4, 5, 6, 7, 8, 9, 10, 11}, 2};
        auto streams = SamplerStreams::from(Rng(1));
        NfeCounter nfe;
        CHECK(reverse_step(model, x, 2, s, nullptr, sampler, streams, nfe) == x);
        CHECK(nfe.forward_passes == 0);
    }
    SUBCASE("commits exactly the planned count, most confident first") {
        const TokenSeq x{{4, 5, 1, 1, 1, 1, 1, 1}, 2};
        auto streams = SamplerStreams::from(Rng(1));
        NfeCounter nfe;
        const auto y = reverse_step(model, x, 4, s, nullptr, sampler, streams, nfe);
        std::size_t still = 0;
        for (TokenId id : y.response()) still += id == kMask;
        CHECK(still == s.masked_after(4));
        CHECK(nfe.forward_passes == 1);
    }
    SUBCASE("single step completes the sequence") {
        NoiseSchedule one(1, 6);
        const TokenSeq x{{4, 5, 1, 1, 1, 1, 1, 1}, 2};
        auto streams = SamplerStreams::from(Rng(1));
        NfeCounter nfe;
        const auto y = reverse_step(model, x, 1, one, nullptr, sampler, streams, nfe);
        for (TokenId id : y.ids) CHECK(id != kMask);
    }
    SUBCASE("fixed seed is deterministic") {
        const TokenSeq x{{4, 5, 1, 1, 1, 1, 1, 1}, 2};
        auto s1 = SamplerStreams::from(Rng(9));
        auto s2 = SamplerStreams::from(Rng(9));
        NfeCounter n1, n2;
        CHECK(reverse_step(model, x, 4, s, nullptr, sampler, s1, n1) ==
              reverse_step(model, x, 4, s, nullptr, sampler, s2, n2));
    }
}

TEST_CASE("sample NFE accounting") {
    const auto model = testutil::tiny_model();
    const std::vector<TokenId> prompt = {4, 5};
    const int T = 8;
    NoiseSchedule s(T, 8);
    SampleOptions opts;
    opts.sampler = TokenSampler::with_temperature(1.0f);
    CHECK(sample(model, prompt, 8, s, opts, Rng(1)).nfe.forward_passes == T);

    opts.steer = full_steer(T);
    opts.reference = ref_tokens(8);
    CHECK(sample(model, prompt, 8, s, opts, Rng(1)).nfe.forward_passes == 2 * T);

    opts.steer->steps.clear();
    for (int t = T; t > T / 2; --t) opts.steer->steps.insert(t);
    CHECK(sample(model, prompt, 8, s, opts, Rng(1)).nfe.forward_passes == T + T / 2);

    // NFE = T + |T_s| for arbitrary subsets
    Rng pick(4);
    for (int trial = 0; trial < 10; ++trial) {
        opts.steer->steps.clear();
        for (int t = 1; t <= T; ++t)
            if (pick.uniform() < 0.4) opts.steer->steps.insert(t);
        const auto want = T + static_cast<std::int64_t>(opts.steer->steps.size());
        CHECK(sample(model, prompt, 8, s, opts, Rng(trial)).nfe.forward_passes == want);
    }
}

TEST_CASE("sample preserves the prompt, leaves no masks and unmasks monotonically") {
    const auto model = testutil::tiny_model();
    Rng cfg_rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const int T = 1 + static_cast<int>(cfg_rng.below(10));
        const std::size_t gen_len = 1 + cfg_rng.below(12);
        NoiseSchedule s(T, gen_len);
        const std::vector<TokenId> prompt = {static_cast<TokenId>(2 + cfg_rng.below(10)), 3};
        SteeringRequest req{full_steer(T, float(cfg_rng.uniform() * 2)), TokenSeq::join(prompt, ref_tokens(gen_len)),
                            {}};
        if (trial % 2 == 1) {
            req.config.mode = SteerMode::SpatiallyModulated;
            req.reference = TokenSeq::join(prompt, ref_tokens(1 + cfg_rng.below(gen_len)));
        }
        TokenSeq x = TokenSeq::join(prompt, std::vector<TokenId>(gen_len, kMask));
        auto streams = SamplerStreams::from(Rng(trial));
        NfeCounter nfe;
        const auto sampler = TokenSampler::with_temperature(1.0f);
        for (int t = T; t >= 1; --t) {
            const auto next = reverse_step(model, x, t, s, &req, sampler, streams, nfe);
            for (std::size_t i = 0; i < x.size(); ++i) {
                if (x.ids[i] != kMask) REQUIRE(next.ids[i] == x.ids[i]);
            }
            x = next;
        }
        CHECK(std::equal(prompt.begin(), prompt.end(), x.ids.begin()));
        for (TokenId id : x.response()) CHECK(id != kMask);
    }
}

TEST_CASE("sample reproducibility and errors") {
    const auto model = testutil::tiny_model();
    const std::vector<TokenId> prompt = {4};
    NoiseSchedule s(6, 6);
    SampleOptions opts;
    opts.sampler = TokenSampler::with_temperature(1.0f);
    CHECK(sample(model, prompt, 6, s, opts, Rng(3)).tokens == sample(model, prompt, 6, s, opts, Rng(3)).tokens);

    SUBCASE("steering without reference") {
        opts.steer = full_steer(6);
        CHECK_THROWS_AS(sample(model, prompt, 6, s, opts, Rng(3)), ConfigError);
    }
    SUBCASE("standard mode with a short reference") {
        opts.steer = full_steer(6);
        opts.reference = ref_tokens(3);
        CHECK_THROWS_AS(sample(model, prompt, 6, s, opts, Rng(3)), ConfigError);
    }
    SUBCASE("spatial mode with a long reference") {
        opts.steer = full_steer(6);
        opts.steer->mode = SteerMode::SpatiallyModulated;
        opts.reference = ref_tokens(9);
        CHECK_THROWS_AS(sample(model, prompt, 6, s, opts, Rng(3)), ConfigError);
    }
    SUBCASE("too long") {
        NoiseSchedule big(6, 40);
        CHECK_THROWS_AS(sample(model, prompt, 40, big, opts, Rng(3)), ShapeError);
    }
    SUBCASE("bad temperature") {
        opts.sampler = TokenSampler::with_temperature(0.0f);
        CHECK_THROWS_AS(sample(model, prompt, 6, s, opts, Rng(3)), ConfigError);
    }
}

TEST_CASE("zero alpha steering matches the unsteered sampler") {
    const auto model = testutil::tiny_model();
    const std::vector<TokenId> prompt = {4, 9};
    NoiseSchedule s(6, 6);
    SampleOptions plain;
    plain.sampler = TokenSampler::with_temperature(1.0f);
    SampleOptions steered = plain;
    steered.steer = full_steer(6, 0.0f);
    steered.reference = ref_tokens(6);
    for (int seed = 0; seed < 10; ++seed) {
        CHECK(sample(model, prompt, 6, s, plain, Rng(seed)).tokens ==
              sample(model, prompt, 6, s, steered, Rng(seed)).tokens);
    }
}

TEST_CASE("best of n") {
    const auto model = testutil::tiny_model();
    const std::vector<TokenId> prompt = {4};
    NoiseSchedule s(5, 5);
    const auto sampler = TokenSampler::with_temperature(1.0f);
    SampleOptions opts;
    opts.sampler = sampler;

    SUBCASE("n = 1 is a plain sample on the first stream") {
        const Rng rng(12);
        const auto b = best_of_n(model, prompt, 5, s, 1, [](const TokenSeq&) { return 0.0; }, sampler, rng);
        CHECK(b.best == sample(model, prompt, 5, s, opts, rng.fork(0)).tokens);
        CHECK(b.nfe.forward_passes == 5);
    }
    SUBCASE("constant scorer keeps the first candidate") {
        const Rng rng(13);
        const auto b = best_of_n(model, prompt, 5, s, 4, [](const TokenSeq&) { return 1.0; }, sampler, rng);
        CHECK(b.best_index == 0);
        CHECK(b.best == sample(model, prompt, 5, s, opts, rng.fork(0)).tokens);
        CHECK(b.nfe.forward_passes == 20);
    }
    SUBCASE("n = 0 is rejected") {
        CHECK_THROWS_AS(best_of_n(model, prompt, 5, s, 0, [](const TokenSeq&) { return 0.0; }, sampler, Rng(1)),
                        ContractError);
    }
}

TEST_CASE("best of 4 with the attribute oracle beats best of 1") {
    const auto g = ToyGrammar::default_grammar();
    const auto vocab = Vocabulary::from_grammar(g);
    auto cfg = testutil::tiny_config();
    cfg.vocab_size = static_cast<std::uint32_t>(vocab.size());
    Rng init(21);
    const auto model = init_denoiser(cfg, init);
    const AttributeOracle oracle(g, vocab);
    const auto scorer = [&](const TokenSeq& seq) {
        const auto r = oracle.classify(seq);
        return r.label == Attribute::Pos ? 1.0 + r.confidence : 0.0;
    };
    const std::vector<TokenId> prompt = {vocab.id("movie")};
    NoiseSchedule s(6, 12);
    const auto sampler = TokenSampler::with_temperature(1.0f);
    int hit1 = 0, hit4 = 0;
    for (int run = 0; run < 200; ++run) {
        const Rng rng(1000 + run);
        hit1 += scorer(best_of_n(model, prompt, 12, s, 1, scorer, sampler, rng).best) > 0;
        hit4 += scorer(best_of_n(model, prompt, 12, s, 4, scorer, sampler, rng).best) > 0;
    }
    CHECK(hit4 >= hit1);
    CHECK(hit4 > 0);
}
