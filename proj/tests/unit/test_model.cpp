#include <utility>

#include "doctest.h"
#include "helpers.hpp"
#include "ilrr/errors.hpp"
#include "ilrr/model.hpp"

using namespace ilrr;

namespace {

TokenSeq toy_seq() { return TokenSeq{{4, 5, 1, 1, 7, 1, 9}, 2}; }

InterventionHook add_hook(int layer, float value, std::size_t col = SIZE_MAX) {
    return {layer, [value, col](const HookContext&, Matrix& h, const Matrix*) {
                for (std::size_t r = 0; r < h.rows(); ++r)
                    for (std::size_t c = 0; c < h.cols(); ++c)
                        if (col == SIZE_MAX || c == col) h(r, c) += value;
            }};
}

}  // namespace

TEST_CASE("config validation") {
    auto cfg = testutil::tiny_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.num_heads = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = testutil::tiny_config();
    cfg.mask_token_id = cfg.vocab_size;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("forward without hooks is deterministic and matches the cached forward") {
    const auto model = testutil::tiny_model();
    const auto seq = toy_seq();
    const auto a = forward_with_taps(model, seq);
    const auto b = forward_with_taps(model, seq);
    CHECK(a.logits == b.logits);
    REQUIRE(a.layers.size() == 2);
    const auto cache = forward_cached(model, seq.ids);
    CHECK(max_abs_diff(cache.logits, a.logits) <= 1e-6f);
    CHECK(a.logits.rows() == seq.size());
    CHECK(a.logits.cols() == model.config.vocab_size);
}

TEST_CASE("zero hook is the identity") {
    const auto model = testutil::tiny_model();
    const auto seq = toy_seq();
    const auto base = forward_with_taps(model, seq);
    const std::vector<InterventionHook> hooks = {add_hook(1, 0.0f), add_hook(2, 0.0f)};
    ForwardOptions opts;
    opts.hooks = hooks;
    const auto hooked = forward_with_taps(model, seq, opts);
    CHECK(hooked.logits == base.logits);
}

TEST_CASE("non-trivial hook at the last layer changes logits") {
    const auto model = testutil::tiny_model();
    const auto seq = toy_seq();
    const auto base = forward_with_taps(model, seq);
    // A uniform shift of a whole row is removed by the final layer norm, so the
    // +10 goes to one hidden unit.
    const std::vector<InterventionHook> hooks = {add_hook(2, 10.0f, 0)};
    ForwardOptions opts;
    opts.hooks = hooks;
    const auto hooked = forward_with_taps(model, seq, opts);
    CHECK(max_abs_diff(hooked.logits, base.logits) > 1e-2f);
    CHECK(hooked.layers[0] == base.layers[0]);
}

TEST_CASE("hooks run in ascending layer order and are validated") {
    const auto model = testutil::tiny_model(3, 3);
    const auto seq = toy_seq();
    std::vector<int> order;
    auto rec = [&](int layer) {
        return InterventionHook{layer, [&order](const HookContext& ctx, Matrix&, const Matrix*) {
                                    order.push_back(ctx.layer);
                                }};
    };
    const std::vector<InterventionHook> hooks = {rec(1), rec(2), rec(2), rec(3)};
    ForwardOptions opts;
    opts.hooks = hooks;
    forward_with_taps(model, seq, opts);
    CHECK(order == std::vector<int>{1, 2, 2, 3});

    const std::vector<InterventionHook> unsorted = {rec(3), rec(1)};
    opts.hooks = unsorted;
    CHECK_THROWS_AS(forward_with_taps(model, seq, opts), ContractError);
    const std::vector<InterventionHook> bad = {rec(4)};
    opts.hooks = bad;
    CHECK_THROWS_AS(forward_with_taps(model, seq, opts), ConfigError);

    const std::vector<InterventionHook> reshaping = {
        {1, [](const HookContext&, Matrix& h, const Matrix*) { h = Matrix(1, h.cols()); }}};
    opts.hooks = reshaping;
    CHECK_THROWS_AS(forward_with_taps(model, seq, opts), ContractError);
}

TEST_CASE("forward rejects bad inputs") {
    const auto model = testutil::tiny_model();
    CHECK_THROWS_AS(forward_with_taps(model, TokenSeq{std::vector<TokenId>(33, 2), 0}), ShapeError);
    CHECK_THROWS_AS(forward_with_taps(model, TokenSeq{{2, 12}, 0}), ShapeError);
    CHECK_THROWS_AS(forward_with_taps(model, TokenSeq{{2, 3}, 3}), ContractError);
}

TEST_CASE("attention is bidirectional: swapping positions permutes logits") {
    auto model = testutil::tiny_model(8);
    const TokenSeq seq{{1, 1}, 0};  // two masked positions
    const auto base = forward_with_taps(model, seq);
    auto& pe = model.weights.position_embedding;
    for (std::size_t c = 0; c < pe.cols(); ++c) std::swap(pe(0, c), pe(1, c));
    const auto swapped = forward_with_taps(model, seq);
    for (std::size_t c = 0; c < base.logits.cols(); ++c) {
        CHECK(swapped.logits(0, c) == doctest::Approx(base.logits(1, c)).epsilon(1e-5));
        CHECK(swapped.logits(1, c) == doctest::Approx(base.logits(0, c)).epsilon(1e-5));
    }
    // and the first position does see the second one
    auto model2 = testutil::tiny_model(8);
    const auto other = forward_with_taps(model2, TokenSeq{{1, 5}, 0});
    CHECK(max_abs_diff(other.logits.slice_rows(0, 1), base.logits.slice_rows(0, 1)) > 1e-4f);
}

TEST_CASE("paired forward leaves the reference untouched and counts two passes") {
    const auto model = testutil::tiny_model();
    const auto gen = toy_seq();
    const TokenSeq ref{{4, 5, 6, 7, 8, 9, 10}, 2};
    std::size_t seen_rows = 0;
    const std::vector<InterventionHook> hooks = {
        {1, [&](const HookContext& ctx, Matrix& h, const Matrix* comp) {
             REQUIRE(comp != nullptr);
             seen_rows = comp->rows();
             CHECK(ctx.companion_prompt_len == 2);
             h(0, 0) += 1.0f;
         }}};
    NfeCounter nfe;
    const auto pair = paired_forward(model, gen, ref, hooks, 5, nfe);
    CHECK(nfe.forward_passes == 2);
    CHECK(seen_rows == ref.size());
    CHECK(pair.ref.logits == forward_with_taps(model, ref).logits);
    CHECK(pair.gen.logits != forward_with_taps(model, gen).logits);
}

TEST_CASE("checkpoint round trip") {
    Checkpoint ck{testutil::tiny_model(), {"<pad>", "<mask>", "a", "b", "c", "d", "e", "f", "g", "h", "i", "j"}};
    const auto bytes = encode_checkpoint(ck);
    const auto back = decode_checkpoint(bytes);
    CHECK(back.model.config == ck.model.config);
    CHECK(back.model.weights == ck.model.weights);
    CHECK(back.vocabulary == ck.vocabulary);
    const auto seq = toy_seq();
    CHECK(forward_with_taps(back.model, seq).logits == forward_with_taps(ck.model, seq).logits);
    CHECK(encode_checkpoint(back) == bytes);
}

TEST_CASE("checkpoint save and load through a file") {
    const Checkpoint ck{testutil::tiny_model(5), {}};
    const auto path = std::filesystem::temp_directory_path() / "ilrr_unit_ckpt.bin";
    save_checkpoint(ck, path);
    const auto back = load_checkpoint(path);
    CHECK(back.model.weights == ck.model.weights);
    std::filesystem::remove(path);
    CHECK_THROWS(load_checkpoint(path));
}

TEST_CASE("checkpoint corruption is detected") {
    const Checkpoint ck{testutil::tiny_model(), {}};
    auto bytes = encode_checkpoint(ck);

    SUBCASE("bad magic") {
        bytes[0] = 'X';
        CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
    }
    SUBCASE("truncated") {
        bytes.resize(bytes.size() - 5);
        CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
    }
    SUBCASE("trailing bytes") {
        bytes.push_back(0);
        CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
    }
    SUBCASE("header says d=64 but blob was written for d=32") {
        auto cfg = testutil::tiny_config();
        cfg.hidden_dim = 32;
        Rng rng(1);
        auto small = encode_checkpoint(Checkpoint{init_denoiser(cfg, rng), {}});
        // hidden_dim is the second u32 after magic and version
        const std::size_t off = 8 + 4 + 4;
        small[off] = 64;
        small[off + 1] = small[off + 2] = small[off + 3] = 0;
        CHECK_THROWS_AS(decode_checkpoint(small), FormatError);
    }
}
