#pragma once

#include <vector>

#include "ilrr/model.hpp"
#include "ilrr/numerics.hpp"

namespace testutil {

// Small enough that a forward pass is microseconds.
inline ilrr::DenoiserConfig tiny_config(std::uint32_t layers = 2) {
    ilrr::DenoiserConfig cfg;
    cfg.vocab_size = 12;
    cfg.hidden_dim = 8;
    cfg.num_layers = layers;
    cfg.num_heads = 2;
    cfg.max_seq_len = 32;
    cfg.mask_token_id = 1;
    cfg.mlp_dim = 16;
    return cfg;
}

// Init weights are near zero; give them some spread so logits actually vary.
inline ilrr::Denoiser tiny_model(std::uint64_t seed = 3, std::uint32_t layers = 2, float spread = 0.5f) {
    ilrr::Rng rng(seed);
    auto m = ilrr::init_denoiser(tiny_config(layers), rng);
    ilrr::Rng noise(seed + 100);
    m.weights.for_each_section([&](const std::string&, ilrr::Matrix& w) {
        for (float& v : w.values()) v += spread * noise.normal();
    });
    return m;
}

inline ilrr::Matrix random_matrix(std::size_t r, std::size_t c, ilrr::Rng& rng) {
    ilrr::Matrix m(r, c);
    for (float& v : m.values()) v = rng.normal();
    return m;
}

inline ilrr::Matrix column(std::vector<float> v) {
    const auto n = v.size();
    return ilrr::Matrix(n, 1, std::move(v));
}

}  // namespace testutil
