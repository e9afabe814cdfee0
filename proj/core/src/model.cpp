#include "ilrr/model.hpp"

#include <cmath>
#include <string>

#include "ilrr/errors.hpp"

namespace ilrr {

void DenoiserConfig::validate() const {
    if (vocab_size == 0 || hidden_dim == 0 || num_layers == 0 || num_heads == 0 || max_seq_len == 0 || mlp_dim == 0) {
        throw ConfigError("denoiser config: all dimensions must be positive");
    }
    if (hidden_dim % num_heads != 0) throw ConfigError("denoiser config: hidden_dim must be divisible by num_heads");
    if (mask_token_id >= vocab_size) throw ConfigError("denoiser config: mask_token_id must be < vocab_size");
}

DenoiserWeights DenoiserWeights::zeros(const DenoiserConfig& cfg) {
    const std::size_t d = cfg.hidden_dim, v = cfg.vocab_size, f = cfg.mlp_dim;
    DenoiserWeights w;
    w.token_embedding = Matrix(v, d);
    w.position_embedding = Matrix(cfg.max_seq_len, d);
    w.blocks.resize(cfg.num_layers);
    for (auto& b : w.blocks) {
        b.ln1_gain = Matrix(1, d);
        b.ln1_bias = Matrix(1, d);
        b.wq = Matrix(d, d);
        b.bq = Matrix(1, d);
        b.wk = Matrix(d, d);
        b.bk = Matrix(1, d);
        b.wv = Matrix(d, d);
        b.bv = Matrix(1, d);
        b.wo = Matrix(d, d);
        b.bo = Matrix(1, d);
        b.ln2_gain = Matrix(1, d);
        b.ln2_bias = Matrix(1, d);
        b.w1 = Matrix(d, f);
        b.b1 = Matrix(1, f);
        b.w2 = Matrix(f, d);
        b.b2 = Matrix(1, d);
    }
    w.final_gain = Matrix(1, d);
    w.final_bias = Matrix(1, d);
    w.head = Matrix(d, v);
    w.head_bias = Matrix(1, v);
    return w;
}

Denoiser init_denoiser(const DenoiserConfig& cfg, Rng& rng) {
    cfg.validate();
    Denoiser m{cfg, DenoiserWeights::zeros(cfg)};
    const float out_scale = 0.02f / std::sqrt(2.0f * static_cast<float>(cfg.num_layers));
    m.weights.for_each_section([&](const std::string& name, Matrix& mat) {
        const bool is_gain = name.ends_with(".gain");
        const bool is_bias = name.ends_with(".bias") || name.ends_with(".bq") || name.ends_with(".bk") ||
                             name.ends_with(".bv") || name.ends_with(".bo") || name.ends_with(".b1") ||
                             name.ends_with(".b2");
        if (is_gain) {
            mat.fill(1.0f);
        } else if (!is_bias) {
            const float scale = (name.ends_with(".wo") || name.ends_with(".w2")) ? out_scale : 0.02f;
            for (float& x : mat.values()) x = scale * rng.normal();
        }
    });
    return m;
}

Matrix layer_norm_rows(const Matrix& x, const Matrix& gain, const Matrix& bias, Matrix* hat,
                       std::vector<float>* rstd) {
    const std::size_t n = x.rows(), d = x.cols();
    if (gain.cols() != d || bias.cols() != d) throw ShapeError("layer_norm_rows: parameter width mismatch");
    Matrix out(n, d);
    if (hat) *hat = Matrix(n, d);
    if (rstd) rstd->assign(n, 0.0f);
    const float* g = gain.values().data();
    const float* b = bias.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = x.row(i);
        float mean = 0.0f;
        for (float v : r) mean += v;
        mean /= static_cast<float>(d);
        float var = 0.0f;
        for (float v : r) var += (v - mean) * (v - mean);
        var /= static_cast<float>(d);
        const float rs = 1.0f / std::sqrt(var + kLayerNormEps);
        auto o = out.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            const float h = (r[j] - mean) * rs;
            if (hat) (*hat)(i, j) = h;
            o[j] = h * g[j] + b[j];
        }
        if (rstd) (*rstd)[i] = rs;
    }
    return out;
}

namespace {

Matrix embed(const Denoiser& model, std::span<const TokenId> tokens) {
    const auto& cfg = model.config;
    if (tokens.size() > cfg.max_seq_len) {
        throw ShapeError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                         std::to_string(cfg.max_seq_len));
    }
    Matrix x(tokens.size(), cfg.hidden_dim);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const TokenId id = tokens[i];
        if (id < 0 || static_cast<std::uint32_t>(id) >= cfg.vocab_size) {
            throw ShapeError("token id " + std::to_string(id) + " out of vocabulary range");
        }
        auto row = x.row(i);
        const auto te = model.weights.token_embedding.row(static_cast<std::size_t>(id));
        const auto pe = model.weights.position_embedding.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] = te[j] + pe[j];
    }
    return x;
}

Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix y = matmul(x, w);
    add_row_bias(y, b);
    return y;
}

// Multi-head bidirectional attention context; fills per-head probabilities when asked.
Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads, std::vector<Matrix>* probs) {
    const std::size_t n = q.rows(), d = q.cols(), dh = d / heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    Matrix ctx(n, d);
    if (probs) probs->assign(heads, Matrix());
    Matrix p(n, n);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < n; ++i) {
            const float* qi = q.row(i).data() + off;
            auto prow = p.row(i);
            for (std::size_t j = 0; j < n; ++j) {
                const float* kj = k.row(j).data() + off;
                float acc = 0.0f;
                for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
                prow[j] = acc * scale;
            }
            softmax_inplace(prow);
            float* ci = ctx.row(i).data() + off;
            for (std::size_t j = 0; j < n; ++j) {
                const float pij = prow[j];
                const float* vj = v.row(j).data() + off;
                for (std::size_t c = 0; c < dh; ++c) ci[c] += pij * vj[c];
            }
        }
        if (probs) (*probs)[h] = p;
    }
    return ctx;
}

void run_block(const BlockWeights& w, const DenoiserConfig& cfg, Matrix& x, BlockCache* cache) {
    Matrix ln1_hat;
    std::vector<float> ln1_rstd;
    Matrix a = layer_norm_rows(x, w.ln1_gain, w.ln1_bias, cache ? &ln1_hat : nullptr, cache ? &ln1_rstd : nullptr);
    Matrix q = linear(a, w.wq, w.bq);
    Matrix k = linear(a, w.wk, w.bk);
    Matrix v = linear(a, w.wv, w.bv);
    std::vector<Matrix> probs;
    Matrix ctx = attention(q, k, v, cfg.num_heads, cache ? &probs : nullptr);
    Matrix o = linear(ctx, w.wo, w.bo);
    Matrix mid = x;
    for (std::size_t i = 0; i < mid.size(); ++i) mid.values()[i] += o.values()[i];

    Matrix ln2_hat;
    std::vector<float> ln2_rstd;
    Matrix m = layer_norm_rows(mid, w.ln2_gain, w.ln2_bias, cache ? &ln2_hat : nullptr, cache ? &ln2_rstd : nullptr);
    Matrix pre = linear(m, w.w1, w.b1);
    Matrix act = pre;
    for (float& val : act.values()) val = gelu(val);
    Matrix f = linear(act, w.w2, w.b2);

    if (cache) {
        cache->input = x;
        cache->ln1_hat = std::move(ln1_hat);
        cache->ln1_out = std::move(a);
        cache->ln1_rstd = std::move(ln1_rstd);
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->attn = std::move(probs);
        cache->context = std::move(ctx);
        cache->mid = mid;
        cache->ln2_hat = std::move(ln2_hat);
        cache->ln2_out = std::move(m);
        cache->ln2_rstd = std::move(ln2_rstd);
        cache->pre_act = std::move(pre);
        cache->act = std::move(act);
    }
    x = std::move(mid);
    for (std::size_t i = 0; i < x.size(); ++i) x.values()[i] += f.values()[i];
}

Matrix head_logits(const Denoiser& model, const Matrix& x, ForwardCache* cache) {
    const auto& w = model.weights;
    Matrix hat;
    std::vector<float> rstd;
    Matrix xf = layer_norm_rows(x, w.final_gain, w.final_bias, cache ? &hat : nullptr, cache ? &rstd : nullptr);
    Matrix logits = linear(xf, w.head, w.head_bias);
    if (cache) {
        cache->final_input = x;
        cache->final_hat = std::move(hat);
        cache->final_rstd = std::move(rstd);
        cache->final_out = std::move(xf);
    }
    return logits;
}

}  // namespace

ResidualTrace forward_with_taps(const Denoiser& model, const TokenSeq& tokens, const ForwardOptions& opts) {
    const auto& cfg = model.config;
    if (tokens.prompt_len > tokens.size()) throw ContractError("prompt_len exceeds sequence length");
    if (opts.companion && opts.companion->layers.size() != cfg.num_layers) {
        throw ContractError("companion trace has the wrong number of layers");
    }
    int last_layer = 0;
    for (const auto& hook : opts.hooks) {
        if (hook.layer < 1 || hook.layer > static_cast<int>(cfg.num_layers)) {
            throw ConfigError("hook layer " + std::to_string(hook.layer) + " outside [1, " +
                              std::to_string(cfg.num_layers) + "]");
        }
        if (hook.layer < last_layer) throw ContractError("hooks must be ordered by layer");
        last_layer = hook.layer;
    }

    ResidualTrace trace;
    trace.layers.reserve(cfg.num_layers);
    Matrix x = embed(model, tokens.ids);
    std::size_t next_hook = 0;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        run_block(model.weights.blocks[l], cfg, x, nullptr);
        const int layer = static_cast<int>(l) + 1;
        while (next_hook < opts.hooks.size() && opts.hooks[next_hook].layer == layer) {
            const HookContext ctx{layer, opts.timestep, tokens.prompt_len, opts.companion_prompt_len};
            const Matrix* companion = opts.companion ? &opts.companion->layers[l] : nullptr;
            const std::size_t rows = x.rows(), cols = x.cols();
            opts.hooks[next_hook].apply(ctx, x, companion);
            if (x.rows() != rows || x.cols() != cols) {
                throw ContractError("intervention hook at layer " + std::to_string(layer) + " changed the shape");
            }
            ++next_hook;
        }
        trace.layers.push_back(x);
    }
    trace.logits = head_logits(model, x, nullptr);
    if (opts.nfe) ++opts.nfe->forward_passes;
    return trace;
}

PairedTrace paired_forward(const Denoiser& model, const TokenSeq& gen, const TokenSeq& ref,
                           std::span<const InterventionHook> hooks, int timestep, NfeCounter& nfe) {
    PairedTrace out;
    ForwardOptions ref_opts;
    ref_opts.timestep = timestep;
    ref_opts.nfe = &nfe;
    out.ref = forward_with_taps(model, ref, ref_opts);

    ForwardOptions gen_opts;
    gen_opts.hooks = hooks;
    gen_opts.companion = &out.ref;
    gen_opts.companion_prompt_len = ref.prompt_len;
    gen_opts.timestep = timestep;
    gen_opts.nfe = &nfe;
    out.gen = forward_with_taps(model, gen, gen_opts);
    return out;
}

ForwardCache forward_cached(const Denoiser& model, std::span<const TokenId> tokens) {
    ForwardCache cache;
    cache.blocks.resize(model.config.num_layers);
    Matrix x = embed(model, tokens);
    for (std::size_t l = 0; l < model.config.num_layers; ++l) {
        run_block(model.weights.blocks[l], model.config, x, &cache.blocks[l]);
    }
    cache.logits = head_logits(model, x, &cache);
    return cache;
}

}  // namespace ilrr
