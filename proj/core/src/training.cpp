// Masked-diffusion training for the toy denoiser with a hand-written backward
// pass through embedding, pre-norm attention/MLP blocks, final norm and head.

#include <cmath>
#include <limits>

#include "ilrr/toylab.hpp"

namespace ilrr {

namespace {

void add_col_sums(const Matrix& dy, Matrix& bias_grad) {
    float* g = bias_grad.values().data();
    for (std::size_t i = 0; i < dy.rows(); ++i) {
        const auto r = dy.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) g[j] += r[j];
    }
}

// dy -> dx through y = hat * gain + bias with hat = (x - mean) * rstd.
Matrix layer_norm_backward(const Matrix& dy, const Matrix& hat, const std::vector<float>& rstd, const Matrix& gain,
                           Matrix& dgain, Matrix& dbias) {
    const std::size_t n = dy.rows(), d = dy.cols();
    Matrix dx(n, d);
    std::vector<float> dhat(d);
    const float* g = gain.values().data();
    float* dg = dgain.values().data();
    float* db = dbias.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        const auto dyr = dy.row(i);
        const auto hr = hat.row(i);
        float mean_dhat = 0.0f, mean_dhat_hat = 0.0f;
        for (std::size_t j = 0; j < d; ++j) {
            dg[j] += dyr[j] * hr[j];
            db[j] += dyr[j];
            dhat[j] = dyr[j] * g[j];
            mean_dhat += dhat[j];
            mean_dhat_hat += dhat[j] * hr[j];
        }
        mean_dhat /= static_cast<float>(d);
        mean_dhat_hat /= static_cast<float>(d);
        auto dxr = dx.row(i);
        for (std::size_t j = 0; j < d; ++j) dxr[j] = rstd[i] * (dhat[j] - mean_dhat - hr[j] * mean_dhat_hat);
    }
    return dx;
}

void add_into(Matrix& acc, const Matrix& x) {
    float* a = acc.values().data();
    const float* b = x.values().data();
    for (std::size_t i = 0; i < acc.size(); ++i) a[i] += b[i];
}

// Gradient of the attention context w.r.t. q, k, v for every head.
void attention_backward(const BlockCache& c, const Matrix& dctx, std::size_t heads, Matrix& dq, Matrix& dk,
                        Matrix& dv) {
    const std::size_t n = c.q.rows(), d = c.q.cols(), dh = d / heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    dq = Matrix(n, d);
    dk = Matrix(n, d);
    dv = Matrix(n, d);
    std::vector<float> dp(n);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        const Matrix& p = c.attn[h];
        for (std::size_t i = 0; i < n; ++i) {
            const float* dci = dctx.row(i).data() + off;
            const auto prow = p.row(i);
            float dot = 0.0f;
            for (std::size_t j = 0; j < n; ++j) {
                const float* vj = c.v.row(j).data() + off;
                float acc = 0.0f;
                for (std::size_t e = 0; e < dh; ++e) acc += dci[e] * vj[e];
                dp[j] = acc;
                dot += acc * prow[j];
                float* dvj = dv.row(j).data() + off;
                for (std::size_t e = 0; e < dh; ++e) dvj[e] += prow[j] * dci[e];
            }
            const float* qi = c.q.row(i).data() + off;
            float* dqi = dq.row(i).data() + off;
            for (std::size_t j = 0; j < n; ++j) {
                const float ds = prow[j] * (dp[j] - dot) * scale;
                if (ds == 0.0f) continue;
                const float* kj = c.k.row(j).data() + off;
                float* dkj = dk.row(j).data() + off;
                for (std::size_t e = 0; e < dh; ++e) {
                    dqi[e] += ds * kj[e];
                    dkj[e] += ds * qi[e];
                }
            }
        }
    }
}

Matrix block_backward(const BlockWeights& w, const BlockCache& c, std::size_t heads, const Matrix& dout,
                      BlockWeights& g) {
    // MLP branch
    matmul_at_accumulate(c.act, dout, g.w2);
    add_col_sums(dout, g.b2);
    Matrix dpre = matmul_bt(dout, w.w2);
    for (std::size_t i = 0; i < dpre.size(); ++i) dpre.values()[i] *= gelu_grad(c.pre_act.values()[i]);
    matmul_at_accumulate(c.ln2_out, dpre, g.w1);
    add_col_sums(dpre, g.b1);
    const Matrix dm = matmul_bt(dpre, w.w1);
    Matrix dmid = dout;
    add_into(dmid, layer_norm_backward(dm, c.ln2_hat, c.ln2_rstd, w.ln2_gain, g.ln2_gain, g.ln2_bias));

    // attention branch
    matmul_at_accumulate(c.context, dmid, g.wo);
    add_col_sums(dmid, g.bo);
    const Matrix dctx = matmul_bt(dmid, w.wo);
    Matrix dq, dk, dv;
    attention_backward(c, dctx, heads, dq, dk, dv);
    matmul_at_accumulate(c.ln1_out, dq, g.wq);
    add_col_sums(dq, g.bq);
    matmul_at_accumulate(c.ln1_out, dk, g.wk);
    add_col_sums(dk, g.bk);
    matmul_at_accumulate(c.ln1_out, dv, g.wv);
    add_col_sums(dv, g.bv);
    Matrix da = matmul_bt(dq, w.wq);
    add_into(da, matmul_bt(dk, w.wk));
    add_into(da, matmul_bt(dv, w.wv));
    Matrix dx = dmid;
    add_into(dx, layer_norm_backward(da, c.ln1_hat, c.ln1_rstd, w.ln1_gain, g.ln1_gain, g.ln1_bias));
    return dx;
}

double global_norm(const DenoiserWeights& g) {
    double sq = 0.0;
    g.for_each_section([&](const std::string&, const Matrix& m) {
        for (float v : m.values()) sq += static_cast<double>(v) * v;
    });
    return std::sqrt(sq);
}

}  // namespace

double masked_loss_and_grad(const Denoiser& model, std::span<const TokenId> inputs, std::span<const TokenId> targets,
                            float grad_scale, DenoiserWeights* grad) {
    if (inputs.size() != targets.size()) throw ContractError("inputs and targets differ in length");
    const ForwardCache cache = forward_cached(model, inputs);
    const std::size_t n = inputs.size(), v = model.config.vocab_size;
    Matrix dlogits(n, v);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] < 0) continue;
        std::vector<float> probs(cache.logits.row(i).begin(), cache.logits.row(i).end());
        softmax_inplace(probs);
        const auto target = static_cast<std::size_t>(targets[i]);
        loss -= std::log(std::max(static_cast<double>(probs[target]), 1e-30));
        auto dr = dlogits.row(i);
        for (std::size_t j = 0; j < v; ++j) dr[j] = probs[j] * grad_scale;
        dr[target] -= grad_scale;
    }
    if (grad == nullptr) return loss;

    const auto& w = model.weights;
    matmul_at_accumulate(cache.final_out, dlogits, grad->head);
    add_col_sums(dlogits, grad->head_bias);
    const Matrix dfinal = matmul_bt(dlogits, w.head);
    Matrix dx = layer_norm_backward(dfinal, cache.final_hat, cache.final_rstd, w.final_gain, grad->final_gain,
                                    grad->final_bias);
    for (std::size_t l = model.config.num_layers; l-- > 0;) {
        dx = block_backward(w.blocks[l], cache.blocks[l], model.config.num_heads, dx, grad->blocks[l]);
    }
    for (std::size_t i = 0; i < n; ++i) {
        auto te = grad->token_embedding.row(static_cast<std::size_t>(inputs[i]));
        auto pe = grad->position_embedding.row(i);
        const auto r = dx.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) {
            te[j] += r[j];
            pe[j] += r[j];
        }
    }
    return loss;
}

void TrainConfig::validate() const {
    if (steps < 0 || batch_size < 1 || !(learning_rate > 0.0f) || corruption_levels < 1) {
        throw ConfigError("train config: steps >= 0, batch_size >= 1, learning_rate > 0 and levels >= 1 required");
    }
    if (!(beta1 >= 0.0f && beta1 < 1.0f && beta2 >= 0.0f && beta2 < 1.0f)) {
        throw ConfigError("train config: Adam betas must lie in [0, 1)");
    }
}

TrainResult train_denoiser(const DenoiserConfig& cfg, const Vocabulary& vocab, const std::vector<LabeledSeq>& corpus,
                           const TrainConfig& tc, Rng& rng, const std::function<void(int, double)>& on_step) {
    cfg.validate();
    tc.validate();
    if (corpus.empty()) throw ContractError("training corpus is empty");
    if (vocab.size() != cfg.vocab_size) throw ConfigError("vocabulary size differs from config vocab_size");
    const auto mask = static_cast<TokenId>(cfg.mask_token_id);

    Rng init_rng = rng.fork(0);
    Rng batch_rng = rng.fork(1);
    TrainResult result;
    result.checkpoint.model = init_denoiser(cfg, init_rng);
    result.checkpoint.vocabulary = vocab.words();
    Denoiser& model = result.checkpoint.model;
    Checkpoint last_good = result.checkpoint;

    DenoiserWeights m1 = DenoiserWeights::zeros(cfg);
    DenoiserWeights m2 = DenoiserWeights::zeros(cfg);

    struct Example {
        std::vector<TokenId> inputs, targets;
    };
    std::vector<std::size_t> by_label[2];
    for (std::size_t i = 0; i < corpus.size(); ++i) by_label[corpus[i].label == Attribute::Pos ? 0 : 1].push_back(i);
    const bool balanced = tc.balanced_batches && !by_label[0].empty() && !by_label[1].empty();
    auto draw_batch = [&]() {
        std::vector<Example> batch;
        std::size_t masked_total = 0;
        for (int b = 0; b < tc.batch_size; ++b) {
            std::size_t pick = 0;
            if (balanced) {
                const auto& pool = by_label[b % 2];
                pick = pool[batch_rng.below(pool.size())];
            } else {
                pick = batch_rng.below(corpus.size());
            }
            const TokenSeq& doc = corpus[pick].seq;
            const int level = 1 + static_cast<int>(batch_rng.below(static_cast<std::size_t>(tc.corruption_levels)));
            const double p = static_cast<double>(level) / tc.corruption_levels;
            Example ex{doc.ids, std::vector<TokenId>(doc.size(), -1)};
            std::size_t masked = 0;
            for (std::size_t i = doc.prompt_len; i < doc.size(); ++i) {
                if (batch_rng.uniform() < p) {
                    ex.targets[i] = ex.inputs[i];
                    ex.inputs[i] = mask;
                    ++masked;
                }
            }
            if (masked == 0 && doc.response_len() > 0) {
                const std::size_t i = doc.prompt_len + batch_rng.below(doc.response_len());
                ex.targets[i] = ex.inputs[i];
                ex.inputs[i] = mask;
                masked = 1;
            }
            masked_total += masked;
            batch.push_back(std::move(ex));
        }
        return std::make_pair(std::move(batch), masked_total);
    };

    for (int step = 0; step <= tc.steps; ++step) {
        auto [batch, masked_total] = draw_batch();
        const float scale = 1.0f / static_cast<float>(std::max<std::size_t>(1, masked_total));
        const bool update = step < tc.steps;
        DenoiserWeights grad = update ? DenoiserWeights::zeros(cfg) : DenoiserWeights{};
        double loss = 0.0;
        for (const auto& ex : batch) {
            loss += masked_loss_and_grad(model, ex.inputs, ex.targets, scale, update ? &grad : nullptr);
        }
        loss *= scale;
        result.loss_log.push_back(loss);
        if (on_step) on_step(step, loss);
        if (!std::isfinite(loss)) {
            throw TrainingError("training diverged at step " + std::to_string(step), last_good);
        }
        if (!update) break;
        last_good.model.weights = model.weights;

        float clip = 1.0f;
        if (tc.grad_clip > 0.0f) {
            const double norm = global_norm(grad);
            if (!std::isfinite(norm)) {
                throw TrainingError("non-finite gradient at step " + std::to_string(step), last_good);
            }
            if (norm > tc.grad_clip) clip = static_cast<float>(tc.grad_clip / norm);
        }
        const float lr = tc.linear_decay ? tc.learning_rate * static_cast<float>(tc.steps - step) / tc.steps
                                         : tc.learning_rate;
        const double t = step + 1;
        const auto bc1 = static_cast<float>(1.0 - std::pow(static_cast<double>(tc.beta1), t));
        const auto bc2 = static_cast<float>(1.0 - std::pow(static_cast<double>(tc.beta2), t));

        std::vector<Matrix*> params, grads, first, second;
        model.weights.for_each_section([&](const std::string&, Matrix& x) { params.push_back(&x); });
        grad.for_each_section([&](const std::string&, Matrix& x) { grads.push_back(&x); });
        m1.for_each_section([&](const std::string&, Matrix& x) { first.push_back(&x); });
        m2.for_each_section([&](const std::string&, Matrix& x) { second.push_back(&x); });
        for (std::size_t s = 0; s < params.size(); ++s) {
            float* p = params[s]->values().data();
            const float* g = grads[s]->values().data();
            float* a = first[s]->values().data();
            float* b = second[s]->values().data();
            for (std::size_t i = 0; i < params[s]->size(); ++i) {
                const float gi = g[i] * clip;
                a[i] = tc.beta1 * a[i] + (1.0f - tc.beta1) * gi;
                b[i] = tc.beta2 * b[i] + (1.0f - tc.beta2) * gi * gi;
                p[i] -= lr * (a[i] / bc1) / (std::sqrt(b[i] / bc2) + tc.adam_eps);
            }
        }
    }
    return result;
}

}  // namespace ilrr
