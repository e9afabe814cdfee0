#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ilrr/numerics.hpp"
#include "ilrr/tokens.hpp"

namespace ilrr {

struct DenoiserConfig {
    std::uint32_t vocab_size = 64;  // includes the mask token
    std::uint32_t hidden_dim = 64;
    std::uint32_t num_layers = 8;
    std::uint32_t num_heads = 4;
    std::uint32_t max_seq_len = 128;
    std::uint32_t mask_token_id = 1;
    std::uint32_t mlp_dim = 256;

    // Throws ConfigError on violated invariants.
    void validate() const;
    bool operator==(const DenoiserConfig&) const = default;
};

struct BlockWeights {
    Matrix ln1_gain, ln1_bias;
    Matrix wq, bq, wk, bk, wv, bv, wo, bo;
    Matrix ln2_gain, ln2_bias;
    Matrix w1, b1, w2, b2;

    bool operator==(const BlockWeights&) const = default;

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        f(prefix + "ln1.gain", self.ln1_gain);
        f(prefix + "ln1.bias", self.ln1_bias);
        f(prefix + "attn.wq", self.wq);
        f(prefix + "attn.bq", self.bq);
        f(prefix + "attn.wk", self.wk);
        f(prefix + "attn.bk", self.bk);
        f(prefix + "attn.wv", self.wv);
        f(prefix + "attn.bv", self.bv);
        f(prefix + "attn.wo", self.wo);
        f(prefix + "attn.bo", self.bo);
        f(prefix + "ln2.gain", self.ln2_gain);
        f(prefix + "ln2.bias", self.ln2_bias);
        f(prefix + "mlp.w1", self.w1);
        f(prefix + "mlp.b1", self.b1);
        f(prefix + "mlp.w2", self.w2);
        f(prefix + "mlp.b2", self.b2);
    }
};

// Pre-norm bidirectional transformer parameters. The same struct doubles as a
// gradient buffer during training.
struct DenoiserWeights {
    Matrix token_embedding;     // V x d
    Matrix position_embedding;  // max_seq_len x d
    std::vector<BlockWeights> blocks;
    Matrix final_gain, final_bias;
    Matrix head, head_bias;  // d x V, 1 x V

    // Visits every parameter section in checkpoint order as (name, matrix).
    template <class F>
    void for_each_section(F&& f) {
        visit_impl(*this, f);
    }
    template <class F>
    void for_each_section(F&& f) const {
        visit_impl(*this, f);
    }

    // Zero-filled weights with the shapes implied by cfg.
    static DenoiserWeights zeros(const DenoiserConfig& cfg);

    bool operator==(const DenoiserWeights&) const = default;

  private:
    template <class Self, class F>
    static void visit_impl(Self& self, F& f) {
        f(std::string("token_embedding"), self.token_embedding);
        f(std::string("position_embedding"), self.position_embedding);
        for (std::size_t i = 0; i < self.blocks.size(); ++i) {
            BlockWeights::visit(self.blocks[i], "block." + std::to_string(i) + ".", f);
        }
        f(std::string("final_norm.gain"), self.final_gain);
        f(std::string("final_norm.bias"), self.final_bias);
        f(std::string("head.weight"), self.head);
        f(std::string("head.bias"), self.head_bias);
    }
};

struct Denoiser {
    DenoiserConfig config;
    DenoiserWeights weights;
};

// Random N(0, 0.02) projections, unit norm gains, zero biases.
Denoiser init_denoiser(const DenoiserConfig& cfg, Rng& rng);

// Number of forward passes consumed (function evaluations).
struct NfeCounter {
    std::int64_t forward_passes = 0;
};

// h^(1..D) after every block (post-hook), and the head logits.
struct ResidualTrace {
    std::vector<Matrix> layers;
    Matrix logits;
};

struct HookContext {
    int layer = 0;  // 1-based block index
    int timestep = 0;
    std::size_t prompt_len = 0;            // of the sequence being modified
    std::size_t companion_prompt_len = 0;  // of the companion sequence, if any
};

// Called after block `layer` with the mutable activations of the running pass
// and, when a companion pass exists, its read-only activations at that layer.
struct InterventionHook {
    int layer = 0;
    std::function<void(const HookContext&, Matrix& h, const Matrix* companion)> apply;
};

struct ForwardOptions {
    std::span<const InterventionHook> hooks;
    const ResidualTrace* companion = nullptr;
    std::size_t companion_prompt_len = 0;
    int timestep = 0;
    NfeCounter* nfe = nullptr;
};

ResidualTrace forward_with_taps(const Denoiser& model, const TokenSeq& tokens, const ForwardOptions& opts = {});

struct PairedTrace {
    ResidualTrace gen;
    ResidualTrace ref;
};

// Runs the reference untouched, then the generation with hooks that see the
// reference activations layer by layer. Consumes exactly two passes.
PairedTrace paired_forward(const Denoiser& model, const TokenSeq& gen, const TokenSeq& ref,
                           std::span<const InterventionHook> hooks, int timestep, NfeCounter& nfe);

// Intermediates kept for the manual backward pass in training.
struct BlockCache {
    Matrix input;
    Matrix ln1_hat, ln1_out;
    std::vector<float> ln1_rstd;
    Matrix q, k, v;
    std::vector<Matrix> attn;  // per head, N x N row-stochastic
    Matrix context;
    Matrix mid;  // residual after attention
    Matrix ln2_hat, ln2_out;
    std::vector<float> ln2_rstd;
    Matrix pre_act, act;  // N x mlp_dim
};

struct ForwardCache {
    std::vector<BlockCache> blocks;
    Matrix final_input, final_hat, final_out;
    std::vector<float> final_rstd;
    Matrix logits;
};

ForwardCache forward_cached(const Denoiser& model, std::span<const TokenId> tokens);

// Row-wise layer norm; optionally records normalized values and 1/std.
Matrix layer_norm_rows(const Matrix& x, const Matrix& gain, const Matrix& bias, Matrix* hat = nullptr,
                       std::vector<float>* rstd = nullptr);

struct Checkpoint {
    Denoiser model;
    std::vector<std::string> vocabulary;
};

inline constexpr char kCheckpointMagic[8] = {'I', 'L', 'R', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

}  // namespace ilrr
