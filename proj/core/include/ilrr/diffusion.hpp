#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "ilrr/model.hpp"
#include "ilrr/numerics.hpp"
#include "ilrr/steering.hpp"
#include "ilrr/tokens.hpp"

namespace ilrr {

enum class ScheduleKind { Linear, Cosine };

// Masking curve over T steps plus the reverse-process unmasking plan for a
// response of gen_len tokens. Step T is the first reverse step, step 1 the last.
class NoiseSchedule {
  public:
    NoiseSchedule(int total_steps, std::size_t gen_len, ScheduleKind kind = ScheduleKind::Linear);

    int total_steps() const { return total_steps_; }
    std::size_t gen_len() const { return gen_len_; }
    ScheduleKind kind() const { return kind_; }

    // Probability that a response token is masked at corruption level t;
    // 0 at t = 0, 1 at t = T, nondecreasing.
    double mask_prob(int t) const;

    // Tokens committed during reverse step t. gen_len spread evenly across
    // steps, the remainder going to the earliest steps (t = T, T-1, ...).
    std::size_t unmask_count(int t) const;

    // Response tokens still masked once reverse step t has finished.
    std::size_t masked_after(int t) const;

  private:
    int total_steps_;
    std::size_t gen_len_;
    ScheduleKind kind_;
};

// Replaces each response token with the mask independently with probability
// mask_prob(t). Prompt tokens are never touched.
TokenSeq corrupt(const TokenSeq& x0, int t, const NoiseSchedule& schedule, TokenId mask_id, Rng& rng);

// How committed tokens are drawn from the predicted x_0 distribution.
struct TokenSampler {
    enum class Kind { Greedy, Temperature, TopK };
    Kind kind = Kind::Greedy;
    float temperature = 1.0f;
    int top_k = 0;

    static TokenSampler greedy() { return {}; }
    static TokenSampler with_temperature(float tau) { return {Kind::Temperature, tau, 0}; }
    static TokenSampler with_top_k(int k, float tau = 1.0f) { return {Kind::TopK, tau, k}; }

    // Throws ConfigError for tau <= 0 or k < 1.
    void validate() const;
    // `banned` is excluded from the draw (the mask token).
    TokenId draw(std::span<const float> logits, TokenId banned, Rng& rng) const;
};

// Per-run generators: token draws and reference corruption are independent so
// that enabling steering never shifts the token stream.
struct SamplerStreams {
    Rng tokens;
    Rng corruption;
    static SamplerStreams from(const Rng& rng) { return {rng.fork(1), rng.fork(2)}; }
};

struct SteeringRequest {
    SteerConfig config;
    TokenSeq reference;  // prompt + y_0, same prompt as the generation
    HookObserver observer;
};

// One reverse transition x_t -> x_{t-1}. Unmasked tokens are carried over; the
// schedule's count of masked positions with the highest confidence (max
// softmax probability, ties to the lower position) are committed.
TokenSeq reverse_step(const Denoiser& model, const TokenSeq& x_t, int t, const NoiseSchedule& schedule,
                      const SteeringRequest* steer, const TokenSampler& sampler, SamplerStreams& streams,
                      NfeCounter& nfe);

struct SampleOptions {
    TokenSampler sampler;
    std::optional<SteerConfig> steer;
    std::vector<TokenId> reference;  // response-only y_0; the prompt is prepended internally
    HookObserver observer;
};

struct SampleResult {
    TokenSeq tokens;
    NfeCounter nfe;
};

// Full reverse process from a fully masked response (t = T .. 1).
SampleResult sample(const Denoiser& model, std::span<const TokenId> prompt, std::size_t gen_len,
                    const NoiseSchedule& schedule, const SampleOptions& opts, const Rng& rng);

using SequenceScorer = std::function<double(const TokenSeq&)>;

struct BestOfNResult {
    TokenSeq best;
    std::size_t best_index = 0;
    std::vector<double> scores;
    NfeCounter nfe;
};

// n unsteered samples on streams rng.fork(0..n-1); returns the highest score,
// earliest candidate on ties.
BestOfNResult best_of_n(const Denoiser& model, std::span<const TokenId> prompt, std::size_t gen_len,
                        const NoiseSchedule& schedule, std::size_t n, const SequenceScorer& scorer,
                        const TokenSampler& sampler, const Rng& rng);

}  // namespace ilrr
