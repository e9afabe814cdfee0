#include "ilrr/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

#include "ilrr/errors.hpp"

namespace ilrr {

NoiseSchedule::NoiseSchedule(int total_steps, std::size_t gen_len, ScheduleKind kind)
    : total_steps_(total_steps), gen_len_(gen_len), kind_(kind) {
    if (total_steps < 1) throw ConfigError("noise schedule needs at least one step");
}

double NoiseSchedule::mask_prob(int t) const {
    if (t <= 0) return 0.0;
    if (t >= total_steps_) return 1.0;
    const double s = static_cast<double>(t) / static_cast<double>(total_steps_);
    switch (kind_) {
        case ScheduleKind::Linear:
            return s;
        case ScheduleKind::Cosine:
            return 1.0 - std::cos(0.5 * std::numbers::pi * s);
    }
    return s;
}

std::size_t NoiseSchedule::unmask_count(int t) const {
    if (t < 1 || t > total_steps_) return 0;
    const auto steps = static_cast<std::size_t>(total_steps_);
    const std::size_t base = gen_len_ / steps;
    const std::size_t extra = gen_len_ % steps;
    // Steps T, T-1, ..., T-extra+1 take one more token.
    return base + (static_cast<std::size_t>(total_steps_ - t) < extra ? 1 : 0);
}

std::size_t NoiseSchedule::masked_after(int t) const {
    std::size_t remaining = 0;
    for (int s = 1; s < t && s <= total_steps_; ++s) remaining += unmask_count(s);
    return remaining;
}

TokenSeq corrupt(const TokenSeq& x0, int t, const NoiseSchedule& schedule, TokenId mask_id, Rng& rng) {
    if (t < 0 || t > schedule.total_steps()) {
        throw ContractError("corrupt: timestep " + std::to_string(t) + " outside [0, T]");
    }
    const double p = schedule.mask_prob(t);
    TokenSeq out = x0;
    for (std::size_t i = out.prompt_len; i < out.size(); ++i) {
        if (rng.uniform() < p) out.ids[i] = mask_id;
    }
    return out;
}

void TokenSampler::validate() const {
    if (kind != Kind::Greedy && !(temperature > 0.0f)) throw ConfigError("sampler temperature must be > 0");
    if (kind == Kind::TopK && top_k < 1) throw ConfigError("top-k sampler needs k >= 1");
}

TokenId TokenSampler::draw(std::span<const float> logits, TokenId banned, Rng& rng) const {
    const std::size_t v = logits.size();
    if (kind == Kind::Greedy) {
        std::size_t best = v;
        for (std::size_t i = 0; i < v; ++i) {
            if (static_cast<TokenId>(i) == banned) continue;
            if (best == v || logits[i] > logits[best]) best = i;
        }
        return static_cast<TokenId>(best);
    }
    validate();
    std::vector<float> scaled(v, -std::numeric_limits<float>::infinity());
    for (std::size_t i = 0; i < v; ++i) {
        if (static_cast<TokenId>(i) != banned) scaled[i] = logits[i] / temperature;
    }
    if (kind == Kind::TopK && static_cast<std::size_t>(top_k) < v) {
        std::vector<std::size_t> order(v);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scaled[a] > scaled[b]; });
        for (std::size_t r = static_cast<std::size_t>(top_k); r < v; ++r) {
            scaled[order[r]] = -std::numeric_limits<float>::infinity();
        }
    }
    softmax_inplace(scaled);
    return static_cast<TokenId>(rng_categorical(rng, scaled));
}

namespace {

void check_steering(const Denoiser& model, const TokenSeq& x_t, const NoiseSchedule& schedule,
                    const SteeringRequest& steer) {
    steer.config.validate(static_cast<int>(model.config.num_layers), schedule.total_steps());
    if (steer.reference.prompt_len > steer.reference.size()) throw ContractError("reference prompt_len too large");
    const std::size_t ref_len = steer.config.span == SteeringSpan::Response ? steer.reference.response_len()
                                                                            : steer.reference.size();
    const std::size_t gen_len = steer.config.span == SteeringSpan::Response ? x_t.response_len() : x_t.size();
    if (ref_len == 0) throw ConfigError("steering reference is empty");
    if (steer.config.mode == SteerMode::Standard && ref_len != gen_len) {
        throw ConfigError("standard steering needs a reference as long as the generation (" +
                            std::to_string(ref_len) + " vs " + std::to_string(gen_len) + ")");
    }
    if (steer.config.mode == SteerMode::SpatiallyModulated && ref_len > gen_len) {
        throw ConfigError("spatially modulated steering needs a reference no longer than the generation");
    }
}

}  // namespace

TokenSeq reverse_step(const Denoiser& model, const TokenSeq& x_t, int t, const NoiseSchedule& schedule,
                      const SteeringRequest* steer, const TokenSampler& sampler, SamplerStreams& streams,
                      NfeCounter& nfe) {
    const auto mask = static_cast<TokenId>(model.config.mask_token_id);
    std::vector<std::size_t> masked;
    for (std::size_t i = x_t.prompt_len; i < x_t.size(); ++i) {
        if (x_t.ids[i] == mask) masked.push_back(i);
    }
    if (masked.empty()) return x_t;

    Matrix logits;
    if (steer != nullptr) {
        check_steering(model, x_t, schedule, *steer);
        TokenSeq y_t;
        if (steer->config.fires_at(t)) y_t = corrupt(steer->reference, t, schedule, mask, streams.corruption);
        logits = paired_forward(model, x_t, y_t, steer->config, t, nfe, steer->observer).gen.logits;
    } else {
        ForwardOptions opts;
        opts.timestep = t;
        opts.nfe = &nfe;
        logits = forward_with_taps(model, x_t, opts).logits;
    }

    std::vector<float> confidence(masked.size());
    for (std::size_t m = 0; m < masked.size(); ++m) {
        std::vector<float> probs(logits.row(masked[m]).begin(), logits.row(masked[m]).end());
        probs[static_cast<std::size_t>(mask)] = -std::numeric_limits<float>::infinity();
        softmax_inplace(probs);
        confidence[m] = *std::max_element(probs.begin(), probs.end());
    }

    const std::size_t keep_masked = std::min(masked.size(), schedule.masked_after(t));
    const std::size_t commit = masked.size() - keep_masked;
    std::vector<std::size_t> order(masked.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return confidence[a] > confidence[b]; });
    order.resize(commit);
    std::sort(order.begin(), order.end());

    TokenSeq next = x_t;
    for (std::size_t m : order) {
        const std::size_t pos = masked[m];
        next.ids[pos] = sampler.draw(logits.row(pos), mask, streams.tokens);
    }
    return next;
}

SampleResult sample(const Denoiser& model, std::span<const TokenId> prompt, std::size_t gen_len,
                    const NoiseSchedule& schedule, const SampleOptions& opts, const Rng& rng) {
    if (prompt.size() + gen_len > model.config.max_seq_len) {
        throw ShapeError("prompt + generation length exceeds max_seq_len");
    }
    if (schedule.gen_len() != gen_len) throw ContractError("schedule was built for a different generation length");
    opts.sampler.validate();
    const auto mask = static_cast<TokenId>(model.config.mask_token_id);
    for (TokenId id : prompt) {
        if (id == mask) throw ContractError("prompt contains the mask token");
    }

    std::optional<SteeringRequest> steer;
    if (opts.steer) {
        if (opts.reference.empty()) throw ConfigError("steering enabled without a reference");
        steer = SteeringRequest{*opts.steer, TokenSeq::join(prompt, opts.reference), opts.observer};
    }

    SampleResult result;
    result.tokens = TokenSeq::join(prompt, std::vector<TokenId>(gen_len, mask));
    if (steer) check_steering(model, result.tokens, schedule, *steer);
    SamplerStreams streams = SamplerStreams::from(rng);
    for (int t = schedule.total_steps(); t >= 1; --t) {
        result.tokens = reverse_step(model, result.tokens, t, schedule, steer ? &*steer : nullptr, opts.sampler,
                                     streams, result.nfe);
    }
    return result;
}

BestOfNResult best_of_n(const Denoiser& model, std::span<const TokenId> prompt, std::size_t gen_len,
                        const NoiseSchedule& schedule, std::size_t n, const SequenceScorer& scorer,
                        const TokenSampler& sampler, const Rng& rng) {
    if (n < 1) throw ContractError("best_of_n needs n >= 1");
    BestOfNResult out;
    SampleOptions opts;
    opts.sampler = sampler;
    for (std::size_t i = 0; i < n; ++i) {
        SampleResult r = sample(model, prompt, gen_len, schedule, opts, rng.fork(i));
        out.nfe.forward_passes += r.nfe.forward_passes;
        const double score = scorer(r.tokens);
        out.scores.push_back(score);
        if (i == 0 || score > out.scores[out.best_index]) {
            out.best_index = i;
            out.best = std::move(r.tokens);
        }
    }
    return out;
}

}  // namespace ilrr
