#pragma once

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "ilrr/model.hpp"
#include "ilrr/numerics.hpp"

namespace ilrr {

enum class SteerMode { Standard, SpatiallyModulated };

// Normalizer of the pooling window: the number of in-bounds elements (a true
// mean) or the kernel size k regardless of clipping.
enum class PoolNorm { Count, Kernel };

// Which rows of a sequence's activations the update may touch.
enum class SteeringSpan { Response, Full };

struct SteerConfig {
    std::map<int, float> layers;  // 1-based layer -> alpha, ascending
    std::set<int> steps;          // timesteps t in [1, T] where steering fires
    int kernel = 6;
    SteerMode mode = SteerMode::Standard;
    // Cosine modulation frequency for SpatiallyModulated mode; unset means a
    // constant wave (w_i = alpha).
    std::optional<double> wave_freq = 7.0;
    PoolNorm pool_norm = PoolNorm::Count;
    SteeringSpan span = SteeringSpan::Response;

    // Throws ConfigError unless layers lie in [1, num_layers], steps in
    // [1, total_steps], alphas are finite and >= 0, k >= 1, and f > 0.
    void validate(int num_layers, int total_steps) const;
    bool fires_at(int timestep) const { return steps.contains(timestep); }
};

// Semantic extractor: sliding mean along the sequence axis with radius k/2.
Matrix avg_pool_1d(const Matrix& h, int k, PoolNorm norm = PoolNorm::Count);

// h_x + alpha * (A(h_y) - A(h_x)).
Matrix ilrr_update(const Matrix& h_x, const Matrix& h_y, float alpha, int k, PoolNorm norm = PoolNorm::Count);

// Mean over N_y contiguous intervals [floor(i*N_x/N_y), floor((i+1)*N_x/N_y)).
Matrix adaptive_downsample(const Matrix& h, std::size_t target);

// Endpoint-aligned linear interpolation along the sequence axis.
Matrix linear_upsample(const Matrix& h, std::size_t target);

// w_i = (alpha/2) * (1 + cos(2*pi*f*i/N)), i = 0..N-1.
std::vector<float> modulation_wave(float alpha, double freq, std::size_t n);

// Steering directions before scaling.
//   standard:  A(h_y) - A(h_x)                       (equal lengths)
//   spatial:   up(A(h_y) - down(A(h_x)), N_x)        (N_y <= N_x)
struct SteerDelta {
    Matrix direction;           // N_x x d
    std::vector<float> scale;   // per-row weight applied to direction
};

SteerDelta standard_delta(const Matrix& h_x, const Matrix& h_y, float alpha, int k, PoolNorm norm = PoolNorm::Count);
SteerDelta spatial_delta(const Matrix& h_x, const Matrix& h_y, std::span<const float> w, int k,
                         PoolNorm norm = PoolNorm::Count);

// h_x + scale (broadcast over the hidden dimension) * direction.
Matrix apply_delta(const Matrix& h_x, const SteerDelta& delta);

// h_x + w (.) up(A(h_y) - down(A(h_x))) with an explicit modulation vector.
Matrix spatially_modulated_update(const Matrix& h_x, const Matrix& h_y, std::span<const float> w, int k,
                                  PoolNorm norm = PoolNorm::Count);
// Same, with w built from alpha and cfg.wave_freq.
Matrix spatially_modulated_update(const Matrix& h_x, const Matrix& h_y, float alpha, const SteerConfig& cfg);

// Reported once per fired hook; used for instrumentation and tests.
struct HookEvent {
    int layer = 0;
    int timestep = 0;
    float alpha = 0.0f;
    float max_abs_direction = 0.0f;
    std::size_t rows_steered = 0;
};
using HookObserver = std::function<void(const HookEvent&)>;

// One hook per configured layer in ascending order. Each fires only when the
// pass timestep is in cfg.steps and requires companion activations.
std::vector<InterventionHook> make_hooks(const SteerConfig& cfg, int num_layers, HookObserver observer = {});

// Paired forward driven by a steering config: when cfg fires at `timestep`
// the reference is evaluated too (two passes) and the generation is steered;
// otherwise only the generation runs (one pass) and `ref` is left empty.
PairedTrace paired_forward(const Denoiser& model, const TokenSeq& gen, const TokenSeq& ref, const SteerConfig& cfg,
                           int timestep, NfeCounter& nfe, const HookObserver& observer = {});

}  // namespace ilrr
