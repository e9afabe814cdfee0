#include "ilrr/steering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "ilrr/errors.hpp"

namespace ilrr {

void SteerConfig::validate(int num_layers, int total_steps) const {
    if (kernel < 1) throw ConfigError("steering kernel must be >= 1");
    for (const auto& [layer, alpha] : layers) {
        if (layer < 1 || layer > num_layers) {
            throw ConfigError("steering layer " + std::to_string(layer) + " outside [1, " +
                              std::to_string(num_layers) + "]");
        }
        if (!std::isfinite(alpha) || alpha < 0.0f) throw ConfigError("steering alpha must be finite and >= 0");
    }
    for (int t : steps) {
        if (t < 1 || t > total_steps) {
            throw ConfigError("steering step " + std::to_string(t) + " outside [1, " + std::to_string(total_steps) +
                              "]");
        }
    }
    if (wave_freq && !(*wave_freq > 0.0 && std::isfinite(*wave_freq))) {
        throw ConfigError("wave frequency must be positive");
    }
}

Matrix avg_pool_1d(const Matrix& h, int k, PoolNorm norm) {
    if (k < 1) throw ConfigError("avg_pool_1d: kernel must be >= 1");
    const std::size_t n = h.rows(), d = h.cols();
    const std::ptrdiff_t radius = k / 2;
    Matrix out(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(i) - radius);
        const std::ptrdiff_t hi =
            std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(n) - 1, static_cast<std::ptrdiff_t>(i) + radius);
        auto o = out.row(i);
        for (std::ptrdiff_t j = lo; j <= hi; ++j) {
            const auto src = h.row(static_cast<std::size_t>(j));
            for (std::size_t c = 0; c < d; ++c) o[c] += src[c];
        }
        const float denom = norm == PoolNorm::Count ? static_cast<float>(hi - lo + 1) : static_cast<float>(k);
        for (float& v : o) v /= denom;
    }
    return out;
}

Matrix ilrr_update(const Matrix& h_x, const Matrix& h_y, float alpha, int k, PoolNorm norm) {
    return apply_delta(h_x, standard_delta(h_x, h_y, alpha, k, norm));
}

Matrix adaptive_downsample(const Matrix& h, std::size_t target) {
    const std::size_t n = h.rows(), d = h.cols();
    if (target < 1 || target > n) {
        throw ContractError("adaptive_downsample: target " + std::to_string(target) + " must lie in [1, " +
                            std::to_string(n) + "]");
    }
    Matrix out(target, d);
    for (std::size_t i = 0; i < target; ++i) {
        const std::size_t lo = i * n / target;
        const std::size_t hi = (i + 1) * n / target;
        auto o = out.row(i);
        for (std::size_t j = lo; j < hi; ++j) {
            const auto src = h.row(j);
            for (std::size_t c = 0; c < d; ++c) o[c] += src[c];
        }
        const auto count = static_cast<float>(hi - lo);
        for (float& v : o) v /= count;
    }
    return out;
}

Matrix linear_upsample(const Matrix& h, std::size_t target) {
    const std::size_t n = h.rows(), d = h.cols();
    if (n < 1 || target < n) {
        throw ContractError("linear_upsample: target " + std::to_string(target) + " shorter than source " +
                            std::to_string(n));
    }
    Matrix out(target, d);
    if (n == 1) {
        for (std::size_t j = 0; j < target; ++j) out.set_rows(j, h);
        return out;
    }
    for (std::size_t j = 0; j < target; ++j) {
        const double coord = static_cast<double>(j) * static_cast<double>(n - 1) / static_cast<double>(target - 1);
        const std::size_t lo = std::min(static_cast<std::size_t>(coord), n - 1);
        const std::size_t hi = std::min(lo + 1, n - 1);
        const auto frac = static_cast<float>(coord - static_cast<double>(lo));
        const auto a = h.row(lo), b = h.row(hi);
        auto o = out.row(j);
        for (std::size_t c = 0; c < d; ++c) o[c] = a[c] + frac * (b[c] - a[c]);
    }
    return out;
}

std::vector<float> modulation_wave(float alpha, double freq, std::size_t n) {
    std::vector<float> w(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double phase = 2.0 * std::numbers::pi * freq * static_cast<double>(i) / static_cast<double>(n);
        w[i] = static_cast<float>(0.5 * alpha * (1.0 + std::cos(phase)));
    }
    return w;
}

SteerDelta standard_delta(const Matrix& h_x, const Matrix& h_y, float alpha, int k, PoolNorm norm) {
    if (h_x.rows() != h_y.rows() || h_x.cols() != h_y.cols()) {
        throw ContractError("ilrr update: generation and reference activations differ in shape");
    }
    SteerDelta delta{avg_pool_1d(h_y, k, norm), std::vector<float>(h_x.rows(), alpha)};
    const Matrix pooled_x = avg_pool_1d(h_x, k, norm);
    for (std::size_t i = 0; i < pooled_x.size(); ++i) delta.direction.values()[i] -= pooled_x.values()[i];
    return delta;
}

SteerDelta spatial_delta(const Matrix& h_x, const Matrix& h_y, std::span<const float> w, int k, PoolNorm norm) {
    if (h_x.cols() != h_y.cols()) throw ContractError("spatial update: hidden widths differ");
    if (h_y.rows() > h_x.rows()) {
        throw ContractError("spatial update: reference longer than generation; use standard mode");
    }
    if (w.size() != h_x.rows()) throw ContractError("spatial update: modulation length differs from generation");
    Matrix aligned = avg_pool_1d(h_y, k, norm);
    const Matrix down = adaptive_downsample(avg_pool_1d(h_x, k, norm), h_y.rows());
    for (std::size_t i = 0; i < aligned.size(); ++i) aligned.values()[i] -= down.values()[i];
    return SteerDelta{linear_upsample(aligned, h_x.rows()), std::vector<float>(w.begin(), w.end())};
}

Matrix apply_delta(const Matrix& h_x, const SteerDelta& delta) {
    if (delta.direction.rows() != h_x.rows() || delta.direction.cols() != h_x.cols() ||
        delta.scale.size() != h_x.rows()) {
        throw ContractError("steering delta does not match the activations it modifies");
    }
    Matrix out = h_x;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        const float s = delta.scale[i];
        if (s == 0.0f) continue;
        auto o = out.row(i);
        const auto dir = delta.direction.row(i);
        for (std::size_t c = 0; c < o.size(); ++c) o[c] += s * dir[c];
    }
    return out;
}

Matrix spatially_modulated_update(const Matrix& h_x, const Matrix& h_y, std::span<const float> w, int k,
                                  PoolNorm norm) {
    return apply_delta(h_x, spatial_delta(h_x, h_y, w, k, norm));
}

Matrix spatially_modulated_update(const Matrix& h_x, const Matrix& h_y, float alpha, const SteerConfig& cfg) {
    const std::vector<float> w = cfg.wave_freq ? modulation_wave(alpha, *cfg.wave_freq, h_x.rows())
                                               : std::vector<float>(h_x.rows(), alpha);
    return spatially_modulated_update(h_x, h_y, w, cfg.kernel, cfg.pool_norm);
}

std::vector<InterventionHook> make_hooks(const SteerConfig& cfg, int num_layers, HookObserver observer) {
    cfg.validate(num_layers, std::numeric_limits<int>::max());
    std::vector<InterventionHook> hooks;
    hooks.reserve(cfg.layers.size());
    for (const auto& [layer, alpha] : cfg.layers) {
        InterventionHook hook;
        hook.layer = layer;
        hook.apply = [cfg, alpha = alpha, observer](const HookContext& ctx, Matrix& h, const Matrix* companion) {
            if (!cfg.fires_at(ctx.timestep)) return;
            if (companion == nullptr) throw ContractError("steering hook fired without reference activations");
            const bool response_only = cfg.span == SteeringSpan::Response;
            const std::size_t gen_first = response_only ? ctx.prompt_len : 0;
            const std::size_t ref_first = response_only ? ctx.companion_prompt_len : 0;
            if (gen_first > h.rows() || ref_first > companion->rows()) {
                throw ContractError("steering span exceeds sequence length");
            }
            const Matrix h_x = h.slice_rows(gen_first, h.rows() - gen_first);
            const Matrix h_y = companion->slice_rows(ref_first, companion->rows() - ref_first);
            if (h_x.rows() == 0 || h_y.rows() == 0) return;

            SteerDelta delta;
            if (cfg.mode == SteerMode::Standard) {
                if (h_x.rows() != h_y.rows()) {
                    throw ContractError("standard steering needs reference length == generation length (" +
                                        std::to_string(h_y.rows()) + " vs " + std::to_string(h_x.rows()) + ")");
                }
                delta = standard_delta(h_x, h_y, alpha, cfg.kernel, cfg.pool_norm);
            } else {
                const std::vector<float> w = cfg.wave_freq ? modulation_wave(alpha, *cfg.wave_freq, h_x.rows())
                                                           : std::vector<float>(h_x.rows(), alpha);
                delta = spatial_delta(h_x, h_y, w, cfg.kernel, cfg.pool_norm);
            }
            h.set_rows(gen_first, apply_delta(h_x, delta));
            if (observer) {
                float mx = 0.0f;
                for (float v : delta.direction.values()) mx = std::max(mx, std::fabs(v));
                observer(HookEvent{ctx.layer, ctx.timestep, alpha, mx, h_x.rows()});
            }
        };
        hooks.push_back(std::move(hook));
    }
    return hooks;
}

PairedTrace paired_forward(const Denoiser& model, const TokenSeq& gen, const TokenSeq& ref, const SteerConfig& cfg,
                           int timestep, NfeCounter& nfe, const HookObserver& observer) {
    if (!cfg.fires_at(timestep)) {
        ForwardOptions opts;
        opts.timestep = timestep;
        opts.nfe = &nfe;
        return PairedTrace{forward_with_taps(model, gen, opts), ResidualTrace{}};
    }
    const auto hooks = make_hooks(cfg, static_cast<int>(model.config.num_layers), observer);
    return paired_forward(model, gen, ref, hooks, timestep, nfe);
}

}  // namespace ilrr
