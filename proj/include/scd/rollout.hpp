#pragma once

#include <algorithm>
#include <chrono>
#include <string>
#include <vector>

#include "scd/baseline_model.hpp"
#include "scd/diffusion.hpp"
#include "scd/scd_model.hpp"

// Frame-by-frame generation. The separable model encodes each finished frame
// incrementally into the KV cache and reuses that context across all S
// denoise steps; the baseline pays S full denoise passes plus one caching
// pass per frame.

namespace scd {

struct RolloutConfig {
    index_t num_frames = 16;
    SamplerConfig sampler = SamplerConfig::linear(50);
    CorruptionConfig corruption;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_frames < 1) throw ConfigError("rollout.num_frames must be >= 1");
        sampler.validate();
        corruption.validate();
    }
};

// Filled by the rollout functions for the bench harness.
struct RolloutStats {
    index_t peak_cache_tokens = 0;
};

// v = v(c~) + cfg_scale * (v(c) - v(c~)) with c~ = c + cfg_eta * zeta. The
// zeta draw is owned by the caller so one draw serves a whole frame. Scale 1
// and cfg_eta 0 short-circuit to the single unguided call, which makes both
// fixed points bitwise. Capture hooks see only the clean branch.
template <class S>
Tensor<S> guided_velocity(const SCDModel<S>& model, const Tensor<S>& x_t, double t,
                          const CausalContext<S>& c, const CorruptionConfig& cor,
                          const Tensor<S>& zeta, CaptureHooks<S>* hooks = nullptr,
                          index_t denoise_step = 0) {
    cor.validate();
    if (cor.cfg_eta == 0 || cor.cfg_scale == 1.0)
        return decode_velocity(model, x_t, t, c, hooks, denoise_step);
    if (!zeta.defined())
        throw Error("guided_velocity: cfg_eta > 0 requires the per-frame zeta draw");
    CausalContext<S> corrupted = corrupt_context(c, cor.cfg_eta, zeta);
    Tensor<S> v_clean = decode_velocity(model, x_t, t, c, hooks, denoise_step);
    Tensor<S> v_neg = decode_velocity(model, x_t, t, corrupted,
                                      static_cast<CaptureHooks<S>*>(nullptr), denoise_step);
    return add(v_neg, scale(sub(v_clean, v_neg), static_cast<S>(cor.cfg_scale)));
}

namespace detail {

// Noise streams are keyed by (seed, stream, frame) so frame i's draws are
// independent of whether later frames ever run.
template <class S>
Tensor<S> frame_noise(std::uint64_t seed, index_t frame, index_t rows, index_t cols) {
    Rng rng(mix64(seed, stream::frame_init, static_cast<std::uint64_t>(frame)));
    return Tensor<S>::randn({rows, cols}, rng);
}

template <class S>
Tensor<S> frame_cfg_noise(std::uint64_t seed, index_t frame, index_t rows, index_t cols) {
    Rng rng(mix64(seed, stream::cfg, static_cast<std::uint64_t>(frame)));
    return Tensor<S>::randn({rows, cols}, rng);
}

}  // namespace detail

template <class S>
Tensor<S> scd_rollout(const SCDModel<S>& model, const std::vector<index_t>& actions,
                      const RolloutConfig& cfg, CaptureHooks<S>* hooks = nullptr,
                      RolloutStats* stats = nullptr) {
    cfg.validate();
    const index_t N = cfg.num_frames;
    const index_t T = model.cfg.tokens_per_frame(), td = model.cfg.token_dim();
    if (static_cast<index_t>(actions.size()) != N)
        throw ShapeError("scd_rollout: " + std::to_string(actions.size()) + " actions for " +
                         std::to_string(N) + " frames");
    NoGradGuard guard;
    KVCache<S> cache(model.cfg.enc_blocks, T);
    const bool guided = cfg.corruption.cfg_eta > 0 && cfg.corruption.cfg_scale != 1.0;

    Tensor<S> out, prev;
    for (index_t i = 1; i <= N; ++i) {
        CausalContext<S> c =
            encode_context_incremental(model, cache, prev, actions[static_cast<size_t>(i - 1)],
                                       hooks);
        Tensor<S> z = detail::frame_noise<S>(cfg.seed, i, T, td);
        Tensor<S> zeta;
        if (guided) zeta = detail::frame_cfg_noise<S>(cfg.seed, i, T, model.cfg.hidden);
        Tensor<S> xi;
        try {
            xi = euler_sample<S>(
                [&](const Tensor<S>& x, double t, index_t step) {
                    return guided_velocity(model, x, t, c, cfg.corruption, zeta, hooks, step);
                },
                z, cfg.sampler);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (frame " + std::to_string(i) + ")");
        }
        out = i == 1 ? xi : concat_seqdim(out, xi);
        prev = xi;
    }
    if (stats) {
        stats->peak_cache_tokens = 0;
        for (index_t l = 0; l < cache.num_layers(); ++l)
            stats->peak_cache_tokens = std::max(stats->peak_cache_tokens, cache.tokens_cached(l));
    }
    return out;
}

template <class S>
Tensor<S> baseline_rollout(const BaselineModel<S>& model, const std::vector<index_t>& actions,
                           const RolloutConfig& cfg, CaptureHooks<S>* hooks = nullptr,
                           RolloutStats* stats = nullptr) {
    cfg.validate();
    const index_t N = cfg.num_frames;
    const index_t T = model.cfg.tokens_per_frame(), td = model.cfg.token_dim();
    if (static_cast<index_t>(actions.size()) != N)
        throw ShapeError("baseline_rollout: " + std::to_string(actions.size()) + " actions for " +
                         std::to_string(N) + " frames");
    NoGradGuard guard;
    KVCache<S> cache(model.cfg.depth, T);
    const bool has_skip = model.cfg.skip_schedule.has_value();

    Tensor<S> out;
    for (index_t i = 1; i <= N; ++i) {
        const index_t action = actions[static_cast<size_t>(i - 1)];
        Tensor<S> z = detail::frame_noise<S>(cfg.seed, i, T, td);
        Tensor<S> xi;
        try {
            xi = euler_sample<S>(
                [&](const Tensor<S>& x, double t, index_t step) {
                    std::vector<std::uint8_t> flags;
                    if (has_skip) flags = active_layer_flags(model.cfg, step + 1);
                    return baseline_denoise_pass(model, cache, x, t, i, action,
                                                 has_skip ? &flags : nullptr, hooks, step);
                },
                z, cfg.sampler);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (frame " + std::to_string(i) + ")");
        }
        baseline_cache_frame(model, cache, xi, i, action);
        out = i == 1 ? xi : concat_seqdim(out, xi);
    }
    if (stats) {
        stats->peak_cache_tokens = 0;
        for (index_t l = 0; l < cache.num_layers(); ++l)
            stats->peak_cache_tokens = std::max(stats->peak_cache_tokens, cache.tokens_cached(l));
    }
    return out;
}

// Roll out with the first `context_frames` frames supplied as ground truth:
// they are encoded into the cache verbatim and generation starts at frame
// context_frames + 1. Returns all num_frames frames (context included), and
// reduces bitwise to scd_rollout when context_frames is 0. Noise draws are
// keyed by absolute frame index, so the generated tail is what an oracle
// with perfect context would produce.
template <class S>
Tensor<S> scd_rollout_conditioned(const SCDModel<S>& model, const Tensor<S>& context_tokens,
                                  index_t context_frames, const std::vector<index_t>& actions,
                                  const RolloutConfig& cfg, CaptureHooks<S>* hooks = nullptr,
                                  RolloutStats* stats = nullptr) {
    cfg.validate();
    const index_t N = cfg.num_frames, ctx = context_frames;
    const index_t T = model.cfg.tokens_per_frame(), td = model.cfg.token_dim();
    if (ctx < 0 || ctx >= N)
        throw ConfigError("scd_rollout_conditioned: context_frames must lie in [0, num_frames)");
    if (ctx > 0 && (context_tokens.ndim() != 2 || context_tokens.dim(0) != ctx * T ||
                    context_tokens.dim(1) != td))
        throw ShapeError("scd_rollout_conditioned: context tokens " +
                         shape_str(context_tokens.shape()) + " do not hold " +
                         std::to_string(ctx) + " frames of " + std::to_string(T) + " x " +
                         std::to_string(td));
    if (static_cast<index_t>(actions.size()) != N)
        throw ShapeError("scd_rollout_conditioned: " + std::to_string(actions.size()) +
                         " actions for " + std::to_string(N) + " frames");
    NoGradGuard guard;
    KVCache<S> cache(model.cfg.enc_blocks, T);
    const bool guided = cfg.corruption.cfg_eta > 0 && cfg.corruption.cfg_scale != 1.0;

    Tensor<S> out, prev;
    for (index_t i = 1; i <= N; ++i) {
        CausalContext<S> c =
            encode_context_incremental(model, cache, prev, actions[static_cast<size_t>(i - 1)],
                                       hooks);
        Tensor<S> xi;
        if (i <= ctx) {
            xi = slice(context_tokens, 0, (i - 1) * T, T);
        } else {
            Tensor<S> z = detail::frame_noise<S>(cfg.seed, i, T, td);
            Tensor<S> zeta;
            if (guided) zeta = detail::frame_cfg_noise<S>(cfg.seed, i, T, model.cfg.hidden);
            try {
                xi = euler_sample<S>(
                    [&](const Tensor<S>& x, double t, index_t step) {
                        return guided_velocity(model, x, t, c, cfg.corruption, zeta, hooks, step);
                    },
                    z, cfg.sampler);
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " (frame " + std::to_string(i) + ")");
            }
        }
        out = i == 1 ? xi : concat_seqdim(out, xi);
        prev = xi;
    }
    if (stats) {
        stats->peak_cache_tokens = 0;
        for (index_t l = 0; l < cache.num_layers(); ++l)
            stats->peak_cache_tokens = std::max(stats->peak_cache_tokens, cache.tokens_cached(l));
    }
    return out;
}

template <class S>
Tensor<S> baseline_rollout_conditioned(const BaselineModel<S>& model,
                                       const Tensor<S>& context_tokens, index_t context_frames,
                                       const std::vector<index_t>& actions,
                                       const RolloutConfig& cfg, CaptureHooks<S>* hooks = nullptr,
                                       RolloutStats* stats = nullptr) {
    cfg.validate();
    const index_t N = cfg.num_frames, ctx = context_frames;
    const index_t T = model.cfg.tokens_per_frame(), td = model.cfg.token_dim();
    if (ctx < 0 || ctx >= N)
        throw ConfigError(
            "baseline_rollout_conditioned: context_frames must lie in [0, num_frames)");
    if (ctx > 0 && (context_tokens.ndim() != 2 || context_tokens.dim(0) != ctx * T ||
                    context_tokens.dim(1) != td))
        throw ShapeError("baseline_rollout_conditioned: context tokens " +
                         shape_str(context_tokens.shape()) + " do not hold " +
                         std::to_string(ctx) + " frames of " + std::to_string(T) + " x " +
                         std::to_string(td));
    if (static_cast<index_t>(actions.size()) != N)
        throw ShapeError("baseline_rollout_conditioned: " + std::to_string(actions.size()) +
                         " actions for " + std::to_string(N) + " frames");
    NoGradGuard guard;
    KVCache<S> cache(model.cfg.depth, T);
    const bool has_skip = model.cfg.skip_schedule.has_value();

    Tensor<S> out;
    for (index_t i = 1; i <= N; ++i) {
        const index_t action = actions[static_cast<size_t>(i - 1)];
        Tensor<S> xi;
        if (i <= ctx) {
            xi = slice(context_tokens, 0, (i - 1) * T, T);
        } else {
            Tensor<S> z = detail::frame_noise<S>(cfg.seed, i, T, td);
            try {
                xi = euler_sample<S>(
                    [&](const Tensor<S>& x, double t, index_t step) {
                        std::vector<std::uint8_t> flags;
                        if (has_skip) flags = active_layer_flags(model.cfg, step + 1);
                        return baseline_denoise_pass(model, cache, x, t, i, action,
                                                     has_skip ? &flags : nullptr, hooks, step);
                    },
                    z, cfg.sampler);
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " (frame " + std::to_string(i) + ")");
            }
        }
        baseline_cache_frame(model, cache, xi, i, action);
        out = i == 1 ? xi : concat_seqdim(out, xi);
    }
    if (stats) {
        stats->peak_cache_tokens = 0;
        for (index_t l = 0; l < cache.num_layers(); ++l)
            stats->peak_cache_tokens = std::max(stats->peak_cache_tokens, cache.tokens_cached(l));
    }
    return out;
}

// ---------------------------------------------------------------------------
// analytic cost model (Table-7 convention: bp excludes the caching pass)
// ---------------------------------------------------------------------------

// Denoise-only block passes per frame under an optional skip schedule.
inline index_t baseline_denoise_passes_per_frame(const BaselineConfig& cfg, index_t S) {
    if (S < 1) throw ConfigError("baseline_denoise_passes_per_frame: S must be >= 1");
    index_t total = 0;
    for (index_t s = 1; s <= S; ++s)
        total += static_cast<index_t>(active_layers(cfg, s).size());
    return total;
}

// Counted block invocations an unguided rollout performs, caching included.
inline index_t scd_analytic_invocations(const SCDConfig& mcfg, const RolloutConfig& rcfg) {
    const bool guided = rcfg.corruption.cfg_eta > 0 && rcfg.corruption.cfg_scale != 1.0;
    const index_t S = rcfg.sampler.num_steps();
    const index_t dec = (guided ? 2 : 1) * S * mcfg.dec_blocks;
    return rcfg.num_frames * (mcfg.enc_blocks + dec);
}

inline index_t baseline_analytic_invocations(const BaselineConfig& mcfg,
                                             const RolloutConfig& rcfg) {
    const index_t S = rcfg.sampler.num_steps();
    return rcfg.num_frames * (baseline_denoise_passes_per_frame(mcfg, S) + mcfg.depth);
}

// ---------------------------------------------------------------------------
// latency bench
// ---------------------------------------------------------------------------

struct BenchReport {
    std::string family;
    double sec_per_frame = 0;
    double frames_per_second = 0;
    double bp_per_frame = 0;        // analytic, caching pass excluded
    index_t block_invocations = 0;  // counted over one rollout, caching included
    index_t expected_invocations = 0;
    index_t peak_cache_tokens = 0;
    bool counted_matches_analytic = false;
};

namespace detail {

template <class RolloutFn>
BenchReport bench_run(RolloutFn&& rollout, InvocationCounters& counters, index_t num_frames,
                      index_t warmup, index_t trials) {
    if (trials < 3) throw ConfigError("bench: trials must be >= 3");
    for (index_t w = 0; w < warmup; ++w) rollout();

    BenchReport rep;
    std::vector<double> secs;
    for (index_t trial = 0; trial < trials; ++trial) {
        counters.reset();
        const auto t0 = std::chrono::steady_clock::now();
        rep.peak_cache_tokens = rollout();
        const auto t1 = std::chrono::steady_clock::now();
        secs.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::sort(secs.begin(), secs.end());
    const size_t n = secs.size();
    const double median =
        n % 2 == 1 ? secs[n / 2] : 0.5 * (secs[n / 2 - 1] + secs[n / 2]);
    rep.sec_per_frame = median / double(num_frames);
    rep.frames_per_second = rep.sec_per_frame > 0 ? 1.0 / rep.sec_per_frame : 0.0;
    rep.block_invocations = counters.total_block_passes();
    return rep;
}

}  // namespace detail

template <class S>
BenchReport bench_scd(SCDModel<S>& model, const std::vector<index_t>& actions,
                      const RolloutConfig& cfg, index_t warmup = 1, index_t trials = 3) {
    InvocationCounters counters;
    InvocationCounters* saved = model.counters;
    model.counters = &counters;
    BenchReport rep = detail::bench_run(
        [&] {
            RolloutStats stats;
            scd_rollout(model, actions, cfg, static_cast<CaptureHooks<S>*>(nullptr), &stats);
            return stats.peak_cache_tokens;
        },
        counters, cfg.num_frames, warmup, trials);
    model.counters = saved;
    rep.family = "scd";
    const index_t steps = cfg.sampler.num_steps();
    rep.bp_per_frame = double(bp_per_frame(model.cfg, steps));
    rep.expected_invocations = scd_analytic_invocations(model.cfg, cfg);
    rep.counted_matches_analytic = rep.block_invocations == rep.expected_invocations;
    return rep;
}

template <class S>
BenchReport bench_baseline(BaselineModel<S>& model, const std::vector<index_t>& actions,
                           const RolloutConfig& cfg, index_t warmup = 1, index_t trials = 3) {
    InvocationCounters counters;
    InvocationCounters* saved = model.counters;
    model.counters = &counters;
    BenchReport rep = detail::bench_run(
        [&] {
            RolloutStats stats;
            baseline_rollout(model, actions, cfg, static_cast<CaptureHooks<S>*>(nullptr), &stats);
            return stats.peak_cache_tokens;
        },
        counters, cfg.num_frames, warmup, trials);
    model.counters = saved;
    rep.family = "causal_dit";
    const index_t steps = cfg.sampler.num_steps();
    rep.bp_per_frame = double(baseline_denoise_passes_per_frame(model.cfg, steps));
    rep.expected_invocations = baseline_analytic_invocations(model.cfg, cfg);
    rep.counted_matches_analytic = rep.block_invocations == rep.expected_invocations;
    return rep;
}

}  // namespace scd
