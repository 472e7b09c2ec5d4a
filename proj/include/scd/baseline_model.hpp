#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "scd/block.hpp"
#include "scd/capture.hpp"

// Causal-DiT: the entangled fully-causal diffusion baseline. One stack of
// frame-causal blocks does both jobs — digesting history and denoising the
// current frame — so every denoise step pays for the full depth. Includes
// the two surgery variants: skip-layer schedules and frame-diagonal deep
// layers.

namespace scd {

enum class TrainStrategy { teacher_forcing, diffusion_forcing };

inline const char* train_strategy_name(TrainStrategy s) {
    return s == TrainStrategy::teacher_forcing ? "teacher_forcing" : "diffusion_forcing";
}

// Denoise steps 1..n_full_steps run every layer; later steps run only the
// first prefix_len and last suffix_len layers, the middle bridged by the
// residual stream.
struct SkipSchedule {
    index_t n_full_steps = 0;
    index_t prefix_len = 0;
    index_t suffix_len = 0;
};

struct BaselineConfig {
    index_t depth = 12;
    index_t hidden = 768;
    index_t heads = 12;
    TrainStrategy train_strategy = TrainStrategy::teacher_forcing;
    index_t deep_diagonal = 0;  // trailing layers forced to frame_diagonal
    std::optional<SkipSchedule> skip_schedule;
    std::string variant;

    // data geometry (same meaning as the SCD config)
    index_t frame_h = 32, frame_w = 32, channels = 1;
    index_t patch_size = 4;
    index_t action_vocab = 4;

    index_t grid_h() const { return frame_h / patch_size; }
    index_t grid_w() const { return frame_w / patch_size; }
    index_t tokens_per_frame() const { return grid_h() * grid_w(); }
    index_t token_dim() const { return patch_size * patch_size * channels; }

    void validate() const {
        if (depth < 1) throw ConfigError("baseline: depth must be >= 1");
        if (hidden < 1 || heads < 1 || hidden % heads != 0)
            throw ConfigError("baseline: hidden must be a positive multiple of heads");
        if ((hidden / heads) % 8 != 0)
            throw ConfigError("baseline: head dim must be a multiple of 8 for rope");
        if (deep_diagonal < 0 || deep_diagonal > depth)
            throw ConfigError("baseline: deep_diagonal must lie in [0, depth]");
        if (skip_schedule) {
            const SkipSchedule& sk = *skip_schedule;
            if (sk.n_full_steps < 0 || sk.prefix_len < 0 || sk.suffix_len < 0)
                throw ConfigError("baseline: skip schedule fields must be non-negative");
            if (sk.prefix_len + sk.suffix_len > depth)
                throw ConfigError("baseline: prefix_len + suffix_len exceeds depth");
        }
        if (patch_size < 1 || frame_h % patch_size != 0 || frame_w % patch_size != 0)
            throw ConfigError("baseline: frame dims must be divisible by data.patch_size");
        if (action_vocab < 1) throw ConfigError("baseline: action_vocab must be positive");
    }

    static BaselineConfig variant_named(const std::string& name) {
        BaselineConfig c;
        c.variant = name;
        if (name == "dit-b") { c.depth = 12; c.hidden = 768; c.heads = 12; }
        else if (name == "dit-m") { c.depth = 12; c.hidden = 1024; c.heads = 16; }
        else throw ConfigError("unknown baseline variant '" + name + "'");
        return c;
    }
};

// Baseline block-pass cost of one frame at S denoise steps. The extra
// caching pass is deliberately excluded (it shows up in wall-clock and in
// the invocation counters, not here).
inline index_t baseline_bp_per_frame(const BaselineConfig& cfg, index_t denoise_steps) {
    if (denoise_steps < 1)
        throw ConfigError("baseline_bp_per_frame: denoise_steps must be >= 1");
    return denoise_steps * cfg.depth;
}

// First depth-D layers frame_causal, last D frame_diagonal.
inline std::vector<MaskKind> layer_masks(const BaselineConfig& cfg) {
    cfg.validate();
    std::vector<MaskKind> kinds(static_cast<size_t>(cfg.depth), MaskKind::frame_causal);
    for (index_t l = cfg.depth - cfg.deep_diagonal; l < cfg.depth; ++l)
        kinds[static_cast<size_t>(l)] = MaskKind::frame_diagonal;
    return kinds;
}

// Ordered layer indices active at 1-based denoise step s.
inline std::vector<index_t> active_layers(const BaselineConfig& cfg, index_t s) {
    if (s < 1) throw ConfigError("active_layers: denoise step index is 1-based");
    std::vector<index_t> out;
    if (!cfg.skip_schedule || s <= cfg.skip_schedule->n_full_steps) {
        for (index_t l = 0; l < cfg.depth; ++l) out.push_back(l);
        return out;
    }
    const SkipSchedule& sk = *cfg.skip_schedule;
    for (index_t l = 0; l < sk.prefix_len; ++l) out.push_back(l);
    for (index_t l = cfg.depth - sk.suffix_len; l < cfg.depth; ++l) out.push_back(l);
    return out;
}

// Same information as active_layers, as per-layer run/skip flags.
inline std::vector<std::uint8_t> active_layer_flags(const BaselineConfig& cfg, index_t s) {
    std::vector<std::uint8_t> flags(static_cast<size_t>(cfg.depth), 0);
    for (index_t l : active_layers(cfg, s)) flags[static_cast<size_t>(l)] = 1;
    return flags;
}

template <class S>
struct BaselineModel {
    BaselineConfig cfg;
    Tensor<S> embed_w, embed_b;        // patch tokens -> hidden (shared clean/noisy)
    Tensor<S> action_emb;              // (action_vocab x hidden)
    Tensor<S> t_w1, t_b1, t_w2, t_b2;  // timestep MLP
    std::vector<DiTBlock<S>> blocks;
    Tensor<S> head_w, head_b;          // hidden -> patch token velocity
    InvocationCounters* counters = nullptr;

    static BaselineModel init(BaselineConfig cfg, std::uint64_t seed) {
        cfg.validate();
        Rng rng(mix64(seed, stream::init));
        BaselineModel m;
        m.cfg = cfg;
        const index_t h = cfg.hidden, td = cfg.token_dim();
        auto w = [&rng](index_t in, index_t out) {
            Tensor<S> t = Tensor<S>::randn({in, out}, rng, static_cast<S>(1.0 / std::sqrt(double(in))));
            t.set_requires_grad(true);
            return t;
        };
        auto zeros = [](Shape s) {
            Tensor<S> t = Tensor<S>::zeros(std::move(s));
            t.set_requires_grad(true);
            return t;
        };
        m.embed_w = w(td, h);
        m.embed_b = zeros({h});
        m.action_emb = Tensor<S>::randn({cfg.action_vocab, h}, rng, S(0.02));
        m.action_emb.set_requires_grad(true);
        m.t_w1 = w(h, h);
        m.t_b1 = zeros({h});
        m.t_w2 = w(h, h);
        m.t_b2 = zeros({h});
        BlockConfig bc{.hidden = h, .heads = cfg.heads, .cond_dim = h};
        for (index_t i = 0; i < cfg.depth; ++i) m.blocks.push_back(DiTBlock<S>::init(bc, rng));
        m.head_w = w(h, td);
        m.head_b = zeros({td});
        return m;
    }

    std::vector<std::pair<std::string, Tensor<S>>> named_params() {
        std::vector<std::pair<std::string, Tensor<S>>> out;
        out.emplace_back("embed.w", embed_w);
        out.emplace_back("embed.b", embed_b);
        out.emplace_back("action_emb", action_emb);
        out.emplace_back("t.w1", t_w1);
        out.emplace_back("t.b1", t_b1);
        out.emplace_back("t.w2", t_w2);
        out.emplace_back("t.b2", t_b2);
        for (size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect_params("blk." + std::to_string(i), out);
        out.emplace_back("head.w", head_w);
        out.emplace_back("head.b", head_b);
        return out;
    }

    Tensor<S> embed_tokens(const Tensor<S>& patch_tokens) const {
        if (patch_tokens.ndim() != 2 || patch_tokens.dim(1) != cfg.token_dim())
            throw ShapeError("baseline embed: expected (rows x " +
                             std::to_string(cfg.token_dim()) + "), got " +
                             shape_str(patch_tokens.shape()));
        return add(matmul(patch_tokens, embed_w), embed_b);
    }

    Tensor<S> timestep_cond(double t) const {
        Tensor<S> e = sinusoidal_embedding<S>(t, cfg.hidden);
        return add(matmul(gelu(add(matmul(e, t_w1), t_b1)), t_w2), t_b2);
    }

    TokenPos token_pos(index_t frame, index_t tok) const {
        return {frame, tok / cfg.grid_w(), tok % cfg.grid_w()};
    }
};

namespace detail {

template <class S>
struct BaselineSeq {
    Tensor<S> x;     // (slots*T x hidden)
    Tensor<S> cond;  // per-token conditioning
    std::vector<TokenPos> pos;
    std::vector<index_t> tok_frames;  // frame of each token, for capture metadata
};

}  // namespace detail

// Teacher forcing: one pass over the interleaved sequence
// [clean_1, noisy_1, ..., clean_N, noisy_N]. noisy_i attends clean_{<i} and
// itself; clean_i attends clean_{<=i}. Returns velocities for the noisy
// positions only (N*T x token_dim) — clean positions carry no loss.
template <class S>
Tensor<S> baseline_forward_tf(const BaselineModel<S>& model, const Tensor<S>& clean,
                              const Tensor<S>& noisy, const std::vector<double>& ts,
                              const std::vector<index_t>& actions,
                              CaptureHooks<S>* hooks = nullptr,
                              const std::vector<std::uint8_t>* active = nullptr) {
    const BaselineConfig& cfg = model.cfg;
    const index_t T = cfg.tokens_per_frame();
    const index_t N = static_cast<index_t>(ts.size());
    if (N < 1) throw ConfigError("baseline_forward_tf: need at least one frame");
    if (static_cast<index_t>(actions.size()) != N)
        throw ShapeError("baseline_forward_tf: action count does not match frame count");
    auto check = [&](const Tensor<S>& f, const char* name) {
        if (f.ndim() != 2 || f.dim(0) != N * T || f.dim(1) != cfg.token_dim())
            throw ShapeError(std::string("baseline_forward_tf: ") + name + " " +
                             shape_str(f.shape()) + " does not match " + std::to_string(N) +
                             " frames");
    };
    check(clean, "clean frames");
    check(noisy, "noisy frames");
    for (double t : ts)
        if (t < 0 || t > 1) throw Error("baseline_forward_tf: t outside [0,1]");

    // Interleave the two embedded streams: slot 2i = clean_{i+1}, 2i+1 = noisy_{i+1}.
    Tensor<S> stacked = concat_seqdim(model.embed_tokens(clean), model.embed_tokens(noisy));
    std::vector<index_t> order(static_cast<size_t>(2 * N * T));
    for (index_t i = 0; i < N; ++i)
        for (index_t tok = 0; tok < T; ++tok) {
            order[static_cast<size_t>((2 * i) * T + tok)] = i * T + tok;
            order[static_cast<size_t>((2 * i + 1) * T + tok)] = (N + i) * T + tok;
        }
    Tensor<S> x = gather_rows(stacked, order);

    // every token of frame i carries the action that produced the frame
    std::vector<index_t> act_slots(static_cast<size_t>(2 * N));
    for (index_t s = 0; s < 2 * N; ++s) act_slots[static_cast<size_t>(s)] = actions[static_cast<size_t>(s / 2)];
    x = add(x, repeat_rows(embedding_lookup(model.action_emb, act_slots), T));

    // clean slots condition on t=0, noisy slots on their own t_i
    Tensor<S> cond_unique = model.timestep_cond(0.0);
    for (index_t i = 0; i < N; ++i)
        cond_unique = concat_seqdim(cond_unique, model.timestep_cond(ts[static_cast<size_t>(i)]));
    std::vector<index_t> cond_slots(static_cast<size_t>(2 * N));
    for (index_t i = 0; i < N; ++i) {
        cond_slots[static_cast<size_t>(2 * i)] = 0;
        cond_slots[static_cast<size_t>(2 * i + 1)] = i + 1;
    }
    Tensor<S> cond = repeat_rows(gather_rows(cond_unique, cond_slots), T);

    std::vector<TokenPos> pos(static_cast<size_t>(2 * N * T));
    std::vector<index_t> tok_frames(static_cast<size_t>(2 * N * T));
    for (index_t s = 0; s < 2 * N; ++s)
        for (index_t tok = 0; tok < T; ++tok) {
            pos[static_cast<size_t>(s * T + tok)] = model.token_pos(s / 2 + 1, tok);
            tok_frames[static_cast<size_t>(s * T + tok)] = s / 2 + 1;
        }

    const std::vector<MaskKind> kinds = layer_masks(cfg);
    const Mask tf_mask = build_mask(N, T, MaskKind::teacher_forcing_interleaved);
    Mask diag_mask;
    if (cfg.deep_diagonal > 0) diag_mask = build_mask(2 * N, T, MaskKind::frame_diagonal);

    for (size_t l = 0; l < model.blocks.size(); ++l) {
        if (!detail::layer_active(active, l, model.blocks.size(), "baseline_forward_tf"))
            continue;
        AttnCapture<S> cap;
        BlockContext<S> ctx;
        ctx.mask = kinds[l] == MaskKind::frame_diagonal ? &diag_mask : &tf_mask;
        ctx.positions = &pos;
        if (hooks && hooks->want_attention) ctx.capture = &cap;
        x = block_forward(model.blocks[l], x, cond, ctx);
        detail::bump(model.counters, &InvocationCounters::baseline_block_passes, 2 * N);
        if (hooks && hooks->want_attention && hooks->on_attention)
            hooks->on_attention({static_cast<index_t>(l), 0, tok_frames, tok_frames}, cap);
        if (hooks && hooks->want_features && hooks->on_feature)
            for (index_t i = 0; i < N; ++i)
                hooks->on_feature(static_cast<index_t>(l), 0, i + 1,
                                  slice(x, 0, (2 * i + 1) * T, T));
    }

    std::vector<index_t> noisy_rows(static_cast<size_t>(N * T));
    for (index_t i = 0; i < N; ++i)
        for (index_t tok = 0; tok < T; ++tok)
            noisy_rows[static_cast<size_t>(i * T + tok)] = (2 * i + 1) * T + tok;
    return add(matmul(gather_rows(x, noisy_rows), model.head_w), model.head_b);
}

// Diffusion forcing: one frame-causal pass over frames carrying independent
// noise levels; each frame's adaLN conditions on its own t_i. Returns
// velocities for every frame (N*T x token_dim).
template <class S>
Tensor<S> baseline_forward_df(const BaselineModel<S>& model, const Tensor<S>& frames,
                              const std::vector<double>& ts,
                              const std::vector<index_t>& actions,
                              CaptureHooks<S>* hooks = nullptr,
                              const std::vector<std::uint8_t>* active = nullptr,
                              index_t denoise_step = 0) {
    const BaselineConfig& cfg = model.cfg;
    const index_t T = cfg.tokens_per_frame();
    const index_t N = static_cast<index_t>(ts.size());
    if (N < 1) throw ConfigError("baseline_forward_df: need at least one frame");
    if (static_cast<index_t>(actions.size()) != N)
        throw ShapeError("baseline_forward_df: action count does not match frame count");
    if (frames.ndim() != 2 || frames.dim(0) != N * T || frames.dim(1) != cfg.token_dim())
        throw ShapeError("baseline_forward_df: frames " + shape_str(frames.shape()) +
                         " do not match " + std::to_string(N) + " frames");
    for (double t : ts)
        if (t < 0 || t > 1) throw Error("baseline_forward_df: t outside [0,1]");

    Tensor<S> x = add(model.embed_tokens(frames),
                      repeat_rows(embedding_lookup(model.action_emb, actions), T));

    Tensor<S> cond_frames;
    for (index_t i = 0; i < N; ++i) {
        Tensor<S> ci = model.timestep_cond(ts[static_cast<size_t>(i)]);
        cond_frames = i == 0 ? ci : concat_seqdim(cond_frames, ci);
    }
    Tensor<S> cond = repeat_rows(cond_frames, T);

    std::vector<TokenPos> pos(static_cast<size_t>(N * T));
    std::vector<index_t> tok_frames(static_cast<size_t>(N * T));
    for (index_t i = 0; i < N; ++i)
        for (index_t tok = 0; tok < T; ++tok) {
            pos[static_cast<size_t>(i * T + tok)] = model.token_pos(i + 1, tok);
            tok_frames[static_cast<size_t>(i * T + tok)] = i + 1;
        }

    const std::vector<MaskKind> kinds = layer_masks(cfg);
    const Mask causal = build_mask(N, T, MaskKind::frame_causal);
    Mask diag_mask;
    if (cfg.deep_diagonal > 0) diag_mask = build_mask(N, T, MaskKind::frame_diagonal);

    for (size_t l = 0; l < model.blocks.size(); ++l) {
        if (!detail::layer_active(active, l, model.blocks.size(), "baseline_forward_df"))
            continue;
        AttnCapture<S> cap;
        BlockContext<S> ctx;
        ctx.mask = kinds[l] == MaskKind::frame_diagonal ? &diag_mask : &causal;
        ctx.positions = &pos;
        if (hooks && hooks->want_attention) ctx.capture = &cap;
        x = block_forward(model.blocks[l], x, cond, ctx);
        detail::bump(model.counters, &InvocationCounters::baseline_block_passes, N);
        if (hooks && hooks->want_attention && hooks->on_attention)
            hooks->on_attention({static_cast<index_t>(l), denoise_step, tok_frames, tok_frames},
                                cap);
        if (hooks && hooks->want_features && hooks->on_feature)
            for (index_t i = 0; i < N; ++i)
                hooks->on_feature(static_cast<index_t>(l), denoise_step, i + 1,
                                  slice(x, 0, i * T, T));
    }

    return add(matmul(x, model.head_w), model.head_b);
}

// One rollout denoise pass for the current frame: attend the cached clean
// history in frame-causal layers, self-only in frame-diagonal layers. The
// cache is read, never written.
template <class S>
Tensor<S> baseline_denoise_pass(const BaselineModel<S>& model, KVCache<S>& cache,
                                const Tensor<S>& x_t, double t, index_t frame_index,
                                index_t action,
                                const std::vector<std::uint8_t>* active = nullptr,
                                CaptureHooks<S>* hooks = nullptr, index_t denoise_step = 0) {
    const BaselineConfig& cfg = model.cfg;
    const index_t T = cfg.tokens_per_frame();
    if (cache.num_layers() != cfg.depth || cache.tokens_per_frame() != T)
        throw ShapeError("baseline_denoise_pass: cache shaped for a different model");
    if (cache.frames_cached() != frame_index - 1)
        throw Error("baseline_denoise_pass: cache holds " +
                    std::to_string(cache.frames_cached()) + " frames, expected " +
                    std::to_string(frame_index - 1));
    if (x_t.ndim() != 2 || x_t.dim(0) != T || x_t.dim(1) != cfg.token_dim())
        throw ShapeError("baseline_denoise_pass: expected one frame of patch tokens");
    if (t < 0 || t > 1) throw Error("baseline_denoise_pass: t outside [0,1]");
    if (action < 0 || action >= cfg.action_vocab)
        throw ConfigError("baseline_denoise_pass: action out of range");

    Tensor<S> x = add(model.embed_tokens(x_t),
                      repeat_rows(embedding_lookup(model.action_emb, {action}), T));
    Tensor<S> cond = repeat_rows(model.timestep_cond(t), T);
    std::vector<TokenPos> pos(static_cast<size_t>(T));
    for (index_t tok = 0; tok < T; ++tok)
        pos[static_cast<size_t>(tok)] = model.token_pos(frame_index, tok);

    std::vector<index_t> qf, kf;
    if (hooks && hooks->want_attention) {
        qf.assign(static_cast<size_t>(T), frame_index);
        kf.resize(static_cast<size_t>(frame_index * T));
        for (index_t f = 1; f <= frame_index; ++f)
            for (index_t tok = 0; tok < T; ++tok)
                kf[static_cast<size_t>((f - 1) * T + tok)] = f;
    }

    const std::vector<MaskKind> kinds = layer_masks(cfg);
    for (size_t l = 0; l < model.blocks.size(); ++l) {
        if (!detail::layer_active(active, l, model.blocks.size(), "baseline_denoise_pass"))
            continue;
        const bool diagonal = kinds[l] == MaskKind::frame_diagonal;
        AttnCapture<S> cap;
        BlockContext<S> ctx;
        ctx.positions = &pos;
        if (!diagonal) {
            ctx.cache = &cache;
            ctx.cache_layer = static_cast<index_t>(l);
        }
        if (hooks && hooks->want_attention) ctx.capture = &cap;
        x = block_forward(model.blocks[l], x, cond, ctx);
        detail::bump(model.counters, &InvocationCounters::baseline_block_passes, 1);
        if (hooks && hooks->want_attention && hooks->on_attention) {
            std::vector<index_t> kf_layer = diagonal ? qf : kf;
            hooks->on_attention({static_cast<index_t>(l), denoise_step, qf, kf_layer}, cap);
        }
        if (hooks && hooks->want_features && hooks->on_feature)
            hooks->on_feature(static_cast<index_t>(l), denoise_step, frame_index, x);
    }

    return add(matmul(x, model.head_w), model.head_b);
}

// The extra caching pass after a frame finishes denoising: run every layer
// over the clean frame with t=0 conditioning and append its K/V to the
// cache. Frame-diagonal layers append without reading (their keys keep the
// cache layer-uniform but are never attended).
template <class S>
void baseline_cache_frame(const BaselineModel<S>& model, KVCache<S>& cache,
                          const Tensor<S>& x_clean, index_t frame_index, index_t action) {
    const BaselineConfig& cfg = model.cfg;
    const index_t T = cfg.tokens_per_frame();
    if (cache.num_layers() != cfg.depth || cache.tokens_per_frame() != T)
        throw ShapeError("baseline_cache_frame: cache shaped for a different model");
    if (cache.frames_cached() != frame_index - 1)
        throw Error("baseline_cache_frame: cache holds " + std::to_string(cache.frames_cached()) +
                    " frames, expected " + std::to_string(frame_index - 1));
    if (x_clean.ndim() != 2 || x_clean.dim(0) != T || x_clean.dim(1) != cfg.token_dim())
        throw ShapeError("baseline_cache_frame: expected one frame of patch tokens");

    NoGradGuard ng;
    Tensor<S> x = add(model.embed_tokens(x_clean),
                      repeat_rows(embedding_lookup(model.action_emb, {action}), T));
    Tensor<S> cond = repeat_rows(model.timestep_cond(0.0), T);
    std::vector<TokenPos> pos(static_cast<size_t>(T));
    for (index_t tok = 0; tok < T; ++tok)
        pos[static_cast<size_t>(tok)] = model.token_pos(frame_index, tok);

    const std::vector<MaskKind> kinds = layer_masks(cfg);
    for (size_t l = 0; l < model.blocks.size(); ++l) {
        BlockContext<S> ctx;
        ctx.positions = &pos;
        ctx.cache = &cache;
        ctx.cache_layer = static_cast<index_t>(l);
        ctx.cache_read = kinds[l] == MaskKind::frame_causal;
        ctx.cache_append = true;
        x = block_forward(model.blocks[l], x, cond, ctx);
        detail::bump(model.counters, &InvocationCounters::baseline_block_passes, 1);
    }
}

}  // namespace scd
