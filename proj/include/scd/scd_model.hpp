#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "scd/block.hpp"
#include "scd/capture.hpp"
#include "scd/diffusion.hpp"

// The separable architecture: a causal encoder that digests clean history
// into one context sequence c_i per frame, and a frame-wise diffusion
// decoder that denoises each frame against its own context only. The
// encoder runs once per frame; the decoder runs once per denoise step.

namespace scd {

enum class DecoderInterface { frame_concat, channel_concat };

struct SCDConfig {
    index_t enc_blocks = 8;   // encoder depth
    index_t dec_blocks = 4;   // decoder depth
    index_t hidden = 768;
    index_t heads = 12;
    DecoderInterface interface_kind = DecoderInterface::frame_concat;
    RoPEMode rope_mode = RoPEMode::temporal;
    double corrupt_eta_train = 0.0;
    std::string variant;  // optional Table-7 style name this config was built from

    // data geometry
    index_t frame_h = 32, frame_w = 32, channels = 1;
    index_t patch_size = 4;
    index_t action_vocab = 4;

    index_t grid_h() const { return frame_h / patch_size; }
    index_t grid_w() const { return frame_w / patch_size; }
    index_t tokens_per_frame() const { return grid_h() * grid_w(); }
    index_t token_dim() const { return patch_size * patch_size * channels; }

    void validate() const {
        if (enc_blocks < 1 || dec_blocks < 1)
            throw ConfigError("scd: enc_blocks and dec_blocks must be >= 1");
        if (hidden < 1 || heads < 1 || hidden % heads != 0)
            throw ConfigError("scd: hidden must be a positive multiple of heads");
        if ((hidden / heads) % 8 != 0)
            throw ConfigError("scd: head dim must be a multiple of 8 for rope");
        if (patch_size < 1 || frame_h % patch_size != 0 || frame_w % patch_size != 0)
            throw ConfigError("scd: frame dims must be divisible by data.patch_size");
        if (action_vocab < 1) throw ConfigError("scd: action_vocab must be positive");
    }

    // Named variants with the paper-scale depth splits and widths.
    static SCDConfig variant_named(const std::string& name) {
        SCDConfig c;
        c.variant = name;
        auto set = [&](index_t l, index_t m, index_t h, index_t hd) {
            c.enc_blocks = l;
            c.dec_blocks = m;
            c.hidden = h;
            c.heads = hd;
        };
        if (name == "scd-b") set(8, 4, 768, 12);
        else if (name == "scd-b-e") set(12, 4, 768, 12);
        else if (name == "scd-b-d") set(8, 12, 768, 12);
        else if (name == "scd-m") set(8, 4, 1024, 16);
        else if (name == "scd-m-e") set(12, 4, 1024, 16);
        else if (name == "scd-m-d") set(8, 12, 1024, 16);
        else throw ConfigError("unknown scd variant '" + name + "'");
        return c;
    }
};

// SCD block-pass cost of generating one frame with S denoise steps.
inline index_t bp_per_frame(const SCDConfig& cfg, index_t denoise_steps) {
    if (denoise_steps < 1) throw ConfigError("bp_per_frame: denoise_steps must be >= 1");
    return cfg.enc_blocks + denoise_steps * cfg.dec_blocks;
}

// Context-corruption knobs: eta augments contexts during training; cfg_eta
// and cfg_scale drive negative-branch guidance at generation time.
struct CorruptionConfig {
    double eta = 0.0;        // training-time corruption std
    double cfg_scale = 1.0;  // guidance scale; 1 is the unguided conditional
    double cfg_eta = 0.0;    // corruption std of the negative branch

    void validate() const {
        if (eta < 0 || cfg_scale < 0 || cfg_eta < 0)
            throw ConfigError("corruption: eta, cfg_scale, and cfg_eta must be non-negative");
    }
};

// Per-frame context: the encoder's latent token sequence for one frame.
template <class S>
struct CausalContext {
    Tensor<S> tokens;      // (tokens_per_frame x hidden), unit-variance per token
    index_t frame_index;   // 1-based frame this context conditions
};

// c~ = c + eta * zeta. eta = 0 returns the identical tensor handle, so the
// degenerate case is bitwise free.
template <class S>
Tensor<S> corrupt_context(const Tensor<S>& c, double eta, const Tensor<S>& zeta) {
    if (eta < 0) throw ConfigError("corrupt_context: eta must be >= 0");
    if (eta == 0) return c;
    detail::check_same_shape("corrupt_context", c, zeta);
    return add(c, scale(zeta, static_cast<S>(eta)));
}

template <class S>
CausalContext<S> corrupt_context(const CausalContext<S>& c, double eta, const Tensor<S>& zeta) {
    return {corrupt_context(c.tokens, eta, zeta), c.frame_index};
}

template <class S>
struct SCDModel {
    SCDConfig cfg;
    Tensor<S> embed_w, embed_b;              // patch tokens -> hidden (shared clean/noisy)
    Tensor<S> bos;                           // learned begin-of-sequence frame
    Tensor<S> action_emb;                    // (action_vocab x hidden)
    Tensor<S> t_w1, t_b1, t_w2, t_b2;        // timestep MLP on the sinusoidal embedding
    std::vector<DiTBlock<S>> enc, dec;
    Tensor<S> proj_w, proj_b;                // channel_concat only: 2*hidden -> hidden
    Tensor<S> head_w, head_b;                // hidden -> patch token velocity
    InvocationCounters* counters = nullptr;  // optional cost instrumentation

    static SCDModel init(SCDConfig cfg, std::uint64_t seed) {
        cfg.validate();
        Rng rng(mix64(seed, stream::init));
        SCDModel m;
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
        m.bos = Tensor<S>::randn({cfg.tokens_per_frame(), h}, rng, S(0.02));
        m.bos.set_requires_grad(true);
        m.action_emb = Tensor<S>::randn({cfg.action_vocab, h}, rng, S(0.02));
        m.action_emb.set_requires_grad(true);
        m.t_w1 = w(h, h);
        m.t_b1 = zeros({h});
        m.t_w2 = w(h, h);
        m.t_b2 = zeros({h});
        BlockConfig bc{.hidden = h, .heads = cfg.heads, .cond_dim = h};
        for (index_t i = 0; i < cfg.enc_blocks; ++i) m.enc.push_back(DiTBlock<S>::init(bc, rng));
        for (index_t i = 0; i < cfg.dec_blocks; ++i) m.dec.push_back(DiTBlock<S>::init(bc, rng));
        if (cfg.interface_kind == DecoderInterface::channel_concat) {
            m.proj_w = w(2 * h, h);
            m.proj_b = zeros({h});
        }
        m.head_w = w(h, td);
        m.head_b = zeros({td});
        return m;
    }

    std::vector<std::pair<std::string, Tensor<S>>> named_params() {
        std::vector<std::pair<std::string, Tensor<S>>> out;
        out.emplace_back("embed.w", embed_w);
        out.emplace_back("embed.b", embed_b);
        out.emplace_back("bos", bos);
        out.emplace_back("action_emb", action_emb);
        out.emplace_back("t.w1", t_w1);
        out.emplace_back("t.b1", t_b1);
        out.emplace_back("t.w2", t_w2);
        out.emplace_back("t.b2", t_b2);
        for (size_t i = 0; i < enc.size(); ++i)
            enc[i].collect_params("enc." + std::to_string(i), out);
        for (size_t i = 0; i < dec.size(); ++i)
            dec[i].collect_params("dec." + std::to_string(i), out);
        if (proj_w.defined()) {
            out.emplace_back("proj.w", proj_w);
            out.emplace_back("proj.b", proj_b);
        }
        out.emplace_back("head.w", head_w);
        out.emplace_back("head.b", head_b);
        return out;
    }

    // ---- shared building blocks -------------------------------------------

    Tensor<S> embed_tokens(const Tensor<S>& patch_tokens) const {
        if (patch_tokens.ndim() != 2 || patch_tokens.dim(1) != cfg.token_dim())
            throw ShapeError("embed_tokens: expected (rows x " + std::to_string(cfg.token_dim()) +
                             "), got " + shape_str(patch_tokens.shape()));
        return add(matmul(patch_tokens, embed_w), embed_b);
    }

    Tensor<S> timestep_cond(double t) const {
        Tensor<S> e = sinusoidal_embedding<S>(t, cfg.hidden);
        return add(matmul(gelu(add(matmul(e, t_w1), t_b1)), t_w2), t_b2);  // (1 x hidden)
    }

    // spatial rope coordinates of token `tok` within its frame
    TokenPos token_pos(index_t frame, index_t tok) const {
        return {frame, tok / cfg.grid_w(), tok % cfg.grid_w()};
    }
};

namespace detail {

// Unit-variance normalization of encoder outputs. A tighter epsilon than the
// in-block norms so the variance contract holds to 1e-4 even for small
// per-token scales.
inline constexpr double kContextNormEps = 1e-8;

}  // namespace detail

// Teacher-forced parallel encoding. frames: raw patch tokens (N*T x
// token_dim) for x_1..x_N; actions: a_1..a_N. The encoder consumes
// [BOS, x_1, ..., x_{N-1}] (x_N is a prediction target only), adds emb(a_i)
// to every token of slot i-1, runs enc_blocks frame-causal blocks, and
// normalizes. Row block i-1 of the result is c_i.
template <class S>
Tensor<S> encode_contexts(const SCDModel<S>& model, const Tensor<S>& frames,
                          const std::vector<index_t>& actions,
                          CaptureHooks<S>* hooks = nullptr,
                          const std::vector<std::uint8_t>* active = nullptr) {
    const SCDConfig& cfg = model.cfg;
    const index_t T = cfg.tokens_per_frame();
    const index_t N = static_cast<index_t>(actions.size());
    if (N < 1) throw ConfigError("encode_contexts: need at least one frame");
    if (frames.ndim() != 2 || frames.dim(0) != N * T || frames.dim(1) != cfg.token_dim())
        throw ShapeError("encode_contexts: frames " + shape_str(frames.shape()) +
                         " do not match " + std::to_string(N) + " frames x " + std::to_string(T) +
                         " tokens x " + std::to_string(cfg.token_dim()));

    // slot 0 = BOS; slot s>=1 = embed(x_s); slot s gets action a_{s+1}
    Tensor<S> x = model.bos;
    if (N > 1) {
        Tensor<S> hist = model.embed_tokens(slice(frames, 0, 0, (N - 1) * T));
        x = concat_seqdim(model.bos, hist);
    }
    Tensor<S> act = embedding_lookup(model.action_emb, actions);  // (N x hidden)
    x = add(x, repeat_rows(act, T));

    Mask causal = build_mask(N, T, MaskKind::frame_causal);
    std::vector<TokenPos> pos(static_cast<size_t>(N * T));
    std::vector<index_t> key_frames(static_cast<size_t>(N * T));
    for (index_t s = 0; s < N; ++s)
        for (index_t tok = 0; tok < T; ++tok) {
            pos[static_cast<size_t>(s * T + tok)] = model.token_pos(s, tok);
            key_frames[static_cast<size_t>(s * T + tok)] = s == 0 ? BOS_FRAME : s;
        }
    Tensor<S> cond = repeat_rows(model.timestep_cond(0.0), N * T);

    for (size_t l = 0; l < model.enc.size(); ++l) {
        if (!detail::layer_active(active, l, model.enc.size(), "encode_contexts")) continue;
        AttnCapture<S> cap;
        BlockContext<S> ctx;
        ctx.mask = &causal;
        ctx.positions = &pos;
        if (hooks && hooks->want_attention) ctx.capture = &cap;
        x = block_forward(model.enc[l], x, cond, ctx);
        detail::bump(model.counters, &InvocationCounters::encoder_block_passes, N);
        if (hooks && hooks->want_attention && hooks->on_attention)
            hooks->on_attention({static_cast<index_t>(l), 0, key_frames, key_frames}, cap);
        if (hooks && hooks->want_features && hooks->on_feature)
            for (index_t s = 0; s < N; ++s)
                hooks->on_feature(static_cast<index_t>(l), 0, s + 1, slice(x, 0, s * T, T));
    }
    detail::bump(model.counters, &InvocationCounters::encoder_invocations, 1);
    return layer_norm(x, detail::kContextNormEps);
}

template <class S>
CausalContext<S> context_of(const Tensor<S>& contexts, index_t frame_index,
                            index_t tokens_per_frame) {
    return {slice(contexts, 0, (frame_index - 1) * tokens_per_frame, tokens_per_frame),
            frame_index};
}

// One incremental encoder step during rollout. The first call (empty cache)
// takes no frame and consumes the BOS; call i appends frame x_{i-1} and
// returns c_i. Matches the teacher-forced pass on the same prefix.
template <class S>
CausalContext<S> encode_context_incremental(const SCDModel<S>& model, KVCache<S>& cache,
                                            const Tensor<S>& new_frame, index_t action,
                                            CaptureHooks<S>* hooks = nullptr) {
    const SCDConfig& cfg = model.cfg;
    const index_t T = cfg.tokens_per_frame();
    if (cache.num_layers() != cfg.enc_blocks || cache.tokens_per_frame() != T)
        throw ShapeError("encode_context_incremental: cache shaped for a different encoder");
    const index_t slot = cache.frames_cached();
    if (action < 0 || action >= cfg.action_vocab)
        throw ConfigError("encode_context_incremental: action out of range");

    Tensor<S> x;
    if (slot == 0) {
        if (new_frame.defined())
            throw ShapeError("encode_context_incremental: first call consumes only the BOS frame");
        x = model.bos;
    } else {
        if (!new_frame.defined() || new_frame.ndim() != 2 || new_frame.dim(0) != T ||
            new_frame.dim(1) != cfg.token_dim())
            throw ShapeError("encode_context_incremental: expected frame (" + std::to_string(T) +
                             " x " + std::to_string(cfg.token_dim()) + ")");
        x = model.embed_tokens(new_frame);
    }
    x = add(x, repeat_rows(embedding_lookup(model.action_emb, {action}), T));

    std::vector<TokenPos> pos(static_cast<size_t>(T));
    for (index_t tok = 0; tok < T; ++tok) pos[static_cast<size_t>(tok)] = model.token_pos(slot, tok);
    Tensor<S> cond = repeat_rows(model.timestep_cond(0.0), T);

    std::vector<index_t> qf(static_cast<size_t>(T), slot == 0 ? BOS_FRAME : slot);
    std::vector<index_t> kf;
    if (hooks && hooks->want_attention) {
        kf.resize(static_cast<size_t>((slot + 1) * T));
        for (index_t s = 0; s <= slot; ++s)
            for (index_t tok = 0; tok < T; ++tok)
                kf[static_cast<size_t>(s * T + tok)] = s == 0 ? BOS_FRAME : s;
    }

    for (size_t l = 0; l < model.enc.size(); ++l) {
        AttnCapture<S> cap;
        BlockContext<S> ctx;
        ctx.positions = &pos;
        ctx.cache = &cache;
        ctx.cache_layer = static_cast<index_t>(l);
        ctx.cache_append = true;
        if (hooks && hooks->want_attention) ctx.capture = &cap;
        x = block_forward(model.enc[l], x, cond, ctx);
        detail::bump(model.counters, &InvocationCounters::encoder_block_passes, 1);
        if (hooks && hooks->want_attention && hooks->on_attention)
            hooks->on_attention({static_cast<index_t>(l), 0, qf, kf}, cap);
        if (hooks && hooks->want_features && hooks->on_feature)
            hooks->on_feature(static_cast<index_t>(l), 0, slot + 1, x);
    }
    detail::bump(model.counters, &InvocationCounters::encoder_invocations, 1);
    return {layer_norm(x, detail::kContextNormEps), slot + 1};
}

namespace detail {

// Mask for the batched decoder layout [c_1..c_N | x_1..x_N]: token may attend
// another iff they belong to the same frame pair (c_i, x_i).
inline Mask paired_frame_mask(index_t n, index_t tokens_per_frame) {
    const index_t total = 2 * n * tokens_per_frame;
    Mask m;
    m.rows = m.cols = total;
    m.allowed.assign(static_cast<size_t>(total * total), 0);
    for (index_t q = 0; q < total; ++q) {
        const index_t qg = (q / tokens_per_frame) % n;
        for (index_t k = 0; k < total; ++k)
            if ((k / tokens_per_frame) % n == qg) m.at_mut(q, k) = 1;
    }
    return m;
}

}  // namespace detail

// Batched frame-wise decoding: every frame is denoised against its own
// context only; nothing crosses frames. x_t: (N*T x token_dim), contexts:
// (N*T x hidden) with frame_indices[i] the 1-based index of group i (used
// for rope only). Returns per-frame velocities (N*T x token_dim).
template <class S>
Tensor<S> decode_velocity_batch(const SCDModel<S>& model, const Tensor<S>& x_t,
                                const std::vector<double>& ts, const Tensor<S>& contexts,
                                const std::vector<index_t>& frame_indices,
                                CaptureHooks<S>* hooks = nullptr, index_t denoise_step = 0,
                                const std::vector<std::uint8_t>* active = nullptr) {
    const SCDConfig& cfg = model.cfg;
    const index_t T = cfg.tokens_per_frame();
    const index_t N = static_cast<index_t>(ts.size());
    if (N < 1) throw ConfigError("decode_velocity_batch: empty batch");
    if (static_cast<index_t>(frame_indices.size()) != N)
        throw ShapeError("decode_velocity_batch: frame index count mismatch");
    if (x_t.ndim() != 2 || x_t.dim(0) != N * T || x_t.dim(1) != cfg.token_dim())
        throw ShapeError("decode_velocity_batch: x_t " + shape_str(x_t.shape()) +
                         " does not match " + std::to_string(N) + " x " + std::to_string(T) +
                         " tokens");
    if (contexts.ndim() != 2 || contexts.dim(0) != N * T || contexts.dim(1) != cfg.hidden)
        throw ShapeError("decode_velocity_batch: contexts " + shape_str(contexts.shape()) +
                         " do not match frames");
    for (double t : ts)
        if (t < 0 || t > 1) throw Error("decode_velocity_batch: t outside [0,1]");

    Tensor<S> x_emb = model.embed_tokens(x_t);

    // per-token conditioning from each frame's own t
    Tensor<S> cond_frames;  // (N x hidden)
    for (index_t i = 0; i < N; ++i) {
        Tensor<S> ci = model.timestep_cond(ts[static_cast<size_t>(i)]);
        cond_frames = i == 0 ? ci : concat_seqdim(cond_frames, ci);
    }
    Tensor<S> cond_half = repeat_rows(cond_frames, T);  // (N*T x hidden)

    Tensor<S> x;
    Tensor<S> cond;
    std::vector<TokenPos> pos;
    const Mask* mask = nullptr;
    Mask mask_storage;
    if (cfg.interface_kind == DecoderInterface::frame_concat) {
        x = concat_seqdim(contexts, x_emb);  // [c_1..c_N | x_1..x_N]
        cond = concat_seqdim(cond_half, cond_half);
        mask_storage = detail::paired_frame_mask(N, T);
        mask = &mask_storage;
        pos.resize(static_cast<size_t>(2 * N * T));
        for (index_t i = 0; i < N; ++i) {
            const index_t fi = frame_indices[static_cast<size_t>(i)];
            const index_t cf = cfg.rope_mode == RoPEMode::temporal ? fi - 1 : fi;
            for (index_t tok = 0; tok < T; ++tok) {
                pos[static_cast<size_t>(i * T + tok)] = model.token_pos(cf, tok);
                pos[static_cast<size_t>((N + i) * T + tok)] = model.token_pos(fi, tok);
            }
        }
    } else {
        x = add(matmul(concat_lastdim(contexts, x_emb), model.proj_w), model.proj_b);
        cond = cond_half;
        if (N > 1) {
            mask_storage = build_mask(N, T, MaskKind::frame_diagonal);
            mask = &mask_storage;
        }
        pos.resize(static_cast<size_t>(N * T));
        for (index_t i = 0; i < N; ++i)
            for (index_t tok = 0; tok < T; ++tok)
                pos[static_cast<size_t>(i * T + tok)] =
                    model.token_pos(frame_indices[static_cast<size_t>(i)], tok);
    }

    std::vector<index_t> tok_frames(static_cast<size_t>(x.dim(0)));
    for (size_t r = 0; r < tok_frames.size(); ++r)
        tok_frames[r] = frame_indices[(r / static_cast<size_t>(T)) % static_cast<size_t>(N)];

    for (size_t l = 0; l < model.dec.size(); ++l) {
        if (!detail::layer_active(active, l, model.dec.size(), "decode_velocity")) continue;
        AttnCapture<S> cap;
        BlockContext<S> ctx;
        ctx.mask = mask;
        ctx.positions = &pos;
        if (hooks && hooks->want_attention) ctx.capture = &cap;
        x = block_forward(model.dec[l], x, cond, ctx);
        detail::bump(model.counters, &InvocationCounters::decoder_block_passes, N);
        // Captures use the unified depth index enc_blocks + l so encoder and
        // decoder layers never collide in one trace.
        const index_t depth_index = cfg.enc_blocks + static_cast<index_t>(l);
        if (hooks && hooks->want_attention && hooks->on_attention)
            hooks->on_attention({depth_index, denoise_step, tok_frames, tok_frames}, cap);
        if (hooks && hooks->want_features && hooks->on_feature) {
            const index_t base = cfg.interface_kind == DecoderInterface::frame_concat ? N * T : 0;
            for (index_t i = 0; i < N; ++i)
                hooks->on_feature(depth_index, denoise_step,
                                  frame_indices[static_cast<size_t>(i)],
                                  slice(x, 0, base + i * T, T));
        }
    }

    Tensor<S> x_rows = cfg.interface_kind == DecoderInterface::frame_concat
                           ? slice(x, 0, N * T, N * T)
                           : x;
    return add(matmul(x_rows, model.head_w), model.head_b);
}

// Single-frame decoding: the per-frame core of rollout.
template <class S>
Tensor<S> decode_velocity(const SCDModel<S>& model, const Tensor<S>& x_t, double t,
                          const CausalContext<S>& c, CaptureHooks<S>* hooks = nullptr,
                          index_t denoise_step = 0,
                          const std::vector<std::uint8_t>* active = nullptr) {
    if (c.tokens.ndim() != 2 || c.tokens.dim(0) != model.cfg.tokens_per_frame())
        throw ShapeError("decode_velocity: context token count mismatch");
    return decode_velocity_batch(model, x_t, {t}, c.tokens, {c.frame_index}, hooks,
                                 denoise_step, active);
}

}  // namespace scd
