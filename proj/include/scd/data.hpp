#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "scd/ops.hpp"
#include "scd/rng.hpp"
#include "scd/tensor.hpp"

// Synthetic action-conditioned video: square sprites drifting with constant
// velocity, reflecting off the walls, and steered by per-frame velocity
// nudges. The future is a deterministic function of (state, actions), so
// conditional prediction is learnable and causality is observable.

namespace scd {

struct DataConfig {
    index_t height = 32, width = 32, channels = 1;
    index_t num_frames = 16;
    index_t num_sprites = 2;
    double sprite_size = 5.0;  // square side in pixels; integer values keep
                               // the rendered centroid exactly at the sprite
                               // center (the sub-pixel sawtooth integrates
                               // to zero over integer lengths)
    double max_speed = 1.5;    // initial velocity components ~ U(-max, max)
    double action_step = 1.0;  // velocity nudge applied by one action
    index_t action_vocab = 4;  // +x, -x, +y, -y

    void validate() const {
        if (height < 1 || width < 1 || channels < 1)
            throw ConfigError("data: frame dims must be positive");
        if (num_frames < 1) throw ConfigError("data: num_frames must be >= 1");
        if (num_sprites < 1) throw ConfigError("data: num_sprites must be >= 1");
        if (sprite_size <= 0 || sprite_size > double(std::min(height, width)))
            throw ConfigError("data: sprite_size must lie in (0, min(H, W)]");
        if (max_speed < 0 || action_step < 0)
            throw ConfigError("data: speeds must be non-negative");
        if (action_vocab < 1 || action_vocab > 4)
            throw ConfigError("data: action_vocab must lie in [1, 4]");
    }
};

struct SyntheticSample {
    index_t height = 0, width = 0, channels = 0, num_frames = 0;
    std::vector<float> frames;     // num_frames * H * W * C, pixel range [0,1]
    std::vector<index_t> actions;  // length num_frames; actions[0] labels the
                                   // initial frame and moves nothing
    std::uint64_t seed = 0;
};

namespace detail {

struct Sprite {
    double x, y, vx, vy, intensity;
};

// length of [lo, lo+1) ∩ [a, b]
inline double pixel_overlap(double lo, double a, double b) {
    return std::max(0.0, std::min(b, lo + 1.0) - std::max(a, lo));
}

inline void reflect(double& p, double& v, double lo, double hi) {
    if (hi <= lo) {  // sprite fills the axis; pin it
        p = lo;
        v = 0;
        return;
    }
    while (p < lo || p > hi) {
        if (p < lo) {
            p = 2 * lo - p;
            v = -v;
        } else {
            p = 2 * hi - p;
            v = -v;
        }
    }
}

inline void render_frame(const DataConfig& cfg, const std::vector<Sprite>& sprites,
                         float* out) {
    const index_t H = cfg.height, W = cfg.width, C = cfg.channels;
    std::fill(out, out + H * W * C, 0.0f);
    for (const Sprite& s : sprites) {
        const double half = cfg.sprite_size / 2;
        const double x0 = s.x - half, x1 = s.x + half;
        const double y0 = s.y - half, y1 = s.y + half;
        const index_t r_lo = std::max<index_t>(0, static_cast<index_t>(std::floor(y0)));
        const index_t r_hi = std::min<index_t>(H, static_cast<index_t>(std::ceil(y1)));
        const index_t c_lo = std::max<index_t>(0, static_cast<index_t>(std::floor(x0)));
        const index_t c_hi = std::min<index_t>(W, static_cast<index_t>(std::ceil(x1)));
        for (index_t r = r_lo; r < r_hi; ++r) {
            const double wy = pixel_overlap(double(r), y0, y1);
            for (index_t c = c_lo; c < c_hi; ++c) {
                const double v = s.intensity * wy * pixel_overlap(double(c), x0, x1);
                for (index_t ch = 0; ch < C; ++ch) {
                    float& px = out[(r * W + c) * C + ch];
                    px = std::max(px, static_cast<float>(v));
                }
            }
        }
    }
}

}  // namespace detail

// One sequence from a seed. actions[k] (k >= 1) nudges the shared velocity
// before frame k is rendered, so the action taken while observing frame k-1
// shows up in frame k. Pass `fixed_actions` to override the sampled ones
// (sprites are drawn from the rng first, so the override does not disturb
// the initial state).
inline SyntheticSample gen_sequence(const DataConfig& cfg, std::uint64_t seed,
                                    const std::vector<index_t>* fixed_actions = nullptr) {
    cfg.validate();
    Rng rng(mix64(seed, stream::dataset));

    const double margin = cfg.sprite_size / 2;
    const double x_hi = double(cfg.width) - margin, y_hi = double(cfg.height) - margin;
    std::vector<detail::Sprite> sprites;
    for (index_t i = 0; i < cfg.num_sprites; ++i) {
        detail::Sprite s;
        s.x = margin + rng.uniform() * std::max(0.0, x_hi - margin);
        s.y = margin + rng.uniform() * std::max(0.0, y_hi - margin);
        s.vx = (2 * rng.uniform() - 1) * cfg.max_speed;
        s.vy = (2 * rng.uniform() - 1) * cfg.max_speed;
        s.intensity =
            cfg.num_sprites == 1 ? 1.0 : 1.0 - 0.4 * double(i) / double(cfg.num_sprites - 1);
        sprites.push_back(s);
    }

    SyntheticSample out;
    out.height = cfg.height;
    out.width = cfg.width;
    out.channels = cfg.channels;
    out.num_frames = cfg.num_frames;
    out.seed = seed;
    if (fixed_actions) {
        if (static_cast<index_t>(fixed_actions->size()) != cfg.num_frames)
            throw ShapeError("gen_sequence: fixed action count does not match num_frames");
        for (index_t a : *fixed_actions)
            if (a < 0 || a >= cfg.action_vocab)
                throw ConfigError("gen_sequence: action outside the alphabet");
        out.actions = *fixed_actions;
    } else {
        out.actions.resize(static_cast<size_t>(cfg.num_frames));
        out.actions[0] = 0;
        for (index_t k = 1; k < cfg.num_frames; ++k)
            out.actions[static_cast<size_t>(k)] =
                static_cast<index_t>(rng.uniform_int(static_cast<std::uint64_t>(cfg.action_vocab)));
    }

    const index_t frame_elems = cfg.height * cfg.width * cfg.channels;
    out.frames.resize(static_cast<size_t>(cfg.num_frames * frame_elems));
    detail::render_frame(cfg, sprites, out.frames.data());
    for (index_t k = 1; k < cfg.num_frames; ++k) {
        const index_t a = out.actions[static_cast<size_t>(k)];
        const double dvx = a == 0 ? cfg.action_step : (a == 1 ? -cfg.action_step : 0.0);
        const double dvy = a == 2 ? cfg.action_step : (a == 3 ? -cfg.action_step : 0.0);
        for (detail::Sprite& s : sprites) {
            s.vx += dvx;
            s.vy += dvy;
            s.x += s.vx;
            s.y += s.vy;
            detail::reflect(s.x, s.vx, margin, x_hi);
            detail::reflect(s.y, s.vy, margin, y_hi);
        }
        detail::render_frame(cfg, sprites, out.frames.data() + k * frame_elems);
    }
    return out;
}

inline std::vector<SyntheticSample> gen_dataset(const DataConfig& cfg, index_t num_sequences,
                                                std::uint64_t seed) {
    if (num_sequences < 1) throw ConfigError("gen_dataset: num_sequences must be >= 1");
    std::vector<SyntheticSample> out;
    out.reserve(static_cast<size_t>(num_sequences));
    for (index_t k = 0; k < num_sequences; ++k)
        out.push_back(gen_sequence(cfg, mix64(seed, stream::dataset, static_cast<std::uint64_t>(k))));
    return out;
}

// Intensity-weighted centroid (x, y) of channel 0 in pixel-center
// coordinates; the oracle for action responsiveness.
inline std::pair<double, double> frame_centroid(const SyntheticSample& s, index_t frame) {
    if (frame < 0 || frame >= s.num_frames) throw ShapeError("frame_centroid: frame out of range");
    const index_t H = s.height, W = s.width, C = s.channels;
    const float* f = s.frames.data() + frame * H * W * C;
    double mass = 0, mx = 0, my = 0;
    for (index_t r = 0; r < H; ++r)
        for (index_t c = 0; c < W; ++c) {
            const double v = f[(r * W + c) * C];
            mass += v;
            mx += v * (double(c) + 0.5);
            my += v * (double(r) + 0.5);
        }
    if (mass == 0) throw Error("frame_centroid: empty frame");
    return {mx / mass, my / mass};
}

// ---------------------------------------------------------------------------
// patch tokenizer
// ---------------------------------------------------------------------------

struct TokenizerConfig {
    index_t patch_size = 4;
    std::vector<double> channel_shift{0.5};  // token value -> (v - shift) * scale
    std::vector<double> channel_scale{2.0};  // powers of two keep f32 rollout exact

    void validate(index_t height, index_t width, index_t channels) const {
        if (patch_size < 1) throw ConfigError("data.patch_size must be >= 1");
        if (height % patch_size != 0 || width % patch_size != 0)
            throw ConfigError("frame " + std::to_string(height) + "x" + std::to_string(width) +
                              " is not divisible by data.patch_size " +
                              std::to_string(patch_size));
        if (static_cast<index_t>(channel_shift.size()) != channels ||
            static_cast<index_t>(channel_scale.size()) != channels)
            throw ConfigError("tokenizer: normalization stats must list one entry per channel");
    }
};

// (H x W x C) frame -> ((H/p)*(W/p) x p*p*C) tokens; each token is one p x p
// tile, row-major, channels fastest. Pure layout: no arithmetic, so the
// round trip is bitwise.
template <class S>
Tensor<S> patchify(const Tensor<S>& frame, index_t p) {
    if (frame.ndim() != 3) throw ShapeError("patchify: expected (H x W x C)");
    const index_t H = frame.dim(0), W = frame.dim(1), C = frame.dim(2);
    if (p < 1 || H % p != 0 || W % p != 0)
        throw ShapeError("patchify: " + std::to_string(H) + "x" + std::to_string(W) +
                         " not divisible by patch size " + std::to_string(p));
    const index_t gh = H / p, gw = W / p, td = p * p * C;
    Tensor<S> out = Tensor<S>::zeros({gh * gw, td});
    auto& ov = out.mutable_data();
    const auto& fv = frame.data();
    for (index_t r = 0; r < H; ++r)
        for (index_t c = 0; c < W; ++c) {
            const index_t token = (r / p) * gw + (c / p);
            const index_t inner = ((r % p) * p + (c % p)) * C;
            for (index_t ch = 0; ch < C; ++ch)
                ov[static_cast<size_t>(token * td + inner + ch)] =
                    fv[static_cast<size_t>((r * W + c) * C + ch)];
        }
    return out;
}

template <class S>
Tensor<S> unpatchify(const Tensor<S>& tokens, index_t height, index_t width, index_t channels,
                     index_t p) {
    const index_t gh = height / p, gw = width / p, td = p * p * channels;
    if (p < 1 || height % p != 0 || width % p != 0)
        throw ShapeError("unpatchify: dims not divisible by patch size");
    if (tokens.ndim() != 2 || tokens.dim(0) != gh * gw || tokens.dim(1) != td)
        throw ShapeError("unpatchify: tokens " + shape_str(tokens.shape()) + " do not match " +
                         std::to_string(gh * gw) + " x " + std::to_string(td));
    Tensor<S> out = Tensor<S>::zeros({height, width, channels});
    auto& ov = out.mutable_data();
    const auto& tv = tokens.data();
    for (index_t r = 0; r < height; ++r)
        for (index_t c = 0; c < width; ++c) {
            const index_t token = (r / p) * gw + (c / p);
            const index_t inner = ((r % p) * p + (c % p)) * channels;
            for (index_t ch = 0; ch < channels; ++ch)
                ov[static_cast<size_t>((r * width + c) * channels + ch)] =
                    tv[static_cast<size_t>(token * td + inner + ch)];
        }
    return out;
}

// One frame of a sample as an (H x W x C) tensor.
template <class S>
Tensor<S> frame_tensor(const SyntheticSample& s, index_t frame) {
    if (frame < 0 || frame >= s.num_frames) throw ShapeError("frame_tensor: frame out of range");
    const index_t n = s.height * s.width * s.channels;
    std::vector<S> buf(static_cast<size_t>(n));
    const float* f = s.frames.data() + frame * n;
    for (index_t e = 0; e < n; ++e) buf[static_cast<size_t>(e)] = static_cast<S>(f[e]);
    return Tensor<S>::from_data({s.height, s.width, s.channels}, buf);
}

// All frames patchified and stacked: (num_frames * tokens_per_frame x p*p*C).
template <class S>
Tensor<S> sample_tokens(const SyntheticSample& s, index_t p) {
    Tensor<S> out;
    for (index_t k = 0; k < s.num_frames; ++k) {
        Tensor<S> t = patchify(frame_tensor<S>(s, k), p);
        out = k == 0 ? t : concat_seqdim(out, t);
    }
    return out;
}

// (v - shift) * scale per channel, and its inverse. Channel of token element
// e is e % C (channels fastest in the token layout).
template <class S>
Tensor<S> normalize_tokens(const TokenizerConfig& tok, const Tensor<S>& tokens, index_t channels) {
    if (static_cast<index_t>(tok.channel_shift.size()) != channels)
        throw ConfigError("normalize_tokens: stats do not cover the channels");
    Tensor<S> out = tokens.clone();
    auto& v = out.mutable_data();
    for (size_t e = 0; e < v.size(); ++e) {
        const size_t ch = e % static_cast<size_t>(channels);
        v[e] = static_cast<S>((double(v[e]) - tok.channel_shift[ch]) * tok.channel_scale[ch]);
    }
    return out;
}

template <class S>
Tensor<S> denormalize_tokens(const TokenizerConfig& tok, const Tensor<S>& tokens,
                             index_t channels) {
    if (static_cast<index_t>(tok.channel_shift.size()) != channels)
        throw ConfigError("denormalize_tokens: stats do not cover the channels");
    Tensor<S> out = tokens.clone();
    auto& v = out.mutable_data();
    for (size_t e = 0; e < v.size(); ++e) {
        const size_t ch = e % static_cast<size_t>(channels);
        v[e] = static_cast<S>(double(v[e]) / tok.channel_scale[ch] + tok.channel_shift[ch]);
    }
    return out;
}

}  // namespace scd
