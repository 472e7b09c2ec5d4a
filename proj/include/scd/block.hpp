#pragma once

#include <string>
#include <utility>
#include <vector>

#include "scd/attention.hpp"
#include "scd/mask.hpp"
#include "scd/ops.hpp"
#include "scd/rope.hpp"

// DiT-style pre-norm transformer block with adaLN-Zero conditioning: the six
// modulation vectors (shift/scale/gate for attention and MLP) are regressed
// from the conditioning embedding by a zero-initialized linear layer, making
// every block the identity map at initialization.

namespace scd {

struct BlockConfig {
    index_t hidden = 0;
    index_t heads = 0;
    index_t mlp_ratio = 4;
    index_t cond_dim = 0;  // width of the conditioning embedding (defaults to hidden)

    void validate() const {
        if (hidden < 1 || heads < 1) throw ConfigError("block: hidden and heads must be positive");
        if (hidden % heads != 0)
            throw ConfigError("block: hidden " + std::to_string(hidden) +
                              " not divisible by heads " + std::to_string(heads));
        if (mlp_ratio < 1) throw ConfigError("block: mlp_ratio must be positive");
    }
};

// Sinusoidal embedding of a continuous t in [0,1]. The 200x scale maps the
// unit interval onto enough of the lowest-frequency period to resolve
// adjacent denoise steps.
template <class S>
Tensor<S> sinusoidal_embedding(double t, index_t dim) {
    if (dim < 2 || dim % 2 != 0) throw ShapeError("sinusoidal_embedding: dim must be even >= 2");
    if (t < 0 || t > 1) throw Error("sinusoidal_embedding: t outside [0,1]");
    const index_t half = dim / 2;
    Tensor<S> out = Tensor<S>::zeros({1, dim});
    auto& v = out.mutable_data();
    const double scaled = t * 200.0;
    for (index_t i = 0; i < half; ++i) {
        const double freq =
            half > 1 ? std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half - 1))
                     : 1.0;
        v[static_cast<size_t>(i)] = static_cast<S>(std::sin(scaled * freq));
        v[static_cast<size_t>(half + i)] = static_cast<S>(std::cos(scaled * freq));
    }
    return out;
}

template <class S>
struct DiTBlock {
    BlockConfig cfg;
    Tensor<S> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;  // attention projections
    Tensor<S> w_mod, b_mod;                            // cond -> 6*hidden, zero-init
    Tensor<S> w1, b1, w2, b2;                          // MLP

    static DiTBlock init(BlockConfig cfg, Rng& rng) {
        if (cfg.cond_dim == 0) cfg.cond_dim = cfg.hidden;
        cfg.validate();
        const index_t h = cfg.hidden, m = cfg.hidden * cfg.mlp_ratio;
        auto w = [&rng](index_t in, index_t out_dim) {
            Tensor<S> t =
                Tensor<S>::randn({in, out_dim}, rng, static_cast<S>(1.0 / std::sqrt(double(in))));
            t.set_requires_grad(true);
            return t;
        };
        auto z = [](Shape shape) {
            Tensor<S> t = Tensor<S>::zeros(std::move(shape));
            t.set_requires_grad(true);
            return t;
        };
        DiTBlock b;
        b.cfg = cfg;
        b.w_q = w(h, h); b.b_q = z({h});
        b.w_k = w(h, h); b.b_k = z({h});
        b.w_v = w(h, h); b.b_v = z({h});
        b.w_o = w(h, h); b.b_o = z({h});
        b.w_mod = z({cfg.cond_dim, 6 * h});  // adaLN-Zero
        b.b_mod = z({6 * h});
        b.w1 = w(h, m); b.b1 = z({m});
        b.w2 = w(m, h); b.b2 = z({h});
        return b;
    }

    void collect_params(const std::string& prefix,
                        std::vector<std::pair<std::string, Tensor<S>>>& out) {
        out.emplace_back(prefix + ".w_q", w_q); out.emplace_back(prefix + ".b_q", b_q);
        out.emplace_back(prefix + ".w_k", w_k); out.emplace_back(prefix + ".b_k", b_k);
        out.emplace_back(prefix + ".w_v", w_v); out.emplace_back(prefix + ".b_v", b_v);
        out.emplace_back(prefix + ".w_o", w_o); out.emplace_back(prefix + ".b_o", b_o);
        out.emplace_back(prefix + ".w_mod", w_mod); out.emplace_back(prefix + ".b_mod", b_mod);
        out.emplace_back(prefix + ".w1", w1); out.emplace_back(prefix + ".b1", b1);
        out.emplace_back(prefix + ".w2", w2); out.emplace_back(prefix + ".b2", b2);
    }
};

// Optional plumbing for one block call.
template <class S>
struct BlockContext {
    const Mask* mask = nullptr;                        // self-attention mask (or all-allowed)
    const std::vector<TokenPos>* positions = nullptr;  // rope positions of current tokens
    KVCache<S>* cache = nullptr;                       // prefix K/V to attend over
    index_t cache_layer = -1;
    bool cache_read = true;     // attend over the cached prefix (frame-diagonal layers don't)
    bool cache_append = false;  // append this call's K/V after computing them
    AttnCapture<S>* capture = nullptr;
};

// x: (tokens x hidden); cond_tokens: per-token conditioning (tokens x cond_dim).
template <class S>
Tensor<S> block_forward(const DiTBlock<S>& blk, const Tensor<S>& x, const Tensor<S>& cond_tokens,
                        const BlockContext<S>& ctx = {}) {
    const index_t h = blk.cfg.hidden;
    if (x.ndim() != 2 || x.dim(1) != h)
        throw ShapeError("block_forward: input " + shape_str(x.shape()) + " does not match hidden " +
                         std::to_string(h));
    if (cond_tokens.ndim() != 2 || cond_tokens.dim(0) != x.dim(0) ||
        cond_tokens.dim(1) != blk.cfg.cond_dim)
        throw ShapeError("block_forward: conditioning " + shape_str(cond_tokens.shape()) +
                         " does not match tokens " + std::to_string(x.dim(0)) + " x cond_dim " +
                         std::to_string(blk.cfg.cond_dim));

    Tensor<S> mod = add(matmul(cond_tokens, blk.w_mod), blk.b_mod);
    Tensor<S> sa_shift = slice(mod, 1, 0 * h, h);
    Tensor<S> sa_scale = slice(mod, 1, 1 * h, h);
    Tensor<S> sa_gate = slice(mod, 1, 2 * h, h);
    Tensor<S> ml_shift = slice(mod, 1, 3 * h, h);
    Tensor<S> ml_scale = slice(mod, 1, 4 * h, h);
    Tensor<S> ml_gate = slice(mod, 1, 5 * h, h);
    auto modulate = [](const Tensor<S>& xn, const Tensor<S>& shift, const Tensor<S>& sc) {
        return add(add(mul(xn, sc), xn), shift);  // xn * (1 + scale) + shift
    };

    Tensor<S> xn = modulate(layer_norm(x), sa_shift, sa_scale);
    Tensor<S> qc = add(matmul(xn, blk.w_q), blk.b_q);
    Tensor<S> kc = add(matmul(xn, blk.w_k), blk.b_k);
    Tensor<S> vc = add(matmul(xn, blk.w_v), blk.b_v);
    if (ctx.positions) {
        qc = rope_apply(qc, *ctx.positions, blk.cfg.heads);
        kc = rope_apply(kc, *ctx.positions, blk.cfg.heads);
    }

    Tensor<S> k_all = kc, v_all = vc;
    if (ctx.cache) {
        if (ctx.cache->tokens_per_frame() != x.dim(0))
            throw ShapeError("block_forward: cache expects " +
                             std::to_string(ctx.cache->tokens_per_frame()) +
                             " tokens per frame, got " + std::to_string(x.dim(0)));
        if (ctx.cache_read && ctx.cache->tokens_cached(ctx.cache_layer) > 0) {
            k_all = concat_seqdim(ctx.cache->keys(ctx.cache_layer), kc);
            v_all = concat_seqdim(ctx.cache->values(ctx.cache_layer), vc);
        }
        if (ctx.cache_append) ctx.cache->append(ctx.cache_layer, kc, vc);
    }

    Tensor<S> attn = attention(qc, k_all, v_all, blk.cfg.heads, ctx.mask, ctx.capture);
    Tensor<S> proj = add(matmul(attn, blk.w_o), blk.b_o);
    Tensor<S> x1 = add(x, mul(proj, sa_gate));

    Tensor<S> x1m = modulate(layer_norm(x1), ml_shift, ml_scale);
    Tensor<S> mlp = add(matmul(gelu(add(matmul(x1m, blk.w1), blk.b1)), blk.w2), blk.b2);
    return add(x1, mul(mlp, ml_gate));
}

}  // namespace scd
