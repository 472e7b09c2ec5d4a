#pragma once

#include <Eigen/Dense>

#include <memory>
#include <vector>

#include "scd/mask.hpp"
#include "scd/ops.hpp"
#include "scd/tensor.hpp"

// Masked multi-head scaled-dot-product attention as one fused differentiable
// op, plus the append-only per-layer KV cache used for frame-by-frame
// rollout. Queries/keys/values arrive already position-encoded.

namespace scd {

// Captured attention weights for the probe suite: row-major
// (heads x queries x keys), softmax-normalized, forbidden entries exactly 0.
template <class S>
struct AttnCapture {
    index_t heads = 0, tq = 0, tk = 0;
    std::vector<S> weights;

    S at(index_t h, index_t q, index_t k) const {
        return weights[static_cast<size_t>((h * tq + q) * tk + k)];
    }
};

namespace detail {

template <class S>
using StridedConstMap =
    Eigen::Map<const EigenMat<S>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <class S>
using StridedMap = Eigen::Map<EigenMat<S>, Eigen::Unaligned, Eigen::OuterStride<>>;

// column block of head h inside a (tokens x hidden) row-major buffer
template <class S>
StridedConstMap<S> head_block(const std::vector<S>& buf, index_t tokens, index_t hidden,
                              index_t hd, index_t h) {
    return StridedConstMap<S>(buf.data() + h * hd, tokens, hd, Eigen::OuterStride<>(hidden));
}
template <class S>
StridedMap<S> head_block_mut(std::vector<S>& buf, index_t tokens, index_t hidden, index_t hd,
                             index_t h) {
    return StridedMap<S>(buf.data() + h * hd, tokens, hd, Eigen::OuterStride<>(hidden));
}

}  // namespace detail

template <class S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, index_t heads,
                    const Mask* mask = nullptr, AttnCapture<S>* capture = nullptr) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
        throw ShapeError("attention: q/k/v must be 2-d");
    const index_t tq = q.dim(0), tk = k.dim(0), hidden = q.dim(1);
    if (k.dim(1) != hidden || v.dim(1) != hidden || v.dim(0) != tk)
        throw ShapeError("attention: shape mismatch q" + shape_str(q.shape()) + " k" +
                         shape_str(k.shape()) + " v" + shape_str(v.shape()));
    if (heads < 1 || hidden % heads != 0)
        throw ShapeError("attention: hidden " + std::to_string(hidden) +
                         " not divisible by heads " + std::to_string(heads));
    if (mask && (mask->rows != tq || mask->cols != tk))
        throw ShapeError("attention: mask is " + std::to_string(mask->rows) + "x" +
                         std::to_string(mask->cols) + " for " + std::to_string(tq) + " queries, " +
                         std::to_string(tk) + " keys");
    if (mask) {
        for (index_t r = 0; r < tq; ++r) {
            bool any = false;
            for (index_t c = 0; c < tk && !any; ++c) any = mask->at(r, c);
            if (!any)
                throw Error("attention: query row " + std::to_string(r) + " has no allowed keys");
        }
    }
    check_finite(q, "attention(q)");
    check_finite(k, "attention(k)");

    const index_t hd = hidden / heads;
    const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
    Tensor<S> out = Tensor<S>::zeros({tq, hidden});
    auto probs = std::make_shared<std::vector<EigenMat<S>>>();
    probs->reserve(static_cast<size_t>(heads));

    for (index_t h = 0; h < heads; ++h) {
        auto Qh = detail::head_block(q.data(), tq, hidden, hd, h);
        auto Kh = detail::head_block(k.data(), tk, hidden, hd, h);
        auto Vh = detail::head_block(v.data(), tk, hidden, hd, h);
        EigenMat<S> scores = (Qh * Kh.transpose()) * inv_sqrt;
        EigenMat<S> p(tq, tk);
        for (index_t r = 0; r < tq; ++r) {
            S mx = std::numeric_limits<S>::lowest();
            for (index_t c = 0; c < tk; ++c)
                if (!mask || mask->at(r, c)) mx = std::max(mx, scores(r, c));
            double sum = 0;
            for (index_t c = 0; c < tk; ++c) {
                if (!mask || mask->at(r, c)) {
                    p(r, c) = static_cast<S>(std::exp(static_cast<double>(scores(r, c) - mx)));
                    sum += static_cast<double>(p(r, c));
                } else {
                    p(r, c) = S(0);
                }
            }
            const double inv = 1.0 / sum;
            for (index_t c = 0; c < tk; ++c)
                p(r, c) = static_cast<S>(static_cast<double>(p(r, c)) * inv);
        }
        auto Oh = detail::head_block_mut(out.mutable_data(), tq, hidden, hd, h);
        Oh.noalias() = p * Vh;
        probs->push_back(std::move(p));
    }
    check_finite(out, "attention");

    if (capture) {
        capture->heads = heads;
        capture->tq = tq;
        capture->tk = tk;
        capture->weights.resize(static_cast<size_t>(heads * tq * tk));
        for (index_t h = 0; h < heads; ++h)
            for (index_t r = 0; r < tq; ++r)
                for (index_t c = 0; c < tk; ++c)
                    capture->weights[static_cast<size_t>((h * tq + r) * tk + c)] =
                        (*probs)[static_cast<size_t>(h)](r, c);
    }

    record_op<S>("attention", out, {q, k, v},
                 [q, k, v, probs, heads, hd, hidden, tq, tk, inv_sqrt](const TensorImpl<S>& o) {
                     for (index_t h = 0; h < heads; ++h) {
                         const EigenMat<S>& p = (*probs)[static_cast<size_t>(h)];
                         auto Qh = detail::head_block(q.data(), tq, hidden, hd, h);
                         auto Kh = detail::head_block(k.data(), tk, hidden, hd, h);
                         auto Vh = detail::head_block(v.data(), tk, hidden, hd, h);
                         auto Gh = detail::head_block(o.grad, tq, hidden, hd, h);
                         if (v.requires_grad()) {
                             auto dV = detail::head_block_mut(v.impl()->grad, tk, hidden, hd, h);
                             dV.noalias() += p.transpose() * Gh;
                         }
                         EigenMat<S> dP = Gh * Vh.transpose();  // (tq x tk)
                         Eigen::Matrix<S, Eigen::Dynamic, 1> rowdot =
                             dP.cwiseProduct(p).rowwise().sum();
                         EigenMat<S> dS = dP;
                         dS.colwise() -= rowdot;
                         dS = p.cwiseProduct(dS);
                         if (q.requires_grad()) {
                             auto dQ = detail::head_block_mut(q.impl()->grad, tq, hidden, hd, h);
                             dQ.noalias() += (dS * Kh) * inv_sqrt;
                         }
                         if (k.requires_grad()) {
                             auto dK = detail::head_block_mut(k.impl()->grad, tk, hidden, hd, h);
                             dK.noalias() += (dS.transpose() * Qh) * inv_sqrt;
                         }
                     }
                 });
    return out;
}

// Append-only KV cache: one (keys, values) list per layer, grown one frame at
// a time. Keys are stored position-encoded, so cached frames never need
// re-rotation. Stored tensors are detached copies.
template <class S>
class KVCache {
public:
    KVCache(index_t num_layers, index_t tokens_per_frame)
        : tokens_per_frame_(tokens_per_frame), layers_(static_cast<size_t>(num_layers)) {
        if (num_layers < 1 || tokens_per_frame < 1)
            throw ConfigError("KVCache: layers and tokens_per_frame must be positive");
    }

    index_t num_layers() const { return static_cast<index_t>(layers_.size()); }
    index_t tokens_per_frame() const { return tokens_per_frame_; }

    // frames fully appended across every layer
    index_t frames_cached() const {
        const index_t n = static_cast<index_t>(layers_[0].k_frames.size());
        for (const auto& l : layers_)
            if (static_cast<index_t>(l.k_frames.size()) != n)
                throw Error("KVCache: layers have unequal frame counts (partial append)");
        return n;
    }

    void append(index_t layer, const Tensor<S>& keys, const Tensor<S>& values) {
        auto& l = layer_at(layer);
        if (keys.ndim() != 2 || keys.dim(0) != tokens_per_frame_)
            throw ShapeError("KVCache::append: expected " + std::to_string(tokens_per_frame_) +
                             " key tokens, got " + shape_str(keys.shape()));
        if (values.shape() != keys.shape())
            throw ShapeError("KVCache::append: key/value shape mismatch");
        l.k_frames.push_back(keys.detach().clone());
        l.v_frames.push_back(values.detach().clone());
    }

    // concatenated (frames*tokens_per_frame x hidden); undefined when empty
    Tensor<S> keys(index_t layer) const { return concat(layer_at_c(layer).k_frames); }
    Tensor<S> values(index_t layer) const { return concat(layer_at_c(layer).v_frames); }

    index_t tokens_cached(index_t layer) const {
        return static_cast<index_t>(layer_at_c(layer).k_frames.size()) * tokens_per_frame_;
    }

private:
    struct Layer {
        std::vector<Tensor<S>> k_frames, v_frames;
    };

    Layer& layer_at(index_t i) {
        if (i < 0 || i >= num_layers()) throw ShapeError("KVCache: layer index out of range");
        return layers_[static_cast<size_t>(i)];
    }
    const Layer& layer_at_c(index_t i) const {
        if (i < 0 || i >= num_layers()) throw ShapeError("KVCache: layer index out of range");
        return layers_[static_cast<size_t>(i)];
    }

    static Tensor<S> concat(const std::vector<Tensor<S>>& frames) {
        if (frames.empty()) return Tensor<S>();
        NoGradGuard ng;
        Tensor<S> out = frames[0];
        for (size_t i = 1; i < frames.size(); ++i) out = concat_seqdim(out, frames[i]);
        return out;
    }

    index_t tokens_per_frame_;
    std::vector<Layer> layers_;
};

}  // namespace scd
