#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "scd/tensor.hpp"

// Multi-axis rotary position embedding. Each head's dims form head_dim/2
// two-dimensional rotation bands: the first half of the bands rotate by the
// frame (temporal) index, the rest split evenly between spatial row and
// column. Rotations are norm-preserving per band, so roped vectors keep
// their length exactly.

namespace scd {

enum class RoPEMode { temporal, identical };

struct RoPEConfig {
    RoPEMode mode = RoPEMode::temporal;
};

struct TokenPos {
    index_t frame = 0, row = 0, col = 0;
};

namespace detail {

struct RopeBands {
    index_t pairs_t, pairs_r, pairs_c;
};

inline RopeBands rope_bands(index_t head_dim) {
    if (head_dim % 8 != 0)
        throw ShapeError("rope: head_dim must be a multiple of 8, got " +
                         std::to_string(head_dim));
    const index_t pairs = head_dim / 2;
    return {pairs / 2, pairs / 4, pairs / 4};
}

// angle of band j within a band group of `n` pairs at integer coordinate pos
inline double rope_angle(index_t j, index_t n, index_t pos) {
    const double freq = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(n));
    return static_cast<double>(pos) * freq;
}

}  // namespace detail

// Rotates every head of x (tokens x hidden) according to per-token positions.
// Linear in x; backward applies the inverse (transpose) rotations.
template <class S>
Tensor<S> rope_apply(const Tensor<S>& x, const std::vector<TokenPos>& positions, index_t heads) {
    if (x.ndim() != 2) throw ShapeError("rope_apply: input must be 2-d");
    const index_t tokens = x.dim(0), hidden = x.dim(1);
    if (hidden % heads != 0) throw ShapeError("rope_apply: hidden not divisible by heads");
    if (static_cast<index_t>(positions.size()) != tokens)
        throw ShapeError("rope_apply: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(tokens) + " tokens");
    const index_t hd = hidden / heads;
    const auto bands = detail::rope_bands(hd);

    // precompute per-token (cos, sin) for every pair; shared with backward
    const index_t pairs = hd / 2;
    auto cs = std::make_shared<std::vector<double>>(static_cast<size_t>(tokens * pairs * 2));
    for (index_t tok = 0; tok < tokens; ++tok) {
        const TokenPos& p = positions[static_cast<size_t>(tok)];
        for (index_t j = 0; j < pairs; ++j) {
            double ang;
            if (j < bands.pairs_t)
                ang = detail::rope_angle(j, bands.pairs_t, p.frame);
            else if (j < bands.pairs_t + bands.pairs_r)
                ang = detail::rope_angle(j - bands.pairs_t, bands.pairs_r, p.row);
            else
                ang = detail::rope_angle(j - bands.pairs_t - bands.pairs_r, bands.pairs_c, p.col);
            (*cs)[static_cast<size_t>((tok * pairs + j) * 2)] = std::cos(ang);
            (*cs)[static_cast<size_t>((tok * pairs + j) * 2 + 1)] = std::sin(ang);
        }
    }

    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const auto& xv = x.data();
    auto& ov = out.mutable_data();
    for (index_t tok = 0; tok < tokens; ++tok)
        for (index_t h = 0; h < heads; ++h)
            for (index_t j = 0; j < pairs; ++j) {
                const double c = (*cs)[static_cast<size_t>((tok * pairs + j) * 2)];
                const double s = (*cs)[static_cast<size_t>((tok * pairs + j) * 2 + 1)];
                const size_t base = static_cast<size_t>(tok * hidden + h * hd + 2 * j);
                const double a = static_cast<double>(xv[base]);
                const double b = static_cast<double>(xv[base + 1]);
                ov[base] = static_cast<S>(a * c - b * s);
                ov[base + 1] = static_cast<S>(a * s + b * c);
            }
    check_finite(out, "rope_apply");
    record_op<S>("rope_apply", out, {x}, [x, cs, tokens, heads, hd, hidden, pairs](
                                             const TensorImpl<S>& o) {
        auto& dx = x.impl()->grad;
        for (index_t tok = 0; tok < tokens; ++tok)
            for (index_t h = 0; h < heads; ++h)
                for (index_t j = 0; j < pairs; ++j) {
                    const double c = (*cs)[static_cast<size_t>((tok * pairs + j) * 2)];
                    const double s = (*cs)[static_cast<size_t>((tok * pairs + j) * 2 + 1)];
                    const size_t base = static_cast<size_t>(tok * hidden + h * hd + 2 * j);
                    const double ga = static_cast<double>(o.grad[base]);
                    const double gb = static_cast<double>(o.grad[base + 1]);
                    // inverse rotation (angle negated)
                    dx[base] += static_cast<S>(ga * c + gb * s);
                    dx[base + 1] += static_cast<S>(-ga * s + gb * c);
                }
    });
    return out;
}

}  // namespace scd
