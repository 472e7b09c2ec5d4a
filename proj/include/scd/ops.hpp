#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "scd/tensor.hpp"

// Dense op kernels with hand-written backwards. Forward kernels are plain
// loops or Eigen GEMMs with fixed iteration order, so results are
// bit-reproducible run to run on one platform.

namespace scd {

template <class S>
using EigenMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<EigenMat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const EigenMat<S>>;

namespace detail {

// Collapses an n-d shape to (rows, cols) with cols = last extent.
inline void row_view(const Shape& s, index_t& rows, index_t& cols) {
    if (s.empty()) {
        rows = 1;
        cols = 1;
        return;
    }
    cols = s.back();
    rows = 1;
    for (size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
}

template <class S>
void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: (n x k) @ (k x m) -> (n x m)
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const index_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    Tensor<S> out = Tensor<S>::zeros({n, m});
    ConstMatMap<S> A(a.data().data(), n, k), B(b.data().data(), k, m);
    MatMap<S> C(out.mutable_data().data(), n, m);
    C.noalias() = A * B;
    check_finite(out, "matmul");
    record_op<S>("matmul", out, {a, b}, [a, b, n, k, m](const TensorImpl<S>& o) {
        ConstMatMap<S> G(o.grad.data(), n, m);
        ConstMatMap<S> A2(a.data().data(), n, k), B2(b.data().data(), k, m);
        if (a.requires_grad()) {
            MatMap<S> dA(a.impl()->grad.data(), n, k);
            dA.noalias() += G * B2.transpose();
        }
        if (b.requires_grad()) {
            MatMap<S> dB(b.impl()->grad.data(), k, m);
            dB.noalias() += A2.transpose() * G;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// add: same shape, or b broadcast as a row vector over the last dim
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    const bool row_bcast = (b.ndim() == 1 && a.ndim() >= 1 && a.shape().back() == b.dim(0) &&
                            a.shape() != b.shape());
    if (!row_bcast) detail::check_same_shape("add", a, b);
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.mutable_data();
    if (row_bcast) {
        const size_t cols = static_cast<size_t>(b.dim(0));
        for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i % cols];
    } else {
        for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i];
    }
    check_finite(out, "add");
    record_op<S>("add", out, {a, b}, [a, b, row_bcast](const TensorImpl<S>& o) {
        if (a.requires_grad()) {
            auto& da = a.impl()->grad;
            for (size_t i = 0; i < da.size(); ++i) da[i] += o.grad[i];
        }
        if (b.requires_grad()) {
            auto& db = b.impl()->grad;
            if (row_bcast) {
                const size_t cols = db.size();
                for (size_t i = 0; i < o.grad.size(); ++i) db[i % cols] += o.grad[i];
            } else {
                for (size_t i = 0; i < db.size(); ++i) db[i] += o.grad[i];
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// mul: elementwise product (same shape)
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape("mul", a, b);
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.mutable_data();
    for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * bv[i];
    check_finite(out, "mul");
    record_op<S>("mul", out, {a, b}, [a, b](const TensorImpl<S>& o) {
        if (a.requires_grad()) {
            auto& da = a.impl()->grad;
            const auto& bv2 = b.data();
            for (size_t i = 0; i < da.size(); ++i) da[i] += o.grad[i] * bv2[i];
        }
        if (b.requires_grad()) {
            auto& db = b.impl()->grad;
            const auto& av2 = a.data();
            for (size_t i = 0; i < db.size(); ++i) db[i] += o.grad[i] * av2[i];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// scale: multiply by a compile-time-known constant
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.mutable_data();
    for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * c;
    check_finite(out, "scale");
    record_op<S>("scale", out, {a}, [a, c](const TensorImpl<S>& o) {
        auto& da = a.impl()->grad;
        for (size_t i = 0; i < da.size(); ++i) da[i] += o.grad[i] * c;
    });
    return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    return add(a, scale(b, S(-1)));
}

// ---------------------------------------------------------------------------
// gelu: exact 0.5 x (1 + erf(x / sqrt(2)))
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.mutable_data();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (size_t i = 0; i < av.size(); ++i) {
        const double x = static_cast<double>(av[i]);
        ov[i] = static_cast<S>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
    }
    check_finite(out, "gelu");
    record_op<S>("gelu", out, {a}, [a](const TensorImpl<S>& o) {
        auto& da = a.impl()->grad;
        const auto& av2 = a.data();
        constexpr double inv_sqrt2b = 0.70710678118654752440;
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        for (size_t i = 0; i < da.size(); ++i) {
            const double x = static_cast<double>(av2[i]);
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2b));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            da[i] += o.grad[i] * static_cast<S>(cdf + x * pdf);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// layer_norm over the last dim, no affine parameters
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> layer_norm(const Tensor<S>& a, double eps = 1e-5) {
    index_t rows, cols;
    detail::row_view(a.shape(), rows, cols);
    if (cols < 1) throw ShapeError("layer_norm: empty last dim");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.mutable_data();
    // saved per-row statistics for backward
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (index_t r = 0; r < rows; ++r) {
        const S* x = av.data() + r * cols;
        double mu = 0;
        for (index_t c = 0; c < cols; ++c) mu += static_cast<double>(x[c]);
        mu /= static_cast<double>(cols);
        double var = 0;
        for (index_t c = 0; c < cols; ++c) {
            const double d = static_cast<double>(x[c]) - mu;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(r)] = is;
        S* y = ov.data() + r * cols;
        for (index_t c = 0; c < cols; ++c)
            y[c] = static_cast<S>((static_cast<double>(x[c]) - mu) * is);
    }
    check_finite(out, "layer_norm");
    record_op<S>("layer_norm", out, {a}, [a, rows, cols, inv_std](const TensorImpl<S>& o) {
        auto& da = a.impl()->grad;
        for (index_t r = 0; r < rows; ++r) {
            const S* y = o.data.data() + r * cols;
            const S* g = o.grad.data() + r * cols;
            S* dx = da.data() + r * cols;
            double gmean = 0, gymean = 0;
            for (index_t c = 0; c < cols; ++c) {
                gmean += static_cast<double>(g[c]);
                gymean += static_cast<double>(g[c]) * static_cast<double>(y[c]);
            }
            gmean /= static_cast<double>(cols);
            gymean /= static_cast<double>(cols);
            const double is = (*inv_std)[static_cast<size_t>(r)];
            for (index_t c = 0; c < cols; ++c)
                dx[c] += static_cast<S>(is * (static_cast<double>(g[c]) - gmean -
                                              static_cast<double>(y[c]) * gymean));
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// softmax over the last dim, max-subtracted
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> softmax_lastdim(const Tensor<S>& a) {
    index_t rows, cols;
    detail::row_view(a.shape(), rows, cols);
    check_finite(a, "softmax_lastdim(input)");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.mutable_data();
    for (index_t r = 0; r < rows; ++r) {
        const S* x = av.data() + r * cols;
        S* y = ov.data() + r * cols;
        S mx = x[0];
        for (index_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
        double sum = 0;
        for (index_t c = 0; c < cols; ++c) {
            y[c] = static_cast<S>(std::exp(static_cast<double>(x[c] - mx)));
            sum += static_cast<double>(y[c]);
        }
        const double inv = 1.0 / sum;
        for (index_t c = 0; c < cols; ++c) y[c] = static_cast<S>(static_cast<double>(y[c]) * inv);
    }
    check_finite(out, "softmax_lastdim");
    record_op<S>("softmax_lastdim", out, {a}, [a, rows, cols](const TensorImpl<S>& o) {
        auto& da = a.impl()->grad;
        for (index_t r = 0; r < rows; ++r) {
            const S* p = o.data.data() + r * cols;
            const S* g = o.grad.data() + r * cols;
            S* dx = da.data() + r * cols;
            double dot = 0;
            for (index_t c = 0; c < cols; ++c) dot += static_cast<double>(p[c]) * static_cast<double>(g[c]);
            for (index_t c = 0; c < cols; ++c)
                dx[c] += static_cast<S>(static_cast<double>(p[c]) *
                                        (static_cast<double>(g[c]) - dot));
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// reshape (copies; backward reshapes the gradient back)
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
    if (numel_of(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    Tensor<S> out = Tensor<S>::from_data(std::move(shape), a.data());
    record_op<S>("reshape", out, {a}, [a](const TensorImpl<S>& o) {
        auto& da = a.impl()->grad;
        for (size_t i = 0; i < da.size(); ++i) da[i] += o.grad[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// permute axes
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> permute(const Tensor<S>& a, const std::vector<size_t>& perm) {
    const size_t nd = a.ndim();
    if (perm.size() != nd) throw ShapeError("permute: rank mismatch");
    std::vector<bool> used(nd, false);
    Shape new_shape(nd);
    for (size_t i = 0; i < nd; ++i) {
        if (perm[i] >= nd || used[perm[i]]) throw ShapeError("permute: invalid permutation");
        used[perm[i]] = true;
        new_shape[i] = a.dim(perm[i]);
    }
    std::vector<index_t> in_strides(nd, 1), out_strides(nd, 1);
    for (size_t i = nd; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.dim(i);
    for (size_t i = nd; i-- > 1;) out_strides[i - 1] = out_strides[i] * new_shape[i];
    Tensor<S> out = Tensor<S>::zeros(new_shape);
    const auto& av = a.data();
    auto& ov = out.mutable_data();
    const index_t n = a.numel();
    auto src_index = std::make_shared<std::vector<index_t>>(static_cast<size_t>(n));
    std::vector<index_t> idx(nd, 0);
    for (index_t flat = 0; flat < n; ++flat) {
        index_t src = 0;
        for (size_t i = 0; i < nd; ++i) src += idx[i] * in_strides[perm[i]];
        ov[static_cast<size_t>(flat)] = av[static_cast<size_t>(src)];
        (*src_index)[static_cast<size_t>(flat)] = src;
        for (size_t i = nd; i-- > 0;) {
            if (++idx[i] < new_shape[i]) break;
            idx[i] = 0;
        }
    }
    record_op<S>("permute", out, {a}, [a, src_index](const TensorImpl<S>& o) {
        auto& da = a.impl()->grad;
        for (size_t i = 0; i < o.grad.size(); ++i)
            da[static_cast<size_t>((*src_index)[i])] += o.grad[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// concat along the last dim (ranks and leading extents must agree)
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> concat_lastdim(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.ndim() != b.ndim() || a.ndim() == 0)
        throw ShapeError("concat_lastdim: rank mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    for (size_t i = 0; i + 1 < a.ndim(); ++i)
        if (a.dim(i) != b.dim(i))
            throw ShapeError("concat_lastdim: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    Shape shape = a.shape();
    const index_t ca = a.shape().back(), cb = b.shape().back();
    shape.back() = ca + cb;
    index_t rows, cols_a;
    detail::row_view(a.shape(), rows, cols_a);
    Tensor<S> out = Tensor<S>::zeros(shape);
    auto& ov = out.mutable_data();
    const auto& av = a.data();
    const auto& bv = b.data();
    for (index_t r = 0; r < rows; ++r) {
        std::memcpy(ov.data() + r * (ca + cb), av.data() + r * ca, sizeof(S) * ca);
        std::memcpy(ov.data() + r * (ca + cb) + ca, bv.data() + r * cb, sizeof(S) * cb);
    }
    record_op<S>("concat_lastdim", out, {a, b}, [a, b, rows, ca, cb](const TensorImpl<S>& o) {
        for (index_t r = 0; r < rows; ++r) {
            const S* g = o.grad.data() + r * (ca + cb);
            if (a.requires_grad()) {
                S* da = a.impl()->grad.data() + r * ca;
                for (index_t c = 0; c < ca; ++c) da[c] += g[c];
            }
            if (b.requires_grad()) {
                S* db = b.impl()->grad.data() + r * cb;
                for (index_t c = 0; c < cb; ++c) db[c] += g[ca + c];
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// concat along the first (sequence) dim
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> concat_seqdim(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.ndim() != b.ndim() || a.ndim() == 0)
        throw ShapeError("concat_seqdim: rank mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    for (size_t i = 1; i < a.ndim(); ++i)
        if (a.dim(i) != b.dim(i))
            throw ShapeError("concat_seqdim: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    Shape shape = a.shape();
    shape[0] = a.dim(0) + b.dim(0);
    Tensor<S> out = Tensor<S>::zeros(shape);
    auto& ov = out.mutable_data();
    std::memcpy(ov.data(), a.data().data(), sizeof(S) * a.data().size());
    std::memcpy(ov.data() + a.data().size(), b.data().data(), sizeof(S) * b.data().size());
    const size_t na = a.data().size();
    record_op<S>("concat_seqdim", out, {a, b}, [a, b, na](const TensorImpl<S>& o) {
        if (a.requires_grad()) {
            auto& da = a.impl()->grad;
            for (size_t i = 0; i < da.size(); ++i) da[i] += o.grad[i];
        }
        if (b.requires_grad()) {
            auto& db = b.impl()->grad;
            for (size_t i = 0; i < db.size(); ++i) db[i] += o.grad[na + i];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// slice along an axis: [start, start+len)
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> slice(const Tensor<S>& a, size_t axis, index_t start, index_t len) {
    if (axis >= a.ndim()) throw ShapeError("slice: axis out of range");
    if (start < 0 || len < 0 || start + len > a.dim(axis))
        throw ShapeError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") exceeds extent " +
                         std::to_string(a.dim(axis)) + " of " + shape_str(a.shape()));
    Shape shape = a.shape();
    shape[axis] = len;
    // outer: product of dims before axis; inner: product after
    index_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= a.dim(i);
    for (size_t i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
    const index_t full = a.dim(axis);
    Tensor<S> out = Tensor<S>::zeros(shape);
    auto& ov = out.mutable_data();
    const auto& av = a.data();
    for (index_t o = 0; o < outer; ++o)
        std::memcpy(ov.data() + o * len * inner, av.data() + (o * full + start) * inner,
                    sizeof(S) * static_cast<size_t>(len * inner));
    record_op<S>("slice", out, {a}, [a, outer, inner, full, start, len](const TensorImpl<S>& o) {
        auto& da = a.impl()->grad;
        for (index_t ou = 0; ou < outer; ++ou) {
            const S* g = o.grad.data() + ou * len * inner;
            S* d = da.data() + (ou * full + start) * inner;
            for (index_t i = 0; i < len * inner; ++i) d[i] += g[i];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// embedding_lookup: gather rows of a (vocab x dim) table
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> embedding_lookup(const Tensor<S>& table, const std::vector<index_t>& ids) {
    if (table.ndim() != 2) throw ShapeError("embedding_lookup: table must be 2-d");
    const index_t vocab = table.dim(0), dim = table.dim(1);
    for (index_t id : ids)
        if (id < 0 || id >= vocab)
            throw ShapeError("embedding_lookup: id " + std::to_string(id) +
                             " outside vocab of " + std::to_string(vocab));
    Tensor<S> out = Tensor<S>::zeros({static_cast<index_t>(ids.size()), dim});
    auto& ov = out.mutable_data();
    const auto& tv = table.data();
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(ov.data() + i * dim, tv.data() + ids[i] * dim, sizeof(S) * dim);
    auto ids_copy = std::make_shared<std::vector<index_t>>(ids);
    record_op<S>("embedding_lookup", out, {table}, [table, ids_copy, dim](const TensorImpl<S>& o) {
        auto& dt = table.impl()->grad;
        for (size_t i = 0; i < ids_copy->size(); ++i) {
            const S* g = o.grad.data() + i * dim;
            S* d = dt.data() + (*ids_copy)[i] * dim;
            for (index_t c = 0; c < dim; ++c) d[c] += g[c];
        }
    });
    return out;
}

// Row gather on an arbitrary 2-d tensor (same op as an embedding lookup;
// gradients scatter-add back, so repeated rows accumulate).
template <class S>
Tensor<S> gather_rows(const Tensor<S>& a, const std::vector<index_t>& rows) {
    return embedding_lookup(a, rows);
}

// ---------------------------------------------------------------------------
// repeat_rows: (F x d) -> (F*reps x d), each row repeated `reps` times.
// Used to broadcast per-frame modulation vectors over their tokens.
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> repeat_rows(const Tensor<S>& a, index_t reps) {
    if (a.ndim() != 2 || reps < 1) throw ShapeError("repeat_rows: need 2-d input, reps >= 1");
    const index_t rows = a.dim(0), cols = a.dim(1);
    Tensor<S> out = Tensor<S>::zeros({rows * reps, cols});
    auto& ov = out.mutable_data();
    const auto& av = a.data();
    for (index_t r = 0; r < rows; ++r)
        for (index_t j = 0; j < reps; ++j)
            std::memcpy(ov.data() + (r * reps + j) * cols, av.data() + r * cols, sizeof(S) * cols);
    record_op<S>("repeat_rows", out, {a}, [a, rows, cols, reps](const TensorImpl<S>& o) {
        auto& da = a.impl()->grad;
        for (index_t r = 0; r < rows; ++r)
            for (index_t j = 0; j < reps; ++j) {
                const S* g = o.grad.data() + (r * reps + j) * cols;
                S* d = da.data() + r * cols;
                for (index_t c = 0; c < cols; ++c) d[c] += g[c];
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// mean over all elements -> scalar
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> mean(const Tensor<S>& a) {
    if (a.numel() == 0) throw ShapeError("mean: empty tensor");
    double acc = 0;
    for (S v : a.data()) acc += static_cast<double>(v);
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc / static_cast<double>(a.numel())));
    check_finite(out, "mean");
    record_op<S>("mean", out, {a}, [a](const TensorImpl<S>& o) {
        auto& da = a.impl()->grad;
        const S g = o.grad[0] / static_cast<S>(da.size());
        for (size_t i = 0; i < da.size(); ++i) da[i] += g;
    });
    return out;
}

// ---------------------------------------------------------------------------
// sum of squares over all elements -> scalar
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> sum_sq(const Tensor<S>& a) {
    double acc = 0;
    for (S v : a.data()) acc += static_cast<double>(v) * static_cast<double>(v);
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc));
    check_finite(out, "sum_sq");
    record_op<S>("sum_sq", out, {a}, [a](const TensorImpl<S>& o) {
        auto& da = a.impl()->grad;
        const auto& av = a.data();
        const S g = o.grad[0];
        for (size_t i = 0; i < da.size(); ++i) da[i] += S(2) * g * av[i];
    });
    return out;
}

// Mean squared error between two same-shape tensors -> scalar.
template <class S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape("mse", a, b);
    Tensor<S> d = sub(a, b);
    return scale(sum_sq(d), S(1) / static_cast<S>(d.numel()));
}

}  // namespace scd
