#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "scd/common.hpp"
#include "scd/rng.hpp"

namespace scd {

using Shape = std::vector<index_t>;

inline index_t numel_of(const Shape& s) {
    index_t n = 1;
    for (index_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

template <class S> struct TensorImpl;
template <class S> class Tensor;

// One recorded forward op. Records are created in execution order, so the
// creation index doubles as a topological order for the backward sweep.
template <class S>
struct OpNode {
    std::string kind;
    std::vector<Tensor<S>> inputs;
    // Accumulates input gradients given the output's gradient buffer.
    std::function<void(const TensorImpl<S>&)> backward;
    std::int64_t order = 0;
};

namespace detail {
inline std::atomic<std::int64_t>& node_counter() {
    static std::atomic<std::int64_t> c{0};
    return c;
}
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

// Disables graph recording in scope (inference / data paths).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev; }
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <class S>
struct TensorImpl {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // sized on demand, same length as data
    bool requires_grad = false;
    std::shared_ptr<OpNode<S>> node;  // null for leaves
    std::int64_t id = 0;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
};

// Shared-handle dense tensor. Copying a Tensor aliases the storage; use
// clone() for a deep copy. Values are immutable once produced by an op;
// the grad buffer is the only mutable part.
template <class S>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.p_ = std::make_shared<TensorImpl<S>>();
        t.p_->shape = std::move(shape);
        t.p_->data.assign(static_cast<size_t>(numel_of(t.p_->shape)), S(0));
        t.p_->id = detail::node_counter()++;
        return t;
    }

    static Tensor full(Shape shape, S value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.p_->data.begin(), t.p_->data.end(), value);
        return t;
    }

    static Tensor scalar(S value) { return full({}, value); }

    static Tensor from_data(Shape shape, std::vector<S> values) {
        if (numel_of(shape) != static_cast<index_t>(values.size()))
            throw ShapeError("from_data: shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        Tensor t;
        t.p_ = std::make_shared<TensorImpl<S>>();
        t.p_->shape = std::move(shape);
        t.p_->data = std::move(values);
        t.p_->id = detail::node_counter()++;
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, S stddev = S(1)) {
        Tensor t = zeros(std::move(shape));
        for (S& v : t.p_->data) v = static_cast<S>(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return static_cast<bool>(p_); }
    const Shape& shape() const { return p_->shape; }
    index_t dim(size_t i) const { return p_->shape[i]; }
    size_t ndim() const { return p_->shape.size(); }
    index_t numel() const { return static_cast<index_t>(p_->data.size()); }

    const std::vector<S>& data() const { return p_->data; }
    std::vector<S>& mutable_data() { return p_->data; }
    const std::vector<S>& grad() const { return p_->grad; }
    std::vector<S>& mutable_grad() {
        p_->ensure_grad();
        return p_->grad;
    }

    S item() const {
        if (numel() != 1) throw ShapeError("item(): tensor has " + std::to_string(numel()) + " elements");
        return p_->data[0];
    }

    S at(std::initializer_list<index_t> idx) const {
        index_t off = 0;
        size_t k = 0;
        for (index_t i : idx) off = off * p_->shape[k++] + i;
        return p_->data[static_cast<size_t>(off)];
    }

    bool requires_grad() const { return p_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        p_->requires_grad = v;
        return *this;
    }

    void zero_grad() {
        if (!p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), S(0));
    }

    // Same storage, no graph history, no grad requirement.
    Tensor detach() const {
        Tensor t;
        t.p_ = std::make_shared<TensorImpl<S>>();
        t.p_->shape = p_->shape;
        t.p_->data = p_->data;  // value copy keeps detached view immutable-safe
        t.p_->id = detail::node_counter()++;
        return t;
    }

    Tensor clone() const {
        Tensor t = detach();
        t.p_->requires_grad = p_->requires_grad;
        return t;
    }

    TensorImpl<S>* impl() const { return p_.get(); }
    std::shared_ptr<TensorImpl<S>> handle() const { return p_; }

    friend bool same_storage(const Tensor& a, const Tensor& b) { return a.p_ == b.p_; }

private:
    std::shared_ptr<TensorImpl<S>> p_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// ---- graph construction helpers (used by ops.hpp and friends) ----

template <class S>
bool any_requires_grad(const std::vector<Tensor<S>>& ts) {
    for (const auto& t : ts)
        if (t.defined() && t.requires_grad()) return true;
    return false;
}

template <class S>
void check_finite(const Tensor<S>& t, const char* op) {
    for (S v : t.data()) {
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
}

// Attach a backward record to `out` if grad mode is on and any input needs it.
template <class S>
void record_op(const char* kind, Tensor<S>& out, std::vector<Tensor<S>> inputs,
               std::function<void(const TensorImpl<S>&)> backward) {
    if (!grad_enabled() || !any_requires_grad(inputs)) return;
    auto node = std::make_shared<OpNode<S>>();
    node->kind = kind;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    node->order = out.impl()->id;
    out.impl()->node = node;
    out.set_requires_grad(true);
}

// Reverse-mode sweep from a scalar loss. Nodes are visited exactly once, in
// reverse creation order (a valid reverse-topological order since every op's
// inputs are created before its output). Gradients accumulate; a second call
// without zero_grad() adds on top of the first.
template <class S>
void backward(const Tensor<S>& loss) {
    if (!loss.defined()) throw Error("backward: undefined tensor");
    if (loss.numel() != 1)
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.impl()->node)
        throw Error("backward: loss is detached from any compute graph");

    // collect reachable nodes
    std::vector<TensorImpl<S>*> stack{loss.impl()};
    std::unordered_set<TensorImpl<S>*> seen{loss.impl()};
    std::vector<std::shared_ptr<OpNode<S>>> nodes;
    std::vector<TensorImpl<S>*> outputs;
    while (!stack.empty()) {
        TensorImpl<S>* t = stack.back();
        stack.pop_back();
        if (!t->node) continue;
        nodes.push_back(t->node);
        outputs.push_back(t);
        for (const auto& in : t->node->inputs) {
            if (in.defined() && seen.insert(in.impl()).second) stack.push_back(in.impl());
        }
    }
    std::vector<size_t> order(nodes.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return nodes[a]->order > nodes[b]->order; });

    // Non-leaf grads are scratch space for this sweep; only leaves accumulate
    // across backward() calls.
    for (TensorImpl<S>* t : outputs) {
        t->ensure_grad();
        std::fill(t->grad.begin(), t->grad.end(), S(0));
    }
    loss.impl()->grad[0] = S(1);
    for (size_t i : order) {
        for (const auto& in : nodes[i]->inputs)
            if (in.defined() && in.requires_grad()) in.impl()->ensure_grad();
        nodes[i]->backward(*outputs[i]);
    }
}

}  // namespace scd
