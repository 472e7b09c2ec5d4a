#pragma once

#include <functional>
#include <string>
#include <vector>

#include "scd/ops.hpp"
#include "scd/rng.hpp"
#include "scd/tensor.hpp"

// Flow-matching path, loss, time schedules, and the Euler ODE sampler.
// Convention: t=0 is clean data, t=1 is pure noise; sampling integrates
// from t=1 down to t=0.

namespace scd {

enum class TimeSampler { uniform, shifted };

struct DiffusionSchedule {
    // only the uniform weighting is defined; the field exists so configs can
    // name it explicitly
    std::string weight_fn_kind = "uniform";
    TimeSampler time_sampler = TimeSampler::uniform;
    double shift_k = 1.0;  // 1 = no shift

    void validate() const {
        if (weight_fn_kind != "uniform")
            throw ConfigError("unknown weight_fn_kind '" + weight_fn_kind + "'");
        if (shift_k <= 0) throw ConfigError("shift_k must be positive");
    }
};

// t'(k, t) = k t / (1 + (k-1) t); bijection on [0,1], inverse is k -> 1/k.
inline double shift_time(double k, double t) {
    if (k <= 0) throw ConfigError("shift_time: k must be positive");
    if (t < 0 || t > 1) throw Error("shift_time: t outside [0,1]");
    return k * t / (1.0 + (k - 1.0) * t);
}

inline double loss_weight(const DiffusionSchedule& sched, double t) {
    sched.validate();
    if (t < 0 || t > 1) throw Error("loss_weight: t outside [0,1]");
    return 1.0;
}

// Draw a training timestep. The shifted sampler warps a uniform draw through
// shift_time, concentrating mass near t=1 for k > 1.
inline double sample_time(const DiffusionSchedule& sched, Rng& rng) {
    sched.validate();
    const double u = rng.uniform();
    switch (sched.time_sampler) {
        case TimeSampler::uniform: return u;
        case TimeSampler::shifted: return shift_time(sched.shift_k, u);
    }
    throw ConfigError("sample_time: unknown sampler kind");
}

// x_t = (1-t) x + t eps
template <class S>
Tensor<S> forward_path(const Tensor<S>& x, const Tensor<S>& eps, double t) {
    if (t < 0 || t > 1) throw Error("forward_path: t outside [0,1]");
    detail::check_same_shape("forward_path", x, eps);
    return add(scale(x, static_cast<S>(1.0 - t)), scale(eps, static_cast<S>(t)));
}

// u = eps - x; the time derivative of the path, independent of t
template <class S>
Tensor<S> target_velocity(const Tensor<S>& x, const Tensor<S>& eps) {
    detail::check_same_shape("target_velocity", x, eps);
    return sub(eps, x);
}

// w(t) * MSE(pred_v, eps - x)
template <class S>
Tensor<S> fm_loss(const Tensor<S>& pred_v, const Tensor<S>& x, const Tensor<S>& eps, double t,
                  const DiffusionSchedule& sched) {
    detail::check_same_shape("fm_loss", pred_v, x);
    Tensor<S> u;
    {
        NoGradGuard ng;  // the target is a constant, not a gradient path
        u = target_velocity(x, eps);
    }
    return scale(mse(pred_v, u), static_cast<S>(loss_weight(sched, t)));
}

struct SamplerConfig {
    // times[0] = 1.0 > times[1] > ... > times.back() = 0.0
    std::vector<double> times;

    index_t num_steps() const { return static_cast<index_t>(times.size()) - 1; }

    void validate() const {
        if (times.size() < 2) throw ConfigError("sampler schedule needs at least 2 times");
        if (times.front() != 1.0 || times.back() != 0.0)
            throw ConfigError("sampler schedule must run from t=1 to t=0");
        for (size_t i = 0; i + 1 < times.size(); ++i)
            if (times[i] <= times[i + 1])
                throw ConfigError("sampler schedule must be strictly decreasing");
    }

    static SamplerConfig linear(index_t num_steps) {
        if (num_steps < 1) throw ConfigError("num_steps must be positive");
        SamplerConfig cfg;
        cfg.times.resize(static_cast<size_t>(num_steps) + 1);
        for (index_t i = 0; i <= num_steps; ++i)
            cfg.times[static_cast<size_t>(i)] =
                static_cast<double>(num_steps - i) / static_cast<double>(num_steps);
        cfg.times.front() = 1.0;
        cfg.times.back() = 0.0;
        return cfg;
    }
};

// First-order Euler integration of dx/dt = v from t=1 to t=0.
// v_fn also receives the step index (0-based), which callers use for
// per-step behavior such as layer skipping; plain fields ignore it.
template <class S>
Tensor<S> euler_sample(
    const std::function<Tensor<S>(const Tensor<S>&, double, index_t)>& v_fn,
    const Tensor<S>& x_init, const SamplerConfig& sampler) {
    sampler.validate();
    check_finite(x_init, "euler_sample(init)");
    NoGradGuard ng;
    Tensor<S> x = x_init.clone();
    for (size_t i = 0; i + 1 < sampler.times.size(); ++i) {
        const double t_cur = sampler.times[i];
        const double t_next = sampler.times[i + 1];
        try {
            Tensor<S> v = v_fn(x, t_cur, static_cast<index_t>(i));
            detail::check_same_shape("euler_sample", x, v);
            x = add(x, scale(v, static_cast<S>(t_next - t_cur)));
            check_finite(x, "euler_sample(state)");
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (euler_sample step " +
                               std::to_string(i) + ")");
        }
    }
    return x;
}

}  // namespace scd
