#pragma once

#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "scd/baseline_model.hpp"
#include "scd/checkpoint.hpp"
#include "scd/diffusion.hpp"
#include "scd/optim.hpp"
#include "scd/scd_model.hpp"

// Teacher-forced joint training over all frames of each sequence. For the
// separable model the encoder runs once per sequence and the decoder K times
// with independent (t, eps) draws; the loss is the mean over frames, draws,
// and sequences of the velocity MSE.

namespace scd {

struct TrainConfig {
    index_t batch_size = 1;  // sequences per step
    double lr = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9, beta2 = 0.95;
    double ema_decay = 0.99;
    index_t steps = 1000;
    index_t warmup_steps = 0;  // linear warmup to lr, then constant
    index_t K = 1;             // noisy samples per clean frame
    double corrupt_eta_train = 0.0;
    double clip_norm = 1.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
        if (K < 1) throw ConfigError("train.K must be >= 1");
        if (ema_decay < 0 || ema_decay >= 1)
            throw ConfigError("train.ema_decay must lie in [0, 1)");
        if (corrupt_eta_train < 0) throw ConfigError("train.corrupt_eta_train must be >= 0");
        if (steps < 0 || warmup_steps < 0) throw ConfigError("train.steps must be >= 0");
        if (lr < 0 || weight_decay < 0 || clip_norm < 0)
            throw ConfigError("train: rates must be non-negative");
    }

    OptimConfig optim(double lr_now) const {
        OptimConfig o;
        o.lr = lr_now;
        o.beta1 = beta1;
        o.beta2 = beta2;
        o.weight_decay = weight_decay;
        o.clip_norm = clip_norm;
        return o;
    }

    double lr_at(index_t step) const {  // step is 0-based
        if (warmup_steps <= 0 || step >= warmup_steps) return lr;
        return lr * double(step + 1) / double(warmup_steps);
    }
};

// Exact block-pass costs per clean frame and per noisy sample under
// K-amortized decoding: clean = l + m*K, noisy = l/K + m.
struct Rational {
    long long num = 0, den = 1;

    Rational() = default;
    Rational(long long n, long long d) : num(n), den(d) {
        if (den == 0) throw Error("Rational: zero denominator");
        const long long g = std::gcd(num < 0 ? -num : num, den < 0 ? -den : den);
        if (g > 1) {
            num /= g;
            den /= g;
        }
        if (den < 0) {
            num = -num;
            den = -den;
        }
    }

    double value() const { return double(num) / double(den); }
    bool operator==(const Rational& o) const { return num == o.num && den == o.den; }
};

struct BpCosts {
    Rational per_clean_batch;
    Rational per_noisy_batch;
};

inline BpCosts bp_accounting(index_t enc_blocks, index_t dec_blocks, index_t K) {
    if (enc_blocks < 0 || dec_blocks < 0) throw ConfigError("bp_accounting: negative depth");
    if (K < 1) throw ConfigError("bp_accounting: K must be >= 1");
    return {Rational(enc_blocks + dec_blocks * K, 1), Rational(enc_blocks + dec_blocks * K, K)};
}

// One training sequence: patch tokens for all frames plus the action track.
template <class S>
struct TrainBatch {
    Tensor<S> tokens;  // (num_frames * tokens_per_frame) x token_dim, normalized
    std::vector<index_t> actions;
};

namespace detail {

// Per-frame independent (t, eps); draw order is t for every frame, then the
// eps tensor, so the stream is stable under refactors of the consumer.
template <class S>
struct NoiseDraw {
    std::vector<double> ts;
    Tensor<S> eps;
};

template <class S>
NoiseDraw<S> draw_noise(const DiffusionSchedule& sched, index_t num_frames, index_t tokens,
                        index_t dim, Rng& rng) {
    NoiseDraw<S> d;
    for (index_t i = 0; i < num_frames; ++i) d.ts.push_back(sample_time(sched, rng));
    d.eps = Tensor<S>::randn({num_frames * tokens, dim}, rng);
    return d;
}

template <class S>
Tensor<S> noised_rows(const Tensor<S>& clean, const Tensor<S>& eps, const std::vector<double>& ts,
                      index_t tokens) {
    Tensor<S> out;
    const index_t n = static_cast<index_t>(ts.size());
    for (index_t i = 0; i < n; ++i) {
        Tensor<S> xi = slice(clean, 0, i * tokens, tokens);
        Tensor<S> ei = slice(eps, 0, i * tokens, tokens);
        Tensor<S> noised = forward_path(xi, ei, ts[static_cast<size_t>(i)]);
        out = i == 0 ? noised : concat_seqdim(out, noised);
    }
    return out;
}

}  // namespace detail

// Differentiable loss for one sequence: encode once, decode K times. The
// corruption draw is skipped entirely at eta 0 so that run is bitwise
// identical to one without the corruption call.
template <class S>
Tensor<S> scd_sequence_loss(SCDModel<S>& model, const TrainBatch<S>& batch,
                            const DiffusionSchedule& sched, index_t K, double eta_t, Rng& rng) {
    if (K < 1) throw ConfigError("scd_sequence_loss: K must be >= 1");
    const index_t T = model.cfg.tokens_per_frame();
    if (batch.tokens.ndim() != 2 || batch.tokens.dim(0) % T != 0)
        throw ShapeError("scd_sequence_loss: tokens " + shape_str(batch.tokens.shape()) +
                         " are not whole frames of " + std::to_string(T));
    const index_t N = batch.tokens.dim(0) / T;

    Tensor<S> contexts = encode_contexts(model, batch.tokens, batch.actions);
    std::vector<index_t> frame_indices(static_cast<size_t>(N));
    for (index_t i = 0; i < N; ++i) frame_indices[static_cast<size_t>(i)] = i + 1;

    Tensor<S> total;
    for (index_t k = 0; k < K; ++k) {
        auto draw = detail::draw_noise<S>(sched, N, T, batch.tokens.dim(1), rng);
        Tensor<S> x_t = detail::noised_rows(batch.tokens, draw.eps, draw.ts, T);
        Tensor<S> target = target_velocity(batch.tokens, draw.eps);
        Tensor<S> ctx = contexts;
        if (eta_t > 0) {
            Tensor<S> zeta = Tensor<S>::randn(contexts.shape(), rng);
            ctx = corrupt_context(contexts, eta_t, zeta);
        }
        Tensor<S> v = decode_velocity_batch(model, x_t, draw.ts, ctx, frame_indices);
        Tensor<S> l = mse(v, target);
        total = k == 0 ? l : add(total, l);
    }
    return K == 1 ? total : scale(total, static_cast<S>(1.0 / double(K)));
}

// Baseline loss for one sequence under either strategy.
template <class S>
Tensor<S> baseline_sequence_loss(BaselineModel<S>& model, const TrainBatch<S>& batch,
                                 const DiffusionSchedule& sched, Rng& rng) {
    const index_t T = model.cfg.tokens_per_frame();
    if (batch.tokens.ndim() != 2 || batch.tokens.dim(0) % T != 0)
        throw ShapeError("baseline_sequence_loss: tokens do not tile into frames");
    const index_t N = batch.tokens.dim(0) / T;

    auto draw = detail::draw_noise<S>(sched, N, T, batch.tokens.dim(1), rng);
    Tensor<S> x_t = detail::noised_rows(batch.tokens, draw.eps, draw.ts, T);
    Tensor<S> target = target_velocity(batch.tokens, draw.eps);
    Tensor<S> v = model.cfg.train_strategy == TrainStrategy::teacher_forcing
                      ? baseline_forward_tf(model, batch.tokens, x_t, draw.ts, batch.actions)
                      : baseline_forward_df(model, x_t, draw.ts, batch.actions);
    return mse(v, target);
}

struct StepStats {
    double loss = 0;
    double lr = 0;
    double grad_norm = 0;
};

namespace detail {

template <class S, class LossFn>
StepStats run_step(NamedParams<S>& params, AdamW<S>& opt, NamedParams<S>* ema, double ema_decay,
                   const std::vector<TrainBatch<S>>& batch, LossFn&& seq_loss) {
    if (batch.empty()) throw Error("train step: empty batch");
    Tensor<S> total;
    for (size_t b = 0; b < batch.size(); ++b) {
        Tensor<S> l = seq_loss(batch[b]);
        total = b == 0 ? l : add(total, l);
    }
    if (batch.size() > 1) total = scale(total, static_cast<S>(1.0 / double(batch.size())));

    for (auto& [name, p] : params) p.zero_grad();
    backward(total);
    StepStats out;
    out.loss = double(total.item());
    out.lr = opt.config().lr;
    out.grad_norm = AdamW<S>::clip_global_norm(params, 0.0);  // report only; step() clips
    opt.step(params);
    if (ema && ema_decay > 0) ema_update(*ema, params, ema_decay);
    return out;
}

}  // namespace detail

template <class S>
StepStats scd_train_step(SCDModel<S>& model, NamedParams<S>& params, AdamW<S>& opt,
                         const std::vector<TrainBatch<S>>& batch, const DiffusionSchedule& sched,
                         index_t K, double eta_t, Rng& rng, NamedParams<S>* ema = nullptr,
                         double ema_decay = 0.0) {
    return detail::run_step<S>(params, opt, ema, ema_decay, batch, [&](const TrainBatch<S>& b) {
        return scd_sequence_loss(model, b, sched, K, eta_t, rng);
    });
}

template <class S>
StepStats baseline_train_step(BaselineModel<S>& model, NamedParams<S>& params, AdamW<S>& opt,
                              const std::vector<TrainBatch<S>>& batch,
                              const DiffusionSchedule& sched, Rng& rng,
                              NamedParams<S>* ema = nullptr, double ema_decay = 0.0) {
    return detail::run_step<S>(params, opt, ema, ema_decay, batch, [&](const TrainBatch<S>& b) {
        return baseline_sequence_loss(model, b, sched, rng);
    });
}

// Mean loss over sequences without touching gradients or optimizer state.
template <class S>
double scd_eval_loss(SCDModel<S>& model, const std::vector<TrainBatch<S>>& batches,
                     const DiffusionSchedule& sched, index_t K, Rng& rng) {
    NoGradGuard guard;
    double acc = 0;
    for (const auto& b : batches)
        acc += double(scd_sequence_loss(model, b, sched, K, 0.0, rng).item());
    return acc / double(batches.size());
}

template <class S>
double baseline_eval_loss(BaselineModel<S>& model, const std::vector<TrainBatch<S>>& batches,
                          const DiffusionSchedule& sched, Rng& rng) {
    NoGradGuard guard;
    double acc = 0;
    for (const auto& b : batches)
        acc += double(baseline_sequence_loss(model, b, sched, rng).item());
    return acc / double(batches.size());
}

// Deterministic per-step rng: resuming at step n replays exactly the draws
// a straight-through run would make at step n.
inline Rng step_rng(std::uint64_t seed, index_t step) {
    return Rng(mix64(seed, stream::noise, static_cast<std::uint64_t>(step)));
}

// Sequences cycle through the dataset in order; step s takes
// [s*B mod n, ...] so any step's batch is reconstructable.
template <class S>
std::vector<TrainBatch<S>> batch_at_step(const std::vector<TrainBatch<S>>& dataset,
                                         index_t batch_size, index_t step) {
    if (dataset.empty()) throw Error("batch_at_step: empty dataset");
    std::vector<TrainBatch<S>> out;
    const index_t n = static_cast<index_t>(dataset.size());
    for (index_t b = 0; b < batch_size; ++b)
        out.push_back(dataset[static_cast<size_t>(((step * batch_size + b) % n + n) % n)]);
    return out;
}

struct TrainLogEntry {
    index_t step = 0;  // 1-based in logs
    double loss = 0;
    double lr = 0;
    double wallclock_ms = 0;
    double bp_clean = 0;
    double bp_noisy = 0;
};

inline std::string log_json_line(const TrainLogEntry& e) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "{\"step\":%lld,\"loss\":%.9g,\"lr\":%.9g,\"wallclock_ms\":%.3f,"
                  "\"bp_clean\":%.6g,\"bp_noisy\":%.6g}",
                  static_cast<long long>(e.step), e.loss, e.lr, e.wallclock_ms, e.bp_clean,
                  e.bp_noisy);
    return buf;
}

// ---------------------------------------------------------------------------
// train-state persistence
// ---------------------------------------------------------------------------

template <class S>
void save_train_state(Checkpoint& ck, const NamedParams<S>& params, const AdamW<S>* opt,
                      const NamedParams<S>* ema) {
    for (const auto& [name, p] : params) ck.put(name, p);
    if (opt) {
        for (const auto& [name, m] : opt->first_moments()) ck.put_f64("opt/m/" + name, m);
        for (const auto& [name, v] : opt->second_moments()) ck.put_f64("opt/v/" + name, v);
        ck.meta["opt_step"] = opt->step_count();
    }
    if (ema)
        for (const auto& [name, p] : *ema) ck.put("ema/" + name, p);
}

template <class S>
void load_train_state(const Checkpoint& ck, NamedParams<S>& params, AdamW<S>* opt,
                      NamedParams<S>* ema) {
    for (auto& [name, p] : params) {
        Tensor<S> stored = ck.get<S>(name);
        if (stored.shape() != p.shape())
            throw ShapeError("load_train_state: '" + name + "' has shape " +
                             shape_str(stored.shape()) + ", model expects " +
                             shape_str(p.shape()));
        p.mutable_data() = stored.data();
    }
    if (opt) {
        for (auto& [name, p] : params) {
            if (ck.has("opt/m/" + name))
                opt->first_moments()[name] = ck.get_f64_vector("opt/m/" + name);
            if (ck.has("opt/v/" + name))
                opt->second_moments()[name] = ck.get_f64_vector("opt/v/" + name);
        }
        opt->set_step_count(ck.meta.value("opt_step", index_t(0)));
    }
    if (ema)
        for (auto& [name, p] : *ema) {
            if (!ck.has("ema/" + name)) continue;
            Tensor<S> stored = ck.get<S>("ema/" + name);
            p.mutable_data() = stored.data();
        }
}

}  // namespace scd
