#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "scd/tensor.hpp"

// Hand-rolled AdamW with decoupled multiplicative weight decay, global-norm
// gradient clipping, and an EMA shadow of the parameters. Parameters are
// addressed by name (the same names the checkpoint stores) so optimizer
// state survives a save/load round trip.

namespace scd {

template <class S>
using NamedParams = std::vector<std::pair<std::string, Tensor<S>>>;

struct OptimConfig {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 1.0;  // 0 disables clipping

    void validate() const {
        if (lr < 0) throw ConfigError("optim: lr must be non-negative");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw ConfigError("optim: betas must lie in [0, 1)");
        if (eps <= 0) throw ConfigError("optim: eps must be positive");
        if (weight_decay < 0 || clip_norm < 0)
            throw ConfigError("optim: weight_decay and clip_norm must be non-negative");
    }
};

template <class S>
class AdamW {
   public:
    AdamW() = default;
    explicit AdamW(OptimConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const OptimConfig& config() const { return cfg_; }
    index_t step_count() const { return step_; }
    void set_lr(double lr) {
        if (lr < 0) throw ConfigError("optim: lr must be non-negative");
        cfg_.lr = lr;
    }

    // Scales every gradient in place so the global l2 norm is at most
    // `clip_norm`; returns the pre-clip norm.
    static double clip_global_norm(NamedParams<S>& params, double clip_norm) {
        double sq = 0;
        for (auto& [name, p] : params) {
            if (!p.requires_grad()) continue;
            for (S g : p.grad()) sq += double(g) * double(g);
        }
        const double norm = std::sqrt(sq);
        if (clip_norm > 0 && norm > clip_norm) {
            const double scale = clip_norm / norm;
            for (auto& [name, p] : params) {
                if (!p.requires_grad()) continue;
                for (S& g : p.mutable_grad()) g = static_cast<S>(double(g) * scale);
            }
        }
        return norm;
    }

    // One AdamW update over all gradient-carrying params. A non-finite
    // gradient aborts before any parameter moves.
    void step(NamedParams<S>& params) {
        for (auto& [name, p] : params) {
            if (!p.requires_grad()) continue;
            for (S g : p.grad())
                if (!std::isfinite(double(g)))
                    throw NumericError("optimizer_step: non-finite gradient in '" + name + "'");
        }
        if (cfg_.clip_norm > 0) clip_global_norm(params, cfg_.clip_norm);

        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
        for (auto& [name, p] : params) {
            if (!p.requires_grad()) continue;
            auto& m = slot(m_, name, p);
            auto& v = slot(v_, name, p);
            auto& w = p.mutable_data();
            const auto& g = p.mutable_grad();  // sized (zeros) if backward never reached it
            for (size_t e = 0; e < w.size(); ++e) {
                const double ge = double(g[e]);
                m[e] = cfg_.beta1 * m[e] + (1.0 - cfg_.beta1) * ge;
                v[e] = cfg_.beta2 * v[e] + (1.0 - cfg_.beta2) * ge * ge;
                const double mhat = m[e] / bc1;
                const double vhat = v[e] / bc2;
                double we = double(w[e]);
                we -= cfg_.lr * cfg_.weight_decay * we;  // decoupled decay
                we -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                w[e] = static_cast<S>(we);
            }
        }
    }

    // Moment access for persistence; moments are kept in double regardless
    // of the parameter scalar.
    std::map<std::string, std::vector<double>>& first_moments() { return m_; }
    std::map<std::string, std::vector<double>>& second_moments() { return v_; }
    const std::map<std::string, std::vector<double>>& first_moments() const { return m_; }
    const std::map<std::string, std::vector<double>>& second_moments() const { return v_; }
    void set_step_count(index_t s) { step_ = s; }

   private:
    std::vector<double>& slot(std::map<std::string, std::vector<double>>& store,
                              const std::string& name, const Tensor<S>& p) {
        auto it = store.find(name);
        if (it == store.end())
            it = store.emplace(name, std::vector<double>(p.data().size(), 0.0)).first;
        if (it->second.size() != p.data().size())
            throw ShapeError("optimizer_step: state for '" + name + "' has " +
                             std::to_string(it->second.size()) + " entries, param has " +
                             std::to_string(p.data().size()));
        return it->second;
    }

    OptimConfig cfg_;
    index_t step_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

// ema <- decay * ema + (1 - decay) * params, elementwise in double.
template <class S>
void ema_update(NamedParams<S>& ema, const NamedParams<S>& params, double decay) {
    if (decay < 0 || decay >= 1) throw ConfigError("ema_update: decay must lie in [0, 1)");
    if (ema.size() != params.size())
        throw ShapeError("ema_update: shadow has " + std::to_string(ema.size()) +
                         " params, model has " + std::to_string(params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& [ename, e] = ema[i];
        const auto& [pname, p] = params[i];
        if (ename != pname)
            throw ShapeError("ema_update: param order mismatch at '" + ename + "' vs '" + pname +
                             "'");
        auto& ev = e.mutable_data();
        const auto& pv = p.data();
        if (ev.size() != pv.size()) throw ShapeError("ema_update: size mismatch for '" + ename + "'");
        for (size_t k = 0; k < ev.size(); ++k)
            ev[k] = static_cast<S>(decay * double(ev[k]) + (1.0 - decay) * double(pv[k]));
    }
}

// Detached copy of the parameter list, for seeding an EMA shadow.
template <class S>
NamedParams<S> clone_params(const NamedParams<S>& params) {
    NamedParams<S> out;
    out.reserve(params.size());
    for (const auto& [name, p] : params) out.emplace_back(name, p.detach().clone());
    return out;
}

}  // namespace scd
