#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/SVD>
#include <json.hpp>

#include "scd/baseline_model.hpp"
#include "scd/checkpoint.hpp"
#include "scd/scd_model.hpp"
#include "scd/train.hpp"

// Diagnostics over captured activations and attention maps: step-step
// feature similarity, PCA subspace alignment, cross-frame attention mass,
// and leave-one-out layer importance. All probes are read-only over traces
// and weights, so they can run concurrently.
//
// Layer indices in a trace are unified depth positions: for the separable
// model the encoder occupies 0..enc_blocks-1 and the decoder continues at
// enc_blocks..enc_blocks+dec_blocks-1; the baseline uses 0..depth-1.
// Feature entries are keyed by the frame they condition or denoise;
// attention query/key rows carry the frame of the underlying tokens
// (BOS_FRAME for begin-of-sequence slots).

namespace scd {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// activation trace
// ---------------------------------------------------------------------------

// One captured attention map with its frame bookkeeping.
template <class S>
struct AttnRecord {
    AttnMeta meta;
    index_t heads = 0, tq = 0, tk = 0;
    std::vector<S> weights;  // (heads x tq x tk), each query row sums to 1

    S at(index_t h, index_t q, index_t k) const {
        return weights[static_cast<size_t>((h * tq + q) * tk + k)];
    }
};

template <class S>
class ActivationTrace {
public:
    using FeatureKey = std::array<index_t, 3>;  // layer, step, frame
    using AttnKey = std::pair<index_t, index_t>;  // layer, step

    json config;  // model/rollout snapshot, enough to replay the capture
    json meta;    // seed and free-form capture notes

    // Hooks that record into this trace; pass to any forward or rollout.
    CaptureHooks<S> hooks(bool features = true, bool attention = false) {
        CaptureHooks<S> h;
        h.want_features = features;
        h.want_attention = attention;
        if (features)
            h.on_feature = [this](index_t layer, index_t step, index_t frame,
                                  const Tensor<S>& f) { add_feature(layer, step, frame, f); };
        if (attention)
            h.on_attention = [this](const AttnMeta& m, const AttnCapture<S>& cap) {
                add_attention(m, cap);
            };
        return h;
    }

    void add_feature(index_t layer, index_t step, index_t frame, const Tensor<S>& f) {
        if (f.ndim() != 2)
            throw ShapeError("trace: features must be (tokens x hidden), got " +
                             shape_str(f.shape()));
        const auto lf = std::make_pair(layer, frame);
        auto it = feature_shape_.find(lf);
        if (it == feature_shape_.end()) {
            feature_shape_.emplace(lf, f.shape());
        } else if (it->second != f.shape()) {
            throw ShapeError("trace: layer " + std::to_string(layer) + " frame " +
                             std::to_string(frame) + " features change shape across steps");
        }
        features_[{layer, step, frame}] = f.detach().clone();
    }

    void add_attention(const AttnMeta& m, const AttnCapture<S>& cap) {
        AttnRecord<S> rec;
        rec.meta = m;
        rec.heads = cap.heads;
        rec.tq = cap.tq;
        rec.tk = cap.tk;
        rec.weights = cap.weights;
        attn_[{m.layer, m.step}].push_back(std::move(rec));
    }

    bool has_feature(index_t layer, index_t step, index_t frame) const {
        return features_.count({layer, step, frame}) > 0;
    }

    const Tensor<S>& feature(index_t layer, index_t step, index_t frame) const {
        auto it = features_.find({layer, step, frame});
        if (it == features_.end())
            throw Error("trace: no features captured for layer " + std::to_string(layer) +
                        " step " + std::to_string(step) + " frame " + std::to_string(frame));
        return it->second;
    }

    // Sorted denoise steps with features for this (layer, frame).
    std::vector<index_t> steps(index_t layer, index_t frame) const {
        std::vector<index_t> out;
        for (const auto& [key, f] : features_)
            if (key[0] == layer && key[2] == frame) out.push_back(key[1]);
        return out;  // map order is already ascending in step for fixed layer
    }

    // Sorted distinct layers holding any features.
    std::vector<index_t> feature_layers() const {
        std::vector<index_t> out;
        for (const auto& [key, f] : features_)
            if (out.empty() || out.back() != key[0]) out.push_back(key[0]);
        return out;
    }

    // Sorted distinct layers holding any attention maps.
    std::vector<index_t> attention_layers() const {
        std::vector<index_t> out;
        for (const auto& [key, recs] : attn_)
            if (out.empty() || out.back() != key.first) out.push_back(key.first);
        return out;
    }

    // All records for one layer across steps, in capture order per step.
    std::vector<const AttnRecord<S>*> attention_records(index_t layer) const {
        std::vector<const AttnRecord<S>*> out;
        for (const auto& [key, recs] : attn_)
            if (key.first == layer)
                for (const AttnRecord<S>& r : recs) out.push_back(&r);
        return out;
    }

    size_t num_features() const { return features_.size(); }
    size_t num_attention_records() const {
        size_t n = 0;
        for (const auto& [key, recs] : attn_) n += recs.size();
        return n;
    }

    // ---- persistence (Checkpoint tensor container, kind = "trace") --------

    void save(const std::string& path) const {
        Checkpoint ck;
        ck.config = config;
        ck.meta = meta;
        ck.meta["kind"] = "trace";
        char buf[64];
        for (const auto& [key, f] : features_) {
            std::snprintf(buf, sizeof buf, "feat/%05lld/%05lld/%05lld",
                          static_cast<long long>(key[0]), static_cast<long long>(key[1]),
                          static_cast<long long>(key[2]));
            ck.put(buf, f);
        }
        json attn_meta = json::object();
        for (const auto& [key, recs] : attn_) {
            for (size_t r = 0; r < recs.size(); ++r) {
                const AttnRecord<S>& rec = recs[r];
                std::snprintf(buf, sizeof buf, "attn/%05lld/%05lld/%05lld",
                              static_cast<long long>(key.first),
                              static_cast<long long>(key.second), static_cast<long long>(r));
                ck.put(buf, Tensor<S>::from_data({rec.heads, rec.tq, rec.tk}, rec.weights));
                attn_meta[buf] = {{"layer", rec.meta.layer},
                                  {"step", rec.meta.step},
                                  {"query_frames", rec.meta.query_frames},
                                  {"key_frames", rec.meta.key_frames}};
            }
        }
        if (!attn_meta.empty()) ck.meta["attn"] = attn_meta;
        ck.save(path);
    }

    static ActivationTrace load(const std::string& path) {
        Checkpoint ck = Checkpoint::load(path);
        if (ck.meta.value("kind", "") != "trace")
            throw Error("trace: " + path + " is not a trace container");
        ActivationTrace tr;
        const json attn_meta = ck.meta.value("attn", json::object());
        for (const std::string& name : ck.names()) {
            long long a = 0, b = 0, c = 0;
            if (std::sscanf(name.c_str(), "feat/%lld/%lld/%lld", &a, &b, &c) == 3) {
                tr.add_feature(a, b, c, ck.get<S>(name));
            } else if (std::sscanf(name.c_str(), "attn/%lld/%lld/%lld", &a, &b, &c) == 3) {
                const json& jm = attn_meta.at(name);
                Tensor<S> w = ck.get<S>(name);
                AttnRecord<S> rec;
                rec.meta.layer = jm.at("layer").get<index_t>();
                rec.meta.step = jm.at("step").get<index_t>();
                rec.meta.query_frames = jm.at("query_frames").get<std::vector<index_t>>();
                rec.meta.key_frames = jm.at("key_frames").get<std::vector<index_t>>();
                rec.heads = w.dim(0);
                rec.tq = w.dim(1);
                rec.tk = w.dim(2);
                rec.weights = w.data();
                tr.attn_[{a, b}].push_back(std::move(rec));
            }
        }
        tr.config = ck.config;
        tr.meta = ck.meta;
        tr.meta.erase("attn");
        tr.meta.erase("kind");
        return tr;
    }

private:
    std::map<FeatureKey, Tensor<S>> features_;
    std::map<AttnKey, std::vector<AttnRecord<S>>> attn_;
    std::map<std::pair<index_t, index_t>, Shape> feature_shape_;
};

// ---------------------------------------------------------------------------
// step-step feature similarity
// ---------------------------------------------------------------------------

enum class SimMetric { cosine, mse, cosine_flat };

inline std::string sim_metric_name(SimMetric m) {
    switch (m) {
        case SimMetric::cosine: return "cosine";
        case SimMetric::mse: return "mse";
        case SimMetric::cosine_flat: return "cosine_flat";
    }
    throw ConfigError("unknown similarity metric");
}

struct StepSimilarity {
    std::string metric;
    std::string cosine_mode;     // "per_token_mean" or "flattened"; empty for mse
    std::vector<index_t> steps;  // ascending captured denoise steps
    Tensor<double> matrix;       // (steps x steps), symmetric
};

namespace detail {

// Mean over rows of cos(a_r, b_r). Zero rows compare as identical to zero
// rows and orthogonal to everything else.
template <class S>
double per_token_cosine(const Tensor<S>& a, const Tensor<S>& b) {
    const index_t rows = a.dim(0), cols = a.dim(1);
    const std::vector<S>& av = a.data();
    const std::vector<S>& bv = b.data();
    double acc = 0;
    for (index_t r = 0; r < rows; ++r) {
        double dot = 0, na = 0, nb = 0;
        for (index_t c = 0; c < cols; ++c) {
            const double x = av[static_cast<size_t>(r * cols + c)];
            const double y = bv[static_cast<size_t>(r * cols + c)];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        constexpr double tiny = 1e-300;
        if (na < tiny && nb < tiny)
            acc += 1.0;
        else if (na < tiny || nb < tiny)
            acc += 0.0;
        else
            acc += dot / (std::sqrt(na) * std::sqrt(nb));
    }
    return acc / double(rows);
}

template <class S>
double flat_cosine(const Tensor<S>& a, const Tensor<S>& b) {
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.data().size(); ++i) {
        const double x = a.data()[i], y = b.data()[i];
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    constexpr double tiny = 1e-300;
    if (na < tiny && nb < tiny) return 1.0;
    if (na < tiny || nb < tiny) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Squared Frobenius norm of the difference: sum over all entries.
template <class S>
double feature_mse(const Tensor<S>& a, const Tensor<S>& b) {
    double acc = 0;
    for (size_t i = 0; i < a.data().size(); ++i) {
        const double d = double(a.data()[i]) - double(b.data()[i]);
        acc += d * d;
    }
    return acc;
}

inline void check_similarity_matrix(const StepSimilarity& sim) {
    const index_t n = sim.matrix.dim(0);
    const bool cos = sim.metric != "mse";
    for (index_t i = 0; i < n; ++i) {
        const double d = sim.matrix.data()[static_cast<size_t>(i * n + i)];
        if (cos ? std::abs(d - 1.0) > 1e-6 : d != 0.0)
            throw NumericError("similarity matrix diagonal violated at step index " +
                               std::to_string(i));
        for (index_t j = 0; j < n; ++j) {
            const double v = sim.matrix.data()[static_cast<size_t>(i * n + j)];
            if (v != sim.matrix.data()[static_cast<size_t>(j * n + i)])
                throw NumericError("similarity matrix asymmetry");
            if (!cos && v < 0) throw NumericError("mse similarity matrix has a negative entry");
        }
    }
}

}  // namespace detail

// S x S matrix over the captured denoise steps of one (layer, frame).
// cosine is the per-token mean (declared in cosine_mode); mse is the total
// squared distance between the step features.
template <class S>
StepSimilarity step_similarity_matrix(const ActivationTrace<S>& trace, index_t layer,
                                      index_t frame, SimMetric metric = SimMetric::cosine) {
    StepSimilarity out;
    out.metric = sim_metric_name(metric);
    if (metric == SimMetric::cosine) out.cosine_mode = "per_token_mean";
    if (metric == SimMetric::cosine_flat) out.cosine_mode = "flattened";
    out.steps = trace.steps(layer, frame);
    const index_t n = static_cast<index_t>(out.steps.size());
    if (n < 2)
        throw Error("step_similarity_matrix: layer " + std::to_string(layer) + " frame " +
                    std::to_string(frame) + " has " + std::to_string(n) +
                    " captured steps; need at least 2");

    out.matrix = Tensor<double>::zeros({n, n});
    std::vector<double>& m = out.matrix.mutable_data();
    for (index_t i = 0; i < n; ++i) {
        const Tensor<S>& fi = trace.feature(layer, out.steps[static_cast<size_t>(i)], frame);
        for (index_t j = i; j < n; ++j) {
            const Tensor<S>& fj = trace.feature(layer, out.steps[static_cast<size_t>(j)], frame);
            double v = 0;
            switch (metric) {
                case SimMetric::cosine: v = detail::per_token_cosine(fi, fj); break;
                case SimMetric::cosine_flat: v = detail::flat_cosine(fi, fj); break;
                case SimMetric::mse: v = detail::feature_mse(fi, fj); break;
            }
            m[static_cast<size_t>(i * n + j)] = v;
            m[static_cast<size_t>(j * n + i)] = v;
        }
    }
    detail::check_similarity_matrix(out);
    return out;
}

// ---------------------------------------------------------------------------
// per-layer mean distance
// ---------------------------------------------------------------------------

struct LayerCurve {
    std::vector<index_t> layers;
    std::vector<double> values;
};

// Mean off-diagonal entry of each layer's mse matrix for one frame.
template <class S>
LayerCurve per_layer_mean_distance(const ActivationTrace<S>& trace, index_t frame) {
    LayerCurve out;
    for (index_t layer : trace.feature_layers()) {
        if (trace.steps(layer, frame).size() < 2) continue;
        StepSimilarity sim = step_similarity_matrix(trace, layer, frame, SimMetric::mse);
        const index_t n = sim.matrix.dim(0);
        double acc = 0;
        for (index_t i = 0; i < n; ++i)
            for (index_t j = 0; j < n; ++j)
                if (i != j) acc += sim.matrix.data()[static_cast<size_t>(i * n + j)];
        out.layers.push_back(layer);
        out.values.push_back(acc / double(n * (n - 1)));
    }
    if (out.layers.empty())
        throw Error("per_layer_mean_distance: no layer has >= 2 captured steps for frame " +
                    std::to_string(frame));
    return out;
}

// ---------------------------------------------------------------------------
// PCA subspace alignment
// ---------------------------------------------------------------------------

struct PcaAlignment {
    index_t ref_step = 0;
    index_t k = 0;
    std::vector<index_t> steps;
    std::vector<double> energy_ratio;  // per step, in [0,1], non-decreasing in k
    Tensor<double> component_scores;   // ref-step per-token scores (tokens x k)
    std::vector<double> singular_values;
};

// Uncentered PCA of the ref-step features; for every captured step the
// fraction of feature energy lying in the top-k right-singular subspace.
template <class S>
PcaAlignment pca_alignment(const ActivationTrace<S>& trace, index_t layer, index_t frame,
                           index_t ref_step, index_t k) {
    const Tensor<S>& ref = trace.feature(layer, ref_step, frame);
    const index_t tokens = ref.dim(0), hidden = ref.dim(1);
    if (k < 1 || k > std::min(tokens, hidden))
        throw ConfigError("pca_alignment: k must lie in [1, min(tokens, hidden)] = [1, " +
                          std::to_string(std::min(tokens, hidden)) + "]");

    Eigen::MatrixXd F(tokens, hidden);
    for (index_t r = 0; r < tokens; ++r)
        for (index_t c = 0; c < hidden; ++c)
            F(r, c) = double(ref.data()[static_cast<size_t>(r * hidden + c)]);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(F, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::MatrixXd Vk = svd.matrixV().leftCols(k);

    PcaAlignment out;
    out.ref_step = ref_step;
    out.k = k;
    out.steps = trace.steps(layer, frame);
    for (index_t i = 0; i < static_cast<index_t>(svd.singularValues().size()); ++i)
        out.singular_values.push_back(svd.singularValues()(i));

    for (index_t s : out.steps) {
        const Tensor<S>& f = trace.feature(layer, s, frame);
        Eigen::MatrixXd Fs(tokens, hidden);
        for (index_t r = 0; r < tokens; ++r)
            for (index_t c = 0; c < hidden; ++c)
                Fs(r, c) = double(f.data()[static_cast<size_t>(r * hidden + c)]);
        const double total = Fs.squaredNorm();
        // a zero feature tensor lies in every subspace
        const double ratio = total < 1e-300 ? 1.0 : (Fs * Vk).squaredNorm() / total;
        out.energy_ratio.push_back(std::clamp(ratio, 0.0, 1.0));
    }

    Eigen::MatrixXd scores = F * Vk;  // per-token top-k component maps
    std::vector<double> flat(static_cast<size_t>(tokens * k));
    for (index_t r = 0; r < tokens; ++r)
        for (index_t c = 0; c < k; ++c) flat[static_cast<size_t>(r * k + c)] = scores(r, c);
    out.component_scores = Tensor<double>::from_data({tokens, k}, std::move(flat));
    return out;
}

// ---------------------------------------------------------------------------
// cross-frame attention mass
// ---------------------------------------------------------------------------

struct AttentionMassSplit {
    double cross = 0;  // keys from frames 1..i-1
    double intra = 0;  // keys from frame i
    double bos = 0;    // begin-of-sequence keys (excluded from cross)
};

// Mean over frame-i query rows (across every captured step of this layer)
// of the split of attention mass by key origin. The three buckets sum to 1
// up to softmax rounding because causal masks forbid future keys.
template <class S>
AttentionMassSplit attention_mass_split(const ActivationTrace<S>& trace, index_t layer,
                                        index_t head, index_t frame) {
    AttentionMassSplit acc;
    index_t rows = 0;
    for (const AttnRecord<S>* rec : trace.attention_records(layer)) {
        if (head < 0 || head >= rec->heads)
            throw ConfigError("attention_mass_split: head " + std::to_string(head) +
                              " out of range for layer " + std::to_string(layer));
        for (index_t q = 0; q < rec->tq; ++q) {
            if (rec->meta.query_frames[static_cast<size_t>(q)] != frame) continue;
            double cross = 0, intra = 0, bos = 0;
            for (index_t kk = 0; kk < rec->tk; ++kk) {
                const index_t kf = rec->meta.key_frames[static_cast<size_t>(kk)];
                const double w = rec->at(head, q, kk);
                if (kf == BOS_FRAME)
                    bos += w;
                else if (kf == frame)
                    intra += w;
                else if (kf >= 1 && kf < frame)
                    cross += w;
            }
            acc.cross += cross;
            acc.intra += intra;
            acc.bos += bos;
            ++rows;
        }
    }
    if (rows == 0)
        throw Error("attention_mass_split: no attention captured for layer " +
                    std::to_string(layer) + " with frame-" + std::to_string(frame) + " queries");
    acc.cross /= double(rows);
    acc.intra /= double(rows);
    acc.bos /= double(rows);
    return acc;
}

// Mean attention mass that frame-i queries place on keys from earlier
// frames, BOS excluded. Exactly 0 under a frame_diagonal mask and for
// frame 1 (whose only history is the BOS).
template <class S>
double cross_frame_attention_mass(const ActivationTrace<S>& trace, index_t layer, index_t head,
                                  index_t frame) {
    return attention_mass_split(trace, layer, head, frame).cross;
}

// ---------------------------------------------------------------------------
// leave-one-out layer importance
// ---------------------------------------------------------------------------

inline std::vector<double> loo_noise_grid() { return {0.1, 0.3, 0.5, 0.7, 0.9}; }

struct LeaveOneOut {
    double full_loss = 0;
    std::vector<std::string> labels;  // "enc/l" and "dec/l", or "layer/l"
    std::vector<double> deltas;       // loss(bypass) - loss(full), per layer
    std::vector<double> noise_levels;
};

namespace detail {

// One eps tensor per (noise level, sequence), drawn up front so the full
// model and every bypass variant integrate over identical noise.
template <class S>
std::vector<std::vector<Tensor<S>>> loo_eps(const std::vector<TrainBatch<S>>& batches,
                                            size_t num_levels, std::uint64_t seed) {
    std::vector<std::vector<Tensor<S>>> eps(num_levels);
    for (size_t v = 0; v < num_levels; ++v)
        for (size_t b = 0; b < batches.size(); ++b) {
            Rng rng(mix64(seed, stream::val, static_cast<std::uint64_t>(v * batches.size() + b)));
            eps[v].push_back(Tensor<S>::randn(batches[b].tokens.shape(), rng));
        }
    return eps;
}

template <class S>
double loss_value(const Tensor<S>& v_hat, const Tensor<S>& eps, const Tensor<S>& clean) {
    return double(mse(v_hat, sub(eps, clean)).data()[0]);
}

}  // namespace detail

// Bypass each encoder and decoder block in turn via its residual connection
// and report the change in flow-matching validation loss, averaged over the
// noise-level grid and the given sequences. The model is never mutated.
template <class S>
LeaveOneOut leave_one_out(const SCDModel<S>& model, const std::vector<TrainBatch<S>>& batches,
                          std::uint64_t seed, std::vector<double> levels = loo_noise_grid()) {
    const index_t ell = model.cfg.enc_blocks, m = model.cfg.dec_blocks;
    if (ell + m < 2) throw ConfigError("leave_one_out: model depth must be >= 2");
    if (batches.empty()) throw ConfigError("leave_one_out: need at least one sequence");
    if (levels.empty()) throw ConfigError("leave_one_out: need at least one noise level");
    NoGradGuard guard;
    const index_t T = model.cfg.tokens_per_frame();
    const auto eps = detail::loo_eps(batches, levels.size(), seed);

    auto eval = [&](const std::vector<std::uint8_t>* enc_active,
                    const std::vector<std::uint8_t>* dec_active) {
        double acc = 0;
        for (size_t b = 0; b < batches.size(); ++b) {
            const TrainBatch<S>& batch = batches[b];
            const index_t N = batch.tokens.dim(0) / T;
            Tensor<S> contexts =
                encode_contexts(model, batch.tokens, batch.actions,
                                static_cast<CaptureHooks<S>*>(nullptr), enc_active);
            std::vector<index_t> frame_indices(static_cast<size_t>(N));
            for (index_t i = 0; i < N; ++i) frame_indices[static_cast<size_t>(i)] = i + 1;
            for (size_t v = 0; v < levels.size(); ++v) {
                const std::vector<double> ts(static_cast<size_t>(N), levels[v]);
                Tensor<S> x_t = detail::noised_rows(batch.tokens, eps[v][b], ts, T);
                Tensor<S> v_hat =
                    decode_velocity_batch(model, x_t, ts, contexts, frame_indices,
                                          static_cast<CaptureHooks<S>*>(nullptr), 0, dec_active);
                acc += detail::loss_value(v_hat, eps[v][b], batch.tokens);
            }
        }
        return acc / double(batches.size() * levels.size());
    };

    LeaveOneOut out;
    out.noise_levels = levels;
    out.full_loss = eval(nullptr, nullptr);
    for (index_t l = 0; l < ell; ++l) {
        std::vector<std::uint8_t> flags(static_cast<size_t>(ell), 1);
        flags[static_cast<size_t>(l)] = 0;
        out.labels.push_back("enc/" + std::to_string(l));
        out.deltas.push_back(eval(&flags, nullptr) - out.full_loss);
    }
    for (index_t l = 0; l < m; ++l) {
        std::vector<std::uint8_t> flags(static_cast<size_t>(m), 1);
        flags[static_cast<size_t>(l)] = 0;
        out.labels.push_back("dec/" + std::to_string(l));
        out.deltas.push_back(eval(nullptr, &flags) - out.full_loss);
    }
    return out;
}

template <class S>
LeaveOneOut leave_one_out(const BaselineModel<S>& model, const std::vector<TrainBatch<S>>& batches,
                          std::uint64_t seed, std::vector<double> levels = loo_noise_grid()) {
    const index_t depth = model.cfg.depth;
    if (depth < 2) throw ConfigError("leave_one_out: model depth must be >= 2");
    if (batches.empty()) throw ConfigError("leave_one_out: need at least one sequence");
    if (levels.empty()) throw ConfigError("leave_one_out: need at least one noise level");
    NoGradGuard guard;
    const index_t T = model.cfg.tokens_per_frame();
    const bool tf = model.cfg.train_strategy == TrainStrategy::teacher_forcing;
    const auto eps = detail::loo_eps(batches, levels.size(), seed);

    auto eval = [&](const std::vector<std::uint8_t>* active) {
        double acc = 0;
        for (size_t b = 0; b < batches.size(); ++b) {
            const TrainBatch<S>& batch = batches[b];
            const index_t N = batch.tokens.dim(0) / T;
            for (size_t v = 0; v < levels.size(); ++v) {
                const std::vector<double> ts(static_cast<size_t>(N), levels[v]);
                Tensor<S> x_t = detail::noised_rows(batch.tokens, eps[v][b], ts, T);
                Tensor<S> v_hat =
                    tf ? baseline_forward_tf(model, batch.tokens, x_t, ts, batch.actions,
                                             static_cast<CaptureHooks<S>*>(nullptr), active)
                       : baseline_forward_df(model, x_t, ts, batch.actions,
                                             static_cast<CaptureHooks<S>*>(nullptr), active, 0);
                acc += detail::loss_value(v_hat, eps[v][b], batch.tokens);
            }
        }
        return acc / double(batches.size() * levels.size());
    };

    LeaveOneOut out;
    out.noise_levels = levels;
    out.full_loss = eval(nullptr);
    for (index_t l = 0; l < depth; ++l) {
        std::vector<std::uint8_t> flags(static_cast<size_t>(depth), 1);
        flags[static_cast<size_t>(l)] = 0;
        out.labels.push_back("layer/" + std::to_string(l));
        out.deltas.push_back(eval(&flags) - out.full_loss);
    }
    return out;
}

// ---------------------------------------------------------------------------
// trend report
// ---------------------------------------------------------------------------

// The expected-trend summary: mean off-diagonal cosine per feature layer
// (mid vs last called out) and head-averaged cross-frame mass per attention
// layer. Reported for inspection, never asserted — the published trends are
// properties of large trained models.
struct TrendReport {
    index_t frame = 0;
    std::vector<index_t> sim_layers;
    std::vector<double> mean_cosine;  // mean off-diagonal per layer
    double mid_layer_cosine = std::numeric_limits<double>::quiet_NaN();
    double last_layer_cosine = std::numeric_limits<double>::quiet_NaN();
    std::vector<index_t> mass_layers;
    std::vector<double> cross_mass;  // head-averaged per layer

    json to_json() const {
        json j;
        j["frame"] = frame;
        j["step_similarity"] = {{"layers", sim_layers},
                                {"mean_offdiag_cosine", mean_cosine},
                                {"cosine_mode", "per_token_mean"},
                                {"mid_layer", mid_layer_cosine},
                                {"last_layer", last_layer_cosine}};
        j["cross_frame_mass"] = {{"layers", mass_layers}, {"values", cross_mass}};
        return j;
    }
};

template <class S>
TrendReport trend_report(const ActivationTrace<S>& trace, index_t frame) {
    TrendReport out;
    out.frame = frame;
    for (index_t layer : trace.feature_layers()) {
        if (trace.steps(layer, frame).size() < 2) continue;
        StepSimilarity sim = step_similarity_matrix(trace, layer, frame, SimMetric::cosine);
        const index_t n = sim.matrix.dim(0);
        double acc = 0;
        for (index_t i = 0; i < n; ++i)
            for (index_t j = 0; j < n; ++j)
                if (i != j) acc += sim.matrix.data()[static_cast<size_t>(i * n + j)];
        out.sim_layers.push_back(layer);
        out.mean_cosine.push_back(acc / double(n * (n - 1)));
    }
    if (!out.sim_layers.empty()) {
        out.mid_layer_cosine = out.mean_cosine[out.mean_cosine.size() / 2];
        out.last_layer_cosine = out.mean_cosine.back();
    }
    for (index_t layer : trace.attention_layers()) {
        const auto recs = trace.attention_records(layer);
        bool has_frame_rows = false;
        for (const AttnRecord<S>* r : recs)
            for (index_t qf : r->meta.query_frames)
                if (qf == frame) has_frame_rows = true;
        if (!has_frame_rows || recs.empty()) continue;
        const index_t heads = recs.front()->heads;
        double acc = 0;
        for (index_t h = 0; h < heads; ++h)
            acc += cross_frame_attention_mass(trace, layer, h, frame);
        out.mass_layers.push_back(layer);
        out.cross_mass.push_back(acc / double(heads));
    }
    return out;
}

// ---------------------------------------------------------------------------
// report emission
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

}  // namespace detail

// Plain numeric rows, one matrix row per line.
inline std::string matrix_csv(const Tensor<double>& m) {
    if (m.ndim() != 2) throw ShapeError("matrix_csv: expected a 2-d matrix");
    std::string out;
    const index_t rows = m.dim(0), cols = m.dim(1);
    for (index_t r = 0; r < rows; ++r) {
        for (index_t c = 0; c < cols; ++c) {
            if (c) out += ',';
            out += detail::fmt_double(m.data()[static_cast<size_t>(r * cols + c)]);
        }
        out += '\n';
    }
    return out;
}

inline std::string curve_csv(const std::vector<index_t>& x, const std::vector<double>& y,
                             const std::string& header = "layer,value") {
    if (x.size() != y.size()) throw ShapeError("curve_csv: column length mismatch");
    std::string out = header + "\n";
    for (size_t i = 0; i < x.size(); ++i)
        out += std::to_string(x[i]) + "," + detail::fmt_double(y[i]) + "\n";
    return out;
}

inline std::string labeled_curve_csv(const std::vector<std::string>& labels,
                                     const std::vector<double>& y,
                                     const std::string& header = "layer,delta") {
    if (labels.size() != y.size()) throw ShapeError("labeled_curve_csv: column length mismatch");
    std::string out = header + "\n";
    for (size_t i = 0; i < labels.size(); ++i)
        out += labels[i] + "," + detail::fmt_double(y[i]) + "\n";
    return out;
}

inline json step_similarity_json(const StepSimilarity& sim) {
    const index_t n = sim.matrix.dim(0);
    double off = 0, lo = std::numeric_limits<double>::infinity();
    for (index_t i = 0; i < n; ++i)
        for (index_t j = 0; j < n; ++j)
            if (i != j) {
                const double v = sim.matrix.data()[static_cast<size_t>(i * n + j)];
                off += v;
                lo = std::min(lo, v);
            }
    json j;
    j["metric"] = sim.metric;
    if (!sim.cosine_mode.empty()) j["cosine_mode"] = sim.cosine_mode;
    j["steps"] = sim.steps;
    j["mean_offdiag"] = n > 1 ? off / double(n * (n - 1)) : 0.0;
    j["min_offdiag"] = n > 1 ? lo : 0.0;
    return j;
}

inline json leave_one_out_json(const LeaveOneOut& loo) {
    json j;
    j["full_loss"] = loo.full_loss;
    j["noise_levels"] = loo.noise_levels;
    j["layers"] = loo.labels;
    j["deltas"] = loo.deltas;
    return j;
}

}  // namespace scd
