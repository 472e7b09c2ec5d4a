// Single entry point for the workbench: data generation, training, rollout,
// probing, benchmarking, and container inspection. Every command validates
// its config before any compute, embeds the config snapshot in whatever it
// writes, and is deterministic for a fixed seed. Exit codes: 0 success,
// 1 runtime failure, 2 config or usage failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "scd/checkpoint.hpp"
#include "scd/config.hpp"
#include "scd/metrics.hpp"
#include "scd/probes.hpp"

namespace {

using namespace scd;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << content;
    if (!out) throw IoError("failed writing '" + path + "'");
}

std::vector<index_t> drawn_actions(std::uint64_t seed, index_t n, index_t vocab) {
    Rng rng(mix64(seed, stream::data, 0xac70));
    std::vector<index_t> a(static_cast<size_t>(n));
    for (auto& v : a)
        v = static_cast<index_t>(rng.uniform_int(static_cast<std::uint64_t>(vocab)));
    return a;
}

template <class S>
TrainBatch<S> to_batch(const SyntheticSample& s, const TokenizerConfig& tok) {
    TrainBatch<S> b;
    b.tokens = normalize_tokens<S>(tok, sample_tokens<S>(s, tok.patch_size), s.channels);
    b.actions = s.actions;
    return b;
}

// Pixel view of one rolled-out frame: denormalize, unpatchify, clamp to
// [0,1] so the result is directly comparable under psnr/ssim.
Tensor<float> pixel_frame(const TokenizerConfig& tok, const DataConfig& d,
                          const Tensor<float>& tokens, index_t i) {
    const index_t p = tok.patch_size;
    const index_t T = (d.height / p) * (d.width / p);
    Tensor<float> denorm = denormalize_tokens(tok, slice(tokens, 0, i * T, T), d.channels);
    Tensor<float> frame = unpatchify(denorm, d.height, d.width, d.channels, p);
    for (float& v : frame.mutable_data()) v = std::min(1.0f, std::max(0.0f, v));
    return frame;
}

Tensor<float> tokens_to_pixels(const TokenizerConfig& tok, const DataConfig& d,
                               const Tensor<float>& tokens) {
    const index_t p = tok.patch_size;
    const index_t T = (d.height / p) * (d.width / p);
    if (tokens.ndim() != 2 || tokens.dim(0) % T != 0)
        throw ShapeError("tokens " + shape_str(tokens.shape()) + " do not tile into frames of " +
                         std::to_string(T));
    const index_t N = tokens.dim(0) / T;
    std::vector<float> buf;
    buf.reserve(static_cast<size_t>(N * d.height * d.width * d.channels));
    for (index_t i = 0; i < N; ++i) {
        const Tensor<float> frame = pixel_frame(tok, d, tokens, i);
        buf.insert(buf.end(), frame.data().begin(), frame.data().end());
    }
    return Tensor<float>::from_data({N, d.height, d.width, d.channels}, buf);
}

// The live model for one run; exactly one of scd/dit is meaningful, per
// run.family. Params alias the model weights, so optimizer updates and
// load_train_state are visible to the forward passes.
struct ModelBundle {
    RunConfig run;
    SCDModel<float> scd;
    BaselineModel<float> dit;
    NamedParams<float> params;
    NamedParams<float> ema;
};

ModelBundle fresh_models(const RunConfig& run) {
    ModelBundle b;
    b.run = run;
    if (run.is_scd()) {
        b.scd = SCDModel<float>::init(run.scd, run.train.seed);
        b.params = b.scd.named_params();
    } else {
        b.dit = BaselineModel<float>::init(run.dit, run.train.seed);
        b.params = b.dit.named_params();
    }
    b.ema = clone_params(b.params);
    return b;
}

Checkpoint load_model_checkpoint(const std::string& path) {
    Checkpoint ck = Checkpoint::load(path);
    if (ck.meta.value("kind", std::string()) != "checkpoint")
        throw IoError("'" + path + "' is not a model checkpoint");
    return ck;
}

ModelBundle bundle_from_checkpoint(const Checkpoint& ck, bool use_ema) {
    ModelBundle b = fresh_models(RunConfig::from_snapshot(ck.config));
    load_train_state<float>(ck, b.params, nullptr, &b.ema);
    if (use_ema) {
        if (!ck.has("ema/" + b.params.front().first))
            throw Error("checkpoint carries no EMA weights");
        for (size_t i = 0; i < b.params.size(); ++i)
            b.params[i].second.mutable_data() = b.ema[i].second.data();
    }
    return b;
}

// What must match between a checkpoint and a resuming run: the model, the
// data, and every train key that shapes the per-step computation. The total
// step target and logging cadence are plans, not identity, and the other
// sections do not touch training at all.
json train_identity(const json& snapshot) {
    json j = snapshot;
    j.erase("rollout");
    j.erase("probe");
    j.erase("bench");
    if (j.contains("train"))
        for (const char* k : {"steps", "log_every", "val_every", "val_sequences", "val_seed"})
            j["train"].erase(k);
    return j;
}

json bench_report_json(const BenchReport& r) {
    return {{"family", r.family},
            {"sec_per_frame", r.sec_per_frame},
            {"frames_per_second", r.frames_per_second},
            {"bp_per_frame", r.bp_per_frame},
            {"block_invocations", r.block_invocations},
            {"expected_invocations", r.expected_invocations},
            {"peak_cache_tokens", r.peak_cache_tokens},
            {"counted_matches_analytic", r.counted_matches_analytic}};
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenOpts {
    std::string config, out;
    std::vector<std::string> sets;
};

void cmd_gen_data(const GenOpts& o) {
    RunConfig run = RunConfig::load(o.config, o.sets);
    std::vector<SyntheticSample> samples = gen_dataset(run.data, run.num_sequences, run.data_seed);
    save_dataset(o.out, samples, run.data);
    std::printf("wrote %s: %lld sequences of %lld frames (%lldx%lldx%lld)\n", o.out.c_str(),
                static_cast<long long>(run.num_sequences),
                static_cast<long long>(run.data.num_frames),
                static_cast<long long>(run.data.height), static_cast<long long>(run.data.width),
                static_cast<long long>(run.data.channels));
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOpts {
    std::string config, data, out, resume, log;
    std::vector<std::string> sets;
};

void cmd_train(const TrainOpts& o) {
    RunConfig run = RunConfig::load(o.config, o.sets);
    auto [samples, dcfg] = load_dataset(o.data);
    // The dataset owns the data section: adopt its geometry so the model is
    // built for the frames it will actually see.
    run.data = dcfg;
    run.num_sequences = static_cast<index_t>(samples.size());
    run.finalize();
    run.validate();

    std::vector<TrainBatch<float>> all;
    all.reserve(samples.size());
    for (const auto& s : samples) all.push_back(to_batch<float>(s, run.tokenizer));

    std::vector<TrainBatch<float>> train_set = all, val_set;
    if (run.val_every > 0) {
        if (static_cast<index_t>(all.size()) <= run.val_sequences)
            throw ConfigError("train.val_sequences leaves no training sequences");
        val_set.assign(all.end() - run.val_sequences, all.end());
        train_set.assign(all.begin(), all.end() - run.val_sequences);
    }

    ModelBundle b = fresh_models(run);
    AdamW<float> opt(run.train.optim(run.train.lr_at(0)));
    index_t start = 0;
    if (!o.resume.empty()) {
        Checkpoint ck = load_model_checkpoint(o.resume);
        Checkpoint ident;
        ident.config = train_identity(ck.config);
        ident.require_config_match(train_identity(run.to_json()));
        load_train_state(ck, b.params, &opt, &b.ema);
        start = ck.step;
    }

    const std::string log_path = o.log.empty() ? o.out + ".log.jsonl" : o.log;
    std::ofstream log(log_path,
                      o.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot open log '" + log_path + "'");

    double bp_clean = 0, bp_noisy = 0;
    if (run.is_scd()) {
        BpCosts costs = bp_accounting(run.scd.enc_blocks, run.scd.dec_blocks, run.train.K);
        bp_clean = costs.per_clean_batch.value();
        bp_noisy = costs.per_noisy_batch.value();
    } else {
        bp_clean = bp_noisy = double(run.dit.depth);
    }

    for (index_t step = start; step < run.train.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        auto batch = batch_at_step(train_set, run.train.batch_size, step);
        Rng rng = step_rng(run.train.seed, step);
        opt.set_lr(run.train.lr_at(step));
        StepStats st =
            run.is_scd()
                ? scd_train_step(b.scd, b.params, opt, batch, run.sched, run.train.K,
                                 run.train.corrupt_eta_train, rng, &b.ema, run.train.ema_decay)
                : baseline_train_step(b.dit, b.params, opt, batch, run.sched, rng, &b.ema,
                                      run.train.ema_decay);
        const double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
        if ((step + 1) % run.log_every == 0 || step + 1 == run.train.steps) {
            TrainLogEntry e;
            e.step = step + 1;
            e.loss = st.loss;
            e.lr = st.lr;
            e.wallclock_ms = ms;
            e.bp_clean = bp_clean;
            e.bp_noisy = bp_noisy;
            log << log_json_line(e) << "\n";
        }
        if (run.val_every > 0 && (step + 1) % run.val_every == 0) {
            Rng vr(mix64(run.val_seed, stream::val, static_cast<std::uint64_t>(step)));
            const double vl = run.is_scd()
                                  ? scd_eval_loss(b.scd, val_set, run.sched, 1, vr)
                                  : baseline_eval_loss(b.dit, val_set, run.sched, vr);
            char buf[96];
            std::snprintf(buf, sizeof(buf), "{\"step\":%lld,\"val_loss\":%.9g}",
                          static_cast<long long>(step + 1), vl);
            log << buf << "\n";
        }
    }
    log.flush();

    Checkpoint ck;
    ck.config = run.to_json();
    ck.meta["kind"] = "checkpoint";
    ck.meta["family"] = run.family;
    ck.step = run.train.steps;
    save_train_state(ck, b.params, &opt, &b.ema);
    ck.save(o.out);
    std::printf("trained %s steps %lld..%lld, checkpoint %s, log %s\n", run.family.c_str(),
                static_cast<long long>(start), static_cast<long long>(run.train.steps),
                o.out.c_str(), log_path.c_str());
}

// ---------------------------------------------------------------------------
// rollout
// ---------------------------------------------------------------------------

struct RolloutOpts {
    std::string ckpt, out, trace, data, layers = "all";
    index_t frames = -1, steps = -1, context = -1, seq = 0;
    std::int64_t seed = -1;
    double cfg_scale = -1, cfg_eta = -1;
    bool capture_features = false, capture_attn = false, use_ema = false;
};

void cmd_rollout(const RolloutOpts& o) {
    Checkpoint ck = load_model_checkpoint(o.ckpt);
    RunConfig run = RunConfig::from_snapshot(ck.config);
    if (o.frames >= 0) run.rollout.num_frames = o.frames;
    if (o.steps >= 0) run.rollout_steps = o.steps;
    if (o.seed >= 0) run.rollout.seed = static_cast<std::uint64_t>(o.seed);
    if (o.cfg_scale >= 0) run.rollout.corruption.cfg_scale = o.cfg_scale;
    if (o.cfg_eta >= 0) run.rollout.corruption.cfg_eta = o.cfg_eta;
    if (o.context >= 0) run.context_frames = o.context;
    run.finalize();
    run.validate();

    ModelBundle b = fresh_models(run);
    load_train_state<float>(ck, b.params, nullptr, &b.ema);
    if (o.use_ema) {
        if (!ck.has("ema/" + b.params.front().first))
            throw Error("checkpoint carries no EMA weights");
        for (size_t i = 0; i < b.params.size(); ++i)
            b.params[i].second.mutable_data() = b.ema[i].second.data();
    }

    const index_t N = run.rollout.num_frames, ctx = run.context_frames;
    const index_t T = run.is_scd() ? run.scd.tokens_per_frame() : run.dit.tokens_per_frame();
    std::vector<index_t> actions;
    Tensor<float> ctx_tokens;
    std::optional<SyntheticSample> gt;
    if (!o.data.empty()) {
        auto [samples, dcfg] = load_dataset(o.data);
        if (o.seq < 0 || o.seq >= static_cast<index_t>(samples.size()))
            throw ConfigError("--seq out of range for '" + o.data + "'");
        gt = samples[static_cast<size_t>(o.seq)];
        if (gt->num_frames < N)
            throw ConfigError("sequence holds " + std::to_string(gt->num_frames) +
                              " frames, rollout wants " + std::to_string(N));
        TrainBatch<float> tb = to_batch<float>(*gt, run.tokenizer);
        actions.assign(tb.actions.begin(), tb.actions.begin() + N);
        if (ctx > 0) ctx_tokens = slice(tb.tokens, 0, 0, ctx * T);
    } else {
        if (ctx > 0)
            throw ConfigError("rollout.context_frames needs --data for the context frames");
        const index_t vocab = run.is_scd() ? run.scd.action_vocab : run.dit.action_vocab;
        actions = drawn_actions(run.rollout.seed, N, vocab);
    }

    ActivationTrace<float> trace;
    CaptureHooks<float> hooks_store;
    CaptureHooks<float>* hooks = nullptr;
    if (o.capture_features || o.capture_attn) {
        trace.config = run.to_json();
        trace.meta["family"] = run.family;
        trace.meta["frames"] = N;
        trace.meta["steps"] = run.rollout_steps;
        trace.meta["context_frames"] = ctx;
        hooks_store = trace.hooks(o.capture_features, o.capture_attn);
        if (o.layers != "all") {
            std::set<index_t> keep;
            std::stringstream ss(o.layers);
            std::string tok;
            while (std::getline(ss, tok, ','))
                keep.insert(static_cast<index_t>(std::stoll(tok)));
            auto inner_f = hooks_store.on_feature;
            auto inner_a = hooks_store.on_attention;
            hooks_store.on_feature = [keep, inner_f](index_t l, index_t s, index_t f,
                                                     const Tensor<float>& t) {
                if (keep.count(l)) inner_f(l, s, f, t);
            };
            hooks_store.on_attention = [keep, inner_a](const AttnMeta& m,
                                                       const AttnCapture<float>& c) {
                if (keep.count(m.layer)) inner_a(m, c);
            };
        }
        hooks = &hooks_store;
    }

    Tensor<float> tokens;
    if (run.is_scd())
        tokens = ctx > 0 ? scd_rollout_conditioned(b.scd, ctx_tokens, ctx, actions, run.rollout,
                                                   hooks)
                         : scd_rollout(b.scd, actions, run.rollout, hooks);
    else
        tokens = ctx > 0 ? baseline_rollout_conditioned(b.dit, ctx_tokens, ctx, actions,
                                                        run.rollout, hooks)
                         : baseline_rollout(b.dit, actions, run.rollout, hooks);

    Checkpoint fc;
    fc.config = run.to_json();
    fc.meta["kind"] = "frames";
    fc.meta["family"] = run.family;
    fc.meta["actions"] = actions;
    fc.meta["context_frames"] = ctx;
    fc.put("tokens", tokens);
    fc.put("frames", tokens_to_pixels(run.tokenizer, run.data, tokens));
    fc.save(o.out);
    std::printf("wrote %s: %lld frames, %lld denoise steps\n", o.out.c_str(),
                static_cast<long long>(N), static_cast<long long>(run.rollout_steps));

    if (gt) {
        // Ground truth available: score every generated frame against it.
        std::vector<MetricRow> rows;
        double mean_psnr = 0;
        for (index_t i = ctx; i < N; ++i) {
            MetricRow r;
            r.seq_id = o.seq;
            r.frame = i + 1;
            Tensor<float> gen = pixel_frame(run.tokenizer, run.data, tokens, i);
            Tensor<float> ref = frame_tensor<float>(*gt, i);
            r.psnr = psnr(gen, ref);
            r.ssim = ssim(gen, ref);
            mean_psnr += r.psnr;
            rows.push_back(r);
        }
        mean_psnr /= double(rows.size());
        const std::string mpath = o.out + ".metrics.csv";
        write_text(mpath, metrics_csv(rows));
        std::printf("wrote %s: mean psnr %.3f dB over %zu generated frames\n", mpath.c_str(),
                    mean_psnr, rows.size());
    }

    if (hooks) {
        const std::string tpath = o.trace.empty() ? o.out + ".trace" : o.trace;
        trace.save(tpath);
        std::printf("wrote %s: %lld feature tensors, %lld attention maps\n", tpath.c_str(),
                    static_cast<long long>(trace.num_features()),
                    static_cast<long long>(trace.num_attention_records()));
    }
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

struct ProbeOpts {
    std::string kind, trace, ckpt, data, out_dir = ".";
    std::string metric;
    index_t layer = -2, frame = -1, head = -2, ref_step = -1, k = -1, sequences = -1;
    std::int64_t seed = -1;
};

index_t pick_layer(const ActivationTrace<float>& trace, index_t requested) {
    if (requested >= 0) return requested;
    auto layers = trace.feature_layers();
    if (layers.empty()) throw Error("trace holds no feature captures");
    return layers.back();
}

SimMetric metric_from(const std::string& s) {
    if (s == "cosine") return SimMetric::cosine;
    if (s == "mse") return SimMetric::mse;
    if (s == "cosine_flat") return SimMetric::cosine_flat;
    throw ConfigError("probe.metric must be cosine, mse, or cosine_flat, got '" + s + "'");
}

void cmd_probe(const ProbeOpts& o) {
    const std::string sep = o.out_dir.empty() || o.out_dir.back() == '/' ? "" : "/";
    auto out_path = [&](const char* name) { return o.out_dir + sep + name; };

    if (o.kind == "leave-one-out") {
        if (o.ckpt.empty() || o.data.empty())
            throw ConfigError("probe leave-one-out needs --ckpt and --data");
        Checkpoint ck = load_model_checkpoint(o.ckpt);
        ModelBundle b = bundle_from_checkpoint(ck, false);
        RunConfig& run = b.run;
        if (o.sequences >= 1) run.probe.sequences = o.sequences;
        if (o.seed >= 0) run.probe.seed = static_cast<std::uint64_t>(o.seed);
        run.probe.validate();
        auto [samples, dcfg] = load_dataset(o.data);
        if (static_cast<index_t>(samples.size()) < run.probe.sequences)
            throw ConfigError("dataset holds " + std::to_string(samples.size()) +
                              " sequences, probe.sequences wants " +
                              std::to_string(run.probe.sequences));
        std::vector<TrainBatch<float>> batches;
        for (index_t i = 0; i < run.probe.sequences; ++i)
            batches.push_back(to_batch<float>(samples[static_cast<size_t>(i)], run.tokenizer));
        LeaveOneOut r = run.is_scd() ? leave_one_out(b.scd, batches, run.probe.seed)
                                     : leave_one_out(b.dit, batches, run.probe.seed);
        write_text(out_path("loo.csv"), labeled_curve_csv(r.labels, r.deltas));
        write_text(out_path("loo.json"), leave_one_out_json(r).dump(2) + "\n");
        std::printf("wrote %s (%lld rows) and %s\n", out_path("loo.csv").c_str(),
                    static_cast<long long>(r.labels.size()), out_path("loo.json").c_str());
        return;
    }

    if (o.trace.empty()) throw ConfigError("probe " + o.kind + " needs --trace");
    ActivationTrace<float> trace = ActivationTrace<float>::load(o.trace);
    RunConfig run = RunConfig::from_snapshot(trace.config);
    if (!o.metric.empty()) run.probe.metric = o.metric;
    if (o.layer != -2) run.probe.layer = o.layer;
    if (o.frame >= 1) run.probe.frame = o.frame;
    if (o.head != -2) run.probe.head = o.head;
    if (o.ref_step >= 0) run.probe.ref_step = o.ref_step;
    if (o.k >= 1) run.probe.k = o.k;
    run.probe.validate();
    const ProbeConfig& pc = run.probe;

    if (o.kind == "step-sim") {
        const index_t layer = pick_layer(trace, pc.layer);
        StepSimilarity sim =
            step_similarity_matrix(trace, layer, pc.frame, metric_from(pc.metric));
        write_text(out_path("step_sim.csv"), matrix_csv(sim.matrix));
        json j = step_similarity_json(sim);
        j["layer"] = layer;
        j["frame"] = pc.frame;
        write_text(out_path("step_sim.json"), j.dump(2) + "\n");
        std::printf("wrote %s (%lld x %lld, %s) and %s\n", out_path("step_sim.csv").c_str(),
                    static_cast<long long>(sim.matrix.dim(0)),
                    static_cast<long long>(sim.matrix.dim(1)), pc.metric.c_str(),
                    out_path("step_sim.json").c_str());
    } else if (o.kind == "layer-dist") {
        LayerCurve c = per_layer_mean_distance(trace, pc.frame);
        write_text(out_path("layer_dist.csv"), curve_csv(c.layers, c.values));
        std::printf("wrote %s (%lld layers)\n", out_path("layer_dist.csv").c_str(),
                    static_cast<long long>(c.layers.size()));
    } else if (o.kind == "pca") {
        const index_t layer = pick_layer(trace, pc.layer);
        PcaAlignment pa = pca_alignment(trace, layer, pc.frame, pc.ref_step, pc.k);
        write_text(out_path("pca.csv"),
                   curve_csv(pa.steps, pa.energy_ratio, "step,energy_ratio"));
        json j = {{"layer", layer},
                  {"frame", pc.frame},
                  {"ref_step", pa.ref_step},
                  {"k", pa.k},
                  {"steps", pa.steps},
                  {"energy_ratio", pa.energy_ratio},
                  {"singular_values", pa.singular_values}};
        write_text(out_path("pca.json"), j.dump(2) + "\n");
        std::printf("wrote %s (%lld steps) and %s\n", out_path("pca.csv").c_str(),
                    static_cast<long long>(pa.steps.size()), out_path("pca.json").c_str());
    } else if (o.kind == "xframe-mass") {
        std::string csv = "layer,head,frame,cross,intra,bos\n";
        index_t max_frame = trace.meta.value("frames", index_t(0));
        if (max_frame < 1) max_frame = run.rollout.num_frames;
        index_t rows = 0;
        for (index_t layer : trace.attention_layers()) {
            auto recs = trace.attention_records(layer);
            if (recs.empty()) continue;
            const index_t heads = recs.front()->heads;
            for (index_t h = 0; h < heads; ++h) {
                if (pc.head >= 0 && h != pc.head) continue;
                for (index_t f = 1; f <= max_frame; ++f) {
                    if (o.frame >= 1 && f != pc.frame) continue;
                    AttentionMassSplit m;
                    try {
                        m = attention_mass_split(trace, layer, h, f);
                    } catch (const Error&) {
                        continue;  // no query rows for this frame at this layer
                    }
                    char line[128];
                    std::snprintf(line, sizeof(line), "%lld,%lld,%lld,%.9g,%.9g,%.9g\n",
                                  static_cast<long long>(layer), static_cast<long long>(h),
                                  static_cast<long long>(f), m.cross, m.intra, m.bos);
                    csv += line;
                    ++rows;
                }
            }
        }
        if (rows == 0) throw Error("trace holds no attention captures to bucket");
        write_text(out_path("xframe_mass.csv"), csv);
        std::printf("wrote %s (%lld rows)\n", out_path("xframe_mass.csv").c_str(),
                    static_cast<long long>(rows));
    } else if (o.kind == "trend") {
        TrendReport tr = trend_report(trace, pc.frame);
        write_text(out_path("trend.json"), tr.to_json().dump(2) + "\n");
        std::printf("wrote %s\n", out_path("trend.json").c_str());
    } else {
        throw ConfigError("unknown probe '" + o.kind +
                          "'; expected step-sim, layer-dist, pca, xframe-mass, leave-one-out, "
                          "or trend");
    }
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchOpts {
    std::string config, out, pair;
    std::vector<std::string> sets;
    index_t steps = -1, frames = -1, trials = -1, warmup = -1, hidden = -1, heads = -1;
};

BenchReport bench_one(const RunConfig& run, const std::string& name) {
    const BenchConfig& bc = run.bench;
    RolloutConfig rc;
    rc.num_frames = bc.frames;
    rc.sampler = make_sampler(bc.steps, 1.0);
    rc.seed = run.rollout.seed;
    auto geometry = [&](auto& mc) {
        mc.frame_h = run.data.height;
        mc.frame_w = run.data.width;
        mc.channels = run.data.channels;
        mc.patch_size = run.tokenizer.patch_size;
        mc.action_vocab = run.data.action_vocab;
        if (bc.hidden > 0) {
            mc.hidden = bc.hidden;
            mc.heads = bc.heads;
        }
        mc.validate();
    };
    const std::vector<index_t> actions =
        drawn_actions(rc.seed, bc.frames, run.data.action_vocab);
    if (name.rfind("scd", 0) == 0) {
        SCDConfig mc = SCDConfig::variant_named(name);
        geometry(mc);
        SCDModel<float> m = SCDModel<float>::init(mc, run.train.seed);
        return bench_scd(m, actions, rc, bc.warmup, bc.trials);
    }
    if (name.rfind("dit", 0) == 0 || name.rfind("far", 0) == 0) {
        BaselineConfig mc = BaselineConfig::variant_named(name);
        geometry(mc);
        BaselineModel<float> m = BaselineModel<float>::init(mc, run.train.seed);
        return bench_baseline(m, actions, rc, bc.warmup, bc.trials);
    }
    throw ConfigError("bench.pair entries must start with scd or dit, got '" + name + "'");
}

void cmd_bench(const BenchOpts& o) {
    RunConfig run = RunConfig::load(o.config, o.sets);
    if (!o.pair.empty()) run.bench.pair = o.pair;
    if (o.steps >= 1) run.bench.steps = o.steps;
    if (o.frames >= 1) run.bench.frames = o.frames;
    if (o.trials >= 1) run.bench.trials = o.trials;
    if (o.warmup >= 0) run.bench.warmup = o.warmup;
    if (o.hidden >= 0) run.bench.hidden = o.hidden;
    if (o.heads >= 1) run.bench.heads = o.heads;
    run.bench.validate();

    auto [name_a, name_b] = run.bench.variants();
    BenchReport ra = bench_one(run, name_a);
    BenchReport rb = bench_one(run, name_b);

    char ratio[64];
    std::snprintf(ratio, sizeof(ratio), "%lld:%lld", static_cast<long long>(ra.bp_per_frame),
                  static_cast<long long>(rb.bp_per_frame));
    json doc = {{"pair", {name_a, name_b}},
                {"steps", run.bench.steps},
                {"frames", run.bench.frames},
                {"trials", run.bench.trials},
                {"bp_per_frame_ratio", ratio},
                {"sec_per_frame_ratio", ra.sec_per_frame / rb.sec_per_frame},
                {"reports", {bench_report_json(ra), bench_report_json(rb)}},
                {"config", run.to_json()}};
    const std::string text = doc.dump(2) + "\n";
    std::fputs(text.c_str(), stdout);
    if (!o.out.empty()) write_text(o.out, text);

    for (const BenchReport* r : {&ra, &rb})
        if (!r->counted_matches_analytic)
            throw Error("bench self-check failed: " + r->family + " counted " +
                        std::to_string(r->block_invocations) + " block invocations, analytic " +
                        std::to_string(r->expected_invocations));
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

struct InspectOpts {
    std::string file;
    bool as_json = false;
};

void cmd_inspect(const InspectOpts& o) {
    Checkpoint ck = Checkpoint::load(o.file);
    const std::string kind = ck.meta.value("kind", std::string("unknown"));
    if (o.as_json) {
        json doc = {{"file", o.file},
                    {"kind", kind},
                    {"step", ck.step},
                    {"config", ck.config}};
        json meta = json::object();
        for (const auto& [k, v] : ck.meta.items()) {
            if (v.is_structured())
                meta[k] = {{"entries", v.size()}};
            else
                meta[k] = v;
        }
        doc["meta"] = meta;
        json tensors = json::array();
        for (const std::string& name : ck.names()) {
            const Shape s = ck.shape_of(name);
            tensors.push_back({{"name", name}, {"shape", std::vector<index_t>(s.begin(), s.end())}});
        }
        doc["tensors"] = tensors;
        std::fputs((doc.dump(2) + "\n").c_str(), stdout);
        return;
    }
    std::printf("%s: kind %s, step %lld\n", o.file.c_str(), kind.c_str(),
                static_cast<long long>(ck.step));
    for (const auto& [k, v] : ck.meta.items()) {
        if (k == "kind") continue;
        if (v.is_structured())
            std::printf("  meta %s: %zu entries\n", k.c_str(), v.size());
        else
            std::printf("  meta %s: %s\n", k.c_str(), v.dump().c_str());
    }
    const auto names = ck.names();
    std::printf("  %zu tensors\n", names.size());
    const size_t show = std::min<size_t>(names.size(), 12);
    for (size_t i = 0; i < show; ++i)
        std::printf("    %s %s\n", names[i].c_str(), shape_str(ck.shape_of(names[i])).c_str());
    if (names.size() > show) std::printf("    ... %zu more\n", names.size() - show);
    if (!ck.config.empty()) std::printf("  config sections: %zu\n", ck.config.size());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"separable causal diffusion workbench"};
    app.require_subcommand(1);

    auto gen = std::make_shared<GenOpts>();
    {
        CLI::App* c = app.add_subcommand("gen-data", "render a synthetic bouncing-sprite dataset");
        c->add_option("--config", gen->config, "JSON run config");
        c->add_option("--set", gen->sets, "dotted key=value override (repeatable)");
        c->add_option("--out", gen->out, "dataset file to write")->required();
        c->callback([gen] { cmd_gen_data(*gen); });
    }

    auto tr = std::make_shared<TrainOpts>();
    {
        CLI::App* c = app.add_subcommand("train", "train a model on a dataset");
        c->add_option("--config", tr->config, "JSON run config");
        c->add_option("--set", tr->sets, "dotted key=value override (repeatable)");
        c->add_option("--data", tr->data, "dataset file")->required();
        c->add_option("--out", tr->out, "checkpoint file to write")->required();
        c->add_option("--resume", tr->resume, "checkpoint to resume from");
        c->add_option("--log", tr->log, "JSON-lines log path (default: <out>.log.jsonl)");
        c->callback([tr] { cmd_train(*tr); });
    }

    auto ro = std::make_shared<RolloutOpts>();
    {
        CLI::App* c = app.add_subcommand("rollout", "generate frames from a checkpoint");
        c->add_option("--ckpt", ro->ckpt, "model checkpoint")->required();
        c->add_option("--out", ro->out, "frame container to write")->required();
        c->add_option("--frames", ro->frames, "frames to generate");
        c->add_option("--steps", ro->steps, "denoise steps per frame");
        c->add_option("--seed", ro->seed, "rollout seed");
        c->add_option("--cfg-scale", ro->cfg_scale, "guidance scale");
        c->add_option("--cfg-eta", ro->cfg_eta, "negative-branch corruption std");
        c->add_option("--data", ro->data, "dataset supplying actions (and context frames)");
        c->add_option("--seq", ro->seq, "sequence index within --data");
        c->add_option("--context", ro->context, "ground-truth context frames from --data");
        c->add_flag("--ema", ro->use_ema, "roll out the EMA weights");
        c->add_flag("--capture-features", ro->capture_features, "record per-layer activations");
        c->add_flag("--capture-attn", ro->capture_attn, "record attention maps");
        c->add_option("--capture-layers", ro->layers, "'all' or comma-separated depth indices");
        c->add_option("--trace", ro->trace, "trace path (default: <out>.trace)");
        c->callback([ro] { cmd_rollout(*ro); });
    }

    auto pr = std::make_shared<ProbeOpts>();
    {
        CLI::App* c = app.add_subcommand("probe", "run a diagnostic over a trace or checkpoint");
        c->add_option("name", pr->kind,
                      "step-sim | layer-dist | pca | xframe-mass | leave-one-out | trend")
            ->required();
        c->add_option("--trace", pr->trace, "activation trace file");
        c->add_option("--ckpt", pr->ckpt, "model checkpoint (leave-one-out)");
        c->add_option("--data", pr->data, "dataset file (leave-one-out)");
        c->add_option("--out-dir", pr->out_dir, "directory for CSV/JSON reports");
        c->add_option("--metric", pr->metric, "cosine | mse | cosine_flat");
        c->add_option("--layer", pr->layer, "depth index (default: last captured)");
        c->add_option("--frame", pr->frame, "frame index (default 1)");
        c->add_option("--head", pr->head, "attention head (default: all)");
        c->add_option("--ref-step", pr->ref_step, "pca reference step");
        c->add_option("--k", pr->k, "pca subspace rank");
        c->add_option("--sequences", pr->sequences, "leave-one-out eval sequences");
        c->add_option("--seed", pr->seed, "probe seed");
        c->callback([pr] { cmd_probe(*pr); });
    }

    auto be = std::make_shared<BenchOpts>();
    {
        CLI::App* c = app.add_subcommand("bench", "time a model pair on the same rollout");
        c->add_option("--config", be->config, "JSON run config");
        c->add_option("--set", be->sets, "dotted key=value override (repeatable)");
        c->add_option("--pair", be->pair, "two variant names, e.g. scd-b,dit-b");
        c->add_option("--steps", be->steps, "denoise steps per frame");
        c->add_option("--frames", be->frames, "frames per timed rollout");
        c->add_option("--trials", be->trials, "timed trials (median reported)");
        c->add_option("--warmup", be->warmup, "untimed warmup rollouts");
        c->add_option("--hidden", be->hidden, "width override (0: native variant width)");
        c->add_option("--heads", be->heads, "heads under the width override");
        c->add_option("--out", be->out, "also write the JSON report here");
        c->callback([be] { cmd_bench(*be); });
    }

    auto in = std::make_shared<InspectOpts>();
    {
        CLI::App* c = app.add_subcommand("inspect", "describe any container file");
        c->add_option("--file", in->file, "container to describe")->required();
        c->add_flag("--json", in->as_json, "emit JSON instead of text");
        c->callback([in] { cmd_inspect(*in); });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
