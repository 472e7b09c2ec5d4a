#pragma once

#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "scd/baseline_model.hpp"
#include "scd/data.hpp"
#include "scd/diffusion.hpp"
#include "scd/rollout.hpp"
#include "scd/scd_model.hpp"
#include "scd/train.hpp"

// One JSON document drives every command: sections {model, train, data,
// rollout, probe, bench}, each field addressable as a dotted key for
// `--set key=value` overrides. Unknown keys are rejected so typos fail
// loudly before any compute, and the canonical snapshot from to_json() is
// embedded in every artifact this tool writes.

namespace scd {

// Probe selection and knobs shared by the probe subcommands.
struct ProbeConfig {
    std::string metric = "cosine";  // cosine | mse | cosine_flat
    index_t layer = -1;             // -1: last captured layer
    index_t frame = 1;
    index_t head = -1;     // -1: every head (one CSV row per head)
    index_t ref_step = 0;  // pca reference denoise step
    index_t k = 2;         // pca subspace rank
    index_t sequences = 4; // leave-one-out eval sequences
    std::uint64_t seed = 0;

    void validate() const {
        if (metric != "cosine" && metric != "mse" && metric != "cosine_flat")
            throw ConfigError("probe.metric must be cosine, mse, or cosine_flat");
        if (frame < 1) throw ConfigError("probe.frame must be >= 1");
        if (ref_step < 0) throw ConfigError("probe.ref_step must be >= 0");
        if (k < 1) throw ConfigError("probe.k must be >= 1");
        if (sequences < 1) throw ConfigError("probe.sequences must be >= 1");
    }
};

// Bench harness shape. `hidden = 0` keeps each variant's native width;
// otherwise both sides run at the override so timings compare like for like.
struct BenchConfig {
    std::string pair = "scd-b,dit-b";
    index_t steps = 50;
    index_t frames = 4;
    index_t trials = 3;
    index_t warmup = 1;
    index_t hidden = 128;
    index_t heads = 2;

    std::pair<std::string, std::string> variants() const {
        const size_t comma = pair.find(',');
        if (comma == std::string::npos || comma == 0 || comma + 1 == pair.size())
            throw ConfigError("bench.pair must name two variants as 'scd-x,dit-y'");
        return {pair.substr(0, comma), pair.substr(comma + 1)};
    }

    void validate() const {
        variants();
        if (steps < 1) throw ConfigError("bench.steps must be >= 1");
        if (frames < 1) throw ConfigError("bench.frames must be >= 1");
        if (trials < 3) throw ConfigError("bench.trials must be >= 3 for a stable median");
        if (warmup < 0) throw ConfigError("bench.warmup must be >= 0");
        if (hidden < 0 || heads < 1 || (hidden > 0 && hidden % heads != 0))
            throw ConfigError("bench.hidden must be 0 or a positive multiple of bench.heads");
    }
};

namespace detail {

// Wraps one JSON section; typed reads consume keys so that anything left
// over is reported -- with its dotted name -- as unknown.
class JsonSection {
   public:
    JsonSection(const nlohmann::json& obj, std::string prefix)
        : obj_(obj), prefix_(std::move(prefix)) {
        if (!obj_.is_object())
            throw ConfigError("config: section '" + prefix_ + "' must be a JSON object");
    }

    bool has(const char* key) const { return obj_.contains(key); }

    template <class T>
    void take(const char* key, T& out) {
        auto it = obj_.find(key);
        if (it == obj_.end()) return;
        try {
            it->get_to(out);
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("config: bad value for '" + prefix_ + "." + key + "': " +
                              it->dump());
        }
        obj_.erase(it);
    }

    void finish() const {
        if (obj_.empty()) return;
        std::string keys;
        for (const auto& [k, v] : obj_.items()) {
            if (!keys.empty()) keys += ", ";
            keys += "'" + prefix_ + "." + k + "'";
        }
        throw ConfigError("config: unknown key(s) " + keys);
    }

   private:
    nlohmann::json obj_;
    std::string prefix_;
};

inline RoPEMode rope_mode_from(const std::string& s) {
    if (s == "temporal") return RoPEMode::temporal;
    if (s == "identical") return RoPEMode::identical;
    throw ConfigError("model.rope_mode must be temporal or identical, got '" + s + "'");
}

inline const char* rope_mode_name(RoPEMode m) {
    return m == RoPEMode::temporal ? "temporal" : "identical";
}

inline DecoderInterface interface_from(const std::string& s) {
    if (s == "frame_concat") return DecoderInterface::frame_concat;
    if (s == "channel_concat") return DecoderInterface::channel_concat;
    throw ConfigError("model.interface must be frame_concat or channel_concat, got '" + s + "'");
}

inline const char* interface_name(DecoderInterface i) {
    return i == DecoderInterface::frame_concat ? "frame_concat" : "channel_concat";
}

inline TrainStrategy strategy_from(const std::string& s) {
    if (s == "teacher_forcing") return TrainStrategy::teacher_forcing;
    if (s == "diffusion_forcing") return TrainStrategy::diffusion_forcing;
    throw ConfigError("train.strategy must be teacher_forcing or diffusion_forcing, got '" + s +
                      "'");
}

inline TimeSampler time_sampler_from(const std::string& s) {
    if (s == "uniform") return TimeSampler::uniform;
    if (s == "shifted") return TimeSampler::shifted;
    throw ConfigError("train.time_sampler must be uniform or shifted, got '" + s + "'");
}

inline const char* time_sampler_name(TimeSampler t) {
    return t == TimeSampler::uniform ? "uniform" : "shifted";
}

}  // namespace detail

// Denoise-time grid: a linear S-step grid, optionally warped through
// shift_time(k, .). k = 1 is the plain linear schedule.
inline SamplerConfig make_sampler(index_t steps, double time_shift) {
    SamplerConfig s = SamplerConfig::linear(steps);
    if (time_shift != 1.0)
        for (double& t : s.times) t = shift_time(time_shift, t);
    return s;
}

struct RunConfig {
    // model
    std::string family = "scd";  // scd | causal_dit
    SCDConfig scd;
    BaselineConfig dit;

    // data (geometry is the single source of truth; the model configs
    // inherit it in finalize())
    DataConfig data;
    TokenizerConfig tokenizer;
    index_t num_sequences = 32;
    std::uint64_t data_seed = 0;

    // train
    TrainConfig train;
    DiffusionSchedule sched;
    index_t log_every = 1;
    index_t val_every = 0;  // 0: no eval during training
    index_t val_sequences = 8;
    std::uint64_t val_seed = 0;

    // rollout
    RolloutConfig rollout;
    index_t rollout_steps = 50;
    double rollout_shift = 1.0;
    index_t context_frames = 0;  // ground-truth frames fed before generating

    ProbeConfig probe;
    BenchConfig bench;

    bool is_scd() const { return family == "scd"; }

    // Defaults, with SCD_SEED (when set) standing in for every seed that the
    // config does not pin explicitly.
    static RunConfig base() {
        RunConfig c;
        if (const char* env = std::getenv("SCD_SEED")) {
            std::uint64_t s = 0;
            std::istringstream in(env);
            in >> s;
            if (in.fail() || !in.eof())
                throw ConfigError("SCD_SEED must be an unsigned integer, got '" +
                                  std::string(env) + "'");
            c.train.seed = s;
            c.data_seed = s;
            c.rollout.seed = s;
            c.probe.seed = s;
            c.val_seed = s;
        }
        return c;
    }

    // Derived wiring after all keys are read: geometry into the model
    // configs, the sampler grid, replicated default channel stats.
    void finalize() {
        if (static_cast<index_t>(tokenizer.channel_shift.size()) != data.channels &&
            tokenizer.channel_shift == std::vector<double>{0.5} &&
            tokenizer.channel_scale == std::vector<double>{2.0}) {
            tokenizer.channel_shift.assign(static_cast<size_t>(data.channels), 0.5);
            tokenizer.channel_scale.assign(static_cast<size_t>(data.channels), 2.0);
        }
        auto wire = [&](auto& m) {
            m.frame_h = data.height;
            m.frame_w = data.width;
            m.channels = data.channels;
            m.patch_size = tokenizer.patch_size;
            m.action_vocab = data.action_vocab;
        };
        wire(scd);
        wire(dit);
        scd.corrupt_eta_train = train.corrupt_eta_train;
        rollout.sampler = make_sampler(rollout_steps, rollout_shift);
    }

    void validate() const {
        if (family != "scd" && family != "causal_dit")
            throw ConfigError("model.family must be scd or causal_dit, got '" + family + "'");
        data.validate();
        tokenizer.validate(data.height, data.width, data.channels);
        if (num_sequences < 1) throw ConfigError("data.num_sequences must be >= 1");
        if (is_scd())
            scd.validate();
        else
            dit.validate();
        train.validate();
        sched.validate();
        if (log_every < 1) throw ConfigError("train.log_every must be >= 1");
        if (val_every < 0 || val_sequences < 1)
            throw ConfigError("train.val_every must be >= 0 and train.val_sequences >= 1");
        if (rollout_steps < 1) throw ConfigError("rollout.steps must be >= 1");
        if (rollout_shift <= 0) throw ConfigError("rollout.time_shift must be positive");
        rollout.validate();
        if (context_frames < 0 || context_frames >= rollout.num_frames)
            throw ConfigError("rollout.context_frames must lie in [0, rollout.num_frames)");
        probe.validate();
        bench.validate();
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["data"] = {{"height", data.height},
                     {"width", data.width},
                     {"channels", data.channels},
                     {"num_frames", data.num_frames},
                     {"num_sprites", data.num_sprites},
                     {"sprite_size", data.sprite_size},
                     {"max_speed", data.max_speed},
                     {"action_step", data.action_step},
                     {"action_vocab", data.action_vocab},
                     {"patch_size", tokenizer.patch_size},
                     {"channel_shift", tokenizer.channel_shift},
                     {"channel_scale", tokenizer.channel_scale},
                     {"num_sequences", num_sequences},
                     {"seed", data_seed}};
        nlohmann::json m = {{"family", family}};
        if (is_scd()) {
            m["variant"] = scd.variant;
            m["enc_blocks"] = scd.enc_blocks;
            m["dec_blocks"] = scd.dec_blocks;
            m["hidden"] = scd.hidden;
            m["heads"] = scd.heads;
            m["rope_mode"] = detail::rope_mode_name(scd.rope_mode);
            m["interface"] = detail::interface_name(scd.interface_kind);
        } else {
            m["variant"] = dit.variant;
            m["depth"] = dit.depth;
            m["hidden"] = dit.hidden;
            m["heads"] = dit.heads;
            m["deep_diagonal"] = dit.deep_diagonal;
            if (dit.skip_schedule) {
                m["skip_n_full"] = dit.skip_schedule->n_full_steps;
                m["skip_prefix"] = dit.skip_schedule->prefix_len;
                m["skip_suffix"] = dit.skip_schedule->suffix_len;
            }
        }
        j["model"] = std::move(m);
        j["train"] = {{"batch_size", train.batch_size},
                      {"lr", train.lr},
                      {"weight_decay", train.weight_decay},
                      {"beta1", train.beta1},
                      {"beta2", train.beta2},
                      {"ema_decay", train.ema_decay},
                      {"steps", train.steps},
                      {"warmup_steps", train.warmup_steps},
                      {"K", train.K},
                      {"corrupt_eta", train.corrupt_eta_train},
                      {"clip_norm", train.clip_norm},
                      {"seed", train.seed},
                      {"strategy", train_strategy_name(dit.train_strategy)},
                      {"time_sampler", detail::time_sampler_name(sched.time_sampler)},
                      {"shift_k", sched.shift_k},
                      {"log_every", log_every},
                      {"val_every", val_every},
                      {"val_sequences", val_sequences},
                      {"val_seed", val_seed}};
        j["rollout"] = {{"num_frames", rollout.num_frames},
                        {"steps", rollout_steps},
                        {"time_shift", rollout_shift},
                        {"cfg_scale", rollout.corruption.cfg_scale},
                        {"cfg_eta", rollout.corruption.cfg_eta},
                        {"context_frames", context_frames},
                        {"seed", rollout.seed}};
        j["probe"] = {{"metric", probe.metric},
                      {"layer", probe.layer},
                      {"frame", probe.frame},
                      {"head", probe.head},
                      {"ref_step", probe.ref_step},
                      {"k", probe.k},
                      {"sequences", probe.sequences},
                      {"seed", probe.seed}};
        j["bench"] = {{"pair", bench.pair},   {"steps", bench.steps},
                      {"frames", bench.frames}, {"trials", bench.trials},
                      {"warmup", bench.warmup}, {"hidden", bench.hidden},
                      {"heads", bench.heads}};
        return j;
    }

    static RunConfig from_json(const nlohmann::json& j) {
        if (!j.is_object()) throw ConfigError("config: root must be a JSON object");
        for (const auto& [k, v] : j.items())
            if (k != "model" && k != "train" && k != "data" && k != "rollout" && k != "probe" &&
                k != "bench")
                throw ConfigError("config: unknown section '" + k + "'");

        RunConfig c = base();

        if (j.contains("data")) {
            detail::JsonSection s(j.at("data"), "data");
            s.take("height", c.data.height);
            s.take("width", c.data.width);
            s.take("channels", c.data.channels);
            s.take("num_frames", c.data.num_frames);
            s.take("num_sprites", c.data.num_sprites);
            s.take("sprite_size", c.data.sprite_size);
            s.take("max_speed", c.data.max_speed);
            s.take("action_step", c.data.action_step);
            s.take("action_vocab", c.data.action_vocab);
            s.take("patch_size", c.tokenizer.patch_size);
            s.take("channel_shift", c.tokenizer.channel_shift);
            s.take("channel_scale", c.tokenizer.channel_scale);
            s.take("num_sequences", c.num_sequences);
            s.take("seed", c.data_seed);
            s.finish();
        }

        if (j.contains("model")) {
            detail::JsonSection s(j.at("model"), "model");
            s.take("family", c.family);
            if (c.family != "scd" && c.family != "causal_dit")
                throw ConfigError("model.family must be scd or causal_dit, got '" + c.family +
                                  "'");
            std::string variant;
            s.take("variant", variant);
            if (!variant.empty()) {
                if (c.is_scd())
                    c.scd = SCDConfig::variant_named(variant);
                else
                    c.dit = BaselineConfig::variant_named(variant);
            }
            s.take("enc_blocks", c.scd.enc_blocks);
            s.take("dec_blocks", c.scd.dec_blocks);
            s.take("depth", c.dit.depth);
            index_t hidden = -1, heads = -1;
            s.take("hidden", hidden);
            s.take("heads", heads);
            if (hidden != -1) c.scd.hidden = c.dit.hidden = hidden;
            if (heads != -1) c.scd.heads = c.dit.heads = heads;
            std::string rope, iface;
            s.take("rope_mode", rope);
            s.take("interface", iface);
            if (!rope.empty()) c.scd.rope_mode = detail::rope_mode_from(rope);
            if (!iface.empty()) c.scd.interface_kind = detail::interface_from(iface);
            s.take("deep_diagonal", c.dit.deep_diagonal);
            index_t sk_full = -1, sk_pre = -1, sk_suf = -1;
            s.take("skip_n_full", sk_full);
            s.take("skip_prefix", sk_pre);
            s.take("skip_suffix", sk_suf);
            if (sk_full >= 0 || sk_pre >= 0 || sk_suf >= 0) {
                SkipSchedule sk;
                sk.n_full_steps = std::max<index_t>(sk_full, 0);
                sk.prefix_len = std::max<index_t>(sk_pre, 0);
                sk.suffix_len = std::max<index_t>(sk_suf, 0);
                c.dit.skip_schedule = sk;
            }
            s.finish();
        }

        if (j.contains("train")) {
            detail::JsonSection s(j.at("train"), "train");
            s.take("batch_size", c.train.batch_size);
            s.take("lr", c.train.lr);
            s.take("weight_decay", c.train.weight_decay);
            s.take("beta1", c.train.beta1);
            s.take("beta2", c.train.beta2);
            s.take("ema_decay", c.train.ema_decay);
            s.take("steps", c.train.steps);
            s.take("warmup_steps", c.train.warmup_steps);
            s.take("K", c.train.K);
            s.take("corrupt_eta", c.train.corrupt_eta_train);
            s.take("clip_norm", c.train.clip_norm);
            s.take("seed", c.train.seed);
            std::string strategy, sampler;
            s.take("strategy", strategy);
            s.take("time_sampler", sampler);
            if (!strategy.empty()) c.dit.train_strategy = detail::strategy_from(strategy);
            if (!sampler.empty()) c.sched.time_sampler = detail::time_sampler_from(sampler);
            s.take("shift_k", c.sched.shift_k);
            s.take("log_every", c.log_every);
            s.take("val_every", c.val_every);
            s.take("val_sequences", c.val_sequences);
            s.take("val_seed", c.val_seed);
            s.finish();
        }

        if (j.contains("rollout")) {
            detail::JsonSection s(j.at("rollout"), "rollout");
            s.take("num_frames", c.rollout.num_frames);
            s.take("steps", c.rollout_steps);
            s.take("time_shift", c.rollout_shift);
            s.take("cfg_scale", c.rollout.corruption.cfg_scale);
            s.take("cfg_eta", c.rollout.corruption.cfg_eta);
            s.take("context_frames", c.context_frames);
            s.take("seed", c.rollout.seed);
            s.finish();
        }

        if (j.contains("probe")) {
            detail::JsonSection s(j.at("probe"), "probe");
            s.take("metric", c.probe.metric);
            s.take("layer", c.probe.layer);
            s.take("frame", c.probe.frame);
            s.take("head", c.probe.head);
            s.take("ref_step", c.probe.ref_step);
            s.take("k", c.probe.k);
            s.take("sequences", c.probe.sequences);
            s.take("seed", c.probe.seed);
            s.finish();
        }

        if (j.contains("bench")) {
            detail::JsonSection s(j.at("bench"), "bench");
            s.take("pair", c.bench.pair);
            s.take("steps", c.bench.steps);
            s.take("frames", c.bench.frames);
            s.take("trials", c.bench.trials);
            s.take("warmup", c.bench.warmup);
            s.take("hidden", c.bench.hidden);
            s.take("heads", c.bench.heads);
            s.finish();
        }

        c.finalize();
        return c;
    }

    // `--set a.b.c=value`: value parsed as JSON when it is JSON, raw string
    // otherwise. Applied to the document before from_json, so overrides see
    // the same unknown-key screening as file keys.
    static void set_dotted(nlohmann::json& doc, const std::string& assignment) {
        const size_t eq = assignment.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("--set expects key=value, got '" + assignment + "'");
        std::string ptr = "/" + assignment.substr(0, eq);
        for (char& ch : ptr)
            if (ch == '.') ch = '/';
        const std::string raw = assignment.substr(eq + 1);
        nlohmann::json v = nlohmann::json::parse(raw, nullptr, false);
        if (v.is_discarded()) v = raw;
        try {
            doc[nlohmann::json::json_pointer(ptr)] = v;
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("--set: cannot address key '" + assignment.substr(0, eq) + "'");
        }
    }

    // Full pipeline used by every subcommand: optional file, then overrides,
    // then parse + validate. Nothing downstream runs on an unvalidated config.
    static RunConfig load(const std::string& path, const std::vector<std::string>& overrides) {
        nlohmann::json doc = nlohmann::json::object();
        if (!path.empty()) {
            std::ifstream in(path);
            if (!in) throw IoError("config: cannot open '" + path + "'");
            std::stringstream buf;
            buf << in.rdbuf();
            doc = nlohmann::json::parse(buf.str(), nullptr, false);
            if (doc.is_discarded())
                throw ConfigError("config: '" + path + "' is not valid JSON");
        }
        for (const std::string& kv : overrides) set_dotted(doc, kv);
        RunConfig c = from_json(doc);
        c.validate();
        return c;
    }

    // Rehydrate the snapshot a checkpoint or trace carries.
    static RunConfig from_snapshot(const nlohmann::json& snapshot) {
        RunConfig c = from_json(snapshot);
        c.validate();
        return c;
    }
};

}  // namespace scd
