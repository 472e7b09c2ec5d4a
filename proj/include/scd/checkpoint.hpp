#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "scd/data.hpp"
#include "scd/tensor.hpp"

// Single-file tensor container: 4-byte magic "SCD1", a little-endian u64
// header length, a JSON header (tensor names, shapes, dtypes, byte offsets,
// config snapshot, step count), then the raw little-endian payload in header
// order. Checkpoints, rollout outputs, datasets, and probe traces all reuse
// this one format.

namespace scd {

class Checkpoint {
   public:
    static constexpr char kMagic[4] = {'S', 'C', 'D', '1'};

    nlohmann::json config = nlohmann::json::object();  // run-config snapshot
    nlohmann::json meta = nlohmann::json::object();    // free-form extras
    index_t step = 0;

    template <class S>
    void put(const std::string& name, const Tensor<S>& t) {
        if (name.empty()) throw Error("checkpoint: tensor name must be non-empty");
        Entry e;
        e.shape = t.shape();
        e.dtype = dtype_of<S>();
        e.bytes.resize(t.data().size() * sizeof(S));
        if (!e.bytes.empty()) std::memcpy(e.bytes.data(), t.data().data(), e.bytes.size());
        tensors_[name] = std::move(e);
    }

    void put_f64(const std::string& name, const std::vector<double>& v) {
        Tensor<double> t = Tensor<double>::from_data({static_cast<index_t>(v.size())}, v);
        put(name, t);
    }

    template <class S>
    Tensor<S> get(const std::string& name) const {
        const Entry& e = entry(name);
        if (e.dtype != dtype_of<S>())
            throw Error("checkpoint: tensor '" + name + "' is " + e.dtype + ", requested " +
                        dtype_of<S>());
        std::vector<S> buf(e.bytes.size() / sizeof(S));
        if (!buf.empty()) std::memcpy(buf.data(), e.bytes.data(), e.bytes.size());
        return Tensor<S>::from_data(e.shape, std::move(buf));
    }

    std::vector<double> get_f64_vector(const std::string& name) const {
        Tensor<double> t = get<double>(name);
        return t.data();
    }

    bool has(const std::string& name) const { return tensors_.count(name) > 0; }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [name, e] : tensors_) out.push_back(name);
        return out;
    }

    const Shape& shape_of(const std::string& name) const { return entry(name).shape; }
    const std::string& dtype_of_name(const std::string& name) const { return entry(name).dtype; }

    // Throws ConfigError listing every dotted key whose value differs
    // between the stored snapshot and `expected`.
    void require_config_match(const nlohmann::json& expected) const {
        std::map<std::string, std::string> a = flatten(config), b = flatten(expected);
        std::vector<std::string> diffs;
        for (const auto& [k, v] : a) {
            auto it = b.find(k);
            if (it == b.end())
                diffs.push_back(k + " (checkpoint " + v + ", run absent)");
            else if (it->second != v)
                diffs.push_back(k + " (checkpoint " + v + ", run " + it->second + ")");
        }
        for (const auto& [k, v] : b)
            if (!a.count(k)) diffs.push_back(k + " (checkpoint absent, run " + v + ")");
        if (diffs.empty()) return;
        std::string msg = "checkpoint config mismatch:";
        for (const std::string& d : diffs) msg += " " + d + ";";
        throw ConfigError(msg);
    }

    void save(const std::string& path) const {
        nlohmann::json header;
        header["version"] = 1;
        header["step"] = step;
        header["config"] = config;
        header["meta"] = meta;
        std::uint64_t offset = 0;
        nlohmann::json list = nlohmann::json::array();
        for (const auto& [name, e] : tensors_) {
            nlohmann::json rec;
            rec["name"] = name;
            rec["shape"] = e.shape;
            rec["dtype"] = e.dtype;
            rec["offset"] = offset;
            rec["nbytes"] = e.bytes.size();
            list.push_back(rec);
            offset += e.bytes.size();
        }
        header["tensors"] = list;
        header["payload_bytes"] = offset;
        const std::string hs = header.dump();

        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("checkpoint: cannot open '" + path + "' for writing");
        f.write(kMagic, 4);
        const std::uint64_t hlen = hs.size();
        char lenbuf[8];
        for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((hlen >> (8 * i)) & 0xff);
        f.write(lenbuf, 8);
        f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
        for (const auto& [name, e] : tensors_)
            if (!e.bytes.empty())
                f.write(reinterpret_cast<const char*>(e.bytes.data()),
                        static_cast<std::streamsize>(e.bytes.size()));
        if (!f) throw IoError("checkpoint: write to '" + path + "' failed");
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("checkpoint: cannot open '" + path + "'");
        char magic[4];
        f.read(magic, 4);
        if (f.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
            throw IoError("checkpoint: '" + path + "' is not an SCD1 container");
        char lenbuf[8];
        f.read(lenbuf, 8);
        if (f.gcount() != 8) throw IoError("checkpoint: '" + path + "' header length missing");
        std::uint64_t hlen = 0;
        for (int i = 0; i < 8; ++i)
            hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
        std::string hs(hlen, '\0');
        f.read(hs.data(), static_cast<std::streamsize>(hlen));
        if (static_cast<std::uint64_t>(f.gcount()) != hlen)
            throw IoError("checkpoint: '" + path + "' header truncated");

        nlohmann::json header;
        try {
            header = nlohmann::json::parse(hs);
        } catch (const std::exception& e) {
            throw IoError("checkpoint: '" + path + "' header is not valid JSON: " + e.what());
        }

        Checkpoint ck;
        ck.step = header.value("step", index_t(0));
        ck.config = header.value("config", nlohmann::json::object());
        ck.meta = header.value("meta", nlohmann::json::object());
        const std::uint64_t payload_bytes = header.value("payload_bytes", std::uint64_t(0));

        std::vector<unsigned char> payload(payload_bytes);
        if (payload_bytes > 0)
            f.read(reinterpret_cast<char*>(payload.data()),
                   static_cast<std::streamsize>(payload_bytes));
        const std::uint64_t got = static_cast<std::uint64_t>(f.gcount());
        if (payload_bytes > 0 && got != payload_bytes)
            throw IoError("checkpoint: '" + path + "' truncated: expected payload of " +
                          std::to_string(payload_bytes) + " bytes, found " + std::to_string(got));

        std::uint64_t prev_end = 0;
        for (const auto& rec : header.value("tensors", nlohmann::json::array())) {
            Entry e;
            e.shape = rec.at("shape").get<Shape>();
            e.dtype = rec.at("dtype").get<std::string>();
            const std::uint64_t off = rec.at("offset").get<std::uint64_t>();
            const std::uint64_t nb = rec.at("nbytes").get<std::uint64_t>();
            if (e.dtype != "f32" && e.dtype != "f64")
                throw IoError("checkpoint: unknown dtype '" + e.dtype + "'");
            const std::uint64_t scalar = e.dtype == "f32" ? 4 : 8;
            if (nb != static_cast<std::uint64_t>(numel_of(e.shape)) * scalar)
                throw IoError("checkpoint: tensor '" + rec.at("name").get<std::string>() +
                              "' byte count does not match its shape");
            if (off < prev_end || off + nb > payload_bytes)
                throw IoError("checkpoint: overlapping or out-of-range tensor offsets");
            prev_end = off + nb;
            e.bytes.assign(payload.begin() + static_cast<std::ptrdiff_t>(off),
                           payload.begin() + static_cast<std::ptrdiff_t>(off + nb));
            ck.tensors_[rec.at("name").get<std::string>()] = std::move(e);
        }
        return ck;
    }

   private:
    struct Entry {
        Shape shape;
        std::string dtype;
        std::vector<unsigned char> bytes;
    };

    template <class S>
    static std::string dtype_of() {
        if constexpr (std::is_same_v<S, float>) return "f32";
        else if constexpr (std::is_same_v<S, double>) return "f64";
        else static_assert(sizeof(S) == 0, "unsupported checkpoint scalar");
    }

    const Entry& entry(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw Error("checkpoint: no tensor named '" + name + "'");
        return it->second;
    }

    static std::map<std::string, std::string> flatten(const nlohmann::json& j) {
        std::map<std::string, std::string> out;
        flatten_into(j, "", out);
        return out;
    }

    static void flatten_into(const nlohmann::json& j, const std::string& prefix,
                             std::map<std::string, std::string>& out) {
        if (j.is_object()) {
            for (const auto& [k, v] : j.items())
                flatten_into(v, prefix.empty() ? k : prefix + "." + k, out);
        } else {
            out[prefix] = j.dump();
        }
    }

    std::map<std::string, Entry> tensors_;
};

// ---------------------------------------------------------------------------
// dataset persistence (frames + actions + seeds in the same container)
// ---------------------------------------------------------------------------

inline nlohmann::json data_config_json(const DataConfig& c) {
    return {{"height", c.height},         {"width", c.width},
            {"channels", c.channels},     {"num_frames", c.num_frames},
            {"num_sprites", c.num_sprites}, {"sprite_size", c.sprite_size},
            {"max_speed", c.max_speed},   {"action_step", c.action_step},
            {"action_vocab", c.action_vocab}};
}

inline DataConfig data_config_from_json(const nlohmann::json& j) {
    DataConfig c;
    c.height = j.at("height").get<index_t>();
    c.width = j.at("width").get<index_t>();
    c.channels = j.at("channels").get<index_t>();
    c.num_frames = j.at("num_frames").get<index_t>();
    c.num_sprites = j.at("num_sprites").get<index_t>();
    c.sprite_size = j.at("sprite_size").get<double>();
    c.max_speed = j.at("max_speed").get<double>();
    c.action_step = j.at("action_step").get<double>();
    c.action_vocab = j.at("action_vocab").get<index_t>();
    return c;
}

namespace detail {
inline std::string seq_key(index_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "seq/%06lld/frames", static_cast<long long>(i));
    return buf;
}
}  // namespace detail

inline void save_dataset(const std::string& path, const std::vector<SyntheticSample>& samples,
                         const DataConfig& cfg) {
    if (samples.empty()) throw Error("save_dataset: no sequences");
    Checkpoint ck;
    ck.config["data"] = data_config_json(cfg);
    ck.meta["kind"] = "dataset";
    ck.meta["num_sequences"] = samples.size();
    nlohmann::json seeds = nlohmann::json::array(), actions = nlohmann::json::array();
    for (size_t i = 0; i < samples.size(); ++i) {
        const SyntheticSample& s = samples[i];
        seeds.push_back(s.seed);
        actions.push_back(s.actions);
        Tensor<float> frames = Tensor<float>::from_data(
            {s.num_frames, s.height, s.width, s.channels}, s.frames);
        ck.put(detail::seq_key(static_cast<index_t>(i)), frames);
    }
    ck.meta["seeds"] = seeds;
    ck.meta["actions"] = actions;
    ck.save(path);
}

inline std::pair<std::vector<SyntheticSample>, DataConfig> load_dataset(const std::string& path) {
    Checkpoint ck = Checkpoint::load(path);
    if (ck.meta.value("kind", std::string()) != "dataset")
        throw IoError("load_dataset: '" + path + "' is not a dataset container");
    const DataConfig cfg = data_config_from_json(ck.config.at("data"));
    const index_t n = ck.meta.at("num_sequences").get<index_t>();
    std::vector<SyntheticSample> out;
    for (index_t i = 0; i < n; ++i) {
        Tensor<float> frames = ck.get<float>(detail::seq_key(i));
        SyntheticSample s;
        s.num_frames = frames.dim(0);
        s.height = frames.dim(1);
        s.width = frames.dim(2);
        s.channels = frames.dim(3);
        s.frames = frames.data();
        s.actions = ck.meta.at("actions").at(static_cast<size_t>(i)).get<std::vector<index_t>>();
        s.seed = ck.meta.at("seeds").at(static_cast<size_t>(i)).get<std::uint64_t>();
        out.push_back(std::move(s));
    }
    return {std::move(out), cfg};
}

}  // namespace scd
