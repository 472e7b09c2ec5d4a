#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

#include <json.hpp>

#include "scd/checkpoint.hpp"
#include "scd/config.hpp"
#include "scd/probes.hpp"

// Drives the installed binary (path in SCD_BIN) as a subprocess and checks
// artifacts on disk: exit codes, file hashes, CSV/JSON shapes, and the
// bitwise reproducibility the tool promises for fixed seeds.

using namespace scd;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::string& bin_path() {
    static const std::string p = [] {
        const char* b = std::getenv("SCD_BIN");
        REQUIRE_MESSAGE(b != nullptr, "SCD_BIN must point at the CLI binary");
        return std::string(b);
    }();
    return p;
}

struct Workspace {
    fs::path dir;
    Workspace() {
        dir = fs::temp_directory_path() /
              ("scd_cli_" + std::to_string(static_cast<unsigned>(::getpid())));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Workspace() { fs::remove_all(dir); }
    std::string path(const std::string& name) const { return (dir / name).string(); }
};

Workspace& ws() {
    static Workspace w;
    return w;
}

// Runs `scd <args>` with stdout/stderr captured to files; returns exit code.
int run(const std::string& args, const std::string& env = "") {
    const std::string out = ws().path("stdout.txt"), err = ws().path("stderr.txt");
    const std::string cmd =
        env + (env.empty() ? "" : " ") + bin_path() + " " + args + " > " + out + " 2> " + err;
    const int st = std::system(cmd.c_str());
    REQUIRE(st != -1);
    REQUIRE(WIFEXITED(st));
    return WEXITSTATUS(st);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE_MESSAGE(in.good(), ("missing file " + path));
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::string last_stdout() { return slurp(ws().path("stdout.txt")); }
std::string last_stderr() { return slurp(ws().path("stderr.txt")); }

std::vector<json> jsonl(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::vector<json> out;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(json::parse(line));
    return out;
}

std::vector<std::vector<std::string>> csv_rows(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

// Shared tiny pipeline: one config file, one dataset, one trained checkpoint
// per family, one captured trace. Built once, reused by later cases.
struct Fixture {
    std::string config, data, scd_ckpt, dit_ckpt, frames, trace;
    Fixture() {
        config = ws().path("tiny.json");
        std::ofstream(config) << R"({
  "data": {"height": 16, "width": 16, "num_frames": 6, "patch_size": 4,
           "num_sequences": 6, "seed": 11},
  "model": {"family": "scd", "enc_blocks": 2, "dec_blocks": 2, "hidden": 16, "heads": 2},
  "train": {"steps": 6, "batch_size": 2, "lr": 0.002, "seed": 5},
  "rollout": {"num_frames": 4, "steps": 5, "seed": 9}
})";
        data = ws().path("data.bin");
        REQUIRE(run("gen-data --config " + config + " --out " + data) == 0);
        scd_ckpt = ws().path("scd.ckpt");
        REQUIRE(run("train --config " + config + " --data " + data + " --out " + scd_ckpt) == 0);
        dit_ckpt = ws().path("dit.ckpt");
        REQUIRE(run("train --config " + config + " --set model.family=causal_dit --set model.depth=2 --data " +
                    data + " --out " + dit_ckpt) == 0);
        frames = ws().path("frames.bin");
        trace = ws().path("frames.trace");
        REQUIRE(run("rollout --ckpt " + scd_ckpt + " --out " + frames +
                    " --capture-features --capture-attn --trace " + trace) == 0);
    }
};

Fixture& fx() {
    static Fixture f;
    return f;
}

}  // namespace

TEST_CASE("gen-data writes a loadable dataset and is seed-deterministic") {
    auto [samples, cfg] = load_dataset(fx().data);
    CHECK(samples.size() == 6);
    CHECK(cfg.height == 16);
    CHECK(samples[0].num_frames == 6);
    CHECK(samples[0].actions.size() == 6);

    const std::string again = ws().path("data_again.bin");
    REQUIRE(run("gen-data --config " + fx().config + " --out " + again) == 0);
    CHECK(slurp(fx().data) == slurp(again));

    const std::string other = ws().path("data_other.bin");
    REQUIRE(run("gen-data --config " + fx().config + " --set data.seed=12 --out " + other) == 0);
    CHECK(slurp(fx().data) != slurp(other));
}

TEST_CASE("config validation fails before compute with exit code 2") {
    const std::string out = ws().path("never.bin");
    CHECK(run("gen-data --config " + fx().config + " --set data.height=30 --out " + out) == 2);
    CHECK(last_stderr().find("data.patch_size") != std::string::npos);
    CHECK(!fs::exists(out));

    CHECK(run("gen-data --config " + fx().config + " --set data.bogus=1 --out " + out) == 2);
    CHECK(last_stderr().find("data.bogus") != std::string::npos);

    CHECK(run("train --config " + fx().config + " --set train.nope=3 --data " + fx().data +
              " --out " + out) == 2);
    CHECK(last_stderr().find("train.nope") != std::string::npos);

    CHECK(run("rollout --out x.bin") == 2);  // missing required --ckpt
}

TEST_CASE("runtime failures exit 1") {
    CHECK(run("rollout --ckpt " + ws().path("no_such.ckpt") + " --out " + ws().path("x.bin")) ==
          1);
    CHECK(run("inspect --file " + ws().path("no_such.ckpt")) == 1);
}

TEST_CASE("train writes a JSON-lines log with a loss column and a loadable checkpoint") {
    auto lines = jsonl(fx().scd_ckpt + ".log.jsonl");
    REQUIRE(lines.size() == 6);
    for (const json& l : lines) {
        CHECK(l.contains("loss"));
        CHECK(l.contains("lr"));
        CHECK(l.at("loss").get<double>() > 0);
    }
    CHECK(lines.front().at("step") == 1);
    CHECK(lines.back().at("step") == 6);

    Checkpoint ck = Checkpoint::load(fx().scd_ckpt);
    CHECK(ck.meta.at("kind") == "checkpoint");
    CHECK(ck.meta.at("family") == "scd");
    CHECK(ck.step == 6);
    CHECK(ck.config.contains("model"));
    CHECK(ck.config.at("model").at("enc_blocks") == 2);
    RunConfig run_cfg = RunConfig::from_snapshot(ck.config);  // snapshot round-trips
    CHECK(run_cfg.scd.enc_blocks == 2);
}

TEST_CASE("resume from a mid-run checkpoint reproduces the straight run bitwise") {
    const std::string a = ws().path("res_a.ckpt"), b = ws().path("res_b.ckpt"),
                      c = ws().path("res_c.ckpt");
    REQUIRE(run("train --config " + fx().config + " --set train.steps=3 --data " + fx().data +
                " --out " + a + " --log " + ws().path("res_a.jsonl")) == 0);
    REQUIRE(run("train --config " + fx().config + " --set train.steps=6 --data " + fx().data +
                " --out " + b + " --resume " + a + " --log " + ws().path("res_b.jsonl")) == 0);
    REQUIRE(run("train --config " + fx().config + " --set train.steps=6 --data " + fx().data +
                " --out " + c + " --log " + ws().path("res_c.jsonl")) == 0);

    auto resumed = jsonl(ws().path("res_b.jsonl"));
    auto straight = jsonl(ws().path("res_c.jsonl"));
    REQUIRE(resumed.size() == 3);
    REQUIRE(straight.size() == 6);
    // step 4 is the first post-resume step; losses must agree bitwise
    for (size_t i = 0; i < 3; ++i) {
        CHECK(resumed[i].at("step") == straight[i + 3].at("step"));
        CHECK(resumed[i].at("loss").get<double>() == straight[i + 3].at("loss").get<double>());
    }
    CHECK(slurp(b) == slurp(c));
}

TEST_CASE("diffusion-forcing baseline trains through the same entry point") {
    Checkpoint ck = Checkpoint::load(fx().dit_ckpt);
    CHECK(ck.meta.at("family") == "causal_dit");
    const std::string out = ws().path("dit_df.ckpt");
    REQUIRE(run("train --config " + fx().config +
                " --set model.family=causal_dit --set model.depth=2"
                " --set train.strategy=diffusion_forcing --set train.steps=2 --data " +
                fx().data + " --out " + out) == 0);
    CHECK(Checkpoint::load(out).config.at("train").at("strategy") == "diffusion_forcing");
}

TEST_CASE("rollout emits the configured frame shapes and is seed-deterministic") {
    Checkpoint fc = Checkpoint::load(fx().frames);
    CHECK(fc.meta.at("kind") == "frames");
    Tensor<float> tokens = fc.get<float>("tokens");
    Tensor<float> pixels = fc.get<float>("frames");
    CHECK(tokens.shape() == Shape{4 * 16, 16});  // 4 frames x 16 tokens x 16 dims
    CHECK(pixels.shape() == Shape{4, 16, 16, 1});
    for (float v : pixels.data()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }

    const std::string again = ws().path("frames_again.bin");
    REQUIRE(run("rollout --ckpt " + fx().scd_ckpt + " --out " + again) == 0);
    CHECK(slurp(fx().frames) == slurp(again));  // capture flags do not perturb the rollout

    const std::string other = ws().path("frames_other.bin");
    REQUIRE(run("rollout --ckpt " + fx().scd_ckpt + " --seed 77 --out " + other) == 0);
    CHECK(slurp(fx().frames) != slurp(other));

    const std::string more = ws().path("frames_more.bin");
    REQUIRE(run("rollout --ckpt " + fx().scd_ckpt + " --frames 6 --steps 3 --out " + more) == 0);
    CHECK(Checkpoint::load(more).get<float>("frames").dim(0) == 6);
}

TEST_CASE("the captured trace is readable by every probe") {
    ActivationTrace<float> trace = ActivationTrace<float>::load(fx().trace);
    CHECK(trace.num_features() > 0);
    CHECK(trace.num_attention_records() > 0);
    CHECK(trace.config.at("model").at("family") == "scd");

    const std::string d = ws().dir.string();
    CHECK(run("probe step-sim --trace " + fx().trace + " --metric cosine --out-dir " + d) == 0);
    CHECK(run("probe layer-dist --trace " + fx().trace + " --frame 2 --out-dir " + d) == 0);
    CHECK(run("probe pca --trace " + fx().trace + " --k 2 --out-dir " + d) == 0);
    CHECK(run("probe xframe-mass --trace " + fx().trace + " --out-dir " + d) == 0);
    CHECK(run("probe trend --trace " + fx().trace + " --out-dir " + d) == 0);

    // step-sim: S x S cosine matrix with a unit diagonal
    auto rows = csv_rows(ws().path("step_sim.csv"));
    REQUIRE(rows.size() == 5);
    for (size_t i = 0; i < rows.size(); ++i) {
        REQUIRE(rows[i].size() == 5);
        CHECK(std::stod(rows[i][i]) == doctest::Approx(1.0).epsilon(1e-9));
    }
    auto sj = json::parse(slurp(ws().path("step_sim.json")));
    CHECK(sj.at("metric") == "cosine");

    // layer-dist: decoder layers only (encoder features exist at one step)
    auto ld = csv_rows(ws().path("layer_dist.csv"));
    REQUIRE(ld.size() == 3);  // header + 2 decoder layers
    CHECK(ld[0][0] == "layer");
    CHECK(ld[1][0] == "2");
    CHECK(ld[2][0] == "3");

    // pca: one energy ratio per step, all within [0, 1]
    auto pca = csv_rows(ws().path("pca.csv"));
    REQUIRE(pca.size() == 6);  // header + 5 steps
    for (size_t i = 1; i < pca.size(); ++i) {
        const double r = std::stod(pca[i][1]);
        CHECK(r >= 0.0);
        CHECK(r <= 1.0);
    }

    // xframe-mass: split columns sum to one, decoder rows have zero cross mass
    auto xm = csv_rows(ws().path("xframe_mass.csv"));
    REQUIRE(xm.size() > 1);
    REQUIRE(xm[0] == std::vector<std::string>{"layer", "head", "frame", "cross", "intra", "bos"});
    for (size_t i = 1; i < xm.size(); ++i) {
        const double total = std::stod(xm[i][3]) + std::stod(xm[i][4]) + std::stod(xm[i][5]);
        CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
        if (std::stoll(xm[i][0]) >= 2) CHECK(std::stod(xm[i][3]) == 0.0);  // decoder depth
    }

    auto tj = json::parse(slurp(ws().path("trend.json")));
    CHECK(tj.contains("step_similarity"));
    CHECK(tj.contains("cross_frame_mass"));
}

TEST_CASE("leave-one-out emits one row per layer for either family") {
    const std::string d = ws().dir.string();
    REQUIRE(run("probe leave-one-out --ckpt " + fx().scd_ckpt + " --data " + fx().data +
                " --sequences 2 --out-dir " + d) == 0);
    auto rows = csv_rows(ws().path("loo.csv"));
    REQUIRE(rows.size() == 5);  // header + enc/0, enc/1, dec/0, dec/1
    CHECK(rows[1][0] == "enc/0");
    CHECK(rows[4][0] == "dec/1");

    REQUIRE(run("probe leave-one-out --ckpt " + fx().dit_ckpt + " --data " + fx().data +
                " --sequences 2 --out-dir " + d) == 0);
    rows = csv_rows(ws().path("loo.csv"));
    REQUIRE(rows.size() == 3);  // header + layer/0, layer/1
    CHECK(rows[1][0] == "layer/0");

    auto lj = json::parse(slurp(ws().path("loo.json")));
    CHECK(lj.at("deltas").size() == 2);
    CHECK(lj.at("full_loss").get<double>() > 0);
}

TEST_CASE("xframe-mass on a frame-diagonal model reports an all-zero cross column") {
    const std::string ck = ws().path("diag.ckpt"), fr = ws().path("diag.bin"),
                      tr = ws().path("diag.trace");
    REQUIRE(run("train --config " + fx().config +
                " --set model.family=causal_dit --set model.depth=2"
                " --set model.deep_diagonal=2 --set train.steps=2 --data " +
                fx().data + " --out " + ck) == 0);
    REQUIRE(run("rollout --ckpt " + ck + " --out " + fr + " --capture-attn --trace " + tr) == 0);
    REQUIRE(run("probe xframe-mass --trace " + tr + " --out-dir " + ws().dir.string()) == 0);
    auto xm = csv_rows(ws().path("xframe_mass.csv"));
    REQUIRE(xm.size() > 1);
    for (size_t i = 1; i < xm.size(); ++i) CHECK(std::stod(xm[i][3]) == 0.0);
}

TEST_CASE("rollout with dataset context emits metrics rows for generated frames") {
    const std::string out = ws().path("ctx.bin");
    REQUIRE(run("rollout --ckpt " + fx().scd_ckpt + " --out " + out + " --data " + fx().data +
                " --seq 1 --context 2 --frames 5") == 0);
    auto rows = csv_rows(out + ".metrics.csv");
    REQUIRE(rows.size() == 4);  // header + frames 3..5
    CHECK(rows[0] == std::vector<std::string>{"seq_id", "frame", "psnr", "ssim"});
    CHECK(rows[1][1] == "3");
    CHECK(rows[3][1] == "5");
    Checkpoint fc = Checkpoint::load(out);
    CHECK(fc.meta.at("context_frames") == 2);
    CHECK(fc.get<float>("frames").dim(0) == 5);

    // context without a dataset is a config error
    CHECK(run("rollout --ckpt " + fx().scd_ckpt + " --out " + out + " --context 2") == 2);
}

TEST_CASE("bench reports the Table-7 invocation ratio and passes its self-check") {
    const std::string out = ws().path("bench.json");
    REQUIRE(run("bench --pair scd-b,dit-b --steps 50 --frames 1 --trials 3 --warmup 0"
                " --hidden 32 --heads 1 --out " +
                out) == 0);
    auto doc = json::parse(slurp(out));
    CHECK(doc.at("bp_per_frame_ratio") == "208:600");
    REQUIRE(doc.at("reports").size() == 2);
    for (const json& r : doc.at("reports")) {
        CHECK(r.at("counted_matches_analytic") == true);
        CHECK(r.at("sec_per_frame").get<double>() > 0);
    }
    CHECK(doc.at("reports")[0].at("family") == "scd");
    CHECK(doc.at("reports")[1].at("family") == "causal_dit");
    CHECK(doc.contains("config"));  // snapshot embedded

    // five trials -> median of five, still self-consistent
    REQUIRE(run("bench --pair scd-b,dit-b --steps 4 --frames 1 --trials 5 --warmup 0"
                " --hidden 32 --heads 1 --out " +
                out) == 0);
    CHECK(json::parse(slurp(out)).at("trials") == 5);

    CHECK(run("bench --pair scd-b --steps 4") == 2);  // malformed pair
}

TEST_CASE("inspect describes every container kind") {
    for (const std::string& f : {fx().data, fx().scd_ckpt, fx().frames, fx().trace}) {
        REQUIRE(run("inspect --file " + f) == 0);
        CHECK(last_stdout().find("kind") != std::string::npos);
        REQUIRE(run("inspect --file " + f + " --json") == 0);
        auto doc = json::parse(last_stdout());
        CHECK(doc.contains("kind"));
        CHECK(doc.contains("tensors"));
    }
    REQUIRE(run("inspect --file " + fx().data + " --json") == 0);
    CHECK(json::parse(last_stdout()).at("kind") == "dataset");
}

TEST_CASE("SCD_SEED seeds every stream unless the config pins one") {
    const std::string a = ws().path("env_a.bin"), b = ws().path("env_b.bin"),
                      c = ws().path("env_c.bin");
    const std::string geom =
        " --set data.height=16 --set data.width=16 --set data.num_frames=4"
        " --set data.num_sequences=3";
    REQUIRE(run("gen-data" + geom + " --out " + a, "SCD_SEED=21") == 0);
    REQUIRE(run("gen-data" + geom + " --set data.seed=21 --out " + b) == 0);
    CHECK(slurp(a) == slurp(b));  // env fallback matches the explicit seed
    REQUIRE(run("gen-data" + geom + " --set data.seed=22 --out " + c, "SCD_SEED=21") == 0);
    CHECK(slurp(b) != slurp(c));  // explicit key wins over the env fallback
}

TEST_CASE("unknown probe names and missing probe inputs are config errors") {
    CHECK(run("probe nonsense --trace " + fx().trace) == 2);
    CHECK(run("probe step-sim") == 2);
    CHECK(run("probe leave-one-out --ckpt " + fx().scd_ckpt) == 2);
}
