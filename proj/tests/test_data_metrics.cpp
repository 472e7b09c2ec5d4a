#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "scd/data.hpp"
#include "scd/metrics.hpp"

using namespace scd;

namespace {

// Single resting sprite of integer size: the rendered centroid equals the
// sprite center exactly, so action nudges are measurable to float precision.
DataConfig still_world() {
    DataConfig cfg;
    cfg.height = 32;
    cfg.width = 32;
    cfg.num_frames = 2;
    cfg.num_sprites = 1;
    cfg.sprite_size = 5.0;
    cfg.max_speed = 0.0;
    cfg.action_step = 1.25;
    return cfg;
}

// First seed whose initial centroid leaves `room` pixels of slack to every
// wall, so one action step cannot trigger a reflection.
std::uint64_t safe_seed(const DataConfig& cfg, double room) {
    for (std::uint64_t seed = 0; seed < 64; ++seed) {
        SyntheticSample probe = gen_sequence(cfg, seed);
        auto [cx, cy] = frame_centroid(probe, 0);
        const double m = cfg.sprite_size / 2 + room;
        if (cx > m && cx < cfg.width - m && cy > m && cy < cfg.height - m) return seed;
    }
    REQUIRE(false);
    return 0;
}

double frame_mass(const SyntheticSample& s, index_t frame) {
    const index_t n = s.height * s.width * s.channels;
    double acc = 0;
    for (index_t e = 0; e < n; ++e) acc += s.frames[static_cast<size_t>(frame * n + e)];
    return acc;
}

Tensor<double> random_frame(index_t h, index_t w, index_t c, Rng& rng, double lo, double hi) {
    Tensor<double> f = Tensor<double>::zeros({h, w, c});
    for (auto& v : f.mutable_data()) v = lo + rng.uniform() * (hi - lo);
    return f;
}

Tensor<double> noisy_copy(const Tensor<double>& a, double sigma, Rng& rng) {
    Tensor<double> b = a.clone();
    for (auto& v : b.mutable_data()) v = std::clamp(v + sigma * rng.normal(), 0.0, 1.0);
    return b;
}

}  // namespace

TEST_CASE("generator is bitwise deterministic in (seed, actions)") {
    DataConfig cfg;
    cfg.num_frames = 8;
    SyntheticSample a = gen_sequence(cfg, 1234);
    SyntheticSample b = gen_sequence(cfg, 1234);
    CHECK(a.frames == b.frames);
    CHECK(a.actions == b.actions);
    CHECK(a.seed == b.seed);

    SyntheticSample c = gen_sequence(cfg, 1234, &a.actions);
    CHECK(c.frames == a.frames);

    SyntheticSample d = gen_sequence(cfg, 1235);
    CHECK(d.frames != a.frames);
}

TEST_CASE("fixed actions override the sampled ones but not the initial state") {
    DataConfig cfg;
    cfg.num_frames = 6;
    std::vector<index_t> acts{0, 1, 1, 2, 3, 0};
    SyntheticSample fixed = gen_sequence(cfg, 77, &acts);
    CHECK(fixed.actions == acts);

    SyntheticSample sampled = gen_sequence(cfg, 77);
    const index_t n = cfg.height * cfg.width * cfg.channels;
    for (index_t e = 0; e < n; ++e)
        CHECK(fixed.frames[static_cast<size_t>(e)] == sampled.frames[static_cast<size_t>(e)]);

    std::vector<index_t> short_acts{0, 1};
    CHECK_THROWS_AS(gen_sequence(cfg, 77, &short_acts), ShapeError);
    std::vector<index_t> bad_acts{0, 1, 1, 2, 3, 7};
    CHECK_THROWS_AS(gen_sequence(cfg, 77, &bad_acts), ConfigError);
}

TEST_CASE("resting world with zero action step repeats the first frame bitwise") {
    DataConfig cfg;
    cfg.num_frames = 5;
    cfg.max_speed = 0.0;
    cfg.action_step = 0.0;
    SyntheticSample s = gen_sequence(cfg, 42);
    const index_t n = cfg.height * cfg.width * cfg.channels;
    for (index_t k = 1; k < cfg.num_frames; ++k)
        for (index_t e = 0; e < n; ++e)
            CHECK(s.frames[static_cast<size_t>(k * n + e)] == s.frames[static_cast<size_t>(e)]);
}

TEST_CASE("a move-right action shifts the centroid right by the action step") {
    DataConfig cfg = still_world();
    const std::uint64_t seed = safe_seed(cfg, cfg.action_step + 0.5);

    std::vector<index_t> right{0, 0};  // slot 0 is inert; slot 1 nudges +x
    SyntheticSample s = gen_sequence(cfg, seed, &right);
    auto [x0, y0] = frame_centroid(s, 0);
    auto [x1, y1] = frame_centroid(s, 1);
    CHECK(x1 - x0 == doctest::Approx(cfg.action_step).epsilon(1e-4));
    CHECK(y1 - y0 == doctest::Approx(0.0).scale(1.0).epsilon(1e-4));

    std::vector<index_t> down{0, 2};
    SyntheticSample t = gen_sequence(cfg, seed, &down);
    auto [x0d, y0d] = frame_centroid(t, 0);
    auto [x1d, y1d] = frame_centroid(t, 1);
    CHECK(y1d - y0d == doctest::Approx(cfg.action_step).epsilon(1e-4));
    CHECK(x1d - x0d == doctest::Approx(0.0).scale(1.0).epsilon(1e-4));
}

TEST_CASE("free drift moves the centroid by a constant displacement per frame") {
    DataConfig cfg;
    cfg.height = 64;
    cfg.width = 64;
    cfg.num_frames = 4;
    cfg.num_sprites = 1;
    cfg.sprite_size = 5.0;
    cfg.max_speed = 1.0;
    cfg.action_step = 0.0;
    const std::uint64_t seed = safe_seed(cfg, cfg.max_speed * cfg.num_frames + 0.5);

    SyntheticSample s = gen_sequence(cfg, seed);
    std::vector<double> dx, dy;
    for (index_t k = 0; k + 1 < cfg.num_frames; ++k) {
        auto [xa, ya] = frame_centroid(s, k);
        auto [xb, yb] = frame_centroid(s, k + 1);
        dx.push_back(xb - xa);
        dy.push_back(yb - ya);
    }
    for (size_t k = 1; k < dx.size(); ++k) {
        CHECK(dx[k] == doctest::Approx(dx[0]).scale(1.0).epsilon(1e-3));
        CHECK(dy[k] == doctest::Approx(dy[0]).scale(1.0).epsilon(1e-3));
    }
}

TEST_CASE("walls reflect the sprite and preserve its rendered mass") {
    DataConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    cfg.num_frames = 10;
    cfg.num_sprites = 1;
    cfg.sprite_size = 4.0;
    cfg.max_speed = 0.0;
    cfg.action_step = 2.0;
    std::vector<index_t> all_right(10, 0);
    SyntheticSample s = gen_sequence(cfg, 3, &all_right);

    const double m = cfg.sprite_size / 2;
    const double mass0 = frame_mass(s, 0);
    CHECK(mass0 == doctest::Approx(cfg.sprite_size * cfg.sprite_size).epsilon(1e-4));
    for (index_t k = 0; k < cfg.num_frames; ++k) {
        auto [cx, cy] = frame_centroid(s, k);
        CHECK(cx >= m - 1e-3);
        CHECK(cx <= cfg.width - m + 1e-3);
        CHECK(cy >= m - 1e-3);
        CHECK(cy <= cfg.height - m + 1e-3);
        CHECK(frame_mass(s, k) == doctest::Approx(mass0).epsilon(1e-4));
    }
}

TEST_CASE("pixels stay inside [0,1] with overlapping sprites") {
    DataConfig cfg;
    cfg.num_sprites = 4;
    cfg.num_frames = 6;
    cfg.max_speed = 2.0;
    SyntheticSample s = gen_sequence(cfg, 9);
    for (float v : s.frames) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("gen_dataset derives one deterministic sequence per index") {
    DataConfig cfg;
    cfg.num_frames = 3;
    auto ds = gen_dataset(cfg, 4, 500);
    REQUIRE(ds.size() == 4);
    auto ds2 = gen_dataset(cfg, 4, 500);
    for (size_t i = 0; i < ds.size(); ++i) {
        CHECK(ds[i].frames == ds2[i].frames);
        CHECK(ds[i].seed == ds2[i].seed);
    }
    CHECK(ds[0].frames != ds[1].frames);
    CHECK_THROWS_AS(gen_dataset(cfg, 0, 1), ConfigError);
}

TEST_CASE("data config validation rejects out-of-range parameters") {
    DataConfig cfg;
    cfg.sprite_size = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = DataConfig{};
    cfg.sprite_size = 40.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = DataConfig{};
    cfg.num_frames = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = DataConfig{};
    cfg.action_vocab = 5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_NOTHROW(DataConfig{}.validate());
}

TEST_CASE("patchify reproduces the checkerboard tiles in row-major order") {
    Tensor<float> frame = Tensor<float>::zeros({4, 4, 1});
    auto& v = frame.mutable_data();
    for (index_t r = 0; r < 4; ++r)
        for (index_t c = 0; c < 4; ++c) v[static_cast<size_t>(r * 4 + c)] = float((r + c) % 2);

    Tensor<float> tok = patchify(frame, 2);
    REQUIRE(tok.shape() == Shape{4, 4});
    // every 2x2 tile of the checkerboard reads [0,1,1,0] row-major
    for (index_t t = 0; t < 4; ++t) {
        CHECK(tok.at({t, 0}) == 0.0f);
        CHECK(tok.at({t, 1}) == 1.0f);
        CHECK(tok.at({t, 2}) == 1.0f);
        CHECK(tok.at({t, 3}) == 0.0f);
    }
}

TEST_CASE("patchify round trip is bitwise and handles the degenerate patch") {
    Rng rng(mix64(7, stream::data));
    Tensor<float> frame = Tensor<float>::zeros({8, 12, 3});
    for (auto& v : frame.mutable_data()) v = static_cast<float>(rng.uniform());

    Tensor<float> tok = patchify(frame, 4);
    REQUIRE(tok.shape() == Shape{2 * 3, 4 * 4 * 3});
    Tensor<float> back = unpatchify(tok, 8, 12, 3, 4);
    REQUIRE(back.shape() == frame.shape());
    for (size_t e = 0; e < frame.data().size(); ++e) CHECK(back.data()[e] == frame.data()[e]);

    // p == H == W collapses the frame to a single token
    Tensor<float> small = Tensor<float>::zeros({3, 3, 2});
    for (auto& v : small.mutable_data()) v = static_cast<float>(rng.uniform());
    Tensor<float> one = patchify(small, 3);
    REQUIRE(one.shape() == Shape{1, 18});
    Tensor<float> small_back = unpatchify(one, 3, 3, 2, 3);
    for (size_t e = 0; e < small.data().size(); ++e)
        CHECK(small_back.data()[e] == small.data()[e]);

    Tensor<float> ragged = Tensor<float>::zeros({5, 4, 1});
    CHECK_THROWS_AS(patchify(ragged, 2), ShapeError);
    CHECK_THROWS_AS(unpatchify(tok, 8, 12, 3, 2), ShapeError);
}

TEST_CASE("tokenizer validation names data.patch_size on divisibility failures") {
    TokenizerConfig tok;
    tok.patch_size = 4;
    CHECK_NOTHROW(tok.validate(32, 32, 1));
    try {
        tok.validate(30, 32, 1);
        REQUIRE(false);
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("data.patch_size") != std::string::npos);
    }
    tok.channel_shift = {0.5, 0.5};
    CHECK_THROWS_AS(tok.validate(32, 32, 1), ConfigError);
}

TEST_CASE("desk-scale defaults produce 64 tokens of dim 16 per frame") {
    DataConfig cfg;
    CHECK(cfg.height == 32);
    CHECK(cfg.width == 32);
    CHECK(cfg.channels == 1);
    CHECK(cfg.num_frames == 16);
    CHECK(cfg.action_vocab == 4);
    TokenizerConfig tok;
    CHECK(tok.patch_size == 4);

    SyntheticSample s = gen_sequence(cfg, 11);
    Tensor<float> tokens = sample_tokens<float>(s, tok.patch_size);
    CHECK(tokens.shape() == Shape{16 * 64, 16});

    Tensor<float> f0 = frame_tensor<float>(s, 0);
    Tensor<float> t0 = patchify(f0, 4);
    for (index_t t = 0; t < 64; ++t)
        for (index_t d = 0; d < 16; ++d) CHECK(tokens.at({t, d}) == t0.at({t, d}));
}

TEST_CASE("token normalization maps [0,1] onto [-1,1] and inverts") {
    TokenizerConfig tok;
    Tensor<float> t = Tensor<float>::from_data({1, 3}, {0.0f, 0.5f, 1.0f});
    Tensor<float> n = normalize_tokens(tok, t, 1);
    CHECK(n.at({0, 0}) == -1.0f);
    CHECK(n.at({0, 1}) == 0.0f);
    CHECK(n.at({0, 2}) == 1.0f);
    Tensor<float> back = denormalize_tokens(tok, n, 1);
    for (index_t d = 0; d < 3; ++d) CHECK(back.at({0, d}) == t.at({0, d}));

    Rng rng(mix64(3, stream::data));
    Tensor<float> r = Tensor<float>::zeros({4, 6});
    for (auto& v : r.mutable_data()) v = static_cast<float>(rng.uniform());
    Tensor<float> rt = denormalize_tokens(tok, normalize_tokens(tok, r, 1), 1);
    for (size_t e = 0; e < r.data().size(); ++e)
        CHECK(double(rt.data()[e]) == doctest::Approx(double(r.data()[e])).epsilon(1e-6));
}

TEST_CASE("psnr hits its fixed points and is symmetric") {
    Rng rng(mix64(21, stream::data));
    Tensor<double> a = random_frame(8, 8, 1, rng, 0.0, 1.0);
    CHECK(psnr(a, a) == 99.0);

    Tensor<double> zeros = Tensor<double>::zeros({8, 8, 1});
    Tensor<double> ones = Tensor<double>::full({8, 8, 1}, 1.0);
    CHECK(psnr(zeros, ones) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));

    Tensor<double> b = random_frame(8, 8, 1, rng, 0.0, 1.0);
    CHECK(psnr(a, b) == psnr(b, a));
    CHECK(psnr(a, b) > 0.0);
    CHECK(psnr(a, b) < 99.0);
}

TEST_CASE("psnr and ssim reject malformed inputs") {
    Tensor<double> a = Tensor<double>::full({8, 8, 1}, 0.5);
    Tensor<double> wrong = Tensor<double>::full({8, 4, 1}, 0.5);
    CHECK_THROWS_AS(psnr(a, wrong), ShapeError);
    CHECK_THROWS_AS(ssim(a, wrong), ShapeError);

    Tensor<double> hot = a.clone();
    hot.mutable_data()[3] = 1.5;
    CHECK_THROWS_AS(psnr(a, hot), Error);
    CHECK_THROWS_AS(ssim(a, hot), Error);
    Tensor<double> cold = a.clone();
    cold.mutable_data()[3] = -0.1;
    CHECK_THROWS_AS(psnr(a, cold), Error);

    Tensor<double> flat = Tensor<double>::full({64}, 0.5);
    CHECK_THROWS_AS(psnr(flat, flat), ShapeError);
}

TEST_CASE("ssim of a frame with itself is exactly one") {
    Rng rng(mix64(31, stream::data));
    Tensor<double> a = random_frame(16, 16, 2, rng, 0.0, 1.0);
    CHECK(ssim(a, a) == 1.0);

    // below the 11-pixel window the largest odd window that fits is used
    Tensor<double> tiny = random_frame(6, 9, 1, rng, 0.0, 1.0);
    CHECK(ssim(tiny, tiny) == 1.0);

    Tensor<float> af = Tensor<float>::zeros({12, 12, 1});
    for (auto& v : af.mutable_data()) v = static_cast<float>(rng.uniform());
    CHECK(ssim(af, af) == 1.0);
}

TEST_CASE("ssim of distinct constant frames matches the closed form") {
    // constant 0.4 vs 0.6: variance terms vanish, so every window reduces to
    // (2*0.4*0.6 + 1e-4) / (0.4^2 + 0.6^2 + 1e-4) = 0.4801 / 0.5201
    Tensor<double> a = Tensor<double>::full({11, 11, 1}, 0.4);
    Tensor<double> b = Tensor<double>::full({11, 11, 1}, 0.6);
    CHECK(ssim(a, b) == doctest::Approx(0.4801 / 0.5201).epsilon(1e-9));
}

TEST_CASE("ssim decreases monotonically with noise level") {
    Rng rng(mix64(41, stream::data));
    const double sigmas[3] = {0.01, 0.05, 0.1};
    double means[3] = {0, 0, 0};
    const int trials = 50;
    for (int n = 0; n < trials; ++n) {
        Tensor<double> base = random_frame(16, 16, 1, rng, 0.2, 0.8);
        for (int k = 0; k < 3; ++k) means[k] += ssim(base, noisy_copy(base, sigmas[k], rng));
    }
    for (double& m : means) m /= trials;
    CHECK(means[0] > means[1]);
    CHECK(means[1] > means[2]);
    CHECK(means[0] > 0.8);
    CHECK(means[2] < means[0]);
}

TEST_CASE("metrics csv lists one row per generated frame") {
    std::vector<MetricRow> rows{{0, 0, 99.0, 1.0}, {0, 1, 31.25, 0.875}};
    const std::string csv = metrics_csv(rows);
    CHECK(csv.find("seq_id,frame,psnr,ssim\n") == 0);
    CHECK(csv.find("0,1,31.250000,0.875000") != std::string::npos);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}
