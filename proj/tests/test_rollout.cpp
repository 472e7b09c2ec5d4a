#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "scd/rollout.hpp"

using namespace scd;

namespace {

SCDConfig tiny_scd() {
    SCDConfig cfg;
    cfg.enc_blocks = 2;
    cfg.dec_blocks = 2;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.frame_h = 4;
    cfg.frame_w = 4;
    cfg.patch_size = 2;
    return cfg;
}

BaselineConfig tiny_dit() {
    BaselineConfig cfg;
    cfg.depth = 3;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.frame_h = 4;
    cfg.frame_w = 4;
    cfg.patch_size = 2;
    return cfg;
}

template <class S>
void randomize_modulation(std::vector<DiTBlock<S>>& blocks, Rng& rng) {
    for (DiTBlock<S>& b : blocks) {
        b.w_mod = Tensor<S>::randn(b.w_mod.shape(), rng, S(0.2));
        b.b_mod = Tensor<S>::randn(b.b_mod.shape(), rng, S(0.2));
    }
}

template <class S>
SCDModel<S> lively_scd(std::uint64_t seed) {
    SCDModel<S> m = SCDModel<S>::init(tiny_scd(), seed);
    Rng rng(mix64(seed, 0xabcd));
    randomize_modulation(m.enc, rng);
    randomize_modulation(m.dec, rng);
    return m;
}

template <class S>
BaselineModel<S> lively_dit(BaselineConfig cfg, std::uint64_t seed) {
    BaselineModel<S> m = BaselineModel<S>::init(cfg, seed);
    Rng rng(mix64(seed, 0xdcba));
    randomize_modulation(m.blocks, rng);
    return m;
}

template <class S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0;
    for (size_t i = 0; i < a.data().size(); ++i)
        m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
    return m;
}

RolloutConfig quick_rollout(index_t frames, index_t steps, std::uint64_t seed) {
    RolloutConfig cfg;
    cfg.num_frames = frames;
    cfg.sampler = SamplerConfig::linear(steps);
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("rollout config validation") {
    RolloutConfig cfg = quick_rollout(0, 4, 1);
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = quick_rollout(2, 4, 1);
    cfg.corruption.cfg_scale = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_NOTHROW(quick_rollout(2, 4, 1).validate());
}

TEST_CASE("scd rollout produces finite frames and exact block counts") {
    SCDModel<float> model = lively_scd<float>(3);
    InvocationCounters counters;
    model.counters = &counters;
    RolloutConfig cfg = quick_rollout(4, 8, 11);
    std::vector<index_t> actions{0, 1, 2, 3};

    RolloutStats stats;
    counters.reset();
    Tensor<float> out =
        scd_rollout(model, actions, cfg, static_cast<CaptureHooks<float>*>(nullptr), &stats);
    REQUIRE(out.shape() == Shape{4 * 4, 4});
    for (float v : out.data()) CHECK(std::isfinite(v));

    // N * (l + S*m) = 4 * (2 + 8*2) = 72, and the encoder ran once per frame
    CHECK(counters.total_block_passes() == 4 * (2 + 8 * 2));
    CHECK(counters.encoder_block_passes == 4 * 2);
    CHECK(counters.decoder_block_passes == 4 * 8 * 2);
    CHECK(counters.encoder_invocations == 4);
    CHECK(stats.peak_cache_tokens == 4 * 4);  // N frames x 4 tokens, append-only

    CHECK(counters.total_block_passes() ==
          scd_analytic_invocations(model.cfg, cfg));
}

TEST_CASE("single-step rollout degenerates cleanly") {
    SCDModel<float> model = lively_scd<float>(5);
    RolloutConfig cfg = quick_rollout(2, 1, 3);
    Tensor<float> out = scd_rollout(model, {0, 0}, cfg);
    REQUIRE(out.shape() == Shape{8, 4});
    for (float v : out.data()) CHECK(std::isfinite(v));
}

TEST_CASE("generated frame i is bitwise invariant to later frames") {
    SCDModel<float> model = lively_scd<float>(7);
    std::vector<index_t> actions{1, 0, 3, 2};
    Tensor<float> full = scd_rollout(model, actions, quick_rollout(4, 6, 21));
    Tensor<float> half = scd_rollout(model, {1, 0}, quick_rollout(2, 6, 21));
    for (index_t e = 0; e < half.numel(); ++e)
        CHECK(half.data()[static_cast<size_t>(e)] == full.data()[static_cast<size_t>(e)]);

    Tensor<float> other_seed = scd_rollout(model, actions, quick_rollout(4, 6, 22));
    CHECK(max_abs_diff(other_seed, full) > 0.0);
}

TEST_CASE("incremental encoding matches full-prefix re-encoding") {
    SCDModel<float> model = lively_scd<float>(9);
    const index_t T = model.cfg.tokens_per_frame(), td = model.cfg.token_dim();
    std::vector<index_t> actions{0, 2, 1, 3, 0};
    RolloutConfig cfg = quick_rollout(5, 6, 33);
    Tensor<float> incremental = scd_rollout(model, actions, cfg);

    // replay generation, but rebuild every context from scratch over the
    // whole generated prefix (the dummy last frame is never read: context i
    // depends on slots <= i-1 only)
    NoGradGuard guard;
    Tensor<float> generated;
    for (index_t i = 1; i <= cfg.num_frames; ++i) {
        Tensor<float> stacked = Tensor<float>::zeros({T, td});
        if (generated.defined()) stacked = concat_seqdim(generated, stacked);
        std::vector<index_t> acts(actions.begin(), actions.begin() + i);
        Tensor<float> contexts = encode_contexts(model, stacked, acts);
        CausalContext<float> ci = context_of(contexts, i, T);
        Rng rng(mix64(cfg.seed, stream::frame_init, static_cast<std::uint64_t>(i)));
        Tensor<float> z = Tensor<float>::randn({T, td}, rng);
        Tensor<float> xi = euler_sample<float>(
            [&](const Tensor<float>& x, double t, index_t) {
                return decode_velocity(model, x, t, ci);
            },
            z, cfg.sampler);
        generated = i == 1 ? xi : concat_seqdim(generated, xi);
    }
    CHECK(max_abs_diff(incremental, generated) < 1e-5);

    SCDModel<double> dmodel = lively_scd<double>(9);
    Tensor<double> dinc = scd_rollout(dmodel, actions, cfg);
    for (double v : dinc.data()) CHECK(std::isfinite(v));
}

TEST_CASE("guided velocity fixed points are bitwise") {
    SCDModel<float> model = lively_scd<float>(13);
    const index_t T = model.cfg.tokens_per_frame(), td = model.cfg.token_dim();
    Rng rng(55);
    Tensor<float> x_t = Tensor<float>::randn({T, td}, rng);
    Tensor<float> ctx_tokens = Tensor<float>::randn({T, model.cfg.hidden}, rng);
    CausalContext<float> c{ctx_tokens, 2};
    Tensor<float> zeta = Tensor<float>::randn({T, model.cfg.hidden}, rng);
    Tensor<float> unguided = decode_velocity(model, x_t, 0.5, c);

    CorruptionConfig cor;
    cor.cfg_eta = 0.0;
    for (double s : {0.0, 0.7, 2.0}) {
        cor.cfg_scale = s;
        Tensor<float> v = guided_velocity(model, x_t, 0.5, c, cor, zeta);
        CHECK(max_abs_diff(v, unguided) == 0.0);  // cfg_eta 0 -> c~ = c
    }

    cor.cfg_eta = 0.4;
    cor.cfg_scale = 1.0;
    Tensor<float> v1 = guided_velocity(model, x_t, 0.5, c, cor, zeta);
    CHECK(max_abs_diff(v1, unguided) == 0.0);  // scale 1 -> conditional
}

TEST_CASE("guided velocity at scale 2 extrapolates away from the corrupted branch") {
    SCDModel<double> model = lively_scd<double>(17);
    const index_t T = model.cfg.tokens_per_frame(), td = model.cfg.token_dim();
    Rng rng(66);
    Tensor<double> x_t = Tensor<double>::randn({T, td}, rng);
    CausalContext<double> c{Tensor<double>::randn({T, model.cfg.hidden}, rng), 1};
    Tensor<double> zeta = Tensor<double>::randn({T, model.cfg.hidden}, rng);

    CorruptionConfig cor;
    cor.cfg_eta = 0.3;
    cor.cfg_scale = 2.0;
    Tensor<double> guided = guided_velocity(model, x_t, 0.4, c, cor, zeta);

    Tensor<double> v_clean = decode_velocity(model, x_t, 0.4, c);
    CausalContext<double> cc = corrupt_context(c, 0.3, zeta);
    Tensor<double> v_neg = decode_velocity(model, x_t, 0.4, cc);
    CHECK(max_abs_diff(guided, v_neg) > 0.0);  // corruption actually bites

    // same expression shape as the library: v_neg + s*(v_clean - v_neg)
    Tensor<double> ref = add(v_neg, scale(sub(v_clean, v_neg), 2.0));
    CHECK(max_abs_diff(guided, ref) == 0.0);
    // algebraic form 2*v(c) - v(c~) agrees to rounding
    Tensor<double> algebraic = sub(scale(v_clean, 2.0), v_neg);
    CHECK(max_abs_diff(guided, algebraic) < 1e-12);

    CHECK_THROWS_AS(guided_velocity(model, x_t, 0.4, c, cor, Tensor<double>()), Error);
}

TEST_CASE("zeta is drawn once per frame: guided rollout is deterministic") {
    SCDModel<float> model = lively_scd<float>(19);
    RolloutConfig cfg = quick_rollout(3, 4, 77);
    cfg.corruption.cfg_eta = 0.25;
    cfg.corruption.cfg_scale = 1.5;
    Tensor<float> a = scd_rollout(model, {0, 1, 2}, cfg);
    Tensor<float> b = scd_rollout(model, {0, 1, 2}, cfg);
    CHECK(max_abs_diff(a, b) == 0.0);

    // guidance doubles only the decoder passes
    InvocationCounters counters;
    model.counters = &counters;
    counters.reset();
    scd_rollout(model, {0, 1, 2}, cfg);
    CHECK(counters.total_block_passes() == scd_analytic_invocations(model.cfg, cfg));
    CHECK(counters.decoder_block_passes == 3 * 2 * 4 * 2);  // N * m * S * both branches
    model.counters = nullptr;

    // scale 1 short-circuits to the unguided rollout bitwise
    RolloutConfig fixed = cfg;
    fixed.corruption.cfg_scale = 1.0;
    RolloutConfig off = cfg;
    off.corruption.cfg_eta = 0.0;
    off.corruption.cfg_scale = 1.0;
    Tensor<float> u1 = scd_rollout(model, {0, 1, 2}, fixed);
    Tensor<float> u2 = scd_rollout(model, {0, 1, 2}, off);
    CHECK(max_abs_diff(u1, u2) == 0.0);
}

TEST_CASE("baseline rollout counts N*(S+1)*depth passes and caches every frame") {
    BaselineModel<float> model = lively_dit<float>(tiny_dit(), 23);
    InvocationCounters counters;
    model.counters = &counters;
    RolloutConfig cfg = quick_rollout(3, 5, 88);

    RolloutStats stats;
    counters.reset();
    Tensor<float> out = baseline_rollout(model, {0, 1, 0}, cfg,
                                         static_cast<CaptureHooks<float>*>(nullptr), &stats);
    REQUIRE(out.shape() == Shape{12, 4});
    for (float v : out.data()) CHECK(std::isfinite(v));
    CHECK(counters.baseline_block_passes == 3 * (5 + 1) * 3);
    CHECK(counters.total_block_passes() == baseline_analytic_invocations(model.cfg, cfg));
    CHECK(stats.peak_cache_tokens == 3 * 4);

    Tensor<float> half = baseline_rollout(model, {0, 1}, quick_rollout(2, 5, 88));
    for (index_t e = 0; e < half.numel(); ++e)
        CHECK(half.data()[static_cast<size_t>(e)] == out.data()[static_cast<size_t>(e)]);
}

TEST_CASE("skip schedules change counts but not identity-at-init outputs") {
    BaselineConfig cfg = tiny_dit();
    cfg.skip_schedule = SkipSchedule{1, 1, 1};
    BaselineModel<float> skip_model = BaselineModel<float>::init(cfg, 29);
    BaselineModel<float> plain_model = BaselineModel<float>::init(tiny_dit(), 29);

    RolloutConfig rcfg = quick_rollout(2, 4, 99);
    Tensor<float> a = baseline_rollout(skip_model, {0, 1}, rcfg);
    Tensor<float> b = baseline_rollout(plain_model, {0, 1}, rcfg);
    CHECK(max_abs_diff(a, b) == 0.0);  // zero-init blocks are identities

    InvocationCounters counters;
    skip_model.counters = &counters;
    counters.reset();
    baseline_rollout(skip_model, {0, 1}, rcfg);
    // s=1 runs 3 layers, s=2..4 run 2; plus depth 3 caching: 2*(9+3)
    CHECK(baseline_denoise_passes_per_frame(cfg, 4) == 9);
    CHECK(counters.total_block_passes() == 2 * (9 + 3));
    CHECK(counters.total_block_passes() == baseline_analytic_invocations(cfg, rcfg));
}

TEST_CASE("non-finite states surface the frame and step indices") {
    SCDModel<float> model = lively_scd<float>(31);
    model.head_w.mutable_data()[0] = std::nanf("");
    try {
        scd_rollout(model, {0, 0}, quick_rollout(2, 3, 5));
        REQUIRE(false);
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("euler_sample step 0") != std::string::npos);
        CHECK(msg.find("frame 1") != std::string::npos);
    }
}

TEST_CASE("bench reports medians and exact counter agreement for both families") {
    SCDModel<float> scd_model = lively_scd<float>(37);
    BaselineModel<float> dit_model = lively_dit<float>(tiny_dit(), 37);
    RolloutConfig cfg = quick_rollout(2, 4, 7);
    std::vector<index_t> actions{0, 1};

    BenchReport rs = bench_scd(scd_model, actions, cfg, 1, 3);
    CHECK(rs.family == "scd");
    CHECK(rs.sec_per_frame > 0.0);
    CHECK(rs.frames_per_second == doctest::Approx(1.0 / rs.sec_per_frame));
    CHECK(rs.bp_per_frame == 2 + 4 * 2);
    CHECK(rs.block_invocations == 2 * (2 + 4 * 2));
    CHECK(rs.counted_matches_analytic);
    CHECK(rs.peak_cache_tokens == 2 * 4);

    BenchReport rb = bench_baseline(dit_model, actions, cfg, 1, 3);
    CHECK(rb.family == "causal_dit");
    CHECK(rb.bp_per_frame == 4 * 3);              // S * depth, caching excluded
    CHECK(rb.block_invocations == 2 * (4 + 1) * 3);  // caching included
    CHECK(rb.counted_matches_analytic);

    CHECK_THROWS_AS(bench_scd(scd_model, actions, cfg, 0, 2), ConfigError);
}

TEST_CASE("analytic and counted invocations agree across random shapes") {
    Rng rng(2026);
    for (int trial = 0; trial < 6; ++trial) {
        SCDConfig mc = tiny_scd();
        mc.enc_blocks = 1 + static_cast<index_t>(rng.uniform_int(3));
        mc.dec_blocks = 1 + static_cast<index_t>(rng.uniform_int(3));
        SCDModel<float> model = SCDModel<float>::init(mc, 100 + trial);
        InvocationCounters counters;
        model.counters = &counters;

        RolloutConfig cfg = quick_rollout(1 + static_cast<index_t>(rng.uniform_int(3)),
                                          1 + static_cast<index_t>(rng.uniform_int(5)),
                                          rng.uniform_int(1000));
        std::vector<index_t> actions(static_cast<size_t>(cfg.num_frames), 0);
        counters.reset();
        scd_rollout(model, actions, cfg);
        CHECK(counters.total_block_passes() == scd_analytic_invocations(mc, cfg));

        BaselineConfig bc = tiny_dit();
        bc.depth = 2 + static_cast<index_t>(rng.uniform_int(3));
        if (trial % 2 == 1) bc.skip_schedule = SkipSchedule{1, 1, 1};
        BaselineModel<float> dit = BaselineModel<float>::init(bc, 200 + trial);
        InvocationCounters bcount;
        dit.counters = &bcount;
        bcount.reset();
        baseline_rollout(dit, actions, cfg);
        CHECK(bcount.total_block_passes() == baseline_analytic_invocations(bc, cfg));
    }
}
