#include <cmath>
#include <vector>

#include "doctest.h"
#include "hgen/th2i.hpp"

using namespace hgen;
using namespace hgen::th2i;

namespace {

ad::Arr random_arr(std::vector<int64_t> shape, Rng& rng, double scale = 1.0) {
    ad::Arr a(std::move(shape));
    for (auto& v : a.v) v = scale * rng.gaussian();
    return a;
}

Th2iConfig small_config() {
    Th2iConfig cfg;
    cfg.latent_channels = 2;
    cfg.latent_hw = 8;
    cfg.base_width = 8;
    cfg.mid_width = 16;
    cfg.cond_dim = 6;
    cfg.head_count = 2;
    return cfg;
}

}  // namespace

TEST_CASE("autoencoder shape arithmetic and validation") {
    AeConfig cfg;
    Rng rng(31);
    ad::ParamBundle params;
    init_ae_params(params, cfg, rng);

    auto img = ad::constant(random_arr({2, 3, 64, 64}, rng, 0.1));
    auto z = ae_encode(cfg, params, img);
    REQUIRE(z->val.shape == std::vector<int64_t>{2, 4, 16, 16});
    auto back = ae_decode(cfg, params, z);
    CHECK(back->val.shape == std::vector<int64_t>{2, 3, 64, 64});

    // Indivisible dims rejected.
    auto bad = ad::constant(random_arr({1, 3, 30, 64}, rng));
    CHECK_THROWS_AS(ae_encode(cfg, params, bad), DimensionError);

    // Double encode of the same image is bit-identical (pure function).
    auto z2 = ae_encode(cfg, params, img);
    CHECK(z->val.v == z2->val.v);
}

TEST_CASE("autoencoder reconstruction loss trains downward") {
    AeConfig cfg;
    cfg.width = 8;
    Rng rng(32);
    ad::ParamBundle params;
    init_ae_params(params, cfg, rng);

    // Smooth synthetic images: sums of low-frequency gradients.
    auto make_batch = [&](int64_t b) {
        ad::Arr img({b, 3, 16, 16});
        for (int64_t i = 0; i < b; ++i) {
            double ax = rng.uniform(), ay = rng.uniform(), c = rng.uniform();
            for (int64_t ch = 0; ch < 3; ++ch)
                for (int64_t y = 0; y < 16; ++y)
                    for (int64_t x = 0; x < 16; ++x)
                        img.at(((i * 3 + ch) * 16 + y) * 16 + x) =
                            0.5 * c + 0.3 * ax * x / 16.0 + 0.3 * ay * y / 16.0 +
                            0.1 * static_cast<double>(ch);
        }
        return img;
    };

    ad::AdamState opt;
    ad::AdamHyper hyper;
    hyper.lr = 2e-3;
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 150; ++step) {
        auto loss = ae_loss(cfg, params, ad::constant(make_batch(8)));
        params.zero_grad();
        ad::backward(loss);
        opt.step(params, hyper);
        if (step == 0) first = loss->val.at(0);
        last = loss->val.at(0);
    }
    CHECK(last < 0.5 * first);
}

TEST_CASE("autoencoder gradients match finite differences") {
    AeConfig cfg;
    cfg.width = 4;
    Rng rng(33);
    ad::ParamBundle params;
    init_ae_params(params, cfg, rng);
    auto img = random_arr({1, 3, 8, 8}, rng, 0.3);

    auto loss_fn = [&](ad::ParamBundle& p, bool grads_out) {
        auto loss = ae_loss(cfg, p, ad::constant(img));
        if (grads_out) {
            p.zero_grad();
            ad::backward(loss);
        }
        return loss->val.at(0);
    };
    auto report = ad::grad_check(loss_fn, params, 1e-6, 1e-3, 5, 41);
    CHECK(report.pass);
}

TEST_CASE("denoiser shape, conditioning sensitivity, and validation") {
    Th2iConfig cfg = small_config();
    Rng rng(34);
    ad::ParamBundle params;
    init_th2i_params(params, cfg, rng);

    auto z = ad::constant(random_arr({3, 2, 8, 8}, rng));
    std::vector<int64_t> ts = {1, 4, 9};
    auto ctx = ad::constant(random_arr({3, 5, 6}, rng));

    auto out = th2i_denoise(cfg, params, z, ts, ctx);
    REQUIRE(out->val.shape == z->val.shape);

    // A different condition changes the prediction.
    auto ctx2 = ad::constant(random_arr({3, 5, 6}, rng));
    auto out2 = th2i_denoise(cfg, params, z, ts, ctx2);
    CHECK(out->val.v != out2->val.v);

    CHECK_THROWS_AS(th2i_denoise(cfg, params, z, {1, 2}, ctx), DimensionError);
    auto bad_ctx = ad::constant(random_arr({3, 5, 7}, rng));
    CHECK_THROWS_AS(th2i_denoise(cfg, params, z, ts, bad_ctx), DimensionError);

    Th2iConfig bad = cfg;
    bad.latent_hw = 7;
    CHECK_THROWS_AS(bad.validate(), SchemaError);
    bad = cfg;
    bad.head_count = 3;
    CHECK_THROWS_AS(bad.validate(), SchemaError);
}

TEST_CASE("zero-weight denoiser loss is the mean square of the noise") {
    Th2iConfig cfg = small_config();
    Rng rng(35);
    ad::ParamBundle params;
    init_th2i_params(params, cfg, rng);
    for (auto& [name, var] : params.params)
        for (auto& v : var->val.v) v = 0.0;

    diff::NoiseSchedule sched = diff::build_schedule(20, diff::ScheduleKind::kLinearBeta,
                                                     0.01, 0.2);
    const int64_t B = 100;  // 100 * 2*8*8 = 12800 noise draws
    ad::Arr latents = random_arr({B, 2, 8, 8}, rng, 0.5);
    std::vector<ad::Var> conds(static_cast<size_t>(B),
                               ad::constant(random_arr({4, 6}, rng)));
    auto null_cond = ad::constant(random_arr({2, 6}, rng));
    Th2iNoiseDraw draw = draw_th2i_noise(B, cfg, sched, 0.1, rng);

    auto loss = th2i_loss(cfg, params, latents, conds, null_cond, draw, sched);
    // Prediction is identically zero, so the loss is the sample mean of eps^2,
    // which must match its expectation 1.0 within 3%.
    double want = 0.0;
    for (double v : draw.eps.v) want += v * v;
    want /= static_cast<double>(draw.eps.numel());
    CHECK(loss->val.at(0) == doctest::Approx(want).epsilon(1e-10));
    CHECK(std::abs(loss->val.at(0) - 1.0) < 0.03);
}

TEST_CASE("loss gradients match finite differences, mixed condition lengths") {
    Th2iConfig cfg = small_config();
    Rng rng(36);
    ad::ParamBundle params;
    init_th2i_params(params, cfg, rng);
    diff::NoiseSchedule sched = diff::build_schedule(10, diff::ScheduleKind::kLinearBeta,
                                                     0.01, 0.2);

    ad::Arr latents = random_arr({2, 2, 8, 8}, rng, 0.5);
    // Conditions and the null sequence as trainable leaves so the check also
    // covers gradients flowing back into the condition encoder.
    params.add("cond0", random_arr({3, 6}, rng, 0.2));
    params.add("cond1", random_arr({5, 6}, rng, 0.2));
    params.add("null_cond", random_arr({2, 6}, rng, 0.2));

    Th2iNoiseDraw draw = draw_th2i_noise(2, cfg, sched, 0.0, rng);
    draw.use_null = {false, true};  // exercise the null-replacement path too

    auto loss_fn = [&](ad::ParamBundle& p, bool grads_out) {
        std::vector<ad::Var> conds = {p.get("cond0"), p.get("cond1")};
        auto loss = th2i_loss(cfg, p, latents, conds, p.get("null_cond"), draw, sched);
        if (grads_out) {
            p.zero_grad();
            ad::backward(loss);
        }
        return loss->val.at(0);
    };
    auto report = ad::grad_check(loss_fn, params, 1e-6, 1e-3, 5, 42);
    CHECK(report.pass);

    // Explicit check: gradients reach both the real and the null condition.
    loss_fn(params, true);
    double g_cond = 0.0, g_null = 0.0;
    for (double v : params.get("cond0")->grad.v) g_cond += std::abs(v);
    for (double v : params.get("null_cond")->grad.v) g_null += std::abs(v);
    CHECK(g_cond > 0.0);
    CHECK(g_null > 0.0);
}

TEST_CASE("ancestral sampler: guidance degenerate cases and determinism") {
    Th2iConfig cfg = small_config();
    Rng rng(37);
    ad::ParamBundle params;
    init_th2i_params(params, cfg, rng);
    diff::NoiseSchedule sched = diff::build_schedule(8, diff::ScheduleKind::kLinearBeta,
                                                     0.02, 0.25);
    auto cond = ad::constant(random_arr({4, 6}, rng));
    auto null_cond = ad::constant(random_arr({2, 6}, rng));

    // Reference ancestral loop pinned to one branch.
    auto reference = [&](const ad::Var& branch_cond, uint64_t seed) {
        ad::NoGradGuard ng;
        Rng r(seed);
        const int64_t B = 2;
        ad::Arr x({B, 2, 8, 8});
        for (auto& v : x.v) v = r.gaussian();
        auto ctx = ad::add(ad::constant(ad::Arr({B, branch_cond->val.shape[0], 6})),
                           ad::reshape(branch_cond, {1, branch_cond->val.shape[0], 6}));
        for (int64_t t = sched.T; t >= 1; --t) {
            std::vector<int64_t> ts(static_cast<size_t>(B), t);
            ad::Arr eps = th2i_denoise(cfg, params, ad::constant(x), ts, ctx)->val;
            double ab = sched.alpha_bar(t);
            auto pc = diff::posterior_coeffs(sched, t);
            double sd = t > 1 ? std::sqrt(pc.variance) : 0.0;
            for (int64_t i = 0; i < x.numel(); ++i) {
                double x0 = (x.at(i) - std::sqrt(1.0 - ab) * eps.at(i)) / std::sqrt(ab);
                x.at(i) = pc.coef_x0 * x0 + pc.coef_xt * x.at(i) +
                          (sd > 0.0 ? sd * r.gaussian() : 0.0);
            }
        }
        return x;
    };

    Rng r1(4242);
    auto g1 = ddpm_sample(cfg, params, cond, null_cond, 2, sched, 1.0, r1);
    CHECK(g1.v == reference(cond, 4242).v);

    Rng r0(4242);
    auto g0 = ddpm_sample(cfg, params, cond, null_cond, 2, sched, 0.0, r0);
    CHECK(g0.v == reference(null_cond, 4242).v);

    Rng ra(5050), rb(5050);
    auto a = ddpm_sample(cfg, params, cond, null_cond, 2, sched, 4.0, ra);
    auto b = ddpm_sample(cfg, params, cond, null_cond, 2, sched, 4.0, rb);
    CHECK(a.v == b.v);
}

TEST_CASE("multistep latent sampler is deterministic and decodes to image dims") {
    Th2iConfig cfg = small_config();
    Rng rng(38);
    ad::ParamBundle params;
    init_th2i_params(params, cfg, rng);
    AeConfig ae_cfg;
    ae_cfg.width = 8;
    ae_cfg.latent_channels = 2;
    ad::ParamBundle ae_params;
    init_ae_params(ae_params, ae_cfg, rng);

    diff::NoiseSchedule sched = diff::build_schedule(50);
    auto cond = ad::constant(random_arr({4, 6}, rng));
    auto null_cond = ad::constant(random_arr({2, 6}, rng));

    Rng ra(606), rb(606);
    auto img_a =
        sample_th2i(cfg, params, ae_cfg, ae_params, cond, null_cond, sched, 10, 4.0, ra);
    auto img_b =
        sample_th2i(cfg, params, ae_cfg, ae_params, cond, null_cond, sched, 10, 4.0, rb);
    CHECK(img_a.v == img_b.v);
    // Decoded dims are exactly 4x the latent dims.
    CHECK(img_a.shape == std::vector<int64_t>{1, 3, 32, 32});
}

// Unconditional two-mode toy: latents concentrated at +0.8 and -0.8 with
// 70/30 weights; sampled mode frequencies must match within 5%.
TEST_CASE("two-mode toy: trained sampler reproduces mode frequencies") {
    Th2iConfig cfg;
    cfg.latent_channels = 1;
    cfg.latent_hw = 8;
    cfg.base_width = 8;
    cfg.mid_width = 16;
    cfg.cond_dim = 4;
    cfg.head_count = 2;
    cfg.drop_prob = 0.0;

    diff::NoiseSchedule sched =
        diff::build_schedule(50, diff::ScheduleKind::kLinearBeta, 2e-3, 0.25);
    Rng rng(20241001);
    ad::ParamBundle params;
    init_th2i_params(params, cfg, rng);
    auto cond = ad::constant(random_arr({2, 4}, rng, 0.3));

    ad::AdamState opt;
    ad::AdamHyper hyper;
    const double lr0 = 2e-3;
    const int64_t steps = 800, batch = 32;
    const double mode = 0.8, jitter = 0.05, p_hi = 0.7;
    for (int64_t s = 0; s < steps; ++s) {
        ad::Arr lat({batch, 1, 8, 8});
        for (int64_t i = 0; i < batch; ++i) {
            double m = rng.uniform() < p_hi ? mode : -mode;
            for (int64_t j = 0; j < 64; ++j)
                lat.at(i * 64 + j) = m + jitter * rng.gaussian();
        }
        std::vector<ad::Var> conds(static_cast<size_t>(batch), cond);
        auto loss = th2i_loss(cfg, params, lat, conds, cond, sched, rng);
        params.zero_grad();
        ad::backward(loss);
        hyper.lr = lr0 * 0.5 *
                   (1.0 + std::cos(M_PI * static_cast<double>(s) /
                                   static_cast<double>(steps)));
        opt.step(params, hyper);
    }

    Rng srng(31337);
    const int64_t n = 2000;
    auto samples = ddpm_sample(cfg, params, cond, cond, n, sched, 1.0, srng);
    int64_t hi = 0;
    for (int64_t i = 0; i < n; ++i) {
        double m = 0.0;
        for (int64_t j = 0; j < 64; ++j) m += samples.at(i * 64 + j);
        if (m > 0.0) ++hi;
    }
    double freq = static_cast<double>(hi) / static_cast<double>(n);
    CHECK(std::abs(freq - p_hi) < 0.05);
}
