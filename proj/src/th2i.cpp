#include "hgen/th2i.hpp"

#include <cmath>
#include <map>
#include <string>

namespace hgen::th2i {

using ad::Arr;
using ad::Var;

// ---------------------------------------------------------------- autoencoder

void AeConfig::validate() const {
    if (image_channels < 1 || latent_channels < 1 || width < 1)
        throw SchemaError("ae config: channel counts must be positive");
}

namespace {

void init_conv(ad::ParamBundle& p, const std::string& name, int64_t cout, int64_t cin,
               Rng& rng) {
    p.add(name + "_w", ad::init_uniform_fanin({cout, cin, 3, 3}, cin * 9, rng));
    p.add(name + "_b", Arr({cout}));
}

Var conv3(const ad::ParamBundle& p, const std::string& name, const Var& x, int stride) {
    return ad::conv2d(x, p.get(name + "_w"), p.get(name + "_b"), stride, 1);
}

}  // namespace

void init_ae_params(ad::ParamBundle& params, const AeConfig& cfg, Rng& rng) {
    cfg.validate();
    init_conv(params, "ae.enc0", cfg.width, cfg.image_channels, rng);
    init_conv(params, "ae.enc1", cfg.width, cfg.width, rng);
    init_conv(params, "ae.enc2", cfg.latent_channels, cfg.width, rng);
    init_conv(params, "ae.dec0", cfg.width, cfg.latent_channels, rng);
    init_conv(params, "ae.dec1", cfg.width, cfg.width, rng);
    init_conv(params, "ae.dec2", cfg.image_channels, cfg.width, rng);
}

Var ae_encode(const AeConfig& cfg, const ad::ParamBundle& params, const Var& image) {
    const auto& s = image->val.shape;
    if (s.size() != 4 || s[1] != cfg.image_channels)
        throw DimensionError("ae_encode: expected {B,C,H,W} image");
    if (s[2] % 4 != 0 || s[3] % 4 != 0)
        throw DimensionError("ae_encode: image dims must be divisible by 4");
    Var h = ad::relu(conv3(params, "ae.enc0", image, 2));
    h = ad::relu(conv3(params, "ae.enc1", h, 2));
    return conv3(params, "ae.enc2", h, 1);
}

Var ae_decode(const AeConfig& cfg, const ad::ParamBundle& params, const Var& latent) {
    const auto& s = latent->val.shape;
    if (s.size() != 4 || s[1] != cfg.latent_channels)
        throw DimensionError("ae_decode: expected {B,C_z,h,w} latent");
    Var h = ad::relu(conv3(params, "ae.dec0", latent, 1));
    h = ad::upsample2x(h);
    h = ad::relu(conv3(params, "ae.dec1", h, 1));
    h = ad::upsample2x(h);
    return conv3(params, "ae.dec2", h, 1);
}

Var ae_loss(const AeConfig& cfg, const ad::ParamBundle& params, const Var& image) {
    return ad::mse(ae_decode(cfg, params, ae_encode(cfg, params, image)), image);
}

// ------------------------------------------------------------------- denoiser

void Th2iConfig::validate() const {
    if (latent_channels < 1 || base_width < 1 || mid_width < 1 || cond_dim < 1)
        throw SchemaError("th2i config: dimensions must be positive");
    if (latent_hw < 2 || latent_hw % 2 != 0)
        throw SchemaError("th2i config: latent_hw must be even and >= 2");
    if (head_count < 1 || base_width % head_count != 0 || mid_width % head_count != 0)
        throw SchemaError("th2i config: head_count must divide both widths");
    if (drop_prob < 0.0 || drop_prob > 1.0)
        throw SchemaError("th2i config: drop_prob outside [0,1]");
    if (guidance < 0.0 || plms_steps < 1)
        throw SchemaError("th2i config: bad sampler defaults");
}

namespace {

nn::AttentionBlockSpec xattn_spec(const Th2iConfig& cfg, int64_t channels) {
    nn::AttentionBlockSpec s;
    s.model_dim = channels;
    s.head_count = cfg.head_count;
    s.ff_dim = channels * 2;
    s.mode = nn::AttentionMode::kCross;
    return s;
}

// {B,C,H,W} <-> {B,H*W,C}
Var to_tokens(const Var& x) {
    const auto& s = x->val.shape;
    return ad::transpose_last2(ad::reshape(x, {s[0], s[1], s[2] * s[3]}));
}
Var from_tokens(const Var& t, int64_t h, int64_t w) {
    const auto& s = t->val.shape;
    return ad::reshape(ad::transpose_last2(t), {s[0], s[2], h, w});
}

}  // namespace

void init_th2i_params(ad::ParamBundle& params, const Th2iConfig& cfg, Rng& rng) {
    cfg.validate();
    const int64_t W1 = cfg.base_width, W2 = cfg.mid_width;
    init_conv(params, "th2i.in", W1, cfg.latent_channels, rng);
    init_conv(params, "th2i.down", W2, W1, rng);
    init_conv(params, "th2i.mid", W2, W2, rng);
    init_conv(params, "th2i.up", W1, W1 + W2, rng);
    init_conv(params, "th2i.out", cfg.latent_channels, W1, rng);
    params.add("th2i.time1_w", ad::init_uniform_fanin({W1, W1}, W1, rng));
    params.add("th2i.time1_b", Arr({W1}));
    params.add("th2i.time2_w", ad::init_uniform_fanin({W1, W2}, W1, rng));
    params.add("th2i.time2_b", Arr({W2}));
    params.add("th2i.ctx1_w", ad::init_uniform_fanin({cfg.cond_dim, W1}, cfg.cond_dim, rng));
    params.add("th2i.ctx1_b", Arr({W1}));
    params.add("th2i.ctx2_w", ad::init_uniform_fanin({cfg.cond_dim, W2}, cfg.cond_dim, rng));
    params.add("th2i.ctx2_b", Arr({W2}));
    // learned positional identity of the latent tokens, so cross-attention can
    // route spatially addressed conditioning (e.g. 2D joint locations);
    // zero-initialized so the initial function is position-agnostic
    const int64_t hw = cfg.latent_hw;
    params.add("th2i.pos1", Arr({hw * hw, W1}));
    params.add("th2i.pos2", Arr({(hw / 2) * (hw / 2), W2}));
    nn::init_attention_block(params, "th2i.attn1.", xattn_spec(cfg, W1), rng);
    nn::init_attention_block(params, "th2i.attn2.", xattn_spec(cfg, W2), rng);
}

Var th2i_denoise(const Th2iConfig& cfg, const ad::ParamBundle& params, const Var& z_t,
                 const std::vector<int64_t>& timesteps, const Var& context) {
    const auto& s = z_t->val.shape;
    if (s.size() != 4 || s[1] != cfg.latent_channels || s[2] != cfg.latent_hw ||
        s[3] != cfg.latent_hw)
        throw DimensionError("th2i_denoise: latent shape mismatch");
    const int64_t B = s[0], H = s[2], W = s[3];
    if (static_cast<int64_t>(timesteps.size()) != B)
        throw DimensionError("th2i_denoise: timestep count mismatch");
    const auto& cs = context->val.shape;
    if (cs.size() != 3 || cs[0] != B || cs[2] != cfg.cond_dim)
        throw DimensionError("th2i_denoise: context must be {B,L,cond_dim}");

    std::vector<double> tvals(timesteps.begin(), timesteps.end());
    Var tfeat = ad::constant(nn::sinusoidal_embedding(tvals, cfg.base_width));
    Var t1 = ad::reshape(
        ad::linear(tfeat, params.get("th2i.time1_w"), params.get("th2i.time1_b")),
        {B, cfg.base_width, 1, 1});
    Var t2 = ad::reshape(
        ad::linear(tfeat, params.get("th2i.time2_w"), params.get("th2i.time2_b")),
        {B, cfg.mid_width, 1, 1});
    Var ctx1 = ad::linear(context, params.get("th2i.ctx1_w"), params.get("th2i.ctx1_b"));
    Var ctx2 = ad::linear(context, params.get("th2i.ctx2_w"), params.get("th2i.ctx2_b"));

    auto with_pos = [&](const Var& tokens, const char* table) {
        const auto& ts = tokens->val.shape;
        return ad::add(tokens, ad::reshape(params.get(table), {1, ts[1], ts[2]}));
    };

    Var h1 = ad::relu(conv3(params, "th2i.in", z_t, 1));
    h1 = ad::add(h1, t1);
    h1 = from_tokens(nn::attention_block_forward(xattn_spec(cfg, cfg.base_width), params,
                                                 "th2i.attn1.",
                                                 with_pos(to_tokens(h1), "th2i.pos1"),
                                                 ctx1),
                     H, W);

    Var h2 = ad::relu(conv3(params, "th2i.down", h1, 2));
    h2 = ad::add(h2, t2);
    h2 = from_tokens(nn::attention_block_forward(xattn_spec(cfg, cfg.mid_width), params,
                                                 "th2i.attn2.",
                                                 with_pos(to_tokens(h2), "th2i.pos2"),
                                                 ctx2),
                     H / 2, W / 2);
    h2 = ad::relu(conv3(params, "th2i.mid", h2, 1));

    Var up = ad::concat({ad::upsample2x(h2), h1}, 1);
    Var h3 = ad::relu(conv3(params, "th2i.up", up, 1));
    return conv3(params, "th2i.out", h3, 1);
}

Th2iNoiseDraw draw_th2i_noise(int64_t batch, const Th2iConfig& cfg,
                              const diff::NoiseSchedule& sched, double drop_prob,
                              Rng& rng) {
    Th2iNoiseDraw d;
    d.timesteps.resize(static_cast<size_t>(batch));
    d.use_null.resize(static_cast<size_t>(batch));
    d.eps = Arr({batch, cfg.latent_channels, cfg.latent_hw, cfg.latent_hw});
    int64_t per = cfg.latent_channels * cfg.latent_hw * cfg.latent_hw;
    for (int64_t b = 0; b < batch; ++b) {
        d.timesteps[static_cast<size_t>(b)] = rng.uniform_int(1, sched.T);
        d.use_null[static_cast<size_t>(b)] = rng.uniform() < drop_prob;
        for (int64_t i = 0; i < per; ++i) d.eps.at(b * per + i) = rng.gaussian();
    }
    return d;
}

Var th2i_loss(const Th2iConfig& cfg, const ad::ParamBundle& params, const Arr& latents,
              const std::vector<Var>& conditions, const Var& null_condition,
              const Th2iNoiseDraw& draw, const diff::NoiseSchedule& sched) {
    const auto& ls = latents.shape;
    if (ls.size() != 4 || ls[1] != cfg.latent_channels || ls[2] != cfg.latent_hw ||
        ls[3] != cfg.latent_hw)
        throw DimensionError("th2i_loss: latent shape mismatch");
    const int64_t B = ls[0];
    if (static_cast<int64_t>(conditions.size()) != B)
        throw DimensionError("th2i_loss: one condition per latent required");
    const int64_t per = cfg.latent_channels * cfg.latent_hw * cfg.latent_hw;

    // Group items by effective condition length so each group runs batched.
    auto cond_of = [&](int64_t i) -> const Var& {
        return draw.use_null[static_cast<size_t>(i)] ? null_condition
                                                     : conditions[static_cast<size_t>(i)];
    };
    std::map<int64_t, std::vector<int64_t>> groups;
    for (int64_t i = 0; i < B; ++i) {
        const auto& cs = cond_of(i)->val.shape;
        if (cs.size() != 2 || cs[1] != cfg.cond_dim)
            throw DimensionError("th2i_loss: conditions must be {L,cond_dim}");
        groups[cs[0]].push_back(i);
    }

    Var total = ad::scalar(0.0);
    for (const auto& [len, idx] : groups) {
        const int64_t n = static_cast<int64_t>(idx.size());
        Arr z_t({n, cfg.latent_channels, cfg.latent_hw, cfg.latent_hw});
        Arr eps({n, cfg.latent_channels, cfg.latent_hw, cfg.latent_hw});
        std::vector<int64_t> ts(static_cast<size_t>(n));
        std::vector<Var> ctx_rows;
        ctx_rows.reserve(static_cast<size_t>(n));
        for (int64_t k = 0; k < n; ++k) {
            int64_t i = idx[static_cast<size_t>(k)];
            ts[static_cast<size_t>(k)] = draw.timesteps[static_cast<size_t>(i)];
            double ab = sched.alpha_bar(ts[static_cast<size_t>(k)]);
            double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
            for (int64_t j = 0; j < per; ++j) {
                eps.at(k * per + j) = draw.eps.at(i * per + j);
                z_t.at(k * per + j) =
                    c0 * latents.at(i * per + j) + c1 * draw.eps.at(i * per + j);
            }
            ctx_rows.push_back(ad::reshape(cond_of(i), {1, len, cfg.cond_dim}));
        }
        Var context = n == 1 ? ctx_rows[0] : ad::concat(ctx_rows, 0);
        Var pred = th2i_denoise(cfg, params, ad::constant(z_t), ts, context);
        Var diff2 = ad::sub(pred, ad::constant(eps));
        total = ad::add(total, ad::sum_all(ad::mul(diff2, diff2)));
    }
    return ad::scale(total, 1.0 / static_cast<double>(B * per));
}

Var th2i_loss(const Th2iConfig& cfg, const ad::ParamBundle& params, const Arr& latents,
              const std::vector<Var>& conditions, const Var& null_condition,
              const diff::NoiseSchedule& sched, Rng& rng) {
    Th2iNoiseDraw draw =
        draw_th2i_noise(latents.shape.at(0), cfg, sched, cfg.drop_prob, rng);
    return th2i_loss(cfg, params, latents, conditions, null_condition, draw, sched);
}

namespace {

// Tile a single {L,D} condition to {B,L,D} (cheap broadcast copy).
Var tile_condition(const Var& cond, int64_t batch) {
    const auto& s = cond->val.shape;
    if (s.size() != 2) throw DimensionError("condition must be {L,D}");
    return ad::add(ad::constant(Arr({batch, s[0], s[1]})),
                   ad::reshape(cond, {1, s[0], s[1]}));
}

// Guided noise prediction for the whole batch at one timestep.
Arr guided_eps(const Th2iConfig& cfg, const ad::ParamBundle& params, const Arr& x,
               int64_t t, const Var& ctx_cond, const Var& ctx_null, double guidance) {
    const int64_t B = x.shape[0];
    std::vector<int64_t> ts(static_cast<size_t>(B), t);
    Var xt = ad::constant(x);
    if (guidance == 1.0) return th2i_denoise(cfg, params, xt, ts, ctx_cond)->val;
    if (guidance == 0.0) return th2i_denoise(cfg, params, xt, ts, ctx_null)->val;
    Arr c = th2i_denoise(cfg, params, xt, ts, ctx_cond)->val;
    Arr u = th2i_denoise(cfg, params, xt, ts, ctx_null)->val;
    Arr g(x.shape);
    for (int64_t i = 0; i < g.numel(); ++i)
        g.at(i) = u.at(i) + guidance * (c.at(i) - u.at(i));
    return g;
}

}  // namespace

Arr ddpm_sample(const Th2iConfig& cfg, const ad::ParamBundle& params,
                const Var& condition, const Var& null_condition, int64_t batch,
                const diff::NoiseSchedule& sched, double guidance, Rng& rng) {
    if (guidance < 0.0) throw SchemaError("ddpm_sample: guidance must be >= 0");
    ad::NoGradGuard ng;
    Var ctx_cond = tile_condition(condition, batch);
    Var ctx_null = tile_condition(null_condition, batch);

    Arr x({batch, cfg.latent_channels, cfg.latent_hw, cfg.latent_hw});
    for (auto& v : x.v) v = rng.gaussian();

    for (int64_t t = sched.T; t >= 1; --t) {
        Arr eps = guided_eps(cfg, params, x, t, ctx_cond, ctx_null, guidance);
        double ab = sched.alpha_bar(t);
        auto pc = diff::posterior_coeffs(sched, t);
        double noise_std = t > 1 ? std::sqrt(pc.variance) : 0.0;
        for (int64_t i = 0; i < x.numel(); ++i) {
            double x0 = (x.at(i) - std::sqrt(1.0 - ab) * eps.at(i)) / std::sqrt(ab);
            double mean = pc.coef_x0 * x0 + pc.coef_xt * x.at(i);
            x.at(i) = mean + (noise_std > 0.0 ? noise_std * rng.gaussian() : 0.0);
            if (!std::isfinite(x.at(i)))
                throw NumericError("ddpm_sample: non-finite latent at step t=" +
                                   std::to_string(t));
        }
    }
    return x;
}

Arr plms_sample_latent(const Th2iConfig& cfg, const ad::ParamBundle& params,
                       const Var& condition, const Var& null_condition, int64_t batch,
                       const diff::NoiseSchedule& sched, int64_t steps, double guidance,
                       Rng& rng) {
    if (guidance < 0.0) throw SchemaError("plms_sample_latent: guidance must be >= 0");
    ad::NoGradGuard ng;
    Var ctx_cond = tile_condition(condition, batch);
    Var ctx_null = tile_condition(null_condition, batch);

    Arr x({batch, cfg.latent_channels, cfg.latent_hw, cfg.latent_hw});
    for (auto& v : x.v) v = rng.gaussian();

    std::vector<int64_t> ts = diff::sample_timesteps(sched.T, steps);
    std::deque<std::vector<double>> history;
    for (size_t i = 0; i < ts.size(); ++i) {
        int64_t t = ts[i];
        int64_t t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        Arr eps = guided_eps(cfg, params, x, t, ctx_cond, ctx_null, guidance);
        history.push_front(eps.v);
        if (history.size() > 4) history.pop_back();
        x.v = diff::plms_step(history, x.v, t, t_prev, sched);
        for (double v : x.v)
            if (!std::isfinite(v))
                throw NumericError("plms_sample_latent: non-finite latent at step t=" +
                                   std::to_string(t));
    }
    return x;
}

Arr sample_th2i(const Th2iConfig& cfg, const ad::ParamBundle& params,
                const AeConfig& ae_cfg, const ad::ParamBundle& ae_params,
                const Var& condition, const Var& null_condition,
                const diff::NoiseSchedule& sched, int64_t steps, double guidance,
                Rng& rng) {
    Arr latent = plms_sample_latent(cfg, params, condition, null_condition, 1, sched,
                                    steps, guidance, rng);
    ad::NoGradGuard ng;
    return ae_decode(ae_cfg, ae_params, ad::constant(latent))->val;
}

}  // namespace hgen::th2i
