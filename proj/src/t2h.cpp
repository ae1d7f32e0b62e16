#include "hgen/t2h.hpp"

#include <cmath>
#include <string>

namespace hgen::t2h {

using ad::Arr;
using ad::Var;

void T2hConfig::validate() const {
    if (state_dim < 1 || model_dim < 1 || ff_dim < 1 || block_count < 1 ||
        text_len < 1)
        throw SchemaError("t2h config: dimensions must be positive");
    if (vocab_size < 2) throw SchemaError("t2h config: vocab_size must be >= 2");
    if (head_count < 1 || model_dim % head_count != 0)
        throw SchemaError("t2h config: head_count must divide model_dim");
    if (drop_prob < 0.0 || drop_prob > 1.0)
        throw SchemaError("t2h config: drop_prob outside [0,1]");
    if (guidance_scale < 0.0) throw SchemaError("t2h config: guidance_scale < 0");
}

namespace {

nn::AttentionBlockSpec block_spec(const T2hConfig& cfg) {
    nn::AttentionBlockSpec s;
    s.model_dim = cfg.model_dim;
    s.head_count = cfg.head_count;
    s.ff_dim = cfg.ff_dim;
    s.mode = nn::AttentionMode::kSelf;
    return s;
}

std::string block_prefix(int64_t i) { return "t2h.block" + std::to_string(i) + "."; }

}  // namespace

void init_t2h_params(ad::ParamBundle& params, const T2hConfig& cfg, Rng& rng) {
    cfg.validate();
    const int64_t D = cfg.model_dim;
    params.add("t2h.in_w", ad::init_uniform_fanin({cfg.state_dim, D}, cfg.state_dim, rng));
    params.add("t2h.in_b", Arr({D}));
    params.add("t2h.out_w", ad::init_uniform_fanin({D, cfg.state_dim}, D, rng));
    params.add("t2h.out_b", Arr({cfg.state_dim}));
    params.add("t2h.time_w", ad::init_uniform_fanin({D, D}, D, rng));
    params.add("t2h.time_b", Arr({D}));
    params.add("t2h.text_table", ad::init_gaussian({cfg.vocab_size, D}, 0.02, rng));
    params.add("t2h.text_pos", ad::init_gaussian({cfg.text_len, D}, 0.02, rng));
    params.add("t2h.null_embed", ad::init_gaussian({D}, 0.02, rng));
    for (int64_t i = 0; i < cfg.block_count; ++i)
        nn::init_attention_block(params, block_prefix(i), block_spec(cfg), rng);
}

Var t2h_denoise(const T2hConfig& cfg, const ad::ParamBundle& params, const Var& x_t,
                const std::vector<int64_t>& timesteps,
                const std::vector<int64_t>& text_tokens,
                const std::vector<bool>& use_null,
                const diff::NoiseSchedule& sched) {
    const int64_t B = x_t->val.shape.at(0);
    const int64_t L = cfg.text_len;
    const int64_t D = cfg.model_dim;
    if (x_t->val.shape.size() != 2 || x_t->val.shape[1] != cfg.state_dim)
        throw DimensionError("t2h_denoise: x_t must be {B, state_dim}");
    if (static_cast<int64_t>(timesteps.size()) != B ||
        static_cast<int64_t>(use_null.size()) != B ||
        static_cast<int64_t>(text_tokens.size()) != B * L)
        throw DimensionError("t2h_denoise: batch sizes disagree");

    // Timestep features: sinusoidal, learned projection.
    std::vector<double> tvals(timesteps.begin(), timesteps.end());
    Var tfeat = ad::constant(nn::sinusoidal_embedding(tvals, D));
    Var time_emb =
        ad::linear(tfeat, params.get("t2h.time_w"), params.get("t2h.time_b"));
    Var time_tok = ad::reshape(time_emb, {B, 1, D});

    // State token {B,1,D}; time conditioning added directly so the output head
    // sees the noise level without routing through attention.
    Var state_tok = ad::reshape(
        ad::add(ad::linear(x_t, params.get("t2h.in_w"), params.get("t2h.in_b")),
                time_emb),
        {B, 1, D});

    // Text tokens {B,L,D}: table lookup + positions, with dropped items
    // replaced wholesale by the learned null embedding.
    Var text = ad::reshape(ad::embedding(params.get("t2h.text_table"), text_tokens),
                           {B, L, D});
    text = ad::add(text, params.get("t2h.text_pos"));
    bool any_null = false;
    for (bool u : use_null) any_null = any_null || u;
    if (any_null) {
        Arr keep({B, L, 1});
        Arr drop({B, L, 1});
        for (int64_t b = 0; b < B; ++b)
            for (int64_t l = 0; l < L; ++l) {
                keep.at(b * L + l) = use_null[static_cast<size_t>(b)] ? 0.0 : 1.0;
                drop.at(b * L + l) = use_null[static_cast<size_t>(b)] ? 1.0 : 0.0;
            }
        Var null_rows = ad::mul(ad::add(ad::constant(Arr({B, L, D})),
                                        params.get("t2h.null_embed")),
                                ad::constant(drop));
        text = ad::add(ad::mul(text, ad::constant(keep)), null_rows);
    }

    Var seq = ad::concat({state_tok, time_tok, text}, 1);  // {B, 2+L, D}
    for (int64_t i = 0; i < cfg.block_count; ++i)
        seq = nn::attention_block_forward(block_spec(cfg), params, block_prefix(i), seq,
                                          seq);
    Var pooled = ad::reshape(ad::slice(seq, 1, 0, 1), {B, D});
    Var correction = ad::linear(pooled, params.get("t2h.out_w"), params.get("t2h.out_b"));

    // x0-hat = sqrt(abar_t) x_t + sqrt(1-abar_t) * correction.  The gate pins
    // the prediction to the input as noise vanishes, so both guidance branches
    // agree at low noise and the network trains on an O(1) residual target.
    Arr shrink({B, 1});
    Arr gate({B, 1});
    for (int64_t b = 0; b < B; ++b) {
        int64_t t = timesteps[static_cast<size_t>(b)];
        if (t < 1 || t > sched.T)
            throw DimensionError("t2h_denoise: timestep outside [1,T]");
        double ab = sched.alpha_bar(t);
        shrink.at(b) = std::sqrt(ab);
        gate.at(b) = std::sqrt(1.0 - ab);
    }
    return ad::add(ad::mul(correction, ad::constant(gate)),
                   ad::mul(x_t, ad::constant(shrink)));
}

T2hNoiseDraw draw_t2h_noise(int64_t batch, int64_t state_dim,
                            const diff::NoiseSchedule& sched, double drop_prob,
                            Rng& rng) {
    T2hNoiseDraw d;
    d.timesteps.resize(static_cast<size_t>(batch));
    d.use_null.resize(static_cast<size_t>(batch));
    d.eps = Arr({batch, state_dim});
    for (int64_t b = 0; b < batch; ++b) {
        d.timesteps[static_cast<size_t>(b)] = rng.uniform_int(1, sched.T);
        d.use_null[static_cast<size_t>(b)] = rng.uniform() < drop_prob;
        for (int64_t i = 0; i < state_dim; ++i)
            d.eps.at(b * state_dim + i) = rng.gaussian();
    }
    return d;
}

Var t2h_loss(const T2hConfig& cfg, const ad::ParamBundle& params, const T2hBatch& batch,
             const T2hNoiseDraw& draw, const diff::NoiseSchedule& sched) {
    const int64_t B = batch.x0.shape.at(0);
    const int64_t S = cfg.state_dim;
    if (batch.x0.shape.size() != 2 || batch.x0.shape[1] != S)
        throw DimensionError("t2h_loss: x0 must be {B, state_dim}");
    Arr x_t({B, S});
    for (int64_t b = 0; b < B; ++b) {
        double ab = sched.alpha_bar(draw.timesteps.at(static_cast<size_t>(b)));
        double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
        for (int64_t i = 0; i < S; ++i)
            x_t.at(b * S + i) = c0 * batch.x0.at(b * S + i) + c1 * draw.eps.at(b * S + i);
    }
    Var pred = t2h_denoise(cfg, params, ad::constant(x_t), draw.timesteps,
                           batch.text_tokens, draw.use_null, sched);
    return ad::mse(pred, ad::constant(batch.x0));
}

Var t2h_loss(const T2hConfig& cfg, const ad::ParamBundle& params, const T2hBatch& batch,
             const diff::NoiseSchedule& sched, Rng& rng) {
    T2hNoiseDraw draw =
        draw_t2h_noise(batch.x0.shape.at(0), cfg.state_dim, sched, cfg.drop_prob, rng);
    return t2h_loss(cfg, params, batch, draw, sched);
}

ad::Arr sample_t2h(const T2hConfig& cfg, const ad::ParamBundle& params,
                   const std::vector<int64_t>& text_tokens, int64_t batch,
                   const diff::NoiseSchedule& sched, double guidance, Rng& rng) {
    if (guidance < 0.0) throw SchemaError("sample_t2h: guidance must be >= 0");
    if (static_cast<int64_t>(text_tokens.size()) != batch * cfg.text_len)
        throw DimensionError("sample_t2h: text_tokens size mismatch");
    ad::NoGradGuard ng;
    const int64_t B = batch, S = cfg.state_dim;

    Arr x({B, S});
    for (int64_t i = 0; i < B * S; ++i) x.at(i) = rng.gaussian();

    std::vector<bool> all_cond(static_cast<size_t>(B), false);
    std::vector<bool> all_null(static_cast<size_t>(B), true);

    for (int64_t t = sched.T; t >= 1; --t) {
        std::vector<int64_t> ts(static_cast<size_t>(B), t);
        Var xt = ad::constant(x);
        Arr x0_hat({B, S});
        if (guidance == 1.0) {
            x0_hat = t2h_denoise(cfg, params, xt, ts, text_tokens, all_cond, sched)->val;
        } else if (guidance == 0.0) {
            x0_hat = t2h_denoise(cfg, params, xt, ts, text_tokens, all_null, sched)->val;
        } else {
            Arr c = t2h_denoise(cfg, params, xt, ts, text_tokens, all_cond, sched)->val;
            Arr u = t2h_denoise(cfg, params, xt, ts, text_tokens, all_null, sched)->val;
            for (int64_t i = 0; i < B * S; ++i)
                x0_hat.at(i) = u.at(i) + guidance * (c.at(i) - u.at(i));
        }
        diff::PosteriorCoeffs pc = diff::posterior_coeffs(sched, t);
        double noise_std = t > 1 ? std::sqrt(pc.variance) : 0.0;
        for (int64_t i = 0; i < B * S; ++i) {
            double mean = pc.coef_x0 * x0_hat.at(i) + pc.coef_xt * x.at(i);
            x.at(i) = mean + (noise_std > 0.0 ? noise_std * rng.gaussian() : 0.0);
            if (!std::isfinite(x.at(i)))
                throw NumericError("sample_t2h: non-finite state at step t=" +
                                   std::to_string(t));
        }
    }
    return x;
}

kin::PoseShapeState decode_state(const T2hConfig& cfg, const ad::Arr& states,
                                 int64_t row) {
    if (cfg.state_dim != kin::PoseShapeState::kFlatDim)
        throw DimensionError("decode_state: state_dim is not a pose/shape state");
    const int64_t S = cfg.state_dim;
    std::vector<double> flat(states.v.begin() + row * S, states.v.begin() + (row + 1) * S);
    kin::PoseShapeState st = kin::PoseShapeState::from_flat(flat);
    st.check_finite();
    return st;
}

}  // namespace hgen::t2h
