#pragma once

// Text-to-pose-parameters diffusion: a transformer denoiser that predicts the
// clean state directly, trained with condition dropout and sampled with
// classifier-free guidance in prediction space.

#include <cstdint>
#include <vector>

#include "hgen/ad.hpp"
#include "hgen/diffusion.hpp"
#include "hgen/kinematics.hpp"
#include "hgen/nn.hpp"
#include "hgen/rng.hpp"

namespace hgen::t2h {

struct T2hConfig {
    int64_t state_dim = kin::PoseShapeState::kFlatDim;  // 172
    int64_t model_dim = 64;
    int64_t head_count = 4;
    int64_t ff_dim = 128;
    int64_t block_count = 2;
    int64_t vocab_size = 0;      // text token table size; must be set
    int64_t text_len = 8;        // fixed (padded) caption length
    double guidance_scale = 2.5;
    double drop_prob = 0.10;

    void validate() const;
};

// Parameter names all carry the "t2h." prefix: state in/out projections,
// time projection, text table + positions, null embedding, attention blocks.
void init_t2h_params(ad::ParamBundle& params, const T2hConfig& cfg, Rng& rng);

// Batched denoiser. x_t {B, state_dim}; timesteps length B (values in [1,T]);
// text_tokens length B*text_len (row-major); use_null length B, marking items
// whose text is replaced by the learned null embedding. Returns x0-hat {B, state_dim}.
// The prediction is sqrt(abar_t) * x_t plus a transformer correction gated by
// sqrt(1-abar_t), so at low noise the map is near-identity by construction.
ad::Var t2h_denoise(const T2hConfig& cfg, const ad::ParamBundle& params,
                    const ad::Var& x_t, const std::vector<int64_t>& timesteps,
                    const std::vector<int64_t>& text_tokens,
                    const std::vector<bool>& use_null,
                    const diff::NoiseSchedule& sched);

struct T2hBatch {
    ad::Arr x0;                       // {B, state_dim}
    std::vector<int64_t> text_tokens; // B * text_len
};

// Pre-sampled stochastic inputs of one loss evaluation, so the loss is a
// deterministic function of the parameters (required for gradient checking).
struct T2hNoiseDraw {
    std::vector<int64_t> timesteps;  // B, uniform in [1,T]
    ad::Arr eps;                     // {B, state_dim}
    std::vector<bool> use_null;      // B, condition dropout mask
};

T2hNoiseDraw draw_t2h_noise(int64_t batch, int64_t state_dim,
                            const diff::NoiseSchedule& sched, double drop_prob,
                            Rng& rng);

// Mean squared error between x0 and the denoiser prediction on the noised batch.
ad::Var t2h_loss(const T2hConfig& cfg, const ad::ParamBundle& params,
                 const T2hBatch& batch, const T2hNoiseDraw& draw,
                 const diff::NoiseSchedule& sched);
// Convenience: draws noise/dropout internally.
ad::Var t2h_loss(const T2hConfig& cfg, const ad::ParamBundle& params,
                 const T2hBatch& batch, const diff::NoiseSchedule& sched, Rng& rng);

// Ancestral sampler with guided prediction
//   x0_guided = x0_uncond + s * (x0_cond - x0_uncond),
// posterior mean/variance from the schedule, noise added except at t=1.
// s==1 uses the conditional prediction verbatim and s==0 the unconditional
// one, so the degenerate identities hold bit-exactly.
// text_tokens length B*text_len; returns {B, state_dim}.
// Throws NumericError naming the step index on non-finite intermediates.
ad::Arr sample_t2h(const T2hConfig& cfg, const ad::ParamBundle& params,
                   const std::vector<int64_t>& text_tokens, int64_t batch,
                   const diff::NoiseSchedule& sched, double guidance, Rng& rng);

// Interpret one sampled row as a pose/shape state (requires state_dim == 172).
kin::PoseShapeState decode_state(const T2hConfig& cfg, const ad::Arr& states,
                                 int64_t row);

}  // namespace hgen::t2h
