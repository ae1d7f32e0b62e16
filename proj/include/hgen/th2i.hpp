#pragma once

// Latent image diffusion conditioned on a text+hand embedding sequence:
// a small convolutional autoencoder maps 64x64 RGB images to 16x16x4
// latents, and a two-scale U-shaped denoiser predicts the added noise with
// cross-attention over the condition sequence at both scales.

#include <cstdint>
#include <vector>

#include "hgen/ad.hpp"
#include "hgen/diffusion.hpp"
#include "hgen/nn.hpp"
#include "hgen/rng.hpp"

namespace hgen::th2i {

// ---- toy autoencoder (downsample factor fixed at 4) ----
struct AeConfig {
    int64_t image_channels = 3;
    int64_t latent_channels = 4;
    int64_t width = 32;

    void validate() const;
};

void init_ae_params(ad::ParamBundle& params, const AeConfig& cfg, Rng& rng);

// image {B,C,H,W} with H,W divisible by 4 -> latent {B,C_z,H/4,W/4}
ad::Var ae_encode(const AeConfig& cfg, const ad::ParamBundle& params,
                  const ad::Var& image);
// latent {B,C_z,h,w} -> image {B,C,4h,4w}
ad::Var ae_decode(const AeConfig& cfg, const ad::ParamBundle& params,
                  const ad::Var& latent);
// reconstruction mean squared error
ad::Var ae_loss(const AeConfig& cfg, const ad::ParamBundle& params,
                const ad::Var& image);

// ---- conditional latent denoiser ----
struct Th2iConfig {
    int64_t latent_channels = 4;
    int64_t latent_hw = 16;     // square latent side; must be even
    int64_t base_width = 32;    // channels at full latent resolution
    int64_t mid_width = 64;     // channels at half resolution
    int64_t cond_dim = 64;      // embedding dim of the condition sequence
    int64_t head_count = 4;
    double drop_prob = 0.10;
    double guidance = 4.0;
    int64_t plms_steps = 50;

    void validate() const;
};

void init_th2i_params(ad::ParamBundle& params, const Th2iConfig& cfg, Rng& rng);

// z_t {B,C,H,W}; timesteps length B; context {B,L,cond_dim}. Returns the
// noise prediction with the same shape as z_t.
ad::Var th2i_denoise(const Th2iConfig& cfg, const ad::ParamBundle& params,
                     const ad::Var& z_t, const std::vector<int64_t>& timesteps,
                     const ad::Var& context);

// Pre-sampled stochastic inputs of one loss evaluation (deterministic given
// the draw, as needed for gradient checking).
struct Th2iNoiseDraw {
    std::vector<int64_t> timesteps;  // B
    ad::Arr eps;                     // {B,C,H,W}
    std::vector<bool> use_null;      // B: condition replaced by the null sequence
};

Th2iNoiseDraw draw_th2i_noise(int64_t batch, const Th2iConfig& cfg,
                              const diff::NoiseSchedule& sched, double drop_prob,
                              Rng& rng);

// MSE between the true noise and the prediction. conditions[i] is the {L_i,D}
// embedding sequence of item i (lengths may differ); null_condition is the
// shared {L0,D} null sequence. Items are grouped by sequence length and run
// as sub-batches of one graph.
ad::Var th2i_loss(const Th2iConfig& cfg, const ad::ParamBundle& params,
                  const ad::Arr& latents, const std::vector<ad::Var>& conditions,
                  const ad::Var& null_condition, const Th2iNoiseDraw& draw,
                  const diff::NoiseSchedule& sched);
// Convenience overload drawing noise/dropout internally.
ad::Var th2i_loss(const Th2iConfig& cfg, const ad::ParamBundle& params,
                  const ad::Arr& latents, const std::vector<ad::Var>& conditions,
                  const ad::Var& null_condition, const diff::NoiseSchedule& sched,
                  Rng& rng);

// Ancestral reference sampler, guided noise
//   eps~ = eps_uncond + g * (eps_cond - eps_uncond);
// g==1 uses the conditional and g==0 the unconditional branch verbatim so the
// degenerate identities are bit-exact. One shared condition for all B items.
// Throws NumericError naming the step index on non-finite intermediates.
ad::Arr ddpm_sample(const Th2iConfig& cfg, const ad::ParamBundle& params,
                    const ad::Var& condition, const ad::Var& null_condition,
                    int64_t batch, const diff::NoiseSchedule& sched, double guidance,
                    Rng& rng);

// Deterministic multistep sampler over a uniform timestep sub-sequence with
// guided noise predictions; returns the final latent (not decoded).
ad::Arr plms_sample_latent(const Th2iConfig& cfg, const ad::ParamBundle& params,
                           const ad::Var& condition, const ad::Var& null_condition,
                           int64_t batch, const diff::NoiseSchedule& sched,
                           int64_t steps, double guidance, Rng& rng);

// Full stage-2 sampling: multistep latent loop, then autoencoder decode.
ad::Arr sample_th2i(const Th2iConfig& cfg, const ad::ParamBundle& params,
                    const AeConfig& ae_cfg, const ad::ParamBundle& ae_params,
                    const ad::Var& condition, const ad::Var& null_condition,
                    const diff::NoiseSchedule& sched, int64_t steps, double guidance,
                    Rng& rng);

}  // namespace hgen::th2i
