#pragma once

// Training loops over the synthetic corpus: state-diffusion fitting, the
// image autoencoder, and the conditional latent denoiser (jointly with the
// condition encoder). All loops are deterministic in (records, config, seed).

#include <functional>
#include <vector>

#include "hgen/config.hpp"
#include "hgen/data_synth.hpp"
#include "hgen/pipeline.hpp"

namespace hgen::train {

using LogFn = std::function<void(int64_t step, double loss)>;

// Fits the text-to-state diffusion on fully reliable records. Returns the
// mean loss over the final 10% of steps.
double train_t2h(const pipe::PipelineConfig& cfg, ad::ParamBundle& params,
                 const std::vector<data::DatasetRecord>& records,
                 const cfg::TrainConfig& tc, uint64_t seed, const LogFn& log = {});

// Image autoencoder reconstruction training.
double train_ae(const pipe::PipelineConfig& cfg, ad::ParamBundle& params,
                const std::vector<data::DatasetRecord>& records,
                const cfg::TrainConfig& tc, uint64_t seed, const LogFn& log = {});

// Conditioning variants for ablation studies. Substitutions keep the sequence
// layout so only the information content changes:
//   kNoJoints2d - every 2D joint replaced by the frame center
//   kNoRotVert  - rest-pose vertices and identity rotations for all records
//   kUnconditional - the null condition everywhere
enum class CondVariant { kFull, kNoJoints2d, kNoRotVert, kUnconditional };

// Numeric conditioning inputs of one record, recomputing hand geometry from
// the stored state. Cacheable: no trainable parameters involved.
struct CondInputs {
    std::vector<int64_t> text_tokens;
    enc::HandConditioning cond;
};
CondInputs build_cond_inputs(const data::DatasetRecord& rec, const pipe::RigSet& rigs,
                             const pipe::PipelineConfig& cfg, CondVariant variant);

// Latent denoiser + condition encoder trained jointly against a frozen
// autoencoder. Returns the mean loss over the final 10% of steps.
double train_th2i(const pipe::PipelineConfig& cfg, ad::ParamBundle& th2i_params,
                  ad::ParamBundle& enc_params, const ad::ParamBundle& ae_params,
                  const std::vector<data::DatasetRecord>& records,
                  const cfg::TrainConfig& tc, uint64_t seed,
                  CondVariant variant = CondVariant::kFull, const LogFn& log = {});

// Image sampled for one record's conditioning (variant-substituted), decoded
// to {3,H,W}. Unconditional variants sample with guidance 0.
Tensor sample_for_record(const data::DatasetRecord& rec, const pipe::RigSet& rigs,
                         const pipe::PipelineConfig& cfg,
                         const ad::ParamBundle& th2i_params,
                         const ad::ParamBundle& enc_params,
                         const ad::ParamBundle& ae_params, CondVariant variant,
                         uint64_t seed);

}  // namespace hgen::train
