#pragma once

// Minimal neural substrate: MLPs, pre-norm transformer blocks, timestep
// embeddings. Everything is built on the ad:: tape so analytic gradients
// come for free and are finite-difference checked.

#include <string>
#include <vector>

#include "hgen/ad.hpp"

namespace hgen::nn {

enum class Activation { kRelu, kNone };

struct MlpSpec {
    std::vector<int64_t> layer_widths;         // input, hidden..., output
    std::vector<Activation> activations;       // one per hidden transition

    void validate() const;
    int64_t hidden_count() const {
        return static_cast<int64_t>(layer_widths.size()) - 2;
    }
};

// Parameter names: <prefix>w0, <prefix>b0, ...
void init_mlp(ad::ParamBundle& params, const std::string& prefix, const MlpSpec& spec,
              Rng& rng);
ad::Var mlp_forward(const MlpSpec& spec, const ad::ParamBundle& params,
                    const std::string& prefix, const ad::Var& input);

enum class AttentionMode { kSelf, kCross };

struct AttentionBlockSpec {
    int64_t model_dim = 64;
    int64_t head_count = 4;
    int64_t ff_dim = 128;
    AttentionMode mode = AttentionMode::kSelf;

    void validate() const;
};

void init_attention_block(ad::ParamBundle& params, const std::string& prefix,
                          const AttentionBlockSpec& spec, Rng& rng);

// Pre-norm block: x + Attn(LN(x), ctx); then x + FF(LN(x)).
// queries: {B,Lq,D}; context: {B,Lk,D} (ignored in self mode).
ad::Var attention_block_forward(const AttentionBlockSpec& spec,
                                const ad::ParamBundle& params,
                                const std::string& prefix, const ad::Var& queries,
                                const ad::Var& context);

// Bare multi-head attention without residual/FF, exposed for oracle tests.
ad::Var multihead_attention(const AttentionBlockSpec& spec,
                            const ad::ParamBundle& params, const std::string& prefix,
                            const ad::Var& queries, const ad::Var& context);

// Sinusoidal position/timestep features, {count, dim}; constants (not learned).
ad::Arr sinusoidal_embedding(const std::vector<double>& positions, int64_t dim);

}  // namespace hgen::nn
