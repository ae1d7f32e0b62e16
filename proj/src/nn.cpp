#include "hgen/nn.hpp"

#include <cmath>

namespace hgen::nn {

void MlpSpec::validate() const {
    if (layer_widths.size() < 2)
        throw DimensionError("MlpSpec: need at least input and output widths");
    for (int64_t w : layer_widths)
        if (w <= 0) throw DimensionError("MlpSpec: non-positive width");
    if (activations.size() + 1 != layer_widths.size() - 1 &&
        !(layer_widths.size() == 2 && activations.empty()))
        throw DimensionError("MlpSpec: activation count must equal hidden layer count");
}

void init_mlp(ad::ParamBundle& params, const std::string& prefix, const MlpSpec& spec,
              Rng& rng) {
    spec.validate();
    for (size_t l = 0; l + 1 < spec.layer_widths.size(); ++l) {
        int64_t in = spec.layer_widths[l], out = spec.layer_widths[l + 1];
        params.add(prefix + "w" + std::to_string(l),
                   ad::init_uniform_fanin({in, out}, in, rng));
        params.add(prefix + "b" + std::to_string(l), ad::Arr({out}));
    }
}

ad::Var mlp_forward(const MlpSpec& spec, const ad::ParamBundle& params,
                    const std::string& prefix, const ad::Var& input) {
    spec.validate();
    if (input->val.shape.back() != spec.layer_widths.front())
        throw DimensionError("mlp_forward: input extent " +
                             std::to_string(input->val.shape.back()) +
                             " does not match layer 0 width " +
                             std::to_string(spec.layer_widths.front()));
    ad::Var h = input;
    size_t transitions = spec.layer_widths.size() - 1;
    for (size_t l = 0; l < transitions; ++l) {
        auto w = params.get(prefix + "w" + std::to_string(l));
        auto b = params.get(prefix + "b" + std::to_string(l));
        if (h->val.shape.back() != w->val.shape[0])
            throw DimensionError("mlp_forward: shape mismatch at layer " +
                                 std::to_string(l));
        h = ad::linear(h, w, b);
        if (l + 1 < transitions && spec.activations[l] == Activation::kRelu)
            h = ad::relu(h);
    }
    return h;
}

void AttentionBlockSpec::validate() const {
    if (model_dim <= 0 || head_count <= 0 || ff_dim <= 0)
        throw DimensionError("AttentionBlockSpec: non-positive dimension");
    if (model_dim % head_count != 0)
        throw DimensionError("AttentionBlockSpec: model_dim not divisible by head_count");
}

void init_attention_block(ad::ParamBundle& params, const std::string& prefix,
                          const AttentionBlockSpec& spec, Rng& rng) {
    spec.validate();
    int64_t D = spec.model_dim;
    for (const char* nm : {"wq", "wk", "wv", "wo"}) {
        params.add(prefix + nm, ad::init_uniform_fanin({D, D}, D, rng));
        params.add(prefix + std::string(nm) + "_b", ad::Arr({D}));
    }
    params.add(prefix + "ln1_g", ad::Arr({D}, 1.0));
    params.add(prefix + "ln1_b", ad::Arr({D}));
    params.add(prefix + "ln2_g", ad::Arr({D}, 1.0));
    params.add(prefix + "ln2_b", ad::Arr({D}));
    params.add(prefix + "ff_w0", ad::init_uniform_fanin({D, spec.ff_dim}, D, rng));
    params.add(prefix + "ff_b0", ad::Arr({spec.ff_dim}));
    params.add(prefix + "ff_w1", ad::init_uniform_fanin({spec.ff_dim, D}, spec.ff_dim, rng));
    params.add(prefix + "ff_b1", ad::Arr({D}));
}

namespace {

// {B,L,D} -> {B*heads, L, D/heads}
ad::Var split_heads(const ad::Var& x, int64_t heads) {
    int64_t B = x->val.shape[0], L = x->val.shape[1], D = x->val.shape[2];
    int64_t hd = D / heads;
    // {B,L,heads,hd} -> {B,heads,L,hd} via per-head slices.
    std::vector<ad::Var> head_slices;
    auto x4 = ad::reshape(x, {B, L, heads, hd});
    for (int64_t h = 0; h < heads; ++h)
        head_slices.push_back(ad::reshape(ad::slice(x4, 2, h, 1), {B, 1, L, hd}));
    auto stacked = ad::concat(head_slices, 1);  // {B, heads, L, hd}
    return ad::reshape(stacked, {B * heads, L, hd});
}

// {B*heads, L, hd} -> {B, L, D}
ad::Var merge_heads(const ad::Var& x, int64_t batch, int64_t heads) {
    int64_t L = x->val.shape[1], hd = x->val.shape[2];
    auto x4 = ad::reshape(x, {batch, heads, L, hd});
    std::vector<ad::Var> head_slices;
    for (int64_t h = 0; h < heads; ++h)
        head_slices.push_back(ad::reshape(ad::slice(x4, 1, h, 1), {batch, L, 1, hd}));
    auto stacked = ad::concat(head_slices, 2);  // {B, L, heads, hd}
    return ad::reshape(stacked, {batch, L, heads * hd});
}

}  // namespace

ad::Var multihead_attention(const AttentionBlockSpec& spec,
                            const ad::ParamBundle& params, const std::string& prefix,
                            const ad::Var& queries, const ad::Var& context) {
    spec.validate();
    const ad::Var& ctx = (spec.mode == AttentionMode::kSelf) ? queries : context;
    if (queries->val.shape.size() != 3 || ctx->val.shape.size() != 3)
        throw DimensionError("attention: expected {B,L,D} inputs");
    if (queries->val.shape[2] != spec.model_dim || ctx->val.shape[2] != spec.model_dim)
        throw DimensionError("attention: model_dim mismatch (got " +
                             std::to_string(queries->val.shape[2]) + " / " +
                             std::to_string(ctx->val.shape[2]) + ", expected " +
                             std::to_string(spec.model_dim) + ")");
    int64_t B = queries->val.shape[0];
    int64_t heads = spec.head_count, hd = spec.model_dim / heads;

    auto q = ad::linear(queries, params.get(prefix + "wq"), params.get(prefix + "wq_b"));
    auto k = ad::linear(ctx, params.get(prefix + "wk"), params.get(prefix + "wk_b"));
    auto v = ad::linear(ctx, params.get(prefix + "wv"), params.get(prefix + "wv_b"));
    q = split_heads(q, heads);
    k = split_heads(k, heads);
    v = split_heads(v, heads);
    auto scores = ad::scale(ad::bmm(q, ad::transpose_last2(k)),
                            1.0 / std::sqrt(static_cast<double>(hd)));
    auto attn = ad::softmax_last(scores);
    auto out = ad::bmm(attn, v);
    out = merge_heads(out, B, heads);
    return ad::linear(out, params.get(prefix + "wo"), params.get(prefix + "wo_b"));
}

ad::Var attention_block_forward(const AttentionBlockSpec& spec,
                                const ad::ParamBundle& params,
                                const std::string& prefix, const ad::Var& queries,
                                const ad::Var& context) {
    auto normed = ad::layer_norm_last(queries, params.get(prefix + "ln1_g"),
                                      params.get(prefix + "ln1_b"));
    auto x = ad::add(queries, multihead_attention(spec, params, prefix, normed,
                                                  spec.mode == AttentionMode::kSelf
                                                      ? normed
                                                      : context));
    auto normed2 =
        ad::layer_norm_last(x, params.get(prefix + "ln2_g"), params.get(prefix + "ln2_b"));
    auto h = ad::relu(ad::linear(normed2, params.get(prefix + "ff_w0"),
                                 params.get(prefix + "ff_b0")));
    auto ff = ad::linear(h, params.get(prefix + "ff_w1"), params.get(prefix + "ff_b1"));
    return ad::add(x, ff);
}

ad::Arr sinusoidal_embedding(const std::vector<double>& positions, int64_t dim) {
    int64_t n = static_cast<int64_t>(positions.size());
    ad::Arr out({n, dim});
    int64_t half = dim / 2;
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < half; ++j) {
            double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) /
                                   static_cast<double>(std::max<int64_t>(half - 1, 1)));
            out.v[static_cast<size_t>(i * dim + j)] = std::sin(positions[i] * freq);
            out.v[static_cast<size_t>(i * dim + half + j)] = std::cos(positions[i] * freq);
        }
        if (dim % 2 == 1) out.v[static_cast<size_t>(i * dim + dim - 1)] = 0.0;
    }
    return out;
}

}  // namespace hgen::nn
