#include "hgen/training.hpp"

#include <algorithm>
#include <cmath>

namespace hgen::train {

namespace {

kin::PoseShapeState record_state(const data::DatasetRecord& rec) {
    std::vector<double> x(rec.state.data.begin(), rec.state.data.end());
    return kin::PoseShapeState::from_flat(x);
}

std::vector<Eigen::Vector2d> tensor_points(const Tensor& t) {
    std::vector<Eigen::Vector2d> out;
    for (int64_t k = 0; k < t.shape[0]; ++k)
        out.emplace_back(t.data[static_cast<size_t>(k * 2 + 0)],
                         t.data[static_cast<size_t>(k * 2 + 1)]);
    return out;
}

std::vector<enc::Rot6d> tensor_rot6d(const Tensor& t) {
    std::vector<enc::Rot6d> out;
    for (int64_t j = 0; j < t.shape[0]; ++j) {
        enc::Rot6d r;
        for (int64_t k = 0; k < 6; ++k)
            r[static_cast<size_t>(k)] = t.data[static_cast<size_t>(j * 6 + k)];
        out.push_back(r);
    }
    return out;
}

double mean_tail(const std::vector<double>& losses) {
    if (losses.empty()) return 0.0;
    size_t tail = std::max<size_t>(1, losses.size() / 10);
    double s = 0.0;
    for (size_t i = losses.size() - tail; i < losses.size(); ++i) s += losses[i];
    return s / static_cast<double>(tail);
}

}  // namespace

double train_t2h(const pipe::PipelineConfig& cfg, ad::ParamBundle& params,
                 const std::vector<data::DatasetRecord>& records,
                 const cfg::TrainConfig& tc, uint64_t seed, const LogFn& log) {
    std::vector<const data::DatasetRecord*> usable;
    for (const auto& r : records)
        if (data::usable_for_state_training(r)) usable.push_back(&r);
    if (usable.empty()) throw SchemaError("train_t2h: no fully reliable records");

    const auto& vocab = enc::TextVocab::standard();
    auto sched = diff::build_schedule(cfg.sched_steps, diff::ScheduleKind::kLinearBeta,
                                      cfg.beta_start, cfg.beta_end);
    Rng rng = Rng::stream(seed, "train-t2h");
    ad::AdamState adam;
    ad::AdamHyper hyper = tc.adam();

    std::vector<double> losses;
    for (int64_t step = 0; step < tc.t2h_steps; ++step) {
        t2h::T2hBatch batch;
        batch.x0 = ad::Arr({tc.t2h_batch, cfg.t2h.state_dim});
        for (int64_t b = 0; b < tc.t2h_batch; ++b) {
            const auto* r =
                usable[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(usable.size()) - 1))];
            for (int64_t i = 0; i < cfg.t2h.state_dim; ++i)
                batch.x0.at(b * cfg.t2h.state_dim + i) = r->state.data[static_cast<size_t>(i)];
            auto toks = vocab.tokenize(r->caption, cfg.t2h.text_len);
            batch.text_tokens.insert(batch.text_tokens.end(), toks.begin(), toks.end());
        }
        params.zero_grad();
        ad::Var loss = t2h::t2h_loss(cfg.t2h, params, batch, sched, rng);
        ad::backward(loss);
        adam.step(params, hyper);
        losses.push_back(loss->val.at(0));
        if (log) log(step, losses.back());
    }
    return mean_tail(losses);
}

double train_ae(const pipe::PipelineConfig& cfg, ad::ParamBundle& params,
                const std::vector<data::DatasetRecord>& records,
                const cfg::TrainConfig& tc, uint64_t seed, const LogFn& log) {
    if (records.empty()) throw SchemaError("train_ae: empty dataset");
    int64_t H = cfg.intrinsics.height, W = cfg.intrinsics.width;
    Rng rng = Rng::stream(seed, "train-ae");
    ad::AdamState adam;
    ad::AdamHyper hyper = tc.adam();

    std::vector<double> losses;
    for (int64_t step = 0; step < tc.ae_steps; ++step) {
        ad::Arr imgs({tc.ae_batch, 3, H, W});
        for (int64_t b = 0; b < tc.ae_batch; ++b) {
            const auto& r =
                records[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(records.size()) - 1))];
            if (r.image.shape != std::vector<int64_t>({3, H, W}))
                throw SchemaError("train_ae: dataset image size != configured frame");
            for (int64_t i = 0; i < 3 * H * W; ++i)
                imgs.at(b * 3 * H * W + i) = r.image.data[static_cast<size_t>(i)];
        }
        params.zero_grad();
        ad::Var loss = th2i::ae_loss(cfg.ae, params, ad::constant(imgs));
        ad::backward(loss);
        adam.step(params, hyper);
        losses.push_back(loss->val.at(0));
        if (log) log(step, losses.back());
    }
    return mean_tail(losses);
}

CondInputs build_cond_inputs(const data::DatasetRecord& rec, const pipe::RigSet& rigs,
                             const pipe::PipelineConfig& cfg, CondVariant variant) {
    const auto& vocab = enc::TextVocab::standard();
    CondInputs ci;
    ci.cond.camera = cfg.intrinsics;
    if (variant == CondVariant::kUnconditional) {
        // all-pad text + invisible hands encode to the null sequence
        ci.text_tokens.assign(static_cast<size_t>(cfg.encoder.max_text_len), vocab.pad_id());
        return ci;
    }
    ci.text_tokens = vocab.tokenize(rec.caption, cfg.encoder.max_text_len);

    pipe::SceneHands hands =
        pipe::extract_hands(variant == CondVariant::kNoRotVert ? kin::PoseShapeState{}
                                                               : record_state(rec),
                            rigs);
    auto fill = [&](const data::HandRecord& hr, const pipe::HandGeometry& geo,
                    enc::HandInput* in) {
        in->visible = hr.reliable;
        if (!hr.reliable) return;
        if (variant == CondVariant::kNoJoints2d) {
            in->joints2d.assign(static_cast<size_t>(cfg.encoder.joints_per_hand),
                                Eigen::Vector2d(cfg.intrinsics.cx, cfg.intrinsics.cy));
        } else {
            in->joints2d = tensor_points(hr.joints2d);
        }
        in->vertices_canonical = enc::normalize_to_wrist_frame(
            geo.vertices, geo.wrist_pos, geo.wrist_rot, cfg.encoder.canonical_hand_scale);
        if (variant == CondVariant::kNoRotVert) {
            in->rotations6d.assign(static_cast<size_t>(cfg.encoder.rot_joints_per_hand),
                                   enc::Rot6d{1, 0, 0, 0, 1, 0});
        } else {
            in->rotations6d = tensor_rot6d(hr.rot6d);
        }
    };
    fill(rec.left, hands.left, &ci.cond.left);
    fill(rec.right, hands.right, &ci.cond.right);
    return ci;
}

double train_th2i(const pipe::PipelineConfig& cfg, ad::ParamBundle& th2i_params,
                  ad::ParamBundle& enc_params, const ad::ParamBundle& ae_params,
                  const std::vector<data::DatasetRecord>& records,
                  const cfg::TrainConfig& tc, uint64_t seed, CondVariant variant,
                  const LogFn& log) {
    if (records.empty()) throw SchemaError("train_th2i: empty dataset");
    int64_t H = cfg.intrinsics.height, W = cfg.intrinsics.width;
    int64_t C = cfg.th2i.latent_channels, hw = cfg.th2i.latent_hw;
    auto sched = diff::build_schedule(cfg.sched_steps, diff::ScheduleKind::kLinearBeta,
                                      cfg.beta_start, cfg.beta_end);
    pipe::RigSet rigs = pipe::build_scene_rigs(cfg.rig_seed);

    // frozen-autoencoder latents and numeric conditioning inputs, once
    std::vector<ad::Arr> latents;
    std::vector<CondInputs> cond_inputs;
    {
        ad::NoGradGuard ng;
        for (const auto& r : records) {
            if (r.image.shape != std::vector<int64_t>({3, H, W}))
                throw SchemaError("train_th2i: dataset image size != configured frame");
            ad::Arr img({1, 3, H, W});
            for (int64_t i = 0; i < 3 * H * W; ++i)
                img.at(i) = r.image.data[static_cast<size_t>(i)];
            ad::Arr z = th2i::ae_encode(cfg.ae, ae_params, ad::constant(img))->val;
            latents.push_back(ad::Arr({C, hw, hw}, z.v));
            cond_inputs.push_back(build_cond_inputs(r, rigs, cfg, variant));
        }
    }

    Rng rng = Rng::stream(seed, "train-th2i");
    ad::AdamState adam_d, adam_e;
    ad::AdamHyper hyper = tc.adam();

    std::vector<double> losses;
    for (int64_t step = 0; step < tc.th2i_steps; ++step) {
        ad::Arr z0({tc.th2i_batch, C, hw, hw});
        std::vector<ad::Var> conditions;
        for (int64_t b = 0; b < tc.th2i_batch; ++b) {
            auto idx = static_cast<size_t>(
                rng.uniform_int(0, static_cast<int64_t>(records.size()) - 1));
            std::copy(latents[idx].v.begin(), latents[idx].v.end(),
                      z0.v.begin() + b * C * hw * hw);
            conditions.push_back(enc::encode_hand_condition(cond_inputs[idx].text_tokens,
                                                            cond_inputs[idx].cond,
                                                            enc_params, cfg.encoder)
                                     .embeddings);
        }
        ad::Var null_cond = enc::encode_null_condition(enc_params, cfg.encoder).embeddings;
        th2i_params.zero_grad();
        enc_params.zero_grad();
        ad::Var loss =
            th2i::th2i_loss(cfg.th2i, th2i_params, z0, conditions, null_cond, sched, rng);
        ad::backward(loss);
        adam_d.step(th2i_params, hyper);
        adam_e.step(enc_params, hyper);
        losses.push_back(loss->val.at(0));
        if (log) log(step, losses.back());
    }
    return mean_tail(losses);
}

Tensor sample_for_record(const data::DatasetRecord& rec, const pipe::RigSet& rigs,
                         const pipe::PipelineConfig& cfg,
                         const ad::ParamBundle& th2i_params,
                         const ad::ParamBundle& enc_params,
                         const ad::ParamBundle& ae_params, CondVariant variant,
                         uint64_t seed) {
    ad::NoGradGuard ng;
    CondInputs ci = build_cond_inputs(rec, rigs, cfg, variant);
    ad::Var cond = enc::encode_hand_condition(ci.text_tokens, ci.cond, enc_params,
                                              cfg.encoder)
                       .embeddings;
    ad::Var null_cond = enc::encode_null_condition(enc_params, cfg.encoder).embeddings;
    auto sched = diff::build_schedule(cfg.sched_steps, diff::ScheduleKind::kLinearBeta,
                                      cfg.beta_start, cfg.beta_end);
    double guidance = variant == CondVariant::kUnconditional ? 0.0 : cfg.th2i.guidance;
    Rng rng = Rng::stream(seed, "sample-record");
    ad::Arr img = th2i::sample_th2i(cfg.th2i, th2i_params, cfg.ae, ae_params, cond,
                                    null_cond, sched, cfg.th2i.plms_steps, guidance, rng);
    Tensor out({img.shape[1], img.shape[2], img.shape[3]});
    for (int64_t i = 0; i < out.numel(); ++i)
        out.data[static_cast<size_t>(i)] =
            static_cast<float>(std::clamp(img.at(i), 0.0, 1.0));
    return out;
}

}  // namespace hgen::train
