#include "hgen/pipeline.hpp"

#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "hgen/image.hpp"

namespace hgen::pipe {

RigSet build_scene_rigs(uint64_t seed) {
    RigSet rigs;
    uint64_t s = seed;
    rigs.body = kin::build_toy_rig(splitmix64(s), 512, 24, kin::RigSide::kBody);
    rigs.left = kin::build_toy_rig(splitmix64(s), 778, 16, kin::RigSide::kLeft);
    rigs.right = kin::build_toy_rig(splitmix64(s), 778, 16, kin::RigSide::kRight);
    return rigs;
}

namespace {

Eigen::Vector3d arr_row(const ad::Arr& a, int64_t row) {
    return {a.at(row * 3 + 0), a.at(row * 3 + 1), a.at(row * 3 + 2)};
}

Eigen::Matrix3d arr_rot(const ad::Arr& rots, int64_t joint) {
    Eigen::Matrix3d R;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) R(r, c) = rots.at(joint * 9 + r * 3 + c);
    return R;
}

HandGeometry pose_hand(const kin::RigModel& rig, const std::array<double, 45>& theta,
                       const std::vector<double>& beta, const Eigen::Matrix3d& wrist_rot,
                       const Eigen::Vector3d& wrist_pos, const Eigen::Vector3d& offset,
                       double scale) {
    // Hand rig runs in its own frame with an identity root; the wrist frame
    // from the body chain carries it into world coordinates.
    std::vector<double> pose(static_cast<size_t>(rig.joint_count()) * 3, 0.0);
    for (size_t i = 0; i < theta.size(); ++i) pose[3 + i] = theta[i];
    auto local = kin::lbs_forward(rig, pose, beta);

    Eigen::Vector3d root = arr_row(local.joints_posed, 0);
    auto to_world = [&](const Eigen::Vector3d& p) {
        return wrist_rot * (scale * (p - root) + offset) + wrist_pos;
    };

    HandGeometry out;
    out.wrist_pos = wrist_pos;
    out.wrist_rot = wrist_rot;
    out.theta = theta;

    int64_t V = rig.vertex_count();
    out.vertices = ad::Arr({V, 3});
    for (int64_t i = 0; i < V; ++i) {
        Eigen::Vector3d p = to_world(arr_row(local.vertices, i));
        for (int c = 0; c < 3; ++c) out.vertices.at(i * 3 + c) = p[c];
    }

    ad::Arr joints_local = kin::regress_joints(rig.joint_regressor, local.vertices);
    int64_t K = rig.regressed_joint_count();
    out.joints3d = ad::Arr({K, 3});
    for (int64_t k = 0; k < K; ++k) {
        Eigen::Vector3d p = to_world(arr_row(joints_local, k));
        for (int c = 0; c < 3; ++c) out.joints3d.at(k * 3 + c) = p[c];
    }

    out.rotations.reserve(static_cast<size_t>(rig.joint_count()));
    for (int64_t j = 0; j < rig.joint_count(); ++j)
        out.rotations.push_back(wrist_rot * arr_rot(local.joint_rotations, j));
    return out;
}

}  // namespace

SceneHands extract_hands(const kin::PoseShapeState& state, const RigSet& rigs) {
    state.check_finite();
    std::vector<double> body_pose;
    body_pose.reserve(72);
    for (double v : state.global_orient) body_pose.push_back(v);
    for (double v : state.theta_body) body_pose.push_back(v);
    std::vector<double> beta(state.beta.begin(), state.beta.end());

    SceneHands out;
    out.body = kin::lbs_forward(rigs.body, body_pose, beta);

    auto wrist = [&](int64_t j) {
        return std::make_pair(arr_rot(out.body.joint_rotations, j),
                              arr_row(out.body.joints_posed, j));
    };
    auto [lrot, lpos] = wrist(rigs.left_wrist_joint);
    auto [rrot, rpos] = wrist(rigs.right_wrist_joint);
    out.left = pose_hand(rigs.left, state.theta_lh, beta, lrot, lpos, rigs.left_offset,
                         rigs.hand_scale);
    out.right = pose_hand(rigs.right, state.theta_rh, beta, rrot, rpos,
                          rigs.right_offset, rigs.hand_scale);
    return out;
}

kin::CameraIntrinsics default_intrinsics() {
    kin::CameraIntrinsics intr;
    intr.fx = 64.0;
    intr.fy = 64.0;
    intr.cx = 32.0;
    intr.cy = 32.0;
    intr.width = 64;
    intr.height = 64;
    return intr;
}

kin::CameraExtrinsics look_at_camera(const Eigen::Vector3d& target, double distance,
                                     double azimuth, double elevation) {
    Eigen::Vector3d dir(std::sin(azimuth) * std::cos(elevation), std::sin(elevation),
                        std::cos(azimuth) * std::cos(elevation));
    Eigen::Vector3d pos = target + distance * dir;
    Eigen::Vector3d z = (target - pos).normalized();
    Eigen::Vector3d up(0.0, 1.0, 0.0);
    Eigen::Vector3d x = up.cross(z);
    if (x.norm() < 1e-9) x = Eigen::Vector3d(1.0, 0.0, 0.0);
    x.normalize();
    Eigen::Vector3d y = z.cross(x);

    kin::CameraExtrinsics ext;
    ext.rotation.row(0) = x;
    ext.rotation.row(1) = y;
    ext.rotation.row(2) = z;
    ext.translation = -ext.rotation * pos;
    return ext;
}

SceneCamera canonical_camera(const std::vector<Eigen::Vector3d>& points,
                             const kin::CameraIntrinsics& intr, double distance) {
    Eigen::Vector3d c = Eigen::Vector3d::Zero();
    for (const auto& p : points) c += p;
    if (!points.empty()) c /= static_cast<double>(points.size());
    return {intr, look_at_camera(c, distance, 0.0, 0.0)};
}

double visible_fraction(const std::vector<Eigen::Vector3d>& points,
                        const SceneCamera& cam, double frame_margin) {
    if (points.empty()) return 0.0;
    const auto& intr = cam.intrinsics;
    double u_lo = frame_margin * intr.width, u_hi = (1.0 - frame_margin) * intr.width;
    double v_lo = frame_margin * intr.height, v_hi = (1.0 - frame_margin) * intr.height;
    int64_t ok = 0;
    for (const auto& p : points) {
        Eigen::Vector3d q = cam.extrinsics.to_camera(p);
        if (q.z() <= 1e-4) continue;
        double u = intr.fx * q.x() / q.z() + intr.cx;
        double v = intr.fy * q.y() / q.z() + intr.cy;
        if (u >= u_lo && u <= u_hi && v >= v_lo && v <= v_hi) ++ok;
    }
    return static_cast<double>(ok) / static_cast<double>(points.size());
}

SceneCamera sample_camera(const std::vector<Eigen::Vector3d>& hand_joints,
                          const kin::CameraIntrinsics& intr, const CameraRanges& ranges,
                          Rng& rng, int64_t max_tries) {
    if (max_tries < 1) throw std::invalid_argument("sample_camera: max_tries >= 1");
    intr.validate();
    Eigen::Vector3d target;
    if (ranges.target) {
        target = *ranges.target;
    } else {
        target = Eigen::Vector3d::Zero();
        for (const auto& p : hand_joints) target += p;
        if (!hand_joints.empty()) target /= static_cast<double>(hand_joints.size());
    }
    for (int64_t attempt = 0; attempt < max_tries; ++attempt) {
        double d = rng.uniform(ranges.distance_min, ranges.distance_max);
        double az = rng.uniform(ranges.azimuth_min, ranges.azimuth_max);
        double el = rng.uniform(ranges.elevation_min, ranges.elevation_max);
        SceneCamera cam{intr, look_at_camera(target, d, az, el)};
        if (visible_fraction(hand_joints, cam, ranges.frame_margin) >= ranges.min_fraction)
            return cam;
    }
    throw VisibilityError("sample_camera: no acceptable camera in " +
                          std::to_string(max_tries) + " tries");
}

std::vector<Eigen::Vector3d> arr_rows_to_points(const ad::Arr& a) {
    if (a.shape.size() != 2 || a.shape[1] != 3)
        throw DimensionError("arr_rows_to_points: want {N,3}");
    std::vector<Eigen::Vector3d> out;
    out.reserve(static_cast<size_t>(a.shape[0]));
    for (int64_t i = 0; i < a.shape[0]; ++i) out.push_back(arr_row(a, i));
    return out;
}

// ---- end-to-end generation ----

PipelineConfig PipelineConfig::defaults() {
    PipelineConfig cfg;
    cfg.t2h.vocab_size = enc::TextVocab::standard().size();
    cfg.t2h.text_len = 12;
    cfg.encoder.max_text_len = 12;
    return cfg;
}

void PipelineConfig::validate() const {
    t2h.validate();
    encoder.validate();
    th2i.validate();
    ae.validate();
    intrinsics.validate();
    if (t2h.state_dim != kin::PoseShapeState::kFlatDim)
        throw SchemaError("pipeline: state stage must emit the 172-dim state");
    if (t2h.vocab_size != enc::TextVocab::standard().size())
        throw SchemaError("pipeline: state-stage vocabulary != standard vocabulary");
    if (encoder.embed_dim != th2i.cond_dim)
        throw SchemaError("pipeline: condition embedding dim != image-stage cond_dim");
    if (ae.latent_channels != th2i.latent_channels)
        throw SchemaError("pipeline: autoencoder/latent channel mismatch");
    if (intrinsics.width != 4 * th2i.latent_hw || intrinsics.height != 4 * th2i.latent_hw)
        throw SchemaError("pipeline: frame size must be 4x the latent side");
    if (sched_steps < 1) throw SchemaError("pipeline: sched_steps >= 1");
    if (beta_start <= 0.0 || beta_end <= beta_start)
        throw SchemaError("pipeline: need 0 < beta_start < beta_end");
    if (camera_max_tries < 1) throw SchemaError("pipeline: camera_max_tries >= 1");
}

void init_checkpoints(Checkpoints& ckpt, const PipelineConfig& cfg, Rng& rng) {
    cfg.validate();
    t2h::init_t2h_params(ckpt.t2h, cfg.t2h, rng);
    enc::init_encoder_params(ckpt.encoder, cfg.encoder, rng);
    th2i::init_th2i_params(ckpt.th2i, cfg.th2i, rng);
    th2i::init_ae_params(ckpt.ae, cfg.ae, rng);
}

void save_checkpoints(const Checkpoints& ckpt, const std::string& path) {
    TensorStore store;
    ckpt.t2h.append_to(store, "");
    ckpt.encoder.append_to(store, "");
    ckpt.th2i.append_to(store, "");
    ckpt.ae.append_to(store, "");
    store.save(path);
}

void load_checkpoints(Checkpoints& ckpt, const std::string& path) {
    auto store = TensorStore::load(path);
    ckpt.t2h.load_from(store, "");
    ckpt.encoder.load_from(store, "");
    ckpt.th2i.load_from(store, "");
    ckpt.ae.load_from(store, "");
}

namespace {

// Rethrow stage failures with the stage name up front.
template <typename F>
auto stage(const char* tag, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const DimensionError& e) {
        throw DimensionError(std::string(tag) + ": " + e.what());
    } catch (const SchemaError& e) {
        throw SchemaError(std::string(tag) + ": " + e.what());
    } catch (const NumericError& e) {
        throw NumericError(std::string(tag) + ": " + e.what());
    }
}

std::vector<Eigen::Vector2d> project_points(const std::vector<Eigen::Vector3d>& world,
                                            const SceneCamera& cam) {
    std::vector<Eigen::Vector3d> in_cam;
    in_cam.reserve(world.size());
    for (const auto& p : world) in_cam.push_back(cam.extrinsics.to_camera(p));
    return kin::project_pinhole(cam.intrinsics, in_cam);
}

Tensor points2d_tensor(const std::vector<Eigen::Vector2d>& uv) {
    Tensor t({static_cast<int64_t>(uv.size()), 2});
    for (size_t i = 0; i < uv.size(); ++i) {
        t.data[i * 2 + 0] = static_cast<float>(uv[i].x());
        t.data[i * 2 + 1] = static_cast<float>(uv[i].y());
    }
    return t;
}

// Fills the conditioning input and the trace record for one hand.
void condition_hand(const HandGeometry& hand, bool visible, const SceneCamera& cam,
                    const PipelineConfig& cfg, const ad::Arr& bps_basis,
                    enc::HandInput* input, TraceHand* trace) {
    trace->visible = visible;
    input->visible = visible;
    if (!visible) return;

    auto world = arr_rows_to_points(hand.joints3d);
    auto uv = project_points(world, cam);
    input->joints2d = uv;
    trace->joints2d = points2d_tensor(uv);
    auto tokens = enc::quantize_coords(uv, cam.intrinsics.width, cam.intrinsics.height,
                                       cfg.encoder.n_bins);
    trace->spatial_tokens = tokens.tokens;

    input->vertices_canonical = enc::normalize_to_wrist_frame(
        hand.vertices, hand.wrist_pos, hand.wrist_rot, cfg.encoder.canonical_hand_scale);
    auto bps = enc::bps_encode(input->vertices_canonical, bps_basis);
    trace->bps = Tensor({static_cast<int64_t>(bps.distances.size())});
    for (size_t i = 0; i < bps.distances.size(); ++i)
        trace->bps.data[i] = static_cast<float>(bps.distances[i]);

    input->rotations6d.clear();
    trace->rot6d = Tensor({cfg.encoder.rot_joints_per_hand, 6});
    for (int64_t j = 0; j < cfg.encoder.rot_joints_per_hand; ++j) {
        auto r6 = enc::rotmat_to_6d(hand.rotations[static_cast<size_t>(j + 1)]);
        input->rotations6d.push_back(r6);
        for (int64_t k = 0; k < 6; ++k)
            trace->rot6d.data[static_cast<size_t>(j * 6 + k)] =
                static_cast<float>(r6[static_cast<size_t>(k)]);
    }
}

bool blank_prompt(const std::string& prompt) {
    for (char c : prompt)
        if (std::isalnum(static_cast<unsigned char>(c))) return false;
    return true;
}

}  // namespace

InferenceTrace generate_image_from_text(const std::string& prompt, uint64_t seed,
                                        const Checkpoints& ckpt,
                                        const PipelineConfig& cfg, const RigSet& rigs) {
    cfg.validate();
    const auto& vocab = enc::TextVocab::standard();
    auto sched = diff::build_schedule(cfg.sched_steps, diff::ScheduleKind::kLinearBeta,
                                      cfg.beta_start, cfg.beta_end);

    InferenceTrace tr;
    tr.prompt = prompt;
    tr.seed = seed;
    tr.unconditional = blank_prompt(prompt);

    // stage 1: text -> pose/shape state
    tr.state = stage("state-stage", [&] {
        auto tokens = vocab.tokenize(prompt, cfg.t2h.text_len);
        Rng rng = Rng::stream(seed, "t2h");
        double g = tr.unconditional ? 0.0 : cfg.t2h.guidance_scale;
        auto states = t2h::sample_t2h(cfg.t2h, ckpt.t2h, tokens, 1, sched, g, rng);
        return t2h::decode_state(cfg.t2h, states, 0);
    });

    // stage 2: kinematics + camera
    auto hands = stage("hand-extraction", [&] { return extract_hands(tr.state, rigs); });
    {
        auto joints = arr_rows_to_points(hands.left.joints3d);
        auto jr = arr_rows_to_points(hands.right.joints3d);
        joints.insert(joints.end(), jr.begin(), jr.end());
        Rng rng = Rng::stream(seed, "camera");
        try {
            tr.camera = sample_camera(joints, cfg.intrinsics, cfg.camera_ranges, rng,
                                      cfg.camera_max_tries);
        } catch (const VisibilityError&) {
            // fall back to a deterministic front-on framing of the whole figure
            auto pts = arr_rows_to_points(hands.body.vertices);
            tr.camera = canonical_camera(pts, cfg.intrinsics,
                                         0.5 * (cfg.camera_ranges.distance_min +
                                                cfg.camera_ranges.distance_max));
            tr.camera_fallback = true;
        }
    }

    // stage 3: conditioning bundle
    enc::HandConditioning cond;
    cond.camera = cfg.intrinsics;
    stage("conditioning", [&] {
        auto basis = enc::bps_basis(cfg.encoder.bps_seed, cfg.encoder.bps_count,
                                    cfg.encoder.bps_radius);
        auto ljoints = arr_rows_to_points(hands.left.joints3d);
        auto rjoints = arr_rows_to_points(hands.right.joints3d);
        bool lvis = !tr.camera_fallback &&
                    visible_fraction(ljoints, tr.camera, cfg.camera_ranges.frame_margin) >=
                        cfg.camera_ranges.min_fraction;
        bool rvis = !tr.camera_fallback &&
                    visible_fraction(rjoints, tr.camera, cfg.camera_ranges.frame_margin) >=
                        cfg.camera_ranges.min_fraction;
        condition_hand(hands.left, lvis, tr.camera, cfg, basis, &cond.left, &tr.left);
        condition_hand(hands.right, rvis, tr.camera, cfg, basis, &cond.right, &tr.right);
        return 0;
    });

    // stage 4: conditioned image sampling
    stage("image-stage", [&] {
        ad::NoGradGuard ng;
        auto text = vocab.tokenize(prompt, cfg.encoder.max_text_len);
        auto seq = tr.unconditional ? enc::encode_null_condition(ckpt.encoder, cfg.encoder)
                                    : enc::encode_hand_condition(text, cond, ckpt.encoder,
                                                                 cfg.encoder);
        auto null_seq = enc::encode_null_condition(ckpt.encoder, cfg.encoder);
        Rng rng = Rng::stream(seed, "th2i");
        double g = tr.unconditional ? 0.0 : cfg.th2i.guidance;
        ad::Arr latent = th2i::plms_sample_latent(cfg.th2i, ckpt.th2i, seq.embeddings,
                                                  null_seq.embeddings, 1, sched,
                                                  cfg.th2i.plms_steps, g, rng);
        ad::Arr image = th2i::ae_decode(cfg.ae, ckpt.ae, ad::constant(latent))->val;

        tr.latent = Tensor({cfg.th2i.latent_channels, cfg.th2i.latent_hw,
                            cfg.th2i.latent_hw});
        for (int64_t i = 0; i < latent.numel(); ++i)
            tr.latent.data[static_cast<size_t>(i)] = static_cast<float>(latent.at(i));
        tr.image = Tensor({3, cfg.intrinsics.height, cfg.intrinsics.width});
        for (int64_t i = 0; i < image.numel(); ++i)
            tr.image.data[static_cast<size_t>(i)] =
                static_cast<float>(std::clamp(image.at(i), 0.0, 1.0));
        return 0;
    });
    return tr;
}

void save_trace(const InferenceTrace& trace, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    nlohmann::json m;
    m["format_version"] = 1;
    m["prompt"] = trace.prompt;
    m["seed"] = std::to_string(trace.seed);
    m["unconditional"] = trace.unconditional;
    m["camera_fallback"] = trace.camera_fallback;
    auto cam_json = [&] {
        nlohmann::json c;
        const auto& intr = trace.camera.intrinsics;
        c["fx"] = intr.fx;
        c["fy"] = intr.fy;
        c["cx"] = intr.cx;
        c["cy"] = intr.cy;
        c["width"] = intr.width;
        c["height"] = intr.height;
        for (int r = 0; r < 3; ++r)
            for (int col = 0; col < 3; ++col)
                c["rotation"].push_back(trace.camera.extrinsics.rotation(r, col));
        for (int r = 0; r < 3; ++r)
            c["translation"].push_back(trace.camera.extrinsics.translation(r));
        return c;
    };
    m["camera"] = cam_json();
    auto hand_json = [](const TraceHand& h) {
        nlohmann::json j;
        j["visible"] = h.visible;
        j["spatial_tokens"] = h.spatial_tokens;
        return j;
    };
    m["left"] = hand_json(trace.left);
    m["right"] = hand_json(trace.right);
    std::ofstream f(fs::path(dir) / "manifest.json");
    f << m.dump(1) << "\n";
    if (!f) throw SchemaError("save_trace: manifest write failed");

    img::write_png_rgb((fs::path(dir) / "image.png").string(), trace.image);

    TensorStore store;
    Tensor state({kin::PoseShapeState::kFlatDim});
    auto flat = trace.state.flatten();
    for (size_t i = 0; i < flat.size(); ++i) state.data[i] = static_cast<float>(flat[i]);
    store.put("state", state);
    store.put("latent", trace.latent);
    store.put("image", trace.image);
    auto put_hand = [&](const TraceHand& h, const std::string& p) {
        if (!h.visible) return;
        store.put(p + "joints2d", h.joints2d);
        store.put(p + "bps", h.bps);
        store.put(p + "rot6d", h.rot6d);
    };
    put_hand(trace.left, "l.");
    put_hand(trace.right, "r.");
    store.save((fs::path(dir) / "tensors.bin").string());
}

}  // namespace hgen::pipe
