#pragma once

// Scene assembly and orchestration: the standard body+hands rig set, hand
// extraction from a flat pose/shape state, constrained camera sampling, and
// (in pipeline.cpp) the end-to-end text-to-image path with trace persistence.

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "hgen/hand_encoding.hpp"
#include "hgen/kinematics.hpp"
#include "hgen/rng.hpp"
#include "hgen/t2h.hpp"
#include "hgen/th2i.hpp"

namespace hgen::pipe {

// Body rig plus one rig per hand, with the mounting data that attaches each
// hand to its wrist joint on the body chain.
struct RigSet {
    kin::RigModel body;   // 24 joints: root orient + 23 articulated
    kin::RigModel left;   // 16 joints: wrist + 15 articulated, 778 vertices
    kin::RigModel right;
    int64_t left_wrist_joint = 18;   // body joint indices carrying the hands
    int64_t right_wrist_joint = 21;
    double hand_scale = 0.25;        // shrinks the hand rig onto the wrist
    Eigen::Vector3d left_offset{-0.15, 0.0, 0.0};   // wrist-frame mount offset
    Eigen::Vector3d right_offset{0.15, 0.0, 0.0};
};

// Deterministic in seed; geometry dimensions are fixed (24-joint body,
// 16-joint/778-vertex hands) so that checkpoint and state layouts match.
RigSet build_scene_rigs(uint64_t seed);

// One posed hand in world (body) frame.
struct HandGeometry {
    ad::Arr vertices;                        // {V,3} world frame
    ad::Arr joints3d;                        // {K,3} world frame (K = 21)
    std::vector<Eigen::Matrix3d> rotations;  // global rotation per rig joint (16)
    Eigen::Vector3d wrist_pos;
    Eigen::Matrix3d wrist_rot;
    std::array<double, 45> theta{};          // the state slice that drove the hand
};

struct SceneHands {
    HandGeometry left;
    HandGeometry right;
    kin::LbsPlain body;  // posed body geometry, for rendering
};

// Poses the body from (global_orient, theta_body, beta), reads the wrist
// frames off the body forward kinematics, and poses each hand rig inside its
// wrist frame: world = R_wrist * (scale*(v - root) + offset) + p_wrist.
SceneHands extract_hands(const kin::PoseShapeState& state, const RigSet& rigs);

struct SceneCamera {
    kin::CameraIntrinsics intrinsics;
    kin::CameraExtrinsics extrinsics;
};

struct VisibilityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Extrinsic sampling ranges; intrinsics stay fixed. The camera sits at
// distance d from the target along (azimuth, elevation) and looks at it.
struct CameraRanges {
    double distance_min = 2.2;
    double distance_max = 3.5;
    double azimuth_min = -0.8;     // radians about world +y
    double azimuth_max = 0.8;
    double elevation_min = -0.35;
    double elevation_max = 0.35;
    double min_fraction = 0.9;     // accepted joints / total joints
    double frame_margin = 0.05;    // acceptance region = central 90% of frame
    std::optional<Eigen::Vector3d> target;  // default: centroid of the joints
};

// 64x64 frame used across the toy pipeline.
kin::CameraIntrinsics default_intrinsics();

// Camera looking at `target` from the given spherical offset.
kin::CameraExtrinsics look_at_camera(const Eigen::Vector3d& target, double distance,
                                     double azimuth, double elevation);

// Deterministic front-on camera centered on the centroid of `points`.
SceneCamera canonical_camera(const std::vector<Eigen::Vector3d>& points,
                             const kin::CameraIntrinsics& intr, double distance = 3.0);

// Fraction of points that project inside the central region with positive depth.
double visible_fraction(const std::vector<Eigen::Vector3d>& points,
                        const SceneCamera& cam, double frame_margin);

// Rejection-samples extrinsics until the visibility predicate accepts; throws
// VisibilityError after max_tries failures.
SceneCamera sample_camera(const std::vector<Eigen::Vector3d>& hand_joints,
                          const kin::CameraIntrinsics& intr, const CameraRanges& ranges,
                          Rng& rng, int64_t max_tries = 64);

// Rows of an {N,3} array as Eigen points.
std::vector<Eigen::Vector3d> arr_rows_to_points(const ad::Arr& a);

// ---- end-to-end text -> image ----

struct PipelineConfig {
    t2h::T2hConfig t2h;
    enc::EncoderConfig encoder;
    th2i::Th2iConfig th2i;
    th2i::AeConfig ae;
    kin::CameraIntrinsics intrinsics = default_intrinsics();
    CameraRanges camera_ranges;
    int64_t camera_max_tries = 64;
    uint64_t rig_seed = 2024;
    int64_t sched_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;

    // Shipped defaults at toy scale: 64x64 frames, 16x16x4 latents, the
    // standard caption vocabulary, guidance 2.5 (state stage) / 4.0 (image
    // stage), 50-step deterministic image sampling.
    static PipelineConfig defaults();

    void validate() const;  // cross-module geometry consistency
};

struct Checkpoints {
    ad::ParamBundle t2h;
    ad::ParamBundle encoder;
    ad::ParamBundle th2i;
    ad::ParamBundle ae;
};

void init_checkpoints(Checkpoints& ckpt, const PipelineConfig& cfg, Rng& rng);
void save_checkpoints(const Checkpoints& ckpt, const std::string& path);
// Requires an initialized (shape-matching) checkpoint set; mismatched encoder
// geometry surfaces as SchemaError.
void load_checkpoints(Checkpoints& ckpt, const std::string& path);

struct TraceHand {
    bool visible = false;
    Tensor joints2d;                      // {21,2} pixels
    std::vector<int64_t> spatial_tokens;  // 42 quantized (u,v) entries
    Tensor bps;                           // {bps_count} canonical-frame feature
    Tensor rot6d;                         // {15,6}
};

struct InferenceTrace {
    std::string prompt;
    uint64_t seed = 0;
    bool unconditional = false;
    kin::PoseShapeState state;
    SceneCamera camera;
    bool camera_fallback = false;  // visibility sampling exhausted, canonical used
    TraceHand left, right;
    Tensor latent;  // {C,h,w}
    Tensor image;   // {3,H,W}
};

// Full run: sample the pose/shape state from text, extract hands, pick a
// camera, build the conditioning, sample the image latent, decode. Every
// stochastic stage owns a named stream split from `seed`. Stage failures are
// rethrown with a stage tag prefix.
InferenceTrace generate_image_from_text(const std::string& prompt, uint64_t seed,
                                        const Checkpoints& ckpt,
                                        const PipelineConfig& cfg, const RigSet& rigs);

// dir/manifest.json + dir/image.png + dir/tensors.bin
void save_trace(const InferenceTrace& trace, const std::string& dir);

}  // namespace hgen::pipe
