#pragma once

// Differentiable parametric body/hand model: blendshapes + linear blend
// skinning, joint regression, rotation utilities, pinhole projection.

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "hgen/ad.hpp"
#include "hgen/rng.hpp"

namespace hgen::kin {

enum class RigSide { kBody, kLeft, kRight };

struct RigModel {
    ad::Arr template_vertices;       // {V,3} meters
    ad::Arr shape_basis;             // {V*3, n_shape}
    std::optional<ad::Arr> pose_basis;  // {V*3, 9*(J-1)}, off by default
    ad::Arr skinning_weights;        // {V,J}, rows sum to 1, non-negative
    std::vector<int64_t> parents;    // parent per joint, root = -1
    ad::Arr model_joint_regressor;   // {J,V} row-stochastic, rest joints
    ad::Arr joint_regressor;         // {K,V} row-stochastic, output joints
    std::vector<std::array<int64_t, 3>> faces;  // optional triangulation
    RigSide side = RigSide::kBody;

    int64_t vertex_count() const { return template_vertices.shape[0]; }
    int64_t joint_count() const { return static_cast<int64_t>(parents.size()); }
    int64_t regressed_joint_count() const { return joint_regressor.shape[0]; }
    int64_t shape_dim() const { return shape_basis.shape[1]; }

    void validate() const;  // throws SchemaError naming the violated field
};

// State layout (flattened, 172): global_orient | theta_body | theta_lh |
// theta_rh | beta.
struct PoseShapeState {
    std::array<double, 3> global_orient{};
    std::array<double, 69> theta_body{};
    std::array<double, 45> theta_lh{};
    std::array<double, 45> theta_rh{};
    std::array<double, 10> beta{};

    static constexpr int64_t kFlatDim = 172;
    std::vector<double> flatten() const;
    static PoseShapeState from_flat(const std::vector<double>& x);
    void check_finite() const;
};

struct CameraIntrinsics {
    double fx = 1000.0, fy = 1000.0;
    double cx = 128.0, cy = 128.0;
    int64_t width = 256, height = 256;

    void validate() const;
};

struct CameraExtrinsics {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();  // world -> camera
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    Eigen::Vector3d to_camera(const Eigen::Vector3d& p_world) const {
        return rotation * p_world + translation;
    }
};

struct BehindCameraError : NumericError {
    explicit BehindCameraError(const std::string& msg) : NumericError(msg) {}
    std::vector<int64_t> indices;
};

// Deterministic toy rig: joints chained along +y, ringed tube of vertices
// around the chain, gaussian-falloff skinning, proximity joint regressor.
// Hand-sided rigs get 5 fingertip rows appended to the joint regressor
// (K = J + 5); body rigs regress K = J joints.
RigModel build_toy_rig(uint64_t seed, int64_t vertex_count, int64_t joint_count,
                       RigSide side = RigSide::kBody, bool with_pose_basis = false);

struct LbsResult {
    ad::Var vertices;          // {V,3}
    ad::Var joints_posed;      // {J,3} model joints after FK
    ad::Var joint_rotations;   // {J,3,3} composed global rotations
};

// Tape version: differentiable w.r.t. pose and beta.
LbsResult lbs_forward_ad(const RigModel& rig, const ad::Var& pose, const ad::Var& beta);

// Plain version for inference paths.
struct LbsPlain {
    ad::Arr vertices;
    ad::Arr joints_posed;
    ad::Arr joint_rotations;
};
LbsPlain lbs_forward(const RigModel& rig, const std::vector<double>& pose,
                     const std::vector<double>& beta);

// joints = regressor * vertices.
ad::Arr regress_joints(const ad::Arr& regressor, const ad::Arr& vertices);
ad::Var regress_joints_ad(const ad::Arr& regressor, const ad::Var& vertices);

Eigen::Matrix3d axis_angle_to_matrix(const Eigen::Vector3d& aa);

// u = fx*x/z + cx, v = fy*y/z + cy; throws BehindCameraError when any depth
// is below depth_epsilon.
std::vector<Eigen::Vector2d> project_pinhole(const CameraIntrinsics& cam,
                                             const std::vector<Eigen::Vector3d>& points,
                                             double depth_epsilon = 1e-4);

void save_rig_archive(const RigModel& rig, const std::string& path);
RigModel load_rig_archive(const std::string& path);

// Plain-text triangle dump (v/f lines) for visual spot checks.
void export_mesh_obj(const ad::Arr& vertices,
                     const std::vector<std::array<int64_t, 3>>& faces,
                     const std::string& path);

}  // namespace hgen::kin
