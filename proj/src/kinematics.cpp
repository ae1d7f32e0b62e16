#include "hgen/kinematics.hpp"

#include <cmath>
#include <fstream>

namespace hgen::kin {

void RigModel::validate() const {
    int64_t V = template_vertices.shape.size() == 2 ? template_vertices.shape[0] : -1;
    if (V <= 0 || template_vertices.shape[1] != 3)
        throw SchemaError("rig: template_vertices must be {V,3}");
    int64_t J = joint_count();
    if (J < 2) throw SchemaError("rig: need at least 2 joints");
    if (skinning_weights.shape != std::vector<int64_t>{V, J})
        throw SchemaError("rig: skinning_weights must be {V,J}");
    for (int64_t v = 0; v < V; ++v) {
        double s = 0.0;
        for (int64_t j = 0; j < J; ++j) {
            double w = skinning_weights.v[static_cast<size_t>(v * J + j)];
            if (w < 0.0) throw SchemaError("rig: skinning_weights has negative entry");
            s += w;
        }
        if (std::abs(s - 1.0) > 1e-6)
            throw SchemaError("rig: skinning_weights row does not sum to 1");
    }
    // tree: exactly one root, acyclic (parent index always smaller works too,
    // but allow general order and walk up).
    int roots = 0;
    for (int64_t j = 0; j < J; ++j) {
        if (parents[static_cast<size_t>(j)] < 0) {
            ++roots;
            continue;
        }
        int64_t p = j;
        int64_t hops = 0;
        while (p >= 0) {
            p = parents[static_cast<size_t>(p)];
            if (++hops > J) throw SchemaError("rig: kinematic_tree has a cycle");
        }
    }
    if (roots != 1) throw SchemaError("rig: kinematic_tree must have exactly one root");
    auto check_stochastic = [V](const ad::Arr& m, const char* name) {
        if (m.shape.size() != 2 || m.shape[1] != V)
            throw SchemaError(std::string("rig: ") + name + " must be {K,V}");
        for (int64_t k = 0; k < m.shape[0]; ++k) {
            double s = 0.0;
            for (int64_t v = 0; v < V; ++v) s += m.v[static_cast<size_t>(k * V + v)];
            if (std::abs(s - 1.0) > 1e-6)
                throw SchemaError(std::string("rig: ") + name + " row does not sum to 1");
        }
    };
    check_stochastic(model_joint_regressor, "model_joint_regressor");
    if (model_joint_regressor.shape[0] != J)
        throw SchemaError("rig: model_joint_regressor must have J rows");
    check_stochastic(joint_regressor, "joint_regressor");
    if (shape_basis.shape.size() != 2 || shape_basis.shape[0] != V * 3)
        throw SchemaError("rig: shape_basis must be {V*3, n_shape}");
    if (pose_basis &&
        (pose_basis->shape.size() != 2 || pose_basis->shape[0] != V * 3 ||
         pose_basis->shape[1] != 9 * (J - 1)))
        throw SchemaError("rig: pose_basis must be {V*3, 9*(J-1)}");
    for (const auto& f : faces)
        for (int64_t ix : f)
            if (ix < 0 || ix >= V) throw SchemaError("rig: face index out of range");
}

std::vector<double> PoseShapeState::flatten() const {
    std::vector<double> x;
    x.reserve(kFlatDim);
    x.insert(x.end(), global_orient.begin(), global_orient.end());
    x.insert(x.end(), theta_body.begin(), theta_body.end());
    x.insert(x.end(), theta_lh.begin(), theta_lh.end());
    x.insert(x.end(), theta_rh.begin(), theta_rh.end());
    x.insert(x.end(), beta.begin(), beta.end());
    return x;
}

PoseShapeState PoseShapeState::from_flat(const std::vector<double>& x) {
    if (static_cast<int64_t>(x.size()) != kFlatDim)
        throw DimensionError("PoseShapeState: flat dim must be 172");
    PoseShapeState s;
    size_t off = 0;
    auto take = [&](auto& arr) {
        std::copy_n(x.begin() + static_cast<int64_t>(off), arr.size(), arr.begin());
        off += arr.size();
    };
    take(s.global_orient);
    take(s.theta_body);
    take(s.theta_lh);
    take(s.theta_rh);
    take(s.beta);
    return s;
}

void PoseShapeState::check_finite() const {
    for (double v : flatten())
        if (!std::isfinite(v)) throw NumericError("PoseShapeState: non-finite value");
}

void CameraIntrinsics::validate() const {
    if (fx <= 0 || fy <= 0) throw SchemaError("camera: focal must be positive");
    if (cx < 0 || cx > width || cy < 0 || cy > height)
        throw SchemaError("camera: principal point outside image bounds");
}

RigModel build_toy_rig(uint64_t seed, int64_t vertex_count, int64_t joint_count,
                       RigSide side, bool with_pose_basis) {
    if (joint_count < 2 || vertex_count < joint_count)
        throw std::invalid_argument("build_toy_rig: need vertex_count >= joint_count >= 2");
    Rng rng(splitmix64(seed));

    RigModel rig;
    rig.side = side;
    int64_t J = joint_count, V = vertex_count;

    // Joints chained along +y with light seeded lateral jitter.
    double seg = 0.08;  // 8 cm segments
    std::vector<Eigen::Vector3d> joints(static_cast<size_t>(J));
    for (int64_t j = 0; j < J; ++j) {
        double jx = 0.12 * seg * rng.uniform(-1, 1);
        double jz = 0.12 * seg * rng.uniform(-1, 1);
        joints[static_cast<size_t>(j)] =
            Eigen::Vector3d(jx, static_cast<double>(j) * seg, jz);
    }
    rig.parents.resize(static_cast<size_t>(J));
    rig.parents[0] = -1;
    for (int64_t j = 1; j < J; ++j) rig.parents[static_cast<size_t>(j)] = j - 1;

    // Tube of vertex rings around the chain; tapered radius.
    const int64_t ring_size = 8;
    int64_t rings = std::max<int64_t>(V / ring_size, 2);
    rig.template_vertices = ad::Arr({V, 3});
    std::vector<double> chain_t(static_cast<size_t>(V));
    double chain_len = seg * static_cast<double>(J - 1);
    for (int64_t i = 0; i < V; ++i) {
        int64_t r = std::min(i / ring_size, rings - 1);
        int64_t k = i % ring_size;
        double t = static_cast<double>(r) / static_cast<double>(rings - 1);
        if (i >= rings * ring_size) t = rng.uniform();  // leftover vertices scatter
        chain_t[static_cast<size_t>(i)] = t;
        double radius = seg * (0.9 - 0.5 * t);  // taper toward tip
        double phi = 2.0 * M_PI * static_cast<double>(k) / ring_size +
                     0.05 * rng.uniform(-1, 1);
        double y = t * chain_len;
        // interpolate chain jitter
        double fj = t * static_cast<double>(J - 1);
        int64_t j0 = std::min<int64_t>(static_cast<int64_t>(fj), J - 2);
        double a = fj - static_cast<double>(j0);
        Eigen::Vector3d axis_pt = (1 - a) * joints[static_cast<size_t>(j0)] +
                                  a * joints[static_cast<size_t>(j0 + 1)];
        rig.template_vertices.v[static_cast<size_t>(i * 3 + 0)] =
            axis_pt.x() + radius * std::cos(phi);
        rig.template_vertices.v[static_cast<size_t>(i * 3 + 1)] = y;
        rig.template_vertices.v[static_cast<size_t>(i * 3 + 2)] =
            axis_pt.z() + radius * std::sin(phi);
    }

    // Triangulate consecutive full rings.
    for (int64_t r = 0; r + 1 < rings; ++r)
        for (int64_t k = 0; k < ring_size; ++k) {
            int64_t a = r * ring_size + k;
            int64_t b = r * ring_size + (k + 1) % ring_size;
            int64_t c = (r + 1) * ring_size + k;
            int64_t d = (r + 1) * ring_size + (k + 1) % ring_size;
            rig.faces.push_back({a, b, c});
            rig.faces.push_back({b, d, c});
        }

    // Skinning: gaussian falloff of chain parameter to joint parameter,
    // truncated to the two nearest joints for crisp articulation.
    rig.skinning_weights = ad::Arr({V, J});
    for (int64_t i = 0; i < V; ++i) {
        double fj = chain_t[static_cast<size_t>(i)] * static_cast<double>(J - 1);
        int64_t j0 = std::min<int64_t>(static_cast<int64_t>(fj), J - 2);
        double a = fj - static_cast<double>(j0);
        rig.skinning_weights.v[static_cast<size_t>(i * J + j0)] = 1.0 - a;
        rig.skinning_weights.v[static_cast<size_t>(i * J + j0 + 1)] = a;
    }

    // Rest-joint regressor: proximity-weighted, row-stochastic.
    rig.model_joint_regressor = ad::Arr({J, V});
    for (int64_t j = 0; j < J; ++j) {
        double total = 0.0;
        for (int64_t i = 0; i < V; ++i) {
            Eigen::Vector3d p(rig.template_vertices.v[static_cast<size_t>(i * 3)],
                              rig.template_vertices.v[static_cast<size_t>(i * 3 + 1)],
                              rig.template_vertices.v[static_cast<size_t>(i * 3 + 2)]);
            double d2 = (p - joints[static_cast<size_t>(j)]).squaredNorm();
            double w = std::exp(-d2 / (2.0 * seg * seg * 0.25));
            rig.model_joint_regressor.v[static_cast<size_t>(j * V + i)] = w;
            total += w;
        }
        for (int64_t i = 0; i < V; ++i)
            rig.model_joint_regressor.v[static_cast<size_t>(j * V + i)] /= total;
    }

    // Output regressor: model joints plus, for hands, 5 fingertip rows
    // one-hot at the vertices farthest along the chain.
    bool hand = side != RigSide::kBody;
    int64_t K = hand ? J + 5 : J;
    rig.joint_regressor = ad::Arr({K, V});
    std::copy(rig.model_joint_regressor.v.begin(), rig.model_joint_regressor.v.end(),
              rig.joint_regressor.v.begin());
    if (hand) {
        std::vector<int64_t> order(static_cast<size_t>(V));
        for (int64_t i = 0; i < V; ++i) order[static_cast<size_t>(i)] = i;
        std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            return chain_t[static_cast<size_t>(a)] > chain_t[static_cast<size_t>(b)];
        });
        for (int64_t f = 0; f < 5; ++f)
            rig.joint_regressor.v[static_cast<size_t>((J + f) * V +
                                                      order[static_cast<size_t>(f)])] = 1.0;
    }

    // Shape basis: smooth radial inflation modes, small magnitude.
    const int64_t n_shape = 10;
    rig.shape_basis = ad::Arr({V * 3, n_shape});
    for (int64_t s = 0; s < n_shape; ++s) {
        double freq = 1.0 + static_cast<double>(s % 5);
        double phase = rng.uniform(0, 2 * M_PI);
        double amp = 0.01 * (1.0 - 0.05 * static_cast<double>(s));
        for (int64_t i = 0; i < V; ++i) {
            double t = chain_t[static_cast<size_t>(i)];
            double m = amp * std::sin(freq * M_PI * t + phase);
            double vx = rig.template_vertices.v[static_cast<size_t>(i * 3)];
            double vz = rig.template_vertices.v[static_cast<size_t>(i * 3 + 2)];
            double nrm = std::max(std::hypot(vx, vz), 1e-6);
            rig.shape_basis.v[static_cast<size_t>((i * 3 + 0) * n_shape + s)] = m * vx / nrm;
            rig.shape_basis.v[static_cast<size_t>((i * 3 + 2) * n_shape + s)] = m * vz / nrm;
        }
    }

    if (with_pose_basis) {
        ad::Arr pb({V * 3, 9 * (J - 1)});
        for (auto& x : pb.v) x = 0.002 * rng.uniform(-1, 1);
        rig.pose_basis = std::move(pb);
    }

    rig.validate();
    return rig;
}

LbsResult lbs_forward_ad(const RigModel& rig, const ad::Var& pose, const ad::Var& beta) {
    int64_t V = rig.vertex_count(), J = rig.joint_count();
    if (pose->val.numel() != 3 * J)
        throw DimensionError("lbs_forward: pose length must be 3*J");
    if (beta->val.numel() != rig.shape_dim())
        throw DimensionError("lbs_forward: beta length must match shape basis depth");
    for (double v : pose->val.v)
        if (!std::isfinite(v)) throw NumericError("lbs_forward: NaN in pose");
    for (double v : beta->val.v)
        if (!std::isfinite(v)) throw NumericError("lbs_forward: NaN in beta");

    auto shape_basis = ad::constant(rig.shape_basis);
    auto templ = ad::constant(rig.template_vertices);
    auto disp = ad::matmul(shape_basis, ad::reshape(beta, {rig.shape_dim(), 1}));
    auto v_shaped = ad::add(templ, ad::reshape(disp, {V, 3}));

    auto rots = ad::rodrigues(ad::reshape(pose, {J, 3}));  // {J,3,3}

    if (rig.pose_basis) {
        // corrective: pose_basis * vec(R_j - I) over non-root joints
        std::vector<ad::Var> feats;
        ad::Arr eye({1, 9}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
        for (int64_t j = 1; j < J; ++j)
            feats.push_back(ad::sub(ad::reshape(ad::slice(rots, 0, j, 1), {1, 9}),
                                    ad::constant(eye)));
        auto f = ad::reshape(ad::concat(feats, 0), {9 * (J - 1), 1});
        auto corr = ad::matmul(ad::constant(*rig.pose_basis), f);
        v_shaped = ad::add(v_shaped, ad::reshape(corr, {V, 3}));
    }

    // Rest joints from shaped vertices.
    auto rest_joints = ad::matmul(ad::constant(rig.model_joint_regressor), v_shaped);

    // Forward kinematics along the tree.
    std::vector<ad::Var> grot(static_cast<size_t>(J));  // {3,3} world rotations
    std::vector<ad::Var> gpos(static_cast<size_t>(J));  // {1,3} world joint positions
    for (int64_t j = 0; j < J; ++j) {
        auto Rj = ad::reshape(ad::slice(rots, 0, j, 1), {3, 3});
        auto jj = ad::slice(rest_joints, 0, j, 1);  // {1,3}
        int64_t p = rig.parents[static_cast<size_t>(j)];
        if (p < 0) {
            grot[static_cast<size_t>(j)] = Rj;
            gpos[static_cast<size_t>(j)] = jj;
        } else {
            auto Rp = grot[static_cast<size_t>(p)];
            grot[static_cast<size_t>(j)] = ad::matmul(Rp, Rj);
            auto offset = ad::sub(jj, ad::slice(rest_joints, 0, p, 1));  // {1,3}
            auto moved = ad::matmul(offset, ad::transpose_last2(Rp));
            gpos[static_cast<size_t>(j)] = ad::add(gpos[static_cast<size_t>(p)], moved);
        }
    }

    // Skinning: v' = sum_j w_j * ((v_shaped - rest_j) R_j^T + gpos_j)
    ad::Var skinned;
    for (int64_t j = 0; j < J; ++j) {
        auto centered = ad::sub(v_shaped, ad::slice(rest_joints, 0, j, 1));
        auto moved = ad::add(
            ad::matmul(centered, ad::transpose_last2(grot[static_cast<size_t>(j)])),
            gpos[static_cast<size_t>(j)]);
        ad::Arr wcol({V, 1});
        for (int64_t i = 0; i < V; ++i)
            wcol.v[static_cast<size_t>(i)] =
                rig.skinning_weights.v[static_cast<size_t>(i * J + j)];
        auto contrib = ad::mul(moved, ad::constant(wcol));
        skinned = (j == 0) ? contrib : ad::add(skinned, contrib);
    }

    LbsResult out;
    out.vertices = skinned;
    out.joints_posed = ad::concat(gpos, 0);  // {J,3}
    std::vector<ad::Var> rots3;
    rots3.reserve(static_cast<size_t>(J));
    for (auto& g : grot) rots3.push_back(ad::reshape(g, {1, 3, 3}));
    out.joint_rotations = ad::concat(rots3, 0);
    return out;
}

LbsPlain lbs_forward(const RigModel& rig, const std::vector<double>& pose,
                     const std::vector<double>& beta) {
    ad::NoGradGuard ng;
    auto res = lbs_forward_ad(
        rig, ad::constant(ad::Arr({static_cast<int64_t>(pose.size())}, pose)),
        ad::constant(ad::Arr({static_cast<int64_t>(beta.size())}, beta)));
    return {res.vertices->val, res.joints_posed->val, res.joint_rotations->val};
}

ad::Var regress_joints_ad(const ad::Arr& regressor, const ad::Var& vertices) {
    if (regressor.shape.size() != 2 || vertices->val.shape.size() != 2 ||
        regressor.shape[1] != vertices->val.shape[0])
        throw DimensionError("regress_joints: regressor {K,V} does not match vertices {V,3}");
    return ad::matmul(ad::constant(regressor), vertices);
}

ad::Arr regress_joints(const ad::Arr& regressor, const ad::Arr& vertices) {
    ad::NoGradGuard ng;
    return regress_joints_ad(regressor, ad::constant(vertices))->val;
}

Eigen::Matrix3d axis_angle_to_matrix(const Eigen::Vector3d& aa) {
    ad::NoGradGuard ng;
    auto R = ad::rodrigues(ad::constant(ad::Arr({1, 3}, {aa.x(), aa.y(), aa.z()})));
    Eigen::Matrix3d out;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) out(i, j) = R->val.v[static_cast<size_t>(i * 3 + j)];
    return out;
}

std::vector<Eigen::Vector2d> project_pinhole(const CameraIntrinsics& cam,
                                             const std::vector<Eigen::Vector3d>& points,
                                             double depth_epsilon) {
    std::vector<int64_t> bad;
    for (size_t i = 0; i < points.size(); ++i)
        if (points[i].z() <= depth_epsilon) bad.push_back(static_cast<int64_t>(i));
    if (!bad.empty()) {
        std::string msg = "behind-camera points at indices:";
        for (int64_t i : bad) msg += " " + std::to_string(i);
        BehindCameraError err(msg);
        err.indices = std::move(bad);
        throw err;
    }
    std::vector<Eigen::Vector2d> out;
    out.reserve(points.size());
    for (const auto& p : points)
        out.emplace_back(cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy);
    return out;
}

void save_rig_archive(const RigModel& rig, const std::string& path) {
    TensorStore store;
    store.put("rig.template_vertices", rig.template_vertices.to_tensor());
    store.put("rig.shape_basis", rig.shape_basis.to_tensor());
    store.put("rig.skinning_weights", rig.skinning_weights.to_tensor());
    store.put("rig.model_joint_regressor", rig.model_joint_regressor.to_tensor());
    store.put("rig.joint_regressor", rig.joint_regressor.to_tensor());
    if (rig.pose_basis) store.put("rig.pose_basis", rig.pose_basis->to_tensor());
    Tensor parents({rig.joint_count()});
    for (int64_t j = 0; j < rig.joint_count(); ++j)
        parents.data[static_cast<size_t>(j)] =
            static_cast<float>(rig.parents[static_cast<size_t>(j)]);
    store.put("rig.parents", parents);
    if (!rig.faces.empty()) {
        Tensor faces({static_cast<int64_t>(rig.faces.size()), 3});
        for (size_t f = 0; f < rig.faces.size(); ++f)
            for (int c = 0; c < 3; ++c)
                faces.data[f * 3 + static_cast<size_t>(c)] =
                    static_cast<float>(rig.faces[f][static_cast<size_t>(c)]);
        store.put("rig.faces", faces);
    }
    store.put_scalar("rig.side", static_cast<double>(rig.side));
    store.save(path);
}

RigModel load_rig_archive(const std::string& path) {
    TensorStore store = TensorStore::load(path);
    RigModel rig;
    rig.template_vertices = ad::Arr::from_tensor(store.get("rig.template_vertices"));
    rig.shape_basis = ad::Arr::from_tensor(store.get("rig.shape_basis"));
    rig.skinning_weights = ad::Arr::from_tensor(store.get("rig.skinning_weights"));
    rig.model_joint_regressor =
        ad::Arr::from_tensor(store.get("rig.model_joint_regressor"));
    rig.joint_regressor = ad::Arr::from_tensor(store.get("rig.joint_regressor"));
    if (store.contains("rig.pose_basis"))
        rig.pose_basis = ad::Arr::from_tensor(store.get("rig.pose_basis"));
    const Tensor& parents = store.get("rig.parents");
    for (float p : parents.data) rig.parents.push_back(static_cast<int64_t>(p));
    if (const Tensor* faces = store.find("rig.faces")) {
        for (int64_t f = 0; f < faces->shape[0]; ++f)
            rig.faces.push_back({static_cast<int64_t>(faces->data[static_cast<size_t>(f * 3)]),
                                 static_cast<int64_t>(faces->data[static_cast<size_t>(f * 3 + 1)]),
                                 static_cast<int64_t>(faces->data[static_cast<size_t>(f * 3 + 2)])});
    }
    rig.side = static_cast<RigSide>(static_cast<int>(store.get_scalar("rig.side")));
    rig.validate();
    return rig;
}

void export_mesh_obj(const ad::Arr& vertices,
                     const std::vector<std::array<int64_t, 3>>& faces,
                     const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw SchemaError("cannot open for write: " + path);
    int64_t V = vertices.shape[0];
    for (int64_t i = 0; i < V; ++i)
        f << "v " << vertices.v[static_cast<size_t>(i * 3)] << " "
          << vertices.v[static_cast<size_t>(i * 3 + 1)] << " "
          << vertices.v[static_cast<size_t>(i * 3 + 2)] << "\n";
    for (const auto& face : faces)
        f << "f " << face[0] + 1 << " " << face[1] + 1 << " " << face[2] + 1 << "\n";
}

}  // namespace hgen::kin
