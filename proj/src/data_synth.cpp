#include "hgen/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "hgen/hand_encoding.hpp"

namespace hgen::data {

using nlohmann::json;
namespace fs = std::filesystem;

// ---- captions ----

const std::string& category_name(PoseCategory c) {
    static const std::vector<std::string> names = {"open-palm", "fist", "point", "wave",
                                                   "hold-sphere"};
    return names.at(static_cast<size_t>(c));
}

const std::string& side_name(HandSide s) {
    static const std::vector<std::string> names = {"left", "right", "both"};
    return names.at(static_cast<size_t>(s));
}

std::string make_caption(PoseCategory category, HandSide side) {
    std::string tail = side == HandSide::kBoth
                           ? "with both hands"
                           : "with the " + side_name(side) + " hand";
    switch (category) {
        case PoseCategory::kOpenPalm:
            return "a person showing an open palm " + tail;
        case PoseCategory::kFist:
            return "a person making a fist " + tail;
        case PoseCategory::kPoint:
            return "a person pointing " + tail;
        case PoseCategory::kWave:
            return "a person waving " + tail;
        case PoseCategory::kHoldSphere:
            return "a person holding a sphere " + tail;
    }
    throw SchemaError("make_caption: bad category");
}

// ---- pose sampling ----

void DataConfig::validate() const {
    double total = 0.0;
    for (double w : category_weights) {
        if (w < 0.0) throw SchemaError("data: category weight must be >= 0");
        total += w;
    }
    if (total <= 0.0) throw SchemaError("data: category weights sum to zero");
    if (unreliable_fraction < 0.0 || unreliable_fraction > 1.0)
        throw SchemaError("data: unreliable_fraction outside [0,1]");
    if (records_per_shard < 1) throw SchemaError("data: records_per_shard >= 1");
    if (camera_max_tries < 1) throw SchemaError("data: camera_max_tries >= 1");
    intrinsics.validate();
}

void category_flexion_range(PoseCategory category, int64_t finger, double* lo,
                            double* hi) {
    switch (category) {
        case PoseCategory::kOpenPalm: *lo = 0.0, *hi = 0.15; return;
        case PoseCategory::kFist: *lo = 1.2, *hi = 1.6; return;
        case PoseCategory::kPoint:
            // index finger stays straight, the rest curl
            if (finger == 1) *lo = 0.0, *hi = 0.2;
            else *lo = 1.2, *hi = 1.6;
            return;
        case PoseCategory::kWave: *lo = 0.15, *hi = 0.45; return;
        case PoseCategory::kHoldSphere: *lo = 0.55, *hi = 0.95; return;
    }
    throw SchemaError("category_flexion_range: bad category");
}

std::array<double, 45> sample_hand_pose(PoseCategory category, Rng& rng) {
    std::array<double, 45> theta{};
    for (int64_t j = 0; j < 15; ++j) {
        double lo, hi;
        category_flexion_range(category, j / 3, &lo, &hi);
        theta[static_cast<size_t>(3 * j + 0)] = rng.uniform(lo, hi);
        theta[static_cast<size_t>(3 * j + 1)] = rng.uniform(-0.05, 0.05);
        theta[static_cast<size_t>(3 * j + 2)] = rng.uniform(-0.05, 0.05);
    }
    return theta;
}

namespace {

std::array<double, 45> relaxed_hand_pose(Rng& rng) {
    std::array<double, 45> theta{};
    for (int64_t j = 0; j < 15; ++j) {
        theta[static_cast<size_t>(3 * j + 0)] = rng.uniform(0.0, 0.1);
        theta[static_cast<size_t>(3 * j + 1)] = rng.uniform(-0.03, 0.03);
        theta[static_cast<size_t>(3 * j + 2)] = rng.uniform(-0.03, 0.03);
    }
    return theta;
}

PoseCategory pick_category(const std::array<double, kCategoryCount>& weights, Rng& rng) {
    double total = 0.0;
    for (double w : weights) total += w;
    double r = rng.uniform() * total;
    double acc = 0.0;
    for (int64_t i = 0; i < kCategoryCount; ++i) {
        acc += weights[static_cast<size_t>(i)];
        if (r < acc) return static_cast<PoseCategory>(i);
    }
    return static_cast<PoseCategory>(kCategoryCount - 1);
}

}  // namespace

SceneSpec sample_scene(const pipe::RigSet& rigs, const DataConfig& cfg, uint64_t seed) {
    cfg.validate();
    uint64_t s = seed;
    Rng rng(splitmix64(s));

    SceneSpec scene;
    scene.category = pick_category(cfg.category_weights, rng);
    scene.side = static_cast<HandSide>(rng.uniform_int(0, 2));
    scene.caption = make_caption(scene.category, scene.side);

    auto& st = scene.state;
    for (auto& v : st.global_orient) v = rng.uniform(-0.15, 0.15);
    for (auto& v : st.theta_body) v = rng.uniform(-0.08, 0.08);
    for (auto& v : st.beta) v = rng.gaussian() * 0.3;

    bool left_active = scene.side != HandSide::kRight;
    bool right_active = scene.side != HandSide::kLeft;
    st.theta_lh = left_active ? sample_hand_pose(scene.category, rng)
                              : relaxed_hand_pose(rng);
    st.theta_rh = right_active ? sample_hand_pose(scene.category, rng)
                               : relaxed_hand_pose(rng);
    if (scene.category == PoseCategory::kWave) {
        // raise the waving forearm(s): swing the joints below each wrist
        if (left_active)
            st.theta_body[3 * (rigs.left_wrist_joint - 2) + 2] = rng.uniform(0.4, 0.7);
        if (right_active)
            st.theta_body[3 * (rigs.right_wrist_joint - 2) + 2] = rng.uniform(-0.7, -0.4);
    }

    auto hands = pipe::extract_hands(st, rigs);
    auto joints = pipe::arr_rows_to_points(hands.left.joints3d);
    auto jr = pipe::arr_rows_to_points(hands.right.joints3d);
    joints.insert(joints.end(), jr.begin(), jr.end());
    scene.camera = pipe::sample_camera(joints, cfg.intrinsics, cfg.camera_ranges, rng,
                                       cfg.camera_max_tries);
    return scene;
}

// ---- rendering ----

namespace {

// dominant skinning joint of each vertex, for segment shading
std::vector<int64_t> dominant_joint(const kin::RigModel& rig) {
    int64_t V = rig.vertex_count(), J = rig.joint_count();
    std::vector<int64_t> out(static_cast<size_t>(V), 0);
    for (int64_t i = 0; i < V; ++i) {
        double best = -1.0;
        for (int64_t j = 0; j < J; ++j) {
            double w = rig.skinning_weights.at(i * J + j);
            if (w > best) best = w, out[static_cast<size_t>(i)] = j;
        }
    }
    return out;
}

constexpr float kBodyRed = 0.15f;
constexpr float kLeftHandRed = 0.70f;
constexpr float kRightHandRed = 0.95f;
constexpr float kHandBandLow = 0.5f;  // red >= this marks a hand pixel

}  // namespace

ColoredCloud body_cloud(const kin::RigModel& rig, const ad::Arr& vertices) {
    auto dom = dominant_joint(rig);
    double denom = std::max<int64_t>(rig.joint_count() - 1, 1);
    ColoredCloud c;
    c.vertices = vertices;
    c.colors.resize(dom.size());
    for (size_t i = 0; i < dom.size(); ++i) {
        float g = static_cast<float>(0.2 + 0.6 * (static_cast<double>(dom[i]) / denom));
        c.colors[i] = {kBodyRed, g, 0.55f};
    }
    return c;
}

ColoredCloud hand_cloud(const kin::RigModel& rig, const ad::Arr& vertices, bool left) {
    auto dom = dominant_joint(rig);
    double denom = std::max<int64_t>(rig.joint_count() - 1, 1);
    ColoredCloud c;
    c.vertices = vertices;
    c.colors.resize(dom.size());

    // Radial shading: blue encodes each vertex's distance from the hand
    // centroid relative to the hand's current extent. Articulation and shape
    // reshape this profile, so the hand's appearance (not just its silhouette)
    // reflects its pose — analogous to shading on a real hand. Centering on
    // the centroid keeps the coloring translation-invariant.
    const int64_t V = vertices.shape[0];
    Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
    for (int64_t i = 0; i < V; ++i)
        centroid += Eigen::Vector3d(vertices.at(i * 3), vertices.at(i * 3 + 1),
                                    vertices.at(i * 3 + 2));
    centroid /= static_cast<double>(std::max<int64_t>(V, 1));
    std::vector<double> dist(static_cast<size_t>(V), 0.0);
    double dmax = 1e-12;
    for (int64_t i = 0; i < V; ++i) {
        Eigen::Vector3d p(vertices.at(i * 3), vertices.at(i * 3 + 1),
                          vertices.at(i * 3 + 2));
        dist[static_cast<size_t>(i)] = (p - centroid).norm();
        dmax = std::max(dmax, dist[static_cast<size_t>(i)]);
    }

    for (size_t i = 0; i < dom.size(); ++i) {
        float g = static_cast<float>(0.2 + 0.6 * (static_cast<double>(dom[i]) / denom));
        float b = static_cast<float>(0.15 + 0.7 * (dist[i] / dmax));
        c.colors[i] = {left ? kLeftHandRed : kRightHandRed, g, b};
    }
    return c;
}

Tensor rasterize(const std::vector<ColoredCloud>& clouds, const pipe::SceneCamera& cam,
                 std::vector<double>* depth_out) {
    const auto& intr = cam.intrinsics;
    intr.validate();
    int64_t W = intr.width, H = intr.height;
    Tensor img({3, H, W});
    std::vector<double> zbuf(static_cast<size_t>(H * W),
                             std::numeric_limits<double>::infinity());

    const double radius = 1.6;
    for (const auto& cloud : clouds) {
        if (cloud.vertices.shape.size() != 2 || cloud.vertices.shape[1] != 3 ||
            cloud.vertices.shape[0] != static_cast<int64_t>(cloud.colors.size()))
            throw DimensionError("rasterize: cloud vertices {N,3} with N colors");
        // project through the shared pinhole (throws on behind-camera points)
        std::vector<Eigen::Vector3d> in_cam;
        in_cam.reserve(cloud.colors.size());
        for (int64_t i = 0; i < cloud.vertices.shape[0]; ++i)
            in_cam.push_back(cam.extrinsics.to_camera(
                {cloud.vertices.at(i * 3), cloud.vertices.at(i * 3 + 1),
                 cloud.vertices.at(i * 3 + 2)}));
        auto uv = kin::project_pinhole(intr, in_cam);

        for (size_t i = 0; i < uv.size(); ++i) {
            double u = uv[i].x(), v = uv[i].y(), z = in_cam[i].z();
            int64_t u0 = static_cast<int64_t>(std::floor(u - radius));
            int64_t u1 = static_cast<int64_t>(std::ceil(u + radius));
            int64_t v0 = static_cast<int64_t>(std::floor(v - radius));
            int64_t v1 = static_cast<int64_t>(std::ceil(v + radius));
            for (int64_t py = std::max<int64_t>(v0, 0); py <= std::min(v1, H - 1); ++py)
                for (int64_t px = std::max<int64_t>(u0, 0); px <= std::min(u1, W - 1);
                     ++px) {
                    double du = static_cast<double>(px) + 0.5 - u;
                    double dv = static_cast<double>(py) + 0.5 - v;
                    if (du * du + dv * dv > radius * radius) continue;
                    size_t pix = static_cast<size_t>(py * W + px);
                    if (z >= zbuf[pix]) continue;  // ties keep the earlier splat
                    zbuf[pix] = z;
                    for (int ch = 0; ch < 3; ++ch)
                        img.data[static_cast<size_t>(ch * H * W) + pix] =
                            cloud.colors[i][static_cast<size_t>(ch)];
                }
        }
    }
    if (depth_out) *depth_out = std::move(zbuf);
    return img;
}

namespace {

std::vector<ColoredCloud> scene_clouds(const pipe::SceneHands& hands,
                                       const pipe::RigSet& rigs) {
    std::vector<ColoredCloud> clouds;
    clouds.push_back(body_cloud(rigs.body, hands.body.vertices));
    clouds.push_back(hand_cloud(rigs.left, hands.left.vertices, true));
    clouds.push_back(hand_cloud(rigs.right, hands.right.vertices, false));
    return clouds;
}

}  // namespace

Tensor render_scene(const SceneSpec& scene, const pipe::RigSet& rigs) {
    auto hands = pipe::extract_hands(scene.state, rigs);
    return rasterize(scene_clouds(hands, rigs), scene.camera);
}

pipe::SceneCamera canonical_scene_camera(const pipe::RigSet& rigs,
                                         const kin::PoseShapeState& state,
                                         const kin::CameraIntrinsics& intr,
                                         double distance) {
    auto hands = pipe::extract_hands(state, rigs);
    auto clouds = scene_clouds(hands, rigs);

    Eigen::Vector3d c = Eigen::Vector3d::Zero();
    int64_t n = 0;
    for (const auto& cl : clouds)
        for (int64_t i = 0; i < cl.vertices.shape[0]; ++i, ++n)
            c += Eigen::Vector3d(cl.vertices.at(i * 3), cl.vertices.at(i * 3 + 1),
                                 cl.vertices.at(i * 3 + 2));
    c /= static_cast<double>(std::max<int64_t>(n, 1));

    pipe::SceneCamera probe{intr, pipe::look_at_camera(c, distance, 0.0, 0.0)};
    std::vector<double> depth;
    Tensor img = rasterize(clouds, probe, &depth);

    double su = 0.0, sv = 0.0, sz = 0.0;
    int64_t covered = 0;
    for (int64_t y = 0; y < intr.height; ++y)
        for (int64_t x = 0; x < intr.width; ++x) {
            double z = depth[static_cast<size_t>(y * intr.width + x)];
            if (!std::isfinite(z)) continue;
            su += static_cast<double>(x) + 0.5;
            sv += static_cast<double>(y) + 0.5;
            sz += z;
            ++covered;
        }
    if (covered == 0) return probe;
    su /= covered, sv /= covered, sz /= covered;

    // unproject the pixel-mass centroid at the mean depth and aim at it
    Eigen::Vector3d cam_dir((su - intr.cx) / intr.fx * sz, (sv - intr.cy) / intr.fy * sz,
                            sz);
    Eigen::Vector3d cam_pos =
        -probe.extrinsics.rotation.transpose() * probe.extrinsics.translation;
    Eigen::Vector3d target = cam_pos + probe.extrinsics.rotation.transpose() * cam_dir;
    return {intr, pipe::look_at_camera(target, distance, 0.0, 0.0)};
}

std::vector<uint8_t> hand_mask(const Tensor& image) {
    if (image.shape.size() != 3 || image.shape[0] != 3)
        throw DimensionError("hand_mask: want {3,H,W}");
    size_t hw = static_cast<size_t>(image.shape[1] * image.shape[2]);
    std::vector<uint8_t> mask(hw, 0);
    for (size_t i = 0; i < hw; ++i) mask[i] = image.data[i] >= kHandBandLow ? 1 : 0;
    return mask;
}

// ---- records ----

namespace {

Tensor joints2d_tensor(const ad::Arr& joints3d, const pipe::SceneCamera& cam) {
    auto pts = pipe::arr_rows_to_points(joints3d);
    std::vector<Eigen::Vector3d> in_cam;
    in_cam.reserve(pts.size());
    for (const auto& p : pts) in_cam.push_back(cam.extrinsics.to_camera(p));
    auto uv = kin::project_pinhole(cam.intrinsics, in_cam);
    Tensor t({static_cast<int64_t>(uv.size()), 2});
    for (size_t i = 0; i < uv.size(); ++i) {
        t.data[i * 2 + 0] = static_cast<float>(uv[i].x());
        t.data[i * 2 + 1] = static_cast<float>(uv[i].y());
    }
    return t;
}

Tensor rot6d_tensor(const std::vector<Eigen::Matrix3d>& rotations) {
    // articulated joints only: skip the wrist root
    int64_t n = static_cast<int64_t>(rotations.size()) - 1;
    Tensor t({n, 6});
    for (int64_t j = 0; j < n; ++j) {
        auto r6 = enc::rotmat_to_6d(rotations[static_cast<size_t>(j + 1)]);
        for (int64_t k = 0; k < 6; ++k)
            t.data[static_cast<size_t>(j * 6 + k)] = static_cast<float>(r6[static_cast<size_t>(k)]);
    }
    return t;
}

Tensor state_tensor(const kin::PoseShapeState& st) {
    auto flat = st.flatten();
    Tensor t({static_cast<int64_t>(flat.size())});
    for (size_t i = 0; i < flat.size(); ++i) t.data[i] = static_cast<float>(flat[i]);
    return t;
}

}  // namespace

DatasetRecord make_record(const pipe::RigSet& rigs, const DataConfig& cfg,
                          uint64_t master_seed, int64_t index) {
    // per-record stream: splitmix over (master, index); a behind-camera
    // projection (possible for the <10% off-frame joints) advances the
    // sub-stream and retries, still a pure function of (master, index)
    uint64_t base =
        master_seed ^ (static_cast<uint64_t>(index) + 1) * 0x9E3779B97F4A7C15ULL;
    uint64_t record_seed = splitmix64(base);

    for (int64_t attempt = 0;; ++attempt) {
        uint64_t s = record_seed + static_cast<uint64_t>(attempt);
        try {
            SceneSpec scene = sample_scene(rigs, cfg, splitmix64(s));
            auto hands = pipe::extract_hands(scene.state, rigs);

            DatasetRecord rec;
            rec.caption = scene.caption;
            rec.category = static_cast<int64_t>(scene.category);
            rec.side = static_cast<int64_t>(scene.side);
            rec.record_seed = record_seed + static_cast<uint64_t>(attempt);
            rec.state = state_tensor(scene.state);
            rec.image = render_scene(scene, rigs);

            Rng flag_rng(splitmix64(s));
            rec.left.reliable = flag_rng.uniform() >= cfg.unreliable_fraction;
            rec.right.reliable = flag_rng.uniform() >= cfg.unreliable_fraction;
            if (rec.left.reliable) {
                rec.left.joints2d = joints2d_tensor(hands.left.joints3d, scene.camera);
                rec.left.rot6d = rot6d_tensor(hands.left.rotations);
            }
            if (rec.right.reliable) {
                rec.right.joints2d = joints2d_tensor(hands.right.joints3d, scene.camera);
                rec.right.rot6d = rot6d_tensor(hands.right.rotations);
            }
            return rec;
        } catch (const kin::BehindCameraError&) {
            if (attempt >= 8) throw;
        } catch (const pipe::VisibilityError&) {
            if (attempt >= 8) throw;
        }
    }
}

std::vector<DatasetRecord> make_dataset(const pipe::RigSet& rigs, const DataConfig& cfg,
                                        uint64_t master_seed, int64_t count) {
    std::vector<DatasetRecord> out;
    out.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i)
        out.push_back(make_record(rigs, cfg, master_seed, i));
    return out;
}

// ---- container ----

uint64_t config_hash(const DataConfig& cfg) {
    std::ostringstream os;
    os.precision(17);
    for (double w : cfg.category_weights) os << w << "|";
    os << cfg.intrinsics.fx << "|" << cfg.intrinsics.fy << "|" << cfg.intrinsics.cx
       << "|" << cfg.intrinsics.cy << "|" << cfg.intrinsics.width << "|"
       << cfg.intrinsics.height << "|" << cfg.camera_ranges.distance_min << "|"
       << cfg.camera_ranges.distance_max << "|" << cfg.camera_ranges.azimuth_min << "|"
       << cfg.camera_ranges.azimuth_max << "|" << cfg.camera_ranges.elevation_min << "|"
       << cfg.camera_ranges.elevation_max << "|" << cfg.camera_ranges.min_fraction
       << "|" << cfg.camera_ranges.frame_margin << "|" << cfg.unreliable_fraction;
    return fnv1a64(os.str());
}

namespace {

constexpr int64_t kDatasetFormatVersion = 1;

std::string shard_name(int64_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "shard_%05lld.bin", static_cast<long long>(i));
    return buf;
}

}  // namespace

DatasetWriter::DatasetWriter(std::string dir, uint64_t cfg_hash, int64_t records_per_shard)
    : dir_(std::move(dir)), config_hash_(cfg_hash), per_shard_(records_per_shard) {
    if (per_shard_ < 1) throw SchemaError("dataset writer: records_per_shard >= 1");
    fs::create_directories(dir_);
}

void DatasetWriter::add(DatasetRecord record) {
    if (finished_) throw SchemaError("dataset writer: add after finish");
    meta_.push_back({record.caption, record.category, record.side, record.record_seed,
                     record.left.reliable, record.right.reliable});
    pending_.push_back(std::move(record));
    ++count_;
    if (static_cast<int64_t>(pending_.size()) >= per_shard_) flush_shard();
}

void DatasetWriter::flush_shard() {
    if (pending_.empty()) return;
    TensorStore store;
    for (size_t i = 0; i < pending_.size(); ++i) {
        const auto& r = pending_[i];
        std::string p = "r" + std::to_string(i) + ".";
        store.put(p + "state", r.state);
        store.put(p + "image", r.image);
        if (r.left.reliable) {
            store.put(p + "l.joints2d", r.left.joints2d);
            store.put(p + "l.rot6d", r.left.rot6d);
        }
        if (r.right.reliable) {
            store.put(p + "r.joints2d", r.right.joints2d);
            store.put(p + "r.rot6d", r.right.rot6d);
        }
    }
    std::string name = shard_name(static_cast<int64_t>(shard_files_.size()));
    store.save((fs::path(dir_) / name).string());
    shard_files_.push_back(name);
    shard_counts_.push_back(static_cast<int64_t>(pending_.size()));
    pending_.clear();
}

void DatasetWriter::finish() {
    if (finished_) return;
    flush_shard();
    json manifest;
    manifest["format_version"] = kDatasetFormatVersion;
    manifest["count"] = count_;
    manifest["config_hash"] = std::to_string(config_hash_);
    manifest["shards"] = json::array();
    for (size_t i = 0; i < shard_files_.size(); ++i)
        manifest["shards"].push_back(
            {{"file", shard_files_[i]}, {"count", shard_counts_[i]}});
    manifest["records"] = json::array();
    for (const auto& m : meta_)
        manifest["records"].push_back({{"caption", m.caption},
                                       {"category", m.category},
                                       {"side", m.side},
                                       {"seed", std::to_string(m.record_seed)},
                                       {"left_reliable", m.left_reliable},
                                       {"right_reliable", m.right_reliable}});
    std::ofstream f(fs::path(dir_) / "manifest.json");
    f << manifest.dump(1) << "\n";
    if (!f) throw SchemaError("dataset writer: manifest write failed");
    finished_ = true;
}

void write_dataset(const std::vector<DatasetRecord>& records, const std::string& dir,
                   uint64_t cfg_hash, int64_t records_per_shard) {
    DatasetWriter w(dir, cfg_hash, records_per_shard);
    for (const auto& r : records) w.add(r);
    w.finish();
}

DatasetManifest read_manifest(const std::string& dir) {
    std::ifstream f(fs::path(dir) / "manifest.json");
    if (!f) throw SchemaError("dataset: missing manifest in " + dir);
    json m;
    try {
        f >> m;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("dataset: bad manifest: ") + e.what());
    }
    DatasetManifest out;
    out.format_version = m.at("format_version").get<int64_t>();
    if (out.format_version != kDatasetFormatVersion)
        throw SchemaError("dataset: format version " + std::to_string(out.format_version) +
                          ", expected " + std::to_string(kDatasetFormatVersion));
    out.count = m.at("count").get<int64_t>();
    out.config_hash = std::stoull(m.at("config_hash").get<std::string>());
    int64_t total = 0;
    for (const auto& s : m.at("shards")) {
        out.shard_files.push_back(s.at("file").get<std::string>());
        out.shard_counts.push_back(s.at("count").get<int64_t>());
        total += out.shard_counts.back();
    }
    if (total != out.count ||
        static_cast<int64_t>(m.at("records").size()) != out.count)
        throw SchemaError("dataset: manifest record counts disagree");
    return out;
}

std::vector<DatasetRecord> read_shard(const std::string& dir, int64_t shard_index) {
    auto manifest = read_manifest(dir);
    if (shard_index < 0 || shard_index >= static_cast<int64_t>(manifest.shard_files.size()))
        throw SchemaError("dataset: shard index out of range");

    std::ifstream f(fs::path(dir) / "manifest.json");
    json m;
    f >> m;
    int64_t first = 0;
    for (int64_t i = 0; i < shard_index; ++i) first += manifest.shard_counts[static_cast<size_t>(i)];
    int64_t n = manifest.shard_counts[static_cast<size_t>(shard_index)];

    auto store = TensorStore::load(
        (fs::path(dir) / manifest.shard_files[static_cast<size_t>(shard_index)]).string());
    std::vector<DatasetRecord> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const auto& meta = m.at("records").at(static_cast<size_t>(first + i));
        DatasetRecord r;
        r.caption = meta.at("caption").get<std::string>();
        r.category = meta.at("category").get<int64_t>();
        r.side = meta.at("side").get<int64_t>();
        r.record_seed = std::stoull(meta.at("seed").get<std::string>());
        r.left.reliable = meta.at("left_reliable").get<bool>();
        r.right.reliable = meta.at("right_reliable").get<bool>();
        std::string p = "r" + std::to_string(i) + ".";
        r.state = store.get(p + "state");
        r.image = store.get(p + "image");
        if (r.left.reliable) {
            r.left.joints2d = store.get(p + "l.joints2d");
            r.left.rot6d = store.get(p + "l.rot6d");
        }
        if (r.right.reliable) {
            r.right.joints2d = store.get(p + "r.joints2d");
            r.right.rot6d = store.get(p + "r.rot6d");
        }
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<DatasetRecord> read_dataset(const std::string& dir) {
    auto manifest = read_manifest(dir);
    std::vector<DatasetRecord> out;
    out.reserve(static_cast<size_t>(manifest.count));
    for (int64_t s = 0; s < static_cast<int64_t>(manifest.shard_files.size()); ++s) {
        auto part = read_shard(dir, s);
        for (auto& r : part) out.push_back(std::move(r));
    }
    return out;
}

bool usable_for_state_training(const DatasetRecord& r) {
    return r.left.reliable && r.right.reliable;
}

}  // namespace hgen::data
