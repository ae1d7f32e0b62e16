#pragma once

// Synthetic paired-corpus factory: procedurally sampled poses with templated
// captions, a deterministic splat rasterizer whose hand pixels live in a
// reserved shading band, and a sharded on-disk container with a JSON manifest.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "hgen/pipeline.hpp"
#include "hgen/tensor.hpp"

namespace hgen::data {

enum class PoseCategory : int64_t {
    kOpenPalm = 0,
    kFist,
    kPoint,
    kWave,
    kHoldSphere,
};
constexpr int64_t kCategoryCount = 5;

enum class HandSide : int64_t { kLeft = 0, kRight, kBoth };

const std::string& category_name(PoseCategory c);
const std::string& side_name(HandSide s);

// Pure function of (category, side); every word is in the standard vocabulary.
std::string make_caption(PoseCategory category, HandSide side);

struct SceneSpec {
    PoseCategory category = PoseCategory::kOpenPalm;
    HandSide side = HandSide::kBoth;
    kin::PoseShapeState state;
    pipe::SceneCamera camera;
    std::string caption;
};

struct DataConfig {
    std::array<double, kCategoryCount> category_weights{1, 1, 1, 1, 1};
    pipe::CameraRanges camera_ranges;
    kin::CameraIntrinsics intrinsics = pipe::default_intrinsics();
    int64_t camera_max_tries = 64;
    double unreliable_fraction = 0.10;  // per-hand flag flips false this often
    int64_t records_per_shard = 512;

    void validate() const;
};

// 45-dim hand pose inside the category's per-joint limit table (flexion on
// the x component of each articulated joint, small noise elsewhere).
std::array<double, 45> sample_hand_pose(PoseCategory category, Rng& rng);
// Flexion range of the table, for range assertions.
void category_flexion_range(PoseCategory category, int64_t finger, double* lo, double* hi);

// Deterministic in (rigs, cfg, seed); the camera is rejection-sampled against
// the posed hand joints.
SceneSpec sample_scene(const pipe::RigSet& rigs, const DataConfig& cfg, uint64_t seed);

// ---- rendering ----
// A point cloud with one RGB color per vertex, world frame.
struct ColoredCloud {
    ad::Arr vertices;  // {N,3}
    std::vector<std::array<float, 3>> colors;
};

// Shading: background black; body red channel 0.15; hands occupy the
// reserved band red >= 0.5 (left 0.70, right 0.95); green encodes joint
// identity within each part.
ColoredCloud body_cloud(const kin::RigModel& rig, const ad::Arr& vertices);
ColoredCloud hand_cloud(const kin::RigModel& rig, const ad::Arr& vertices, bool left);

// Z-buffered disk splats, deterministic in inputs; throws on behind-camera
// geometry. Output {3,H,W} float32 in [0,1]. depth_out, when given, receives
// the H*W z-buffer (+inf on background).
Tensor rasterize(const std::vector<ColoredCloud>& clouds, const pipe::SceneCamera& cam,
                 std::vector<double>* depth_out = nullptr);

Tensor render_scene(const SceneSpec& scene, const pipe::RigSet& rigs);

// Deterministic front-on camera whose principal point hits the silhouette
// centroid of the posed figure: aims at the vertex centroid, renders once,
// and re-aims at the unprojected pixel-mass centroid.
pipe::SceneCamera canonical_scene_camera(const pipe::RigSet& rigs,
                                         const kin::PoseShapeState& state,
                                         const kin::CameraIntrinsics& intr,
                                         double distance = 3.0);

// True where the pixel's red channel sits in the reserved hand band.
std::vector<uint8_t> hand_mask(const Tensor& image);

// ---- records / container ----
struct HandRecord {
    bool reliable = true;
    Tensor joints2d;  // {21,2} pixels; empty when !reliable
    Tensor rot6d;     // {15,6}; empty when !reliable
};

struct DatasetRecord {
    std::string caption;
    int64_t category = 0;
    int64_t side = 0;
    uint64_t record_seed = 0;
    Tensor state;  // {172} flattened pose/shape
    Tensor image;  // {3,H,W}
    HandRecord left;
    HandRecord right;
};

// Builds record i of a corpus: scene from a splitmix-derived per-record seed,
// render, projected hand joints, per-joint 6D rotations, reliability flags.
DatasetRecord make_record(const pipe::RigSet& rigs, const DataConfig& cfg,
                          uint64_t master_seed, int64_t index);

std::vector<DatasetRecord> make_dataset(const pipe::RigSet& rigs, const DataConfig& cfg,
                                        uint64_t master_seed, int64_t count);

// Sharded writer so corpus generation streams at O(shard) memory.
class DatasetWriter {
  public:
    DatasetWriter(std::string dir, uint64_t config_hash, int64_t records_per_shard);
    void add(DatasetRecord record);
    void finish();  // writes the trailing shard + manifest
    int64_t count() const { return count_; }

    struct Meta {
        std::string caption;
        int64_t category = 0;
        int64_t side = 0;
        uint64_t record_seed = 0;
        bool left_reliable = true;
        bool right_reliable = true;
    };

  private:
    void flush_shard();

    std::string dir_;
    uint64_t config_hash_ = 0;
    int64_t per_shard_ = 512;
    int64_t count_ = 0;
    std::vector<DatasetRecord> pending_;
    std::vector<std::string> shard_files_;
    std::vector<int64_t> shard_counts_;
    std::vector<Meta> meta_;  // serialized into the manifest
    bool finished_ = false;
};

uint64_t config_hash(const DataConfig& cfg);

void write_dataset(const std::vector<DatasetRecord>& records, const std::string& dir,
                   uint64_t cfg_hash, int64_t records_per_shard = 512);

struct DatasetManifest {
    int64_t count = 0;
    uint64_t config_hash = 0;
    int64_t format_version = 0;
    std::vector<std::string> shard_files;
    std::vector<int64_t> shard_counts;
};

DatasetManifest read_manifest(const std::string& dir);
// Shard i of the corpus, metadata merged back from the manifest.
std::vector<DatasetRecord> read_shard(const std::string& dir, int64_t shard_index);
std::vector<DatasetRecord> read_dataset(const std::string& dir);

// Loader gating: state-space training keeps only fully reliable records;
// image-space training drops the conditioning of unreliable hands.
bool usable_for_state_training(const DatasetRecord& r);

}  // namespace hgen::data
