#pragma once

// Text+Hand conditioning encoder: spatial-token quantization of 2D joints,
// basis-point-set vertex features, 6D joint rotations, and a toy trainable
// text embedder, concatenated into one embedding sequence.

#include <Eigen/Dense>
#include <array>
#include <map>
#include <string>
#include <vector>

#include "hgen/ad.hpp"
#include "hgen/kinematics.hpp"
#include "hgen/nn.hpp"
#include "hgen/rng.hpp"

namespace hgen::enc {

struct EncoderConfig {
    int64_t n_bins = 1000;
    int64_t bps_count = 256;
    uint64_t bps_seed = 20240601;
    double bps_radius = 1.0;
    double canonical_hand_scale = 0.2;  // meters; divides wrist-centered clouds
    int64_t embed_dim = 64;
    int64_t max_text_len = 77;
    int64_t joints_per_hand = 21;       // 2D keypoints per hand
    int64_t rot_joints_per_hand = 15;   // articulated joints carrying rotations
    int64_t mlp_hidden = 128;

    void validate() const;
};

struct SpatialTokenSeq {
    std::vector<int64_t> tokens;          // (u,v) per joint, hands concatenated
    std::vector<bool> clamped;            // true where the joint was out of frame
};

// token = floor(clamp(coord/extent, 0, 1-ulp) * n_bins)
SpatialTokenSeq quantize_coords(const std::vector<Eigen::Vector2d>& joints2d,
                                int64_t width, int64_t height, int64_t n_bins);
int64_t quantize_scalar(double coord, double extent, int64_t n_bins);

// Uniform samples in the ball of given radius; deterministic in seed. {B,3}
ad::Arr bps_basis(uint64_t seed, int64_t count, double radius);

struct BpsFeature {
    std::vector<double> distances;  // nearest-vertex distance per basis point
    uint64_t basis_seed = 0;
};

// distances[i] = min_v ||vertices_canonical[v] - basis[i]||. Inputs must
// already be in the canonical wrist frame.
BpsFeature bps_encode(const ad::Arr& vertices_canonical, const ad::Arr& basis);

// wrist_rot^T * (v - wrist_pos) / canonical_hand_scale
ad::Arr normalize_to_wrist_frame(const ad::Arr& vertices, const Eigen::Vector3d& wrist_pos,
                                 const Eigen::Matrix3d& wrist_rot, double scale);

// 6D rotation representation: first two columns, column-major.
using Rot6d = std::array<double, 6>;
Rot6d rotmat_to_6d(const Eigen::Matrix3d& R, double ortho_tol = 1e-4);
Eigen::Matrix3d sixd_to_rotmat(const Rot6d& r);

// ---- toy text pipeline ----
class TextVocab {
  public:
    static const TextVocab& standard();  // closed synthetic-caption vocabulary

    int64_t size() const { return static_cast<int64_t>(words_.size()); }
    int64_t pad_id() const { return 0; }
    int64_t unk_id() const { return 1; }
    int64_t id(const std::string& word) const;
    const std::string& word(int64_t id) const { return words_[static_cast<size_t>(id)]; }

    // lowercase, strip punctuation, split on whitespace; pad/truncate.
    std::vector<int64_t> tokenize(const std::string& text, int64_t max_len) const;

    explicit TextVocab(std::vector<std::string> words);

  private:
    std::vector<std::string> words_;
    std::map<std::string, int64_t> index_;
};

// ---- joint embedding sequence ----
enum class Segment { kText, kJoint2d, kVertices, kRotations };

struct JointEmbeddingSeq {
    ad::Var embeddings;                // {L, D}
    std::vector<Segment> segment_ids;  // length L
};

struct HandInput {
    bool visible = false;
    std::vector<Eigen::Vector2d> joints2d;  // K pixel coords
    ad::Arr vertices_canonical;             // {V,3} wrist frame
    std::vector<Rot6d> rotations6d;         // per articulated joint
};

struct HandConditioning {
    HandInput left;
    HandInput right;
    kin::CameraIntrinsics camera;
};

// Trainable parameters: text/positional tables, f_Mh, f_theta_h, placeholders.
void init_encoder_params(ad::ParamBundle& params, const EncoderConfig& cfg, Rng& rng);

// Sequence layout (fixed): text | lh joint tokens | rh joint tokens |
// lh vertex token | rh vertex token | lh rotation token | rh rotation token.
// Invisible hands drop their joint tokens and contribute learned
// placeholders for the vertex/rotation slots.
JointEmbeddingSeq encode_hand_condition(const std::vector<int64_t>& text_tokens,
                                        const HandConditioning& cond,
                                        const ad::ParamBundle& params,
                                        const EncoderConfig& cfg);

// Null condition: all-pad text, both hands invisible.
JointEmbeddingSeq encode_null_condition(const ad::ParamBundle& params,
                                        const EncoderConfig& cfg);

// Expected sequence length for a given config/visibility, for layout checks.
int64_t expected_sequence_length(const EncoderConfig& cfg, bool left_visible,
                                 bool right_visible);

}  // namespace hgen::enc
