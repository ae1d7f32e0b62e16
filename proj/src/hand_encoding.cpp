#include "hgen/hand_encoding.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

namespace hgen::enc {

void EncoderConfig::validate() const {
    if (n_bins < 2) throw SchemaError("encoder config: n_bins must be >= 2");
    if (bps_count < 1) throw SchemaError("encoder config: bps_count must be >= 1");
    if (bps_radius <= 0) throw SchemaError("encoder config: bps_radius must be positive");
    if (embed_dim <= 0 || max_text_len <= 0 || joints_per_hand <= 0 ||
        rot_joints_per_hand <= 0 || mlp_hidden <= 0)
        throw SchemaError("encoder config: non-positive dimension");
    if (canonical_hand_scale <= 0)
        throw SchemaError("encoder config: canonical_hand_scale must be positive");
}

int64_t quantize_scalar(double coord, double extent, int64_t n_bins) {
    double norm = coord / extent;
    double upper = 1.0 - std::numeric_limits<double>::epsilon();
    norm = std::clamp(norm, 0.0, upper);
    return static_cast<int64_t>(std::floor(norm * static_cast<double>(n_bins)));
}

SpatialTokenSeq quantize_coords(const std::vector<Eigen::Vector2d>& joints2d,
                                int64_t width, int64_t height, int64_t n_bins) {
    if (n_bins < 2) throw SchemaError("quantize_coords: n_bins must be >= 2");
    SpatialTokenSeq out;
    out.tokens.reserve(joints2d.size() * 2);
    out.clamped.reserve(joints2d.size() * 2);
    for (const auto& j : joints2d) {
        out.tokens.push_back(quantize_scalar(j.x(), static_cast<double>(width), n_bins));
        out.clamped.push_back(j.x() < 0.0 || j.x() >= static_cast<double>(width));
        out.tokens.push_back(quantize_scalar(j.y(), static_cast<double>(height), n_bins));
        out.clamped.push_back(j.y() < 0.0 || j.y() >= static_cast<double>(height));
    }
    return out;
}

ad::Arr bps_basis(uint64_t seed, int64_t count, double radius) {
    if (count < 1) throw SchemaError("bps_basis: count must be >= 1");
    Rng rng(splitmix64(seed));
    ad::Arr basis({count, 3});
    for (int64_t i = 0; i < count; ++i) {
        Eigen::Vector3d dir(rng.gaussian(), rng.gaussian(), rng.gaussian());
        double n = dir.norm();
        if (n < 1e-12) dir = Eigen::Vector3d::UnitX(), n = 1.0;
        double r = radius * std::cbrt(rng.uniform());
        dir *= r / n;
        for (int c = 0; c < 3; ++c) basis.v[static_cast<size_t>(i * 3 + c)] = dir[c];
    }
    return basis;
}

BpsFeature bps_encode(const ad::Arr& vertices_canonical, const ad::Arr& basis) {
    if (vertices_canonical.shape.size() != 2 || vertices_canonical.shape[1] != 3 ||
        vertices_canonical.shape[0] < 1)
        throw SchemaError("bps_encode: empty or malformed vertex cloud");
    int64_t V = vertices_canonical.shape[0], B = basis.shape[0];
    BpsFeature f;
    f.distances.resize(static_cast<size_t>(B));
    for (int64_t i = 0; i < B; ++i) {
        Eigen::Vector3d b(basis.v[static_cast<size_t>(i * 3)],
                          basis.v[static_cast<size_t>(i * 3 + 1)],
                          basis.v[static_cast<size_t>(i * 3 + 2)]);
        double best = std::numeric_limits<double>::infinity();
        for (int64_t v = 0; v < V; ++v) {
            Eigen::Vector3d p(vertices_canonical.v[static_cast<size_t>(v * 3)],
                              vertices_canonical.v[static_cast<size_t>(v * 3 + 1)],
                              vertices_canonical.v[static_cast<size_t>(v * 3 + 2)]);
            best = std::min(best, (p - b).norm());
        }
        f.distances[static_cast<size_t>(i)] = best;
    }
    return f;
}

ad::Arr normalize_to_wrist_frame(const ad::Arr& vertices, const Eigen::Vector3d& wrist_pos,
                                 const Eigen::Matrix3d& wrist_rot, double scale) {
    int64_t V = vertices.shape[0];
    ad::Arr out({V, 3});
    Eigen::Matrix3d Rt = wrist_rot.transpose();
    for (int64_t i = 0; i < V; ++i) {
        Eigen::Vector3d p(vertices.v[static_cast<size_t>(i * 3)],
                          vertices.v[static_cast<size_t>(i * 3 + 1)],
                          vertices.v[static_cast<size_t>(i * 3 + 2)]);
        Eigen::Vector3d q = Rt * (p - wrist_pos) / scale;
        for (int c = 0; c < 3; ++c) out.v[static_cast<size_t>(i * 3 + c)] = q[c];
    }
    return out;
}

Rot6d rotmat_to_6d(const Eigen::Matrix3d& R, double ortho_tol) {
    if ((R * R.transpose() - Eigen::Matrix3d::Identity()).norm() > ortho_tol)
        throw NumericError("rotmat_to_6d: input is not orthonormal");
    return {R(0, 0), R(1, 0), R(2, 0), R(0, 1), R(1, 1), R(2, 1)};
}

Eigen::Matrix3d sixd_to_rotmat(const Rot6d& r) {
    Eigen::Vector3d a(r[0], r[1], r[2]), b(r[3], r[4], r[5]);
    double na = a.norm();
    if (na < 1e-8) throw NumericError("sixd_to_rotmat: degenerate first column");
    Eigen::Vector3d c0 = a / na;
    Eigen::Vector3d b_perp = b - b.dot(c0) * c0;
    double nb = b_perp.norm();
    if (nb < 1e-8) throw NumericError("sixd_to_rotmat: columns nearly parallel");
    Eigen::Vector3d c1 = b_perp / nb;
    Eigen::Matrix3d R;
    R.col(0) = c0;
    R.col(1) = c1;
    R.col(2) = c0.cross(c1);
    return R;
}

TextVocab::TextVocab(std::vector<std::string> words) : words_(std::move(words)) {
    for (size_t i = 0; i < words_.size(); ++i)
        index_[words_[i]] = static_cast<int64_t>(i);
}

const TextVocab& TextVocab::standard() {
    static const TextVocab vocab({
        "<pad>", "<unk>",
        // caption template skeleton
        "a", "an", "the", "person", "photo", "of", "with", "and", "empty",
        "hand", "hands", "both", "left", "right", "its",
        // pose categories
        "open", "palm", "fist", "making", "showing", "pointing", "waving",
        "holding", "sphere", "ball", "finger", "raised", "closed",
    });
    return vocab;
}

int64_t TextVocab::id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? unk_id() : it->second;
}

std::vector<int64_t> TextVocab::tokenize(const std::string& text, int64_t max_len) const {
    std::vector<int64_t> out;
    std::string word;
    auto flush = [&] {
        if (!word.empty() && static_cast<int64_t>(out.size()) < max_len)
            out.push_back(id(word));
        word.clear();
    };
    for (char ch : text) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isalnum(c))
            word.push_back(static_cast<char>(std::tolower(c)));
        else
            flush();
    }
    flush();
    out.resize(static_cast<size_t>(max_len), pad_id());
    return out;
}

void init_encoder_params(ad::ParamBundle& params, const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    int64_t D = cfg.embed_dim;
    params.add("enc.text_table",
               ad::init_gaussian({TextVocab::standard().size(), D}, 0.02, rng));
    params.add("enc.text_pos", ad::init_gaussian({cfg.max_text_len, D}, 0.02, rng));
    params.add("enc.pos_table", ad::init_gaussian({cfg.n_bins, D}, 0.02, rng));
    params.add("enc.placeholder_vertices", ad::init_gaussian({2, D}, 0.02, rng));
    params.add("enc.placeholder_rotations", ad::init_gaussian({2, D}, 0.02, rng));
    // three-layer MLPs for vertex (BPS) and rotation features
    nn::MlpSpec fmh{{cfg.bps_count, cfg.mlp_hidden, cfg.mlp_hidden, D},
                    {nn::Activation::kRelu, nn::Activation::kRelu}};
    nn::init_mlp(params, "enc.f_mh.", fmh, rng);
    nn::MlpSpec fth{{cfg.rot_joints_per_hand * 6, cfg.mlp_hidden, cfg.mlp_hidden, D},
                    {nn::Activation::kRelu, nn::Activation::kRelu}};
    nn::init_mlp(params, "enc.f_th.", fth, rng);
}

int64_t expected_sequence_length(const EncoderConfig& cfg, bool left_visible,
                                 bool right_visible) {
    int64_t L = cfg.max_text_len;
    if (left_visible) L += cfg.joints_per_hand * 2;
    if (right_visible) L += cfg.joints_per_hand * 2;
    return L + 4;  // vertex + rotation slots for both hands
}

JointEmbeddingSeq encode_hand_condition(const std::vector<int64_t>& text_tokens,
                                        const HandConditioning& cond,
                                        const ad::ParamBundle& params,
                                        const EncoderConfig& cfg) {
    cfg.validate();
    if (static_cast<int64_t>(text_tokens.size()) != cfg.max_text_len)
        throw DimensionError("encode_hand_condition: text must be padded to max_text_len");
    int64_t D = cfg.embed_dim;

    std::vector<ad::Var> parts;
    std::vector<Segment> segs;

    // text: token embedding + learned position embedding
    auto text_emb = ad::add(ad::embedding(params.get("enc.text_table"), text_tokens),
                            params.get("enc.text_pos"));
    parts.push_back(text_emb);
    segs.insert(segs.end(), static_cast<size_t>(cfg.max_text_len), Segment::kText);

    // spatial joint tokens for visible hands, left then right
    for (const HandInput* hand : {&cond.left, &cond.right}) {
        if (!hand->visible) continue;
        if (static_cast<int64_t>(hand->joints2d.size()) != cfg.joints_per_hand)
            throw DimensionError("encode_hand_condition: joints2d count mismatch");
        auto seq = quantize_coords(hand->joints2d, cond.camera.width, cond.camera.height,
                                   cfg.n_bins);
        for (int64_t t : seq.tokens)
            if (t < 0 || t >= cfg.n_bins)
                throw std::out_of_range("encode_hand_condition: spatial token out of range");
        parts.push_back(ad::embedding(params.get("enc.pos_table"), seq.tokens));
        segs.insert(segs.end(), seq.tokens.size(), Segment::kJoint2d);
    }

    // one vertex token per hand (BPS through f_Mh), placeholder when invisible
    auto basis = bps_basis(cfg.bps_seed, cfg.bps_count, cfg.bps_radius);
    nn::MlpSpec fmh{{cfg.bps_count, cfg.mlp_hidden, cfg.mlp_hidden, D},
                    {nn::Activation::kRelu, nn::Activation::kRelu}};
    int64_t hand_index = 0;
    for (const HandInput* hand : {&cond.left, &cond.right}) {
        if (hand->visible) {
            auto feat = bps_encode(hand->vertices_canonical, basis);
            ad::Arr fin({1, cfg.bps_count}, feat.distances);
            parts.push_back(nn::mlp_forward(fmh, params, "enc.f_mh.", ad::constant(fin)));
        } else {
            parts.push_back(
                ad::embedding(params.get("enc.placeholder_vertices"), {hand_index}));
        }
        segs.push_back(Segment::kVertices);
        ++hand_index;
    }

    // one rotation token per hand (flattened 6D through f_theta_h)
    nn::MlpSpec fth{{cfg.rot_joints_per_hand * 6, cfg.mlp_hidden, cfg.mlp_hidden, D},
                    {nn::Activation::kRelu, nn::Activation::kRelu}};
    hand_index = 0;
    for (const HandInput* hand : {&cond.left, &cond.right}) {
        if (hand->visible) {
            if (static_cast<int64_t>(hand->rotations6d.size()) != cfg.rot_joints_per_hand)
                throw DimensionError("encode_hand_condition: rotation joint count mismatch");
            ad::Arr fin({1, cfg.rot_joints_per_hand * 6});
            for (size_t j = 0; j < hand->rotations6d.size(); ++j)
                for (int c = 0; c < 6; ++c)
                    fin.v[j * 6 + static_cast<size_t>(c)] = hand->rotations6d[j][static_cast<size_t>(c)];
            parts.push_back(nn::mlp_forward(fth, params, "enc.f_th.", ad::constant(fin)));
        } else {
            parts.push_back(
                ad::embedding(params.get("enc.placeholder_rotations"), {hand_index}));
        }
        segs.push_back(Segment::kRotations);
        ++hand_index;
    }

    JointEmbeddingSeq out;
    out.embeddings = ad::concat(parts, 0);
    out.segment_ids = std::move(segs);
    if (static_cast<int64_t>(out.segment_ids.size()) !=
        expected_sequence_length(cfg, cond.left.visible, cond.right.visible))
        throw DimensionError("encode_hand_condition: layout arithmetic violated");
    return out;
}

JointEmbeddingSeq encode_null_condition(const ad::ParamBundle& params,
                                        const EncoderConfig& cfg) {
    std::vector<int64_t> pad(static_cast<size_t>(cfg.max_text_len),
                             TextVocab::standard().pad_id());
    HandConditioning cond;  // both invisible
    return encode_hand_condition(pad, cond, params, cfg);
}

}  // namespace hgen::enc
