#pragma once

// Distribution metrics between image sets: Fréchet distance and kernel MMD
// over pluggable feature embeddings, whole-frame and hand-crop variants.

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "hgen/tensor.hpp"
#include "hgen/th2i.hpp"

namespace hgen::metrics {

struct FeatureStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;  // symmetric PSD (up to accumulation noise)
    int64_t sample_count = 0;

    int64_t dim() const { return mean.size(); }
    void validate() const;  // symmetry within 1e-8, eigenvalues >= -1e-8
};

// rows of features {n,d}
FeatureStats accumulate_stats(const std::vector<std::vector<double>>& features);

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}); the square root runs
// through symmetric eigendecompositions with negative eigenvalues clipped at
// -1e-6 (beyond that: NumericError).
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

// Unbiased squared-MMD with the cubic kernel k(x,y) = (x.y/d + 1)^3.
// Bit-identical feature pairs are excluded from every term (with matching
// denominators), so self-comparison is exactly zero and duplicating a
// dataset leaves the estimate unchanged; for continuous features this equals
// the standard unbiased estimator almost surely.
double kid_mmd(const std::vector<std::vector<double>>& a,
               const std::vector<std::vector<double>>& b);

// Mean/stddev of kid_mmd over `subsets` random index subsets of size
// min(n, m, subset_size); reported alongside the full estimate.
struct KidSummary {
    double full = 0.0;
    double subset_mean = 0.0;
    double subset_std = 0.0;
};
KidSummary kid_with_subsets(const std::vector<std::vector<double>>& a,
                            const std::vector<std::vector<double>>& b,
                            int64_t subsets, int64_t subset_size, uint64_t seed);

// ---- hand crops ----
struct CropConfig {
    double margin_fraction = 0.2;  // per side, of the joint extent
    int64_t min_side = 16;
    int64_t out_size = 16;  // crops resized (bilinear) to this square size
};

struct HandCrop {
    int64_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open box, clipped to image
    int64_t source_index = -1;
    Tensor pixels;  // {3,out_size,out_size}
};

// joints2d entries are {K,2} pixel tensors, one per visible hand.
std::vector<HandCrop> crop_hands(const Tensor& image,
                                 const std::vector<Tensor>& joints2d,
                                 const CropConfig& cfg, int64_t source_index = -1);

// ---- suite ----
using FeatureExtractor = std::function<std::vector<double>(const Tensor& image)>;

// Default embedder: the trained toy autoencoder's bottleneck, pooled to
// per-channel spatial mean and stddev (2*latent_channels dims).
FeatureExtractor ae_feature_extractor(const th2i::AeConfig& cfg,
                                      const ad::ParamBundle& params);

struct EvalItem {
    Tensor image;                  // {3,H,W}
    std::vector<Tensor> joints2d;  // {K,2} per visible hand; may be empty
};

struct EvalConfig {
    CropConfig crop;
    int64_t kid_subsets = 10;
    int64_t kid_subset_size = 100;
    uint64_t seed = 0;
};

struct MetricTable {
    double fid = 0.0;
    KidSummary kid;
    bool has_hand_metrics = false;  // false when either side had no crops
    double fid_h = 0.0;
    KidSummary kid_h;
    int64_t generated_count = 0;
    int64_t reference_count = 0;

    std::string to_text() const;  // columns FID | KID | FID-H | KID-H
    std::string to_json() const;
};

MetricTable eval_suite(const std::vector<EvalItem>& generated,
                       const std::vector<EvalItem>& reference,
                       const FeatureExtractor& extractor, const EvalConfig& cfg);

}  // namespace hgen::metrics
