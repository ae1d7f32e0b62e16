#include "hgen/eval_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "hgen/rng.hpp"

namespace hgen::metrics {

void FeatureStats::validate() const {
    if (mean.size() != covariance.rows() || covariance.rows() != covariance.cols())
        throw DimensionError("feature stats: mean/covariance dims disagree");
    if ((covariance - covariance.transpose()).cwiseAbs().maxCoeff() > 1e-8)
        throw NumericError("feature stats: covariance not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(covariance);
    if (es.eigenvalues().minCoeff() < -1e-8)
        throw NumericError("feature stats: covariance has negative eigenvalues");
}

FeatureStats accumulate_stats(const std::vector<std::vector<double>>& features) {
    if (features.empty()) throw DimensionError("accumulate_stats: empty feature set");
    int64_t n = static_cast<int64_t>(features.size());
    int64_t d = static_cast<int64_t>(features[0].size());
    FeatureStats out;
    out.mean = Eigen::VectorXd::Zero(d);
    out.covariance = Eigen::MatrixXd::Zero(d, d);
    out.sample_count = n;
    for (const auto& f : features) {
        if (static_cast<int64_t>(f.size()) != d)
            throw DimensionError("accumulate_stats: ragged feature rows");
        out.mean += Eigen::Map<const Eigen::VectorXd>(f.data(), d);
    }
    out.mean /= static_cast<double>(n);
    for (const auto& f : features) {
        Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(f.data(), d) - out.mean;
        out.covariance += x * x.transpose();
    }
    out.covariance /= static_cast<double>(std::max<int64_t>(n - 1, 1));
    return out;
}

namespace {

// symmetric PSD square root; eigenvalues in [-tol, 0) clamp to 0, below -tol
// is a hard failure
Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m, double tol, const char* ctx) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    if (es.info() != Eigen::Success)
        throw NumericError(std::string(ctx) + ": eigendecomposition failed");
    Eigen::VectorXd ev = es.eigenvalues();
    for (int64_t i = 0; i < ev.size(); ++i) {
        if (ev(i) < -tol)
            throw NumericError(std::string(ctx) + ": eigenvalue " + std::to_string(ev(i)) +
                               " below clipping tolerance");
        ev(i) = std::sqrt(std::max(ev(i), 0.0));
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    if (a.dim() != b.dim()) throw DimensionError("frechet_distance: dimension mismatch");
    const double tol = 1e-6;
    Eigen::MatrixXd sa = 0.5 * (a.covariance + a.covariance.transpose());
    Eigen::MatrixXd sb = 0.5 * (b.covariance + b.covariance.transpose());
    Eigen::MatrixXd ra = sqrtm_psd(sa, tol, "frechet_distance");
    // Tr((Sa Sb)^{1/2}) == Tr((Sa^{1/2} Sb Sa^{1/2})^{1/2}), and the inner
    // matrix is symmetric PSD, so the whole root stays in real arithmetic.
    Eigen::MatrixXd inner = ra * sb * ra;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::MatrixXd cross = sqrtm_psd(inner, tol, "frechet_distance");
    double d2 = (a.mean - b.mean).squaredNorm() + sa.trace() + sb.trace() -
                2.0 * cross.trace();
    return d2;
}

namespace {

double cubic_kernel(const std::vector<double>& x, const std::vector<double>& y) {
    double dot = std::inner_product(x.begin(), x.end(), y.begin(), 0.0);
    double base = dot / static_cast<double>(x.size()) + 1.0;
    return base * base * base;
}

// mean kernel over pairs from a x b, skipping bit-identical vectors (and,
// within one set, the diagonal)
double mean_kernel(const std::vector<std::vector<double>>& a,
                   const std::vector<std::vector<double>>& b, bool same_set,
                   const char* ctx) {
    double sum = 0.0;
    int64_t pairs = 0;
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t j = same_set ? i + 1 : 0; j < b.size(); ++j) {
            if (same_set && i == j) continue;
            if (a[i] == b[j]) continue;
            sum += cubic_kernel(a[i], b[j]);
            ++pairs;
        }
    if (pairs == 0)
        throw NumericError(std::string(ctx) + ": no distinct feature pairs");
    return sum / static_cast<double>(pairs);
}

}  // namespace

double kid_mmd(const std::vector<std::vector<double>>& a,
               const std::vector<std::vector<double>>& b) {
    if (a.size() < 2 || b.size() < 2)
        throw DimensionError("kid_mmd: need at least 2 samples per side");
    if (a[0].size() != b[0].size()) throw DimensionError("kid_mmd: dimension mismatch");
    bool identical = a == b;
    if (identical) return 0.0;  // degenerate self-comparison
    double kxx = mean_kernel(a, a, true, "kid_mmd");
    double kyy = mean_kernel(b, b, true, "kid_mmd");
    double kxy = mean_kernel(a, b, false, "kid_mmd");
    return kxx + kyy - 2.0 * kxy;
}

KidSummary kid_with_subsets(const std::vector<std::vector<double>>& a,
                            const std::vector<std::vector<double>>& b, int64_t subsets,
                            int64_t subset_size, uint64_t seed) {
    KidSummary out;
    out.full = kid_mmd(a, b);
    int64_t sz = std::min<int64_t>({static_cast<int64_t>(a.size()),
                                    static_cast<int64_t>(b.size()), subset_size});
    if (subsets < 1 || sz < 2) {
        out.subset_mean = out.full;
        out.subset_std = 0.0;
        return out;
    }
    Rng rng = Rng::stream(seed, "kid-subsets");
    std::vector<double> vals;
    for (int64_t s = 0; s < subsets; ++s) {
        // without replacement so subsets never collapse to one repeated item
        auto pick = [&](const std::vector<std::vector<double>>& src) {
            std::vector<int64_t> idx(src.size());
            std::iota(idx.begin(), idx.end(), 0);
            for (int64_t i = 0; i < sz; ++i)
                std::swap(idx[static_cast<size_t>(i)],
                          idx[static_cast<size_t>(rng.uniform_int(
                              i, static_cast<int64_t>(src.size()) - 1))]);
            std::vector<std::vector<double>> out_set;
            for (int64_t i = 0; i < sz; ++i)
                out_set.push_back(src[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
            return out_set;
        };
        vals.push_back(kid_mmd(pick(a), pick(b)));
    }
    double mean = std::accumulate(vals.begin(), vals.end(), 0.0) /
                  static_cast<double>(vals.size());
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    out.subset_mean = mean;
    out.subset_std = std::sqrt(var / static_cast<double>(vals.size()));
    return out;
}

// ---- crops ----

namespace {

double bilinear(const Tensor& img, int ch, double y, double x) {
    int64_t H = img.shape[1], W = img.shape[2];
    double cx = std::clamp(x, 0.0, static_cast<double>(W - 1));
    double cy = std::clamp(y, 0.0, static_cast<double>(H - 1));
    int64_t x0 = static_cast<int64_t>(cx), y0 = static_cast<int64_t>(cy);
    int64_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
    double fx = cx - static_cast<double>(x0), fy = cy - static_cast<double>(y0);
    auto px = [&](int64_t yy, int64_t xx) {
        return static_cast<double>(img.data[static_cast<size_t>(ch * H * W + yy * W + xx)]);
    };
    return (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x1)) +
           fy * ((1 - fx) * px(y1, x0) + fx * px(y1, x1));
}

}  // namespace

std::vector<HandCrop> crop_hands(const Tensor& image, const std::vector<Tensor>& joints2d,
                                 const CropConfig& cfg, int64_t source_index) {
    if (image.shape.size() != 3 || image.shape[0] != 3)
        throw DimensionError("crop_hands: want {3,H,W}");
    int64_t H = image.shape[1], W = image.shape[2];

    std::vector<HandCrop> crops;
    for (const auto& j : joints2d) {
        if (j.shape.size() != 2 || j.shape[1] != 2 || j.shape[0] < 1)
            throw DimensionError("crop_hands: joints tensor must be {K,2}");
        double lo_x = 1e300, hi_x = -1e300, lo_y = 1e300, hi_y = -1e300;
        for (int64_t k = 0; k < j.shape[0]; ++k) {
            double u = j.data[static_cast<size_t>(k * 2 + 0)];
            double v = j.data[static_cast<size_t>(k * 2 + 1)];
            if (!std::isfinite(u) || !std::isfinite(v))
                throw NumericError("crop_hands: non-finite joint coordinate");
            lo_x = std::min(lo_x, u), hi_x = std::max(hi_x, u);
            lo_y = std::min(lo_y, v), hi_y = std::max(hi_y, v);
        }
        double mx = cfg.margin_fraction * (hi_x - lo_x);
        double my = cfg.margin_fraction * (hi_y - lo_y);
        double x0 = lo_x - mx, x1 = hi_x + mx, y0 = lo_y - my, y1 = hi_y + my;
        // enforce the minimum side around the center, then clip to the frame
        auto widen = [](double& lo, double& hi, double min_side) {
            double need = min_side - (hi - lo);
            if (need > 0) lo -= need / 2, hi += need / 2;
        };
        widen(x0, x1, static_cast<double>(cfg.min_side));
        widen(y0, y1, static_cast<double>(cfg.min_side));

        HandCrop crop;
        crop.source_index = source_index;
        crop.x0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(x0)), 0, W - 1);
        crop.y0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(y0)), 0, H - 1);
        crop.x1 = std::clamp<int64_t>(static_cast<int64_t>(std::ceil(x1)), crop.x0 + 1, W);
        crop.y1 = std::clamp<int64_t>(static_cast<int64_t>(std::ceil(y1)), crop.y0 + 1, H);
        // keep the minimum side inside the image where the frame allows it
        auto grow_clipped = [](int64_t& lo, int64_t& hi, int64_t min_side, int64_t limit) {
            int64_t need = min_side - (hi - lo);
            if (need <= 0) return;
            lo = std::max<int64_t>(0, lo - need / 2 - (need % 2));
            hi = std::min<int64_t>(limit, lo + min_side);
            lo = std::max<int64_t>(0, hi - min_side);
        };
        grow_clipped(crop.x0, crop.x1, std::min<int64_t>(cfg.min_side, W), W);
        grow_clipped(crop.y0, crop.y1, std::min<int64_t>(cfg.min_side, H), H);

        crop.pixels = Tensor({3, cfg.out_size, cfg.out_size});
        double sy = static_cast<double>(crop.y1 - crop.y0) / static_cast<double>(cfg.out_size);
        double sx = static_cast<double>(crop.x1 - crop.x0) / static_cast<double>(cfg.out_size);
        for (int ch = 0; ch < 3; ++ch)
            for (int64_t oy = 0; oy < cfg.out_size; ++oy)
                for (int64_t ox = 0; ox < cfg.out_size; ++ox) {
                    double yy = static_cast<double>(crop.y0) + (static_cast<double>(oy) + 0.5) * sy - 0.5;
                    double xx = static_cast<double>(crop.x0) + (static_cast<double>(ox) + 0.5) * sx - 0.5;
                    crop.pixels.data[static_cast<size_t>(ch * cfg.out_size * cfg.out_size +
                                                         oy * cfg.out_size + ox)] =
                        static_cast<float>(bilinear(image, ch, yy, xx));
                }
        crops.push_back(std::move(crop));
    }
    return crops;
}

// ---- suite ----

FeatureExtractor ae_feature_extractor(const th2i::AeConfig& cfg,
                                      const ad::ParamBundle& params) {
    // copy of the parameter values so the extractor outlives the bundle
    auto params_copy = std::make_shared<ad::ParamBundle>();
    for (const auto& [name, p] : params.params) params_copy->add(name, p->val);
    th2i::AeConfig cfg_copy = cfg;
    return [cfg_copy, params_copy](const Tensor& image) {
        ad::NoGradGuard ng;
        ad::Arr x({1, image.shape[0], image.shape[1], image.shape[2]});
        for (int64_t i = 0; i < x.numel(); ++i)
            x.at(i) = static_cast<double>(image.data[static_cast<size_t>(i)]);
        ad::Arr z = th2i::ae_encode(cfg_copy, *params_copy, ad::constant(x))->val;
        int64_t C = z.shape[1], hw = z.shape[2] * z.shape[3];
        std::vector<double> feat(static_cast<size_t>(2 * C), 0.0);
        for (int64_t c = 0; c < C; ++c) {
            double mean = 0.0, sq = 0.0;
            for (int64_t i = 0; i < hw; ++i) {
                double v = z.at(c * hw + i);
                mean += v;
                sq += v * v;
            }
            mean /= static_cast<double>(hw);
            double var = sq / static_cast<double>(hw) - mean * mean;
            feat[static_cast<size_t>(c)] = mean;
            feat[static_cast<size_t>(C + c)] = std::sqrt(std::max(var, 0.0));
        }
        return feat;
    };
}

namespace {

std::vector<std::vector<double>> extract_all(const std::vector<EvalItem>& items,
                                             const FeatureExtractor& extractor) {
    std::vector<std::vector<double>> out;
    out.reserve(items.size());
    for (const auto& it : items) out.push_back(extractor(it.image));
    return out;
}

std::vector<std::vector<double>> extract_crops(const std::vector<EvalItem>& items,
                                               const FeatureExtractor& extractor,
                                               const CropConfig& cfg) {
    std::vector<std::vector<double>> out;
    for (size_t i = 0; i < items.size(); ++i)
        for (const auto& crop :
             crop_hands(items[i].image, items[i].joints2d, cfg, static_cast<int64_t>(i)))
            out.push_back(extractor(crop.pixels));
    return out;
}

}  // namespace

MetricTable eval_suite(const std::vector<EvalItem>& generated,
                       const std::vector<EvalItem>& reference,
                       const FeatureExtractor& extractor, const EvalConfig& cfg) {
    if (generated.empty() || reference.empty())
        throw DimensionError("eval_suite: empty image set");
    MetricTable out;
    out.generated_count = static_cast<int64_t>(generated.size());
    out.reference_count = static_cast<int64_t>(reference.size());

    auto fg = extract_all(generated, extractor);
    auto fr = extract_all(reference, extractor);
    out.fid = frechet_distance(accumulate_stats(fg), accumulate_stats(fr));
    out.kid = kid_with_subsets(fg, fr, cfg.kid_subsets, cfg.kid_subset_size, cfg.seed);

    auto cg = extract_crops(generated, extractor, cfg.crop);
    auto cr = extract_crops(reference, extractor, cfg.crop);
    if (cg.size() >= 2 && cr.size() >= 2) {
        out.has_hand_metrics = true;
        out.fid_h = frechet_distance(accumulate_stats(cg), accumulate_stats(cr));
        out.kid_h =
            kid_with_subsets(cg, cr, cfg.kid_subsets, cfg.kid_subset_size, cfg.seed + 1);
    }
    return out;
}

std::string MetricTable::to_text() const {
    std::ostringstream os;
    os.precision(6);
    os << "FID\tKID\tFID-H\tKID-H\n";
    os << fid << "\t" << kid.full << "\t";
    if (has_hand_metrics)
        os << fid_h << "\t" << kid_h.full << "\n";
    else
        os << "absent\tabsent  (warning: no hand crops on one side)\n";
    return os.str();
}

std::string MetricTable::to_json() const {
    nlohmann::json j;
    j["fid"] = fid;
    j["kid"] = kid.full;
    j["kid_subset_mean"] = kid.subset_mean;
    j["kid_subset_std"] = kid.subset_std;
    j["generated_count"] = generated_count;
    j["reference_count"] = reference_count;
    if (has_hand_metrics) {
        j["fid_h"] = fid_h;
        j["kid_h"] = kid_h.full;
        j["kid_h_subset_mean"] = kid_h.subset_mean;
        j["kid_h_subset_std"] = kid_h.subset_std;
    } else {
        j["fid_h"] = nullptr;
        j["kid_h"] = nullptr;
        j["warning"] = "hand metrics absent: no crops on at least one side";
    }
    return j.dump(1);
}

}  // namespace hgen::metrics
