#pragma once

// Segmentation scores: pooled IOU, pooled F-beta and weighted F-beta, plus
// binarization helpers and the report table.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "nls/errors.hpp"
#include "nls/field.hpp"
#include "nls/grid.hpp"

namespace nls {

struct ConfusionCounts {
    long tp = 0, fp = 0, fn = 0, tn = 0;

    long total() const { return tp + fp + fn + tn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
};

struct MetricConfig {
    double beta_squared = 0.3;
    /// Level at which saliency-style ground truth is binarized.
    double gt_threshold = 0.5;
    /// alpha-F-beta: average per-image scores instead of pooling counts.
    bool per_image = false;

    void validate() const {
        if (!(beta_squared > 0.0)) throw InvalidInput("MetricConfig: beta_squared must be positive");
    }
};

inline ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt) {
    require_same_shape(pred, gt, "confusion");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, g = gt[i] != 0;
        if (p && g) ++c.tp;
        else if (p) ++c.fp;
        else if (g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

inline ConfusionCounts pooled_counts(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts) {
    if (preds.empty()) throw InvalidInput("metrics: empty prediction list");
    if (preds.size() != gts.size()) throw InvalidInput("metrics: prediction and ground-truth counts differ");
    ConfusionCounts c;
    for (std::size_t i = 0; i < preds.size(); ++i) c += confusion(preds[i], gts[i]);
    return c;
}

inline double iou_from_counts(const ConfusionCounts& c) {
    const long d = c.tp + c.fp + c.fn;
    return d == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(d);
}

inline double f_beta_from_counts(const ConfusionCounts& c, double beta_squared) {
    const long pred_pos = c.tp + c.fp;
    const long actual_pos = c.tp + c.fn;
    if (pred_pos == 0 && actual_pos == 0) return 1.0;
    if (pred_pos == 0 || actual_pos == 0 || c.tp == 0) return 0.0;
    const double p = static_cast<double>(c.tp) / static_cast<double>(pred_pos);
    const double r = static_cast<double>(c.tp) / static_cast<double>(actual_pos);
    return (1.0 + beta_squared) * p * r / (beta_squared * p + r);
}

/// TP / (TP + FP + FN) with counts summed over the whole set.
inline double dataset_iou(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts) {
    return iou_from_counts(pooled_counts(preds, gts));
}

inline double alpha_f_beta(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts,
                           const MetricConfig& cfg = {}) {
    cfg.validate();
    if (!cfg.per_image) return f_beta_from_counts(pooled_counts(preds, gts), cfg.beta_squared);
    pooled_counts(preds, gts);
    double s = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) s += f_beta_from_counts(confusion(preds[i], gts[i]), cfg.beta_squared);
    return s / static_cast<double>(preds.size());
}

struct WeightedFBetaConstants {
    int kernel_size = 7;
    double kernel_sigma = 5.0;
    /// B = 2 - exp(decay * distance) outside the ground truth.
    double decay = std::log(0.5) / 5.0;
};

namespace detail {

// Among the foreground pixels at exactly squared distance d2 from (r, c),
// the largest error value: a symmetric tie-break for the nearest-pixel
// dependency.
inline double max_error_at_distance(const ScalarField& e, const BinaryMask& gt, int r, int c, long d2) {
    const int h = gt.height(), w = gt.width();
    double best = -1.0;
    for (long dx = 0; dx * dx <= d2; ++dx) {
        const long rest = d2 - dx * dx;
        long dy = static_cast<long>(std::llround(std::sqrt(static_cast<double>(rest))));
        while (dy * dy > rest) --dy;
        while ((dy + 1) * (dy + 1) <= rest) ++dy;
        if (dy * dy != rest) continue;
        for (int sx : {-1, 1})
            for (int sy : {-1, 1}) {
                const long cc = c + sx * dx, rr = r + sy * dy;
                if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
                if (gt(static_cast<int>(rr), static_cast<int>(cc))) best = std::max(best, e(static_cast<int>(rr), static_cast<int>(cc)));
            }
    }
    return best;
}

}  // namespace detail

/// Weighted F-beta of one real-valued prediction in [0, 1] against a
/// binary ground truth. Empty ground truth scores 1 - mean(pred).
inline double weighted_f_beta(const ScalarField& pred, const BinaryMask& gt, const MetricConfig& cfg = {},
                              const WeightedFBetaConstants& k = {}) {
    cfg.validate();
    require_same_shape(pred, gt, "weighted_f_beta");
    const int h = gt.height(), w = gt.width();
    for (double v : pred.values())
        if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput("weighted_f_beta: prediction outside [0, 1]");

    long fg = 0;
    for (auto v : gt.values()) fg += v != 0;
    if (fg == 0) {
        double m = 0.0;
        for (double v : pred.values()) m += v;
        return 1.0 - m / static_cast<double>(pred.size());
    }

    ScalarField e(h, w);
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = std::abs(pred[i] - (gt[i] ? 1.0 : 0.0));

    // Background pixels inherit the error of their nearest foreground pixel.
    const std::vector<double> d2 = squared_distance_to(h, w, [&](int r, int c) { return gt(r, c) != 0; });
    ScalarField et = e;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            if (!gt(r, c))
                et(r, c) = detail::max_error_at_distance(
                    e, gt, r, c, static_cast<long>(std::llround(d2[static_cast<std::size_t>(r) * w + c])));

    // Gaussian neighbourhood, zero padding.
    const int rad = k.kernel_size / 2;
    std::vector<double> ker(static_cast<std::size_t>(k.kernel_size) * k.kernel_size);
    double ks = 0.0;
    for (int i = -rad; i <= rad; ++i)
        for (int j = -rad; j <= rad; ++j) {
            const double v = std::exp(-(i * i + j * j) / (2.0 * k.kernel_sigma * k.kernel_sigma));
            ker[static_cast<std::size_t>((i + rad) * k.kernel_size + j + rad)] = v;
            ks += v;
        }
    for (auto& v : ker) v /= ks;

    double sum_ew_fg = 0.0, sum_ew_bg = 0.0;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const double ev = e(r, c);
            if (gt(r, c)) {
                double ea = 0.0;
                for (int i = -rad; i <= rad; ++i)
                    for (int j = -rad; j <= rad; ++j) {
                        const int rr = r + i, cc = c + j;
                        if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
                        ea += ker[static_cast<std::size_t>((i + rad) * k.kernel_size + j + rad)] * et(rr, cc);
                    }
                sum_ew_fg += std::min(ev, ea);
            } else {
                const double dist = std::sqrt(d2[static_cast<std::size_t>(r) * w + c]);
                sum_ew_bg += ev * (2.0 - std::exp(k.decay * dist));
            }
        }

    const double tpw = static_cast<double>(fg) - sum_ew_fg;
    const double fpw = sum_ew_bg;
    const double recall = 1.0 - sum_ew_fg / static_cast<double>(fg);
    const double precision = tpw + fpw > 0.0 ? tpw / (tpw + fpw) : 0.0;
    const double denom = recall + cfg.beta_squared * precision;
    if (!(denom > 0.0)) return 0.0;
    return std::clamp((1.0 + cfg.beta_squared) * recall * precision / denom, 0.0, 1.0);
}

/// Mean of per-image weighted F-beta.
inline double mean_weighted_f_beta(const std::vector<ScalarField>& preds, const std::vector<BinaryMask>& gts,
                                   const MetricConfig& cfg = {}) {
    if (preds.empty()) throw InvalidInput("metrics: empty prediction list");
    if (preds.size() != gts.size()) throw InvalidInput("metrics: prediction and ground-truth counts differ");
    double s = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) s += weighted_f_beta(preds[i], gts[i], cfg);
    return s / static_cast<double>(preds.size());
}

enum class BinarizeMode {
    /// foreground iff value <= threshold
    distance,
    /// foreground iff value > threshold
    saliency,
};

template <class G>
BinaryMask binarize(const G& map, double threshold, BinarizeMode mode) {
    BinaryMask m(map.height(), map.width());
    for (std::size_t i = 0; i < map.size(); ++i)
        m[i] = (mode == BinarizeMode::distance ? map[i] <= threshold : map[i] > threshold) ? 1 : 0;
    return m;
}

inline ScalarField mask_to_field(const BinaryMask& m) {
    ScalarField f(m.height(), m.width());
    for (std::size_t i = 0; i < m.size(); ++i) f[i] = m[i] ? 1.0 : 0.0;
    return f;
}

struct MetricRow {
    std::string dataset;
    double iou = 0.0;
    double alpha_f_beta = 0.0;
    double weighted_f_beta = 0.0;
};

/// All three scores of binary predictions; the weighted score uses the
/// binary prediction as its [0, 1] map.
inline MetricRow evaluate_masks(const std::string& name, const std::vector<BinaryMask>& preds,
                                const std::vector<BinaryMask>& gts, const MetricConfig& cfg = {}) {
    MetricRow row{name, dataset_iou(preds, gts), alpha_f_beta(preds, gts, cfg), 0.0};
    std::vector<ScalarField> maps;
    maps.reserve(preds.size());
    for (const auto& p : preds) maps.push_back(mask_to_field(p));
    row.weighted_f_beta = mean_weighted_f_beta(maps, gts, cfg);
    return row;
}

inline void write_metric_table(std::ostream& os, const std::vector<MetricRow>& rows) {
    os << "dataset\tIOU\talpha_F_beta\tomega_F_beta\n";
    for (const auto& r : rows) {
        std::ostringstream line;
        line << std::fixed << std::setprecision(6) << r.dataset << '\t' << r.iou << '\t' << r.alpha_f_beta << '\t'
             << r.weighted_f_beta << '\n';
        os << line.str();
    }
}

}  // namespace nls
