#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "dare/error.hpp"
#include "dare/geom.hpp"
#include "dare/spatial.hpp"

namespace dare {

enum class WeightMethod { uniform, sensor, empirical, empirical_full };

inline std::string_view to_string(WeightMethod m) {
    switch (m) {
        case WeightMethod::uniform: return "uniform";
        case WeightMethod::sensor: return "sensor";
        case WeightMethod::empirical: return "empirical";
        case WeightMethod::empirical_full: return "empirical-full";
    }
    return "?";
}

inline WeightMethod parse_weight_method(std::string_view s) {
    if (s == "uniform") return WeightMethod::uniform;
    if (s == "sensor") return WeightMethod::sensor;
    if (s == "empirical") return WeightMethod::empirical;
    if (s == "empirical-full" || s == "empirical_full") return WeightMethod::empirical_full;
    throw ParseError("unknown weight method '" + std::string(s) + "'");
}

/// Per-point observation weights. Only ratios matter; the global scale is free.
struct ObservationWeights {
    std::vector<double> values;
    WeightMethod method = WeightMethod::uniform;

    std::size_t size() const { return values.size(); }

    double mean() const {
        if (values.empty()) return 0.0;
        return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    }

    /// Rescales to mean 1.
    ObservationWeights normalized() const {
        ObservationWeights out = *this;
        const double m = mean();
        if (m > 0.0)
            for (double& v : out.values) v /= m;
        return out;
    }
};

inline ObservationWeights uniform_weights(std::size_t n) {
    return {std::vector<double>(n, 1.0), WeightMethod::uniform};
}

/// Inverse of the Lidar sampling density for a sensor at the origin:
/// ||x||^2 / (gamma |n.x_hat| + 1 - gamma). Normals are estimated (L = 10,
/// oriented toward the sensor) when the cloud has none.
inline ObservationWeights sensor_weights(const PointCloud& cloud, double gamma) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw InvalidArgument("sensor_weights: gamma must lie in [0,1]");
    for (const auto& p : cloud.points)
        if (p.norm() < 1e-9) throw InvalidArgument("point at sensor origin");

    std::vector<Vec3> estimated;
    const std::vector<Vec3>* normals = cloud.normals ? &*cloud.normals : nullptr;
    if (!normals && gamma > 0.0) {
        estimated = *estimate_normals(cloud, 10, Point3::Zero()).normals;
        normals = &estimated;
    }

    ObservationWeights w{std::vector<double>(cloud.size()), WeightMethod::sensor};
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Point3& x = cloud.points[i];
        const double r2 = x.squaredNorm();
        const double cos_inc = gamma > 0.0 ? std::abs((*normals)[i].dot(x / std::sqrt(r2))) : 0.0;
        w.values[i] = r2 / (gamma * cos_inc + 1.0 - gamma);
    }
    return w;
}

/// Empirical density weights from the L-neighbourhood PCA of each point:
/// sigma1 * sigma2, optionally times the tangent-plane factor
/// exp(0.5 * sum_{a=1,2} ((x - mean) . b_a)^2 / sigma_a^2).
inline ObservationWeights empirical_weights(const PointCloud& cloud, std::size_t L, bool full) {
    if (L < 3) throw InvalidArgument("degenerate neighborhood");
    if (cloud.size() < L) throw InvalidArgument("empirical_weights: cloud has fewer than L points");

    const KdTree tree(cloud);
    ObservationWeights w{std::vector<double>(cloud.size(), 0.0),
                         full ? WeightMethod::empirical_full : WeightMethod::empirical};
    bool any_degenerate = false;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const LocalSurfaceStats s = local_stats(tree, i, L);
        const double s1 = std::sqrt(s.eigvals[0]);
        const double s2 = std::sqrt(s.eigvals[1]);
        if (!(s1 > 0.0 && s2 > 0.0)) {
            any_degenerate = true;
            continue;
        }
        double v = s1 * s2;
        if (full) {
            const Vec3 d = cloud.points[i] - s.mean;
            const double u1 = d.dot(s.eigvecs.col(0)) / s1;
            const double u2 = d.dot(s.eigvecs.col(1)) / s2;
            v *= std::exp(0.5 * (u1 * u1 + u2 * u2));
        }
        w.values[i] = v;
    }

    if (any_degenerate) {
        double min_pos = std::numeric_limits<double>::infinity();
        for (double v : w.values)
            if (v > 0.0) min_pos = std::min(min_pos, v);
        if (!std::isfinite(min_pos)) min_pos = 1.0;  // every neighbourhood degenerate
        for (double& v : w.values)
            if (!(v > 0.0)) v = min_pos;
    }
    return w;
}

/// Median filter over each point's L nearest neighbours (lower median for even
/// counts), then clip at clip_factor times the mean of the filtered values.
inline ObservationWeights regularize_weights(const ObservationWeights& w, const PointCloud& cloud,
                                             std::size_t L, double clip_factor) {
    if (w.size() != cloud.size()) throw InvalidArgument("regularize_weights: weights not aligned with cloud");
    if (L < 1) throw InvalidArgument("regularize_weights: L must be >= 1");
    if (!(clip_factor > 0.0)) throw InvalidArgument("regularize_weights: clip_factor must be positive");

    ObservationWeights out{std::vector<double>(w.size()), w.method};
    if (w.size() == 0) return out;

    const KdTree tree(cloud);
    std::vector<double> buf;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto nbrs = tree.knn(cloud.points[i], L);
        buf.clear();
        for (const auto& nb : nbrs) buf.push_back(w.values[nb.index]);
        const std::size_t mid = (buf.size() - 1) / 2;
        std::nth_element(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(mid), buf.end());
        out.values[i] = buf[mid];
    }

    const double cap = clip_factor * out.mean();
    for (double& v : out.values) v = std::min(v, cap);
    return out;
}

}  // namespace dare
