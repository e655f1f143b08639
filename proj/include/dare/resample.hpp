#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "dare/error.hpp"
#include "dare/geom.hpp"
#include "dare/spatial.hpp"

namespace dare {

enum class ResampleMethod { voxel, fps, gss };

struct ResampleSpec {
    ResampleMethod method = ResampleMethod::voxel;
    double rate = 0.0;        ///< fps / gss: fraction kept, (0, 1]
    double voxel_size = 0.0;  ///< voxel: cell edge in meters
    std::size_t candidate_pool = 100;

    void validate() const {
        if (method == ResampleMethod::voxel) {
            if (!(voxel_size > 0.0)) throw InvalidArgument("resample: voxel size must be positive");
        } else {
            if (!(rate > 0.0 && rate <= 1.0)) throw InvalidArgument("resample: rate must be in (0,1]");
            if (candidate_pool < 1) throw InvalidArgument("resample: candidate pool must be >= 1");
        }
    }
};

/// Parses "voxel:<m>", "fps:<rate>" or "gss:<rate>[:<pool>]".
inline ResampleSpec parse_resample_spec(std::string_view text) {
    const auto colon = text.find(':');
    if (colon == std::string_view::npos) throw ParseError("resample spec needs method:value, got '" + std::string(text) + "'");
    const std::string method(text.substr(0, colon));
    std::string rest(text.substr(colon + 1));
    ResampleSpec spec;
    try {
        if (method == "voxel") {
            spec.method = ResampleMethod::voxel;
            spec.voxel_size = std::stod(rest);
        } else if (method == "fps" || method == "gss") {
            spec.method = method == "fps" ? ResampleMethod::fps : ResampleMethod::gss;
            const auto c2 = rest.find(':');
            spec.rate = std::stod(rest.substr(0, c2));
            if (c2 != std::string::npos) spec.candidate_pool = std::stoul(rest.substr(c2 + 1));
        } else {
            throw ParseError("unknown resample method '" + method + "'");
        }
    } catch (const std::logic_error&) {
        throw ParseError("bad resample spec '" + std::string(text) + "'");
    }
    spec.validate();
    return spec;
}

/// One mean point per occupied voxel of a grid anchored at the cloud's
/// minimum corner, in lexicographic voxel order. Normals and weights are dropped.
inline PointCloud voxel_grid(const PointCloud& cloud, double voxel_size) {
    if (!(voxel_size > 0.0)) throw InvalidArgument("voxel_grid: voxel size must be positive");
    PointCloud out;
    if (cloud.empty()) return out;
    const Vec3 origin = bounding_box(cloud.points).lo;

    struct Bucket {
        Vec3 sum = Vec3::Zero();
        std::size_t count = 0;
    };
    std::map<std::array<std::int64_t, 3>, Bucket> buckets;
    for (const auto& p : cloud.points) {
        const Vec3 q = (p - origin) / voxel_size;
        const std::array<std::int64_t, 3> key{static_cast<std::int64_t>(std::floor(q.x())),
                                              static_cast<std::int64_t>(std::floor(q.y())),
                                              static_cast<std::int64_t>(std::floor(q.z()))};
        auto& b = buckets[key];
        b.sum += p;
        ++b.count;
    }
    out.points.reserve(buckets.size());
    for (const auto& [key, b] : buckets) out.points.push_back(b.sum / static_cast<double>(b.count));
    return out;
}

inline std::size_t kept_count(std::size_t n, double keep_fraction) {
    const auto k = static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(n) - 1e-9));
    return std::clamp<std::size_t>(k, n == 0 ? 0 : 1, n);
}

inline PointCloud subset(const PointCloud& cloud, const std::vector<std::size_t>& idx) {
    PointCloud out;
    out.points.reserve(idx.size());
    for (auto i : idx) out.points.push_back(cloud.points[i]);
    if (cloud.normals) {
        std::vector<Vec3> n;
        for (auto i : idx) n.push_back((*cloud.normals)[i]);
        out.normals = std::move(n);
    }
    if (cloud.weights) {
        std::vector<double> w;
        for (auto i : idx) w.push_back((*cloud.weights)[i]);
        out.weights = std::move(w);
    }
    return out;
}

/// Indices chosen by farthest point sampling, in selection order.
inline std::vector<std::size_t> fps_indices(const PointCloud& cloud, double keep_fraction, std::uint64_t seed) {
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw InvalidArgument("fps: keep fraction must be in (0,1]");
    const std::size_t n = cloud.size();
    std::vector<std::size_t> sel;
    if (n == 0) return sel;
    const std::size_t target = kept_count(n, keep_fraction);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> first(0, n - 1);
    sel.push_back(first(rng));

    std::vector<double> mind(n, std::numeric_limits<double>::infinity());
    while (sel.size() < target) {
        const Point3& last = cloud.points[sel.back()];
        std::size_t best = 0;
        double best_d = -1.0;
        for (std::size_t j = 0; j < n; ++j) {
            mind[j] = std::min(mind[j], (cloud.points[j] - last).squaredNorm());
            if (mind[j] > best_d) {
                best_d = mind[j];
                best = j;
            }
        }
        sel.push_back(best);
    }
    return sel;
}

inline PointCloud fps(const PointCloud& cloud, double keep_fraction, std::uint64_t seed) {
    return subset(cloud, fps_indices(cloud, keep_fraction, seed));
}

/// Constraint vectors [x cross n; n] of the point-to-plane residual, with
/// coordinates centred on the bounding box and scaled by its half diagonal.
inline std::vector<Eigen::Matrix<double, 6, 1>> gss_constraints(const PointCloud& cloud) {
    const Aabb box = bounding_box(cloud.points);
    const Vec3 c = box.center();
    const double radius = std::max(0.5 * (box.hi - box.lo).norm(), 1e-12);
    std::vector<Eigen::Matrix<double, 6, 1>> out(cloud.size());
    for (std::size_t j = 0; j < cloud.size(); ++j) {
        const Vec3 x = (cloud.points[j] - c) / radius;
        const Vec3& nrm = (*cloud.normals)[j];
        out[j].head<3>() = x.cross(nrm);
        out[j].tail<3>() = nrm;
    }
    return out;
}

/// Ascending eigenvalues of a symmetric 6x6 matrix.
inline Eigen::Matrix<double, 6, 1> sym6_eigenvalues(const Eigen::Matrix<double, 6, 6>& m) {
    return Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 6, 6>>(m, Eigen::EigenvaluesOnly).eigenvalues();
}

struct GssTrace {
    std::vector<std::size_t> indices;
    std::vector<double> min_eigenvalue;  ///< smallest eigenvalue of M after each pick
};

/// Geometrically stable sampling: greedy stochastic maximisation of the
/// smallest eigenvalue of the accumulated 6x6 constraint matrix. Ties on the
/// smallest eigenvalue fall through to the next smallest, then to lowest index.
inline GssTrace gss_select(const PointCloud& cloud, double keep_fraction, std::size_t candidate_pool,
                           std::uint64_t seed) {
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw InvalidArgument("gss: keep fraction must be in (0,1]");
    if (candidate_pool < 1) throw InvalidArgument("gss: candidate pool must be >= 1");
    PointCloud work = cloud;
    if (!work.normals) {
        if (work.size() < 3) throw InvalidArgument("gss: needs normals or at least 3 points");
        work = estimate_normals(work, std::min<std::size_t>(10, work.size()));
    }
    const auto cons = gss_constraints(work);
    const std::size_t n = work.size();
    GssTrace trace;
    if (n == 0) return trace;
    const std::size_t target = kept_count(n, keep_fraction);

    std::vector<std::size_t> remaining(n);
    std::iota(remaining.begin(), remaining.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    Eigen::Matrix<double, 6, 6> M = Eigen::Matrix<double, 6, 6>::Zero();

    std::vector<std::size_t> cand;
    while (trace.indices.size() < target) {
        cand.clear();
        if (candidate_pool >= remaining.size()) {
            cand = remaining;
        } else {
            // Partial Fisher-Yates over a copy of the positions.
            std::vector<std::size_t> pos(remaining.size());
            std::iota(pos.begin(), pos.end(), std::size_t{0});
            for (std::size_t c = 0; c < candidate_pool; ++c) {
                std::uniform_int_distribution<std::size_t> pick(c, pos.size() - 1);
                std::swap(pos[c], pos[pick(rng)]);
                cand.push_back(remaining[pos[c]]);
            }
            std::sort(cand.begin(), cand.end());
        }

        std::size_t best = cand.front();
        Eigen::Matrix<double, 6, 1> best_eval;
        bool first = true;
        const double tol = 1e-12 * std::max(1.0, M.trace());
        for (std::size_t idx : cand) {
            const Eigen::Matrix<double, 6, 1> ev = sym6_eigenvalues(M + cons[idx] * cons[idx].transpose());
            bool better = first;
            if (!first) {
                for (int a = 0; a < 6; ++a) {
                    if (ev[a] > best_eval[a] + tol) { better = true; break; }
                    if (ev[a] < best_eval[a] - tol) break;
                }
            }
            if (better) {
                best = idx;
                best_eval = ev;
                first = false;
            }
        }
        M += cons[best] * cons[best].transpose();
        trace.indices.push_back(best);
        trace.min_eigenvalue.push_back(std::max(sym6_eigenvalues(M)[0], 0.0));
        remaining.erase(std::find(remaining.begin(), remaining.end(), best));
    }
    return trace;
}

inline PointCloud gss(const PointCloud& cloud, double keep_fraction, std::size_t candidate_pool, std::uint64_t seed) {
    return subset(cloud, gss_select(cloud, keep_fraction, candidate_pool, seed).indices);
}

inline PointCloud resample(const PointCloud& cloud, const ResampleSpec& spec, std::uint64_t seed) {
    spec.validate();
    switch (spec.method) {
        case ResampleMethod::voxel: return voxel_grid(cloud, spec.voxel_size);
        case ResampleMethod::fps: return fps(cloud, spec.rate, seed);
        case ResampleMethod::gss: return gss(cloud, spec.rate, spec.candidate_pool, seed);
    }
    return cloud;
}

}  // namespace dare
