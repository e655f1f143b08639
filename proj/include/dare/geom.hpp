#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dare/error.hpp"

namespace dare {

using Point3 = Eigen::Vector3d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kRotationTolerance = 1e-9;

inline double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / std::numbers::pi; }

/// Checks R^T R = I and det(R) = +1, element-wise within `tol`.
inline bool is_rotation(const Mat3& r, double tol = kRotationTolerance) {
    if (!r.allFinite()) return false;
    const Mat3 gram = r.transpose() * r;
    if ((gram - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
    return std::abs(r.determinant() - 1.0) <= tol;
}

/// Nearest rotation in Frobenius norm (SVD projection onto SO(3)).
inline Mat3 nearest_rotation(const Mat3& m) {
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 d = Mat3::Identity();
    d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
    return svd.matrixU() * d * svd.matrixV().transpose();
}

/// Rotation by `angle_rad` about `axis` (normalized internally).
inline Mat3 axis_angle(const Vec3& axis, double angle_rad) {
    return Eigen::AngleAxisd(angle_rad, axis.normalized()).toRotationMatrix();
}

/// x -> R x + t. The rotation is always a proper orthonormal matrix.
class RigidTransform {
public:
    RigidTransform() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}

    RigidTransform(const Mat3& rotation, const Vec3& translation)
        : rotation_(rotation), translation_(translation) {
        if (!is_rotation(rotation_))
            throw InvalidArgument("RigidTransform: rotation is not orthonormal with det +1");
        if (!translation_.allFinite())
            throw InvalidArgument("RigidTransform: non-finite translation");
    }

    static RigidTransform identity() { return {}; }

    static RigidTransform from_translation(const Vec3& t) { return {Mat3::Identity(), t}; }

    const Mat3& rotation() const { return rotation_; }
    const Vec3& translation() const { return translation_; }

    Point3 operator()(const Point3& x) const { return rotation_ * x + translation_; }

    RigidTransform inverse() const {
        const Mat3 rt = rotation_.transpose();
        return {rt, -(rt * translation_)};
    }

    Eigen::Matrix4d matrix() const {
        Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
        m.topLeftCorner<3, 3>() = rotation_;
        m.topRightCorner<3, 1>() = translation_;
        return m;
    }

private:
    Mat3 rotation_;
    Vec3 translation_;
};

/// (a o b)(x) = a(b(x)).
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
    // Products of rotations drift by ~1e-16 per step; re-project if a long chain
    // ever pushes the result past the validation tolerance.
    Mat3 r = a.rotation() * b.rotation();
    if (!is_rotation(r)) r = nearest_rotation(r);
    return {r, a.rotation() * b.translation() + a.translation()};
}

/// Ordered point set with optional per-point unit normals and positive weights.
struct PointCloud {
    std::vector<Point3> points;
    std::optional<std::vector<Vec3>> normals;
    std::optional<std::vector<double>> weights;

    PointCloud() = default;
    explicit PointCloud(std::vector<Point3> pts) : points(std::move(pts)) {}

    std::size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }
    bool has_normals() const { return normals.has_value(); }

    /// Throws InvalidArgument when any invariant is violated.
    void validate() const {
        for (const auto& p : points)
            if (!p.allFinite()) throw InvalidArgument("PointCloud: non-finite coordinate");
        if (normals) {
            if (normals->size() != points.size())
                throw InvalidArgument("PointCloud: normals length mismatch");
            for (const auto& n : *normals)
                if (!(std::abs(n.norm() - 1.0) <= 1e-6))
                    throw InvalidArgument("PointCloud: normal is not unit length");
        }
        if (weights) {
            if (weights->size() != points.size())
                throw InvalidArgument("PointCloud: weights length mismatch");
            for (double w : *weights)
                if (!(w > 0.0) || !std::isfinite(w))
                    throw InvalidArgument("PointCloud: weights must be positive and finite");
        }
    }
};

inline PointCloud apply_transform(const RigidTransform& t, const PointCloud& c) {
    PointCloud out;
    out.points.reserve(c.size());
    for (const auto& p : c.points) out.points.push_back(t(p));
    if (c.normals) {
        std::vector<Vec3> n;
        n.reserve(c.normals->size());
        for (const auto& v : *c.normals) n.push_back(t.rotation() * v);
        out.normals = std::move(n);
    }
    out.weights = c.weights;
    return out;
}

/// Geodesic distance on SO(3) in degrees, 2 asin(||R1 - R2||_F / sqrt(8)).
inline double geodesic_rotation_error(const Mat3& r_est, const Mat3& r_gt) {
    const double frob = (r_est - r_gt).norm();
    const double s = std::clamp(frob / std::sqrt(8.0), 0.0, 1.0);
    return rad2deg(2.0 * std::asin(s));
}

inline double translation_error(const Vec3& t_est, const Vec3& t_gt) {
    return (t_est - t_gt).norm();
}

/// Axis-aligned bounds of a point list. Empty input gives an inverted box.
struct Aabb {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());

    void extend(const Point3& p) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    Vec3 extent() const { return (hi - lo).cwiseMax(0.0); }
    Vec3 center() const { return 0.5 * (lo + hi); }
};

inline Aabb bounding_box(const std::vector<Point3>& pts) {
    Aabb box;
    for (const auto& p : pts) box.extend(p);
    return box;
}

}  // namespace dare
