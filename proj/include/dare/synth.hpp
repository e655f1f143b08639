#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "dare/error.hpp"
#include "dare/geom.hpp"

namespace dare {

/// Deterministic 64-bit mixer used to derive independent sub-seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

/// Uniform double in [0, 1) from a 64-bit key.
inline double unit_from_key(std::uint64_t key) {
    return static_cast<double>(splitmix64(key) >> 11) * 0x1.0p-53;
}

struct TriMesh {
    std::vector<Point3> vertices;
    std::vector<std::array<std::uint32_t, 3>> triangles;

    std::size_t size() const { return triangles.size(); }

    Vec3 face_cross(std::size_t t) const {
        const auto& tri = triangles[t];
        return (vertices[tri[1]] - vertices[tri[0]]).cross(vertices[tri[2]] - vertices[tri[0]]);
    }
    double area(std::size_t t) const { return 0.5 * face_cross(t).norm(); }
    Vec3 normal(std::size_t t) const { return face_cross(t).normalized(); }

    double surface_area() const {
        double a = 0.0;
        for (std::size_t t = 0; t < size(); ++t) a += area(t);
        return a;
    }

    void add_triangle(const Point3& a, const Point3& b, const Point3& c) {
        const auto base = static_cast<std::uint32_t>(vertices.size());
        vertices.insert(vertices.end(), {a, b, c});
        triangles.push_back({base, base + 1, base + 2});
        if (!(area(size() - 1) > 0.0)) {
            triangles.pop_back();
            vertices.resize(base);
            throw InvalidArgument("TriMesh: degenerate triangle");
        }
    }

    /// Planar quad a-b-c-d (in order around the boundary) as two triangles.
    void add_quad(const Point3& a, const Point3& b, const Point3& c, const Point3& d) {
        add_triangle(a, b, c);
        add_triangle(a, c, d);
    }

    void validate() const {
        for (const auto& tri : triangles)
            for (auto v : tri)
                if (v >= vertices.size()) throw InvalidArgument("TriMesh: vertex index out of range");
        for (std::size_t t = 0; t < size(); ++t)
            if (!(area(t) > 0.0)) throw InvalidArgument("TriMesh: degenerate triangle");
    }
};

/// Axis-aligned box resting on z = lo.z, emitted without its bottom face.
inline void add_box(TriMesh& mesh, const Point3& lo, const Point3& hi) {
    const Point3 p000(lo.x(), lo.y(), lo.z()), p100(hi.x(), lo.y(), lo.z()), p110(hi.x(), hi.y(), lo.z()),
        p010(lo.x(), hi.y(), lo.z());
    const Point3 p001(lo.x(), lo.y(), hi.z()), p101(hi.x(), lo.y(), hi.z()), p111(hi.x(), hi.y(), hi.z()),
        p011(lo.x(), hi.y(), hi.z());
    mesh.add_quad(p001, p101, p111, p011);  // top
    mesh.add_quad(p000, p100, p101, p001);  // -y
    mesh.add_quad(p100, p110, p111, p101);  // +x
    mesh.add_quad(p110, p010, p011, p111);  // +y
    mesh.add_quad(p010, p000, p001, p011);  // -x
}

struct RoomOptions {
    double width = 8.0;   // x
    double depth = 6.0;   // y
    double height = 3.0;  // z
    bool ceiling = false;
};

/// Indoor scene: floor, four walls, optional ceiling, and 3-6 seeded boxes.
/// The room spans [0,width] x [0,depth] x [0,height].
inline TriMesh make_room_scene(std::uint64_t seed, const RoomOptions& opt = {}) {
    TriMesh m;
    const double W = opt.width, D = opt.depth, H = opt.height;
    m.add_quad({0, 0, 0}, {W, 0, 0}, {W, D, 0}, {0, D, 0});  // floor
    m.add_quad({0, 0, 0}, {0, 0, H}, {W, 0, H}, {W, 0, 0});  // y = 0
    m.add_quad({W, 0, 0}, {W, 0, H}, {W, D, H}, {W, D, 0});  // x = W
    m.add_quad({W, D, 0}, {W, D, H}, {0, D, H}, {0, D, 0});  // y = D
    m.add_quad({0, D, 0}, {0, D, H}, {0, 0, H}, {0, 0, 0});  // x = 0
    if (opt.ceiling) m.add_quad({0, 0, H}, {0, D, H}, {W, D, H}, {W, 0, H});

    std::mt19937_64 rng(derive_seed(seed, 1));
    std::uniform_int_distribution<int> count(3, 6);
    std::uniform_real_distribution<double> footprint(0.4, 1.6), tall(0.4, 2.0), unit(0.0, 1.0);
    const int n_boxes = count(rng);
    for (int b = 0; b < n_boxes; ++b) {
        const double sx = footprint(rng), sy = footprint(rng), sz = std::min(tall(rng), H - 0.2);
        const double x0 = 0.2 + unit(rng) * (W - 0.4 - sx);
        const double y0 = 0.2 + unit(rng) * (D - 0.4 - sy);
        add_box(m, {x0, y0, 0.0}, {x0 + sx, y0 + sy, sz});
    }
    return m;
}

/// Area-weighted uniform surface samples with per-point face normals.
inline PointCloud sample_uniform(const TriMesh& mesh, std::size_t n, std::uint64_t seed) {
    if (mesh.size() == 0) throw InvalidArgument("sample_uniform: empty mesh");
    std::vector<double> cdf(mesh.size());
    double acc = 0.0;
    for (std::size_t t = 0; t < mesh.size(); ++t) {
        acc += mesh.area(t);
        cdf[t] = acc;
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    PointCloud out;
    out.points.reserve(n);
    std::vector<Vec3> normals;
    normals.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double r = unit(rng) * acc;
        const std::size_t t = std::min<std::size_t>(
            static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), r) - cdf.begin()), mesh.size() - 1);
        const double s = std::sqrt(unit(rng));
        const double u = unit(rng);
        const auto& tri = mesh.triangles[t];
        const Point3& a = mesh.vertices[tri[0]];
        const Point3& b = mesh.vertices[tri[1]];
        const Point3& c = mesh.vertices[tri[2]];
        out.points.push_back((1.0 - s) * a + s * (1.0 - u) * b + s * u * c);
        normals.push_back(mesh.normal(t));
    }
    out.normals = std::move(normals);
    return out;
}

enum class Thinning { none, inverse_square };

struct ScanSpec {
    Point3 sensor_position = Point3::Zero();
    std::size_t n_points = 10000;
    double min_distance = 1.5;
    Thinning thinning = Thinning::inverse_square;
    /// Multiply the keep probability by max(|n.r|, 0.1).
    bool incidence = true;

    void validate() const {
        if (n_points < 1) throw InvalidArgument("ScanSpec: n_points must be >= 1");
        if (!(min_distance > 0.0)) throw InvalidArgument("ScanSpec: min_distance must be positive");
        if (!sensor_position.allFinite()) throw InvalidArgument("ScanSpec: non-finite sensor position");
    }
};

/// Probability of keeping a surface point for the given scan.
inline double keep_probability(const Point3& x, const Vec3& normal, const ScanSpec& spec) {
    if (spec.thinning == Thinning::none) return 1.0;
    const Vec3 ray = x - spec.sensor_position;
    const double d = ray.norm();
    if (d <= 0.0) return 1.0;
    double p = (spec.min_distance / d) * (spec.min_distance / d);
    if (spec.incidence) p *= std::max(std::abs(normal.dot(ray / d)), 0.1);
    return std::min(1.0, p);
}

/// Lidar-like thinning. Each point survives independently; the draw for point j
/// depends only on (seed, j). Survivors are returned in the sensor frame.
inline PointCloud lidar_thin(const PointCloud& cloud, const ScanSpec& spec, std::uint64_t seed) {
    spec.validate();
    if (!cloud.normals) throw InvalidArgument("lidar_thin: cloud needs normals");
    PointCloud out;
    std::vector<Vec3> normals;
    for (std::size_t j = 0; j < cloud.size(); ++j) {
        const double p = keep_probability(cloud.points[j], (*cloud.normals)[j], spec);
        if (unit_from_key(derive_seed(seed, j)) < p) {
            out.points.push_back(cloud.points[j] - spec.sensor_position);
            normals.push_back((*cloud.normals)[j]);
        }
    }
    out.normals = std::move(normals);
    return out;
}

struct PerturbSpec {
    double angle_min_deg = 0.0;
    double angle_max_deg = 90.0;
    double translation_sigma = 1.0;
};

/// Random rigid motion: uniform unit axis, angle uniform in the range,
/// isotropic Gaussian translation.
inline RigidTransform random_perturbation(const PerturbSpec& spec, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Vec3 axis;
    do {
        axis = Vec3(gauss(rng), gauss(rng), gauss(rng));
    } while (axis.norm() < 1e-12);
    std::uniform_real_distribution<double> angle(spec.angle_min_deg, std::nextafter(spec.angle_max_deg, 1e300));
    const double a = spec.angle_max_deg > spec.angle_min_deg ? angle(rng) : spec.angle_min_deg;
    Vec3 t(gauss(rng), gauss(rng), gauss(rng));
    t *= spec.translation_sigma;
    return {axis_angle(axis, deg2rad(a)), t};
}

struct ScanPair {
    PointCloud a;
    PointCloud b;
    /// Maps points of `b` (as returned, perturbed) into the frame of `a`.
    RigidTransform ground_truth;
    RigidTransform perturbation;
};

struct ScanSet {
    std::vector<PointCloud> clouds;
    /// ground_truth[i] maps cloud i into the frame of cloud 0 (identity for i = 0).
    std::vector<RigidTransform> ground_truth;
    std::vector<RigidTransform> perturbations;
};

/// Independently sampled and thinned scans of `mesh`, one per spec. Every
/// scan after the first is moved by a seeded random perturbation after being
/// expressed in its own sensor frame.
inline ScanSet make_scans(const TriMesh& mesh, const std::vector<ScanSpec>& specs, const PerturbSpec& perturb,
                          std::uint64_t seed) {
    if (specs.empty()) throw InvalidArgument("make_scans: no sensors");
    ScanSet out;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        specs[i].validate();
        const PointCloud dense = sample_uniform(mesh, specs[i].n_points, derive_seed(seed, 10 + i));
        PointCloud scan = lidar_thin(dense, specs[i], derive_seed(seed, 20 + i));
        RigidTransform p;
        if (i > 0) {
            std::mt19937_64 rng(derive_seed(seed, 29 + i));
            p = random_perturbation(perturb, rng);
            scan = apply_transform(p, scan);
        }
        out.clouds.push_back(std::move(scan));
        out.perturbations.push_back(p);
        out.ground_truth.push_back(
            compose(RigidTransform::from_translation(specs[i].sensor_position - specs[0].sensor_position), p.inverse()));
    }
    return out;
}

/// Two-scan case of make_scans.
inline ScanPair make_pair(const TriMesh& mesh, const ScanSpec& spec_a, const ScanSpec& spec_b,
                          const PerturbSpec& perturb, std::uint64_t seed) {
    ScanSet s = make_scans(mesh, {spec_a, spec_b}, perturb, seed);
    return {std::move(s.clouds[0]), std::move(s.clouds[1]), s.ground_truth[1], s.perturbations[1]};
}

/// Sensor location inside the room footprint, `margin` from the walls, at
/// height in [z_lo, z_hi].
inline Point3 random_sensor_position(const TriMesh& mesh, std::mt19937_64& rng, double margin = 1.0,
                                     double z_lo = 1.0, double z_hi = 2.0) {
    const Aabb box = bounding_box(mesh.vertices);
    std::uniform_real_distribution<double> ux(box.lo.x() + margin, box.hi.x() - margin);
    std::uniform_real_distribution<double> uy(box.lo.y() + margin, box.hi.y() - margin);
    std::uniform_real_distribution<double> uz(z_lo, z_hi);
    const double x = ux(rng), y = uy(rng), z = uz(rng);
    return {x, y, z};
}

}  // namespace dare
