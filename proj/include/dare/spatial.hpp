#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <queue>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dare/error.hpp"
#include "dare/geom.hpp"

namespace dare {

struct Neighbor {
    std::size_t index;
    double distance;
};

/// Static 3D kd-tree. Results are exact and match a linear scan, with ties
/// broken by ascending point index.
class KdTree {
public:
    KdTree() = default;

    explicit KdTree(std::vector<Point3> points) : points_(std::move(points)) {
        order_.resize(points_.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        if (!points_.empty()) {
            nodes_.reserve(2 * points_.size() / kLeafSize + 2);
            build(0, points_.size());
        }
    }

    explicit KdTree(const PointCloud& cloud) : KdTree(cloud.points) {}

    std::size_t size() const { return points_.size(); }
    bool empty() const { return points_.empty(); }
    const std::vector<Point3>& points() const { return points_; }

    /// k nearest neighbours sorted by (distance, index). Returns min(k, size()) entries.
    std::vector<Neighbor> knn(const Point3& query, std::size_t k) const {
        if (empty()) throw InvalidArgument("empty index");
        if (k == 0) throw InvalidArgument("knn: k must be >= 1");
        k = std::min(k, points_.size());

        // Max-heap on (squared distance, index): top is the current worst candidate.
        std::priority_queue<Key> heap;
        search(0, query, k, heap);

        std::vector<Neighbor> out(heap.size());
        for (std::size_t i = out.size(); i-- > 0;) {
            out[i] = {heap.top().index, std::sqrt(heap.top().dist2)};
            heap.pop();
        }
        return out;
    }

private:
    static constexpr std::size_t kLeafSize = 8;

    struct Key {
        double dist2;
        std::size_t index;
        bool operator<(const Key& o) const {
            return dist2 < o.dist2 || (dist2 == o.dist2 && index < o.index);
        }
    };

    struct Node {
        std::size_t begin = 0, end = 0;  // range into order_
        int axis = -1;                   // -1 for leaves
        double split = 0.0;
        std::size_t left = 0, right = 0;
    };

    std::size_t build(std::size_t begin, std::size_t end) {
        const std::size_t id = nodes_.size();
        nodes_.push_back({begin, end});
        if (end - begin <= kLeafSize) return id;

        Aabb box;
        for (std::size_t i = begin; i < end; ++i) box.extend(points_[order_[i]]);
        int axis = 0;
        box.extent().maxCoeff(&axis);
        if (box.extent()[axis] == 0.0) return id;  // all coincident: keep as leaf

        const std::size_t mid = begin + (end - begin) / 2;
        std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                         order_.begin() + static_cast<std::ptrdiff_t>(mid),
                         order_.begin() + static_cast<std::ptrdiff_t>(end),
                         [&](std::size_t a, std::size_t b) { return points_[a][axis] < points_[b][axis]; });
        const double split = points_[order_[mid]][axis];
        const std::size_t l = build(begin, mid);
        const std::size_t r = build(mid, end);
        nodes_[id].axis = axis;
        nodes_[id].split = split;
        nodes_[id].left = l;
        nodes_[id].right = r;
        return id;
    }

    void search(std::size_t node_id, const Point3& q, std::size_t k, std::priority_queue<Key>& heap) const {
        const Node& node = nodes_[node_id];
        if (node.axis < 0) {
            for (std::size_t i = node.begin; i < node.end; ++i) {
                const std::size_t idx = order_[i];
                const Key key{(points_[idx] - q).squaredNorm(), idx};
                if (heap.size() < k) {
                    heap.push(key);
                } else if (key < heap.top()) {
                    heap.pop();
                    heap.push(key);
                }
            }
            return;
        }
        // Left holds coordinates <= split, right holds >= split.
        const double diff = q[node.axis] - node.split;
        const std::size_t near = diff < 0.0 ? node.left : node.right;
        const std::size_t far = diff < 0.0 ? node.right : node.left;
        search(near, q, k, heap);
        if (heap.size() < k || diff * diff <= heap.top().dist2) search(far, q, k, heap);
    }

    std::vector<Point3> points_;
    std::vector<std::size_t> order_;
    std::vector<Node> nodes_;
};

/// Free-function form of KdTree::knn.
inline std::vector<Neighbor> knn(const KdTree& tree, const Point3& query, std::size_t k) {
    return tree.knn(query, k);
}

/// Eigen-decomposition of a local neighbourhood covariance. Eigenvalues are
/// sorted descending; eigenvector columns follow the same order, so column 2
/// approximates the surface normal and eigvals[2] the variance along it.
struct LocalSurfaceStats {
    Vec3 mean = Vec3::Zero();
    Vec3 eigvals = Vec3::Zero();
    Mat3 eigvecs = Mat3::Identity();
    std::size_t neighbor_count = 0;

    Vec3 normal() const { return eigvecs.col(2); }
    Mat3 covariance() const { return eigvecs * eigvals.asDiagonal() * eigvecs.transpose(); }
};

/// Sample covariance (divisor n-1) of the given points and its sorted eigensystem.
inline LocalSurfaceStats covariance_stats(const std::vector<Point3>& pts) {
    const std::size_t n = pts.size();
    if (n < 3) throw InvalidArgument("degenerate neighborhood");
    LocalSurfaceStats s;
    s.neighbor_count = n;
    for (const auto& p : pts) s.mean += p;
    s.mean /= static_cast<double>(n);
    Mat3 c = Mat3::Zero();
    for (const auto& p : pts) {
        const Vec3 d = p - s.mean;
        c.noalias() += d * d.transpose();
    }
    c /= static_cast<double>(n - 1);

    Eigen::SelfAdjointEigenSolver<Mat3> eig(c);
    // Eigen returns ascending order.
    for (int a = 0; a < 3; ++a) {
        s.eigvals[a] = std::max(eig.eigenvalues()[2 - a], 0.0);
        s.eigvecs.col(a) = eig.eigenvectors().col(2 - a);
    }
    if (s.eigvecs.determinant() < 0.0) s.eigvecs.col(2) = -s.eigvecs.col(2);
    return s;
}

/// Statistics over the L nearest neighbours of point `index` (itself included).
inline LocalSurfaceStats local_stats(const KdTree& tree, std::size_t index, std::size_t L) {
    if (L < 3) throw InvalidArgument("degenerate neighborhood");
    if (index >= tree.size()) throw InvalidArgument("local_stats: index out of range");
    if (tree.size() < L) throw InvalidArgument("local_stats: cloud has fewer than L points");
    const auto nbrs = tree.knn(tree.points()[index], L);
    std::vector<Point3> pts;
    pts.reserve(nbrs.size());
    for (const auto& nb : nbrs) pts.push_back(tree.points()[nb.index]);
    return covariance_stats(pts);
}

inline LocalSurfaceStats local_stats(const PointCloud& cloud, std::size_t index, std::size_t L) {
    return local_stats(KdTree(cloud), index, L);
}

/// Fills `normals` with the smallest-variance PCA direction of each point's
/// L-neighbourhood. When `orient_toward` is set, normals are flipped to face it.
inline PointCloud estimate_normals(const PointCloud& cloud, std::size_t L,
                                   std::optional<Point3> orient_toward = std::nullopt) {
    const KdTree tree(cloud);
    std::vector<Vec3> normals(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        Vec3 n = local_stats(tree, i, L).normal().normalized();
        if (orient_toward && n.dot(*orient_toward - cloud.points[i]) < 0.0) n = -n;
        normals[i] = n;
    }
    PointCloud out = cloud;
    out.normals = std::move(normals);
    return out;
}

}  // namespace dare
