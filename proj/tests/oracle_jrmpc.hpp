#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "dare/mixture.hpp"

namespace dare::testing {

// Unweighted joint registration written out directly: posteriors by
// log-sum-exp, rotations from Horn's quaternion method, means and variances
// with the per-set 1/N_i average.
struct OracleResult {
    std::vector<RigidTransform> transforms;
    std::vector<double> loglik;
};

inline RigidTransform horn(const std::vector<Point3>& x, const std::vector<Point3>& y, const std::vector<double>& w) {
    double ws = 0;
    Vec3 cx = Vec3::Zero(), cy = Vec3::Zero();
    for (std::size_t j = 0; j < x.size(); ++j) {
        ws += w[j];
        cx += w[j] * x[j];
        cy += w[j] * y[j];
    }
    cx /= ws;
    cy /= ws;
    Mat3 s = Mat3::Zero();
    for (std::size_t j = 0; j < x.size(); ++j) s += w[j] * (x[j] - cx) * (y[j] - cy).transpose();
    const double sxx = s(0, 0), sxy = s(0, 1), sxz = s(0, 2), syx = s(1, 0), syy = s(1, 1), syz = s(1, 2),
                 szx = s(2, 0), szy = s(2, 1), szz = s(2, 2);
    Eigen::Matrix4d n;
    n << sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
         syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
         szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
         sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(n);
    const Eigen::Vector4d q = es.eigenvectors().col(3);
    const double qw = q[0], qx = q[1], qy = q[2], qz = q[3];
    Mat3 r;
    r << qw * qw + qx * qx - qy * qy - qz * qz, 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy),
         2 * (qx * qy + qw * qz), qw * qw - qx * qx + qy * qy - qz * qz, 2 * (qy * qz - qw * qx),
         2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), qw * qw - qx * qx - qy * qy + qz * qz;
    r = nearest_rotation(r);
    return {r, cy - r * cx};
}

inline OracleResult oracle_jrmpc(const std::vector<PointCloud>& clouds, GmmModel m, std::size_t iters) {
    const std::size_t M = clouds.size(), K = m.means.size();
    OracleResult out;
    out.transforms.assign(M, RigidTransform());
    for (std::size_t it = 0; it <= iters; ++it) {
        std::vector<std::vector<std::vector<double>>> a(M);
        double ll = 0;
        for (std::size_t i = 0; i < M; ++i) {
            double s = 0;
            for (const auto& p : clouds[i].points) {
                const Point3 v = out.transforms[i](p);
                std::vector<double> lp(K + 1);
                for (std::size_t k = 0; k < K; ++k)
                    lp[k] = std::log(m.component_prior) - 1.5 * std::log(2 * M_PI * m.variances[k]) -
                            (v - m.means[k]).squaredNorm() / (2 * m.variances[k]);
                lp[K] = std::log(m.outlier_prior * m.outlier_density);
                const double mx = *std::max_element(lp.begin(), lp.end());
                double z = 0;
                for (double l : lp) z += std::exp(l - mx);
                const double lz = mx + std::log(z);
                s += lz;
                for (double& l : lp) l = std::exp(l - lz);
                a[i].push_back(lp);
            }
            ll += s / static_cast<double>(clouds[i].size());
        }
        out.loglik.push_back(ll);
        if (it == iters) break;

        for (std::size_t i = 0; i < M; ++i) {
            std::vector<Point3> y;
            std::vector<double> w;
            for (std::size_t j = 0; j < clouds[i].size(); ++j) {
                double l = 0;
                Vec3 t = Vec3::Zero();
                for (std::size_t k = 0; k < K; ++k) {
                    l += a[i][j][k] / m.variances[k];
                    t += a[i][j][k] / m.variances[k] * m.means[k];
                }
                w.push_back(l);
                y.push_back(t / l);
            }
            out.transforms[i] = horn(clouds[i].points, y, w);
        }
        for (std::size_t k = 0; k < K; ++k) {
            double den = 0;
            Vec3 num = Vec3::Zero();
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t j = 0; j < clouds[i].size(); ++j) {
                    const double c = a[i][j][k] / static_cast<double>(clouds[i].size());
                    den += c;
                    num += c * out.transforms[i](clouds[i].points[j]);
                }
            if (den < 1e-12) continue;
            m.means[k] = num / den;
            double ss = 0;
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t j = 0; j < clouds[i].size(); ++j)
                    ss += a[i][j][k] / static_cast<double>(clouds[i].size()) *
                          (out.transforms[i](clouds[i].points[j]) - m.means[k]).squaredNorm();
            m.variances[k] = std::max(ss / (3 * den), 1e-6);
        }
    }
    return out;
}

}  // namespace dare::testing
