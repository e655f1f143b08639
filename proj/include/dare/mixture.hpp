#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "dare/error.hpp"
#include "dare/geom.hpp"
#include "dare/parallel.hpp"
#include "dare/weights.hpp"

namespace dare {

/// Isotropic Gaussian mixture in the reference frame plus a uniform outlier
/// component. Component priors are shared and stay fixed during inference.
struct GmmModel {
    std::vector<Point3> means;
    std::vector<double> variances;
    double component_prior = 0.0;
    double outlier_prior = 0.0;
    double outlier_density = 1.0;

    std::size_t size() const { return means.size(); }
};

struct RegistrationConfig {
    std::size_t K = 200;
    std::size_t iterations = 50;
    double outlier_ratio = 0.005;
    double gamma = 0.9;
    std::size_t L = 10;
    double clip_factor = 8.0;
    WeightMethod weight_method = WeightMethod::empirical;
    std::uint64_t seed = 0;
    double variance_floor = 1e-6;
    /// Relative change of the objective below which iteration stops; 0 disables.
    double stop_tolerance = 0.0;
    /// Median filter + clipping of non-uniform weights.
    bool regularize = true;
    /// 0 resolves through DARE_THREADS / hardware concurrency.
    unsigned threads = 0;

    static RegistrationConfig pairwise() { return {}; }
    static RegistrationConfig joint() {
        RegistrationConfig c;
        c.K = 300;
        return c;
    }

    void validate() const {
        if (K < 1) throw InvalidArgument("config: K must be >= 1");
        if (iterations < 1) throw InvalidArgument("config: iterations must be >= 1");
        if (!(outlier_ratio >= 0.0 && outlier_ratio < 1.0)) throw InvalidArgument("config: outlier_ratio must be in [0,1)");
        if (!(gamma >= 0.0 && gamma <= 1.0)) throw InvalidArgument("config: gamma must be in [0,1]");
        if (L < 3) throw InvalidArgument("config: L must be >= 3");
        if (!(clip_factor > 0.0)) throw InvalidArgument("config: clip_factor must be positive");
        if (!(variance_floor > 0.0)) throw InvalidArgument("config: variance_floor must be positive");
    }
};

using RespMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Posterior component memberships. Per set an N_i x (K+1) matrix, last column
/// the outlier component, plus log sum_k p(x, k) for every point.
struct Responsibilities {
    std::vector<RespMatrix> sets;
    std::vector<Eigen::VectorXd> log_evidence;
};

struct IterationStats {
    double objective_before = 0.0;  ///< Q(theta_n; theta_n)
    double objective_after = 0.0;   ///< Q(theta_n+1; theta_n)
    std::vector<std::size_t> frozen_sets;
};

struct RegistrationResult {
    std::vector<RigidTransform> transforms;
    GmmModel model;
    /// EM lower bound at its tight point after every E-step, i.e. the weighted
    /// log-likelihood sum_i 1/N_i sum_j f_ij log p(phi(x_ij)). Length = iterations + 1.
    std::vector<double> objective_trace;
    std::vector<IterationStats> iterations;
    std::size_t converged_iterations = 0;
    std::vector<ObservationWeights> weights;

    /// Transforms re-expressed so that the first set's frame is the reference.
    std::vector<RigidTransform> relative_to_first() const {
        std::vector<RigidTransform> out;
        const RigidTransform inv0 = transforms.front().inverse();
        out.emplace_back();
        for (std::size_t i = 1; i < transforms.size(); ++i) out.push_back(compose(inv0, transforms[i]));
        return out;
    }
};

namespace detail {

inline constexpr std::size_t kChunk = 512;

inline double log_gauss_norm(double var) { return -1.5 * std::log(2.0 * std::numbers::pi * var); }

inline void check_alignment(std::span<const PointCloud> clouds, std::span<const ObservationWeights> weights) {
    if (weights.size() != clouds.size()) throw InvalidArgument("weights: one entry per point set required");
    for (std::size_t i = 0; i < clouds.size(); ++i)
        if (weights[i].size() != clouds[i].size()) throw InvalidArgument("weights: length differs from point count");
}

/// Volume and diagonal of the box spanned by the principal axes of `pts`.
/// Both are invariant to rigid motion of the input.
inline std::pair<double, double> principal_box(const std::vector<Point3>& pts) {
    Vec3 mean = Vec3::Zero();
    for (const auto& p : pts) mean += p;
    mean /= static_cast<double>(pts.size());
    Mat3 c = Mat3::Zero();
    for (const auto& p : pts) c.noalias() += (p - mean) * (p - mean).transpose();
    Eigen::SelfAdjointEigenSolver<Mat3> eig(c);
    const Mat3 axes = eig.eigenvectors();
    Aabb box;
    for (const auto& p : pts) box.extend(axes.transpose() * (p - mean));
    const Vec3 ext = box.extent();
    const Vec3 inflated = 1.2 * ext;
    return {std::max(inflated.prod(), 1e-9), ext.norm()};
}

}  // namespace detail

/// Seeded initial mixture: K means drawn without replacement from the pooled
/// transformed points, common variance (d / K^(1/3))^2 with d the pooled
/// extent diagonal, outlier density 1/V over the 10%-inflated extent box.
inline GmmModel init_model(std::span<const PointCloud> clouds, std::span<const RigidTransform> transforms,
                           const RegistrationConfig& cfg) {
    if (clouds.empty()) throw InvalidArgument("init_model: no point sets");
    if (transforms.size() != clouds.size()) throw InvalidArgument("init_model: one transform per set required");
    std::vector<Point3> pooled;
    for (std::size_t i = 0; i < clouds.size(); ++i)
        for (const auto& p : clouds[i].points) pooled.push_back(transforms[i](p));
    if (pooled.size() < cfg.K) throw InvalidArgument("too few points for K components");

    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> idx(pooled.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    GmmModel m;
    m.means.reserve(cfg.K);
    for (std::size_t k = 0; k < cfg.K; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, idx.size() - 1);
        std::swap(idx[k], idx[pick(rng)]);
        m.means.push_back(pooled[idx[k]]);
    }

    const auto [volume, diag] = detail::principal_box(pooled);
    const double sigma = diag / std::cbrt(static_cast<double>(cfg.K));
    m.variances.assign(cfg.K, std::max(sigma * sigma, cfg.variance_floor));
    m.component_prior = (1.0 - cfg.outlier_ratio) / static_cast<double>(cfg.K);
    m.outlier_prior = cfg.outlier_ratio;
    m.outlier_density = 1.0 / volume;
    return m;
}

/// Posterior memberships alpha_ijk. Observation weights do not enter here.
inline Responsibilities e_step(std::span<const PointCloud> clouds, std::span<const RigidTransform> transforms,
                               const GmmModel& model, unsigned threads = 1) {
    const std::size_t K = model.size();
    std::vector<double> log_coef(K), inv_two_var(K);
    for (std::size_t k = 0; k < K; ++k) {
        log_coef[k] = std::log(model.component_prior) + detail::log_gauss_norm(model.variances[k]);
        inv_two_var[k] = 0.5 / model.variances[k];
    }
    const bool has_outlier = model.outlier_prior > 0.0;
    const double log_out = has_outlier ? std::log(model.outlier_prior * model.outlier_density)
                                       : -std::numeric_limits<double>::infinity();

    Responsibilities r;
    r.sets.resize(clouds.size());
    r.log_evidence.resize(clouds.size());
    for (std::size_t i = 0; i < clouds.size(); ++i) {
        const auto& pts = clouds[i].points;
        RespMatrix& a = r.sets[i];
        a.resize(static_cast<Eigen::Index>(pts.size()), static_cast<Eigen::Index>(K + 1));
        Eigen::VectorXd& le = r.log_evidence[i];
        le.resize(static_cast<Eigen::Index>(pts.size()));
        const RigidTransform& T = transforms[i];

        for_each_chunk(pts.size(), detail::kChunk, threads, [&](std::size_t, std::size_t b, std::size_t e) {
            for (std::size_t j = b; j < e; ++j) {
                const Point3 v = T(pts[j]);
                double* row = a.row(static_cast<Eigen::Index>(j)).data();
                double mx = log_out;
                for (std::size_t k = 0; k < K; ++k) {
                    const double lp = log_coef[k] - (v - model.means[k]).squaredNorm() * inv_two_var[k];
                    row[k] = lp;
                    mx = std::max(mx, lp);
                }
                double sum = 0.0;
                for (std::size_t k = 0; k < K; ++k) {
                    row[k] = std::exp(row[k] - mx);
                    sum += row[k];
                }
                row[K] = has_outlier ? std::exp(log_out - mx) : 0.0;
                sum += row[K];
                const double inv = 1.0 / sum;
                for (std::size_t k = 0; k <= K; ++k) row[k] *= inv;
                le[static_cast<Eigen::Index>(j)] = mx + std::log(sum);
            }
        });
    }
    return r;
}

/// Expected weighted complete-data log-likelihood
/// Q = sum_i 1/N_i sum_j f_ij sum_k alpha_ijk log p(phi(x_ij), k | theta).
inline double weighted_objective(std::span<const PointCloud> clouds, std::span<const RigidTransform> transforms,
                                 std::span<const ObservationWeights> weights, const Responsibilities& resp,
                                 const GmmModel& model) {
    detail::check_alignment(clouds, weights);
    const std::size_t K = model.size();
    std::vector<double> log_coef(K), inv_two_var(K);
    for (std::size_t k = 0; k < K; ++k) {
        log_coef[k] = std::log(model.component_prior) + detail::log_gauss_norm(model.variances[k]);
        inv_two_var[k] = 0.5 / model.variances[k];
    }
    const double log_out =
        model.outlier_prior > 0.0 ? std::log(model.outlier_prior * model.outlier_density) : 0.0;

    double total = 0.0;
    for (std::size_t i = 0; i < clouds.size(); ++i) {
        const auto& pts = clouds[i].points;
        const RespMatrix& a = resp.sets[i];
        double set_sum = 0.0;
        for (std::size_t j = 0; j < pts.size(); ++j) {
            const Point3 v = transforms[i](pts[j]);
            const auto jj = static_cast<Eigen::Index>(j);
            double s = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
                const double alpha = a(jj, static_cast<Eigen::Index>(k));
                if (alpha == 0.0) continue;
                s += alpha * (log_coef[k] - (v - model.means[k]).squaredNorm() * inv_two_var[k]);
            }
            const double alpha_out = a(jj, static_cast<Eigen::Index>(K));
            if (alpha_out > 0.0) s += alpha_out * log_out;
            set_sum += weights[i].values[j] * s;
        }
        total += set_sum / static_cast<double>(pts.size());
    }
    return total;
}

/// Tight EM lower bound: Q(theta_n; theta_n) plus the weighted posterior entropy,
/// which equals sum_i 1/N_i sum_j f_ij log p(phi(x_ij) | theta_n).
inline double lower_bound(std::span<const ObservationWeights> weights, const Responsibilities& resp) {
    double total = 0.0;
    for (std::size_t i = 0; i < resp.sets.size(); ++i) {
        const auto& le = resp.log_evidence[i];
        double s = 0.0;
        for (Eigen::Index j = 0; j < le.size(); ++j) s += weights[i].values[static_cast<std::size_t>(j)] * le[j];
        total += s / static_cast<double>(le.size());
    }
    return total;
}

struct TransformUpdate {
    std::vector<RigidTransform> transforms;
    std::vector<std::size_t> frozen_sets;  ///< sets whose Procrustes weights all vanished
};

/// Weighted orthogonal Procrustes: R, t minimising sum_j w_j ||R x_j + t - y_j||^2.
/// Returns nullopt when the total weight is zero.
inline std::optional<RigidTransform> weighted_procrustes(std::span<const Point3> x, std::span<const Point3> y,
                                                         std::span<const double> w) {
    double wsum = 0.0;
    Vec3 cx = Vec3::Zero(), cy = Vec3::Zero();
    for (std::size_t j = 0; j < x.size(); ++j) {
        wsum += w[j];
        cx += w[j] * x[j];
        cy += w[j] * y[j];
    }
    if (!(wsum > 0.0) || !std::isfinite(wsum)) return std::nullopt;
    cx /= wsum;
    cy /= wsum;
    Mat3 h = Mat3::Zero();
    for (std::size_t j = 0; j < x.size(); ++j) h.noalias() += w[j] * (x[j] - cx) * (y[j] - cy).transpose();

    Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Mat3& u = svd.matrixU();
    const Mat3& v = svd.matrixV();
    Mat3 d = Mat3::Identity();
    if ((v * u.transpose()).determinant() < 0.0) d(2, 2) = -1.0;
    Mat3 r = v * d * u.transpose();
    if (!is_rotation(r)) r = nearest_rotation(r);
    return RigidTransform(r, cy - r * cx);
}

/// First conditional maximisation: per-set rigid update with the mixture fixed.
inline TransformUpdate m_step_transforms(std::span<const PointCloud> clouds, std::span<const ObservationWeights> weights,
                                         const Responsibilities& resp, const GmmModel& model,
                                         std::span<const RigidTransform> previous) {
    detail::check_alignment(clouds, weights);
    const std::size_t K = model.size();
    std::vector<double> inv_var(K);
    for (std::size_t k = 0; k < K; ++k) inv_var[k] = 1.0 / model.variances[k];

    TransformUpdate out;
    for (std::size_t i = 0; i < clouds.size(); ++i) {
        const auto& pts = clouds[i].points;
        const RespMatrix& a = resp.sets[i];
        std::vector<double> lambda(pts.size());
        std::vector<Point3> target(pts.size());
        for (std::size_t j = 0; j < pts.size(); ++j) {
            const auto jj = static_cast<Eigen::Index>(j);
            double l = 0.0;
            Vec3 y = Vec3::Zero();
            for (std::size_t k = 0; k < K; ++k) {
                const double c = a(jj, static_cast<Eigen::Index>(k)) * inv_var[k];
                l += c;
                y += c * model.means[k];
            }
            const double f = weights[i].values[j];
            lambda[j] = f * l;
            target[j] = l > 0.0 ? Point3(y / l) : pts[j];
        }
        auto t = weighted_procrustes(pts, target, lambda);
        if (t) {
            out.transforms.push_back(*t);
        } else {
            out.transforms.push_back(previous[i]);
            out.frozen_sets.push_back(i);
        }
    }
    return out;
}

/// Second conditional maximisation: means and variances given the updated
/// transforms. Priors and outlier density stay fixed.
inline GmmModel m_step_model(std::span<const PointCloud> clouds, std::span<const RigidTransform> transforms,
                             std::span<const ObservationWeights> weights, const Responsibilities& resp,
                             const GmmModel& previous, const RegistrationConfig& cfg, unsigned threads = 1) {
    detail::check_alignment(clouds, weights);
    const std::size_t K = previous.size();

    std::vector<std::vector<Point3>> moved(clouds.size());
    for (std::size_t i = 0; i < clouds.size(); ++i) {
        moved[i].reserve(clouds[i].size());
        for (const auto& p : clouds[i].points) moved[i].push_back(transforms[i](p));
    }

    // Accumulate per fixed-size chunk, reduce chunks in order.
    auto accumulate = [&](auto&& per_point, std::size_t width) {
        std::vector<double> total(K * width, 0.0);
        for (std::size_t i = 0; i < clouds.size(); ++i) {
            const std::size_t n = moved[i].size();
            const double set_scale = 1.0 / static_cast<double>(n);
            const std::size_t nc = chunk_count(n, detail::kChunk);
            std::vector<std::vector<double>> partial(nc, std::vector<double>(K * width, 0.0));
            for_each_chunk(n, detail::kChunk, threads, [&](std::size_t c, std::size_t b, std::size_t e) {
                auto& acc = partial[c];
                for (std::size_t j = b; j < e; ++j) {
                    const double f = weights[i].values[j] * set_scale;
                    const double* row = resp.sets[i].row(static_cast<Eigen::Index>(j)).data();
                    per_point(moved[i][j], f, row, acc.data());
                }
            });
            for (const auto& p : partial)
                for (std::size_t q = 0; q < total.size(); ++q) total[q] += p[q];
        }
        return total;
    };

    const auto first = accumulate(
        [K](const Point3& v, double f, const double* row, double* acc) {
            for (std::size_t k = 0; k < K; ++k) {
                const double w = f * row[k];
                double* s = acc + 4 * k;
                s[0] += w;
                s[1] += w * v[0];
                s[2] += w * v[1];
                s[3] += w * v[2];
            }
        },
        4);

    GmmModel m = previous;
    std::vector<bool> active(K, false);
    for (std::size_t k = 0; k < K; ++k) {
        const double w = first[4 * k];
        if (w < 1e-12) continue;
        active[k] = true;
        m.means[k] = Point3(first[4 * k + 1], first[4 * k + 2], first[4 * k + 3]) / w;
    }

    const auto second = accumulate(
        [&m, K](const Point3& v, double f, const double* row, double* acc) {
            for (std::size_t k = 0; k < K; ++k) acc[k] += f * row[k] * (v - m.means[k]).squaredNorm();
        },
        1);

    for (std::size_t k = 0; k < K; ++k) {
        if (!active[k]) continue;
        m.variances[k] = std::max(second[k] / (3.0 * first[4 * k]), cfg.variance_floor);
    }
    return m;
}

/// Computes the regularised observation weights for one set in its own frame.
inline ObservationWeights compute_weights(const PointCloud& cloud, const RegistrationConfig& cfg) {
    ObservationWeights w;
    switch (cfg.weight_method) {
        case WeightMethod::uniform: return uniform_weights(cloud.size());
        case WeightMethod::sensor: w = sensor_weights(cloud, cfg.gamma); break;
        case WeightMethod::empirical: w = empirical_weights(cloud, cfg.L, false); break;
        case WeightMethod::empirical_full: w = empirical_weights(cloud, cfg.L, true); break;
    }
    if (cfg.regularize) w = regularize_weights(w, cloud, cfg.L, cfg.clip_factor);
    return w.normalized();
}

/// EM/ECM driver with precomputed observation weights, rescaled per set to mean 1.
inline RegistrationResult register_with_weights(std::span<const PointCloud> clouds,
                                                std::vector<ObservationWeights> weights,
                                                const RegistrationConfig& cfg,
                                                std::optional<std::vector<RigidTransform>> init = std::nullopt) {
    cfg.validate();
    if (clouds.size() < 2) throw InvalidArgument("register: at least two point sets required");
    for (const auto& c : clouds)
        if (c.size() < 3) throw InvalidArgument("register: every point set needs at least 3 points");
    detail::check_alignment(clouds, weights);
    for (const auto& w : weights)
        for (double v : w.values)
            if (!(v > 0.0) || !std::isfinite(v)) throw InvalidArgument("register: weights must be positive and finite");

    const unsigned threads = resolve_threads(cfg.threads);
    for (auto& w : weights) w = w.normalized();

    RegistrationResult res;
    res.transforms = init ? *init : std::vector<RigidTransform>(clouds.size());
    if (res.transforms.size() != clouds.size()) throw InvalidArgument("register: one init transform per set required");
    res.weights = std::move(weights);
    res.model = init_model(clouds, res.transforms, cfg);

    for (std::size_t it = 0;; ++it) {
        const Responsibilities resp = e_step(clouds, res.transforms, res.model, threads);
        const double bound = lower_bound(res.weights, resp);
        res.objective_trace.push_back(bound);
        if (it == cfg.iterations) break;
        if (cfg.stop_tolerance > 0.0 && it > 0) {
            const double prev = res.objective_trace[it - 1];
            if (std::abs(bound - prev) <= cfg.stop_tolerance * std::max(1.0, std::abs(prev))) break;
        }

        IterationStats stats;
        stats.objective_before = weighted_objective(clouds, res.transforms, res.weights, resp, res.model);
        TransformUpdate tu = m_step_transforms(clouds, res.weights, resp, res.model, res.transforms);
        res.transforms = std::move(tu.transforms);
        stats.frozen_sets = std::move(tu.frozen_sets);
        res.model = m_step_model(clouds, res.transforms, res.weights, resp, res.model, cfg, threads);
        stats.objective_after = weighted_objective(clouds, res.transforms, res.weights, resp, res.model);
        res.iterations.push_back(std::move(stats));
        res.converged_iterations = it + 1;
    }
    return res;
}

/// Full pipeline: weights per set (own sensor frame), regularisation, mean-1
/// normalisation, seeded initialisation, then `cfg.iterations` ECM rounds.
inline RegistrationResult register_point_sets(std::span<const PointCloud> clouds, const RegistrationConfig& cfg,
                                              std::optional<std::vector<RigidTransform>> init = std::nullopt) {
    cfg.validate();
    std::vector<ObservationWeights> w;
    w.reserve(clouds.size());
    for (const auto& c : clouds) w.push_back(compute_weights(c, cfg));
    return register_with_weights(clouds, std::move(w), cfg, std::move(init));
}

}  // namespace dare
