#include <gtest/gtest.h>

#include "dare/mixture.hpp"
#include "dare/synth.hpp"
#include "oracle_jrmpc.hpp"
#include "test_util.hpp"

using namespace dare;
using dare::testing::oracle_jrmpc;

namespace {

std::vector<PointCloud> room_pair(std::uint64_t seed, std::size_t n, double angle_deg, double shift) {
    const TriMesh mesh = make_room_scene(seed);
    PointCloud a = sample_uniform(mesh, n, derive_seed(seed, 1));
    PointCloud b = sample_uniform(mesh, n, derive_seed(seed, 2));
    const Vec3 c(4, 3, 1);
    a = apply_transform(RigidTransform::from_translation(-c), a);
    b = apply_transform(RigidTransform::from_translation(-c), b);
    std::mt19937_64 rng(derive_seed(seed, 3));
    std::normal_distribution<double> g;
    const RigidTransform p(axis_angle(Vec3(g(rng), g(rng), g(rng)), deg2rad(angle_deg)), shift * Vec3(g(rng), g(rng), g(rng)).normalized());
    return {a, apply_transform(p, b)};
}

double max_abs_diff(const RigidTransform& a, const RigidTransform& b) {
    return std::max((a.rotation() - b.rotation()).cwiseAbs().maxCoeff(),
                    (a.translation() - b.translation()).cwiseAbs().maxCoeff());
}

}  // namespace

TEST(InitModel, SinglePointSingleComponent) {
    RegistrationConfig cfg;
    cfg.K = 1;
    const std::vector<PointCloud> c{PointCloud({Point3(1, 2, 3)})};
    const std::vector<RigidTransform> t(1);
    const auto m = init_model(c, t, cfg);
    EXPECT_EQ(m.means[0], Point3(1, 2, 3));
    EXPECT_GT(m.variances[0], 0.0);
}

TEST(InitModel, PriorsFromOutlierRatio) {
    std::mt19937_64 rng(1);
    const std::vector<PointCloud> c{PointCloud(dare::testing::random_points(rng, 500))};
    const std::vector<RigidTransform> t(1);
    const auto m = init_model(c, t, RegistrationConfig{});
    EXPECT_DOUBLE_EQ(m.component_prior, 0.004975);
    EXPECT_EQ(m.outlier_prior, 0.005);
    EXPECT_EQ(m.size(), 200u);
}

TEST(InitModel, DeterministicAndWithoutReplacement) {
    std::mt19937_64 rng(2);
    const std::vector<PointCloud> c{PointCloud(dare::testing::random_points(rng, 300))};
    const std::vector<RigidTransform> t(1);
    RegistrationConfig cfg;
    cfg.seed = 77;
    const auto a = init_model(c, t, cfg), b = init_model(c, t, cfg);
    EXPECT_EQ(a.means, b.means);
    EXPECT_EQ(a.variances, b.variances);
    auto sorted = a.means;
    std::sort(sorted.begin(), sorted.end(), [](const Point3& p, const Point3& q) {
        return std::lexicographical_compare(p.data(), p.data() + 3, q.data(), q.data() + 3);
    });
    EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
}

TEST(InitModel, TooFewPoints) {
    const std::vector<PointCloud> c{PointCloud({Point3(0, 0, 0), Point3(1, 0, 0)})};
    const std::vector<RigidTransform> t(1);
    RegistrationConfig cfg;
    cfg.K = 3;
    EXPECT_THROW(init_model(c, t, cfg), InvalidArgument);
}

TEST(InitModel, InvariantUnderCommonRigidMotion) {
    std::mt19937_64 rng(3);
    const std::vector<PointCloud> c{PointCloud(dare::testing::random_points(rng, 400, -3, 3))};
    const auto g = dare::testing::random_transform(rng, 4.0);
    const std::vector<RigidTransform> id(1), moved{g};
    RegistrationConfig cfg;
    cfg.K = 20;
    const auto a = init_model(c, id, cfg), b = init_model(c, moved, cfg);
    EXPECT_NEAR(a.variances[0], b.variances[0], 1e-9);
    EXPECT_NEAR(a.outlier_density / b.outlier_density, 1.0, 1e-9);
    for (std::size_t k = 0; k < 20; ++k) EXPECT_LT((g(a.means[k]) - b.means[k]).norm(), 1e-9);
}

TEST(EStep, SingleComponentNoOutlier) {
    GmmModel m{{Point3::Zero()}, {1.0}, 1.0, 0.0, 1.0};
    const std::vector<PointCloud> c{PointCloud({Point3(5, 0, 0), Point3(0, 1, 0)})};
    const std::vector<RigidTransform> t(1);
    const auto r = e_step(c, t, m);
    EXPECT_EQ(r.sets[0](0, 0), 1.0);
    EXPECT_EQ(r.sets[0](1, 0), 1.0);
    EXPECT_EQ(r.sets[0](0, 1), 0.0);
}

TEST(EStep, FarPointGoesToOutlier) {
    GmmModel m{{Point3::Zero()}, {0.01}, 0.995, 0.005, 1.0 / 1000.0};
    const std::vector<PointCloud> c{PointCloud({Point3(1, 0, 0)})};
    const std::vector<RigidTransform> t(1);
    const auto r = e_step(c, t, m);
    EXPECT_GT(r.sets[0](0, 1), 0.99);
}

TEST(EStep, EquidistantComponentsSplitEvenly) {
    GmmModel m{{Point3(-1, 0, 0), Point3(1, 0, 0)}, {0.5, 0.5}, 0.45, 0.1, 0.01};
    const std::vector<PointCloud> c{PointCloud({Point3(0, 0.3, 0)})};
    const std::vector<RigidTransform> t(1);
    const auto r = e_step(c, t, m);
    EXPECT_EQ(r.sets[0](0, 0), r.sets[0](0, 1));
    EXPECT_NEAR(r.sets[0].row(0).sum(), 1.0, 1e-15);
}

TEST(EStep, RowsSumToOneAndMatchDirectDensities) {
    std::mt19937_64 rng(4);
    const std::vector<PointCloud> c{PointCloud(dare::testing::random_points(rng, 300)),
                                    PointCloud(dare::testing::random_points(rng, 200))};
    const std::vector<RigidTransform> t{dare::testing::random_transform(rng, 0.2), RigidTransform()};
    RegistrationConfig cfg;
    cfg.K = 15;
    const auto m = init_model(c, t, cfg);
    const auto r = e_step(c, t, m);
    for (std::size_t i = 0; i < 2; ++i)
        for (Eigen::Index j = 0; j < r.sets[i].rows(); ++j) {
            EXPECT_NEAR(r.sets[i].row(j).sum(), 1.0, 1e-9);
            const Point3 v = t[i](c[i].points[static_cast<std::size_t>(j)]);
            std::vector<double> p(16);
            double z = 0;
            for (std::size_t k = 0; k < 15; ++k) {
                p[k] = m.component_prior * std::exp(-(v - m.means[k]).squaredNorm() / (2 * m.variances[k])) /
                       std::pow(2 * M_PI * m.variances[k], 1.5);
                z += p[k];
            }
            p[15] = m.outlier_prior * m.outlier_density;
            z += p[15];
            for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(r.sets[i](j, static_cast<Eigen::Index>(k)), p[k] / z, 1e-12);
            EXPECT_NEAR(r.log_evidence[i][j], std::log(z), 1e-9);
        }
}

TEST(MStepTransforms, SingleComponentCentroidMatch) {
    GmmModel m{{Point3::Zero()}, {1.0}, 1.0, 0.0, 1.0};
    const std::vector<PointCloud> c{PointCloud({Point3(1, 0, 0)})};
    const std::vector<RigidTransform> t(1);
    const std::vector<ObservationWeights> w{uniform_weights(1)};
    const auto r = e_step(c, t, m);
    const auto up = m_step_transforms(c, w, r, m, t);
    EXPECT_LT((up.transforms[0].rotation() - Mat3::Identity()).norm(), 1e-12);
    EXPECT_LT((up.transforms[0].translation() - Vec3(-1, 0, 0)).norm(), 1e-12);
}

TEST(MStepTransforms, ExactCorrespondenceRecovery) {
    std::mt19937_64 rng(5);
    const auto pts = dare::testing::random_points(rng, 40, -2, 2);
    const auto truth = dare::testing::random_transform(rng, 1.0);
    GmmModel m;
    for (const auto& p : pts) m.means.push_back(truth(p));
    m.variances.assign(pts.size(), 1e-8);
    m.component_prior = 1.0 / 40;
    m.outlier_prior = 0.0;
    // Identity responsibilities: point j belongs to component j.
    Responsibilities r;
    r.sets.emplace_back(RespMatrix::Zero(40, 41));
    for (Eigen::Index j = 0; j < 40; ++j) r.sets[0](j, j) = 1.0;
    const std::vector<PointCloud> c{PointCloud(pts)};
    std::vector<ObservationWeights> w{uniform_weights(40)};
    std::uniform_real_distribution<double> u(0.5, 3.0);
    for (double& v : w[0].values) v = u(rng);
    const std::vector<RigidTransform> prev(1);
    const auto up = m_step_transforms(c, w, r, m, prev);
    EXPECT_LT(max_abs_diff(up.transforms[0], truth), 1e-6);
}

TEST(MStepTransforms, DoublingWeightsLeavesTransformsUnchanged) {
    auto clouds = room_pair(6, 600, 10, 0.2);
    RegistrationConfig cfg;
    cfg.K = 30;
    const std::vector<RigidTransform> t(2);
    const auto m = init_model(clouds, t, cfg);
    const auto r = e_step(clouds, t, m);
    std::vector<ObservationWeights> w{empirical_weights(clouds[0], 10, false), empirical_weights(clouds[1], 10, false)};
    auto w2 = w;
    for (auto& s : w2)
        for (double& v : s.values) v *= 2.0;
    const auto a = m_step_transforms(clouds, w, r, m, t);
    const auto b = m_step_transforms(clouds, w2, r, m, t);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_LT(max_abs_diff(a.transforms[i], b.transforms[i]), 1e-12);
}

TEST(MStepTransforms, AllOutlierSetIsFrozen) {
    GmmModel m{{Point3::Zero()}, {1.0}, 0.5, 0.5, 1.0};
    Responsibilities r;
    r.sets.emplace_back(RespMatrix::Zero(3, 2));
    r.sets[0].col(1).setOnes();
    const std::vector<PointCloud> c{PointCloud({Point3(1, 0, 0), Point3(0, 1, 0), Point3(0, 0, 1)})};
    const std::vector<ObservationWeights> w{uniform_weights(3)};
    const RigidTransform prev = RigidTransform::from_translation(Vec3(1, 2, 3));
    const auto up = m_step_transforms(c, w, r, m, std::vector<RigidTransform>{prev});
    EXPECT_EQ(up.transforms[0].translation(), prev.translation());
    EXPECT_EQ(up.frozen_sets, std::vector<std::size_t>{0});
}

TEST(MStepModel, SingleGaussianMle) {
    std::mt19937_64 rng(7);
    const auto pts = dare::testing::random_points(rng, 100);
    GmmModel m{{Point3::Zero()}, {1.0}, 1.0, 0.0, 1.0};
    const std::vector<PointCloud> c{PointCloud(pts)};
    const std::vector<RigidTransform> t(1);
    const std::vector<ObservationWeights> w{uniform_weights(100)};
    const auto up = m_step_model(c, t, w, e_step(c, t, m), m, RegistrationConfig{});
    Vec3 mean = Vec3::Zero();
    for (const auto& p : pts) mean += p;
    mean /= 100;
    double ss = 0;
    for (const auto& p : pts) ss += (p - mean).squaredNorm();
    EXPECT_LT((up.means[0] - mean).norm(), 1e-12);
    EXPECT_NEAR(up.variances[0], ss / 100 / 3, 1e-12);
}

TEST(MStepModel, SeparatedClustersConverge) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> g(0.0, 0.1);
    PointCloud c;
    for (int i = 0; i < 200; ++i) c.points.emplace_back(g(rng), g(rng), g(rng));
    for (int i = 0; i < 200; ++i) c.points.emplace_back(10 + g(rng), g(rng), g(rng));
    Vec3 c0 = Vec3::Zero(), c1 = Vec3::Zero();
    for (int i = 0; i < 200; ++i) c0 += c.points[static_cast<std::size_t>(i)] / 200.0;
    for (int i = 200; i < 400; ++i) c1 += c.points[static_cast<std::size_t>(i)] / 200.0;
    GmmModel m{{Point3(1, 1, 0), Point3(9, -1, 0)}, {1.0, 1.0}, 0.5, 0.0, 1.0};
    const std::vector<PointCloud> cs{c};
    const std::vector<RigidTransform> t(1);
    const std::vector<ObservationWeights> w{uniform_weights(400)};
    for (int it = 0; it < 10; ++it) m = m_step_model(cs, t, w, e_step(cs, t, m), m, RegistrationConfig{});
    EXPECT_LT((m.means[0] - c0).norm(), 1e-4);
    EXPECT_LT((m.means[1] - c1).norm(), 1e-4);
}

TEST(MStepModel, ScaledWeightsGiveSameModel) {
    auto clouds = room_pair(9, 500, 5, 0.1);
    RegistrationConfig cfg;
    cfg.K = 25;
    const std::vector<RigidTransform> t(2);
    const auto m = init_model(clouds, t, cfg);
    const auto r = e_step(clouds, t, m);
    std::vector<ObservationWeights> w{empirical_weights(clouds[0], 10, false), empirical_weights(clouds[1], 10, false)};
    auto w2 = w;
    for (auto& s : w2)
        for (double& v : s.values) v *= 3.0;
    const auto a = m_step_model(clouds, t, w, r, m, cfg), b = m_step_model(clouds, t, w2, r, m, cfg);
    for (std::size_t k = 0; k < 25; ++k) {
        EXPECT_LT((a.means[k] - b.means[k]).norm(), 1e-12);
        EXPECT_NEAR(a.variances[k], b.variances[k], 1e-12 * a.variances[k]);
    }
}

TEST(MStepModel, ThreadCountDoesNotChangeResult) {
    auto clouds = room_pair(10, 3000, 5, 0.1);
    RegistrationConfig cfg;
    cfg.K = 40;
    const std::vector<RigidTransform> t(2);
    const auto m = init_model(clouds, t, cfg);
    const std::vector<ObservationWeights> w{uniform_weights(clouds[0].size()), uniform_weights(clouds[1].size())};
    const auto r1 = e_step(clouds, t, m, 1), r4 = e_step(clouds, t, m, 4);
    EXPECT_EQ(r1.sets[0], r4.sets[0]);
    const auto a = m_step_model(clouds, t, w, r1, m, cfg, 1), b = m_step_model(clouds, t, w, r4, m, cfg, 4);
    EXPECT_EQ(a.means, b.means);
    EXPECT_EQ(a.variances, b.variances);
}

TEST(WeightedObjective, SingleGaussianValue) {
    GmmModel m{{Point3::Zero()}, {2.0}, 1.0, 0.0, 1.0};
    const std::vector<PointCloud> c{PointCloud({Point3(1, 0, 0), Point3(0, 2, 0)})};
    const std::vector<RigidTransform> t(1);
    const std::vector<ObservationWeights> w{uniform_weights(2)};
    const auto r = e_step(c, t, m);
    const double expect = -1.5 * std::log(4 * M_PI) - (1.0 + 4.0) / 2 / (2 * 2.0);
    EXPECT_NEAR(weighted_objective(c, t, w, r, m), expect, 1e-12);
    const std::vector<ObservationWeights> w2{{{2.0, 2.0}, WeightMethod::uniform}};
    EXPECT_NEAR(weighted_objective(c, t, w2, r, m), 2 * expect, 1e-12);
}

TEST(Register, SelfRegistrationRecoversPerturbation) {
    const TriMesh mesh = make_room_scene(11);
    PointCloud a = sample_uniform(mesh, 2000, 1);
    a = apply_transform(RigidTransform::from_translation(Vec3(-4, -3, -1)), a);
    const RigidTransform p(axis_angle(Vec3(1, 2, 0.5), deg2rad(20)), Vec3(0.3, -0.2, 0.35));
    const std::vector<PointCloud> clouds{a, apply_transform(p, a)};
    for (auto wm : {WeightMethod::uniform, WeightMethod::empirical}) {
        RegistrationConfig cfg;
        cfg.weight_method = wm;
        cfg.seed = 3;
        const auto res = register_point_sets(clouds, cfg);
        const auto rel = res.relative_to_first()[1];
        // rel maps b into a's frame, so it should invert p.
        const RigidTransform err = compose(rel, p);
        EXPECT_LT(geodesic_rotation_error(err.rotation(), Mat3::Identity()), 1.0);
        EXPECT_LT(err.translation().norm(), 0.05);
    }
}

TEST(Register, UniformMatchesIndependentUnweightedEm) {
    for (std::uint64_t seed : {1, 2}) {
        const auto clouds = room_pair(seed, 400, 15, 0.3);
        RegistrationConfig cfg;
        cfg.K = 20;
        cfg.iterations = 15;
        cfg.seed = seed;
        cfg.weight_method = WeightMethod::uniform;
        const auto res = register_point_sets(clouds, cfg);
        const std::vector<RigidTransform> id(2);
        const auto ref = oracle_jrmpc(clouds, init_model(clouds, id, cfg), cfg.iterations);
        ASSERT_EQ(res.objective_trace.size(), ref.loglik.size());
        for (std::size_t i = 0; i < ref.loglik.size(); ++i)
            EXPECT_NEAR(res.objective_trace[i], ref.loglik[i], 1e-12 * std::max(1.0, std::abs(ref.loglik[i])));
        for (std::size_t i = 0; i < 2; ++i) EXPECT_LT(max_abs_diff(res.transforms[i], ref.transforms[i]), 1e-12);
    }
}

TEST(Register, ObjectiveTraceIsMonotone) {
    for (auto wm : {WeightMethod::uniform, WeightMethod::sensor, WeightMethod::empirical, WeightMethod::empirical_full}) {
        auto clouds = room_pair(12, 600, 30, 0.5);
        RegistrationConfig cfg;
        cfg.K = 40;
        cfg.iterations = 30;
        cfg.weight_method = wm;
        const auto res = register_point_sets(clouds, cfg);
        for (std::size_t i = 1; i < res.objective_trace.size(); ++i) {
            const double prev = res.objective_trace[i - 1];
            EXPECT_GE(res.objective_trace[i], prev - 1e-8 * std::abs(prev)) << to_string(wm) << " iteration " << i;
        }
        for (const auto& s : res.iterations) EXPECT_GE(s.objective_after, s.objective_before - 1e-8 * std::abs(s.objective_before));
    }
}

TEST(Register, ScalingOneSetOfWeightsIsInvisible) {
    auto clouds = room_pair(13, 800, 25, 0.4);
    RegistrationConfig cfg;
    cfg.K = 40;
    cfg.iterations = 20;
    std::vector<ObservationWeights> w{empirical_weights(clouds[0], 10, false), empirical_weights(clouds[1], 10, false)};
    auto w2 = w;
    for (double& v : w2[1].values) v *= 1000.0;
    const auto a = register_with_weights(clouds, w, cfg), b = register_with_weights(clouds, w2, cfg);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_LT(max_abs_diff(a.transforms[i], b.transforms[i]), 1e-9);
}

TEST(Register, EquivariantUnderCommonRigidMotion) {
    auto clouds = room_pair(14, 800, 20, 0.4);
    std::mt19937_64 rng(14);
    const auto g = dare::testing::random_transform(rng, 2.0);
    const std::vector<PointCloud> moved{apply_transform(g, clouds[0]), apply_transform(g, clouds[1])};
    RegistrationConfig cfg;
    cfg.K = 40;
    cfg.iterations = 20;
    cfg.weight_method = WeightMethod::uniform;
    const auto a = register_point_sets(clouds, cfg).relative_to_first()[1];
    const auto b = register_point_sets(moved, cfg).relative_to_first()[1];
    EXPECT_LT(max_abs_diff(compose(compose(g, a), g.inverse()), b), 1e-6);
}

TEST(Register, DeterministicForSeed) {
    auto clouds = room_pair(15, 500, 20, 0.3);
    RegistrationConfig cfg;
    cfg.K = 30;
    cfg.iterations = 10;
    cfg.seed = 99;
    const auto a = register_point_sets(clouds, cfg), b = register_point_sets(clouds, cfg);
    EXPECT_EQ(a.objective_trace, b.objective_trace);
    EXPECT_EQ(a.transforms[1].matrix(), b.transforms[1].matrix());
}

TEST(Register, RejectsBadInput) {
    RegistrationConfig cfg;
    const std::vector<PointCloud> one{PointCloud({Point3(0, 0, 0), Point3(1, 0, 0), Point3(0, 1, 0)})};
    EXPECT_THROW(register_point_sets(one, cfg), InvalidArgument);
    cfg.K = 0;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
}
