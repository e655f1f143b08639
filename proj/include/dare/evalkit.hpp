#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dare/error.hpp"
#include "dare/geom.hpp"
#include "dare/mixture.hpp"
#include "dare/parallel.hpp"
#include "dare/resample.hpp"
#include "dare/spatial.hpp"
#include "dare/synth.hpp"

namespace dare {

inline constexpr double kFailureThresholdDeg = 4.0;

struct TrialRecord {
    std::size_t trial_id = 0;
    std::string method;
    double rotation_error = 0.0;     ///< degrees
    double translation_error = 0.0;  ///< meters
    double runtime = 0.0;            ///< seconds
    std::uint64_t seed = 0;
    std::uint64_t input_hash = 0;
};

struct Summary {
    double failure_rate = 0.0;  ///< percent
    double mean_inlier_error = 0.0;
    double inlier_error_std = 0.0;  ///< population std over inliers
    double mean_inlier_translation_error = 0.0;
    std::size_t n_trials = 0;
    std::size_t n_failures = 0;
    std::vector<std::pair<double, double>> recall_curve;  ///< (threshold deg, fraction <= threshold)
};

/// Fraction of records whose rotation error is at most `threshold_deg`.
inline double recall_at(const std::vector<TrialRecord>& records, double threshold_deg) {
    if (records.empty()) return 0.0;
    const auto hits = std::count_if(records.begin(), records.end(),
                                    [&](const TrialRecord& r) { return r.rotation_error <= threshold_deg; });
    return static_cast<double>(hits) / static_cast<double>(records.size());
}

/// Failure = rotation error strictly above the threshold. Inlier statistics
/// cover the remaining records; the recall curve is sampled every 0.1 deg up
/// to twice the threshold.
inline Summary summarize(const std::vector<TrialRecord>& records, double failure_threshold_deg = kFailureThresholdDeg) {
    if (records.empty()) throw InvalidArgument("summarize: no records");
    Summary s;
    s.n_trials = records.size();
    double sum = 0.0, sum_t = 0.0;
    std::vector<double> inliers;
    for (const auto& r : records) {
        if (r.rotation_error > failure_threshold_deg) {
            ++s.n_failures;
        } else {
            inliers.push_back(r.rotation_error);
            sum += r.rotation_error;
            sum_t += r.translation_error;
        }
    }
    s.failure_rate = 100.0 * static_cast<double>(s.n_failures) / static_cast<double>(s.n_trials);
    if (!inliers.empty()) {
        const double n = static_cast<double>(inliers.size());
        s.mean_inlier_error = sum / n;
        s.mean_inlier_translation_error = sum_t / n;
        double var = 0.0;
        for (double e : inliers) var += (e - s.mean_inlier_error) * (e - s.mean_inlier_error);
        s.inlier_error_std = std::sqrt(var / n);
    }
    const auto steps = static_cast<std::size_t>(std::llround(2.0 * failure_threshold_deg * 10.0));
    for (std::size_t i = 0; i <= steps; ++i) {
        const double thr = static_cast<double>(i) / 10.0;
        s.recall_curve.emplace_back(thr, recall_at(records, thr));
    }
    return s;
}

struct IcpResult {
    RigidTransform transform;
    std::vector<double> rms_history;  ///< RMS correspondence distance per iteration
    std::size_t iterations = 0;
};

/// Point-to-point ICP aligning `source` onto `target`. Stops when the RMS
/// correspondence distance changes by less than `tol` or after `max_iters`.
inline IcpResult icp_register_detailed(const PointCloud& source, const PointCloud& target, std::size_t max_iters = 50,
                                       double tol = 1e-6, const RigidTransform& init = RigidTransform::identity()) {
    if (source.size() < 3 || target.size() < 3) throw InvalidArgument("icp: both clouds need at least 3 points");
    const KdTree tree(target);
    IcpResult res;
    res.transform = init;
    std::vector<Point3> matched(source.size());
    const std::vector<double> unit(source.size(), 1.0);
    for (std::size_t it = 0; it < max_iters; ++it) {
        double sq = 0.0;
        for (std::size_t j = 0; j < source.size(); ++j) {
            const auto nb = tree.knn(res.transform(source.points[j]), 1).front();
            matched[j] = target.points[nb.index];
            sq += nb.distance * nb.distance;
        }
        const double rms = std::sqrt(sq / static_cast<double>(source.size()));
        res.rms_history.push_back(rms);
        if (it > 0 && std::abs(res.rms_history[it - 1] - rms) < tol) break;

        // Rank check on the cross-covariance before solving.
        Vec3 cs = Vec3::Zero(), ct = Vec3::Zero();
        for (std::size_t j = 0; j < source.size(); ++j) {
            cs += source.points[j];
            ct += matched[j];
        }
        cs /= static_cast<double>(source.size());
        ct /= static_cast<double>(source.size());
        Mat3 h = Mat3::Zero();
        for (std::size_t j = 0; j < source.size(); ++j) h.noalias() += (source.points[j] - cs) * (matched[j] - ct).transpose();
        const Vec3 sv = Eigen::JacobiSVD<Mat3>(h).singularValues();
        if (!(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0]) throw NumericalError("degenerate ICP update");

        res.transform = *weighted_procrustes(source.points, matched, unit);
        res.iterations = it + 1;
    }
    return res;
}

inline RigidTransform icp_register(const PointCloud& source, const PointCloud& target, std::size_t max_iters = 50,
                                   double tol = 1e-6) {
    return icp_register_detailed(source, target, max_iters, tol).transform;
}

/// FNV-1a over the raw coordinate bytes of every cloud, in order.
inline std::uint64_t hash_clouds(std::span<const PointCloud> clouds) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& c : clouds) {
        const std::uint64_t n = c.size();
        mix(&n, sizeof n);
        for (const auto& p : c.points) mix(p.data(), 3 * sizeof(double));
    }
    return h;
}

enum class MethodKind { gmm, icp };

struct MethodSpec {
    std::string name;
    MethodKind kind = MethodKind::gmm;
    RegistrationConfig config;
    std::optional<ResampleSpec> resample;
    std::size_t icp_max_iters = 50;
    double icp_tol = 1e-6;
};

/// Named presets: jrmpc, dare, dare-full, dars, dars-g0, icp.
inline MethodSpec method_preset(const std::string& name, const RegistrationConfig& base = RegistrationConfig::pairwise()) {
    MethodSpec m;
    m.name = name;
    m.config = base;
    if (name == "jrmpc") {
        m.config.weight_method = WeightMethod::uniform;
    } else if (name == "dare") {
        m.config.weight_method = WeightMethod::empirical;
    } else if (name == "dare-full") {
        m.config.weight_method = WeightMethod::empirical_full;
    } else if (name == "dars") {
        m.config.weight_method = WeightMethod::sensor;
    } else if (name == "dars-g0") {
        m.config.weight_method = WeightMethod::sensor;
        m.config.gamma = 0.0;
    } else if (name == "icp") {
        m.kind = MethodKind::icp;
    } else {
        throw ParseError("unknown method '" + name + "'");
    }
    return m;
}

struct ExperimentConfig {
    std::size_t n_trials = 50;
    std::uint64_t seed = 1;
    RoomOptions room;
    ScanSpec scan;  ///< template; sensor positions are drawn per trial
    PerturbSpec perturb;
    double failure_threshold_deg = kFailureThresholdDeg;
    /// 0 resolves through DARE_THREADS / hardware concurrency.
    unsigned threads = 0;
    /// Wall-clock runtimes make output non-reproducible; off writes 0.
    bool record_runtime = false;

    ExperimentConfig() { scan.incidence = false; }
};

struct ExperimentResult {
    std::vector<TrialRecord> records;  ///< ordered by (trial_id, method order)
    std::vector<std::pair<std::string, Summary>> summaries;
};

/// Builds trial `trial` of an experiment: a fresh room and two sensor scans.
inline ScanPair make_trial_pair(const ExperimentConfig& cfg, std::size_t trial) {
    const std::uint64_t ts = derive_seed(cfg.seed, trial);
    const TriMesh mesh = make_room_scene(ts, cfg.room);
    std::mt19937_64 rng(derive_seed(ts, 5));
    ScanSpec a = cfg.scan, b = cfg.scan;
    a.sensor_position = random_sensor_position(mesh, rng);
    b.sensor_position = random_sensor_position(mesh, rng);
    return make_pair(mesh, a, b, cfg.perturb, ts);
}

/// Registers `pair.b` into the frame of `pair.a` with one method.
inline RigidTransform run_method(const MethodSpec& method, const ScanPair& pair, std::uint64_t seed) {
    PointCloud a = pair.a, b = pair.b;
    if (method.resample) {
        a = resample(a, *method.resample, derive_seed(seed, 100));
        b = resample(b, *method.resample, derive_seed(seed, 101));
    }
    if (method.kind == MethodKind::icp) return icp_register(b, a, method.icp_max_iters, method.icp_tol);
    RegistrationConfig cfg = method.config;
    cfg.seed = seed;
    cfg.threads = 1;
    const std::vector<PointCloud> clouds{std::move(a), std::move(b)};
    const RegistrationResult r = register_point_sets(clouds, cfg);
    return compose(r.transforms[0].inverse(), r.transforms[1]);
}

/// Runs every method on identical inputs for each trial. Trials are spread
/// over a worker pool; results are ordered by trial id.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::vector<MethodSpec>& methods) {
    if (methods.empty()) throw InvalidArgument("run_experiment: no methods");
    std::vector<std::vector<TrialRecord>> per_trial(cfg.n_trials);
    const unsigned threads = resolve_threads(cfg.threads);

    for_each_chunk(cfg.n_trials, 1, threads, [&](std::size_t, std::size_t t, std::size_t) {
        const ScanPair pair = make_trial_pair(cfg, t);
        const std::uint64_t ts = derive_seed(cfg.seed, t);
        const std::vector<PointCloud> inputs{pair.a, pair.b};
        const std::uint64_t hash = hash_clouds(inputs);
        for (const auto& m : methods) {
            TrialRecord rec;
            rec.trial_id = t;
            rec.method = m.name;
            rec.seed = ts;
            rec.input_hash = hash;
            const auto t0 = std::chrono::steady_clock::now();
            try {
                const RigidTransform est = run_method(m, pair, ts);
                rec.rotation_error = geodesic_rotation_error(est.rotation(), pair.ground_truth.rotation());
                rec.translation_error = translation_error(est.translation(), pair.ground_truth.translation());
            } catch (const NumericalError&) {
                rec.rotation_error = 180.0;
                rec.translation_error = std::numeric_limits<double>::infinity();
            }
            if (cfg.record_runtime)
                rec.runtime = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            per_trial[t].push_back(std::move(rec));
        }
    });

    ExperimentResult out;
    for (auto& v : per_trial)
        for (auto& r : v) out.records.push_back(std::move(r));
    for (const auto& m : methods) {
        std::vector<TrialRecord> mine;
        for (const auto& r : out.records)
            if (r.method == m.name) mine.push_back(r);
        out.summaries.emplace_back(m.name, summarize(mine, cfg.failure_threshold_deg));
    }
    return out;
}

inline std::string trials_csv(const std::vector<TrialRecord>& records) {
    std::string s = "trial_id,method,rot_err_deg,trans_err_m,runtime_s,seed,input_hash\n";
    char buf[256];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof buf, "%zu,%s,%.9g,%.9g,%.6f,%llu,%016llx\n", r.trial_id, r.method.c_str(),
                      r.rotation_error, r.translation_error, r.runtime, static_cast<unsigned long long>(r.seed),
                      static_cast<unsigned long long>(r.input_hash));
        s += buf;
    }
    return s;
}

inline nlohmann::json summary_json(const std::string& method, const Summary& s) {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& [thr, frac] : s.recall_curve) curve.push_back({thr, frac});
    return {{"method", method},
            {"failure_rate_percent", s.failure_rate},
            {"avg_inlier_error_deg", s.mean_inlier_error},
            {"inlier_error_std_deg", s.inlier_error_std},
            {"avg_inlier_translation_error_m", s.mean_inlier_translation_error},
            {"n_trials", s.n_trials},
            {"n_failures", s.n_failures},
            {"recall_curve", curve}};
}

inline void write_experiment(const ExperimentResult& res, const std::filesystem::path& dir,
                             const nlohmann::json& config_echo = nlohmann::json::object()) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream csv(dir / "trials.csv", std::ios::binary);
        if (!csv) throw ParseError("cannot write '" + (dir / "trials.csv").string() + "'");
        csv << trials_csv(res.records);
    }
    nlohmann::json j;
    j["config"] = config_echo;
    j["methods"] = nlohmann::json::array();
    for (const auto& [name, s] : res.summaries) j["methods"].push_back(summary_json(name, s));
    std::ofstream js(dir / "summary.json", std::ios::binary);
    if (!js) throw ParseError("cannot write '" + (dir / "summary.json").string() + "'");
    js << j.dump(2) << "\n";
}

}  // namespace dare
