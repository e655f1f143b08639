// dare-reg: command-line front end for density-adaptive multi-set registration.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dare/dare.hpp"

namespace fs = std::filesystem;
using namespace dare;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitParse = 2;
constexpr int kExitNumerical = 3;

nlohmann::json config_json(const RegistrationConfig& c) {
    return {{"K", c.K},
            {"iterations", c.iterations},
            {"outlier_ratio", c.outlier_ratio},
            {"gamma", c.gamma},
            {"L", c.L},
            {"clip_factor", c.clip_factor},
            {"weight_method", std::string(to_string(c.weight_method))},
            {"seed", c.seed},
            {"variance_floor", c.variance_floor},
            {"regularize", c.regularize}};
}

struct RegisterArgs {
    std::vector<std::string> inputs;
    std::string mode = "pairwise";
    std::string weights = "empirical";
    std::size_t k = 0;
    std::size_t iters = 50;
    double gamma = 0.9;
    std::size_t neighbors = 10;
    double clip = 8.0;
    double outlier_ratio = 0.005;
    std::uint64_t seed = 0;
    std::string out;
    std::string resample;
};

int cmd_register(const RegisterArgs& a) {
    if (a.inputs.size() < 2) throw ParseError("register needs at least two input files");
    if (a.mode != "pairwise" && a.mode != "joint") throw ParseError("--mode must be pairwise or joint");
    if (a.mode == "pairwise" && a.inputs.size() != 2) throw ParseError("pairwise mode takes exactly two input files");

    RegistrationConfig cfg = a.mode == "joint" ? RegistrationConfig::joint() : RegistrationConfig::pairwise();
    if (a.k > 0) cfg.K = a.k;
    cfg.iterations = a.iters;
    cfg.gamma = a.gamma;
    cfg.L = a.neighbors;
    cfg.clip_factor = a.clip;
    cfg.outlier_ratio = a.outlier_ratio;
    cfg.seed = a.seed;
    cfg.weight_method = parse_weight_method(a.weights);
    cfg.validate();

    std::vector<PointCloud> clouds;
    for (const auto& path : a.inputs) {
        if (!fs::exists(path)) throw ParseError("input file '" + path + "' does not exist");
        clouds.push_back(read_point_cloud(path));
    }
    if (!a.resample.empty()) {
        const ResampleSpec spec = parse_resample_spec(a.resample);
        if (cfg.weight_method == WeightMethod::uniform) {
            for (std::size_t i = 0; i < clouds.size(); ++i) clouds[i] = resample(clouds[i], spec, derive_seed(cfg.seed, 100 + i));
        } else {
            std::cerr << "note: --resample applies to the uniform-weight baseline only; ignored\n";
        }
    }

    const RegistrationResult r = register_point_sets(clouds, cfg);

    TransformFile tf;
    tf.transforms = r.relative_to_first();
    tf.objective_trace = r.objective_trace;
    tf.config = config_json(cfg);
    tf.config["mode"] = a.mode;
    if (!a.resample.empty()) tf.config["resample"] = a.resample;
    tf.extra["inputs"] = a.inputs;
    tf.extra["iterations_run"] = r.converged_iterations;

    if (a.out.empty()) {
        std::cout << to_json_text(tf);
    } else {
        write_transform_file(tf, a.out);
    }
    return kExitOk;
}

struct WeightsArgs {
    std::string input;
    std::string method = "empirical";
    std::size_t neighbors = 10;
    double gamma = 0.9;
    double clip = 8.0;
    bool raw = false;
    std::string out;
};

int cmd_weights(const WeightsArgs& a) {
    if (!fs::exists(a.input)) throw ParseError("input file '" + a.input + "' does not exist");
    const PointCloud cloud = read_point_cloud(a.input);
    RegistrationConfig cfg;
    cfg.weight_method = parse_weight_method(a.method);
    cfg.L = a.neighbors;
    cfg.gamma = a.gamma;
    cfg.clip_factor = a.clip;
    cfg.validate();

    ObservationWeights w;
    if (a.raw) {
        switch (cfg.weight_method) {
            case WeightMethod::uniform: w = uniform_weights(cloud.size()); break;
            case WeightMethod::sensor: w = sensor_weights(cloud, cfg.gamma); break;
            case WeightMethod::empirical: w = empirical_weights(cloud, cfg.L, false); break;
            case WeightMethod::empirical_full: w = empirical_weights(cloud, cfg.L, true); break;
        }
    } else {
        w = compute_weights(cloud, cfg);
    }

    std::string text;
    for (double v : w.values) text += format_real(v) + "\n";
    if (a.out.empty()) {
        std::cout << text;
    } else {
        std::ofstream out(a.out, std::ios::binary);
        if (!out) throw ParseError("cannot write '" + a.out + "'");
        out << text;
    }
    return kExitOk;
}

struct ResampleArgs {
    std::string method;
    double voxel = 0.0;
    double rate = 0.0;
    std::size_t pool = 100;
    std::uint64_t seed = 0;
    std::string input, output;
};

int cmd_resample(const ResampleArgs& a) {
    ResampleSpec spec;
    if (a.method == "voxel") {
        spec.method = ResampleMethod::voxel;
        if (a.rate > 0.0) throw ParseError("voxel resampling takes --voxel, not --rate");
        spec.voxel_size = a.voxel;
    } else if (a.method == "fps" || a.method == "gss") {
        spec.method = a.method == "fps" ? ResampleMethod::fps : ResampleMethod::gss;
        if (a.voxel > 0.0) throw ParseError(a.method + " resampling takes --rate, not --voxel");
        spec.rate = a.rate;
        spec.candidate_pool = a.pool;
    } else {
        throw ParseError("--method must be voxel, fps or gss");
    }
    try {
        spec.validate();
    } catch (const InvalidArgument& e) {
        throw ParseError(e.what());
    }
    if (!fs::exists(a.input)) throw ParseError("input file '" + a.input + "' does not exist");
    const PointCloud cloud = read_point_cloud(a.input);
    write_point_cloud(resample(cloud, spec, a.seed), a.output);
    return kExitOk;
}

struct SynthArgs {
    std::string scene = "room";
    std::size_t sensors = 2;
    std::size_t points = 10000;
    double angle_min = 0.0;
    double angle_max = 90.0;
    double tsigma = 1.0;
    double d0 = 1.5;
    bool incidence = false;
    bool ceiling = false;
    std::uint64_t seed = 0;
    std::string out_dir = ".";
};

int cmd_synth(const SynthArgs& a) {
    if (a.scene != "room") throw ParseError("--scene: only 'room' is available");
    if (a.sensors < 1) throw ParseError("--sensors must be >= 1");
    RoomOptions room;
    room.ceiling = a.ceiling;
    const TriMesh mesh = make_room_scene(a.seed, room);
    std::mt19937_64 rng(derive_seed(a.seed, 5));
    std::vector<ScanSpec> specs(a.sensors);
    for (auto& s : specs) {
        s.n_points = a.points;
        s.min_distance = a.d0;
        s.incidence = a.incidence;
        s.sensor_position = random_sensor_position(mesh, rng);
    }
    PerturbSpec perturb{a.angle_min, a.angle_max, a.tsigma};
    const ScanSet set = make_scans(mesh, specs, perturb, a.seed);

    fs::create_directories(a.out_dir);
    TransformFile gt;
    nlohmann::json sensors = nlohmann::json::array();
    for (std::size_t i = 0; i < set.clouds.size(); ++i) {
        write_point_cloud(set.clouds[i], fs::path(a.out_dir) / ("scan_" + std::to_string(i) + ".ply"));
        gt.transforms.push_back(set.ground_truth[i]);
        const auto& p = specs[i].sensor_position;
        sensors.push_back({p.x(), p.y(), p.z()});
    }
    gt.config = {{"scene", a.scene}, {"sensors", a.sensors}, {"points", a.points},
                 {"angle_min_deg", a.angle_min}, {"angle_max_deg", a.angle_max},
                 {"translation_sigma_m", a.tsigma}, {"min_distance_m", a.d0},
                 {"incidence", a.incidence}, {"ceiling", a.ceiling}, {"seed", a.seed}};
    gt.extra["sensor_positions"] = sensors;
    write_transform_file(gt, fs::path(a.out_dir) / "gt.json");
    return kExitOk;
}

struct ExperimentArgs {
    std::size_t trials = 50;
    std::string methods = "jrmpc,dare";
    std::uint64_t seed = 1;
    std::string out_dir = ".";
    double angle_min = 0.0;
    double angle_max = 90.0;
    double tsigma = 1.0;
    std::size_t points = 10000;
    double d0 = 1.5;
    bool incidence = false;
    std::size_t k = 200;
    std::size_t iters = 50;
    std::string resample;
    bool timing = false;
};

int cmd_experiment(const ExperimentArgs& a) {
    ExperimentConfig cfg;
    cfg.n_trials = a.trials;
    cfg.seed = a.seed;
    cfg.scan.n_points = a.points;
    cfg.scan.min_distance = a.d0;
    cfg.scan.incidence = a.incidence;
    cfg.perturb = {a.angle_min, a.angle_max, a.tsigma};
    cfg.record_runtime = a.timing;

    RegistrationConfig base;
    base.K = a.k;
    base.iterations = a.iters;
    std::vector<MethodSpec> methods;
    std::stringstream ss(a.methods);
    for (std::string name; std::getline(ss, name, ',');) {
        if (name.empty()) continue;
        MethodSpec m = method_preset(name, base);
        if (!a.resample.empty() && (name == "jrmpc" || name == "icp")) {
            m.resample = parse_resample_spec(a.resample);
            m.name += "-rs";
        }
        methods.push_back(std::move(m));
    }
    if (methods.empty()) throw ParseError("--methods is empty");

    const ExperimentResult res = run_experiment(cfg, methods);
    nlohmann::json echo = {{"trials", a.trials}, {"methods", a.methods}, {"seed", a.seed},
                           {"angle_min_deg", a.angle_min}, {"angle_max_deg", a.angle_max},
                           {"translation_sigma_m", a.tsigma}, {"points", a.points}, {"min_distance_m", a.d0},
                           {"incidence", a.incidence}, {"K", a.k}, {"iterations", a.iters},
                           {"resample", a.resample}};
    write_experiment(res, a.out_dir, echo);
    for (const auto& [name, s] : res.summaries)
        std::printf("%-12s failure %6.2f%%  inlier error %.2f +- %.2f deg  (%zu trials)\n", name.c_str(),
                    s.failure_rate, s.mean_inlier_error, s.inlier_error_std, s.n_trials);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Density-adaptive probabilistic registration of multiple 3D point sets"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));

    RegisterArgs reg;
    auto* c_reg = app.add_subcommand("register", "Jointly register two or more point clouds (PLY / XYZ)");
    c_reg->add_option("inputs", reg.inputs, "Input point clouds")->required()->expected(2, -1);
    c_reg->add_option("--mode", reg.mode, "pairwise (K=200) or joint (K=300)")->capture_default_str();
    c_reg->add_option("--weights", reg.weights, "uniform | empirical | empirical-full | sensor")->capture_default_str();
    c_reg->add_option("--k", reg.k, "Mixture components [default: 200 pairwise, 300 joint]");
    c_reg->add_option("--iters", reg.iters, "EM iterations")->capture_default_str();
    c_reg->add_option("--gamma", reg.gamma, "Sensor-model normal regularisation in [0,1]")->capture_default_str();
    c_reg->add_option("--neighbors", reg.neighbors, "Neighbourhood size L for weights and median filter")->capture_default_str();
    c_reg->add_option("--clip", reg.clip, "Clip weights above this multiple of their mean")->capture_default_str();
    c_reg->add_option("--outlier-ratio", reg.outlier_ratio, "Prior of the uniform outlier component")->capture_default_str();
    c_reg->add_option("--seed", reg.seed, "Seed for mixture initialisation")->capture_default_str();
    c_reg->add_option("--out", reg.out, "Output transform JSON [default: stdout]");
    c_reg->add_option("--resample", reg.resample, "voxel:<m> | fps:<rate> | gss:<rate> (uniform baseline only)");

    WeightsArgs wts;
    auto* c_wts = app.add_subcommand("weights", "Compute per-point observation weights, one value per line");
    c_wts->add_option("input", wts.input, "Input point cloud")->required();
    c_wts->add_option("--method", wts.method, "uniform | empirical | empirical-full | sensor")->capture_default_str();
    c_wts->add_option("--neighbors", wts.neighbors, "Neighbourhood size L")->capture_default_str();
    c_wts->add_option("--gamma", wts.gamma, "Sensor-model normal regularisation")->capture_default_str();
    c_wts->add_option("--clip", wts.clip, "Clip factor relative to the mean")->capture_default_str();
    c_wts->add_flag("--raw", wts.raw, "Skip median filtering, clipping and mean-1 normalisation");
    c_wts->add_option("--out", wts.out, "Output file [default: stdout]");

    ResampleArgs rs;
    auto* c_rs = app.add_subcommand("resample", "Voxel-grid, farthest-point or geometrically stable re-sampling");
    c_rs->add_option("--method", rs.method, "voxel | fps | gss")->required();
    auto* o_voxel = c_rs->add_option("--voxel", rs.voxel, "Voxel edge length in meters");
    auto* o_rate = c_rs->add_option("--rate", rs.rate, "Fraction of points kept (fps / gss)");
    o_voxel->excludes(o_rate);
    c_rs->add_option("--pool", rs.pool, "GSS candidate pool size")->capture_default_str();
    c_rs->add_option("--seed", rs.seed, "Random seed")->capture_default_str();
    c_rs->add_option("input", rs.input, "Input point cloud")->required();
    c_rs->add_option("output", rs.output, "Output point cloud")->required();

    SynthArgs sy;
    auto* c_sy = app.add_subcommand("synth", "Generate synthetic room scans with ground truth");
    c_sy->add_option("--scene", sy.scene, "Scene type")->capture_default_str();
    c_sy->add_option("--sensors", sy.sensors, "Number of scans")->capture_default_str();
    c_sy->add_option("--points", sy.points, "Uniform samples per scan before thinning")->capture_default_str();
    c_sy->add_option("--angle-min", sy.angle_min, "Minimum perturbation angle (deg)")->capture_default_str();
    c_sy->add_option("--angle-max", sy.angle_max, "Maximum perturbation angle (deg)")->capture_default_str();
    c_sy->add_option("--tsigma", sy.tsigma, "Perturbation translation std-dev (m)")->capture_default_str();
    c_sy->add_option("--d0", sy.d0, "Distance below which every point is kept (m)")->capture_default_str();
    c_sy->add_flag("--incidence", sy.incidence, "Also thin by incidence angle");
    c_sy->add_flag("--ceiling", sy.ceiling, "Close the room with a ceiling");
    c_sy->add_option("--seed", sy.seed, "Random seed")->capture_default_str();
    c_sy->add_option("--out-dir", sy.out_dir, "Output directory")->capture_default_str();

    ExperimentArgs ex;
    auto* c_ex = app.add_subcommand("experiment", "Run the synthetic pairwise benchmark");
    c_ex->add_option("--trials", ex.trials, "Number of scan pairs")->capture_default_str();
    c_ex->add_option("--methods", ex.methods, "Comma list of jrmpc,dare,dare-full,dars,dars-g0,icp")->capture_default_str();
    c_ex->add_option("--seed", ex.seed, "Random seed")->capture_default_str();
    c_ex->add_option("--out-dir", ex.out_dir, "Output directory for trials.csv and summary.json")->capture_default_str();
    c_ex->add_option("--angle-min", ex.angle_min, "Minimum perturbation angle (deg)")->capture_default_str();
    c_ex->add_option("--angle-max", ex.angle_max, "Maximum perturbation angle (deg)")->capture_default_str();
    c_ex->add_option("--tsigma", ex.tsigma, "Perturbation translation std-dev (m)")->capture_default_str();
    c_ex->add_option("--points", ex.points, "Uniform samples per scan before thinning")->capture_default_str();
    c_ex->add_option("--d0", ex.d0, "Distance below which every point is kept (m)")->capture_default_str();
    c_ex->add_flag("--incidence", ex.incidence, "Also thin by incidence angle");
    c_ex->add_option("--k", ex.k, "Mixture components")->capture_default_str();
    c_ex->add_option("--iters", ex.iters, "EM iterations")->capture_default_str();
    c_ex->add_option("--resample", ex.resample, "Re-sampling applied to jrmpc / icp baselines");
    c_ex->add_flag("--timing", ex.timing, "Record wall-clock runtimes (output no longer reproducible)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitParse;
    }

    try {
        if (c_reg->parsed()) return cmd_register(reg);
        if (c_wts->parsed()) return cmd_weights(wts);
        if (c_rs->parsed()) return cmd_resample(rs);
        if (c_sy->parsed()) return cmd_synth(sy);
        if (c_ex->parsed()) return cmd_experiment(ex);
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitParse;
    } catch (const InvalidArgument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitParse;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    }
    return kExitParse;
}
