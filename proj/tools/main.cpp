// streg: streamline registration toolkit.
//
// Subcommands: synth (phantom pairs with ground truth), train (unsupervised
// keypoint model), register (warp a moving tractogram onto a fixed one),
// keypoints (export detected keypoints), evaluate (bundle metrics).
//
// Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "streg/checkpoint.hpp"
#include "streg/config.hpp"
#include "streg/errors.hpp"
#include "streg/keypoint_net.hpp"
#include "streg/metrics.hpp"
#include "streg/parallel.hpp"
#include "streg/synthgen.hpp"
#include "streg/tps.hpp"
#include "streg/tractogram.hpp"
#include "streg/tractogram_io.hpp"
#include "streg/trainer.hpp"

namespace fs = std::filesystem;
using namespace streg;

namespace {

bool quiet_log() {
    const char* level = std::getenv("STREG_LOG");
    return level != nullptr && std::string(level) == "quiet";
}

void info(const std::string& line) {
    if (!quiet_log()) std::cerr << line << '\n';
}

std::string fmt(const char* format, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, format, v);
    return buf;
}

Config make_config(const std::string& config_path, const std::vector<std::string>& sets) {
    Config c = config_path.empty() ? Config{} : load_config(config_path);
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw UsageError("--set expects key=value, got '" + kv + "'");
        }
        set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    validate_config(c);
    return c;
}

void save_by_extension(const Tractogram& t, const std::string& path) {
    const TractogramFormat format = path.size() >= 4 && path.substr(path.size() - 4) == ".txt"
                                        ? TractogramFormat::Text
                                        : TractogramFormat::Binary;
    save_tractogram(t, path, format);
}

/// Subset used for keypoint detection: min(subset, size) streamlines,
/// resampled to the model's point count.
Tractogram detection_subset(const Tractogram& t, int subset, std::uint64_t seed, int points,
                            const char* role) {
    std::size_t n = static_cast<std::size_t>(subset);
    if (n > t.size()) {
        info(std::string("warning: ") + role + " subset " + std::to_string(n) +
             " exceeds tractogram size " + std::to_string(t.size()) + "; clamped");
        n = t.size();
    }
    return resample_tractogram(sample_patch(t, n, seed), static_cast<std::size_t>(points));
}

int run_synth(const std::string& out_dir, std::size_t bundles, const PhantomOptions& options,
              double d_max, std::uint64_t seed, std::uint64_t warp_seed, const std::string& warp) {
    WarpFamily family;
    if (warp == "tps") {
        family = WarpFamily::Tps;
    } else if (warp == "sinusoid") {
        family = WarpFamily::Sinusoid;
    } else {
        throw UsageError("synth: --warp must be tps or sinusoid");
    }

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw DataError(out_dir + ": cannot create output directory (" + ec.message() + ")");

    const Tractogram phantom = gen_phantom(bundles, seed, options);
    const GroundTruthPair pair = make_pair(phantom, d_max, warp_seed, family);

    const std::string fixed_path = out_dir + "/fixed.trgm";
    const std::string moving_path = out_dir + "/moving.trgm";
    const std::string csv_path = out_dir + "/displacement.csv";
    save_tractogram(pair.fixed, fixed_path, TractogramFormat::Binary);
    save_tractogram(pair.moving, moving_path, TractogramFormat::Binary);
    save_displacement_csv(pair, csv_path);
    std::cout << "synth.bundles=" << bundles << '\n'
              << "synth.streamlines=" << phantom.size() << '\n'
              << "synth.d_max=" << fmt("%.9g", d_max) << '\n'
              << "synth.fixed=" << fixed_path << '\n'
              << "synth.moving=" << moving_path << '\n'
              << "synth.displacement=" << csv_path << '\n';
    if (pair.truth.has_value()) {
        const std::string truth_path = out_dir + "/truth.stps";
        save_transform(*pair.truth, truth_path);
        std::cout << "synth.truth=" << truth_path << '\n';
    }
    return 0;
}

std::vector<Tractogram> load_training_pool(const std::string& data_dir, int points) {
    std::vector<std::string> paths;
    std::error_code ec;
    for (const auto& entry : fs::directory_iterator(data_dir, ec)) {
        if (entry.is_regular_file() && entry.path().extension() == ".trgm") {
            paths.push_back(entry.path().string());
        }
    }
    if (ec) throw DataError(data_dir + ": cannot list directory (" + ec.message() + ")");
    std::sort(paths.begin(), paths.end());
    if (paths.size() < 2) {
        throw DataError(data_dir + ": need at least 2 .trgm training tractograms, found " +
                        std::to_string(paths.size()));
    }
    std::vector<Tractogram> pool;
    pool.reserve(paths.size());
    for (const auto& p : paths) {
        pool.push_back(resample_tractogram(load_tractogram_auto(p), static_cast<std::size_t>(points)));
        info("loaded " + p + " (" + std::to_string(pool.back().size()) + " streamlines)");
    }
    return pool;
}

int run_train(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& data_dir, const std::string& out_dir,
              const std::string& resume_path) {
    TrainerState trainer = [&] {
        if (resume_path.empty()) return make_trainer(make_config(config_path, sets));
        if (!config_path.empty() || !sets.empty()) {
            throw UsageError("train: --resume restores the checkpoint's configuration; "
                             "--config/--set cannot be combined with it");
        }
        return restore_trainer(load_checkpoint(resume_path));
    }();

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw DataError(out_dir + ": cannot create output directory (" + ec.message() + ")");

    const std::vector<Tractogram> pool = load_training_pool(data_dir, trainer.config.train.points);

    const std::string log_path = out_dir + "/train.log";
    std::ofstream log(log_path, resume_path.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw DataError(log_path + ": cannot open training log");

    const std::string ckpt_path = out_dir + "/checkpoint.stck";
    const int total_epochs = trainer.config.train.epochs;
    if (trainer.epoch >= total_epochs) {
        info("training already complete at epoch " + std::to_string(trainer.epoch));
    }
    while (trainer.epoch < total_epochs) {
        const auto start = std::chrono::steady_clock::now();
        train_epoch(trainer, pool, &log);
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        info("epoch " + std::to_string(trainer.epoch - 1) + "/" + std::to_string(total_epochs) +
             " done in " + fmt("%.1f", seconds) + "s");
        if (trainer.epoch % trainer.config.train.checkpoint_interval == 0 ||
            trainer.epoch == total_epochs) {
            save_checkpoint(trainer_checkpoint(trainer), ckpt_path);
        }
    }
    save_checkpoint(trainer_checkpoint(trainer), ckpt_path);
    std::cout << "train.epochs=" << trainer.epoch << '\n'
              << "train.iterations=" << trainer.iteration << '\n'
              << "train.checkpoint=" << ckpt_path << '\n'
              << "train.log=" << log_path << '\n';
    return 0;
}

int run_register(const std::string& moving_path, const std::string& fixed_path,
                 const std::string& ckpt_path, const std::string& out_path,
                 std::string transform_path, const std::string& matcher, const Config& cli_config) {
    if (matcher != "learned" && matcher != "nn") {
        throw UsageError("register: --matcher must be learned or nn");
    }
    if (matcher == "learned" && ckpt_path.empty()) {
        throw UsageError("register: --checkpoint is required with the learned matcher");
    }
    const auto start = std::chrono::steady_clock::now();

    const Tractogram moving = load_tractogram_auto(moving_path);
    const Tractogram fixed = load_tractogram_auto(fixed_path);

    Config config = cli_config;
    KeypointModel model;
    if (!ckpt_path.empty()) {
        const Checkpoint ckpt = load_checkpoint(ckpt_path);
        model = extract_model(ckpt);
        // Detection runs at the point count the model was trained with.
        const auto it = ckpt.meta.find("config.train.points");
        if (it != ckpt.meta.end()) set_config_value(config, "train.points", it->second);
    }

    const Tractogram moving_subset = detection_subset(moving, config.reg.subset, config.reg.seed,
                                                      config.train.points, "moving");
    const Tractogram fixed_subset = detection_subset(fixed, config.reg.subset, config.reg.seed,
                                                     config.train.points, "fixed");

    KeypointPairs pairs;
    if (matcher == "learned") {
        pairs.moving = detect_keypoints(model, moving_subset);
        pairs.fixed = detect_keypoints(model, fixed_subset);
    } else {
        pairs = nn_baseline_keypoints(moving_subset, fixed_subset, config.model.num_keypoints,
                                      config.reg.seed);
    }

    const TpsTransform transform = solve_tps(pairs, config.reg.lambda);
    const Tractogram moved = apply_transform(transform, moving);

    if (transform_path.empty()) {
        transform_path = out_path + ".stps";
    }
    save_by_extension(moved, out_path);
    save_transform(transform, transform_path);

    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << "register.matcher=" << matcher << '\n'
              << "register.keypoints=" << pairs.moving.rows() << '\n'
              << "register.lambda=" << fmt("%.9g", config.reg.lambda) << '\n'
              << "register.subset_moving=" << moving_subset.size() << '\n'
              << "register.subset_fixed=" << fixed_subset.size() << '\n'
              << "register.moved=" << out_path << '\n'
              << "register.transform=" << transform_path << '\n'
              << "register.seconds=" << fmt("%.3f", seconds) << '\n';
    return 0;
}

int run_keypoints(const std::string& input_path, const std::string& ckpt_path,
                  const std::string& out_path, const Config& cli_config) {
    const Tractogram tract = load_tractogram_auto(input_path);
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const KeypointModel model = extract_model(ckpt);
    Config config = cli_config;
    const auto it = ckpt.meta.find("config.train.points");
    if (it != ckpt.meta.end()) set_config_value(config, "train.points", it->second);

    const Tractogram subset = detection_subset(tract, config.reg.subset, config.reg.seed,
                                               config.train.points, "keypoints");
    const Eigen::MatrixXd kp = detect_keypoints(model, subset);

    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw DataError(out_path + ": cannot open for writing");
    char line[160];
    for (Eigen::Index k = 0; k < kp.rows(); ++k) {
        std::snprintf(line, sizeof line, "%lld,%.17g,%.17g,%.17g", static_cast<long long>(k),
                      kp(k, 0), kp(k, 1), kp(k, 2));
        out << line << '\n';
    }
    if (!out) throw DataError(out_path + ": write failed");
    std::cout << "keypoints.count=" << kp.rows() << '\n'
              << "keypoints.out=" << out_path << '\n';
    return 0;
}

struct BundleRow {
    std::string name;
    double abd_mm = 0.0;
    double wdice = 0.0;
    std::size_t n_moving = 0;
    std::size_t n_fixed = 0;
};

int run_evaluate(const std::string& moved_path, const std::string& fixed_path,
                 const Config& config, const std::string& csv_path) {
    const Tractogram moved = load_tractogram_auto(moved_path);
    const Tractogram fixed = load_tractogram_auto(fixed_path);

    const std::vector<std::uint32_t> moved_ids = moved.bundle_ids();
    const std::vector<std::uint32_t> fixed_ids = fixed.bundle_ids();
    if (moved_ids != fixed_ids) {
        std::string mismatch;
        for (const auto id : moved_ids) {
            if (std::find(fixed_ids.begin(), fixed_ids.end(), id) == fixed_ids.end()) {
                mismatch += " moved-only:" + std::to_string(id);
            }
        }
        for (const auto id : fixed_ids) {
            if (std::find(moved_ids.begin(), moved_ids.end(), id) == moved_ids.end()) {
                mismatch += " fixed-only:" + std::to_string(id);
            }
        }
        throw DataError("evaluate: bundle labels disagree between inputs:" + mismatch);
    }

    const bool unlabeled = moved_ids.size() == 1 && moved_ids[0] == kUnlabeledBundle;
    std::vector<BundleRow> rows;
    for (const auto id : moved_ids) {
        const Tractogram a = moved.bundle(id);
        const Tractogram b = fixed.bundle(id);
        BundleRow row;
        row.name = unlabeled ? "whole" : "bundle" + std::to_string(id);
        row.n_moving = a.size();
        row.n_fixed = b.size();
        const auto p = static_cast<std::size_t>(config.train.points);
        row.abd_mm = abd(resample_tractogram(a, p), resample_tractogram(b, p));
        row.wdice = wdice(tract_density_map(a, config.evaluate.voxel_mm),
                          tract_density_map(b, config.evaluate.voxel_mm));
        rows.push_back(row);
    }

    double mean_abd = 0.0, mean_wdice = 0.0;
    for (const auto& row : rows) {
        std::cout << row.name << ".abd_mm=" << fmt("%.9g", row.abd_mm) << '\n'
                  << row.name << ".wdice=" << fmt("%.9g", row.wdice) << '\n';
        mean_abd += row.abd_mm;
        mean_wdice += row.wdice;
    }
    mean_abd /= static_cast<double>(rows.size());
    mean_wdice /= static_cast<double>(rows.size());
    std::cout << "mean.abd_mm=" << fmt("%.9g", mean_abd) << '\n'
              << "mean.wdice=" << fmt("%.9g", mean_wdice) << '\n';

    if (!csv_path.empty()) {
        std::ofstream csv(csv_path, std::ios::trunc);
        if (!csv) throw DataError(csv_path + ": cannot open for writing");
        csv << "bundle,abd_mm,wdice,n_moving,n_fixed\n";
        for (const auto& row : rows) {
            csv << row.name << ',' << fmt("%.9g", row.abd_mm) << ',' << fmt("%.9g", row.wdice)
                << ',' << row.n_moving << ',' << row.n_fixed << '\n';
        }
        if (!csv) throw DataError(csv_path + ": write failed");
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"streg: tractography streamline registration toolkit"};
    app.require_subcommand(1);
    app.fallthrough(); // global flags are accepted after the subcommand too

    int threads = 0;
    if (const char* env = std::getenv("STREG_THREADS")) threads = std::atoi(env);
    bool deterministic = false;
    app.add_option("--threads", threads, "worker thread cap (0 = hardware)");
    app.add_flag("--deterministic", deterministic, "force single-threaded execution");

    std::string config_path;
    std::vector<std::string> sets;

    // synth
    auto* synth = app.add_subcommand("synth", "generate a phantom pair with ground truth");
    std::string synth_out;
    std::size_t synth_bundles = 6;
    PhantomOptions synth_options;
    double synth_dmax = 5.0;
    std::uint64_t synth_seed = 1, synth_warp_seed = 0;
    std::string synth_warp = "tps";
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--bundles", synth_bundles, "bundle count (default 6)");
    synth->add_option("--streamlines", synth_options.streamlines_per_bundle,
                      "streamlines per bundle (default 400)");
    synth->add_option("--points", synth_options.points, "points per streamline (default 15)");
    synth->add_option("--jitter", synth_options.jitter_sigma,
                      "per-streamline jitter sigma in mm (default 2.5)");
    synth->add_option("--dmax", synth_dmax, "maximum warp displacement in mm (default 5)");
    synth->add_option("--seed", synth_seed, "phantom seed (default 1)");
    synth->add_option("--warp-seed", synth_warp_seed, "warp seed (default: seed + 1)");
    synth->add_option("--warp", synth_warp, "warp family: tps | sinusoid (default tps)");

    // train
    auto* train = app.add_subcommand("train", "train the keypoint model unsupervised");
    std::string train_data, train_out, train_resume;
    train->add_option("--config", config_path, "config file (key = value lines)");
    train->add_option("--set", sets, "config override key=value (repeatable)");
    train->add_option("--data", train_data, "directory of .trgm training tractograms")->required();
    train->add_option("--out", train_out, "output directory for checkpoint and log")->required();
    train->add_option("--resume", train_resume, "checkpoint to continue from");

    // register
    auto* reg = app.add_subcommand("register", "warp a moving tractogram onto a fixed one");
    std::string reg_moving, reg_fixed, reg_ckpt, reg_out, reg_transform, reg_matcher = "learned";
    double reg_lambda = -1.0;
    int reg_subset = -1;
    std::uint64_t reg_seed = 0;
    reg->add_option("--config", config_path, "config file (key = value lines)");
    reg->add_option("--set", sets, "config override key=value (repeatable)");
    reg->add_option("--moving", reg_moving, "moving tractogram")->required();
    reg->add_option("--fixed", reg_fixed, "fixed tractogram")->required();
    reg->add_option("--checkpoint", reg_ckpt, "trained model checkpoint");
    reg->add_option("--out", reg_out, "moved tractogram output path")->required();
    reg->add_option("--transform", reg_transform, "transform output path (default <out>.stps)");
    reg->add_option("--matcher", reg_matcher, "keypoint matcher: learned | nn (default learned)");
    reg->add_option("--lambda", reg_lambda, "TPS regularization (default 0.5)");
    reg->add_option("--subset", reg_subset, "streamlines for detection (default min(30000, N))");
    reg->add_option("--seed", reg_seed, "subset sampling seed");

    // keypoints
    auto* keypoints = app.add_subcommand("keypoints", "export detected keypoints as CSV");
    std::string kp_input, kp_ckpt, kp_out;
    int kp_subset = -1;
    std::uint64_t kp_seed = 0;
    keypoints->add_option("--config", config_path, "config file (key = value lines)");
    keypoints->add_option("--set", sets, "config override key=value (repeatable)");
    keypoints->add_option("--input", kp_input, "tractogram")->required();
    keypoints->add_option("--checkpoint", kp_ckpt, "trained model checkpoint")->required();
    keypoints->add_option("--out", kp_out, "CSV output path (rows k,r,a,s)")->required();
    keypoints->add_option("--subset", kp_subset, "streamlines for detection");
    keypoints->add_option("--seed", kp_seed, "subset sampling seed");

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "bundle ABD and wDice between two tractograms");
    std::string eval_moved, eval_fixed, eval_csv;
    double eval_voxel = -1.0;
    evaluate->add_option("--config", config_path, "config file (key = value lines)");
    evaluate->add_option("--set", sets, "config override key=value (repeatable)");
    evaluate->add_option("--moved", eval_moved, "moved (or moving) tractogram")->required();
    evaluate->add_option("--fixed", eval_fixed, "fixed tractogram")->required();
    evaluate->add_option("--voxel", eval_voxel, "density map voxel size in mm (default 2)");
    evaluate->add_option("--csv", eval_csv, "per-bundle CSV output path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        set_max_threads(deterministic ? 1 : threads);
        if (synth->parsed()) {
            if (synth_warp_seed == 0) synth_warp_seed = synth_seed + 1;
            return run_synth(synth_out, synth_bundles, synth_options, synth_dmax, synth_seed,
                             synth_warp_seed, synth_warp);
        }
        if (train->parsed()) {
            return run_train(config_path, sets, train_data, train_out, train_resume);
        }
        Config config = make_config(config_path, sets);
        if (reg->parsed()) {
            if (reg->count("--lambda") > 0) config.reg.lambda = reg_lambda;
            if (reg->count("--subset") > 0) config.reg.subset = reg_subset;
            if (reg->count("--seed") > 0) config.reg.seed = reg_seed;
            return run_register(reg_moving, reg_fixed, reg_ckpt, reg_out, reg_transform,
                                reg_matcher, config);
        }
        if (keypoints->parsed()) {
            if (keypoints->count("--subset") > 0) config.reg.subset = kp_subset;
            if (keypoints->count("--seed") > 0) config.reg.seed = kp_seed;
            return run_keypoints(kp_input, kp_ckpt, kp_out, config);
        }
        if (evaluate->parsed()) {
            if (evaluate->count("--voxel") > 0) config.evaluate.voxel_mm = eval_voxel;
            return run_evaluate(eval_moved, eval_fixed, config, eval_csv);
        }
        throw UsageError("no subcommand selected");
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const NumericalError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << '\n';
        return 1;
    }
}
