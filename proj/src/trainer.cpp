#include "streg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "streg/errors.hpp"
#include "streg/metrics.hpp"
#include "streg/tps.hpp"

namespace streg {

namespace {
constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEps = 1e-8;

void accumulate(NetTensors& into, const NetTensors& grads, double scale) {
    auto dst = named_arrays(into);
    auto src = named_arrays(const_cast<NetTensors&>(grads));
    for (std::size_t i = 0; i < dst.size(); ++i) {
        for (std::ptrdiff_t j = 0; j < dst[i].size; ++j) dst[i].data[j] += scale * src[i].data[j];
    }
}

double global_norm(NetTensors& grads) {
    double sq = 0.0;
    for (const NamedArray& a : named_arrays(grads)) {
        for (std::ptrdiff_t j = 0; j < a.size; ++j) sq += a.data[j] * a.data[j];
    }
    return std::sqrt(sq);
}

void scale_tensors(NetTensors& grads, double factor) {
    for (const NamedArray& a : named_arrays(grads)) {
        for (std::ptrdiff_t j = 0; j < a.size; ++j) a.data[j] *= factor;
    }
}

} // namespace

AdamState AdamState::init(const ModelConfig& config) {
    AdamState s;
    s.m = NetTensors::zeros(config);
    s.v = NetTensors::zeros(config);
    return s;
}

void adam_step(NetTensors& params, const NetTensors& grads, AdamState& state, double lr) {
    auto p = named_arrays(params);
    auto g = named_arrays(const_cast<NetTensors&>(grads));
    auto m = named_arrays(state.m);
    auto v = named_arrays(state.v);
    if (p.size() != g.size()) throw std::invalid_argument("adam_step: tensor list mismatch");
    ++state.step;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i].size != g[i].size) {
            throw std::invalid_argument("adam_step: shape mismatch for " + p[i].name);
        }
        for (std::ptrdiff_t j = 0; j < p[i].size; ++j) {
            const double grad = g[i].data[j];
            double& mm = m[i].data[j];
            double& vv = v[i].data[j];
            mm = kBeta1 * mm + (1.0 - kBeta1) * grad;
            vv = kBeta2 * vv + (1.0 - kBeta2) * grad * grad;
            p[i].data[j] -= lr * (mm / bc1) / (std::sqrt(vv / bc2) + kEps);
        }
    }
}

double lr_schedule(double lr0, double decay, int interval, int epoch) {
    if (epoch < 0 || interval < 1) throw std::invalid_argument("lr_schedule: bad arguments");
    return lr0 * std::pow(decay, static_cast<double>(epoch / interval));
}

TrainerState make_trainer(const Config& config) {
    validate_config(config);
    TrainerState s{config, {}, AdamState::init(config.model), Rng(config.train.seed), 0, 0};
    Rng init_rng(config.train.seed);
    s.model = KeypointModel::init(config.model, init_rng);
    return s;
}

Checkpoint trainer_checkpoint(const TrainerState& state) {
    Checkpoint ckpt;
    for (const auto& [key, value] : list_config(state.config)) ckpt.meta["config." + key] = value;
    store_model(ckpt, state.model);
    store_tensors(ckpt, state.opt.m, "adam.m.");
    store_tensors(ckpt, state.opt.v, "adam.v.");
    ckpt.meta["trainer.step"] = std::to_string(state.opt.step);
    ckpt.meta["trainer.iteration"] = std::to_string(state.iteration);
    ckpt.meta["trainer.epoch"] = std::to_string(state.epoch);
    ckpt.meta["rng.state"] = state.rng.state();
    return ckpt;
}

TrainerState restore_trainer(const Checkpoint& ckpt) {
    Config config;
    const std::string prefix = "config.";
    for (const auto& [key, value] : ckpt.meta) {
        if (key.rfind(prefix, 0) == 0) set_config_value(config, key.substr(prefix.size()), value);
    }
    validate_config(config);

    TrainerState s{config, extract_model(ckpt), AdamState::init(config.model), Rng(0), 0, 0};
    extract_tensors(ckpt, s.opt.m, "adam.m.");
    extract_tensors(ckpt, s.opt.v, "adam.v.");
    s.opt.step = parse_int_meta(ckpt, "trainer.step");
    s.iteration = parse_int_meta(ckpt, "trainer.iteration");
    s.epoch = static_cast<int>(parse_int_meta(ckpt, "trainer.epoch"));
    s.rng.set_state(require_meta(ckpt, "rng.state"));
    return s;
}

IterationStats train_iteration(TrainerState& state, const Tractogram& moving,
                               const Tractogram& fixed) {
    const auto& cfg = state.config.train;
    IterationStats stats;
    stats.lambda = sample_lambda(state.rng, cfg.lambda_min, cfg.lambda_max);

    NetTensors grads = NetTensors::zeros(state.config.model);
    const double patch_weight = 1.0 / static_cast<double>(cfg.patches);

    for (int patch = 0; patch < cfg.patches; ++patch) {
        const std::size_t n_moving =
            std::min<std::size_t>(static_cast<std::size_t>(cfg.patch_size), moving.size());
        const std::size_t n_fixed =
            std::min<std::size_t>(static_cast<std::size_t>(cfg.patch_size), fixed.size());
        const Tractogram moving_patch = sample_patch(moving, n_moving, state.rng.next_u64());
        const Tractogram fixed_patch = sample_patch(fixed, n_fixed, state.rng.next_u64());

        const StreamlineGraph moving_graph = build_graph(moving_patch);
        const StreamlineGraph fixed_graph = build_graph(fixed_patch);

        ForwardCache moving_cache, fixed_cache;
        const Eigen::MatrixXd kp_moving = detect_keypoints(state.model, moving_graph, &moving_cache);
        const Eigen::MatrixXd kp_fixed = detect_keypoints(state.model, fixed_graph, &fixed_cache);

        TpsSolveCache tps_cache;
        const TpsTransform transform = solve_tps({kp_moving, kp_fixed}, stats.lambda, &tps_cache);
        const Eigen::MatrixXd warped = apply_transform(transform, moving_graph.nodes);

        Eigen::MatrixXd d_warped;
        const double loss = chamfer_loss_points(
            warped, fixed_graph.nodes, static_cast<Eigen::Index>(moving_graph.points_per_streamline),
            &d_warped);
        stats.loss += patch_weight * loss;

        const TpsPairGradients tps_grads =
            tps_backward(tps_cache, moving_graph.nodes, patch_weight * d_warped);
        const NetGradients moving_grads =
            backward(state.model, moving_graph, moving_cache, tps_grads.d_moving);
        const NetGradients fixed_grads =
            backward(state.model, fixed_graph, fixed_cache, tps_grads.d_fixed);
        accumulate(grads, moving_grads.params, 1.0);
        accumulate(grads, fixed_grads.params, 1.0);
    }

    stats.grad_norm = global_norm(grads);
    if (!std::isfinite(stats.loss) || !std::isfinite(stats.grad_norm)) {
        throw NumericalError("train_iteration " + std::to_string(state.iteration + 1) +
                             ": non-finite loss " + std::to_string(stats.loss) +
                             " or gradient norm " + std::to_string(stats.grad_norm) +
                             " (lambda " + std::to_string(stats.lambda) + ")");
    }
    if (cfg.clip_norm > 0.0 && stats.grad_norm > cfg.clip_norm) {
        scale_tensors(grads, cfg.clip_norm / stats.grad_norm);
    }

    const double lr = lr_schedule(cfg.lr, cfg.decay, cfg.decay_interval, state.epoch);
    adam_step(state.model.params, grads, state.opt, lr);
    ++state.iteration;
    return stats;
}

void train_epoch(TrainerState& state, const std::vector<Tractogram>& pool, std::ostream* log) {
    if (pool.size() < 2) throw std::invalid_argument("train_epoch: need at least 2 subjects");
    const double lr =
        lr_schedule(state.config.train.lr, state.config.train.decay,
                    state.config.train.decay_interval, state.epoch);
    for (std::size_t mover = 0; mover < pool.size(); ++mover) {
        std::size_t partner = state.rng.uniform_index(pool.size() - 1);
        if (partner >= mover) ++partner;
        const auto start = std::chrono::steady_clock::now();
        const IterationStats stats = train_iteration(state, pool[mover], pool[partner]);
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (log != nullptr) {
            char line[160];
            std::snprintf(line, sizeof line, "%lld,%d,%.9g,%.9g,%.9g,%.3f",
                          static_cast<long long>(state.iteration), state.epoch, stats.loss, lr,
                          stats.lambda, seconds);
            (*log) << line << '\n';
        }
    }
    ++state.epoch;
    if (log != nullptr) log->flush();
}

} // namespace streg
