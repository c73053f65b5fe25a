// Unsupervised training loop: random patch pairs, siamese keypoint
// detection, TPS solve at a sampled regularization, symmetric
// minimum-distance loss, and Adam updates on a stepwise-decayed learning
// rate. The whole state round-trips through checkpoints bit-exactly, so a
// resumed run reproduces the uninterrupted loss trajectory.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "streg/checkpoint.hpp"
#include "streg/config.hpp"
#include "streg/keypoint_net.hpp"
#include "streg/rng.hpp"
#include "streg/tractogram.hpp"

namespace streg {

struct AdamState {
    NetTensors m;
    NetTensors v;
    std::int64_t step = 0;

    static AdamState init(const ModelConfig& config);
};

/// Standard Adam with bias correction; beta1 0.9, beta2 0.999, eps 1e-8.
void adam_step(NetTensors& params, const NetTensors& grads, AdamState& state, double lr);

/// lr0 * decay^floor(epoch / interval).
double lr_schedule(double lr0, double decay, int interval, int epoch);

struct TrainerState {
    Config config;
    KeypointModel model;
    AdamState opt;
    Rng rng;
    std::int64_t iteration = 0;
    int epoch = 0; ///< next epoch to run
};

TrainerState make_trainer(const Config& config);

Checkpoint trainer_checkpoint(const TrainerState& state);
TrainerState restore_trainer(const Checkpoint& ckpt);

struct IterationStats {
    double loss = 0.0;
    double lambda = 0.0;
    double grad_norm = 0.0; ///< global norm before clipping
};

/// One Adam update on one ordered (moving, fixed) pair: averages the loss
/// and gradients of config.train.patches independently sampled patch pairs,
/// all solved at one sampled lambda. Patches larger than a subject are
/// clamped to the subject size. Non-finite loss or gradients abort with a
/// diagnostic naming the iteration and lambda.
IterationStats train_iteration(TrainerState& state, const Tractogram& moving,
                               const Tractogram& fixed);

/// One pass over the pool: every subject takes the moving role once, paired
/// with a uniformly drawn distinct partner. Writes one log line per
/// iteration as `iter,epoch,loss_mm,lr,lambda,seconds` when log is non-null.
void train_epoch(TrainerState& state, const std::vector<Tractogram>& pool, std::ostream* log);

} // namespace streg
