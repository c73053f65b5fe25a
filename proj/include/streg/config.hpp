// Flat key=value configuration with section-prefixed keys, shared by the
// CLI subcommands. A config file is line-oriented: blank lines and
// #-comments ignored, one `key = value` per line. The same keys are
// accepted as command-line overrides and echoed into checkpoints.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "streg/keypoint_net.hpp"

namespace streg {

struct Config {
    ModelConfig model; // model.keypoints/hidden/layers/temperature

    struct Train {
        int patches = 4;          ///< patch pairs per iteration
        int patch_size = 2200;    ///< streamlines per patch
        int points = 15;          ///< resampled points per streamline
        double lr = 1e-3;
        double decay = 0.5;       ///< learning-rate factor, in (0, 1]
        int decay_interval = 10;  ///< epochs between decay steps
        int epochs = 1000;
        double lambda_min = 1e-3; ///< TPS regularization draw range
        double lambda_max = 10.0;
        double clip_norm = 10.0;  ///< global gradient-norm clip, 0 disables
        int checkpoint_interval = 100; ///< epochs between checkpoints
        std::uint64_t seed = 1;
    } train;

    struct Register {
        int subset = 30000; ///< streamlines used for keypoint detection
        double lambda = 0.5;
        std::uint64_t seed = 1; ///< subset sampling seed
    } reg;

    struct Evaluate {
        double voxel_mm = 2.0;
    } evaluate;
};

/// Parse a config file. Unknown keys and malformed lines raise UsageError
/// naming the line number.
Config load_config(const std::string& path);

/// Apply one `key=value` assignment; validates the value range.
void set_config_value(Config& config, const std::string& key, const std::string& value);

/// Cross-field checks (range ordering); call after all assignments.
void validate_config(const Config& config);

/// All keys with their current values, in declaration order.
std::vector<std::pair<std::string, std::string>> list_config(const Config& config);

} // namespace streg
