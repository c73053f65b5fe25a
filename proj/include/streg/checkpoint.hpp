// Versioned checkpoint container: string metadata (config echo, RNG state,
// progress counters) plus named float64 arrays (model parameters, optimizer
// moments). Writes are atomic: a temporary file is renamed into place.
//
// Layout, little-endian:
//   magic "STCK", u32 version
//   u32 meta count,  { str key, str value } sorted by key
//   u32 array count, { str name, u32 rows, u32 cols, f64 x rows*cols }
//                    sorted by name, column-major values
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "streg/keypoint_net.hpp"

namespace streg {

struct CheckpointArray {
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::vector<double> values;
};

struct Checkpoint {
    std::map<std::string, std::string> meta;
    std::map<std::string, CheckpointArray> arrays;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Store the model config (model.* meta keys) and parameter tensors.
void store_model(Checkpoint& ckpt, const KeypointModel& model);

/// Rebuild a model from a checkpoint, validating presence and shapes of
/// every parameter tensor.
KeypointModel extract_model(const Checkpoint& ckpt);

/// Store/load an extra tensor set under a name prefix (optimizer moments).
void store_tensors(Checkpoint& ckpt, const NetTensors& tensors, const std::string& prefix);
void extract_tensors(const Checkpoint& ckpt, NetTensors& tensors, const std::string& prefix);

/// Round-trippable decimal formatting for double-valued meta entries.
std::string format_double(double v);
double parse_double_meta(const Checkpoint& ckpt, const std::string& key);
std::int64_t parse_int_meta(const Checkpoint& ckpt, const std::string& key);
const std::string& require_meta(const Checkpoint& ckpt, const std::string& key);

} // namespace streg
