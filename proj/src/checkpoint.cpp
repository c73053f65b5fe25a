#include "streg/checkpoint.hpp"

#include <cstdio>
#include <filesystem>

#include "streg/byte_io.hpp"
#include "streg/errors.hpp"

namespace streg {

namespace {
constexpr char kMagic[4] = {'S', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;
} // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        ByteWriter w(tmp);
        w.write(kMagic, 4);
        w.write_u32(kVersion);
        w.write_u32(static_cast<std::uint32_t>(ckpt.meta.size()));
        for (const auto& [key, value] : ckpt.meta) {
            w.write_str(key);
            w.write_str(value);
        }
        w.write_u32(static_cast<std::uint32_t>(ckpt.arrays.size()));
        for (const auto& [name, arr] : ckpt.arrays) {
            if (arr.values.size() !=
                static_cast<std::size_t>(arr.rows) * static_cast<std::size_t>(arr.cols)) {
                throw std::invalid_argument("save_checkpoint: array " + name +
                                            " shape disagrees with its length");
            }
            w.write_str(name);
            w.write_u32(arr.rows);
            w.write_u32(arr.cols);
            for (const double v : arr.values) w.write_f64(v);
        }
        w.finish();
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError(path + ": cannot finalize checkpoint (" + ec.message() + ")");
}

Checkpoint load_checkpoint(const std::string& path) {
    ByteReader r(path);
    char magic[4];
    r.read(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw DataError(path + ": bad magic bytes (expected STCK)");
    }
    const std::uint32_t version = r.read_u32("version");
    if (version != kVersion) {
        throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ckpt;
    const std::uint32_t n_meta = r.read_u32("meta count");
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        const std::string key = r.read_str("meta key");
        ckpt.meta[key] = r.read_str("meta value");
    }
    const std::uint32_t n_arrays = r.read_u32("array count");
    for (std::uint32_t i = 0; i < n_arrays; ++i) {
        const std::string name = r.read_str("array name");
        CheckpointArray arr;
        arr.rows = r.read_u32("array rows");
        arr.cols = r.read_u32("array cols");
        const std::size_t len =
            static_cast<std::size_t>(arr.rows) * static_cast<std::size_t>(arr.cols);
        arr.values.resize(len);
        for (std::size_t j = 0; j < len; ++j) arr.values[j] = r.read_f64("array values");
        ckpt.arrays[name] = std::move(arr);
    }
    if (!r.at_eof()) throw DataError(path + ": trailing bytes after checkpoint data");
    return ckpt;
}

void store_tensors(Checkpoint& ckpt, const NetTensors& tensors, const std::string& prefix) {
    // The views are only read here; named_arrays needs mutable tensors
    // because the optimizer writes through the same views.
    for (const NamedArray& a : named_arrays(const_cast<NetTensors&>(tensors), prefix)) {
        CheckpointArray arr;
        arr.rows = a.rows;
        arr.cols = a.cols;
        arr.values.assign(a.data, a.data + a.size);
        ckpt.arrays[a.name] = std::move(arr);
    }
}

void extract_tensors(const Checkpoint& ckpt, NetTensors& tensors, const std::string& prefix) {
    for (const NamedArray& a : named_arrays(tensors, prefix)) {
        const auto it = ckpt.arrays.find(a.name);
        if (it == ckpt.arrays.end()) {
            throw DataError("checkpoint: missing array " + a.name);
        }
        const CheckpointArray& arr = it->second;
        if (arr.rows != a.rows || arr.cols != a.cols) {
            throw DataError("checkpoint: array " + a.name + " has shape " +
                            std::to_string(arr.rows) + "x" + std::to_string(arr.cols) +
                            ", expected " + std::to_string(a.rows) + "x" + std::to_string(a.cols));
        }
        std::copy(arr.values.begin(), arr.values.end(), a.data);
    }
}

void store_model(Checkpoint& ckpt, const KeypointModel& model) {
    ckpt.meta["model.num_keypoints"] = std::to_string(model.config.num_keypoints);
    ckpt.meta["model.hidden"] = std::to_string(model.config.hidden);
    ckpt.meta["model.layers"] = std::to_string(model.config.layers);
    ckpt.meta["model.temperature"] = format_double(model.config.temperature);
    store_tensors(ckpt, model.params, "");
}

KeypointModel extract_model(const Checkpoint& ckpt) {
    ModelConfig config;
    config.num_keypoints = static_cast<int>(parse_int_meta(ckpt, "model.num_keypoints"));
    config.hidden = static_cast<int>(parse_int_meta(ckpt, "model.hidden"));
    config.layers = static_cast<int>(parse_int_meta(ckpt, "model.layers"));
    config.temperature = parse_double_meta(ckpt, "model.temperature");
    if (config.num_keypoints < 1 || config.hidden < 1 || config.layers < 1 ||
        !(config.temperature > 0.0)) {
        throw DataError("checkpoint: invalid model configuration");
    }
    KeypointModel model;
    model.config = config;
    model.params = NetTensors::zeros(config);
    extract_tensors(ckpt, model.params, "");
    return model;
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

const std::string& require_meta(const Checkpoint& ckpt, const std::string& key) {
    const auto it = ckpt.meta.find(key);
    if (it == ckpt.meta.end()) throw DataError("checkpoint: missing meta key " + key);
    return it->second;
}

double parse_double_meta(const Checkpoint& ckpt, const std::string& key) {
    try {
        return std::stod(require_meta(ckpt, key));
    } catch (const std::logic_error&) {
        throw DataError("checkpoint: meta key " + key + " is not a number");
    }
}

std::int64_t parse_int_meta(const Checkpoint& ckpt, const std::string& key) {
    try {
        return std::stoll(require_meta(ckpt, key));
    } catch (const std::logic_error&) {
        throw DataError("checkpoint: meta key " + key + " is not an integer");
    }
}

} // namespace streg
