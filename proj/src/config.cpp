#include "streg/config.hpp"

#include <cmath>
#include <fstream>

#include "streg/checkpoint.hpp"
#include "streg/errors.hpp"

namespace streg {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

int parse_positive_int(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    int v = 0;
    try {
        v = std::stoi(value, &used);
    } catch (const std::logic_error&) {
        throw UsageError("config: " + key + ": expected an integer, got '" + value + "'");
    }
    if (used != value.size() || v < 1) {
        throw UsageError("config: " + key + ": expected a positive integer, got '" + value + "'");
    }
    return v;
}

double parse_number(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(value, &used);
    } catch (const std::logic_error&) {
        throw UsageError("config: " + key + ": expected a number, got '" + value + "'");
    }
    if (used != value.size() || !std::isfinite(v)) {
        throw UsageError("config: " + key + ": expected a finite number, got '" + value + "'");
    }
    return v;
}

double parse_positive(const std::string& key, const std::string& value) {
    const double v = parse_number(key, value);
    if (!(v > 0.0)) {
        throw UsageError("config: " + key + ": expected a positive number, got '" + value + "'");
    }
    return v;
}

std::uint64_t parse_seed(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(value, &used);
    } catch (const std::logic_error&) {
        throw UsageError("config: " + key + ": expected an unsigned integer, got '" + value + "'");
    }
    if (used != value.size()) {
        throw UsageError("config: " + key + ": expected an unsigned integer, got '" + value + "'");
    }
    return v;
}

} // namespace

void set_config_value(Config& c, const std::string& key, const std::string& value) {
    if (key == "model.keypoints") {
        c.model.num_keypoints = parse_positive_int(key, value);
    } else if (key == "model.hidden") {
        c.model.hidden = parse_positive_int(key, value);
    } else if (key == "model.layers") {
        c.model.layers = parse_positive_int(key, value);
    } else if (key == "model.temperature") {
        c.model.temperature = parse_positive(key, value);
    } else if (key == "train.patches") {
        c.train.patches = parse_positive_int(key, value);
    } else if (key == "train.patch_size") {
        c.train.patch_size = parse_positive_int(key, value);
    } else if (key == "train.points") {
        const int v = parse_positive_int(key, value);
        if (v < 2) throw UsageError("config: train.points: need at least 2 points");
        c.train.points = v;
    } else if (key == "train.lr") {
        c.train.lr = parse_positive(key, value);
    } else if (key == "train.decay") {
        const double v = parse_positive(key, value);
        if (v > 1.0) throw UsageError("config: train.decay: must lie in (0, 1]");
        c.train.decay = v;
    } else if (key == "train.decay_interval") {
        c.train.decay_interval = parse_positive_int(key, value);
    } else if (key == "train.epochs") {
        c.train.epochs = parse_positive_int(key, value);
    } else if (key == "train.lambda_min") {
        c.train.lambda_min = parse_positive(key, value);
    } else if (key == "train.lambda_max") {
        c.train.lambda_max = parse_positive(key, value);
    } else if (key == "train.clip_norm") {
        const double v = parse_number(key, value);
        if (v < 0.0) throw UsageError("config: train.clip_norm: must be >= 0");
        c.train.clip_norm = v;
    } else if (key == "train.checkpoint_interval") {
        c.train.checkpoint_interval = parse_positive_int(key, value);
    } else if (key == "train.seed") {
        c.train.seed = parse_seed(key, value);
    } else if (key == "register.subset") {
        c.reg.subset = parse_positive_int(key, value);
    } else if (key == "register.lambda") {
        const double v = parse_number(key, value);
        if (v < 0.0) throw UsageError("config: register.lambda: must be >= 0");
        c.reg.lambda = v;
    } else if (key == "register.seed") {
        c.reg.seed = parse_seed(key, value);
    } else if (key == "evaluate.voxel_mm") {
        c.evaluate.voxel_mm = parse_positive(key, value);
    } else {
        throw UsageError("config: unknown key '" + key + "'");
    }
}

void validate_config(const Config& c) {
    if (c.train.lambda_min > c.train.lambda_max) {
        throw UsageError("config: train.lambda_min exceeds train.lambda_max");
    }
}

Config load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError(path + ": cannot open config file");
    Config c;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw UsageError(path + ":" + std::to_string(line_no) +
                             ": expected key = value, got '" + stripped + "'");
        }
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = trim(stripped.substr(eq + 1));
        try {
            set_config_value(c, key, value);
        } catch (const UsageError& e) {
            throw UsageError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    validate_config(c);
    return c;
}

std::vector<std::pair<std::string, std::string>> list_config(const Config& c) {
    std::vector<std::pair<std::string, std::string>> out;
    out.emplace_back("model.keypoints", std::to_string(c.model.num_keypoints));
    out.emplace_back("model.hidden", std::to_string(c.model.hidden));
    out.emplace_back("model.layers", std::to_string(c.model.layers));
    out.emplace_back("model.temperature", format_double(c.model.temperature));
    out.emplace_back("train.patches", std::to_string(c.train.patches));
    out.emplace_back("train.patch_size", std::to_string(c.train.patch_size));
    out.emplace_back("train.points", std::to_string(c.train.points));
    out.emplace_back("train.lr", format_double(c.train.lr));
    out.emplace_back("train.decay", format_double(c.train.decay));
    out.emplace_back("train.decay_interval", std::to_string(c.train.decay_interval));
    out.emplace_back("train.epochs", std::to_string(c.train.epochs));
    out.emplace_back("train.lambda_min", format_double(c.train.lambda_min));
    out.emplace_back("train.lambda_max", format_double(c.train.lambda_max));
    out.emplace_back("train.clip_norm", format_double(c.train.clip_norm));
    out.emplace_back("train.checkpoint_interval", std::to_string(c.train.checkpoint_interval));
    out.emplace_back("train.seed", std::to_string(c.train.seed));
    out.emplace_back("register.subset", std::to_string(c.reg.subset));
    out.emplace_back("register.lambda", format_double(c.reg.lambda));
    out.emplace_back("register.seed", std::to_string(c.reg.seed));
    out.emplace_back("evaluate.voxel_mm", format_double(c.evaluate.voxel_mm));
    return out;
}

} // namespace streg
