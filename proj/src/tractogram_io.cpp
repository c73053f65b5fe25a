#include "streg/tractogram_io.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "streg/byte_io.hpp"
#include "streg/errors.hpp"

namespace streg {

namespace {

constexpr char kMagic[4] = {'T', 'R', 'G', 'M'};
constexpr std::uint32_t kBinaryVersion = 1;

Tractogram load_binary(const std::string& path) {
    ByteReader r(path);

    char magic[4];
    r.read(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw DataError(path + ": bad magic bytes at byte offset 0 (expected TRGM)");
    }
    const std::uint32_t version = r.read_u32("version");
    if (version != kBinaryVersion) {
        throw DataError(path + ": unsupported version " + std::to_string(version) +
                        " at byte offset 4");
    }
    const std::uint32_t n = r.read_u32("streamline count");
    if (n == 0) throw DataError(path + ": empty tractogram (N >= 1 required)");
    const std::uint32_t uniform_p = r.read_u32("points-per-streamline");

    Tractogram t;
    t.streamlines.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint64_t streamline_offset = r.offset;
        const std::uint32_t count = r.read_u32("point count");
        if (count < 2) {
            throw DataError(path + ": streamline " + std::to_string(i) +
                            " has fewer than 2 points at byte offset " +
                            std::to_string(streamline_offset));
        }
        if (uniform_p != 0 && count != uniform_p) {
            throw DataError(path + ": streamline " + std::to_string(i) + " has " +
                            std::to_string(count) + " points, header promised " +
                            std::to_string(uniform_p) + " (byte offset " +
                            std::to_string(streamline_offset) + ")");
        }
        auto& sl = t.streamlines[i];
        sl.bundle = r.read_u32("bundle label");
        sl.points.resize(count);
        for (std::uint32_t k = 0; k < count; ++k) {
            const std::uint64_t point_offset = r.offset;
            const float pr = r.read_f32("coordinate");
            const float pa = r.read_f32("coordinate");
            const float ps = r.read_f32("coordinate");
            if (!std::isfinite(pr) || !std::isfinite(pa) || !std::isfinite(ps)) {
                throw DataError(path + ": non-finite coordinate in streamline " +
                                std::to_string(i) + " at byte offset " +
                                std::to_string(point_offset));
            }
            sl.points[k] = Point3(pr, pa, ps);
        }
    }
    if (!r.at_eof()) {
        throw DataError(path + ": trailing bytes after streamline data at byte offset " +
                        std::to_string(r.offset));
    }
    validate_tractogram(t);
    return t;
}

void save_binary(const Tractogram& t, const std::string& path) {
    ByteWriter w(path);
    w.write(kMagic, 4);
    w.write_u32(kBinaryVersion);
    w.write_u32(static_cast<std::uint32_t>(t.size()));
    w.write_u32(static_cast<std::uint32_t>(t.points_per_streamline()));
    for (const auto& sl : t.streamlines) {
        w.write_u32(static_cast<std::uint32_t>(sl.points.size()));
        w.write_u32(sl.bundle);
        for (const auto& pt : sl.points) {
            w.write_f32(static_cast<float>(pt.r));
            w.write_f32(static_cast<float>(pt.a));
            w.write_f32(static_cast<float>(pt.s));
        }
    }
    w.finish();
}

Tractogram load_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path + ": cannot open for reading");

    std::string header;
    if (!std::getline(in, header)) throw DataError(path + ": missing header line");
    std::size_t expected = 0;
    {
        std::istringstream hs(header);
        std::string magic, ver, ntok;
        hs >> magic >> ver >> ntok;
        if (magic != "TRGM" || ver != "v1" || ntok.rfind("N=", 0) != 0) {
            throw DataError(path + ": bad text header '" + header + "'");
        }
        try {
            expected = std::stoul(ntok.substr(2));
        } catch (const std::exception&) {
            throw DataError(path + ": bad streamline count in header '" + header + "'");
        }
    }
    if (expected == 0) throw DataError(path + ": empty tractogram (N >= 1 required)");

    Tractogram t;
    t.streamlines.reserve(expected);
    std::string line;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto semi = line.find(';');
        if (semi == std::string::npos) {
            throw DataError(path + ":" + std::to_string(line_no) + ": missing ';' after label");
        }
        Streamline sl;
        try {
            sl.bundle = static_cast<std::uint32_t>(std::stoul(line.substr(0, semi)));
        } catch (const std::exception&) {
            throw DataError(path + ":" + std::to_string(line_no) + ": bad bundle label");
        }
        std::istringstream ps(line.substr(semi + 1));
        std::string triple;
        while (ps >> triple) {
            Point3 pt;
            if (std::sscanf(triple.c_str(), "%lf,%lf,%lf", &pt.r, &pt.a, &pt.s) != 3) {
                throw DataError(path + ":" + std::to_string(line_no) + ": bad point '" + triple + "'");
            }
            if (!pt.finite()) {
                throw DataError(path + ":" + std::to_string(line_no) + ": non-finite coordinate");
            }
            sl.points.push_back(pt);
        }
        if (sl.points.size() < 2) {
            throw DataError(path + ":" + std::to_string(line_no) + ": streamline has fewer than 2 points");
        }
        t.streamlines.push_back(std::move(sl));
    }
    if (t.size() != expected) {
        throw DataError(path + ": header promised " + std::to_string(expected) +
                        " streamlines, file contains " + std::to_string(t.size()));
    }
    validate_tractogram(t);
    return t;
}

void save_text(const Tractogram& t, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError(path + ": cannot open for writing");
    out << "TRGM v1 N=" << t.size() << "\n";
    char buf[96];
    for (const auto& sl : t.streamlines) {
        out << sl.bundle << ';';
        for (std::size_t k = 0; k < sl.points.size(); ++k) {
            const auto& pt = sl.points[k];
            std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g", pt.r, pt.a, pt.s);
            if (k > 0) out << ' ';
            out << buf;
        }
        out << '\n';
    }
    out.flush();
    if (!out) throw DataError(path + ": write failed");
}

} // namespace

Tractogram load_tractogram(const std::string& path, TractogramFormat format) {
    return format == TractogramFormat::Binary ? load_binary(path) : load_text(path);
}

void save_tractogram(const Tractogram& t, const std::string& path, TractogramFormat format) {
    if (t.streamlines.empty()) throw DataError("save_tractogram: empty tractogram");
    validate_tractogram(t);
    if (format == TractogramFormat::Binary) {
        save_binary(t, path);
    } else {
        save_text(t, path);
    }
}

TractogramFormat detect_tractogram_format(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path + ": cannot open for reading");
    char head[8] = {};
    in.read(head, 8);
    if (in.gcount() >= 5 && std::memcmp(head, "TRGM ", 5) == 0) return TractogramFormat::Text;
    return TractogramFormat::Binary;
}

Tractogram load_tractogram_auto(const std::string& path) {
    return load_tractogram(path, detect_tractogram_format(path));
}

} // namespace streg
