#include "streg/tractogram.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "streg/errors.hpp"
#include "streg/rng.hpp"

namespace streg {

double Point3::norm() const { return std::sqrt(r * r + a * a + s * s); }

bool Point3::finite() const {
    return std::isfinite(r) && std::isfinite(a) && std::isfinite(s);
}

double distance(const Point3& a, const Point3& b) { return (a - b).norm(); }

double Streamline::arc_length() const {
    double total = 0.0;
    for (std::size_t i = 1; i < points.size(); ++i) {
        total += distance(points[i - 1], points[i]);
    }
    return total;
}

std::size_t Tractogram::total_points() const {
    std::size_t n = 0;
    for (const auto& s : streamlines) n += s.points.size();
    return n;
}

std::size_t Tractogram::points_per_streamline() const {
    if (streamlines.empty()) return 0;
    const std::size_t p = streamlines.front().points.size();
    for (const auto& s : streamlines) {
        if (s.points.size() != p) return 0;
    }
    return p;
}

std::vector<std::uint32_t> Tractogram::bundle_ids() const {
    std::set<std::uint32_t> ids;
    for (const auto& s : streamlines) ids.insert(s.bundle);
    return {ids.begin(), ids.end()};
}

Tractogram Tractogram::bundle(std::uint32_t id) const {
    Tractogram out;
    out.bundle_names = bundle_names;
    for (const auto& s : streamlines) {
        if (s.bundle == id) out.streamlines.push_back(s);
    }
    return out;
}

Streamline resample_streamline(const Streamline& s, std::size_t point_count) {
    if (point_count < 2) throw std::invalid_argument("resample_streamline: need >= 2 output points");
    if (s.points.size() < 2) throw DataError("resample_streamline: streamline has fewer than 2 points");

    const std::size_t n = s.points.size();
    std::vector<double> cum(n, 0.0);
    for (std::size_t i = 1; i < n; ++i) {
        cum[i] = cum[i - 1] + distance(s.points[i - 1], s.points[i]);
    }
    const double total = cum.back();
    if (!(total > 0.0)) {
        throw DataError("resample_streamline: degenerate streamline (zero arc length)");
    }

    Streamline out;
    out.bundle = s.bundle;
    out.points.resize(point_count);
    out.points.front() = s.points.front();
    out.points.back() = s.points.back();

    std::size_t seg = 0;
    for (std::size_t k = 1; k + 1 < point_count; ++k) {
        const double target = total * static_cast<double>(k) / static_cast<double>(point_count - 1);
        while (seg + 2 < n && cum[seg + 1] <= target) ++seg;
        const double seg_len = cum[seg + 1] - cum[seg];
        // zero-length segments are skipped by the <= advance above except at
        // the trailing edge; fall back to the segment start there
        const double frac = seg_len > 0.0 ? (target - cum[seg]) / seg_len : 0.0;
        out.points[k] = s.points[seg] + (s.points[seg + 1] - s.points[seg]) * frac;
    }
    return out;
}

Tractogram resample_tractogram(const Tractogram& t, std::size_t point_count) {
    Tractogram out;
    out.bundle_names = t.bundle_names;
    out.streamlines.reserve(t.size());
    for (const auto& s : t.streamlines) {
        out.streamlines.push_back(resample_streamline(s, point_count));
    }
    return out;
}

Tractogram sample_patch(const Tractogram& t, std::size_t n, std::uint64_t rng_seed) {
    if (n > t.size()) {
        throw std::invalid_argument("sample_patch: requested " + std::to_string(n) +
                                    " streamlines from a tractogram of " + std::to_string(t.size()));
    }
    Rng rng(rng_seed);
    const auto idx = rng.sample_without_replacement(t.size(), n);
    Tractogram out;
    out.bundle_names = t.bundle_names;
    out.streamlines.reserve(n);
    for (const std::size_t i : idx) out.streamlines.push_back(t.streamlines[i]);
    return out;
}

StreamlineGraph build_graph(const Tractogram& patch) {
    if (patch.size() == 0) throw DataError("build_graph: empty patch");
    const std::size_t p = patch.points_per_streamline();
    if (p < 2) {
        throw DataError("build_graph: patch is not resampled to a uniform point count");
    }

    StreamlineGraph g;
    g.points_per_streamline = p;
    const std::size_t n_nodes = patch.size() * p;
    g.nodes.resize(static_cast<Eigen::Index>(n_nodes), 3);
    g.node_streamline.resize(n_nodes);
    g.neighbors.assign(n_nodes, {StreamlineGraph::kNoNeighbor, StreamlineGraph::kNoNeighbor});
    g.edges.reserve(patch.size() * (p - 1));

    std::size_t node = 0;
    for (std::size_t si = 0; si < patch.size(); ++si) {
        const auto& sl = patch.streamlines[si];
        for (std::size_t k = 0; k < p; ++k, ++node) {
            g.nodes(static_cast<Eigen::Index>(node), 0) = sl.points[k].r;
            g.nodes(static_cast<Eigen::Index>(node), 1) = sl.points[k].a;
            g.nodes(static_cast<Eigen::Index>(node), 2) = sl.points[k].s;
            g.node_streamline[node] = static_cast<std::uint32_t>(si);
            const auto u = static_cast<std::uint32_t>(node);
            if (k > 0) {
                g.edges.push_back({u - 1, u});
                g.neighbors[node][0] = u - 1;
            }
            if (k + 1 < p) g.neighbors[node][k > 0 ? 1 : 0] = u + 1;
        }
    }
    return g;
}

void validate_tractogram(const Tractogram& t) {
    if (t.streamlines.empty()) throw DataError("tractogram has no streamlines (N >= 1 required)");
    for (std::size_t i = 0; i < t.size(); ++i) {
        const auto& s = t.streamlines[i];
        if (s.points.size() < 2) {
            throw DataError("streamline " + std::to_string(i) + " has fewer than 2 points");
        }
        for (const auto& pt : s.points) {
            if (!pt.finite()) {
                throw DataError("streamline " + std::to_string(i) + " contains a non-finite coordinate");
            }
        }
        if (!(s.arc_length() > 0.0)) {
            throw DataError("streamline " + std::to_string(i) + " is degenerate (zero arc length)");
        }
    }
}

} // namespace streg
