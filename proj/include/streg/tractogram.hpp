// Streamline data model: points in millimeter RAS space, arc-length
// resampling, seeded patch sampling, and the per-streamline multigraph used
// by the keypoint classifier.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace streg {

inline constexpr std::uint32_t kUnlabeledBundle = 0xFFFFFFFFu;

/// A point in millimeter Right-Anterior-Superior coordinates.
struct Point3 {
    double r = 0.0;
    double a = 0.0;
    double s = 0.0;

    Point3() = default;
    Point3(double r_, double a_, double s_) : r(r_), a(a_), s(s_) {}

    Point3 operator+(const Point3& o) const { return {r + o.r, a + o.a, s + o.s}; }
    Point3 operator-(const Point3& o) const { return {r - o.r, a - o.a, s - o.s}; }
    Point3 operator*(double f) const { return {r * f, a * f, s * f}; }
    double norm() const;
    bool finite() const;
};

double distance(const Point3& a, const Point3& b);

/// An ordered polyline through brain space, optionally tagged with an
/// anatomical bundle id (kUnlabeledBundle when absent).
struct Streamline {
    std::vector<Point3> points;
    std::uint32_t bundle = kUnlabeledBundle;

    double arc_length() const;
};

struct Tractogram {
    std::vector<Streamline> streamlines;
    std::map<std::uint32_t, std::string> bundle_names; // in-memory only

    std::size_t size() const { return streamlines.size(); }
    std::size_t total_points() const;

    /// Common point count when uniform, 0 otherwise.
    std::size_t points_per_streamline() const;

    /// Distinct bundle ids present, ascending.
    std::vector<std::uint32_t> bundle_ids() const;

    /// Streamlines carrying the given bundle id.
    Tractogram bundle(std::uint32_t id) const;
};

/// The multigraph of sequentially connected streamline points. Nodes are the
/// flattened points of a patch (streamline-major); edges join consecutive
/// points of the same streamline only.
struct StreamlineGraph {
    Eigen::MatrixXd nodes;                           // n x 3, RAS mm
    std::vector<std::array<std::uint32_t, 2>> edges; // undirected, lo < hi
    std::vector<std::uint32_t> node_streamline;      // membership per node
    std::size_t points_per_streamline = 0;

    // Per-node neighbor slots in ascending node-index order;
    // kNoNeighbor marks the missing slot of a degree-1 endpoint.
    static constexpr std::uint32_t kNoNeighbor = 0xFFFFFFFFu;
    std::vector<std::array<std::uint32_t, 2>> neighbors;

    std::size_t node_count() const { return static_cast<std::size_t>(nodes.rows()); }
};

/// Resample to exactly point_count points equally spaced by cumulative arc
/// length. Endpoints are preserved exactly. Rejects degenerate (zero arc
/// length) streamlines.
Streamline resample_streamline(const Streamline& s, std::size_t point_count);

Tractogram resample_tractogram(const Tractogram& t, std::size_t point_count);

/// Uniform sample of n streamlines without replacement, deterministic under
/// the seed. Labels ride along with the streamlines.
Tractogram sample_patch(const Tractogram& t, std::size_t n, std::uint64_t rng_seed);

StreamlineGraph build_graph(const Tractogram& patch);

/// Validate the invariants every tractogram must satisfy after load:
/// at least one streamline, >= 2 points each, finite coordinates, positive
/// arc length. Throws DataError naming the first offending streamline.
void validate_tractogram(const Tractogram& t);

} // namespace streg
