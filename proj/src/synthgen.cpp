#include "streg/synthgen.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "streg/errors.hpp"
#include "streg/rng.hpp"

namespace streg {

namespace {

constexpr std::size_t kCenterlineSamples = 40;

// Base curves over t in [0, 1], extents in mm, centered at their own mean
// so a bundle's centroid lands on its configured center.
Point3 centerline_at(CenterlineFamily family, double t) {
    switch (family) {
        case CenterlineFamily::Arc: {
            const double ang = 0.9 * M_PI * t;
            return {30.0 * std::cos(ang), 30.0 * std::sin(ang), 10.0 * t};
        }
        case CenterlineFamily::Helix: {
            const double ang = 2.5 * M_PI * t;
            return {15.0 * std::cos(ang), 15.0 * std::sin(ang), 50.0 * t};
        }
        case CenterlineFamily::CShape: {
            const double ang = M_PI * (0.25 + t);
            return {25.0 * std::cos(ang), 25.0 * std::sin(ang), 5.0 * std::sin(2.0 * ang)};
        }
        case CenterlineFamily::UShape:
            return {40.0 * (t - 0.5), 140.0 * (t - 0.5) * (t - 0.5) - 20.0,
                    8.0 * std::sin(M_PI * t)};
    }
    throw std::invalid_argument("centerline_at: unknown family");
}

std::vector<Point3> base_centerline(CenterlineFamily family, double scale) {
    std::vector<Point3> pts(kCenterlineSamples);
    Point3 mean{};
    for (std::size_t i = 0; i < kCenterlineSamples; ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(kCenterlineSamples - 1);
        pts[i] = centerline_at(family, t) * scale;
        mean = mean + pts[i];
    }
    mean = mean * (1.0 / static_cast<double>(kCenterlineSamples));
    for (auto& p : pts) p = p - mean;
    return pts;
}

void bounding_box(const Tractogram& t, Point3& lo, Point3& hi) {
    lo = {1e300, 1e300, 1e300};
    hi = {-1e300, -1e300, -1e300};
    for (const auto& sl : t.streamlines) {
        for (const auto& p : sl.points) {
            lo.r = std::min(lo.r, p.r);
            lo.a = std::min(lo.a, p.a);
            lo.s = std::min(lo.s, p.s);
            hi.r = std::max(hi.r, p.r);
            hi.a = std::max(hi.a, p.a);
            hi.s = std::max(hi.s, p.s);
        }
    }
}

} // namespace

Tractogram gen_bundle(const BundleSpec& spec) {
    if (spec.count < 1 || spec.points < 2 || spec.scale <= 0.0 || spec.jitter_sigma < 0.0) {
        throw std::invalid_argument("gen_bundle: invalid bundle spec");
    }
    const std::vector<Point3> base = base_centerline(spec.family, spec.scale);
    Rng rng(spec.seed);
    Tractogram out;
    out.streamlines.reserve(spec.count);
    for (std::size_t i = 0; i < spec.count; ++i) {
        Point3 off{rng.normal() * spec.jitter_sigma, rng.normal() * spec.jitter_sigma,
                   rng.normal() * spec.jitter_sigma};
        const double norm = off.norm();
        const double cap = 3.0 * spec.jitter_sigma;
        if (norm > cap && norm > 0.0) off = off * (cap / norm);
        Streamline sl;
        sl.points.reserve(base.size());
        for (const auto& p : base) sl.points.push_back(p + spec.center + off);
        out.streamlines.push_back(resample_streamline(sl, spec.points));
    }
    return out;
}

Tractogram gen_phantom(std::size_t n_bundles, std::uint64_t seed, const PhantomOptions& options) {
    if (n_bundles < 1) throw std::invalid_argument("gen_phantom: need at least one bundle");

    // Ring layout: the chord between adjacent centers is 2 R sin(pi/n), so
    // R grows with n to keep the separation floor; alternating heights add
    // slack in s.
    double radius = 50.0;
    if (n_bundles > 1) {
        const double chord = 2.0 * std::sin(M_PI / static_cast<double>(n_bundles));
        radius = std::max(radius, options.min_separation / chord);
    }

    Tractogram out;
    for (std::size_t b = 0; b < n_bundles; ++b) {
        const double ang = 2.0 * M_PI * static_cast<double>(b) / static_cast<double>(n_bundles);
        BundleSpec spec;
        spec.family = static_cast<CenterlineFamily>(b % 4);
        spec.center = {radius * std::cos(ang), radius * std::sin(ang), b % 2 == 0 ? 25.0 : -25.0};
        spec.count = options.streamlines_per_bundle;
        spec.jitter_sigma = options.jitter_sigma;
        spec.points = options.points;
        spec.seed = seed + b;
        Tractogram bundle = gen_bundle(spec);
        for (auto& sl : bundle.streamlines) sl.bundle = static_cast<std::uint32_t>(b);
        out.bundle_names[static_cast<std::uint32_t>(b)] = "bundle" + std::to_string(b);
        out.streamlines.insert(out.streamlines.end(), bundle.streamlines.begin(),
                               bundle.streamlines.end());
    }
    return out;
}

std::vector<Point3> probe_grid(const Tractogram& t, std::size_t per_axis) {
    if (per_axis < 2) throw std::invalid_argument("probe_grid: need at least 2 probes per axis");
    Point3 lo, hi;
    bounding_box(t, lo, hi);
    const double margin = 10.0;
    std::vector<Point3> probes;
    probes.reserve(per_axis * per_axis * per_axis);
    const auto coord = [&](double a, double b, std::size_t i) {
        return a - margin +
               (b - a + 2.0 * margin) * static_cast<double>(i) / static_cast<double>(per_axis - 1);
    };
    for (std::size_t i = 0; i < per_axis; ++i)
        for (std::size_t j = 0; j < per_axis; ++j)
            for (std::size_t k = 0; k < per_axis; ++k)
                probes.push_back({coord(lo.r, hi.r, i), coord(lo.a, hi.a, j), coord(lo.s, hi.s, k)});
    return probes;
}

namespace {

// Displacement of every tractogram point followed by every probe, under a
// warp evaluated through the shared apply path.
Eigen::MatrixXd stack_locations(const Tractogram& t, const std::vector<Point3>& probes) {
    Eigen::MatrixXd pts(static_cast<Eigen::Index>(t.total_points() + probes.size()), 3);
    Eigen::Index row = 0;
    for (const auto& sl : t.streamlines) {
        for (const auto& p : sl.points) {
            pts.row(row++) << p.r, p.a, p.s;
        }
    }
    for (const auto& p : probes) pts.row(row++) << p.r, p.a, p.s;
    return pts;
}

} // namespace

GroundTruthPair make_pair(const Tractogram& t, double d_max, std::uint64_t seed,
                          WarpFamily family) {
    if (d_max < 0.0) throw std::invalid_argument("make_pair: d_max must be >= 0");
    validate_tractogram(t);

    Point3 lo, hi;
    bounding_box(t, lo, hi);
    const std::vector<Point3> probes = probe_grid(t);
    const Eigen::MatrixXd locations = stack_locations(t, probes);
    const Eigen::Index n_points = static_cast<Eigen::Index>(t.total_points());

    Rng rng(seed);
    constexpr int kMaxRetries = 8;
    for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
        // Raw displacement field, exactly linear in its amplitude, so one
        // rescale pins the maximum displacement to d_max.
        Eigen::MatrixXd displacement;
        TpsTransform raw;
        if (family == WarpFamily::Tps) {
            constexpr int kControls = 10;
            KeypointPairs draw;
            draw.moving.resize(kControls, 3);
            draw.fixed.resize(kControls, 3);
            for (int i = 0; i < kControls; ++i) {
                draw.moving.row(i) << rng.uniform(lo.r - 10.0, hi.r + 10.0),
                    rng.uniform(lo.a - 10.0, hi.a + 10.0), rng.uniform(lo.s - 10.0, hi.s + 10.0);
                draw.fixed.row(i) = draw.moving.row(i) +
                                    Eigen::RowVector3d(rng.normal(), rng.normal(), rng.normal());
            }
            try {
                raw = solve_tps(draw, 0.0);
            } catch (const NumericalError&) {
                continue; // degenerate control draw
            }
            displacement = apply_transform(raw, locations) - locations;
        } else {
            // Axis-coupled sinusoids, wavelengths around 80 mm.
            Eigen::Matrix3d freq;
            Eigen::Vector3d phase;
            for (int i = 0; i < 3; ++i) {
                phase(i) = rng.uniform(0.0, 2.0 * M_PI);
                for (int j = 0; j < 3; ++j) {
                    freq(i, j) = rng.uniform(0.5, 1.5) * 2.0 * M_PI / 80.0;
                }
            }
            displacement.resize(locations.rows(), 3);
            for (Eigen::Index r = 0; r < locations.rows(); ++r) {
                for (int i = 0; i < 3; ++i) {
                    displacement(r, i) = std::sin(locations.row(r).dot(freq.row(i)) + phase(i));
                }
            }
        }

        const double max_disp = displacement.rowwise().norm().maxCoeff();
        if (d_max > 0.0 && max_disp <= 1e-9) continue; // nothing to scale
        const double amp = d_max > 0.0 ? d_max / max_disp : 0.0;

        GroundTruthPair pair;
        pair.fixed = t;
        pair.moving = t;
        pair.displacement.resize(static_cast<std::size_t>(n_points));
        Eigen::Index row = 0;
        for (auto& sl : pair.moving.streamlines) {
            for (auto& p : sl.points) {
                const Point3 d{amp * displacement(row, 0), amp * displacement(row, 1),
                               amp * displacement(row, 2)};
                pair.displacement[static_cast<std::size_t>(row)] = d;
                p = p + d;
                ++row;
            }
        }

        if (family == WarpFamily::Tps) {
            // T(x) = x + amp (T_raw(x) - x) is itself a thin-plate transform
            // on the same controls.
            TpsTransform truth;
            truth.control_points = raw.control_points;
            truth.weights = amp * raw.weights;
            truth.affine = amp * raw.affine;
            truth.affine.leftCols(3) += (1.0 - amp) * Eigen::Matrix3d::Identity();
            truth.lambda = 0.0;
            pair.truth = truth;
        }
        return pair;
    }
    throw NumericalError("make_pair: could not draw a usable warp after " +
                         std::to_string(kMaxRetries) + " attempts");
}

void save_displacement_csv(const GroundTruthPair& pair, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError(path + ": cannot open for writing");
    out << "streamline,point,dr,da,ds\n";
    std::size_t row = 0;
    char buf[160];
    for (std::size_t s = 0; s < pair.fixed.streamlines.size(); ++s) {
        const std::size_t count = pair.fixed.streamlines[s].points.size();
        for (std::size_t p = 0; p < count; ++p, ++row) {
            const Point3& d = pair.displacement[row];
            std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g", s, p, d.r, d.a, d.s);
            out << buf << '\n';
        }
    }
    if (!out) throw DataError(path + ": write failed");
}

std::vector<Point3> load_displacement_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path + ": cannot open for reading");
    std::string line;
    if (!std::getline(in, line) || line.rfind("streamline,point,", 0) != 0) {
        throw DataError(path + ": missing displacement CSV header");
    }
    std::vector<Point3> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        unsigned long sl = 0, pt = 0;
        double dr = 0.0, da = 0.0, ds = 0.0;
        if (std::sscanf(line.c_str(), "%lu,%lu,%lf,%lf,%lf", &sl, &pt, &dr, &da, &ds) != 5) {
            throw DataError(path + ":" + std::to_string(line_no) + ": malformed displacement row");
        }
        out.push_back({dr, da, ds});
    }
    return out;
}

} // namespace streg
