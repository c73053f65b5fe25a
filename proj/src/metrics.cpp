#include "streg/metrics.hpp"

#include <cmath>
#include <limits>

#include "streg/errors.hpp"
#include "streg/parallel.hpp"

namespace streg {

namespace {

// Scalar core shared by every distance path. Point order and accumulation
// order are fixed so parallel callers reproduce the sequential result
// bit-for-bit.
double l21_rows(const Eigen::MatrixXd& a, Eigen::Index a0, const Eigen::MatrixXd& b,
                Eigen::Index b0, Eigen::Index p, bool flip_b) {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < p; ++i) {
        const Eigen::Index bi = flip_b ? b0 + (p - 1 - i) : b0 + i;
        const double dr = a(a0 + i, 0) - b(bi, 0);
        const double da = a(a0 + i, 1) - b(bi, 1);
        const double ds = a(a0 + i, 2) - b(bi, 2);
        sum += std::sqrt(dr * dr + da * da + ds * ds);
    }
    return sum / static_cast<double>(p);
}

Eigen::MatrixXd to_matrix(const Streamline& s) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(s.points.size()), 3);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const auto& pt = s.points[static_cast<std::size_t>(i)];
        m(i, 0) = pt.r;
        m(i, 1) = pt.a;
        m(i, 2) = pt.s;
    }
    return m;
}

void check_pair(const Streamline& a, const Streamline& b, const char* what) {
    if (a.points.size() != b.points.size() || a.points.empty()) {
        throw std::invalid_argument(std::string(what) + ": streamlines must share a point count");
    }
}

Eigen::Index streamline_count(const Eigen::MatrixXd& pts, Eigen::Index p, const char* what) {
    if (p < 1 || pts.rows() % p != 0) {
        throw std::invalid_argument(std::string(what) + ": point rows not a multiple of the "
                                                        "per-streamline point count");
    }
    if (pts.rows() == 0) throw std::invalid_argument(std::string(what) + ": empty streamline set");
    return pts.rows() / p;
}

} // namespace

double l21_distance(const Streamline& a, const Streamline& b) {
    check_pair(a, b, "l21_distance");
    const Eigen::MatrixXd ma = to_matrix(a), mb = to_matrix(b);
    return l21_rows(ma, 0, mb, 0, ma.rows(), false);
}

double mdf_distance(const Streamline& a, const Streamline& b) {
    check_pair(a, b, "mdf_distance");
    const Eigen::MatrixXd ma = to_matrix(a), mb = to_matrix(b);
    const double direct = l21_rows(ma, 0, mb, 0, ma.rows(), false);
    const double flipped = l21_rows(ma, 0, mb, 0, ma.rows(), true);
    return std::min(direct, flipped);
}

Eigen::MatrixXd pairwise_l21(const Eigen::MatrixXd& a_pts, const Eigen::MatrixXd& b_pts,
                             Eigen::Index p) {
    const Eigen::Index na = streamline_count(a_pts, p, "pairwise_l21");
    const Eigen::Index nb = streamline_count(b_pts, p, "pairwise_l21");
    Eigen::MatrixXd d(na, nb);
    parallel_for(static_cast<std::size_t>(na), [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const auto ai = static_cast<Eigen::Index>(i);
            for (Eigen::Index j = 0; j < nb; ++j) {
                d(ai, j) = l21_rows(a_pts, ai * p, b_pts, j * p, p, false);
            }
        }
    });
    return d;
}

Eigen::MatrixXd pairwise_mdf(const Eigen::MatrixXd& a_pts, const Eigen::MatrixXd& b_pts,
                             Eigen::Index p) {
    const Eigen::Index na = streamline_count(a_pts, p, "pairwise_mdf");
    const Eigen::Index nb = streamline_count(b_pts, p, "pairwise_mdf");
    Eigen::MatrixXd d(na, nb);
    parallel_for(static_cast<std::size_t>(na), [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const auto ai = static_cast<Eigen::Index>(i);
            for (Eigen::Index j = 0; j < nb; ++j) {
                const double direct = l21_rows(a_pts, ai * p, b_pts, j * p, p, false);
                const double flipped = l21_rows(a_pts, ai * p, b_pts, j * p, p, true);
                d(ai, j) = std::min(direct, flipped);
            }
        }
    });
    return d;
}

double chamfer_loss_points(const Eigen::MatrixXd& moved, const Eigen::MatrixXd& fixed,
                           Eigen::Index p, Eigen::MatrixXd* d_moved) {
    const Eigen::Index nm = streamline_count(moved, p, "chamfer_loss");
    const Eigen::Index nf = streamline_count(fixed, p, "chamfer_loss");
    const Eigen::MatrixXd d = pairwise_l21(moved, fixed, p);

    std::vector<Eigen::Index> row_arg(static_cast<std::size_t>(nm)),
        col_arg(static_cast<std::size_t>(nf));
    double sum_m = 0.0;
    for (Eigen::Index i = 0; i < nm; ++i) {
        Eigen::Index arg = 0;
        for (Eigen::Index j = 1; j < nf; ++j)
            if (d(i, j) < d(i, arg)) arg = j;
        row_arg[static_cast<std::size_t>(i)] = arg;
        sum_m += d(i, arg);
    }
    double sum_f = 0.0;
    for (Eigen::Index j = 0; j < nf; ++j) {
        Eigen::Index arg = 0;
        for (Eigen::Index i = 1; i < nm; ++i)
            if (d(i, j) < d(arg, j)) arg = i;
        col_arg[static_cast<std::size_t>(j)] = arg;
        sum_f += d(arg, j);
    }
    const double loss =
        sum_m / static_cast<double>(nm) + sum_f / static_cast<double>(nf);

    if (d_moved != nullptr) {
        d_moved->setZero(moved.rows(), 3);
        // d l21(M, F) / d m_i = unit(m_i - f_i) / P, zero at coincidence.
        auto scatter = [&](Eigen::Index mi, Eigen::Index fj, double weight) {
            for (Eigen::Index i = 0; i < p; ++i) {
                const double dr = moved(mi * p + i, 0) - fixed(fj * p + i, 0);
                const double da = moved(mi * p + i, 1) - fixed(fj * p + i, 1);
                const double ds = moved(mi * p + i, 2) - fixed(fj * p + i, 2);
                const double dist = std::sqrt(dr * dr + da * da + ds * ds);
                if (dist == 0.0) continue;
                const double c = weight / (static_cast<double>(p) * dist);
                (*d_moved)(mi * p + i, 0) += c * dr;
                (*d_moved)(mi * p + i, 1) += c * da;
                (*d_moved)(mi * p + i, 2) += c * ds;
            }
        };
        for (Eigen::Index i = 0; i < nm; ++i) {
            scatter(i, row_arg[static_cast<std::size_t>(i)], 1.0 / static_cast<double>(nm));
        }
        for (Eigen::Index j = 0; j < nf; ++j) {
            scatter(col_arg[static_cast<std::size_t>(j)], j, 1.0 / static_cast<double>(nf));
        }
    }
    return loss;
}

double chamfer_loss(const Tractogram& moved, const Tractogram& fixed) {
    const Eigen::MatrixXd m = flatten_points(moved);
    const Eigen::MatrixXd f = flatten_points(fixed);
    const std::size_t pm = moved.points_per_streamline();
    const std::size_t pf = fixed.points_per_streamline();
    if (pm == 0 || pm != pf) {
        throw std::invalid_argument("chamfer_loss: sets must share one per-streamline point count");
    }
    return chamfer_loss_points(m, f, static_cast<Eigen::Index>(pm));
}

double abd(const Tractogram& bundle_a, const Tractogram& bundle_b) {
    const std::size_t pa = bundle_a.points_per_streamline();
    const std::size_t pb = bundle_b.points_per_streamline();
    if (pa == 0 || pa != pb) {
        throw std::invalid_argument("abd: bundles must share one per-streamline point count");
    }
    const Eigen::MatrixXd d =
        pairwise_mdf(flatten_points(bundle_a), flatten_points(bundle_b),
                     static_cast<Eigen::Index>(pa));
    double sum_a = 0.0;
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
        double best = d(i, 0);
        for (Eigen::Index j = 1; j < d.cols(); ++j)
            if (d(i, j) < best) best = d(i, j);
        sum_a += best;
    }
    double sum_b = 0.0;
    for (Eigen::Index j = 0; j < d.cols(); ++j) {
        double best = d(0, j);
        for (Eigen::Index i = 1; i < d.rows(); ++i)
            if (d(i, j) < best) best = d(i, j);
        sum_b += best;
    }
    return 0.5 * (sum_a / static_cast<double>(d.rows()) + sum_b / static_cast<double>(d.cols()));
}

TractDensityMap tract_density_map(const Tractogram& bundle, double voxel_size,
                                  const Point3& origin) {
    if (!(voxel_size > 0.0)) {
        throw std::invalid_argument("tract_density_map: voxel size must be positive");
    }
    TractDensityMap map;
    map.origin = origin;
    map.voxel_size = voxel_size;
    for (const auto& sl : bundle.streamlines) {
        for (const auto& pt : sl.points) {
            const std::array<std::int64_t, 3> key = {
                static_cast<std::int64_t>(std::floor((pt.r - origin.r) / voxel_size)),
                static_cast<std::int64_t>(std::floor((pt.a - origin.a) / voxel_size)),
                static_cast<std::int64_t>(std::floor((pt.s - origin.s) / voxel_size))};
            ++map.counts[key];
            ++map.total;
        }
    }
    return map;
}

double wdice(const TractDensityMap& a, const TractDensityMap& b) {
    if (a.voxel_size != b.voxel_size || a.origin.r != b.origin.r || a.origin.a != b.origin.a ||
        a.origin.s != b.origin.s) {
        throw std::invalid_argument("wdice: density maps use different grids");
    }
    if (a.total == 0 && b.total == 0) {
        throw std::invalid_argument("wdice: both density maps are empty");
    }
    std::int64_t overlap = 0;
    for (const auto& [key, count] : a.counts) {
        const auto it = b.counts.find(key);
        if (it != b.counts.end() && count > 0 && it->second > 0) overlap += count + it->second;
    }
    return static_cast<double>(overlap) / static_cast<double>(a.total + b.total);
}

Eigen::MatrixXd flatten_points(const Tractogram& t) {
    Eigen::MatrixXd pts(static_cast<Eigen::Index>(t.total_points()), 3);
    Eigen::Index row = 0;
    for (const auto& sl : t.streamlines) {
        for (const auto& pt : sl.points) {
            pts(row, 0) = pt.r;
            pts(row, 1) = pt.a;
            pts(row, 2) = pt.s;
            ++row;
        }
    }
    return pts;
}

} // namespace streg
