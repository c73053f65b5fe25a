#include "streg/tps.hpp"

#include <cmath>
#include <iostream>

#include "streg/byte_io.hpp"
#include "streg/errors.hpp"
#include "streg/parallel.hpp"

namespace streg {

namespace {

// Kernel in terms of the squared radius: U = r^2 ln r = 0.5 * s * ln s.
inline double kernel_from_sq(double s) {
    return s > 0.0 ? 0.5 * s * std::log(s) : 0.0;
}

// dU/ds = 0.5 (ln s + 1); the gradient 2 (P - x) dU/ds vanishes as s -> 0.
inline double kernel_deriv_sq(double s) {
    return s > 1e-300 ? 0.5 * (std::log(s) + 1.0) : 0.0;
}

Eigen::MatrixXd homogeneous_controls(const Eigen::MatrixXd& p) {
    Eigen::MatrixXd ph(p.rows(), 4);
    ph.col(0).setOnes();
    ph.rightCols(3) = p;
    return ph;
}

// Symmetric equilibration diagonal: brings the kernel block and the
// homogeneous block to comparable magnitudes so the condition estimate
// measures geometric degeneracy rather than unit disparity.
Eigen::VectorXd equilibration(const Eigen::MatrixXd& p) {
    const Eigen::Index k = p.rows();
    const Eigen::RowVector3d centroid = p.colwise().mean();
    double spread = (p.rowwise() - centroid).rowwise().norm().mean();
    if (!(spread > 1e-12)) spread = 1.0;
    const double u0 = spread * spread * std::max(std::abs(std::log(spread)), 1.0);
    Eigen::VectorXd d = Eigen::VectorXd::Ones(k + 4);
    d(k) = u0;
    d.tail(3).setConstant(u0 / spread);
    return d;
}

} // namespace

double kernel_u(double r) {
    if (r < 0.0) throw std::invalid_argument("kernel_u: negative radius");
    return r > 0.0 ? r * r * std::log(r) : 0.0;
}

TpsTransform TpsTransform::identity() {
    TpsTransform t;
    t.control_points.resize(0, 3);
    t.weights.resize(0, 3);
    t.affine.setZero();
    t.affine.leftCols(3).setIdentity();
    return t;
}

TpsTransform solve_tps(const KeypointPairs& pairs, double lambda, TpsSolveCache* cache) {
    const Eigen::Index k = pairs.moving.rows();
    if (k < 4) throw std::invalid_argument("solve_tps: need at least 4 keypoint pairs");
    if (pairs.fixed.rows() != k) {
        throw std::invalid_argument("solve_tps: moving/fixed pair count mismatch");
    }
    if (lambda < 0.0) throw std::invalid_argument("solve_tps: lambda must be >= 0");
    if (!pairs.moving.allFinite() || !pairs.fixed.allFinite()) {
        throw NumericalError("solve_tps: non-finite keypoint coordinates");
    }

    const Eigen::MatrixXd& p = pairs.moving;
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(k + 4, k + 4);
    for (Eigen::Index i = 0; i < k; ++i) {
        for (Eigen::Index j = i + 1; j < k; ++j) {
            const double u = kernel_from_sq((p.row(i) - p.row(j)).squaredNorm());
            m(i, j) = u;
            m(j, i) = u;
        }
        m(i, i) = lambda;
    }
    const Eigen::MatrixXd ph = homogeneous_controls(p);
    m.topRightCorner(k, 4) = ph;
    m.bottomLeftCorner(4, k) = ph.transpose();

    const Eigen::VectorXd d = equilibration(p);
    const Eigen::MatrixXd m_eq = d.asDiagonal() * m * d.asDiagonal();

    Eigen::PartialPivLU<Eigen::MatrixXd> lu(m_eq);
    // Pivot-ratio condition estimate. Eigen's rcond() is unreliable here: it
    // reports a finite value even for exactly singular input, where the U
    // diagonal carries an exact zero.
    const Eigen::VectorXd pivots = lu.matrixLU().diagonal().cwiseAbs();
    const double rcond = pivots.minCoeff() / pivots.maxCoeff();
    if (!(rcond > 1e-14)) {
        throw NumericalError(
            "solve_tps: TPS system is singular or ill-conditioned (reciprocal condition " +
            std::to_string(rcond) + "); duplicated or coplanar control points with small lambda");
    }
    if (rcond < 1e-12) {
        std::cerr << "warning: solve_tps: poorly conditioned system (reciprocal condition "
                  << rcond << ")\n";
    }

    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(k + 4, 3);
    rhs.topRows(k) = pairs.fixed;

    // M theta = rhs  <=>  (D M D) z = D rhs, theta = D z; one step of
    // iterative refinement tightens the side conditions.
    Eigen::MatrixXd theta = d.asDiagonal() * lu.solve(d.asDiagonal() * rhs);
    const Eigen::MatrixXd residual = rhs - m * theta;
    theta += d.asDiagonal() * lu.solve(d.asDiagonal() * residual);
    if (!theta.allFinite()) {
        throw NumericalError("solve_tps: solve produced non-finite coefficients; "
                             "system effectively singular");
    }

    TpsTransform t;
    t.lambda = lambda;
    t.control_points = p;
    t.weights = theta.topRows(k);
    const Eigen::MatrixXd y = theta.bottomRows(4); // [offset; linear] x 3
    t.affine.col(3) = y.row(0).transpose();
    t.affine.leftCols(3) = y.bottomRows(3).transpose();

    const double side1 = t.weights.colwise().sum().cwiseAbs().maxCoeff();
    const double side2 = (t.weights.transpose() * p).cwiseAbs().maxCoeff();
    if (side1 > 1e-8 || side2 > 1e-8) {
        throw NumericalError("solve_tps: TPS side conditions violated (|sum W| = " +
                             std::to_string(side1) + ", |sum W P^T| = " + std::to_string(side2) +
                             "); system too ill-conditioned");
    }

    if (cache != nullptr) {
        cache->lu = std::move(lu);
        cache->scaling = d;
        cache->theta = theta;
        cache->control_points = p;
        cache->lambda = lambda;
    }
    return t;
}

Eigen::MatrixXd apply_transform(const TpsTransform& t, const Eigen::MatrixXd& pts) {
    const Eigen::Index n = pts.rows();
    const Eigen::Index k = t.control_points.rows();
    Eigen::MatrixXd out(n, 3);

    // Structure-of-arrays copies keep the hot kernel loop contiguous.
    std::vector<double> cx(k), cy(k), cz(k), wx(k), wy(k), wz(k);
    for (Eigen::Index i = 0; i < k; ++i) {
        cx[i] = t.control_points(i, 0);
        cy[i] = t.control_points(i, 1);
        cz[i] = t.control_points(i, 2);
        wx[i] = t.weights(i, 0);
        wy[i] = t.weights(i, 1);
        wz[i] = t.weights(i, 2);
    }
    const Eigen::Matrix<double, 3, 4> a = t.affine;

    parallel_for(static_cast<std::size_t>(n), [&](std::size_t begin, std::size_t end) {
        for (std::size_t pi = begin; pi < end; ++pi) {
            const auto row = static_cast<Eigen::Index>(pi);
            const double x = pts(row, 0), y = pts(row, 1), z = pts(row, 2);
            double ox = a(0, 0) * x + a(0, 1) * y + a(0, 2) * z + a(0, 3);
            double oy = a(1, 0) * x + a(1, 1) * y + a(1, 2) * z + a(1, 3);
            double oz = a(2, 0) * x + a(2, 1) * y + a(2, 2) * z + a(2, 3);
            for (Eigen::Index i = 0; i < k; ++i) {
                const double dx = cx[i] - x, dy = cy[i] - y, dz = cz[i] - z;
                const double u = kernel_from_sq(dx * dx + dy * dy + dz * dz);
                ox += wx[i] * u;
                oy += wy[i] * u;
                oz += wz[i] * u;
            }
            out(row, 0) = ox;
            out(row, 1) = oy;
            out(row, 2) = oz;
        }
    });

    if (!out.allFinite()) throw NumericalError("apply_transform: non-finite warped point");
    return out;
}

Point3 apply_transform(const TpsTransform& t, const Point3& p) {
    Eigen::MatrixXd block(1, 3);
    block << p.r, p.a, p.s;
    const Eigen::MatrixXd warped = apply_transform(t, block);
    return {warped(0, 0), warped(0, 1), warped(0, 2)};
}

Tractogram apply_transform(const TpsTransform& t, const Tractogram& tract) {
    Eigen::MatrixXd pts(tract.total_points(), 3);
    Eigen::Index row = 0;
    for (const auto& sl : tract.streamlines) {
        for (const auto& pt : sl.points) {
            pts(row, 0) = pt.r;
            pts(row, 1) = pt.a;
            pts(row, 2) = pt.s;
            ++row;
        }
    }
    const Eigen::MatrixXd warped = apply_transform(t, pts);
    Tractogram out = tract;
    row = 0;
    for (auto& sl : out.streamlines) {
        for (auto& pt : sl.points) {
            pt = Point3(warped(row, 0), warped(row, 1), warped(row, 2));
            ++row;
        }
    }
    return out;
}

TpsPairGradients tps_backward(const TpsSolveCache& cache, const Eigen::MatrixXd& points,
                              const Eigen::MatrixXd& upstream) {
    const Eigen::Index k = cache.control_points.rows();
    const Eigen::Index n = points.rows();
    if (upstream.rows() != n || upstream.cols() != 3) {
        throw std::invalid_argument("tps_backward: upstream gradient shape mismatch");
    }
    if (cache.theta.rows() != k + 4) {
        throw std::invalid_argument("tps_backward: missing or inconsistent solve cache");
    }

    const Eigen::MatrixXd& p = cache.control_points;
    const Eigen::MatrixXd w = cache.theta.topRows(k);

    TpsPairGradients g;
    g.d_moving = Eigen::MatrixXd::Zero(k, 3);
    g.d_fixed = Eigen::MatrixXd::Zero(k, 3);

    // Direct path: warped = Xh Y + U_x W. Accumulate dL/dW = U_x^T G together
    // with the kernel's own dependence on P, streaming over points.
    Eigen::MatrixXd d_theta = Eigen::MatrixXd::Zero(k + 4, 3);
    for (Eigen::Index pi = 0; pi < n; ++pi) {
        const Eigen::RowVector3d x = points.row(pi);
        const Eigen::RowVector3d gr = upstream.row(pi);
        for (Eigen::Index i = 0; i < k; ++i) {
            const Eigen::RowVector3d diff = p.row(i) - x;
            const double s = diff.squaredNorm();
            d_theta.row(i) += kernel_from_sq(s) * gr;
            const double coef = gr.dot(w.row(i)) * kernel_deriv_sq(s) * 2.0;
            g.d_moving.row(i) += coef * diff;
        }
        d_theta.row(k) += gr;
        d_theta.bottomRows(3) += x.transpose() * gr;
    }

    // Adjoint of the solve: S = M^-1 dL/dtheta (M symmetric). With the
    // equilibrated factorization, M^-1 = D (D M D)^-1 D.
    const Eigen::VectorXd& d = cache.scaling;
    const Eigen::MatrixXd s_adj = d.asDiagonal() * cache.lu.solve(d.asDiagonal() * d_theta);

    g.d_fixed = s_adj.topRows(k); // rhs = [Q; 0]

    // dL/dM = -S theta^T, scattered back through the kernel and homogeneous
    // blocks to the control points.
    const Eigen::MatrixXd d_m = -s_adj * cache.theta.transpose();
    for (Eigen::Index i = 0; i < k; ++i) {
        for (Eigen::Index j = 0; j < k; ++j) {
            if (i == j) continue;
            const Eigen::RowVector3d diff = p.row(i) - p.row(j);
            const double coef = d_m(i, j) * kernel_deriv_sq(diff.squaredNorm()) * 2.0;
            g.d_moving.row(i) += coef * diff;
            g.d_moving.row(j) -= coef * diff;
        }
        for (int dim = 0; dim < 3; ++dim) {
            g.d_moving(i, dim) += d_m(i, k + 1 + dim) + d_m(k + 1 + dim, i);
        }
    }

    return g;
}

double sample_lambda(Rng& rng, double lo, double hi) {
    if (!(lo > 0.0) || !(hi >= lo)) {
        throw std::invalid_argument("sample_lambda: need 0 < lo <= hi");
    }
    return std::exp(rng.uniform(std::log(lo), std::log(hi)));
}

namespace {
constexpr char kTransformMagic[4] = {'S', 'T', 'P', 'S'};
constexpr std::uint32_t kTransformVersion = 1;
} // namespace

void save_transform(const TpsTransform& t, const std::string& path) {
    ByteWriter w(path);
    w.write(kTransformMagic, 4);
    w.write_u32(kTransformVersion);
    const auto k = static_cast<std::uint32_t>(t.control_points.rows());
    w.write_u32(k);
    w.write_f64(t.lambda);
    for (std::uint32_t i = 0; i < k; ++i)
        for (int j = 0; j < 3; ++j) w.write_f64(t.control_points(i, j));
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) w.write_f64(t.affine(i, j));
    for (std::uint32_t i = 0; i < k; ++i)
        for (int j = 0; j < 3; ++j) w.write_f64(t.weights(i, j));
    w.finish();
}

TpsTransform load_transform(const std::string& path) {
    ByteReader r(path);
    char magic[4];
    r.read(magic, 4, "magic");
    if (std::memcmp(magic, kTransformMagic, 4) != 0) {
        throw DataError(path + ": bad magic bytes (expected STPS)");
    }
    const std::uint32_t version = r.read_u32("version");
    if (version != kTransformVersion) {
        throw DataError(path + ": unsupported transform version " + std::to_string(version));
    }
    const std::uint32_t k = r.read_u32("control point count");
    TpsTransform t;
    t.lambda = r.read_f64("lambda");
    t.control_points.resize(k, 3);
    t.weights.resize(k, 3);
    for (std::uint32_t i = 0; i < k; ++i)
        for (int j = 0; j < 3; ++j) t.control_points(i, j) = r.read_f64("control point");
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) t.affine(i, j) = r.read_f64("affine");
    for (std::uint32_t i = 0; i < k; ++i)
        for (int j = 0; j < 3; ++j) t.weights(i, j) = r.read_f64("weight");
    if (!r.at_eof()) throw DataError(path + ": trailing bytes after transform data");
    if (!t.control_points.allFinite() || !t.weights.allFinite() || !t.affine.allFinite()) {
        throw DataError(path + ": non-finite transform coefficients");
    }
    return t;
}

} // namespace streg
