#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "streg/errors.hpp"
#include "streg/rng.hpp"
#include "streg/tps.hpp"

using namespace streg;

namespace {

std::string temp_dir() {
    static const std::string dir = [] {
        auto d = std::filesystem::temp_directory_path() / "streg_test_tps";
        std::filesystem::create_directories(d);
        return d.string();
    }();
    return dir;
}

Eigen::MatrixXd random_points(Rng& rng, int k, double spread = 50.0) {
    Eigen::MatrixXd m(k, 3);
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < 3; ++j) m(i, j) = spread * (2 * rng.uniform01() - 1);
    }
    return m;
}

/// Scalar reference evaluation of the warp, independent of the library's
/// blocked implementation.
Eigen::RowVector3d warp_oracle(const TpsTransform& t, const Eigen::RowVector3d& x) {
    Eigen::RowVector3d out;
    for (int d = 0; d < 3; ++d) {
        out(d) = t.affine(d, 0) * x(0) + t.affine(d, 1) * x(1) + t.affine(d, 2) * x(2) +
                 t.affine(d, 3);
    }
    for (Eigen::Index i = 0; i < t.control_points.rows(); ++i) {
        const double dx = t.control_points(i, 0) - x(0);
        const double dy = t.control_points(i, 1) - x(1);
        const double dz = t.control_points(i, 2) - x(2);
        const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
        const double u = r > 0 ? r * r * std::log(r) : 0.0;
        for (int d = 0; d < 3; ++d) out(d) += t.weights(i, d) * u;
    }
    return out;
}

} // namespace

TEST_CASE("radial kernel values") {
    CHECK(kernel_u(0.0) == 0.0);
    CHECK(kernel_u(1.0) == 0.0);
    CHECK(kernel_u(std::exp(1.0)) == doctest::Approx(std::exp(2.0)).epsilon(1e-12));
    CHECK(kernel_u(2.0) == doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-12));
    CHECK_THROWS_AS(kernel_u(-0.1), std::invalid_argument);
}

TEST_CASE("solving with identical pairs yields the identity transform") {
    Rng rng(101);
    const Eigen::MatrixXd p = random_points(rng, 10);
    KeypointPairs pairs{p, p};
    const TpsTransform t = solve_tps(pairs, 0.0);
    CHECK((t.affine.leftCols(3) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(t.affine.col(3).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(t.weights.cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("a pure translation is captured entirely by the affine block") {
    Rng rng(102);
    const Eigen::MatrixXd p = random_points(rng, 9);
    const Eigen::RowVector3d d(3.5, -1.25, 0.75);
    KeypointPairs pairs{p, p.rowwise() + d};
    const TpsTransform t = solve_tps(pairs, 0.0);
    CHECK((t.affine.leftCols(3) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((t.affine.col(3).transpose() - d).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(t.weights.cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("lambda=0 interpolates the defining pairs") {
    Rng rng(103);
    for (int trial = 0; trial < 10; ++trial) {
        const int k = 8;
        KeypointPairs pairs{random_points(rng, k), random_points(rng, k)};
        const TpsTransform t = solve_tps(pairs, 0.0);
        const Eigen::MatrixXd warped = apply_transform(t, pairs.moving);
        CHECK((warped - pairs.fixed).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("general affine maps are reproduced with zero warp weights") {
    Rng rng(104);
    for (int trial = 0; trial < 5; ++trial) {
        Eigen::Matrix<double, 3, 4> m;
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 4; ++j) m(i, j) = 2 * rng.uniform01() - 1;
        }
        m.leftCols(3) += Eigen::Matrix3d::Identity();
        const Eigen::MatrixXd p = random_points(rng, 12);
        const Eigen::MatrixXd q =
            (p * m.leftCols(3).transpose()).rowwise() + m.col(3).transpose();
        const TpsTransform t = solve_tps({p, q}, 0.0);
        CHECK((t.affine - m).cwiseAbs().maxCoeff() < 1e-6);
        CHECK(t.weights.cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("side conditions hold for every solve") {
    Rng rng(105);
    for (const double lambda : {0.0, 1e-3, 0.5, 10.0}) {
        const Eigen::MatrixXd p = random_points(rng, 16);
        const Eigen::MatrixXd q = random_points(rng, 16);
        const TpsTransform t = solve_tps({p, q}, lambda);
        CHECK(t.weights.colwise().sum().cwiseAbs().maxCoeff() < 1e-8);
        CHECK((t.weights.transpose() * p).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("increasing lambda smooths monotonically") {
    Rng rng(106);
    const Eigen::MatrixXd p = random_points(rng, 20);
    const Eigen::MatrixXd q = random_points(rng, 20);
    double prev = -1.0;
    for (const double lambda : {0.0, 0.01, 0.1, 1.0, 10.0, 100.0}) {
        const TpsTransform t = solve_tps({p, q}, lambda);
        const double residual = (apply_transform(t, p) - q).squaredNorm();
        CHECK(residual >= prev - 1e-9);
        prev = residual;
    }
}

TEST_CASE("warping matches the scalar reference loop") {
    Rng rng(107);
    const TpsTransform t = solve_tps({random_points(rng, 11), random_points(rng, 11)}, 0.2);
    const Eigen::MatrixXd pts = random_points(rng, 64, 80.0);
    const Eigen::MatrixXd warped = apply_transform(t, pts);
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
        const Eigen::RowVector3d expected = warp_oracle(t, pts.row(i));
        CHECK((warped.row(i) - expected).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("identity transform leaves points unchanged") {
    Rng rng(108);
    const TpsTransform id = TpsTransform::identity();
    const Eigen::MatrixXd pts = random_points(rng, 32);
    CHECK((apply_transform(id, pts) - pts).cwiseAbs().maxCoeff() == 0.0);

    const Point3 p{1.5, -2.0, 3.25};
    const Point3 moved = apply_transform(id, p);
    CHECK(moved.r == p.r);
    CHECK(moved.a == p.a);
    CHECK(moved.s == p.s);
}

TEST_CASE("the warp is linear in the affine block and weights") {
    Rng rng(109);
    const TpsTransform t = solve_tps({random_points(rng, 8), random_points(rng, 8)}, 0.1);
    TpsTransform doubled = t;
    doubled.affine *= 2.0;
    doubled.weights *= 2.0;
    const Eigen::MatrixXd pts = random_points(rng, 16);
    const Eigen::MatrixXd once = apply_transform(t, pts);
    const Eigen::MatrixXd twice = apply_transform(doubled, pts);
    CHECK((twice - 2.0 * once).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("solver rejects invalid input") {
    Rng rng(110);
    const Eigen::MatrixXd p = random_points(rng, 6);
    CHECK_THROWS_AS(solve_tps({p.topRows(3), p.topRows(3)}, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(solve_tps({p, p.topRows(5)}, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(solve_tps({p, p}, -1.0), std::invalid_argument);

    Eigen::MatrixXd with_nan = p;
    with_nan(2, 1) = std::nan("");
    CHECK_THROWS_AS(solve_tps({with_nan, p}, 0.0), NumericalError);
}

TEST_CASE("degenerate control points raise a conditioning error") {
    Rng rng(111);
    Eigen::MatrixXd p = random_points(rng, 8);
    p.row(3) = p.row(2); // duplicate control point, lambda = 0
    const Eigen::MatrixXd q = random_points(rng, 8);
    CHECK_THROWS_AS(solve_tps({p, q}, 0.0), NumericalError);

    Eigen::MatrixXd coplanar = random_points(rng, 8);
    coplanar.col(2).setZero();
    CHECK_THROWS_AS(solve_tps({coplanar, q}, 0.0), NumericalError);
}

TEST_CASE("zero upstream gradient produces zero pair gradients") {
    Rng rng(112);
    KeypointPairs pairs{random_points(rng, 6), random_points(rng, 6)};
    TpsSolveCache cache;
    solve_tps(pairs, 0.3, &cache);
    const Eigen::MatrixXd pts = random_points(rng, 10);
    const TpsPairGradients g = tps_backward(cache, pts, Eigen::MatrixXd::Zero(10, 3));
    CHECK(g.d_moving.cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.d_fixed.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("pair gradients match central finite differences") {
    Rng rng(113);
    const int k = 5, n = 7;
    KeypointPairs pairs{random_points(rng, k, 20.0), random_points(rng, k, 20.0)};
    const Eigen::MatrixXd pts = random_points(rng, n, 20.0);
    Eigen::MatrixXd g_out(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int j = 0; j < 3; ++j) g_out(i, j) = 2 * rng.uniform01() - 1;
    }
    const double lambda = 0.05;

    // Scalar objective: <g_out, warp(pts)>; its pair gradients are exactly
    // what tps_backward pulls back.
    auto objective = [&] {
        const TpsTransform t = solve_tps(pairs, lambda);
        return (g_out.array() * apply_transform(t, pts).array()).sum();
    };

    TpsSolveCache cache;
    solve_tps(pairs, lambda, &cache);
    const TpsPairGradients g = tps_backward(cache, pts, g_out);

    const double step = 1e-4;
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < 3; ++j) {
            const double fd_q = oracle::central_diff(pairs.fixed(i, j), step, objective);
            CHECK(oracle::rel_err(g.d_fixed(i, j), fd_q) < 1e-3);
            const double fd_p = oracle::central_diff(pairs.moving(i, j), step, objective);
            CHECK(oracle::rel_err(g.d_moving(i, j), fd_p) < 1e-3);
        }
    }
}

TEST_CASE("backward requires a populated cache") {
    const TpsSolveCache empty;
    CHECK_THROWS(tps_backward(empty, Eigen::MatrixXd::Zero(3, 3), Eigen::MatrixXd::Zero(3, 3)));
}

TEST_CASE("lambda sampling is log-uniform and seed deterministic") {
    {
        Rng rng(200);
        for (int i = 0; i < 10; ++i) CHECK(sample_lambda(rng, 0.5, 0.5) == 0.5);
    }
    {
        Rng a(201), b(201);
        for (int i = 0; i < 10; ++i) CHECK(sample_lambda(a, 1e-3, 10.0) == sample_lambda(b, 1e-3, 10.0));
    }
    {
        // Kolmogorov-Smirnov on log10(draws) against uniform [-3, 1];
        // critical value at alpha = 0.01 is 1.63 / sqrt(n).
        Rng rng(202);
        const int n = 10000;
        std::vector<double> logs(n);
        for (int i = 0; i < n; ++i) {
            const double lambda = sample_lambda(rng, 1e-3, 10.0);
            CHECK(lambda >= 1e-3);
            CHECK(lambda <= 10.0);
            logs[i] = std::log10(lambda);
        }
        std::sort(logs.begin(), logs.end());
        double d_stat = 0.0;
        for (int i = 0; i < n; ++i) {
            const double cdf = (logs[i] + 3.0) / 4.0;
            d_stat = std::max(d_stat, std::abs(cdf - (i + 1.0) / n));
            d_stat = std::max(d_stat, std::abs(cdf - static_cast<double>(i) / n));
        }
        CHECK(d_stat < 1.63 / std::sqrt(static_cast<double>(n)));
    }
    {
        Rng rng(203);
        CHECK_THROWS_AS(sample_lambda(rng, 0.0, 1.0), std::invalid_argument);
        CHECK_THROWS_AS(sample_lambda(rng, 2.0, 1.0), std::invalid_argument);
    }
}

TEST_CASE("transform files round-trip bit-exactly") {
    Rng rng(114);
    const TpsTransform t = solve_tps({random_points(rng, 7), random_points(rng, 7)}, 0.25);
    const std::string path = temp_dir() + "/transform.stps";
    save_transform(t, path);
    const TpsTransform loaded = load_transform(path);
    CHECK(loaded.lambda == t.lambda);
    CHECK((loaded.control_points - t.control_points).cwiseAbs().maxCoeff() == 0.0);
    CHECK((loaded.affine - t.affine).cwiseAbs().maxCoeff() == 0.0);
    CHECK((loaded.weights - t.weights).cwiseAbs().maxCoeff() == 0.0);

    std::ofstream(path, std::ios::binary) << "STPSgarbage";
    CHECK_THROWS_AS(load_transform(path), DataError);
}
