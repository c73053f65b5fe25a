// Regularized thin-plate-spline solve and warp. The transform is
//   T(x) = A [x; 1] + sum_i W_i * U(|P_i - x|),   U(r) = r^2 ln r, U(0) = 0,
// with A and W obtained from the linear system
//   [[K + lambda*I, Ph], [Ph^T, 0]] [W; Y] = [Q; 0],
// K_ij = U(|P_i - P_j|) and Ph the homogeneous control matrix [1 | P].
// The solve retains its factorization so gradients of a downstream loss can
// be pulled back to both keypoint sets via the adjoint system.

#pragma once

#include <memory>
#include <string>

#include <Eigen/Dense>
#include <Eigen/LU>

#include "streg/rng.hpp"
#include "streg/tractogram.hpp"

namespace streg {

/// TPS radial kernel U(r) = r^2 ln r with the removable singularity U(0) = 0.
double kernel_u(double r);

struct TpsTransform {
    Eigen::MatrixXd control_points;              // K x 3, moving space (mm)
    Eigen::Matrix<double, 3, 4> affine;          // acts on [x; 1]
    Eigen::MatrixXd weights;                     // K x 3
    double lambda = 0.0;

    /// The identity map: A = [I | 0], no control points.
    static TpsTransform identity();
};

struct KeypointPairs {
    Eigen::MatrixXd moving; // P_k, K x 3
    Eigen::MatrixXd fixed;  // Q_k, K x 3
};

/// Factorization and intermediates retained for tps_backward.
struct TpsSolveCache {
    Eigen::PartialPivLU<Eigen::MatrixXd> lu; // of the equilibrated system
    Eigen::VectorXd scaling;                 // symmetric equilibration diagonal
    Eigen::MatrixXd theta;                   // [W; Y], (K+4) x 3
    Eigen::MatrixXd control_points;          // K x 3
    double lambda = 0.0;
};

/// Solve the regularized TPS system for the matched pairs. Requires >= 4
/// non-coplanar pairs; lambda >= 0. Verifies the side conditions
/// sum_i W_i = 0 and sum_i W_i P_i^T = 0 to 1e-8. Ill-conditioned systems
/// (duplicate or coplanar controls at lambda = 0) raise NumericalError.
TpsTransform solve_tps(const KeypointPairs& pairs, double lambda,
                       TpsSolveCache* cache = nullptr);

/// Warp an n x 3 point block. Pure; parallelized over points.
Eigen::MatrixXd apply_transform(const TpsTransform& t, const Eigen::MatrixXd& pts);

Point3 apply_transform(const TpsTransform& t, const Point3& p);
Tractogram apply_transform(const TpsTransform& t, const Tractogram& tract);

struct TpsPairGradients {
    Eigen::MatrixXd d_moving; // dL/dP, K x 3
    Eigen::MatrixXd d_fixed;  // dL/dQ, K x 3
};

/// Pull the gradient of a loss on the warped points back to the keypoint
/// pairs that defined the transform. `points` must be the same n x 3 block
/// that was warped; `upstream` is dL/d(warped), n x 3.
TpsPairGradients tps_backward(const TpsSolveCache& cache, const Eigen::MatrixXd& points,
                              const Eigen::MatrixXd& upstream);

/// Log-uniform draw from [lo, hi]; both bounds must be positive.
double sample_lambda(Rng& rng, double lo, double hi);

// Transform file: magic "STPS", u32 version=1, u32 K, f64 lambda,
// then P (K x 3), A (3 x 4), W (K x 3) as row-major float64, little-endian.
void save_transform(const TpsTransform& t, const std::string& path);
TpsTransform load_transform(const std::string& path);

} // namespace streg
