// Streamline distances and evaluation metrics: the L2,1 point-order
// distance, the orientation-invariant MDF variant, the symmetric
// minimum-distance training loss with its subgradient, the average bundle
// distance, and density-weighted Dice over voxelized tract maps.
#pragma once

#include <array>
#include <cstdint>
#include <map>

#include <Eigen/Dense>

#include "streg/tractogram.hpp"

namespace streg {

/// Mean over corresponding point indices of the Euclidean distance.
/// Correspondence is direct point order; no flip.
double l21_distance(const Streamline& a, const Streamline& b);

/// min(l21(a, b), l21(a, reverse(b))): invariant to orientation flips.
double mdf_distance(const Streamline& a, const Streamline& b);

/// Pairwise distances between two flattened point sets, each holding
/// consecutive blocks of pts_per_streamline rows per streamline.
/// Entry (i, j) equals the scalar per-pair evaluation bit-for-bit however
/// the rows are split across workers.
Eigen::MatrixXd pairwise_l21(const Eigen::MatrixXd& a_pts, const Eigen::MatrixXd& b_pts,
                             Eigen::Index pts_per_streamline);
Eigen::MatrixXd pairwise_mdf(const Eigen::MatrixXd& a_pts, const Eigen::MatrixXd& b_pts,
                             Eigen::Index pts_per_streamline);

/// (1/N_m) sum_M min_F l21(M, F) + (1/N_f) sum_F min_M l21(M, F).
/// When d_moved is non-null it receives d(loss)/d(moved points); minima
/// route subgradients to their argmin partner (first index on ties), and
/// coincident points contribute zero.
double chamfer_loss_points(const Eigen::MatrixXd& moved, const Eigen::MatrixXd& fixed,
                           Eigen::Index pts_per_streamline, Eigen::MatrixXd* d_moved = nullptr);

double chamfer_loss(const Tractogram& moved, const Tractogram& fixed);

/// Average Bundle Distance: the two directional means of per-streamline
/// minimum MDF, averaged.
double abd(const Tractogram& bundle_a, const Tractogram& bundle_b);

/// Counts of streamline-point visits per voxel; half-open voxels, floor
/// binning of (p - origin) / voxel_size.
struct TractDensityMap {
    Point3 origin{};
    double voxel_size = 2.0;
    std::map<std::array<std::int64_t, 3>, std::int64_t> counts;
    std::int64_t total = 0;
};

TractDensityMap tract_density_map(const Tractogram& bundle, double voxel_size,
                                  const Point3& origin = {});

/// Sum over voxels occupied in both maps of (a_v + b_v), divided by the
/// grand total of both maps; in [0, 1], exactly 1 for identical maps.
double wdice(const TractDensityMap& a, const TractDensityMap& b);

/// Streamline-major flattening to a (total points x 3) matrix. Requires a
/// uniform per-streamline point count.
Eigen::MatrixXd flatten_points(const Tractogram& t);

} // namespace streg
