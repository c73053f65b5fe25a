// Synthetic tractography: parametric bundle families with per-streamline
// jitter, multi-bundle phantoms on a brain-scale layout, and ground-truth
// warped pairs with an exactly bounded displacement field. All generation
// is deterministic under its seed.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "streg/tps.hpp"
#include "streg/tractogram.hpp"

namespace streg {

enum class CenterlineFamily { Arc, Helix, CShape, UShape };

struct BundleSpec {
    CenterlineFamily family = CenterlineFamily::Arc;
    Point3 center{};           ///< bundle centroid in mm
    double scale = 1.0;        ///< multiplies the family's base extents
    std::size_t count = 400;   ///< streamlines
    double jitter_sigma = 2.5; ///< per-streamline offset std in mm, norm clamped at 3 sigma
    std::size_t points = 15;   ///< resample target
    std::uint64_t seed = 0;
};

/// Jittered copies of the family centerline. jitter_sigma = 0 yields
/// `count` identical copies of the centerline polyline.
Tractogram gen_bundle(const BundleSpec& spec);

struct PhantomOptions {
    std::size_t streamlines_per_bundle = 400;
    std::size_t points = 15;
    double jitter_sigma = 2.5;
    double min_separation = 25.0; ///< pairwise bundle-centroid floor in mm
};

/// Union of n bundles with labels 0..n-1, centers on a ring sized so both
/// the separation floor and a roughly 150 mm overall span hold.
Tractogram gen_phantom(std::size_t n_bundles, std::uint64_t seed,
                       const PhantomOptions& options = {});

enum class WarpFamily {
    Tps,      ///< same family the registration solver uses
    Sinusoid  ///< out-of-family, for robustness experiments
};

struct GroundTruthPair {
    Tractogram moving; ///< warped copy of the input
    Tractogram fixed;  ///< the input, unchanged
    /// Forward warp (fixed space -> moving space); absent for out-of-family
    /// warps, which no TPS represents exactly.
    std::optional<TpsTransform> truth;
    /// moving point minus fixed point, flattened streamline-major.
    std::vector<Point3> displacement;
};

/// Draw a random warp, scale its displacement field so the maximum over all
/// streamline points and a covering probe grid is exactly d_max, and apply
/// it. d_max = 0 degenerates to the identity: moving equals fixed exactly.
GroundTruthPair make_pair(const Tractogram& t, double d_max, std::uint64_t seed,
                          WarpFamily family = WarpFamily::Tps);

/// Probe locations used for the displacement bound, covering the bounding
/// box of the points with a 10 mm margin.
std::vector<Point3> probe_grid(const Tractogram& t, std::size_t per_axis = 12);

/// Rows `streamline,point,dr,da,ds`, full double precision.
void save_displacement_csv(const GroundTruthPair& pair, const std::string& path);
std::vector<Point3> load_displacement_csv(const std::string& path);

} // namespace streg
