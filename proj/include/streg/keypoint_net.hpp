// Probabilistic keypoint detector: a small graph-convolutional classifier
// over streamline points followed by a soft expectation.
//
// Pipeline: feature_block -> L x edge_conv -> linear head ->
// generalized_softmax (rows p(k|x)) -> bayes_normalize (columns p(x|k)) ->
// keypoint_expectation (keypoint k = probability-weighted mean of points).
//
// Every stage has a hand-written reverse-mode backward driven by caches
// captured during the forward pass; see backward() below.
#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "streg/rng.hpp"
#include "streg/tractogram.hpp"

namespace streg {

struct ModelConfig {
    int num_keypoints = 512; ///< K, classifier output classes
    int hidden = 64;         ///< H, feature width
    int layers = 3;          ///< L, edge-conv depth
    double temperature = 0.6;
};

/// Trainable tensors of the detector. Also reused as the container for
/// gradients and optimizer moments, which share the shapes.
struct NetTensors {
    Eigen::MatrixXd feat_w;              // H x 3
    Eigen::VectorXd feat_b;              // H
    std::vector<Eigen::MatrixXd> edge_w; // L of H x 2H
    std::vector<Eigen::VectorXd> edge_b; // L of H
    Eigen::MatrixXd head_w;              // K x H
    Eigen::VectorXd head_b;              // K

    static NetTensors zeros(const ModelConfig& config);
};

/// Flat view of one named tensor, the unit of checkpointing and of the
/// optimizer update. Shape is recorded so checkpoints can validate it.
struct NamedArray {
    std::string name;
    double* data;
    std::ptrdiff_t size;
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
};

struct KeypointModel {
    ModelConfig config;
    NetTensors params;

    /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per linear layer,
    /// weights then bias, drawn in a fixed order for reproducibility.
    static KeypointModel init(const ModelConfig& config, Rng& rng);

    std::vector<NamedArray> named_arrays();
};

std::vector<NamedArray> named_arrays(NetTensors& tensors, const std::string& prefix = "");

/// Activations captured by the forward pass for the backward pass.
struct ForwardCache {
    Eigen::MatrixXd input;    // n x 3 node coordinates
    Eigen::MatrixXd feat_pre; // n x H pre-activation of the feature block
    Eigen::MatrixXd ln_hat;   // n x H normalized features (layer output)
    Eigen::VectorXd ln_inv;   // n, reciprocal stddev per point
    struct EdgeCache {
        Eigen::MatrixXd input;                                   // n x H
        Eigen::MatrixXd winner_pre;                              // n x H
        Eigen::Matrix<std::uint32_t, Eigen::Dynamic, Eigen::Dynamic> winner; // n x H node id
    };
    std::vector<EdgeCache> edge; // L entries
    Eigen::MatrixXd features;    // n x H final node features
    Eigen::MatrixXd probs;       // n x K softmax rows
    Eigen::VectorXd col_sum;     // K softmax column sums
    Eigen::MatrixXd bayes;       // n x K column-normalized
    Eigen::MatrixXd keypoints;   // K x 3
};

/// Affine map to H channels, leaky-rectifier (slope 0.2), then per-point
/// non-affine layer normalization over the channels.
Eigen::MatrixXd feature_block(const Eigen::MatrixXd& coords, const Eigen::MatrixXd& w,
                              const Eigen::VectorXd& b);

/// Per node i: max over streamline neighbors j of
/// lrelu(w [f_i; f_j - f_i] + b). Endpoints use their single neighbor; ties
/// resolve to the lower neighbor node id. Never crosses streamlines.
Eigen::MatrixXd edge_conv(const StreamlineGraph& graph, const Eigen::MatrixXd& features,
                          const Eigen::MatrixXd& w, const Eigen::VectorXd& b);

/// Row-wise softmax of logits/t, stabilized by row-max subtraction.
Eigen::MatrixXd generalized_softmax(const Eigen::MatrixXd& logits, double t);

/// Column-wise normalization p(x|k) = p(k|x) / sum_x p(k|x).
Eigen::MatrixXd bayes_normalize(const Eigen::MatrixXd& probs);

/// Keypoint k = sum_p coords_p * p_xk(p, k); rows of the result are convex
/// combinations of the input points. Columns must sum to 1 within 1e-4.
Eigen::MatrixXd keypoint_expectation(const Eigen::MatrixXd& coords, const Eigen::MatrixXd& p_xk);

/// Full detector forward. Returns K x 3 keypoints; fills `cache` when given.
Eigen::MatrixXd detect_keypoints(const KeypointModel& model, const StreamlineGraph& graph,
                                 ForwardCache* cache = nullptr);
Eigen::MatrixXd detect_keypoints(const KeypointModel& model, const Tractogram& tract);

struct NetGradients {
    NetTensors params;
    Eigen::MatrixXd d_input; // n x 3
};

/// Reverse-mode gradients of all stages given d(loss)/d(keypoints).
NetGradients backward(const KeypointModel& model, const StreamlineGraph& graph,
                      const ForwardCache& cache, const Eigen::MatrixXd& d_keypoints);

/// Untrained reference matcher: K points sampled uniformly from the moving
/// tractogram, each matched to its Euclidean nearest neighbor among the
/// fixed tractogram's points.
struct KeypointPairs;
KeypointPairs nn_baseline_keypoints(const Tractogram& moving, const Tractogram& fixed,
                                    int num_keypoints, std::uint64_t seed);

} // namespace streg
