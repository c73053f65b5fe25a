#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "streg/errors.hpp"
#include "streg/keypoint_net.hpp"
#include "streg/rng.hpp"
#include "streg/tps.hpp"
#include "streg/tractogram.hpp"

using namespace streg;

namespace {

constexpr double kSlope = 0.2;

double lrelu(double x) { return x > 0 ? x : kSlope * x; }

StreamlineGraph tiny_graph(std::uint64_t seed, std::size_t n = 5, std::size_t p = 5) {
    return build_graph(resample_tractogram(oracle::make_tractogram(seed, n, p + 3), p));
}

KeypointModel tiny_model(std::uint64_t seed, int k = 4, int h = 8, int layers = 2) {
    ModelConfig config;
    config.num_keypoints = k;
    config.hidden = h;
    config.layers = layers;
    config.temperature = 0.6;
    Rng rng(seed);
    return KeypointModel::init(config, rng);
}

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * (2 * rng.uniform01() - 1);
    }
    return m;
}

} // namespace

TEST_CASE("feature block on zero parameters returns zero") {
    Rng rng(301);
    const Eigen::MatrixXd coords = random_matrix(rng, 6, 3, 30.0);
    const Eigen::MatrixXd out =
        feature_block(coords, Eigen::MatrixXd::Zero(8, 3), Eigen::VectorXd::Zero(8));
    CHECK(out.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("feature block matches a hand-evaluated composition on one point") {
    // One point, H = 2: affine -> leaky-rectifier -> per-point normalization
    // with zero mean and unit (biased) variance over the channels.
    Eigen::MatrixXd w(2, 3);
    w << 1, 0, 0, 0, -1, 0;
    Eigen::VectorXd b(2);
    b << 0.5, -0.25;
    Eigen::MatrixXd coords(1, 3);
    coords << 2.0, 3.0, 7.0;

    const double z0 = lrelu(2.0 + 0.5);       // 2.5
    const double z1 = lrelu(-3.0 - 0.25);     // -0.65
    const double mean = (z0 + z1) / 2.0;
    const double var = ((z0 - mean) * (z0 - mean) + (z1 - mean) * (z1 - mean)) / 2.0;
    const double inv = 1.0 / std::sqrt(var + 1e-5);

    const Eigen::MatrixXd out = feature_block(coords, w, b);
    CHECK(out(0, 0) == doctest::Approx((z0 - mean) * inv).epsilon(1e-12));
    CHECK(out(0, 1) == doctest::Approx((z1 - mean) * inv).epsilon(1e-12));
}

TEST_CASE("edge convolution with zero weights returns zero") {
    const StreamlineGraph g = tiny_graph(302);
    Rng rng(303);
    const Eigen::MatrixXd f = random_matrix(rng, static_cast<Eigen::Index>(g.node_count()), 8);
    const Eigen::MatrixXd out =
        edge_conv(g, f, Eigen::MatrixXd::Zero(8, 16), Eigen::VectorXd::Zero(8));
    CHECK(out.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("edge convolution on constant features reduces to the self term") {
    const StreamlineGraph g = tiny_graph(304);
    Rng rng(305);
    const int h = 6;
    const Eigen::MatrixXd w = random_matrix(rng, h, 2 * h);
    const Eigen::VectorXd b = random_matrix(rng, h, 1).col(0);
    Eigen::RowVectorXd feat = random_matrix(rng, 1, h).row(0);
    Eigen::MatrixXd f(g.node_count(), h);
    f.rowwise() = feat;

    // f_j - f_i = 0 everywhere, so every neighbor produces the same value
    // lrelu(w [f; 0] + b) and the max is that value.
    Eigen::VectorXd expected = w.leftCols(h) * feat.transpose() + b;
    for (int c = 0; c < h; ++c) expected(c) = lrelu(expected(c));

    const Eigen::MatrixXd out = edge_conv(g, f, w, b);
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        CHECK((out.row(i).transpose() - expected).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("edge convolution never crosses streamlines") {
    const std::size_t n = 2, p = 15;
    const Tractogram patch = resample_tractogram(oracle::make_tractogram(306, n, p + 4), p);
    const StreamlineGraph g = build_graph(patch);
    Rng rng(307);
    const int h = 5;
    const Eigen::MatrixXd w = random_matrix(rng, h, 2 * h);
    const Eigen::VectorXd b = random_matrix(rng, h, 1).col(0);
    Eigen::MatrixXd f = random_matrix(rng, static_cast<Eigen::Index>(g.node_count()), h);

    const Eigen::MatrixXd before = edge_conv(g, f, w, b);
    f.bottomRows(p) = random_matrix(rng, p, h); // perturb streamline 2 only
    const Eigen::MatrixXd after = edge_conv(g, f, w, b);
    CHECK((before.topRows(p) - after.topRows(p)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((before.bottomRows(p) - after.bottomRows(p)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("softmax matches closed-form values") {
    Eigen::MatrixXd zero_logits = Eigen::MatrixXd::Zero(3, 7);
    const Eigen::MatrixXd uniform = generalized_softmax(zero_logits, 0.6);
    CHECK((uniform.array() - 1.0 / 7).abs().maxCoeff() < 1e-12);

    Eigen::MatrixXd two(1, 2);
    two << 1.0, 0.0;
    const Eigen::MatrixXd warm = generalized_softmax(two, 1.0);
    const double e = std::exp(1.0);
    CHECK(warm(0, 0) == doctest::Approx(e / (1 + e)).epsilon(1e-12));
    CHECK(warm(0, 1) == doctest::Approx(1 / (1 + e)).epsilon(1e-12));

    const Eigen::MatrixXd cold = generalized_softmax(two, 0.01);
    CHECK(std::abs(cold(0, 0) - 1.0) < 1e-8);
    CHECK(std::abs(cold(0, 1)) < 1e-8);

    CHECK_THROWS_AS(generalized_softmax(two, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(generalized_softmax(two, -1.0), std::invalid_argument);
}

TEST_CASE("softmax rows are stochastic and temperature sharpens them") {
    Rng rng(308);
    for (int trial = 0; trial < 50; ++trial) {
        const Eigen::MatrixXd logits = random_matrix(rng, 4, 9, 5.0);
        double prev_max = 0.0;
        bool first = true;
        for (const double t : {2.0, 1.0, 0.5, 0.25, 0.1}) {
            const Eigen::MatrixXd probs = generalized_softmax(logits, t);
            for (Eigen::Index i = 0; i < probs.rows(); ++i) {
                CHECK(std::abs(probs.row(i).sum() - 1.0) < 1e-6);
                CHECK(probs.row(i).minCoeff() > 0.0);
            }
            const double row_max = probs.row(0).maxCoeff();
            if (!first) CHECK(row_max >= prev_max - 1e-12);
            prev_max = row_max;
            first = false;
        }
    }
}

TEST_CASE("bayes normalization matches the double-loop oracle") {
    Rng rng(309);
    const Eigen::MatrixXd probs = generalized_softmax(random_matrix(rng, 12, 5, 3.0), 0.6);
    const Eigen::MatrixXd bayes = bayes_normalize(probs);
    for (Eigen::Index k = 0; k < probs.cols(); ++k) {
        double col_sum = 0.0;
        for (Eigen::Index i = 0; i < probs.rows(); ++i) col_sum += probs(i, k);
        for (Eigen::Index i = 0; i < probs.rows(); ++i) {
            CHECK(bayes(i, k) == doctest::Approx(probs(i, k) / col_sum).epsilon(1e-14));
        }
        CHECK(std::abs(bayes.col(k).sum() - 1.0) < 1e-6);
    }

    const Eigen::MatrixXd uniform = Eigen::MatrixXd::Constant(10, 4, 0.25);
    CHECK((bayes_normalize(uniform).array() - 0.1).abs().maxCoeff() < 1e-12);

    Eigen::MatrixXd concentrated = Eigen::MatrixXd::Constant(10, 2, 1e-15);
    concentrated(3, 0) = 1.0 - 9e-15;
    const Eigen::MatrixXd sharp = bayes_normalize(concentrated);
    CHECK(std::abs(sharp(3, 0) - 1.0) < 1e-12);
}

TEST_CASE("keypoint expectation is the probability-weighted mean") {
    Rng rng(310);
    const Eigen::MatrixXd coords = random_matrix(rng, 10, 3, 25.0);

    Eigen::MatrixXd one_hot = Eigen::MatrixXd::Zero(10, 2);
    one_hot(4, 0) = 1.0;
    one_hot(1, 1) = 0.5;
    one_hot(7, 1) = 0.5;
    const Eigen::MatrixXd kp = keypoint_expectation(coords, one_hot);
    CHECK((kp.row(0) - coords.row(4)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((kp.row(1) - 0.5 * (coords.row(1) + coords.row(7))).cwiseAbs().maxCoeff() < 1e-12);

    // Random column: brute-force sum and hull membership.
    Eigen::VectorXd weights(10);
    for (int i = 0; i < 10; ++i) weights(i) = rng.uniform01() + 1e-3;
    weights /= weights.sum();
    Eigen::MatrixXd p_xk = weights;
    Eigen::RowVector3d expected = Eigen::RowVector3d::Zero();
    for (int i = 0; i < 10; ++i) expected += weights(i) * coords.row(i);
    const Eigen::MatrixXd kp2 = keypoint_expectation(coords, p_xk);
    CHECK((kp2.row(0) - expected).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(oracle::inside_hull(coords, kp2.row(0).transpose()));

    Eigen::MatrixXd bad = one_hot;
    bad(4, 0) = 1.1;
    CHECK_THROWS_AS(keypoint_expectation(coords, bad), std::invalid_argument);
}

TEST_CASE("detected keypoints stay inside the convex hull of the input") {
    for (int trial = 0; trial < 25; ++trial) {
        const StreamlineGraph g = tiny_graph(400 + trial, 6, 7);
        const KeypointModel model = tiny_model(500 + trial, 5, 8, 2);
        const Eigen::MatrixXd kp = detect_keypoints(model, g);
        REQUIRE(kp.rows() == 5);
        for (Eigen::Index k = 0; k < kp.rows(); ++k) {
            CHECK(oracle::inside_hull(g.nodes, kp.row(k).transpose()));
        }
    }
}

TEST_CASE("keypoints of a translated input stay inside the translated hull") {
    const Tractogram base = resample_tractogram(oracle::make_tractogram(311, 5, 9), 7);
    Tractogram shifted = base;
    const Point3 d{12.0, -30.0, 4.5};
    for (auto& s : shifted.streamlines) {
        for (auto& p : s.points) p = p + d;
    }
    const KeypointModel model = tiny_model(312, 4, 8, 2);
    const StreamlineGraph g = build_graph(shifted);
    const Eigen::MatrixXd kp = detect_keypoints(model, g);
    for (Eigen::Index k = 0; k < kp.rows(); ++k) {
        CHECK(oracle::inside_hull(g.nodes, kp.row(k).transpose()));
    }
}

TEST_CASE("full detector equals the staged composition") {
    const StreamlineGraph g = tiny_graph(313);
    const KeypointModel model = tiny_model(314);
    const auto& params = model.params;

    Eigen::MatrixXd f = feature_block(g.nodes, params.feat_w, params.feat_b);
    for (int l = 0; l < model.config.layers; ++l) {
        f = edge_conv(g, f, params.edge_w[l], params.edge_b[l]);
    }
    const Eigen::MatrixXd logits =
        (f * params.head_w.transpose()).rowwise() + params.head_b.transpose();
    const Eigen::MatrixXd probs = generalized_softmax(logits, model.config.temperature);
    const Eigen::MatrixXd expected = keypoint_expectation(g.nodes, bayes_normalize(probs));

    const Eigen::MatrixXd got = detect_keypoints(model, g);
    CHECK((got - expected).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("perturbing one streamline leaves other features untouched") {
    const std::size_t n = 4, p = 6;
    Tractogram patch = resample_tractogram(oracle::make_tractogram(315, n, p + 2), p);
    const KeypointModel model = tiny_model(316, 4, 8, 3);

    ForwardCache before;
    detect_keypoints(model, build_graph(patch), &before);

    for (auto& pt : patch.streamlines[2].points) pt = pt + Point3{5.0, -3.0, 1.0};
    ForwardCache after;
    detect_keypoints(model, build_graph(patch), &after);

    for (std::size_t i = 0; i < n * p; ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        if (i / p == 2) continue;
        CHECK((before.features.row(row) - after.features.row(row)).cwiseAbs().maxCoeff() == 0.0);
    }
    CHECK((before.features.middleRows(2 * p, p) - after.features.middleRows(2 * p, p))
              .cwiseAbs()
              .maxCoeff() > 0.0);
}

TEST_CASE("zero upstream gradient produces zero parameter gradients") {
    const StreamlineGraph g = tiny_graph(317);
    const KeypointModel model = tiny_model(318);
    ForwardCache cache;
    detect_keypoints(model, g, &cache);
    NetGradients grads =
        backward(model, g, cache, Eigen::MatrixXd::Zero(model.config.num_keypoints, 3));
    for (const auto& arr : named_arrays(grads.params)) {
        for (std::ptrdiff_t i = 0; i < arr.size; ++i) CHECK(arr.data[i] == 0.0);
    }
    CHECK(grads.d_input.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("softmax jacobian matches the closed form on two classes") {
    const double t = 0.7;
    Eigen::MatrixXd logits(1, 2);
    logits << 0.8, -0.3;
    const Eigen::MatrixXd s = generalized_softmax(logits, t);

    // d s_i / d l_j = s_i (delta_ij - s_j) / t, contracted with upstream g.
    Rng rng(319);
    Eigen::RowVector2d g(2 * rng.uniform01() - 1, 2 * rng.uniform01() - 1);
    Eigen::RowVector2d expected = Eigen::RowVector2d::Zero();
    for (int j = 0; j < 2; ++j) {
        for (int i = 0; i < 2; ++i) {
            expected(j) += g(i) * s(0, i) * ((i == j ? 1.0 : 0.0) - s(0, j)) / t;
        }
    }

    // Verify through finite differences of the dot objective.
    for (int j = 0; j < 2; ++j) {
        const double fd = oracle::central_diff(logits(0, j), 1e-6, [&] {
            return (generalized_softmax(logits, t).array() * g.array()).sum();
        });
        CHECK(oracle::rel_err(expected(j), fd) < 1e-6);
    }
}

TEST_CASE("end-to-end keypoint gradients match finite differences") {
    const StreamlineGraph g = tiny_graph(320);
    KeypointModel model = tiny_model(321);
    Rng rng(322);
    const Eigen::MatrixXd g_out = random_matrix(rng, model.config.num_keypoints, 3);

    auto objective = [&] {
        return (detect_keypoints(model, g).array() * g_out.array()).sum();
    };

    ForwardCache cache;
    detect_keypoints(model, g, &cache);
    NetGradients grads = backward(model, g, cache, g_out);

    const double step = 1e-4;
    const auto named_grads = named_arrays(grads.params);
    const auto named_list = named_arrays(model.params);
    REQUIRE(named_grads.size() == named_list.size());
    for (std::size_t a = 0; a < named_list.size(); ++a) {
        for (std::ptrdiff_t i = 0; i < named_list[a].size; ++i) {
            const double fd = oracle::central_diff(named_list[a].data[i], step, objective);
            INFO(named_list[a].name << "[" << i << "]");
            CHECK(oracle::rel_err(named_grads[a].data[i], fd) < 1e-3);
        }
    }
}

TEST_CASE("input-coordinate gradients match finite differences") {
    Tractogram patch = resample_tractogram(oracle::make_tractogram(323, 3, 8), 5);
    const KeypointModel model = tiny_model(324);
    Rng rng(325);
    const Eigen::MatrixXd g_out = random_matrix(rng, model.config.num_keypoints, 3);

    auto objective = [&] {
        return (detect_keypoints(model, build_graph(patch)).array() * g_out.array()).sum();
    };

    const StreamlineGraph graph = build_graph(patch);
    ForwardCache cache;
    detect_keypoints(model, graph, &cache);
    const NetGradients grads = backward(model, graph, cache, g_out);

    const double step = 1e-4;
    for (std::size_t si = 0; si < patch.size(); ++si) {
        for (std::size_t pi = 0; pi < 5; pi += 2) {
            auto& point = patch.streamlines[si].points[pi];
            const auto row = static_cast<Eigen::Index>(si * 5 + pi);
            const double fd_r = oracle::central_diff(point.r, step, objective);
            CHECK(oracle::rel_err(grads.d_input(row, 0), fd_r) < 1e-3);
            const double fd_s = oracle::central_diff(point.s, step, objective);
            CHECK(oracle::rel_err(grads.d_input(row, 2), fd_s) < 1e-3);
        }
    }
}

TEST_CASE("initialization is seed deterministic and bounded") {
    ModelConfig config;
    config.num_keypoints = 6;
    config.hidden = 10;
    config.layers = 2;
    Rng a(77), b(77), c(78);
    KeypointModel ma = KeypointModel::init(config, a);
    KeypointModel mb = KeypointModel::init(config, b);
    KeypointModel mc = KeypointModel::init(config, c);
    const auto la = ma.named_arrays();
    const auto lb = mb.named_arrays();
    const auto lc = mc.named_arrays();
    bool any_diff_seed = false;
    for (std::size_t i = 0; i < la.size(); ++i) {
        REQUIRE(la[i].size == lb[i].size);
        for (std::ptrdiff_t j = 0; j < la[i].size; ++j) {
            CHECK(la[i].data[j] == lb[i].data[j]);
            CHECK(std::isfinite(la[i].data[j]));
            CHECK(std::abs(la[i].data[j]) <= 1.0); // fan-in >= 3 keeps |v| < 1/sqrt(3)
            if (la[i].data[j] != lc[i].data[j]) any_diff_seed = true;
        }
    }
    CHECK(any_diff_seed);
}

TEST_CASE("nearest-neighbor baseline matches a brute-force scan") {
    const Tractogram moving = resample_tractogram(oracle::make_tractogram(326, 6, 9), 7);
    Tractogram fixed = resample_tractogram(oracle::make_tractogram(327, 5, 9), 7);

    SUBCASE("identical sets give zero-distance matches") {
        const KeypointPairs pairs = nn_baseline_keypoints(moving, moving, 10, 3);
        REQUIRE(pairs.moving.rows() == 10);
        CHECK((pairs.moving - pairs.fixed).cwiseAbs().maxCoeff() == 0.0);
    }

    SUBCASE("each match is the true nearest fixed point") {
        const KeypointPairs pairs = nn_baseline_keypoints(moving, fixed, 12, 4);
        std::vector<Point3> fixed_points;
        for (const auto& s : fixed.streamlines) {
            fixed_points.insert(fixed_points.end(), s.points.begin(), s.points.end());
        }
        for (Eigen::Index k = 0; k < pairs.moving.rows(); ++k) {
            const Point3 p{pairs.moving(k, 0), pairs.moving(k, 1), pairs.moving(k, 2)};
            const Point3 q{pairs.fixed(k, 0), pairs.fixed(k, 1), pairs.fixed(k, 2)};
            double best = 1e300;
            Point3 best_point;
            for (const auto& f : fixed_points) {
                const double d = oracle::dist(p, f);
                if (d < best) {
                    best = d;
                    best_point = f;
                }
            }
            CHECK(oracle::dist(q, best_point) == 0.0);
        }
    }

    SUBCASE("translated fixed set displaces every match") {
        Tractogram shifted = moving;
        for (auto& s : shifted.streamlines) {
            for (auto& p : s.points) p.r += 1.0;
        }
        const KeypointPairs pairs = nn_baseline_keypoints(moving, shifted, 8, 5);
        for (Eigen::Index k = 0; k < pairs.moving.rows(); ++k) {
            const double d = (pairs.moving.row(k) - pairs.fixed.row(k)).norm();
            CHECK(d > 0.0);
            CHECK(d <= 1.0 + 1e-12); // never farther than the pure shift
        }
    }

    SUBCASE("requesting more keypoints than points fails") {
        CHECK_THROWS(nn_baseline_keypoints(moving, fixed, 1000, 1));
    }
}
