#include "streg/keypoint_net.hpp"

#include <cmath>

#include "streg/errors.hpp"
#include "streg/parallel.hpp"
#include "streg/tps.hpp"

namespace streg {

namespace {

constexpr double kLeakySlope = 0.2;
constexpr double kLayerNormEps = 1e-5;

inline double lrelu(double z) { return z > 0.0 ? z : kLeakySlope * z; }
inline double lrelu_grad(double z) { return z > 0.0 ? 1.0 : kLeakySlope; }

void check_finite(const Eigen::MatrixXd& m, const char* what) {
    if (!m.allFinite()) throw NumericalError(std::string(what) + ": non-finite values");
}

// Uniform fill in [-1/sqrt(fan_in), 1/sqrt(fan_in)], row-major order so the
// sequence of draws is independent of Eigen's storage layout.
void init_linear(Eigen::MatrixXd& w, Eigen::VectorXd& b, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = rng.uniform(-bound, bound);
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = rng.uniform(-bound, bound);
}

} // namespace

NetTensors NetTensors::zeros(const ModelConfig& c) {
    NetTensors t;
    t.feat_w = Eigen::MatrixXd::Zero(c.hidden, 3);
    t.feat_b = Eigen::VectorXd::Zero(c.hidden);
    for (int l = 0; l < c.layers; ++l) {
        t.edge_w.emplace_back(Eigen::MatrixXd::Zero(c.hidden, 2 * c.hidden));
        t.edge_b.emplace_back(Eigen::VectorXd::Zero(c.hidden));
    }
    t.head_w = Eigen::MatrixXd::Zero(c.num_keypoints, c.hidden);
    t.head_b = Eigen::VectorXd::Zero(c.num_keypoints);
    return t;
}

KeypointModel KeypointModel::init(const ModelConfig& config, Rng& rng) {
    if (config.num_keypoints < 1 || config.hidden < 1 || config.layers < 1) {
        throw std::invalid_argument("model config: K, H, L must be positive");
    }
    if (!(config.temperature > 0.0)) {
        throw std::invalid_argument("model config: temperature must be > 0");
    }
    KeypointModel m;
    m.config = config;
    m.params = NetTensors::zeros(config);
    init_linear(m.params.feat_w, m.params.feat_b, rng);
    for (int l = 0; l < config.layers; ++l) init_linear(m.params.edge_w[l], m.params.edge_b[l], rng);
    init_linear(m.params.head_w, m.params.head_b, rng);
    return m;
}

namespace {

NamedArray named(const std::string& name, Eigen::MatrixXd& m) {
    return {name, m.data(), m.size(), static_cast<std::uint32_t>(m.rows()),
            static_cast<std::uint32_t>(m.cols())};
}

NamedArray named(const std::string& name, Eigen::VectorXd& v) {
    return {name, v.data(), v.size(), static_cast<std::uint32_t>(v.size()), 1};
}

} // namespace

std::vector<NamedArray> named_arrays(NetTensors& t, const std::string& prefix) {
    std::vector<NamedArray> out;
    out.push_back(named(prefix + "feat.w", t.feat_w));
    out.push_back(named(prefix + "feat.b", t.feat_b));
    for (std::size_t l = 0; l < t.edge_w.size(); ++l) {
        const std::string tag = "edge" + std::to_string(l);
        out.push_back(named(prefix + tag + ".w", t.edge_w[l]));
        out.push_back(named(prefix + tag + ".b", t.edge_b[l]));
    }
    out.push_back(named(prefix + "head.w", t.head_w));
    out.push_back(named(prefix + "head.b", t.head_b));
    return out;
}

std::vector<NamedArray> KeypointModel::named_arrays() { return streg::named_arrays(params); }

namespace {

// Shared core of the public feature_block and the cached model forward.
Eigen::MatrixXd feature_block_impl(const Eigen::MatrixXd& coords, const Eigen::MatrixXd& w,
                                   const Eigen::VectorXd& b, ForwardCache* cache) {
    if (coords.cols() != 3 || w.cols() != 3 || b.size() != w.rows()) {
        throw std::invalid_argument("feature_block: shape mismatch");
    }
    check_finite(coords, "feature_block");
    const Eigen::Index n = coords.rows();
    const Eigen::Index h = w.rows();

    Eigen::MatrixXd pre = coords * w.transpose();
    pre.rowwise() += b.transpose();

    Eigen::MatrixXd hat(n, h);
    Eigen::VectorXd inv(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::RowVectorXd act = pre.row(i).unaryExpr([](double z) { return lrelu(z); });
        const double mean = act.mean();
        act.array() -= mean;
        const double var = act.squaredNorm() / static_cast<double>(h);
        inv(i) = 1.0 / std::sqrt(var + kLayerNormEps);
        hat.row(i) = act * inv(i);
    }
    if (cache != nullptr) {
        cache->feat_pre = std::move(pre);
        cache->ln_hat = hat;
        cache->ln_inv = std::move(inv);
    }
    return hat;
}

Eigen::MatrixXd edge_conv_impl(const StreamlineGraph& graph, const Eigen::MatrixXd& f,
                               const Eigen::MatrixXd& w, const Eigen::VectorXd& b,
                               ForwardCache::EdgeCache* cache) {
    const Eigen::Index n = f.rows();
    const Eigen::Index h = f.cols();
    if (n != static_cast<Eigen::Index>(graph.node_count())) {
        throw std::invalid_argument("edge_conv: features not aligned with graph nodes");
    }
    if (w.rows() != h || w.cols() != 2 * h || b.size() != h) {
        throw std::invalid_argument("edge_conv: layer parameter shape mismatch");
    }

    // w [f_i; f_j - f_i] = (w_self - w_diff) f_i + w_diff f_j
    const Eigen::MatrixXd w_self = w.leftCols(h) - w.rightCols(h);
    const Eigen::MatrixXd w_diff = w.rightCols(h);

    Eigen::MatrixXd out(n, h);
    Eigen::MatrixXd winner_pre;
    Eigen::Matrix<std::uint32_t, Eigen::Dynamic, Eigen::Dynamic> winner;
    if (cache != nullptr) {
        winner_pre.resize(n, h);
        winner.resize(n, h);
    }

    parallel_for(static_cast<std::size_t>(n), [&](std::size_t begin, std::size_t end) {
        Eigen::RowVectorXd self(h), z0(h), z1(h);
        for (std::size_t node = begin; node < end; ++node) {
            const auto i = static_cast<Eigen::Index>(node);
            const auto& nb = graph.neighbors[node];
            if (nb[0] == StreamlineGraph::kNoNeighbor) {
                throw DataError("edge_conv: isolated graph node " + std::to_string(node));
            }
            self = f.row(i) * w_self.transpose() + b.transpose();
            z0 = self + f.row(static_cast<Eigen::Index>(nb[0])) * w_diff.transpose();
            const bool two = nb[1] != StreamlineGraph::kNoNeighbor;
            if (two) z1 = self + f.row(static_cast<Eigen::Index>(nb[1])) * w_diff.transpose();
            for (Eigen::Index c = 0; c < h; ++c) {
                // lrelu is increasing, so comparing pre-activations picks the
                // same winner as comparing activations; ties keep nb[0], the
                // lower node id.
                double z = z0(c);
                std::uint32_t j = nb[0];
                if (two && z1(c) > z) {
                    z = z1(c);
                    j = nb[1];
                }
                out(i, c) = lrelu(z);
                if (cache != nullptr) {
                    winner_pre(i, c) = z;
                    winner(i, c) = j;
                }
            }
        }
    });

    if (cache != nullptr) {
        cache->input = f;
        cache->winner_pre = std::move(winner_pre);
        cache->winner = std::move(winner);
    }
    return out;
}

} // namespace

Eigen::MatrixXd feature_block(const Eigen::MatrixXd& coords, const Eigen::MatrixXd& w,
                              const Eigen::VectorXd& b) {
    return feature_block_impl(coords, w, b, nullptr);
}

Eigen::MatrixXd edge_conv(const StreamlineGraph& graph, const Eigen::MatrixXd& features,
                          const Eigen::MatrixXd& w, const Eigen::VectorXd& b) {
    return edge_conv_impl(graph, features, w, b, nullptr);
}

Eigen::MatrixXd generalized_softmax(const Eigen::MatrixXd& logits, double t) {
    if (!(t > 0.0)) throw std::invalid_argument("generalized_softmax: temperature must be > 0");
    check_finite(logits, "generalized_softmax");
    Eigen::MatrixXd s(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        s.row(i) = ((logits.row(i).array() - mx) / t).exp();
        s.row(i) /= s.row(i).sum();
    }
    return s;
}

Eigen::MatrixXd bayes_normalize(const Eigen::MatrixXd& probs) {
    Eigen::MatrixXd b = probs;
    for (Eigen::Index k = 0; k < probs.cols(); ++k) {
        const double sum = probs.col(k).sum();
        if (!(sum > 0.0)) {
            throw NumericalError("bayes_normalize: keypoint column " + std::to_string(k) +
                                 " has zero probability mass");
        }
        b.col(k) /= sum;
    }
    return b;
}

Eigen::MatrixXd keypoint_expectation(const Eigen::MatrixXd& coords, const Eigen::MatrixXd& p_xk) {
    if (coords.rows() != p_xk.rows() || coords.cols() != 3) {
        throw std::invalid_argument("keypoint_expectation: shape mismatch");
    }
    for (Eigen::Index k = 0; k < p_xk.cols(); ++k) {
        if (std::abs(p_xk.col(k).sum() - 1.0) > 1e-4) {
            throw std::invalid_argument("keypoint_expectation: column " + std::to_string(k) +
                                        " is not normalized");
        }
    }
    return p_xk.transpose() * coords;
}

Eigen::MatrixXd detect_keypoints(const KeypointModel& model, const StreamlineGraph& graph,
                                 ForwardCache* cache) {
    const auto& p = model.params;
    Eigen::MatrixXd f = feature_block_impl(graph.nodes, p.feat_w, p.feat_b, cache);
    if (cache != nullptr) {
        cache->input = graph.nodes;
        cache->edge.resize(p.edge_w.size());
    }
    for (std::size_t l = 0; l < p.edge_w.size(); ++l) {
        f = edge_conv_impl(graph, f, p.edge_w[l], p.edge_b[l],
                           cache != nullptr ? &cache->edge[l] : nullptr);
    }

    Eigen::MatrixXd logits = f * p.head_w.transpose();
    logits.rowwise() += p.head_b.transpose();
    Eigen::MatrixXd s = generalized_softmax(logits, model.config.temperature);
    Eigen::MatrixXd b = bayes_normalize(s);
    Eigen::MatrixXd kp = b.transpose() * graph.nodes;

    if (cache != nullptr) {
        cache->features = std::move(f);
        cache->col_sum = s.colwise().sum();
        cache->probs = std::move(s);
        cache->bayes = b;
        cache->keypoints = kp;
    }
    check_finite(kp, "detect_keypoints");
    return kp;
}

Eigen::MatrixXd detect_keypoints(const KeypointModel& model, const Tractogram& tract) {
    return detect_keypoints(model, build_graph(tract));
}

NetGradients backward(const KeypointModel& model, const StreamlineGraph& graph,
                      const ForwardCache& cache, const Eigen::MatrixXd& d_keypoints) {
    const auto& p = model.params;
    const Eigen::Index n = cache.input.rows();
    const Eigen::Index h = model.config.hidden;
    if (cache.bayes.rows() != n || cache.edge.size() != p.edge_w.size()) {
        throw std::invalid_argument("backward: forward cache missing or inconsistent");
    }
    if (d_keypoints.rows() != model.config.num_keypoints || d_keypoints.cols() != 3) {
        throw std::invalid_argument("backward: upstream gradient shape mismatch");
    }

    NetGradients g;
    g.params = NetTensors::zeros(model.config);

    // keypoints = B^T X
    Eigen::MatrixXd d_bayes = cache.input * d_keypoints.transpose(); // n x K
    g.d_input = cache.bayes * d_keypoints;                           // n x 3

    // B[., k] = S[., k] / col_sum(k)
    Eigen::MatrixXd d_probs(n, d_bayes.cols());
    for (Eigen::Index k = 0; k < d_bayes.cols(); ++k) {
        const double dot = d_bayes.col(k).dot(cache.bayes.col(k));
        d_probs.col(k) = (d_bayes.col(k).array() - dot) / cache.col_sum(k);
    }

    // S = softmax(logits / t) row-wise
    Eigen::MatrixXd d_logits(n, d_probs.cols());
    const double inv_t = 1.0 / model.config.temperature;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double dot = d_probs.row(i).dot(cache.probs.row(i));
        d_logits.row(i) =
            inv_t * (cache.probs.row(i).array() * (d_probs.row(i).array() - dot)).matrix();
    }

    // logits = F head_w^T + head_b
    g.params.head_w = d_logits.transpose() * cache.features;
    g.params.head_b = d_logits.colwise().sum().transpose();
    Eigen::MatrixXd d_f = d_logits * p.head_w; // n x H

    // Edge-conv layers in reverse. Gradients scatter to winner neighbors, so
    // this stays serial for a fixed accumulation order.
    for (std::size_t l = p.edge_w.size(); l-- > 0;) {
        const auto& ec = cache.edge[l];
        const Eigen::MatrixXd w_self = p.edge_w[l].leftCols(h) - p.edge_w[l].rightCols(h);
        const Eigen::MatrixXd w_diff = p.edge_w[l].rightCols(h);
        Eigen::MatrixXd d_in = Eigen::MatrixXd::Zero(n, h);
        auto& d_w = g.params.edge_w[l];
        auto& d_b = g.params.edge_b[l];
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index c = 0; c < h; ++c) {
                const double dz = d_f(i, c) * lrelu_grad(ec.winner_pre(i, c));
                if (dz == 0.0) continue;
                const auto j = static_cast<Eigen::Index>(ec.winner(i, c));
                d_w.row(c).head(h) += dz * ec.input.row(i);
                d_w.row(c).tail(h) += dz * (ec.input.row(j) - ec.input.row(i));
                d_b(c) += dz;
                d_in.row(i) += dz * w_self.row(c);
                d_in.row(j) += dz * w_diff.row(c);
            }
        }
        d_f = std::move(d_in);
    }

    // Layer normalization (non-affine), then the leaky activation, then the
    // input affine map.
    Eigen::MatrixXd d_pre(n, h);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::RowVectorXd dhat = d_f.row(i);
        const Eigen::RowVectorXd hat = cache.ln_hat.row(i);
        const double mean_d = dhat.mean();
        const double mean_dh = dhat.dot(hat) / static_cast<double>(h);
        const Eigen::RowVectorXd d_act =
            cache.ln_inv(i) * (dhat.array() - mean_d - hat.array() * mean_dh).matrix();
        for (Eigen::Index c = 0; c < h; ++c) {
            d_pre(i, c) = d_act(c) * lrelu_grad(cache.feat_pre(i, c));
        }
    }
    g.params.feat_w = d_pre.transpose() * cache.input;
    g.params.feat_b = d_pre.colwise().sum().transpose();
    g.d_input += d_pre * p.feat_w;

    (void)graph;
    return g;
}

KeypointPairs nn_baseline_keypoints(const Tractogram& moving, const Tractogram& fixed,
                                    int num_keypoints, std::uint64_t seed) {
    if (moving.size() == 0 || fixed.size() == 0) {
        throw std::invalid_argument("nn_baseline_keypoints: empty tractogram");
    }
    std::vector<Point3> moving_pts, fixed_pts;
    for (const auto& sl : moving.streamlines)
        moving_pts.insert(moving_pts.end(), sl.points.begin(), sl.points.end());
    for (const auto& sl : fixed.streamlines)
        fixed_pts.insert(fixed_pts.end(), sl.points.begin(), sl.points.end());
    if (num_keypoints < 1 ||
        static_cast<std::size_t>(num_keypoints) > moving_pts.size()) {
        throw std::invalid_argument("nn_baseline_keypoints: keypoint count exceeds moving points");
    }

    Rng rng(seed);
    const std::vector<std::size_t> picks =
        rng.sample_without_replacement(moving_pts.size(), static_cast<std::size_t>(num_keypoints));

    KeypointPairs pairs;
    pairs.moving.resize(num_keypoints, 3);
    pairs.fixed.resize(num_keypoints, 3);
    for (int k = 0; k < num_keypoints; ++k) {
        const Point3& m = moving_pts[picks[static_cast<std::size_t>(k)]];
        std::size_t best = 0;
        double best_d2 = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < fixed_pts.size(); ++i) {
            const Point3 d = fixed_pts[i] - m;
            const double d2 = d.r * d.r + d.a * d.a + d.s * d.s;
            if (d2 < best_d2) {
                best_d2 = d2;
                best = i;
            }
        }
        pairs.moving.row(k) << m.r, m.a, m.s;
        pairs.fixed.row(k) << fixed_pts[best].r, fixed_pts[best].a, fixed_pts[best].s;
    }
    return pairs;
}

} // namespace streg
