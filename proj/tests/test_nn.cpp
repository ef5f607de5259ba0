#include <gtest/gtest.h>

#include <cmath>

#include "emcomm/checkpoint.hpp"
#include "emcomm/nn.hpp"

using namespace emcomm;

namespace {

Mlp random_net(std::vector<std::size_t> dims, std::uint64_t seed) {
    Rng rng(seed);
    Mlp net = Mlp::glorot(std::move(dims), rng);
    for (auto& b : net.biases) {
        for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = 0.3 * rng.normal();
    }
    return net;
}

Vector random_vector(std::size_t n, Rng& rng) {
    Vector v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal();
    return v;
}

} // namespace

TEST(MlpForward, ZeroNetworkOutputsZero) {
    const Mlp net = Mlp::zeros({3, 5, 2});
    const auto [out, cache] = mlp_forward(net, Vector::Constant(3, 1.7));
    EXPECT_TRUE(out.isZero(0.0));
    EXPECT_EQ(net.parameter_count(), 3u * 5u + 5u + 5u * 2u + 2u);
}

TEST(MlpForward, IdentityLinearLayer) {
    Mlp net = Mlp::zeros({3, 3});
    net.weights[0] = Matrix::Identity(3, 3);
    const Vector x(Vector::LinSpaced(3, -1.0, 2.0));
    EXPECT_EQ(mlp_forward(net, x).first, x);
}

TEST(MlpForward, HandComputedTwoThreeTwo) {
    Mlp net = Mlp::zeros({2, 3, 2});
    net.weights[0] << 0.5, -1.0, 0.25, 0.75, -0.5, 2.0;
    net.biases[0] << 0.1, -0.2, 0.0;
    net.weights[1] << 1.0, -1.0, 0.5, 0.2, 0.3, -0.4;
    net.biases[1] << 0.05, -0.05;
    Vector x(2);
    x << 0.4, -0.3;
    const double h0 = std::tanh(0.5 * 0.4 + -1.0 * -0.3 + 0.1);
    const double h1 = std::tanh(0.25 * 0.4 + 0.75 * -0.3 - 0.2);
    const double h2 = std::tanh(-0.5 * 0.4 + 2.0 * -0.3 + 0.0);
    const double y0 = 1.0 * h0 - 1.0 * h1 + 0.5 * h2 + 0.05;
    const double y1 = 0.2 * h0 + 0.3 * h1 - 0.4 * h2 - 0.05;
    const auto out = mlp_forward(net, x).first;
    EXPECT_NEAR(out[0], y0, 1e-12);
    EXPECT_NEAR(out[1], y1, 1e-12);
}

TEST(MlpForward, DimensionMismatchThrows) {
    const Mlp net = Mlp::zeros({3, 2});
    EXPECT_THROW(mlp_forward(net, Vector::Zero(4)), std::invalid_argument);
    EXPECT_THROW(Mlp::zeros({3}), std::invalid_argument);
}

TEST(MlpForward, Deterministic) {
    const Mlp net = random_net({6, 7, 3}, 5);
    Rng rng(1);
    const Vector x = random_vector(6, rng);
    EXPECT_EQ(mlp_forward(net, x).first, mlp_forward(net, x).first);
}

TEST(MlpForward, GlorotRangeAndZeroBias) {
    Rng rng(3);
    const Mlp net = Mlp::glorot({10, 20, 5}, rng);
    const double l0 = std::sqrt(6.0 / 30.0), l1 = std::sqrt(6.0 / 25.0);
    EXPECT_LE(net.weights[0].cwiseAbs().maxCoeff(), l0);
    EXPECT_LE(net.weights[1].cwiseAbs().maxCoeff(), l1);
    EXPECT_GT(net.weights[0].cwiseAbs().maxCoeff(), 0.8 * l0);
    EXPECT_TRUE(net.biases[0].isZero(0.0));
    Rng rng2(3);
    EXPECT_EQ(Mlp::glorot({10, 20, 5}, rng2).weights[1], net.weights[1]);
}

TEST(MlpBackward, ZeroOutputGradient) {
    const Mlp net = random_net({4, 5, 3}, 2);
    Rng rng(9);
    const auto [out, cache] = mlp_forward(net, random_vector(4, rng));
    const auto g = mlp_backward(net, cache, Vector::Zero(3));
    for (const auto& w : g.weights) EXPECT_TRUE(w.isZero(0.0));
    for (const auto& b : g.biases) EXPECT_TRUE(b.isZero(0.0));
    EXPECT_TRUE(g.input.isZero(0.0));
}

TEST(MlpBackward, LinearBaseCase) {
    Mlp net = Mlp::zeros({1, 1});
    net.weights[0](0, 0) = 0.7;
    Vector x(1);
    x << 2.5;
    const auto [out, cache] = mlp_forward(net, x);
    const auto g = mlp_backward(net, cache, Vector::Ones(1));
    EXPECT_DOUBLE_EQ(g.weights[0](0, 0), 2.5);
    EXPECT_DOUBLE_EQ(g.biases[0][0], 1.0);
    EXPECT_DOUBLE_EQ(g.input(0, 0), 0.7);
}

TEST(MlpBackward, MatchesFiniteDifferences) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Mlp net = random_net({4, 5, 3}, seed);
        Rng rng(seed + 100);
        const Vector x = random_vector(4, rng);
        const Vector w = random_vector(3, rng);
        const auto [out, cache] = mlp_forward(net, x);
        auto g = mlp_backward(net, cache, w);
        ParamBlocks params;
        net.append_blocks(params);
        ConstBlocks analytic;
        g.append_blocks(analytic);
        const auto loss = [&] { return mlp_forward(net, x).first.dot(w); };
        const auto rep = grad_check(params, analytic, loss, 1e-4);
        EXPECT_TRUE(rep.passed) << "seed " << seed << " max rel " << rep.max_rel_error;
        EXPECT_EQ(rep.checked, net.parameter_count());

        // input gradient
        Vector xin = x;
        ParamBlocks in_block{block_of(xin)};
        ConstBlocks in_grad{std::span<const double>(g.input.data(), static_cast<std::size_t>(g.input.size()))};
        const auto rep_in = grad_check(in_block, in_grad, [&] { return mlp_forward(net, xin).first.dot(w); }, 1e-4);
        EXPECT_TRUE(rep_in.passed) << rep_in.max_rel_error;
    }
}

TEST(MlpBackward, BatchGradientsSumSampleGradients) {
    const Mlp net = random_net({3, 4, 2}, 8);
    Rng rng(4);
    Matrix x(3, 5), w(2, 5);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
    ForwardCache cache;
    forward(net, x, &cache);
    const auto batch = backward(net, cache, w);
    Gradients sum = Gradients::zeros_like(net);
    for (Eigen::Index c = 0; c < 5; ++c) {
        const auto [o, cc] = mlp_forward(net, x.col(c));
        const auto g = mlp_backward(net, cc, w.col(c));
        for (std::size_t l = 0; l < 2; ++l) {
            sum.weights[l] += g.weights[l];
            sum.biases[l] += g.biases[l];
        }
    }
    for (std::size_t l = 0; l < 2; ++l) {
        EXPECT_TRUE(batch.weights[l].isApprox(sum.weights[l], 1e-12));
        EXPECT_TRUE(batch.biases[l].isApprox(sum.biases[l], 1e-12));
    }
}

TEST(MlpBackward, StaleCacheThrows) {
    const Mlp a = random_net({3, 4, 2}, 1);
    const Mlp b = random_net({3, 5, 2}, 1);
    const auto [out, cache] = mlp_forward(a, Vector::Ones(3));
    EXPECT_THROW(mlp_backward(b, cache, Vector::Ones(2)), std::invalid_argument);
    EXPECT_THROW(mlp_backward(a, cache, Vector::Ones(3)), std::invalid_argument);
    EXPECT_THROW(mlp_backward(a, ForwardCache{}, Vector::Ones(2)), std::invalid_argument);
}

TEST(Optimizer, ZeroGradientKeepsParameters) {
    std::vector<double> p{1.0, -2.0}, g{0.0, 0.0};
    for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
        OptimizerState st({kind, 0.1});
        optimizer_step(st, {std::span<double>(p)}, {std::span<const double>(g)});
        EXPECT_EQ(p, (std::vector<double>{1.0, -2.0}));
        EXPECT_EQ(st.step, 1u);
    }
}

TEST(Optimizer, SgdOneStep) {
    std::vector<double> p{1.0}, g{2.0};
    OptimizerState st({OptimizerKind::sgd, 0.1});
    optimizer_step(st, {std::span<double>(p)}, {std::span<const double>(g)});
    EXPECT_NEAR(p[0], 0.8, 1e-15);
}

TEST(Optimizer, AdamFirstStep) {
    std::vector<double> p{0.5, -0.5, 3.0}, g{1.0, 1.0, 1.0};
    OptimizerSettings s;
    s.learning_rate = 1e-3;
    OptimizerState st(s);
    optimizer_step(st, {std::span<double>(p)}, {std::span<const double>(g)});
    // m_hat = 1, v_hat = 1: update = -lr / (1 + eps)
    const double step = 1e-3 / (1.0 + 1e-8);
    EXPECT_NEAR(p[0], 0.5 - step, 1e-15);
    EXPECT_NEAR(p[1], -0.5 - step, 1e-15);
    EXPECT_NEAR(p[2], 3.0 - step, 1e-15);
}

TEST(Optimizer, NonFiniteGradientAborts) {
    std::vector<double> p{1.0}, g{std::nan("")};
    OptimizerState st;
    try {
        optimizer_step(st, {std::span<double>(p)}, {std::span<const double>(g)});
        FAIL();
    } catch (const divergence_error& e) {
        EXPECT_EQ(e.term(), "gradient");
    }
    EXPECT_EQ(p[0], 1.0);
    std::vector<double> q{1.0, 2.0};
    EXPECT_THROW(optimizer_step(st, {std::span<double>(p)}, {std::span<const double>(q)}), std::invalid_argument);
}

TEST(Optimizer, SgdStrictlyDecreasesConvexQuadratic) {
    // L(p) = 0.5 * sum_i c_i p_i^2, curvature max 4; lr < 2 / 4.
    const std::vector<double> c{0.5, 1.0, 4.0};
    std::vector<double> p{1.0, -2.0, 0.7}, g(3);
    const auto loss = [&] {
        double l = 0.0;
        for (int i = 0; i < 3; ++i) l += 0.5 * c[i] * p[i] * p[i];
        return l;
    };
    OptimizerState st({OptimizerKind::sgd, 0.3});
    double prev = loss();
    for (int it = 0; it < 50; ++it) {
        for (int i = 0; i < 3; ++i) g[i] = c[i] * p[i];
        optimizer_step(st, {std::span<double>(p)}, {std::span<const double>(g)});
        const double now = loss();
        EXPECT_LT(now, prev);
        prev = now;
    }
}

TEST(GradCheck, QuadraticLossOnLinearNet) {
    Mlp net = random_net({3, 2}, 12);
    Rng rng(2);
    Matrix x(3, 6);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    const auto loss = [&] { return 0.5 * forward(net, x).squaredNorm(); };
    ForwardCache cache;
    const Matrix y = forward(net, x, &cache);
    auto g = backward(net, cache, y);
    ParamBlocks params;
    net.append_blocks(params);
    ConstBlocks analytic;
    g.append_blocks(analytic);
    const auto rep = grad_check(params, analytic, loss, 1e-8);
    EXPECT_TRUE(rep.passed) << rep.max_rel_error;
    EXPECT_LT(rep.max_rel_error, 1e-8);

    const auto zero_tol = grad_check(params, analytic, loss, 0.0);
    EXPECT_FALSE(zero_tol.passed);
}

TEST(GradCheck, DetectsWrongGradient) {
    std::vector<double> p{1.0, 2.0};
    std::vector<double> wrong{2.0, 5.0};
    const auto rep = grad_check({std::span<double>(p)}, {std::span<const double>(wrong)},
                                [&] { return p[0] * p[0] + p[1] * p[1]; }, 1e-4);
    EXPECT_FALSE(rep.passed);
    EXPECT_EQ(rep.worst_index, 1u);
    EXPECT_EQ(p, (std::vector<double>{1.0, 2.0}));
}

TEST(Checkpoint, TensorRoundtripAndErrors) {
    NamedTensors t;
    Matrix a(2, 3);
    a << 1, 2, 3, 4, 5, 6;
    t.emplace_back("a", a);
    t.emplace_back("empty", Matrix(0, 4));
    const auto bytes = encode_tensors(t);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "EMCK");
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[5], 0);
    const auto back = decode_tensors(bytes);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].first, "a");
    EXPECT_EQ(back[0].second, a);
    EXPECT_EQ(back[1].second.rows(), 0);
    EXPECT_EQ(back[1].second.cols(), 4);

    auto truncated = bytes;
    truncated.resize(truncated.size() - 1);
    EXPECT_THROW(decode_tensors(truncated), format_error);
    auto magic = bytes;
    magic[3] = 'Q';
    EXPECT_THROW(decode_tensors(magic), format_error);
    auto version = bytes;
    version[4] = 9;
    EXPECT_THROW(decode_tensors(version), format_error);
}
