#include <odestim/net.hpp>
#include <odestim/optim.hpp>
#include <odestim/rng.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <thread>

using namespace odestim;

namespace {

Mlp unit_net(Activation a) {
    Mlp net = init(1, 1, 1, a, 0);
    net.W1(0, 0) = 1;
    net.W2(0, 0) = 1;
    return net;
}

// sum_i g_i . y(t_i) for fixed out-grads g
double contracted(const Mlp& net, const std::vector<double>& t, const RowMatrix& g) {
    return forward_batch(net, t).cwiseProduct(g).sum();
}

} // namespace

TEST(Init, DeterministicGlorotWithZeroBiases) {
    const Mlp a = init(1, 64, 3, Activation::Tanh, 9);
    const Mlp b = init(1, 64, 3, Activation::Tanh, 9);
    EXPECT_EQ(flatten(a), flatten(b));
    EXPECT_NE(flatten(a), flatten(init(1, 64, 3, Activation::Tanh, 10)));
    EXPECT_EQ(flatten(a).size(), 323);
    EXPECT_EQ(a.param_count(), 323u);
    EXPECT_TRUE(a.b1.isZero(0.0));
    EXPECT_TRUE(a.b2.isZero(0.0));
    EXPECT_LE(a.W1.cwiseAbs().maxCoeff(), std::sqrt(6.0 / 65));
    EXPECT_LE(a.W2.cwiseAbs().maxCoeff(), std::sqrt(6.0 / 67));
    // the draws actually fill the range
    EXPECT_GT(a.W2.cwiseAbs().maxCoeff(), 0.8 * std::sqrt(6.0 / 67));
}

TEST(Forward, ReluUnitNet) {
    const Mlp net = unit_net(Activation::ReLU);
    EXPECT_EQ(forward(net, 3)[0], 3.0);
    EXPECT_EQ(forward(net, -2)[0], 0.0);
}

TEST(Forward, ZeroOuterWeightsGiveScaledBias) {
    Mlp net = init(1, 8, 2, Activation::Tanh, 1);
    net.W2.setZero();
    net.b2 << 0.5, -1;
    net.set_output_scale(Vector::Constant(2, 10.0), Vector::Constant(2, 2.0));
    for (double t : {-3.0, 0.0, 7.5}) {
        EXPECT_EQ(forward(net, t)[0], 11.0);
        EXPECT_EQ(forward(net, t)[1], 8.0);
    }
}

TEST(Forward, LogisticWithZeroInputWeights) {
    Mlp net = init(1, 4, 1, Activation::Logistic, 2);
    net.W1.setZero();
    net.set_output_scale(Vector::Constant(1, 1.0), Vector::Constant(1, 3.0));
    const double expected = 1.0 + 3.0 * (0.5 * net.W2.sum());
    for (double t : {-1.0, 0.3, 2.0}) EXPECT_NEAR(forward(net, t)[0], expected, 1e-15);
}

TEST(Forward, TimeWindowMapsToUnitInterval) {
    Mlp net = unit_net(Activation::ReLU);
    net.set_time_window(0, 10);
    EXPECT_NEAR(forward(net, 10)[0], 1.0, 1e-15);
    EXPECT_NEAR(forward(net, 7.5)[0], 0.5, 1e-15);
    EXPECT_EQ(forward(net, 0)[0], 0.0);
}

TEST(Forward, TanhMatchesLibrary) {
    Mlp net = unit_net(Activation::Tanh);
    for (double t : {-30.0, -2.0, -1e-9, 0.0, 0.3, 5.0, 400.0}) EXPECT_NEAR(forward(net, t)[0], std::tanh(t), 1e-15);
}

TEST(ForwardBatch, RowsEqualSinglePointForward) {
    const Mlp net = init(1, 16, 3, Activation::Tanh, 5);
    std::vector<double> t;
    for (int i = 0; i < 2501; ++i) t.push_back(0.01 * i);
    const RowMatrix y = forward_batch(net, t);
    EXPECT_EQ(y.rows(), 2501);
    EXPECT_EQ(y.cols(), 3);
    for (int i : {0, 17, 2500}) EXPECT_EQ(y.row(i).transpose(), forward(net, t[static_cast<std::size_t>(i)]));
    EXPECT_EQ(forward_batch(net, {}).rows(), 0);
}

TEST(ForwardBatch, SharedNetAcrossThreads) {
    const Mlp net = init(1, 32, 2, Activation::Tanh, 6);
    std::vector<double> t;
    for (int i = 0; i < 500; ++i) t.push_back(0.02 * i);
    const RowMatrix ref = forward_batch(net, t);
    std::vector<RowMatrix> out(4);
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < out.size(); ++k)
        pool.emplace_back([&, k] {
            for (int rep = 0; rep < 20; ++rep) out[k] = forward_batch(net, t);
        });
    for (auto& th : pool) th.join();
    for (const auto& o : out) EXPECT_EQ(o, ref);
}

TEST(Backward, ZeroOutGradsGiveZeroGradient) {
    const Mlp net = init(1, 8, 2, Activation::Tanh, 3);
    const std::vector<double> t{0.1, 0.5, 0.9};
    EXPECT_TRUE(backward(net, t, RowMatrix::Zero(3, 2)).params.isZero(0.0));
}

TEST(Backward, LogisticZeroWeightsByHand) {
    Mlp net = init(1, 1, 1, Activation::Logistic, 0);
    net.W1.setZero();
    net.W2.setZero();
    const auto g = backward(net, std::vector<double>{0.7}, RowMatrix::Ones(1, 1));
    // flatten order: W1, b1, W2, b2
    EXPECT_EQ(g.params[2], 0.5);
    EXPECT_EQ(g.params[3], 1.0);
    EXPECT_EQ(g.params[0], 0.0);
}

TEST(Backward, ShapeMismatch) {
    const Mlp net = init(1, 4, 2, Activation::Tanh, 3);
    try {
        backward(net, std::vector<double>{0, 1}, RowMatrix::Zero(2, 3));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
    }
}

TEST(Backward, ReluSubgradientAtZeroIsZero) {
    Mlp net = unit_net(Activation::ReLU);
    const auto g = backward(net, std::vector<double>{0.0}, RowMatrix::Ones(1, 1));
    EXPECT_EQ(g.params[0], 0.0);
    EXPECT_EQ(g.params[1], 0.0);
}

// 50 random nets: every parameter and input gradient against central
// differences, step 1e-6 relative to the parameter.
TEST(Backward, MatchesFiniteDifferences) {
    Rng rng(31);
    const Activation acts[] = {Activation::Tanh, Activation::Logistic, Activation::ReLU};
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const Activation act = acts[trial % 3];
        const std::size_t hidden = 2 + static_cast<std::size_t>(rng.uniform(0, 10));
        const std::size_t out = 1 + static_cast<std::size_t>(rng.uniform(0, 3));
        Mlp net = init(1, hidden, out, act, static_cast<std::uint64_t>(trial));
        Vector theta = flatten(net);
        for (auto& v : theta) v += rng.uniform(-0.5, 0.5);
        net = unflatten(net, theta);
        net.set_time_window(0, 5);
        Vector mean(static_cast<Eigen::Index>(out)), sd(static_cast<Eigen::Index>(out));
        for (auto& v : mean) v = rng.uniform(-2, 2);
        for (auto& v : sd) v = rng.uniform(0.5, 3);
        net.set_output_scale(mean, sd);

        std::vector<double> t;
        for (int i = 0; i < 6; ++i) t.push_back(rng.uniform(0, 5));
        RowMatrix g(6, static_cast<Eigen::Index>(out));
        for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.uniform(-1, 1);

        const Gradients grads = backward(net, t, g);
        for (Eigen::Index j = 0; j < theta.size(); ++j) {
            const double h = 1e-6 * std::max(1.0, std::abs(theta[j]));
            Vector a = theta, b = theta;
            a[j] += h;
            b[j] -= h;
            const double fd = (contracted(unflatten(net, a), t, g) - contracted(unflatten(net, b), t, g)) / (2 * h);
            const double rel = std::abs(grads.params[j] - fd) / std::max(1.0, std::abs(fd));
            worst = std::max(worst, rel);
            EXPECT_LT(rel, 1e-4) << "trial " << trial << " param " << j;
        }
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double h = 1e-6;
            auto shifted = [&](double dt) {
                std::vector<double> u = t;
                u[i] += dt;
                return contracted(net, u, g);
            };
            const double fd = (shifted(h) - shifted(-h)) / (2 * h);
            EXPECT_LT(std::abs(grads.input_grads[static_cast<Eigen::Index>(i)] - fd) / std::max(1.0, std::abs(fd)), 1e-4);
        }
    }
    RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(Flatten, RoundTripIsBitExact) {
    Mlp net = init(1, 7, 3, Activation::Tanh, 4);
    Vector theta = flatten(net);
    Rng rng(1);
    for (auto& v : theta) v = rng.uniform(-1, 1) / 3.0;
    const Mlp other = unflatten(net, theta);
    EXPECT_EQ(flatten(other), theta);
    EXPECT_EQ(flatten(unflatten(other, flatten(other))), theta);
}

TEST(Flatten, DocumentedOrder) {
    Mlp net = init(1, 2, 2, Activation::Tanh, 4);
    Vector theta(10);
    theta << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10;
    net = unflatten(net, theta);
    EXPECT_EQ(net.W1(0, 0), 1);
    EXPECT_EQ(net.W1(1, 0), 2);
    EXPECT_EQ(net.b1[1], 4);
    EXPECT_EQ(net.W2(0, 1), 6); // row-major
    EXPECT_EQ(net.W2(1, 0), 7);
    EXPECT_EQ(net.b2[0], 9);
}

TEST(Flatten, ZerosGiveOutputMean) {
    Mlp net = init(1, 5, 2, Activation::Tanh, 4);
    net.set_output_scale(Vector::Constant(2, 3.0), Vector::Constant(2, 7.0));
    net = unflatten(net, Vector::Zero(static_cast<Eigen::Index>(net.param_count())));
    EXPECT_EQ(forward(net, 0.4), Vector::Constant(2, 3.0));
}

TEST(Flatten, LengthMismatch) {
    const Mlp net = init(1, 5, 2, Activation::Tanh, 4);
    try {
        unflatten(net, Vector::Zero(3));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::LengthMismatch);
    }
}

TEST(Checkpoint, RoundTrip) {
    Mlp net = init(1, 9, 3, Activation::Logistic, 8);
    net.set_time_window(0, 25);
    net.set_output_scale(Vector::Constant(3, 0.1), Vector::Constant(3, 1.0 / 3));
    const auto dir = std::filesystem::temp_directory_path() / "odestim_ckpt_test";
    std::filesystem::create_directories(dir);
    const std::string prefix = (dir / "net").string();
    save_checkpoint(net, prefix);
    const Mlp back = load_checkpoint(prefix);
    EXPECT_EQ(back.activation, Activation::Logistic);
    EXPECT_EQ(flatten(back), flatten(net));
    EXPECT_EQ(back.in_scale, net.in_scale);
    EXPECT_EQ(back.out_std, net.out_std);
    EXPECT_EQ(forward(back, 3.3), forward(net, 3.3));
    std::filesystem::remove_all(dir);
}

// A 1-32-1 tanh net learns sin on [0, pi] from 200 samples.
TEST(Training, ApproximatesSine) {
    std::vector<double> t;
    RowMatrix target(200, 1);
    for (int i = 0; i < 200; ++i) {
        t.push_back(std::numbers::pi * i / 199.0);
        target(i, 0) = std::sin(t.back());
    }
    Mlp net = init(1, 32, 1, Activation::Tanh, 1);
    net.set_time_window(0, std::numbers::pi);
    Objective mse = [&](const Vector& theta, Vector& grad) {
        const Mlp n = unflatten(net, theta);
        const RowMatrix r = forward_batch(n, t) - target;
        grad = backward(n, t, r * (2.0 / 200)).params;
        return r.squaredNorm() / 200;
    };
    AdamState s = adam_new(net.param_count(), 0.01);
    const auto res = minimize(mse, flatten(net), 5000, s);
    EXPECT_LT(res.best_loss, 1e-3);
}

TEST(Activation, Names) {
    for (auto a : {Activation::ReLU, Activation::Logistic, Activation::Tanh})
        EXPECT_EQ(parse_activation(to_string(a)), a);
    EXPECT_THROW(parse_activation("gelu"), Error);
}
