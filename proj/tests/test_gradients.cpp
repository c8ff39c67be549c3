#include <gtest/gtest.h>

#include "checks.hpp"
#include "oracles.hpp"
#include "rtcnn/layers.hpp"

namespace {

constexpr double kTolerance = 1e-4;

void expect_all_seeds(checks::GradCheck (*check)(std::uint64_t), std::uint64_t seeds) {
    for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
        const checks::GradCheck g = check(seed);
        EXPECT_GT(g.values, 0u) << "seed " << seed;
        EXPECT_LT(g.max_rel, kTolerance) << "seed " << seed << ", worst: " << g.worst;
    }
}

}  // namespace

TEST(Gradients, Conv2d) { expect_all_seeds(checks::conv2d_grad, 40); }
TEST(Gradients, Depthwise) { expect_all_seeds(checks::depthwise_grad, 40); }
TEST(Gradients, Pointwise) { expect_all_seeds(checks::pointwise_grad, 40); }
TEST(Gradients, Separable) { expect_all_seeds(checks::separable_grad, 40); }
TEST(Gradients, BatchNormTrain) { expect_all_seeds(checks::batchnorm_train_grad, 40); }
TEST(Gradients, BatchNormInfer) { expect_all_seeds(checks::batchnorm_infer_grad, 40); }
TEST(Gradients, Relu) { expect_all_seeds(checks::relu_grad, 20); }
TEST(Gradients, MaxPool) { expect_all_seeds(checks::maxpool_grad, 40); }
TEST(Gradients, GlobalAveragePool) { expect_all_seeds(checks::gap_grad, 20); }
TEST(Gradients, Softmax) { expect_all_seeds(checks::softmax_grad, 20); }
TEST(Gradients, SoftmaxCrossEntropy) { expect_all_seeds(checks::cross_entropy_grad, 20); }
TEST(Gradients, ToyNetwork) { expect_all_seeds(checks::toy_network_grad, 10); }
TEST(Gradients, ResidualNetwork) { expect_all_seeds(checks::residual_network_grad, 6); }
TEST(Gradients, StandardSaliencyIsInputGradient) { expect_all_seeds(checks::saliency_standard_grad, 10); }

TEST(Gradients, SeparableExampleFromFixedSeed) {
    // D=3, M=2, N=3 on a 1x2x6x6 input.
    using rtcnn::Tensor64;
    const rtcnn::ConvSpec spec{3, 2, 3, 1, rtcnn::Padding::Same, false};
    const Tensor64 x = Tensor64::uniform({1, 2, 6, 6}, -1, 1, 5);
    const Tensor64 dw = Tensor64::uniform({2, 1, 3, 3}, -1, 1, 6);
    const Tensor64 pw = Tensor64::uniform({3, 2, 1, 1}, -1, 1, 7);
    const auto fwd = rtcnn::separable_conv_forward(x, dw, pw, spec);
    const Tensor64 r = Tensor64::uniform(fwd.y.shape(), -1, 1, 8);
    const auto g = rtcnn::separable_backward(fwd.cache, r);
    const Tensor64 num = oracle::numeric_gradient(x, [&](const Tensor64& v) {
        return oracle::project(rtcnn::separable_conv_forward(v, dw, pw, spec).y, r);
    });
    EXPECT_LT(oracle::max_relative_error(g.d_input, num), kTolerance);
}

TEST(Gradients, BatchNormTrainExampleShape) {
    using rtcnn::Tensor64;
    const Tensor64 x = Tensor64::uniform({4, 3, 2, 2}, -2, 2, 11);
    auto st = rtcnn::BatchNormState<double>::identity(3);
    const auto fwd = rtcnn::batchnorm_forward(x, st, rtcnn::Mode::Train);
    const Tensor64 r = Tensor64::uniform(x.shape(), -1, 1, 12);
    const auto g = rtcnn::batchnorm_backward(fwd.cache, r);
    const Tensor64 num = oracle::numeric_gradient(x, [&](const Tensor64& v) {
        auto s = rtcnn::BatchNormState<double>::identity(3);
        return oracle::project(rtcnn::batchnorm_forward(v, s, rtcnn::Mode::Train).y, r);
    });
    EXPECT_LT(oracle::max_relative_error(g.d_input, num), kTolerance);
}

TEST(Oracles, KernelsMatchNaiveLoops) {
    for (std::uint64_t seed = 1; seed <= 60; ++seed) {
        EXPECT_EQ(checks::conv2d_oracle(seed), "") << "conv seed " << seed;
        EXPECT_EQ(checks::depthwise_oracle(seed), "") << "depthwise seed " << seed;
        EXPECT_EQ(checks::pointwise_oracle(seed), "") << "pointwise seed " << seed;
        EXPECT_EQ(checks::separable_oracle(seed), "") << "separable seed " << seed;
        EXPECT_EQ(checks::maxpool_oracle(seed), "") << "maxpool seed " << seed;
        EXPECT_EQ(checks::separable_composition(seed), "") << "composition seed " << seed;
    }
}
