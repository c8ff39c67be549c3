#pragma once

#include <cstdint>
#include <optional>
#include <type_traits>
#include <vector>

#include "rtcnn/tensor.hpp"

namespace rtcnn {

enum class Padding { Valid, Same };
enum class Mode { Train, Infer };

/// How a ReLU passes gradient backwards.
///  Standard:  R * (f > 0)            (true derivative)
///  Deconvnet: R * (R > 0)
///  Guided:    R * (f > 0) * (R > 0)
enum class ReluMode { Standard, Deconvnet, Guided };

/// Output length and leading pad along one spatial axis. "Same" produces ceil(in / stride)
/// and splits the total padding with the extra cell after the input.
struct Extent {
    std::size_t out = 0;
    std::size_t pad_before = 0;
};
Extent output_extent(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding);

struct ConvSpec {
    std::size_t kernel = 3;
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t stride = 1;
    Padding padding = Padding::Same;
    bool has_bias = false;

    /// Throws ShapeError unless kernel is odd, channels are non-zero and stride is 1 or 2.
    void validate() const;
};

struct PoolSpec {
    std::size_t window = 3;
    std::size_t stride = 2;
    Padding padding = Padding::Same;
};

template <typename T>
struct BatchNormState {
    BasicTensor<T> gamma;
    BasicTensor<T> beta;
    BasicTensor<T> running_mean;
    BasicTensor<T> running_var;
    double epsilon = 1e-3;
    double momentum = 0.99;

    /// gamma = 1, beta = 0, running mean 0, running variance 1.
    static BatchNormState identity(std::size_t channels, double epsilon = 1e-3, double momentum = 0.99);
    std::size_t channels() const { return gamma.shape().c; }
    void validate() const;
};

// Forward caches. Each holds what its backward pass needs; none are shared between calls.

template <typename T>
struct ConvCache {
    BasicTensor<T> input;
    BasicTensor<T> weights;
    ConvSpec spec;
    Shape output_shape;
};

template <typename T>
struct DepthwiseCache {
    BasicTensor<T> input;
    BasicTensor<T> weights;
    ConvSpec spec;
    Shape output_shape;
};

template <typename T>
struct PointwiseCache {
    BasicTensor<T> input;
    BasicTensor<T> weights;
    ConvSpec spec;
    Shape output_shape;
};

template <typename T>
struct SeparableCache {
    DepthwiseCache<T> depthwise;
    PointwiseCache<T> pointwise;  // pointwise.input is the depthwise output
};

template <typename T>
struct BatchNormCache {
    BasicTensor<T> normalized;   // x_hat
    std::vector<T> inv_std;      // per channel, from batch (train) or running (infer) statistics
    BasicTensor<T> gamma;
    Mode mode = Mode::Infer;
};

template <typename T>
struct ReluCache {
    BasicTensor<T> input;
};

struct PoolCache {
    Shape input_shape;
    Shape output_shape;
    std::vector<std::uint32_t> argmax;  // flat input index feeding each output element
};

struct GapCache {
    Shape input_shape;
};

template <typename T>
struct SoftmaxCache {
    BasicTensor<T> probs;
};

template <typename T, typename Cache>
struct Forward {
    BasicTensor<T> y;
    Cache cache;
};

template <typename T>
struct ConvGrads {
    BasicTensor<T> d_input;
    BasicTensor<T> d_weights;
    std::optional<BasicTensor<T>> d_bias;
};

template <typename T>
struct SeparableGrads {
    BasicTensor<T> d_input;
    BasicTensor<T> d_depthwise;
    BasicTensor<T> d_pointwise;
};

template <typename T>
struct BatchNormGrads {
    BasicTensor<T> d_input;
    BasicTensor<T> d_gamma;
    BasicTensor<T> d_beta;
};

/// Which outputs a backward call should produce. Saliency only needs d_input.
struct GradRequest {
    bool input = true;
    bool params = true;
};

// Standard convolution. weights (N, M, D, D); bias (1, N, 1, 1) or null.
template <typename T>
Forward<T, ConvCache<T>> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& weights,
                                        const std::type_identity_t<BasicTensor<T>>* bias, const ConvSpec& spec);
template <typename T>
ConvGrads<T> conv2d_backward(const ConvCache<T>& cache, const BasicTensor<T>& upstream, GradRequest want = {});

// Depthwise convolution. weights (M, 1, D, D); output channels == M.
template <typename T>
Forward<T, DepthwiseCache<T>> depthwise_conv_forward(const BasicTensor<T>& x, const BasicTensor<T>& weights,
                                                     const ConvSpec& spec);
template <typename T>
ConvGrads<T> depthwise_backward(const DepthwiseCache<T>& cache, const BasicTensor<T>& upstream, GradRequest want = {});

// Pointwise (1x1) convolution. weights (N, M, 1, 1); spec.kernel must be 1.
template <typename T>
Forward<T, PointwiseCache<T>> pointwise_conv_forward(const BasicTensor<T>& x, const BasicTensor<T>& weights,
                                                     const ConvSpec& spec);
template <typename T>
ConvGrads<T> pointwise_backward(const PointwiseCache<T>& cache, const BasicTensor<T>& upstream, GradRequest want = {});

/// Depthwise D x D (stride/padding from spec) followed by pointwise 1 x 1.
template <typename T>
Forward<T, SeparableCache<T>> separable_conv_forward(const BasicTensor<T>& x, const BasicTensor<T>& dw_weights,
                                                     const BasicTensor<T>& pw_weights, const ConvSpec& spec);
template <typename T>
SeparableGrads<T> separable_backward(const SeparableCache<T>& cache, const BasicTensor<T>& upstream,
                                     GradRequest want = {});

/// Train mode normalizes with batch statistics over (n, h, w) and folds them into the running
/// statistics; infer mode reads only the running statistics.
template <typename T>
Forward<T, BatchNormCache<T>> batchnorm_forward(const BasicTensor<T>& x, BatchNormState<T>& state, Mode mode);
/// Infer-only overload for a const state.
template <typename T>
Forward<T, BatchNormCache<T>> batchnorm_forward(const BasicTensor<T>& x, const BatchNormState<T>& state);
template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache, const BasicTensor<T>& upstream);

template <typename T>
Forward<T, ReluCache<T>> relu_forward(const BasicTensor<T>& x);
/// `cache` may be null only in Deconvnet mode, which never looks at the forward input.
template <typename T>
BasicTensor<T> relu_backward(const ReluCache<T>* cache, const BasicTensor<T>& upstream, ReluMode mode);

template <typename T>
Forward<T, PoolCache> maxpool_forward(const BasicTensor<T>& x, const PoolSpec& spec);
/// Routes each upstream value to the first maximal input of its window.
template <typename T>
BasicTensor<T> maxpool_backward(const PoolCache& cache, const BasicTensor<T>& upstream);

template <typename T>
Forward<T, GapCache> gap_forward(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> gap_backward(const GapCache& cache, const BasicTensor<T>& upstream);

/// Softmax across channels at every (n, y, x); max-subtracted.
template <typename T>
Forward<T, SoftmaxCache<T>> softmax_forward(const BasicTensor<T>& logits);
template <typename T>
BasicTensor<T> softmax_backward(const SoftmaxCache<T>& cache, const BasicTensor<T>& upstream);

/// H(x) = F(x) + x. The backward of a sum hands the upstream gradient to both branches.
template <typename T>
BasicTensor<T> residual_add(const BasicTensor<T>& main, const BasicTensor<T>& skip);

// ---------------------------------------------------------------------------------------------
// Multiply-accumulate accounting.

enum class ConvKind { Standard, Depthwise, Pointwise, Separable };

/// MACs for one sample: standard D²·M·N·HW, depthwise D²·M·HW, pointwise M·N·HW,
/// separable D²·M·HW + M·N·HW.
std::uint64_t mult_count(ConvKind kind, const ConvSpec& spec, std::size_t out_h, std::size_t out_w);

struct Rational {
    std::uint64_t num = 0;
    std::uint64_t den = 1;
    friend bool operator==(const Rational&, const Rational&) = default;
};

/// Reduced fraction num/den.
Rational make_rational(std::uint64_t num, std::uint64_t den);
/// separable / standard for the same spec, reduced.
Rational separable_cost_ratio(const ConvSpec& spec, std::size_t out_h, std::size_t out_w);

}  // namespace rtcnn
