#include "checks.hpp"

#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "rtcnn/model.hpp"
#include "rtcnn/saliency.hpp"
#include "rtcnn/training.hpp"

namespace checks {

using rtcnn::ConvSpec;
using rtcnn::Model64;
using rtcnn::Padding;
using rtcnn::Shape;
using rtcnn::Tensor64;
using rtcnn::Xorshift64Star;

namespace {

void compare(GradCheck& gc, const Tensor64& analytic, const Tensor64& numeric, const std::string& name) {
    if (analytic.shape() != numeric.shape()) {
        gc.max_rel = INFINITY;
        gc.worst = name + " (shape mismatch)";
        return;
    }
    const double e = oracle::max_relative_error(analytic, numeric);
    gc.values += analytic.size();
    if (e >= gc.max_rel) {
        gc.max_rel = e;
        gc.worst = name;
    }
}

Padding any_padding(Xorshift64Star& rng) { return rng.below(2) ? Padding::Same : Padding::Valid; }

// Values bounded away from zero so no ReLU sits on its kink during a finite-difference probe.
Tensor64 away_from_zero(Shape s, std::uint64_t seed) {
    Tensor64 t = Tensor64::uniform(s, -1, 1, seed);
    for (double& v : t.data())
        if (std::abs(v) < 0.05) v = v < 0 ? -0.5 : 0.5;
    return t;
}

Tensor64 numeric(const Tensor64& at, const std::function<double(const Tensor64&)>& f) {
    return oracle::numeric_gradient(at, f);
}

// Finite differences of `loss` with respect to every parameter of `m`.
void compare_params(GradCheck& gc, Model64& m, const rtcnn::Gradients<double>& g,
                    const std::function<double(const Model64&)>& loss) {
    for (auto& [key, p] : m.params()) {
        const Tensor64 keep = p;
        const Tensor64 num = numeric(keep, [&](const Tensor64& v) {
            p = v;
            return loss(m);
        });
        p = keep;
        compare(gc, g.params.at(key), num, key);
    }
}

std::string first_mismatch(const Tensor64& got, const Tensor64& want) {
    if (got.shape() != want.shape()) return "shape " + got.shape().str() + " vs " + want.shape().str();
    for (std::size_t i = 0; i < got.size(); ++i)
        if (got[i] != want[i]) {
            std::ostringstream os;
            os.precision(17);
            os << "element " << i << ": " << got[i] << " vs " << want[i];
            return os.str();
        }
    return {};
}

struct RandomConv {
    Shape input;
    ConvSpec spec;
};

RandomConv random_conv(std::uint64_t seed, bool depthwise, std::size_t max_kernel_steps, std::size_t max_channels) {
    Xorshift64Star rng(seed * 0x9E3779B97F4A7C15ULL + (depthwise ? 17 : 3));
    ConvSpec spec;
    spec.kernel = 1 + 2 * rng.below(max_kernel_steps);
    spec.in_channels = 1 + rng.below(max_channels);
    spec.out_channels = depthwise ? spec.in_channels : 1 + rng.below(max_channels);
    spec.stride = 1 + rng.below(2);
    spec.padding = any_padding(rng);
    spec.has_bias = !depthwise && rng.below(2);
    const std::size_t n = 1 + rng.below(2);
    return {{n, spec.in_channels, spec.kernel + rng.below(4), spec.kernel + rng.below(4)}, spec};
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Layer gradients

GradCheck conv2d_grad(std::uint64_t seed) {
    const RandomConv c = random_conv(seed, false, 2, 3);
    const Tensor64 x = Tensor64::uniform(c.input, -1, 1, seed);
    const Tensor64 w = Tensor64::uniform({c.spec.out_channels, c.spec.in_channels, c.spec.kernel, c.spec.kernel}, -1, 1,
                                         seed + 1);
    const Tensor64 b = Tensor64::uniform(Shape::vector(c.spec.out_channels), -1, 1, seed + 2);
    const Tensor64* bias = c.spec.has_bias ? &b : nullptr;

    const auto fwd = rtcnn::conv2d_forward(x, w, bias, c.spec);
    const Tensor64 r = Tensor64::uniform(fwd.y.shape(), -1, 1, seed + 3);
    const auto g = rtcnn::conv2d_backward(fwd.cache, r);

    GradCheck gc;
    compare(gc, g.d_input, numeric(x, [&](const Tensor64& v) {
        return oracle::project(rtcnn::conv2d_forward(v, w, bias, c.spec).y, r);
    }), "conv d_input");
    compare(gc, g.d_weights, numeric(w, [&](const Tensor64& v) {
        return oracle::project(rtcnn::conv2d_forward(x, v, bias, c.spec).y, r);
    }), "conv d_weights");
    if (bias)
        compare(gc, *g.d_bias, numeric(b, [&](const Tensor64& v) {
            return oracle::project(rtcnn::conv2d_forward(x, w, &v, c.spec).y, r);
        }), "conv d_bias");
    return gc;
}

GradCheck depthwise_grad(std::uint64_t seed) {
    const RandomConv c = random_conv(seed, true, 3, 3);
    const Tensor64 x = Tensor64::uniform(c.input, -1, 1, seed);
    const Tensor64 w = Tensor64::uniform({c.spec.in_channels, 1, c.spec.kernel, c.spec.kernel}, -1, 1, seed + 1);
    const auto fwd = rtcnn::depthwise_conv_forward(x, w, c.spec);
    const Tensor64 r = Tensor64::uniform(fwd.y.shape(), -1, 1, seed + 3);
    const auto g = rtcnn::depthwise_backward(fwd.cache, r);

    GradCheck gc;
    compare(gc, g.d_input, numeric(x, [&](const Tensor64& v) {
        return oracle::project(rtcnn::depthwise_conv_forward(v, w, c.spec).y, r);
    }), "depthwise d_input");
    compare(gc, g.d_weights, numeric(w, [&](const Tensor64& v) {
        return oracle::project(rtcnn::depthwise_conv_forward(x, v, c.spec).y, r);
    }), "depthwise d_weights");
    return gc;
}

GradCheck pointwise_grad(std::uint64_t seed) {
    Xorshift64Star rng(seed);
    const std::size_t m = 1 + rng.below(5), n = 1 + rng.below(5);
    const ConvSpec spec{1, m, n, 1, Padding::Same, false};
    const Tensor64 x = Tensor64::uniform({1 + rng.below(2), m, 1 + rng.below(4), 1 + rng.below(4)}, -1, 1, seed);
    const Tensor64 w = Tensor64::uniform({n, m, 1, 1}, -1, 1, seed + 1);
    const auto fwd = rtcnn::pointwise_conv_forward(x, w, spec);
    const Tensor64 r = Tensor64::uniform(fwd.y.shape(), -1, 1, seed + 3);
    const auto g = rtcnn::pointwise_backward(fwd.cache, r);

    GradCheck gc;
    compare(gc, g.d_input, numeric(x, [&](const Tensor64& v) {
        return oracle::project(rtcnn::pointwise_conv_forward(v, w, spec).y, r);
    }), "pointwise d_input");
    compare(gc, g.d_weights, numeric(w, [&](const Tensor64& v) {
        return oracle::project(rtcnn::pointwise_conv_forward(x, v, spec).y, r);
    }), "pointwise d_weights");
    return gc;
}

GradCheck separable_grad(std::uint64_t seed) {
    RandomConv c = random_conv(seed, false, 3, 3);
    c.spec.has_bias = false;
    const Tensor64 x = Tensor64::uniform(c.input, -1, 1, seed);
    const Tensor64 dw = Tensor64::uniform({c.spec.in_channels, 1, c.spec.kernel, c.spec.kernel}, -1, 1, seed + 1);
    const Tensor64 pw = Tensor64::uniform({c.spec.out_channels, c.spec.in_channels, 1, 1}, -1, 1, seed + 2);
    const auto fwd = rtcnn::separable_conv_forward(x, dw, pw, c.spec);
    const Tensor64 r = Tensor64::uniform(fwd.y.shape(), -1, 1, seed + 3);
    const auto g = rtcnn::separable_backward(fwd.cache, r);

    GradCheck gc;
    compare(gc, g.d_input, numeric(x, [&](const Tensor64& v) {
        return oracle::project(rtcnn::separable_conv_forward(v, dw, pw, c.spec).y, r);
    }), "separable d_input");
    compare(gc, g.d_depthwise, numeric(dw, [&](const Tensor64& v) {
        return oracle::project(rtcnn::separable_conv_forward(x, v, pw, c.spec).y, r);
    }), "separable d_depthwise");
    compare(gc, g.d_pointwise, numeric(pw, [&](const Tensor64& v) {
        return oracle::project(rtcnn::separable_conv_forward(x, dw, v, c.spec).y, r);
    }), "separable d_pointwise");
    return gc;
}

namespace {

GradCheck batchnorm_grad(std::uint64_t seed, rtcnn::Mode mode) {
    Xorshift64Star rng(seed);
    const Shape s{2 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3)};
    const Tensor64 x = Tensor64::uniform(s, -2, 2, seed);
    auto state = rtcnn::BatchNormState<double>::identity(s.c);
    state.gamma = Tensor64::uniform(Shape::vector(s.c), 0.5, 1.5, seed + 1);
    state.beta = Tensor64::uniform(Shape::vector(s.c), -1, 1, seed + 2);
    state.running_mean = Tensor64::uniform(Shape::vector(s.c), -0.5, 0.5, seed + 4);
    state.running_var = Tensor64::uniform(Shape::vector(s.c), 0.5, 2, seed + 5);

    auto run = [&](const Tensor64& in, const Tensor64& gamma, const Tensor64& beta) {
        auto st = state;  // train mode folds batch statistics into the copy, not the original
        st.gamma = gamma;
        st.beta = beta;
        return rtcnn::batchnorm_forward(in, st, mode);
    };
    const auto fwd = run(x, state.gamma, state.beta);
    const Tensor64 r = Tensor64::uniform(s, -1, 1, seed + 3);
    const auto g = rtcnn::batchnorm_backward(fwd.cache, r);

    GradCheck gc;
    const std::string tag = mode == rtcnn::Mode::Train ? "bn(train) " : "bn(infer) ";
    compare(gc, g.d_input,
            numeric(x, [&](const Tensor64& v) { return oracle::project(run(v, state.gamma, state.beta).y, r); }),
            tag + "d_input");
    compare(gc, g.d_gamma,
            numeric(state.gamma, [&](const Tensor64& v) { return oracle::project(run(x, v, state.beta).y, r); }),
            tag + "d_gamma");
    compare(gc, g.d_beta,
            numeric(state.beta, [&](const Tensor64& v) { return oracle::project(run(x, state.gamma, v).y, r); }),
            tag + "d_beta");
    return gc;
}

}  // namespace

GradCheck batchnorm_train_grad(std::uint64_t seed) { return batchnorm_grad(seed, rtcnn::Mode::Train); }
GradCheck batchnorm_infer_grad(std::uint64_t seed) { return batchnorm_grad(seed, rtcnn::Mode::Infer); }

GradCheck relu_grad(std::uint64_t seed) {
    const Tensor64 x = away_from_zero({2, 3, 3, 3}, seed);
    const auto fwd = rtcnn::relu_forward(x);
    const Tensor64 r = Tensor64::uniform(x.shape(), -1, 1, seed + 1);
    GradCheck gc;
    compare(gc, rtcnn::relu_backward(&fwd.cache, r, rtcnn::ReluMode::Standard),
            numeric(x, [&](const Tensor64& v) { return oracle::project(rtcnn::relu_forward(v).y, r); }), "relu");
    return gc;
}

GradCheck maxpool_grad(std::uint64_t seed) {
    Xorshift64Star rng(seed);
    const rtcnn::PoolSpec spec{1 + rng.below(3), 1 + rng.below(2), any_padding(rng)};
    const Tensor64 x =
        Tensor64::uniform({1 + rng.below(2), 1 + rng.below(3), spec.window + rng.below(5), spec.window + rng.below(5)},
                          -1, 1, seed);
    const auto fwd = rtcnn::maxpool_forward(x, spec);
    const Tensor64 r = Tensor64::uniform(fwd.y.shape(), -1, 1, seed + 1);
    GradCheck gc;
    compare(gc, rtcnn::maxpool_backward(fwd.cache, r),
            numeric(x, [&](const Tensor64& v) { return oracle::project(rtcnn::maxpool_forward(v, spec).y, r); }),
            "maxpool");
    return gc;
}

GradCheck gap_grad(std::uint64_t seed) {
    Xorshift64Star rng(seed);
    const Tensor64 x = Tensor64::uniform({1 + rng.below(2), 1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(5)}, -1, 1,
                                         seed);
    const auto fwd = rtcnn::gap_forward(x);
    const Tensor64 r = Tensor64::uniform(fwd.y.shape(), -1, 1, seed + 1);
    GradCheck gc;
    compare(gc, rtcnn::gap_backward(fwd.cache, r),
            numeric(x, [&](const Tensor64& v) { return oracle::project(rtcnn::gap_forward(v).y, r); }), "gap");
    return gc;
}

GradCheck softmax_grad(std::uint64_t seed) {
    Xorshift64Star rng(seed);
    const Tensor64 z = Tensor64::uniform({1 + rng.below(3), 2 + rng.below(6), 1, 1}, -3, 3, seed);
    const auto fwd = rtcnn::softmax_forward(z);
    const Tensor64 r = Tensor64::uniform(z.shape(), -1, 1, seed + 1);
    GradCheck gc;
    compare(gc, rtcnn::softmax_backward(fwd.cache, r),
            numeric(z, [&](const Tensor64& v) { return oracle::project(rtcnn::softmax_forward(v).y, r); }),
            "softmax");
    return gc;
}

GradCheck cross_entropy_grad(std::uint64_t seed) {
    Xorshift64Star rng(seed);
    const std::size_t n = 1 + rng.below(4), k = 2 + rng.below(6);
    const Tensor64 z = Tensor64::uniform({n, k, 1, 1}, -3, 3, seed);
    std::vector<std::size_t> labels(n);
    for (auto& l : labels) l = rng.below(k);
    const auto ce = rtcnn::cross_entropy(rtcnn::softmax_forward(z).y, labels);
    GradCheck gc;
    compare(gc, ce.d_logits, numeric(z, [&](const Tensor64& v) {
        return rtcnn::cross_entropy(rtcnn::softmax_forward(v).y, labels).loss;
    }), "softmax+cross-entropy d_logits");
    return gc;
}

// ---------------------------------------------------------------------------------------------
// Whole networks

GradCheck toy_network_grad(std::uint64_t seed) {
    Xorshift64Star rng(seed);
    const std::size_t in_c = 1 + rng.below(2), classes = 2 + rng.below(3), side = 4 + rng.below(3);
    Model64 m(rtcnn::ModelMetadata{"toy", {1, in_c, side, side}, rtcnn::default_class_names(classes), 1});
    std::size_t x = m.add_conv("conv", 0, {3, in_c, classes, 1, Padding::Same, true});
    x = m.add_relu("relu", x);
    x = m.add_gap("gap", x);
    m.add_softmax("softmax", x);
    m.initialize(seed);
    for (auto& [k, p] : m.params()) p = Tensor64::uniform(p.shape(), -1, 1, seed + k.size());

    const Tensor64 input = away_from_zero({1 + rng.below(2), in_c, side, side}, seed + 7);
    const auto trace = rtcnn::forward(m, input, rtcnn::Mode::Train, true);
    const Tensor64 r = Tensor64::uniform(trace.output().shape(), -1, 1, seed + 8);
    const auto g = rtcnn::backward(m, trace, r);

    auto loss = [&](const Model64& mm, const Tensor64& in) { return oracle::project(rtcnn::predict(mm, in), r); };
    GradCheck gc;
    compare_params(gc, m, g, [&](const Model64& mm) { return loss(mm, input); });
    compare(gc, g.input, numeric(input, [&](const Tensor64& v) { return loss(m, v); }), "toy d_input");
    return gc;
}

GradCheck residual_network_grad(std::uint64_t seed) {
    Xorshift64Star rng(seed);
    const std::size_t c = 2 + rng.below(2);
    Model64 m(rtcnn::ModelMetadata{"residual-toy", {1, 2, 6, 6}, rtcnn::default_class_names(3), 1});
    std::size_t x = m.add_separable("sep1", 0, {3, 2, c, 1, Padding::Same, false});
    x = m.add_batchnorm("bn1", x);
    x = m.add_relu("relu1", x);
    x = m.add_separable("sep2", x, {3, c, c, 1, Padding::Same, false});
    x = m.add_batchnorm("bn2", x);
    x = m.add_maxpool("pool", x, {3, 2, Padding::Same});
    std::size_t skip = m.add_conv("proj", 0, {1, 2, c, 2, Padding::Same, false});
    skip = m.add_batchnorm("proj_bn", skip);
    x = m.add_add("add", x, skip);
    x = m.add_conv("head", x, {3, c, 3, 1, Padding::Same, true});
    x = m.add_gap("gap", x);
    m.add_softmax("softmax", x);
    m.initialize(seed);
    for (auto& [k, p] : m.params())
        if (k.find("gamma") == std::string::npos) p = Tensor64::uniform(p.shape(), -1, 1, seed * 31 + k.size());

    const Tensor64 input = Tensor64::uniform({2, 2, 6, 6}, -1, 1, seed + 5);
    const auto trace = rtcnn::forward(m, input, rtcnn::Mode::Train, true);
    const Tensor64 r = Tensor64::uniform(trace.output().shape(), -1, 1, seed + 6);
    const auto g = rtcnn::backward(m, trace, r);

    // Train-mode outputs depend only on batch statistics, so repeated probes see the same function.
    auto loss = [&](const Model64& mm, const Tensor64& in) {
        Model64 copy = mm;
        return oracle::project(rtcnn::forward(copy, in, rtcnn::Mode::Train, false).output(), r);
    };
    GradCheck gc;
    compare_params(gc, m, g, [&](const Model64& mm) { return loss(mm, input); });
    compare(gc, g.input, numeric(input, [&](const Tensor64& v) { return loss(m, v); }), "residual d_input");
    return gc;
}

GradCheck saliency_standard_grad(std::uint64_t seed) {
    Xorshift64Star rng(seed);
    const std::size_t side = 5 + rng.below(4);
    Model64 m(rtcnn::ModelMetadata{"saliency-toy", {1, 1, side, side}, rtcnn::default_class_names(3), 1});
    std::size_t x = m.add_conv("conv1", 0, {3, 1, 4, 1, Padding::Same, true});
    x = m.add_relu("relu1", x);
    x = m.add_conv("conv2", x, {3, 4, 3, 1 + rng.below(2), Padding::Same, true});
    x = m.add_relu("relu2", x);
    x = m.add_gap("gap", x);
    m.add_softmax("softmax", x);
    m.initialize(seed);
    for (auto& [k, p] : m.params()) p = Tensor64::uniform(p.shape(), -1, 1, seed * 13 + k.size());

    const Tensor64 input = Tensor64::uniform({1, 1, side, side}, -1, 1, seed + 3);
    const auto trace = rtcnn::forward(m, input, true);
    const rtcnn::Target target = rtcnn::select_target(m, trace);
    const auto map = rtcnn::reconstruct(m, trace, target, rtcnn::ReluMode::Standard);

    GradCheck gc;
    compare(gc, map.R, numeric(input, [&](const Tensor64& v) {
        const auto t = rtcnn::forward(m, v);
        return t.outputs[target.node](0, target.at.c, target.at.y, target.at.x);
    }), "saliency(standard) vs d activation / d input");
    return gc;
}

// ---------------------------------------------------------------------------------------------
// Oracle equivalence

std::string conv2d_oracle(std::uint64_t seed) {
    const RandomConv c = random_conv(seed, false, 3, 5);
    const Tensor64 x = Tensor64::uniform(c.input, -1, 1, seed);
    const Tensor64 w = Tensor64::uniform({c.spec.out_channels, c.spec.in_channels, c.spec.kernel, c.spec.kernel}, -1, 1,
                                         seed + 1);
    const Tensor64 b = Tensor64::uniform(Shape::vector(c.spec.out_channels), -1, 1, seed + 2);
    const Tensor64* bias = c.spec.has_bias ? &b : nullptr;
    return first_mismatch(rtcnn::conv2d_forward(x, w, bias, c.spec).y,
                          oracle::conv2d(x, w, bias, c.spec.stride, c.spec.padding));
}

std::string depthwise_oracle(std::uint64_t seed) {
    const RandomConv c = random_conv(seed, true, 4, 6);
    const Tensor64 x = Tensor64::uniform(c.input, -1, 1, seed);
    const Tensor64 w = Tensor64::uniform({c.spec.in_channels, 1, c.spec.kernel, c.spec.kernel}, -1, 1, seed + 1);
    return first_mismatch(rtcnn::depthwise_conv_forward(x, w, c.spec).y,
                          oracle::depthwise(x, w, c.spec.stride, c.spec.padding));
}

std::string pointwise_oracle(std::uint64_t seed) {
    Xorshift64Star rng(seed);
    const std::size_t m = 1 + rng.below(16), n = 1 + rng.below(16);
    const Tensor64 x = Tensor64::uniform({1 + rng.below(3), m, 1 + rng.below(7), 1 + rng.below(7)}, -1, 1, seed);
    const Tensor64 w = Tensor64::uniform({n, m, 1, 1}, -1, 1, seed + 1);
    return first_mismatch(rtcnn::pointwise_conv_forward(x, w, {1, m, n, 1, Padding::Same, false}).y,
                          oracle::pointwise(x, w));
}

std::string separable_oracle(std::uint64_t seed) {
    RandomConv c = random_conv(seed, false, 4, 8);
    c.spec.has_bias = false;
    const Tensor64 x = Tensor64::uniform(c.input, -1, 1, seed);
    const Tensor64 dw = Tensor64::uniform({c.spec.in_channels, 1, c.spec.kernel, c.spec.kernel}, -1, 1, seed + 1);
    const Tensor64 pw = Tensor64::uniform({c.spec.out_channels, c.spec.in_channels, 1, 1}, -1, 1, seed + 2);
    return first_mismatch(rtcnn::separable_conv_forward(x, dw, pw, c.spec).y,
                          oracle::pointwise(oracle::depthwise(x, dw, c.spec.stride, c.spec.padding), pw));
}

std::string maxpool_oracle(std::uint64_t seed) {
    Xorshift64Star rng(seed);
    const rtcnn::PoolSpec spec{1 + rng.below(3), 1 + rng.below(2), any_padding(rng)};
    Tensor64 x({1 + rng.below(2), 1 + rng.below(4), spec.window + rng.below(8), spec.window + rng.below(8)});
    for (double& v : x.data()) v = static_cast<double>(rng.below(6)) - 2.5;  // ties on purpose
    const auto got = rtcnn::maxpool_forward(x, spec);
    const auto want = oracle::maxpool(x, spec.window, spec.stride, spec.padding);
    std::string err = first_mismatch(got.y, want.y);
    if (!err.empty()) return err;
    for (std::size_t i = 0; i < want.argmax.size(); ++i)
        if (got.cache.argmax[i] != want.argmax[i]) return "argmax of output " + std::to_string(i);
    return {};
}

std::string separable_composition(std::uint64_t seed) {
    RandomConv c = random_conv(seed, false, 4, 8);
    c.spec.has_bias = false;
    const Tensor64 x = Tensor64::uniform(c.input, -1, 1, seed);
    const Tensor64 dw = Tensor64::uniform({c.spec.in_channels, 1, c.spec.kernel, c.spec.kernel}, -1, 1, seed + 1);
    const Tensor64 pw = Tensor64::uniform({c.spec.out_channels, c.spec.in_channels, 1, 1}, -1, 1, seed + 2);
    ConvSpec dspec = c.spec;
    dspec.out_channels = c.spec.in_channels;
    const auto d = rtcnn::depthwise_conv_forward(x, dw, dspec);
    const auto p =
        rtcnn::pointwise_conv_forward(d.y, pw, {1, c.spec.in_channels, c.spec.out_channels, 1, Padding::Same, false});
    return first_mismatch(rtcnn::separable_conv_forward(x, dw, pw, c.spec).y, p.y);
}

}  // namespace checks
