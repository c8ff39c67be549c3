#include "rtcnn/model.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

namespace rtcnn {
namespace {

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename C, typename T>
const C& cache_as(const Trace<T>& trace, std::size_t i, const Node& node) {
    if (i >= trace.caches.size() || !std::holds_alternative<C>(trace.caches[i]))
        throw ContractError("missing or mismatched forward cache for node '" + node.name + "'");
    return std::get<C>(trace.caches[i]);
}

template <typename T>
void add_into(BasicTensor<T>& acc, const BasicTensor<T>& d) {
    if (acc.shape() != d.shape()) throw ShapeError("gradient shape mismatch during accumulation");
    T* a = acc.ptr();
    const T* b = d.ptr();
    for (std::size_t i = 0; i < acc.size(); ++i) a[i] += b[i];
}

}  // namespace

const char* to_string(NodeKind kind) {
    switch (kind) {
        case NodeKind::Input: return "input";
        case NodeKind::Conv: return "conv";
        case NodeKind::Depthwise: return "depthwise";
        case NodeKind::Pointwise: return "pointwise";
        case NodeKind::Separable: return "separable";
        case NodeKind::BatchNorm: return "batchnorm";
        case NodeKind::Relu: return "relu";
        case NodeKind::MaxPool: return "maxpool";
        case NodeKind::GlobalAvgPool: return "gap";
        case NodeKind::Softmax: return "softmax";
        case NodeKind::Add: return "add";
    }
    return "?";
}

NodeKind node_kind_from_string(const std::string& s) {
    for (NodeKind k : {NodeKind::Input, NodeKind::Conv, NodeKind::Depthwise, NodeKind::Pointwise, NodeKind::Separable,
                       NodeKind::BatchNorm, NodeKind::Relu, NodeKind::MaxPool, NodeKind::GlobalAvgPool,
                       NodeKind::Softmax, NodeKind::Add})
        if (s == to_string(k)) return k;
    throw ConfigError("unknown node kind '" + s + "'");
}

// ---------------------------------------------------------------------------------------------
// Graph construction

template <typename T>
BasicModel<T>::BasicModel(ModelMetadata meta) : meta_(std::move(meta)) {
    meta_.input.n = 1;
    meta_.input.size();  // validates
    Node input;
    input.kind = NodeKind::Input;
    input.name = "input";
    input.output = meta_.input;
    nodes_.push_back(std::move(input));
}

template <typename T>
const Node& BasicModel<T>::producer(std::size_t index) const {
    if (index >= nodes_.size()) throw ConfigError("node input index " + std::to_string(index) + " does not exist yet");
    return nodes_[index];
}

template <typename T>
std::size_t BasicModel<T>::push(Node node) {
    if (nodes_.empty()) throw ConfigError("model has no input node; construct it with metadata first");
    if (node.name.empty() || node.name.find('/') != std::string::npos)
        throw ConfigError("node names must be non-empty and must not contain '/'");
    for (const auto& n : nodes_)
        if (n.name == node.name) throw ConfigError("duplicate node name '" + node.name + "'");
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
}

template <typename T>
void BasicModel<T>::add_param(const std::string& key, Shape shape) {
    params_[key] = BasicTensor<T>(shape);
}

template <typename T>
void BasicModel<T>::add_buffer(const std::string& key, Shape shape, T fill) {
    buffers_[key] = BasicTensor<T>::constant(shape, fill);
}

template <typename T>
std::size_t BasicModel<T>::add_conv(const std::string& name, std::size_t from, const ConvSpec& spec) {
    spec.validate();
    const Shape in = producer(from).output;
    if (in.c != spec.in_channels) throw ShapeError("conv '" + name + "': input has " + std::to_string(in.c) + " channels");
    const Extent eh = output_extent(in.h, spec.kernel, spec.stride, spec.padding);
    const Extent ew = output_extent(in.w, spec.kernel, spec.stride, spec.padding);
    Node node{NodeKind::Conv, name, {from}, spec, {}, 1e-3, 0.99, {1, spec.out_channels, eh.out, ew.out}};
    const std::size_t idx = push(std::move(node));
    add_param(name + "/weight", {spec.out_channels, spec.in_channels, spec.kernel, spec.kernel});
    if (spec.has_bias) add_param(name + "/bias", Shape::vector(spec.out_channels));
    return idx;
}

template <typename T>
std::size_t BasicModel<T>::add_depthwise(const std::string& name, std::size_t from, const ConvSpec& spec) {
    spec.validate();
    const Shape in = producer(from).output;
    if (in.c != spec.in_channels || spec.out_channels != spec.in_channels)
        throw ShapeError("depthwise '" + name + "': channels must equal the input channel count");
    const Extent eh = output_extent(in.h, spec.kernel, spec.stride, spec.padding);
    const Extent ew = output_extent(in.w, spec.kernel, spec.stride, spec.padding);
    Node node{NodeKind::Depthwise, name, {from}, spec, {}, 1e-3, 0.99, {1, in.c, eh.out, ew.out}};
    const std::size_t idx = push(std::move(node));
    add_param(name + "/weight", {spec.in_channels, 1, spec.kernel, spec.kernel});
    return idx;
}

template <typename T>
std::size_t BasicModel<T>::add_pointwise(const std::string& name, std::size_t from, const ConvSpec& spec) {
    if (spec.kernel != 1 || spec.stride != 1) throw ContractError("pointwise '" + name + "' requires kernel 1, stride 1");
    spec.validate();
    const Shape in = producer(from).output;
    if (in.c != spec.in_channels) throw ShapeError("pointwise '" + name + "': input channel mismatch");
    Node node{NodeKind::Pointwise, name, {from}, spec, {}, 1e-3, 0.99, {1, spec.out_channels, in.h, in.w}};
    const std::size_t idx = push(std::move(node));
    add_param(name + "/weight", {spec.out_channels, spec.in_channels, 1, 1});
    return idx;
}

template <typename T>
std::size_t BasicModel<T>::add_separable(const std::string& name, std::size_t from, const ConvSpec& spec) {
    spec.validate();
    const Shape in = producer(from).output;
    if (in.c != spec.in_channels) throw ShapeError("separable '" + name + "': input channel mismatch");
    const Extent eh = output_extent(in.h, spec.kernel, spec.stride, spec.padding);
    const Extent ew = output_extent(in.w, spec.kernel, spec.stride, spec.padding);
    Node node{NodeKind::Separable, name, {from}, spec, {}, 1e-3, 0.99, {1, spec.out_channels, eh.out, ew.out}};
    const std::size_t idx = push(std::move(node));
    add_param(name + "/depthwise", {spec.in_channels, 1, spec.kernel, spec.kernel});
    add_param(name + "/pointwise", {spec.out_channels, spec.in_channels, 1, 1});
    return idx;
}

template <typename T>
std::size_t BasicModel<T>::add_batchnorm(const std::string& name, std::size_t from, double epsilon, double momentum) {
    if (!(epsilon > 0)) throw ConfigError("batch norm epsilon must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("batch norm momentum must lie in [0, 1)");
    const Shape in = producer(from).output;
    Node node{NodeKind::BatchNorm, name, {from}, {}, {}, epsilon, momentum, in};
    const std::size_t idx = push(std::move(node));
    const Shape v = Shape::vector(in.c);
    params_[name + "/gamma"] = BasicTensor<T>::constant(v, T(1));
    add_param(name + "/beta", v);
    add_buffer(name + "/running_mean", v, T(0));
    add_buffer(name + "/running_var", v, T(1));
    return idx;
}

template <typename T>
std::size_t BasicModel<T>::add_relu(const std::string& name, std::size_t from) {
    Node node;
    node.kind = NodeKind::Relu;
    node.name = name;
    node.inputs = {from};
    node.output = producer(from).output;
    return push(std::move(node));
}

template <typename T>
std::size_t BasicModel<T>::add_maxpool(const std::string& name, std::size_t from, const PoolSpec& spec) {
    const Shape in = producer(from).output;
    const Extent eh = output_extent(in.h, spec.window, spec.stride, spec.padding);
    const Extent ew = output_extent(in.w, spec.window, spec.stride, spec.padding);
    Node node;
    node.kind = NodeKind::MaxPool;
    node.name = name;
    node.inputs = {from};
    node.pool = spec;
    node.output = {1, in.c, eh.out, ew.out};
    return push(std::move(node));
}

template <typename T>
std::size_t BasicModel<T>::add_gap(const std::string& name, std::size_t from) {
    Node node;
    node.kind = NodeKind::GlobalAvgPool;
    node.name = name;
    node.inputs = {from};
    node.output = Shape::vector(producer(from).output.c);
    return push(std::move(node));
}

template <typename T>
std::size_t BasicModel<T>::add_softmax(const std::string& name, std::size_t from) {
    Node node;
    node.kind = NodeKind::Softmax;
    node.name = name;
    node.inputs = {from};
    node.output = producer(from).output;
    return push(std::move(node));
}

template <typename T>
std::size_t BasicModel<T>::add_add(const std::string& name, std::size_t main, std::size_t skip) {
    const Shape a = producer(main).output;
    const Shape b = producer(skip).output;
    if (a != b) throw ShapeError("add '" + name + "': branch shapes differ " + a.str() + " vs " + b.str());
    Node node;
    node.kind = NodeKind::Add;
    node.name = name;
    node.inputs = {main, skip};
    node.output = a;
    return push(std::move(node));
}

template <typename T>
std::size_t BasicModel<T>::add_node(const Node& node) {
    const auto need = [&](std::size_t count) {
        if (node.inputs.size() != count) throw ConfigError("node '" + node.name + "' has the wrong number of inputs");
    };
    switch (node.kind) {
        case NodeKind::Input: throw ConfigError("a model has exactly one input node");
        case NodeKind::Conv: need(1); return add_conv(node.name, node.inputs[0], node.conv);
        case NodeKind::Depthwise: need(1); return add_depthwise(node.name, node.inputs[0], node.conv);
        case NodeKind::Pointwise: need(1); return add_pointwise(node.name, node.inputs[0], node.conv);
        case NodeKind::Separable: need(1); return add_separable(node.name, node.inputs[0], node.conv);
        case NodeKind::BatchNorm:
            need(1);
            return add_batchnorm(node.name, node.inputs[0], node.bn_epsilon, node.bn_momentum);
        case NodeKind::Relu: need(1); return add_relu(node.name, node.inputs[0]);
        case NodeKind::MaxPool: need(1); return add_maxpool(node.name, node.inputs[0], node.pool);
        case NodeKind::GlobalAvgPool: need(1); return add_gap(node.name, node.inputs[0]);
        case NodeKind::Softmax: need(1); return add_softmax(node.name, node.inputs[0]);
        case NodeKind::Add: need(2); return add_add(node.name, node.inputs[0], node.inputs[1]);
    }
    throw ConfigError("unknown node kind");
}

template <typename T>
void BasicModel<T>::initialize(std::uint64_t seed) {
    std::vector<std::string> per_channel_keys;
    for (const Node& node : nodes_) {
        if (node.kind == NodeKind::Depthwise) per_channel_keys.push_back(node.name + "/weight");
        if (node.kind == NodeKind::Separable) per_channel_keys.push_back(node.name + "/depthwise");
    }
    for (auto& [key, tensor] : params_) {
        if (ends_with(key, "/bias") || ends_with(key, "/beta")) {
            tensor.fill(T(0));
        } else if (ends_with(key, "/gamma")) {
            tensor.fill(T(1));
        } else {
            const Shape s = tensor.shape();
            const bool per_channel =
                std::find(per_channel_keys.begin(), per_channel_keys.end(), key) != per_channel_keys.end();
            const double fan_in = per_channel ? double(s.h * s.w) : double(s.c * s.h * s.w);
            const double fan_out = per_channel ? double(s.h * s.w) : double(s.n * s.h * s.w);
            const double limit = std::sqrt(6.0 / (fan_in + fan_out));
            tensor = BasicTensor<T>::uniform(s, -limit, limit, fnv1a(key) ^ (seed * 0x9E3779B97F4A7C15ULL));
        }
    }
    for (auto& [key, tensor] : buffers_) tensor.fill(ends_with(key, "/running_var") ? T(1) : T(0));
}

template <typename T>
const BasicTensor<T>& BasicModel<T>::param(const std::string& key) const {
    auto it = params_.find(key);
    if (it == params_.end()) throw ConfigError("no parameter named '" + key + "'");
    return it->second;
}

template <typename T>
BasicTensor<T>& BasicModel<T>::param(const std::string& key) {
    auto it = params_.find(key);
    if (it == params_.end()) throw ConfigError("no parameter named '" + key + "'");
    return it->second;
}

template <typename T>
std::size_t BasicModel<T>::node_index(const std::string& name) const {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
        if (nodes_[i].name == name) return i;
    throw ConfigError("no layer named '" + name + "'");
}

// ---------------------------------------------------------------------------------------------
// Builders

std::vector<std::string> default_class_names(std::size_t num_classes) {
    if (num_classes == 7) return {"angry", "disgust", "fear", "happy", "sad", "surprise", "neutral"};
    if (num_classes == 2) return {"woman", "man"};
    std::vector<std::string> names;
    for (std::size_t i = 0; i < num_classes; ++i) names.push_back("class" + std::to_string(i));
    return names;
}

namespace {

void check_builder_args(std::size_t num_classes, std::size_t input_hw) {
    if (num_classes < 2) throw ConfigError("num_classes must be at least 2, got " + std::to_string(num_classes));
    if (input_hw < 32) throw ConfigError("input size must be at least 32, got " + std::to_string(input_hw));
}

}  // namespace

template <typename T>
BasicModel<T> build_mini_xception(std::size_t num_classes, std::size_t input_hw, std::uint64_t seed) {
    check_builder_args(num_classes, input_hw);
    BasicModel<T> m(ModelMetadata{kMiniXception, {1, 1, input_hw, input_hw}, default_class_names(num_classes), 1});

    std::size_t x = 0;
    std::size_t channels = 1;
    for (int i = 1; i <= 2; ++i) {
        const std::string id = std::to_string(i);
        x = m.add_conv("stem_conv" + id, x, {3, channels, 8, 1, Padding::Valid, false});
        x = m.add_batchnorm("stem_bn" + id, x);
        x = m.add_relu("stem_relu" + id, x);
        channels = 8;
    }

    int block = 0;
    for (std::size_t filters : {16, 32, 64, 128}) {
        const std::string p = "block" + std::to_string(++block) + "_";
        std::size_t skip = m.add_conv(p + "skip_conv", x, {1, channels, filters, 2, Padding::Same, false});
        skip = m.add_batchnorm(p + "skip_bn", skip);

        std::size_t y = m.add_separable(p + "sepconv1", x, {5, channels, filters, 1, Padding::Same, false});
        y = m.add_batchnorm(p + "bn1", y);
        y = m.add_relu(p + "relu1", y);
        y = m.add_separable(p + "sepconv2", y, {5, filters, filters, 1, Padding::Same, false});
        y = m.add_batchnorm(p + "bn2", y);
        y = m.add_maxpool(p + "pool", y, {3, 2, Padding::Same});
        x = m.add_add(p + "add", y, skip);
        channels = filters;
    }

    x = m.add_conv("class_conv", x, {3, channels, num_classes, 1, Padding::Same, true});
    x = m.add_gap("gap", x);
    m.add_softmax("softmax", x);
    m.initialize(seed);
    return m;
}

template <typename T>
BasicModel<T> build_sequential_fully_cnn(std::size_t num_classes, std::size_t input_hw, std::uint64_t seed) {
    check_builder_args(num_classes, input_hw);
    BasicModel<T> m(
        ModelMetadata{kSequentialFullyCnn, {1, 1, input_hw, input_hw}, default_class_names(num_classes), 1});

    constexpr std::size_t kernels[] = {7, 7, 5, 5, 3, 3, 3, 3};
    constexpr std::size_t filters[] = {16, 32, 32, 64, 64, 128, 128, 256};
    std::size_t x = 0;
    std::size_t channels = 1;
    for (std::size_t i = 0; i < 8; ++i) {
        const std::string id = std::to_string(i + 1);
        x = m.add_conv("conv" + id, x, {kernels[i], channels, filters[i], 1, Padding::Same, false});
        x = m.add_batchnorm("bn" + id, x);
        x = m.add_relu("relu" + id, x);
        if (i % 2 == 1) x = m.add_maxpool("pool" + std::to_string(i / 2 + 1), x, {3, 2, Padding::Same});
        channels = filters[i];
    }
    x = m.add_conv("conv9", x, {3, channels, num_classes, 1, Padding::Same, true});
    x = m.add_gap("gap", x);
    m.add_softmax("softmax", x);
    m.initialize(seed);
    return m;
}

template <typename T>
BasicModel<T> build_architecture(const std::string& arch, std::size_t num_classes, std::size_t input_hw,
                                 std::uint64_t seed) {
    if (arch == kMiniXception) return build_mini_xception<T>(num_classes, input_hw, seed);
    if (arch == kSequentialFullyCnn || arch == "sequential") return build_sequential_fully_cnn<T>(num_classes, input_hw, seed);
    throw ConfigError("unknown architecture '" + arch + "'");
}

template <typename T>
std::size_t count_parameters(const BasicModel<T>& m) {
    std::size_t total = 0;
    for (const auto& [key, tensor] : m.params()) total += tensor.size();
    return total;
}

template <typename T>
std::vector<LayerSummary> summarize(const BasicModel<T>& m) {
    std::vector<LayerSummary> out;
    for (const Node& node : m.nodes()) {
        LayerSummary s{node.name, node.kind, node.output, 0, 0};
        const std::string prefix = node.name + "/";
        for (auto it = m.params().lower_bound(prefix); it != m.params().end() && it->first.starts_with(prefix); ++it)
            s.params += it->second.size();
        switch (node.kind) {
            case NodeKind::Conv: s.macs = mult_count(ConvKind::Standard, node.conv, node.output.h, node.output.w); break;
            case NodeKind::Depthwise:
                s.macs = mult_count(ConvKind::Depthwise, node.conv, node.output.h, node.output.w);
                break;
            case NodeKind::Pointwise:
                s.macs = mult_count(ConvKind::Pointwise, node.conv, node.output.h, node.output.w);
                break;
            case NodeKind::Separable:
                s.macs = mult_count(ConvKind::Separable, node.conv, node.output.h, node.output.w);
                break;
            default: break;
        }
        out.push_back(std::move(s));
    }
    return out;
}

template <typename T>
std::vector<std::string> fully_connected_nodes(const BasicModel<T>& m) {
    std::vector<std::string> out;
    for (const Node& node : m.nodes()) {
        const bool parametric = node.kind == NodeKind::Conv || node.kind == NodeKind::Depthwise ||
                                node.kind == NodeKind::Pointwise || node.kind == NodeKind::Separable;
        if (!parametric) continue;
        const Shape in = m.nodes()[node.inputs[0]].output;
        if (in.h == 1 && in.w == 1) out.push_back(node.name);
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Execution

namespace {

template <typename T>
BatchNormState<T> bn_state(const BasicModel<T>& m, const Node& node) {
    const std::string& n = node.name;
    return {m.param(n + "/gamma"), m.param(n + "/beta"), m.buffers().at(n + "/running_mean"),
            m.buffers().at(n + "/running_var"), node.bn_epsilon, node.bn_momentum};
}

template <typename T>
Trace<T> run_forward(const BasicModel<T>& m, BasicModel<T>* mut, const BasicTensor<T>& x, Mode mode, bool keep) {
    const Shape want = m.metadata().input;
    const Shape got = x.shape();
    if (got.c != want.c || got.h != want.h || got.w != want.w)
        throw ShapeError("model expects per-sample input (" + std::to_string(want.c) + "," + std::to_string(want.h) +
                         "," + std::to_string(want.w) + "), got " + got.str());

    const auto& nodes = m.nodes();
    Trace<T> t;
    t.mode = mode;
    t.outputs.resize(nodes.size());
    if (keep) t.caches.resize(nodes.size());
    t.outputs[0] = x;

    const auto store = [&](std::size_t i, auto&& fwd) {
        t.outputs[i] = std::move(fwd.y);
        if (keep) t.caches[i] = std::move(fwd.cache);
    };

    for (std::size_t i = 1; i < nodes.size(); ++i) {
        const Node& node = nodes[i];
        const BasicTensor<T>& in = t.outputs[node.inputs[0]];
        const std::string& name = node.name;
        switch (node.kind) {
            case NodeKind::Input: break;
            case NodeKind::Conv:
                store(i, conv2d_forward(in, m.param(name + "/weight"),
                                        node.conv.has_bias ? &m.param(name + "/bias") : nullptr, node.conv));
                break;
            case NodeKind::Depthwise: store(i, depthwise_conv_forward(in, m.param(name + "/weight"), node.conv)); break;
            case NodeKind::Pointwise: store(i, pointwise_conv_forward(in, m.param(name + "/weight"), node.conv)); break;
            case NodeKind::Separable:
                store(i, separable_conv_forward(in, m.param(name + "/depthwise"), m.param(name + "/pointwise"), node.conv));
                break;
            case NodeKind::BatchNorm: {
                BatchNormState<T> state = bn_state(m, node);
                if (mode == Mode::Train) {
                    if (!mut) throw ContractError("train-mode forward needs a mutable model");
                    store(i, batchnorm_forward(in, state, Mode::Train));
                    mut->buffers()[name + "/running_mean"] = std::move(state.running_mean);
                    mut->buffers()[name + "/running_var"] = std::move(state.running_var);
                } else {
                    store(i, batchnorm_forward(in, static_cast<const BatchNormState<T>&>(state)));
                }
                break;
            }
            case NodeKind::Relu: store(i, relu_forward(in)); break;
            case NodeKind::MaxPool: store(i, maxpool_forward(in, node.pool)); break;
            case NodeKind::GlobalAvgPool: store(i, gap_forward(in)); break;
            case NodeKind::Softmax: store(i, softmax_forward(in)); break;
            case NodeKind::Add: t.outputs[i] = residual_add(in, t.outputs[node.inputs[1]]); break;
        }
    }
    return t;
}

}  // namespace

template <typename T>
Trace<T> forward(BasicModel<T>& m, const BasicTensor<T>& x, Mode mode, bool keep_cache) {
    return run_forward(m, &m, x, mode, keep_cache);
}

template <typename T>
Trace<T> forward(const BasicModel<T>& m, const BasicTensor<T>& x, bool keep_cache) {
    return run_forward<T>(m, nullptr, x, Mode::Infer, keep_cache);
}

template <typename T>
BasicTensor<T> predict(const BasicModel<T>& m, const BasicTensor<T>& x) {
    return forward(m, x, false).outputs.back();
}

template <typename T>
Gradients<T> backward_from(const BasicModel<T>& m, const Trace<T>& trace, std::size_t from, const BasicTensor<T>& seed,
                           const BackwardOptions<T>& opts) {
    const auto& nodes = m.nodes();
    if (!trace.has_caches()) throw ContractError("backward needs a forward pass run with keep_cache");
    if (trace.outputs.size() != nodes.size()) throw ContractError("trace does not belong to this model");
    if (from >= nodes.size()) throw ContractError("backward start node out of range");
    if (seed.shape() != trace.outputs[from].shape())
        throw ShapeError("backward seed " + seed.shape().str() + " does not match node output " +
                         trace.outputs[from].shape().str());

    Gradients<T> g;
    if (opts.param_grads)
        for (const auto& [key, tensor] : m.params()) g.params[key] = BasicTensor<T>(tensor.shape());

    std::vector<std::optional<BasicTensor<T>>> grads(nodes.size());
    grads[from] = seed;
    const auto accumulate = [&](std::size_t idx, BasicTensor<T> d) {
        if (!grads[idx]) grads[idx] = std::move(d);
        else add_into(*grads[idx], d);
    };

    for (std::size_t i = from; i >= 1; --i) {
        if (!grads[i]) continue;
        const Node& node = nodes[i];
        const BasicTensor<T> gi = std::move(*grads[i]);
        grads[i].reset();
        const std::string& name = node.name;
        const bool want_input = opts.input_grad || node.inputs[0] != 0;
        const GradRequest req{want_input, opts.param_grads};

        switch (node.kind) {
            case NodeKind::Input: break;
            case NodeKind::Conv: {
                auto r = conv2d_backward(cache_as<ConvCache<T>>(trace, i, node), gi, req);
                if (opts.param_grads) {
                    g.params[name + "/weight"] = std::move(r.d_weights);
                    if (r.d_bias) g.params[name + "/bias"] = std::move(*r.d_bias);
                }
                if (want_input) accumulate(node.inputs[0], std::move(r.d_input));
                break;
            }
            case NodeKind::Depthwise: {
                auto r = depthwise_backward(cache_as<DepthwiseCache<T>>(trace, i, node), gi, req);
                if (opts.param_grads) g.params[name + "/weight"] = std::move(r.d_weights);
                if (want_input) accumulate(node.inputs[0], std::move(r.d_input));
                break;
            }
            case NodeKind::Pointwise: {
                auto r = pointwise_backward(cache_as<PointwiseCache<T>>(trace, i, node), gi, req);
                if (opts.param_grads) g.params[name + "/weight"] = std::move(r.d_weights);
                if (want_input) accumulate(node.inputs[0], std::move(r.d_input));
                break;
            }
            case NodeKind::Separable: {
                auto r = separable_backward(cache_as<SeparableCache<T>>(trace, i, node), gi, req);
                if (opts.param_grads) {
                    g.params[name + "/depthwise"] = std::move(r.d_depthwise);
                    g.params[name + "/pointwise"] = std::move(r.d_pointwise);
                }
                if (want_input) accumulate(node.inputs[0], std::move(r.d_input));
                break;
            }
            case NodeKind::BatchNorm: {
                auto r = batchnorm_backward(cache_as<BatchNormCache<T>>(trace, i, node), gi);
                if (opts.param_grads) {
                    g.params[name + "/gamma"] = std::move(r.d_gamma);
                    g.params[name + "/beta"] = std::move(r.d_beta);
                }
                accumulate(node.inputs[0], std::move(r.d_input));
                break;
            }
            case NodeKind::Relu: {
                auto r = relu_backward(&cache_as<ReluCache<T>>(trace, i, node), gi, opts.relu_mode);
                if (opts.on_relu_grad) opts.on_relu_grad(node, r);
                accumulate(node.inputs[0], std::move(r));
                break;
            }
            case NodeKind::MaxPool:
                accumulate(node.inputs[0], maxpool_backward(cache_as<PoolCache>(trace, i, node), gi));
                break;
            case NodeKind::GlobalAvgPool:
                accumulate(node.inputs[0], gap_backward(cache_as<GapCache>(trace, i, node), gi));
                break;
            case NodeKind::Softmax:
                accumulate(node.inputs[0], softmax_backward(cache_as<SoftmaxCache<T>>(trace, i, node), gi));
                break;
            case NodeKind::Add:
                accumulate(node.inputs[0], gi);
                accumulate(node.inputs[1], gi);
                break;
        }
    }
    if (opts.input_grad) g.input = grads[0] ? std::move(*grads[0]) : BasicTensor<T>(trace.outputs[0].shape());
    return g;
}

template <typename T>
Gradients<T> backward(const BasicModel<T>& m, const Trace<T>& trace, const BasicTensor<T>& d_probs,
                      const BackwardOptions<T>& opts) {
    return backward_from(m, trace, m.output_node(), d_probs, opts);
}

template <typename T>
std::size_t logits_node(const BasicModel<T>& m) {
    const Node& last = m.nodes().back();
    if (last.kind != NodeKind::Softmax) throw ConfigError("model does not end in a softmax");
    return last.inputs[0];
}

#define RTCNN_INSTANTIATE(T)                                                                                       \
    template class BasicModel<T>;                                                                                  \
    template BasicModel<T> build_mini_xception<T>(std::size_t, std::size_t, std::uint64_t);                        \
    template BasicModel<T> build_sequential_fully_cnn<T>(std::size_t, std::size_t, std::uint64_t);                 \
    template BasicModel<T> build_architecture<T>(const std::string&, std::size_t, std::size_t, std::uint64_t);     \
    template std::size_t count_parameters(const BasicModel<T>&);                                                   \
    template std::vector<LayerSummary> summarize(const BasicModel<T>&);                                            \
    template std::vector<std::string> fully_connected_nodes(const BasicModel<T>&);                                 \
    template Trace<T> forward(BasicModel<T>&, const BasicTensor<T>&, Mode, bool);                                  \
    template Trace<T> forward(const BasicModel<T>&, const BasicTensor<T>&, bool);                                  \
    template BasicTensor<T> predict(const BasicModel<T>&, const BasicTensor<T>&);                                  \
    template Gradients<T> backward_from(const BasicModel<T>&, const Trace<T>&, std::size_t, const BasicTensor<T>&, \
                                        const BackwardOptions<T>&);                                                \
    template Gradients<T> backward(const BasicModel<T>&, const Trace<T>&, const BasicTensor<T>&,                   \
                                   const BackwardOptions<T>&);                                                     \
    template std::size_t logits_node(const BasicModel<T>&);

RTCNN_INSTANTIATE(float)
RTCNN_INSTANTIATE(double)

#undef RTCNN_INSTANTIATE

}  // namespace rtcnn
