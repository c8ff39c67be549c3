#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "rtcnn/layers.hpp"

namespace rtcnn {

enum class NodeKind {
    Input,
    Conv,
    Depthwise,
    Pointwise,
    Separable,
    BatchNorm,
    Relu,
    MaxPool,
    GlobalAvgPool,
    Softmax,
    Add,
};

const char* to_string(NodeKind kind);
NodeKind node_kind_from_string(const std::string& s);

struct Node {
    NodeKind kind = NodeKind::Input;
    std::string name;
    std::vector<std::size_t> inputs;  // producer node indices, all lower than this node's index
    ConvSpec conv;                    // Conv / Depthwise / Pointwise / Separable
    PoolSpec pool;                    // MaxPool
    double bn_epsilon = 1e-3;         // BatchNorm
    double bn_momentum = 0.99;
    Shape output;                     // per-sample output shape (n == 1)
};

struct ModelMetadata {
    std::string architecture;
    Shape input;  // per-sample, n == 1
    std::vector<std::string> class_names;
    std::uint16_t format_version = 1;

    friend bool operator==(const ModelMetadata&, const ModelMetadata&) = default;
};

/// Layer graph in topological order. Node 0 is the input; the last node is the output.
/// Trainable tensors live in params() under "<node>/<tensor>"; batch-norm running statistics
/// live in buffers() and are not counted as parameters.
template <typename T>
class BasicModel {
public:
    using Store = std::map<std::string, BasicTensor<T>>;

    BasicModel() = default;
    explicit BasicModel(ModelMetadata meta);

    // Graph construction. Each returns the new node's index.
    std::size_t add_conv(const std::string& name, std::size_t from, const ConvSpec& spec);
    std::size_t add_depthwise(const std::string& name, std::size_t from, const ConvSpec& spec);
    std::size_t add_pointwise(const std::string& name, std::size_t from, const ConvSpec& spec);
    std::size_t add_separable(const std::string& name, std::size_t from, const ConvSpec& spec);
    std::size_t add_batchnorm(const std::string& name, std::size_t from, double epsilon = 1e-3, double momentum = 0.99);
    std::size_t add_relu(const std::string& name, std::size_t from);
    std::size_t add_maxpool(const std::string& name, std::size_t from, const PoolSpec& spec);
    std::size_t add_gap(const std::string& name, std::size_t from);
    std::size_t add_softmax(const std::string& name, std::size_t from);
    std::size_t add_add(const std::string& name, std::size_t main, std::size_t skip);
    /// Re-adds a node read from a weight file; parameters are created zero-filled.
    std::size_t add_node(const Node& node);

    /// Glorot-uniform weights from a seeded xorshift64* stream per tensor; zero biases;
    /// batch-norm gamma 1, beta 0, running mean 0, running variance 1.
    void initialize(std::uint64_t seed);

    const std::vector<Node>& nodes() const { return nodes_; }
    const ModelMetadata& metadata() const { return meta_; }
    ModelMetadata& metadata() { return meta_; }

    Store& params() { return params_; }
    const Store& params() const { return params_; }
    Store& buffers() { return buffers_; }
    const Store& buffers() const { return buffers_; }

    const BasicTensor<T>& param(const std::string& key) const;
    BasicTensor<T>& param(const std::string& key);

    /// Throws ConfigError for an unknown name.
    std::size_t node_index(const std::string& name) const;
    std::size_t output_node() const { return nodes_.size() - 1; }
    std::size_t num_classes() const { return nodes_.back().output.c; }

    template <typename U>
    BasicModel<U> cast() const {
        BasicModel<U> out(meta_);
        for (std::size_t i = 1; i < nodes_.size(); ++i) out.add_node(nodes_[i]);
        for (const auto& [k, v] : params_) out.params()[k] = v.template cast<U>();
        for (const auto& [k, v] : buffers_) out.buffers()[k] = v.template cast<U>();
        return out;
    }

private:
    std::size_t push(Node node);
    void add_param(const std::string& key, Shape shape);
    void add_buffer(const std::string& key, Shape shape, T fill);
    const Node& producer(std::size_t index) const;

    ModelMetadata meta_;
    std::vector<Node> nodes_;
    Store params_;
    Store buffers_;
};

using Model = BasicModel<float>;
using Model64 = BasicModel<double>;

// ---------------------------------------------------------------------------------------------
// Reference architectures

inline constexpr const char* kMiniXception = "mini-xception";
inline constexpr const char* kSequentialFullyCnn = "sequential-fully-cnn";

/// FER-2013 order for 7 classes, {woman, man} for 2, "class<i>" otherwise.
std::vector<std::string> default_class_names(std::size_t num_classes);

/// Two 3x3 valid convolutions (8, 8) with BN+ReLU, four residual blocks of 5x5 depthwise-separable
/// convolutions with (16, 32, 64, 128) filters, then a 3x3 class-map convolution, GAP and softmax.
template <typename T = float>
BasicModel<T> build_mini_xception(std::size_t num_classes, std::size_t input_hw, std::uint64_t seed = 1);

/// Nine same-padded convolutions with kernels (7,7,5,5,3,3,3,3,3) and filters
/// (16,32,32,64,64,128,128,256,K); BN+ReLU after the first eight, 3x3/2 max-pool after each pair,
/// then GAP and softmax.
template <typename T = float>
BasicModel<T> build_sequential_fully_cnn(std::size_t num_classes, std::size_t input_hw, std::uint64_t seed = 1);

/// Builds either reference architecture by id ("mini-xception" or "sequential"/"sequential-fully-cnn").
template <typename T = float>
BasicModel<T> build_architecture(const std::string& arch, std::size_t num_classes, std::size_t input_hw,
                                 std::uint64_t seed = 1);

template <typename T>
std::size_t count_parameters(const BasicModel<T>& m);

struct LayerSummary {
    std::string name;
    NodeKind kind;
    Shape output;
    std::size_t params = 0;
    std::uint64_t macs = 0;  // per sample
};

template <typename T>
std::vector<LayerSummary> summarize(const BasicModel<T>& m);

/// Names of parametric nodes that act as dense layers, i.e. apply learned weights to an input whose
/// spatial extent has already collapsed to 1x1. Both reference builders yield an empty list.
template <typename T>
std::vector<std::string> fully_connected_nodes(const BasicModel<T>& m);

// ---------------------------------------------------------------------------------------------
// Execution

template <typename T>
using NodeCache = std::variant<std::monostate, ConvCache<T>, DepthwiseCache<T>, PointwiseCache<T>, SeparableCache<T>,
                               BatchNormCache<T>, ReluCache<T>, PoolCache, GapCache, SoftmaxCache<T>>;

template <typename T>
struct Trace {
    std::vector<BasicTensor<T>> outputs;  // one per node
    std::vector<NodeCache<T>> caches;     // empty unless keep_cache was set
    Mode mode = Mode::Infer;

    bool has_caches() const { return !caches.empty(); }
    const BasicTensor<T>& output() const { return outputs.back(); }
};

/// Train mode uses batch statistics and updates the model's running statistics.
template <typename T>
Trace<T> forward(BasicModel<T>& m, const BasicTensor<T>& x, Mode mode, bool keep_cache);

/// Inference on a shared model; never mutates it.
template <typename T>
Trace<T> forward(const BasicModel<T>& m, const BasicTensor<T>& x, bool keep_cache = false);

template <typename T>
BasicTensor<T> predict(const BasicModel<T>& m, const BasicTensor<T>& x);

template <typename T>
struct BackwardOptions {
    ReluMode relu_mode = ReluMode::Standard;
    bool param_grads = true;
    bool input_grad = true;
    /// Called with every ReLU node's backward output.
    std::function<void(const Node&, const BasicTensor<T>&)> on_relu_grad;
};

template <typename T>
struct Gradients {
    typename BasicModel<T>::Store params;  // same keys as the model's params(); empty if not requested
    BasicTensor<T> input;
};

/// Back-propagates `seed` (shaped like node `from`'s output) to every earlier node.
template <typename T>
Gradients<T> backward_from(const BasicModel<T>& m, const Trace<T>& trace, std::size_t from, const BasicTensor<T>& seed,
                           const BackwardOptions<T>& opts = {});

/// Gradient of a loss given dL/d(probabilities) at the softmax output.
template <typename T>
Gradients<T> backward(const BasicModel<T>& m, const Trace<T>& trace, const BasicTensor<T>& d_probs,
                      const BackwardOptions<T>& opts = {});

/// Node whose output feeds the final softmax (the logits).
template <typename T>
std::size_t logits_node(const BasicModel<T>& m);

}  // namespace rtcnn
