#include "rtcnn/saliency.hpp"

#include <algorithm>
#include <cmath>

namespace rtcnn {

namespace {

bool is_convolution(NodeKind k) {
    return k == NodeKind::Conv || k == NodeKind::Depthwise || k == NodeKind::Pointwise || k == NodeKind::Separable;
}

}  // namespace

template <typename T>
std::string default_saliency_layer(const BasicModel<T>& m) {
    const auto& nodes = m.nodes();
    std::size_t i = nodes.size();
    while (i > 0 && nodes[i - 1].kind != NodeKind::GlobalAvgPool) --i;
    if (i == 0) i = nodes.size();  // no pooling head: search the whole graph
    for (std::size_t j = i; j > 0; --j)
        if (is_convolution(nodes[j - 1].kind)) return nodes[j - 1].name;
    throw ConfigError("model has no convolution layer to visualize");
}

template <typename T>
Target select_target(const BasicModel<T>& m, const Trace<T>& trace, const std::string& layer) {
    const std::string name = layer.empty() ? default_saliency_layer(m) : layer;
    const std::size_t node = m.node_index(name);
    if (trace.outputs.size() != m.nodes().size()) throw ContractError("trace does not belong to this model");
    const BasicTensor<T>& out = trace.outputs[node];
    if (out.shape().n != 1) throw ContractError("saliency works on a single sample, got batch " + out.shape().str());
    Target t;
    t.layer = name;
    t.node = node;
    t.at = argmax_flat(out);
    t.activation = static_cast<double>(out(0, t.at.c, t.at.y, t.at.x));
    return t;
}

template <typename T>
SaliencyMap<T> reconstruct(const BasicModel<T>& m, const Trace<T>& trace, const Target& target, ReluMode mode,
                           const std::type_identity_t<ReluObserver<T>>& observe) {
    if (target.node >= m.nodes().size() || target.node >= trace.outputs.size())
        throw ContractError("target node out of range");
    const Shape& s = trace.outputs[target.node].shape();
    if (s.n != 1) throw ContractError("saliency works on a single sample, got batch " + s.str());
    if (target.at.c >= s.c || target.at.y >= s.h || target.at.x >= s.w)
        throw ContractError("target (" + std::to_string(target.at.c) + "," + std::to_string(target.at.y) + "," +
                            std::to_string(target.at.x) + ") outside layer output " + s.str());

    BasicTensor<T> seed(s);
    seed(0, target.at.c, target.at.y, target.at.x) = T(1);

    BackwardOptions<T> opts;
    opts.relu_mode = mode;
    opts.param_grads = false;
    opts.input_grad = true;
    opts.on_relu_grad = observe;
    Gradients<T> g = backward_from(m, trace, target.node, seed, opts);
    return {std::move(g.input), target, mode};
}

template <typename T>
SaliencyMap<T> saliency(const BasicModel<T>& m, const BasicTensor<T>& x, ReluMode mode, const std::string& layer) {
    const Trace<T> trace = forward(m, x, true);
    return reconstruct(m, trace, select_target(m, trace, layer), mode);
}

template <typename T>
Image render(const SaliencyMap<T>& map) {
    const Shape& s = map.R.shape();
    std::vector<double> plane(s.plane(), 0.0);
    for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t i = 0; i < plane.size(); ++i) plane[i] += static_cast<double>(map.R[c * s.plane() + i]);
    for (double& v : plane) v /= static_cast<double>(s.c);

    const auto [lo_it, hi_it] = std::minmax_element(plane.begin(), plane.end());
    const double lo = *lo_it;
    const double hi = *hi_it;
    Image img(s.w, s.h, 1, 128);
    if (!(hi > lo)) return img;
    for (std::size_t i = 0; i < plane.size(); ++i)
        img.pixels[i] = static_cast<std::uint8_t>(std::lround((plane[i] - lo) / (hi - lo) * 255.0));
    return img;
}

Image montage(const Image& left, const Image& right) {
    if (left.channels != 1 || right.channels != 1) throw DataError("montage needs single-channel images");
    Image out(left.width + right.width, std::max(left.height, right.height));
    for (std::size_t y = 0; y < left.height; ++y)
        for (std::size_t x = 0; x < left.width; ++x) out.at(x, y) = left.at(x, y);
    for (std::size_t y = 0; y < right.height; ++y)
        for (std::size_t x = 0; x < right.width; ++x) out.at(left.width + x, y) = right.at(x, y);
    return out;
}

template <typename T>
void write_saliency(const SaliencyMap<T>& map, const std::filesystem::path& path) {
    write_pgm(render(map), path);
}

const char* to_string(ReluMode mode) {
    switch (mode) {
        case ReluMode::Standard: return "standard";
        case ReluMode::Deconvnet: return "deconvnet";
        case ReluMode::Guided: return "guided";
    }
    return "?";
}

ReluMode relu_mode_from_string(const std::string& s) {
    if (s == "standard") return ReluMode::Standard;
    if (s == "deconvnet") return ReluMode::Deconvnet;
    if (s == "guided") return ReluMode::Guided;
    throw ConfigError("unknown relu mode '" + s + "' (standard, deconvnet, guided)");
}

#define RTCNN_INSTANTIATE(T)                                                                                    \
    template std::string default_saliency_layer(const BasicModel<T>&);                                         \
    template Target select_target(const BasicModel<T>&, const Trace<T>&, const std::string&);                   \
    template SaliencyMap<T> reconstruct(const BasicModel<T>&, const Trace<T>&, const Target&, ReluMode,         \
                                        const std::type_identity_t<ReluObserver<T>>&);                       \
    template SaliencyMap<T> saliency(const BasicModel<T>&, const BasicTensor<T>&, ReluMode, const std::string&); \
    template Image render(const SaliencyMap<T>&);                                                               \
    template void write_saliency(const SaliencyMap<T>&, const std::filesystem::path&);

RTCNN_INSTANTIATE(float)
RTCNN_INSTANTIATE(double)

#undef RTCNN_INSTANTIATE

}  // namespace rtcnn
