#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <type_traits>

#include "rtcnn/data.hpp"
#include "rtcnn/model.hpp"

namespace rtcnn {

/// The neuron whose input-space gradient is reconstructed.
struct Target {
    std::string layer;
    std::size_t node = 0;
    Coord3 at;
    double activation = 0.0;
};

template <typename T>
struct SaliencyMap {
    BasicTensor<T> R;  // shaped like the input, (1, c, h, w)
    Target target;
    ReluMode mode = ReluMode::Guided;
};

/// Last convolution-type node upstream of the global average pool (the class-map layer).
template <typename T>
std::string default_saliency_layer(const BasicModel<T>& m);

/// Highest activation (first in row-major order on ties) in `layer`'s output for the single
/// sample in `trace`. An empty layer name selects default_saliency_layer(). Throws ConfigError for
/// an unknown layer and ContractError when the trace does not hold exactly one sample.
template <typename T>
Target select_target(const BasicModel<T>& m, const Trace<T>& trace, const std::string& layer = {});

template <typename T>
using ReluObserver = std::function<void(const Node&, const BasicTensor<T>&)>;

/// Seeds 1 at the target element and propagates it back to the input, passing gradients through
/// every ReLU according to `mode`. `observe`, if set, sees each ReLU's backward output.
/// The trace must come from forward(..., keep_cache = true). Throws ContractError for an
/// out-of-bounds target or a trace without caches.
template <typename T>
SaliencyMap<T> reconstruct(const BasicModel<T>& m, const Trace<T>& trace, const Target& target,
                           ReluMode mode = ReluMode::Guided,
                           const std::type_identity_t<ReluObserver<T>>& observe = {});

/// Forward with caches, target selection and reconstruction in one call. x is (1, c, h, w).
template <typename T>
SaliencyMap<T> saliency(const BasicModel<T>& m, const BasicTensor<T>& x, ReluMode mode = ReluMode::Guided,
                        const std::string& layer = {});

/// Min-max scaling of R to 0..255 (channels averaged first); a constant map renders as 128.
template <typename T>
Image render(const SaliencyMap<T>& map);

/// Input (rendered from [-1, 1]) and saliency side by side.
Image montage(const Image& left, const Image& right);

template <typename T>
void write_saliency(const SaliencyMap<T>& map, const std::filesystem::path& path);

const char* to_string(ReluMode mode);
/// "standard", "deconvnet" or "guided"; throws ConfigError otherwise.
ReluMode relu_mode_from_string(const std::string& s);

}  // namespace rtcnn
