#include "rtcnn/layers.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "gemm.hpp"
#include "rtcnn/parallel.hpp"

namespace rtcnn {
namespace {

using std::ptrdiff_t;
using std::size_t;

/// Splits `rows` into at most `parts` blocks whose sizes are multiples of 4 (except the last).
struct RowBlocks {
    size_t rows;
    size_t block;
    size_t count;

    RowBlocks(size_t rows_, size_t parts) : rows(rows_) {
        parts = std::max<size_t>(1, std::min(parts, (rows + 3) / 4));
        block = ((rows + parts - 1) / parts + 3) / 4 * 4;
        count = (rows + block - 1) / block;
    }
    size_t begin(size_t i) const { return i * block; }
    size_t size(size_t i) const { return std::min(block, rows - i * block); }
};

/// How many row blocks each sample should be split into so that small batches still use every worker.
size_t row_parts_per_sample(size_t batch) {
    const size_t threads = thread_count();
    return batch >= threads ? 1 : (threads + batch - 1) / batch;
}

struct Geometry {
    size_t in_h, in_w, out_h, out_w;
    size_t pad_t, pad_l;
    size_t kernel, stride;
};

Geometry conv_geometry(const Shape& in, size_t kernel, size_t stride, Padding padding) {
    const Extent eh = output_extent(in.h, kernel, stride, padding);
    const Extent ew = output_extent(in.w, kernel, stride, padding);
    return {in.h, in.w, eh.out, ew.out, eh.pad_before, ew.pad_before, kernel, stride};
}

/// Input index along one axis for output position o and kernel tap k; negative or >= extent when padded.
inline ptrdiff_t tap(size_t o, size_t k, size_t stride, size_t pad) {
    return static_cast<ptrdiff_t>(o * stride + k) - static_cast<ptrdiff_t>(pad);
}

/// Output range [lo, hi) whose tap k lands inside [0, extent).
inline std::pair<size_t, size_t> valid_range(size_t out, size_t k, size_t stride, size_t pad, size_t extent) {
    // o*stride + k - pad >= 0  and  o*stride + k - pad < extent
    size_t lo = 0;
    if (k < pad) lo = (pad - k + stride - 1) / stride;
    const ptrdiff_t top = static_cast<ptrdiff_t>(extent) + static_cast<ptrdiff_t>(pad) - static_cast<ptrdiff_t>(k);
    size_t hi = top <= 0 ? 0 : std::min(out, (static_cast<size_t>(top) + stride - 1) / stride);
    return {lo, std::max(lo, hi)};
}

std::vector<std::pair<size_t, size_t>> tap_ranges(size_t out, size_t kernel, size_t stride, size_t pad, size_t extent) {
    std::vector<std::pair<size_t, size_t>> r(kernel);
    for (size_t k = 0; k < kernel; ++k) r[k] = valid_range(out, k, stride, pad, extent);
    return r;
}

/// col (M*D*D x OH*OW); row index (m*D + ky)*D + kx.
template <typename T>
void im2col(const T* x, size_t channels, const Geometry& g, T* col) {
    const size_t d = g.kernel;
    const size_t p = g.out_h * g.out_w;
    for (size_t m = 0; m < channels; ++m) {
        const T* plane = x + m * g.in_h * g.in_w;
        for (size_t ky = 0; ky < d; ++ky)
            for (size_t kx = 0; kx < d; ++kx) {
                T* dst = col + ((m * d + ky) * d + kx) * p;
                const auto [xlo, xhi] = valid_range(g.out_w, kx, g.stride, g.pad_l, g.in_w);
                for (size_t oy = 0; oy < g.out_h; ++oy) {
                    T* row = dst + oy * g.out_w;
                    const ptrdiff_t iy = tap(oy, ky, g.stride, g.pad_t);
                    if (iy < 0 || iy >= static_cast<ptrdiff_t>(g.in_h)) {
                        std::fill(row, row + g.out_w, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<size_t>(iy) * g.in_w;
                    std::fill(row, row + xlo, T(0));
                    for (size_t ox = xlo; ox < xhi; ++ox) row[ox] = src[ox * g.stride + kx - g.pad_l];
                    std::fill(row + xhi, row + g.out_w, T(0));
                }
            }
    }
}

/// Adds channel m's rows of col back into dx (inverse scatter of im2col).
template <typename T>
void col2im_channel(const T* col, size_t m, const Geometry& g, T* dx) {
    const size_t d = g.kernel;
    const size_t p = g.out_h * g.out_w;
    T* plane = dx + m * g.in_h * g.in_w;
    for (size_t ky = 0; ky < d; ++ky)
        for (size_t kx = 0; kx < d; ++kx) {
            const T* src = col + ((m * d + ky) * d + kx) * p;
            const auto [xlo, xhi] = valid_range(g.out_w, kx, g.stride, g.pad_l, g.in_w);
            for (size_t oy = 0; oy < g.out_h; ++oy) {
                const ptrdiff_t iy = tap(oy, ky, g.stride, g.pad_t);
                if (iy < 0 || iy >= static_cast<ptrdiff_t>(g.in_h)) continue;
                T* dst = plane + static_cast<size_t>(iy) * g.in_w;
                const T* row = src + oy * g.out_w;
                for (size_t ox = xlo; ox < xhi; ++ox) dst[ox * g.stride + kx - g.pad_l] += row[ox];
            }
        }
}

/// Dot product with eight partial sums; used only by backward passes.
template <typename T>
T dot(const T* a, const T* b, size_t n) {
    T acc[8] = {};
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
    T tail = 0;
    for (; i < n; ++i) tail += a[i] * b[i];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <typename T>
T sum(const T* a, size_t n) {
    T acc[8] = {};
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (size_t l = 0; l < 8; ++l) acc[l] += a[i + l];
    T tail = 0;
    for (; i < n; ++i) tail += a[i];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <typename T>
T squared_deviation(const T* a, size_t n, T mean) {
    T acc[8] = {};
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (size_t l = 0; l < 8; ++l) {
            const T d = a[i + l] - mean;
            acc[l] += d * d;
        }
    T tail = 0;
    for (; i < n; ++i) tail += (a[i] - mean) * (a[i] - mean);
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

void expect_shape(const Shape& got, const Shape& want, const char* what) {
    if (got != want) throw ShapeError(std::string(what) + ": expected " + want.str() + ", got " + got.str());
}

void expect_upstream(const Shape& got, const Shape& cached, const char* layer) {
    if (got != cached)
        throw ContractError(std::string(layer) + " backward: upstream " + got.str() + " does not match cached output " +
                            cached.str() + " (stale or missing cache)");
}

}  // namespace

Extent output_extent(size_t in, size_t kernel, size_t stride, Padding padding) {
    if (kernel == 0 || stride == 0) throw ShapeError("kernel and stride must be positive");
    if (padding == Padding::Valid) {
        if (kernel > in)
            throw ShapeError("kernel " + std::to_string(kernel) + " larger than input extent " + std::to_string(in));
        return {(in - kernel) / stride + 1, 0};
    }
    const size_t out = (in + stride - 1) / stride;
    const size_t needed = (out - 1) * stride + kernel;
    const size_t total = needed > in ? needed - in : 0;
    return {out, total / 2};
}

void ConvSpec::validate() const {
    if (kernel == 0 || kernel % 2 == 0) throw ShapeError("kernel size must be odd, got " + std::to_string(kernel));
    if (in_channels == 0 || out_channels == 0) throw ShapeError("channel counts must be positive");
    if (stride != 1 && stride != 2) throw ShapeError("stride must be 1 or 2");
}

template <typename T>
BatchNormState<T> BatchNormState<T>::identity(size_t channels, double epsilon, double momentum) {
    const Shape s = Shape::vector(channels);
    return {BasicTensor<T>::constant(s, T(1)), BasicTensor<T>::zeros(s), BasicTensor<T>::zeros(s),
            BasicTensor<T>::constant(s, T(1)), epsilon, momentum};
}

template <typename T>
void BatchNormState<T>::validate() const {
    const Shape s = Shape::vector(channels());
    if (gamma.shape() != s || beta.shape() != s || running_mean.shape() != s || running_var.shape() != s)
        throw ShapeError("batch norm vectors must all be " + s.str());
    if (!(epsilon > 0)) throw ConfigError("batch norm epsilon must be positive");
    for (T v : running_var.data())
        if (v < 0) throw ContractError("batch norm running variance must be non-negative");
}

// ---------------------------------------------------------------------------------------------
// Standard convolution

template <typename T>
Forward<T, ConvCache<T>> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& weights,
                                        const std::type_identity_t<BasicTensor<T>>* bias, const ConvSpec& spec) {
    spec.validate();
    const Shape in = x.shape();
    if (in.c != spec.in_channels)
        throw ShapeError("conv2d: input has " + std::to_string(in.c) + " channels, spec expects " +
                         std::to_string(spec.in_channels));
    expect_shape(weights.shape(), {spec.out_channels, spec.in_channels, spec.kernel, spec.kernel}, "conv2d weights");
    if (spec.has_bias != (bias != nullptr)) throw ContractError("conv2d: bias presence disagrees with spec.has_bias");
    if (bias) expect_shape(bias->shape(), Shape::vector(spec.out_channels), "conv2d bias");

    const Geometry g = conv_geometry(in, spec.kernel, spec.stride, spec.padding);
    const size_t k = spec.in_channels * spec.kernel * spec.kernel;
    const size_t p = g.out_h * g.out_w;
    const size_t n_out = spec.out_channels;
    BasicTensor<T> y({in.n, n_out, g.out_h, g.out_w});

    const RowBlocks blocks(n_out, row_parts_per_sample(in.n));
    parallel_for(in.n * blocks.count, [&](size_t task) {
        const size_t n = task / blocks.count;
        const size_t b = task % blocks.count;
        std::vector<T> col(k * p);
        im2col(x.sample(n), spec.in_channels, g, col.data());
        T* out = y.sample(n) + blocks.begin(b) * p;
        detail::gemm_acc(blocks.size(b), p, k, weights.ptr() + blocks.begin(b) * k, k, col.data(), p, out, p);
        if (bias)
            for (size_t i = 0; i < blocks.size(b); ++i) {
                const T bv = (*bias)[blocks.begin(b) + i];
                T* row = out + i * p;
                for (size_t j = 0; j < p; ++j) row[j] = row[j] + bv;
            }
    });
    const Shape out_shape = y.shape();
    return {std::move(y), ConvCache<T>{x, weights, spec, out_shape}};
}

template <typename T>
ConvGrads<T> conv2d_backward(const ConvCache<T>& cache, const BasicTensor<T>& upstream, GradRequest want) {
    expect_upstream(upstream.shape(), cache.output_shape, "conv2d");
    const ConvSpec& spec = cache.spec;
    const BasicTensor<T>& x = cache.input;
    const Shape in = x.shape();
    const Geometry g = conv_geometry(in, spec.kernel, spec.stride, spec.padding);
    const size_t k = spec.in_channels * spec.kernel * spec.kernel;
    const size_t p = g.out_h * g.out_w;
    const size_t n_out = spec.out_channels;

    ConvGrads<T> grads{BasicTensor<T>(in), BasicTensor<T>(cache.weights.shape()), std::nullopt};
    if (spec.has_bias) grads.d_bias = BasicTensor<T>(Shape::vector(n_out));

    std::vector<T> w_t;
    if (want.input) {
        w_t.resize(k * n_out);
        detail::transpose(n_out, k, cache.weights.ptr(), w_t.data());
    }
    std::vector<T> col(want.params ? k * p : 0);
    std::vector<T> col_t(want.params ? k * p : 0);
    std::vector<T> dcol(want.input ? k * p : 0);
    const size_t threads = thread_count();

    for (size_t n = 0; n < in.n; ++n) {
        const T* dy = upstream.sample(n);
        if (want.params) {
            im2col(x.sample(n), spec.in_channels, g, col.data());
            detail::transpose(k, p, col.data(), col_t.data());
            const RowBlocks blocks(n_out, threads);
            parallel_for(blocks.count, [&](size_t b) {
                detail::gemm_acc(blocks.size(b), k, p, dy + blocks.begin(b) * p, p, col_t.data(), k,
                                 grads.d_weights.ptr() + blocks.begin(b) * k, k);
            });
            if (grads.d_bias)
                for (size_t i = 0; i < n_out; ++i) (*grads.d_bias)[i] += sum(dy + i * p, p);
        }
        if (want.input) {
            std::fill(dcol.begin(), dcol.end(), T(0));
            const RowBlocks blocks(k, threads);
            parallel_for(blocks.count, [&](size_t b) {
                detail::gemm_acc(blocks.size(b), p, n_out, w_t.data() + blocks.begin(b) * n_out, n_out, dy, p,
                                 dcol.data() + blocks.begin(b) * p, p);
            });
            T* dx = grads.d_input.sample(n);
            parallel_for(spec.in_channels, [&](size_t m) { col2im_channel(dcol.data(), m, g, dx); });
        }
    }
    return grads;
}

// ---------------------------------------------------------------------------------------------
// Depthwise convolution

template <typename T>
Forward<T, DepthwiseCache<T>> depthwise_conv_forward(const BasicTensor<T>& x, const BasicTensor<T>& weights,
                                                     const ConvSpec& spec) {
    spec.validate();
    const Shape in = x.shape();
    if (in.c != spec.in_channels) throw ShapeError("depthwise: input channel count does not match spec");
    if (weights.shape().n != spec.in_channels)
        throw ShapeError("depthwise: expected one filter per input channel (" + std::to_string(spec.in_channels) +
                         "), got " + std::to_string(weights.shape().n));
    expect_shape(weights.shape(), {spec.in_channels, 1, spec.kernel, spec.kernel}, "depthwise weights");

    const Geometry g = conv_geometry(in, spec.kernel, spec.stride, spec.padding);
    const size_t d = spec.kernel;
    BasicTensor<T> y({in.n, in.c, g.out_h, g.out_w});

    const auto ranges = tap_ranges(g.out_w, d, g.stride, g.pad_l, g.in_w);
    parallel_for(in.n * in.c, [&](size_t task) {
        const size_t c = task % in.c;
        const T* src = x.ptr() + task * g.in_h * g.in_w;
        T* dst = y.ptr() + task * g.out_h * g.out_w;
        const T* w = weights.ptr() + c * d * d;
        // Each output accumulates its taps in (ky, kx) order, as in the plain definition.
        for (size_t oy = 0; oy < g.out_h; ++oy) {
            T* out_row = dst + oy * g.out_w;
            for (size_t ky = 0; ky < d; ++ky) {
                const ptrdiff_t iy = tap(oy, ky, g.stride, g.pad_t);
                if (iy < 0 || iy >= static_cast<ptrdiff_t>(g.in_h)) continue;
                const T* in_row = src + static_cast<size_t>(iy) * g.in_w;
                for (size_t kx = 0; kx < d; ++kx) {
                    const T wv = w[ky * d + kx];
                    const auto [lo, hi] = ranges[kx];
                    if (lo >= hi) continue;
                    if (g.stride == 1) {
                        const T* __restrict s = in_row + (lo + kx - g.pad_l);
                        T* __restrict o = out_row + lo;
                        for (size_t i = 0; i < hi - lo; ++i) o[i] += wv * s[i];
                    } else {
                        for (size_t ox = lo; ox < hi; ++ox) out_row[ox] += wv * in_row[ox * g.stride + kx - g.pad_l];
                    }
                }
            }
        }
    });
    const Shape out_shape = y.shape();
    return {std::move(y), DepthwiseCache<T>{x, weights, spec, out_shape}};
}

template <typename T>
ConvGrads<T> depthwise_backward(const DepthwiseCache<T>& cache, const BasicTensor<T>& upstream, GradRequest want) {
    expect_upstream(upstream.shape(), cache.output_shape, "depthwise");
    const BasicTensor<T>& x = cache.input;
    const Shape in = x.shape();
    const Geometry g = conv_geometry(in, cache.spec.kernel, cache.spec.stride, cache.spec.padding);
    const size_t d = cache.spec.kernel;
    ConvGrads<T> grads{BasicTensor<T>(in), BasicTensor<T>(cache.weights.shape()), std::nullopt};

    const auto ranges = tap_ranges(g.out_w, d, g.stride, g.pad_l, g.in_w);
    if (want.input) {
        parallel_for(in.n * in.c, [&](size_t task) {
            const size_t c = task % in.c;
            const T* dy = upstream.ptr() + task * g.out_h * g.out_w;
            T* dx = grads.d_input.ptr() + task * g.in_h * g.in_w;
            const T* w = cache.weights.ptr() + c * d * d;
            for (size_t oy = 0; oy < g.out_h; ++oy) {
                const T* dy_row = dy + oy * g.out_w;
                for (size_t ky = 0; ky < d; ++ky) {
                    const ptrdiff_t iy = tap(oy, ky, g.stride, g.pad_t);
                    if (iy < 0 || iy >= static_cast<ptrdiff_t>(g.in_h)) continue;
                    T* dx_row = dx + static_cast<size_t>(iy) * g.in_w;
                    for (size_t kx = 0; kx < d; ++kx) {
                        const T wv = w[ky * d + kx];
                        const auto [lo, hi] = ranges[kx];
                        if (lo >= hi) continue;
                        if (g.stride == 1) {
                            T* __restrict o = dx_row + (lo + kx - g.pad_l);
                            const T* __restrict s = dy_row + lo;
                            for (size_t i = 0; i < hi - lo; ++i) o[i] += wv * s[i];
                        } else {
                            for (size_t ox = lo; ox < hi; ++ox) dx_row[ox * g.stride + kx - g.pad_l] += wv * dy_row[ox];
                        }
                    }
                }
            }
        });
    }
    if (want.params) {
        parallel_for(in.c, [&](size_t c) {
            T* dw = grads.d_weights.ptr() + c * d * d;
            // One lane per output column; lanes are summed once per tap at the end.
            std::vector<T> lanes(d * d * g.out_w, T(0));
            for (size_t n = 0; n < in.n; ++n) {
                const size_t plane = n * in.c + c;
                const T* dy = upstream.ptr() + plane * g.out_h * g.out_w;
                const T* src = x.ptr() + plane * g.in_h * g.in_w;
                for (size_t oy = 0; oy < g.out_h; ++oy) {
                    const T* dy_row = dy + oy * g.out_w;
                    for (size_t ky = 0; ky < d; ++ky) {
                        const ptrdiff_t iy = tap(oy, ky, g.stride, g.pad_t);
                        if (iy < 0 || iy >= static_cast<ptrdiff_t>(g.in_h)) continue;
                        const T* in_row = src + static_cast<size_t>(iy) * g.in_w;
                        for (size_t kx = 0; kx < d; ++kx) {
                            const auto [lo, hi] = ranges[kx];
                            T* __restrict acc = lanes.data() + (ky * d + kx) * g.out_w;
                            if (g.stride == 1) {
                                const T* __restrict s = in_row + (lo + kx - g.pad_l);
                                const T* __restrict r = dy_row + lo;
                                for (size_t i = 0; i < hi - lo; ++i) acc[i] += r[i] * s[i];
                            } else {
                                for (size_t ox = lo; ox < hi; ++ox)
                                    acc[ox - lo] += dy_row[ox] * in_row[ox * g.stride + kx - g.pad_l];
                            }
                        }
                    }
                }
            }
            for (size_t t = 0; t < d * d; ++t) dw[t] += sum(lanes.data() + t * g.out_w, g.out_w);
        });
    }
    return grads;
}

// ---------------------------------------------------------------------------------------------
// Pointwise convolution

template <typename T>
Forward<T, PointwiseCache<T>> pointwise_conv_forward(const BasicTensor<T>& x, const BasicTensor<T>& weights,
                                                     const ConvSpec& spec) {
    if (spec.kernel != 1) throw ContractError("pointwise convolution requires kernel size 1");
    if (spec.stride != 1) throw ContractError("pointwise convolution requires stride 1");
    spec.validate();
    const Shape in = x.shape();
    if (in.c != spec.in_channels) throw ShapeError("pointwise: input channel count does not match spec");
    expect_shape(weights.shape(), {spec.out_channels, spec.in_channels, 1, 1}, "pointwise weights");

    const size_t p = in.plane();
    const size_t m = spec.in_channels;
    BasicTensor<T> y({in.n, spec.out_channels, in.h, in.w});
    const RowBlocks blocks(spec.out_channels, row_parts_per_sample(in.n));
    parallel_for(in.n * blocks.count, [&](size_t task) {
        const size_t n = task / blocks.count;
        const size_t b = task % blocks.count;
        detail::gemm_acc(blocks.size(b), p, m, weights.ptr() + blocks.begin(b) * m, m, x.sample(n), p,
                         y.sample(n) + blocks.begin(b) * p, p);
    });
    const Shape out_shape = y.shape();
    return {std::move(y), PointwiseCache<T>{x, weights, spec, out_shape}};
}

template <typename T>
ConvGrads<T> pointwise_backward(const PointwiseCache<T>& cache, const BasicTensor<T>& upstream, GradRequest want) {
    expect_upstream(upstream.shape(), cache.output_shape, "pointwise");
    const BasicTensor<T>& x = cache.input;
    const Shape in = x.shape();
    const size_t p = in.plane();
    const size_t m = cache.spec.in_channels;
    const size_t n_out = cache.spec.out_channels;
    ConvGrads<T> grads{BasicTensor<T>(in), BasicTensor<T>(cache.weights.shape()), std::nullopt};

    if (want.input) {
        std::vector<T> w_t(m * n_out);
        detail::transpose(n_out, m, cache.weights.ptr(), w_t.data());
        const RowBlocks blocks(m, row_parts_per_sample(in.n));
        parallel_for(in.n * blocks.count, [&](size_t task) {
            const size_t n = task / blocks.count;
            const size_t b = task % blocks.count;
            detail::gemm_acc(blocks.size(b), p, n_out, w_t.data() + blocks.begin(b) * n_out, n_out,
                             upstream.sample(n), p, grads.d_input.sample(n) + blocks.begin(b) * p, p);
        });
    }
    if (want.params) {
        std::vector<T> x_t(m * p);
        const RowBlocks blocks(n_out, thread_count());
        for (size_t n = 0; n < in.n; ++n) {
            detail::transpose(m, p, x.sample(n), x_t.data());
            parallel_for(blocks.count, [&](size_t b) {
                detail::gemm_acc(blocks.size(b), m, p, upstream.sample(n) + blocks.begin(b) * p, p, x_t.data(), m,
                                 grads.d_weights.ptr() + blocks.begin(b) * m, m);
            });
        }
    }
    return grads;
}

// ---------------------------------------------------------------------------------------------
// Separable convolution

template <typename T>
Forward<T, SeparableCache<T>> separable_conv_forward(const BasicTensor<T>& x, const BasicTensor<T>& dw_weights,
                                                     const BasicTensor<T>& pw_weights, const ConvSpec& spec) {
    spec.validate();
    ConvSpec dw_spec = spec;
    dw_spec.out_channels = spec.in_channels;
    dw_spec.has_bias = false;
    ConvSpec pw_spec{1, spec.in_channels, spec.out_channels, 1, Padding::Valid, false};
    auto dw = depthwise_conv_forward(x, dw_weights, dw_spec);
    auto pw = pointwise_conv_forward(dw.y, pw_weights, pw_spec);
    return {std::move(pw.y), SeparableCache<T>{std::move(dw.cache), std::move(pw.cache)}};
}

template <typename T>
SeparableGrads<T> separable_backward(const SeparableCache<T>& cache, const BasicTensor<T>& upstream, GradRequest want) {
    // The depthwise input gradient needs the pointwise input gradient regardless of `want.input`
    // whenever depthwise parameter gradients are wanted.
    auto pw = pointwise_backward(cache.pointwise, upstream, {want.input || want.params, want.params});
    auto dw = depthwise_backward(cache.depthwise, pw.d_input, want);
    return {std::move(dw.d_input), std::move(dw.d_weights), std::move(pw.d_weights)};
}

// ---------------------------------------------------------------------------------------------
// Batch normalization

namespace {

template <typename T>
Forward<T, BatchNormCache<T>> batchnorm_apply(const BasicTensor<T>& x, const BatchNormState<T>& state, Mode mode,
                                              std::vector<double>* batch_mean, std::vector<double>* batch_var) {
    const Shape in = x.shape();
    const size_t channels = state.channels();
    if (in.c != channels)
        throw ShapeError("batchnorm: input has " + std::to_string(in.c) + " channels, state has " +
                         std::to_string(channels));
    const size_t plane = in.plane();
    const double count = static_cast<double>(in.n * plane);

    BatchNormCache<T> cache{BasicTensor<T>(in), std::vector<T>(channels), state.gamma, mode};
    BasicTensor<T> y(in);
    parallel_for(channels, [&](size_t c) {
        double mean = 0;
        double var = 0;
        if (mode == Mode::Train) {
            for (size_t n = 0; n < in.n; ++n) mean += sum(x.sample(n) + c * plane, plane);
            mean /= count;
            for (size_t n = 0; n < in.n; ++n) var += squared_deviation(x.sample(n) + c * plane, plane, static_cast<T>(mean));
            var /= count;
            (*batch_mean)[c] = mean;
            (*batch_var)[c] = var;
        } else {
            mean = state.running_mean[c];
            var = state.running_var[c];
        }
        const T inv_std = static_cast<T>(1.0 / std::sqrt(var + state.epsilon));
        const T mu = static_cast<T>(mean);
        const T gamma = state.gamma[c];
        const T beta = state.beta[c];
        cache.inv_std[c] = inv_std;
        for (size_t n = 0; n < in.n; ++n) {
            const size_t off = n * in.per_sample() + c * plane;
            const T* src = x.ptr() + off;
            T* xh = cache.normalized.ptr() + off;
            T* dst = y.ptr() + off;
            for (size_t i = 0; i < plane; ++i) {
                xh[i] = (src[i] - mu) * inv_std;
                dst[i] = gamma * xh[i] + beta;
            }
        }
    });
    return {std::move(y), std::move(cache)};
}

}  // namespace

template <typename T>
Forward<T, BatchNormCache<T>> batchnorm_forward(const BasicTensor<T>& x, BatchNormState<T>& state, Mode mode) {
    if (mode == Mode::Infer) return batchnorm_apply(x, state, mode, nullptr, nullptr);
    std::vector<double> mean(state.channels()), var(state.channels());
    auto out = batchnorm_apply(x, state, mode, &mean, &var);
    const double mom = state.momentum;
    for (size_t c = 0; c < state.channels(); ++c) {
        state.running_mean[c] = static_cast<T>(mom * state.running_mean[c] + (1 - mom) * mean[c]);
        state.running_var[c] = static_cast<T>(mom * state.running_var[c] + (1 - mom) * var[c]);
    }
    return out;
}

template <typename T>
Forward<T, BatchNormCache<T>> batchnorm_forward(const BasicTensor<T>& x, const BatchNormState<T>& state) {
    return batchnorm_apply(x, state, Mode::Infer, nullptr, nullptr);
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache, const BasicTensor<T>& upstream) {
    expect_upstream(upstream.shape(), cache.normalized.shape(), "batchnorm");
    const Shape in = upstream.shape();
    const size_t channels = in.c;
    const size_t plane = in.plane();
    const T count = static_cast<T>(in.n * plane);
    BatchNormGrads<T> grads{BasicTensor<T>(in), BasicTensor<T>(Shape::vector(channels)),
                            BasicTensor<T>(Shape::vector(channels))};

    parallel_for(channels, [&](size_t c) {
        T d_beta = 0;
        T d_gamma = 0;
        for (size_t n = 0; n < in.n; ++n) {
            const size_t off = n * in.per_sample() + c * plane;
            d_beta += sum(upstream.ptr() + off, plane);
            d_gamma += dot(upstream.ptr() + off, cache.normalized.ptr() + off, plane);
        }
        grads.d_beta[c] = d_beta;
        grads.d_gamma[c] = d_gamma;
        const T scale = cache.gamma[c] * cache.inv_std[c];
        for (size_t n = 0; n < in.n; ++n) {
            const size_t off = n * in.per_sample() + c * plane;
            const T* dy = upstream.ptr() + off;
            const T* xh = cache.normalized.ptr() + off;
            T* dx = grads.d_input.ptr() + off;
            if (cache.mode == Mode::Train) {
                for (size_t i = 0; i < plane; ++i) dx[i] = scale / count * (count * dy[i] - d_beta - xh[i] * d_gamma);
            } else {
                for (size_t i = 0; i < plane; ++i) dx[i] = scale * dy[i];
            }
        }
    });
    return grads;
}

// ---------------------------------------------------------------------------------------------
// Activations, pooling, heads

template <typename T>
Forward<T, ReluCache<T>> relu_forward(const BasicTensor<T>& x) {
    BasicTensor<T> y(x.shape());
    const T* src = x.ptr();
    T* dst = y.ptr();
    for (size_t i = 0; i < x.size(); ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
    return {std::move(y), ReluCache<T>{x}};
}

template <typename T>
BasicTensor<T> relu_backward(const ReluCache<T>* cache, const BasicTensor<T>& upstream, ReluMode mode) {
    if (mode != ReluMode::Deconvnet) {
        if (!cache) throw ContractError("relu backward: standard and guided modes need the forward input");
        expect_upstream(upstream.shape(), cache->input.shape(), "relu");
    }
    BasicTensor<T> out(upstream.shape());
    const T* r = upstream.ptr();
    T* o = out.ptr();
    const size_t n = upstream.size();
    switch (mode) {
        case ReluMode::Standard: {
            const T* f = cache->input.ptr();
            for (size_t i = 0; i < n; ++i) o[i] = f[i] > T(0) ? r[i] : T(0);
            break;
        }
        case ReluMode::Deconvnet:
            for (size_t i = 0; i < n; ++i) o[i] = r[i] > T(0) ? r[i] : T(0);
            break;
        case ReluMode::Guided: {
            const T* f = cache->input.ptr();
            for (size_t i = 0; i < n; ++i) o[i] = (f[i] > T(0) && r[i] > T(0)) ? r[i] : T(0);
            break;
        }
    }
    return out;
}

template <typename T>
Forward<T, PoolCache> maxpool_forward(const BasicTensor<T>& x, const PoolSpec& spec) {
    const Shape in = x.shape();
    if (spec.window == 0 || spec.stride == 0) throw ShapeError("pool window and stride must be positive");
    if (in.size() > std::numeric_limits<std::uint32_t>::max()) throw ShapeError("maxpool input too large");
    const Geometry g = conv_geometry(in, spec.window, spec.stride, spec.padding);
    const Shape out_shape{in.n, in.c, g.out_h, g.out_w};
    BasicTensor<T> y(out_shape);
    PoolCache cache{in, out_shape, std::vector<std::uint32_t>(out_shape.size())};

    const auto rows = tap_ranges(g.out_h, spec.window, g.stride, g.pad_t, g.in_h);
    const auto cols = tap_ranges(g.out_w, spec.window, g.stride, g.pad_l, g.in_w);
    // Valid window taps per output coordinate.
    std::vector<std::pair<size_t, size_t>> ky_span(g.out_h), kx_span(g.out_w);
    const auto spans = [&](const std::vector<std::pair<size_t, size_t>>& r, std::vector<std::pair<size_t, size_t>>& out) {
        for (size_t o = 0; o < out.size(); ++o) {
            size_t lo = spec.window, hi = 0;
            for (size_t k = 0; k < spec.window; ++k)
                if (o >= r[k].first && o < r[k].second) {
                    lo = std::min(lo, k);
                    hi = k + 1;
                }
            if (lo >= hi) throw ShapeError("pooling window covers only padding");
            out[o] = {lo, hi};
        }
    };
    spans(rows, ky_span);
    spans(cols, kx_span);

    parallel_for(in.n * in.c, [&](size_t plane) {
        const size_t in_off = plane * g.in_h * g.in_w;
        const size_t out_off = plane * g.out_h * g.out_w;
        const T* src = x.ptr() + in_off;
        for (size_t oy = 0; oy < g.out_h; ++oy) {
            const auto [ky0, ky1] = ky_span[oy];
            for (size_t ox = 0; ox < g.out_w; ++ox) {
                const auto [kx0, kx1] = kx_span[ox];
                const size_t ix0 = ox * g.stride + kx0 - g.pad_l;
                size_t best_idx = (oy * g.stride + ky0 - g.pad_t) * g.in_w + ix0;
                T best = src[best_idx];
                for (size_t ky = ky0; ky < ky1; ++ky) {
                    const size_t row = (oy * g.stride + ky - g.pad_t) * g.in_w;
                    for (size_t kx = kx0; kx < kx1; ++kx) {
                        const size_t idx = row + ox * g.stride + kx - g.pad_l;
                        if (src[idx] > best) {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                const size_t o = out_off + oy * g.out_w + ox;
                y[o] = best;
                cache.argmax[o] = static_cast<std::uint32_t>(in_off + best_idx);
            }
        }
    });
    return {std::move(y), std::move(cache)};
}

template <typename T>
BasicTensor<T> maxpool_backward(const PoolCache& cache, const BasicTensor<T>& upstream) {
    expect_upstream(upstream.shape(), cache.output_shape, "maxpool");
    BasicTensor<T> dx(cache.input_shape);
    for (size_t i = 0; i < upstream.size(); ++i) dx[cache.argmax[i]] += upstream[i];
    return dx;
}

template <typename T>
Forward<T, GapCache> gap_forward(const BasicTensor<T>& x) {
    const Shape in = x.shape();
    BasicTensor<T> y({in.n, in.c, 1, 1});
    const size_t plane = in.plane();
    for (size_t i = 0; i < in.n * in.c; ++i) {
        T acc = 0;
        const T* src = x.ptr() + i * plane;
        for (size_t j = 0; j < plane; ++j) acc += src[j];
        y[i] = acc / static_cast<T>(plane);
    }
    return {std::move(y), GapCache{in}};
}

template <typename T>
BasicTensor<T> gap_backward(const GapCache& cache, const BasicTensor<T>& upstream) {
    const Shape in = cache.input_shape;
    expect_upstream(upstream.shape(), {in.n, in.c, 1, 1}, "gap");
    BasicTensor<T> dx(in);
    const size_t plane = in.plane();
    for (size_t i = 0; i < in.n * in.c; ++i) {
        const T g = upstream[i] / static_cast<T>(plane);
        std::fill(dx.ptr() + i * plane, dx.ptr() + (i + 1) * plane, g);
    }
    return dx;
}

template <typename T>
Forward<T, SoftmaxCache<T>> softmax_forward(const BasicTensor<T>& logits) {
    const Shape s = logits.shape();
    BasicTensor<T> probs(s);
    const size_t plane = s.plane();
    for (size_t n = 0; n < s.n; ++n)
        for (size_t j = 0; j < plane; ++j) {
            const T* z = logits.sample(n) + j;
            T* p = probs.sample(n) + j;
            T mx = z[0];
            for (size_t c = 1; c < s.c; ++c) mx = std::max(mx, z[c * plane]);
            T total = 0;
            for (size_t c = 0; c < s.c; ++c) {
                p[c * plane] = std::exp(z[c * plane] - mx);
                total += p[c * plane];
            }
            for (size_t c = 0; c < s.c; ++c) p[c * plane] /= total;
        }
    return {probs, SoftmaxCache<T>{probs}};
}

template <typename T>
BasicTensor<T> softmax_backward(const SoftmaxCache<T>& cache, const BasicTensor<T>& upstream) {
    expect_upstream(upstream.shape(), cache.probs.shape(), "softmax");
    const Shape s = upstream.shape();
    BasicTensor<T> dz(s);
    const size_t plane = s.plane();
    for (size_t n = 0; n < s.n; ++n)
        for (size_t j = 0; j < plane; ++j) {
            const T* p = cache.probs.sample(n) + j;
            const T* g = upstream.sample(n) + j;
            T inner = 0;
            for (size_t c = 0; c < s.c; ++c) inner += g[c * plane] * p[c * plane];
            T* out = dz.sample(n) + j;
            for (size_t c = 0; c < s.c; ++c) out[c * plane] = p[c * plane] * (g[c * plane] - inner);
        }
    return dz;
}

template <typename T>
BasicTensor<T> residual_add(const BasicTensor<T>& main, const BasicTensor<T>& skip) {
    return ew_binary(main, skip, BinaryOp::Add);
}

// ---------------------------------------------------------------------------------------------

std::uint64_t mult_count(ConvKind kind, const ConvSpec& spec, size_t out_h, size_t out_w) {
    const std::uint64_t d2 = static_cast<std::uint64_t>(spec.kernel) * spec.kernel;
    const std::uint64_t m = spec.in_channels;
    const std::uint64_t n = spec.out_channels;
    const std::uint64_t hw = static_cast<std::uint64_t>(out_h) * out_w;
    switch (kind) {
        case ConvKind::Standard:
            return d2 * m * n * hw;
        case ConvKind::Depthwise:
            return d2 * m * hw;
        case ConvKind::Pointwise:
            return m * n * hw;
        case ConvKind::Separable:
            return d2 * m * hw + m * n * hw;
    }
    return 0;
}

Rational make_rational(std::uint64_t num, std::uint64_t den) {
    if (den == 0) throw ContractError("rational with zero denominator");
    const std::uint64_t g = std::gcd(num, den);
    return g ? Rational{num / g, den / g} : Rational{0, 1};
}

Rational separable_cost_ratio(const ConvSpec& spec, size_t out_h, size_t out_w) {
    return make_rational(mult_count(ConvKind::Separable, spec, out_h, out_w),
                         mult_count(ConvKind::Standard, spec, out_h, out_w));
}

// ---------------------------------------------------------------------------------------------

#define RTCNN_INSTANTIATE(T)                                                                                         \
    template struct BatchNormState<T>;                                                                               \
    template Forward<T, ConvCache<T>> conv2d_forward(const BasicTensor<T>&, const BasicTensor<T>&,                   \
                                                     const std::type_identity_t<BasicTensor<T>>*, const ConvSpec&);                        \
    template ConvGrads<T> conv2d_backward(const ConvCache<T>&, const BasicTensor<T>&, GradRequest);                  \
    template Forward<T, DepthwiseCache<T>> depthwise_conv_forward(const BasicTensor<T>&, const BasicTensor<T>&,      \
                                                                  const ConvSpec&);                                  \
    template ConvGrads<T> depthwise_backward(const DepthwiseCache<T>&, const BasicTensor<T>&, GradRequest);          \
    template Forward<T, PointwiseCache<T>> pointwise_conv_forward(const BasicTensor<T>&, const BasicTensor<T>&,      \
                                                                  const ConvSpec&);                                  \
    template ConvGrads<T> pointwise_backward(const PointwiseCache<T>&, const BasicTensor<T>&, GradRequest);          \
    template Forward<T, SeparableCache<T>> separable_conv_forward(const BasicTensor<T>&, const BasicTensor<T>&,      \
                                                                  const BasicTensor<T>&, const ConvSpec&);           \
    template SeparableGrads<T> separable_backward(const SeparableCache<T>&, const BasicTensor<T>&, GradRequest);     \
    template Forward<T, BatchNormCache<T>> batchnorm_forward(const BasicTensor<T>&, BatchNormState<T>&, Mode);       \
    template Forward<T, BatchNormCache<T>> batchnorm_forward(const BasicTensor<T>&, const BatchNormState<T>&);       \
    template BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>&, const BasicTensor<T>&);                  \
    template Forward<T, ReluCache<T>> relu_forward(const BasicTensor<T>&);                                           \
    template BasicTensor<T> relu_backward(const ReluCache<T>*, const BasicTensor<T>&, ReluMode);                     \
    template Forward<T, PoolCache> maxpool_forward(const BasicTensor<T>&, const PoolSpec&);                          \
    template BasicTensor<T> maxpool_backward(const PoolCache&, const BasicTensor<T>&);                               \
    template Forward<T, GapCache> gap_forward(const BasicTensor<T>&);                                                \
    template BasicTensor<T> gap_backward(const GapCache&, const BasicTensor<T>&);                                    \
    template Forward<T, SoftmaxCache<T>> softmax_forward(const BasicTensor<T>&);                                     \
    template BasicTensor<T> softmax_backward(const SoftmaxCache<T>&, const BasicTensor<T>&);                         \
    template BasicTensor<T> residual_add(const BasicTensor<T>&, const BasicTensor<T>&);

RTCNN_INSTANTIATE(float)
RTCNN_INSTANTIATE(double)

#undef RTCNN_INSTANTIATE

}  // namespace rtcnn
