#include "rtcnn/tensor.hpp"

#include <limits>
#include <sstream>

namespace rtcnn {

std::size_t Shape::size() const {
    std::size_t total = 1;
    for (std::size_t d : dims()) {
        if (d == 0) throw ShapeError("zero dimension in shape " + str());
        if (__builtin_mul_overflow(total, d, &total)) throw ShapeError("shape " + str() + " overflows");
    }
    // Guard the byte count as well; no realistic tensor needs more.
    if (total > std::numeric_limits<std::size_t>::max() / sizeof(double))
        throw ShapeError("shape " + str() + " overflows");
    return total;
}

std::string Shape::str() const {
    std::ostringstream os;
    os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
    return os.str();
}

Xorshift64Star::Xorshift64Star(std::uint64_t seed) : state_(seed ? seed : 0x9E3779B97F4A7C15ULL) {}

std::uint64_t Xorshift64Star::next() {
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545F4914F6CDD1DULL;
}

double Xorshift64Star::uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

std::uint64_t Xorshift64Star::below(std::uint64_t bound) {
    if (bound == 0) throw ContractError("Xorshift64Star::below(0)");
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t r = next();
    while (r >= limit) r = next();
    return r % bound;
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size())
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " + shape_.str());
}

template <typename T>
BasicTensor<T> BasicTensor<T>::constant(Shape shape, T value) {
    BasicTensor t(shape);
    t.fill(value);
    return t;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::uniform(Shape shape, double lo, double hi, std::uint64_t seed) {
    if (!(lo <= hi)) throw ContractError("uniform init requires lo <= hi");
    BasicTensor t(shape);
    Xorshift64Star rng(seed);
    for (auto& v : t.data_) v = static_cast<T>(lo + (hi - lo) * rng.uniform01());
    return t;
}

template <typename T>
T BasicTensor<T>::at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    if (n >= shape_.n || c >= shape_.c || y >= shape_.h || x >= shape_.w)
        throw ContractError("index out of range for shape " + shape_.str());
    return data_[index(n, c, y, x)];
}

template <typename T>
void BasicTensor<T>::set(std::size_t n, std::size_t c, std::size_t y, std::size_t x, T value) {
    if (n >= shape_.n || c >= shape_.c || y >= shape_.h || x >= shape_.w)
        throw ContractError("index out of range for shape " + shape_.str());
    data_[index(n, c, y, x)] = value;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
    if (shape.size() != size()) throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
    return BasicTensor(shape, data_);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::slice_batch(std::size_t first, std::size_t count) const {
    if (count == 0 || first + count > shape_.n) throw ShapeError("batch slice out of range");
    Shape s = shape_;
    s.n = count;
    const auto per = shape_.per_sample();
    return BasicTensor(s, std::vector<T>(data_.begin() + first * per, data_.begin() + (first + count) * per));
}

template <typename T>
BasicTensor<T> ew_binary(const BasicTensor<T>& a, const BasicTensor<T>& b, BinaryOp op) {
    if (a.shape() != b.shape()) throw ShapeError("elementwise shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    BasicTensor<T> out(a.shape());
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    const std::size_t n = a.size();
    switch (op) {
        case BinaryOp::Add:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
            break;
        case BinaryOp::Sub:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
            break;
        case BinaryOp::Mul:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
            break;
    }
    return out;
}

template <typename T>
Coord3 argmax_flat(const BasicTensor<T>& t) {
    if (t.shape().n != 1) throw ContractError("argmax_flat expects a single sample, got " + t.shape().str());
    std::size_t best = 0;
    for (std::size_t i = 1; i < t.size(); ++i)
        if (t[i] > t[best]) best = i;
    const auto& s = t.shape();
    return {best / s.plane(), (best / s.w) % s.h, best % s.w};
}

template <typename T>
BasicTensor<T> reduce(const BasicTensor<T>& t, Axes axes, ReduceOp op) {
    if (axes.empty()) return t;
    const Shape in = t.shape();
    const Shape out_shape{axes.n ? 1 : in.n, axes.c ? 1 : in.c, axes.h ? 1 : in.h, axes.w ? 1 : in.w};
    const std::size_t count = in.size() / out_shape.size();

    BasicTensor<T> out(out_shape);
    std::vector<bool> seen(out.size(), false);
    for (std::size_t n = 0; n < in.n; ++n)
        for (std::size_t c = 0; c < in.c; ++c)
            for (std::size_t y = 0; y < in.h; ++y)
                for (std::size_t x = 0; x < in.w; ++x) {
                    const std::size_t o = out.index(axes.n ? 0 : n, axes.c ? 0 : c, axes.h ? 0 : y, axes.w ? 0 : x);
                    const T v = t(n, c, y, x);
                    if (op == ReduceOp::Max) {
                        if (!seen[o] || v > out[o]) out[o] = v;
                        seen[o] = true;
                    } else {
                        out[o] += v;
                    }
                }
    if (op == ReduceOp::Mean)
        for (auto& v : out.data()) v /= static_cast<T>(count);
    return out;
}

template <typename T>
BasicTensor<T> concat_batch(std::span<const BasicTensor<T>> parts) {
    if (parts.empty()) throw ShapeError("concat_batch of nothing");
    Shape s = parts.front().shape();
    std::size_t total = 0;
    for (const auto& p : parts) {
        Shape ps = p.shape();
        if (ps.c != s.c || ps.h != s.h || ps.w != s.w) throw ShapeError("concat_batch shape mismatch");
        total += ps.n;
    }
    s.n = total;
    std::vector<T> data;
    data.reserve(s.size());
    for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
    return BasicTensor<T>(s, std::move(data));
}

#define RTCNN_INSTANTIATE(T)                                                                    \
    template class BasicTensor<T>;                                                              \
    template BasicTensor<T> ew_binary(const BasicTensor<T>&, const BasicTensor<T>&, BinaryOp);   \
    template Coord3 argmax_flat(const BasicTensor<T>&);                                         \
    template BasicTensor<T> reduce(const BasicTensor<T>&, Axes, ReduceOp);                      \
    template BasicTensor<T> concat_batch(std::span<const BasicTensor<T>>);

RTCNN_INSTANTIATE(float)
RTCNN_INSTANTIATE(double)

#undef RTCNN_INSTANTIATE

}  // namespace rtcnn
