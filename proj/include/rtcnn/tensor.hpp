#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rtcnn/error.hpp"

namespace rtcnn {

/// NCHW extent. Vectors are represented as (1, c, 1, 1).
struct Shape {
    std::size_t n = 1;
    std::size_t c = 1;
    std::size_t h = 1;
    std::size_t w = 1;

    /// Throws ShapeError on a zero dimension or when the element count overflows.
    std::size_t size() const;
    std::size_t per_sample() const { return c * h * w; }
    std::size_t plane() const { return h * w; }

    static Shape vector(std::size_t c) { return {1, c, 1, 1}; }

    std::array<std::size_t, 4> dims() const { return {n, c, h, w}; }
    std::string str() const;

    friend bool operator==(const Shape&, const Shape&) = default;
};

/// xorshift64* (Vigna). Seed 0 is remapped to a fixed non-zero constant.
class Xorshift64Star {
public:
    explicit Xorshift64Star(std::uint64_t seed);

    std::uint64_t next();
    /// Uniform double in [0, 1) built from the top 53 bits.
    double uniform01();
    /// Uniform integer in [0, bound).
    std::uint64_t below(std::uint64_t bound);

private:
    std::uint64_t state_;
};

struct ZerosInit {};
struct ConstantInit {
    double value;
};
struct UniformInit {
    double lo;
    double hi;
    std::uint64_t seed;
};

template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() : BasicTensor(Shape{}) {}
    explicit BasicTensor(Shape shape) : shape_(shape), data_(shape.size(), T(0)) {}
    BasicTensor(Shape shape, std::vector<T> data);

    static BasicTensor zeros(Shape shape) { return BasicTensor(shape); }
    static BasicTensor constant(Shape shape, T value);
    static BasicTensor uniform(Shape shape, double lo, double hi, std::uint64_t seed);
    static BasicTensor make(Shape shape, ZerosInit) { return zeros(shape); }
    static BasicTensor make(Shape shape, ConstantInit init) { return constant(shape, static_cast<T>(init.value)); }
    static BasicTensor make(Shape shape, UniformInit init) { return uniform(shape, init.lo, init.hi, init.seed); }

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }

    std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }

    T& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) { return data_[index(n, c, y, x)]; }
    T operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const { return data_[index(n, c, y, x)]; }

    /// Bounds-checked access; throws ContractError.
    T at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const;
    void set(std::size_t n, std::size_t c, std::size_t y, std::size_t x, T value);

    T& operator[](std::size_t i) { return data_[i]; }
    T operator[](std::size_t i) const { return data_[i]; }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    T* ptr() { return data_.data(); }
    const T* ptr() const { return data_.data(); }

    /// Pointer to the first element of sample n.
    T* sample(std::size_t n) { return data_.data() + n * shape_.per_sample(); }
    const T* sample(std::size_t n) const { return data_.data() + n * shape_.per_sample(); }

    /// Same data under a different shape with equal element count.
    BasicTensor reshaped(Shape shape) const;

    /// Copy of samples [first, first + count).
    BasicTensor slice_batch(std::size_t first, std::size_t count) const;

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    template <typename U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return BasicTensor<U>(shape_, std::move(out));
    }

    friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

enum class BinaryOp { Add, Sub, Mul };
enum class ReduceOp { Sum, Mean, Max };

/// Axis selection for reduce(). Reduced axes keep extent 1.
struct Axes {
    bool n = false;
    bool c = false;
    bool h = false;
    bool w = false;

    static Axes none() { return {}; }
    static Axes all() { return {true, true, true, true}; }
    static Axes spatial() { return {false, false, true, true}; }
    bool empty() const { return !(n || c || h || w); }
};

struct Coord3 {
    std::size_t c = 0;
    std::size_t y = 0;
    std::size_t x = 0;
    friend bool operator==(const Coord3&, const Coord3&) = default;
};

template <typename T>
BasicTensor<T> ew_binary(const BasicTensor<T>& a, const BasicTensor<T>& b, BinaryOp op);

/// Location of the largest element of sample 0; ties go to the lowest flat index.
template <typename T>
Coord3 argmax_flat(const BasicTensor<T>& t);

/// An empty axis set returns a copy of the input.
template <typename T>
BasicTensor<T> reduce(const BasicTensor<T>& t, Axes axes, ReduceOp op);

/// Concatenate along the batch axis.
template <typename T>
BasicTensor<T> concat_batch(std::span<const BasicTensor<T>> parts);

}  // namespace rtcnn
