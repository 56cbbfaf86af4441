#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "bnn/error.hpp"
#include "bnn/rng.hpp"

namespace bnn {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

inline std::size_t element_count(const Shape& shape) {
    if (shape.empty()) throw ShapeError("invalid shape: rank 0");
    std::size_t n = 1;
    for (auto d : shape) {
        if (d == 0) throw ShapeError("invalid shape " + to_string(shape) + ": zero extent");
        n *= d;
    }
    return n;
}

/// Dense row-major tensor. Images are NCHW, feature matrices are N x C.
template <class T = float>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() : shape_{1}, data_(1, T{}) {}

    explicit BasicTensor(Shape shape, T fill = T{})
        : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

    BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != element_count(shape_))
            throw ShapeError("data length " + std::to_string(data_.size()) +
                             " does not match shape " + to_string(shape_));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    T* ptr() { return data_.data(); }
    const T* ptr() const { return data_.data(); }
    const std::vector<T>& values() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    BasicTensor reshaped(Shape shape) const {
        if (element_count(shape) != data_.size())
            throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
        return BasicTensor(std::move(shape), data_);
    }

    void reshape(Shape shape) {
        if (element_count(shape) != data_.size())
            throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
        shape_ = std::move(shape);
    }

    template <class U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(),
                       [](T v) { return static_cast<U>(v); });
        return BasicTensor<U>(shape_, std::move(out));
    }

    bool operator==(const BasicTensor&) const = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

// ---- creation --------------------------------------------------------------

struct Zeros {};
struct Constant {
    double value;
};
/// Normal with variance 2 / (fan_in + fan_out).
struct XavierNormal {
    std::uint64_t seed;
};
using FillRule = std::variant<Zeros, Constant, XavierNormal>;

/// Fan-in/fan-out for a weight tensor laid out as [out, in, kh, kw...].
inline std::pair<std::size_t, std::size_t> fans(const Shape& shape) {
    if (shape.size() == 1) return {shape[0], shape[0]};
    std::size_t receptive = 1;
    for (std::size_t i = 2; i < shape.size(); ++i) receptive *= shape[i];
    return {shape[1] * receptive, shape[0] * receptive};
}

template <class T = float>
BasicTensor<T> create(const Shape& shape, const FillRule& rule) {
    BasicTensor<T> t(shape);
    if (const auto* c = std::get_if<Constant>(&rule)) {
        t.fill(static_cast<T>(c->value));
    } else if (const auto* x = std::get_if<XavierNormal>(&rule)) {
        const auto [fan_in, fan_out] = fans(shape);
        const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
        Rng rng(x->seed);
        for (auto& v : t.data()) v = static_cast<T>(stddev * rng.normal());
    }
    return t;
}

// ---- reductions ------------------------------------------------------------

enum class Reduction { Mean, Var, Max, Min };

/// Reduces over `axes`, dropping them from the result shape. Reducing every
/// axis yields shape [1]. Variance is the biased (divide-by-N) estimator.
template <class T>
BasicTensor<T> reduce(const BasicTensor<T>& t, std::vector<std::size_t> axes, Reduction kind) {
    std::sort(axes.begin(), axes.end());
    if (std::adjacent_find(axes.begin(), axes.end()) != axes.end())
        throw ShapeError("reduce: duplicate axes");
    for (auto a : axes)
        if (a >= t.rank()) throw ShapeError("reduce: axis " + std::to_string(a) + " out of range");

    const Shape& in = t.shape();
    std::vector<bool> reduced(in.size(), false);
    for (auto a : axes) reduced[a] = true;
    Shape out_shape;
    for (std::size_t i = 0; i < in.size(); ++i)
        if (!reduced[i]) out_shape.push_back(in[i]);
    if (out_shape.empty()) out_shape = {1};

    // Map every input element to its output slot.
    const std::size_t n_out = element_count(out_shape);
    std::vector<std::size_t> slot(t.size());
    {
        std::vector<std::size_t> idx(in.size(), 0);
        for (std::size_t flat = 0; flat < t.size(); ++flat) {
            std::size_t o = 0;
            for (std::size_t i = 0; i < in.size(); ++i)
                if (!reduced[i]) o = o * in[i] + idx[i];
            slot[flat] = o;
            for (std::size_t i = in.size(); i-- > 0;) {
                if (++idx[i] < in[i]) break;
                idx[i] = 0;
            }
        }
    }
    const double count = static_cast<double>(t.size() / n_out);

    std::vector<double> acc(n_out, 0.0);
    switch (kind) {
        case Reduction::Mean:
        case Reduction::Var:
            for (std::size_t i = 0; i < t.size(); ++i) acc[slot[i]] += t[i];
            for (auto& a : acc) a /= count;
            if (kind == Reduction::Var) {
                std::vector<double> sq(n_out, 0.0);
                for (std::size_t i = 0; i < t.size(); ++i) {
                    const double d = t[i] - acc[slot[i]];
                    sq[slot[i]] += d * d;
                }
                for (std::size_t o = 0; o < n_out; ++o) acc[o] = sq[o] / count;
            }
            break;
        case Reduction::Max:
        case Reduction::Min: {
            const bool is_max = kind == Reduction::Max;
            std::fill(acc.begin(), acc.end(),
                      is_max ? -std::numeric_limits<double>::infinity()
                             : std::numeric_limits<double>::infinity());
            for (std::size_t i = 0; i < t.size(); ++i) {
                auto& a = acc[slot[i]];
                a = is_max ? std::max<double>(a, t[i]) : std::min<double>(a, t[i]);
            }
            break;
        }
    }
    BasicTensor<T> out(out_shape);
    for (std::size_t o = 0; o < n_out; ++o) out[o] = static_cast<T>(acc[o]);
    return out;
}

// ---- elementwise -----------------------------------------------------------

enum class BinaryOp { Add, Sub, Mul, Div };

template <class T>
T apply(BinaryOp op, T x, T y) {
    switch (op) {
        case BinaryOp::Add: return x + y;
        case BinaryOp::Sub: return x - y;
        case BinaryOp::Mul: return x * y;
        case BinaryOp::Div: return x / y;
    }
    return x;
}

/// Elementwise a (op) b. With `channel_axis`, b may instead be a vector with
/// one value per entry of a's channel axis, applied across all other axes.
template <class T>
BasicTensor<T> map2(const BasicTensor<T>& a, const BasicTensor<T>& b, BinaryOp op,
                    std::optional<std::size_t> channel_axis = std::nullopt) {
    BasicTensor<T> out(a.shape());
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = apply(op, a[i], b[i]);
        return out;
    }
    if (!channel_axis || *channel_axis >= a.rank() || b.rank() != 1 ||
        b.dim(0) != a.dim(*channel_axis))
        throw ShapeError("map2: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
    std::size_t inner = 1;
    for (std::size_t i = *channel_axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    const std::size_t channels = a.dim(*channel_axis);
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = apply(op, a[i], b[(i / inner) % channels]);
    return out;
}

}  // namespace bnn
