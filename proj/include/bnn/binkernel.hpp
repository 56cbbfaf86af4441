#pragma once

#include <bit>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "bnn/error.hpp"
#include "bnn/io.hpp"
#include "bnn/models.hpp"
#include "bnn/nn.hpp"
#include "bnn/tensor.hpp"

namespace bnn {

using Word = std::uint64_t;
inline constexpr std::size_t kWordBits = 64;

inline constexpr std::size_t words_for(std::size_t bits) {
    return (bits + kWordBits - 1) / kWordBits;
}

/// Mask of the valid bits in the last word of an n-bit row.
inline constexpr Word tail_mask(std::size_t n) {
    const std::size_t r = n % kWordBits;
    return r == 0 ? ~Word{0} : (Word{1} << r) - 1;
}

/// +-1 values packed one bit each (1 = +1, 0 = -1). The first axis indexes
/// rows (rank 1 is a single row); each row is padded to whole words and the
/// padding bits are kept at 0.
class BitTensor {
public:
    BitTensor() = default;
    explicit BitTensor(Shape shape) : shape_(std::move(shape)) {
        const std::size_t n = element_count(shape_);
        rows_ = shape_.size() >= 2 ? shape_[0] : 1;
        row_len_ = n / rows_;
        wpr_ = words_for(row_len_);
        words_.assign(rows_ * wpr_, 0);
    }

    const Shape& shape() const { return shape_; }
    std::size_t rows() const { return rows_; }
    std::size_t row_length() const { return row_len_; }
    std::size_t words_per_row() const { return wpr_; }

    std::span<const Word> row(std::size_t r) const { return {words_.data() + r * wpr_, wpr_}; }
    std::span<Word> row(std::size_t r) { return {words_.data() + r * wpr_, wpr_}; }
    std::vector<Word>& words() { return words_; }
    const std::vector<Word>& words() const { return words_; }

    bool get(std::size_t r, std::size_t i) const {
        return (words_[r * wpr_ + i / kWordBits] >> (i % kWordBits)) & 1u;
    }
    void set(std::size_t r, std::size_t i, bool plus) {
        Word& w = words_[r * wpr_ + i / kWordBits];
        const Word bit = Word{1} << (i % kWordBits);
        w = plus ? (w | bit) : (w & ~bit);
    }

    /// Throws if any padding bit is set.
    void validate_padding() const {
        if (row_len_ % kWordBits == 0) return;
        const Word pad = ~tail_mask(row_len_);
        for (std::size_t r = 0; r < rows_; ++r)
            if (words_[r * wpr_ + wpr_ - 1] & pad)
                throw Error("bit tensor " + to_string(shape_) + ": padding bits set in row " +
                            std::to_string(r));
    }

    bool operator==(const BitTensor&) const = default;

private:
    Shape shape_;
    std::size_t rows_ = 0, row_len_ = 0, wpr_ = 0;
    std::vector<Word> words_;
};

template <class T>
BitTensor pack(const BasicTensor<T>& t) {
    BitTensor bt(t.shape());
    const std::size_t len = bt.row_length();
    for (std::size_t r = 0; r < bt.rows(); ++r) {
        auto row = bt.row(r);
        for (std::size_t i = 0; i < len; ++i) {
            const T v = t[r * len + i];
            if (v == T{1})
                row[i / kWordBits] |= Word{1} << (i % kWordBits);
            else if (v != T{-1})
                throw Error("pack: value " + std::to_string(static_cast<double>(v)) +
                            " at index " + std::to_string(r * len + i) + " is not +-1");
        }
    }
    return bt;
}

template <class T = float>
BasicTensor<T> unpack(const BitTensor& bt) {
    BasicTensor<T> t(bt.shape());
    const std::size_t len = bt.row_length();
    for (std::size_t r = 0; r < bt.rows(); ++r)
        for (std::size_t i = 0; i < len; ++i) t[r * len + i] = bt.get(r, i) ? T{1} : T{-1};
    return t;
}

/// Dot product of two n-element +-1 rows: 2 * popcount(XNOR(a, b) & mask) - n.
inline std::int64_t xnor_popcount_dot(std::span<const Word> a, std::span<const Word> b,
                                      std::size_t n) {
    const std::size_t nw = words_for(n);
    if (a.size() != nw || b.size() != nw)
        throw ShapeError("xnor_popcount_dot: length mismatch (" + std::to_string(a.size()) +
                         " and " + std::to_string(b.size()) + " words for " + std::to_string(n) +
                         " bits)");
    if (nw == 0) return 0;
    std::int64_t pc = 0;
    for (std::size_t i = 0; i + 1 < nw; ++i) pc += std::popcount(~(a[i] ^ b[i]));
    pc += std::popcount(~(a[nw - 1] ^ b[nw - 1]) & tail_mask(n));
    return 2 * pc - static_cast<std::int64_t>(n);
}

inline std::int64_t xnor_popcount_dot(const BitTensor& a, std::size_t ra, const BitTensor& b,
                                      std::size_t rb) {
    if (a.row_length() != b.row_length())
        throw ShapeError("xnor_popcount_dot: length mismatch " + std::to_string(a.row_length()) +
                         " vs " + std::to_string(b.row_length()));
    return xnor_popcount_dot(a.row(ra), b.row(rb), a.row_length());
}

/// As above, but only positions with a set bit in `valid` take part; the
/// rest count as 0 (zero padding of a convolution).
inline std::int64_t xnor_popcount_dot_masked(std::span<const Word> a, std::span<const Word> b,
                                             std::span<const Word> valid) {
    if (a.size() != b.size() || a.size() != valid.size())
        throw ShapeError("xnor_popcount_dot_masked: length mismatch");
    std::int64_t pc = 0, nv = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        pc += std::popcount(~(a[i] ^ b[i]) & valid[i]);
        nv += std::popcount(valid[i]);
    }
    return 2 * pc - nv;
}

// ---- packed layers ---------------------------------------------------------

/// sign(W) packed per output row plus the per-row scale alpha.
struct PackedWeights {
    BitTensor bits;
    std::vector<float> alpha;

    static PackedWeights from(const Tensor& w) {
        auto b = binarize_weights(w);
        return {pack(b.signs.reshaped({w.dim(0), w.size() / w.dim(0)})), std::move(b.alpha)};
    }
};

/// y[i, o] = alpha[o] * <x_i, sign(W_o)>, x [N, in] of +-1.
class PackedLinear {
public:
    explicit PackedLinear(PackedWeights w) : w_(std::move(w)) {}

    const PackedWeights& weights() const { return w_; }
    std::size_t in_features() const { return w_.bits.row_length(); }
    std::size_t out_features() const { return w_.bits.rows(); }

    Tensor forward(const BitTensor& x) const {
        if (x.row_length() != in_features())
            throw ShapeError("packed linear: expected rows of " + std::to_string(in_features()) +
                             " bits, got " + std::to_string(x.row_length()));
        const std::size_t n = x.rows(), out = out_features();
        Tensor y({n, out});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t o = 0; o < out; ++o)
                y[i * out + o] =
                    static_cast<float>(xnor_popcount_dot(x, i, w_.bits, o)) * w_.alpha[o];
        return y;
    }

private:
    PackedWeights w_;
};

/// Square-kernel convolution over +-1 input with zero padding. Each output
/// position gathers its patch into a packed row plus a mask of in-range taps.
class PackedConv2d {
public:
    PackedConv2d(PackedWeights w, std::size_t in_c, std::size_t kernel, std::size_t stride,
                 std::size_t pad)
        : w_(std::move(w)), in_c_(in_c), kernel_(kernel), stride_(stride), pad_(pad) {
        if (w_.bits.row_length() != in_c * kernel * kernel)
            throw ShapeError("packed conv: weight rows do not match C*K*K");
    }

    const PackedWeights& weights() const { return w_; }
    std::size_t in_channels() const { return in_c_; }
    std::size_t out_channels() const { return w_.bits.rows(); }
    std::size_t kernel() const { return kernel_; }
    std::size_t stride() const { return stride_; }
    std::size_t pad() const { return pad_; }

    /// x has logical shape [N, C, H, W].
    Tensor forward(const BitTensor& x) const {
        const auto& s = x.shape();
        if (s.size() != 4 || s[1] != in_c_)
            throw ShapeError("packed conv: expected [N," + std::to_string(in_c_) +
                             ",H,W], got " + to_string(s));
        const auto g = ConvGeometry::make(s[1], s[2], s[3], kernel_, stride_, pad_);
        const std::size_t P = g.positions(), K = g.patch(), wpr = words_for(K);
        const std::size_t n = s[0], oc = out_channels(), plane = g.in_h * g.in_w;

        // Per position: source bit index for every tap, or npos when padded.
        constexpr std::size_t npos = static_cast<std::size_t>(-1);
        std::vector<std::size_t> src(P * K, npos);
        std::vector<Word> valid(P * wpr, 0);
        for (std::size_t oy = 0; oy < g.out_h; ++oy)
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                const std::size_t p = oy * g.out_w + ox;
                for (std::size_t c = 0; c < g.in_c; ++c)
                    for (std::size_t ky = 0; ky < g.kernel; ++ky)
                        for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                            static_cast<std::ptrdiff_t>(g.pad);
                            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                            static_cast<std::ptrdiff_t>(g.pad);
                            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h) ||
                                ix >= static_cast<std::ptrdiff_t>(g.in_w))
                                continue;
                            const std::size_t k = (c * g.kernel + ky) * g.kernel + kx;
                            src[p * K + k] = c * plane + static_cast<std::size_t>(iy) * g.in_w +
                                             static_cast<std::size_t>(ix);
                            valid[p * wpr + k / kWordBits] |= Word{1} << (k % kWordBits);
                        }
            }

        Tensor y({n, oc, g.out_h, g.out_w});
        std::vector<Word> patch(wpr);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < P; ++p) {
                std::fill(patch.begin(), patch.end(), Word{0});
                for (std::size_t k = 0; k < K; ++k) {
                    const std::size_t b = src[p * K + k];
                    if (b != npos && x.get(i, b)) patch[k / kWordBits] |= Word{1} << (k % kWordBits);
                }
                const std::span<const Word> m(valid.data() + p * wpr, wpr);
                for (std::size_t o = 0; o < oc; ++o)
                    y[(i * oc + o) * P + p] =
                        static_cast<float>(xnor_popcount_dot_masked(patch, w_.bits.row(o), m)) *
                        w_.alpha[o];
            }
        return y;
    }

private:
    PackedWeights w_;
    std::size_t in_c_, kernel_, stride_, pad_;
};

// ---- packed model ----------------------------------------------------------

namespace packed {

/// Real-input dense layer run through the standard path.
struct Dense {
    Tensor weight;
    WeightMode mode;
};
struct Conv {
    Tensor weight;
    WeightMode mode;
    std::size_t stride, pad;
};
/// Eval-mode batch norm as y = x * scale + shift.
struct Affine {
    std::vector<float> scale, shift;
};
/// Binary activation at threshold 0; thresholds are kept only to refuse
/// unfolded models.
struct Sign {
    std::vector<float> threshold;
};
struct Linear {
    PackedLinear layer;
};
struct Conv2d {
    PackedConv2d layer;
};
struct MaxPool {};
struct AvgPool {};
struct Flatten {};

using Stage = std::variant<Dense, Conv, Affine, Sign, Linear, Conv2d, MaxPool, AvgPool, Flatten>;

enum class Kind : std::uint32_t {
    Dense = 1,
    Conv = 2,
    Affine = 3,
    Sign = 4,
    Linear = 5,
    Conv2d = 6,
    MaxPool = 7,
    AvgPool = 8,
    Flatten = 9,
};

}  // namespace packed

inline constexpr char kPackedMagic[9] = "BNNPACK\0";
inline constexpr std::uint32_t kPackedVersion = 1;

/// Inference-only network in which every binary-input, binary-weight layer
/// runs on packed bits. Immutable once built; forward() is const.
class PackedModel {
public:
    std::size_t in_channels = 1, in_height = 28, in_width = 28, num_classes = 10;
    std::vector<packed::Stage> stages;

    std::size_t packed_layer_count() const {
        std::size_t n = 0;
        for (const auto& s : stages)
            n += std::holds_alternative<packed::Linear>(s) || std::holds_alternative<packed::Conv2d>(s);
        return n;
    }

    /// Refuses unfolded thresholds and checks padding bits of packed weights.
    void validate() const {
        for (const auto& s : stages) {
            if (const auto* sg = std::get_if<packed::Sign>(&s)) {
                for (float t : sg->threshold)
                    if (t != 0.0f)
                        throw ConfigError(
                            "packed model has an unfolded threshold; export must fold first");
            } else if (const auto* l = std::get_if<packed::Linear>(&s)) {
                l->layer.weights().bits.validate_padding();
            } else if (const auto* c = std::get_if<packed::Conv2d>(&s)) {
                c->layer.weights().bits.validate_padding();
            }
        }
    }

    /// Logits for x [N, C, H, W]. When `binary_acts` is given, the output of
    /// every sign stage is appended to it.
    Tensor forward(const Tensor& x, std::vector<Tensor>* binary_acts = nullptr) const {
        Tensor h = x;
        for (const auto& stage : stages) {
            h = std::visit(
                [&](const auto& s) -> Tensor {
                    using S = std::decay_t<decltype(s)>;
                    if constexpr (std::is_same_v<S, packed::Dense>) {
                        if (s.mode == WeightMode::Real) return dense_forward<float>(h, s.weight, {});
                        auto b = binarize_weights(s.weight);
                        return dense_forward<float>(h, b.signs, b.alpha);
                    } else if constexpr (std::is_same_v<S, packed::Conv>) {
                        if (s.mode == WeightMode::Real)
                            return conv_forward<float>(h, s.weight, {}, s.stride, s.pad);
                        auto b = binarize_weights(s.weight);
                        return conv_forward<float>(h, b.signs, b.alpha, s.stride, s.pad);
                    } else if constexpr (std::is_same_v<S, packed::Affine>) {
                        if (channel_layout(h.shape()).channels != s.scale.size())
                            throw ShapeError("packed affine: channel mismatch for " +
                                             to_string(h.shape()));
                        Tensor y(h.shape());
                        BatchNorm<float>::apply_affine(h, AffineParams<float>{s.scale, s.shift}, y);
                        return y;
                    } else if constexpr (std::is_same_v<S, packed::Sign>) {
                        for (float t : s.threshold)
                            if (t != 0.0f)
                                throw ConfigError(
                                    "packed model has an unfolded threshold; export must fold "
                                    "first");
                        Tensor y(h.shape());
                        for (std::size_t i = 0; i < h.size(); ++i) y[i] = h[i] > 0.0f ? 1.0f : -1.0f;
                        if (binary_acts) binary_acts->push_back(y);
                        return y;
                    } else if constexpr (std::is_same_v<S, packed::Linear>) {
                        return s.layer.forward(pack(h));
                    } else if constexpr (std::is_same_v<S, packed::Conv2d>) {
                        return s.layer.forward(pack(h));
                    } else if constexpr (std::is_same_v<S, packed::MaxPool>) {
                        return maxpool2x2(h).out;
                    } else if constexpr (std::is_same_v<S, packed::AvgPool>) {
                        return avgpool2x2(h);
                    } else {
                        return h.reshaped({h.dim(0), h.size() / h.dim(0)});
                    }
                },
                stage);
        }
        return h;
    }
};

// ---- packed file format ----------------------------------------------------

namespace detail {

inline void write_tensor(io::Writer& w, const Tensor& t) {
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.data()) w.f32(v);
}

inline Tensor read_tensor(io::Reader& r) {
    const auto rank = r.u32();
    if (rank == 0 || rank > 8) r.fail("bad rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
        d = r.u32();
        if (d == 0) r.fail("zero dimension");
        n *= d;
    }
    r.need(n * 4);
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32();
    return Tensor(std::move(shape), std::move(data));
}

inline void write_floats(io::Writer& w, const std::vector<float>& v) {
    w.u32(static_cast<std::uint32_t>(v.size()));
    for (float f : v) w.f32(f);
}

inline std::vector<float> read_floats(io::Reader& r) {
    const auto n = r.u32();
    r.need(std::size_t{n} * 4);
    std::vector<float> v(n);
    for (auto& f : v) f = r.f32();
    return v;
}

inline void write_packed(io::Writer& w, const PackedWeights& p) {
    w.u32(static_cast<std::uint32_t>(p.bits.rows()));
    w.u32(static_cast<std::uint32_t>(p.bits.row_length()));
    for (Word word : p.bits.words()) w.u64(word);
    write_floats(w, p.alpha);
}

inline PackedWeights read_packed(io::Reader& r) {
    const auto rows = r.u32(), len = r.u32();
    if (rows == 0 || len == 0) r.fail("empty packed weights");
    PackedWeights p{BitTensor({rows, len}), {}};
    r.need(p.bits.words().size() * 8);
    for (auto& word : p.bits.words()) word = r.u64();
    try {
        p.bits.validate_padding();
    } catch (const Error& e) {
        r.fail(e.what());
    }
    p.alpha = read_floats(r);
    if (p.alpha.size() != rows) r.fail("alpha count does not match rows");
    return p;
}

}  // namespace detail

/// Layout (little-endian): magic "BNNPACK\0", u32 version, u32 in_c, in_h,
/// in_w, num_classes, u32 stage count, then per stage a u32 kind and its
/// payload.
inline std::vector<std::uint8_t> serialize(const PackedModel& m) {
    io::Writer w;
    w.bytes(kPackedMagic, 8);
    w.u32(kPackedVersion);
    for (auto v : {m.in_channels, m.in_height, m.in_width, m.num_classes})
        w.u32(static_cast<std::uint32_t>(v));
    w.u32(static_cast<std::uint32_t>(m.stages.size()));
    for (const auto& stage : m.stages) {
        std::visit(
            [&](const auto& s) {
                using S = std::decay_t<decltype(s)>;
                using packed::Kind;
                if constexpr (std::is_same_v<S, packed::Dense>) {
                    w.u32(static_cast<std::uint32_t>(Kind::Dense));
                    w.u32(static_cast<std::uint32_t>(s.mode));
                    detail::write_tensor(w, s.weight);
                } else if constexpr (std::is_same_v<S, packed::Conv>) {
                    w.u32(static_cast<std::uint32_t>(Kind::Conv));
                    w.u32(static_cast<std::uint32_t>(s.mode));
                    w.u32(static_cast<std::uint32_t>(s.stride));
                    w.u32(static_cast<std::uint32_t>(s.pad));
                    detail::write_tensor(w, s.weight);
                } else if constexpr (std::is_same_v<S, packed::Affine>) {
                    w.u32(static_cast<std::uint32_t>(Kind::Affine));
                    detail::write_floats(w, s.scale);
                    detail::write_floats(w, s.shift);
                } else if constexpr (std::is_same_v<S, packed::Sign>) {
                    w.u32(static_cast<std::uint32_t>(Kind::Sign));
                    detail::write_floats(w, s.threshold);
                } else if constexpr (std::is_same_v<S, packed::Linear>) {
                    w.u32(static_cast<std::uint32_t>(Kind::Linear));
                    detail::write_packed(w, s.layer.weights());
                } else if constexpr (std::is_same_v<S, packed::Conv2d>) {
                    w.u32(static_cast<std::uint32_t>(Kind::Conv2d));
                    w.u32(static_cast<std::uint32_t>(s.layer.in_channels()));
                    w.u32(static_cast<std::uint32_t>(s.layer.kernel()));
                    w.u32(static_cast<std::uint32_t>(s.layer.stride()));
                    w.u32(static_cast<std::uint32_t>(s.layer.pad()));
                    detail::write_packed(w, s.layer.weights());
                } else if constexpr (std::is_same_v<S, packed::MaxPool>) {
                    w.u32(static_cast<std::uint32_t>(Kind::MaxPool));
                } else if constexpr (std::is_same_v<S, packed::AvgPool>) {
                    w.u32(static_cast<std::uint32_t>(Kind::AvgPool));
                } else {
                    w.u32(static_cast<std::uint32_t>(Kind::Flatten));
                }
            },
            stage);
    }
    return w.buffer();
}

inline PackedModel deserialize_packed(std::vector<std::uint8_t> bytes, const std::string& what) {
    io::Reader r(std::move(bytes), what);
    r.expect_magic(kPackedMagic);
    const auto version = r.u32();
    if (version != kPackedVersion)
        r.fail("unsupported packed-model version " + std::to_string(version));
    PackedModel m;
    m.in_channels = r.u32();
    m.in_height = r.u32();
    m.in_width = r.u32();
    m.num_classes = r.u32();
    const auto count = r.u32();
    auto read_mode = [&] {
        const auto v = r.u32();
        if (v > 1) r.fail("bad weight mode " + std::to_string(v));
        return static_cast<WeightMode>(v);
    };
    for (std::uint32_t i = 0; i < count; ++i) {
        using packed::Kind;
        const auto kind = static_cast<Kind>(r.u32());
        switch (kind) {
            case Kind::Dense: {
                const auto mode = read_mode();
                m.stages.emplace_back(packed::Dense{detail::read_tensor(r), mode});
                break;
            }
            case Kind::Conv: {
                const auto mode = read_mode();
                const std::size_t stride = r.u32(), pad = r.u32();
                m.stages.emplace_back(packed::Conv{detail::read_tensor(r), mode, stride, pad});
                break;
            }
            case Kind::Affine: {
                auto scale = detail::read_floats(r);
                auto shift = detail::read_floats(r);
                if (scale.size() != shift.size()) r.fail("affine scale/shift size mismatch");
                m.stages.emplace_back(packed::Affine{std::move(scale), std::move(shift)});
                break;
            }
            case Kind::Sign: m.stages.emplace_back(packed::Sign{detail::read_floats(r)}); break;
            case Kind::Linear:
                m.stages.emplace_back(packed::Linear{PackedLinear(detail::read_packed(r))});
                break;
            case Kind::Conv2d: {
                const std::size_t in_c = r.u32(), k = r.u32(), stride = r.u32(), pad = r.u32();
                auto w = detail::read_packed(r);
                if (w.bits.row_length() != in_c * k * k) r.fail("packed conv geometry mismatch");
                m.stages.emplace_back(packed::Conv2d{PackedConv2d(std::move(w), in_c, k, stride, pad)});
                break;
            }
            case Kind::MaxPool: m.stages.emplace_back(packed::MaxPool{}); break;
            case Kind::AvgPool: m.stages.emplace_back(packed::AvgPool{}); break;
            case Kind::Flatten: m.stages.emplace_back(packed::Flatten{}); break;
            default: r.fail("unknown stage kind " + std::to_string(static_cast<std::uint32_t>(kind)));
        }
    }
    if (!r.at_end()) r.fail("trailing bytes");
    return m;
}

inline void save_packed(const std::string& path, const PackedModel& m) {
    io::write_file(path, serialize(m));
}

inline PackedModel load_packed(const std::string& path) {
    return deserialize_packed(io::read_file(path), path);
}

// ---- export ----------------------------------------------------------------

/// Folds every batch norm that directly feeds a sign activation in the top
/// level of `model`. Returns the number of folded pairs.
template <class T>
std::size_t fold_all_thresholds(Model<T>& model) {
    auto& root = model.root();
    std::size_t folded = 0;
    for (std::size_t i = 0; i + 1 < root.size(); ++i)
        if (dynamic_cast<BatchNorm<T>*>(&root.at(i)) && dynamic_cast<SignAct<T>*>(&root.at(i + 1))) {
            fold_threshold(root, i);
            ++folded;
        }
    return folded;
}

/// A copy of `model` with all thresholds folded into their batch norms.
inline Model<float> folded_copy(Model<float>& model) {
    auto copy = build<float>(model.spec(), 0);
    apply_checkpoint(copy, model_tensors(model));
    fold_all_thresholds(copy);
    return copy;
}

/// Converts a trained model into packed form. Thresholds are folded into the
/// preceding batch norm; the caller's model is left untouched.
inline PackedModel export_packed(Model<float>& model) {
    if (model.spec().precision == Precision::Fp)
        throw ConfigError("export: model has full-precision weights, nothing to pack");
    auto folded = folded_copy(model);
    auto& root = folded.root();

    PackedModel pm;
    pm.in_channels = model.spec().in_channels;
    pm.in_height = model.spec().in_height;
    pm.in_width = model.spec().in_width;
    pm.num_classes = model.spec().num_classes;

    bool binary_input = false;
    for (std::size_t i = 0; i < root.size(); ++i) {
        Layer<float>& l = root.at(i);
        const bool was_binary = binary_input;
        binary_input = false;
        if (auto* bn = dynamic_cast<BatchNorm<float>*>(&l)) {
            auto a = bn->eval_affine();
            pm.stages.emplace_back(packed::Affine{std::move(a.scale), std::move(a.shift)});
        } else if (auto* s = dynamic_cast<SignAct<float>*>(&l)) {
            if (i == 0 || !dynamic_cast<BatchNorm<float>*>(&root.at(i - 1)))
                throw ConfigError("export: sign activation " + s->name() +
                                  " is not preceded by a batch norm");
            const auto& th = s->threshold().value;
            pm.stages.emplace_back(packed::Sign{std::vector<float>(th.data().begin(), th.data().end())});
            binary_input = true;
        } else if (auto* lin = dynamic_cast<Linear<float>*>(&l)) {
            if (was_binary && lin->weight_mode() == WeightMode::Binary)
                pm.stages.emplace_back(packed::Linear{PackedLinear(PackedWeights::from(lin->weight().value))});
            else
                pm.stages.emplace_back(packed::Dense{lin->weight().value, lin->weight_mode()});
        } else if (auto* conv = dynamic_cast<Conv2d<float>*>(&l)) {
            if (was_binary && conv->weight_mode() == WeightMode::Binary)
                pm.stages.emplace_back(packed::Conv2d{
                    PackedConv2d(PackedWeights::from(conv->weight().value), conv->in_channels(),
                                 conv->kernel(), conv->stride(), conv->pad())});
            else
                pm.stages.emplace_back(packed::Conv{conv->weight().value, conv->weight_mode(),
                                                    conv->stride(), conv->pad()});
        } else if (dynamic_cast<MaxPool2<float>*>(&l)) {
            pm.stages.emplace_back(packed::MaxPool{});
        } else if (dynamic_cast<AvgPool2<float>*>(&l)) {
            pm.stages.emplace_back(packed::AvgPool{});
        } else if (dynamic_cast<Flatten<float>*>(&l)) {
            pm.stages.emplace_back(packed::Flatten{});
        } else if (auto* res = dynamic_cast<Residual<float>*>(&l)) {
            if (res->body().size() > 0 && dynamic_cast<SignAct<float>*>(&res->body().at(0)))
                throw ConfigError("export: sign activation " + res->body().at(0).name() +
                                  " is not preceded by a batch norm");
            throw ConfigError("export: unsupported layer " + l.name() + " (" + std::string(l.kind()) + ")");
        } else {
            throw ConfigError("export: unsupported layer " + l.name() + " (" + std::string(l.kind()) + ")");
        }
    }
    if (pm.packed_layer_count() == 0)
        throw ConfigError("export: no binary-input binary-weight layer, nothing to pack");
    pm.validate();
    return pm;
}

}  // namespace bnn
