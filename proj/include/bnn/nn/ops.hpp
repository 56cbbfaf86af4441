#pragma once

// Stateless forward/backward kernels. Layers in layers.hpp wrap these.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "bnn/blas.hpp"
#include "bnn/error.hpp"
#include "bnn/tensor.hpp"

namespace bnn {

/// Channel axis is 1 for both N x C features and N x C x H x W images.
struct ChannelLayout {
    std::size_t batch;
    std::size_t channels;
    std::size_t spatial;
};

inline ChannelLayout channel_layout(const Shape& s) {
    if (s.size() < 2) throw ShapeError("expected a channel axis at position 1, got " + to_string(s));
    std::size_t spatial = 1;
    for (std::size_t i = 2; i < s.size(); ++i) spatial *= s[i];
    return {s[0], s[1], spatial};
}

/// Per-channel sums in a fixed (n, c, spatial) order with a double
/// accumulator. Both the BN bias gradient and the threshold gradient go
/// through here, so the two are bitwise negations of each other.
template <class T>
std::vector<double> channel_sums(const BasicTensor<T>& t) {
    const auto [n, c, hw] = channel_layout(t.shape());
    std::vector<double> sums(c, 0.0);
    const T* p = t.ptr();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (std::size_t k = 0; k < hw; ++k) s += p[k];
            sums[ch] += s;
            p += hw;
        }
    return sums;
}

// ---- sign activation -------------------------------------------------------

/// -1 where x <= th, +1 where x > th. `th` holds one value or one per channel.
template <class T>
BasicTensor<T> sign_forward(const BasicTensor<T>& x, const BasicTensor<T>& th) {
    BasicTensor<T> y(x.shape());
    if (th.size() == 1) {
        const T t = th[0];
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > t ? T{1} : T{-1};
        return y;
    }
    const auto [n, c, hw] = channel_layout(x.shape());
    if (th.size() != c)
        throw ShapeError("sign_forward: " + std::to_string(th.size()) + " thresholds for " +
                         std::to_string(c) + " channels");
    for (std::size_t i = 0, off = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T t = th[ch];
            for (std::size_t k = 0; k < hw; ++k, ++off) y[off] = x[off] > t ? T{1} : T{-1};
        }
    return y;
}

template <class T>
struct SignGrads {
    BasicTensor<T> grad_x;
    BasicTensor<T> grad_th;  // same shape as the thresholds
};

/// Hardtanh straight-through estimator centred on the threshold:
/// grad_x = grad_out where |x - th| <= clip, else 0; grad_th = -sum(grad_x).
template <class T>
SignGrads<T> sign_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& x,
                           const BasicTensor<T>& th, double clip) {
    if (grad_out.shape() != x.shape()) throw ShapeError("sign_backward: gradient shape mismatch");
    SignGrads<T> g{BasicTensor<T>(x.shape()), BasicTensor<T>(th.shape())};
    if (th.size() == 1) {
        const double t = th[0];
        for (std::size_t i = 0; i < x.size(); ++i)
            g.grad_x[i] = std::abs(static_cast<double>(x[i]) - t) <= clip ? grad_out[i] : T{0};
        double s = 0.0;
        if (x.rank() < 2) {
            for (std::size_t i = 0; i < x.size(); ++i) s += g.grad_x[i];
        } else {
            for (double v : channel_sums(g.grad_x)) s += v;
        }
        g.grad_th[0] = static_cast<T>(-s);
        return g;
    }
    const auto [n, c, hw] = channel_layout(x.shape());
    if (th.size() != c) throw ShapeError("sign_backward: threshold count mismatch");
    for (std::size_t i = 0, off = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double t = th[ch];
            for (std::size_t k = 0; k < hw; ++k, ++off)
                g.grad_x[off] =
                    std::abs(static_cast<double>(x[off]) - t) <= clip ? grad_out[off] : T{0};
        }
    const auto sums = channel_sums(g.grad_x);
    for (std::size_t ch = 0; ch < c; ++ch) g.grad_th[ch] = static_cast<T>(-sums[ch]);
    return g;
}

// ---- generalized hardtanh --------------------------------------------------

/// clamp(x - x_offset, -range, range) + y_offset. (0, 0, 1) is plain hardtanh;
/// (3, 3, 3) is ReLU6.
struct GenHardtanhConfig {
    double x_offset = 0.0;
    double y_offset = 0.0;
    double range = 1.0;

    void validate() const {
        if (!(range > 0.0)) throw ConfigError("hardtanh range must be > 0");
    }
    bool operator==(const GenHardtanhConfig&) const = default;
};

template <class T>
BasicTensor<T> gen_hardtanh_forward(const BasicTensor<T>& x, const GenHardtanhConfig& cfg) {
    cfg.validate();
    BasicTensor<T> y(x.shape());
    const T xo = static_cast<T>(cfg.x_offset), yo = static_cast<T>(cfg.y_offset);
    const T r = static_cast<T>(cfg.range);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::clamp<T>(x[i] - xo, -r, r) + yo;
    return y;
}

template <class T>
BasicTensor<T> gen_hardtanh_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& x,
                                     const GenHardtanhConfig& cfg) {
    BasicTensor<T> g(x.shape());
    const T xo = static_cast<T>(cfg.x_offset), r = static_cast<T>(cfg.range);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T u = x[i] - xo;
        g[i] = (u > -r && u < r) ? grad_out[i] : T{0};
    }
    return g;
}

// ---- leaky / parametric ReLU -------------------------------------------------

template <class T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& x, double slope) {
    BasicTensor<T> y(x.shape());
    const T s = static_cast<T>(slope);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : s * x[i];
    return y;
}

/// y = x for x > 0, slope[c] * x otherwise.
template <class T>
BasicTensor<T> prelu(const BasicTensor<T>& x, const BasicTensor<T>& slope) {
    const auto [n, c, hw] = channel_layout(x.shape());
    if (slope.size() != c) throw ShapeError("prelu: slope count mismatch");
    BasicTensor<T> y(x.shape());
    for (std::size_t i = 0, off = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t k = 0; k < hw; ++k, ++off)
                y[off] = x[off] > T{0} ? x[off] : slope[ch] * x[off];
    return y;
}

// ---- weight binarization ---------------------------------------------------

template <class T>
struct BinarizedWeights {
    BasicTensor<T> signs;  // +-1, sign(0) = +1
    std::vector<T> alpha;  // mean |W| per output channel
};

template <class T>
BinarizedWeights<T> binarize_weights(const BasicTensor<T>& w) {
    const std::size_t out = w.dim(0);
    const std::size_t per = w.size() / out;
    BinarizedWeights<T> b{BasicTensor<T>(w.shape()), std::vector<T>(out)};
    for (std::size_t o = 0; o < out; ++o) {
        double abs_sum = 0.0;
        for (std::size_t k = 0; k < per; ++k) {
            const T v = w[o * per + k];
            b.signs[o * per + k] = v >= T{0} ? T{1} : T{-1};
            abs_sum += std::abs(static_cast<double>(v));
        }
        b.alpha[o] = static_cast<T>(abs_sum / static_cast<double>(per));
    }
    return b;
}

// ---- convolution lowering --------------------------------------------------

struct ConvGeometry {
    std::size_t in_c, in_h, in_w;
    std::size_t kernel, stride, pad;
    std::size_t out_h, out_w;

    static ConvGeometry make(std::size_t c, std::size_t h, std::size_t w, std::size_t k,
                             std::size_t stride, std::size_t pad) {
        if (stride == 0 || k == 0) throw ShapeError("conv: kernel and stride must be >= 1");
        if (h + 2 * pad < k || w + 2 * pad < k)
            throw ShapeError("conv: kernel larger than padded input");
        return {c, h, w, k, stride, pad, (h + 2 * pad - k) / stride + 1,
                (w + 2 * pad - k) / stride + 1};
    }
    std::size_t patch() const { return in_c * kernel * kernel; }
    std::size_t positions() const { return out_h * out_w; }
};

/// One image (C x H x W) to columns (C*K*K x OH*OW); out-of-range taps are 0.
template <class T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
    const std::size_t P = g.positions();
    for (std::size_t c = 0; c < g.in_c; ++c)
        for (std::size_t ky = 0; ky < g.kernel; ++ky)
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * P;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                        static_cast<std::ptrdiff_t>(g.pad);
                        const bool inside = iy >= 0 && ix >= 0 &&
                                            iy < static_cast<std::ptrdiff_t>(g.in_h) &&
                                            ix < static_cast<std::ptrdiff_t>(g.in_w);
                        row[oy * g.out_w + ox] =
                            inside ? img[(c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
                                         static_cast<std::size_t>(ix)]
                                   : T{0};
                    }
                }
            }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* img) {
    const std::size_t P = g.positions();
    for (std::size_t c = 0; c < g.in_c; ++c)
        for (std::size_t ky = 0; ky < g.kernel; ++ky)
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * P;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                        static_cast<std::ptrdiff_t>(g.pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
                        img[(c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
                            static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
                    }
                }
            }
}

/// y = (x W^T) * row_scale, x [N, in], W [out, in]. An empty row_scale
/// means 1. Binary layers pass +-1 weights and alpha as the row scale.
template <class T>
BasicTensor<T> dense_forward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                             std::span<const T> row_scale) {
    const std::size_t in = w.dim(1), out = w.dim(0);
    if (x.rank() != 2 || x.dim(1) != in)
        throw ShapeError("dense: expected [N," + std::to_string(in) + "], got " +
                         to_string(x.shape()));
    const std::size_t n = x.dim(0);
    BasicTensor<T> y({n, out});
    blas::gemm(false, true, static_cast<int>(n), static_cast<int>(out), static_cast<int>(in), T{1},
               x.ptr(), static_cast<int>(in), w.ptr(), static_cast<int>(in), T{0}, y.ptr(),
               static_cast<int>(out));
    if (!row_scale.empty())
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t o = 0; o < out; ++o) y[i * out + o] *= row_scale[o];
    return y;
}

/// Convolution without bias, x [N,C,H,W], w [OC,C,K,K], output rows scaled
/// per output channel as in dense_forward.
template <class T>
BasicTensor<T> conv_forward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                            std::span<const T> row_scale, std::size_t stride, std::size_t pad) {
    if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3))
        throw ShapeError("conv2d: incompatible input " + to_string(x.shape()) + " and kernel " +
                         to_string(w.shape()));
    const auto g = ConvGeometry::make(x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, pad);
    const std::size_t n = x.dim(0), oc = w.dim(0), P = g.positions(), K = g.patch();
    BasicTensor<T> y({n, oc, g.out_h, g.out_w});
    std::vector<T> col(K * P);
    for (std::size_t i = 0; i < n; ++i) {
        im2col(x.ptr() + i * g.in_c * g.in_h * g.in_w, g, col.data());
        T* yi = y.ptr() + i * oc * P;
        blas::gemm(false, false, static_cast<int>(oc), static_cast<int>(P), static_cast<int>(K),
                   T{1}, w.ptr(), static_cast<int>(K), col.data(), static_cast<int>(P), T{0}, yi,
                   static_cast<int>(P));
        if (!row_scale.empty())
            for (std::size_t o = 0; o < oc; ++o)
                for (std::size_t p = 0; p < P; ++p) yi[o * P + p] *= row_scale[o];
    }
    return y;
}

/// Plain real-valued convolution, no bias.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, std::size_t stride,
                      std::size_t pad) {
    return conv_forward<T>(x, w, {}, stride, pad);
}

// ---- pooling ---------------------------------------------------------------

template <class T>
struct PoolResult {
    BasicTensor<T> out;
    std::vector<std::size_t> argmax;  // input offset per output element (max only)
};

inline void require_even_spatial(const Shape& s, const char* who) {
    if (s.size() != 4) throw ShapeError(std::string(who) + ": expected NCHW input");
    if (s[2] % 2 != 0 || s[3] % 2 != 0)
        throw ShapeError(std::string(who) + ": odd spatial size " + to_string(s));
}

/// 2x2 stride-2 max pooling; ties go to the first element in row-major
/// window order.
template <class T>
PoolResult<T> maxpool2x2(const BasicTensor<T>& x) {
    require_even_spatial(x.shape(), "maxpool2x2");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    PoolResult<T> r{BasicTensor<T>({n, c, h / 2, w / 2}), {}};
    r.argmax.resize(r.out.size());
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const std::size_t base = plane * h * w;
        for (std::size_t oy = 0; oy < h / 2; ++oy)
            for (std::size_t ox = 0; ox < w / 2; ++ox, ++o) {
                const std::size_t taps[4] = {base + (2 * oy) * w + 2 * ox,
                                             base + (2 * oy) * w + 2 * ox + 1,
                                             base + (2 * oy + 1) * w + 2 * ox,
                                             base + (2 * oy + 1) * w + 2 * ox + 1};
                std::size_t best = taps[0];
                for (int k = 1; k < 4; ++k)
                    if (x[taps[k]] > x[best]) best = taps[k];
                r.out[o] = x[best];
                r.argmax[o] = best;
            }
    }
    return r;
}

template <class T>
BasicTensor<T> maxpool2x2_backward(const BasicTensor<T>& grad_out,
                                   const std::vector<std::size_t>& argmax, const Shape& in_shape) {
    BasicTensor<T> g(in_shape);
    for (std::size_t o = 0; o < grad_out.size(); ++o) g[argmax[o]] += grad_out[o];
    return g;
}

template <class T>
BasicTensor<T> avgpool2x2(const BasicTensor<T>& x) {
    require_even_spatial(x.shape(), "avgpool2x2");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    BasicTensor<T> y({n, c, h / 2, w / 2});
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const T* p = x.ptr() + plane * h * w;
        for (std::size_t oy = 0; oy < h / 2; ++oy)
            for (std::size_t ox = 0; ox < w / 2; ++ox, ++o) {
                const T* q = p + 2 * oy * w + 2 * ox;
                y[o] = (q[0] + q[1] + q[w] + q[w + 1]) * T{0.25};
            }
    }
    return y;
}

template <class T>
BasicTensor<T> avgpool2x2_backward(const BasicTensor<T>& grad_out, const Shape& in_shape) {
    BasicTensor<T> g(in_shape);
    const std::size_t h = in_shape[2], w = in_shape[3];
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < in_shape[0] * in_shape[1]; ++plane) {
        T* p = g.ptr() + plane * h * w;
        for (std::size_t oy = 0; oy < h / 2; ++oy)
            for (std::size_t ox = 0; ox < w / 2; ++ox, ++o) {
                const T v = grad_out[o] * T{0.25};
                T* q = p + 2 * oy * w + 2 * ox;
                q[0] += v;
                q[1] += v;
                q[w] += v;
                q[w + 1] += v;
            }
    }
    return g;
}

// ---- loss ------------------------------------------------------------------

template <class T>
struct LossResult {
    double loss;
    BasicTensor<T> grad;  // d(mean loss)/d(logits)
    std::size_t correct;  // argmax hits, first index wins ties
};

/// Mean softmax cross-entropy over the batch; grad = (softmax - onehot) / N.
template <class T>
LossResult<T> softmax_xent(const BasicTensor<T>& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size())
        throw ShapeError("softmax_xent: logits " + to_string(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    LossResult<T> r{0.0, BasicTensor<T>(logits.shape()), 0};
    std::vector<double> p(k);
    for (std::size_t i = 0; i < n; ++i) {
        const T* z = logits.ptr() + i * k;
        const int label = labels[i];
        if (label < 0 || static_cast<std::size_t>(label) >= k)
            throw ShapeError("softmax_xent: label " + std::to_string(label) + " out of range");
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (z[j] > z[best]) best = j;
        if (best == static_cast<std::size_t>(label)) ++r.correct;
        const double m = z[best];
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += p[j] = std::exp(static_cast<double>(z[j]) - m);
        const double log_s = std::log(s);
        r.loss += log_s - (static_cast<double>(z[label]) - m);
        for (std::size_t j = 0; j < k; ++j) {
            const double soft = p[j] / s - (static_cast<std::size_t>(label) == j ? 1.0 : 0.0);
            r.grad[i * k + j] = static_cast<T>(soft / static_cast<double>(n));
        }
    }
    r.loss /= static_cast<double>(n);
    return r;
}

// ---- threshold folding -----------------------------------------------------

/// beta' = beta - th (th broadcast when scalar); the threshold becomes 0.
/// gamma * xhat + beta <= th  <=>  gamma * xhat + beta' <= 0.
template <class T>
std::vector<T> fold_threshold(std::span<const T> beta, std::span<const T> th) {
    if (th.size() != beta.size() && th.size() != 1)
        throw ShapeError("fold_threshold: threshold count does not match BN channels");
    std::vector<T> folded(beta.size());
    for (std::size_t c = 0; c < beta.size(); ++c)
        folded[c] = beta[c] - th[th.size() == 1 ? 0 : c];
    return folded;
}

}  // namespace bnn
