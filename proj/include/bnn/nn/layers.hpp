#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bnn/blas.hpp"
#include "bnn/nn/ops.hpp"
#include "bnn/tensor.hpp"

namespace bnn {

enum class Mode { Train, Eval };
enum class WeightMode { Real, Binary };

template <class T>
struct Param {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    bool trainable = true;

    explicit Param(BasicTensor<T> v, bool trainable_ = true)
        : value(std::move(v)), grad(value.shape()), trainable(trainable_) {}

    void zero_grad() { grad.fill(T{0}); }
};

template <class T>
struct NamedTensor {
    std::string name;
    BasicTensor<T>* tensor;
};

/// A network node with a hand-written backward pass. forward() caches what
/// backward() needs, so one instance serves one training step at a time.
template <class T>
class Layer {
public:
    virtual ~Layer() = default;

    virtual BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) = 0;
    virtual BasicTensor<T> backward(const BasicTensor<T>& grad_out) = 0;
    virtual std::string_view kind() const = 0;

    virtual void collect_params(std::vector<Param<T>*>&) {}
    /// Every persistent tensor (parameters and buffers), fully named.
    virtual void collect_state(std::vector<NamedTensor<T>>&) {}
    /// Direct children of container layers.
    virtual void for_each_child(const std::function<void(Layer<T>&)>&) {}
    virtual void set_name(std::string n) { name_ = std::move(n); }

    const std::string& name() const { return name_; }

protected:
    std::string name_;
};

/// Visits `root` and all of its descendants depth-first, pre-order.
template <class T>
void walk(Layer<T>& root, const std::function<void(Layer<T>&)>& fn) {
    fn(root);
    root.for_each_child([&](Layer<T>& child) { walk(child, fn); });
}

// ---- dense / convolution ---------------------------------------------------

/// Shared weight handling for Linear and Conv2d. In binary mode the forward
/// pass uses alpha_c * sign(W_c); the gradient w.r.t. that effective weight
/// is written to W unchanged (straight-through, no clipping).
template <class T>
class WeightedLayer : public Layer<T> {
public:
    WeightedLayer(BasicTensor<T> weight, WeightMode mode)
        : weight_(std::move(weight)), mode_(mode) {}

    Param<T>& weight() { return weight_; }
    const Param<T>& weight() const { return weight_; }
    WeightMode weight_mode() const { return mode_; }
    void set_weight_mode(WeightMode m) { mode_ = m; }
    /// When off, backward() returns zeros for the input gradient. Used for
    /// the network's input layer, whose input gradient is never consumed.
    void set_input_grad(bool on) { input_grad_ = on; }
    bool input_grad() const { return input_grad_; }

    /// alpha_c * sign(W_c) in binary mode, W itself otherwise.
    BasicTensor<T> effective_weight() const {
        if (mode_ == WeightMode::Real) return weight_.value;
        auto b = binarize_weights(weight_.value);
        const std::size_t per = b.signs.size() / b.alpha.size();
        for (std::size_t i = 0; i < b.signs.size(); ++i) b.signs[i] *= b.alpha[i / per];
        return b.signs;
    }

    void collect_params(std::vector<Param<T>*>& out) override { out.push_back(&weight_); }
    void collect_state(std::vector<NamedTensor<T>>& out) override {
        out.push_back({this->name_ + ".weight", &weight_.value});
    }

protected:
    /// Weights fed to the GEMM plus the per-row scale applied afterwards.
    /// Binary mode multiplies +-1 weights first and scales by alpha after, so
    /// +-1 inputs accumulate exact integers before the single rounding.
    struct GemmWeights {
        const BasicTensor<T>* matrix;
        std::vector<T> row_scale;  // empty in real mode
    };

    GemmWeights prepare_weights() {
        if (mode_ == WeightMode::Real) return {&weight_.value, {}};
        auto b = binarize_weights(weight_.value);
        signs_ = std::move(b.signs);
        return {&signs_, std::move(b.alpha)};
    }

    Param<T> weight_;
    WeightMode mode_;
    BasicTensor<T> signs_;
    std::vector<T> row_scale_;  // cached alpha for backward
    bool input_grad_ = true;
};

/// y = x W^T, x [N, in], W [out, in]. No bias; BN follows.
template <class T>
class Linear : public WeightedLayer<T> {
public:
    Linear(std::size_t in, std::size_t out, WeightMode mode, std::uint64_t seed)
        : WeightedLayer<T>(create<T>({out, in}, XavierNormal{seed}), mode) {}

    std::string_view kind() const override { return "linear"; }
    std::size_t in_features() const { return this->weight_.value.dim(1); }
    std::size_t out_features() const { return this->weight_.value.dim(0); }

    BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
        if (x.rank() != 2 || x.dim(1) != in_features())
            throw ShapeError("linear " + this->name_ + ": expected [N," +
                             std::to_string(in_features()) + "], got " + to_string(x.shape()));
        auto w = this->prepare_weights();
        auto y = dense_forward<T>(x, *w.matrix, w.row_scale);
        this->row_scale_ = std::move(w.row_scale);
        input_ = x;
        return y;
    }

    BasicTensor<T> backward(const BasicTensor<T>& g) override {
        const std::size_t n = input_.dim(0), in = in_features(), out = out_features();
        // dW_eff = g^T x
        blas::gemm(true, false, static_cast<int>(out), static_cast<int>(in), static_cast<int>(n),
                   T{1}, g.ptr(), static_cast<int>(out), input_.ptr(), static_cast<int>(in), T{1},
                   this->weight_.grad.ptr(), static_cast<int>(in));
        if (!this->input_grad_) return BasicTensor<T>(input_.shape());
        // dx = g W_eff = (g * alpha) B in binary mode
        const BasicTensor<T>* wmat = &this->weight_.value;
        BasicTensor<T> scaled;
        const T* gp = g.ptr();
        if (this->mode_ == WeightMode::Binary) {
            wmat = &this->signs_;
            scaled = g;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t o = 0; o < out; ++o) scaled[i * out + o] *= this->row_scale_[o];
            gp = scaled.ptr();
        }
        BasicTensor<T> dx({n, in});
        blas::gemm(false, false, static_cast<int>(n), static_cast<int>(in), static_cast<int>(out),
                   T{1}, gp, static_cast<int>(out), wmat->ptr(), static_cast<int>(in), T{0},
                   dx.ptr(), static_cast<int>(in));
        return dx;
    }

private:
    BasicTensor<T> input_;
};

/// Square-kernel 2-D convolution via im2col + GEMM, no bias.
template <class T>
class Conv2d : public WeightedLayer<T> {
public:
    Conv2d(std::size_t in_c, std::size_t out_c, std::size_t kernel, std::size_t stride,
           std::size_t pad, WeightMode mode, std::uint64_t seed)
        : WeightedLayer<T>(create<T>({out_c, in_c, kernel, kernel}, XavierNormal{seed}), mode),
          stride_(stride),
          pad_(pad) {}

    std::string_view kind() const override { return "conv2d"; }
    std::size_t stride() const { return stride_; }
    std::size_t pad() const { return pad_; }
    std::size_t in_channels() const { return this->weight_.value.dim(1); }
    std::size_t out_channels() const { return this->weight_.value.dim(0); }
    std::size_t kernel() const { return this->weight_.value.dim(2); }

    ConvGeometry geometry(const Shape& in) const {
        if (in.size() != 4 || in[1] != in_channels())
            throw ShapeError("conv2d " + this->name_ + ": expected [N," +
                             std::to_string(in_channels()) + ",H,W], got " + to_string(in));
        return ConvGeometry::make(in[1], in[2], in[3], kernel(), stride_, pad_);
    }

    BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
        geom_ = geometry(x.shape());
        auto w = this->prepare_weights();
        auto y = conv_forward<T>(x, *w.matrix, w.row_scale, stride_, pad_);
        this->row_scale_ = std::move(w.row_scale);
        input_ = x;
        return y;
    }

    BasicTensor<T> backward(const BasicTensor<T>& grad) override {
        const auto& g = geom_;
        const std::size_t n = input_.dim(0), oc = out_channels(), P = g.positions(),
                          K = g.patch(), img = g.in_c * g.in_h * g.in_w;
        const bool binary = this->mode_ == WeightMode::Binary;
        const BasicTensor<T>& wmat = binary ? this->signs_ : this->weight_.value;
        BasicTensor<T> dx(input_.shape());
        std::vector<T> dcol(K * P), gscaled(binary ? oc * P : 0);
        col_.resize(K * P);
        for (std::size_t i = 0; i < n; ++i) {
            const T* gi = grad.ptr() + i * oc * P;
            im2col(input_.ptr() + i * img, g, col_.data());
            blas::gemm(false, true, static_cast<int>(oc), static_cast<int>(K), static_cast<int>(P),
                       T{1}, gi, static_cast<int>(P), col_.data(), static_cast<int>(P), T{1},
                       this->weight_.grad.ptr(), static_cast<int>(K));
            if (binary) {
                for (std::size_t o = 0; o < oc; ++o)
                    for (std::size_t p = 0; p < P; ++p)
                        gscaled[o * P + p] = gi[o * P + p] * this->row_scale_[o];
                gi = gscaled.data();
            }
            if (!this->input_grad_) continue;
            blas::gemm(true, false, static_cast<int>(K), static_cast<int>(P), static_cast<int>(oc),
                       T{1}, wmat.ptr(), static_cast<int>(K), gi, static_cast<int>(P), T{0},
                       dcol.data(), static_cast<int>(P));
            col2im_add(dcol.data(), g, dx.ptr() + i * img);
        }
        return dx;
    }

private:
    std::size_t stride_, pad_;
    ConvGeometry geom_{};
    BasicTensor<T> input_;
    std::vector<T> col_;
};

// ---- batch normalization ---------------------------------------------------

template <class T>
struct AffineParams {
    std::vector<T> scale;
    std::vector<T> shift;
};

/// Per-channel batch normalization over every axis except axis 1.
template <class T>
class BatchNorm : public Layer<T> {
public:
    static constexpr double kEps = 1e-5;
    static constexpr double kMomentum = 0.1;

    explicit BatchNorm(std::size_t channels, double eps = kEps, double momentum = kMomentum)
        : gamma_(BasicTensor<T>({channels}, T{1})),
          beta_(BasicTensor<T>({channels}, T{0})),
          running_mean_({channels}, T{0}),
          running_var_({channels}, T{1}),
          eps_(eps),
          momentum_(momentum) {}

    std::string_view kind() const override { return "batchnorm"; }
    std::size_t channels() const { return gamma_.value.size(); }
    Param<T>& gamma() { return gamma_; }
    Param<T>& beta() { return beta_; }
    BasicTensor<T>& running_mean() { return running_mean_; }
    BasicTensor<T>& running_var() { return running_var_; }
    double eps() const { return eps_; }

    /// Eval-mode y = x * scale + shift with scale = gamma / sqrt(var + eps)
    /// and shift = beta - mean * scale. Packed inference reuses these values.
    AffineParams<T> eval_affine() const {
        const std::size_t c = channels();
        AffineParams<T> a{std::vector<T>(c), std::vector<T>(c)};
        for (std::size_t ch = 0; ch < c; ++ch) {
            a.scale[ch] = static_cast<T>(gamma_.value[ch] /
                                         std::sqrt(static_cast<double>(running_var_[ch]) + eps_));
            a.shift[ch] = beta_.value[ch] - running_mean_[ch] * a.scale[ch];
        }
        return a;
    }

    BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) override {
        const auto [n, c, hw] = channel_layout(x.shape());
        if (c != channels())
            throw ShapeError("batchnorm " + this->name_ + ": expected " +
                             std::to_string(channels()) + " channels, got " + to_string(x.shape()));
        BasicTensor<T> y(x.shape());
        if (mode == Mode::Eval) {
            const auto a = eval_affine();
            apply_affine(x, a, y);
            return y;
        }
        const double count = static_cast<double>(n * hw);
        const auto sums = channel_sums(x);
        std::vector<double> mean(c), sq(c, 0.0);
        for (std::size_t ch = 0; ch < c; ++ch) mean[ch] = sums[ch] / count;
        for (std::size_t i = 0, off = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t k = 0; k < hw; ++k, ++off) {
                    const double d = x[off] - mean[ch];
                    sq[ch] += d * d;
                }
        inv_std_.assign(c, T{0});
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double var = sq[ch] / count;
            inv_std_[ch] = static_cast<T>(1.0 / std::sqrt(var + eps_));
            running_mean_[ch] =
                static_cast<T>((1.0 - momentum_) * running_mean_[ch] + momentum_ * mean[ch]);
            running_var_[ch] =
                static_cast<T>((1.0 - momentum_) * running_var_[ch] + momentum_ * var);
        }
        xhat_ = BasicTensor<T>(x.shape());
        for (std::size_t i = 0, off = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const T m = static_cast<T>(mean[ch]), s = inv_std_[ch];
                const T gm = gamma_.value[ch], bt = beta_.value[ch];
                for (std::size_t k = 0; k < hw; ++k, ++off) {
                    xhat_[off] = (x[off] - m) * s;
                    y[off] = gm * xhat_[off] + bt;
                }
            }
        return y;
    }

    BasicTensor<T> backward(const BasicTensor<T>& g) override {
        const auto [n, c, hw] = channel_layout(g.shape());
        const double count = static_cast<double>(n * hw);
        const auto dbeta = channel_sums(g);
        std::vector<double> dgamma(c, 0.0);
        for (std::size_t i = 0, off = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t k = 0; k < hw; ++k, ++off)
                    dgamma[ch] += static_cast<double>(g[off]) * xhat_[off];
        for (std::size_t ch = 0; ch < c; ++ch) {
            gamma_.grad[ch] += static_cast<T>(dgamma[ch]);
            beta_.grad[ch] += static_cast<T>(dbeta[ch]);
        }
        // dx = gamma * inv_std / N * (N g - sum(g) - xhat * sum(g xhat))
        BasicTensor<T> dx(g.shape());
        for (std::size_t i = 0, off = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double k1 = static_cast<double>(gamma_.value[ch]) * inv_std_[ch] / count;
                for (std::size_t k = 0; k < hw; ++k, ++off)
                    dx[off] = static_cast<T>(
                        k1 * (count * g[off] - dbeta[ch] - xhat_[off] * dgamma[ch]));
            }
        return dx;
    }

    void collect_params(std::vector<Param<T>*>& out) override {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }
    void collect_state(std::vector<NamedTensor<T>>& out) override {
        out.push_back({this->name_ + ".gamma", &gamma_.value});
        out.push_back({this->name_ + ".beta", &beta_.value});
        out.push_back({this->name_ + ".running_mean", &running_mean_});
        out.push_back({this->name_ + ".running_var", &running_var_});
    }

    static void apply_affine(const BasicTensor<T>& x, const AffineParams<T>& a, BasicTensor<T>& y) {
        const auto [n, c, hw] = channel_layout(x.shape());
        for (std::size_t i = 0, off = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const T s = a.scale[ch], b = a.shift[ch];
                for (std::size_t k = 0; k < hw; ++k, ++off) y[off] = x[off] * s + b;
            }
    }

private:
    Param<T> gamma_, beta_;
    BasicTensor<T> running_mean_, running_var_;
    double eps_, momentum_;
    BasicTensor<T> xhat_;
    std::vector<T> inv_std_;
};

// ---- activations -----------------------------------------------------------

struct SignActConfig {
    double threshold_shift = 0.0;
    bool trainable = false;
    bool per_channel = true;
    double ste_clip = 1.0;  // half-width of the pass-through window

    void validate() const {
        if (!(ste_clip > 0.0)) throw ConfigError("ste_clip must be > 0");
    }
    bool operator==(const SignActConfig&) const = default;
};

/// Binary activation: -1 where x <= th, +1 where x > th. Thresholds are a
/// parameter when trainable, otherwise a buffer (still saved by name).
template <class T>
class SignAct : public Layer<T> {
public:
    SignAct(std::size_t channels, const SignActConfig& cfg)
        : cfg_(cfg),
          threshold_(BasicTensor<T>({cfg.trainable && !cfg.per_channel ? std::size_t{1} : channels},
                                    static_cast<T>(cfg.threshold_shift)),
                     cfg.trainable) {
        cfg.validate();
    }

    std::string_view kind() const override { return "sign"; }
    const SignActConfig& config() const { return cfg_; }
    Param<T>& threshold() { return threshold_; }
    const BasicTensor<T>& last_input() const { return input_; }

    /// Forward emits clamp(x - th, -clip, clip) instead of the sign. The
    /// backward pass is the same either way, which is what gradient checks
    /// rely on.
    void set_surrogate(bool on) { surrogate_ = on; }

    /// +1 count and element count of the most recent forward pass.
    std::size_t last_plus() const { return plus_; }
    std::size_t last_total() const { return total_; }

    BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
        input_ = x;
        if (surrogate_) {
            BasicTensor<T> y(x.shape());
            const T clip = static_cast<T>(cfg_.ste_clip);
            const auto& th = threshold_.value;
            if (th.size() == 1) {
                for (std::size_t i = 0; i < x.size(); ++i)
                    y[i] = std::clamp<T>(x[i] - th[0], -clip, clip);
            } else {
                const auto [n, c, hw] = channel_layout(x.shape());
                for (std::size_t i = 0, off = 0; i < n; ++i)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        for (std::size_t k = 0; k < hw; ++k, ++off)
                            y[off] = std::clamp<T>(x[off] - th[ch], -clip, clip);
            }
            plus_ = total_ = 0;
            return y;
        }
        auto y = sign_forward(x, threshold_.value);
        plus_ = 0;
        for (auto v : y.data()) plus_ += v > T{0};
        total_ = y.size();
        return y;
    }

    BasicTensor<T> backward(const BasicTensor<T>& g) override {
        auto grads = sign_backward(g, input_, threshold_.value, cfg_.ste_clip);
        if (threshold_.trainable)
            for (std::size_t i = 0; i < grads.grad_th.size(); ++i)
                threshold_.grad[i] += grads.grad_th[i];
        return std::move(grads.grad_x);
    }

    void collect_params(std::vector<Param<T>*>& out) override {
        if (threshold_.trainable) out.push_back(&threshold_);
    }
    void collect_state(std::vector<NamedTensor<T>>& out) override {
        out.push_back({this->name_ + ".threshold", &threshold_.value});
    }

private:
    SignActConfig cfg_;
    Param<T> threshold_;
    BasicTensor<T> input_;
    bool surrogate_ = false;
    std::size_t plus_ = 0, total_ = 0;
};

/// Generalized hardtanh; the configuration is saved as a 3-vector buffer
/// (x_offset, y_offset, range).
template <class T>
class GenHardtanh : public Layer<T> {
public:
    explicit GenHardtanh(const GenHardtanhConfig& cfg)
        : cfg_(cfg),
          saved_({3}, std::vector<T>{static_cast<T>(cfg.x_offset), static_cast<T>(cfg.y_offset),
                                     static_cast<T>(cfg.range)}) {
        cfg.validate();
    }

    std::string_view kind() const override { return "hardtanh"; }
    const GenHardtanhConfig& config() const { return cfg_; }
    const BasicTensor<T>& last_input() const { return input_; }

    BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
        input_ = x;
        return gen_hardtanh_forward(x, cfg_);
    }
    BasicTensor<T> backward(const BasicTensor<T>& g) override {
        return gen_hardtanh_backward(g, input_, cfg_);
    }
    void collect_state(std::vector<NamedTensor<T>>& out) override {
        out.push_back({this->name_ + ".hardtanh", &saved_});
    }

private:
    GenHardtanhConfig cfg_;
    BasicTensor<T> saved_;
    BasicTensor<T> input_;
};

template <class T>
class LeakyReLU : public Layer<T> {
public:
    explicit LeakyReLU(double slope) : slope_(slope) {}
    std::string_view kind() const override { return "leaky_relu"; }
    double slope() const { return slope_; }

    BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
        input_ = x;
        return leaky_relu(x, slope_);
    }
    BasicTensor<T> backward(const BasicTensor<T>& g) override {
        BasicTensor<T> dx(g.shape());
        const T s = static_cast<T>(slope_);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] = input_[i] > T{0} ? g[i] : s * g[i];
        return dx;
    }

private:
    double slope_;
    BasicTensor<T> input_;
};

/// Per-channel learnable negative slope, initialized to 0.25.
template <class T>
class PReLU : public Layer<T> {
public:
    explicit PReLU(std::size_t channels, double init = 0.25)
        : slope_(BasicTensor<T>({channels}, static_cast<T>(init))) {}
    std::string_view kind() const override { return "prelu"; }
    Param<T>& slope() { return slope_; }

    BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
        input_ = x;
        return prelu(x, slope_.value);
    }
    BasicTensor<T> backward(const BasicTensor<T>& g) override {
        const auto [n, c, hw] = channel_layout(g.shape());
        BasicTensor<T> dx(g.shape());
        std::vector<double> ds(c, 0.0);
        for (std::size_t i = 0, off = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t k = 0; k < hw; ++k, ++off) {
                    if (input_[off] > T{0}) {
                        dx[off] = g[off];
                    } else {
                        dx[off] = slope_.value[ch] * g[off];
                        ds[ch] += static_cast<double>(g[off]) * input_[off];
                    }
                }
        for (std::size_t ch = 0; ch < c; ++ch) slope_.grad[ch] += static_cast<T>(ds[ch]);
        return dx;
    }
    void collect_params(std::vector<Param<T>*>& out) override { out.push_back(&slope_); }
    void collect_state(std::vector<NamedTensor<T>>& out) override {
        out.push_back({this->name_ + ".slope", &slope_.value});
    }

private:
    Param<T> slope_;
    BasicTensor<T> input_;
};

// ---- pooling / reshaping ---------------------------------------------------

template <class T>
class MaxPool2 : public Layer<T> {
public:
    std::string_view kind() const override { return "maxpool"; }
    BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
        auto r = maxpool2x2(x);
        in_shape_ = x.shape();
        argmax_ = std::move(r.argmax);
        return std::move(r.out);
    }
    BasicTensor<T> backward(const BasicTensor<T>& g) override {
        return maxpool2x2_backward(g, argmax_, in_shape_);
    }

private:
    Shape in_shape_;
    std::vector<std::size_t> argmax_;
};

template <class T>
class AvgPool2 : public Layer<T> {
public:
    std::string_view kind() const override { return "avgpool"; }
    BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
        in_shape_ = x.shape();
        return avgpool2x2(x);
    }
    BasicTensor<T> backward(const BasicTensor<T>& g) override {
        return avgpool2x2_backward(g, in_shape_);
    }

private:
    Shape in_shape_;
};

template <class T>
class Flatten : public Layer<T> {
public:
    std::string_view kind() const override { return "flatten"; }
    BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
        in_shape_ = x.shape();
        return x.reshaped({x.dim(0), x.size() / x.dim(0)});
    }
    BasicTensor<T> backward(const BasicTensor<T>& g) override { return g.reshaped(in_shape_); }

private:
    Shape in_shape_;
};

/// NCHW -> NC mean over spatial positions.
template <class T>
class GlobalAvgPool : public Layer<T> {
public:
    std::string_view kind() const override { return "global_avgpool"; }
    BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
        in_shape_ = x.shape();
        const auto [n, c, hw] = channel_layout(x.shape());
        BasicTensor<T> y({n, c});
        for (std::size_t i = 0; i < n * c; ++i) {
            double s = 0.0;
            for (std::size_t k = 0; k < hw; ++k) s += x[i * hw + k];
            y[i] = static_cast<T>(s / static_cast<double>(hw));
        }
        return y;
    }
    BasicTensor<T> backward(const BasicTensor<T>& g) override {
        BasicTensor<T> dx(in_shape_);
        const auto [n, c, hw] = channel_layout(in_shape_);
        const T inv = static_cast<T>(1.0 / static_cast<double>(hw));
        for (std::size_t i = 0; i < n * c; ++i)
            for (std::size_t k = 0; k < hw; ++k) dx[i * hw + k] = g[i] * inv;
        return dx;
    }

private:
    Shape in_shape_;
};

// ---- containers ------------------------------------------------------------

template <class T>
class Sequential : public Layer<T> {
public:
    std::string_view kind() const override { return "sequential"; }

    template <class L, class... Args>
    L& add(Args&&... args) {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *layer;
        layers_.push_back(std::move(layer));
        rename();
        return ref;
    }

    std::size_t size() const { return layers_.size(); }
    Layer<T>& at(std::size_t i) { return *layers_.at(i); }
    const Layer<T>& at(std::size_t i) const { return *layers_.at(i); }

    BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) override {
        BasicTensor<T> h = x;
        for (auto& l : layers_) h = l->forward(h, mode);
        return h;
    }
    BasicTensor<T> backward(const BasicTensor<T>& g) override {
        BasicTensor<T> h = g;
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) h = (*it)->backward(h);
        return h;
    }
    void collect_params(std::vector<Param<T>*>& out) override {
        for (auto& l : layers_) l->collect_params(out);
    }
    void collect_state(std::vector<NamedTensor<T>>& out) override {
        for (auto& l : layers_) l->collect_state(out);
    }
    void for_each_child(const std::function<void(Layer<T>&)>& fn) override {
        for (auto& l : layers_) fn(*l);
    }
    void set_name(std::string n) override {
        this->name_ = std::move(n);
        rename();
    }

private:
    void rename() {
        for (std::size_t i = 0; i < layers_.size(); ++i)
            layers_[i]->set_name(this->name_.empty() ? std::to_string(i)
                                                     : this->name_ + "." + std::to_string(i));
    }

    std::vector<std::unique_ptr<Layer<T>>> layers_;
};

/// out = body(x) + shortcut(x). A strided block's shortcut is 2x2 average
/// pooling followed by zero-padding of the extra output channels.
template <class T>
class Residual : public Layer<T> {
public:
    Residual(std::size_t in_c, std::size_t out_c, std::size_t stride)
        : in_c_(in_c), out_c_(out_c), stride_(stride) {
        if (out_c < in_c || (stride != 1 && stride != 2))
            throw ConfigError("residual: unsupported shortcut geometry");
    }

    std::string_view kind() const override { return "residual"; }
    Sequential<T>& body() { return body_; }
    void set_shortcut_enabled(bool on) { shortcut_on_ = on; }

    BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) override {
        auto y = body_.forward(x, mode);
        if (!shortcut_on_) return y;
        in_shape_ = x.shape();
        const auto s = shortcut(x);
        if (s.shape() != y.shape())
            throw ShapeError("residual " + this->name_ + ": shortcut " + to_string(s.shape()) +
                             " vs body " + to_string(y.shape()));
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += s[i];
        return y;
    }

    BasicTensor<T> backward(const BasicTensor<T>& g) override {
        auto dx = body_.backward(g);
        if (!shortcut_on_) return dx;
        const auto ds = shortcut_backward(g);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += ds[i];
        return dx;
    }

    void collect_params(std::vector<Param<T>*>& out) override { body_.collect_params(out); }
    void collect_state(std::vector<NamedTensor<T>>& out) override { body_.collect_state(out); }
    void for_each_child(const std::function<void(Layer<T>&)>& fn) override { fn(body_); }
    void set_name(std::string n) override {
        this->name_ = std::move(n);
        body_.set_name(this->name_ + ".body");
    }

private:
    BasicTensor<T> shortcut(const BasicTensor<T>& x) const {
        const BasicTensor<T> pooled = stride_ == 2 ? avgpool2x2(x) : x;
        if (out_c_ == in_c_) return pooled;
        const std::size_t n = pooled.dim(0), hw = pooled.size() / (n * in_c_);
        BasicTensor<T> y({n, out_c_, pooled.dim(2), pooled.dim(3)});
        for (std::size_t i = 0; i < n; ++i)
            std::copy_n(pooled.ptr() + i * in_c_ * hw, in_c_ * hw, y.ptr() + i * out_c_ * hw);
        return y;
    }

    BasicTensor<T> shortcut_backward(const BasicTensor<T>& g) const {
        const std::size_t n = g.dim(0), hw = g.dim(2) * g.dim(3);
        BasicTensor<T> narrowed({n, in_c_, g.dim(2), g.dim(3)});
        for (std::size_t i = 0; i < n; ++i)
            std::copy_n(g.ptr() + i * out_c_ * hw, in_c_ * hw, narrowed.ptr() + i * in_c_ * hw);
        return stride_ == 2 ? avgpool2x2_backward(narrowed, in_shape_) : narrowed;
    }

    Sequential<T> body_;
    std::size_t in_c_, out_c_, stride_;
    bool shortcut_on_ = true;
    Shape in_shape_;
};

// ---- helpers ---------------------------------------------------------------

template <class T>
void zero_grads(const std::vector<Param<T>*>& params) {
    for (auto* p : params) p->zero_grad();
}

/// Folds the threshold of the SignAct at `index + 1` into the BatchNorm at
/// `index`: beta' = beta - th, th' = 0. Binary outputs are unchanged.
template <class T>
void fold_threshold(Sequential<T>& seq, std::size_t index) {
    auto* bn = index < seq.size() ? dynamic_cast<BatchNorm<T>*>(&seq.at(index)) : nullptr;
    auto* act = index + 1 < seq.size() ? dynamic_cast<SignAct<T>*>(&seq.at(index + 1)) : nullptr;
    if (!bn || !act)
        throw ConfigError("fold_threshold: layer " + std::to_string(index) +
                          " is not a batch norm directly followed by a sign activation");
    auto& th = act->threshold().value;
    auto folded = fold_threshold<T>(bn->beta().value.data(), th.data());
    std::copy(folded.begin(), folded.end(), bn->beta().value.data().begin());
    th.fill(T{0});
}

}  // namespace bnn
