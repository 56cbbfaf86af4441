#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bnn/io.hpp"
#include "bnn/nn.hpp"
#include "bnn/rng.hpp"

namespace bnn {

enum class Arch { Mlp2, Lenet5, VggSmall, Resnet20ds };
enum class Precision { Fp, BinaryWeight, Binary };
enum class Activation { Sign, GenHardtanh, Relu6 };
enum class Pooling { Max, Avg };
enum class ExtraAct { None, PReLU, Leaky };

struct ModelSpec {
    Arch arch = Arch::Mlp2;
    Precision precision = Precision::Binary;
    Activation activation = Activation::Sign;
    SignActConfig sign{};
    GenHardtanhConfig hardtanh{};
    Pooling pooling = Pooling::Max;
    ExtraAct extra_act = ExtraAct::None;
    double leaky_slope = 1.0;
    /// Binarize the input-facing layer and the classifier as well.
    bool binarize_first_last = false;

    std::size_t in_channels = 1;
    std::size_t in_height = 28;
    std::size_t in_width = 28;
    std::size_t num_classes = 10;

    void validate() const {
        sign.validate();
        hardtanh.validate();
        if ((precision == Precision::Binary) != (activation == Activation::Sign))
            throw ConfigError(
                "precision=binary requires activation=sign, and sign activation requires "
                "precision=binary");
        if (extra_act != ExtraAct::None && arch != Arch::Resnet20ds)
            throw ConfigError("extra_act is only valid for resnet20ds");
        if (!std::isfinite(leaky_slope)) throw ConfigError("leaky_slope must be finite");
        if (in_channels == 0 || num_classes < 2) throw ConfigError("bad input/class dimensions");
        switch (arch) {
            case Arch::Mlp2: break;
            case Arch::Lenet5:
                if (!((in_height == 28 && in_width == 28) || (in_height == 32 && in_width == 32)))
                    throw ConfigError("lenet5 expects 28x28 or 32x32 input");
                break;
            case Arch::VggSmall:
                if (in_height % 8 || in_width % 8 || in_height == 0 || in_width == 0)
                    throw ConfigError("vggsmall needs spatial size divisible by 8 (got " +
                                      std::to_string(in_height) + "x" + std::to_string(in_width) +
                                      "); pad MNIST to 32x32");
                break;
            case Arch::Resnet20ds:
                if (in_height % 4 || in_width % 4 || in_height == 0 || in_width == 0)
                    throw ConfigError("resnet20ds needs spatial size divisible by 4");
                break;
        }
    }
};

/// A built network plus the spec it came from.
template <class T = float>
class Model {
public:
    Model(ModelSpec spec, std::unique_ptr<Sequential<T>> root)
        : spec_(std::move(spec)), root_(std::move(root)) {}

    const ModelSpec& spec() const { return spec_; }
    Sequential<T>& root() { return *root_; }

    BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) { return root_->forward(x, mode); }
    BasicTensor<T> backward(const BasicTensor<T>& g) { return root_->backward(g); }

    std::vector<Param<T>*> params() {
        std::vector<Param<T>*> out;
        root_->collect_params(out);
        return out;
    }
    std::vector<NamedTensor<T>> state() {
        std::vector<NamedTensor<T>> out;
        root_->collect_state(out);
        return out;
    }
    void zero_grad() { zero_grads(params()); }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for (auto* p : params()) n += p->value.size();
        return n;
    }

    /// Binary activation layers in forward order.
    std::vector<SignAct<T>*> sign_layers() { return layers_of<SignAct<T>>(); }

    template <class L>
    std::vector<L*> layers_of() {
        std::vector<L*> out;
        walk<T>(*root_, [&](Layer<T>& l) {
            if (auto* p = dynamic_cast<L*>(&l)) out.push_back(p);
        });
        return out;
    }

private:
    ModelSpec spec_;
    std::unique_ptr<Sequential<T>> root_;
};

namespace detail {

template <class T>
class Builder {
public:
    Builder(const ModelSpec& spec, std::uint64_t seed) : spec_(spec), seed_(seed) {}

    WeightMode first_mode() const {
        return spec_.precision != Precision::Fp && spec_.binarize_first_last ? WeightMode::Binary
                                                                              : WeightMode::Real;
    }
    WeightMode hidden_mode() const {
        return spec_.precision == Precision::Fp ? WeightMode::Real : WeightMode::Binary;
    }
    WeightMode last_mode() const { return first_mode(); }

    std::uint64_t next_seed() { return mix_seed(seed_, counter_++); }

    void activation(Sequential<T>& seq, std::size_t channels) {
        switch (spec_.activation) {
            case Activation::Sign: seq.template add<SignAct<T>>(channels, spec_.sign); break;
            case Activation::GenHardtanh: seq.template add<GenHardtanh<T>>(spec_.hardtanh); break;
            case Activation::Relu6:
                seq.template add<GenHardtanh<T>>(GenHardtanhConfig{3.0, 3.0, 3.0});
                break;
        }
    }
    void pool(Sequential<T>& seq) {
        if (spec_.pooling == Pooling::Max)
            seq.template add<MaxPool2<T>>();
        else
            seq.template add<AvgPool2<T>>();
    }
    void linear(Sequential<T>& seq, std::size_t in, std::size_t out, WeightMode mode) {
        seq.template add<Linear<T>>(in, out, mode, next_seed());
    }
    void conv(Sequential<T>& seq, std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
              std::size_t pad, WeightMode mode) {
        seq.template add<Conv2d<T>>(in, out, k, stride, pad, mode, next_seed());
    }

    // FC512 - BN - act - FC10 - BN
    void mlp2(Sequential<T>& s) {
        const std::size_t in = spec_.in_channels * spec_.in_height * spec_.in_width;
        s.template add<Flatten<T>>();
        linear(s, in, 512, first_mode());
        s.template add<BatchNorm<T>>(512);
        activation(s, 512);
        // The classifier here consumes binary activations directly and is
        // followed by BN, so it is binarized with the hidden layers.
        linear(s, 512, spec_.num_classes, hidden_mode());
        s.template add<BatchNorm<T>>(spec_.num_classes);
    }

    // conv6@5x5 - pool - BN - act - conv16@5x5 - pool - BN - act - FC120 - BN - act
    // - FC84 - BN - act - FC10
    void lenet5(Sequential<T>& s) {
        const std::size_t pad = spec_.in_height == 28 ? 2 : 0;
        conv(s, spec_.in_channels, 6, 5, 1, pad, first_mode());
        pool(s);
        s.template add<BatchNorm<T>>(6);
        activation(s, 6);
        conv(s, 6, 16, 5, 1, 0, hidden_mode());
        pool(s);
        s.template add<BatchNorm<T>>(16);
        activation(s, 16);
        s.template add<Flatten<T>>();
        linear(s, 16 * 5 * 5, 120, hidden_mode());
        s.template add<BatchNorm<T>>(120);
        activation(s, 120);
        linear(s, 120, 84, hidden_mode());
        s.template add<BatchNorm<T>>(84);
        activation(s, 84);
        linear(s, 84, spec_.num_classes, last_mode());
    }

    // conv64 - BN - act - [conv - pool - BN - act] x (64, 128, 128)
    // - FC512 - BN - act - FC512 - BN - act - FC10
    void vggsmall(Sequential<T>& s) {
        conv(s, spec_.in_channels, 64, 3, 1, 1, first_mode());
        s.template add<BatchNorm<T>>(64);
        activation(s, 64);
        const std::size_t widths[3][2] = {{64, 64}, {64, 128}, {128, 128}};
        for (const auto& w : widths) {
            conv(s, w[0], w[1], 3, 1, 1, hidden_mode());
            pool(s);
            s.template add<BatchNorm<T>>(w[1]);
            activation(s, w[1]);
        }
        s.template add<Flatten<T>>();
        linear(s, 128 * (spec_.in_height / 8) * (spec_.in_width / 8), 512, hidden_mode());
        s.template add<BatchNorm<T>>(512);
        activation(s, 512);
        linear(s, 512, 512, hidden_mode());
        s.template add<BatchNorm<T>>(512);
        activation(s, 512);
        linear(s, 512, spec_.num_classes, last_mode());
    }

    // conv16 - BN - 18 x [act - binconv - BN, + shortcut, (extra act)] - GAP - FC10
    void resnet20ds(Sequential<T>& s) {
        conv(s, spec_.in_channels, 16, 3, 1, 1, first_mode());
        s.template add<BatchNorm<T>>(16);
        std::size_t in_c = 16;
        for (std::size_t stage = 0; stage < 3; ++stage) {
            const std::size_t out_c = std::size_t{16} << stage;
            for (std::size_t b = 0; b < 6; ++b) {
                const std::size_t stride = (stage > 0 && b == 0) ? 2 : 1;
                auto& block = s.template add<Residual<T>>(in_c, out_c, stride);
                activation(block.body(), in_c);
                conv(block.body(), in_c, out_c, 3, stride, 1, hidden_mode());
                block.body().template add<BatchNorm<T>>(out_c);
                if (spec_.extra_act == ExtraAct::PReLU)
                    s.template add<PReLU<T>>(out_c);
                else if (spec_.extra_act == ExtraAct::Leaky)
                    s.template add<LeakyReLU<T>>(spec_.leaky_slope);
                in_c = out_c;
            }
        }
        s.template add<GlobalAvgPool<T>>();
        linear(s, in_c, spec_.num_classes, last_mode());
    }

private:
    const ModelSpec& spec_;
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

}  // namespace detail

/// Builds the network described by `spec`; weights are Xavier-normal from
/// `seed`, BN gamma = 1 and beta = 0, thresholds = the configured shift.
template <class T = float>
Model<T> build(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    auto root = std::make_unique<Sequential<T>>();
    detail::Builder<T> b(spec, seed);
    switch (spec.arch) {
        case Arch::Mlp2: b.mlp2(*root); break;
        case Arch::Lenet5: b.lenet5(*root); break;
        case Arch::VggSmall: b.vggsmall(*root); break;
        case Arch::Resnet20ds: b.resnet20ds(*root); break;
    }
    // The input layer's input gradient is never used.
    for (std::size_t i = 0; i < root->size(); ++i) {
        if (auto* w = dynamic_cast<WeightedLayer<T>*>(&root->at(i))) {
            w->set_input_grad(false);
            break;
        }
        if (!dynamic_cast<Flatten<T>*>(&root->at(i))) break;
    }
    return Model<T>(spec, std::move(root));
}

// ---- checkpoints -----------------------------------------------------------

inline constexpr char kCheckpointMagic[9] = "BNNCKPT\0";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Ordered list of named tensors as stored in a checkpoint.
using TensorList = std::vector<std::pair<std::string, Tensor>>;

inline std::vector<std::uint8_t> encode_checkpoint(const TensorList& tensors) {
    io::Writer w;
    w.bytes(kCheckpointMagic, 8);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
        for (float v : t.data()) w.f32(v);
    }
    return w.buffer();
}

inline TensorList decode_checkpoint(std::vector<std::uint8_t> bytes, const std::string& what) {
    io::Reader r(std::move(bytes), what);
    r.expect_magic(kCheckpointMagic);
    const auto version = r.u32();
    if (version != kCheckpointVersion)
        r.fail("unsupported checkpoint version " + std::to_string(version));
    const auto count = r.u32();
    TensorList out;
    for (std::uint32_t i = 0; i < count; ++i) {
        auto name = r.str();
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
        out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    if (!r.at_end()) r.fail("trailing bytes");
    return out;
}

template <class T>
TensorList model_tensors(Model<T>& model) {
    TensorList out;
    for (auto& nt : model.state()) out.emplace_back(nt.name, nt.tensor->template cast<float>());
    return out;
}

template <class T>
void save_checkpoint(const std::string& path, Model<T>& model) {
    io::write_file(path, encode_checkpoint(model_tensors(model)));
}

inline TensorList load_checkpoint(const std::string& path) {
    return decode_checkpoint(io::read_file(path), path);
}

/// Copies every tensor of `model` from `tensors`; names and shapes must match
/// one-to-one.
template <class T>
void apply_checkpoint(Model<T>& model, const TensorList& tensors) {
    auto state = model.state();
    if (state.size() != tensors.size())
        throw ConfigError("checkpoint/arch mismatch: model has " + std::to_string(state.size()) +
                          " tensors, checkpoint has " + std::to_string(tensors.size()));
    for (std::size_t i = 0; i < state.size(); ++i) {
        const auto& [name, t] = tensors[i];
        if (state[i].name != name || state[i].tensor->shape() != t.shape())
            throw ConfigError("checkpoint/arch mismatch at " + state[i].name + " " +
                              to_string(state[i].tensor->shape()) + " vs " + name + " " +
                              to_string(t.shape()));
        *state[i].tensor = t.template cast<T>();
    }
}

/// Initializes a binary model from a full-precision checkpoint trained with
/// hardtanh x_offset = fp_shift. Weights and BN tensors are copied; the
/// binary model keeps its own sign thresholds.
template <class T>
void init_from_pretrained(Model<T>& binary, const TensorList& fp, double fp_shift) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : fp) {
        by_name[name] = &t;
        if (name.ends_with(".hardtanh") && std::abs(t[0] - fp_shift) > 1e-6)
            throw ConfigError("pretrained checkpoint has hardtanh x_offset " + std::to_string(t[0]) +
                              " at " + name + ", expected " + std::to_string(fp_shift));
    }
    auto state = binary.state();
    std::size_t copied = 0;
    for (auto& nt : state) {
        if (nt.name.ends_with(".threshold")) continue;
        const auto it = by_name.find(nt.name);
        if (it == by_name.end())
            throw ConfigError("pretrained checkpoint lacks tensor " + nt.name);
        if (it->second->shape() != nt.tensor->shape())
            throw ConfigError("shape mismatch for " + nt.name + ": " +
                              to_string(it->second->shape()) + " vs " +
                              to_string(nt.tensor->shape()));
        *nt.tensor = it->second->template cast<T>();
        ++copied;
    }
    std::size_t fp_weights = 0;
    for (const auto& [name, t] : fp)
        if (!name.ends_with(".hardtanh") && !name.ends_with(".threshold")) ++fp_weights;
    if (fp_weights != copied)
        throw ConfigError("layer count mismatch: pretrained has " + std::to_string(fp_weights) +
                          " weight tensors, binary model uses " + std::to_string(copied));
}

}  // namespace bnn
