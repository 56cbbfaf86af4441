#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

#include "bnn/binkernel.hpp"
#include "bnn/data.hpp"
#include "bnn/rng.hpp"

using namespace bnn;

namespace {

Tensor random_pm1(Shape s, Rng& rng) {
    Tensor t(std::move(s));
    for (auto& v : t.data()) v = rng.coin() ? 1.0f : -1.0f;
    return t;
}

Tensor random_normal(Shape s, Rng& rng) {
    Tensor t(std::move(s));
    for (auto& v : t.data()) v = static_cast<float>(rng.normal());
    return t;
}

std::int64_t int_dot(const Tensor& a, const Tensor& b) {
    std::int64_t s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<std::int64_t>(a[i] * b[i]);
    return s;
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
    std::vector<std::size_t> out(logits.dim(0));
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t j = 1; j < k; ++j)
            if (logits[i * k + j] > logits[i * k + out[i]]) out[i] = j;
    return out;
}

/// Binary activations of the reference model, in forward order.
std::vector<Tensor> reference_acts(Model<float>& m) {
    std::vector<Tensor> acts;
    for (auto* s : m.sign_layers()) acts.push_back(sign_forward(s->last_input(), s->threshold().value));
    return acts;
}

/// Sets BN running statistics from a few train-mode passes and gives every
/// BN and threshold non-trivial values.
void settle(Model<float>& m, const Tensor& x, Rng& rng) {
    for (int i = 0; i < 3; ++i) m.forward(x, Mode::Train);
    for (auto* bn : m.layers_of<BatchNorm<float>>()) {
        for (auto& g : bn->gamma().value.data()) g = static_cast<float>(0.5 + rng.uniform());
        for (auto& b : bn->beta().value.data()) b = static_cast<float>(0.3 * rng.normal());
    }
}

}  // namespace

TEST(Pack, Examples) {
    auto bt = pack(Tensor({3}, std::vector<float>{1, -1, 1}));
    EXPECT_EQ(bt.words().size(), 1u);
    EXPECT_EQ(bt.words()[0], 0b101u);
    auto neg = pack(Tensor({70}, -1.0f));
    ASSERT_EQ(neg.words().size(), 2u);
    EXPECT_EQ(neg.words()[0], 0u);
    EXPECT_EQ(neg.words()[1], 0u);
    EXPECT_NO_THROW(neg.validate_padding());
    EXPECT_THROW(pack(Tensor({2}, std::vector<float>{1, 0.5f})), Error);
    EXPECT_THROW(pack(Tensor({2}, std::vector<float>{1, 0})), Error);
}

TEST(Pack, RoundTripProperty) {
    Rng rng(1);
    for (std::size_t n : {1u, 63u, 64u, 65u, 1000u}) {
        auto t = random_pm1({n}, rng);
        auto bt = pack(t);
        EXPECT_EQ(unpack(bt), t);
        EXPECT_EQ(pack(unpack(bt)), bt);
        EXPECT_LE(bt.row_length(), bt.words_per_row() * kWordBits);
        EXPECT_LT(bt.words_per_row() * kWordBits, bt.row_length() + kWordBits);
    }
    auto m = random_pm1({5, 3, 7}, rng);
    EXPECT_EQ(unpack(pack(m)), m);
}

TEST(Pack, PaddingCorruptionDetected) {
    Rng rng(2);
    auto bt = pack(random_pm1({4, 70}, rng));
    EXPECT_NO_THROW(bt.validate_padding());
    bt.words()[3] |= Word{1} << 63;
    EXPECT_THROW(bt.validate_padding(), Error);
}

TEST(Xnor, Examples) {
    auto a = pack(Tensor({3}, std::vector<float>{1, 1, -1}));
    auto b = pack(Tensor({3}, std::vector<float>{1, -1, -1}));
    EXPECT_EQ(xnor_popcount_dot(a, 0, b, 0), 1);
    Rng rng(3);
    auto x = random_pm1({130}, rng);
    Tensor neg(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) neg[i] = -x[i];
    EXPECT_EQ(xnor_popcount_dot(pack(x), 0, pack(x), 0), 130);
    EXPECT_EQ(xnor_popcount_dot(pack(x), 0, pack(neg), 0), -130);
    auto short_row = pack(Tensor({129}, 1.0f));
    EXPECT_THROW(xnor_popcount_dot(pack(x), 0, short_row, 0), ShapeError);
}

TEST(Xnor, MatchesIntegerDotForRandomLengths) {
    Rng rng(4);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + rng.below(10000);
        auto a = random_pm1({n}, rng), b = random_pm1({n}, rng);
        ASSERT_EQ(xnor_popcount_dot(pack(a), 0, pack(b), 0), int_dot(a, b)) << "n=" << n;
    }
}

TEST(PackedLinear, OneElementAndRandom) {
    Rng rng(5);
    Tensor w({1, 1}, std::vector<float>{-0.5f});
    PackedLinear one(PackedWeights::from(w));
    EXPECT_EQ(one.forward(pack(Tensor({2, 1}, std::vector<float>{1, -1}))).values(),
              (std::vector<float>{-0.5f, 0.5f}));
    auto wr = random_normal({7, 100}, rng);
    auto x = random_pm1({5, 100}, rng);
    PackedLinear pl(PackedWeights::from(wr));
    auto b = binarize_weights(wr);
    EXPECT_EQ(pl.forward(pack(x)), dense_forward<float>(x, b.signs, b.alpha));
}

TEST(PackedConv, MatchesFloatPathExactly) {
    Rng rng(6);
    auto x = random_pm1({1, 8, 6, 6}, rng);
    auto w = random_normal({4, 8, 3, 3}, rng);
    auto b = binarize_weights(w);
    for (std::size_t pad : {0u, 1u}) {
        PackedConv2d pc(PackedWeights::from(w), 8, 3, 1, pad);
        auto packed = pc.forward(pack(x));
        EXPECT_EQ(packed, conv_forward<float>(x, b.signs, b.alpha, 1, pad));
        // Integer outputs before scaling equal the +-1 float convolution.
        auto ints = conv2d(x, b.signs, 1, pad);
        const std::size_t P = ints.size() / 4;
        for (std::size_t i = 0; i < ints.size(); ++i)
            EXPECT_EQ(packed[i], ints[i] * b.alpha[i / P]);
    }
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t c = 1 + rng.below(5), k = 1 + 2 * rng.below(2), s = 1 + rng.below(2);
        const std::size_t pad = rng.below(2), h = k + rng.below(5), ww = k + rng.below(5);
        auto xi = random_pm1({2, c, h, ww}, rng);
        auto wi = random_normal({3, c, k, k}, rng);
        auto bi = binarize_weights(wi);
        PackedConv2d pc(PackedWeights::from(wi), c, k, s, pad);
        ASSERT_EQ(pc.forward(pack(xi)), conv_forward<float>(xi, bi.signs, bi.alpha, s, pad));
    }
}

TEST(Export, RefusesFullPrecisionAndUnfoldableModels) {
    ModelSpec fp;
    fp.precision = Precision::Fp;
    fp.activation = Activation::GenHardtanh;
    auto m = build<float>(fp, 1);
    EXPECT_THROW(export_packed(m), ConfigError);

    ModelSpec res;
    res.arch = Arch::Resnet20ds;
    res.in_channels = 3;
    res.in_height = res.in_width = 8;
    auto r = build<float>(res, 1);
    try {
        export_packed(r);
        FAIL() << "expected refusal";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("2.body.0"), std::string::npos) << e.what();
    }
}

TEST(Export, UnfoldedThresholdRefused) {
    auto m = build<float>(ModelSpec{}, 1);
    auto pm = export_packed(m);
    for (auto& s : pm.stages)
        if (auto* sg = std::get_if<packed::Sign>(&s)) sg->threshold.assign(sg->threshold.size(), 0.5f);
    EXPECT_THROW(pm.validate(), ConfigError);
    EXPECT_THROW(pm.forward(Tensor({1, 1, 28, 28})), ConfigError);
}

TEST(Export, PackedFileRoundTripIsByteIdentical) {
    ModelSpec s;
    s.arch = Arch::Lenet5;
    auto m = build<float>(s, 2);
    const auto bytes = serialize(export_packed(m));
    const auto reloaded = deserialize_packed(bytes, "mem");
    EXPECT_EQ(serialize(reloaded), bytes);
    auto bad = bytes;
    bad[8] = 9;
    EXPECT_THROW(deserialize_packed(bad, "mem"), FormatError);
    auto trunc = bytes;
    trunc.pop_back();
    EXPECT_THROW(deserialize_packed(trunc, "mem"), FormatError);
}

TEST(Export, CallerModelUnchanged) {
    ModelSpec s;
    s.sign.threshold_shift = 0.7;
    auto m = build<float>(s, 3);
    const auto before = model_tensors(m);
    export_packed(m);
    EXPECT_EQ(model_tensors(m), before);
}

// Folded reference vs packed: identical binary activations layer by layer.
TEST(Equivalence, PackedMatchesFoldedReference) {
    Rng rng(7);
    struct Case {
        Arch arch;
        std::size_t size;
        Pooling pool;
    };
    for (const auto& c : {Case{Arch::Mlp2, 28, Pooling::Max}, Case{Arch::Lenet5, 28, Pooling::Max},
                          Case{Arch::Lenet5, 32, Pooling::Avg}, Case{Arch::VggSmall, 16, Pooling::Max}}) {
        ModelSpec s;
        s.arch = c.arch;
        s.pooling = c.pool;
        s.in_height = s.in_width = c.size;
        s.sign.threshold_shift = 0.4;
        auto m = build<float>(s, rng.next_u64());
        auto x = random_normal({8, 1, c.size, c.size}, rng);
        settle(m, x, rng);
        auto pm = export_packed(m);
        auto ref = folded_copy(m);
        auto ref_out = ref.forward(x, Mode::Eval);
        std::vector<Tensor> acts;
        auto out = pm.forward(x, &acts);
        EXPECT_EQ(acts, reference_acts(ref));
        EXPECT_EQ(out, ref_out);
    }
}

TEST(Equivalence, Mlp2PredictionsMatchTrainingPathModel) {
    const char* env = std::getenv("BNN_DATA_DIR");
    const std::filesystem::path dir = env ? env : "/root/data/mnist";
    Rng rng(8);
    Tensor x;
    if (std::filesystem::exists(dir / "t10k-images-idx3-ubyte")) {
        auto ds = load_mnist(dir);
        x = take(ds.test, 256).images;
    } else {
        x = random_normal({256, 1, 28, 28}, rng);
    }
    auto m = build<float>(ModelSpec{}, 9);
    settle(m, x, rng);
    auto pm = export_packed(m);
    // Shift 0: folding leaves beta unchanged, so the unfolded model is the reference.
    EXPECT_EQ(argmax_rows(pm.forward(x)), argmax_rows(m.forward(x, Mode::Eval)));
    std::vector<Tensor> acts;
    pm.forward(x, &acts);
    EXPECT_EQ(acts, reference_acts(m));
}
