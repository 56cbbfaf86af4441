#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <set>

#include "bnn/data.hpp"

using namespace bnn;
namespace fs = std::filesystem;

namespace {

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t h, std::uint32_t w) {
    std::vector<std::uint8_t> b;
    put_be32(b, 0x803);
    put_be32(b, n);
    put_be32(b, h);
    put_be32(b, w);
    for (std::uint32_t i = 0; i < n * h * w; ++i) b.push_back(static_cast<std::uint8_t>(i * 37));
    return b;
}

std::vector<std::uint8_t> idx_labels(std::uint32_t n) {
    std::vector<std::uint8_t> b;
    put_be32(b, 0x801);
    put_be32(b, n);
    for (std::uint32_t i = 0; i < n; ++i) b.push_back(static_cast<std::uint8_t>(i % 10));
    return b;
}

std::vector<std::uint8_t> cifar_batch(std::size_t records, std::uint8_t seed) {
    std::vector<std::uint8_t> b;
    for (std::size_t r = 0; r < records; ++r) {
        b.push_back(static_cast<std::uint8_t>((r + seed) % 10));
        for (std::size_t k = 0; k < 3072; ++k)
            b.push_back(static_cast<std::uint8_t>((k * 7 + r * 13 + seed) % 256));
    }
    return b;
}

fs::path fresh_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("bnn_test_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

fs::path mnist_dir() {
    if (const char* e = std::getenv("BNN_DATA_DIR")) return e;
    return "/root/data/mnist";
}

Dataset synthetic(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    Dataset ds;
    ds.images = Tensor({n, c, h, w});
    for (std::size_t i = 0; i < ds.images.size(); ++i) ds.images[i] = static_cast<float>(i % 97);
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(i % 10);
    return ds;
}

}  // namespace

TEST(Idx, ParsesSyntheticFiles) {
    auto raw = parse_idx_images(idx_images(5, 4, 3), "img");
    EXPECT_EQ(raw.count, 5u);
    EXPECT_EQ(raw.height, 4u);
    EXPECT_EQ(raw.width, 3u);
    EXPECT_EQ(raw.pixels[1], 37);
    auto labels = parse_idx_labels(idx_labels(5), "lbl");
    EXPECT_EQ(labels.size(), 5u);
}

TEST(Idx, WrongMagicAndTruncationFail) {
    auto img = idx_images(2, 2, 2);
    img[3] = 0x01;
    try {
        parse_idx_images(img, "img");
        FAIL() << "expected a format error";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
    }
    auto trunc = idx_images(2, 2, 2);
    trunc.pop_back();
    EXPECT_THROW(parse_idx_images(trunc, "img"), FormatError);
    auto lbl = idx_labels(3);
    lbl.back() = 11;
    EXPECT_THROW(parse_idx_labels(lbl, "lbl"), FormatError);
}

TEST(Mnist, MissingFilesNameExpectedPaths) {
    const auto d = fresh_dir("mnist_missing");
    try {
        load_mnist(d);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("train-images-idx3-ubyte"), std::string::npos);
    }
}

TEST(Mnist, RealFilesHaveStandardCounts) {
    if (!fs::exists(mnist_dir() / "train-images-idx3-ubyte"))
        GTEST_SKIP() << "MNIST not present in " << mnist_dir();
    auto ds = load_mnist(mnist_dir());
    EXPECT_EQ(ds.train.size(), 60000u);
    EXPECT_EQ(ds.test.size(), 10000u);
    EXPECT_EQ(ds.train.images.shape(), (Shape{60000, 1, 28, 28}));
    double s = 0.0, sq = 0.0;
    for (float v : ds.train.images.data()) {
        s += v;
        sq += static_cast<double>(v) * v;
    }
    const double n = static_cast<double>(ds.train.images.size());
    const double mean = s / n;
    EXPECT_NEAR(mean, 0.0, 1e-3);
    EXPECT_NEAR(std::sqrt(sq / n - mean * mean), 1.0, 1e-2);
}

TEST(Cifar, ParsesBatchesAndNormalizes) {
    const auto d = fresh_dir("cifar");
    for (int i = 1; i <= 5; ++i)
        io::write_file((d / ("data_batch_" + std::to_string(i) + ".bin")).string(),
                       cifar_batch(4, static_cast<std::uint8_t>(i)));
    io::write_file((d / "test_batch.bin").string(), cifar_batch(3, 99));
    auto ds = load_cifar10(d);
    EXPECT_EQ(ds.train.size(), 20u);
    EXPECT_EQ(ds.test.size(), 3u);
    EXPECT_EQ(ds.train.images.shape(), (Shape{20, 3, 32, 32}));
    for (std::size_t c = 0; c < 3; ++c) {
        double s = 0.0, sq = 0.0;
        for (std::size_t i = 0; i < 20; ++i)
            for (std::size_t k = 0; k < 1024; ++k) {
                const double v = ds.train.images[(i * 3 + c) * 1024 + k];
                s += v;
                sq += v * v;
            }
        const double mean = s / 20480.0;
        EXPECT_NEAR(mean, 0.0, 1e-3);
        EXPECT_NEAR(std::sqrt(sq / 20480.0 - mean * mean), 1.0, 1e-2);
    }
    fs::remove_all(d);
}

TEST(Cifar, FirstRecordRoundTrips) {
    const auto bytes = cifar_batch(2, 5);
    auto raw = parse_cifar_batch(bytes, "b");
    EXPECT_EQ(raw.labels[0], bytes[0]);
    for (std::size_t k = 0; k < 3072; ++k) ASSERT_EQ(raw.pixels[k], bytes[1 + k]);
}

TEST(Cifar, BadRecordsFail) {
    auto b = cifar_batch(2, 0);
    b.pop_back();
    EXPECT_THROW(parse_cifar_batch(b, "b"), FormatError);
    auto l = cifar_batch(2, 0);
    l[3073] = 10;
    EXPECT_THROW(parse_cifar_batch(l, "b"), FormatError);
}

TEST(Batches, CountsAndPartialLastBatch) {
    auto ds = synthetic(50000, 1, 1, 1);
    EpochBatches eb(ds, 256, 1, 0, false);
    EXPECT_EQ(eb.count(), 196u);
    EXPECT_EQ(eb.indices(195).size(), 80u);
    EXPECT_EQ(eb.get(195).y.size(), 80u);
}

TEST(Batches, DeterministicPerSeedAndDistinctAcrossSeeds) {
    auto ds = synthetic(1000, 1, 2, 2);
    EpochBatches a(ds, 64, 3, 0, false), b(ds, 64, 3, 0, false), c(ds, 64, 4, 0, false);
    EXPECT_EQ(a.order(), b.order());
    EXPECT_NE(a.order(), c.order());
    EpochBatches next(ds, 64, 3, 1, false);
    EXPECT_NE(a.order(), next.order());
    std::set<std::size_t> all(a.order().begin(), a.order().end());
    EXPECT_EQ(all.size(), 1000u);
}

TEST(Batches, NoAugmentCopiesSourceImages) {
    auto ds = synthetic(40, 3, 4, 4);
    EpochBatches eb(ds, 16, 5, 0, false);
    for (std::size_t b = 0; b < eb.count(); ++b) {
        const auto batch = eb.get(b);
        const auto idx = eb.indices(b);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            EXPECT_EQ(batch.y[i], ds.labels[idx[i]]);
            for (std::size_t k = 0; k < 48; ++k)
                ASSERT_EQ(batch.x[i * 48 + k], ds.images[idx[i] * 48 + k]);
        }
    }
}

TEST(Batches, AugmentIsDeterministicAndChangesImages) {
    auto ds = synthetic(64, 3, 32, 32);
    EpochBatches a(ds, 32, 1, 0, true), b(ds, 32, 1, 0, true);
    EXPECT_EQ(a.get(0).x, b.get(0).x);
    EpochBatches plain(ds, 32, 1, 0, false);
    EXPECT_NE(a.get(0).x, plain.get(0).x);
}

TEST(Dataset, PadAndTake) {
    auto ds = synthetic(3, 1, 28, 28);
    auto p = pad_to(ds, 32);
    EXPECT_EQ(p.images.shape(), (Shape{3, 1, 32, 32}));
    EXPECT_EQ(p.images[0], 0.0f);
    EXPECT_EQ(p.images[2 * 32 + 2], ds.images[0]);
    EXPECT_THROW(pad_to(ds, 31), ConfigError);
    EXPECT_EQ(take(ds, 2).size(), 2u);
    EXPECT_EQ(take(ds, 0).size(), 3u);
}
