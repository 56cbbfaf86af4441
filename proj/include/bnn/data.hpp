#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "bnn/error.hpp"
#include "bnn/io.hpp"
#include "bnn/rng.hpp"
#include "bnn/tensor.hpp"

namespace bnn {

enum class Split { Train, Test };

struct Dataset {
    Tensor images;            // N x C x H x W, normalized
    std::vector<int> labels;  // class ids in [0, 9]
    Split split = Split::Train;

    std::size_t size() const { return labels.size(); }
    std::size_t channels() const { return images.dim(1); }
    std::size_t height() const { return images.dim(2); }
    std::size_t width() const { return images.dim(3); }
    std::size_t image_size() const { return images.size() / images.dim(0); }
};

struct DatasetPair {
    Dataset train;
    Dataset test;
};

/// Undecoded images: bytes in N x C x H x W order.
struct RawImages {
    std::size_t count = 0, channels = 0, height = 0, width = 0;
    std::vector<std::uint8_t> pixels;
    std::vector<std::uint8_t> labels;
};

// ---- MNIST IDX -------------------------------------------------------------

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {
inline std::uint32_t read_be32(io::Reader& r) {
    const std::uint32_t le = r.u32();
    return ((le & 0xFFu) << 24) | ((le & 0xFF00u) << 8) | ((le >> 8) & 0xFF00u) | (le >> 24);
}
}  // namespace detail

inline RawImages parse_idx_images(std::vector<std::uint8_t> bytes, const std::string& what) {
    io::Reader r(std::move(bytes), what);
    const auto magic = detail::read_be32(r);
    if (magic != kIdxImagesMagic) {
        r.fail("wrong IDX image magic 0x" + [&] {
            char buf[16];
            std::snprintf(buf, sizeof buf, "%08x", magic);
            return std::string(buf);
        }());
    }
    RawImages raw;
    raw.count = detail::read_be32(r);
    raw.height = detail::read_be32(r);
    raw.width = detail::read_be32(r);
    raw.channels = 1;
    const std::size_t n = raw.count * raw.height * raw.width;
    r.need(n);
    raw.pixels.resize(n);
    r.bytes(raw.pixels.data(), n);
    if (!r.at_end()) r.fail("trailing bytes after image data");
    return raw;
}

inline std::vector<std::uint8_t> parse_idx_labels(std::vector<std::uint8_t> bytes,
                                                  const std::string& what) {
    io::Reader r(std::move(bytes), what);
    const auto magic = detail::read_be32(r);
    if (magic != kIdxLabelsMagic) r.fail("wrong IDX label magic");
    const std::size_t n = detail::read_be32(r);
    r.need(n);
    std::vector<std::uint8_t> labels(n);
    r.bytes(labels.data(), n);
    if (!r.at_end()) r.fail("trailing bytes after label data");
    for (std::size_t i = 0; i < n; ++i)
        if (labels[i] > 9)
            throw FormatError(what + ": label " + std::to_string(labels[i]) + " > 9 at offset " +
                              std::to_string(8 + i));
    return labels;
}

// ---- CIFAR-10 binary -------------------------------------------------------

inline constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;

/// One CIFAR-10 binary batch: 3073-byte records, label byte then R, G, B
/// planes of 32x32.
inline RawImages parse_cifar_batch(const std::vector<std::uint8_t>& bytes, const std::string& what) {
    if (bytes.empty() || bytes.size() % kCifarRecord != 0)
        throw FormatError(what + ": record-length mismatch, size " + std::to_string(bytes.size()) +
                          " is not a multiple of " + std::to_string(kCifarRecord) + " at offset " +
                          std::to_string(bytes.size() - bytes.size() % kCifarRecord));
    RawImages raw;
    raw.count = bytes.size() / kCifarRecord;
    raw.channels = 3;
    raw.height = raw.width = 32;
    raw.labels.resize(raw.count);
    raw.pixels.resize(raw.count * 3072);
    for (std::size_t i = 0; i < raw.count; ++i) {
        const std::uint8_t* rec = bytes.data() + i * kCifarRecord;
        if (rec[0] > 9)
            throw FormatError(what + ": label " + std::to_string(rec[0]) + " > 9 at offset " +
                              std::to_string(i * kCifarRecord));
        raw.labels[i] = rec[0];
        std::copy_n(rec + 1, 3072, raw.pixels.data() + i * 3072);
    }
    return raw;
}

inline void append(RawImages& into, const RawImages& more) {
    if (into.count == 0) {
        into = more;
        return;
    }
    into.count += more.count;
    into.pixels.insert(into.pixels.end(), more.pixels.begin(), more.pixels.end());
    into.labels.insert(into.labels.end(), more.labels.begin(), more.labels.end());
}

// ---- normalization ---------------------------------------------------------

struct Normalization {
    std::vector<double> mean;  // per channel, in [0, 1] pixel units
    std::vector<double> stddev;
};

/// Per-channel mean and (population) std of bytes scaled to [0, 1].
inline Normalization channel_stats(const RawImages& raw) {
    Normalization norm{std::vector<double>(raw.channels, 0.0),
                       std::vector<double>(raw.channels, 0.0)};
    const std::size_t plane = raw.height * raw.width;
    std::vector<std::uint64_t> sum(raw.channels, 0), sq(raw.channels, 0);
    for (std::size_t i = 0; i < raw.count; ++i)
        for (std::size_t c = 0; c < raw.channels; ++c) {
            const std::uint8_t* p = raw.pixels.data() + (i * raw.channels + c) * plane;
            for (std::size_t k = 0; k < plane; ++k) {
                sum[c] += p[k];
                sq[c] += static_cast<std::uint64_t>(p[k]) * p[k];
            }
        }
    const double n = static_cast<double>(raw.count * plane);
    for (std::size_t c = 0; c < raw.channels; ++c) {
        const double m = static_cast<double>(sum[c]) / n;
        const double var = static_cast<double>(sq[c]) / n - m * m;
        norm.mean[c] = m / 255.0;
        norm.stddev[c] = std::sqrt(std::max(var, 0.0)) / 255.0;
    }
    return norm;
}

inline Dataset to_dataset(const RawImages& raw, const Normalization& norm, Split split) {
    Dataset ds;
    ds.split = split;
    ds.images = Tensor({raw.count, raw.channels, raw.height, raw.width});
    const std::size_t plane = raw.height * raw.width;
    for (std::size_t i = 0; i < raw.count; ++i)
        for (std::size_t c = 0; c < raw.channels; ++c) {
            const std::size_t off = (i * raw.channels + c) * plane;
            const double m = norm.mean[c], s = norm.stddev[c] > 0 ? norm.stddev[c] : 1.0;
            for (std::size_t k = 0; k < plane; ++k)
                ds.images[off + k] =
                    static_cast<float>((raw.pixels[off + k] / 255.0 - m) / s);
        }
    ds.labels.assign(raw.labels.begin(), raw.labels.end());
    return ds;
}

// ---- loaders ---------------------------------------------------------------

namespace detail {
inline void require_files(const std::filesystem::path& dir, const std::vector<std::string>& names,
                          const std::string& dataset) {
    std::string missing;
    for (const auto& n : names)
        if (!std::filesystem::exists(dir / n)) missing += (missing.empty() ? "" : ", ") + n;
    if (!missing.empty()) {
        std::string expected;
        for (const auto& n : names) expected += "\n  " + (dir / n).string();
        throw Error(dataset + " dataset not found in '" + dir.string() + "' (missing " + missing +
                    "). Expected files:" + expected);
    }
}
}  // namespace detail

inline RawImages read_mnist_split(const std::filesystem::path& dir, const std::string& prefix) {
    const auto img_path = dir / (prefix + "-images-idx3-ubyte");
    const auto lbl_path = dir / (prefix + "-labels-idx1-ubyte");
    auto raw = parse_idx_images(io::read_file(img_path.string()), img_path.string());
    raw.labels = parse_idx_labels(io::read_file(lbl_path.string()), lbl_path.string());
    if (raw.labels.size() != raw.count)
        throw FormatError(lbl_path.string() + ": " + std::to_string(raw.labels.size()) +
                          " labels for " + std::to_string(raw.count) + " images");
    return raw;
}

/// Reads the four standard MNIST IDX files from `dir`. Normalization uses
/// the training split's mean/std for both splits.
inline DatasetPair load_mnist(const std::filesystem::path& dir) {
    detail::require_files(dir,
                          {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                           "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"},
                          "MNIST");
    const auto train = read_mnist_split(dir, "train");
    const auto test = read_mnist_split(dir, "t10k");
    const auto norm = channel_stats(train);
    return {to_dataset(train, norm, Split::Train), to_dataset(test, norm, Split::Test)};
}

/// Reads data_batch_1..5.bin and test_batch.bin from `dir` (or from its
/// cifar-10-batches-bin subdirectory).
inline DatasetPair load_cifar10(std::filesystem::path dir) {
    if (!std::filesystem::exists(dir / "data_batch_1.bin") &&
        std::filesystem::exists(dir / "cifar-10-batches-bin"))
        dir /= "cifar-10-batches-bin";
    std::vector<std::string> names;
    for (int i = 1; i <= 5; ++i) names.push_back("data_batch_" + std::to_string(i) + ".bin");
    names.push_back("test_batch.bin");
    detail::require_files(dir, names, "CIFAR-10");
    RawImages train;
    for (int i = 0; i < 5; ++i) {
        const auto p = (dir / names[i]).string();
        append(train, parse_cifar_batch(io::read_file(p), p));
    }
    const auto tp = (dir / names[5]).string();
    const auto test = parse_cifar_batch(io::read_file(tp), tp);
    const auto norm = channel_stats(train);
    return {to_dataset(train, norm, Split::Train), to_dataset(test, norm, Split::Test)};
}

/// First `n` items (or all when n is 0 or larger than the set).
inline Dataset take(const Dataset& ds, std::size_t n) {
    if (n == 0 || n >= ds.size()) return ds;
    Dataset out;
    out.split = ds.split;
    Shape s = ds.images.shape();
    s[0] = n;
    std::vector<float> data(ds.images.data().begin(),
                            ds.images.data().begin() + static_cast<std::ptrdiff_t>(n * ds.image_size()));
    out.images = Tensor(s, std::move(data));
    out.labels.assign(ds.labels.begin(), ds.labels.begin() + static_cast<std::ptrdiff_t>(n));
    return out;
}

/// Zero-pads every image to size x size (0 is the normalized mean).
inline Dataset pad_to(const Dataset& ds, std::size_t size) {
    const std::size_t h = ds.height(), w = ds.width();
    if (h == size && w == size) return ds;
    if (h > size || w > size || (size - h) % 2 || (size - w) % 2)
        throw ConfigError("cannot center-pad " + std::to_string(h) + "x" + std::to_string(w) +
                          " to " + std::to_string(size));
    const std::size_t oy = (size - h) / 2, ox = (size - w) / 2, c = ds.channels();
    Dataset out;
    out.split = ds.split;
    out.labels = ds.labels;
    out.images = Tensor({ds.size(), c, size, size});
    for (std::size_t i = 0; i < ds.size() * c; ++i)
        for (std::size_t y = 0; y < h; ++y)
            std::copy_n(ds.images.ptr() + (i * h + y) * w, w,
                        out.images.ptr() + (i * size + y + oy) * size + ox);
    return out;
}

// ---- batching --------------------------------------------------------------

struct Batch {
    Tensor x;
    std::vector<int> y;
};

/// One epoch's deterministic batch order. Shuffling uses
/// Rng(mix_seed(seed, epoch)); each batch's augmentation draws come from its
/// own stream, so any batch can be materialized independently. The last
/// partial batch is kept.
class EpochBatches {
public:
    EpochBatches(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, std::size_t epoch,
                 bool augment, bool shuffle = true)
        : ds_(&ds), batch_size_(batch_size), seed_(seed), epoch_(epoch), augment_(augment) {
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
        order_.resize(ds.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        if (shuffle) {
            Rng rng(mix_seed(seed, 2 * epoch));
            rng.shuffle(std::span<std::size_t>(order_));
        }
    }

    std::size_t count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }
    const std::vector<std::size_t>& order() const { return order_; }

    std::span<const std::size_t> indices(std::size_t b) const {
        const std::size_t begin = b * batch_size_;
        const std::size_t end = std::min(order_.size(), begin + batch_size_);
        return std::span<const std::size_t>(order_).subspan(begin, end - begin);
    }

    Batch get(std::size_t b) const {
        const auto idx = indices(b);
        const Dataset& ds = *ds_;
        const std::size_t c = ds.channels(), h = ds.height(), w = ds.width(), img = c * h * w;
        Batch batch{Tensor({idx.size(), c, h, w}), std::vector<int>(idx.size())};
        Rng rng(mix_seed(seed_, 2 * epoch_ + 1) ^ (0x5851F42D4C957F2Dull * (b + 1)));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const float* src = ds.images.ptr() + idx[i] * img;
            float* dst = batch.x.ptr() + i * img;
            batch.y[i] = ds.labels[idx[i]];
            if (!augment_) {
                std::copy_n(src, img, dst);
                continue;
            }
            // 4-pixel zero padding, random crop, random horizontal flip.
            const auto dy = static_cast<std::ptrdiff_t>(rng.below(9)) - 4;
            const auto dx = static_cast<std::ptrdiff_t>(rng.below(9)) - 4;
            const bool flip = rng.coin();
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t x = 0; x < w; ++x) {
                        const auto sy = static_cast<std::ptrdiff_t>(y) + dy;
                        const auto sx0 = static_cast<std::ptrdiff_t>(flip ? w - 1 - x : x) + dx;
                        const bool inside = sy >= 0 && sx0 >= 0 &&
                                            sy < static_cast<std::ptrdiff_t>(h) &&
                                            sx0 < static_cast<std::ptrdiff_t>(w);
                        dst[(ch * h + y) * w + x] =
                            inside ? src[(ch * h + static_cast<std::size_t>(sy)) * w +
                                         static_cast<std::size_t>(sx0)]
                                   : 0.0f;
                    }
        }
        return batch;
    }

private:
    const Dataset* ds_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::size_t epoch_;
    bool augment_;
    std::vector<std::size_t> order_;
};

}  // namespace bnn
