#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bnn/error.hpp"
#include "bnn/io.hpp"
#include "bnn/models.hpp"

namespace bnn {

enum class DatasetId { Mnist, Cifar10 };
enum class OptimizerKind { Adam, Sgd };

/// Everything a training run or sweep needs. Parsed from a key = value file;
/// see configs/example.cfg for the annotated key list.
struct ExperimentConfig {
    ModelSpec model{};
    DatasetId dataset = DatasetId::Mnist;
    std::string data_dir;  // empty: BNN_DATA_DIR or the built-in default
    OptimizerKind optimizer = OptimizerKind::Adam;
    double lr = 0.01;
    double momentum = 0.9;
    std::size_t epochs = 30;
    std::size_t batch_size = 256;
    std::size_t warmup = 0;
    std::vector<double> shifts;  // empty: the single shift set by 'shift' or 'x_offset'
    std::vector<std::uint64_t> seeds{1};
    std::optional<bool> augment;  // default: on for CIFAR-10, off for MNIST
    bool record_distributions = false;
    std::size_t train_limit = 0;  // 0 = full split
    std::size_t test_limit = 0;
    std::string init_from;        // full-precision checkpoint to start from
    double init_fp_shift = 0.0;   // hardtanh x_offset that checkpoint used

    bool augment_enabled() const { return augment.value_or(dataset == DatasetId::Cifar10); }

    void validate() const {
        if (seeds.empty()) throw ConfigError("seeds must not be empty");
        if (epochs == 0) throw ConfigError("epochs must be >= 1");
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
        if (warmup >= epochs && warmup != 0) throw ConfigError("warmup must be < epochs");
        for (double s : effective_shifts())
            if (!std::isfinite(s)) throw ConfigError("shifts must be finite");
        if (optimizer == OptimizerKind::Sgd && !(momentum >= 0.0 && momentum < 1.0))
            throw ConfigError("momentum must be in [0, 1)");
        run_spec(effective_shifts().front()).validate();
    }

    std::vector<double> effective_shifts() const {
        if (!shifts.empty()) return shifts;
        if (model.activation == Activation::GenHardtanh) return {model.hardtanh.x_offset};
        return {model.sign.threshold_shift};
    }

    /// Model spec for one run: input dims come from the dataset, and the
    /// shift lands on the sign threshold or the hardtanh x_offset.
    ModelSpec run_spec(double shift) const {
        ModelSpec s = model;
        if (dataset == DatasetId::Mnist) {
            s.in_channels = 1;
            s.in_height = s.in_width = (model.arch == Arch::VggSmall) ? 32 : 28;
        } else {
            s.in_channels = 3;
            s.in_height = s.in_width = 32;
        }
        s.num_classes = 10;
        if (s.activation == Activation::Sign) s.sign.threshold_shift = shift;
        if (s.activation == Activation::GenHardtanh) s.hardtanh.x_offset = shift;
        return s;
    }

    /// This config narrowed to a single (shift, seed) run.
    ExperimentConfig single_run(double shift, std::uint64_t seed) const {
        ExperimentConfig c = *this;
        c.model = run_spec(shift);
        c.shifts = {shift};
        c.seeds = {seed};
        return c;
    }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    }
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
        const auto n = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
    }
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "on" || v == "yes" || v == "1") return true;
    if (v == "false" || v == "off" || v == "no" || v == "0") return false;
    throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::vector<std::string> split(const std::string& v, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(v);
    while (std::getline(in, item, sep)) out.push_back(trim(item));
    return out;
}

/// "a, b, c" or an inclusive range "start:step:stop".
inline std::vector<double> to_grid(const std::string& key, const std::string& v) {
    if (v.find(':') != std::string::npos) {
        const auto parts = split(v, ':');
        if (parts.size() != 3) throw ConfigError("key '" + key + "': range must be start:step:stop");
        const double a = to_double(key, parts[0]), step = to_double(key, parts[1]),
                     b = to_double(key, parts[2]);
        if (!(step > 0.0) || b < a) throw ConfigError("key '" + key + "': bad range '" + v + "'");
        std::vector<double> out;
        const auto n = static_cast<std::size_t>(std::floor((b - a) / step + 1e-9));
        for (std::size_t i = 0; i <= n; ++i) {
            // Round to 1e-9 so 0.1-style steps give clean grid points.
            out.push_back(std::round((a + static_cast<double>(i) * step) * 1e9) / 1e9);
        }
        return out;
    }
    std::vector<double> out;
    for (const auto& p : split(v, ',')) out.push_back(to_double(key, p));
    return out;
}

template <class E>
E to_enum(const std::string& key, const std::string& v,
          std::initializer_list<std::pair<const char*, E>> options) {
    std::string names;
    for (const auto& [name, e] : options) {
        if (v == name) return e;
        names += (names.empty() ? "" : ", ") + std::string(name);
    }
    throw ConfigError("key '" + key + "': unknown value '" + v + "' (expected one of " + names + ")");
}

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    // Prefer the shortest representation that round-trips.
    for (int p = 1; p <= 17; ++p) {
        char s[32];
        std::snprintf(s, sizeof s, "%.*g", p, v);
        if (std::stod(s) == v) return s;
    }
    return buf;
}

}  // namespace config_detail

/// Applies one key = value setting. Unknown keys throw ConfigError naming
/// the key.
inline void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    using namespace config_detail;
    auto& m = cfg.model;
    if (key == "arch") {
        m.arch = to_enum<Arch>(key, value,
                               {{"mlp2", Arch::Mlp2}, {"lenet5", Arch::Lenet5},
                                {"vggsmall", Arch::VggSmall}, {"resnet20ds", Arch::Resnet20ds}});
    } else if (key == "precision") {
        m.precision = to_enum<Precision>(
            key, value,
            {{"fp", Precision::Fp}, {"binary-weight", Precision::BinaryWeight}, {"binary", Precision::Binary}});
    } else if (key == "activation") {
        m.activation = to_enum<Activation>(
            key, value,
            {{"sign", Activation::Sign}, {"gen_hardtanh", Activation::GenHardtanh}, {"relu6", Activation::Relu6}});
    } else if (key == "shift") {
        m.sign.threshold_shift = to_double(key, value);
        cfg.shifts = {m.sign.threshold_shift};
    } else if (key == "trainable_threshold") {
        m.sign.trainable = to_bool(key, value);
    } else if (key == "per_channel") {
        m.sign.per_channel = to_bool(key, value);
    } else if (key == "ste_clip") {
        m.sign.ste_clip = to_double(key, value);
    } else if (key == "x_offset") {
        m.hardtanh.x_offset = to_double(key, value);
    } else if (key == "y_offset") {
        m.hardtanh.y_offset = to_double(key, value);
    } else if (key == "range") {
        m.hardtanh.range = to_double(key, value);
    } else if (key == "pooling") {
        m.pooling = to_enum<Pooling>(key, value, {{"max", Pooling::Max}, {"avg", Pooling::Avg}});
    } else if (key == "extra_act") {
        m.extra_act = to_enum<ExtraAct>(
            key, value, {{"none", ExtraAct::None}, {"prelu", ExtraAct::PReLU}, {"leaky", ExtraAct::Leaky}});
    } else if (key == "leaky_slope") {
        m.leaky_slope = to_double(key, value);
    } else if (key == "binarize_first_last") {
        m.binarize_first_last = to_bool(key, value);
    } else if (key == "dataset") {
        cfg.dataset = to_enum<DatasetId>(key, value, {{"mnist", DatasetId::Mnist}, {"cifar10", DatasetId::Cifar10}});
    } else if (key == "data_dir") {
        cfg.data_dir = value;
    } else if (key == "optimizer") {
        cfg.optimizer = to_enum<OptimizerKind>(key, value, {{"adam", OptimizerKind::Adam}, {"sgd", OptimizerKind::Sgd}});
    } else if (key == "lr") {
        cfg.lr = to_double(key, value);
    } else if (key == "momentum") {
        cfg.momentum = to_double(key, value);
    } else if (key == "epochs") {
        cfg.epochs = to_u64(key, value);
    } else if (key == "batch_size") {
        cfg.batch_size = to_u64(key, value);
    } else if (key == "warmup") {
        cfg.warmup = to_u64(key, value);
    } else if (key == "shifts") {
        cfg.shifts = to_grid(key, value);
    } else if (key == "seeds") {
        cfg.seeds.clear();
        if (value.find(':') != std::string::npos) {
            const auto parts = split(value, ':');
            if (parts.size() != 2) throw ConfigError("key 'seeds': range must be first:last");
            const auto a = to_u64(key, parts[0]), b = to_u64(key, parts[1]);
            if (b < a) throw ConfigError("key 'seeds': empty range");
            for (auto s = a; s <= b; ++s) cfg.seeds.push_back(s);
        } else {
            for (const auto& p : split(value, ',')) cfg.seeds.push_back(to_u64(key, p));
        }
    } else if (key == "augment") {
        cfg.augment = to_bool(key, value);
    } else if (key == "record_distributions") {
        cfg.record_distributions = to_bool(key, value);
    } else if (key == "train_limit") {
        cfg.train_limit = to_u64(key, value);
    } else if (key == "test_limit") {
        cfg.test_limit = to_u64(key, value);
    } else if (key == "init_from") {
        cfg.init_from = value;
    } else if (key == "init_fp_shift") {
        cfg.init_fp_shift = to_double(key, value);
    } else {
        throw ConfigError("unknown key '" + key + "'");
    }
}

/// Parses key = value lines; '#' starts a comment. Errors carry
/// "source:line:".
inline ExperimentConfig parse_config(const std::string& text, const std::string& source) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = config_detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = source + ":" + std::to_string(lineno) + ": ";
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + line + "'");
        const auto key = config_detail::trim(line.substr(0, eq));
        const auto value = config_detail::trim(line.substr(eq + 1));
        if (value.empty()) throw ConfigError(where + "empty value for key '" + key + "'");
        try {
            apply_setting(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(source + ": " + e.what());
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    const auto bytes = io::read_file(path);
    return parse_config(std::string(bytes.begin(), bytes.end()), path);
}

/// Canonical key = value text with every default filled in. Parsing it back
/// yields the same configuration. The data directory is left out: it says
/// where the data lives, not what the experiment is.
inline std::string resolved_text(const ExperimentConfig& cfg) {
    using config_detail::fmt;
    const auto& m = cfg.model;
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    auto list = [](const auto& v) {
        std::string s;
        for (const auto& x : v) {
            if (!s.empty()) s += ",";
            if constexpr (std::is_floating_point_v<std::decay_t<decltype(x)>>)
                s += fmt(x);
            else
                s += std::to_string(x);
        }
        return s;
    };
    const char* arch[] = {"mlp2", "lenet5", "vggsmall", "resnet20ds"};
    const char* prec[] = {"fp", "binary-weight", "binary"};
    const char* act[] = {"sign", "gen_hardtanh", "relu6"};
    const char* pool[] = {"max", "avg"};
    const char* extra[] = {"none", "prelu", "leaky"};
    std::string s;
    auto kv = [&](const char* k, const std::string& v) { s += std::string(k) + " = " + v + "\n"; };
    kv("arch", arch[static_cast<int>(m.arch)]);
    kv("precision", prec[static_cast<int>(m.precision)]);
    kv("activation", act[static_cast<int>(m.activation)]);
    kv("shift", fmt(m.sign.threshold_shift));
    kv("trainable_threshold", b(m.sign.trainable));
    kv("per_channel", b(m.sign.per_channel));
    kv("ste_clip", fmt(m.sign.ste_clip));
    kv("x_offset", fmt(m.hardtanh.x_offset));
    kv("y_offset", fmt(m.hardtanh.y_offset));
    kv("range", fmt(m.hardtanh.range));
    kv("pooling", pool[static_cast<int>(m.pooling)]);
    kv("extra_act", extra[static_cast<int>(m.extra_act)]);
    kv("leaky_slope", fmt(m.leaky_slope));
    kv("binarize_first_last", b(m.binarize_first_last));
    kv("dataset", cfg.dataset == DatasetId::Mnist ? "mnist" : "cifar10");
    kv("optimizer", cfg.optimizer == OptimizerKind::Adam ? "adam" : "sgd");
    kv("lr", fmt(cfg.lr));
    kv("momentum", fmt(cfg.momentum));
    kv("epochs", std::to_string(cfg.epochs));
    kv("batch_size", std::to_string(cfg.batch_size));
    kv("warmup", std::to_string(cfg.warmup));
    kv("shifts", list(cfg.effective_shifts()));
    kv("seeds", list(cfg.seeds));
    kv("augment", b(cfg.augment_enabled()));
    kv("record_distributions", b(cfg.record_distributions));
    kv("train_limit", std::to_string(cfg.train_limit));
    kv("test_limit", std::to_string(cfg.test_limit));
    if (!cfg.init_from.empty()) {
        kv("init_from", cfg.init_from);
        kv("init_fp_shift", fmt(cfg.init_fp_shift));
    }
    return s;
}

/// FNV-1a over the resolved text, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& cfg) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : resolved_text(cfg)) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace bnn
