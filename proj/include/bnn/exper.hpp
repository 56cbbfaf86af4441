#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "bnn/config.hpp"
#include "bnn/data.hpp"
#include "bnn/models.hpp"
#include "bnn/optim.hpp"

namespace bnn {

inline constexpr int kRecordFormatVersion = 1;

// ---- statistics ------------------------------------------------------------

struct MeanStd {
    double mean = std::numeric_limits<double>::quiet_NaN();
    double std = std::numeric_limits<double>::quiet_NaN();
    std::size_t n = 0;
};

/// Mean and sample standard deviation (n - 1); std is 0 for a single value.
inline MeanStd mean_std(std::span<const double> v) {
    MeanStd r;
    r.n = v.size();
    if (v.empty()) return r;
    double s = 0.0;
    for (double x : v) s += x;
    r.mean = s / static_cast<double>(v.size());
    if (v.size() == 1) {
        r.std = 0.0;
        return r;
    }
    double sq = 0.0;
    for (double x : v) sq += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(sq / static_cast<double>(v.size() - 1));
    return r;
}

/// Ranks starting at 1; tied values share the average of their ranks.
inline std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double r = (static_cast<double>(i + j) / 2.0) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

/// Spearman rank correlation (Pearson on average ranks).
inline double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 2) throw ConfigError("spearman: need two equal-length series of >= 2");
    const auto ra = average_ranks(a), rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

/// Fixed-width histogram; values outside [lo, hi) land in the edge bins.
struct Histogram {
    double lo = -4.0, hi = 4.0;
    std::vector<std::uint64_t> counts;

    Histogram() : counts(80) {}
    Histogram(double lo_, double hi_, std::size_t bins) : lo(lo_), hi(hi_), counts(bins) {
        if (bins == 0 || !(hi > lo)) throw ConfigError("histogram: need bins >= 1 and hi > lo");
    }

    double width() const { return (hi - lo) / static_cast<double>(counts.size()); }
    double bin_left(std::size_t i) const { return lo + static_cast<double>(i) * width(); }

    void add(double v) {
        if (std::isnan(v)) return;
        const double f = std::floor((v - lo) / width());
        const auto last = static_cast<double>(counts.size() - 1);
        ++counts[static_cast<std::size_t>(std::clamp(f, 0.0, last))];
    }
    std::uint64_t total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }

    std::string csv() const {
        std::string s = "bin_left,count\n";
        for (std::size_t i = 0; i < counts.size(); ++i)
            s += config_detail::fmt(bin_left(i)) + "," + std::to_string(counts[i]) + "\n";
        return s;
    }
};

// ---- records ---------------------------------------------------------------

struct EpochMetrics {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0, train_acc = 0.0;  // running, train mode
    double test_loss = 0.0, test_acc = 0.0;    // eval mode
    std::vector<double> balance;               // +1 fraction per sign layer on the test split
};

struct ChannelThreshold {
    double beta = 0.0, threshold = 0.0;
    double effective() const { return threshold - beta; }
};

enum class RunStatus { Ok, Diverged };

struct RunRecord {
    std::string config_hash;
    std::string resolved_config;
    double shift = 0.0;
    std::uint64_t seed = 0;
    RunStatus status = RunStatus::Ok;
    std::vector<EpochMetrics> epochs;
    std::vector<std::string> sign_layer_names;
    std::vector<bool> post_maxpool;
    std::vector<std::vector<ChannelThreshold>> thresholds;  // per sign layer with a BN in front
    std::vector<Histogram> preact;                          // when record_distributions is set
    std::size_t mirror_checks = 0, mirror_violations = 0;
    double wall_seconds = 0.0;

    bool ok() const { return status == RunStatus::Ok; }
    double final_test_acc() const {
        return epochs.empty() ? std::numeric_limits<double>::quiet_NaN() : epochs.back().test_acc;
    }
    double first_epoch_train_acc() const {
        return epochs.empty() ? std::numeric_limits<double>::quiet_NaN() : epochs.front().train_acc;
    }
    std::vector<double> effective_thresholds() const {
        std::vector<double> out;
        for (const auto& layer : thresholds)
            for (const auto& c : layer) out.push_back(c.effective());
        return out;
    }

    nlohmann::ordered_json to_json() const {
        using nlohmann::ordered_json;
        auto num = [](double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); };
        ordered_json j;
        j["format_version"] = kRecordFormatVersion;
        j["config_hash"] = config_hash;
        j["config"] = resolved_config;
        j["shift"] = shift;
        j["seed"] = seed;
        j["status"] = ok() ? "ok" : "diverged";
        j["wall_seconds"] = wall_seconds;
        j["sign_layers"] = sign_layer_names;
        j["post_maxpool"] = post_maxpool;
        auto& eps = j["epochs"] = ordered_json::array();
        for (const auto& e : epochs) {
            ordered_json je;
            je["epoch"] = e.epoch;
            je["lr"] = num(e.lr);
            je["train_loss"] = num(e.train_loss);
            je["train_acc"] = num(e.train_acc);
            je["test_loss"] = num(e.test_loss);
            je["test_acc"] = num(e.test_acc);
            je["balance"] = ordered_json::array();
            for (double b : e.balance) je["balance"].push_back(num(b));
            eps.push_back(std::move(je));
        }
        auto& th = j["thresholds"] = ordered_json::array();
        for (const auto& layer : thresholds) {
            ordered_json jl = ordered_json::array();
            for (const auto& c : layer) jl.push_back({{"beta", c.beta}, {"th", c.threshold}, {"eff", c.effective()}});
            th.push_back(std::move(jl));
        }
        if (!preact.empty()) {
            auto& h = j["preact_hist"] = ordered_json::array();
            for (const auto& hist : preact)
                h.push_back({{"lo", hist.lo}, {"hi", hist.hi}, {"counts", hist.counts}});
        }
        j["mirror_checks"] = mirror_checks;
        j["mirror_violations"] = mirror_violations;
        return j;
    }

    static RunRecord from_json(const nlohmann::json& j) {
        if (j.value("format_version", 0) != kRecordFormatVersion)
            throw FormatError("run record: unsupported format_version");
        auto num = [](const nlohmann::json& v) {
            return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
        };
        RunRecord r;
        r.config_hash = j.at("config_hash").get<std::string>();
        r.resolved_config = j.at("config").get<std::string>();
        r.shift = j.at("shift").get<double>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.status = j.at("status").get<std::string>() == "ok" ? RunStatus::Ok : RunStatus::Diverged;
        r.wall_seconds = j.at("wall_seconds").get<double>();
        r.sign_layer_names = j.at("sign_layers").get<std::vector<std::string>>();
        r.post_maxpool = j.at("post_maxpool").get<std::vector<bool>>();
        for (const auto& je : j.at("epochs")) {
            EpochMetrics e;
            e.epoch = je.at("epoch").get<std::size_t>();
            e.lr = num(je.at("lr"));
            e.train_loss = num(je.at("train_loss"));
            e.train_acc = num(je.at("train_acc"));
            e.test_loss = num(je.at("test_loss"));
            e.test_acc = num(je.at("test_acc"));
            for (const auto& b : je.at("balance")) e.balance.push_back(num(b));
            r.epochs.push_back(std::move(e));
        }
        for (const auto& jl : j.at("thresholds")) {
            std::vector<ChannelThreshold> layer;
            for (const auto& c : jl) layer.push_back({c.at("beta").get<double>(), c.at("th").get<double>()});
            r.thresholds.push_back(std::move(layer));
        }
        if (j.contains("preact_hist"))
            for (const auto& h : j.at("preact_hist")) {
                Histogram hist(h.at("lo").get<double>(), h.at("hi").get<double>(), h.at("counts").size());
                hist.counts = h.at("counts").get<std::vector<std::uint64_t>>();
                r.preact.push_back(std::move(hist));
            }
        r.mirror_checks = j.at("mirror_checks").get<std::size_t>();
        r.mirror_violations = j.at("mirror_violations").get<std::size_t>();
        return r;
    }
};

// ---- data ------------------------------------------------------------------

inline std::string default_data_dir(DatasetId id) {
    if (const char* e = std::getenv("BNN_DATA_DIR")) return e;
    return id == DatasetId::Mnist ? "/root/data/mnist" : "/root/data/cifar10";
}

/// Loads the configured dataset, applies the limits, and pads MNIST for
/// architectures that need 32x32 input.
inline DatasetPair prepare_data(const ExperimentConfig& cfg) {
    const std::string dir = cfg.data_dir.empty() ? default_data_dir(cfg.dataset) : cfg.data_dir;
    auto pair = cfg.dataset == DatasetId::Mnist ? load_mnist(dir) : load_cifar10(dir);
    pair.train = take(pair.train, cfg.train_limit);
    pair.test = take(pair.test, cfg.test_limit);
    const auto spec = cfg.run_spec(cfg.effective_shifts().front());
    if (pair.train.height() != spec.in_height) {
        pair.train = pad_to(pair.train, spec.in_height);
        pair.test = pad_to(pair.test, spec.in_height);
    }
    return pair;
}

// ---- model inspection ------------------------------------------------------

struct SignSite {
    SignAct<float>* sign = nullptr;
    BatchNorm<float>* bn = nullptr;  // directly preceding BN, if any
    bool post_maxpool = false;       // a max pool feeds this activation's BN
};

/// Sign layers in forward order with the BN in front of each and whether a
/// max pool sits between the previous weight layer and the activation.
inline std::vector<SignSite> sign_sites(Model<float>& m) {
    std::vector<SignSite> out;
    Layer<float>* prev = nullptr;
    bool pooled = false;
    walk<float>(m.root(), [&](Layer<float>& l) {
        if (auto* s = dynamic_cast<SignAct<float>*>(&l)) {
            out.push_back({s, dynamic_cast<BatchNorm<float>*>(prev), pooled});
            pooled = false;
        } else if (dynamic_cast<MaxPool2<float>*>(&l)) {
            pooled = true;
        } else if (dynamic_cast<WeightedLayer<float>*>(&l)) {
            pooled = false;
        }
        prev = &l;
    });
    return out;
}

struct LayerBalance {
    std::string name;
    bool post_maxpool = false;
    std::uint64_t plus = 0, total = 0;
    double fraction() const { return total ? static_cast<double>(plus) / static_cast<double>(total) : 0.0; }
};

/// Fraction of +1 per binary activation layer over one eval-mode pass.
inline std::vector<LayerBalance> balance_stats(Model<float>& m, const Tensor& batch) {
    auto sites = sign_sites(m);
    if (sites.empty()) throw ConfigError("balance_stats: model has no binary activation");
    m.forward(batch, Mode::Eval);
    std::vector<LayerBalance> out;
    for (const auto& s : sites)
        out.push_back({s.sign->name(), s.post_maxpool, s.sign->last_plus(), s.sign->last_total()});
    return out;
}

inline std::string balance_csv(const std::vector<LayerBalance>& b) {
    std::string s = "layer,post_maxpool,plus_fraction,elements\n";
    for (const auto& l : b)
        s += l.name + "," + (l.post_maxpool ? "1" : "0") + "," + config_detail::fmt(l.fraction()) + "," +
             std::to_string(l.total) + "\n";
    return s;
}

/// Per-channel (beta, th) for every sign layer fed directly by a BN.
inline std::vector<std::vector<ChannelThreshold>> channel_thresholds(Model<float>& m) {
    std::vector<std::vector<ChannelThreshold>> out;
    for (const auto& s : sign_sites(m)) {
        if (!s.bn) continue;
        const auto& beta = s.bn->beta().value;
        const auto& th = s.sign->threshold().value;
        std::vector<ChannelThreshold> layer(beta.size());
        for (std::size_t c = 0; c < beta.size(); ++c)
            layer[c] = {beta[c], th[th.size() == 1 ? 0 : c]};
        out.push_back(std::move(layer));
    }
    return out;
}

// ---- training --------------------------------------------------------------

struct EvalResult {
    double loss = 0.0, acc = 0.0;
    std::vector<double> balance;
};

inline EvalResult evaluate(Model<float>& m, const Dataset& ds, std::size_t batch_size = 1000) {
    EpochBatches eb(ds, batch_size, 0, 0, false, false);
    const auto sites = sign_sites(m);
    std::vector<std::uint64_t> plus(sites.size()), total(sites.size());
    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < eb.count(); ++b) {
        const auto batch = eb.get(b);
        const auto r = softmax_xent(m.forward(batch.x, Mode::Eval), batch.y);
        loss += r.loss * static_cast<double>(batch.y.size());
        correct += r.correct;
        for (std::size_t i = 0; i < sites.size(); ++i) {
            plus[i] += sites[i].sign->last_plus();
            total[i] += sites[i].sign->last_total();
        }
    }
    EvalResult out;
    const auto n = static_cast<double>(ds.size());
    out.loss = loss / n;
    out.acc = static_cast<double>(correct) / n;
    for (std::size_t i = 0; i < sites.size(); ++i)
        out.balance.push_back(total[i] ? static_cast<double>(plus[i]) / static_cast<double>(total[i]) : 0.0);
    return out;
}

struct TrainOptions {
    /// Compare grad(th) with -grad(beta) before every optimizer step.
    bool check_mirror = false;
    /// Stop after this many epochs (0 = all configured epochs). Remaining
    /// epochs are not recorded; used by the first-epoch search.
    std::size_t max_epochs = 0;
    /// Called after each epoch.
    std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
    RunRecord record;
    Model<float> model;
};

namespace exper_detail {

inline std::size_t mirror_violations(const std::vector<SignSite>& sites) {
    std::size_t bad = 0;
    for (const auto& s : sites) {
        if (!s.bn || !s.sign->threshold().trainable) continue;
        const auto& gt = s.sign->threshold().grad;
        const auto& gb = s.bn->beta().grad;
        if (gt.size() != gb.size()) continue;
        for (std::size_t c = 0; c < gt.size(); ++c) bad += gt[c] != -gb[c];
    }
    return bad;
}

inline Model<float> initial_model(const ExperimentConfig& cfg, const ModelSpec& spec, std::uint64_t seed) {
    auto model = build<float>(spec, mix_seed(seed, 0));
    if (!cfg.init_from.empty()) init_from_pretrained(model, load_checkpoint(cfg.init_from), cfg.init_fp_shift);
    return model;
}

}  // namespace exper_detail

/// Trains one (shift, seed) run of `cfg`. A non-finite training loss marks
/// the run diverged; the remaining epochs are recorded as NaN.
inline TrainResult train_run(const ExperimentConfig& cfg, double shift, std::uint64_t seed,
                             const DatasetPair& data, const TrainOptions& opts = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto run_cfg = cfg.single_run(shift, seed);
    auto model = exper_detail::initial_model(cfg, run_cfg.model, seed);
    const auto sites = sign_sites(model);

    RunRecord rec;
    rec.resolved_config = resolved_text(run_cfg);
    rec.config_hash = config_hash(run_cfg);
    rec.shift = shift;
    rec.seed = seed;
    for (const auto& s : sites) {
        rec.sign_layer_names.push_back(s.sign->name());
        rec.post_maxpool.push_back(s.post_maxpool);
    }

    auto params = model.params();
    std::optional<Adam<float>> adam;
    std::optional<SgdMomentum<float>> sgd;
    if (cfg.optimizer == OptimizerKind::Adam)
        adam.emplace(params);
    else
        sgd.emplace(params, cfg.momentum);

    const std::size_t epochs = opts.max_epochs ? std::min(opts.max_epochs, cfg.epochs) : cfg.epochs;
    const std::uint64_t batch_seed = mix_seed(seed, 1);
    const bool augment = cfg.augment_enabled();
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t e = 0; e < epochs; ++e) {
        EpochMetrics em;
        em.epoch = e;
        em.lr = lr_at(e, cfg.epochs, cfg.lr, cfg.warmup);
        if (!rec.ok()) {
            em.train_loss = em.train_acc = em.test_loss = em.test_acc = nan;
            em.balance.assign(sites.size(), nan);
            rec.epochs.push_back(std::move(em));
            continue;
        }
        EpochBatches eb(data.train, cfg.batch_size, batch_seed, e, augment);
        double loss_sum = 0.0;
        std::size_t correct = 0, seen = 0;
        for (std::size_t b = 0; b < eb.count(); ++b) {
            const auto batch = eb.get(b);
            const auto r = softmax_xent(model.forward(batch.x, Mode::Train), batch.y);
            if (!std::isfinite(r.loss)) {
                rec.status = RunStatus::Diverged;
                break;
            }
            model.backward(r.grad);
            if (opts.check_mirror) {
                ++rec.mirror_checks;
                const auto bad = exper_detail::mirror_violations(sites);
                rec.mirror_violations += bad;
#ifndef NDEBUG
                if (bad) throw Error("threshold/beta gradient mirror violated at epoch " + std::to_string(e));
#endif
            }
            if (adam)
                adam->step(em.lr);
            else
                sgd->step(em.lr);
            loss_sum += r.loss * static_cast<double>(batch.y.size());
            correct += r.correct;
            seen += batch.y.size();
        }
        if (!rec.ok()) {
            em.train_loss = em.train_acc = em.test_loss = em.test_acc = nan;
            em.balance.assign(sites.size(), nan);
        } else {
            em.train_loss = loss_sum / static_cast<double>(seen);
            em.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
            const auto ev = evaluate(model, data.test);
            em.test_loss = ev.loss;
            em.test_acc = ev.acc;
            em.balance = ev.balance;
            if (!std::isfinite(ev.loss)) rec.status = RunStatus::Diverged;
        }
        if (opts.on_epoch) opts.on_epoch(em);
        rec.epochs.push_back(std::move(em));
    }

    rec.thresholds = channel_thresholds(model);
    if (cfg.record_distributions && rec.ok()) {
        // Pre-activation snapshot on the first test batch.
        EpochBatches eb(data.test, std::min<std::size_t>(1000, data.test.size()), 0, 0, false, false);
        model.forward(eb.get(0).x, Mode::Eval);
        for (const auto& s : sites) {
            Histogram h;
            for (float v : s.sign->last_input().data()) h.add(v);
            rec.preact.push_back(std::move(h));
        }
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {std::move(rec), std::move(model)};
}

// ---- sweeps ----------------------------------------------------------------

inline std::size_t default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

/// Runs fn(i) for i in [0, n) on `workers` threads pulling from a shared
/// counter. The first exception is rethrown after all workers stop.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto work = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                next = n;
            }
        }
    };
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    if (error) std::rethrow_exception(error);
}

struct ShiftSummary {
    double shift = 0.0;
    MeanStd test_acc;       // over ok runs
    MeanStd first_epoch;    // first-epoch train accuracy over ok runs
    std::size_t failed = 0;
};

struct SweepResult {
    std::vector<RunRecord> runs;  // ordered by (shift, seed) as configured
    std::vector<ShiftSummary> summary;

    std::string csv() const {
        std::string s = "shift,seed,final_test_acc,first_epoch_train_acc,status\n";
        auto num = [](double v) { return std::isfinite(v) ? config_detail::fmt(v) : std::string("nan"); };
        for (const auto& r : runs)
            s += config_detail::fmt(r.shift) + "," + std::to_string(r.seed) + "," + num(r.final_test_acc()) +
                 "," + num(r.first_epoch_train_acc()) + "," + (r.ok() ? "ok" : "diverged") + "\n";
        return s;
    }

    std::string summary_csv() const {
        std::string s = "shift,runs,failed,mean_test_acc,std_test_acc,mean_first_epoch_train_acc\n";
        auto num = [](double v) { return std::isfinite(v) ? config_detail::fmt(v) : std::string("nan"); };
        for (const auto& p : summary)
            s += config_detail::fmt(p.shift) + "," + std::to_string(p.test_acc.n) + "," +
                 std::to_string(p.failed) + "," + num(p.test_acc.mean) + "," + num(p.test_acc.std) + "," +
                 num(p.first_epoch.mean) + "\n";
        return s;
    }
};

inline std::vector<ShiftSummary> summarize(const std::vector<RunRecord>& runs, const std::vector<double>& shifts) {
    std::vector<ShiftSummary> out;
    for (double shift : shifts) {
        ShiftSummary p;
        p.shift = shift;
        std::vector<double> acc, first;
        for (const auto& r : runs) {
            if (r.shift != shift) continue;
            if (!r.ok()) {
                ++p.failed;
                continue;
            }
            acc.push_back(r.final_test_acc());
            first.push_back(r.first_epoch_train_acc());
        }
        p.test_acc = mean_std(acc);
        p.first_epoch = mean_std(first);
        out.push_back(p);
    }
    return out;
}

struct SweepOptions {
    std::size_t workers = 1;
    std::size_t max_epochs = 0;  // 0 = configured epochs
    bool check_mirror = false;
    std::function<void(const RunRecord&)> on_run;  // called under a lock as new runs finish
    /// Earlier records; a planned run whose config hash matches one of these
    /// is taken as-is instead of retrained (runs are deterministic).
    std::vector<RunRecord> reuse;
};

/// One run per (shift, seed). Results are stored by job index, so the output
/// does not depend on worker count or completion order.
inline SweepResult shift_sweep(const ExperimentConfig& cfg, const DatasetPair& data, const SweepOptions& opts = {}) {
    cfg.validate();
    const auto shifts = cfg.effective_shifts();
    const std::size_t ns = cfg.seeds.size();
    SweepResult out;
    out.runs.resize(shifts.size() * ns);
    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < out.runs.size(); ++i) {
        const double shift = shifts[i / ns];
        const auto seed = cfg.seeds[i % ns];
        const auto hash = config_hash(cfg.single_run(shift, seed));
        const std::size_t want = opts.max_epochs ? std::min(opts.max_epochs, cfg.epochs) : cfg.epochs;
        auto it = std::find_if(opts.reuse.begin(), opts.reuse.end(), [&](const RunRecord& r) {
            return r.config_hash == hash && r.shift == shift && r.seed == seed && r.epochs.size() == want;
        });
        if (it != opts.reuse.end())
            out.runs[i] = *it;
        else
            todo.push_back(i);
    }
    std::mutex done;
    parallel_for(todo.size(), opts.workers, [&](std::size_t k) {
        const std::size_t i = todo[k];
        TrainOptions to;
        to.max_epochs = opts.max_epochs;
        to.check_mirror = opts.check_mirror;
        auto r = train_run(cfg, shifts[i / ns], cfg.seeds[i % ns], data, to);
        std::lock_guard lock(done);
        out.runs[i] = std::move(r.record);
        if (opts.on_run) opts.on_run(out.runs[i]);
    });
    out.summary = summarize(out.runs, shifts);
    return out;
}

/// argmax of `scores`; ties go to the smaller |shift|, then the smaller shift.
inline double select_shift(const std::vector<double>& shifts, const std::vector<double>& scores) {
    if (shifts.empty() || shifts.size() != scores.size())
        throw ConfigError("select_shift: need equal-length, non-empty shift and score lists");
    std::size_t best = 0;
    for (std::size_t i = 1; i < shifts.size(); ++i) {
        const bool better = scores[i] > scores[best] ||
                            (scores[i] == scores[best] &&
                             (std::abs(shifts[i]) < std::abs(shifts[best]) ||
                              (std::abs(shifts[i]) == std::abs(shifts[best]) && shifts[i] < shifts[best])));
        if (better) best = i;
    }
    return shifts[best];
}

struct SearchResult {
    double chosen = 0.0;
    std::vector<double> shifts;
    std::vector<double> first_epoch_acc;  // mean over seeds, NaN runs excluded
    SweepResult sweep;
};

/// Trains every shift for exactly one epoch and picks the best mean
/// first-epoch training accuracy.
inline SearchResult first_epoch_search(const ExperimentConfig& cfg, const DatasetPair& data,
                                       const SweepOptions& opts = {}) {
    auto o = opts;
    o.max_epochs = 1;
    SearchResult r;
    r.sweep = shift_sweep(cfg, data, o);
    r.shifts = cfg.effective_shifts();
    for (const auto& p : r.sweep.summary)
        r.first_epoch_acc.push_back(std::isfinite(p.first_epoch.mean) ? p.first_epoch.mean : -1.0);
    r.chosen = select_shift(r.shifts, r.first_epoch_acc);
    return r;
}

struct ThresholdStudy {
    RunRecord record;
    Histogram effective;  // th - beta over every channel
};

/// Trains with trainable per-channel thresholds (init = the shift, beta = 0)
/// and reports the final (beta, th) pairs and their effective thresholds.
inline ThresholdStudy threshold_bias_study(ExperimentConfig cfg, double init, std::uint64_t seed,
                                           const DatasetPair& data) {
    cfg.model.sign.trainable = true;
    cfg.model.sign.per_channel = true;
    TrainOptions o;
    o.check_mirror = true;
    ThresholdStudy s;
    s.record = train_run(cfg, init, seed, data, o).record;
    for (double e : s.record.effective_thresholds()) s.effective.add(e);
    return s;
}

struct SlopeGridResult {
    std::vector<double> slopes;
    std::vector<SweepResult> sweeps;  // one per slope

    std::string csv() const {
        std::string s = "slope,shift,runs,failed,mean_test_acc,std_test_acc\n";
        auto num = [](double v) { return std::isfinite(v) ? config_detail::fmt(v) : std::string("nan"); };
        for (std::size_t i = 0; i < slopes.size(); ++i)
            for (const auto& p : sweeps[i].summary)
                s += config_detail::fmt(slopes[i]) + "," + config_detail::fmt(p.shift) + "," +
                     std::to_string(p.test_acc.n) + "," + std::to_string(p.failed) + "," +
                     num(p.test_acc.mean) + "," + num(p.test_acc.std) + "\n";
        return s;
    }
};

/// A shift sweep per LeakyReLU slope on resnet20ds, with pre-activation
/// snapshots recorded.
inline SlopeGridResult slope_grid(ExperimentConfig cfg, const std::vector<double>& slopes, const DatasetPair& data,
                                  const SweepOptions& opts = {}) {
    if (cfg.model.arch != Arch::Resnet20ds) throw ConfigError("slope_grid requires arch = resnet20ds");
    SlopeGridResult r;
    r.slopes = slopes;
    cfg.model.extra_act = ExtraAct::Leaky;
    cfg.record_distributions = true;
    for (double s : slopes) {
        cfg.model.leaky_slope = s;
        r.sweeps.push_back(shift_sweep(cfg, data, opts));
    }
    return r;
}

// ---- output ----------------------------------------------------------------

inline void append_jsonl(const std::string& path, const RunRecord& r) {
    std::ofstream f(path, std::ios::app);
    if (!f) throw Error("cannot open " + path + " for writing");
    f << r.to_json().dump() << "\n";
}

inline std::vector<RunRecord> read_jsonl(const std::string& path) {
    std::vector<RunRecord> out;
    std::ifstream f(path);
    if (!f) return out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(RunRecord::from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot open " + path + " for writing");
    f << text;
}

}  // namespace bnn
