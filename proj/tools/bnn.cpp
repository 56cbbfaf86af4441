// Command-line driver: train, sweep, search, analyze, export, infer.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "bnn/binkernel.hpp"
#include "bnn/config.hpp"
#include "bnn/exper.hpp"

namespace fs = std::filesystem;
using namespace bnn;

namespace {

constexpr int kExitError = 1;
constexpr int kExitMismatch = 3;

struct CommonArgs {
    std::string config;
    std::vector<std::string> sets;
    std::string seeds, shifts, data_dir;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool config_required = true) {
    cmd->add_option("-c,--config", a.config, "experiment config file")->required(config_required);
    cmd->add_option("--set", a.sets, "override a config key (key=value), repeatable");
    cmd->add_option("--seeds", a.seeds, "override seeds, e.g. 1:10 or 1,2,3");
    cmd->add_option("--shifts", a.shifts, "override the shift grid, e.g. -2:0.5:2 or -1,0,1");
    cmd->add_option("--data-dir", a.data_dir, "dataset directory (default: $BNN_DATA_DIR or /root/data/<dataset>)");
}

ExperimentConfig resolve(const CommonArgs& a) {
    auto cfg = a.config.empty() ? ExperimentConfig{} : load_config(a.config);
    auto override_with = [&](const std::string& key, const std::string& value) {
        try {
            apply_setting(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("command line: ") + e.what());
        }
    };
    for (const auto& s : a.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
        override_with(config_detail::trim(s.substr(0, eq)), config_detail::trim(s.substr(eq + 1)));
    }
    if (!a.seeds.empty()) override_with("seeds", a.seeds);
    if (!a.shifts.empty()) override_with("shifts", a.shifts);
    if (!a.data_dir.empty()) override_with("data_dir", a.data_dir);
    cfg.validate();
    return cfg;
}

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
    return buf;
}

void ensure_dir(const std::string& dir) {
    if (!dir.empty()) fs::create_directories(dir);
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

/// Model built from the config's first shift with the checkpoint applied.
Model<float> model_from_checkpoint(const ExperimentConfig& cfg, const std::string& path) {
    auto m = build<float>(cfg.run_spec(cfg.effective_shifts().front()), 0);
    apply_checkpoint(m, load_checkpoint(path));
    return m;
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
    std::vector<std::size_t> out(logits.dim(0));
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t j = 1; j < k; ++j)
            if (logits[i * k + j] > logits[i * k + out[i]]) out[i] = j;
    return out;
}

// ---- subcommands -----------------------------------------------------------

int cmd_train(const CommonArgs& a, const std::string& out, bool quiet) {
    const auto cfg = resolve(a);
    const auto data = prepare_data(cfg);
    ensure_dir(out);
    const double shift = cfg.effective_shifts().front();
    const auto seed = cfg.seeds.front();
    TrainOptions o;
    o.check_mirror = cfg.model.sign.trainable && cfg.model.activation == Activation::Sign;
    o.on_epoch = [&](const EpochMetrics& e) {
        if (quiet) return;
        std::printf("epoch %3zu  lr %.5f  train loss %.4f acc %s  test loss %.4f acc %s\n", e.epoch + 1, e.lr,
                    e.train_loss, pct(e.train_acc).c_str(), e.test_loss, pct(e.test_acc).c_str());
        std::fflush(stdout);
    };
    auto r = train_run(cfg, shift, seed, data, o);
    const auto ckpt = join(out, "model.ckpt");
    save_checkpoint(ckpt, r.model);
    append_jsonl(join(out, "runs.jsonl"), r.record);
    std::printf("status %s  final test acc %s  checkpoint %s\n", r.record.ok() ? "ok" : "diverged",
                pct(r.record.final_test_acc()).c_str(), ckpt.c_str());
    return r.record.ok() ? 0 : kExitError;
}

int cmd_sweep(const CommonArgs& a, const std::string& out, std::size_t workers, const std::string& slopes,
              bool resume) {
    const auto cfg = resolve(a);
    const auto data = prepare_data(cfg);
    ensure_dir(out);
    const auto jsonl = join(out, "runs.jsonl");
    SweepOptions o;
    o.workers = workers;
    if (resume) {
        o.reuse = read_jsonl(jsonl);
        std::printf("resuming: %zu earlier records in %s\n", o.reuse.size(), jsonl.c_str());
    } else {
        fs::remove(jsonl);
    }
    o.on_run = [&](const RunRecord& r) {
        append_jsonl(jsonl, r);
        std::printf("shift %+g seed %llu  test acc %s  first-epoch train acc %s  %s  (%.1fs)\n", r.shift,
                    static_cast<unsigned long long>(r.seed), pct(r.final_test_acc()).c_str(),
                    pct(r.first_epoch_train_acc()).c_str(), r.ok() ? "ok" : "diverged", r.wall_seconds);
        std::fflush(stdout);
    };
    if (!slopes.empty()) {
        ExperimentConfig grid_cfg = cfg;
        apply_setting(grid_cfg, "shifts", slopes);  // reuse the list/range parser
        auto res = slope_grid(cfg, grid_cfg.shifts, data, o);
        write_text(join(out, "slope_grid.csv"), res.csv());
        for (std::size_t i = 0; i < res.slopes.size(); ++i) {
            const auto& first = res.sweeps[i].runs;
            for (std::size_t l = 0; !first.empty() && l < first.front().preact.size(); ++l)
                write_text(join(out, "preact_slope" + config_detail::fmt(res.slopes[i]) + "_shift" +
                                         config_detail::fmt(first.front().shift) + "_layer" + std::to_string(l) +
                                         ".csv"),
                           first.front().preact[l].csv());
        }
        std::cout << res.csv();
        return 0;
    }
    auto res = shift_sweep(cfg, data, o);
    write_text(join(out, "sweep.csv"), res.csv());
    write_text(join(out, "summary.csv"), res.summary_csv());
    std::cout << res.summary_csv();
    return 0;
}

int cmd_search(const CommonArgs& a, const std::string& out, std::size_t workers) {
    const auto cfg = resolve(a);
    const auto data = prepare_data(cfg);
    SweepOptions o;
    o.workers = workers;
    const auto res = first_epoch_search(cfg, data, o);
    std::string csv = "shift,mean_first_epoch_train_acc\n";
    for (std::size_t i = 0; i < res.shifts.size(); ++i) {
        std::printf("shift %+g  first-epoch train acc %s\n", res.shifts[i], pct(res.first_epoch_acc[i]).c_str());
        csv += config_detail::fmt(res.shifts[i]) + "," + config_detail::fmt(res.first_epoch_acc[i]) + "\n";
    }
    std::printf("chosen shift %g\n", res.chosen);
    if (!out.empty()) {
        ensure_dir(out);
        write_text(join(out, "search.csv"), csv);
    }
    return 0;
}

int cmd_analyze(const CommonArgs& a, const std::string& ckpt, const std::string& out, std::size_t batch) {
    const auto cfg = resolve(a);
    auto model = model_from_checkpoint(cfg, ckpt);
    const auto data = prepare_data(cfg);
    const auto x = EpochBatches(data.test, std::min(batch, data.test.size()), 0, 0, false, false).get(0).x;
    const auto bal = balance_stats(model, x);
    ensure_dir(out);
    write_text(join(out, "balance.csv"), balance_csv(bal));
    std::string th = "layer,channel,beta,threshold,effective\n";
    Histogram eff;
    const auto sites = sign_sites(model);
    const auto pairs = channel_thresholds(model);
    for (std::size_t l = 0, p = 0; l < sites.size(); ++l) {
        if (!sites[l].bn) continue;
        for (std::size_t c = 0; c < pairs[p].size(); ++c) {
            const auto& ct = pairs[p][c];
            th += sites[l].sign->name() + "," + std::to_string(c) + "," + config_detail::fmt(ct.beta) + "," +
                  config_detail::fmt(ct.threshold) + "," + config_detail::fmt(ct.effective()) + "\n";
            eff.add(ct.effective());
        }
        ++p;
    }
    write_text(join(out, "thresholds.csv"), th);
    write_text(join(out, "effective_threshold_hist.csv"), eff.csv());
    for (std::size_t l = 0; l < sites.size(); ++l) {
        Histogram h;
        for (float v : sites[l].sign->last_input().data()) h.add(v);
        write_text(join(out, "preact_layer" + std::to_string(l) + ".csv"), h.csv());
    }
    std::cout << balance_csv(bal);
    return 0;
}

int cmd_export(const CommonArgs& a, const std::string& ckpt, const std::string& out) {
    const auto cfg = resolve(a);
    auto model = model_from_checkpoint(cfg, ckpt);
    const auto packed = export_packed(model);
    save_packed(out, packed);
    std::printf("packed %zu binary layers into %s (%zu bytes)\n", packed.packed_layer_count(), out.c_str(),
                static_cast<std::size_t>(fs::file_size(out)));
    return 0;
}

int cmd_infer(const CommonArgs& a, const std::string& packed_path, const std::string& split, bool verify,
              const std::string& ckpt) {
    const auto cfg = resolve(a);
    if (verify && ckpt.empty()) throw ConfigError("--verify needs --checkpoint for the reference model");
    const auto pm = load_packed(packed_path);
    const auto data = prepare_data(cfg);
    const Dataset& ds = split == "train" ? data.train : data.test;
    std::optional<Model<float>> ref, unfolded;
    if (verify) {
        unfolded.emplace(model_from_checkpoint(cfg, ckpt));
        ref.emplace(folded_copy(*unfolded));
    }
    EpochBatches eb(ds, 1000, 0, 0, false, false);
    std::size_t correct = 0, ref_correct = 0, unfolded_correct = 0, mismatched = 0;
    for (std::size_t b = 0; b < eb.count(); ++b) {
        const auto batch = eb.get(b);
        const auto logits = pm.forward(batch.x);
        const auto pred = argmax_rows(logits);
        for (std::size_t i = 0; i < pred.size(); ++i) correct += static_cast<int>(pred[i]) == batch.y[i];
        if (!verify) continue;
        const auto ref_logits = ref->forward(batch.x, Mode::Eval);
        if (!(ref_logits == logits)) ++mismatched;
        const auto rp = argmax_rows(ref_logits);
        const auto up = argmax_rows(unfolded->forward(batch.x, Mode::Eval));
        for (std::size_t i = 0; i < rp.size(); ++i) {
            ref_correct += static_cast<int>(rp[i]) == batch.y[i];
            unfolded_correct += static_cast<int>(up[i]) == batch.y[i];
        }
    }
    const double n = static_cast<double>(ds.size());
    std::printf("%s accuracy %s (%zu / %zu)\n", split.c_str(), pct(static_cast<double>(correct) / n).c_str(), correct,
                ds.size());
    if (!verify) return 0;
    std::printf("reference accuracy %s (folded), %s (unfolded)\n", pct(static_cast<double>(ref_correct) / n).c_str(),
                pct(static_cast<double>(unfolded_correct) / n).c_str());
    if (mismatched == 0 && ref_correct == correct) {
        std::printf("verified: exact match\n");
        return 0;
    }
    std::printf("verification FAILED: %zu batches differ from the reference\n", mismatched);
    return kExitMismatch;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Binary neural network training, shift experiments and packed inference"};
    app.require_subcommand(1);

    CommonArgs train_a, sweep_a, search_a, analyze_a, export_a, infer_a;
    std::string train_out = "out", sweep_out = "out", search_out, analyze_out = "out", export_out = "model.bnnp";
    std::string analyze_ckpt, export_ckpt, infer_ckpt, infer_packed, split = "test", slopes;
    std::size_t workers = default_workers(), analyze_batch = 1000;
    bool quiet = false, verify = false, resume = false;

    auto* train = app.add_subcommand("train", "train one run (first shift, first seed); writes a checkpoint and record");
    add_common(train, train_a);
    train->add_option("-o,--out", train_out, "output directory")->capture_default_str();
    train->add_flag("-q,--quiet", quiet, "no per-epoch output");

    auto* sweep = app.add_subcommand("sweep", "train every (shift, seed) pair; writes sweep CSVs and JSON-lines");
    add_common(sweep, sweep_a);
    sweep->add_option("-o,--out", sweep_out, "output directory")->capture_default_str();
    sweep->add_option("-j,--workers", workers, "parallel training runs")->capture_default_str();
    sweep->add_flag("--resume", resume, "keep runs.jsonl and skip runs it already holds");
    sweep->add_option("--slopes", slopes, "LeakyReLU slope grid (resnet20ds); runs one sweep per slope");

    auto* search = app.add_subcommand("search", "first-epoch shift search over the grid");
    add_common(search, search_a);
    search->add_option("-o,--out", search_out, "directory for search.csv");
    search->add_option("-j,--workers", workers, "parallel training runs")->capture_default_str();

    auto* analyze = app.add_subcommand("analyze", "activation balance and threshold statistics of a checkpoint");
    add_common(analyze, analyze_a);
    analyze->add_option("-k,--checkpoint", analyze_ckpt, "trained checkpoint")->required();
    analyze->add_option("-o,--out", analyze_out, "output directory")->capture_default_str();
    analyze->add_option("--batch", analyze_batch, "test images to analyze")->capture_default_str();

    auto* exp = app.add_subcommand("export", "fold thresholds, binarize and bit-pack a checkpoint");
    add_common(exp, export_a);
    exp->add_option("-k,--checkpoint", export_ckpt, "trained checkpoint")->required();
    exp->add_option("-o,--out", export_out, "packed model file")->capture_default_str();

    auto* infer = app.add_subcommand("infer", "packed inference accuracy on a dataset split");
    add_common(infer, infer_a);
    infer->add_option("-p,--packed", infer_packed, "packed model file")->required();
    infer->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}))->capture_default_str();
    infer->add_flag("--verify", verify, "compare with the eval-mode reference built from --checkpoint");
    infer->add_option("-k,--checkpoint", infer_ckpt, "checkpoint the packed model came from");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*train) return cmd_train(train_a, train_out, quiet);
        if (*sweep) return cmd_sweep(sweep_a, sweep_out, workers, slopes, resume);
        if (*search) return cmd_search(search_a, search_out, workers);
        if (*analyze) return cmd_analyze(analyze_a, analyze_ckpt, analyze_out, analyze_batch);
        if (*exp) return cmd_export(export_a, export_ckpt, export_out);
        if (*infer) return cmd_infer(infer_a, infer_packed, split, verify, infer_ckpt);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitError;
    }
    return 0;
}
