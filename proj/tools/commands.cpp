#include "commands.hpp"

#include "flowcast/checkpoint.hpp"
#include "flowcast/dataflow.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/models.hpp"
#include "flowcast/training.hpp"
#include "flowcast/util.hpp"

#include <json.hpp>

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>

namespace flowcast::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using util::format_double;

/// Rethrows pipeline failures with the failing stage's name prefixed,
/// preserving the error category (and therefore the exit code).
template <class Fn>
auto stage(const std::string& name, Fn&& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        throw ConfigError(name + ": " + e.what());
    } catch (const DataError& e) {
        throw DataError(name + ": " + e.what());
    } catch (const ShapeError& e) {
        throw ShapeError(name + ": " + e.what());
    } catch (const TrainingError& e) {
        throw TrainingError(name + ": " + e.what());
    }
}

std::uint64_t env_seed_or(std::uint64_t fallback) {
    const char* env = std::getenv("FLOWCAST_SEED");
    if (!env || !*env) return fallback;
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(env, env + std::string_view(env).size(), v);
    if (ec != std::errc() || *ptr != '\0')
        throw ConfigError(std::string("FLOWCAST_SEED is not an unsigned integer: ") + env);
    return v;
}

SplitRatios parse_ratios(const std::string& text) {
    auto parts = util::split(text, ',');
    if (parts.size() != 3) throw ConfigError("split ratios must be three comma-separated numbers, got '" + text + "'");
    auto num = [&](const std::string& s) {
        double v = 0.0;
        std::string t = util::trim(s);
        auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
        if (ec != std::errc() || ptr != t.data() + t.size())
            throw ConfigError("bad ratio value '" + s + "'");
        return v;
    };
    return {num(parts[0]), num(parts[1]), num(parts[2])};
}

std::vector<std::size_t> parse_size_list(const std::string& text, const std::string& what) {
    std::vector<std::size_t> out;
    for (const std::string& part : util::split(text, ',')) {
        std::string t = util::trim(part);
        std::size_t v = 0;
        auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
        if (ec != std::errc() || ptr != t.data() + t.size())
            throw ConfigError(what + " entry '" + part + "' is not an unsigned integer");
        out.push_back(v);
    }
    return out;
}

/// Knobs shared by the training-style commands after merging defaults,
/// config-file values, and explicit flags (flags win).
struct Resolved {
    ModelConfig model;
    TrainConfig train;
    SplitRatios ratios;
    // sweep grid overrides (empty = library defaults)
    std::vector<std::size_t> batch_grid, d_grid, heads_grid, window_grid;
    json snapshot; // resolved configuration for the manifest
};

Resolved resolve(const Options& o) {
    static const std::set<std::string> kKnownKeys = {
        "model", "seed",  "epochs",     "batch",  "window",     "heads",      "dmodel",
        "lr",    "layers", "patience",  "split",  "batch_grid", "d_grid",     "heads_grid",
        "window_grid"};
    util::KeyValueFile kv;
    if (!o.config.empty()) {
        kv = util::KeyValueFile::parse_file(o.config);
        for (const auto& [key, value] : kv.entries())
            if (!kKnownKeys.count(key)) throw ConfigError("unknown config key '" + key + "' in " + o.config);
    }

    auto pick_size = [&](long long flag, const char* key, std::size_t def) -> std::size_t {
        if (flag >= 0) return static_cast<std::size_t>(flag);
        long long v = kv.get_int(key, static_cast<long long>(def));
        if (v < 0) throw ConfigError(std::string("config key ") + key + " must be non-negative");
        return static_cast<std::size_t>(v);
    };

    Resolved r;
    std::string arch_text = !o.model.empty() ? o.model : kv.get_or("model", "res-transformer");
    auto arch = parse_arch(arch_text);
    if (!arch)
        throw ConfigError("unknown model architecture '" + arch_text +
                          "' (expected res-transformer, a-e, or a baseline name)");
    r.model.arch = *arch;
    r.model.window = pick_size(o.window, "window", 12);
    r.model.d_model = pick_size(o.dmodel, "dmodel", 12);
    r.model.heads = pick_size(o.heads, "heads", 4);
    r.model.layers = pick_size(o.layers, "layers", 4);

    std::uint64_t seed_default = env_seed_or(42);
    std::uint64_t seed = o.seed_set
                             ? o.seed
                             : static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(seed_default)));
    r.model.seed = seed;
    r.train.seed = seed;
    r.train.epochs = pick_size(o.epochs, "epochs", 50);
    r.train.batch = pick_size(o.batch, "batch", 4);
    r.train.patience = pick_size(o.patience, "patience", 20);
    r.train.lr = o.lr_set ? o.lr : kv.get_double("lr", 1e-3);
    r.ratios = parse_ratios(!o.ratios.empty() ? o.ratios : kv.get_or("split", "0.7,0.1,0.2"));

    auto grid = [&](const char* key) -> std::vector<std::size_t> {
        if (auto text = kv.get(key)) return parse_size_list(*text, key);
        return {};
    };
    r.batch_grid = grid("batch_grid");
    r.d_grid = grid("d_grid");
    r.heads_grid = grid("heads_grid");
    r.window_grid = grid("window_grid");

    r.snapshot["model"] = arch_name(r.model.arch);
    r.snapshot["window"] = r.model.window;
    r.snapshot["dmodel"] = r.model.d_model;
    r.snapshot["heads"] = r.model.heads;
    r.snapshot["layers"] = r.model.layers;
    r.snapshot["seed"] = seed;
    r.snapshot["epochs"] = r.train.epochs;
    r.snapshot["batch"] = r.train.batch;
    r.snapshot["patience"] = r.train.patience;
    r.snapshot["lr"] = r.train.lr;
    r.snapshot["split"] = {r.ratios.train, r.ratios.validation, r.ratios.test};
    return r;
}

/// Collects inputs/outputs with digests and writes the manifest last, so a
/// complete manifest implies the artifacts it names are in place.
class Manifest {
  public:
    Manifest(std::string command, json config)
        : start_(std::chrono::steady_clock::now()), command_(std::move(command)) {
        j_["command"] = command_;
        j_["config"] = std::move(config);
        j_["inputs"] = json::array();
        j_["outputs"] = json::array();
    }

    void add_input(const std::string& path) { inputs_.push_back(path); }
    void add_output(const std::string& path) { outputs_.push_back(path); }

    // Digests are taken here, not at add time, so the pipeline stages report
    // their own failures (e.g. a missing input fails in "load") and every
    // digest reflects the file as it exists once the command has succeeded.
    std::string write(const fs::path& dir) {
        for (const std::string& p : inputs_) add(j_["inputs"], p);
        for (const std::string& p : outputs_) add(j_["outputs"], p);
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        j_["timings"]["total_seconds"] = secs;
        fs::path path = dir / ("manifest-" + command_ + ".json");
        util::write_file_atomic(path.string(), j_.dump(2) + "\n");
        return path.string();
    }

  private:
    static void add(json& arr, const std::string& path) {
        arr.push_back({{"path", path}, {"fnv1a", util::hex64(util::fnv1a_file(path))}});
    }

    std::chrono::steady_clock::time_point start_;
    std::string command_;
    std::vector<std::string> inputs_;
    std::vector<std::string> outputs_;
    json j_;
};

fs::path ensure_out_dir(const Options& o, const char* def) {
    fs::path dir = o.out.empty() ? fs::path(def) : fs::path(o.out);
    fs::create_directories(dir);
    return dir;
}

std::string require(const std::string& value, const char* flag) {
    if (value.empty()) throw ConfigError(std::string("missing required option ") + flag);
    return value;
}

FlowSeries load_clean_series(const std::string& path) {
    std::size_t dropped = 0;
    FlowSeries series = stage("load", [&] { return load_csv(path, &dropped); });
    if (dropped > 0)
        std::cout << "dropped " << dropped << " rows outside the 05:00-22:30 slot grid\n";
    series = stage("filter", [&] { return filter_weekdays(series); });
    return stage("impute", [&] { return impute_missing(series); });
}

const std::vector<Sample>& pick_part(const DatasetSplit& split, const std::string& name) {
    if (name == "train") return split.train;
    if (name == "validation") return split.validation;
    if (name == "test" || name.empty()) return split.test;
    throw ConfigError("unknown dataset part '" + name + "' (expected train, validation, or test)");
}

void print_metrics(const MetricsReport& report) {
    for (const MetricsRow& r : report.rows)
        std::cout << "  " << r.mode << ": rmse " << format_double(r.rmse) << ", mae "
                  << format_double(r.mae) << ", wmape " << format_double(r.wmape) << "\n";
}

// ---------------------------------------------------------------------------

void run_synth(const Options& o) {
    SynthConfig cfg = o.config.empty() ? SynthConfig() : SynthConfig::from_file(o.config);
    if (o.days >= 0) {
        if (o.days == 0) throw ConfigError("--days must be positive");
        cfg.weekdays = static_cast<std::size_t>(o.days);
    }
    std::uint64_t seed = o.seed_set ? o.seed : env_seed_or(42);
    FlowSeries series = synthesize(cfg, seed);

    fs::path out = o.out.empty() ? fs::path("synth.csv") : fs::path(o.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());

    json snapshot;
    snapshot["seed"] = seed;
    snapshot["weekdays"] = cfg.weekdays;
    snapshot["noise"] = cfg.noise;
    snapshot["region"] = cfg.region_label;
    Manifest manifest("synth", snapshot);
    if (!o.config.empty()) manifest.add_input(o.config);

    write_csv(series, out.string());
    manifest.add_output(out.string());

    double days = static_cast<double>(cfg.weekdays);
    std::cout << "wrote " << series.size() << " slots over " << cfg.weekdays << " weekdays to "
              << out.string() << "\n";
    for (int m = 0; m < kModes; ++m) {
        double total = 0.0;
        for (const auto& v : series.values) total += v[static_cast<std::size_t>(m)];
        std::cout << "  " << kModeNames[m] << ": mean daily inflow "
                  << format_double(total / days) << " passengers\n";
    }
    manifest.write(out.has_parent_path() ? out.parent_path() : fs::path("."));
}

void run_train(const Options& o) {
    Resolved r = resolve(o);
    std::string data = require(o.data, "--data");
    fs::path dir = ensure_out_dir(o, "train-out");
    Manifest manifest("train", r.snapshot);
    manifest.add_input(data);
    if (!o.config.empty()) manifest.add_input(o.config);

    FlowSeries series = load_clean_series(data);
    DatasetSplit split = stage("dataset", [&] { return make_dataset(series, r.model.window, r.ratios); });
    Model model(r.model);
    TrainHistory history = stage("train", [&] { return train(model, split, r.train); });

    fs::path ckpt = dir / "checkpoint.fck";
    fs::path hist = dir / "history.csv";
    stage("save", [&] {
        save_checkpoint(model, split.norm, r.ratios, ckpt.string());
        util::write_file_atomic(hist.string(), history.to_csv());
        return 0;
    });
    manifest.add_output(ckpt.string());
    manifest.add_output(hist.string());

    std::cout << "trained " << arch_name(r.model.arch) << " for " << history.epochs.size()
              << " epochs (best epoch " << history.best_epoch << ", validation loss "
              << format_double(history.best_val_loss) << ")\n";
    if (history.early_stopped) std::cout << "stopped early after no validation improvement\n";
    std::cout << "checkpoint: " << ckpt.string() << "\n";
    manifest.write(dir);
}

void run_evaluate(const Options& o) {
    std::string ckpt_path = require(o.model, "--model");
    std::string data = require(o.data, "--data");
    CheckpointData ck = stage("checkpoint", [&] { return load_checkpoint(ckpt_path); });
    fs::path dir = ensure_out_dir(o, "eval-out");

    json snapshot;
    snapshot["checkpoint"] = ckpt_path;
    snapshot["model"] = arch_name(ck.model.config().arch);
    snapshot["split"] = o.split.empty() ? "test" : o.split;
    Manifest manifest("evaluate", snapshot);
    manifest.add_input(ckpt_path);
    manifest.add_input(data);

    FlowSeries series = load_clean_series(data);
    series = stage("normalize", [&] { return normalize(series, ck.norm); });
    auto samples = stage("window", [&] { return sliding_window(series, ck.model.config().window); });
    DatasetSplit split = stage("split", [&] { return chronological_split(std::move(samples), ck.ratios); });
    const std::vector<Sample>& part = pick_part(split, o.split);
    if (part.empty()) throw ConfigError("selected dataset part is empty");

    std::size_t batch = o.batch > 0 ? static_cast<std::size_t>(o.batch) : 32;
    MetricsReport report = stage("evaluate", [&] { return evaluate(ck.model, part, ck.norm, batch); });

    fs::path jpath = dir / "metrics.json";
    fs::path cpath = dir / "metrics.csv";
    util::write_file_atomic(jpath.string(), report.to_json());
    util::write_file_atomic(cpath.string(), report.to_csv());
    manifest.add_output(jpath.string());
    manifest.add_output(cpath.string());

    std::cout << "metrics on " << part.size() << " " << (o.split.empty() ? "test" : o.split)
              << " samples (denormalized passengers/slot; wmape is a fraction):\n";
    print_metrics(report);
    manifest.write(dir);
}

void run_group(const Options& o, const std::vector<Arch>& archs, const char* csv_name,
               const char* command) {
    Resolved r = resolve(o);
    std::string data = require(o.data, "--data");
    fs::path dir = ensure_out_dir(o, command);
    Manifest manifest(command, r.snapshot);
    manifest.add_input(data);
    if (!o.config.empty()) manifest.add_input(o.config);

    FlowSeries series = load_clean_series(data);
    DatasetSplit split = stage("dataset", [&] { return make_dataset(series, r.model.window, r.ratios); });

    std::string csv = "model,mode,rmse,mae,wmape,status\n";
    for (Arch arch : archs) {
        ModelConfig mc = r.model;
        mc.arch = arch; // same seed/width knobs across every model: controlled comparison
        std::cout << "training " << arch_name(arch) << "...\n";
        try {
            Model model(mc);
            train(model, split, r.train);
            MetricsReport report = evaluate(model, split.test, split.norm);
            for (const MetricsRow& row : report.rows) {
                csv += std::string(arch_name(arch)) + "," + row.mode + "," + format_double(row.rmse) +
                       "," + format_double(row.mae) + "," + format_double(row.wmape) + ",ok\n";
            }
            std::cout << "  ALL rmse " << format_double(report.row("ALL").rmse) << "\n";
        } catch (const Error& e) {
            csv += std::string(arch_name(arch)) + ",-,nan,nan,nan,failed: " + e.what() + "\n";
            std::cout << "  failed: " << e.what() << "\n";
        }
    }

    fs::path out = dir / csv_name;
    util::write_file_atomic(out.string(), csv);
    manifest.add_output(out.string());
    std::cout << "wrote " << out.string() << "\n";
    manifest.write(dir);
}

void run_attention(const Options& o) {
    std::string ckpt_path = require(o.model, "--model");
    std::string data = require(o.data, "--data");
    CheckpointData ck = stage("checkpoint", [&] { return load_checkpoint(ckpt_path); });
    Arch arch = ck.model.config().arch;
    if (!is_res_variant(arch) && arch != Arch::Transformer)
        throw ConfigError(std::string("architecture ") + arch_name(arch) + " has no attention scores to export");
    fs::path dir = ensure_out_dir(o, "attention-out");

    std::size_t index = o.sample_index >= 0 ? static_cast<std::size_t>(o.sample_index) : 0;
    json snapshot;
    snapshot["checkpoint"] = ckpt_path;
    snapshot["sample_index"] = index;
    snapshot["split"] = o.split.empty() ? "test" : o.split;
    Manifest manifest("attention", snapshot);
    manifest.add_input(ckpt_path);
    manifest.add_input(data);

    FlowSeries series = load_clean_series(data);
    series = stage("normalize", [&] { return normalize(series, ck.norm); });
    auto samples = stage("window", [&] { return sliding_window(series, ck.model.config().window); });
    DatasetSplit split = stage("split", [&] { return chronological_split(std::move(samples), ck.ratios); });
    const std::vector<Sample>& part = pick_part(split, o.split);
    if (index >= part.size())
        throw ConfigError("--sample-index " + std::to_string(index) + " out of range (part has " +
                          std::to_string(part.size()) + " samples)");

    grad_mode::NoGradGuard guard;
    const Sample& sample = part[index];
    Tensor x = Tensor::from_vector({static_cast<std::size_t>(kModes), ck.model.config().window}, sample.x);
    ck.model.forward_sample(x);
    const std::vector<ScoreMatrix>& scores = ck.model.last_scores();

    fs::path cpath = dir / "scores.csv";
    fs::path jpath = dir / "scores.json";
    util::write_file_atomic(cpath.string(), scores_to_csv(scores));
    util::write_file_atomic(jpath.string(), scores_to_json(scores));
    manifest.add_output(cpath.string());
    manifest.add_output(jpath.string());

    std::cout << "exported " << scores.size() << " score matrices for sample " << index << " ("
              << format_slot(sample.target_slot) << ") to " << dir.string() << "\n";
    manifest.write(dir);
}

void run_sweep(const Options& o) {
    Resolved r = resolve(o);
    std::string data = require(o.data, "--data");
    fs::path dir = ensure_out_dir(o, "sweep-out");
    Manifest manifest("sweep", r.snapshot);
    manifest.add_input(data);
    if (!o.config.empty()) manifest.add_input(o.config);

    FlowSeries series = load_clean_series(data);
    SweepSpec spec;
    spec.base = r.model;
    spec.train = r.train;
    spec.ratios = r.ratios;
    if (!r.batch_grid.empty()) spec.batch_grid = r.batch_grid;
    if (!r.d_grid.empty()) spec.d_grid = r.d_grid;
    if (!r.heads_grid.empty()) spec.heads_grid = r.heads_grid;
    if (!r.window_grid.empty()) spec.window_grid = r.window_grid;

    SweepResult result = stage("sweep", [&] { return sweep(series, spec); });

    fs::path log = dir / "sweep_log.csv";
    fs::path best = dir / "best_config.cfg";
    util::write_file_atomic(log.string(), result.log_csv());
    std::string cfg;
    cfg += "model=" + std::string(arch_name(result.best_config.arch)) + "\n";
    cfg += "dmodel=" + std::to_string(result.best_config.d_model) + "\n";
    cfg += "heads=" + std::to_string(result.best_config.heads) + "\n";
    cfg += "window=" + std::to_string(result.best_config.window) + "\n";
    cfg += "batch=" + std::to_string(result.best_batch) + "\n";
    util::write_file_atomic(best.string(), cfg);
    manifest.add_output(log.string());
    manifest.add_output(best.string());

    std::cout << result.trials.size() << " trials; best d=" << result.best_config.d_model
              << " heads=" << result.best_config.heads << " L=" << result.best_config.window
              << " batch=" << result.best_batch << " (validation rmse "
              << format_double(result.best_rmse) << ", mae " << format_double(result.best_mae)
              << ")\n";
    std::cout << "best config written to " << best.string() << " (usable via train --config)\n";
    manifest.write(dir);
}

} // namespace

void run(const Options& o) {
    if (o.command == "synth") {
        run_synth(o);
    } else if (o.command == "train") {
        run_train(o);
    } else if (o.command == "evaluate") {
        run_evaluate(o);
    } else if (o.command == "ablate") {
        run_group(o,
                  {Arch::Full, Arch::VariantA, Arch::VariantB, Arch::VariantC, Arch::VariantD,
                   Arch::VariantE},
                  "ablation.csv", "ablate");
    } else if (o.command == "compare") {
        run_group(o,
                  {Arch::Full, Arch::BPNN, Arch::CNN1D, Arch::CNN2D, Arch::LSTM, Arch::ConvLSTM,
                   Arch::STResNet, Arch::Transformer},
                  "comparison.csv", "compare");
    } else if (o.command == "attention") {
        run_attention(o);
    } else if (o.command == "sweep") {
        run_sweep(o);
    } else {
        throw ConfigError("unknown command '" + o.command + "'");
    }
}

} // namespace flowcast::cli
