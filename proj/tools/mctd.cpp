// mctd: generate data, train, evaluate, sweep and cross-validate
// temporal-dropout uncertainty models.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mctd/config.hpp"
#include "mctd/data.hpp"
#include "mctd/metrics.hpp"
#include "mctd/trainer.hpp"
#include "mctd/uq.hpp"

namespace fs = std::filesystem;
using namespace mctd;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_config = 2;
constexpr int exit_data = 3;
constexpr int exit_numeric = 4;

fs::path output_root(const std::optional<std::string>& configured) {
    if (configured) return *configured;
    if (const char* env = std::getenv("MCTD_OUTPUT_ROOT"); env && *env) return env;
    return "runs";
}

std::string utc_stamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
    return buf;
}

fs::path make_run_dir(const fs::path& root, const std::string& name) {
    fs::path dir = root / name;
    for (int i = 1; fs::exists(dir); ++i) dir = root / (name + "-" + std::to_string(i));
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
    os << text;
    if (!os) throw DataError("failed writing '" + path.string() + "'");
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

template <class F>
void write_stream(const fs::path& path, F body) {
    std::ostringstream os;
    body(os);
    write_text(path, os.str());
}

std::vector<double> parse_list(const std::string& text, const char* what) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto v = detail::parse_double(item);
        if (!v) throw ConfigError(std::string(what) + ": '" + item + "' is not a number");
        out.push_back(*v);
    }
    if (out.empty()) throw ConfigError(std::string(what) + ": empty list");
    return out;
}

void write_eval_outputs(const fs::path& dir, const EvalResult& ev, std::span<const double> targets) {
    nlohmann::json metrics = to_json(ev.metrics);
    metrics["uncertainty"] = report_summary(ev.report);
    write_json(dir / "metrics.json", metrics);
    write_stream(dir / "reliability.csv", [&](std::ostream& os) { write_curve_csv(ev.metrics.curve, os); });
    write_stream(dir / "predictions.csv", [&](std::ostream& os) { write_report_csv(ev.report, targets, os); });
}

void print_metrics(const MetricBundle& m) {
    std::cout << "r2=" << m.r2 << " rmse=" << m.rmse << " mae=" << m.mae << " ece=" << m.ece
              << " mean_pu=" << m.mean_pu << " norm_pu=" << m.norm_pu << '\n';
}

// Flags shared by the config-driven commands; each overrides the file value.
struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    std::optional<std::string> method;
    std::optional<double> ratio;
    std::optional<std::size_t> samples;
    std::optional<std::string> out;

    void add_to(CLI::App* cmd, bool with_method) {
        cmd->add_option("--config", config, "Experiment config file (JSON)")->required();
        cmd->add_option("--seed", seed, "Run seed (overrides config seed)");
        cmd->add_option("--epochs", epochs, "Maximum training epochs (overrides train.epochs)");
        if (with_method) {
            cmd->add_option("--method", method, "Training method: none, td, ctd, hidden_dropout");
            cmd->add_option("--ratio", ratio, "Temporal dropout ratio for td (overrides train.method.ratio)");
        }
        cmd->add_option("--samples", samples, "Monte Carlo samples L (overrides mc.samples)");
        cmd->add_option("--out", out, "Output root directory (overrides output_dir and MCTD_OUTPUT_ROOT)");
    }

    ExperimentConfig load() const {
        ExperimentConfig cfg = load_config(config);
        if (seed) cfg.seed = *seed;
        if (epochs) cfg.train.epochs = *epochs;
        if (method) cfg.train.method.kind = parse_method(*method);
        if (ratio) cfg.train.method.ratio = *ratio;
        if (samples) cfg.mc.samples = *samples;
        if (out) cfg.output_dir = *out;
        cfg.model.seed = cfg.train.seed = cfg.mc.seed = cfg.seed;
        cfg.validate();
        return cfg;
    }
};

fs::path run_dir_for(const char* command, const ExperimentConfig& cfg) {
    const fs::path dir =
        make_run_dir(output_root(cfg.output_dir), std::string(command) + "-" + config_hash(cfg) + "-" + utc_stamp());
    write_text(dir / "config.json", dump_config(cfg));
    return dir;
}

// ---------------------------------------------------------------------------

struct GenArgs {
    std::string kind = "mean_signal";
    std::size_t n = 1000;
    std::size_t steps = 24;
    std::size_t features = 3;
    std::uint64_t seed = 0;
    double noise = 0.1;
    bool heteroscedastic = false;
    double level_std = 1.0;
    std::optional<std::string> out;
};

int cmd_gen(const GenArgs& a) {
    SyntheticSpec spec;
    spec.kind = parse_generator_kind(a.kind);
    spec.n = a.n;
    spec.steps = a.steps;
    spec.features = a.features;
    spec.seed = a.seed;
    spec.noise_std = a.noise;
    spec.heteroscedastic = a.heteroscedastic;
    spec.level_std = a.level_std;
    const SeriesBatch batch = generate(spec);

    fs::path csv = a.out ? fs::path(*a.out)
                         : output_root(std::nullopt) /
                               ("gen-" + a.kind + "-n" + std::to_string(a.n) + "-s" + std::to_string(a.seed)) / "data.csv";
    if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
    const fs::path stem = csv.parent_path() / csv.stem();
    write_stream(csv, [&](std::ostream& os) { write_csv(batch, os); });
    write_stream(fs::path(stem.string() + ".truth.csv"), [&](std::ostream& os) {
        os << "series_id,true_mean,true_var\n";
        for (std::size_t i = 0; i < batch.size; ++i) {
            os << batch.ids[i] << ',' << detail::format_double(batch.true_mean[i]) << ','
               << detail::format_double(batch.true_var[i]) << '\n';
        }
    });
    write_json(fs::path(stem.string() + ".spec.json"), nlohmann::json(spec));
    std::cout << csv.string() << '\n';
    return exit_ok;
}

int cmd_train(const Overrides& o) {
    const ExperimentConfig cfg = o.load();
    const Experiment exp = cfg.experiment();
    const SeriesBatch data = load_data(cfg.data);
    const Holdout split = holdout(data.size, cfg.data.test_fraction, cfg.seed, Stream::folds);
    const SeriesBatch train_raw = data.subset(split.train);
    SeriesBatch test_raw = data.subset(split.test);
    if (cfg.data.missing) test_raw = inject_missing(test_raw, parse_missing_pattern(*cfg.data.missing), cfg.seed);

    const fs::path dir = run_dir_for("train", cfg);
    auto result = run_experiment(exp, train_raw, test_raw);
    write_checkpoint(result.model, (dir / "checkpoint.json").string());
    write_json(dir / "run.json", to_json(result.record));
    write_stream(dir / "test.csv", [&](std::ostream& os) { write_csv(test_raw, os); });
    write_eval_outputs(dir, result.eval, test_raw.targets);
    std::cout << dir.string() << '\n';
    print_metrics(result.eval.metrics);
    return exit_ok;
}

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::size_t samples = 20;
    std::optional<std::string> source;
    std::optional<double> ratio;
    std::uint64_t seed = 0;
    std::optional<std::string> missing;
    std::string interval = "gaussian";
    std::optional<std::string> levels;
    std::optional<std::string> out;
};

int cmd_eval(const EvalArgs& a) {
    McConfig mc;
    mc.samples = a.samples;
    mc.seed = a.seed;
    if (a.source) mc.source = parse_source(*a.source);
    mc.ratio = a.ratio;
    mc.validate();
    const IntervalKind interval = parse_interval_kind(a.interval);
    const std::vector<double> levels = a.levels ? parse_list(*a.levels, "--levels") : default_levels();
    std::optional<MissingPattern> missing;
    if (a.missing) missing = parse_missing_pattern(*a.missing);

    SequenceRegressor model = read_checkpoint(a.checkpoint);
    SeriesBatch data = load_csv(a.data);
    if (missing) data = inject_missing(data, *missing, a.seed);
    const EvalResult ev = evaluate_model(model, data, mc, levels, interval);

    fs::path dir;
    if (a.out) {
        dir = *a.out;
        fs::create_directories(dir);
    } else {
        dir = make_run_dir(output_root(std::nullopt), "eval-" + utc_stamp());
    }
    write_eval_outputs(dir, ev, data.targets);
    std::cout << dir.string() << '\n';
    print_metrics(ev.metrics);
    return exit_ok;
}

void write_metric_row(std::ostream& os, const MetricBundle& m) {
    using detail::format_double;
    os << format_double(m.r2) << ',' << format_double(m.rmse) << ',' << format_double(m.mae) << ','
       << format_double(m.ece) << ',' << format_double(m.mean_pu) << ',' << format_double(m.norm_pu);
}

int cmd_sweep(const Overrides& o, const std::string& ratio_text) {
    const ExperimentConfig cfg = o.load();
    const std::vector<double> ratios = parse_list(ratio_text, "--ratios");
    for (double r : ratios) TdConfig{r, 0}.validate();
    const SeriesBatch data = load_data(cfg.data);
    const fs::path dir = run_dir_for("sweep", cfg);
    const auto rows = ratio_sweep(ratios, cfg.experiment(), data);

    nlohmann::json records = nlohmann::json::array();
    write_stream(dir / "sweep.csv", [&](std::ostream& os) {
        os << "ratio,r2,rmse,mae,ece,mean_pu,norm_pu\n";
        for (const auto& row : rows) {
            os << detail::format_double(row.ratio) << ',';
            write_metric_row(os, row.metrics);
            os << '\n';
            nlohmann::json rec = to_json(row.record);
            rec.erase("wall_seconds");
            records.push_back({{"ratio", row.ratio}, {"metrics", to_json(row.metrics)}, {"record", rec}});
        }
    });
    write_json(dir / "sweep.json", records);
    std::cout << dir.string() << '\n';
    for (const auto& row : rows) {
        std::cout << "ratio=" << row.ratio << ' ';
        print_metrics(row.metrics);
    }
    return exit_ok;
}

int cmd_kfold(const Overrides& o, std::size_t k) {
    const ExperimentConfig cfg = o.load();
    if (k < 2) throw ConfigError("--k: must be at least 2, got " + std::to_string(k));
    const SeriesBatch data = load_data(cfg.data);
    if (k > data.size) throw ConfigError("--k: exceeds the number of series (" + std::to_string(data.size) + ")");
    const fs::path dir = run_dir_for("kfold", cfg);
    const KfoldResult res = run_kfold(cfg.experiment(), data, k);

    auto rate_cell = [](const std::optional<double>& r) { return r ? detail::format_double(*r) : std::string(); };
    write_stream(dir / "kfold.csv", [&](std::ostream& os) {
        os << "fold,r2,rmse,mae,ece,mean_pu,norm_pu,rate\n";
        double rate_sum = 0.0;
        bool has_rate = false;
        for (const auto& f : res.folds) {
            os << f.fold << ',';
            write_metric_row(os, f.metrics);
            os << ',' << rate_cell(f.rate) << '\n';
            if (f.rate) rate_sum += *f.rate, has_rate = true;
        }
        os << "mean,";
        write_metric_row(os, res.mean);
        os << ',' << rate_cell(has_rate ? std::optional(rate_sum / static_cast<double>(res.folds.size())) : std::nullopt)
           << '\n';
    });

    nlohmann::json folds = nlohmann::json::array();
    for (const auto& f : res.folds) {
        nlohmann::json rec = to_json(f.record);
        rec.erase("wall_seconds");
        folds.push_back({{"fold", f.fold},
                         {"rate", f.rate ? nlohmann::json(*f.rate) : nlohmann::json(nullptr)},
                         {"metrics", to_json(f.metrics)},
                         {"record", rec}});
    }
    write_json(dir / "kfold.json",
               {{"plan", res.plan}, {"folds", folds}, {"mean", to_json(res.mean)}, {"std", to_json(res.std)}});
    std::cout << dir.string() << '\n';
    for (const auto& f : res.folds) {
        std::cout << "fold=" << f.fold;
        if (f.rate) std::cout << " rate=" << *f.rate;
        std::cout << ' ';
        print_metrics(f.metrics);
    }
    std::cout << "mean ";
    print_metrics(res.mean);
    return exit_ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Monte Carlo temporal dropout for uncertainty-aware time-series regression.\n"
                 "Default output root: $MCTD_OUTPUT_ROOT, else ./runs."};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every command");

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen", "Write a synthetic dataset, its ground-truth sidecar and spec");
    gen_cmd->add_option("--kind", gen.kind, "Generator: mean_signal, trend, seasonal_peak")->capture_default_str();
    gen_cmd->add_option("--n", gen.n, "Number of series")->capture_default_str();
    gen_cmd->add_option("--t", gen.steps, "Steps per series")->capture_default_str();
    gen_cmd->add_option("--f", gen.features, "Features per step")->capture_default_str();
    gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
    gen_cmd->add_option("--noise", gen.noise, "Target noise std")->capture_default_str();
    gen_cmd->add_flag("--heteroscedastic", gen.heteroscedastic, "Noise std 0.05 + 0.2 |mean of feature 0|");
    gen_cmd->add_option("--level-std", gen.level_std, "Std of the per-series feature level")->capture_default_str();
    gen_cmd->add_option("--out", gen.out, "Output CSV path (sidecars are written next to it)");

    Overrides train;
    auto* train_cmd = app.add_subcommand("train", "Train a model and score it on the held-out split");
    train.add_to(train_cmd, true);

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Monte Carlo evaluation of a checkpoint on a CSV dataset");
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file written by train")->required();
    eval_cmd->add_option("--data", ev.data, "Dataset CSV")->required();
    eval_cmd->add_option("--samples", ev.samples, "Monte Carlo samples L (at least 2)")->capture_default_str();
    eval_cmd->add_option("--source", ev.source, "Stochastic source: temporal_hard, temporal_concrete, hidden_dropout");
    eval_cmd->add_option("--ratio", ev.ratio, "Inference drop ratio for temporal_hard");
    eval_cmd->add_option("--seed", ev.seed, "Sampling seed")->capture_default_str();
    eval_cmd->add_option("--missing", ev.missing, "Missing-step stressor: random:R, burst:START:LEN or prefix:LEN");
    eval_cmd->add_option("--interval", ev.interval, "Interval kind: gaussian or mixture")->capture_default_str();
    eval_cmd->add_option("--levels", ev.levels, "Comma-separated confidence levels");
    eval_cmd->add_option("--out", ev.out, "Output directory");

    Overrides sweep;
    std::string ratios = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";
    auto* sweep_cmd = app.add_subcommand("sweep", "Train one temporal-dropout model per ratio");
    sweep.add_to(sweep_cmd, false);
    sweep_cmd->add_option("--ratios", ratios, "Comma-separated drop ratios")->capture_default_str();

    Overrides kf;
    std::size_t k = 5;
    auto* kfold_cmd = app.add_subcommand("kfold", "K-fold cross-validation of the configured experiment");
    kf.add_to(kfold_cmd, true);
    kfold_cmd->add_option("--k", k, "Number of folds")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_config;
    }

    try {
        if (*gen_cmd) return cmd_gen(gen);
        if (*train_cmd) return cmd_train(train);
        if (*eval_cmd) return cmd_eval(ev);
        if (*sweep_cmd) return cmd_sweep(sweep, ratios);
        if (*kfold_cmd) return cmd_kfold(kf, k);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        switch (e.kind()) {
            case ErrorKind::config: return exit_config;
            case ErrorKind::numeric: return exit_numeric;
            default: return exit_data;
        }
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_data;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_config;
    }
    return exit_config;
}
