#pragma once

// Declarative experiment description read from a single JSON file.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mctd/data.hpp"
#include "mctd/error.hpp"
#include "mctd/trainer.hpp"

namespace mctd {

struct DataSource {
    std::optional<std::string> csv;
    std::optional<SyntheticSpec> synthetic;
    std::optional<std::string> missing;  // stressor applied to the test split, e.g. "random:0.3"
    double test_fraction = 0.2;

    bool operator==(const DataSource&) const = default;
};

struct ExperimentConfig {
    DataSource data;
    ModelConfig model;
    TrainConfig train;
    McConfig mc;
    std::vector<double> levels = default_levels();
    IntervalKind interval = IntervalKind::gaussian;
    std::optional<std::string> output_dir;
    std::uint64_t seed = 0;

    bool operator==(const ExperimentConfig&) const = default;

    /// Checks every section; throws ConfigError naming the offending field.
    void validate() const {
        if (data.csv.has_value() == data.synthetic.has_value()) {
            throw ConfigError("data: exactly one of data.csv and data.synthetic must be set");
        }
        if (!(data.test_fraction > 0.0 && data.test_fraction < 1.0)) {
            throw ConfigError("data.test_fraction must lie in (0, 1)");
        }
        if (data.missing) parse_missing_pattern(*data.missing);
        model.validate();
        train.validate();
        mc.validate();
        if (levels.empty()) throw ConfigError("levels: at least one confidence level is required");
        for (double c : levels) {
            if (!(c > 0.0 && c < 1.0)) throw ConfigError("levels: every level must lie in (0, 1)");
        }
    }

    Experiment experiment() const {
        Experiment e;
        e.model = model;
        e.train = train;
        e.mc = mc;
        e.levels = levels;
        e.interval = interval;
        e.test_fraction = data.test_fraction;
        e.model.seed = e.train.seed = e.mc.seed = seed;
        return e;
    }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw ConfigError(where + "." + key + ": unknown field");
    }
}

// Counts and seeds must be non-negative integers; the json library would wrap -1 silently.
inline void check_unsigned(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> fields) {
    for (const char* f : fields) {
        if (j.contains(f) && !j[f].is_number_unsigned()) {
            throw ConfigError(where + "." + f + ": expected a non-negative integer, got " + j[f].dump());
        }
    }
}

template <class T>
T section(const nlohmann::json& j, const std::string& name) {
    try {
        return j.get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(name + ": " + e.what());
    }
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const DataSource& d) {
    j = {{"test_fraction", d.test_fraction}};
    j["csv"] = d.csv ? nlohmann::json(*d.csv) : nlohmann::json(nullptr);
    j["synthetic"] = d.synthetic ? nlohmann::json(*d.synthetic) : nlohmann::json(nullptr);
    j["missing"] = d.missing ? nlohmann::json(*d.missing) : nlohmann::json(nullptr);
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    j = {{"data", c.data},       {"model", c.model},   {"train", c.train},
         {"mc", c.mc},           {"levels", c.levels}, {"interval", to_string(c.interval)},
         {"seed", c.seed}};
    j["output_dir"] = c.output_dir ? nlohmann::json(*c.output_dir) : nlohmann::json(nullptr);
}

/// Missing fields take defaults; unknown fields and ill-typed values are
/// rejected with the dotted path of the offending field.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
    using detail::check_keys;
    using detail::section;
    check_keys(j, "config", {"data", "model", "train", "mc", "levels", "interval", "output_dir", "seed"});
    if (j.contains("seed") && !j["seed"].is_number_unsigned()) {
        throw ConfigError("seed: expected a non-negative integer, got " + j["seed"].dump());
    }
    ExperimentConfig c;
    if (j.contains("data")) {
        const auto& d = j["data"];
        check_keys(d, "data", {"csv", "synthetic", "missing", "test_fraction"});
        if (d.contains("csv") && !d["csv"].is_null()) c.data.csv = section<std::string>(d["csv"], "data.csv");
        if (d.contains("synthetic") && !d["synthetic"].is_null()) {
            check_keys(d["synthetic"], "data.synthetic",
                       {"kind", "steps", "features", "n", "noise_std", "heteroscedastic", "level_std", "seed"});
            detail::check_unsigned(d["synthetic"], "data.synthetic", {"steps", "features", "n", "seed"});
            c.data.synthetic = section<SyntheticSpec>(d["synthetic"], "data.synthetic");
        }
        if (d.contains("missing") && !d["missing"].is_null()) {
            c.data.missing = section<std::string>(d["missing"], "data.missing");
        }
        if (d.contains("test_fraction")) c.data.test_fraction = section<double>(d["test_fraction"], "data.test_fraction");
    }
    if (j.contains("model")) {
        check_keys(j["model"], "model",
                   {"input_features", "hidden_size", "num_layers", "dense_size", "dropout", "dense_activation",
                    "batch_norm", "bn_momentum", "logvar_min", "logvar_max", "seed"});
        detail::check_unsigned(j["model"], "model", {"input_features", "hidden_size", "num_layers", "dense_size", "seed"});
        c.model = section<ModelConfig>(j["model"], "model");
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        check_keys(t, "train",
                   {"loss", "epochs", "patience", "batch_size", "method", "learning_rate", "rate_learning_rate",
                    "val_fraction", "seed"});
        detail::check_unsigned(t, "train", {"epochs", "patience", "batch_size", "seed"});
        if (t.contains("method")) {
            check_keys(t["method"], "train.method",
                       {"kind", "ratio", "inference_ratio", "initial_rate", "temperature", "harden_at_inference"});
        }
        c.train = section<TrainConfig>(t, "train");
    }
    if (j.contains("mc")) {
        check_keys(j["mc"], "mc", {"samples", "source", "ratio", "seed", "chunk"});
        detail::check_unsigned(j["mc"], "mc", {"samples", "seed", "chunk"});
        c.mc = section<McConfig>(j["mc"], "mc");
    }
    if (j.contains("levels")) c.levels = section<std::vector<double>>(j["levels"], "levels");
    if (j.contains("interval")) c.interval = parse_interval_kind(section<std::string>(j["interval"], "interval"));
    if (j.contains("output_dir") && !j["output_dir"].is_null()) {
        c.output_dir = section<std::string>(j["output_dir"], "output_dir");
    }
    if (j.contains("seed")) c.seed = section<std::uint64_t>(j["seed"], "seed");
    c.model.seed = c.train.seed = c.mc.seed = c.seed;
    return c;
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::string& source = "config") {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(source + ": " + e.what());
    }
    return parse_config(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path.string());
}

inline std::string dump_config(const ExperimentConfig& c) { return nlohmann::json(c).dump(2) + "\n"; }

/// Stable 64-bit FNV-1a digest of the serialized config, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
    const std::string s = nlohmann::json(c).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = digits[h & 0xf];
    return out;
}

/// Loads the configured data source.
inline SeriesBatch load_data(const DataSource& d) {
    if (d.csv) return load_csv(*d.csv, CsvSchema{});
    if (d.synthetic) return generate(*d.synthetic);
    throw ConfigError("data: no data source configured");
}

}  // namespace mctd
