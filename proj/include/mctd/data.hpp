#pragma once

// Time-series regression data: the in-memory batch layout, synthetic
// generators with known noise, the long-format CSV reader/writer, missing-step
// injection, z-normalization and k-fold planning.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mctd/error.hpp"
#include "mctd/rng.hpp"

namespace mctd {

struct NormStats {
    std::vector<double> mean;
    std::vector<double> std;

    bool operator==(const NormStats&) const = default;
};

inline void to_json(nlohmann::json& j, const NormStats& s) { j = {{"mean", s.mean}, {"std", s.std}}; }
inline void from_json(const nlohmann::json& j, NormStats& s) {
    j.at("mean").get_to(s.mean);
    j.at("std").get_to(s.std);
}

/// A batch of multivariate series, right-padded to a common length.
///
/// inputs are laid out [example][step][feature]. A step with valid == 0 is
/// missing (padding or an absent observation) and its inputs are zero.
/// lengths[b] counts the steps of series b including interior missing steps;
/// the encoder reads its state at step lengths[b] - 1.
struct SeriesBatch {
    std::size_t size = 0;
    std::size_t steps = 0;
    std::size_t features = 0;
    std::vector<double> inputs;
    std::vector<std::uint8_t> valid;
    std::vector<std::size_t> lengths;
    std::vector<double> targets;
    std::vector<std::string> ids;
    std::optional<NormStats> norm;
    // Generator ground truth (conditional mean and noise variance); empty for loaded data.
    std::vector<double> true_mean;
    std::vector<double> true_var;

    static SeriesBatch empty(std::size_t size, std::size_t steps, std::size_t features) {
        SeriesBatch b;
        b.size = size;
        b.steps = steps;
        b.features = features;
        b.inputs.assign(size * steps * features, 0.0);
        b.valid.assign(size * steps, 1);
        b.lengths.assign(size, steps);
        b.targets.assign(size, 0.0);
        b.ids.resize(size);
        for (std::size_t i = 0; i < size; ++i) b.ids[i] = std::to_string(i);
        return b;
    }

    double& at(std::size_t b, std::size_t t, std::size_t f) { return inputs[(b * steps + t) * features + f]; }
    double at(std::size_t b, std::size_t t, std::size_t f) const { return inputs[(b * steps + t) * features + f]; }
    bool is_valid(std::size_t b, std::size_t t) const { return valid[b * steps + t] != 0; }

    bool has_truth() const { return true_mean.size() == size && true_var.size() == size; }

    SeriesBatch subset(std::span<const std::size_t> rows) const {
        SeriesBatch out = empty(rows.size(), steps, features);
        out.norm = norm;
        const std::size_t stride = steps * features;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const std::size_t r = rows[i];
            if (r >= size) throw DataError("subset: row " + std::to_string(r) + " out of range");
            std::copy_n(inputs.begin() + static_cast<std::ptrdiff_t>(r * stride), stride,
                        out.inputs.begin() + static_cast<std::ptrdiff_t>(i * stride));
            std::copy_n(valid.begin() + static_cast<std::ptrdiff_t>(r * steps), steps,
                        out.valid.begin() + static_cast<std::ptrdiff_t>(i * steps));
            out.lengths[i] = lengths[r];
            out.targets[i] = targets[r];
            out.ids[i] = ids[r];
        }
        if (has_truth()) {
            out.true_mean.resize(rows.size());
            out.true_var.resize(rows.size());
            for (std::size_t i = 0; i < rows.size(); ++i) {
                out.true_mean[i] = true_mean[rows[i]];
                out.true_var[i] = true_var[rows[i]];
            }
        }
        return out;
    }

    void validate() const {
        if (steps < 1 || features < 1) throw DataError("series batch needs at least one step and one feature");
        if (inputs.size() != size * steps * features || valid.size() != size * steps || lengths.size() != size ||
            targets.size() != size) {
            throw DataError("series batch buffers disagree with its dimensions");
        }
        for (std::size_t b = 0; b < size; ++b) {
            if (lengths[b] < 1 || lengths[b] > steps) throw DataError("series " + ids[b] + " has invalid length");
            for (std::size_t t = 0; t < steps; ++t) {
                for (std::size_t f = 0; f < features; ++f) {
                    const double v = at(b, t, f);
                    if (std::isnan(v)) throw DataError("series " + ids[b] + " contains NaN at step " + std::to_string(t));
                    if (!is_valid(b, t) && v != 0.0) throw DataError("series " + ids[b] + " has a non-zero missing step");
                }
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Synthetic generators

enum class GeneratorKind { mean_signal, trend, seasonal_peak };

inline std::string to_string(GeneratorKind k) {
    switch (k) {
        case GeneratorKind::mean_signal: return "mean_signal";
        case GeneratorKind::trend: return "trend";
        case GeneratorKind::seasonal_peak: return "seasonal_peak";
    }
    return "?";
}

inline GeneratorKind parse_generator_kind(std::string_view s) {
    if (s == "mean_signal") return GeneratorKind::mean_signal;
    if (s == "trend") return GeneratorKind::trend;
    if (s == "seasonal_peak") return GeneratorKind::seasonal_peak;
    throw ConfigError("unknown generator kind '" + std::string(s) + "' (expected mean_signal, trend or seasonal_peak)");
}

struct SyntheticSpec {
    GeneratorKind kind = GeneratorKind::mean_signal;
    std::size_t steps = 24;
    std::size_t features = 3;
    std::size_t n = 1000;
    double noise_std = 0.1;
    // Noise std becomes 0.05 + 0.2 * |mean of feature 0| instead of noise_std.
    bool heteroscedastic = false;
    // Std of the per-series level added to every step of a feature.
    double level_std = 1.0;
    std::uint64_t seed = 0;

    bool operator==(const SyntheticSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    j = {{"kind", to_string(s.kind)}, {"steps", s.steps},         {"features", s.features},
         {"n", s.n},                  {"noise_std", s.noise_std}, {"heteroscedastic", s.heteroscedastic},
         {"level_std", s.level_std},  {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
    SyntheticSpec d;
    s.kind = parse_generator_kind(j.value("kind", to_string(d.kind)));
    s.steps = j.value("steps", d.steps);
    s.features = j.value("features", d.features);
    s.n = j.value("n", d.n);
    s.noise_std = j.value("noise_std", d.noise_std);
    s.heteroscedastic = j.value("heteroscedastic", d.heteroscedastic);
    s.level_std = j.value("level_std", d.level_std);
    s.seed = j.value("seed", d.seed);
}

/// Noise-free target of one series, read from feature 0 over `steps` steps.
///   mean_signal:   mean of the values
///   trend:         least-squares slope against normalized time t / (T - 1)
///   seasonal_peak: first argmax step, scaled to [0, 1]
inline double target_function(GeneratorKind kind, std::span<const double> series) {
    const std::size_t n = series.size();
    if (n == 0) throw DataError("target_function: empty series");
    switch (kind) {
        case GeneratorKind::mean_signal:
            return std::accumulate(series.begin(), series.end(), 0.0) / static_cast<double>(n);
        case GeneratorKind::trend: {
            if (n == 1) return 0.0;
            double mt = 0.0, mx = 0.0;
            for (std::size_t t = 0; t < n; ++t) {
                mt += static_cast<double>(t) / static_cast<double>(n - 1);
                mx += series[t];
            }
            mt /= static_cast<double>(n);
            mx /= static_cast<double>(n);
            double sxy = 0.0, sxx = 0.0;
            for (std::size_t t = 0; t < n; ++t) {
                const double u = static_cast<double>(t) / static_cast<double>(n - 1) - mt;
                sxy += u * (series[t] - mx);
                sxx += u * u;
            }
            return sxy / sxx;
        }
        case GeneratorKind::seasonal_peak: {
            if (n == 1) return 0.0;
            const auto it = std::max_element(series.begin(), series.end());
            return static_cast<double>(it - series.begin()) / static_cast<double>(n - 1);
        }
    }
    throw ConfigError("target_function: invalid generator kind");
}

inline double heteroscedastic_std(std::span<const double> series) {
    const double m = std::accumulate(series.begin(), series.end(), 0.0) / static_cast<double>(series.size());
    return 0.05 + 0.2 * std::abs(m);
}

inline SeriesBatch generate(const SyntheticSpec& spec) {
    if (spec.steps < 1 || spec.features < 1 || spec.n < 1) {
        throw ConfigError("generate: steps, features and n must all be positive");
    }
    if (spec.noise_std < 0 || spec.level_std < 0) throw ConfigError("generate: negative noise_std or level_std");
    const auto kind = spec.kind;
    if (kind != GeneratorKind::mean_signal && kind != GeneratorKind::trend && kind != GeneratorKind::seasonal_peak) {
        throw ConfigError("generate: invalid generator kind");
    }
    Rng rng = make_rng(spec.seed, Stream::generate);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t T = spec.steps, F = spec.features;
    SeriesBatch b = SeriesBatch::empty(spec.n, T, F);
    b.true_mean.resize(spec.n);
    b.true_var.resize(spec.n);
    std::vector<double> f0(T);
    for (std::size_t i = 0; i < spec.n; ++i) {
        for (std::size_t f = 0; f < F; ++f) {
            const double level = spec.level_std * normal(rng);
            for (std::size_t t = 0; t < T; ++t) b.at(i, t, f) = level + normal(rng);
        }
        if (kind == GeneratorKind::trend) {
            const double intercept = spec.level_std * normal(rng);
            const double slope = normal(rng);
            for (std::size_t t = 0; t < T; ++t) {
                const double u = T > 1 ? static_cast<double>(t) / static_cast<double>(T - 1) : 0.0;
                b.at(i, t, 0) = intercept + slope * u + 0.25 * normal(rng);
            }
        } else if (kind == GeneratorKind::seasonal_peak) {
            const double center = uniform01(rng) * static_cast<double>(T - 1);
            const double width = std::max(1.0, static_cast<double>(T) / 8.0);
            for (std::size_t t = 0; t < T; ++t) {
                const double d = static_cast<double>(t) - center;
                b.at(i, t, 0) = std::exp(-d * d / (2.0 * width * width)) + 0.1 * normal(rng);
            }
        }
        for (std::size_t t = 0; t < T; ++t) f0[t] = b.at(i, t, 0);
        const double mean = target_function(kind, f0);
        const double sd = spec.heteroscedastic ? heteroscedastic_std(f0) : spec.noise_std;
        b.true_mean[i] = mean;
        b.true_var[i] = sd * sd;
        b.targets[i] = mean + sd * normal(rng);
    }
    return b;
}

// ---------------------------------------------------------------------------
// Missing-step injection

struct MissingPattern {
    enum class Kind { random, burst, prefix };
    Kind kind = Kind::random;
    double ratio = 0.0;
    std::size_t start = 0;
    std::size_t length = 0;

    static MissingPattern random(double ratio) { return {Kind::random, ratio, 0, 0}; }
    static MissingPattern burst(std::size_t start, std::size_t length) { return {Kind::burst, 0.0, start, length}; }
    static MissingPattern prefix(std::size_t length) { return {Kind::prefix, 0.0, 0, length}; }
};

/// Parses "random:0.3", "burst:4:6" or "prefix:5".
inline MissingPattern parse_missing_pattern(const std::string& text) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ':');) parts.push_back(item);
    try {
        if (parts.size() == 2 && parts[0] == "random") return MissingPattern::random(std::stod(parts[1]));
        if (parts.size() == 3 && parts[0] == "burst") return MissingPattern::burst(std::stoul(parts[1]), std::stoul(parts[2]));
        if (parts.size() == 2 && parts[0] == "prefix") return MissingPattern::prefix(std::stoul(parts[1]));
    } catch (const std::exception&) {
    }
    throw ConfigError("invalid missing pattern '" + text + "' (expected random:R, burst:START:LEN or prefix:LEN)");
}

inline SeriesBatch inject_missing(const SeriesBatch& in, const MissingPattern& pattern, std::uint64_t seed) {
    using K = MissingPattern::Kind;
    if (pattern.kind == K::random && !(pattern.ratio >= 0.0 && pattern.ratio <= 1.0)) {
        throw ConfigError("inject_missing: ratio must lie in [0, 1]");
    }
    if (pattern.kind == K::burst && pattern.start + pattern.length > in.steps) {
        throw ConfigError("inject_missing: burst [" + std::to_string(pattern.start) + ", " +
                          std::to_string(pattern.start + pattern.length) + ") exceeds series length " +
                          std::to_string(in.steps));
    }
    if (pattern.kind == K::prefix && pattern.length > in.steps) {
        throw ConfigError("inject_missing: prefix " + std::to_string(pattern.length) + " exceeds series length " +
                          std::to_string(in.steps));
    }
    SeriesBatch out = in;
    Rng rng = make_rng(seed, Stream::missing);
    for (std::size_t b = 0; b < out.size; ++b) {
        for (std::size_t t = 0; t < out.steps; ++t) {
            bool drop = false;
            switch (pattern.kind) {
                case K::random: drop = uniform01(rng) < pattern.ratio; break;
                case K::burst: drop = t >= pattern.start && t < pattern.start + pattern.length; break;
                case K::prefix: drop = t < pattern.length; break;
            }
            if (!drop) continue;
            out.valid[b * out.steps + t] = 0;
            for (std::size_t f = 0; f < out.features; ++f) out.at(b, t, f) = 0.0;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-feature mean and population std over valid steps. Constant features get std 1.
inline NormStats fit_normalization(const SeriesBatch& batch) {
    NormStats s;
    s.mean.assign(batch.features, 0.0);
    s.std.assign(batch.features, 1.0);
    std::vector<double> sq(batch.features, 0.0);
    std::size_t count = 0;
    for (std::size_t b = 0; b < batch.size; ++b) {
        for (std::size_t t = 0; t < batch.steps; ++t) {
            if (!batch.is_valid(b, t)) continue;
            ++count;
            for (std::size_t f = 0; f < batch.features; ++f) s.mean[f] += batch.at(b, t, f);
        }
    }
    if (count == 0) return s;
    for (auto& m : s.mean) m /= static_cast<double>(count);
    for (std::size_t b = 0; b < batch.size; ++b) {
        for (std::size_t t = 0; t < batch.steps; ++t) {
            if (!batch.is_valid(b, t)) continue;
            for (std::size_t f = 0; f < batch.features; ++f) {
                const double d = batch.at(b, t, f) - s.mean[f];
                sq[f] += d * d;
            }
        }
    }
    for (std::size_t f = 0; f < batch.features; ++f) {
        const double sd = std::sqrt(sq[f] / static_cast<double>(count));
        s.std[f] = sd > 1e-12 ? sd : 1.0;
    }
    return s;
}

/// z-normalizes valid steps; missing steps stay at zero.
inline SeriesBatch normalize(const SeriesBatch& in, const NormStats& stats) {
    if (stats.mean.size() != in.features || stats.std.size() != in.features) {
        throw DataError("normalize: statistics cover " + std::to_string(stats.mean.size()) + " features, batch has " +
                        std::to_string(in.features));
    }
    SeriesBatch out = in;
    for (std::size_t b = 0; b < out.size; ++b) {
        for (std::size_t t = 0; t < out.steps; ++t) {
            if (!out.is_valid(b, t)) continue;
            for (std::size_t f = 0; f < out.features; ++f) {
                out.at(b, t, f) = (out.at(b, t, f) - stats.mean[f]) / stats.std[f];
            }
        }
    }
    out.norm = stats;
    return out;
}

// ---------------------------------------------------------------------------
// Long-format CSV: series_id,t,<feature columns...>,target

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    for (auto& f : out) {
        while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
        while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r')) f.remove_suffix(1);
    }
    return out;
}

inline std::optional<double> parse_double(std::string_view s) {
    double v = 0.0;
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

}  // namespace detail

/// Writes raw values. A missing step is written as a row with empty feature cells.
inline void write_csv(const SeriesBatch& batch, std::ostream& os) {
    os << "series_id,t";
    for (std::size_t f = 0; f < batch.features; ++f) os << ",feature_" << (f + 1);
    os << ",target\n";
    for (std::size_t b = 0; b < batch.size; ++b) {
        const std::string target = detail::format_double(batch.targets[b]);
        for (std::size_t t = 0; t < batch.lengths[b]; ++t) {
            os << batch.ids[b] << ',' << t;
            for (std::size_t f = 0; f < batch.features; ++f) {
                os << ',';
                if (batch.is_valid(b, t)) os << detail::format_double(batch.at(b, t, f));
            }
            os << ',' << target << '\n';
        }
    }
}

inline void write_csv(const SeriesBatch& batch, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open '" + path + "' for writing");
    write_csv(batch, os);
    if (!os) throw DataError("failed writing '" + path + "'");
}

struct CsvSchema {
    // When set, the file must carry exactly this many feature columns.
    std::optional<std::size_t> features;
};

inline SeriesBatch read_csv(std::istream& is, const CsvSchema& schema = {}, const std::string& source = "<stream>") {
    std::string line;
    if (!std::getline(is, line)) throw DataError(source + ": empty file, header row required");
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    const auto header = detail::split_csv_line(line);
    if (header.size() < 4 || header[0] != "series_id" || header[1] != "t" || header.back() != "target") {
        throw DataError(source + ":1: header must be 'series_id,t,<features...>,target'");
    }
    const std::size_t F = header.size() - 3;
    if (schema.features && *schema.features != F) {
        throw DataError(source + ":1: expected " + std::to_string(*schema.features) + " feature columns, found " +
                        std::to_string(F));
    }

    struct Row {
        std::vector<double> values;
        bool missing;
        std::size_t line;
    };
    struct Series {
        std::map<std::size_t, Row> steps;
        double target;
        std::size_t first_line;
    };
    std::vector<std::string> order;
    std::map<std::string, Series> series;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto cells = detail::split_csv_line(line);
        const std::string where = source + ":" + std::to_string(line_no);
        if (cells.size() != header.size()) {
            throw DataError(where + ": expected " + std::to_string(header.size()) + " columns, found " +
                            std::to_string(cells.size()));
        }
        const std::string id(cells[0]);
        if (id.empty()) throw DataError(where + ": empty series_id");
        const auto t = detail::parse_double(cells[1]);
        if (!t || *t < 0 || std::floor(*t) != *t) throw DataError(where + ": column 't' must be a non-negative integer");
        const auto target = detail::parse_double(cells.back());
        if (!target) throw DataError(where + ": non-numeric value in column 'target'");
        Row row{std::vector<double>(F, 0.0), false, line_no};
        std::size_t empty_cells = 0;
        for (std::size_t f = 0; f < F; ++f) {
            if (cells[2 + f].empty()) ++empty_cells;
        }
        if (empty_cells == F) {
            row.missing = true;
        } else {
            for (std::size_t f = 0; f < F; ++f) {
                const auto v = detail::parse_double(cells[2 + f]);
                if (!v) throw DataError(where + ": non-numeric value in column '" + std::string(header[2 + f]) + "'");
                row.values[f] = *v;
            }
        }
        auto [it, inserted] = series.try_emplace(id, Series{{}, *target, line_no});
        if (inserted) order.push_back(id);
        if (it->second.target != *target) {
            throw DataError(where + ": target of series '" + id + "' differs from line " +
                            std::to_string(it->second.first_line));
        }
        const auto step = static_cast<std::size_t>(*t);
        if (auto prev = it->second.steps.find(step); prev != it->second.steps.end()) {
            throw DataError(where + ": duplicate key (series_id=" + id + ", t=" + std::to_string(step) +
                            "), first seen at line " + std::to_string(prev->second.line));
        }
        it->second.steps.emplace(step, std::move(row));
    }
    if (order.empty()) throw DataError(source + ": no data rows");

    std::size_t T = 0;
    for (const auto& [id, s] : series) T = std::max(T, s.steps.rbegin()->first + 1);
    SeriesBatch b = SeriesBatch::empty(order.size(), T, F);
    std::fill(b.valid.begin(), b.valid.end(), 0);
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& s = series.at(order[i]);
        b.ids[i] = order[i];
        b.targets[i] = s.target;
        b.lengths[i] = s.steps.rbegin()->first + 1;
        for (const auto& [t, row] : s.steps) {
            if (row.missing) continue;
            b.valid[i * T + t] = 1;
            for (std::size_t f = 0; f < F; ++f) b.at(i, t, f) = row.values[f];
        }
    }
    return b;
}

inline SeriesBatch load_csv(const std::string& path, const CsvSchema& schema = {}) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open '" + path + "'");
    return read_csv(is, schema, path);
}

// ---------------------------------------------------------------------------
// k-fold planning

struct FoldPlan {
    std::size_t k = 0;
    std::uint64_t seed = 0;
    std::vector<std::size_t> assignment;  // fold of each example index

    std::vector<std::size_t> fold(std::size_t i) const {
        std::vector<std::size_t> out;
        for (std::size_t j = 0; j < assignment.size(); ++j)
            if (assignment[j] == i) out.push_back(j);
        return out;
    }

    std::vector<std::size_t> complement(std::size_t i) const {
        std::vector<std::size_t> out;
        for (std::size_t j = 0; j < assignment.size(); ++j)
            if (assignment[j] != i) out.push_back(j);
        return out;
    }

    bool operator==(const FoldPlan&) const = default;
};

inline void to_json(nlohmann::json& j, const FoldPlan& p) {
    j = {{"k", p.k}, {"seed", p.seed}, {"assignment", p.assignment}};
}
inline void from_json(const nlohmann::json& j, FoldPlan& p) {
    j.at("k").get_to(p.k);
    j.at("seed").get_to(p.seed);
    j.at("assignment").get_to(p.assignment);
}

inline FoldPlan kfold(std::size_t n, std::size_t k, std::uint64_t seed) {
    if (k < 2 || k > n) {
        throw ConfigError("kfold: need 2 <= k <= n, got k=" + std::to_string(k) + ", n=" + std::to_string(n));
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng = make_rng(seed, Stream::folds);
    std::shuffle(perm.begin(), perm.end(), rng);
    FoldPlan plan{k, seed, std::vector<std::size_t>(n)};
    for (std::size_t pos = 0; pos < n; ++pos) plan.assignment[perm[pos]] = pos % k;
    return plan;
}

}  // namespace mctd
