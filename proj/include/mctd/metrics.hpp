#pragma once

// Point-prediction scores and interval calibration.
//
// Calibration is measured by coverage: for each nominal confidence c the
// observed coverage is the fraction of targets inside the c-level predictive
// interval, and ECE (in percent) is 100 * mean_c |coverage(c) - c|.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <span>
#include <vector>

#include "json.hpp"
#include "mctd/error.hpp"
#include "mctd/uq.hpp"

namespace mctd {

namespace detail {

inline void check_pair(const char* what, std::span<const double> pred, std::span<const double> target) {
    if (pred.size() != target.size()) {
        throw ShapeError(std::string(what) + ": " + std::to_string(pred.size()) + " predictions for " +
                         std::to_string(target.size()) + " targets");
    }
    if (pred.size() < 2) throw DataError(std::string(what) + ": need at least 2 examples");
}

inline double mean_of(std::span<const double> v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace detail

inline double rmse(std::span<const double> pred, std::span<const double> target) {
    detail::check_pair("rmse", pred, target);
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
    return std::sqrt(s / static_cast<double>(pred.size()));
}

inline double mae(std::span<const double> pred, std::span<const double> target) {
    detail::check_pair("mae", pred, target);
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - target[i]);
    return s / static_cast<double>(pred.size());
}

/// 1 - SS_res / SS_tot. Throws when the targets are constant.
inline double r2(std::span<const double> pred, std::span<const double> target) {
    detail::check_pair("r2", pred, target);
    const double m = detail::mean_of(target);
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        ss_res += (target[i] - pred[i]) * (target[i] - pred[i]);
        ss_tot += (target[i] - m) * (target[i] - m);
    }
    if (ss_tot == 0.0) throw DataError("r2: undefined for constant targets");
    return 1.0 - ss_res / ss_tot;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
    detail::check_pair("pearson", a, b);
    const double ma = detail::mean_of(a), mb = detail::mean_of(b);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) throw DataError("pearson: undefined for a constant sequence");
    return sab / std::sqrt(saa * sbb);
}

/// Average ranks (ties share the mean rank), 1-based.
inline std::vector<double> ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
    const auto ra = ranks(a), rb = ranks(b);
    return pearson(ra, rb);
}

inline std::vector<double> default_levels() { return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}; }

struct ReliabilityCurve {
    std::vector<double> levels;
    std::vector<double> observed;
};

inline ReliabilityCurve reliability_curve(const UncertaintyReport& report, std::span<const double> targets,
                                          std::span<const double> levels, IntervalKind kind = IntervalKind::gaussian) {
    if (report.examples == 0) throw DataError("reliability_curve: empty report");
    if (targets.size() != report.examples) throw ShapeError("reliability_curve: target count differs from report");
    if (levels.empty()) throw ConfigError("reliability_curve: no confidence levels");
    ReliabilityCurve curve;
    for (double c : levels) {
        const Intervals iv = predictive_interval(report, c, kind);
        std::size_t inside = 0;
        for (std::size_t i = 0; i < report.examples; ++i) {
            if (targets[i] >= iv.lower[i] && targets[i] <= iv.upper[i]) ++inside;
        }
        curve.levels.push_back(c);
        curve.observed.push_back(static_cast<double>(inside) / static_cast<double>(report.examples));
    }
    return curve;
}

/// Expected calibration error in percent.
inline double ece(const ReliabilityCurve& curve) {
    if (curve.levels.empty() || curve.levels.size() != curve.observed.size()) {
        throw DataError("ece: empty or malformed reliability curve");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < curve.levels.size(); ++i) s += std::abs(curve.observed[i] - curve.levels[i]);
    return 100.0 * s / static_cast<double>(curve.levels.size());
}

struct MetricBundle {
    double r2 = 0.0;
    double rmse = 0.0;
    double mae = 0.0;
    double ece = 0.0;
    double mean_pu = 0.0;  // mean of sqrt(PU), target units
    double norm_pu = 0.0;  // mean_pu / std(target)
    ReliabilityCurve curve;
};

inline MetricBundle evaluate(const UncertaintyReport& report, std::span<const double> targets,
                             std::span<const double> levels, IntervalKind kind = IntervalKind::gaussian) {
    MetricBundle m;
    m.r2 = r2(report.mean, targets);
    m.rmse = rmse(report.mean, targets);
    m.mae = mae(report.mean, targets);
    m.curve = reliability_curve(report, targets, levels, kind);
    m.ece = ece(m.curve);
    double s = 0.0;
    for (double pu : report.predictive) s += std::sqrt(pu);
    m.mean_pu = s / static_cast<double>(report.examples);
    const double mt = detail::mean_of(targets);
    double var = 0.0;
    for (double y : targets) var += (y - mt) * (y - mt);
    const double sd = std::sqrt(var / static_cast<double>(targets.size()));
    m.norm_pu = sd > 0 ? m.mean_pu / sd : 0.0;
    return m;
}

inline MetricBundle evaluate(const UncertaintyReport& report, std::span<const double> targets) {
    const auto levels = default_levels();
    return evaluate(report, targets, levels);
}

inline nlohmann::json to_json(const MetricBundle& m) {
    nlohmann::json coverage = nlohmann::json::array();
    for (std::size_t i = 0; i < m.curve.levels.size(); ++i) {
        coverage.push_back({{"level", m.curve.levels[i]}, {"observed", m.curve.observed[i]}});
    }
    return {{"r2", m.r2},           {"rmse", m.rmse},       {"mae", m.mae},         {"ece", m.ece},
            {"mean_pu", m.mean_pu}, {"norm_pu", m.norm_pu}, {"coverage", coverage}};
}

/// Plot-ready reliability table: level, expected, observed.
inline void write_curve_csv(const ReliabilityCurve& curve, std::ostream& os) {
    os << "level,expected,observed\n";
    for (std::size_t i = 0; i < curve.levels.size(); ++i) {
        os << detail::format_double(curve.levels[i]) << ',' << detail::format_double(curve.levels[i]) << ','
           << detail::format_double(curve.observed[i]) << '\n';
    }
}

}  // namespace mctd
