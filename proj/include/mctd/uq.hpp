#pragma once

// Monte Carlo inference. L stochastic forward passes are drawn with exactly one
// source of randomness left active (temporal hard masks, temporal Concrete
// masks, or hidden-layer dropout); batch norm stays frozen. Per example:
//
//   mu_EU  = mean_l mu_l
//   var_EU = sum_l (mu_l - mu_EU)^2 / (L - 1)
//   AU     = mean_l var_l
//   PU     = var_EU + AU        (law of total variance)

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "json.hpp"
#include "mctd/data.hpp"
#include "mctd/error.hpp"
#include "mctd/nn.hpp"
#include "mctd/rng.hpp"
#include "mctd/tempdrop.hpp"

namespace mctd {

enum class Source { temporal_hard, temporal_concrete, hidden_dropout };

inline std::string to_string(Source s) {
    switch (s) {
        case Source::temporal_hard: return "temporal_hard";
        case Source::temporal_concrete: return "temporal_concrete";
        case Source::hidden_dropout: return "hidden_dropout";
    }
    return "?";
}

inline Source parse_source(std::string_view s) {
    if (s == "temporal_hard") return Source::temporal_hard;
    if (s == "temporal_concrete") return Source::temporal_concrete;
    if (s == "hidden_dropout") return Source::hidden_dropout;
    throw ConfigError("mc.source: unknown source '" + std::string(s) +
                      "' (expected temporal_hard, temporal_concrete or hidden_dropout)");
}

/// The MC source that matches how a model was trained.
inline Source default_source(Method m) {
    switch (m) {
        case Method::ctd: return Source::temporal_concrete;
        case Method::hidden_dropout: return Source::hidden_dropout;
        default: return Source::temporal_hard;
    }
}

struct McConfig {
    std::size_t samples = 20;
    std::optional<Source> source;   // unset: follow the model's training method
    std::optional<double> ratio;    // temporal_hard rate override
    std::uint64_t seed = 0;
    std::size_t chunk = 1024;       // examples per forward pass

    void validate() const {
        if (samples < 2) {
            throw ConfigError("mc.samples must be at least 2 (variance needs two samples), got " + std::to_string(samples));
        }
        if (ratio) TdConfig{*ratio, 0}.validate();
        if (chunk < 1) throw ConfigError("mc.chunk must be positive");
    }

    bool operator==(const McConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const McConfig& c) {
    j = {{"samples", c.samples}, {"seed", c.seed}, {"chunk", c.chunk}};
    j["source"] = c.source ? nlohmann::json(to_string(*c.source)) : nlohmann::json(nullptr);
    j["ratio"] = c.ratio ? nlohmann::json(*c.ratio) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, McConfig& c) {
    McConfig d;
    c.samples = j.value("samples", d.samples);
    c.seed = j.value("seed", d.seed);
    c.chunk = j.value("chunk", d.chunk);
    c.source.reset();
    c.ratio.reset();
    if (j.contains("source") && !j["source"].is_null()) c.source = parse_source(j["source"].get<std::string>());
    if (j.contains("ratio") && !j["ratio"].is_null()) c.ratio = j["ratio"].get<double>();
}

struct UncertaintyReport {
    std::size_t examples = 0;
    std::size_t samples = 0;
    std::vector<double> mean;        // mu_EU
    std::vector<double> epistemic;   // var_EU (unbiased)
    std::vector<double> aleatoric;   // AU
    std::vector<double> predictive;  // PU
    // Raw draws, sample-major: [l * examples + i].
    std::vector<double> sample_mean;
    std::vector<double> sample_var;
};

/// Reduces raw sample-major draws into a report.
inline UncertaintyReport aggregate(std::size_t samples, std::size_t examples, std::vector<double> sample_mean,
                                   std::vector<double> sample_var) {
    if (samples < 2) throw ConfigError("aggregate: need at least 2 samples, got " + std::to_string(samples));
    if (sample_mean.size() != samples * examples || sample_var.size() != samples * examples) {
        throw ShapeError("aggregate: raw sample buffers do not hold samples x examples values");
    }
    for (std::size_t l = 0; l < samples; ++l) {
        for (std::size_t i = 0; i < examples; ++i) {
            const double m = sample_mean[l * examples + i], v = sample_var[l * examples + i];
            if (!std::isfinite(m) || !std::isfinite(v)) {
                throw NumericError("MC sample " + std::to_string(l) + " produced a non-finite prediction");
            }
        }
    }
    UncertaintyReport r;
    r.examples = examples;
    r.samples = samples;
    r.mean.assign(examples, 0.0);
    r.epistemic.assign(examples, 0.0);
    r.aleatoric.assign(examples, 0.0);
    r.predictive.assign(examples, 0.0);
    const double L = static_cast<double>(samples);
    for (std::size_t i = 0; i < examples; ++i) {
        double sm = 0.0, sv = 0.0;
        for (std::size_t l = 0; l < samples; ++l) {
            sm += sample_mean[l * examples + i];
            sv += sample_var[l * examples + i];
        }
        const double mu = sm / L;
        double ss = 0.0;
        for (std::size_t l = 0; l < samples; ++l) {
            const double d = sample_mean[l * examples + i] - mu;
            ss += d * d;
        }
        r.mean[i] = mu;
        r.epistemic[i] = ss / (L - 1.0);
        r.aleatoric[i] = sv / L;
        r.predictive[i] = r.epistemic[i] + r.aleatoric[i];
    }
    r.sample_mean = std::move(sample_mean);
    r.sample_var = std::move(sample_var);
    return r;
}

/// Report for a known Gaussian predictive (no epistemic part).
inline UncertaintyReport report_from_gaussian(std::span<const double> mean, std::span<const double> variance) {
    if (mean.size() != variance.size()) throw ShapeError("report_from_gaussian: length mismatch");
    UncertaintyReport r;
    r.examples = mean.size();
    r.samples = 1;
    r.mean.assign(mean.begin(), mean.end());
    r.aleatoric.assign(variance.begin(), variance.end());
    r.epistemic.assign(mean.size(), 0.0);
    r.predictive = r.aleatoric;
    r.sample_mean = r.mean;
    r.sample_var = r.aleatoric;
    return r;
}

/// Generic driver: draw(l, rng) returns (means, variances) for every example.
template <class Draw>
UncertaintyReport mc_sample(std::size_t examples, const McConfig& cfg, Draw&& draw) {
    cfg.validate();
    std::vector<double> sm, sv;
    sm.reserve(cfg.samples * examples);
    sv.reserve(cfg.samples * examples);
    for (std::size_t l = 0; l < cfg.samples; ++l) {
        Rng rng = make_rng(cfg.seed, Stream::monte_carlo, l);
        auto [m, v] = draw(l, rng);
        if (m.size() != examples || v.size() != examples) {
            throw ShapeError("mc_sample: sample " + std::to_string(l) + " returned the wrong number of predictions");
        }
        sm.insert(sm.end(), m.begin(), m.end());
        sv.insert(sv.end(), v.begin(), v.end());
    }
    return aggregate(cfg.samples, examples, std::move(sm), std::move(sv));
}

/// One stochastic pass of `model` over `batch` with the given source active.
inline std::pair<std::vector<double>, std::vector<double>> stochastic_pass(SequenceRegressor& model,
                                                                          const SeriesBatch& batch, Source source,
                                                                          double hard_ratio, Rng& rng,
                                                                          std::size_t chunk) {
    NoGradGuard no_grad;
    std::vector<double> means, vars;
    means.reserve(batch.size);
    vars.reserve(batch.size);
    for (std::size_t start = 0; start < batch.size; start += chunk) {
        const std::size_t n = std::min(chunk, batch.size - start);
        std::vector<std::size_t> rows(n);
        for (std::size_t i = 0; i < n; ++i) rows[i] = start + i;
        SeriesBatch holder;
        if (n != batch.size) holder = batch.subset(rows);
        const SeriesBatch& part = n == batch.size ? batch : holder;
        ForwardOptions opt;
        opt.mode = Mode::eval;
        opt.rng = &rng;
        std::optional<DropoutMask> mask;
        switch (source) {
            case Source::temporal_hard:
                if (hard_ratio > 0.0) mask = sample_hard_mask(TdConfig{hard_ratio, 0}, n, batch.steps, rng);
                break;
            case Source::temporal_concrete:
                mask = sample_soft_mask(model.concrete(), n, batch.steps, rng);
                if (model.method().harden_at_inference) mask = harden(*mask);
                break;
            case Source::hidden_dropout: opt.hidden_dropout = true; break;
        }
        if (mask) opt.input_mask = &*mask;
        const Prediction p = model.predict(part, opt);
        means.insert(means.end(), p.mean.values().begin(), p.mean.values().end());
        vars.insert(vars.end(), p.variance.values().begin(), p.variance.values().end());
    }
    return {std::move(means), std::move(vars)};
}

inline UncertaintyReport mc_predict(SequenceRegressor& model, const SeriesBatch& batch, const McConfig& cfg) {
    cfg.validate();
    const Source source = cfg.source.value_or(default_source(model.method().kind));
    double ratio = 0.0;
    if (cfg.ratio) {
        ratio = *cfg.ratio;
    } else if (model.method().kind == Method::td) {
        ratio = model.method().mc_ratio();
    }
    return mc_sample(batch.size, cfg, [&](std::size_t, Rng& rng) {
        return stochastic_pass(model, batch, source, ratio, rng, cfg.chunk);
    });
}

// ---------------------------------------------------------------------------
// Predictive intervals

enum class IntervalKind { gaussian, mixture };

inline std::string to_string(IntervalKind k) { return k == IntervalKind::gaussian ? "gaussian" : "mixture"; }

inline IntervalKind parse_interval_kind(std::string_view s) {
    if (s == "gaussian") return IntervalKind::gaussian;
    if (s == "mixture") return IntervalKind::mixture;
    throw ConfigError("interval: unknown kind '" + std::string(s) + "' (expected gaussian or mixture)");
}

struct Intervals {
    std::vector<double> lower;
    std::vector<double> upper;
};

inline double normal_quantile(double p) {
    return boost::math::quantile(boost::math::normal_distribution<double>(0.0, 1.0), p);
}

namespace detail {

// Quantile of an equal-weight Gaussian mixture by bisection on its CDF.
inline double mixture_quantile(std::span<const double> mu, std::span<const double> var, double p) {
    const boost::math::normal_distribution<double> unit(0.0, 1.0);
    double lo = mu[0], hi = mu[0];
    for (std::size_t l = 0; l < mu.size(); ++l) {
        const double sd = std::sqrt(var[l]);
        lo = std::min(lo, mu[l] - 40.0 * sd);
        hi = std::max(hi, mu[l] + 40.0 * sd);
    }
    auto cdf = [&](double x) {
        double s = 0.0;
        for (std::size_t l = 0; l < mu.size(); ++l) {
            const double sd = std::sqrt(var[l]);
            s += sd > 0 ? boost::math::cdf(unit, (x - mu[l]) / sd) : (x >= mu[l] ? 1.0 : 0.0);
        }
        return s / static_cast<double>(mu.size());
    };
    for (int it = 0; it < 200 && hi - lo > 1e-12 * std::max(1.0, std::abs(hi)); ++it) {
        const double mid = 0.5 * (lo + hi);
        (cdf(mid) < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace detail

/// Central interval at confidence c: mu_EU +/- z_{(1+c)/2} sqrt(PU), or the
/// equal-tailed quantiles of the Gaussian mixture over the raw samples.
inline Intervals predictive_interval(const UncertaintyReport& report, double confidence,
                                     IntervalKind kind = IntervalKind::gaussian) {
    if (!(confidence > 0.0 && confidence < 1.0)) {
        throw ConfigError("predictive_interval: confidence must lie in (0, 1), got " + std::to_string(confidence));
    }
    Intervals out;
    out.lower.resize(report.examples);
    out.upper.resize(report.examples);
    if (kind == IntervalKind::gaussian) {
        const double z = normal_quantile(0.5 * (1.0 + confidence));
        for (std::size_t i = 0; i < report.examples; ++i) {
            const double half = z * std::sqrt(report.predictive[i]);
            out.lower[i] = report.mean[i] - half;
            out.upper[i] = report.mean[i] + half;
        }
        return out;
    }
    std::vector<double> mu(report.samples), var(report.samples);
    for (std::size_t i = 0; i < report.examples; ++i) {
        for (std::size_t l = 0; l < report.samples; ++l) {
            mu[l] = report.sample_mean[l * report.examples + i];
            var[l] = report.sample_var[l * report.examples + i];
        }
        out.lower[i] = detail::mixture_quantile(mu, var, 0.5 * (1.0 - confidence));
        out.upper[i] = detail::mixture_quantile(mu, var, 0.5 * (1.0 + confidence));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization

/// One row per example: target, mu_eu, var_eu, au, pu.
inline void write_report_csv(const UncertaintyReport& report, std::span<const double> targets, std::ostream& os) {
    if (targets.size() != report.examples) throw ShapeError("write_report_csv: target count differs from report");
    os << "target,mu_eu,var_eu,au,pu\n";
    for (std::size_t i = 0; i < report.examples; ++i) {
        os << detail::format_double(targets[i]) << ',' << detail::format_double(report.mean[i]) << ','
           << detail::format_double(report.epistemic[i]) << ',' << detail::format_double(report.aleatoric[i]) << ','
           << detail::format_double(report.predictive[i]) << '\n';
    }
}

inline nlohmann::json report_summary(const UncertaintyReport& report) {
    auto avg = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    return {{"examples", report.examples},
            {"samples", report.samples},
            {"mean_var_eu", avg(report.epistemic)},
            {"mean_au", avg(report.aleatoric)},
            {"mean_pu", avg(report.predictive)}};
}

}  // namespace mctd
