#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "mctd/trainer.hpp"
#include "mctd/uq.hpp"

using namespace mctd;

namespace {

using Draw = std::pair<std::vector<double>, std::vector<double>>;

McConfig mc(std::size_t samples, std::uint64_t seed = 0) {
    McConfig c;
    c.samples = samples;
    c.seed = seed;
    return c;
}

SeriesBatch random_batch(std::size_t n, std::size_t steps, std::size_t features, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    SeriesBatch b = SeriesBatch::empty(n, steps, features);
    for (auto& v : b.inputs) v = nd(rng);
    for (auto& y : b.targets) y = nd(rng);
    return b;
}

ModelConfig small_model(std::size_t features, double dropout = 0.0) {
    ModelConfig c;
    c.input_features = features;
    c.hidden_size = 6;
    c.dense_size = 6;
    c.dropout = dropout;
    c.seed = 3;
    return c;
}

MethodConfig td(double rate) {
    MethodConfig m;
    m.kind = Method::td;
    m.ratio = rate;
    return m;
}

}  // namespace

TEST(Aggregate, StubExample) {
    const UncertaintyReport r = mc_sample(1, mc(3), [](std::size_t l, Rng&) {
        return Draw{{static_cast<double>(l + 1)}, {0.5}};
    });
    EXPECT_DOUBLE_EQ(r.mean[0], 2.0);
    EXPECT_DOUBLE_EQ(r.epistemic[0], 1.0);
    EXPECT_DOUBLE_EQ(r.aleatoric[0], 0.5);
    EXPECT_DOUBLE_EQ(r.predictive[0], 1.5);
    EXPECT_EQ(r.samples, 3u);
}

TEST(Aggregate, DecompositionIdentityHoldsExactly) {
    const UncertaintyReport r = mc_sample(50, mc(7, 4), [](std::size_t, Rng& rng) {
        std::normal_distribution<double> nd(0.0, 1.0);
        Draw d;
        for (int i = 0; i < 50; ++i) {
            d.first.push_back(nd(rng));
            d.second.push_back(std::exp(nd(rng)));
        }
        return d;
    });
    for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(r.predictive[i], r.epistemic[i] + r.aleatoric[i]);
}

TEST(Aggregate, RejectsFewerThanTwoSamples) {
    EXPECT_THROW(mc_sample(1, mc(1), [](std::size_t, Rng&) { return Draw{{0.0}, {1.0}}; }), ConfigError);
    EXPECT_THROW(aggregate(1, 1, {0.0}, {1.0}), ConfigError);
}

TEST(Aggregate, NanSampleNamesIndex) {
    try {
        mc_sample(2, mc(5), [](std::size_t l, Rng&) {
            const double m = l == 3 ? std::numeric_limits<double>::quiet_NaN() : 0.0;
            return Draw{{0.0, m}, {1.0, 1.0}};
        });
        FAIL() << "NaN sample accepted";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("sample 3"), std::string::npos) << e.what();
    }
}

TEST(Aggregate, WrongSampleLengthRejected) {
    EXPECT_THROW(mc_sample(2, mc(2), [](std::size_t, Rng&) { return Draw{{0.0}, {1.0}}; }), ShapeError);
}

TEST(Aggregate, ConvergesAsSamplesDouble) {
    // Each example's samples are N(0, 1); var_EU from L and 2L draws of the
    // same stream should agree more closely as L grows.
    auto report = [](std::size_t samples) {
        return mc_sample(200, mc(samples, 9), [](std::size_t, Rng& rng) {
            std::normal_distribution<double> nd(0.0, 1.0);
            Draw d;
            for (int i = 0; i < 200; ++i) {
                d.first.push_back(nd(rng));
                d.second.push_back(1.0);
            }
            return d;
        });
    };
    auto gap = [&](std::size_t l) {
        const auto a = report(l), b = report(2 * l);
        double s = 0.0;
        for (std::size_t i = 0; i < 200; ++i) s += std::abs(a.epistemic[i] - b.epistemic[i]);
        return s / 200.0;
    };
    const double g_small = gap(10), g_mid = gap(100), g_large = gap(1000);
    EXPECT_LT(g_mid, g_small);
    EXPECT_LT(g_large, g_mid);
    EXPECT_LT(g_large, 0.05);
}

TEST(ReportFromGaussian, HasNoEpistemicPart) {
    const std::vector<double> m{1.0, 2.0}, v{0.5, 3.0};
    const UncertaintyReport r = report_from_gaussian(m, v);
    EXPECT_EQ(r.epistemic, (std::vector<double>{0.0, 0.0}));
    EXPECT_EQ(r.predictive, v);
    EXPECT_THROW(report_from_gaussian(m, std::vector<double>{1.0}), ShapeError);
}

TEST(McPredict, ZeroRateTemporalHardIsDeterministicPrediction) {
    SequenceRegressor model(small_model(2), td(0.0));
    const SeriesBatch b = random_batch(8, 5, 2, 1);
    McConfig cfg = mc(4, 2);
    cfg.source = Source::temporal_hard;
    const UncertaintyReport r = mc_predict(model, b, cfg);
    const Prediction p = model.predict(b, ForwardOptions{});
    for (std::size_t i = 0; i < b.size; ++i) {
        EXPECT_EQ(r.epistemic[i], 0.0);
        EXPECT_EQ(r.predictive[i], r.aleatoric[i]);
        EXPECT_EQ(r.mean[i], p.mean[i]);
        EXPECT_EQ(r.aleatoric[i], p.variance[i]);
    }
}

TEST(McPredict, TemporalDropoutProducesEpistemicSpread) {
    SequenceRegressor model(small_model(2), td(0.4));
    const UncertaintyReport r = mc_predict(model, random_batch(8, 6, 2, 1), mc(10, 2));
    for (double e : r.epistemic) EXPECT_GT(e, 0.0);
}

TEST(McPredict, HiddenDropoutSourceProducesEpistemicSpread) {
    SequenceRegressor model(small_model(2, 0.3));
    McConfig cfg = mc(10, 2);
    cfg.source = Source::hidden_dropout;
    const UncertaintyReport r = mc_predict(model, random_batch(8, 6, 2, 1), cfg);
    for (double e : r.epistemic) EXPECT_GT(e, 0.0);
}

TEST(McPredict, BatchNormStatisticsStayFrozen) {
    SequenceRegressor model(small_model(2), td(0.4));
    const auto before = model.batch_norm().running_mean;
    mc_predict(model, random_batch(8, 6, 2, 1), mc(5, 2));
    EXPECT_EQ(model.batch_norm().running_mean, before);
}

TEST(McPredict, Reproducible) {
    SequenceRegressor model(small_model(2), td(0.3));
    const SeriesBatch b = random_batch(6, 5, 2, 7);
    const UncertaintyReport a = mc_predict(model, b, mc(6, 11));
    const UncertaintyReport c = mc_predict(model, b, mc(6, 11));
    const UncertaintyReport d = mc_predict(model, b, mc(6, 12));
    EXPECT_EQ(a.sample_mean, c.sample_mean);
    EXPECT_EQ(a.predictive, c.predictive);
    EXPECT_NE(a.sample_mean, d.sample_mean);
}

TEST(McPredict, ChunkingDoesNotChangeTemporalSamples) {
    for (Method kind : {Method::td, Method::ctd}) {
        MethodConfig method = td(0.3);
        method.kind = kind;
        method.initial_rate = 0.3;
        SequenceRegressor model(small_model(2), method);
        const SeriesBatch b = random_batch(11, 4, 2, 7);
        McConfig whole = mc(4, 5), chunked = mc(4, 5);
        chunked.chunk = 3;
        EXPECT_EQ(mc_predict(model, b, whole).sample_mean, mc_predict(model, b, chunked).sample_mean)
            << to_string(kind);
    }
}

TEST(McPredict, RatioOverrideTakesPrecedence) {
    SequenceRegressor model(small_model(2), td(0.3));
    const SeriesBatch b = random_batch(6, 5, 2, 7);
    McConfig cfg = mc(4, 1);
    cfg.ratio = 0.0;
    for (double e : mc_predict(model, b, cfg).epistemic) EXPECT_EQ(e, 0.0);
}

TEST(McPredict, TrainedConcreteModelMatchesExternalRecomputation) {
    SyntheticSpec spec;
    spec.kind = GeneratorKind::mean_signal;
    spec.n = 300;
    spec.steps = 6;
    spec.features = 2;
    spec.seed = 3;
    const SeriesBatch data = generate(spec);
    std::vector<std::size_t> fit(240), val(60);
    std::iota(fit.begin(), fit.end(), std::size_t{0});
    std::iota(val.begin(), val.end(), std::size_t{240});
    MethodConfig method;
    method.kind = Method::ctd;
    method.initial_rate = 0.2;
    SequenceRegressor model(small_model(2), method);
    TrainConfig tc;
    tc.epochs = 3;
    tc.patience = 2;
    tc.method = method;
    tc.batch_size = 32;
    train(model, data.subset(fit), data.subset(val), tc);

    const SeriesBatch test = data.subset(val);
    const UncertaintyReport r = mc_predict(model, test, mc(12, 4));
    const std::size_t L = r.samples, n = r.examples;
    for (std::size_t i = 0; i < n; ++i) {
        double m = 0.0, v = 0.0;
        for (std::size_t l = 0; l < L; ++l) {
            m += r.sample_mean[l * n + i];
            v += r.sample_var[l * n + i];
        }
        m /= L;
        v /= L;
        double ss = 0.0;
        for (std::size_t l = 0; l < L; ++l) ss += std::pow(r.sample_mean[l * n + i] - m, 2);
        EXPECT_NEAR(r.mean[i], m, 1e-12);
        EXPECT_NEAR(r.predictive[i], ss / (L - 1) + v, 1e-12 * (1.0 + r.predictive[i]));
        EXPECT_GT(r.epistemic[i], 0.0);
    }
}

TEST(Interval, TwoSigmaRule) {
    const std::vector<double> m{0.0}, v{1.0};
    const Intervals iv = predictive_interval(report_from_gaussian(m, v), 0.9545);
    EXPECT_NEAR(iv.lower[0], -2.0, 1e-3);
    EXPECT_NEAR(iv.upper[0], 2.0, 1e-3);
}

TEST(Interval, SmallConfidenceCollapsesToMean) {
    const std::vector<double> m{1.5}, v{4.0};
    const Intervals iv = predictive_interval(report_from_gaussian(m, v), 1e-9);
    EXPECT_NEAR(iv.lower[0], 1.5, 1e-8);
    EXPECT_NEAR(iv.upper[0], 1.5, 1e-8);
}

TEST(Interval, ConfidenceOutsideUnitIntervalRejected) {
    const UncertaintyReport r = report_from_gaussian(std::vector<double>{0.0}, std::vector<double>{1.0});
    for (double c : {0.0, 1.0, -0.2, 1.5}) EXPECT_THROW(predictive_interval(r, c), ConfigError) << c;
    EXPECT_THROW(parse_interval_kind("student"), ConfigError);
}

TEST(Interval, MixtureOfIdenticalComponentsMatchesGaussian) {
    const UncertaintyReport r = aggregate(3, 1, {0.5, 0.5, 0.5}, {2.0, 2.0, 2.0});
    for (double c : {0.2, 0.8, 0.95}) {
        const Intervals g = predictive_interval(r, c, IntervalKind::gaussian);
        const Intervals m = predictive_interval(r, c, IntervalKind::mixture);
        EXPECT_NEAR(m.lower[0], g.lower[0], 1e-9);
        EXPECT_NEAR(m.upper[0], g.upper[0], 1e-9);
    }
}

TEST(Interval, MixtureBoundsHaveStatedMass) {
    const UncertaintyReport r = aggregate(2, 1, {-1.0, 3.0}, {0.25, 1.0});
    const Intervals iv = predictive_interval(r, 0.8, IntervalKind::mixture);
    auto cdf = [](double x) {
        auto phi = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
        return 0.5 * (phi((x + 1.0) / 0.5) + phi(x - 3.0));
    };
    EXPECT_NEAR(cdf(iv.lower[0]), 0.1, 1e-9);
    EXPECT_NEAR(cdf(iv.upper[0]), 0.9, 1e-9);
}

TEST(Interval, GaussianCoverageOnAnalyticData) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> m(100000), v(100000), y(100000);
    for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = nd(rng);
        v[i] = std::exp(nd(rng));
        y[i] = m[i] + std::sqrt(v[i]) * nd(rng);
    }
    const Intervals iv = predictive_interval(report_from_gaussian(m, v), 0.8);
    double inside = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) inside += iv.lower[i] <= y[i] && y[i] <= iv.upper[i];
    EXPECT_NEAR(inside / 1e5, 0.8, 0.01);
}

TEST(ReportIo, CsvHasOneRowPerExample) {
    const UncertaintyReport r = aggregate(2, 2, {1.0, 2.0, 3.0, 4.0}, {0.5, 0.5, 0.5, 0.5});
    std::ostringstream os;
    const std::vector<double> y{1.0, 2.0};
    write_report_csv(r, y, os);
    EXPECT_EQ(os.str(), "target,mu_eu,var_eu,au,pu\n1,2,2,0.5,2.5\n2,3,2,0.5,2.5\n");
    EXPECT_THROW(write_report_csv(r, std::vector<double>{1.0}, os), ShapeError);
    const nlohmann::json s = report_summary(r);
    EXPECT_DOUBLE_EQ(s["mean_pu"].get<double>(), 2.5);
}

TEST(McConfig, JsonRoundTrip) {
    McConfig c = mc(7, 3);
    c.source = Source::hidden_dropout;
    c.ratio = 0.25;
    EXPECT_EQ(nlohmann::json(c).get<McConfig>(), c);
    EXPECT_THROW(parse_source("gaussian"), ConfigError);
}
