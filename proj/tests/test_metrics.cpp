#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "mctd/metrics.hpp"

using namespace mctd;

namespace {

struct GaussianOracle {
    std::vector<double> mean, var, target;
};

// Targets drawn exactly from N(mean, var): a perfectly calibrated predictor.
GaussianOracle gaussian_oracle(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    GaussianOracle o;
    for (std::size_t i = 0; i < n; ++i) {
        o.mean.push_back(2.0 * nd(rng));
        o.var.push_back(0.1 + std::exp(nd(rng)));
        o.target.push_back(o.mean.back() + std::sqrt(o.var.back()) * nd(rng));
    }
    return o;
}

UncertaintyReport constant_pu_report(const std::vector<double>& mean, double pu) {
    return report_from_gaussian(mean, std::vector<double>(mean.size(), pu));
}

}  // namespace

TEST(PointMetrics, SmallExample) {
    const std::vector<double> pred{1, 2}, target{2, 4};
    EXPECT_DOUBLE_EQ(rmse(pred, target), std::sqrt(2.5));
    EXPECT_DOUBLE_EQ(mae(pred, target), 1.5);
    EXPECT_DOUBLE_EQ(r2(pred, target), -1.5);
}

TEST(PointMetrics, PerfectPredictions) {
    const std::vector<double> y{0.5, -1.0, 3.0, 2.0};
    EXPECT_EQ(r2(y, y), 1.0);
    EXPECT_EQ(rmse(y, y), 0.0);
    EXPECT_EQ(mae(y, y), 0.0);
}

TEST(PointMetrics, MeanPredictorHasZeroR2) {
    const std::vector<double> y{1.0, 4.0, -2.0, 5.0};
    const std::vector<double> pred(4, 2.0);
    EXPECT_NEAR(r2(pred, y), 0.0, 1e-15);
}

TEST(PointMetrics, ErrorsAreReported) {
    const std::vector<double> c{3.0, 3.0, 3.0};
    EXPECT_THROW(r2(std::vector<double>{1, 2, 3}, c), DataError);
    EXPECT_THROW(rmse(std::vector<double>{1, 2}, c), ShapeError);
    EXPECT_THROW(mae(std::vector<double>{1}, std::vector<double>{1}), DataError);
}

TEST(PointMetrics, RmseDominatesMae) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> p(20), y(20);
        for (int i = 0; i < 20; ++i) {
            p[i] = nd(rng);
            y[i] = nd(rng);
        }
        EXPECT_GE(rmse(p, y), mae(p, y));
        EXPECT_GE(mae(p, y), 0.0);
        EXPECT_LE(r2(p, y), 1.0);
    }
}

TEST(RankCorrelation, MonotoneRelationships) {
    const std::vector<double> a{1.0, 5.0, 2.0, 8.0, 3.0};
    std::vector<double> up, down;
    for (double v : a) {
        up.push_back(std::exp(v));
        down.push_back(-v * v * v);
    }
    EXPECT_NEAR(spearman(a, up), 1.0, 1e-12);
    EXPECT_NEAR(spearman(a, down), -1.0, 1e-12);
    EXPECT_NEAR(pearson(a, a), 1.0, 1e-12);
    EXPECT_THROW(pearson(a, std::vector<double>(5, 1.0)), DataError);
}

TEST(RankCorrelation, TiesShareAverageRank) {
    const std::vector<double> v{3.0, 1.0, 3.0, 2.0};
    const auto r = ranks(v);
    EXPECT_EQ(r[0], r[2]);
    EXPECT_LT(r[1], r[3]);
    EXPECT_LT(r[3], r[0]);
    EXPECT_DOUBLE_EQ(r[0] - r[3], 1.5);
}

TEST(Reliability, HugeUncertaintyCoversEverything) {
    const std::vector<double> y{1.0, -3.0, 7.0};
    const auto curve = reliability_curve(constant_pu_report({0.0, 0.0, 0.0}, 1e12), y, default_levels());
    for (double o : curve.observed) EXPECT_EQ(o, 1.0);
}

TEST(Reliability, VanishingUncertaintyCoversNothing) {
    const std::vector<double> y{1.0, -3.0, 7.0};
    const auto curve = reliability_curve(constant_pu_report({0.0, 0.0, 0.0}, 1e-300), y, default_levels());
    for (double o : curve.observed) EXPECT_EQ(o, 0.0);
}

TEST(Reliability, GaussianOracleIsCalibrated) {
    const GaussianOracle o = gaussian_oracle(100000, 1);
    const auto curve = reliability_curve(report_from_gaussian(o.mean, o.var), o.target, default_levels());
    for (std::size_t i = 0; i < curve.levels.size(); ++i) {
        EXPECT_NEAR(curve.observed[i], curve.levels[i], 0.01) << "level " << curve.levels[i];
    }
}

TEST(Reliability, EmptyReportRejected) {
    EXPECT_THROW(reliability_curve(UncertaintyReport{}, std::vector<double>{}, default_levels()), DataError);
}

TEST(Reliability, CoverageMonotoneInLevel) {
    const GaussianOracle o = gaussian_oracle(2000, 2);
    std::vector<double> inflated = o.var;
    for (double& v : inflated) v *= 0.3;
    std::vector<double> fine;
    for (int i = 1; i < 100; ++i) fine.push_back(i / 100.0);
    const auto curve = reliability_curve(report_from_gaussian(o.mean, inflated), o.target, fine);
    for (std::size_t i = 1; i < curve.observed.size(); ++i) EXPECT_GE(curve.observed[i], curve.observed[i - 1]);
}

TEST(Reliability, ScalingUncertaintyUpWeaklyIncreasesCoverage) {
    const GaussianOracle o = gaussian_oracle(2000, 3);
    const auto base = reliability_curve(report_from_gaussian(o.mean, o.var), o.target, default_levels());
    for (double s : {1.1, 2.0, 10.0}) {
        std::vector<double> scaled = o.var;
        for (double& v : scaled) v *= s;
        const auto curve = reliability_curve(report_from_gaussian(o.mean, scaled), o.target, default_levels());
        for (std::size_t i = 0; i < curve.observed.size(); ++i) EXPECT_GE(curve.observed[i], base.observed[i]);
    }
}

TEST(Ece, PerfectCurveIsZero) {
    EXPECT_EQ(ece(ReliabilityCurve{{0.1, 0.5, 0.9}, {0.1, 0.5, 0.9}}), 0.0);
}

TEST(Ece, FullCoverageOnDefaultGridIsFifty) {
    const auto levels = default_levels();
    EXPECT_NEAR(ece(ReliabilityCurve{levels, std::vector<double>(levels.size(), 1.0)}), 50.0, 1e-12);
}

TEST(Ece, EmptyCurveRejected) { EXPECT_THROW(ece(ReliabilityCurve{}), DataError); }

TEST(Ece, GaussianOracleBelowTwoPercent) {
    const GaussianOracle o = gaussian_oracle(10000, 5);
    EXPECT_LT(evaluate(report_from_gaussian(o.mean, o.var), o.target).ece, 2.0);
}

TEST(Ece, InvariantUnderShuffling) {
    GaussianOracle o = gaussian_oracle(3000, 6);
    const double before = evaluate(report_from_gaussian(o.mean, o.var), o.target).ece;
    std::vector<std::size_t> perm(o.mean.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(7));
    GaussianOracle s;
    for (std::size_t i : perm) {
        s.mean.push_back(o.mean[i]);
        s.var.push_back(o.var[i]);
        s.target.push_back(o.target[i]);
    }
    EXPECT_EQ(evaluate(report_from_gaussian(s.mean, s.var), s.target).ece, before);
}

TEST(Evaluate, BundleFields) {
    const std::vector<double> mean{1.0, 2.0, 3.0, 4.0}, y{1.0, 3.0, 3.0, 5.0};
    const MetricBundle m = evaluate(constant_pu_report(mean, 4.0), y);
    EXPECT_DOUBLE_EQ(m.mean_pu, 2.0);
    const double sd = std::sqrt(((1 - 3.0) * (1 - 3.0) + 0 + 0 + 4.0) / 4.0);
    EXPECT_DOUBLE_EQ(m.norm_pu, 2.0 / sd);
    EXPECT_DOUBLE_EQ(m.rmse, std::sqrt(0.5));
    EXPECT_EQ(m.curve.levels, default_levels());
    const nlohmann::json j = to_json(m);
    EXPECT_EQ(j["coverage"].size(), 9u);
}

TEST(Evaluate, CurveCsvLayout) {
    std::ostringstream os;
    write_curve_csv(ReliabilityCurve{{0.5}, {0.25}}, os);
    EXPECT_EQ(os.str(), "level,expected,observed\n0.5,0.5,0.25\n");
}
