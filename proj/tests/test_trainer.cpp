#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "mctd/trainer.hpp"

using namespace mctd;

namespace {

std::vector<std::size_t> range(std::size_t from, std::size_t to) {
    std::vector<std::size_t> r(to - from);
    std::iota(r.begin(), r.end(), from);
    return r;
}

SeriesBatch synthetic(GeneratorKind kind, std::size_t n, std::size_t steps, std::size_t features, std::uint64_t seed,
                      double noise = 0.1) {
    SyntheticSpec s;
    s.kind = kind;
    s.n = n;
    s.steps = steps;
    s.features = features;
    s.noise_std = noise;
    s.seed = seed;
    return generate(s);
}

ModelConfig model_config(std::size_t features, std::size_t hidden = 8) {
    ModelConfig c;
    c.input_features = features;
    c.hidden_size = hidden;
    c.dense_size = hidden;
    c.seed = 1;
    return c;
}

TrainConfig quick_train(std::size_t epochs, Method kind = Method::none) {
    TrainConfig t;
    t.epochs = epochs;
    t.patience = std::min<std::size_t>(5, epochs - 1);
    t.batch_size = 32;
    t.method.kind = kind;
    t.seed = 2;
    return t;
}

Experiment small_experiment() {
    Experiment e;
    e.model = model_config(2, 6);
    e.train = quick_train(3);
    e.train.patience = 2;
    e.mc.samples = 4;
    e.mc.seed = 2;
    return e;
}

struct Split {
    SeriesBatch fit, val;
};

Split split(const SeriesBatch& data, std::size_t n_fit) {
    return {data.subset(range(0, n_fit)), data.subset(range(n_fit, data.size))};
}

std::vector<double> flat_parameters(SequenceRegressor& m) {
    std::vector<double> out;
    for (const auto& p : m.parameters()) out.insert(out.end(), p.tensor.values().begin(), p.tensor.values().end());
    return out;
}

}  // namespace

TEST(EarlyStopping, CountsNonImprovingEpochs) {
    EarlyStopping s(2);
    EXPECT_TRUE(s.update(1.0));
    EXPECT_FALSE(s.update(1.5));
    EXPECT_FALSE(s.should_stop());
    EXPECT_TRUE(s.update(0.5));
    EXPECT_FALSE(s.update(0.5));
    EXPECT_FALSE(s.update(0.7));
    EXPECT_TRUE(s.should_stop());
    EXPECT_EQ(s.best(), 0.5);
    EXPECT_EQ(s.best_epoch(), 2u);
}

TEST(TrainConfig, ValidationAndJson) {
    TrainConfig t = quick_train(10, Method::ctd);
    t.rate_learning_rate = 0.01;
    t.loss = LossKind::mse;
    EXPECT_EQ(nlohmann::json(t).get<TrainConfig>(), t);
    t.patience = 10;
    EXPECT_THROW(t.validate(), ConfigError);
    t = quick_train(10);
    t.batch_size = 0;
    EXPECT_THROW(t.validate(), ConfigError);
    EXPECT_THROW(parse_loss("huber"), ConfigError);
}

TEST(Train, StopsAfterPatiencePlusOneWorseningEpochs) {
    const auto [fit, val] = split(synthetic(GeneratorKind::mean_signal, 120, 4, 1, 1), 90);
    SequenceRegressor m(model_config(1));
    TrainConfig t = quick_train(50);
    t.patience = 3;
    TrainHooks hooks;
    hooks.validation_override = [](std::size_t epoch, double) { return 1.0 + static_cast<double>(epoch); };
    const RunRecord r = train(m, fit, val, t, hooks);
    EXPECT_EQ(r.epochs_run, 4u);
    EXPECT_TRUE(r.stopped_early);
    EXPECT_EQ(r.best_epoch, 0u);
    EXPECT_EQ(r.val_loss.size(), 4u);
}

TEST(Train, RestoresBestValidationEpoch) {
    const auto [fit, val] = split(synthetic(GeneratorKind::trend, 300, 6, 1, 2), 240);
    SequenceRegressor m(model_config(1));
    TrainConfig t = quick_train(12);
    t.learning_rate = 0.02;
    const RunRecord r = train(m, fit, val, t);
    const double best = *std::min_element(r.val_loss.begin(), r.val_loss.end());
    EXPECT_EQ(r.val_loss[r.best_epoch], best);
    EXPECT_EQ(validation_loss(m, val, t.loss), best);
}

TEST(Train, NonFiniteValidationLossIsNumericError) {
    const auto [fit, val] = split(synthetic(GeneratorKind::mean_signal, 80, 4, 1, 1), 60);
    SequenceRegressor m(model_config(1));
    TrainHooks hooks;
    hooks.validation_override = [](std::size_t epoch, double v) {
        return epoch == 1 ? std::numeric_limits<double>::quiet_NaN() : v;
    };
    try {
        train(m, fit, val, quick_train(5), hooks);
        FAIL() << "NaN validation loss accepted";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
    }
}

TEST(Train, RunawayLearningRateIsNumericError) {
    const auto [fit, val] = split(synthetic(GeneratorKind::mean_signal, 80, 4, 1, 1), 60);
    SequenceRegressor m(model_config(1));
    TrainConfig t = quick_train(3);
    t.learning_rate = 1e300;
    EXPECT_THROW(train(m, fit, val, t), NumericError);
}

TEST(Train, RejectsMismatchedMethodAndEmptySplits) {
    const auto [fit, val] = split(synthetic(GeneratorKind::mean_signal, 40, 4, 1, 1), 30);
    SequenceRegressor m(model_config(1));
    EXPECT_THROW(train(m, fit, val, quick_train(3, Method::ctd)), ConfigError);
    EXPECT_THROW(train(m, fit, fit.subset(std::vector<std::size_t>{}), quick_train(3)), DataError);
}

TEST(Train, ZeroRateTemporalDropoutEqualsNoDropout) {
    const auto [fit, val] = split(synthetic(GeneratorKind::mean_signal, 150, 5, 2, 3), 120);
    TrainConfig none = quick_train(4);
    TrainConfig td0 = quick_train(4, Method::td);
    td0.method.ratio = 0.0;
    SequenceRegressor a(model_config(2), none.method), b(model_config(2), td0.method);
    const RunRecord ra = train(a, fit, val, none);
    const RunRecord rb = train(b, fit, val, td0);
    EXPECT_EQ(ra.train_loss, rb.train_loss);
    EXPECT_EQ(ra.val_loss, rb.val_loss);
}

TEST(Train, BitwiseReproducible) {
    const auto [fit, val] = split(synthetic(GeneratorKind::trend, 150, 5, 2, 3), 120);
    TrainConfig t = quick_train(3, Method::ctd);
    SequenceRegressor a(model_config(2), t.method), b(model_config(2), t.method);
    const RunRecord ra = train(a, fit, val, t);
    const RunRecord rb = train(b, fit, val, t);
    EXPECT_EQ(ra.train_loss, rb.train_loss);
    EXPECT_EQ(ra.rate, rb.rate);
    EXPECT_EQ(flat_parameters(a), flat_parameters(b));
}

TEST(Train, LinearTaskIsLearned) {
    const auto [fit, val] = split(synthetic(GeneratorKind::mean_signal, 1200, 3, 1, 4, 0.01), 1000);
    SequenceRegressor m(model_config(1, 16));
    TrainConfig t = quick_train(100);
    t.loss = LossKind::mse;
    t.learning_rate = 0.003;
    train(m, fit, val, t);
    const Prediction p = m.predict(val, ForwardOptions{});
    const std::vector<double> mu(p.mean.values().begin(), p.mean.values().end());
    EXPECT_GT(r2(mu, val.targets), 0.99);
}

TEST(Train, ConcreteRateStaysInUnitIntervalAndFalls) {
    const auto [fit, val] = split(synthetic(GeneratorKind::mean_signal, 600, 8, 2, 5), 480);
    TrainConfig t = quick_train(15, Method::ctd);
    t.learning_rate = 0.005;
    SequenceRegressor m(model_config(2), t.method);
    const RunRecord r = train(m, fit, val, t);
    ASSERT_EQ(r.rate.size(), r.epochs_run);
    for (double a : r.rate) {
        EXPECT_GT(a, 0.0);
        EXPECT_LT(a, 1.0);
    }
    EXPECT_LT(m.concrete().rate(), 0.5);
}

TEST(Train, TargetScaleComesFromTrainingSplit) {
    const auto [fit, val] = split(synthetic(GeneratorKind::mean_signal, 60, 4, 1, 6), 40);
    SequenceRegressor m(model_config(1));
    train(m, fit, val, quick_train(2));
    const double mean = std::accumulate(fit.targets.begin(), fit.targets.end(), 0.0) / 40.0;
    EXPECT_NEAR(m.target_mean(), mean, 1e-12);
}

TEST(Holdout, PartitionsDeterministically) {
    const Holdout h = holdout(50, 0.2, 3);
    EXPECT_EQ(h.test.size(), 10u);
    EXPECT_EQ(h.train.size(), 40u);
    std::set<std::size_t> all(h.train.begin(), h.train.end());
    all.insert(h.test.begin(), h.test.end());
    EXPECT_EQ(all.size(), 50u);
    EXPECT_EQ(holdout(50, 0.2, 3).test, h.test);
    EXPECT_NE(holdout(50, 0.2, 4).test, h.test);
    EXPECT_THROW(holdout(50, 1.0, 3), ConfigError);
    EXPECT_THROW(holdout(1, 0.5, 3), DataError);
}

TEST(Experiment, FeatureMismatchAtEvaluation) {
    const SeriesBatch data = synthetic(GeneratorKind::mean_signal, 60, 4, 2, 1);
    Experiment e = small_experiment();
    auto res = run_experiment(e, data.subset(range(0, 40)), data.subset(range(40, 60)));
    const SeriesBatch other = synthetic(GeneratorKind::mean_signal, 10, 4, 3, 1);
    EXPECT_THROW(evaluate_model(res.model, other, e.mc, e.levels), DataError);
}

TEST(Sweep, ZeroRatioReducesToNoDropout) {
    const SeriesBatch data = synthetic(GeneratorKind::mean_signal, 150, 5, 2, 7);
    const Experiment e = small_experiment();
    const std::vector<double> ratios{0.0};
    const auto rows = ratio_sweep(ratios, e, data);
    const Holdout h = holdout(data.size, e.test_fraction, e.train.seed, Stream::folds);
    const auto plain = run_experiment(e, data.subset(h.train), data.subset(h.test));
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].record.train_loss, plain.record.train_loss);
    EXPECT_EQ(rows[0].metrics.r2, plain.eval.metrics.r2);
    EXPECT_EQ(rows[0].metrics.ece, plain.eval.metrics.ece);
}

TEST(Sweep, DeterministicAndValidated) {
    const SeriesBatch data = synthetic(GeneratorKind::mean_signal, 120, 5, 2, 8);
    const Experiment e = small_experiment();
    const std::vector<double> ratios{0.2, 0.6};
    const auto a = ratio_sweep(ratios, e, data), b = ratio_sweep(ratios, e, data);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(a[i].ratio, ratios[i]);
        EXPECT_EQ(a[i].metrics.r2, b[i].metrics.r2);
        EXPECT_EQ(a[i].metrics.mean_pu, b[i].metrics.mean_pu);
    }
    const std::vector<double> bad{1.0};
    EXPECT_THROW(ratio_sweep(bad, e, data), ConfigError);
}

TEST(Kfold, TwoFoldsReportTwoRatesAndAggregate) {
    const SeriesBatch data = synthetic(GeneratorKind::mean_signal, 120, 5, 2, 9);
    Experiment e = small_experiment();
    e.train.method.kind = Method::ctd;
    const KfoldResult r = run_kfold(e, data, 2);
    ASSERT_EQ(r.folds.size(), 2u);
    ASSERT_TRUE(r.folds[0].rate && r.folds[1].rate);
    EXPECT_NE(*r.folds[0].rate, *r.folds[1].rate);
    const double a = r.folds[0].metrics.r2, b = r.folds[1].metrics.r2;
    EXPECT_DOUBLE_EQ(r.mean.r2, (a + b) / 2.0);
    EXPECT_DOUBLE_EQ(r.std.r2, std::abs(a - b) / std::sqrt(2.0));
    EXPECT_EQ(r.plan.k, 2u);
    EXPECT_THROW(run_kfold(e, data, 1), ConfigError);
}
