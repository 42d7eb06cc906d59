#pragma once

// Training loop and experiment orchestration: minibatch Adam with the
// configured temporal mask in front of the encoder, early stopping on a
// deterministic validation loss, ratio sweeps and k-fold runs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mctd/data.hpp"
#include "mctd/error.hpp"
#include "mctd/metrics.hpp"
#include "mctd/nn.hpp"
#include "mctd/rng.hpp"
#include "mctd/tempdrop.hpp"
#include "mctd/uq.hpp"

namespace mctd {

enum class LossKind { nll, mse };

inline std::string to_string(LossKind k) { return k == LossKind::nll ? "nll" : "mse"; }

inline LossKind parse_loss(std::string_view s) {
    if (s == "nll") return LossKind::nll;
    if (s == "mse") return LossKind::mse;
    throw ConfigError("train.loss: unknown loss '" + std::string(s) + "' (expected nll or mse)");
}

struct TrainConfig {
    LossKind loss = LossKind::nll;
    std::size_t epochs = 100;
    std::size_t patience = 5;
    std::size_t batch_size = 128;
    MethodConfig method;
    double learning_rate = 1e-3;
    std::optional<double> rate_learning_rate;  // ctd logit; defaults to learning_rate
    double val_fraction = 0.2;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw ConfigError("train.epochs must be positive");
        if (patience >= epochs) throw ConfigError("train.patience must be smaller than train.epochs");
        if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
        if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
        if (rate_learning_rate && !(*rate_learning_rate > 0.0)) throw ConfigError("train.rate_learning_rate must be positive");
        if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("train.val_fraction must lie in (0, 1)");
        method.validate();
    }

    bool operator==(const TrainConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"loss", to_string(c.loss)},
         {"epochs", c.epochs},
         {"patience", c.patience},
         {"batch_size", c.batch_size},
         {"method", c.method},
         {"learning_rate", c.learning_rate},
         {"val_fraction", c.val_fraction},
         {"seed", c.seed}};
    j["rate_learning_rate"] = c.rate_learning_rate ? nlohmann::json(*c.rate_learning_rate) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.loss = parse_loss(j.value("loss", to_string(d.loss)));
    c.epochs = j.value("epochs", d.epochs);
    c.patience = j.value("patience", d.patience);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.method = j.contains("method") ? j["method"].get<MethodConfig>() : d.method;
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.val_fraction = j.value("val_fraction", d.val_fraction);
    c.seed = j.value("seed", d.seed);
    c.rate_learning_rate.reset();
    if (j.contains("rate_learning_rate") && !j["rate_learning_rate"].is_null()) {
        c.rate_learning_rate = j["rate_learning_rate"].get<double>();
    }
}

/// Stops once `patience` consecutive epochs fail to strictly improve on the best loss.
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

    /// Records an epoch; returns true when it is the new best.
    bool update(double loss) {
        ++epochs_;
        if (loss < best_) {
            best_ = loss;
            best_epoch_ = epochs_ - 1;
            bad_ = 0;
            return true;
        }
        ++bad_;
        return false;
    }

    bool should_stop() const { return bad_ >= patience_; }
    double best() const { return best_; }
    std::size_t best_epoch() const { return best_epoch_; }

private:
    std::size_t patience_;
    std::size_t epochs_ = 0;
    std::size_t bad_ = 0;
    std::size_t best_epoch_ = 0;
    double best_ = std::numeric_limits<double>::infinity();
};

struct RunRecord {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    std::vector<double> rate;  // learned concrete drop rate after each epoch (ctd only)
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
    bool stopped_early = false;
    double wall_seconds = 0.0;
    std::uint64_t seed = 0;
    nlohmann::json config;
};

inline nlohmann::json to_json(const RunRecord& r) {
    return {{"train_loss", r.train_loss},   {"val_loss", r.val_loss},     {"rate", r.rate},
            {"best_epoch", r.best_epoch},   {"epochs_run", r.epochs_run}, {"stopped_early", r.stopped_early},
            {"wall_seconds", r.wall_seconds}, {"seed", r.seed},           {"config", r.config}};
}

struct TrainHooks {
    // Replaces the computed validation loss; used to script early-stopping scenarios.
    std::function<double(std::size_t epoch, double computed)> validation_override;
};

inline Tensor compute_loss(LossKind kind, const Prediction& p, std::span<const double> y) {
    const Tensor target = target_tensor(y);
    return kind == LossKind::nll ? nll_loss(p.mean, p.variance, target) : mse_loss(p.mean, target);
}

/// Deterministic loss over a whole split: eval mode, no masks, no dropout.
inline double validation_loss(SequenceRegressor& model, const SeriesBatch& data, LossKind kind,
                              std::size_t chunk = 1024) {
    NoGradGuard no_grad;
    double total = 0.0;
    for (std::size_t start = 0; start < data.size; start += chunk) {
        const std::size_t n = std::min(chunk, data.size - start);
        std::vector<std::size_t> rows(n);
        std::iota(rows.begin(), rows.end(), start);
        const SeriesBatch part = data.subset(rows);
        const Prediction p = model.predict(part, ForwardOptions{});
        total += compute_loss(kind, p, part.targets).item() * static_cast<double>(n);
    }
    return total / static_cast<double>(data.size);
}

inline RunRecord train(SequenceRegressor& model, const SeriesBatch& train_data, const SeriesBatch& val_data,
                       const TrainConfig& cfg, const TrainHooks& hooks = {}) {
    cfg.validate();
    if (model.method() != cfg.method) throw ConfigError("train: model was built for a different dropout method");
    if (train_data.size == 0 || val_data.size == 0) throw DataError("train: empty training or validation split");
    train_data.validate();
    val_data.validate();
    const auto started = std::chrono::steady_clock::now();

    const double ymean = std::accumulate(train_data.targets.begin(), train_data.targets.end(), 0.0) /
                         static_cast<double>(train_data.size);
    double yvar = 0.0;
    for (double y : train_data.targets) yvar += (y - ymean) * (y - ymean);
    const double ystd = std::sqrt(yvar / static_cast<double>(train_data.size));
    model.set_target_scale(ymean, ystd > 1e-12 ? ystd : 1.0);
    model.set_input_norm(train_data.norm);

    std::vector<Tensor> params;
    for (const auto& p : model.parameters()) params.push_back(p.tensor);
    AdamState adam;
    adam.lr = cfg.learning_rate;
    adam.lr_scale.assign(params.size(), 1.0);
    const bool concrete = cfg.method.kind == Method::ctd;
    if (concrete) {
        params.push_back(model.concrete().logit_param());
        adam.lr_scale.push_back(cfg.rate_learning_rate.value_or(cfg.learning_rate) / cfg.learning_rate);
    }

    Rng shuffle_rng = make_rng(cfg.seed, Stream::shuffle);
    Rng mask_rng = make_rng(cfg.seed, Stream::temporal_mask);
    Rng dropout_rng = make_rng(cfg.seed, Stream::hidden_dropout);

    RunRecord record;
    record.seed = cfg.seed;
    record.config = cfg;
    EarlyStopping stopper(cfg.patience);
    auto best = model.snapshot();
    std::vector<std::size_t> order(train_data.size);
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_loss = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - start);
            const std::span<const std::size_t> rows(order.data() + start, n);
            const SeriesBatch batch = train_data.subset(rows);

            std::optional<DropoutMask> mask;
            if (cfg.method.kind == Method::td) {
                mask = sample_hard_mask(TdConfig{cfg.method.ratio, 0}, n, batch.steps, mask_rng);
            } else if (concrete) {
                mask = sample_soft_mask(model.concrete(), n, batch.steps, mask_rng);
            }
            ForwardOptions opt;
            opt.mode = Mode::train;
            opt.input_mask = mask ? &*mask : nullptr;
            opt.rng = &dropout_rng;

            const Prediction pred = model.predict(batch, opt);
            const Tensor loss = compute_loss(cfg.loss, pred, batch.targets);
            const double value = loss.item();
            if (!std::isfinite(value)) {
                throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(batch_index));
            }
            for (auto& p : params) p.zero_grad();
            loss.backward();
            adam_step(params, adam);
            epoch_loss += value * static_cast<double>(n);
        }
        record.train_loss.push_back(epoch_loss / static_cast<double>(train_data.size));

        double val = validation_loss(model, val_data, cfg.loss);
        if (hooks.validation_override) val = hooks.validation_override(epoch, val);
        if (!std::isfinite(val)) {
            throw NumericError("training diverged: non-finite validation loss at epoch " + std::to_string(epoch));
        }
        record.val_loss.push_back(val);
        if (concrete) record.rate.push_back(model.concrete().rate());
        record.epochs_run = epoch + 1;
        if (stopper.update(val)) best = model.snapshot();
        if (stopper.should_stop()) {
            record.stopped_early = true;
            break;
        }
    }
    model.restore(best);
    record.best_epoch = stopper.best_epoch();
    record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return record;
}

// ---------------------------------------------------------------------------
// Experiments

struct Experiment {
    ModelConfig model;
    TrainConfig train;
    McConfig mc;
    std::vector<double> levels = default_levels();
    IntervalKind interval = IntervalKind::gaussian;
    double test_fraction = 0.2;

    bool operator==(const Experiment&) const = default;
};

struct Holdout {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

/// Seeded random split; the test part holds round(n * fraction) examples (at least one).
inline Holdout holdout(std::size_t n, double fraction, std::uint64_t seed, Stream stream = Stream::split) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("holdout fraction must lie in (0, 1)");
    if (n < 2) throw DataError("holdout: need at least 2 examples");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng = make_rng(seed, stream);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto k = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction)), 1, n - 1);
    Holdout h;
    h.test.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
    h.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(k), perm.end());
    std::sort(h.test.begin(), h.test.end());
    std::sort(h.train.begin(), h.train.end());
    return h;
}

struct EvalResult {
    UncertaintyReport report;
    MetricBundle metrics;
};

/// Normalizes raw data with the model's stored statistics, then runs MC inference and scoring.
inline EvalResult evaluate_model(SequenceRegressor& model, const SeriesBatch& raw, const McConfig& mc,
                                 std::span<const double> levels, IntervalKind interval = IntervalKind::gaussian) {
    if (raw.features != model.config().input_features) {
        throw DataError("feature count mismatch: checkpoint expects F=" + std::to_string(model.config().input_features) +
                        ", data has F=" + std::to_string(raw.features));
    }
    const SeriesBatch data = model.input_norm() ? normalize(raw, *model.input_norm()) : raw;
    EvalResult out;
    out.report = mc_predict(model, data, mc);
    out.metrics = evaluate(out.report, data.targets, levels, interval);
    return out;
}

struct ExperimentResult {
    RunRecord record;
    SequenceRegressor model;
    EvalResult eval;
};

/// Splits validation off `train_raw`, fits normalization on the remaining
/// training rows only, trains, and scores MC predictions on `test_raw`.
inline ExperimentResult run_experiment(const Experiment& exp, const SeriesBatch& train_raw, const SeriesBatch& test_raw,
                                       const TrainHooks& hooks = {}) {
    exp.train.validate();
    exp.mc.validate();
    const Holdout inner = holdout(train_raw.size, exp.train.val_fraction, exp.train.seed, Stream::split);
    const SeriesBatch fit_raw = train_raw.subset(inner.train);
    const NormStats stats = fit_normalization(fit_raw);
    const SeriesBatch fit = normalize(fit_raw, stats);
    const SeriesBatch val = normalize(train_raw.subset(inner.test), stats);

    ModelConfig mcfg = exp.model;
    mcfg.input_features = train_raw.features;
    ExperimentResult result{RunRecord{}, SequenceRegressor(mcfg, exp.train.method), EvalResult{}};
    result.record = train(result.model, fit, val, exp.train, hooks);
    result.eval = evaluate_model(result.model, test_raw, exp.mc, exp.levels, exp.interval);
    return result;
}

struct SweepRow {
    double ratio = 0.0;
    RunRecord record;
    MetricBundle metrics;
};

/// One MC-TD model per ratio, all on the same split and seeds.
inline std::vector<SweepRow> ratio_sweep(std::span<const double> ratios, const Experiment& base, const SeriesBatch& data) {
    for (double r : ratios) TdConfig{r, 0}.validate();
    const Holdout split = holdout(data.size, base.test_fraction, base.train.seed, Stream::folds);
    const SeriesBatch train_raw = data.subset(split.train);
    const SeriesBatch test_raw = data.subset(split.test);
    std::vector<SweepRow> rows;
    for (double r : ratios) {
        Experiment exp = base;
        exp.train.method = MethodConfig{};
        exp.train.method.kind = Method::td;
        exp.train.method.ratio = r;
        exp.mc.source = Source::temporal_hard;
        exp.mc.ratio.reset();
        auto res = run_experiment(exp, train_raw, test_raw);
        rows.push_back({r, std::move(res.record), std::move(res.eval.metrics)});
    }
    return rows;
}

struct FoldResult {
    std::size_t fold = 0;
    std::optional<double> rate;  // learned drop rate (ctd)
    RunRecord record;
    MetricBundle metrics;
};

struct KfoldResult {
    FoldPlan plan;
    std::vector<FoldResult> folds;
    MetricBundle mean;
    MetricBundle std;
};

inline KfoldResult run_kfold(const Experiment& exp, const SeriesBatch& data, std::size_t k) {
    if (k < 2) throw ConfigError("kfold: k must be at least 2");
    KfoldResult out;
    out.plan = kfold(data.size, k, exp.train.seed);
    for (std::size_t f = 0; f < k; ++f) {
        auto res = run_experiment(exp, data.subset(out.plan.complement(f)), data.subset(out.plan.fold(f)));
        FoldResult fr;
        fr.fold = f;
        if (exp.train.method.kind == Method::ctd) fr.rate = res.model.concrete().rate();
        fr.record = std::move(res.record);
        fr.metrics = std::move(res.eval.metrics);
        out.folds.push_back(std::move(fr));
    }
    auto stat = [&](auto get, double& mean, double& sd) {
        mean = 0.0;
        for (const auto& f : out.folds) mean += get(f.metrics);
        mean /= static_cast<double>(k);
        double ss = 0.0;
        for (const auto& f : out.folds) ss += (get(f.metrics) - mean) * (get(f.metrics) - mean);
        sd = std::sqrt(ss / static_cast<double>(k - 1));
    };
    stat([](const MetricBundle& m) { return m.r2; }, out.mean.r2, out.std.r2);
    stat([](const MetricBundle& m) { return m.rmse; }, out.mean.rmse, out.std.rmse);
    stat([](const MetricBundle& m) { return m.mae; }, out.mean.mae, out.std.mae);
    stat([](const MetricBundle& m) { return m.ece; }, out.mean.ece, out.std.ece);
    stat([](const MetricBundle& m) { return m.mean_pu; }, out.mean.mean_pu, out.std.mean_pu);
    stat([](const MetricBundle& m) { return m.norm_pu; }, out.mean.norm_pu, out.std.norm_pu);
    return out;
}

}  // namespace mctd
