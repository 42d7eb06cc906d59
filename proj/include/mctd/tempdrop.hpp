#pragma once

// Temporal dropout: whole time steps are dropped, all features at once.
//
// Masks hold the DROP indicator p (1 = dropped) with shape (batch, steps) and
// are applied as x * (1 - p). Hard masks draw p ~ Bernoulli(alpha). Soft masks
// use the Concrete relaxation
//
//     p = sigmoid((logit(alpha) + logit(u)) / tau),   u ~ Uniform(0, 1)
//
// with alpha = sigmoid(a) for a trainable logit a, so the rate is learned by
// backpropagating through the sampled mask.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mctd/autodiff.hpp"
#include "mctd/data.hpp"
#include "mctd/error.hpp"
#include "mctd/rng.hpp"

namespace mctd {

struct TdConfig {
    double ratio = 0.3;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(ratio >= 0.0 && ratio < 1.0)) {
            throw ConfigError("temporal dropout ratio must lie in [0, 1), got " + std::to_string(ratio));
        }
    }
};

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

inline double logistic(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

class ConcreteParam {
public:
    static constexpr double default_temperature = 0.1;
    static constexpr double default_initial_rate = 0.1;
    static constexpr double clamp_eps = 1e-7;

    ConcreteParam() : ConcreteParam(default_initial_rate, default_temperature) {}

    ConcreteParam(double initial_rate, double temperature)
        : logit_(Tensor::scalar(0.0, true)), temperature_(temperature) {
        if (!(initial_rate > 0.0 && initial_rate < 1.0)) {
            throw ConfigError("concrete dropout initial rate must lie in (0, 1), got " + std::to_string(initial_rate));
        }
        check_temperature(temperature);
        logit_.mutable_values()[0] = logit(initial_rate);
    }

    /// Trainable logit a; the dropout rate is sigmoid(a).
    Tensor& logit_param() { return logit_; }
    const Tensor& logit_param() const { return logit_; }

    double rate() const { return logistic(logit_[0]); }
    double temperature() const { return temperature_; }
    void set_temperature(double tau) {
        check_temperature(tau);
        temperature_ = tau;
    }

    static void check_temperature(double tau) {
        if (!(tau > 0.0) || !std::isfinite(tau)) {
            throw ConfigError("concrete temperature must be positive, got " + std::to_string(tau));
        }
    }

private:
    Tensor logit_;
    double temperature_;
};

enum class MaskKind { hard, soft };

struct DropoutMask {
    MaskKind kind = MaskKind::hard;
    Tensor values;  // (batch, steps) drop indicator

    std::size_t batch() const { return values.dim(0); }
    std::size_t steps() const { return values.dim(1); }
    double at(std::size_t b, std::size_t t) const { return values[b * steps() + t]; }
};

inline DropoutMask sample_hard_mask(const TdConfig& cfg, std::size_t batch, std::size_t steps, Rng& rng) {
    cfg.validate();
    std::vector<double> p(batch * steps);
    for (auto& v : p) v = uniform01(rng) < cfg.ratio ? 1.0 : 0.0;
    return {MaskKind::hard, Tensor::from({batch, steps}, std::move(p))};
}

inline DropoutMask sample_hard_mask(const TdConfig& cfg, std::size_t batch, std::size_t steps) {
    Rng rng = make_rng(cfg.seed, Stream::temporal_mask);
    return sample_hard_mask(cfg, batch, steps, rng);
}

inline std::vector<double> draw_uniform(std::size_t n, Rng& rng) {
    std::vector<double> u(n);
    for (auto& v : u) v = uniform01(rng);
    return u;
}

/// Concrete soft mask from explicit uniform draws; differentiable w.r.t. the logit.
inline DropoutMask sample_soft_mask(const ConcreteParam& param, std::size_t batch, std::size_t steps,
                                    std::span<const double> u) {
    ConcreteParam::check_temperature(param.temperature());
    if (u.size() != batch * steps) {
        throw ShapeError("sample_soft_mask: " + std::to_string(u.size()) + " uniform draws for mask shape " +
                         shape_str({batch, steps}));
    }
    constexpr double eps = ConcreteParam::clamp_eps;
    std::vector<double> noise(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double uc = std::clamp(u[i], eps, 1.0 - eps);
        noise[i] = std::log(uc) - std::log(1.0 - uc);
    }
    const Tensor alpha = clamp(sigmoid(param.logit_param()), eps, 1.0 - eps);
    const Tensor rate_logit = log(alpha) - log(rsub(1.0, alpha));
    const Tensor z = rate_logit + Tensor::from({batch, steps}, std::move(noise));
    return {MaskKind::soft, sigmoid(scale(z, 1.0 / param.temperature()))};
}

inline DropoutMask sample_soft_mask(const ConcreteParam& param, std::size_t batch, std::size_t steps, Rng& rng) {
    const auto u = draw_uniform(batch * steps, rng);
    return sample_soft_mask(param, batch, steps, u);
}

/// Rounds a soft mask to {0, 1} at 0.5 (no gradient).
inline DropoutMask harden(const DropoutMask& mask) {
    std::vector<double> p(mask.values.values().begin(), mask.values.values().end());
    for (auto& v : p) v = v > 0.5 ? 1.0 : 0.0;
    return {MaskKind::hard, Tensor::from(mask.values.shape(), std::move(p))};
}

/// Value-level application: every feature of a dropped step is scaled by (1 - p).
inline SeriesBatch apply_mask(const SeriesBatch& x, const DropoutMask& mask) {
    if (!mask.values.defined() || mask.values.rank() != 2 || mask.batch() != x.size || mask.steps() != x.steps) {
        throw ShapeError("apply_mask: mask shape " + (mask.values.defined() ? shape_str(mask.values.shape()) : "[]") +
                         " does not match series batch " + shape_str({x.size, x.steps}));
    }
    SeriesBatch out = x;
    for (std::size_t b = 0; b < x.size; ++b) {
        for (std::size_t t = 0; t < x.steps; ++t) {
            const double keep = 1.0 - mask.at(b, t);
            for (std::size_t f = 0; f < x.features; ++f) out.at(b, t, f) = x.at(b, t, f) * keep;
        }
    }
    return out;
}

/// Graph-level application on per-step inputs of shape (batch, features).
inline std::vector<Tensor> apply_mask(const std::vector<Tensor>& steps, const DropoutMask& mask) {
    if (mask.values.rank() != 2 || mask.steps() != steps.size()) {
        throw ShapeError("apply_mask: mask shape " + shape_str(mask.values.shape()) + " does not cover " +
                         std::to_string(steps.size()) + " steps");
    }
    const Tensor keep = rsub(1.0, mask.values);
    std::vector<Tensor> out;
    out.reserve(steps.size());
    for (std::size_t t = 0; t < steps.size(); ++t) {
        if (steps[t].dim(0) != mask.batch()) {
            throw ShapeError("apply_mask: step " + std::to_string(t) + " has shape " + shape_str(steps[t].shape()) +
                             ", mask batch is " + std::to_string(mask.batch()));
        }
        out.push_back(steps[t] * slice(keep, 1, t, 1));
    }
    return out;
}

}  // namespace mctd
