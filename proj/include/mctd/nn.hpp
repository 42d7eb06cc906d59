#pragma once

// Sequence regression network: stacked LSTM encoder over early-fused steps,
// batch norm on the last valid hidden state, one dense hidden layer, and two
// linear heads for the mean and log-variance of a Gaussian predictive.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mctd/autodiff.hpp"
#include "mctd/data.hpp"
#include "mctd/error.hpp"
#include "mctd/rng.hpp"
#include "mctd/tempdrop.hpp"

namespace mctd {

enum class Activation { tanh, relu, identity };

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::tanh: return "tanh";
        case Activation::relu: return "relu";
        case Activation::identity: return "identity";
    }
    return "?";
}

inline Activation parse_activation(std::string_view s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "relu") return Activation::relu;
    if (s == "identity") return Activation::identity;
    throw ConfigError("model.dense_activation: unknown activation '" + std::string(s) + "'");
}

/// Where stochasticity enters the network.
enum class Method { none, td, ctd, hidden_dropout };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::none: return "none";
        case Method::td: return "td";
        case Method::ctd: return "ctd";
        case Method::hidden_dropout: return "hidden_dropout";
    }
    return "?";
}

inline Method parse_method(std::string_view s) {
    if (s == "none") return Method::none;
    if (s == "td") return Method::td;
    if (s == "ctd") return Method::ctd;
    if (s == "hidden_dropout") return Method::hidden_dropout;
    throw ConfigError("train.method: unknown method '" + std::string(s) +
                      "' (expected none, td, ctd or hidden_dropout)");
}

struct MethodConfig {
    Method kind = Method::none;
    double ratio = 0.3;          // td: fixed drop rate during training
    std::optional<double> inference_ratio;  // td: rate used by MC inference; defaults to ratio
    double initial_rate = ConcreteParam::default_initial_rate;  // ctd
    double temperature = ConcreteParam::default_temperature;    // ctd
    bool harden_at_inference = false;                             // ctd: threshold soft masks at 0.5 in MC

    double mc_ratio() const { return inference_ratio.value_or(ratio); }

    void validate() const {
        if (kind == Method::td) {
            TdConfig{ratio, 0}.validate();
            TdConfig{mc_ratio(), 0}.validate();
        }
        if (kind == Method::ctd) {
            ConcreteParam(initial_rate, temperature);
        }
    }

    bool operator==(const MethodConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const MethodConfig& m) {
    j = {{"kind", to_string(m.kind)},
         {"ratio", m.ratio},
         {"initial_rate", m.initial_rate},
         {"temperature", m.temperature},
         {"harden_at_inference", m.harden_at_inference}};
    if (m.inference_ratio) j["inference_ratio"] = *m.inference_ratio;
}

inline void from_json(const nlohmann::json& j, MethodConfig& m) {
    MethodConfig d;
    m.kind = parse_method(j.value("kind", to_string(d.kind)));
    m.ratio = j.value("ratio", d.ratio);
    m.initial_rate = j.value("initial_rate", d.initial_rate);
    m.temperature = j.value("temperature", d.temperature);
    m.harden_at_inference = j.value("harden_at_inference", d.harden_at_inference);
    m.inference_ratio.reset();
    if (j.contains("inference_ratio") && !j["inference_ratio"].is_null()) m.inference_ratio = j["inference_ratio"].get<double>();
}

struct ModelConfig {
    std::size_t input_features = 1;
    std::size_t hidden_size = 128;
    std::size_t num_layers = 2;
    std::size_t dense_size = 128;
    double dropout = 0.2;
    Activation dense_activation = Activation::tanh;
    bool batch_norm = true;
    double bn_momentum = 0.1;
    double logvar_min = -10.0;
    double logvar_max = 10.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (input_features < 1 || hidden_size < 1 || num_layers < 1 || dense_size < 1) {
            throw ConfigError("model: input_features, hidden_size, num_layers and dense_size must be positive");
        }
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must lie in [0, 1)");
        if (!(logvar_min < logvar_max)) throw ConfigError("model: logvar_min must be below logvar_max");
    }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"input_features", c.input_features},
         {"hidden_size", c.hidden_size},
         {"num_layers", c.num_layers},
         {"dense_size", c.dense_size},
         {"dropout", c.dropout},
         {"dense_activation", to_string(c.dense_activation)},
         {"batch_norm", c.batch_norm},
         {"bn_momentum", c.bn_momentum},
         {"logvar_min", c.logvar_min},
         {"logvar_max", c.logvar_max},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.input_features = j.value("input_features", d.input_features);
    c.hidden_size = j.value("hidden_size", d.hidden_size);
    c.num_layers = j.value("num_layers", d.num_layers);
    c.dense_size = j.value("dense_size", d.dense_size);
    c.dropout = j.value("dropout", d.dropout);
    c.dense_activation = parse_activation(j.value("dense_activation", to_string(d.dense_activation)));
    c.batch_norm = j.value("batch_norm", d.batch_norm);
    c.bn_momentum = j.value("bn_momentum", d.bn_momentum);
    c.logvar_min = j.value("logvar_min", d.logvar_min);
    c.logvar_max = j.value("logvar_max", d.logvar_max);
    c.seed = j.value("seed", d.seed);
}

namespace detail {

inline Tensor uniform_param(Shape shape, double bound, Rng& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor::from(std::move(shape), std::move(v), true);
}

inline void check_finite(const Tensor& t, const std::string& layer) {
    for (double v : t.values()) {
        if (!std::isfinite(v)) throw NumericError("non-finite value in forward pass at layer '" + layer + "'");
    }
}

// Inverted dropout: kept units are scaled by 1 / (1 - rate).
inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate <= 0.0) return x;
    const double keep = 1.0 / (1.0 - rate);
    std::vector<double> m(x.numel());
    for (auto& v : m) v = uniform01(rng) < rate ? 0.0 : keep;
    return x * Tensor::from(x.shape(), std::move(m));
}

inline Tensor activate(const Tensor& x, Activation a) {
    switch (a) {
        case Activation::tanh: return mctd::tanh(x);
        case Activation::relu: return relu(x);
        case Activation::identity: return x;
    }
    return x;
}

}  // namespace detail

namespace detail {

// Gate pre-activations (B, 4H) and previous cell state (B, H) to [h | c] (B, 2H).
inline Tensor lstm_cell(const Tensor& gates, const Tensor& c_prev) {
    const std::size_t B = gates.dim(0), H = gates.dim(1) / 4;
    auto act = std::make_shared<std::vector<double>>(B * 5 * H);  // i, f, g, o, tanh(c)
    std::vector<double> out(B * 2 * H);
    const auto& gv = gates.values();
    const auto& cv = c_prev.values();
    for (std::size_t b = 0; b < B; ++b) {
        const double* z = gv.data() + b * 4 * H;
        double* a = act->data() + b * 5 * H;
        double* hout = out.data() + b * 2 * H;
        for (std::size_t j = 0; j < H; ++j) {
            const double i = 1.0 / (1.0 + std::exp(-z[j]));
            const double f = 1.0 / (1.0 + std::exp(-z[H + j]));
            const double g = 1.0 - 2.0 / (1.0 + std::exp(2.0 * z[2 * H + j]));
            const double o = 1.0 / (1.0 + std::exp(-z[3 * H + j]));
            const double c = f * cv[b * H + j] + i * g;
            const double tc = 1.0 - 2.0 / (1.0 + std::exp(2.0 * c));
            a[j] = i, a[H + j] = f, a[2 * H + j] = g, a[3 * H + j] = o, a[4 * H + j] = tc;
            hout[j] = o * tc;
            hout[H + j] = c;
        }
    }
    return make_result("lstm_cell", Shape{B, 2 * H}, std::move(out), {gates, c_prev},
                       [gates, c_prev, act, B, H](Node& self) {
                           const auto& cv = c_prev.values();
                           std::vector<double>* gg = gates.requires_grad() ? &gates.node()->grad : nullptr;
                           std::vector<double>* gc = c_prev.requires_grad() ? &c_prev.node()->grad : nullptr;
                           for (std::size_t b = 0; b < B; ++b) {
                               const double* a = act->data() + b * 5 * H;
                               const double* dh = self.grad.data() + b * 2 * H;
                               for (std::size_t j = 0; j < H; ++j) {
                                   const double i = a[j], f = a[H + j], g = a[2 * H + j], o = a[3 * H + j];
                                   const double tc = a[4 * H + j];
                                   const double dc = dh[H + j] + dh[j] * o * (1.0 - tc * tc);
                                   if (gg) {
                                       double* d = gg->data() + b * 4 * H;
                                       d[j] += dc * g * i * (1.0 - i);
                                       d[H + j] += dc * cv[b * H + j] * f * (1.0 - f);
                                       d[2 * H + j] += dc * i * (1.0 - g * g);
                                       d[3 * H + j] += dh[j] * tc * o * (1.0 - o);
                                   }
                                   if (gc) (*gc)[b * H + j] += dc * f;
                               }
                           }
                       });
}

}  // namespace detail

struct Linear {
    Tensor weight;  // (in, out)
    Tensor bias;    // (1, out)

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        weight = detail::uniform_param({in, out}, bound, rng);
        bias = detail::uniform_param({1, out}, bound, rng);
    }

    Tensor forward(const Tensor& x) const { return matmul(x, weight) + bias; }
};

/// One LSTM layer. Gate columns are ordered input, forget, cell, output.
struct LstmLayer {
    std::size_t hidden = 0;
    Tensor w_input;   // (in, 4H)
    Tensor w_hidden;  // (H, 4H)
    Tensor bias;      // (1, 4H)

    LstmLayer() = default;
    LstmLayer(std::size_t in, std::size_t hidden_size, Rng& rng) : hidden(hidden_size) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in + hidden_size));
        w_input = detail::uniform_param({in, 4 * hidden_size}, bound, rng);
        w_hidden = detail::uniform_param({hidden_size, 4 * hidden_size}, bound, rng);
        bias = detail::uniform_param({1, 4 * hidden_size}, bound, rng);
        auto b = bias.mutable_values();
        for (std::size_t j = hidden_size; j < 2 * hidden_size; ++j) b[j] = 1.0;
    }

    std::vector<Tensor> forward(const std::vector<Tensor>& inputs) const {
        const std::size_t batch = inputs.front().dim(0);
        const std::size_t steps = inputs.size();
        const Tensor projected = matmul(concat(inputs, 0), w_input) + bias;
        Tensor h = Tensor::zeros({batch, hidden});
        Tensor c = Tensor::zeros({batch, hidden});
        std::vector<Tensor> out;
        out.reserve(steps);
        for (std::size_t t = 0; t < steps; ++t) {
            const Tensor gates = slice(projected, 0, t * batch, batch) + matmul(h, w_hidden);
            const Tensor hc = detail::lstm_cell(gates, c);
            h = slice(hc, 1, 0, hidden);
            c = slice(hc, 1, hidden, hidden);
            out.push_back(h);
        }
        return out;
    }
};

struct BatchNorm {
    Tensor gamma;  // (1, H)
    Tensor beta;   // (1, H)
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    BatchNorm() = default;
    BatchNorm(std::size_t features, double momentum_)
        : gamma(Tensor::full({1, features}, 1.0, true)),
          beta(Tensor::zeros({1, features}, true)),
          running_mean(features, 0.0),
          running_var(features, 1.0),
          momentum(momentum_) {}

    Tensor forward(const Tensor& x, bool training) {
        const std::size_t n = x.dim(0), h = x.dim(1);
        if (!training) {
            std::vector<double> shift(h), inv(h);
            for (std::size_t j = 0; j < h; ++j) {
                shift[j] = running_mean[j];
                inv[j] = 1.0 / std::sqrt(running_var[j] + eps);
            }
            const Tensor xhat = (x - Tensor::from({1, h}, std::move(shift))) * Tensor::from({1, h}, std::move(inv));
            return xhat * gamma + beta;
        }
        const Tensor mu = mean(x, 0);
        const Tensor centered = x - mu;
        const Tensor var = mean(square(centered), 0);
        const Tensor xhat = centered / mctd::sqrt(add_scalar(var, eps));
        const double unbias = n > 1 ? static_cast<double>(n) / static_cast<double>(n - 1) : 1.0;
        for (std::size_t j = 0; j < h; ++j) {
            running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * mu[j];
            running_var[j] = (1.0 - momentum) * running_var[j] + momentum * var[j] * unbias;
        }
        return xhat * gamma + beta;
    }
};

enum class Mode { train, eval };

struct ForwardOptions {
    Mode mode = Mode::eval;
    const DropoutMask* input_mask = nullptr;  // temporal drop mask (batch, steps)
    bool hidden_dropout = false;              // resample standard dropout outside training
    Rng* rng = nullptr;                       // draws for standard dropout
};

struct Prediction {
    Tensor mean;      // (batch)
    Tensor variance;  // (batch), strictly positive
};

struct NamedParameter {
    std::string name;
    Tensor tensor;
};

/// Recurrent encoder + regression heads. Targets are modeled in standardized
/// units internally; predict() maps mean and variance back to target units.
class SequenceRegressor {
public:
    SequenceRegressor() : SequenceRegressor(ModelConfig{}) {}

    explicit SequenceRegressor(const ModelConfig& cfg, const MethodConfig& method = {})
        : cfg_(cfg), method_(method), concrete_(0.5, method.temperature) {
        cfg_.validate();
        method_.validate();
        Rng rng = make_rng(cfg_.seed, Stream::init);
        std::size_t in = cfg_.input_features;
        for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
            layers_.emplace_back(in, cfg_.hidden_size, rng);
            in = cfg_.hidden_size;
        }
        if (cfg_.batch_norm) norm_ = BatchNorm(cfg_.hidden_size, cfg_.bn_momentum);
        dense_ = Linear(cfg_.hidden_size, cfg_.dense_size, rng);
        mean_head_ = Linear(cfg_.dense_size, 1, rng);
        logvar_head_ = Linear(cfg_.dense_size, 1, rng);
        if (method_.kind == Method::ctd) concrete_ = ConcreteParam(method_.initial_rate, method_.temperature);
    }

    SequenceRegressor(SequenceRegressor&&) = default;
    SequenceRegressor& operator=(SequenceRegressor&&) = default;
    SequenceRegressor(const SequenceRegressor&) = delete;
    SequenceRegressor& operator=(const SequenceRegressor&) = delete;

    const ModelConfig& config() const { return cfg_; }
    const MethodConfig& method() const { return method_; }
    ConcreteParam& concrete() { return concrete_; }
    const ConcreteParam& concrete() const { return concrete_; }

    void set_target_scale(double mean, double std) {
        if (!(std > 0.0) || !std::isfinite(mean)) throw DataError("target scale needs finite mean and positive std");
        target_mean_ = mean;
        target_std_ = std;
    }
    double target_mean() const { return target_mean_; }
    double target_std() const { return target_std_; }

    void set_input_norm(std::optional<NormStats> stats) { input_norm_ = std::move(stats); }
    const std::optional<NormStats>& input_norm() const { return input_norm_; }

    /// Last valid hidden state of the top layer, after batch norm: (batch, hidden).
    Tensor encode(const SeriesBatch& batch, const ForwardOptions& opt) {
        if (batch.size == 0 || batch.steps == 0) throw DataError("encode: empty sequence batch");
        if (batch.features != cfg_.input_features) {
            throw DataError("encode: model expects " + std::to_string(cfg_.input_features) + " features, batch has " +
                            std::to_string(batch.features));
        }
        const std::size_t B = batch.size, T = batch.steps, F = batch.features;
        std::vector<Tensor> steps;
        steps.reserve(T);
        for (std::size_t t = 0; t < T; ++t) {
            std::vector<double> v(B * F);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t f = 0; f < F; ++f) v[b * F + f] = batch.at(b, t, f);
            steps.push_back(Tensor::from({B, F}, std::move(v)));
        }
        if (opt.input_mask) steps = apply_mask(steps, *opt.input_mask);

        const bool stochastic = opt.mode == Mode::train || opt.hidden_dropout;
        if (stochastic && cfg_.dropout > 0.0 && !opt.rng) throw ConfigError("encode: dropout requires an rng");
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            if (l > 0 && stochastic) {
                for (auto& s : steps) s = detail::dropout(s, cfg_.dropout, *opt.rng);
            }
            steps = layers_[l].forward(steps);
            detail::check_finite(steps.back(), "lstm" + std::to_string(l));
        }

        Tensor last;
        const bool ragged = std::any_of(batch.lengths.begin(), batch.lengths.end(), [T](std::size_t n) { return n != T; });
        if (!ragged) {
            last = steps.back();
        } else {
            for (std::size_t t = 0; t < T; ++t) {
                std::vector<double> sel(B, 0.0);
                bool any = false;
                for (std::size_t b = 0; b < B; ++b) {
                    if (batch.lengths[b] == t + 1) sel[b] = 1.0, any = true;
                }
                if (!any) continue;
                const Tensor term = steps[t] * Tensor::from({B, 1}, std::move(sel));
                last = last.defined() ? last + term : term;
            }
        }
        if (cfg_.batch_norm) {
            last = norm_.forward(last, opt.mode == Mode::train);
            detail::check_finite(last, "batch_norm");
        }
        return last;
    }

    Prediction predict(const SeriesBatch& batch, const ForwardOptions& opt) {
        const Tensor encoded = encode(batch, opt);
        Tensor hidden = detail::activate(dense_.forward(encoded), cfg_.dense_activation);
        if (opt.mode == Mode::train || opt.hidden_dropout) hidden = detail::dropout(hidden, cfg_.dropout, *opt.rng);
        detail::check_finite(hidden, "dense");
        const Tensor mu = mean_head_.forward(hidden);
        detail::check_finite(mu, "mean_head");
        const Tensor s = clamp(logvar_head_.forward(hidden), cfg_.logvar_min, cfg_.logvar_max);
        detail::check_finite(s, "logvar_head");
        const std::size_t B = batch.size;
        Prediction p;
        p.mean = reshape(add_scalar(scale(mu, target_std_), target_mean_), {B});
        p.variance = reshape(scale(exp(s), target_std_ * target_std_), {B});
        detail::check_finite(p.variance, "logvar_head");
        return p;
    }

    /// Network weights (excluding the concrete dropout logit).
    std::vector<NamedParameter> parameters() const {
        std::vector<NamedParameter> out;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const std::string p = "lstm" + std::to_string(l) + ".";
            out.push_back({p + "w_input", layers_[l].w_input});
            out.push_back({p + "w_hidden", layers_[l].w_hidden});
            out.push_back({p + "bias", layers_[l].bias});
        }
        if (cfg_.batch_norm) {
            out.push_back({"batch_norm.gamma", norm_.gamma});
            out.push_back({"batch_norm.beta", norm_.beta});
        }
        out.push_back({"dense.weight", dense_.weight});
        out.push_back({"dense.bias", dense_.bias});
        out.push_back({"mean_head.weight", mean_head_.weight});
        out.push_back({"mean_head.bias", mean_head_.bias});
        out.push_back({"logvar_head.weight", logvar_head_.weight});
        out.push_back({"logvar_head.bias", logvar_head_.bias});
        return out;
    }

    /// Everything restore() needs to roll the model back to this point.
    struct Snapshot {
        std::vector<std::vector<double>> params;
        std::vector<double> running_mean, running_var;
        double concrete_logit = 0.0;
    };

    Snapshot snapshot() const {
        Snapshot s;
        for (const auto& p : parameters()) s.params.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
        s.running_mean = norm_.running_mean;
        s.running_var = norm_.running_var;
        s.concrete_logit = concrete_.logit_param()[0];
        return s;
    }

    void restore(const Snapshot& s) {
        auto params = parameters();
        if (params.size() != s.params.size()) throw ConfigError("restore: snapshot does not match model");
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto dst = params[i].tensor.mutable_values();
            if (dst.size() != s.params[i].size()) throw ConfigError("restore: parameter size mismatch");
            std::copy(s.params[i].begin(), s.params[i].end(), dst.begin());
        }
        norm_.running_mean = s.running_mean;
        norm_.running_var = s.running_var;
        concrete_.logit_param().mutable_values()[0] = s.concrete_logit;
    }

    BatchNorm& batch_norm() { return norm_; }
    const BatchNorm& batch_norm() const { return norm_; }

private:
    ModelConfig cfg_;
    MethodConfig method_;
    std::vector<LstmLayer> layers_;
    BatchNorm norm_;
    Linear dense_;
    Linear mean_head_;
    Linear logvar_head_;
    ConcreteParam concrete_;
    double target_mean_ = 0.0;
    double target_std_ = 1.0;
    std::optional<NormStats> input_norm_;
};

// ---------------------------------------------------------------------------
// Losses

inline Tensor target_tensor(std::span<const double> y) {
    return Tensor::from({y.size()}, std::vector<double>(y.begin(), y.end()));
}

/// Mean over the batch of log var + (mu - y)^2 / var.
inline Tensor nll_loss(const Tensor& mu, const Tensor& var, const Tensor& y) {
    if (mu.shape() != var.shape() || mu.shape() != y.shape()) {
        throw ShapeError("nll_loss: mean " + shape_str(mu.shape()) + ", variance " + shape_str(var.shape()) +
                         " and target " + shape_str(y.shape()) + " must agree");
    }
    for (double v : var.values()) {
        if (!(v > 0.0)) throw NumericError("nll_loss: variance must be positive, got " + std::to_string(v));
    }
    return mean(log(var) + square(mu - y) / var);
}

inline Tensor mse_loss(const Tensor& mu, const Tensor& y) {
    if (mu.shape() != y.shape()) {
        throw ShapeError("mse_loss: mean " + shape_str(mu.shape()) + " and target " + shape_str(y.shape()) +
                         " must agree");
    }
    return mean(square(mu - y));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<double> lr_scale;  // per-parameter multiplier on lr, default 1
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::uint64_t step = 0;
};

/// Bias-corrected Adam update using the gradients currently stored on `params`.
inline void adam_step(std::vector<Tensor>& params, AdamState& state) {
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.numel(), 0.0);
            state.v.emplace_back(p.numel(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw ConfigError("adam_step: optimizer state tracks a different parameter set");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].size() != params[i].numel()) throw ShapeError("adam_step: moment shape differs from parameter " + std::to_string(i));
        for (double g : params[i].grad()) {
            if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in parameter " + std::to_string(i));
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double lr = state.lr * (i < state.lr_scale.size() ? state.lr_scale[i] : 1.0);
        auto w = params[i].mutable_values();
        const auto g = params[i].grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + state.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* checkpoint_format = "mctd.checkpoint";
inline constexpr int checkpoint_version = 1;

inline nlohmann::json save_checkpoint(const SequenceRegressor& model) {
    nlohmann::json params = nlohmann::json::object();
    for (const auto& p : model.parameters()) {
        params[p.name] = {{"shape", p.tensor.shape()}, {"values", p.tensor.values()}};
    }
    nlohmann::json j = {
        {"format", checkpoint_format},
        {"version", checkpoint_version},
        {"model", model.config()},
        {"method", model.method()},
        {"target_scale", {{"mean", model.target_mean()}, {"std", model.target_std()}}},
        {"batch_norm_running", {{"mean", model.batch_norm().running_mean}, {"var", model.batch_norm().running_var}}},
        {"concrete", {{"logit", model.concrete().logit_param()[0]},
                      {"rate", model.concrete().rate()},
                      {"temperature", model.concrete().temperature()}}},
        {"parameters", params},
    };
    j["input_norm"] = model.input_norm() ? nlohmann::json(*model.input_norm()) : nlohmann::json(nullptr);
    return j;
}

inline SequenceRegressor load_checkpoint(const nlohmann::json& j) {
    try {
        if (j.value("format", "") != checkpoint_format) throw DataError("checkpoint: not an mctd checkpoint");
        if (j.value("version", 0) != checkpoint_version) {
            throw DataError("checkpoint: unsupported version " + std::to_string(j.value("version", 0)));
        }
        SequenceRegressor model(j.at("model").get<ModelConfig>(), j.at("method").get<MethodConfig>());
        model.set_target_scale(j.at("target_scale").at("mean"), j.at("target_scale").at("std"));
        const auto& params = j.at("parameters");
        for (auto& p : model.parameters()) {
            if (!params.contains(p.name)) throw DataError("checkpoint: missing parameter '" + p.name + "'");
            const auto values = params[p.name].at("values").get<std::vector<double>>();
            const auto shape = params[p.name].at("shape").get<Shape>();
            if (shape != p.tensor.shape() || values.size() != p.tensor.numel()) {
                throw DataError("checkpoint: parameter '" + p.name + "' has shape " + shape_str(shape) +
                                ", model expects " + shape_str(p.tensor.shape()));
            }
            std::copy(values.begin(), values.end(), p.tensor.mutable_values().begin());
        }
        model.batch_norm().running_mean = j.at("batch_norm_running").at("mean").get<std::vector<double>>();
        model.batch_norm().running_var = j.at("batch_norm_running").at("var").get<std::vector<double>>();
        model.concrete().logit_param().mutable_values()[0] = j.at("concrete").at("logit").get<double>();
        model.concrete().set_temperature(j.at("concrete").at("temperature").get<double>());
        if (j.contains("input_norm") && !j["input_norm"].is_null()) model.set_input_norm(j["input_norm"].get<NormStats>());
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint: malformed file: ") + e.what());
    }
}

inline void write_checkpoint(const SequenceRegressor& model, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open '" + path + "' for writing");
    os << save_checkpoint(model).dump(1) << '\n';
}

inline SequenceRegressor read_checkpoint(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open checkpoint '" + path + "'");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint '" + path + "': " + e.what());
    }
    return load_checkpoint(j);
}

}  // namespace mctd
