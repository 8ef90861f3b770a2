#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "droplora/adapters.hpp"
#include "droplora/errors.hpp"
#include "droplora/nets.hpp"
#include "droplora/rng.hpp"
#include "droplora/tensor.hpp"

namespace droplora {

struct TrainConfig {
    double learning_rate = 3e-4;
    std::size_t batch_size = 128;
    std::size_t warmup_steps = 100;
    std::size_t epochs = 3;
    std::size_t steps_per_epoch = 200;
    std::string scheduler = "linear";
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 42;

    std::size_t total_steps() const { return epochs * steps_per_epoch; }

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (total_steps() < warmup_steps)
            throw ConfigError("total steps (" + std::to_string(total_steps()) +
                              ") must be >= warmup_steps (" + std::to_string(warmup_steps) + ")");
        if (scheduler != "linear") throw ConfigError("unknown scheduler '" + scheduler + "'");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
            throw ConfigError("beta1/beta2 must lie in [0, 1)");
        if (!(eps > 0.0)) throw ConfigError("eps must be positive");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    }
};

/// Linear ramp from 0 to the peak over warmup_steps, then linear decay to 0
/// at total_steps.
inline double lr_at(std::size_t step, const TrainConfig& config, std::size_t total_steps) {
    if (step > total_steps)
        throw ContractError("lr_at: step " + std::to_string(step) + " exceeds total " +
                            std::to_string(total_steps));
    if (config.warmup_steps > 0 && step < config.warmup_steps)
        return config.learning_rate * static_cast<double>(step) /
               static_cast<double>(config.warmup_steps);
    if (total_steps == config.warmup_steps) return config.learning_rate;
    return config.learning_rate * static_cast<double>(total_steps - step) /
           static_cast<double>(total_steps - config.warmup_steps);
}

/// First/second moment buffers for a fixed parameter list, plus the shared
/// step counter for bias correction.
class AdamWState {
public:
    explicit AdamWState(const std::vector<TensorPtr>& params) {
        for (const auto& p : params) {
            m_.emplace_back(p->numel(), 0.0);
            v_.emplace_back(p->numel(), 0.0);
        }
    }

    std::size_t step_count() const { return t_; }
    const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
    const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

    friend void adamw_step(const std::vector<TensorPtr>&, AdamWState&, double,
                           const TrainConfig&);

private:
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

/// Decoupled-weight-decay Adam update over the given parameters, reading
/// gradients populated by a completed backward pass.
inline void adamw_step(const std::vector<TensorPtr>& params, AdamWState& state, double lr,
                       const TrainConfig& config) {
    state.t_ += 1;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t_));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        if (!p.has_grad())
            throw ContractError("adamw_step: trainable parameter " + std::to_string(i) +
                                " has no gradient; run backward first");
        auto& m = state.m_[i];
        auto& v = state.v_[i];
        for (std::size_t j = 0; j < p.numel(); ++j) {
            const double g = p.grad[j];
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p.data[j] -= lr * config.weight_decay * p.data[j];
            p.data[j] -= lr * mhat / (std::sqrt(vhat) + config.eps);
        }
    }
}

struct MetricRow {
    std::size_t step;
    std::string split; // "train" or "eval"
    double loss;
    double lr;
    double mean_mask_popcount;
};

struct EvalMetrics {
    double loss = 0.0;
    std::optional<double> accuracy;
};

struct TrainResult {
    std::vector<MetricRow> metrics;
    std::size_t steps = 0;
    double final_train_loss = 0.0;
    EvalMetrics final_eval;
};

struct TrainHooks {
    std::function<void(const MetricRow&)> on_metric;
    std::function<void(std::size_t)> after_backward; // gradients still populated
    std::size_t snapshot_every = 0;
    std::function<void(std::size_t)> on_snapshot; // called with the completed step count
};

/// Eval-mode pass over the task's fixed eval batch. No masks are sampled, no
/// dropout applied and no generator advanced; adapter modes are restored on
/// exit.
template <typename Model, typename Task>
EvalMetrics evaluate(Model& model, Task& task) {
    auto adapters = adapters_of(model);
    std::vector<Mode> saved;
    saved.reserve(adapters.size());
    for (auto* a : adapters) {
        saved.push_back(a->mode);
        a->mode = Mode::eval;
    }
    const auto& batch = task.eval_batch();
    Tape tape;
    auto pred = model.forward(tape, batch.x);
    auto loss = task.loss(tape, pred, batch);
    EvalMetrics out;
    out.loss = loss->value();
    if constexpr (requires { task.accuracy(pred, batch); }) out.accuracy = task.accuracy(pred, batch);
    for (std::size_t i = 0; i < adapters.size(); ++i) adapters[i]->mode = saved[i];
    return out;
}

namespace detail {

template <typename Model>
double mean_mask_popcount(Model& model) {
    auto adapters = adapters_of(model);
    if (adapters.empty()) return 0.0;
    double total = 0.0;
    for (auto* a : adapters) total += static_cast<double>(a->step_mask.popcount());
    return total / static_cast<double>(adapters.size());
}

} // namespace detail

/// One optimizer step per iteration: fresh rank masks, forward in train mode,
/// backward, AdamW update, metric row. A non-finite loss aborts the run.
template <typename Model, typename Task>
TrainResult train_loop(Model& model, Task& task, const TrainConfig& config,
                       const TrainHooks& hooks = {}) {
    config.validate();
    set_mode(model, Mode::train);
    auto params = trainable_params(model);
    AdamWState state(params);
    Rng data_rng(derive_seed(config.seed, "data"));
    const std::size_t total = config.total_steps();

    TrainResult result;
    for (std::size_t step = 0; step < total; ++step) {
        resample_masks(model);
        auto batch = task.make_batch(data_rng, config.batch_size);
        Tape tape;
        auto pred = model.forward(tape, batch.x);
        auto loss = task.loss(tape, pred, batch);
        const double loss_value = loss->value();
        if (!std::isfinite(loss_value))
            throw TrainingAbort(step, "non-finite loss at step " + std::to_string(step));
        tape.backward(loss);
        if (hooks.after_backward) hooks.after_backward(step);
        const double lr = lr_at(step, config, total);
        adamw_step(params, state, lr, config);
        for (auto& p : params) p->zero_grad();

        MetricRow row{step, "train", loss_value, lr, detail::mean_mask_popcount(model)};
        result.metrics.push_back(row);
        if (hooks.on_metric) hooks.on_metric(row);
        result.final_train_loss = loss_value;
        if (hooks.snapshot_every && (step + 1) % hooks.snapshot_every == 0 && hooks.on_snapshot)
            hooks.on_snapshot(step + 1);
    }
    result.steps = total;
    result.final_eval = evaluate(model, task);
    MetricRow eval_row{total, "eval", result.final_eval.loss, 0.0,
                       detail::mean_mask_popcount(model)};
    result.metrics.push_back(eval_row);
    if (hooks.on_metric) hooks.on_metric(eval_row);
    return result;
}

} // namespace droplora
