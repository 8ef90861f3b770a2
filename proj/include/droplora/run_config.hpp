#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "droplora/adapters.hpp"
#include "droplora/errors.hpp"
#include "droplora/experiments.hpp"
#include "droplora/training.hpp"

namespace droplora {

/// Synthetic-task geometry. The probe host recovers an m x n rank-k update;
/// the block host uses m as the model width d with rank-k shifts per target.
struct TaskSpec {
    std::size_t m = 64;
    std::size_t n = 64;
    std::size_t true_rank = 8;
    std::uint64_t task_seed = 7;
    std::size_t eval_batch = 256;
};

/// Fully resolved run description: defaults, then an optional config file,
/// then command-line flags. The result is echoed verbatim into every output
/// artifact so any run can be reproduced from its own outputs.
struct RunConfig {
    std::string host = "block"; // "block" or "probe"
    AdapterConfig adapter;
    TrainConfig train;
    TaskSpec task;
    SweepSpec sweep;
    std::string out_dir = "runs/out";
    std::size_t snapshot_every = 0;
    std::string activation = "gelu"; // fixed; recorded for provenance

    void validate() const {
        if (host != "block" && host != "probe")
            throw ConfigError("host must be 'block' or 'probe', got '" + host + "'");
        adapter.validate();
        train.validate();
        sweep.validate();
    }
};

inline void merge_from_json(AdapterConfig& c, const nlohmann::json& j) {
    c.rank = j.value("rank", c.rank);
    c.pruning_prob = j.value("pruning_prob", c.pruning_prob);
    c.alpha = j.value("alpha", c.alpha);
    c.input_dropout = j.value("input_dropout", c.input_dropout);
    c.targets = j.value("targets", c.targets);
    c.seed = j.value("seed", c.seed);
    if (j.contains("method")) c.method = method_from_string(j.at("method").get<std::string>());
    c.mask_rescale = j.value("mask_rescale", c.mask_rescale);
    c.init_sigma = j.value("init_sigma", c.init_sigma);
}

inline nlohmann::json to_json(const AdapterConfig& c) {
    return {{"rank", c.rank},
            {"pruning_prob", c.pruning_prob},
            {"alpha", c.alpha},
            {"input_dropout", c.input_dropout},
            {"targets", c.targets},
            {"seed", c.seed},
            {"method", to_string(c.method)},
            {"mask_rescale", c.mask_rescale},
            {"init_sigma", c.init_sigma}};
}

inline void merge_from_json(TrainConfig& c, const nlohmann::json& j) {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.epochs = j.value("epochs", c.epochs);
    c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
    c.scheduler = j.value("scheduler", c.scheduler);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.seed = j.value("seed", c.seed);
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"warmup_steps", c.warmup_steps},
            {"epochs", c.epochs},
            {"steps_per_epoch", c.steps_per_epoch},
            {"scheduler", c.scheduler},
            {"weight_decay", c.weight_decay},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"eps", c.eps},
            {"seed", c.seed}};
}

inline void merge_from_json(TaskSpec& c, const nlohmann::json& j) {
    c.m = j.value("m", c.m);
    c.n = j.value("n", c.n);
    c.true_rank = j.value("true_rank", c.true_rank);
    c.task_seed = j.value("task_seed", c.task_seed);
    c.eval_batch = j.value("eval_batch", c.eval_batch);
}

inline nlohmann::json to_json(const TaskSpec& c) {
    return {{"m", c.m},
            {"n", c.n},
            {"true_rank", c.true_rank},
            {"task_seed", c.task_seed},
            {"eval_batch", c.eval_batch}};
}

inline void merge_from_json(SweepSpec& c, const nlohmann::json& j) {
    c.pruning_rates = j.value("pruning_rates", c.pruning_rates);
    c.ranks = j.value("ranks", c.ranks);
    c.repeats = j.value("repeats", c.repeats);
    c.base_seed = j.value("base_seed", c.base_seed);
    c.dedup_lora = j.value("dedup_lora", c.dedup_lora);
    c.input_dropout = j.value("input_dropout", c.input_dropout);
    c.mask_rescale = j.value("mask_rescale", c.mask_rescale);
}

inline nlohmann::json to_json(const SweepSpec& c) {
    return {{"pruning_rates", c.pruning_rates},
            {"ranks", c.ranks},
            {"repeats", c.repeats},
            {"base_seed", c.base_seed},
            {"dedup_lora", c.dedup_lora},
            {"input_dropout", c.input_dropout},
            {"mask_rescale", c.mask_rescale}};
}

inline void merge_from_json(RunConfig& c, const nlohmann::json& j) {
    c.host = j.value("host", c.host);
    if (j.contains("adapter")) merge_from_json(c.adapter, j.at("adapter"));
    if (j.contains("train")) merge_from_json(c.train, j.at("train"));
    if (j.contains("task")) merge_from_json(c.task, j.at("task"));
    if (j.contains("sweep")) merge_from_json(c.sweep, j.at("sweep"));
    c.out_dir = j.value("out_dir", c.out_dir);
    c.snapshot_every = j.value("snapshot_every", c.snapshot_every);
    c.activation = j.value("activation", c.activation);
}

inline nlohmann::json to_json(const RunConfig& c) {
    return {{"host", c.host},
            {"adapter", to_json(c.adapter)},
            {"train", to_json(c.train)},
            {"task", to_json(c.task)},
            {"sweep", to_json(c.sweep)},
            {"out_dir", c.out_dir},
            {"snapshot_every", c.snapshot_every},
            {"activation", c.activation}};
}

} // namespace droplora
