#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "droplora/checkpoint.hpp"
#include "droplora/errors.hpp"
#include "droplora/experiments.hpp"
#include "droplora/nets.hpp"
#include "droplora/run_config.hpp"
#include "droplora/training.hpp"

namespace droplora {

// Glue between run configs, hosts and checkpoints. Everything here rebuilds
// deterministically from a config echo, which is what makes saved artifacts
// reproducible.

inline RecoveryTask make_probe_task(const RunConfig& cfg) {
    Rng rng(derive_seed(cfg.task.task_seed, "task"));
    return make_recovery_task(cfg.task.m, cfg.task.n, cfg.task.true_rank, rng,
                              cfg.task.eval_batch);
}

inline BlockRecoveryTask make_block_task(const RunConfig& cfg) {
    Rng rng(derive_seed(cfg.task.task_seed, "task"));
    return make_block_recovery_task(cfg.task.m, cfg.task.true_rank, rng, cfg.task.eval_batch);
}

template <typename Model>
void attach_from_config(Model& model, const RunConfig& cfg) {
    Rng rng(derive_seed(cfg.adapter.seed, "attach"));
    attach_adapters(model, cfg.adapter, rng);
}

/// A and B of every attached adapter, named "<target>.A" / "<target>.B".
template <typename Model>
std::vector<NamedTensor> adapter_tensors(Model& model) {
    std::vector<NamedTensor> out;
    for (auto* slot : model.slots()) {
        if (!slot->adapter) continue;
        out.push_back({slot->name + ".A", slot->adapter->A});
        out.push_back({slot->name + ".B", slot->adapter->B});
    }
    return out;
}

/// Copies stored adapter weights into an already-attached model.
template <typename Model>
void load_adapter_tensors(Model& model, const Checkpoint& ck) {
    for (auto* slot : model.slots()) {
        if (!slot->adapter) continue;
        for (auto [suffix, dst] :
             {std::pair{".A", slot->adapter->A}, std::pair{".B", slot->adapter->B}}) {
            auto src = ck.require(slot->name + suffix);
            if (src->shape != dst->shape)
                throw IntegrityError("checkpoint tensor '" + slot->name + suffix + "' has shape " +
                                     shape_str(src->shape) + ", model expects " +
                                     shape_str(dst->shape));
            dst->data = src->data;
        }
    }
}

inline std::string checkpoint_metadata(const RunConfig& cfg, const std::string& kind,
                                       std::size_t step_count) {
    nlohmann::json meta;
    meta["kind"] = kind;
    meta["format"] = kCheckpointVersion;
    meta["step_count"] = step_count;
    meta["created_unix"] = std::chrono::duration_cast<std::chrono::seconds>(
                               std::chrono::system_clock::now().time_since_epoch())
                               .count();
    meta["config"] = to_json(cfg);
    return meta.dump(2);
}

struct CheckpointInfo {
    std::string kind;
    std::size_t step_count = 0;
    RunConfig config;
};

inline CheckpointInfo parse_metadata(const Checkpoint& ck) {
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(ck.metadata_json);
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }
    CheckpointInfo info;
    info.kind = meta.value("kind", "adapter");
    info.step_count = meta.value("step_count", std::size_t{0});
    if (meta.contains("config")) merge_from_json(info.config, meta.at("config"));
    return info;
}

template <typename Model>
void save_adapter_checkpoint(const std::filesystem::path& path, const RunConfig& cfg,
                             Model& model, std::size_t step_count) {
    save_checkpoint(path, checkpoint_metadata(cfg, "adapter", step_count),
                    adapter_tensors(model));
}

/// Folds every adapter into its base weight and stores the dense results as
/// "<target>.W" in the same container format.
template <typename Model>
void save_merged_checkpoint(const std::filesystem::path& path, const RunConfig& cfg,
                            Model& model, std::size_t step_count) {
    std::vector<NamedTensor> tensors;
    for (auto* slot : model.slots()) {
        if (!slot->adapter) continue;
        tensors.push_back({slot->name + ".W", merge(slot->W0, *slot->adapter)});
    }
    save_checkpoint(path, checkpoint_metadata(cfg, "merged", step_count), tensors);
}

/// Replaces base weights with the merged dense weights from a "merged"
/// checkpoint; the model keeps no adapters.
template <typename Model>
void apply_merged_weights(Model& model, const Checkpoint& ck) {
    for (auto* slot : model.slots()) {
        auto merged = ck.find(slot->name + ".W");
        if (!merged) continue;
        if (merged->shape != slot->W0->shape)
            throw IntegrityError("merged tensor '" + slot->name + ".W' has shape " +
                                 shape_str(merged->shape) + ", model expects " +
                                 shape_str(slot->W0->shape));
        slot->W0 = merged;
        slot->adapter.reset();
    }
}

/// Rebuilds the host named by a checkpoint's config echo, restores weights,
/// and reports eval metrics on the regenerated task.
inline EvalMetrics evaluate_checkpoint(const std::filesystem::path& path,
                                       CheckpointInfo* info_out = nullptr) {
    auto ck = load_checkpoint(path);
    auto info = parse_metadata(ck);
    if (info_out) *info_out = info;
    const bool merged = info.kind == "merged";
    if (info.config.host == "probe") {
        auto task = make_probe_task(info.config);
        auto model = LinearProbe::from_weight(task.W0);
        if (merged) {
            apply_merged_weights(model, ck);
        } else {
            attach_from_config(model, info.config);
            load_adapter_tensors(model, ck);
        }
        return evaluate(model, task);
    }
    auto task = make_block_task(info.config);
    auto model = task.base;
    if (merged) {
        apply_merged_weights(model, ck);
    } else {
        attach_from_config(model, info.config);
        load_adapter_tensors(model, ck);
    }
    return evaluate(model, task);
}

} // namespace droplora
