#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "droplora/adapters.hpp"
#include "droplora/errors.hpp"
#include "droplora/linalg.hpp"
#include "droplora/nets.hpp"
#include "droplora/rng.hpp"
#include "droplora/tensor.hpp"
#include "droplora/training.hpp"

namespace droplora {

struct RecoveryBatch {
    TensorPtr x;
    TensorPtr y;
};

/// Noise-free low-rank recovery: a frozen base map plus a hidden update of
/// exact rank k; the adapter has to reproduce the update from input/output
/// pairs alone.
struct RecoveryTask {
    TensorPtr W0;         // m x n, frozen
    TensorPtr delta_star; // m x n, rank exactly k
    TensorPtr target_W;   // W0 + delta_star
    std::size_t m = 0, n = 0, k = 0;
    RecoveryBatch eval;

    RecoveryBatch make_batch(Rng& rng, std::size_t batch) const {
        auto x = zeros({n, batch});
        for (double& v : x->data) v = rng.normal();
        auto y = zeros({m, batch});
        detail::mat_mut(y->data, m, batch) = detail::mat(*target_W) * detail::mat(*x);
        return {x, y};
    }

    const RecoveryBatch& eval_batch() const { return eval; }

    TensorPtr loss(Tape& tape, const TensorPtr& pred, const RecoveryBatch& batch) const {
        return mean_squared_error(tape, pred, batch.y);
    }
};

/// delta_star = U V^T with k-column factors of N(0, 1/k) entries, so the rank
/// is exactly k (almost surely) and the update's scale is k-independent.
inline RecoveryTask make_recovery_task(std::size_t m, std::size_t n, std::size_t k, Rng& rng,
                                       std::size_t eval_batch = 256) {
    if (k > std::min(m, n))
        throw ContractError("recovery task rank k = " + std::to_string(k) +
                            " exceeds min(m, n) = " + std::to_string(std::min(m, n)));
    RecoveryTask task;
    task.m = m;
    task.n = n;
    task.k = k;
    task.delta_star = zeros({m, n});
    if (k > 0) {
        auto u = zeros({m, k});
        auto v = zeros({n, k});
        const double s = 1.0 / std::sqrt(static_cast<double>(k));
        for (double& e : u->data) e = rng.normal() * s;
        for (double& e : v->data) e = rng.normal() * s;
        detail::mat_mut(task.delta_star->data, m, n) =
            detail::mat(*u) * detail::mat(*v).transpose();
    }
    task.W0 = detail::random_weight(m, n, rng);
    task.target_W = zeros({m, n});
    for (std::size_t i = 0; i < task.target_W->numel(); ++i)
        task.target_W->data[i] = task.W0->data[i] + task.delta_star->data[i];
    task.eval = task.make_batch(rng, eval_batch);
    return task;
}

/// || (alpha/r) B A - delta_star ||_F / || delta_star ||_F
inline double relative_delta_error(const LowRankAdapter& adapter, const TensorPtr& delta_star) {
    auto learned = adapter_delta(adapter);
    double num = 0.0;
    for (std::size_t i = 0; i < learned->numel(); ++i) {
        const double e = learned->data[i] - delta_star->data[i];
        num += e * e;
    }
    return std::sqrt(num) / frobenius_norm(delta_star);
}

// ---------------------------------------------------------------------------
// Pruning-rate x rank sweep.
// ---------------------------------------------------------------------------

struct SweepSpec {
    std::vector<double> pruning_rates = {0.1, 0.2, 0.3, 0.4, 0.5};
    std::vector<std::size_t> ranks = {8, 16, 32, 64};
    std::size_t repeats = 3;
    std::uint64_t base_seed = 42;
    bool dedup_lora = false; // emit LoRA once per (rank, repeat) instead of per rate
    double input_dropout = 0.05;
    bool mask_rescale = true;

    void validate() const {
        for (double r : pruning_rates)
            if (!(r >= 0.0 && r < 1.0))
                throw ConfigError("sweep pruning rate must lie in [0, 1)");
        for (std::size_t r : ranks)
            if (r < 1) throw ConfigError("sweep rank must be >= 1");
        if (repeats < 1) throw ConfigError("sweep repeats must be >= 1");
    }
};

struct SweepRow {
    std::string method;
    std::size_t rank = 0;
    double pruning_rate = 0.0;
    std::size_t repeat = 0;
    std::uint64_t seed = 0;
    double final_train_loss = std::numeric_limits<double>::quiet_NaN();
    double final_eval_loss = std::numeric_limits<double>::quiet_NaN();
    std::size_t steps = 0;
    double wall_seconds = 0.0;
    std::string status = "ok";
};

namespace detail {

inline std::string g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace detail

/// Child seed for one sweep cell. LoRA ignores the pruning rate and DropLoRA
/// at rate zero is LoRA, so both canonicalize to the (lora, 0) tag: rows that
/// are mathematically the same run share a seed and reproduce each other.
inline std::uint64_t sweep_cell_seed(std::uint64_t base, Method method, double rate,
                                     std::size_t rank, std::size_t repeat) {
    const bool reduces_to_lora = method == Method::lora || rate == 0.0;
    const std::string tag = "cell/method=" + std::string(reduces_to_lora ? "lora" : "droplora") +
                            "/rate=" + detail::g17(reduces_to_lora ? 0.0 : rate) +
                            "/rank=" + std::to_string(rank) +
                            "/repeat=" + std::to_string(repeat);
    return derive_seed(base, tag);
}

/// One independently reproducible sweep cell: probe + adapter on the shared
/// task, trained with the cell-derived seed. An aborted child run yields a
/// "failed" row instead of killing the sweep.
inline SweepRow run_sweep_cell(const RecoveryTask& task, const TrainConfig& train_config,
                               const SweepSpec& spec, Method method, double rate,
                               std::size_t rank, std::size_t repeat) {
    SweepRow row;
    row.method = to_string(method);
    row.rank = rank;
    row.pruning_rate = rate;
    row.repeat = repeat;
    row.seed = sweep_cell_seed(spec.base_seed, method, rate, rank, repeat);

    AdapterConfig acfg;
    acfg.rank = rank;
    acfg.alpha = 2.0 * static_cast<double>(rank);
    acfg.pruning_prob = method == Method::droplora ? rate : 0.0;
    acfg.input_dropout = spec.input_dropout;
    acfg.mask_rescale = spec.mask_rescale;
    acfg.targets = {"W"};
    acfg.seed = row.seed;
    acfg.method = method;

    TrainConfig tcfg = train_config;
    tcfg.seed = row.seed;

    auto model = LinearProbe::from_weight(task.W0);
    Rng attach_rng(derive_seed(row.seed, "attach"));
    attach_adapters(model, acfg, attach_rng);

    const auto t0 = std::chrono::steady_clock::now();
    try {
        auto result = train_loop(model, task, tcfg);
        row.final_train_loss = result.final_train_loss;
        row.final_eval_loss = result.final_eval.loss;
        row.steps = result.steps;
    } catch (const TrainingAbort&) {
        row.status = "failed";
        row.steps = tcfg.total_steps();
    }
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return row;
}

/// Full (method x rate x rank x repeat) grid in canonical order.
inline std::vector<SweepRow> run_sweep(const SweepSpec& spec, const RecoveryTask& task,
                                       const TrainConfig& train_config) {
    spec.validate();
    std::vector<SweepRow> rows;
    for (Method method : {Method::lora, Method::droplora}) {
        for (double rate : spec.pruning_rates) {
            if (method == Method::lora && spec.dedup_lora && rate != spec.pruning_rates.front())
                continue;
            for (std::size_t rank : spec.ranks) {
                for (std::size_t repeat = 0; repeat < spec.repeats; ++repeat) {
                    auto row = run_sweep_cell(task, train_config, spec, method, rate, rank, repeat);
                    if (method == Method::lora && spec.dedup_lora) row.pruning_rate = 0.0;
                    rows.push_back(std::move(row));
                }
            }
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Subspace drift diagnostics.
// ---------------------------------------------------------------------------

struct TraceInterval {
    std::size_t from_step = 0;
    std::size_t to_step = 0;
    bool defined = false;       // false when either endpoint is a zero matrix
    std::vector<double> angles; // radians, ascending
};

struct SubspaceTrace {
    std::vector<std::size_t> steps;
    std::vector<TensorPtr> bases; // orthonormal columns; null where undefined
    std::vector<TraceInterval> intervals;
};

/// Principal angles between the column spaces of consecutive snapshots
/// (typically B, A^T or the merged delta). Zero-matrix snapshots have no
/// column space; the touching intervals are reported as undefined.
inline SubspaceTrace subspace_trace(const std::vector<std::pair<std::size_t, TensorPtr>>& snapshots) {
    if (snapshots.size() < 2)
        throw ContractError("subspace_trace needs at least two snapshots, got " +
                            std::to_string(snapshots.size()));
    SubspaceTrace trace;
    for (const auto& [step, snap] : snapshots) {
        trace.steps.push_back(step);
        trace.bases.push_back(orthonormal_column_basis(snap));
    }
    for (std::size_t i = 0; i + 1 < trace.bases.size(); ++i) {
        TraceInterval interval;
        interval.from_step = trace.steps[i];
        interval.to_step = trace.steps[i + 1];
        if (trace.bases[i] && trace.bases[i + 1]) {
            interval.defined = true;
            interval.angles = principal_angles(trace.bases[i], trace.bases[i + 1]);
        }
        trace.intervals.push_back(std::move(interval));
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Block-host variant of the recovery task: a teacher block whose target
// projections were shifted by hidden rank-k updates; the student fits
// adapters to match the teacher's outputs.
// ---------------------------------------------------------------------------

struct BlockRecoveryTask {
    TinyTransformerBlock teacher; // perturbed, adapter-free
    TinyTransformerBlock base;    // clean base the student adapts
    std::size_t d = 0, k = 0;
    RecoveryBatch eval;

    RecoveryBatch make_batch(Rng& rng, std::size_t tokens) const {
        auto x = zeros({d, tokens});
        for (double& v : x->data) v = rng.normal();
        Tape scratch;
        auto& t = const_cast<TinyTransformerBlock&>(teacher); // forward caches attention only
        return {x, t.forward(scratch, x)};
    }

    const RecoveryBatch& eval_batch() const { return eval; }

    TensorPtr loss(Tape& tape, const TensorPtr& pred, const RecoveryBatch& batch) const {
        return mean_squared_error(tape, pred, batch.y);
    }
};

inline BlockRecoveryTask make_block_recovery_task(std::size_t d, std::size_t k, Rng& rng,
                                                  std::size_t eval_tokens = 64) {
    BlockRecoveryTask task;
    task.d = d;
    task.k = k;
    task.base = TinyTransformerBlock::random(d, rng);
    task.teacher = task.base;
    for (auto* slot : task.teacher.slots()) {
        const auto valid = task.teacher.valid_targets();
        if (std::find(valid.begin(), valid.end(), slot->name) == valid.end()) continue;
        const std::size_t m = slot->W0->rows(), n = slot->W0->cols();
        const std::size_t kk = std::min(k, std::min(m, n));
        auto u = zeros({m, kk});
        auto v = zeros({n, kk});
        // Scaled so the hidden update is comparable to the base weight.
        const double s = 1.0 / std::sqrt(static_cast<double>(kk) * static_cast<double>(n));
        for (double& e : u->data) e = rng.normal() * s;
        for (double& e : v->data) e = rng.normal();
        auto shifted = zeros({m, n});
        detail::mat_mut(shifted->data, m, n) =
            detail::mat(*slot->W0) + detail::mat(*u) * detail::mat(*v).transpose();
        slot->W0 = shifted;
    }
    task.eval = task.make_batch(rng, eval_tokens);
    return task;
}

} // namespace droplora
