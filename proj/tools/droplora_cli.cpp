#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "droplora/droplora.hpp"

namespace fs = std::filesystem;
using namespace droplora;

namespace {

struct CliState {
    RunConfig cfg;
    bool alpha_given = false;   // --alpha or config file pinned alpha
    bool targets_given = false; // --targets or config file pinned targets
    std::string checkpoint;
    std::string out_file;
    std::string snapshots_dir;
    std::string quantity = "B";
    std::string target;
    std::string method = "droplora";
};

/// The config file (when present) is folded in before CLI11 binds flags, so
/// flags always win: defaults < file < flags.
void preload_config_file(CliState& state, int argc, char** argv) {
    std::string path;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--config" && i + 1 < argc) path = argv[i + 1];
        else if (arg.rfind("--config=", 0) == 0) path = arg.substr(9);
    }
    if (path.empty()) return;
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    merge_from_json(state.cfg, j);
    if (j.contains("adapter")) {
        state.alpha_given = state.alpha_given || j["adapter"].contains("alpha");
        state.targets_given = state.targets_given || j["adapter"].contains("targets");
    }
}

void add_run_flags(CLI::App* cmd, CliState& state) {
    cmd->add_option("--config", "JSON config file merged under the flags")
        ->check(CLI::ExistingFile);
    cmd->add_option("--host", state.cfg.host, "adapter host: block or probe");
    cmd->add_option("--method", state.method, "lora or droplora");
    cmd->add_option("--rank", state.cfg.adapter.rank, "adapter rank r");
    auto* alpha =
        cmd->add_option("--alpha", state.cfg.adapter.alpha, "branch scale numerator (default 2r)");
    cmd->add_option("--pruning-rate", state.cfg.adapter.pruning_prob,
                    "per-step probability of dropping a rank dimension");
    cmd->add_option("--dropout", state.cfg.adapter.input_dropout,
                    "elementwise dropout on the adapter branch input");
    auto* targets = cmd->add_option("--targets", state.cfg.adapter.targets,
                                    "projections to adapt (comma separated)")
                        ->delimiter(',');
    cmd->add_option("--seed", state.cfg.adapter.seed, "adapter init/mask seed");
    cmd->add_flag_callback(
        "--no-mask-rescale", [&state] { state.cfg.adapter.mask_rescale = false; },
        "drop the 1/(1-p) survivor rescale (pure binary mask)");
    cmd->add_option("--init-sigma", state.cfg.adapter.init_sigma,
                    "Gaussian init stddev for A (0 = 1/r)");

    cmd->add_option("--lr", state.cfg.train.learning_rate, "peak learning rate");
    cmd->add_option("--batch", state.cfg.train.batch_size, "batch size");
    cmd->add_option("--warmup", state.cfg.train.warmup_steps, "linear warmup steps");
    cmd->add_option("--epochs", state.cfg.train.epochs, "training epochs");
    cmd->add_option("--steps-per-epoch", state.cfg.train.steps_per_epoch, "steps per epoch");
    cmd->add_option("--weight-decay", state.cfg.train.weight_decay, "decoupled weight decay");
    cmd->add_option("--train-seed", state.cfg.train.seed, "data-order seed");

    cmd->add_option("--m", state.cfg.task.m, "task rows (block width d for the block host)");
    cmd->add_option("--n", state.cfg.task.n, "task columns (probe host)");
    cmd->add_option("--true-rank", state.cfg.task.true_rank, "rank of the hidden update");
    cmd->add_option("--task-seed", state.cfg.task.task_seed, "task construction seed");
    cmd->add_option("--eval-batch", state.cfg.task.eval_batch, "fixed eval batch size");

    cmd->add_option("--out", state.cfg.out_dir, "output directory");
    cmd->add_option("--snapshot-every", state.cfg.snapshot_every,
                    "write an adapter snapshot every N steps (0 = never)");

    cmd->callback([&state, alpha, targets] {
        state.cfg.adapter.method = method_from_string(state.method);
        if (alpha->count()) state.alpha_given = true;
        if (targets->count()) state.targets_given = true;
        if (!state.alpha_given)
            state.cfg.adapter.alpha = 2.0 * static_cast<double>(state.cfg.adapter.rank);
        if (!state.targets_given && state.cfg.host == "probe")
            state.cfg.adapter.targets = {"W"};
    });
}

void write_config_echo(const fs::path& dir, const RunConfig& cfg) {
    std::ofstream out(dir / "config.json");
    out << to_json(cfg).dump(2) << "\n";
}

template <typename Model, typename Task>
int run_training(CliState& state, Model& model, Task& task) {
    RunConfig& cfg = state.cfg;
    attach_from_config(model, cfg);
    const fs::path out(cfg.out_dir);
    fs::create_directories(out);
    if (cfg.snapshot_every) fs::create_directories(out / "snapshots");
    write_config_echo(out, cfg);

    TrainHooks hooks;
    hooks.snapshot_every = cfg.snapshot_every;
    hooks.on_snapshot = [&](std::size_t step) {
        char name[32];
        std::snprintf(name, sizeof(name), "step_%06zu.dlra", step);
        save_adapter_checkpoint(out / "snapshots" / name, cfg, model, step);
    };
    auto result = train_loop(model, task, cfg.train, hooks);
    write_metrics(out / "metrics.csv", result.metrics);
    save_adapter_checkpoint(out / "checkpoint.dlra", cfg, model, result.steps);
    std::cout << "steps " << result.steps << "\n"
              << "final_train_loss " << format_double(result.final_train_loss) << "\n"
              << "final_eval_loss " << format_double(result.final_eval.loss) << "\n"
              << "checkpoint " << (out / "checkpoint.dlra").string() << "\n";
    return 0;
}

int cmd_train(CliState& state) {
    state.cfg.validate();
    if (state.cfg.host == "probe") {
        auto task = make_probe_task(state.cfg);
        auto model = LinearProbe::from_weight(task.W0);
        return run_training(state, model, task);
    }
    auto task = make_block_task(state.cfg);
    auto model = task.base;
    return run_training(state, model, task);
}

int cmd_eval(CliState& state) {
    CheckpointInfo info;
    auto metrics = evaluate_checkpoint(state.checkpoint, &info);
    std::cout << "kind " << info.kind << "\n"
              << "eval_loss " << format_double(metrics.loss) << "\n";
    if (!state.out_file.empty()) {
        // Inference never prunes, so the eval row reports the full rank active.
        write_metrics(state.out_file,
                      {{info.step_count, "eval", metrics.loss, 0.0,
                        static_cast<double>(info.config.adapter.rank)}});
    }
    return 0;
}

int cmd_merge(CliState& state) {
    auto ck = load_checkpoint(state.checkpoint);
    auto info = parse_metadata(ck);
    if (info.kind != "adapter")
        throw ContractError("merge expects an adapter checkpoint, got kind '" + info.kind + "'");
    const fs::path out =
        state.out_file.empty() ? fs::path(state.checkpoint).replace_extension(".merged.dlra")
                               : fs::path(state.out_file);
    if (info.config.host == "probe") {
        auto task = make_probe_task(info.config);
        auto model = LinearProbe::from_weight(task.W0);
        attach_from_config(model, info.config);
        load_adapter_tensors(model, ck);
        save_merged_checkpoint(out, info.config, model, info.step_count);
    } else {
        auto task = make_block_task(info.config);
        auto model = task.base;
        attach_from_config(model, info.config);
        load_adapter_tensors(model, ck);
        save_merged_checkpoint(out, info.config, model, info.step_count);
    }
    std::cout << "merged " << out.string() << "\n";
    return 0;
}

int cmd_sweep(CliState& state) {
    RunConfig& cfg = state.cfg;
    cfg.host = "probe"; // the sweep grid runs on the matrix recovery task
    cfg.adapter.targets = {"W"};
    cfg.validate();
    auto task = make_probe_task(cfg);
    auto rows = run_sweep(cfg.sweep, task, cfg.train);
    const fs::path out(cfg.out_dir);
    fs::create_directories(out);
    write_config_echo(out, cfg);
    write_sweep(out / "sweep.csv", rows);
    std::size_t failed = 0;
    for (const auto& r : rows) failed += r.status != "ok";
    std::cout << "cells " << rows.size() << "\n"
              << "failed " << failed << "\n"
              << "table " << (out / "sweep.csv").string() << "\n";
    return 0;
}

int cmd_trace(CliState& state) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(state.snapshots_dir))
        if (entry.path().extension() == ".dlra") files.push_back(entry.path());
    if (files.size() < 2)
        throw ContractError("trace needs at least two snapshot files in '" +
                            state.snapshots_dir + "'");
    std::map<std::size_t, TensorPtr> by_step;
    for (const auto& file : files) {
        auto ck = load_checkpoint(file);
        auto info = parse_metadata(ck);
        std::string target = state.target.empty() ? info.config.adapter.targets.at(0)
                                                  : state.target;
        TensorPtr snap;
        Tape scratch;
        if (state.quantity == "B") {
            snap = ck.require(target + ".B");
        } else if (state.quantity == "A") {
            snap = transpose(scratch, ck.require(target + ".A")); // row space of A
        } else if (state.quantity == "delta") {
            const double scaling = info.config.adapter.scaling();
            snap = scale(scratch,
                         matmul(scratch, ck.require(target + ".B"), ck.require(target + ".A")),
                         scaling);
        } else {
            throw ConfigError("unknown trace quantity '" + state.quantity +
                              "' (expected B, A or delta)");
        }
        by_step[info.step_count] = snap;
    }
    std::vector<std::pair<std::size_t, TensorPtr>> snapshots(by_step.begin(), by_step.end());
    auto trace = subspace_trace(snapshots);
    const fs::path out = state.out_file.empty() ? fs::path("angles.csv") : fs::path(state.out_file);
    write_trace(out, trace);
    std::cout << "intervals " << trace.intervals.size() << "\n"
              << "angles " << out.string() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"DropLoRA: low-rank adapters with per-step rank pruning"};
    app.require_subcommand(1);

    CliState state;
    try {
        preload_config_file(state, argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    auto* train = app.add_subcommand("train", "fit adapters on a synthetic task");
    add_run_flags(train, state);

    auto* eval = app.add_subcommand("eval", "report metrics for a saved checkpoint");
    eval->add_option("--checkpoint", state.checkpoint, "checkpoint file")
        ->required()
        ->check(CLI::ExistingFile);
    eval->add_option("--out", state.out_file, "also write a metrics CSV row");

    auto* merge = app.add_subcommand("merge", "fold adapters into dense base weights");
    merge->add_option("--checkpoint", state.checkpoint, "adapter checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    merge->add_option("--out", state.out_file, "output file (.merged.dlra next to the input "
                                               "when omitted)");

    auto* sweep = app.add_subcommand("sweep", "pruning-rate x rank grid on the recovery task");
    add_run_flags(sweep, state);
    sweep->add_option("--rates", state.cfg.sweep.pruning_rates, "pruning rates")->delimiter(',');
    sweep->add_option("--ranks", state.cfg.sweep.ranks, "adapter ranks")->delimiter(',');
    sweep->add_option("--repeats", state.cfg.sweep.repeats, "repeats per cell");
    sweep->add_option("--sweep-seed", state.cfg.sweep.base_seed, "base seed for cell derivation");
    sweep->add_flag("--dedup-lora", state.cfg.sweep.dedup_lora,
                    "emit LoRA once per (rank, repeat) instead of per rate");
    sweep->add_option("--sweep-dropout", state.cfg.sweep.input_dropout,
                      "branch input dropout used by sweep cells");

    auto* trace = app.add_subcommand("trace", "principal angles between adapter snapshots");
    trace->add_option("--snapshots", state.snapshots_dir, "directory of snapshot checkpoints")
        ->required()
        ->check(CLI::ExistingDirectory);
    trace->add_option("--quantity", state.quantity, "B (default), A, or delta");
    trace->add_option("--target", state.target, "projection name (default: first configured)");
    trace->add_option("--out", state.out_file, "angle CSV path (default angles.csv)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(state);
        if (eval->parsed()) return cmd_eval(state);
        if (merge->parsed()) return cmd_merge(state);
        if (sweep->parsed()) return cmd_sweep(state);
        if (trace->parsed()) return cmd_trace(state);
    } catch (const IntegrityError& e) {
        std::cerr << "integrity error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
