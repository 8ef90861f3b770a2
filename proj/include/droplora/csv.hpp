#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "droplora/errors.hpp"
#include "droplora/experiments.hpp"
#include "droplora/training.hpp"

namespace droplora {

/// 17 significant digits: enough for a lossless float64 text round trip.
inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// One CSV value, pre-rendered. Doubles go through format_double so parsing
/// the file back reproduces them bitwise.
struct CsvCell {
    std::string text;
    CsvCell(const char* s) : text(s) {}
    CsvCell(std::string s) : text(std::move(s)) {}
    CsvCell(double v) : text(format_double(v)) {}
    CsvCell(std::uint64_t v) : text(std::to_string(v)) {}
    CsvCell(int v) : text(std::to_string(v)) {}
};

/// Header-then-rows writer that holds every row to the header's width.
class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
        : out_(path), width_(header.size()) {
        if (!out_) throw IntegrityError("cannot open '" + path.string() + "' for writing");
        write_line(header);
    }

    void row(const std::vector<CsvCell>& cells) {
        if (cells.size() != width_)
            throw ContractError("csv row has " + std::to_string(cells.size()) +
                                " fields, header has " + std::to_string(width_));
        std::vector<std::string> texts;
        texts.reserve(cells.size());
        for (const auto& c : cells) texts.push_back(c.text);
        write_line(texts);
    }

private:
    void write_line(const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) out_ << ',';
            out_ << fields[i];
        }
        out_ << '\n';
    }

    std::ofstream out_;
    std::size_t width_;
};

inline const std::vector<std::string>& metrics_header() {
    static const std::vector<std::string> h = {"step", "split", "loss", "lr",
                                               "mean_mask_popcount"};
    return h;
}

inline void write_metrics(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
    CsvWriter csv(path, metrics_header());
    for (const auto& r : rows)
        csv.row({r.step, r.split, r.loss, r.lr, r.mean_mask_popcount});
}

inline const std::vector<std::string>& sweep_header() {
    static const std::vector<std::string> h = {
        "method", "rank",  "pruning_rate", "repeat",       "seed",
        "final_train_loss", "final_eval_loss", "steps", "wall_seconds", "status"};
    return h;
}

inline void write_sweep(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
    CsvWriter csv(path, sweep_header());
    for (const auto& r : rows)
        csv.row({r.method, r.rank, r.pruning_rate, r.repeat, r.seed, r.final_train_loss,
                 r.final_eval_loss, r.steps, r.wall_seconds, r.status});
}

inline const std::vector<std::string>& trace_header() {
    static const std::vector<std::string> h = {"from_step", "to_step", "angle_index",
                                               "angle_radians", "status"};
    return h;
}

/// Long format: one row per principal angle; undefined intervals (a zero
/// snapshot on either end) yield a single row with an empty angle.
inline void write_trace(const std::filesystem::path& path, const SubspaceTrace& trace) {
    CsvWriter csv(path, trace_header());
    for (const auto& iv : trace.intervals) {
        if (!iv.defined) {
            csv.row({iv.from_step, iv.to_step, std::size_t{0}, "", "missing"});
            continue;
        }
        for (std::size_t i = 0; i < iv.angles.size(); ++i)
            csv.row({iv.from_step, iv.to_step, i, iv.angles[i], "ok"});
    }
}

} // namespace droplora
