#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "droplora/errors.hpp"
#include "droplora/rng.hpp"
#include "droplora/tensor.hpp"

namespace droplora {

enum class Method { lora, droplora };
enum class Mode { train, eval };

inline std::string to_string(Method m) { return m == Method::lora ? "lora" : "droplora"; }
inline Method method_from_string(const std::string& s) {
    if (s == "lora") return Method::lora;
    if (s == "droplora") return Method::droplora;
    throw ConfigError("unknown method '" + s + "' (expected lora or droplora)");
}

struct AdapterConfig {
    std::size_t rank = 32;
    double pruning_prob = 0.3;
    double alpha = 64.0; // defaults to 2 * rank
    double input_dropout = 0.05;
    std::vector<std::string> targets = {"Q", "K", "V", "Up", "Down"};
    std::uint64_t seed = 42;
    Method method = Method::droplora;
    bool mask_rescale = true;  // false keeps survivors unscaled (pure binary mask)
    double init_sigma = 0.0;   // 0 -> 1 / rank

    void validate() const {
        if (rank < 1) throw ConfigError("rank must be >= 1");
        if (!(pruning_prob >= 0.0 && pruning_prob < 1.0))
            throw ConfigError("pruning_prob must lie in [0, 1); p = 1 would prune every rank "
                              "dimension");
        if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
        if (!(input_dropout >= 0.0 && input_dropout < 1.0))
            throw ConfigError("input_dropout must lie in [0, 1)");
        if (!(init_sigma >= 0.0)) throw ConfigError("init_sigma must be >= 0");
    }

    double scaling() const { return alpha / static_cast<double>(rank); }
};

/// Per-step binary mask over the rank dimension. Survivors are rescaled by
/// 1 / (1 - p) in train mode so the masked branch is unbiased in expectation.
struct RankMask {
    std::vector<double> bits; // each entry exactly 0.0 or 1.0
    double keep_scale = 1.0;
    double p = 0.0;

    std::size_t size() const { return bits.size(); }
    std::size_t popcount() const {
        std::size_t n = 0;
        for (double b : bits) n += (b != 0.0);
        return n;
    }
    static RankMask ones(std::size_t r) { return {std::vector<double>(r, 1.0), 1.0, 0.0}; }
};

/// Each bit is dropped (set to 0) independently with probability p.
inline RankMask sample_mask(Rng& rng, std::size_t r, double p) {
    if (!(p >= 0.0 && p < 1.0))
        throw ContractError("mask pruning probability must lie in [0, 1), got " +
                            std::to_string(p));
    RankMask mask;
    mask.p = p;
    mask.keep_scale = 1.0 / (1.0 - p);
    mask.bits.resize(r);
    for (std::size_t i = 0; i < r; ++i) mask.bits[i] = rng.bernoulli(p) ? 0.0 : 1.0;
    return mask;
}

/// The trainable pair (A: r x n, B: m x r) around a frozen base weight.
/// B starts at zero, so a fresh adapter leaves the base function untouched.
struct LowRankAdapter {
    TensorPtr A;
    TensorPtr B;
    double scaling = 1.0; // alpha / r
    Mode mode = Mode::train;
    AdapterConfig config;
    RankMask step_mask;   // refreshed once per optimizer step when pruning
    Rng mask_rng{0};      // independent stream so mask draws never perturb data order
    Rng dropout_rng{0};

    std::size_t rank() const { return A->rows(); }
    std::size_t in_features() const { return A->cols(); }
    std::size_t out_features() const { return B->rows(); }

    void resample_mask() {
        if (config.method == Method::droplora && mode == Mode::train)
            step_mask = sample_mask(mask_rng, rank(), config.pruning_prob);
    }
};

inline LowRankAdapter init_adapter(const AdapterConfig& config, std::size_t m, std::size_t n,
                                   Rng& rng) {
    config.validate();
    if (m < 1 || n < 1) throw ContractError("adapter dimensions must be >= 1");
    const double sigma =
        config.init_sigma > 0.0 ? config.init_sigma : 1.0 / static_cast<double>(config.rank);
    LowRankAdapter adapter;
    adapter.config = config;
    adapter.scaling = config.scaling();
    adapter.A = zeros({config.rank, n}, /*requires_grad=*/true);
    for (double& v : adapter.A->data) v = rng.normal(0.0, sigma);
    adapter.B = zeros({m, config.rank}, /*requires_grad=*/true);
    adapter.step_mask = RankMask::ones(config.rank);
    adapter.mask_rng = Rng(rng.next_u64());
    adapter.dropout_rng = Rng(rng.next_u64());
    return adapter;
}

namespace detail {

/// Inverted elementwise dropout on the adapter branch input; train mode only.
inline TensorPtr branch_input(Tape& tape, const TensorPtr& x, LowRankAdapter& adapter) {
    if (adapter.mode != Mode::train || adapter.config.input_dropout <= 0.0) return x;
    const double q = adapter.config.input_dropout;
    auto mask = zeros(x->shape);
    for (double& v : mask->data)
        v = adapter.dropout_rng.bernoulli(q) ? 0.0 : 1.0 / (1.0 - q);
    return hadamard(tape, x, mask);
}

} // namespace detail

/// h = W0 x + (alpha / r) * B (A x), with input dropout on the branch in
/// train mode.
inline TensorPtr forward_lora(Tape& tape, const TensorPtr& x, const TensorPtr& W0,
                              LowRankAdapter& adapter) {
    auto base = matmul(tape, W0, x);
    auto z = matmul(tape, adapter.A, detail::branch_input(tape, x, adapter));
    auto branch = matmul(tape, adapter.B, z);
    return add(tape, base, scale(tape, branch, adapter.scaling));
}

/// Masked forward: the (rescaled) rank mask is applied exactly once to the
/// hidden activation A x, which for a binary mask is equivalent to masking
/// both factors. In eval mode the mask is ignored entirely.
inline TensorPtr forward_droplora(Tape& tape, const TensorPtr& x, const TensorPtr& W0,
                                  LowRankAdapter& adapter, const RankMask& mask) {
    if (adapter.mode == Mode::eval) return forward_lora(tape, x, W0, adapter);
    if (mask.size() != adapter.rank())
        throw DimensionError("rank mask length " + std::to_string(mask.size()) +
                             " does not match adapter rank " + std::to_string(adapter.rank()));
    const double s = adapter.config.mask_rescale ? mask.keep_scale : 1.0;
    auto gate = zeros({mask.size()});
    for (std::size_t i = 0; i < mask.size(); ++i) gate->data[i] = mask.bits[i] * s;
    auto base = matmul(tape, W0, x);
    auto z = matmul(tape, adapter.A, detail::branch_input(tape, x, adapter));
    auto branch = matmul(tape, adapter.B, hadamard(tape, z, gate));
    return add(tape, base, scale(tape, branch, adapter.scaling));
}

// ---------------------------------------------------------------------------
// Eager (tape-free) weight-space views.
// ---------------------------------------------------------------------------

/// (B . M)(M . A) with the pure binary mask: column i of B and row i of A are
/// zeroed together. No survivor rescale and no alpha scaling; this is the
/// rank-analysis view of the masked update.
inline TensorPtr masked_delta(const LowRankAdapter& adapter, const RankMask& mask) {
    if (mask.size() != adapter.rank())
        throw DimensionError("rank mask length " + std::to_string(mask.size()) +
                             " does not match adapter rank " + std::to_string(adapter.rank()));
    const std::size_t m = adapter.out_features(), r = adapter.rank(), n = adapter.in_features();
    auto bm = zeros({m, r});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < r; ++j) bm->data[i * r + j] = adapter.B->data[i * r + j] * mask.bits[j];
    auto ma = zeros({r, n});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n; ++j) ma->data[i * n + j] = mask.bits[i] * adapter.A->data[i * n + j];
    auto out = zeros({m, n});
    detail::mat_mut(out->data, m, n) = detail::mat(*bm) * detail::mat(*ma);
    return out;
}

/// (alpha / r) * B A — the eval-mode update the adapter contributes.
inline TensorPtr adapter_delta(const LowRankAdapter& adapter) {
    auto out = zeros({adapter.out_features(), adapter.in_features()});
    detail::mat_mut(out->data, out->rows(), out->cols()) =
        adapter.scaling * (detail::mat(*adapter.B) * detail::mat(*adapter.A));
    return out;
}

/// W = W0 + (alpha / r) B A. The returned dense weight reproduces the
/// adapter's eval-mode output with no extra branch.
inline TensorPtr merge(const TensorPtr& W0, const LowRankAdapter& adapter) {
    if (!W0->is_matrix() || W0->rows() != adapter.out_features() ||
        W0->cols() != adapter.in_features())
        throw DimensionError("merge: base weight " + shape_str(W0->shape) +
                             " does not match adapter delta [" +
                             std::to_string(adapter.out_features()) + "x" +
                             std::to_string(adapter.in_features()) + "]");
    auto delta = adapter_delta(adapter);
    auto out = zeros(W0->shape);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = W0->data[i] + delta->data[i];
    return out;
}

/// Inverse of merge: returns W - (alpha / r) B A.
inline TensorPtr unmerge(const TensorPtr& W, const LowRankAdapter& adapter) {
    if (!W->is_matrix() || W->rows() != adapter.out_features() ||
        W->cols() != adapter.in_features())
        throw DimensionError("unmerge: weight " + shape_str(W->shape) +
                             " does not match adapter delta [" +
                             std::to_string(adapter.out_features()) + "x" +
                             std::to_string(adapter.in_features()) + "]");
    auto delta = adapter_delta(adapter);
    auto out = zeros(W->shape);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = W->data[i] - delta->data[i];
    return out;
}

} // namespace droplora
