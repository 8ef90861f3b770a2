#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "droplora/adapters.hpp"
#include "droplora/errors.hpp"
#include "droplora/rng.hpp"
#include "droplora/tensor.hpp"

namespace droplora {

/// A frozen weight matrix with an optional low-rank adapter riding on it.
struct AdaptedLinear {
    std::string name;
    TensorPtr W0; // frozen: requires_grad stays false for the whole run
    std::optional<LowRankAdapter> adapter;

    TensorPtr forward(Tape& tape, const TensorPtr& x) {
        if (!adapter) return matmul(tape, W0, x);
        if (adapter->config.method == Method::droplora)
            return forward_droplora(tape, x, W0, *adapter, adapter->step_mask);
        return forward_lora(tape, x, W0, *adapter);
    }
};

namespace detail {

inline TensorPtr random_weight(std::size_t m, std::size_t n, Rng& rng) {
    auto w = zeros({m, n});
    const double sigma = 1.0 / std::sqrt(static_cast<double>(n));
    for (double& v : w->data) v = rng.normal(0.0, sigma);
    return w;
}

} // namespace detail

/// Single frozen linear map; the smallest host an adapter can attach to.
struct LinearProbe {
    AdaptedLinear layer;

    static LinearProbe from_weight(TensorPtr W0) { return LinearProbe{{"W", std::move(W0), {}}}; }
    static LinearProbe random(std::size_t m, std::size_t n, Rng& rng) {
        return from_weight(detail::random_weight(m, n, rng));
    }

    std::vector<AdaptedLinear*> slots() { return {&layer}; }
    std::vector<std::string> valid_targets() const { return {"W"}; }
    TensorPtr forward(Tape& tape, const TensorPtr& x) { return layer.forward(tape, x); }
};

/// Two frozen linear layers with a GELU between them; adapters may attach to
/// either layer. Inputs are feature x batch, logits come out classes x batch.
struct MlpClassifier {
    AdaptedLinear l1, l2;

    static MlpClassifier random(std::size_t in, std::size_t hidden, std::size_t classes,
                                Rng& rng) {
        MlpClassifier m;
        m.l1 = {"L1", detail::random_weight(hidden, in, rng), {}};
        m.l2 = {"L2", detail::random_weight(classes, hidden, rng), {}};
        return m;
    }

    std::vector<AdaptedLinear*> slots() { return {&l1, &l2}; }
    std::vector<std::string> valid_targets() const { return {"L1", "L2"}; }

    TensorPtr forward(Tape& tape, const TensorPtr& x) {
        return l2.forward(tape, gelu(tape, l1.forward(tape, x)));
    }
};

/// One pre-norm transformer block: single-head causal self-attention plus a
/// GELU MLP, residuals around both. Q, K, V, Up and Down are adapter targets;
/// the output projection and the normalizations stay frozen. Activations are
/// d x tokens with tokens along columns.
struct TinyTransformerBlock {
    std::size_t d = 0;
    AdaptedLinear q, k, v, o, up, down;

    static TinyTransformerBlock random(std::size_t d, Rng& rng) {
        TinyTransformerBlock b;
        b.d = d;
        b.q = {"Q", detail::random_weight(d, d, rng), {}};
        b.k = {"K", detail::random_weight(d, d, rng), {}};
        b.v = {"V", detail::random_weight(d, d, rng), {}};
        b.o = {"O", detail::random_weight(d, d, rng), {}};
        b.up = {"Up", detail::random_weight(4 * d, d, rng), {}};
        b.down = {"Down", detail::random_weight(d, 4 * d, rng), {}};
        return b;
    }

    std::vector<AdaptedLinear*> slots() { return {&q, &k, &v, &o, &up, &down}; }
    std::vector<std::string> valid_targets() const { return {"Q", "K", "V", "Up", "Down"}; }

    TensorPtr forward(Tape& tape, const TensorPtr& x) {
        if (!x->is_matrix() || x->rows() != d)
            throw DimensionError("block input must be [" + std::to_string(d) +
                                 " x tokens], got " + shape_str(x->shape));
        auto u = layer_norm_cols(tape, x);
        auto queries = q.forward(tape, u);
        auto keys = k.forward(tape, u);
        auto values = v.forward(tape, u);
        auto scores = scale(tape, matmul(tape, transpose(tape, queries), keys),
                            1.0 / std::sqrt(static_cast<double>(d)));
        auto weights = softmax_rows(tape, scores, /*causal=*/true);
        last_attention_ = weights;
        auto context = matmul(tape, values, transpose(tape, weights));
        auto y = add(tape, x, o.forward(tape, context));
        auto w = layer_norm_cols(tape, y);
        auto mlp = down.forward(tape, gelu(tape, up.forward(tape, w)));
        return add(tape, y, mlp);
    }

    /// Attention matrix of the most recent forward (rows are queries).
    TensorPtr last_attention() const { return last_attention_; }

private:
    TensorPtr last_attention_;
};

// ---------------------------------------------------------------------------
// Model-generic helpers. A model is anything with slots() and valid_targets().
// ---------------------------------------------------------------------------

/// Wraps each projection named in config.targets with its own independently
/// seeded adapter. Streams are derived per target name, so initialization
/// does not depend on slot iteration order.
template <typename Model>
void attach_adapters(Model& model, const AdapterConfig& config, Rng& rng) {
    config.validate();
    const auto valid = model.valid_targets();
    for (const auto& t : config.targets) {
        if (std::find(valid.begin(), valid.end(), t) == valid.end()) {
            std::string names;
            for (const auto& v : valid) names += (names.empty() ? "" : ", ") + v;
            throw ConfigError("unknown adapter target '" + t + "'; valid targets: " + names);
        }
    }
    const std::uint64_t base = rng.next_u64();
    for (auto* slot : model.slots()) {
        if (std::find(config.targets.begin(), config.targets.end(), slot->name) ==
            config.targets.end())
            continue;
        Rng stream(derive_seed(base, "adapter/" + slot->name));
        slot->adapter = init_adapter(config, slot->W0->rows(), slot->W0->cols(), stream);
    }
}

template <typename Model>
void set_mode(Model& model, Mode mode) {
    for (auto* slot : model.slots())
        if (slot->adapter) slot->adapter->mode = mode;
}

/// One fresh mask per adapter; called once per optimizer step.
template <typename Model>
void resample_masks(Model& model) {
    for (auto* slot : model.slots())
        if (slot->adapter) slot->adapter->resample_mask();
}

template <typename Model>
std::vector<LowRankAdapter*> adapters_of(Model& model) {
    std::vector<LowRankAdapter*> out;
    for (auto* slot : model.slots())
        if (slot->adapter) out.push_back(&*slot->adapter);
    return out;
}

template <typename Model>
std::vector<TensorPtr> trainable_params(Model& model) {
    std::vector<TensorPtr> params;
    for (auto* slot : model.slots()) {
        if (!slot->adapter) continue;
        params.push_back(slot->adapter->A);
        params.push_back(slot->adapter->B);
    }
    return params;
}

template <typename Model>
std::size_t trainable_param_count(Model& model) {
    std::size_t n = 0;
    for (const auto& p : trainable_params(model)) n += p->numel();
    return n;
}

/// FNV-1a over every frozen base weight; unchanged across training by the
/// frozen-base invariant.
template <typename Model>
std::uint64_t base_checksum(Model& model) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* bytes, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(bytes);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (auto* slot : model.slots()) {
        mix(slot->name.data(), slot->name.size());
        mix(slot->W0->data.data(), slot->W0->data.size() * sizeof(double));
    }
    return h;
}

/// Copy of the model with every adapter folded into its base weight and
/// removed; the result computes the adapted eval function as plain dense maps.
template <typename Model>
Model merge_into_base(const Model& model) {
    Model merged = model;
    for (auto* slot : merged.slots()) {
        if (!slot->adapter) continue;
        slot->W0 = merge(slot->W0, *slot->adapter);
        slot->adapter.reset();
    }
    return merged;
}

} // namespace droplora
