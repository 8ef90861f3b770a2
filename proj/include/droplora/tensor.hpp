#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "droplora/errors.hpp"

namespace droplora {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

/// Dense row-major float64 array with an optional gradient buffer.
/// Values are set at construction (or by the optimizer between forward
/// passes); the grad buffer is the only thing mutated during backward.
class Tensor {
public:
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad; // empty until backward touches this tensor

    Tensor(Shape s, std::vector<double> values, bool rg)
        : shape(std::move(s)), data(std::move(values)), requires_grad(rg) {
        if (numel_of(shape) != data.size()) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
    }

    static std::size_t numel_of(const Shape& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
    }

    std::size_t numel() const { return data.size(); }
    bool is_matrix() const { return shape.size() == 2; }
    bool is_vector() const { return shape.size() == 1; }
    bool is_scalar() const { return numel() == 1 && shape.size() <= 1; }

    std::size_t rows() const { return shape.at(0); }
    std::size_t cols() const { return shape.at(1); }

    double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }
    double value() const { return data.at(0); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
    bool has_grad() const { return !grad.empty(); }

    bool all_finite() const {
        return std::all_of(data.begin(), data.end(),
                           [](double v) { return std::isfinite(v); });
    }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(Shape s, std::vector<double> values, bool requires_grad = false) {
    return std::make_shared<Tensor>(std::move(s), std::move(values), requires_grad);
}

inline TensorPtr zeros(Shape s, bool requires_grad = false) {
    std::vector<double> v(Tensor::numel_of(s), 0.0);
    return make_tensor(std::move(s), std::move(v), requires_grad);
}

inline TensorPtr full(Shape s, double fill, bool requires_grad = false) {
    std::vector<double> v(Tensor::numel_of(s), fill);
    return make_tensor(std::move(s), std::move(v), requires_grad);
}

inline TensorPtr scalar(double v) { return make_tensor({}, {v}); }

inline TensorPtr clone(const TensorPtr& t, bool requires_grad = false) {
    return make_tensor(t->shape, t->data, requires_grad);
}

namespace detail {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline ConstMatMap mat(const Tensor& t) {
    return ConstMatMap(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                       static_cast<Eigen::Index>(t.cols()));
}
inline MatMap mat_mut(std::vector<double>& buf, std::size_t r, std::size_t c) {
    return MatMap(buf.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline void require_matrix(const Tensor& t, const char* who) {
    if (!t.is_matrix())
        throw DimensionError(std::string(who) + " expects a matrix, got shape " +
                             shape_str(t.shape));
}

} // namespace detail

/// Define-by-run gradient tape. Operations append themselves in execution
/// order, so inputs always precede their consumers; backward replays the
/// recorded nodes exactly once in reverse.
class Tape {
public:
    struct Node {
        std::vector<TensorPtr> inputs;
        TensorPtr output;
        std::function<void()> pull; // reads output->grad, accumulates into inputs
    };

    void record(std::vector<TensorPtr> inputs, TensorPtr output, std::function<void()> pull) {
        nodes_.push_back({std::move(inputs), std::move(output), std::move(pull)});
    }

    /// Reverse-mode sweep from a scalar loss. Nodes whose output never
    /// received a gradient are dead branches and are skipped.
    void backward(const TensorPtr& loss) {
        if (!loss->is_scalar())
            throw ContractError("backward requires a scalar loss, got shape " +
                                shape_str(loss->shape));
        loss->ensure_grad();
        loss->grad[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->output->has_grad()) it->pull();
        }
    }

    void clear() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }
    const std::vector<Node>& nodes() const { return nodes_; }

private:
    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Recorded operations. Each returns a fresh tensor; a backward rule is
// recorded only when some input requires a gradient.
// ---------------------------------------------------------------------------

inline TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    detail::require_matrix(*a, "matmul");
    detail::require_matrix(*b, "matmul");
    if (a->cols() != b->rows())
        throw DimensionError("matmul inner dimensions disagree: " + shape_str(a->shape) +
                             " vs " + shape_str(b->shape));
    auto out = zeros({a->rows(), b->cols()}, a->requires_grad || b->requires_grad);
    detail::mat_mut(out->data, out->rows(), out->cols()) = detail::mat(*a) * detail::mat(*b);
    if (out->requires_grad) {
        tape.record({a, b}, out, [a, b, out] {
            detail::ConstMatMap dc(out->grad.data(), static_cast<Eigen::Index>(out->rows()),
                                   static_cast<Eigen::Index>(out->cols()));
            if (a->requires_grad) {
                a->ensure_grad();
                detail::mat_mut(a->grad, a->rows(), a->cols()) += dc * detail::mat(*b).transpose();
            }
            if (b->requires_grad) {
                b->ensure_grad();
                detail::mat_mut(b->grad, b->rows(), b->cols()) += detail::mat(*a).transpose() * dc;
            }
        });
    }
    return out;
}

inline TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape)
        throw DimensionError("add shapes disagree: " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    auto out = zeros(a->shape, a->requires_grad || b->requires_grad);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (out->requires_grad) {
        tape.record({a, b}, out, [a, b, out] {
            for (auto* t : {a.get(), b.get()}) {
                if (!t->requires_grad) continue;
                t->ensure_grad();
                for (std::size_t i = 0; i < out->numel(); ++i) t->grad[i] += out->grad[i];
            }
        });
    }
    return out;
}

inline TensorPtr sub(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape)
        throw DimensionError("sub shapes disagree: " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    auto out = zeros(a->shape, a->requires_grad || b->requires_grad);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] - b->data[i];
    if (out->requires_grad) {
        tape.record({a, b}, out, [a, b, out] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < out->numel(); ++i) b->grad[i] -= out->grad[i];
            }
        });
    }
    return out;
}

inline TensorPtr scale(Tape& tape, const TensorPtr& a, double s) {
    auto out = zeros(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = s * a->data[i];
    if (out->requires_grad) {
        tape.record({a}, out, [a, out, s] {
            a->ensure_grad();
            for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += s * out->grad[i];
        });
    }
    return out;
}

namespace detail {

enum class BroadcastAxis { none, rows, cols };

/// Resolves how a 1-D `b` lines up against matrix `a`. Row broadcast wins
/// when both dimensions match (square case); callers needing the column
/// orientation on square matrices scale explicitly.
inline BroadcastAxis hadamard_axis(const Tensor& a, const Tensor& b) {
    if (a.shape == b.shape) return BroadcastAxis::none;
    if (a.is_matrix() && b.is_vector()) {
        if (b.numel() == a.rows()) return BroadcastAxis::rows;
        if (b.numel() == a.cols()) return BroadcastAxis::cols;
    }
    throw DimensionError("hadamard shapes not broadcastable: " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
}

} // namespace detail

/// Elementwise product. `b` may be a vector broadcast along one axis of a
/// matrix `a` (the rank-axis case: a length-r vector against an r-row or
/// r-column matrix).
inline TensorPtr hadamard(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    const auto axis = detail::hadamard_axis(*a, *b);
    auto out = zeros(a->shape, a->requires_grad || b->requires_grad);
    const std::size_t r = a->is_matrix() ? a->rows() : a->numel();
    const std::size_t c = a->is_matrix() ? a->cols() : 1;
    auto bval = [&](std::size_t i, std::size_t j, std::size_t flat) {
        switch (axis) {
            case detail::BroadcastAxis::rows: return b->data[i];
            case detail::BroadcastAxis::cols: return b->data[j];
            default: return b->data[flat];
        }
    };
    for (std::size_t i = 0, flat = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j, ++flat)
            out->data[flat] = a->data[flat] * bval(i, j, flat);
    if (out->requires_grad) {
        tape.record({a, b}, out, [a, b, out, axis, r, c] {
            auto bval = [&](std::size_t i, std::size_t j, std::size_t flat) {
                switch (axis) {
                    case detail::BroadcastAxis::rows: return b->data[i];
                    case detail::BroadcastAxis::cols: return b->data[j];
                    default: return b->data[flat];
                }
            };
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0, flat = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j, ++flat)
                        a->grad[flat] += out->grad[flat] * bval(i, j, flat);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0, flat = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j, ++flat) {
                        const double g = out->grad[flat] * a->data[flat];
                        switch (axis) {
                            case detail::BroadcastAxis::rows: b->grad[i] += g; break;
                            case detail::BroadcastAxis::cols: b->grad[j] += g; break;
                            default: b->grad[flat] += g;
                        }
                    }
            }
        });
    }
    return out;
}

inline TensorPtr transpose(Tape& tape, const TensorPtr& a) {
    detail::require_matrix(*a, "transpose");
    auto out = zeros({a->cols(), a->rows()}, a->requires_grad);
    detail::mat_mut(out->data, out->rows(), out->cols()) = detail::mat(*a).transpose();
    if (out->requires_grad) {
        tape.record({a}, out, [a, out] {
            a->ensure_grad();
            detail::mat_mut(a->grad, a->rows(), a->cols()) +=
                detail::ConstMatMap(out->grad.data(), static_cast<Eigen::Index>(out->rows()),
                                    static_cast<Eigen::Index>(out->cols()))
                    .transpose();
        });
    }
    return out;
}

/// Exact (erf-based) GELU.
inline TensorPtr gelu(Tape& tape, const TensorPtr& a) {
    auto out = zeros(a->shape, a->requires_grad);
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::size_t i = 0; i < out->numel(); ++i) {
        const double x = a->data[i];
        out->data[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    if (out->requires_grad) {
        tape.record({a}, out, [a, out] {
            a->ensure_grad();
            constexpr double inv_sqrt2 = 0.7071067811865475244;
            const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
            for (std::size_t i = 0; i < out->numel(); ++i) {
                const double x = a->data[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                a->grad[i] += out->grad[i] * (cdf + x * pdf);
            }
        });
    }
    return out;
}

/// Row-wise softmax, numerically stabilized by max subtraction. With
/// `causal` set (square input), entries above the diagonal get exactly zero
/// probability and receive no gradient.
inline TensorPtr softmax_rows(Tape& tape, const TensorPtr& a, bool causal = false) {
    detail::require_matrix(*a, "softmax_rows");
    if (causal && a->rows() != a->cols())
        throw DimensionError("causal softmax requires a square matrix, got " +
                             shape_str(a->shape));
    const std::size_t r = a->rows(), c = a->cols();
    auto out = zeros(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t extent = causal ? i + 1 : c;
        double m = a->at(i, 0);
        for (std::size_t j = 1; j < extent; ++j) m = std::max(m, a->at(i, j));
        double total = 0.0;
        for (std::size_t j = 0; j < extent; ++j) {
            const double e = std::exp(a->at(i, j) - m);
            out->at(i, j) = e;
            total += e;
        }
        for (std::size_t j = 0; j < extent; ++j) out->at(i, j) /= total;
    }
    if (out->requires_grad) {
        tape.record({a}, out, [a, out, r, c, causal] {
            a->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                const std::size_t extent = causal ? i + 1 : c;
                double dot = 0.0;
                for (std::size_t j = 0; j < extent; ++j)
                    dot += out->grad[i * c + j] * out->at(i, j);
                for (std::size_t j = 0; j < extent; ++j)
                    a->grad[i * c + j] += out->at(i, j) * (out->grad[i * c + j] - dot);
            }
        });
    }
    return out;
}

/// Per-column normalization to zero mean / unit variance (no affine
/// parameters). Columns are the token axis in this codebase.
inline TensorPtr layer_norm_cols(Tape& tape, const TensorPtr& a, double eps = 1e-5) {
    detail::require_matrix(*a, "layer_norm_cols");
    const std::size_t d = a->rows(), n = a->cols();
    auto out = zeros(a->shape, a->requires_grad);
    std::vector<double> inv_std(n);
    for (std::size_t j = 0; j < n; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += a->at(i, j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double centred = a->at(i, j) - mean;
            var += centred * centred;
        }
        var /= static_cast<double>(d);
        inv_std[j] = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < d; ++i) out->at(i, j) = (a->at(i, j) - mean) * inv_std[j];
    }
    if (out->requires_grad) {
        tape.record({a}, out, [a, out, d, n, inv_std = std::move(inv_std)] {
            a->ensure_grad();
            for (std::size_t j = 0; j < n; ++j) {
                double mean_dy = 0.0, mean_dy_y = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    const double dy = out->grad[i * n + j];
                    mean_dy += dy;
                    mean_dy_y += dy * out->at(i, j);
                }
                mean_dy /= static_cast<double>(d);
                mean_dy_y /= static_cast<double>(d);
                for (std::size_t i = 0; i < d; ++i) {
                    const double dy = out->grad[i * n + j];
                    a->grad[i * n + j] +=
                        inv_std[j] * (dy - mean_dy - out->at(i, j) * mean_dy_y);
                }
            }
        });
    }
    return out;
}

inline TensorPtr sum(Tape& tape, const TensorPtr& a) {
    auto out = zeros(Shape{}, a->requires_grad);
    out->data[0] = std::accumulate(a->data.begin(), a->data.end(), 0.0);
    if (out->requires_grad) {
        tape.record({a}, out, [a, out] {
            a->ensure_grad();
            for (std::size_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[0];
        });
    }
    return out;
}

/// Mean over all entries of the squared difference.
inline TensorPtr mean_squared_error(Tape& tape, const TensorPtr& pred, const TensorPtr& target) {
    if (pred->shape != target->shape)
        throw DimensionError("mse shapes disagree: " + shape_str(pred->shape) + " vs " +
                             shape_str(target->shape));
    auto out = zeros(Shape{}, pred->requires_grad || target->requires_grad);
    const double inv_n = 1.0 / static_cast<double>(pred->numel());
    double acc = 0.0;
    for (std::size_t i = 0; i < pred->numel(); ++i) {
        const double e = pred->data[i] - target->data[i];
        acc += e * e;
    }
    out->data[0] = acc * inv_n;
    if (out->requires_grad) {
        tape.record({pred, target}, out, [pred, target, out, inv_n] {
            const double g = out->grad[0];
            if (pred->requires_grad) {
                pred->ensure_grad();
                for (std::size_t i = 0; i < pred->numel(); ++i)
                    pred->grad[i] += 2.0 * g * inv_n * (pred->data[i] - target->data[i]);
            }
            if (target->requires_grad) {
                target->ensure_grad();
                for (std::size_t i = 0; i < target->numel(); ++i)
                    target->grad[i] -= 2.0 * g * inv_n * (pred->data[i] - target->data[i]);
            }
        });
    }
    return out;
}

/// Mean negative log-softmax of the true class. Logits are batch x classes;
/// stabilized by per-row max subtraction.
inline TensorPtr cross_entropy(Tape& tape, const TensorPtr& logits,
                               const std::vector<std::size_t>& labels) {
    detail::require_matrix(*logits, "cross_entropy");
    const std::size_t batch = logits->rows(), classes = logits->cols();
    if (labels.size() != batch)
        throw ContractError("cross_entropy got " + std::to_string(labels.size()) +
                            " labels for batch " + std::to_string(batch));
    for (std::size_t b = 0; b < batch; ++b)
        if (labels[b] >= classes)
            throw ContractError("cross_entropy label " + std::to_string(labels[b]) +
                                " out of range [0, " + std::to_string(classes) + ")");
    auto out = zeros(Shape{}, logits->requires_grad);
    // Per-row softmax probabilities are kept for the backward rule.
    auto probs = std::make_shared<std::vector<double>>(batch * classes);
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        double m = logits->at(b, 0);
        for (std::size_t j = 1; j < classes; ++j) m = std::max(m, logits->at(b, j));
        double denom = 0.0;
        for (std::size_t j = 0; j < classes; ++j) {
            const double e = std::exp(logits->at(b, j) - m);
            (*probs)[b * classes + j] = e;
            denom += e;
        }
        for (std::size_t j = 0; j < classes; ++j) (*probs)[b * classes + j] /= denom;
        total += std::log(denom) - (logits->at(b, labels[b]) - m);
    }
    out->data[0] = total / static_cast<double>(batch);
    if (out->requires_grad) {
        tape.record({logits}, out, [logits, out, probs, labels, batch, classes] {
            logits->ensure_grad();
            const double g = out->grad[0] / static_cast<double>(batch);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t j = 0; j < classes; ++j) {
                    const double onehot = (j == labels[b]) ? 1.0 : 0.0;
                    logits->grad[b * classes + j] += g * ((*probs)[b * classes + j] - onehot);
                }
        });
    }
    return out;
}

} // namespace droplora
