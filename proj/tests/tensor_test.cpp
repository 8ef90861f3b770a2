#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

using namespace droplora;

namespace {

TensorPtr random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    for (double& v : t->data) v = rng.normal();
    return t;
}

} // namespace

TEST(Tensor, ShapeDataLengthInvariant) {
    EXPECT_THROW(make_tensor({2, 3}, {1.0, 2.0}), DimensionError);
    auto t = make_tensor({2, 2}, {1, 2, 3, 4});
    EXPECT_EQ(t->numel(), 4u);
    EXPECT_TRUE(t->all_finite());
}

TEST(Matmul, IdentityCase) {
    Tape tape;
    auto eye = make_tensor({2, 2}, {1, 0, 0, 1});
    auto b = make_tensor({2, 2}, {5, 6, 7, 8});
    auto c = matmul(tape, eye, b);
    EXPECT_EQ(c->data, b->data);
}

TEST(Matmul, HandComputedInnerProduct) {
    Tape tape;
    auto a = make_tensor({1, 2}, {1, 2});
    auto b = make_tensor({2, 1}, {3, 4});
    auto c = matmul(tape, a, b);
    ASSERT_EQ(c->shape, (Shape{1, 1}));
    EXPECT_DOUBLE_EQ(c->data[0], 11.0);
}

TEST(Matmul, ZeroAnnihilates) {
    Tape tape;
    auto z = zeros({2, 2});
    Rng rng(3);
    auto b = random_tensor({2, 5}, rng);
    auto c = matmul(tape, z, b);
    for (double v : c->data) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Tape tape;
    auto a = zeros({2, 3});
    auto b = zeros({4, 2});
    try {
        matmul(tape, a, b);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("[4x2]"), std::string::npos);
    }
}

TEST(Matmul, MatchesNaiveTripleLoop) {
    Rng rng(11);
    Tape tape;
    auto a = random_tensor({7, 5}, rng);
    auto b = random_tensor({5, 9}, rng);
    auto c = matmul(tape, a, b);
    auto expect = dltest::naive_matmul(a->data, b->data, 7, 5, 9);
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(c->data[i], expect[i], 1e-12);
}

TEST(Matmul, LinearInScalarFactor) {
    Rng rng(12);
    auto a = random_tensor({4, 6}, rng);
    auto b = random_tensor({6, 3}, rng);
    Tape tape;
    auto doubled = matmul(tape, a, scale(tape, b, 2.0));
    auto reference = scale(tape, matmul(tape, a, b), 2.0);
    // x2 is exact in binary floating point, so the two routes agree bitwise.
    EXPECT_EQ(doubled->data, reference->data);
}

TEST(Hadamard, IdentityAndBinaryMasks) {
    Tape tape;
    auto a = make_tensor({3}, {1, 2, 3});
    auto ones_mask = make_tensor({3}, {1, 1, 1});
    auto keep = hadamard(tape, a, ones_mask);
    EXPECT_EQ(keep->data, a->data);

    auto binary = make_tensor({3}, {0, 1, 0});
    auto masked = hadamard(tape, a, binary);
    EXPECT_EQ(masked->data, (std::vector<double>{0, 2, 0}));
}

TEST(Hadamard, RowBroadcastScalesRows) {
    Tape tape;
    auto a = make_tensor({2, 3}, {1, 1, 1, 4, 4, 4});
    auto v = make_tensor({2}, {2, 0});
    auto out = hadamard(tape, a, v);
    EXPECT_EQ(out->data, (std::vector<double>{2, 2, 2, 0, 0, 0}));
}

TEST(Hadamard, ColBroadcastScalesColumns) {
    Tape tape;
    auto a = make_tensor({2, 3}, {1, 2, 3, 4, 5, 6});
    auto v = make_tensor({3}, {1, 0, 2});
    auto out = hadamard(tape, a, v);
    EXPECT_EQ(out->data, (std::vector<double>{1, 0, 6, 4, 0, 12}));
}

TEST(Hadamard, RejectsNonBroadcastable) {
    Tape tape;
    auto a = zeros({2, 3});
    EXPECT_THROW(hadamard(tape, a, zeros({4})), DimensionError);
    EXPECT_THROW(hadamard(tape, zeros({3}), zeros({2, 3})), DimensionError);
}

TEST(Hadamard, GradientRoutesThroughBothOperands) {
    Rng rng(21);
    auto a = random_tensor({3, 4}, rng, true);
    auto v = random_tensor({3}, rng, true);
    auto loss_fn = [&] {
        Tape tape;
        return sum(tape, hadamard(tape, a, v))->value();
    };
    Tape tape;
    auto loss = sum(tape, hadamard(tape, a, v));
    tape.backward(loss);
    auto fd = dltest::finite_diff_grads(loss_fn, {a, v});
    for (std::size_t i = 0; i < a->numel(); ++i) EXPECT_LT(dltest::rel_err(a->grad[i], fd[0][i]), 1e-6);
    for (std::size_t i = 0; i < v->numel(); ++i) EXPECT_LT(dltest::rel_err(v->grad[i], fd[1][i]), 1e-6);
}

TEST(Backward, AnalyticLinearExample) {
    // loss = sum(W x) with W = [[1, 1]], x = [2, 3]^T  ->  dW = [[2, 3]]
    auto w = make_tensor({1, 2}, {1, 1}, true);
    auto x = make_tensor({2, 1}, {2, 3});
    Tape tape;
    auto loss = sum(tape, matmul(tape, w, x));
    tape.backward(loss);
    ASSERT_TRUE(w->has_grad());
    EXPECT_DOUBLE_EQ(w->grad[0], 2.0);
    EXPECT_DOUBLE_EQ(w->grad[1], 3.0);
}

TEST(Backward, ZeroScaledLossGivesZeroGrads) {
    Rng rng(5);
    auto w = random_tensor({3, 3}, rng, true);
    auto x = random_tensor({3, 2}, rng);
    Tape tape;
    auto loss = scale(tape, sum(tape, matmul(tape, w, x)), 0.0);
    tape.backward(loss);
    for (double g : w->grad) EXPECT_EQ(g, 0.0);
}

TEST(Backward, RequiresScalarLoss) {
    Tape tape;
    auto t = zeros({2, 2}, true);
    EXPECT_THROW(tape.backward(t), ContractError);
}

TEST(Backward, MatmulChainMatchesFiniteDifferences) {
    Rng rng(31);
    auto a = random_tensor({4, 3}, rng, true);
    auto b = random_tensor({3, 5}, rng, true);
    auto c = random_tensor({5, 2}, rng, true);
    auto loss_fn = [&] {
        Tape tape;
        return sum(tape, matmul(tape, matmul(tape, a, b), c))->value();
    };
    Tape tape;
    auto loss = sum(tape, matmul(tape, matmul(tape, a, b), c));
    tape.backward(loss);
    auto fd = dltest::finite_diff_grads(loss_fn, {a, b, c});
    const std::vector<TensorPtr> params = {a, b, c};
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t i = 0; i < params[p]->numel(); ++i)
            EXPECT_LT(dltest::rel_err(params[p]->grad[i], fd[p][i]), 1e-6);
}

TEST(Backward, FrozenLeafReceivesNoGradAndNoTapeNode) {
    auto w = zeros({2, 2}); // requires_grad = false
    auto x = zeros({2, 1});
    Tape tape;
    auto out = matmul(tape, w, x);
    EXPECT_FALSE(out->requires_grad);
    EXPECT_EQ(tape.size(), 0u);
}

TEST(Tape, TopologicalOrderAndSingleReverseVisit) {
    Rng rng(41);
    auto a = random_tensor({2, 2}, rng, true);
    auto b = random_tensor({2, 2}, rng);
    Tape tape;
    auto c = matmul(tape, a, b);
    auto d = add(tape, c, c);
    auto loss = sum(tape, d);
    // Inputs of every node appear as outputs of strictly earlier nodes (or are leaves).
    const auto& nodes = tape.nodes();
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        for (const auto& input : nodes[i].inputs) {
            for (std::size_t j = i; j < nodes.size(); ++j)
                EXPECT_NE(nodes[j].output.get(), input.get());
        }
    }
    tape.backward(loss);
    // d(loss)/da = 2 * b^T summed over columns: the double-use of c accumulates once per use.
    auto fd = dltest::finite_diff_grads(
        [&] {
            Tape t2;
            auto c2 = matmul(t2, a, b);
            return sum(t2, add(t2, c2, c2))->value();
        },
        {a});
    for (std::size_t i = 0; i < a->numel(); ++i) EXPECT_LT(dltest::rel_err(a->grad[i], fd[0][i]), 1e-6);
}

TEST(Tape, DeterministicReplayIsBitwise) {
    auto run = [] {
        Rng rng(99);
        auto a = random_tensor({6, 4}, rng, true);
        auto b = random_tensor({4, 3}, rng);
        Tape tape;
        auto h = gelu(tape, matmul(tape, a, b));
        auto loss = mean_squared_error(tape, h, zeros({6, 3}));
        tape.backward(loss);
        return std::pair(h->data, a->grad);
    };
    auto [out1, grad1] = run();
    auto [out2, grad2] = run();
    EXPECT_EQ(out1, out2);
    EXPECT_EQ(grad1, grad2);
}

TEST(Transpose, ForwardAndGradient) {
    Rng rng(51);
    auto a = random_tensor({3, 5}, rng, true);
    Tape tape;
    auto at = transpose(tape, a);
    ASSERT_EQ(at->shape, (Shape{5, 3}));
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(at->at(j, i), a->at(i, j));
    auto loss = mean_squared_error(tape, at, full({5, 3}, 0.25));
    tape.backward(loss);
    auto fd = dltest::finite_diff_grads(
        [&] {
            Tape t2;
            return mean_squared_error(t2, transpose(t2, a), full({5, 3}, 0.25))->value();
        },
        {a});
    for (std::size_t i = 0; i < a->numel(); ++i) EXPECT_LT(dltest::rel_err(a->grad[i], fd[0][i]), 1e-6);
}

TEST(Gelu, GradientMatchesFiniteDifferences) {
    Rng rng(61);
    auto a = random_tensor({4, 4}, rng, true);
    Tape tape;
    auto loss = sum(tape, gelu(tape, a));
    tape.backward(loss);
    auto fd = dltest::finite_diff_grads(
        [&] {
            Tape t2;
            return sum(t2, gelu(t2, a))->value();
        },
        {a});
    for (std::size_t i = 0; i < a->numel(); ++i) EXPECT_LT(dltest::rel_err(a->grad[i], fd[0][i]), 1e-6);
}

TEST(Softmax, RowsSumToOneAndCausalZeroesFuture) {
    Rng rng(71);
    auto a = random_tensor({5, 5}, rng);
    Tape tape;
    auto w = softmax_rows(tape, a, /*causal=*/true);
    for (std::size_t i = 0; i < 5; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
            if (j > i) {
                EXPECT_EQ(w->at(i, j), 0.0);
            }
            total += w->at(i, j);
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
    Rng rng(72);
    auto a = random_tensor({4, 6}, rng, true);
    auto target = random_tensor({4, 6}, rng);
    auto loss_fn = [&] {
        Tape t2;
        return mean_squared_error(t2, softmax_rows(t2, a), target)->value();
    };
    Tape tape;
    auto loss = mean_squared_error(tape, softmax_rows(tape, a), target);
    tape.backward(loss);
    auto fd = dltest::finite_diff_grads(loss_fn, {a});
    for (std::size_t i = 0; i < a->numel(); ++i) EXPECT_LT(dltest::rel_err(a->grad[i], fd[0][i]), 1e-6);
}

TEST(LayerNorm, NormalizesColumnsAndBackpropagates) {
    Rng rng(81);
    auto a = random_tensor({6, 3}, rng, true);
    Tape tape;
    auto y = layer_norm_cols(tape, a);
    for (std::size_t j = 0; j < 3; ++j) {
        double mean = 0.0, var = 0.0;
        for (std::size_t i = 0; i < 6; ++i) mean += y->at(i, j);
        mean /= 6.0;
        for (std::size_t i = 0; i < 6; ++i) var += (y->at(i, j) - mean) * (y->at(i, j) - mean);
        var /= 6.0;
        EXPECT_NEAR(mean, 0.0, 1e-12);
        EXPECT_NEAR(var, 1.0, 1e-4); // eps shifts the variance slightly below one
    }
    auto target = random_tensor({6, 3}, rng);
    auto loss_fn = [&] {
        Tape t2;
        return mean_squared_error(t2, layer_norm_cols(t2, a), target)->value();
    };
    Tape tape2;
    auto loss = mean_squared_error(tape2, layer_norm_cols(tape2, a), target);
    tape2.backward(loss);
    auto fd = dltest::finite_diff_grads(loss_fn, {a});
    for (std::size_t i = 0; i < a->numel(); ++i) EXPECT_LT(dltest::rel_err(a->grad[i], fd[0][i]), 1e-6);
}

TEST(CrossEntropy, UniformLogitsGiveLogClassCount) {
    Tape tape;
    auto logits = zeros({3, 4});
    auto loss = cross_entropy(tape, logits, {0, 1, 3});
    EXPECT_NEAR(loss->value(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, LargeMarginSaturatesToZero) {
    Tape tape;
    auto logits = zeros({1, 4});
    logits->at(0, 2) = 100.0;
    auto loss = cross_entropy(tape, logits, {2});
    EXPECT_LT(loss->value(), 1e-10);
    EXPECT_GE(loss->value(), 0.0);
}

TEST(CrossEntropy, RejectsOutOfRangeLabels) {
    Tape tape;
    auto logits = zeros({2, 4});
    EXPECT_THROW(cross_entropy(tape, logits, {0, 4}), ContractError);
    EXPECT_THROW(cross_entropy(tape, logits, {0}), ContractError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
    Rng rng(91);
    auto logits = random_tensor({5, 7}, rng, true);
    const std::vector<std::size_t> labels = {0, 3, 6, 2, 2};
    auto loss_fn = [&] {
        Tape t2;
        return cross_entropy(t2, logits, labels)->value();
    };
    Tape tape;
    auto loss = cross_entropy(tape, logits, labels);
    tape.backward(loss);
    auto fd = dltest::finite_diff_grads(loss_fn, {logits});
    for (std::size_t i = 0; i < logits->numel(); ++i)
        EXPECT_LT(dltest::rel_err(logits->grad[i], fd[0][i]), 1e-6);
}

TEST(Mse, GradChecksAndRejectsShapeMismatch) {
    Rng rng(92);
    auto pred = random_tensor({3, 4}, rng, true);
    auto target = random_tensor({3, 4}, rng);
    Tape scratch;
    EXPECT_THROW(mean_squared_error(scratch, pred, zeros({4, 3})), DimensionError);
    auto loss_fn = [&] {
        Tape t2;
        return mean_squared_error(t2, pred, target)->value();
    };
    Tape tape;
    auto loss = mean_squared_error(tape, pred, target);
    tape.backward(loss);
    auto fd = dltest::finite_diff_grads(loss_fn, {pred});
    for (std::size_t i = 0; i < pred->numel(); ++i)
        EXPECT_LT(dltest::rel_err(pred->grad[i], fd[0][i]), 1e-6);
}
