#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

using namespace droplora;

namespace {

TensorPtr random_input(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    Rng rng(seed);
    auto x = zeros({rows, cols});
    for (double& v : x->data) v = rng.normal();
    return x;
}

AdapterConfig block_config(std::size_t rank, double p = 0.3) {
    AdapterConfig cfg;
    cfg.rank = rank;
    cfg.alpha = 2.0 * static_cast<double>(rank);
    cfg.pruning_prob = p;
    cfg.input_dropout = 0.0;
    return cfg;
}

/// Perturb adapters away from the zero-start so merge tests see a real delta.
template <typename Model>
void randomize_factors(Model& model, std::uint64_t seed) {
    Rng rng(seed);
    for (auto* a : adapters_of(model))
        for (double& v : a->B->data) v = rng.normal(0.0, 0.2);
}

} // namespace

TEST(AttachAdapters, FiveTargetsAndParameterCount) {
    Rng rng(1);
    auto block = TinyTransformerBlock::random(8, rng);
    auto cfg = block_config(2);
    Rng attach_rng(2);
    attach_adapters(block, cfg, attach_rng);
    EXPECT_EQ(adapters_of(block).size(), 5u);
    // sum of r * (m + n): three 8x8 projections, Up 32x8, Down 8x32.
    EXPECT_EQ(trainable_param_count(block), 3u * 2 * (8 + 8) + 2 * (32 + 8) + 2 * (8 + 32));
    EXPECT_FALSE(block.o.adapter.has_value());
}

TEST(AttachAdapters, SingleTargetCount) {
    Rng rng(3);
    auto block = TinyTransformerBlock::random(8, rng);
    auto cfg = block_config(2);
    cfg.targets = {"Q"};
    Rng attach_rng(4);
    attach_adapters(block, cfg, attach_rng);
    EXPECT_EQ(trainable_param_count(block), 32u); // 2 * (8 + 8)
}

TEST(AttachAdapters, EmptyTargetsLeaveModelUntouched) {
    Rng rng(5);
    auto block = TinyTransformerBlock::random(8, rng);
    auto base = block;
    auto cfg = block_config(2);
    cfg.targets = {};
    Rng attach_rng(6);
    attach_adapters(block, cfg, attach_rng);
    auto x = random_input(8, 5, 7);
    Tape tape;
    auto adapted = block.forward(tape, x);
    auto plain = base.forward(tape, x);
    EXPECT_EQ(adapted->data, plain->data);
}

TEST(AttachAdapters, UnknownTargetListsValidNames) {
    Rng rng(8);
    auto block = TinyTransformerBlock::random(8, rng);
    auto cfg = block_config(2);
    cfg.targets = {"Q", "Gate"};
    Rng attach_rng(9);
    try {
        attach_adapters(block, cfg, attach_rng);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("Gate"), std::string::npos);
        for (const char* name : {"Q", "K", "V", "Up", "Down"})
            EXPECT_NE(msg.find(name), std::string::npos);
    }
}

TEST(AttachAdapters, DistinctStreamsPerProjection) {
    Rng rng(10);
    auto block = TinyTransformerBlock::random(8, rng);
    Rng attach_rng(11);
    attach_adapters(block, block_config(4), attach_rng);
    ASSERT_TRUE(block.q.adapter && block.k.adapter && block.v.adapter);
    EXPECT_NE(block.q.adapter->A->data, block.k.adapter->A->data);
    EXPECT_NE(block.k.adapter->A->data, block.v.adapter->A->data);
}

TEST(ForwardBlock, FreshAdaptersPreserveBaseOutputBitwise) {
    Rng rng(12);
    auto block = TinyTransformerBlock::random(8, rng);
    auto base = block;
    Rng attach_rng(13);
    attach_adapters(block, block_config(2), attach_rng);
    resample_masks(block);
    auto x = random_input(8, 6, 14);
    Tape tape;
    auto adapted = block.forward(tape, x);
    auto plain = base.forward(tape, x);
    EXPECT_EQ(adapted->data, plain->data);
}

TEST(ForwardBlock, AttentionRowsSumToOne) {
    Rng rng(15);
    auto block = TinyTransformerBlock::random(8, rng);
    auto x = random_input(8, 7, 16);
    Tape tape;
    block.forward(tape, x);
    auto attn = block.last_attention();
    ASSERT_TRUE(attn);
    for (std::size_t i = 0; i < attn->rows(); ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < attn->cols(); ++j) total += attn->at(i, j);
        EXPECT_NEAR(total, 1.0, 1e-9);
    }
}

TEST(ForwardBlock, RejectsWrongWidth) {
    Rng rng(17);
    auto block = TinyTransformerBlock::random(8, rng);
    Tape tape;
    EXPECT_THROW(block.forward(tape, zeros({7, 4})), DimensionError);
}

TEST(ForwardBlock, AdapterGradientsMatchFiniteDifferences) {
    Rng rng(18);
    auto block = TinyTransformerBlock::random(8, rng);
    Rng attach_rng(19);
    attach_adapters(block, block_config(2, 0.5), attach_rng);
    randomize_factors(block, 20);
    resample_masks(block); // fixed masks from here on; forwards are pure
    auto x = random_input(8, 5, 21);
    auto target = random_input(8, 5, 22);
    auto loss_fn = [&] {
        Tape tape;
        return mean_squared_error(tape, block.forward(tape, x), target)->value();
    };
    Tape tape;
    auto loss = mean_squared_error(tape, block.forward(tape, x), target);
    tape.backward(loss);
    auto params = trainable_params(block);
    auto fd = dltest::finite_diff_grads(loss_fn, params);
    for (std::size_t p = 0; p < params.size(); ++p) {
        ASSERT_TRUE(params[p]->has_grad());
        for (std::size_t i = 0; i < params[p]->numel(); ++i)
            EXPECT_LT(dltest::rel_err(params[p]->grad[i], fd[p][i], 1e-4), 1e-5)
                << "param " << p << " entry " << i;
    }
}

TEST(ForwardBlock, FrozenBaseChecksumStableUnderTraining) {
    Rng rng(23);
    auto block = TinyTransformerBlock::random(8, rng);
    Rng attach_rng(24);
    attach_adapters(block, block_config(2, 0.3), attach_rng);
    const auto before = base_checksum(block);
    auto x = random_input(8, 6, 25);
    auto target = random_input(8, 6, 26);
    auto params = trainable_params(block);
    AdamWState state(params);
    TrainConfig tcfg;
    for (int step = 0; step < 5; ++step) {
        resample_masks(block);
        Tape tape;
        auto loss = mean_squared_error(tape, block.forward(tape, x), target);
        tape.backward(loss);
        adamw_step(params, state, 1e-3, tcfg);
        for (auto& p : params) p->zero_grad();
    }
    EXPECT_EQ(base_checksum(block), before);
}

TEST(ForwardBlock, MergedBlockMatchesAdaptedEval) {
    Rng rng(27);
    auto block = TinyTransformerBlock::random(8, rng);
    Rng attach_rng(28);
    attach_adapters(block, block_config(2), attach_rng);
    randomize_factors(block, 29);
    set_mode(block, Mode::eval);
    auto merged = merge_into_base(block);
    EXPECT_TRUE(adapters_of(merged).empty());
    auto x = random_input(8, 6, 30);
    Tape tape;
    auto h_adapted = block.forward(tape, x);
    auto h_merged = merged.forward(tape, x);
    for (std::size_t i = 0; i < h_adapted->numel(); ++i)
        EXPECT_NEAR(h_merged->data[i], h_adapted->data[i], 1e-9);
    // The source block still owns its adapters.
    EXPECT_EQ(adapters_of(block).size(), 5u);
}

TEST(LinearProbe, AdapterRoutesThroughConfiguredMethod) {
    Rng rng(31);
    auto probe = LinearProbe::random(6, 5, rng);
    AdapterConfig cfg = block_config(3, 0.4);
    cfg.targets = {"W"};
    Rng attach_rng(32);
    attach_adapters(probe, cfg, attach_rng);
    randomize_factors(probe, 33);
    resample_masks(probe);
    auto x = random_input(5, 4, 34);
    Tape tape;
    auto via_probe = probe.forward(tape, x);
    auto direct = forward_droplora(tape, x, probe.layer.W0, *probe.layer.adapter,
                                   probe.layer.adapter->step_mask);
    EXPECT_EQ(via_probe->data, direct->data);
}

TEST(MlpClassifier, ZeroStartAndCrossEntropyGradients) {
    Rng rng(35);
    auto mlp = MlpClassifier::random(6, 10, 4, rng);
    auto base = mlp;
    AdapterConfig cfg = block_config(2, 0.5);
    cfg.targets = {"L1", "L2"};
    Rng attach_rng(36);
    attach_adapters(mlp, cfg, attach_rng);
    EXPECT_EQ(adapters_of(mlp).size(), 2u);

    auto x = random_input(6, 8, 37);
    Tape tape;
    EXPECT_EQ(mlp.forward(tape, x)->data, base.forward(tape, x)->data);

    randomize_factors(mlp, 38);
    resample_masks(mlp);
    const std::vector<std::size_t> labels = {0, 1, 2, 3, 0, 1, 2, 3};
    auto loss_fn = [&] {
        Tape t2;
        return cross_entropy(t2, transpose(t2, mlp.forward(t2, x)), labels)->value();
    };
    Tape t3;
    auto loss = cross_entropy(t3, transpose(t3, mlp.forward(t3, x)), labels);
    t3.backward(loss);
    auto params = trainable_params(mlp);
    auto fd = dltest::finite_diff_grads(loss_fn, params);
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t i = 0; i < params[p]->numel(); ++i)
            EXPECT_LT(dltest::rel_err(params[p]->grad[i], fd[p][i], 1e-4), 1e-5);
}
