#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "lvr/optim.hpp"
#include "lvr/rng.hpp"
#include "lvr/tensor.hpp"

using lvr::Rng;
using lvr::Shape;
using Td = lvr::Tensor<double>;
using Tf = lvr::Tensor<float>;

TEST(Tensor, ShapeDataInvariant) {
    Td t = Td::zeros({2, 3, 4});
    EXPECT_EQ(t.numel(), 24u);
    EXPECT_THROW(Td::from_data({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
    EXPECT_THROW(Td::zeros({2, 0}), std::invalid_argument);
}

TEST(Matmul, Identity) {
    Td a = Td::from_data({2, 2}, {1, 0, 0, 1});
    Td b = Td::from_data({2, 1}, {3, 4});
    Td c = lvr::matmul(a, b);
    EXPECT_EQ(c.shape(), (Shape{2, 1}));
    EXPECT_DOUBLE_EQ(c.at({0, 0}), 3.0);
    EXPECT_DOUBLE_EQ(c.at({1, 0}), 4.0);
}

TEST(Matmul, HandArithmetic) {
    Td a = Td::from_data({1, 2}, {1, 2});
    Td b = Td::from_data({2, 1}, {3, 4});
    EXPECT_DOUBLE_EQ(lvr::matmul(a, b).item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Td a = Td::zeros({2, 3});
    Td b = Td::zeros({2, 3});
    try {
        lvr::matmul(a, b);
        FAIL() << "expected shape error";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    }
}

TEST(Matmul, GradMatchesClosedForm) {
    // d/dA sum(A*B) = B^T broadcast over rows: at A=[[1,2]], B=[[3],[4]] -> [[3,4]]
    Td a = Td::from_data({1, 2}, {1, 2});
    Td b = Td::from_data({2, 1}, {3, 4});
    a.set_requires_grad(true);
    Td loss = lvr::sum(lvr::matmul(a, b));
    lvr::backward(loss);
    EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
    EXPECT_DOUBLE_EQ(a.grad()[1], 4.0);
}

TEST(Matmul, GradcheckRandomAndBatched) {
    Rng rng(7);
    Td a = Td::trunc_normal({3, 4}, rng, 1.0);
    Td b = Td::trunc_normal({4, 2}, rng, 1.0);
    auto res = lvrtest::gradcheck({&a, &b}, [&] { return lvr::sum(lvr::matmul(a, b)); });
    EXPECT_LE(res.max_rel_err, 1e-5);

    // batched with broadcast: [2,3,4] x [4,2]
    Td ab = Td::trunc_normal({2, 3, 4}, rng, 1.0);
    Td bb = Td::trunc_normal({4, 2}, rng, 1.0);
    auto res2 = lvrtest::gradcheck(
        {&ab, &bb}, [&] { return lvr::sum(lvr::gelu(lvr::matmul(ab, bb))); });
    EXPECT_LE(res2.max_rel_err, 1e-5);
}

TEST(Softmax, Symmetry) {
    Td x = Td::from_data({2}, {0, 0});
    Td y = lvr::softmax(x, 0);
    EXPECT_DOUBLE_EQ(y.values()[0], 0.5);
    EXPECT_DOUBLE_EQ(y.values()[1], 0.5);
}

TEST(Softmax, MaxSubtractionPreventsOverflow) {
    Td x = Td::from_data({2}, {1000, 1000});
    Td y = lvr::softmax(x, 0);
    EXPECT_DOUBLE_EQ(y.values()[0], 0.5);
    EXPECT_DOUBLE_EQ(y.values()[1], 0.5);
}

TEST(Softmax, ClosedForm) {
    Td x = Td::from_data({2}, {0.0, std::log(3.0)});
    Td y = lvr::softmax(x, 0);
    EXPECT_NEAR(y.values()[0], 0.25, 1e-12);
    EXPECT_NEAR(y.values()[1], 0.75, 1e-12);
}

TEST(Softmax, SingletonIsExactlyOne) {
    Td x = Td::from_data({1}, {42.0});
    EXPECT_DOUBLE_EQ(lvr::softmax(x, 0).item(), 1.0);
}

TEST(Softmax, RowsSumToOneProperty) {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Td x = Td::trunc_normal({4, 7}, rng, 2.0);
        Td y = lvr::softmax(x, 1);
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < 7; ++c) {
                double v = y.at({r, c});
                EXPECT_GE(v, 0.0);
                s += v;
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Softmax, Gradcheck) {
    Rng rng(3);
    Td x = Td::trunc_normal({3, 5}, rng, 1.0);
    Td w = Td::trunc_normal({3, 5}, rng, 1.0);
    auto res = lvrtest::gradcheck({&x}, [&] { return lvr::sum(lvr::mul(lvr::softmax(x, 1), w)); });
    EXPECT_LE(res.max_rel_err, 1e-5);
}

TEST(LayerNorm, ConstantVectorGoesToZero) {
    Td x = Td::full({4}, 3.7);
    Td g = Td::full({4}, 1.0);
    Td b = Td::zeros({4});
    Td y = lvr::layernorm(x, g, b);
    for (double v : y.values()) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(LayerNorm, UnitVarianceScaling) {
    Td x = Td::from_data({2}, {1, -1});
    Td g = Td::full({2}, 1.0);
    Td b = Td::zeros({2});
    Td y = lvr::layernorm(x, g, b, 1e-6);
    double expected = 1.0 / std::sqrt(1.0 + 1e-6);
    EXPECT_NEAR(y.values()[0], expected, 1e-12);
    EXPECT_NEAR(y.values()[1], -expected, 1e-12);
}

TEST(LayerNorm, Gradcheck) {
    Rng rng(5);
    Td x = Td::trunc_normal({4}, rng, 1.0);
    Td g = Td::trunc_normal({4}, rng, 1.0);
    Td b = Td::trunc_normal({4}, rng, 1.0);
    Td w = Td::trunc_normal({4}, rng, 1.0);
    auto res = lvrtest::gradcheck({&x, &g, &b}, [&] { return lvr::sum(lvr::mul(lvr::layernorm(x, g, b), w)); });
    EXPECT_LE(res.max_rel_err, 1e-4);
}

TEST(Gelu, OddFunctionFixedPoint) {
    Td x = Td::from_data({3}, {0.0, 1.0, -1.0});
    Td y = lvr::gelu(x);
    EXPECT_DOUBLE_EQ(y.values()[0], 0.0);
    EXPECT_NEAR(y.values()[1] - (-y.values()[2]), y.values()[1] + y.values()[2], 1e-12);
}

TEST(Gelu, Gradcheck) {
    Rng rng(9);
    Td x = Td::trunc_normal({6}, rng, 1.5);
    auto res = lvrtest::gradcheck({&x}, [&] { return lvr::sum(lvr::gelu(x)); });
    EXPECT_LE(res.max_rel_err, 1e-5);
}

TEST(Elementwise, BroadcastingAndGrads) {
    Rng rng(13);
    Td a = Td::trunc_normal({3, 4}, rng, 1.0);
    Td b = Td::trunc_normal({4}, rng, 1.0);
    Td c = lvr::add(a, b);
    EXPECT_EQ(c.shape(), (Shape{3, 4}));
    EXPECT_DOUBLE_EQ(c.at({1, 2}), a.at({1, 2}) + b.values()[2]);

    auto res = lvrtest::gradcheck({&a, &b}, [&] { return lvr::sum(lvr::mul(lvr::sub(a, b), lvr::add(a, b))); });
    EXPECT_LE(res.max_rel_err, 1e-5);

    Td col = Td::trunc_normal({3, 1}, rng, 1.0);
    auto res2 = lvrtest::gradcheck({&a, &col}, [&] { return lvr::sum(lvr::mul(a, col)); });
    EXPECT_LE(res2.max_rel_err, 1e-5);

    EXPECT_THROW(lvr::add(Td::zeros({3}), Td::zeros({4})), std::invalid_argument);
}

TEST(CrossEntropy, UniformClosedForm) {
    Td logits = Td::zeros({1, 4});
    Td loss = lvr::cross_entropy(logits, {2});
    EXPECT_NEAR(loss.item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, LabelOutOfRange) {
    Td logits = Td::zeros({1, 4});
    EXPECT_THROW(lvr::cross_entropy(logits, {4}), std::out_of_range);
}

TEST(CrossEntropy, Gradcheck) {
    Rng rng(17);
    Td logits = Td::trunc_normal({5, 3}, rng, 1.0);
    auto res = lvrtest::gradcheck({&logits}, [&] { return lvr::cross_entropy(logits, {0, 2, 1, 1, 0}); });
    EXPECT_LE(res.max_rel_err, 1e-5);
}

TEST(SmoothL1, ClosedForms) {
    Td x = Td::from_data({2}, {0.5, 2.0});
    Td y = lvr::smooth_l1(x, 1.0);
    EXPECT_DOUBLE_EQ(y.values()[0], 0.125);  // 0.5 * 0.5^2
    EXPECT_DOUBLE_EQ(y.values()[1], 1.5);    // 2 - 0.5
    // beta = 0 degenerates to |d|
    Td z = lvr::smooth_l1(x, 0.0);
    EXPECT_DOUBLE_EQ(z.values()[0], 0.5);
    EXPECT_DOUBLE_EQ(z.values()[1], 2.0);
}

TEST(SmoothL1, Gradcheck) {
    Td x = Td::from_data({4}, {0.3, -0.7, 1.8, -2.5});
    auto res = lvrtest::gradcheck({&x}, [&] { return lvr::sum(lvr::smooth_l1(x, 1.0)); });
    EXPECT_LE(res.max_rel_err, 1e-5);
}

TEST(GatherScatter, InversePairOnGatheredPositions) {
    Rng rng(23);
    Td x = Td::trunc_normal({6, 3}, rng, 1.0);
    std::vector<std::size_t> idx = {4, 1, 5};
    Td g = lvr::gather_rows(x, idx);
    Td back = lvr::scatter_rows(g, idx, 6);
    for (std::size_t r : idx)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(back.at({r, c}), x.at({r, c}));
    // untouched rows are zero
    EXPECT_DOUBLE_EQ(back.at({0, 0}), 0.0);
    EXPECT_THROW(lvr::gather_rows(x, {6}), std::out_of_range);
}

TEST(GatherScatter, Gradcheck) {
    Rng rng(29);
    Td x = Td::trunc_normal({5, 2}, rng, 1.0);
    std::vector<std::size_t> idx = {3, 3, 0};  // duplicate gather
    auto res = lvrtest::gradcheck({&x}, [&] {
        Td g = lvr::gather_rows(x, idx);
        return lvr::sum(lvr::mul(lvr::scatter_rows(g, {1, 2, 4}, 5), lvr::scatter_rows(g, {1, 2, 4}, 5)));
    });
    EXPECT_LE(res.max_rel_err, 1e-5);
}

TEST(ShapeOps, ReshapeTransposeRoundTripRowMajor) {
    // flat index = sum idx_i * stride_i stays consistent through
    // reshape/transpose round trips
    Rng rng(31);
    Td x = Td::trunc_normal({2, 3, 4}, rng, 1.0);
    Td r = lvr::reshape(x, {6, 4});
    EXPECT_DOUBLE_EQ(r.at({4, 3}), x.at({1, 1, 3}));
    Td t = lvr::transpose(x, 0, 2);
    EXPECT_EQ(t.shape(), (Shape{4, 3, 2}));
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            for (std::size_t k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(t.at({k, j, i}), x.at({i, j, k}));
    Td tt = lvr::transpose(t, 0, 2);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(tt.values()[i], x.values()[i]);

    auto res = lvrtest::gradcheck({&x}, [&] {
        Td y = lvr::transpose(lvr::reshape(x, {6, 4}), 0, 1);
        return lvr::sum(lvr::mul(y, y));
    });
    EXPECT_LE(res.max_rel_err, 1e-5);
}

TEST(Reductions, SumMeanAxis) {
    Td x = Td::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_DOUBLE_EQ(lvr::sum(x).item(), 21.0);
    EXPECT_DOUBLE_EQ(lvr::mean(x).item(), 3.5);
    Td s0 = lvr::sum_axis(x, 0);
    EXPECT_EQ(s0.shape(), (Shape{3}));
    EXPECT_DOUBLE_EQ(s0.values()[1], 7.0);
    Td s1 = lvr::sum_axis(x, 1);
    EXPECT_EQ(s1.shape(), (Shape{2}));
    EXPECT_DOUBLE_EQ(s1.values()[0], 6.0);

    Rng rng(37);
    Td y = Td::trunc_normal({3, 4}, rng, 1.0);
    auto res = lvrtest::gradcheck({&y}, [&] { return lvr::mean(lvr::mul(lvr::sum_axis(y, 0), lvr::sum_axis(y, 0))); });
    EXPECT_LE(res.max_rel_err, 1e-5);
}

TEST(Backward, LinearAndQuadratic) {
    Td x = Td::from_data({3}, {1, 2, 3});
    x.set_requires_grad(true);
    Td loss = lvr::sum(x);
    lvr::backward(loss);
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);

    Td y = Td::from_data({2}, {1, 2});
    y.set_requires_grad(true);
    lvr::backward(lvr::sum(lvr::mul(y, y)));
    EXPECT_DOUBLE_EQ(y.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(y.grad()[1], 4.0);
}

TEST(Backward, NonScalarRejected) {
    Td x = Td::zeros({3});
    x.set_requires_grad(true);
    EXPECT_THROW(lvr::backward(x), std::invalid_argument);
}

TEST(Backward, UnusedLeafHasZeroOrAbsentGrad) {
    Td used = Td::from_data({2}, {1, 2});
    Td unused = Td::from_data({2}, {3, 4});
    used.set_requires_grad(true);
    unused.set_requires_grad(true);
    lvr::backward(lvr::sum(used));
    if (unused.has_grad())
        for (double g : unused.grad()) EXPECT_DOUBLE_EQ(g, 0.0);
    EXPECT_TRUE(used.has_grad());
}

TEST(Backward, RepeatedRoundsAccumulateUntilZeroed) {
    Td x = Td::from_data({2}, {1, 2});
    x.set_requires_grad(true);
    lvr::backward(lvr::sum(lvr::mul(x, x)));
    lvr::backward(lvr::sum(lvr::mul(x, x)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
    x.zero_grad();
    lvr::backward(lvr::sum(lvr::mul(x, x)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Backward, NoGradGuardBlocksTape) {
    Td x = Td::from_data({2}, {1, 2});
    x.set_requires_grad(true);
    lvr::Tensor<double> y;
    {
        lvr::NoGradGuard ng;
        y = lvr::mul(x, x);
    }
    EXPECT_FALSE(y.requires_grad());
}

TEST(AdamW, ZeroGradZeroDecayIsNoOp) {
    lvr::ParamStore<double> store;
    auto& p = store.add("p", Td::from_data({2}, {1.0, -2.0}));
    lvr::AdamWState<double> st;
    st.init(store);
    p.grad_mut();  // zero grad buffer
    lvr::adamw_step(store, st, 0.1, 0.9, 0.999, 1e-8, 0.0);
    EXPECT_DOUBLE_EQ(p.values()[0], 1.0);
    EXPECT_DOUBLE_EQ(p.values()[1], -2.0);
}

TEST(AdamW, FirstStepMovesByLrSign) {
    lvr::ParamStore<double> store;
    auto& p = store.add("p", Td::scalar(1.0));
    lvr::AdamWState<double> st;
    st.init(store);
    p.grad_mut()[0] = 1.0;
    lvr::adamw_step(store, st, 0.1, 0.9, 0.999, 1e-8, 0.0);
    EXPECT_NEAR(p.values()[0], 0.9, 1e-6);
}

TEST(AdamW, DecoupledDecay) {
    lvr::ParamStore<double> store;
    auto& p = store.add("p", Td::scalar(1.0));
    lvr::AdamWState<double> st;
    st.init(store);
    lvr::adamw_step(store, st, 0.1, 0.9, 0.999, 1e-8, 0.05);
    EXPECT_DOUBLE_EQ(p.values()[0], 0.995);
}

TEST(LrSchedule, WarmupThenCosine) {
    double base = 1e-3;
    EXPECT_NEAR(lvr::cosine_warmup_lr(base, 0, 10, 100), base * 0.1, 1e-15);
    EXPECT_NEAR(lvr::cosine_warmup_lr(base, 9, 10, 100), base, 1e-15);
    EXPECT_NEAR(lvr::cosine_warmup_lr(base, 10, 10, 100), base, 1e-15);
    EXPECT_NEAR(lvr::cosine_warmup_lr(base, 55, 10, 100), 0.5 * base, 1e-12);
    EXPECT_NEAR(lvr::cosine_warmup_lr(base, 100, 10, 100), 0.0, 1e-12);
}

TEST(Rng, DeterministicStreams) {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
    bool differs = false;
    Rng a2(42);
    for (int i = 0; i < 100; ++i) differs |= (a2.next_u64() != c.next_u64());
    EXPECT_TRUE(differs);
    EXPECT_NE(lvr::seed_mix(1, "mask"), lvr::seed_mix(1, "window"));
    EXPECT_NE(lvr::seed_mix(1, "mask", 0), lvr::seed_mix(1, "mask", 1));
}

TEST(Rng, BoundedAndNormalSanity) {
    Rng rng(7);
    for (int i = 0; i < 1000; ++i) EXPECT_LT(rng.next_below(13), 13u);
    double acc = 0;
    int n = 20000;
    for (int i = 0; i < n; ++i) acc += rng.next_trunc_normal(0.02);
    EXPECT_NEAR(acc / n, 0.0, 1e-3);
}
