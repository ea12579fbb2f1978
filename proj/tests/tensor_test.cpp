#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "binens/rng.hpp"
#include "binens/tensor.hpp"

using namespace binens;

namespace {

template <class T>
TensorT<T> random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0, bool rg = false) {
    TensorT<T> t = TensorT<T>::zeros(shape, rg);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

// Relative error with an absolute floor, the convention used by every
// gradient check in this suite.
double rel_err(double a, double b, double floor = 1e-6) {
    const double diff = std::abs(a - b);
    const double mag = std::max({std::abs(a), std::abs(b), floor});
    return diff / mag;
}

// Checks backprop of `build` (a scalar-valued graph of one input) against
// central differences on a double instantiation.
void check_grad(const std::function<TensorT<double>(const TensorT<double>&)>& build, Shape shape,
                std::uint64_t seed, double tol = 1e-3) {
    Rng rng(seed);
    TensorT<double> x = random_tensor<double>(shape, rng, -2.0, 2.0, true);

    TapeT<double> tape;
    {
        TapeScopeT<double> scope(tape);
        TensorT<double> loss = build(x);
        tape.backprop(loss);
    }
    std::vector<double> analytic(x.grad().begin(), x.grad().end());

    auto f = [&](TensorT<double>& v) -> double { return build(v).item(); };
    TensorT<double> numeric = finite_diff_grad<double>(f, x, 1e-5);
    for (std::size_t i = 0; i < x.numel(); ++i)
        ASSERT_LT(rel_err(analytic[i], numeric[i]), tol) << "coordinate " << i;
}

TEST(TensorCore, MatmulIdentity) {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor c = matmul(a, eye);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(c[i], a[i]);
}

TEST(TensorCore, MatmulShapeMismatch) {
    Tensor a({2, 3}, std::vector<float>(6, 1.0f));
    Tensor b({4, 2}, std::vector<float>(8, 1.0f));
    try {
        matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("matmul"), std::string::npos);
        EXPECT_NE(msg.find("[2,3]"), std::string::npos);
        EXPECT_NE(msg.find("[4,2]"), std::string::npos);
    }
}

TEST(TensorCore, BatchedMatmulMatchesPerSlice) {
    Rng rng(3);
    auto a = random_tensor<float>({2, 3, 4}, rng);
    auto b = random_tensor<float>({2, 4, 5}, rng);
    Tensor c = matmul(a, b);
    for (int bi = 0; bi < 2; ++bi) {
        Tensor as({3, 4}, std::vector<float>(a.data().begin() + bi * 12, a.data().begin() + (bi + 1) * 12));
        Tensor bs({4, 5}, std::vector<float>(b.data().begin() + bi * 20, b.data().begin() + (bi + 1) * 20));
        Tensor cs = matmul(as, bs);
        for (std::size_t i = 0; i < 15; ++i) EXPECT_FLOAT_EQ(cs[i], c[bi * 15 + i]);
    }
}

TEST(TensorCore, SoftmaxSymmetry) {
    Tensor x({1, 2}, {0, 0});
    Tensor y = row_softmax(x);
    EXPECT_FLOAT_EQ(y[0], 0.5f);
    EXPECT_FLOAT_EQ(y[1], 0.5f);
}

TEST(TensorCore, SoftmaxRowsSumToOne) {
    Rng rng(11);
    auto x = random_tensor<float>({7, 13}, rng, -10.0, 10.0);
    Tensor y = row_softmax(x);
    for (int r = 0; r < 7; ++r) {
        double s = 0;
        for (int c = 0; c < 13; ++c) s += y[static_cast<std::size_t>(r * 13 + c)];
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(TensorCore, LayerNormConstantRowIsZero) {
    // 0.5 is exactly representable: the row mean is exact and the output is
    // exactly zero under the eps-stabilized formula.
    Tensor x({1, 4}, {0.5f, 0.5f, 0.5f, 0.5f});
    Tensor gamma = Tensor::full({4}, 1.0f);
    Tensor beta = Tensor::zeros({4});
    Tensor y = layer_norm(x, gamma, beta, 1e-5f);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y[i], 0.0f);
    // Generic constants accumulate one float32 ulp of mean error at most,
    // bounded by ulp/sqrt(eps).
    Tensor x2({1, 4}, {1.7f, 1.7f, 1.7f, 1.7f});
    Tensor y2 = layer_norm(x2, gamma, beta, 1e-5f);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y2[i], 0.0f, 1e-4f);
}

TEST(TensorCore, LayerNormRowMeanNearZero) {
    Rng rng(5);
    auto x = random_tensor<float>({6, 16}, rng);
    Tensor gamma = Tensor::full({16}, 1.0f);
    Tensor beta = Tensor::zeros({16});
    Tensor y = layer_norm(x, gamma, beta, 1e-5f);
    for (int r = 0; r < 6; ++r) {
        double mean = 0;
        for (int c = 0; c < 16; ++c) mean += y[static_cast<std::size_t>(r * 16 + c)];
        mean /= 16.0;
        EXPECT_LT(std::abs(mean), 1e-5);
    }
}

TEST(TensorCore, BackpropSumOfSquares) {
    Tensor x({3}, {1, 2, 3}, true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = reduce_sum(mul(x, x));
        tape.backprop(loss);
    }
    EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
    EXPECT_FLOAT_EQ(x.grad()[1], 4.0f);
    EXPECT_FLOAT_EQ(x.grad()[2], 6.0f);
    EXPECT_TRUE(tape.empty()) << "tape must be cleared after backprop";
}

TEST(TensorCore, BackpropMean) {
    Tensor x({4}, {1, 2, 3, 4}, true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = reduce_mean(x);
        tape.backprop(loss);
    }
    for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(x.grad()[i], 0.25f);
}

TEST(TensorCore, NonScalarLossRejected) {
    Tensor x({2}, {1, 2}, true);
    Tape tape;
    TapeScope scope(tape);
    Tensor y = mul(x, x);
    EXPECT_THROW(tape.backprop(y), ShapeError);
}

TEST(TensorCore, UnreachableNodeGradIsZero) {
    Tensor x({2}, {1, 2}, true);
    Tensor z({2}, {5, 6}, true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor dead = mul(z, z);  // recorded, but not part of the loss
        Tensor loss = reduce_sum(mul(x, x));
        tape.backprop(loss);
        (void)dead;
    }
    ASSERT_TRUE(z.has_grad());
    EXPECT_FLOAT_EQ(z.grad()[0], 0.0f);
    EXPECT_FLOAT_EQ(z.grad()[1], 0.0f);
}

TEST(TensorCore, ForwardDeterminism) {
    Rng rng1(42), rng2(42);
    auto a1 = random_tensor<float>({8, 8}, rng1);
    auto a2 = random_tensor<float>({8, 8}, rng2);
    auto b1 = random_tensor<float>({8, 8}, rng1);
    auto b2 = random_tensor<float>({8, 8}, rng2);
    Tensor c1 = row_softmax(matmul(a1, b1));
    Tensor c2 = row_softmax(matmul(a2, b2));
    for (std::size_t i = 0; i < c1.numel(); ++i) {
        EXPECT_EQ(c1[i], c2[i]) << "bit-identical outputs expected";
    }
}

TEST(TensorCore, FiniteDiffQuadratic) {
    // f = x^2 at x=3: derivative 6.
    TensorT<double> x({1}, {3.0});
    auto f = [](TensorT<double>& v) { return v[0] * v[0]; };
    auto g = finite_diff_grad<double>(f, x, 1e-4);
    EXPECT_NEAR(g[0], 6.0, 1e-7);
    EXPECT_DOUBLE_EQ(x[0], 3.0) << "input restored after perturbation";
}

TEST(TensorCore, FiniteDiffSin) {
    TensorT<double> x({1}, {0.0});
    auto f = [](TensorT<double>& v) { return std::sin(v[0]); };
    auto g = finite_diff_grad<double>(f, x, 1e-4);
    EXPECT_NEAR(g[0], 1.0, 1e-8);
}

TEST(TensorCore, FiniteDiffRejectsNonPositiveEps) {
    TensorT<double> x({1}, {1.0});
    auto f = [](TensorT<double>& v) { return v[0]; };
    EXPECT_THROW(finite_diff_grad<double>(f, x, 0.0), ConfigError);
}

// --- per-primitive gradient checks (double instantiation of the same
// templated kernels the float path runs) ---

TEST(GradCheck, Matmul2d) {
    Rng rng(101);
    auto w = random_tensor<double>({4, 3}, rng);
    check_grad([&](const TensorT<double>& x) { return reduce_sum(mul(matmul(x, w), matmul(x, w))); }, {5, 4}, 1);
}

TEST(GradCheck, MatmulBatchedBothSides) {
    Rng rng(102);
    auto other = random_tensor<double>({2, 4, 3}, rng, -1.0, 1.0, true);
    check_grad([&](const TensorT<double>& x) { return reduce_sum(mul(matmul(x, other), matmul(x, other))); },
               {2, 3, 4}, 2);
    check_grad([&](const TensorT<double>& x) { return reduce_sum(matmul(other, x)); }, {2, 3, 5}, 3);
}

TEST(GradCheck, AddBias) {
    check_grad([](const TensorT<double>& x) {
        TensorT<double> bias({4}, {0.1, -0.2, 0.3, -0.4}, true);
        return reduce_sum(mul(add(x, bias), add(x, bias)));
    }, {3, 4}, 4);
}

TEST(GradCheck, SubMulScale) {
    Rng rng(105);
    auto other = random_tensor<double>({6}, rng);
    check_grad([&](const TensorT<double>& x) { return reduce_sum(mul(sub(x, other), scale(x, 0.7))); }, {6}, 5);
}

TEST(GradCheck, Permute) {
    check_grad([](const TensorT<double>& x) {
        auto p = permute(x, {1, 2, 0});
        return reduce_sum(mul(p, p));
    }, {2, 3, 4}, 6);
}

TEST(GradCheck, Reshape) {
    check_grad([](const TensorT<double>& x) {
        auto r = reshape(x, {6, 2});
        return reduce_mean(mul(r, r));
    }, {3, 4}, 7);
}

TEST(GradCheck, RowSoftmax) {
    check_grad([](const TensorT<double>& x) {
        TensorT<double> w({2, 5}, {0.1, 0.9, -0.3, 0.2, 0.5, -0.7, 0.4, 0.1, -0.2, 0.6});
        return reduce_sum(mul(row_softmax(x), w));
    }, {2, 5}, 8);
}

TEST(GradCheck, RowLogSoftmax) {
    check_grad([](const TensorT<double>& x) {
        TensorT<double> w({2, 5}, {0.1, 0.9, -0.3, 0.2, 0.5, -0.7, 0.4, 0.1, -0.2, 0.6});
        return reduce_sum(mul(row_log_softmax(x), w));
    }, {2, 5}, 9);
}

TEST(GradCheck, LayerNorm) {
    check_grad([](const TensorT<double>& x) {
        TensorT<double> gamma({6}, {1.1, 0.9, 1.2, 0.8, 1.0, 1.3}, true);
        TensorT<double> beta({6}, {0.0, 0.1, -0.1, 0.2, -0.2, 0.0}, true);
        auto y = layer_norm(x, gamma, beta, 1e-5);
        return reduce_sum(mul(y, y));
    }, {4, 6}, 10);
}

TEST(GradCheck, LayerNormAffineParams) {
    Rng rng(110);
    auto x = random_tensor<double>({3, 5}, rng, -2.0, 2.0, false);
    check_grad([&](const TensorT<double>& gamma) {
        TensorT<double> beta = TensorT<double>::zeros({5});
        auto y = layer_norm(x, gamma, beta, 1e-5);
        return reduce_sum(mul(y, y));
    }, {5}, 11);
}

TEST(GradCheck, Gelu) {
    check_grad([](const TensorT<double>& x) { return reduce_sum(mul(gelu(x), gelu(x))); }, {9}, 12);
}

TEST(GradCheck, EmbeddingLookup) {
    std::vector<int> ids{0, 2, 1, 2};
    check_grad([&](const TensorT<double>& table) {
        auto e = embedding_lookup(table, ids, {2, 2});
        return reduce_sum(mul(e, e));
    }, {3, 4}, 13);
}

TEST(GradCheck, PerSampleMeanClipMax) {
    check_grad([](const TensorT<double>& x) {
        return reduce_sum(per_sample_mean(mul(clip(x, -1.5, 1.5), cmax(x, -0.5))));
    }, {3, 4}, 14);
}

TEST(GradCheck, RowGather) {
    std::vector<int> idx{2, 0, 1};
    check_grad([&](const TensorT<double>& x) {
        auto g = row_gather(x, idx);
        return reduce_sum(mul(g, g));
    }, {3, 3}, 15);
}

TEST(GradCheck, MaskedMeanPool) {
    TensorT<double> mask({2, 3}, {1, 1, 0, 1, 0, 0});
    check_grad([&](const TensorT<double>& x) {
        auto p = masked_mean_pool(x, mask);
        return reduce_sum(mul(p, p));
    }, {2, 3, 4}, 16);
}

// Two-layer MLP vs finite differences, eps = 1e-4.
TEST(GradCheck, TwoLayerMlp) {
    Rng rng(1234);
    auto w1 = random_tensor<double>({6, 8}, rng, -0.5, 0.5, true);
    auto b1 = random_tensor<double>({8}, rng, -0.1, 0.1, true);
    auto w2 = random_tensor<double>({8, 3}, rng, -0.5, 0.5, true);
    auto b2 = random_tensor<double>({3}, rng, -0.1, 0.1, true);
    auto x = random_tensor<double>({4, 6}, rng, -1.0, 1.0, false);
    std::vector<int> labels{0, 2, 1, 0};

    auto loss_of = [&]() {
        auto h = gelu(add(matmul(x, w1), b1));
        auto logits = add(matmul(h, w2), b2);
        auto picked = row_gather(row_log_softmax(logits), labels);
        return scale(reduce_mean(picked), -1.0);
    };

    TapeT<double> tape;
    {
        TapeScopeT<double> scope(tape);
        auto loss = loss_of();
        tape.backprop(loss);
    }
    for (auto* param : {&w1, &b1, &w2, &b2}) {
        std::vector<double> analytic(param->grad().begin(), param->grad().end());
        auto f = [&](TensorT<double>&) { return loss_of().item(); };
        auto numeric = finite_diff_grad<double>(f, *param, 1e-4);
        for (std::size_t i = 0; i < param->numel(); ++i)
            ASSERT_LT(rel_err(analytic[i], numeric[i]), 1e-3) << "param coord " << i;
    }
}

}  // namespace
