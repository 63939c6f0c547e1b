#include <gtest/gtest.h>

#include <cmath>

#include "simple/adam.hpp"
#include "simple/gradcheck.hpp"
#include "simple/layers.hpp"
#include "simple/losses.hpp"
#include "simple/params.hpp"
#include "simple/tape.hpp"

using namespace simple;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& x : t.v) x = rng.uniform(-scale, scale);
    return t;
}

// Scalar loss with distinct per-element weights so gradients do not cancel.
template <typename T>
Var<T> weighted_sum(Tape<T>& t, Var<T> y) {
    Tensor<T> w(t.val(y).shape);
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = T(0.1) + T(0.01) * T(i % 17);
    return sum_all(t, mul(t, y, t.leaf(w)));
}

}  // namespace

// ---------------------------------------------------------------------------
// forward_layer examples
// ---------------------------------------------------------------------------

TEST(ForwardLayer, Conv2dIdentityKernel) {
    LayerSpec spec{.kind = LayerKind::conv2d, .kernel_h = 1, .kernel_w = 1, .units = 1};
    std::vector<Tensor<double>> params = {Tensor<double>({1, 1, 1, 1}, {1.0}), Tensor<double>({1})};
    Tensor<double> input({1, 1, 1, 1}, {5.0});
    Rng rng(0);
    auto out = forward_layer(spec, params, input, false, rng);
    ASSERT_EQ(out.shape, (std::vector<int>{1, 1, 1, 1}));
    EXPECT_DOUBLE_EQ(out[0], 5.0);
}

TEST(ForwardLayer, Conv2dOnesKernelValidPadding) {
    // 2x2 ones kernel, stride 1, no padding, input [[1,2],[3,4]] -> [[10]].
    LayerSpec spec{.kind = LayerKind::conv2d, .kernel_h = 2, .kernel_w = 2, .units = 1,
                   .padding = Padding::valid};
    std::vector<Tensor<double>> params = {Tensor<double>::full({2, 2, 1, 1}, 1.0), Tensor<double>({1})};
    Tensor<double> input({1, 2, 2, 1}, {1, 2, 3, 4});
    Rng rng(0);
    auto out = forward_layer(spec, params, input, false, rng);
    ASSERT_EQ(out.shape, (std::vector<int>{1, 1, 1, 1}));
    EXPECT_DOUBLE_EQ(out[0], 10.0);
}

TEST(ForwardLayer, LstmCellZeroWeightsGivesZeroHidden) {
    LayerSpec spec{.kind = LayerKind::lstm_cell, .units = 3};
    std::vector<Tensor<double>> params = {Tensor<double>({2, 12}), Tensor<double>({3, 12}),
                                          Tensor<double>({12})};
    Tensor<double> input({1, 2}, {0.7, -0.4});
    Rng rng(0);
    auto out = forward_layer(spec, params, input, false, rng);
    ASSERT_EQ(out.shape, (std::vector<int>{1, 3}));
    for (double x : out.v) EXPECT_DOUBLE_EQ(x, 0.0);
}

TEST(ForwardLayer, LayerNormUnitGainZeroBias) {
    LayerSpec spec{.kind = LayerKind::layer_norm};
    std::vector<Tensor<double>> params = {Tensor<double>::full({2}, 1.0), Tensor<double>({2})};
    Tensor<double> input({1, 2}, {1.0, 3.0});
    Rng rng(0);
    auto out = forward_layer(spec, params, input, false, rng);
    EXPECT_NEAR(out[0], -1.0, 1e-5);
    EXPECT_NEAR(out[1], 1.0, 1e-5);
}

TEST(ForwardLayer, ShapeMismatchNamesLayer) {
    LayerSpec spec{.kind = LayerKind::conv2d, .kernel_h = 3, .kernel_w = 3, .units = 4,
                   .name = "encoder_down_1"};
    Rng rng(1);
    auto params = init_layer_params<double>(spec, {1, 8, 8, 3}, rng);
    Tensor<double> wrong({1, 8, 8, 5});
    try {
        forward_layer(spec, params, wrong, false, rng);
        FAIL() << "expected shape rejection";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("conv2d"), std::string::npos);
    }
}

TEST(ForwardLayer, DeterministicGivenSeed) {
    LayerSpec spec{.kind = LayerKind::dropout, .rate = 0.4};
    Tensor<double> input = random_tensor({4, 6}, *new Rng(3));
    Rng r1(11), r2(11);
    auto a = forward_layer(spec, {}, input, true, r1);
    auto b = forward_layer(spec, {}, input, true, r2);
    EXPECT_EQ(a.v, b.v);
}

// ---------------------------------------------------------------------------
// Dropout semantics
// ---------------------------------------------------------------------------

TEST(Dropout, IdentityWhenNotTraining) {
    LayerSpec spec{.kind = LayerKind::dropout, .rate = 0.7};
    Rng rng(5);
    Tensor<double> input = random_tensor({3, 5}, rng);
    Rng r2(9);
    auto out = forward_layer(spec, {}, input, false, r2);
    EXPECT_EQ(out.v, input.v);
}

TEST(Dropout, IdentityAtRateZeroRegardlessOfFlag) {
    LayerSpec spec{.kind = LayerKind::dropout, .rate = 0.0};
    Rng rng(5);
    Tensor<double> input = random_tensor({3, 5}, rng);
    Rng r2(9);
    auto out = forward_layer(spec, {}, input, true, r2);
    EXPECT_EQ(out.v, input.v);
}

TEST(Dropout, InvertedScalingPreservesExpectation) {
    Tensor<double> input = Tensor<double>::full({1, 10000}, 1.0);
    LayerSpec spec{.kind = LayerKind::dropout, .rate = 0.25};
    Rng rng(123);
    auto out = forward_layer(spec, {}, input, true, rng);
    double mean = 0;
    for (double x : out.v) mean += x;
    mean /= static_cast<double>(out.numel());
    EXPECT_NEAR(mean, 1.0, 0.02);
}

// ---------------------------------------------------------------------------
// softmax_cross_entropy examples
// ---------------------------------------------------------------------------

TEST(SoftmaxCrossEntropy, UniformLogits) {
    Tensor<double> logits({2}, {0.0, 0.0});
    EXPECT_NEAR(softmax_cross_entropy(logits, 0), std::log(2.0), 1e-12);
}

TEST(SoftmaxCrossEntropy, SaturatedMargin) {
    Tensor<double> logits({2}, {50.0, 0.0});
    EXPECT_NEAR(softmax_cross_entropy(logits, 0), 0.0, 1e-12);
}

TEST(SoftmaxCrossEntropy, ClosedForm) {
    Tensor<double> logits({2}, {2.0, 0.0});
    // 2 + ln(1 + e^-2)
    EXPECT_NEAR(softmax_cross_entropy(logits, 1), 2.1269280110429727, 1e-12);
}

TEST(SoftmaxCrossEntropy, OutOfRangeIndexRejected) {
    Tensor<double> logits({3}, {1.0, 2.0, 3.0});
    EXPECT_THROW(softmax_cross_entropy(logits, 3), std::invalid_argument);
    EXPECT_THROW(softmax_cross_entropy(logits, -1), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// gradient_check contract
// ---------------------------------------------------------------------------

TEST(GradientCheck, SumOfSquares) {
    CheckedFn<double> fn = [](const Tensor<double>& x, Tensor<double>* grad) {
        double s = 0;
        for (double v : x.v) s += v * v;
        if (grad) {
            *grad = Tensor<double>(x.shape);
            for (int64_t i = 0; i < x.numel(); ++i) (*grad)[i] = 2 * x[i];
        }
        return s;
    };
    Tensor<double> point({2}, {1.0, 2.0});
    EXPECT_LT(gradient_check(fn, point, 1e-5), 1e-6);
}

TEST(GradientCheck, ConstantFunctionHasZeroError) {
    CheckedFn<double> fn = [](const Tensor<double>& x, Tensor<double>* grad) {
        if (grad) *grad = Tensor<double>(x.shape);
        return 3.5;
    };
    Tensor<double> point({3}, {1.0, -2.0, 0.5});
    EXPECT_DOUBLE_EQ(gradient_check(fn, point, 1e-5), 0.0);
}

namespace {

// Gradcheck a layer with respect to its input and every parameter tensor.
void check_layer_gradients(const LayerSpec& spec, const std::vector<int>& input_shape, uint64_t seed) {
    Rng init_rng(seed);
    auto params = init_layer_params<double>(spec, input_shape, init_rng);
    Tensor<double> input = random_tensor(input_shape, init_rng);
    if (spec.kind == LayerKind::embedding) {
        for (auto& x : input.v) x = std::floor(std::abs(x) * spec.vocab * 0.999);
    }

    auto run = [&](const Tensor<double>& in, const std::vector<Tensor<double>>& ps, int grad_of,
                   Tensor<double>* grad) {
        Tape<double> t;
        auto iv = t.leaf(in, grad_of == -1);
        std::vector<Var<double>> pv;
        for (size_t i = 0; i < ps.size(); ++i) pv.push_back(t.leaf(ps[i], grad_of == static_cast<int>(i)));
        Rng drop_rng(seed + 1);  // fresh stream per call keeps dropout masks fixed
        auto out = layer_forward(t, spec, pv, iv, true, drop_rng);
        auto loss = weighted_sum(t, out);
        if (grad) {
            t.backward(loss);
            *grad = t.grad(grad_of == -1 ? iv : pv[static_cast<size_t>(grad_of)]);
        }
        return t.val(loss)[0];
    };

    if (spec.kind != LayerKind::embedding) {  // integer inputs are not differentiable
        CheckedFn<double> fn = [&](const Tensor<double>& x, Tensor<double>* grad) {
            return run(x, params, -1, grad);
        };
        EXPECT_LT(gradient_check(fn, input, 1e-5), 1e-4) << spec.label() << " d/dinput";
    }
    for (size_t pi = 0; pi < params.size(); ++pi) {
        CheckedFn<double> fn = [&, pi](const Tensor<double>& p, Tensor<double>* grad) {
            auto ps = params;
            ps[pi] = p;
            return run(input, ps, static_cast<int>(pi), grad);
        };
        EXPECT_LT(gradient_check(fn, params[pi], 1e-5), 1e-4) << spec.label() << " d/dparam" << pi;
    }
}

}  // namespace

TEST(GradientCheck, EveryLayerKind) {
    check_layer_gradients({.kind = LayerKind::conv2d, .kernel_h = 3, .kernel_w = 3,
                           .stride_h = 2, .stride_w = 2, .units = 3, .name = "gc_conv"},
                          {2, 6, 4, 2}, 101);
    check_layer_gradients({.kind = LayerKind::conv2d_transpose, .kernel_h = 4, .kernel_w = 4,
                           .stride_h = 2, .stride_w = 2, .units = 2, .name = "gc_deconv"},
                          {2, 3, 2, 3}, 102);
    check_layer_gradients({.kind = LayerKind::dense, .units = 5, .name = "gc_dense"}, {3, 4}, 103);
    check_layer_gradients({.kind = LayerKind::lstm_cell, .units = 4, .name = "gc_lstm"}, {2, 3}, 104);
    check_layer_gradients({.kind = LayerKind::layer_norm, .name = "gc_ln"}, {3, 6}, 105);
    check_layer_gradients({.kind = LayerKind::dropout, .rate = 0.3, .name = "gc_drop"}, {3, 5}, 106);
    check_layer_gradients({.kind = LayerKind::relu, .name = "gc_relu"}, {3, 5}, 107);
    check_layer_gradients({.kind = LayerKind::softmax, .name = "gc_softmax"}, {3, 5}, 108);
    check_layer_gradients({.kind = LayerKind::embedding, .units = 3, .vocab = 7, .name = "gc_embed"},
                          {4}, 109);
}

TEST(GradientCheck, LayerComposedWithCrossEntropy) {
    // Any forward_layer composed with softmax_cross_entropy stays within contract.
    Rng rng(77);
    LayerSpec spec{.kind = LayerKind::dense, .units = 4, .name = "gc_dense_ce"};
    auto params = init_layer_params<double>(spec, {1, 3}, rng);
    Tensor<double> input = random_tensor({1, 3}, rng);
    CheckedFn<double> fn = [&](const Tensor<double>& x, Tensor<double>* grad) {
        Tape<double> t;
        auto iv = t.leaf(x, true);
        std::vector<Var<double>> pv = {t.leaf(params[0]), t.leaf(params[1])};
        Rng drng(1);
        auto logits = layer_forward(t, spec, pv, iv, false, drng);
        auto flat = reshape(t, logits, {4});
        auto loss = softmax_cross_entropy(t, flat, 2);
        if (grad) {
            t.backward(loss);
            *grad = t.grad(iv);
        }
        return t.val(loss)[0];
    };
    EXPECT_LT(gradient_check(fn, input, 1e-5), 1e-4);
}

// ---------------------------------------------------------------------------
// Conv specifics
// ---------------------------------------------------------------------------

TEST(Conv, TransposeRestoresPreDownscaleShape) {
    // Stride-2 downscale then matching transpose restores the spatial shape,
    // including odd sizes handled by the ceil-divided same padding.
    for (auto hw : {std::pair{6, 4}, std::pair{5, 3}, std::pair{24, 16}}) {
        Rng rng(9);
        Tape<float> t;
        Tensor<float> xin({1, hw.first, hw.second, 2});
        for (auto& v : xin.v) v = static_cast<float>(rng.uniform(-1, 1));
        auto x = t.leaf(std::move(xin));
        LayerSpec down{.kind = LayerKind::conv2d, .kernel_h = 4, .kernel_w = 4, .stride_h = 2,
                       .stride_w = 2, .units = 3};
        auto dp = init_layer_params<float>(down, {1, hw.first, hw.second, 2}, rng);
        auto y = conv2d(t, x, t.leaf(dp[0]), t.leaf(dp[1]), 2, 2);
        const auto& ys = t.val(y).shape;
        EXPECT_EQ(ys[1], (hw.first + 1) / 2);
        EXPECT_EQ(ys[2], (hw.second + 1) / 2);
        Rng rng2(10);
        Tensor<float> wt = uniform_init<float>({4, 4, 2, 3}, 48, rng2);
        auto z = conv2d_transpose(t, y, t.leaf(wt), t.leaf(Tensor<float>({2})), 2, 2, hw.first, hw.second);
        EXPECT_EQ(t.val(z).shape, (std::vector<int>{1, hw.first, hw.second, 2}));
    }
}

TEST(Conv, TransposeIsExactAdjoint) {
    // <conv(x), y> == <x, conv_transpose(y)> with the shared kernel.
    Rng rng(31);
    const int H = 5, W = 4, Ci = 2, Co = 3;
    Tensor<double> x = random_tensor({2, H, W, Ci}, rng);
    Tensor<double> w = random_tensor({3, 3, Ci, Co}, rng);
    Tensor<double> zero_b_co({Co});
    Tensor<double> zero_b_ci({Ci});

    Tape<double> t;
    auto cx = conv2d(t, t.leaf(x), t.leaf(w), t.leaf(zero_b_co), 2, 2);
    Tensor<double> y = random_tensor(t.val(cx).shape, rng);
    // Transpose weight layout is [KH,KW,Co_t,Ci_t] = [KH,KW,Ci,Co] of the conv.
    auto ty = conv2d_transpose(t, t.leaf(y), t.leaf(w), t.leaf(zero_b_ci), 2, 2, H, W);

    double lhs = 0, rhs = 0;
    for (int64_t i = 0; i < y.numel(); ++i) lhs += t.val(cx)[i] * y[i];
    for (int64_t i = 0; i < x.numel(); ++i) rhs += x[i] * t.val(ty)[i];
    EXPECT_NEAR(lhs, rhs, 1e-9 * std::max(1.0, std::abs(lhs)));
}

TEST(Conv, BatchedRowsMatchSingleSample) {
    // The deterministic GEMM makes per-sample results independent of batching.
    Rng rng(41);
    Tensor<float> xa({1, 6, 6, 3});
    Tensor<float> xb({1, 6, 6, 3});
    for (auto& v : xa.v) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : xb.v) v = static_cast<float>(rng.uniform(-1, 1));
    Tensor<float> xab({2, 6, 6, 3});
    std::copy(xa.v.begin(), xa.v.end(), xab.v.begin());
    std::copy(xb.v.begin(), xb.v.end(), xab.v.begin() + xa.numel());
    Tensor<float> w = uniform_init<float>({4, 4, 3, 8}, 48, rng);
    Tensor<float> b({8});

    Tape<float> t;
    auto ya = t.val(conv2d(t, t.leaf(xa), t.leaf(w), t.leaf(b), 2, 2));
    auto yb = t.val(conv2d(t, t.leaf(xb), t.leaf(w), t.leaf(b), 2, 2));
    auto yab = t.val(conv2d(t, t.leaf(xab), t.leaf(w), t.leaf(b), 2, 2));
    for (int64_t i = 0; i < ya.numel(); ++i) {
        ASSERT_EQ(yab[i], ya[i]);
        ASSERT_EQ(yab[ya.numel() + i], yb[i]);
    }
}

// ---------------------------------------------------------------------------
// Parameter container
// ---------------------------------------------------------------------------

TEST(ArrayContainer, ByteExactRoundTrip) {
    ArrayFile f;
    Rng rng(55);
    Tensor<float> a({3, 4});
    for (auto& x : a.v) x = static_cast<float>(rng.normal());
    Tensor<double> d({2, 2, 2});
    for (auto& x : d.v) x = rng.normal();
    f.add_tensor("enc/w", a);
    f.add_tensor("enc/b", d);
    f.add_blob("meta", "hello=1\n");
    f.add_scalar_i64("step", 12345);

    auto bytes = f.serialize();
    auto g = ArrayFile::deserialize(bytes);
    EXPECT_EQ(g.serialize(), bytes);
    EXPECT_EQ(g.tensor<float>("enc/w").v, a.v);
    EXPECT_EQ(g.tensor<double>("enc/b").v, d.v);
    EXPECT_EQ(g.blob("meta"), "hello=1\n");
    EXPECT_EQ(g.scalar_i64("step"), 12345);
}

TEST(ArrayContainer, CorruptionDetected) {
    ArrayFile f;
    f.add_blob("x", "payload");
    auto bytes = f.serialize();
    bytes[bytes.size() / 2] ^= 0x40;
    EXPECT_THROW(ArrayFile::deserialize(bytes), std::runtime_error);
}

TEST(ParamStore, OrderPreservingRoundTrip) {
    Rng rng(7);
    ParamStore<float> s;
    s.add("z_last", uniform_init<float>({2, 3}, 2, rng));
    s.add("a_first", uniform_init<float>({4}, 4, rng));
    ArrayFile f;
    s.to_arrays(f, "p/");
    EXPECT_EQ(f.entries()[0].name, "p/z_last");
    EXPECT_EQ(f.entries()[1].name, "p/a_first");

    ParamStore<float> s2;
    s2.add("z_last", Tensor<float>({2, 3}));
    s2.add("a_first", Tensor<float>({4}));
    s2.from_arrays(f, "p/");
    EXPECT_EQ(s2.at("z_last").v, s.at("z_last").v);
    EXPECT_EQ(s2.at("a_first").v, s.at("a_first").v);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

TEST(Adam, ConvergesOnQuadratic) {
    ParamStore<double> s;
    s.add("x", Tensor<double>({2}, {5.0, -3.0}));
    Adam<double> opt(0.1);
    opt.init(s);
    for (int i = 0; i < 400; ++i) {
        std::vector<Tensor<double>> grads;
        Tensor<double> g({2});
        g[0] = 2 * s.at("x")[0];
        g[1] = 2 * s.at("x")[1];
        grads.push_back(g);
        opt.apply(s, grads);
    }
    EXPECT_NEAR(s.at("x")[0], 0.0, 1e-2);
    EXPECT_NEAR(s.at("x")[1], 0.0, 1e-2);
}
