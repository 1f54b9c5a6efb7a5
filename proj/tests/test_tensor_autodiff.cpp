#include <doctest.h>

#include <cstring>

#include "aianet/gradcheck.hpp"
#include "aianet/graph.hpp"
#include "aianet/rng.hpp"
#include "aianet/tensor.hpp"
#include "oracles.hpp"

using namespace aianet;

namespace {

TensorT<double> random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    TensorT<double> t(std::move(shape));
    for (auto& v : t.data) v = scale * rng.normal();
    return t;
}

}  // namespace

TEST_CASE("matmul: identity and hand examples") {
    GraphT<double> g;
    auto eye = g.input(TensorT<double>({2, 2}, {1, 0, 0, 1}));
    auto m = g.input(TensorT<double>({2, 2}, {3.5, -1, 2, 7}));
    auto y = g.matmul(eye, m);
    for (std::size_t i = 0; i < 4; ++i) CHECK(g.value(y).data[i] == doctest::Approx(g.value(m).data[i]));

    auto a = g.input(TensorT<double>({1, 2}, {1, 2}));
    auto b = g.input(TensorT<double>({2, 1}, {3, 4}));
    auto c = g.matmul(a, b);
    CHECK(g.value(c).data[0] == doctest::Approx(11.0));
}

TEST_CASE("matmul: random 3x4 * 4x2 matches triple-loop oracle") {
    Rng rng(42);
    GraphT<double> g;
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    auto y = g.matmul(g.input(a), g.input(b));
    auto ref = oracle::matmul(a.data, b.data, 3, 4, 2);
    for (std::size_t i = 0; i < ref.size(); ++i) {
        CHECK(std::abs(g.value(y).data[i] - ref[i]) <= 1e-6 * std::max(1.0, std::abs(ref[i])));
    }
}

TEST_CASE("matmul: inner dimension mismatch throws") {
    GraphT<double> g;
    auto a = g.input(TensorT<double>({2, 3}, 1.0));
    auto b = g.input(TensorT<double>({2, 2}, 1.0));
    CHECK_THROWS_AS((void)g.matmul(a, b), DimensionError);
}

TEST_CASE("conv2d: 1x1 kernel scales, impulse reproduces kernel") {
    GraphT<double> g;
    auto x = g.input(TensorT<double>({1, 3, 3}, 1.0));
    auto w = g.input(TensorT<double>({1, 1, 1, 1}, {2.0}));
    auto b = g.input(TensorT<double>({1}, {0.0}));
    auto y = g.conv2d_same(x, w, b);
    for (double v : g.value(y).data) CHECK(v == doctest::Approx(2.0));

    // delta at (2,2) of a 5x5 plane: under cross-correlation the kernel shows
    // up reflected around the delta (y[1+a,1+b] = K[2-a,2-b]); zero elsewhere
    TensorT<double> delta({1, 5, 5}, 0.0);
    delta.at3(0, 2, 2) = 1.0;
    TensorT<double> ker({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    auto yd = g.conv2d_same(g.input(delta), g.input(ker), GraphT<double>::kNone);
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 3; ++b)
            CHECK(g.value(yd).at3(0, 1 + a, 1 + b) == doctest::Approx(ker.data[(2 - a) * 3 + (2 - b)]));
    CHECK(g.value(yd).at3(0, 0, 0) == doctest::Approx(0.0));
}

TEST_CASE("conv2d: random case matches 6-loop oracle") {
    Rng rng(7);
    GraphT<double> g;
    auto x = random_tensor({2, 8, 8}, rng);
    auto w = random_tensor({4, 2, 3, 3}, rng);
    auto b = random_tensor({4}, rng);
    auto y = g.conv2d_same(g.input(x), g.input(w), g.input(b));
    auto ref = oracle::conv2d(x.data, 2, 8, 8, w.data, 4, 3, 3, b.data, 1, 1);
    REQUIRE(g.value(y).numel() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(g.value(y).data[i] - ref[i]) <= 1e-5);
}

TEST_CASE("conv2d: even kernel in same mode is a config error") {
    GraphT<double> g;
    auto x = g.input(TensorT<double>({1, 4, 4}, 1.0));
    auto w = g.input(TensorT<double>({1, 1, 2, 2}, 1.0));
    CHECK_THROWS_AS((void)g.conv2d_same(x, w, GraphT<double>::kNone), ConfigError);
}

TEST_CASE("conv2d: same mode preserves spatial size for strip and square kernels") {
    Rng rng(3);
    GraphT<double> g;
    auto x = g.input(random_tensor({2, 16, 12}, rng));
    const std::vector<std::pair<std::size_t, std::size_t>> kernels{{1, 9}, {9, 1}, {3, 3}, {7, 7}, {5, 1}};
    for (auto [k1, k2] : kernels) {
        auto w = g.input(random_tensor({3, 2, k1, k2}, rng));
        auto y = g.conv2d_same(x, w, GraphT<double>::kNone);
        CHECK(g.value(y).shape == std::vector<std::size_t>{3, 16, 12});
    }
}

TEST_CASE("softmax: symmetry, overflow safety, oracle match, rows sum to one") {
    GraphT<double> g;
    auto a = g.softmax(g.input(TensorT<double>({3}, {0, 0, 0})), 0);
    for (double v : g.value(a).data) CHECK(v == doctest::Approx(1.0 / 3));

    auto b = g.softmax(g.input(TensorT<double>({2}, {1000, 1000})), 0);
    for (double v : g.value(b).data) CHECK(v == doctest::Approx(0.5));

    Rng rng(11);
    auto x = random_tensor({5}, rng, 3.0);
    auto y = g.softmax(g.input(x), 0);
    auto ref = oracle::softmax(x.data);
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(g.value(y).data[i] - ref[i]) <= 1e-7);

    // property: along any axis of a random 3-d tensor, slices sum to 1
    auto t = random_tensor({4, 5, 6}, rng, 10.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
        auto s = g.softmax(g.input(t), axis);
        const auto& sv = g.value(s);
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < axis; ++i) outer *= sv.shape[i];
        for (std::size_t i = axis + 1; i < 3; ++i) inner *= sv.shape[i];
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                double sum = 0;
                for (std::size_t k = 0; k < sv.shape[axis]; ++k)
                    sum += sv.data[(o * sv.shape[axis] + k) * inner + in];
                CHECK(std::abs(sum - 1.0) <= 1e-6);
            }
    }
}

TEST_CASE("activations: sigmoid, prelu, gelu") {
    GraphT<double> g;
    auto s = g.sigmoid(g.input(TensorT<double>({1}, {0.0})));
    CHECK(g.value(s).data[0] == doctest::Approx(0.5));

    auto x = g.input(TensorT<double>({1, 1, 2}, {-2.0, 3.0}));
    auto slope = g.input(TensorT<double>({1}, {0.25}));
    auto p = g.prelu(x, slope);
    CHECK(g.value(p).data[0] == doctest::Approx(-0.5));
    CHECK(g.value(p).data[1] == doctest::Approx(3.0));

    Rng rng(5);
    auto v = random_tensor({40}, rng, 2.0);
    auto ge = g.gelu(g.input(v));
    for (std::size_t i = 0; i < v.numel(); ++i)
        CHECK(std::abs(g.value(ge).data[i] - oracle::gelu_tanh(v.data[i])) <= 1e-6);

    auto bad_slope = g.input(TensorT<double>({3}, 0.1));
    CHECK_THROWS_AS((void)g.prelu(x, bad_slope), DimensionError);
}

TEST_CASE("global_avg_pool: constants, hand value, oracle") {
    GraphT<double> g;
    auto c = g.global_avg_pool(g.input(TensorT<double>({3, 4, 4}, 2.75)));
    for (double v : g.value(c).data) CHECK(v == doctest::Approx(2.75));

    auto h = g.global_avg_pool(g.input(TensorT<double>({1, 2, 2}, {1, 2, 3, 4})));
    CHECK(g.value(h).data[0] == doctest::Approx(2.5));

    Rng rng(9);
    auto x = random_tensor({3, 4, 4}, rng);
    auto y = g.global_avg_pool(g.input(x));
    for (std::size_t ch = 0; ch < 3; ++ch) {
        double mean = 0;
        for (std::size_t i = 0; i < 16; ++i) mean += x.data[ch * 16 + i];
        mean /= 16;
        CHECK(std::abs(g.value(y).data[ch] - mean) <= 1e-7);
    }
}

TEST_CASE("backward: hand examples and error paths") {
    TensorT<double> w({4}, {0.5, -1.0, 2.0, 3.0});
    w.requires_grad = true;
    {
        GraphT<double> g;
        auto loss = g.sum(g.leaf(w));
        g.backward(loss);
        for (double v : w.grad) CHECK(v == doctest::Approx(1.0));
    }
    TensorT<double> w2({2}, {1.0, 2.0});
    w2.requires_grad = true;
    {
        GraphT<double> g;
        auto id = g.leaf(w2);
        auto loss = g.sum(g.mul(id, id));
        g.backward(loss);
        CHECK(w2.grad[0] == doctest::Approx(2.0));
        CHECK(w2.grad[1] == doctest::Approx(4.0));
    }
    {
        GraphT<double> g;
        auto x = g.input(TensorT<double>({2, 2}, 1.0));
        CHECK_THROWS_AS(g.backward(x), UsageError);
    }
    // unused leaf keeps a zero gradient
    TensorT<double> unused({2}, {1.0, 1.0});
    unused.requires_grad = true;
    {
        GraphT<double> g;
        (void)g.leaf(unused);
        TensorT<double> used({2}, {3.0, 4.0});
        used.requires_grad = true;
        auto loss = g.sum(g.leaf(used));
        g.backward(loss);
        REQUIRE(unused.grad.size() == 2);
        CHECK(unused.grad[0] == 0.0);
        CHECK(unused.grad[1] == 0.0);
    }
}

TEST_CASE("backward: composed conv->sigmoid->squared-error matches finite differences") {
    Rng rng(21);
    ParamStoreT<double> params;
    params.create("x", random_tensor({2, 4, 4}, rng), "fixture");
    params.create("w", random_tensor({3, 2, 3, 3}, rng, 0.5), "fixture");
    params.create("b", random_tensor({3}, rng, 0.2), "fixture");
    TensorT<double> target = random_tensor({3, 4, 4}, rng);

    auto build = [&target](GraphT<double>& g, ParamStoreT<double>& p) {
        auto y = g.sigmoid(g.conv2d_same(g.leaf(p.at("x")), g.leaf(p.at("w")), g.leaf(p.at("b"))));
        return g.sum_sq_diff(y, g.input(target));
    };
    auto report = grad_check(build, params, 1e-3, 1e-4);
    INFO("worst: ", report.worst_param, "[", report.worst_index, "] analytic=", report.worst_analytic,
         " numeric=", report.worst_numeric);
    CHECK(report.pass);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("backward: bitwise deterministic across repeated runs") {
    Rng rng(33);
    auto x = random_tensor({2, 6, 6}, rng);
    auto w = random_tensor({4, 2, 3, 3}, rng);
    auto run = [&](AVec<double>& gw) {
        TensorT<double> wt = w;
        wt.requires_grad = true;
        GraphT<double> g;
        auto y = g.sigmoid(g.conv2d_same(g.input(x), g.leaf(wt), GraphT<double>::kNone));
        g.backward(g.sum(g.mul(y, y)));
        gw = wt.grad;
    };
    AVec<double> g1, g2;
    run(g1);
    run(g2);
    REQUIRE(g1.size() == g2.size());
    CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("every primitive op passes a finite-difference property check") {
    Rng rng(77);
    ParamStoreT<double> params;
    params.create("x", random_tensor({3, 4, 5}, rng), "fixture");
    params.create("w_conv", random_tensor({2, 3, 1, 9}, rng, 0.4), "fixture");
    params.create("b_conv", random_tensor({2}, rng, 0.2), "fixture");
    params.create("w_dw", random_tensor({3, 3, 3}, rng, 0.4), "fixture");
    params.create("b_dw", random_tensor({3}, rng, 0.1), "fixture");
    params.create("slope", random_tensor({3}, rng, 0.3), "fixture");
    params.create("gate", random_tensor({1}, rng), "fixture");
    params.create("chan", random_tensor({3}, rng), "fixture");
    params.create("spat", random_tensor({4, 5}, rng), "fixture");
    params.create("gamma", random_tensor({2}, rng, 0.5), "fixture");
    params.create("beta", random_tensor({2}, rng, 0.5), "fixture");
    params.create("wfc", random_tensor({4, 6}, rng, 0.5), "fixture");
    params.create("bfc", random_tensor({4}, rng, 0.5), "fixture");
    params.create("m1", random_tensor({3, 4}, rng), "fixture");
    params.create("m2", random_tensor({4, 2}, rng), "fixture");

    auto build = [](GraphT<double>& g, ParamStoreT<double>& p) {
        auto x = g.leaf(p.at("x"));
        auto conv = g.conv2d_same(x, g.leaf(p.at("w_conv")), g.leaf(p.at("b_conv")));      // 2x4x5
        auto dw = g.depthwise_conv2d_same(x, g.leaf(p.at("w_dw")), g.leaf(p.at("b_dw"))); // 3x4x5
        auto act = g.prelu(g.gelu(dw), g.leaf(p.at("slope")));
        auto gated = g.scalar_scale(act, g.sigmoid(g.leaf(p.at("gate"))));
        auto masked = g.scale_spatial(g.scale_channels(gated, g.leaf(p.at("chan"))),
                                      g.leaf(p.at("spat")));
        auto cat = g.concat_channels(masked, g.one_minus(g.softmax(x, 2)));               // 6x4x5
        auto pooled = g.global_avg_pool(cat);                                             // 6x1x1
        auto fc = g.fully_connected(g.reshape(pooled, {6}), g.leaf(p.at("wfc")), g.leaf(p.at("bfc")));
        auto bn = g.batchnorm_train(conv, g.leaf(p.at("gamma")), g.leaf(p.at("beta")), 1e-5);
        auto mm = g.matmul(g.leaf(p.at("m1")), g.leaf(p.at("m2")));                       // 3x2
        auto sm = g.softmax_rows(g.transpose2d(mm));                                      // 2x3
        auto parts = g.add(g.sum(fc), g.add(g.sum(bn), g.sum(sm)));
        auto diff = g.sum_sq_diff(g.scale(masked, 0.5), g.add_const(g.sub(masked, masked), 0.1));
        return g.add(parts, diff);
    };
    auto report = grad_check(build, params, 1e-4, 1e-4);
    INFO("worst: ", report.worst_param, "[", report.worst_index, "] analytic=", report.worst_analytic,
         " numeric=", report.worst_numeric, " rel=", report.max_rel_error);
    CHECK(report.pass);
}

TEST_CASE("grad_check: linear map reaches machine precision, diagnostics name the node") {
    ParamStoreT<double> params;
    params.create("w", TensorT<double>({8}, {1, -2, 3, 0.5, 4, -1, 2, 0.25}), "fixture");
    auto linear = [](GraphT<double>& g, ParamStoreT<double>& p) {
        return g.sum(g.scale(g.leaf(p.at("w")), 3.0));
    };
    auto report = grad_check(linear, params, 1e-4, 1e-9);
    CHECK(report.pass);
    CHECK(report.max_rel_error < 1e-9);

    ParamStoreT<double> bad;
    bad.create("w", TensorT<double>({1}, {1e308}), "fixture");
    auto blows_up = [](GraphT<double>& g, ParamStoreT<double>& p) {
        auto w = g.leaf(p.at("w"));
        return g.sum(g.mul(w, w));
    };
    CHECK_THROWS_AS((void)grad_check(blows_up, bad, 1e-3, 1e-3), NumericError);
    try {
        (void)grad_check(blows_up, bad, 1e-3, 1e-3);
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("mul") != std::string::npos);
    }
}

TEST_CASE("tensor: TSR1 blob round trip") {
    Rng rng(4);
    auto t = random_tensor({3, 2, 4}, rng);
    std::string blob;
    serialize_tensor(t, blob);
    CHECK(blob.size() == 4 + 4 + 3 * 4 + t.numel() * 4);
    std::size_t pos = 0;
    auto back = deserialize_tensor<double>(blob, pos);
    CHECK(pos == blob.size());
    CHECK(back.shape == t.shape);
    for (std::size_t i = 0; i < t.numel(); ++i)
        CHECK(back.data[i] == doctest::Approx(t.data[i]).epsilon(1e-7));
}

TEST_CASE("tensor: shape/data invariant enforced") {
    CHECK_THROWS_AS(TensorT<double>({2, 3}, {1, 2, 3}), DimensionError);
}
