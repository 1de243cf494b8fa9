#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <set>

#include "nls/network.hpp"
#include "oracles.hpp"

using namespace nls;
using namespace nls::ad;

namespace {

Tensor random_tensor(Shape s, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    Tensor t(s);
    for (auto& v : t.data) v = nd(rng);
    return t;
}

double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

using Graph = std::function<Var(Tape&, Var)>;

/// Max relative error between tape gradients of <w, g(x)> and central
/// differences, over the input and every listed parameter.
double fd_check(const Graph& g, Tensor x, std::vector<Parameter*> params, std::uint64_t seed, double eps = 1e-6) {
    std::mt19937_64 rng(seed);
    Tape probe;
    const Shape out_shape = probe.value(g(probe, probe.input(x))).shape;
    const Tensor w = random_tensor(out_shape, rng);
    auto loss = [&](const Tensor& in) {
        Tape t;
        return dot(t.value(g(t, t.constant(in))), w);
    };

    for (auto* p : params) p->zero_grad();
    Tape tape;
    const Var xin = tape.input(x);
    tape.backward(g(tape, xin), w);
    const Tensor gx = tape.grad(xin);

    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x.data[i];
        x.data[i] = orig + eps;
        const double lp = loss(x);
        x.data[i] = orig - eps;
        const double lm = loss(x);
        x.data[i] = orig;
        worst = std::max(worst, oracle::relative_error(gx.data[i], (lp - lm) / (2 * eps)));
    }
    for (auto* p : params) {
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double orig = p->value.data[i];
            p->value.data[i] = orig + eps;
            const double lp = loss(x);
            p->value.data[i] = orig - eps;
            const double lm = loss(x);
            p->value.data[i] = orig;
            worst = std::max(worst, oracle::relative_error(p->grad.data[i], (lp - lm) / (2 * eps)));
        }
    }
    return worst;
}

Parameter conv_weight(int cout, int cin, int k, std::mt19937_64& rng) {
    return Parameter("w", random_tensor(Shape{cout, cin * k, k}, rng, 0.5));
}
Parameter channel_param(int c, std::mt19937_64& rng, double mean = 0.0) {
    Parameter p("b", random_tensor(Shape{c, 1, 1}, rng, 0.3));
    for (auto& v : p.value.data) v += mean;
    return p;
}

std::pair<double, Tensor> weighted_sum_loss(const Tensor& out, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const Tensor w = random_tensor(out.shape, rng);
    return {dot(out, w), w};
}

}  // namespace

TEST(Conv2d, OneByOneIdentity) {
    std::mt19937_64 rng(1);
    const Tensor x = random_tensor(Shape{3, 5, 6}, rng);
    Parameter w("w", Tensor(Shape{3, 3, 1}));
    for (int c = 0; c < 3; ++c) w.value.at(c, c, 0) = 1.0;
    Parameter b("b", Tensor(Shape{3, 1, 1}));
    Tape t;
    EXPECT_EQ(t.value(conv2d(t, t.constant(x), w, b)).data, x.data);
}

TEST(Conv2d, AveragingKernelOnConstant) {
    Parameter w("w", Tensor(Shape{1, 3, 3}, 1.0 / 9.0));
    Parameter b("b", Tensor(Shape{1, 1, 1}));
    Tape t;
    const Tensor& y = t.value(conv2d(t, t.constant(Tensor(Shape{1, 6, 6}, 2.0)), w, b));
    for (int r = 1; r < 5; ++r)
        for (int c = 1; c < 5; ++c) EXPECT_NEAR(y.at(0, r, c), 2.0, 1e-12);
    // zero padding at the corners: 4 of 9 taps
    EXPECT_NEAR(y.at(0, 0, 0), 2.0 * 4.0 / 9.0, 1e-12);
    EXPECT_NEAR(y.at(0, 0, 3), 2.0 * 6.0 / 9.0, 1e-12);
}

TEST(Conv2d, CrossCorrelationOrientation) {
    Parameter w("w", Tensor(Shape{1, 3, 3}));
    w.value.at(0, 1, 2) = 1.0;  // picks the right neighbour
    Parameter b("b", Tensor(Shape{1, 1, 1}, 0.5));
    Tensor x(Shape{1, 3, 3});
    for (int i = 0; i < 9; ++i) x.data[static_cast<std::size_t>(i)] = i;
    Tape t;
    const Tensor& y = t.value(conv2d(t, t.constant(x), w, b));
    EXPECT_DOUBLE_EQ(y.at(0, 1, 1), 5.5);
    EXPECT_DOUBLE_EQ(y.at(0, 1, 2), 0.5);
}

TEST(Conv2d, RejectsBadShapes) {
    std::mt19937_64 rng(2);
    Parameter w = conv_weight(2, 3, 3, rng);
    Parameter b = channel_param(2, rng);
    Tape t;
    EXPECT_THROW(conv2d(t, t.constant(Tensor(Shape{2, 4, 4})), w, b), InvalidSpec);
    Parameter even("w", Tensor(Shape{2, 3 * 2, 2}));
    EXPECT_THROW(conv2d(t, t.constant(Tensor(Shape{3, 4, 4})), even, b), InvalidSpec);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(3);
    for (int k : {1, 3, 5}) {
        Parameter w = conv_weight(3, 2, k, rng);
        Parameter b = channel_param(3, rng);
        const Tensor x = random_tensor(Shape{2, 6, 5}, rng);
        const double err = fd_check([&](Tape& t, Var v) { return conv2d(t, v, w, b); }, x, {&w, &b}, 10 + k);
        EXPECT_LE(err, 1e-6) << "kernel " << k;
    }
}

TEST(GroupNorm, NormalisesEachGroup) {
    std::mt19937_64 rng(4);
    const Tensor x = random_tensor(Shape{4, 5, 5}, rng, 3.0);
    Parameter g("g", Tensor(Shape{4, 1, 1}, 1.0));
    Parameter b("b", Tensor(Shape{4, 1, 1}, 0.0));
    Tape t;
    const Tensor& y = t.value(group_norm(t, t.constant(x), 2, g, b));
    for (int grp = 0; grp < 2; ++grp) {
        double mean = 0.0, sq = 0.0;
        const std::size_t n = 2 * y.shape.plane();
        for (std::size_t i = 0; i < n; ++i) mean += y.channel(2 * grp)[i];
        mean /= n;
        for (std::size_t i = 0; i < n; ++i) sq += std::pow(y.channel(2 * grp)[i] - mean, 2);
        EXPECT_NEAR(mean, 0.0, 1e-12);
        EXPECT_NEAR(sq / n, 1.0, 1e-5);
    }
    EXPECT_THROW(group_norm(t, t.constant(x), 3, g, b), InvalidSpec);
}

TEST(GroupNorm, AffineAndGradients) {
    std::mt19937_64 rng(5);
    for (int groups : {1, 2, 4}) {
        Parameter g = channel_param(4, rng, 1.0);
        Parameter b = channel_param(4, rng);
        const Tensor x = random_tensor(Shape{4, 4, 3}, rng, 2.0);
        const double err =
            fd_check([&](Tape& t, Var v) { return group_norm(t, v, groups, g, b); }, x, {&g, &b}, 20 + groups);
        EXPECT_LE(err, 1e-5) << "groups " << groups;
    }
}

TEST(LayerNorm, IdenticalToSingleGroupNorm) {
    std::mt19937_64 rng(6);
    const Tensor x = random_tensor(Shape{3, 7, 4}, rng);
    Parameter g = channel_param(3, rng, 1.0);
    Parameter b = channel_param(3, rng);
    Tape t1, t2;
    const Tensor a = t1.value(layer_norm(t1, t1.constant(x), g, b));
    const Tensor c = t2.value(group_norm(t2, t2.constant(x), 1, g, b));
    EXPECT_EQ(a.data, c.data);
    const double err = fd_check([&](Tape& t, Var v) { return layer_norm(t, v, g, b); }, x, {&g, &b}, 31);
    EXPECT_LE(err, 1e-5);
}

TEST(Activation, ValuesAndGradients) {
    Tensor x(Shape{1, 1, 4}, std::vector<double>{-2.0, -0.5, 0.3, 1.7});
    Tape t;
    const Var in = t.input(x);
    const Var r = activation(t, in, Activation::relu);
    EXPECT_EQ(t.value(r).data, (std::vector<double>{0.0, 0.0, 0.3, 1.7}));
    t.backward(r, Tensor(x.shape, 1.0));
    EXPECT_EQ(t.grad(in).data, (std::vector<double>{0.0, 0.0, 1.0, 1.0}));

    std::mt19937_64 rng(7);
    const Tensor z = random_tensor(Shape{2, 3, 3}, rng);
    EXPECT_LE(fd_check([](Tape& tp, Var v) { return activation(tp, v, Activation::tanh); }, z, {}, 41), 1e-7);
    EXPECT_LE(fd_check([](Tape& tp, Var v) { return activation(tp, v, Activation::none); }, z, {}, 42), 1e-7);
}

TEST(Structural, AddConcatSlicePoolUpsample) {
    std::mt19937_64 rng(8);
    const Tensor x = random_tensor(Shape{2, 4, 6}, rng);
    auto graph = [](Tape& t, Var v) {
        const Var a = slice_channels(t, v, 1, 1);
        const Var pooled = upsample2(t, avg_pool2(t, v));
        const Var cat = concat(t, {v, a, pooled});
        return add(t, cat, cat);
    };
    EXPECT_LE(fd_check(graph, x, {}, 51), 1e-6);

    Tape t;
    const Var v = t.constant(x);
    const Tensor& p = t.value(avg_pool2(t, v));
    EXPECT_EQ(p.shape, (Shape{2, 2, 3}));
    EXPECT_NEAR(p.at(1, 1, 2), (x.at(1, 2, 4) + x.at(1, 2, 5) + x.at(1, 3, 4) + x.at(1, 3, 5)) / 4.0, 1e-14);
    const Tensor& u = t.value(upsample2(t, v));
    EXPECT_EQ(u.shape, (Shape{2, 8, 12}));
    EXPECT_EQ(u.at(0, 5, 7), x.at(0, 2, 3));
    EXPECT_THROW(avg_pool2(t, t.constant(Tensor(Shape{1, 3, 4}))), InvalidSpec);
    EXPECT_THROW(add(t, v, t.constant(Tensor(Shape{1, 4, 6}))), InvalidSpec);
    EXPECT_THROW(slice_channels(t, v, 1, 2), InvalidSpec);
}

TEST(Network, ParameterCountAndShape) {
    const auto spec = encoder_decoder_spec("dyn", 10, 9);
    Network net = build_network(spec, 0);
    EXPECT_EQ(net.num_params(), expected_param_count(spec));
    EXPECT_EQ(net.num_params(), 4353u);
    std::mt19937_64 rng(9);
    const Tensor out = net.apply(random_tensor(Shape{10, 64, 64}, rng));
    EXPECT_EQ(out.shape, (Shape{9, 64, 64}));
    EXPECT_EQ(build_network(prenet_spec(1, 8), 0).num_params(), expected_param_count(prenet_spec(1, 8)));
    EXPECT_EQ(build_network(postnet_spec(8), 0).num_params(), expected_param_count(postnet_spec(8)));
}

TEST(Network, NamesAreUniqueAndStructured) {
    Network net = build_network(encoder_decoder_spec("dyn", 3, 2), 1);
    std::set<std::string> names;
    for (const auto& p : net.params()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
    EXPECT_TRUE(names.count("dyn.0.weight"));
    EXPECT_TRUE(names.count("dyn.0.norm_gain"));
    EXPECT_TRUE(names.count("dyn.6.bias"));
    EXPECT_FALSE(names.count("dyn.6.norm_gain"));
}

TEST(Network, InvalidSpecsAreRejected) {
    NetworkSpec odd{"bad", 1, {LayerSpec::down()}};
    EXPECT_THROW(build_network(odd, 0), InvalidSpec);
    NetworkSpec groups{"bad", 1, {LayerSpec::conv(6, 3, Norm::group, 4, Activation::relu)}};
    EXPECT_THROW(build_network(groups, 0), InvalidSpec);
    NetworkSpec skip{"bad", 1, {LayerSpec::conv(4, 3, Norm::none, 1, Activation::none), LayerSpec::concat_with(3)}};
    EXPECT_THROW(build_network(skip, 0), InvalidSpec);
    Network net = build_network(encoder_decoder_spec("dyn", 2, 1), 0);
    EXPECT_THROW(net.apply(Tensor(Shape{2, 5, 5})), InvalidSpec);
    EXPECT_THROW(net.apply(Tensor(Shape{3, 6, 6})), InvalidSpec);
}

TEST(Network, SeedDeterminism) {
    const auto spec = encoder_decoder_spec("dyn", 3, 2);
    EXPECT_EQ(build_network(spec, 42).flat_values(), build_network(spec, 42).flat_values());
    EXPECT_NE(build_network(spec, 42).flat_values(), build_network(spec, 43).flat_values());
    EXPECT_EQ(build_network(spec, 42).checksum(), build_network(spec, 42).checksum());
}

TEST(Network, InitBounds) {
    Network net = build_network(encoder_decoder_spec("dyn", 3, 2), 5);
    const auto info = validate_spec(net.spec());
    for (const auto& p : net.params()) {
        if (p.name.ends_with("norm_gain")) {
            for (double v : p.value.data) EXPECT_EQ(v, 1.0);
        } else if (p.name.ends_with("norm_bias")) {
            for (double v : p.value.data) EXPECT_EQ(v, 0.0);
        } else {
            const int layer = std::stoi(p.name.substr(4, p.name.find('.', 4) - 4));
            const double bound = std::sqrt(1.0 / (info[static_cast<std::size_t>(layer)].in_channels * 9.0));
            for (double v : p.value.data) EXPECT_LE(std::abs(v), bound) << p.name;
        }
    }
}

TEST(Network, ZeroInitLastLayer) {
    Network net = build_network(encoder_decoder_spec("dyn", 3, 2), 7);
    const auto before = net.checksum(true);
    zero_init_last_layer(net);
    EXPECT_EQ(net.checksum(true), before);
    std::mt19937_64 rng(10);
    for (int i = 0; i < 3; ++i) {
        const Tensor out = net.apply(random_tensor(Shape{3, 8, 8}, rng, 4.0));
        for (double v : out.data) EXPECT_EQ(v, 0.0);
    }
}

TEST(Network, FlatRoundTrip) {
    Network net = build_network(postnet_spec(3), 3);
    auto v = net.flat_values();
    for (auto& x : v) x *= 2.0;
    net.set_flat_values(v);
    EXPECT_EQ(net.flat_values(), v);
    EXPECT_THROW(net.set_flat_values(std::vector<double>(3)), InvalidInput);
}

TEST(GradCheck, LinearNetwork) {
    NetworkSpec spec{"lin", 2, {LayerSpec::conv(3, 3, Norm::none, 1, Activation::none)}};
    Network net = build_network(spec, 11);
    std::mt19937_64 rng(12);
    const Tensor x = random_tensor(Shape{2, 6, 6}, rng);
    // Central differences are exact for a linear map, so a wide step only
    // trims rounding noise.
    const double err =
        grad_check(net, x, [](const Tensor& o) { return weighted_sum_loss(o, 3); }, 1, 100, 1e-2);
    EXPECT_LE(err, 1e-9);
}

TEST(GradCheck, EncoderDecoder) {
    Network net = build_network(encoder_decoder_spec("dyn", 3, 2), 13);
    std::mt19937_64 rng(14);
    const Tensor x = random_tensor(Shape{3, 8, 8}, rng);
    auto loss = [](const Tensor& o) {
        double l = 0.0;
        Tensor g(o.shape);
        for (std::size_t i = 0; i < o.size(); ++i) {
            l += 0.5 * o.data[i] * o.data[i];
            g.data[i] = o.data[i];
        }
        return std::make_pair(l, g);
    };
    EXPECT_LE(grad_check(net, x, loss), 1e-5);
}

TEST(GradCheck, ZeroInitLastLayerMatches) {
    Network net = build_network(encoder_decoder_spec("dyn", 3, 2), 16);
    zero_init_last_layer(net);
    std::mt19937_64 rng(17);
    const Tensor x = random_tensor(Shape{3, 8, 8}, rng);
    auto loss = [](const Tensor& o) {
        double l = 0.0;
        Tensor g(o.shape);
        for (std::size_t i = 0; i < o.size(); ++i) {
            l += o.data[i] * o.data[i] / static_cast<double>(o.size());
            g.data[i] = 2.0 * o.data[i] / static_cast<double>(o.size());
        }
        return std::make_pair(l, g);
    };
    EXPECT_LE(grad_check(net, x, loss), 1e-5);
    const auto& slot = net.slots()[static_cast<std::size_t>(net.last_conv_layer())];
    for (int idx : {slot.weight, slot.bias})
        for (double g : net.params()[static_cast<std::size_t>(idx)].grad.data) EXPECT_EQ(g, 0.0);
}

TEST(Tape, AccumulatesParameterGradientsAcrossPasses) {
    std::mt19937_64 rng(15);
    Parameter w = conv_weight(1, 1, 3, rng);
    Parameter b = channel_param(1, rng);
    const Tensor x = random_tensor(Shape{1, 4, 4}, rng);
    w.zero_grad();
    b.zero_grad();
    for (int pass = 0; pass < 2; ++pass) {
        Tape t;
        t.backward(conv2d(t, t.constant(x), w, b), Tensor(Shape{1, 4, 4}, 1.0));
    }
    EXPECT_NEAR(b.grad.data[0], 32.0, 1e-12);
    Tape t;
    EXPECT_THROW(t.backward(t.input(x), Tensor(Shape{1, 2, 2})), InvalidInput);
}
