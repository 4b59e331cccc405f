// Tensor / layer / optimizer tests. Every differentiable op is checked
// against central finite differences in 64-bit, and the fast convolution
// path is checked against the nested-loop reference in oracles.hpp.

#include <cstring>
#include <filesystem>

#include "bdae/adam.hpp"
#include "bdae/checkpoint.hpp"
#include "bdae/gradcheck.hpp"
#include "bdae/graph.hpp"
#include "bdae/layers.hpp"
#include "bdae/loss.hpp"
#include "bdae/rng.hpp"
#include "bdae/tensor.hpp"
#include "harness.hpp"
#include "oracles.hpp"

using namespace bdae;

namespace {

Tensor<double> random_tensor(const Shape& sh, RngStream& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(sh);
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// Scalar projection loss <r, out> used to exercise full backward passes.
double project(const Tensor<double>& t, const std::vector<double>& r) {
    double acc = 0.0;
    for (int64_t i = 0; i < t.numel(); ++i) acc += t[i] * r[static_cast<size_t>(i)];
    return acc;
}

// Max relative error between analytic gradient and central differences over
// every element of `storage`, where loss() re-runs the forward pass.
template <typename LossFn>
double fd_max_rel_err(std::vector<double>& storage, const std::vector<double>& analytic,
                      LossFn loss, double h = 1e-4) {
    double worst = 0.0;
    for (size_t i = 0; i < storage.size(); ++i) {
        double saved = storage[i];
        storage[i] = saved + h;
        double lp = loss();
        storage[i] = saved - h;
        double lm = loss();
        storage[i] = saved;
        double fd = (lp - lm) / (2.0 * h);
        double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1e-6});
        worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
    }
    return worst;
}

LayerSpec conv2d_spec(const std::string& name, int cin, int cout, std::vector<int> k,
                      std::vector<int> s, std::vector<int> p, Activation act = Activation::None) {
    LayerSpec spec;
    spec.kind = LayerKind::Conv2d;
    spec.name = name;
    spec.in_channels = cin;
    spec.out_channels = cout;
    spec.kernel = std::move(k);
    spec.stride = std::move(s);
    spec.padding = std::move(p);
    spec.act = act;
    return spec;
}

LayerSpec conv3d_spec(const std::string& name, int cin, int cout, std::vector<int> k,
                      std::vector<int> s, std::vector<int> p, Activation act = Activation::None) {
    LayerSpec spec = conv2d_spec(name, cin, cout, std::move(k), std::move(s), std::move(p), act);
    spec.kind = LayerKind::Conv3d;
    return spec;
}

}  // namespace

TEST_CASE("tensor shape validation and indexing") {
    Tensor<float> t(Shape{2, 3});
    CHECK(t.numel() == 6);
    t.at(1, 2) = 5.0f;
    CHECK(t[5] == 5.0f);
    CHECK_THROWS(Tensor<float>(Shape{2, 0, 3}), ValueError);
    CHECK_THROWS(Tensor<float>(Shape{2, 2}, {1.f, 2.f, 3.f}), ValueError);
    Tensor<float> r = t.reshaped(Shape{3, 2});
    CHECK(r.extent(0) == 3);
    CHECK_THROWS(t.reshaped(Shape{4, 2}), ValueError);
    CHECK(shape_str(Shape{1, 2, 3}) == "[1x2x3]");
}

TEST_CASE("conv2d hand-checked 3x3 window sums") {
    ConvLayer<double> conv(conv2d_spec("c", 1, 1, {2, 2}, {1, 1}, {0, 0}));
    conv.weight().fill(1.0);
    conv.bias().zero();
    Tensor<double> in(Shape{1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor<double> out = conv.forward(in, {});
    CHECK(out.shape == (Shape{1, 1, 2, 2}));
    CHECK_CLOSE(out[0], 12.0, 1e-12);
    CHECK_CLOSE(out[1], 16.0, 1e-12);
    CHECK_CLOSE(out[2], 24.0, 1e-12);
    CHECK_CLOSE(out[3], 28.0, 1e-12);
}

TEST_CASE("conv2d 1x1 identity kernel passes input through") {
    ConvLayer<double> conv(conv2d_spec("c", 1, 1, {1, 1}, {1, 1}, {0, 0}));
    conv.weight().fill(1.0);
    conv.bias().zero();
    RngStream rng(7);
    Tensor<double> in = random_tensor(Shape{1, 1, 5, 7}, rng);
    Tensor<double> out = conv.forward(in, {});
    for (int64_t i = 0; i < in.numel(); ++i) CHECK(out[i] == in[i]);
}

TEST_CASE("conv2d random input matches nested-loop reference") {
    RngStream rng(11);
    ConvLayer<double> conv(conv2d_spec("c", 1, 3, {3, 3}, {1, 1}, {0, 0}));
    conv.init_params(rng);
    for (auto& b : conv.bias().data) b = rng.uniform(-0.5, 0.5);
    Tensor<double> in = random_tensor(Shape{1, 1, 6, 6}, rng);
    Tensor<double> out = conv.forward(in, {});

    Tensor<double> sample = in.reshaped(Shape{1, 6, 6});
    std::vector<double> bias(conv.bias().data.begin(), conv.bias().data.end());
    Tensor<double> ref = oracle::conv2d_ref(sample, conv.weight(), bias, 1, 1, 0, 0);
    REQUIRE(out.numel() == ref.numel());
    for (int64_t i = 0; i < ref.numel(); ++i) CHECK_CLOSE(out[i], ref[i], 1e-6);
}

TEST_CASE("conv2d strided/padded shapes match the reference") {
    RngStream rng(13);
    for (int stride : {1, 2})
        for (int pad : {0, 1}) {
            ConvLayer<double> conv(
                conv2d_spec("c", 2, 3, {3, 2}, {stride, stride}, {pad, pad}, Activation::Relu));
            conv.init_params(rng);
            for (auto& b : conv.bias().data) b = rng.uniform(-0.2, 0.2);
            Tensor<double> in = random_tensor(Shape{2, 2, 7, 6}, rng);
            Tensor<double> out = conv.forward(in, {});
            std::vector<double> bias(conv.bias().data.begin(), conv.bias().data.end());
            int64_t per_in = 2 * 7 * 6;
            for (int64_t n = 0; n < 2; ++n) {
                Tensor<double> sample(Shape{2, 7, 6});
                std::copy(in.ptr() + n * per_in, in.ptr() + (n + 1) * per_in, sample.ptr());
                Tensor<double> ref =
                    oracle::conv2d_ref(sample, conv.weight(), bias, stride, stride, pad, pad);
                for (auto& v : ref.data) v = std::max(v, 0.0);
                for (int64_t i = 0; i < ref.numel(); ++i)
                    CHECK_CLOSE(out[n * ref.numel() + i], ref[i], 1e-6);
            }
        }
}

TEST_CASE("conv3d matches the reference including asymmetric kernel") {
    RngStream rng(17);
    ConvLayer<double> conv(conv3d_spec("c", 2, 2, {2, 3, 2}, {1, 2, 1}, {1, 0, 1}));
    conv.init_params(rng);
    for (auto& b : conv.bias().data) b = rng.uniform(-0.2, 0.2);
    Tensor<double> in = random_tensor(Shape{1, 2, 4, 6, 5}, rng);
    Tensor<double> out = conv.forward(in, {});
    Tensor<double> sample = in.reshaped(Shape{2, 4, 6, 5});
    std::vector<double> bias(conv.bias().data.begin(), conv.bias().data.end());
    Tensor<double> ref = oracle::conv3d_ref(sample, conv.weight(), bias, 1, 2, 1, 1, 0, 1);
    REQUIRE(out.numel() == ref.numel());
    for (int64_t i = 0; i < ref.numel(); ++i) CHECK_CLOSE(out[i], ref[i], 1e-6);
}

TEST_CASE("conv gradients match finite differences") {
    RngStream rng(19);
    ConvLayer<double> conv(conv2d_spec("c", 2, 3, {3, 3}, {1, 1}, {1, 1}, Activation::Relu));
    conv.init_params(rng);
    for (auto& b : conv.bias().data) b = rng.uniform(-0.2, 0.2);
    Tensor<double> in = random_tensor(Shape{2, 2, 5, 5}, rng);
    Tensor<double> out0 = conv.forward(in, {});
    std::vector<double> r(static_cast<size_t>(out0.numel()));
    for (auto& v : r) v = rng.uniform(-1.0, 1.0);

    Tensor<double> grad_out(out0.shape, std::vector<double>(r.begin(), r.end()));
    std::vector<ParamView<double>> params;
    conv.collect_params(params);
    for (auto p : params) p.grad->zero();
    Tensor<double> din = conv.backward(grad_out, in, out0);

    auto loss = [&]() { return project(conv.forward(in, {}), r); };
    CHECK(fd_max_rel_err(in.data, din.data, loss) < 1e-5);
    CHECK(fd_max_rel_err(conv.weight().data, params[0].grad->data, loss) < 1e-5);
    CHECK(fd_max_rel_err(conv.bias().data, params[1].grad->data, loss) < 1e-5);

    ConvLayer<double> c3(conv3d_spec("c3", 1, 2, {2, 2, 2}, {1, 1, 1}, {0, 1, 0}));
    c3.init_params(rng);
    Tensor<double> in3 = random_tensor(Shape{1, 1, 3, 4, 4}, rng);
    Tensor<double> out3 = c3.forward(in3, {});
    std::vector<double> r3(static_cast<size_t>(out3.numel()));
    for (auto& v : r3) v = rng.uniform(-1.0, 1.0);
    std::vector<ParamView<double>> p3;
    c3.collect_params(p3);
    for (auto p : p3) p.grad->zero();
    Tensor<double> din3 = c3.backward(Tensor<double>(out3.shape, {r3.begin(), r3.end()}), in3, out3);
    auto loss3 = [&]() { return project(c3.forward(in3, {}), r3); };
    CHECK(fd_max_rel_err(in3.data, din3.data, loss3) < 1e-5);
    CHECK(fd_max_rel_err(c3.weight().data, p3[0].grad->data, loss3) < 1e-5);
    CHECK(fd_max_rel_err(c3.bias().data, p3[1].grad->data, loss3) < 1e-5);
}

TEST_CASE("conv zero upstream gradient and bias accumulation rule") {
    RngStream rng(23);
    ConvLayer<double> conv(conv2d_spec("c", 1, 2, {2, 2}, {1, 1}, {0, 0}));
    conv.init_params(rng);
    Tensor<double> in = random_tensor(Shape{2, 1, 4, 4}, rng);
    Tensor<double> out = conv.forward(in, {});

    std::vector<ParamView<double>> params;
    conv.collect_params(params);
    for (auto p : params) p.grad->zero();
    Tensor<double> zeros(out.shape);
    Tensor<double> din = conv.backward(zeros, in, out);
    for (auto& v : din.data) CHECK(v == 0.0);
    for (auto p : params)
        for (auto& v : p.grad->data) CHECK(v == 0.0);

    // Bias gradient = sum of upstream gradient over batch and positions.
    Tensor<double> g(out.shape);
    for (auto& v : g.data) v = rng.uniform(-1.0, 1.0);
    conv.backward(g, in, out);
    int64_t positions = out.numel() / (out.extent(0) * out.extent(1));
    for (int64_t f = 0; f < 2; ++f) {
        double expect = 0.0;
        for (int64_t n = 0; n < 2; ++n)
            for (int64_t i = 0; i < positions; ++i) expect += g[(n * 2 + f) * positions + i];
        CHECK_CLOSE(params[1].grad->data[static_cast<size_t>(f)], expect, 1e-10);
    }
}

TEST_CASE("conv rejects shape mismatches naming the axis") {
    ConvLayer<double> conv(conv2d_spec("c5", 1, 1, {5, 5}, {1, 1}, {0, 0}));
    Tensor<double> small(Shape{1, 1, 3, 8});
    try {
        conv.forward(small, {});
        CHECK(false);
    } catch (const ValueError& e) {
        std::string msg = e.what();
        CHECK(msg.find("c5") != std::string::npos);
        CHECK(msg.find("height") != std::string::npos);
    }
    Tensor<double> wrong_ch(Shape{1, 3, 8, 8});
    CHECK_THROWS(conv.forward(wrong_ch, {}), ValueError);
}

TEST_CASE("maxpool forward, reference, argmax backward") {
    LayerSpec ps;
    ps.kind = LayerKind::MaxPool2d;
    ps.name = "p";
    ps.kernel = {2, 2};
    ps.stride = {2, 2};
    MaxPoolLayer<double> pool(ps);

    Tensor<double> in(Shape{1, 1, 2, 4}, {1, 5, 2, 0, 3, 4, 1, 7});
    Tensor<double> out = pool.forward(in, {});
    CHECK(out.shape == (Shape{1, 1, 1, 2}));
    CHECK_CLOSE(out[0], 5.0, 0.0);
    CHECK_CLOSE(out[1], 7.0, 0.0);

    Tensor<double> g(out.shape, {10.0, 20.0});
    Tensor<double> din = pool.backward(g, in, out);
    CHECK_CLOSE(din[1], 10.0, 0.0);   // position of the 5
    CHECK_CLOSE(din[7], 20.0, 0.0);   // position of the 7
    CHECK_CLOSE(din[0] + din[2] + din[3] + din[4] + din[5] + din[6], 0.0, 0.0);

    RngStream rng(29);
    Tensor<double> rin = random_tensor(Shape{2, 3, 5, 6}, rng);
    Tensor<double> rout = pool.forward(rin, {});
    int64_t per = 3 * 5 * 6, oper = rout.numel() / 2;
    for (int64_t n = 0; n < 2; ++n) {
        Tensor<double> sample(Shape{3, 5, 6});
        std::copy(rin.ptr() + n * per, rin.ptr() + (n + 1) * per, sample.ptr());
        Tensor<double> ref = oracle::maxpool2d_ref(sample, 2, 2, 2, 2);
        for (int64_t i = 0; i < ref.numel(); ++i) CHECK(rout[n * oper + i] == ref[i]);
    }

    std::vector<double> r(static_cast<size_t>(rout.numel()));
    for (auto& v : r) v = rng.uniform(-1.0, 1.0);
    Tensor<double> din2 = pool.backward(Tensor<double>(rout.shape, {r.begin(), r.end()}), rin, rout);
    auto loss = [&]() { return project(pool.forward(rin, {}), r); };
    CHECK(fd_max_rel_err(rin.data, din2.data, loss) < 1e-5);

    Tensor<double> tiny(Shape{1, 1, 1, 4});
    try {
        pool.forward(tiny, {});
        CHECK(false);
    } catch (const ValueError& e) {
        CHECK(std::string(e.what()).find("height") != std::string::npos);
    }
}

TEST_CASE("maxpool3d window semantics") {
    LayerSpec ps;
    ps.kind = LayerKind::MaxPool3d;
    ps.name = "p3";
    ps.kernel = {2, 2, 2};
    ps.stride = {2, 2, 2};
    MaxPoolLayer<double> pool(ps);
    RngStream rng(31);
    Tensor<double> in = random_tensor(Shape{1, 2, 4, 4, 6}, rng);
    Tensor<double> out = pool.forward(in, {});
    CHECK(out.shape == (Shape{1, 2, 2, 2, 3}));
    // Spot-check one window against a direct max.
    double m = -1e9;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) m = std::max(m, in.at(int64_t(0), 1, dz, 2 + dy, 4 + dx));
    CHECK(out.at(int64_t(0), 1, 0, 1, 2) == m);

    std::vector<double> r(static_cast<size_t>(out.numel()));
    for (auto& v : r) v = rng.uniform(-1.0, 1.0);
    Tensor<double> din = pool.backward(Tensor<double>(out.shape, {r.begin(), r.end()}), in, out);
    auto loss = [&]() { return project(pool.forward(in, {}), r); };
    CHECK(fd_max_rel_err(in.data, din.data, loss) < 1e-5);
}

TEST_CASE("global average pool forward and backward") {
    LayerSpec gs;
    gs.kind = LayerKind::GlobalAvgPool;
    gs.name = "gap";
    GlobalAvgPoolLayer<double> gap(gs);
    Tensor<double> in(Shape{1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
    Tensor<double> out = gap.forward(in, {});
    CHECK(out.shape == (Shape{1, 2}));
    CHECK_CLOSE(out[0], 2.5, 1e-12);
    CHECK_CLOSE(out[1], 25.0, 1e-12);

    RngStream rng(37);
    Tensor<double> rin = random_tensor(Shape{2, 3, 4, 5}, rng);
    Tensor<double> rout = gap.forward(rin, {});
    std::vector<double> r(static_cast<size_t>(rout.numel()));
    for (auto& v : r) v = rng.uniform(-1.0, 1.0);
    Tensor<double> din = gap.backward(Tensor<double>(rout.shape, {r.begin(), r.end()}), rin, rout);
    auto loss = [&]() { return project(gap.forward(rin, {}), r); };
    CHECK(fd_max_rel_err(rin.data, din.data, loss) < 1e-5);
}

TEST_CASE("dense forward and gradients") {
    LayerSpec ds;
    ds.kind = LayerKind::Dense;
    ds.name = "fc";
    ds.in_features = 3;
    ds.out_features = 2;
    ds.act = Activation::Relu;
    DenseLayer<double> fc(ds);
    RngStream rng(41);
    fc.init_params(rng);
    for (auto& b : fc.bias().data) b = rng.uniform(-0.3, 0.3);

    Tensor<double> in = random_tensor(Shape{4, 3}, rng);
    Tensor<double> out = fc.forward(in, {});
    for (int64_t n = 0; n < 4; ++n)
        for (int64_t j = 0; j < 2; ++j) {
            double acc = fc.bias()[j];
            for (int64_t i = 0; i < 3; ++i) acc += in.at(n, i) * fc.weight().at(i, j);
            CHECK_CLOSE(out.at(n, j), std::max(acc, 0.0), 1e-12);
        }

    std::vector<double> r(static_cast<size_t>(out.numel()));
    for (auto& v : r) v = rng.uniform(-1.0, 1.0);
    std::vector<ParamView<double>> params;
    fc.collect_params(params);
    for (auto p : params) p.grad->zero();
    Tensor<double> din = fc.backward(Tensor<double>(out.shape, {r.begin(), r.end()}), in, out);
    auto loss = [&]() { return project(fc.forward(in, {}), r); };
    CHECK(fd_max_rel_err(in.data, din.data, loss) < 1e-5);
    CHECK(fd_max_rel_err(fc.weight().data, params[0].grad->data, loss) < 1e-5);
    CHECK(fd_max_rel_err(fc.bias().data, params[1].grad->data, loss) < 1e-5);

    Tensor<double> wrong(Shape{4, 5});
    CHECK_THROWS(fc.forward(wrong, {}), ValueError);
}

TEST_CASE("batchnorm normalizes per channel and tracks running stats") {
    LayerSpec bs;
    bs.kind = LayerKind::BatchNorm;
    bs.name = "bn";
    bs.channels = 2;
    BatchNormLayer<double> bn(bs);
    RngStream rng(43);
    Tensor<double> in = random_tensor(Shape{4, 2, 3, 3}, rng, -2.0, 5.0);
    ForwardCtx train{Mode::Train, 0, 0};
    Tensor<double> out = bn.forward(in, train);

    for (int64_t c = 0; c < 2; ++c) {
        double mean = 0.0, var = 0.0;
        int64_t count = 0;
        for (int64_t n = 0; n < 4; ++n)
            for (int64_t i = 0; i < 9; ++i) {
                mean += out[(n * 2 + c) * 9 + i];
                ++count;
            }
        mean /= static_cast<double>(count);
        for (int64_t n = 0; n < 4; ++n)
            for (int64_t i = 0; i < 9; ++i) {
                double d = out[(n * 2 + c) * 9 + i] - mean;
                var += d * d;
            }
        var /= static_cast<double>(count);
        CHECK_CLOSE(mean, 0.0, 1e-9);
        CHECK_CLOSE(var, 1.0, 1e-3);  // epsilon shifts variance slightly below 1
    }

    // Running stats: one train step blends 0.9*init + 0.1*batch stat.
    double batch_mean = 0.0;
    for (int64_t n = 0; n < 4; ++n)
        for (int64_t i = 0; i < 9; ++i) batch_mean += in[(n * 2 + 0) * 9 + i];
    batch_mean /= 36.0;
    CHECK_CLOSE(bn.running_mean()[0], 0.1 * batch_mean, 1e-12);

    Tensor<double> single(Shape{1, 2, 3, 3});
    CHECK_THROWS(bn.forward(single, train), ValueError);

    // Infer mode must not depend on batch composition.
    ForwardCtx infer{Mode::Infer, 0, 0};
    Tensor<double> one(Shape{1, 2, 3, 3});
    std::copy(in.ptr(), in.ptr() + 18, one.ptr());
    Tensor<double> alone = bn.forward(one, infer);
    Tensor<double> together = bn.forward(in, infer);
    for (int64_t i = 0; i < 18; ++i) CHECK(alone[i] == together[i]);
}

TEST_CASE("batchnorm gradients match finite differences") {
    LayerSpec bs;
    bs.kind = LayerKind::BatchNorm;
    bs.name = "bn";
    bs.channels = 3;
    RngStream rng(47);

    for (Mode mode : {Mode::Train, Mode::Infer}) {
        BatchNormLayer<double> bn(bs);
        for (auto& g : bn.running_mean()) g = rng.uniform(-0.5, 0.5);
        for (auto& g : bn.running_var()) g = rng.uniform(0.5, 2.0);
        std::vector<ParamView<double>> params;
        bn.collect_params(params);
        for (auto& v : params[0].value->data) v = rng.uniform(0.5, 1.5);  // gamma
        for (auto& v : params[1].value->data) v = rng.uniform(-0.5, 0.5); // beta

        ForwardCtx ctx{mode, 0, 0};
        Tensor<double> in = random_tensor(Shape{3, 3, 2, 2}, rng);
        Tensor<double> out = bn.forward(in, ctx);
        std::vector<double> r(static_cast<size_t>(out.numel()));
        for (auto& v : r) v = rng.uniform(-1.0, 1.0);
        for (auto p : params) p.grad->zero();
        Tensor<double> din = bn.backward(Tensor<double>(out.shape, {r.begin(), r.end()}), in, out);
        auto loss = [&]() { return project(bn.forward(in, ctx), r); };
        CHECK(fd_max_rel_err(in.data, din.data, loss) < 1e-5);
        CHECK(fd_max_rel_err(params[0].value->data, params[0].grad->data, loss) < 1e-5);
        CHECK(fd_max_rel_err(params[1].value->data, params[1].grad->data, loss) < 1e-5);
    }
}

TEST_CASE("dropout contracts") {
    LayerSpec ds;
    ds.kind = LayerKind::Dropout;
    ds.name = "drop";
    ds.rate = 0.7;
    DropoutLayer<double> drop(ds);
    drop.set_layer_index(3);
    RngStream rng(53);
    Tensor<double> in = random_tensor(Shape{1, 10}, rng, 0.5, 1.5);

    // Infer mode: identity for any rate.
    Tensor<double> id = drop.forward(in, {Mode::Infer, 9, 9});
    for (int64_t i = 0; i < in.numel(); ++i) CHECK(id[i] == in[i]);

    // Rate 0: identity in train mode too.
    LayerSpec d0 = ds;
    d0.rate = 0.0;
    DropoutLayer<double> none(d0);
    Tensor<double> same = none.forward(in, {Mode::Train, 9, 9});
    for (int64_t i = 0; i < in.numel(); ++i) CHECK(same[i] == in[i]);

    // Fixed (seed, step): bit-identical masks.
    Tensor<double> a = drop.forward(in, {Mode::Train, 5, 17});
    Tensor<double> b = drop.forward(in, {Mode::Train, 5, 17});
    for (int64_t i = 0; i < in.numel(); ++i) CHECK(a[i] == b[i]);

    // Inverted scaling: E[output] == input within 1% over 1e5 mask draws.
    std::vector<double> mean(static_cast<size_t>(in.numel()), 0.0);
    const int draws = 100000;
    for (int s = 0; s < draws; ++s) {
        Tensor<double> o = drop.forward(in, {Mode::Train, 1, s});
        for (int64_t i = 0; i < in.numel(); ++i) mean[static_cast<size_t>(i)] += o[i];
    }
    double rel = 0.0;
    for (int64_t i = 0; i < in.numel(); ++i) {
        mean[static_cast<size_t>(i)] /= draws;
        rel = std::max(rel, std::abs(mean[static_cast<size_t>(i)] - in[i]) / std::abs(in[i]));
    }
    CHECK(rel < 0.01);

    // Backward uses the same mask and scale.
    Tensor<double> out = drop.forward(in, {Mode::Train, 2, 2});
    Tensor<double> g(out.shape);
    g.fill(1.0);
    Tensor<double> din = drop.backward(g, in, out);
    for (int64_t i = 0; i < in.numel(); ++i) {
        if (out[i] == 0.0)
            CHECK(din[i] == 0.0);
        else
            CHECK_CLOSE(din[i], 1.0 / 0.3, 1e-12);
    }

    LayerSpec badrate = ds;
    badrate.rate = 1.0;
    CHECK_THROWS(DropoutLayer<double>(badrate), ValueError);
}

TEST_CASE("softmax cross-entropy values, stability, gradient") {
    auto [loss_u, grad_u] = softmax_cross_entropy<double>({0, 0, 0, 0}, 2);
    CHECK_CLOSE(loss_u, std::log(4.0), 1e-12);
    CHECK_CLOSE(grad_u[0], 0.25, 1e-12);
    CHECK_CLOSE(grad_u[2], -0.75, 1e-12);

    auto [loss_c, grad_c] = softmax_cross_entropy<double>({100, 0, 0, 0}, 0);
    CHECK(loss_c < 1e-6);
    CHECK(std::isfinite(grad_c[0]));

    CHECK_THROWS(softmax_cross_entropy<double>({1, 2, 3, 4}, 5), ValueError);
    double inf = std::numeric_limits<double>::infinity();
    CHECK_THROWS(softmax_cross_entropy<double>({inf, 0, 0, 0}, 0), NumericError);

    // Probabilities sum to one even for extreme logits.
    Tensor<double> logits(Shape{2, 4}, {30, -20, 5, 1, -3, -3.5, 2, 800});
    Tensor<double> probs = softmax_rows(logits);
    for (int64_t n = 0; n < 2; ++n) {
        double s = 0.0;
        for (int64_t k = 0; k < 4; ++k) s += probs.at(n, k);
        CHECK_CLOSE(s, 1.0, 1e-6);
    }

    // Gradient vs central differences, relative error < 1e-6.
    RngStream rng(59);
    std::vector<double> lg(4);
    for (auto& v : lg) v = rng.uniform(-3.0, 3.0);
    auto [l0, an] = softmax_cross_entropy(lg, 1);
    (void)l0;
    double worst = 0.0;
    const double h = 1e-6;
    for (size_t i = 0; i < 4; ++i) {
        double saved = lg[i];
        lg[i] = saved + h;
        double lp = softmax_cross_entropy(lg, 1).first;
        lg[i] = saved - h;
        double lm = softmax_cross_entropy(lg, 1).first;
        lg[i] = saved;
        double fd = (lp - lm) / (2 * h);
        worst = std::max(worst, std::abs(fd - an[i]) / std::max({std::abs(fd), std::abs(an[i]), 1e-8}));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("adam: hand-checked first step, zero-grad no-op, quadratic descent") {
    Tensor<double> theta(Shape{1}, {1.0});
    Tensor<double> grad(Shape{1}, {0.5});
    std::vector<ParamView<double>> pv{{"theta", &theta, &grad}};
    Adam<double> opt(AdamConfig{0.001, 0.9, 0.999, 1e-8});
    opt.attach(pv);
    opt.step(pv);
    CHECK_CLOSE(theta[0], 0.999, 1e-9);
    CHECK(opt.t() == 1);

    // Zero gradients leave parameters untouched regardless of step count.
    Tensor<double> w(Shape{3}, {1.0, -2.0, 0.5});
    Tensor<double> g0(Shape{3});
    std::vector<ParamView<double>> pz{{"w", &w, &g0}};
    Adam<double> opt0;
    opt0.attach(pz);
    for (int i = 0; i < 10; ++i) opt0.step(pz);
    CHECK(w[0] == 1.0);
    CHECK(w[1] == -2.0);
    CHECK(w[2] == 0.5);

    // 200 steps on f(x)=x^2 from 1.0 with lr 0.05 reaches |x| < 0.05.
    Tensor<double> x(Shape{1}, {1.0});
    Tensor<double> gx(Shape{1});
    std::vector<ParamView<double>> px{{"x", &x, &gx}};
    Adam<double> opt2(AdamConfig{0.05, 0.9, 0.999, 1e-8});
    opt2.attach(px);
    for (int i = 0; i < 200; ++i) {
        gx[0] = 2.0 * x[0];
        opt2.step(px);
    }
    CHECK(std::abs(x[0]) < 0.05);

    // Non-finite gradient aborts naming the parameter.
    gx[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        opt2.step(px);
        CHECK(false);
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("'x'") != std::string::npos);
    }
}

namespace {

std::vector<LayerSpec> tiny_model_specs() {
    std::vector<LayerSpec> specs;
    specs.push_back(conv2d_spec("conv1", 2, 4, {3, 3}, {1, 1}, {0, 0}, Activation::Relu));
    LayerSpec bn;
    bn.kind = LayerKind::BatchNorm;
    bn.name = "bn1";
    bn.channels = 4;
    specs.push_back(bn);
    LayerSpec pool;
    pool.kind = LayerKind::MaxPool2d;
    pool.name = "pool1";
    pool.kernel = {2, 2};
    pool.stride = {2, 2};
    specs.push_back(pool);
    LayerSpec gap;
    gap.kind = LayerKind::GlobalAvgPool;
    gap.name = "gap";
    specs.push_back(gap);
    LayerSpec fc;
    fc.kind = LayerKind::Dense;
    fc.name = "fc1";
    fc.in_features = 4;
    fc.out_features = 6;
    fc.act = Activation::Relu;
    specs.push_back(fc);
    LayerSpec drop;
    drop.kind = LayerKind::Dropout;
    drop.name = "drop1";
    drop.rate = 0.5;
    specs.push_back(drop);
    LayerSpec out;
    out.kind = LayerKind::SoftmaxOutput;
    out.name = "out";
    out.in_features = 6;
    out.out_features = 4;
    specs.push_back(out);
    return specs;
}

}  // namespace

TEST_CASE("graph: build validation, purity, cache rules") {
    ModelGraph<double> g("tiny", Shape{2, 10, 10}, tiny_model_specs());
    g.init_params(99);
    CHECK(g.output_shape() == (Shape{4}));
    CHECK(g.param_count() == (2 * 9 * 4 + 4) + (4 + 4) + (4 * 6 + 6) + (6 * 4 + 4));

    RngStream rng(61);
    Tensor<double> in = random_tensor(Shape{3, 2, 10, 10}, rng);
    ForwardCtx infer{Mode::Infer, 0, 0};
    Tensor<double> a = g.forward(in, infer);
    Tensor<double> b = g.forward(in, infer);
    CHECK(a.numel() == 3 * 4);
    CHECK(std::memcmp(a.ptr(), b.ptr(), sizeof(double) * static_cast<size_t>(a.numel())) == 0);
    CHECK(a.all_finite());

    // Backward without a cached forward is an error.
    Tensor<double> gl(Shape{3, 4});
    CHECK_THROWS(g.backward(gl), ValueError);

    // Bad architecture fails at build time naming the layer.
    auto specs = tiny_model_specs();
    specs[4].in_features = 5;  // fc1 expects the GAP width (4)
    try {
        ModelGraph<double> bad("tiny", Shape{2, 10, 10}, specs);
        CHECK(false);
    } catch (const ValueError& e) {
        CHECK(std::string(e.what()).find("fc1") != std::string::npos);
    }

    Tensor<double> wrong(Shape{3, 2, 9, 10});
    CHECK_THROWS(g.forward(wrong, infer), ValueError);
}

TEST_CASE("gradient check passes on a small stack and catches a planted fault") {
    ModelGraph<double> g("tiny", Shape{2, 10, 10}, tiny_model_specs());
    g.init_params(7);
    RngStream rng(67);
    Tensor<double> in = random_tensor(Shape{2, 2, 10, 10}, rng);
    std::vector<int> labels{0, 2};

    GradCheckReport rep = gradient_check(g, in, labels, 12, 71);
    CHECK(rep.entries.size() == 8);  // conv w/b, bn gamma/beta, fc w/b, out w/b
    CHECK(rep.passed(1e-5));

    g.set_grad_fault("fc1");
    GradCheckReport bad = gradient_check(g, in, labels, 12, 71);
    CHECK(!bad.passed(1e-5));
    CHECK_THROWS(g.set_grad_fault("nope"), ValueError);
}

TEST_CASE("float->double clone preserves state") {
    ModelGraph<float> g("tiny", Shape{2, 10, 10}, tiny_model_specs());
    g.init_params(15);
    ModelGraph<double> gd = g.clone_as<double>();
    auto pf = g.params();
    auto pd = gd.params();
    REQUIRE(pf.size() == pd.size());
    for (size_t i = 0; i < pf.size(); ++i)
        for (int64_t j = 0; j < pf[i].value->numel(); ++j)
            CHECK(static_cast<double>((*pf[i].value)[j]) == (*pd[i].value)[j]);
}

TEST_CASE("checkpoint round trip restores model and optimizer exactly") {
    ModelGraph<float> g("tiny", Shape{2, 10, 10}, tiny_model_specs());
    g.init_params(123);
    Adam<float> opt;
    auto params = g.params();
    opt.attach(params);

    // A few training steps so running stats and moments are non-trivial.
    RngStream rng(73);
    Tensor<float> in(Shape{4, 2, 10, 10});
    for (auto& v : in.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    std::vector<int> labels{0, 1, 2, 3};
    for (int step = 0; step < 3; ++step) {
        g.zero_grads();
        ForwardCtx ctx{Mode::Train, 123, step};
        Tensor<float> logits = g.forward_cached(in, ctx);
        auto [loss, dl] = softmax_cross_entropy_batch(logits, labels);
        (void)loss;
        g.backward(dl);
        opt.step(params);
    }
    g.drop_cache();

    std::string path = "ckpt_roundtrip.bin";
    save_checkpoint(path, g, 123, &opt);
    CheckpointData data = load_checkpoint(path);
    CHECK(data.run_seed == 123);
    CHECK(data.model_name == "tiny");
    REQUIRE(data.adam.has_value());
    CHECK(data.adam->t == 3);

    ModelGraph<float> g2 = graph_from_checkpoint<float>(data);
    ForwardCtx infer{Mode::Infer, 0, 0};
    Tensor<float> y1 = g.forward(in, infer);
    Tensor<float> y2 = g2.forward(in, infer);
    CHECK(std::memcmp(y1.ptr(), y2.ptr(), sizeof(float) * static_cast<size_t>(y1.numel())) == 0);

    Adam<float> opt2 = adam_from_checkpoint<float>(data);
    CHECK(opt2.t() == opt.t());
    CHECK(opt2.first_moments() == opt.first_moments());
    CHECK(opt2.second_moments() == opt.second_moments());

    // Tampered payload kind is rejected.
    CHECK_THROWS(load_tensor_archive(path), IoError);
    std::filesystem::remove(path);
}

TEST_CASE("tensor archive round trip") {
    Tensor<float> a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor<float> b(Shape{4}, {9, 8, 7, 6});
    save_tensor_archive("arch_roundtrip.bin", {{"alpha", &a}, {"beta", &b}});
    auto loaded = load_tensor_archive("arch_roundtrip.bin");
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].first == "alpha");
    CHECK(loaded[0].second.shape == a.shape);
    CHECK(loaded[0].second.data == a.data);
    CHECK(loaded[1].second.data == b.data);
    std::filesystem::remove("arch_roundtrip.bin");
}

TEST_CASE("rng stream: determinism, range, shuffle, normal moments") {
    RngStream a(42), b(42), c(43);
    bool all_same = true, any_diff = false;
    for (int i = 0; i < 100; ++i) {
        uint64_t x = a.next_u64(), y = b.next_u64(), z = c.next_u64();
        all_same = all_same && x == y;
        any_diff = any_diff || x != z;
    }
    CHECK(all_same);
    CHECK(any_diff);

    RngStream r(7);
    for (int i = 0; i < 1000; ++i) {
        double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }

    std::vector<int> perm(20);
    for (int i = 0; i < 20; ++i) perm[static_cast<size_t>(i)] = i;
    r.shuffle(perm);
    std::vector<int> sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 20; ++i) CHECK(sorted[static_cast<size_t>(i)] == i);

    double mean = 0.0, var = 0.0;
    const int n = 20000;
    std::vector<double> xs(n);
    for (int i = 0; i < n; ++i) {
        xs[static_cast<size_t>(i)] = r.normal();
        mean += xs[static_cast<size_t>(i)];
    }
    mean /= n;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= n;
    CHECK(std::abs(mean) < 0.03);
    CHECK(std::abs(var - 1.0) < 0.05);
}

HARNESS_MAIN
