#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "lhunet/ops_basic.hpp"
#include "lhunet/ops_conv.hpp"

using namespace lhunet;
using namespace lhunet::ops;
using namespace lhunet::testutil;

namespace {

// Scatter-style reference convolution: walks input voxels and distributes
// their contributions, the opposite traversal of the library's gather loops.
Tensor<double> conv3d_oracle(const Tensor<double>& x, const Tensor<double>& w,
                             const Tensor<double>& b, Triple stride, Triple pad, Triple dil,
                             int groups) {
    Vol5 xi(x.shape);
    int64_t co = w.shape[0], cig = w.shape[1];
    int64_t kd = w.shape[2], kh = w.shape[3], kw = w.shape[4];
    int64_t od = (xi.D + 2 * pad[0] - dil[0] * (kd - 1) - 1) / stride[0] + 1;
    int64_t oh = (xi.H + 2 * pad[1] - dil[1] * (kh - 1) - 1) / stride[1] + 1;
    int64_t ow = (xi.W + 2 * pad[2] - dil[2] * (kw - 1) - 1) / stride[2] + 1;
    int64_t cog = co / groups;
    Tensor<double> out({xi.B, co, od, oh, ow});
    for (int64_t bt = 0; bt < xi.B; ++bt)
        for (int64_t oc = 0; oc < co; ++oc)
            for (int64_t z = 0; z < od; ++z)
                for (int64_t y = 0; y < oh; ++y)
                    for (int64_t xx = 0; xx < ow; ++xx)
                        out.data[(((bt * co + oc) * od + z) * oh + y) * ow + xx] =
                            b.numel() ? b.data[oc] : 0.0;
    for (int64_t bt = 0; bt < xi.B; ++bt)
        for (int64_t ic = 0; ic < xi.C; ++ic) {
            int64_t grp = ic / cig;
            for (int64_t z = 0; z < xi.D; ++z)
                for (int64_t y = 0; y < xi.H; ++y)
                    for (int64_t xx = 0; xx < xi.W; ++xx) {
                        double xval = x.data[xi.idx(bt, ic, z, y, xx)];
                        for (int64_t dz = 0; dz < kd; ++dz)
                            for (int64_t dy = 0; dy < kh; ++dy)
                                for (int64_t dx = 0; dx < kw; ++dx) {
                                    int64_t nz = z + pad[0] - dz * dil[0];
                                    int64_t ny = y + pad[1] - dy * dil[1];
                                    int64_t nx = xx + pad[2] - dx * dil[2];
                                    if (nz % stride[0] || ny % stride[1] || nx % stride[2])
                                        continue;
                                    nz /= stride[0];
                                    ny /= stride[1];
                                    nx /= stride[2];
                                    if (nz < 0 || nz >= od || ny < 0 || ny >= oh || nx < 0 ||
                                        nx >= ow)
                                        continue;
                                    for (int64_t ocg = 0; ocg < cog; ++ocg) {
                                        int64_t oc = grp * cog + ocg;
                                        double wval =
                                            w.data[(((oc * cig + (ic % cig)) * kd + dz) * kh + dy) *
                                                       kw +
                                                   dx];
                                        out.data[(((bt * co + oc) * od + nz) * oh + ny) * ow + nx] +=
                                            xval * wval;
                                    }
                                }
                    }
        }
    return out;
}

}  // namespace

TEST(OpsConv, Conv3dMatchesOracle) {
    Rng rng(11);
    struct Case {
        Shape xs, ws;
        Triple stride, pad, dil;
        int groups;
    };
    std::vector<Case> cases = {
        {{1, 2, 5, 5, 5}, {3, 2, 3, 3, 3}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}, 1},
        {{2, 3, 6, 5, 4}, {4, 3, 3, 3, 3}, {2, 2, 2}, {1, 1, 1}, {1, 1, 1}, 1},
        {{1, 4, 7, 7, 7}, {4, 1, 3, 3, 3}, {1, 1, 1}, {3, 3, 3}, {3, 3, 3}, 4},  // dilated dw
        {{1, 4, 6, 6, 6}, {4, 1, 5, 5, 5}, {1, 1, 1}, {2, 2, 2}, {1, 1, 1}, 4},  // dw k5
        {{1, 3, 4, 4, 4}, {5, 3, 1, 1, 1}, {1, 1, 1}, {0, 0, 0}, {1, 1, 1}, 1},  // pointwise
        {{1, 4, 5, 4, 3}, {6, 2, 3, 1, 3}, {1, 2, 1}, {1, 0, 2}, {1, 1, 2}, 2},
    };
    for (const auto& c : cases) {
        auto x = random_tensor(rng, c.xs);
        auto w = random_tensor(rng, c.ws);
        auto b = random_tensor(rng, {c.ws[0]});
        Graph<double> g;
        const auto& got =
            g.val(conv3d(g, g.leaf(x), g.leaf(w), g.leaf(b), c.stride, c.pad, c.dil, c.groups));
        auto want = conv3d_oracle(x, w, b, c.stride, c.pad, c.dil, c.groups);
        ASSERT_EQ(got.shape, want.shape);
        for (int64_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got.data[i], want.data[i], 1e-10);
    }
}

TEST(OpsConv, Conv3dGrads) {
    Rng rng(12);
    auto x = random_tensor(rng, {1, 2, 4, 4, 4});
    auto w = random_tensor(rng, {3, 2, 3, 3, 3});
    auto b = random_tensor(rng, {3});
    auto r = gradcheck({x, w, b}, [](auto& g, auto& in) {
        VarId y = conv3d(g, in[0], in[1], in[2], Triple{2, 2, 2}, Triple{1, 1, 1});
        const auto& v = g.val(y);
        Tensor<double> wgt(v.shape);
        for (int64_t i = 0; i < v.numel(); ++i) wgt.data[i] = std::cos(0.3 * (double)i) + 1.2;
        return sum_all(g, mul(g, y, g.leaf(wgt)));
    });
    EXPECT_LT(r.max_rel_err, 1e-7);

    // grouped + dilated
    auto xg = random_tensor(rng, {1, 4, 5, 5, 5});
    auto wg = random_tensor(rng, {4, 1, 3, 3, 3});
    auto bg = random_tensor(rng, {4});
    auto r2 = gradcheck({xg, wg, bg}, [](auto& g, auto& in) {
        VarId y = conv3d(g, in[0], in[1], in[2], Triple{1, 1, 1}, Triple{2, 2, 2}, Triple{2, 2, 2},
                         4);
        const auto& v = g.val(y);
        Tensor<double> wgt(v.shape);
        for (int64_t i = 0; i < v.numel(); ++i) wgt.data[i] = std::sin(0.5 * (double)i) + 1.4;
        return sum_all(g, mul(g, y, g.leaf(wgt)));
    });
    EXPECT_LT(r2.max_rel_err, 1e-7);
}

TEST(OpsConv, TconvMatchesGradOfConv) {
    // conv with weight W maps x->y; its input-gradient operator applied to t
    // is exactly tconv(t, W) with the same stride/pad. Use autodiff of conv
    // as the oracle for tconv values.
    Rng rng(13);
    Triple stride{2, 2, 2}, pad{0, 0, 0};
    auto t = random_tensor(rng, {1, 3, 2, 2, 2});   // plays the conv-output role
    auto w = random_tensor(rng, {3, 2, 2, 2, 2});   // (ci_of_tconv, co_of_tconv, k)
    {
        Graph<double> g;
        // conv from (1,2,4,4,4) -> (1,3,2,2,2) with w' = w viewed as (co=3, ci=2)
        auto x0 = Tensor<double>::zeros({1, 2, 4, 4, 4});
        VarId x = g.param(x0);
        // reorder w (3,2,k,k,k) into conv layout (3,2,k,k,k): same
        VarId wc = g.leaf(w);
        VarId y = conv3d(g, x, wc, -1, stride, pad);
        g.backward(y, t);
        const auto& gx = g.grad(x);

        Graph<double> g2;
        VarId yt = tconv3d(g2, g2.leaf(t), g2.leaf(w), -1, stride, pad);
        const auto& got = g2.val(yt);
        ASSERT_EQ(got.shape, gx.shape);
        for (int64_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got.data[i], gx.data[i], 1e-10);
    }
}

TEST(OpsConv, TconvShapeAndBias) {
    Graph<double> g;
    auto x = Tensor<double>::zeros({1, 2, 3, 3, 3});
    Tensor<double> w({2, 3, 2, 2, 2}, 0.0);
    Tensor<double> b(Shape{3});
    b.data = {1.0, 2.0, 3.0};
    VarId y = tconv3d(g, g.leaf(x), g.leaf(w), g.leaf(b), Triple{2, 2, 2}, Triple{0, 0, 0});
    const auto& yv = g.val(y);
    EXPECT_EQ(yv.shape, (Shape{1, 3, 6, 6, 6}));
    EXPECT_DOUBLE_EQ(yv.data[0], 1.0);                  // bias only
    EXPECT_DOUBLE_EQ(yv.data[216 * 2 + 5], 3.0);
}

TEST(OpsConv, TconvGrads) {
    Rng rng(14);
    auto x = random_tensor(rng, {1, 2, 3, 3, 3});
    auto w = random_tensor(rng, {2, 2, 2, 2, 2});
    auto b = random_tensor(rng, {2});
    auto r = gradcheck({x, w, b}, [](auto& g, auto& in) {
        VarId y = tconv3d(g, in[0], in[1], in[2], Triple{2, 2, 2}, Triple{0, 0, 0});
        const auto& v = g.val(y);
        Tensor<double> wgt(v.shape);
        for (int64_t i = 0; i < v.numel(); ++i) wgt.data[i] = std::cos(0.21 * (double)i) + 1.1;
        return sum_all(g, mul(g, y, g.leaf(wgt)));
    });
    EXPECT_LT(r.max_rel_err, 1e-7);
}

TEST(OpsConv, MaxPoolValuesAndGrads) {
    Graph<double> g;
    Tensor<double> x({1, 1, 2, 2, 2});
    x.data = {1, 5, 2, 3, 8, 4, 6, 7};
    VarId px = g.param(x);
    VarId y = maxpool3d(g, px, Triple{2, 2, 2});
    EXPECT_EQ(g.val(y).shape, (Shape{1, 1, 1, 1, 1}));
    EXPECT_DOUBLE_EQ(g.val(y).data[0], 8.0);
    g.backward(y, Tensor<double>(Shape{1, 1, 1, 1, 1}, 2.5));
    // only the argmax position receives gradient
    const auto& gx = g.grad(px);
    for (int i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(gx.data[i], i == 4 ? 2.5 : 0.0);

    // anisotropic kernel
    Rng rng(15);
    auto xr = random_tensor(rng, {2, 3, 4, 4, 2});
    Graph<double> g2;
    const auto& yv = g2.val(maxpool3d(g2, g2.leaf(xr), Triple{2, 2, 1}));
    EXPECT_EQ(yv.shape, (Shape{2, 3, 2, 2, 2}));
    // divisibility enforced
    Graph<double> g3;
    EXPECT_THROW(maxpool3d(g3, g3.leaf(random_tensor(rng, {1, 1, 3, 4, 4})), Triple{2, 2, 2}),
                 std::runtime_error);

    auto r = gradcheck({xr}, [](auto& gg, auto& in) {
        VarId p = maxpool3d(gg, in[0], Triple{2, 2, 1});
        const auto& v = gg.val(p);
        Tensor<double> wgt(v.shape);
        for (int64_t i = 0; i < v.numel(); ++i) wgt.data[i] = std::sin(0.9 * (double)i) + 1.7;
        return sum_all(gg, mul(gg, p, gg.leaf(wgt)));
    });
    EXPECT_LT(r.max_rel_err, 1e-7);
}

TEST(OpsConv, BatchNormTrainingSemantics) {
    // oracle: per-channel batch mean / biased variance normalize the batch;
    // running stats blend with momentum 0.1 and the unbiased variance.
    Rng rng(16);
    auto x = random_tensor(rng, {2, 3, 2, 2, 2}, -2, 2);
    Tensor<double> w(Shape{3});
    w.data = {1.0, 2.0, 0.5};
    Tensor<double> b(Shape{3});
    b.data = {0.0, 1.0, -1.0};
    Tensor<double> rm = Tensor<double>::zeros({3});
    Tensor<double> rv(Shape{3}, 1.0);

    Graph<double> g;
    const auto& y =
        g.val(batchnorm3d(g, g.leaf(x), g.leaf(w), g.leaf(b), rm, rv, /*training=*/true));
    Vol5 xi(x.shape);
    int64_t per = xi.B * xi.D * xi.H * xi.W;
    for (int c = 0; c < 3; ++c) {
        double mean = 0, var = 0;
        for (int64_t bt = 0; bt < xi.B; ++bt)
            for (int64_t z = 0; z < xi.D; ++z)
                for (int64_t yy = 0; yy < xi.H; ++yy)
                    for (int64_t xx = 0; xx < xi.W; ++xx) mean += x.data[xi.idx(bt, c, z, yy, xx)];
        mean /= per;
        for (int64_t bt = 0; bt < xi.B; ++bt)
            for (int64_t z = 0; z < xi.D; ++z)
                for (int64_t yy = 0; yy < xi.H; ++yy)
                    for (int64_t xx = 0; xx < xi.W; ++xx) {
                        double d = x.data[xi.idx(bt, c, z, yy, xx)] - mean;
                        var += d * d;
                    }
        var /= per;  // biased, used for normalization
        double unbiased = var * per / (per - 1);
        EXPECT_NEAR(rm.data[c], 0.1 * mean, 1e-12);
        EXPECT_NEAR(rv.data[c], 0.9 * 1.0 + 0.1 * unbiased, 1e-12);
        Vol5 yi(y.shape);
        for (int64_t bt = 0; bt < xi.B; ++bt) {
            double got = y.data[yi.idx(bt, c, 0, 0, 0)];
            double want =
                (x.data[xi.idx(bt, c, 0, 0, 0)] - mean) / std::sqrt(var + 1e-5) * w.data[c] +
                b.data[c];
            EXPECT_NEAR(got, want, 1e-10);
        }
    }

    // eval mode uses running stats and leaves them untouched
    Tensor<double> rm2 = rm, rv2 = rv;
    Graph<double> g2;
    const auto& ye =
        g2.val(batchnorm3d(g2, g2.leaf(x), g2.leaf(w), g2.leaf(b), rm2, rv2, /*training=*/false));
    EXPECT_EQ(rm2.data[0], rm.data[0]);
    EXPECT_EQ(rv2.data[2], rv.data[2]);
    Vol5 yi(ye.shape);
    double want = (x.data[xi.idx(0, 1, 0, 0, 0)] - rm.data[1]) / std::sqrt(rv.data[1] + 1e-5) *
                      w.data[1] +
                  b.data[1];
    EXPECT_NEAR(ye.data[yi.idx(0, 1, 0, 0, 0)], want, 1e-10);
}

TEST(OpsConv, BatchNormGrads) {
    Rng rng(17);
    auto x = random_tensor(rng, {2, 2, 2, 2, 2});
    auto w = random_tensor(rng, {2}, 0.5, 1.5);
    auto b = random_tensor(rng, {2});
    for (bool training : {true, false}) {
        auto r = gradcheck(
            {x, w, b},
            [training](auto& g, auto& in) {
                // fresh stats per evaluation so the closure stays pure
                Tensor<double> rm = Tensor<double>::zeros({2});
                Tensor<double> rv(Shape{2}, 1.0);
                rm.data = {0.1, -0.2};
                rv.data = {1.3, 0.7};
                VarId y = batchnorm3d(g, in[0], in[1], in[2], rm, rv, training);
                const auto& v = g.val(y);
                Tensor<double> wgt(v.shape);
                for (int64_t i = 0; i < v.numel(); ++i)
                    wgt.data[i] = std::cos(0.4 * (double)i) + 1.3;
                return sum_all(g, mul(g, y, g.leaf(wgt)));
            },
            {}, 1e-6);
        EXPECT_LT(r.max_rel_err, 1e-5) << (training ? "train" : "eval");
    }
}

TEST(OpsConv, DeformZeroOffsetEqualsDepthwise) {
    Rng rng(18);
    auto x = random_tensor(rng, {1, 3, 4, 4, 4});
    auto w = random_tensor(rng, {3, 1, 3, 3, 3});
    auto b = random_tensor(rng, {3});
    auto off = Tensor<double>::zeros({1, 81, 4, 4, 4});
    Graph<double> g;
    VarId yd = deform_dwconv3d(g, g.leaf(x), g.leaf(w), g.leaf(b), g.leaf(off), Triple{1, 1, 1});
    VarId ys = conv3d(g, g.leaf(x), g.leaf(w), g.leaf(b), Triple{1, 1, 1}, Triple{1, 1, 1},
                      Triple{1, 1, 1}, 3);
    const auto& a = g.val(yd);
    const auto& c = g.val(ys);
    ASSERT_EQ(a.shape, c.shape);
    for (int64_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data[i], c.data[i], 1e-12);
}

TEST(OpsConv, DeformFractionalOffsetMatchesManualTrilinear) {
    // single channel, single tap kernel: out(v) = w * x(v + off)
    Graph<double> g;
    Tensor<double> x({1, 1, 2, 2, 2});
    x.data = {0, 1, 2, 3, 4, 5, 6, 7};  // x(z,y,xx) = 4z + 2y + xx
    Tensor<double> w({1, 1, 1, 1, 1}, 1.0);
    Tensor<double> off = Tensor<double>::zeros({1, 3, 2, 2, 2});
    // at voxel (0,0,0): offset (0.5, 0.5, 0.5) -> trilinear average = 3.5
    off.data[0 * 8 + 0] = 0.5;
    off.data[1 * 8 + 0] = 0.5;
    off.data[2 * 8 + 0] = 0.5;
    VarId y = deform_dwconv3d(g, g.leaf(x), g.leaf(w), -1, g.leaf(off), Triple{0, 0, 0});
    EXPECT_NEAR(g.val(y).data[0], 3.5, 1e-12);
    // linear field: interior fractional sample is exact
    off.data[0 * 8 + 3] = 0.25;  // voxel (0,1,1): pos (0.25, 1, 1) -> 2+1+0.25*4=4
    Graph<double> g2;
    VarId y2 = deform_dwconv3d(g2, g2.leaf(x), g2.leaf(w), -1, g2.leaf(off), Triple{0, 0, 0});
    EXPECT_NEAR(g2.val(y2).data[3], 4.0, 1e-12);
    // outside the volume reads zero
    Tensor<double> off3 = Tensor<double>::zeros({1, 3, 2, 2, 2});
    off3.data[0 * 8 + 0] = -1.0;
    Graph<double> g3;
    VarId y3 = deform_dwconv3d(g3, g3.leaf(x), g3.leaf(w), -1, g3.leaf(off3), Triple{0, 0, 0});
    EXPECT_NEAR(g3.val(y3).data[0], 0.0, 1e-12);
}

TEST(OpsConv, DeformGrads) {
    Rng rng(19);
    auto x = random_tensor(rng, {1, 2, 3, 3, 3});
    auto w = random_tensor(rng, {2, 1, 3, 3, 3});
    auto b = random_tensor(rng, {2});
    auto off = random_tensor(rng, {1, 81, 3, 3, 3}, -0.4, 0.4);
    auto r = gradcheck(
        {x, w, b, off},
        [](auto& g, auto& in) {
            VarId y = deform_dwconv3d(g, in[0], in[1], in[2], in[3], Triple{1, 1, 1});
            const auto& v = g.val(y);
            Tensor<double> wgt(v.shape);
            for (int64_t i = 0; i < v.numel(); ++i) wgt.data[i] = std::sin(0.13 * (double)i) + 1.5;
            return sum_all(g, mul(g, y, g.leaf(wgt)));
        },
        {}, 1e-6, /*sample_stride=*/7);
    EXPECT_LT(r.max_rel_err, 1e-5);
}

TEST(OpsConv, FlopAccountingConv) {
    Graph<double> g;
    g.reset_flops();
    auto x = Tensor<double>::zeros({1, 2, 4, 4, 4});
    auto w = Tensor<double>::zeros({3, 2, 3, 3, 3});
    auto b = Tensor<double>::zeros({3});
    conv3d(g, g.leaf(x), g.leaf(w), g.leaf(b), Triple{1, 1, 1}, Triple{1, 1, 1});
    // 2 * B*Co*out_vox*(Ci/g)*k^3 + bias out elems
    double macs2 = 2.0 * 1 * 3 * 64 * 2 * 27;
    EXPECT_DOUBLE_EQ(g.flops(), macs2 + 3 * 64);
}
