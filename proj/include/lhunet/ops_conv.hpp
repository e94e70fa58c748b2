#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "lhunet/costmodel.hpp"
#include "lhunet/graph.hpp"
#include "lhunet/tensor.hpp"

namespace lhunet {

using Triple = std::array<int, 3>;

inline Triple triple(int v) { return {v, v, v}; }

}  // namespace lhunet

namespace lhunet::ops {

using lhunet::Triple;
using lhunet::triple;

// ---------------------------------------------------------------------------
// conv3d: x (B, Ci, D, H, W), w (Co, Ci/G, kd, kh, kw), b (Co) or -1
// ---------------------------------------------------------------------------

template <class T>
VarId conv3d(Graph<T>& g, VarId x, VarId w, VarId b, Triple stride, Triple pad,
             Triple dilation = {1, 1, 1}, int groups = 1) {
    const auto& xv = g.val(x);
    const auto& wv = g.val(w);
    require(xv.rank() == 5 && wv.rank() == 5, "conv3d: rank");
    Vol5 xi(xv.shape);
    int64_t co = wv.shape[0], cig = wv.shape[1];
    int64_t kd = wv.shape[2], kh = wv.shape[3], kw = wv.shape[4];
    require(xi.C % groups == 0 && co % groups == 0, "conv3d: groups");
    require(cig == xi.C / groups, "conv3d: weight in-channels");
    int64_t od = (xi.D + 2 * pad[0] - dilation[0] * (kd - 1) - 1) / stride[0] + 1;
    int64_t oh = (xi.H + 2 * pad[1] - dilation[1] * (kh - 1) - 1) / stride[1] + 1;
    int64_t ow = (xi.W + 2 * pad[2] - dilation[2] * (kw - 1) - 1) / stride[2] + 1;
    require(od > 0 && oh > 0 && ow > 0, "conv3d: empty output");
    bool bias = b >= 0;
    if (bias) require(g.val(b).numel() == co, "conv3d: bias shape");

    Tensor<T> out({xi.B, co, od, oh, ow});
    Vol5 oi(out.shape);
    int64_t copg = co / groups;
    const T* xp = xv.ptr();
    const T* wp = wv.ptr();
    const T* bp = bias ? g.val(b).ptr() : nullptr;
    for (int64_t n = 0; n < xi.B; ++n)
        for (int64_t c = 0; c < co; ++c) {
            int64_t grp = c / copg;
            int64_t ci0 = grp * cig;
            const T* wc = wp + c * cig * kd * kh * kw;
            for (int64_t z = 0; z < od; ++z)
                for (int64_t y = 0; y < oh; ++y)
                    for (int64_t xw = 0; xw < ow; ++xw) {
                        T acc = bias ? bp[c] : T(0);
                        for (int64_t ci = 0; ci < cig; ++ci) {
                            const T* xc = xp + (n * xi.C + ci0 + ci) * xi.vox();
                            const T* wk = wc + ci * kd * kh * kw;
                            for (int64_t a = 0; a < kd; ++a) {
                                int64_t iz = z * stride[0] - pad[0] + a * dilation[0];
                                if (iz < 0 || iz >= xi.D) continue;
                                for (int64_t bb = 0; bb < kh; ++bb) {
                                    int64_t iy = y * stride[1] - pad[1] + bb * dilation[1];
                                    if (iy < 0 || iy >= xi.H) continue;
                                    for (int64_t cc = 0; cc < kw; ++cc) {
                                        int64_t ix = xw * stride[2] - pad[2] + cc * dilation[2];
                                        if (ix < 0 || ix >= xi.W) continue;
                                        acc += xc[(iz * xi.H + iy) * xi.W + ix] *
                                               wk[(a * kh + bb) * kw + cc];
                                    }
                                }
                            }
                        }
                        out.data[oi.idx(n, c, z, y, xw)] = acc;
                    }
        }
    g.count_flops(cost::conv3d((double)xi.B, (double)xi.C, (double)co,
                               (double)(od * oh * ow), (double)(kd * kh * kw),
                               (double)groups, bias));
    bool rg = g.wants_grad(x) || g.wants_grad(w) || (bias && g.wants_grad(b));
    VarId o = g.make(std::move(out), rg, "conv3d");
    if (g.wants_grad(o))
        g.set_backward(o, [x, w, b, o, stride, pad, dilation, groups](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            const auto& xv2 = gg.val(x);
            const auto& wv2 = gg.val(w);
            Vol5 xi2(xv2.shape);
            Vol5 oi2(go.shape);
            int64_t cig2 = wv2.shape[1];
            int64_t kd2 = wv2.shape[2], kh2 = wv2.shape[3], kw2 = wv2.shape[4];
            int64_t copg2 = oi2.C / groups;
            bool wx = gg.wants_grad(x), ww = gg.wants_grad(w);
            bool wb = b >= 0 && gg.wants_grad(b);
            T* gxp = wx ? gg.grad(x).ptr() : nullptr;
            T* gwp = ww ? gg.grad(w).ptr() : nullptr;
            T* gbp = wb ? gg.grad(b).ptr() : nullptr;
            for (int64_t n = 0; n < xi2.B; ++n)
                for (int64_t c = 0; c < oi2.C; ++c) {
                    int64_t grp = c / copg2;
                    int64_t ci0 = grp * cig2;
                    const T* wc = wv2.ptr() + c * cig2 * kd2 * kh2 * kw2;
                    T* gwc = ww ? gwp + c * cig2 * kd2 * kh2 * kw2 : nullptr;
                    for (int64_t z = 0; z < oi2.D; ++z)
                        for (int64_t y = 0; y < oi2.H; ++y)
                            for (int64_t xw = 0; xw < oi2.W; ++xw) {
                                T gov = go.data[oi2.idx(n, c, z, y, xw)];
                                if (gov == T(0)) continue;
                                if (wb) gbp[c] += gov;
                                for (int64_t ci = 0; ci < cig2; ++ci) {
                                    int64_t xoff = (n * xi2.C + ci0 + ci) * xi2.vox();
                                    const T* xc = xv2.ptr() + xoff;
                                    const T* wk = wc + ci * kd2 * kh2 * kw2;
                                    T* gwk = ww ? gwc + ci * kd2 * kh2 * kw2 : nullptr;
                                    for (int64_t a = 0; a < kd2; ++a) {
                                        int64_t iz = z * stride[0] - pad[0] + a * dilation[0];
                                        if (iz < 0 || iz >= xi2.D) continue;
                                        for (int64_t bb = 0; bb < kh2; ++bb) {
                                            int64_t iy = y * stride[1] - pad[1] + bb * dilation[1];
                                            if (iy < 0 || iy >= xi2.H) continue;
                                            for (int64_t cc = 0; cc < kw2; ++cc) {
                                                int64_t ix = xw * stride[2] - pad[2] + cc * dilation[2];
                                                if (ix < 0 || ix >= xi2.W) continue;
                                                int64_t xij = (iz * xi2.H + iy) * xi2.W + ix;
                                                int64_t kij = (a * kh2 + bb) * kw2 + cc;
                                                if (wx) gxp[xoff + xij] += wk[kij] * gov;
                                                if (ww) gwk[kij] += xc[xij] * gov;
                                            }
                                        }
                                    }
                                }
                            }
                }
        });
    return o;
}

// ---------------------------------------------------------------------------
// transposed conv3d: x (B, Ci, D, H, W), w (Ci, Co/G, kd, kh, kw), b (Co)
// out dims: (D-1)*stride - 2*pad + k
// ---------------------------------------------------------------------------

template <class T>
VarId tconv3d(Graph<T>& g, VarId x, VarId w, VarId b, Triple stride, Triple pad,
              int groups = 1) {
    const auto& xv = g.val(x);
    const auto& wv = g.val(w);
    require(xv.rank() == 5 && wv.rank() == 5, "tconv3d: rank");
    Vol5 xi(xv.shape);
    require(wv.shape[0] == xi.C, "tconv3d: weight in-channels");
    int64_t cog = wv.shape[1];
    int64_t co = cog * groups;
    int64_t kd = wv.shape[2], kh = wv.shape[3], kw = wv.shape[4];
    int64_t od = (xi.D - 1) * stride[0] - 2 * pad[0] + kd;
    int64_t oh = (xi.H - 1) * stride[1] - 2 * pad[1] + kh;
    int64_t ow = (xi.W - 1) * stride[2] - 2 * pad[2] + kw;
    bool bias = b >= 0;
    if (bias) require(g.val(b).numel() == co, "tconv3d: bias shape");

    Tensor<T> out({xi.B, co, od, oh, ow});
    Vol5 oi(out.shape);
    int64_t cipg = xi.C / groups;
    if (bias) {
        const T* bp = g.val(b).ptr();
        for (int64_t n = 0; n < oi.B; ++n)
            for (int64_t c = 0; c < co; ++c) {
                T* op = out.ptr() + (n * co + c) * oi.vox();
                for (int64_t i = 0; i < oi.vox(); ++i) op[i] = bp[c];
            }
    }
    const T* xp = xv.ptr();
    const T* wp = wv.ptr();
    for (int64_t n = 0; n < xi.B; ++n)
        for (int64_t ci = 0; ci < xi.C; ++ci) {
            int64_t grp = ci / cipg;
            const T* xc = xp + (n * xi.C + ci) * xi.vox();
            const T* wc = wp + ci * cog * kd * kh * kw;
            for (int64_t z = 0; z < xi.D; ++z)
                for (int64_t y = 0; y < xi.H; ++y)
                    for (int64_t xw = 0; xw < xi.W; ++xw) {
                        T xval = xc[(z * xi.H + y) * xi.W + xw];
                        for (int64_t c2 = 0; c2 < cog; ++c2) {
                            int64_t oc = grp * cog + c2;
                            T* op = out.ptr() + (n * co + oc) * oi.vox();
                            const T* wk = wc + c2 * kd * kh * kw;
                            for (int64_t a = 0; a < kd; ++a) {
                                int64_t oz = z * stride[0] - pad[0] + a;
                                if (oz < 0 || oz >= od) continue;
                                for (int64_t bb = 0; bb < kh; ++bb) {
                                    int64_t oy = y * stride[1] - pad[1] + bb;
                                    if (oy < 0 || oy >= oh) continue;
                                    for (int64_t cc = 0; cc < kw; ++cc) {
                                        int64_t ox = xw * stride[2] - pad[2] + cc;
                                        if (ox < 0 || ox >= ow) continue;
                                        op[(oz * oh + oy) * ow + ox] +=
                                            xval * wk[(a * kh + bb) * kw + cc];
                                    }
                                }
                            }
                        }
                    }
        }
    g.count_flops(cost::tconv3d((double)xi.B, (double)xi.C, (double)co,
                                (double)xi.vox(), (double)(od * oh * ow),
                                (double)(kd * kh * kw), (double)groups, bias));
    bool rg = g.wants_grad(x) || g.wants_grad(w) || (bias && g.wants_grad(b));
    VarId o = g.make(std::move(out), rg, "tconv3d");
    if (g.wants_grad(o))
        g.set_backward(o, [x, w, b, o, stride, pad, groups](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            const auto& xv2 = gg.val(x);
            const auto& wv2 = gg.val(w);
            Vol5 xi2(xv2.shape);
            Vol5 oi2(go.shape);
            int64_t cog2 = wv2.shape[1];
            int64_t kd2 = wv2.shape[2], kh2 = wv2.shape[3], kw2 = wv2.shape[4];
            int64_t cipg2 = xi2.C / groups;
            bool wx = gg.wants_grad(x), ww = gg.wants_grad(w);
            bool wb = b >= 0 && gg.wants_grad(b);
            if (wb) {
                auto& gb = gg.grad(b);
                for (int64_t n = 0; n < oi2.B; ++n)
                    for (int64_t c = 0; c < oi2.C; ++c) {
                        const T* gp = go.ptr() + (n * oi2.C + c) * oi2.vox();
                        T acc = 0;
                        for (int64_t i = 0; i < oi2.vox(); ++i) acc += gp[i];
                        gb.data[c] += acc;
                    }
            }
            if (!wx && !ww) return;
            T* gxp = wx ? gg.grad(x).ptr() : nullptr;
            T* gwp = ww ? gg.grad(w).ptr() : nullptr;
            for (int64_t n = 0; n < xi2.B; ++n)
                for (int64_t ci = 0; ci < xi2.C; ++ci) {
                    int64_t grp = ci / cipg2;
                    int64_t xoff = (n * xi2.C + ci) * xi2.vox();
                    const T* xc = xv2.ptr() + xoff;
                    const T* wc = wv2.ptr() + ci * cog2 * kd2 * kh2 * kw2;
                    T* gwc = ww ? gwp + ci * cog2 * kd2 * kh2 * kw2 : nullptr;
                    for (int64_t z = 0; z < xi2.D; ++z)
                        for (int64_t y = 0; y < xi2.H; ++y)
                            for (int64_t xw = 0; xw < xi2.W; ++xw) {
                                int64_t xij = (z * xi2.H + y) * xi2.W + xw;
                                T xval = xc[xij];
                                T gxacc = 0;
                                for (int64_t c2 = 0; c2 < cog2; ++c2) {
                                    int64_t oc = grp * cog2 + c2;
                                    const T* gp = go.ptr() + (n * oi2.C + oc) * oi2.vox();
                                    const T* wk = wc + c2 * kd2 * kh2 * kw2;
                                    T* gwk = ww ? gwc + c2 * kd2 * kh2 * kw2 : nullptr;
                                    for (int64_t a = 0; a < kd2; ++a) {
                                        int64_t oz = z * stride[0] - pad[0] + a;
                                        if (oz < 0 || oz >= oi2.D) continue;
                                        for (int64_t bb = 0; bb < kh2; ++bb) {
                                            int64_t oy = y * stride[1] - pad[1] + bb;
                                            if (oy < 0 || oy >= oi2.H) continue;
                                            for (int64_t cc = 0; cc < kw2; ++cc) {
                                                int64_t ox = xw * stride[2] - pad[2] + cc;
                                                if (ox < 0 || ox >= oi2.W) continue;
                                                T gov = gp[(oz * oi2.H + oy) * oi2.W + ox];
                                                int64_t kij = (a * kh2 + bb) * kw2 + cc;
                                                if (wx) gxacc += wk[kij] * gov;
                                                if (ww) gwk[kij] += xval * gov;
                                            }
                                        }
                                    }
                                }
                                if (wx) gxp[xoff + xij] += gxacc;
                            }
                }
        });
    return o;
}

// ---------------------------------------------------------------------------
// max pool, kernel == stride (non-overlapping); dims must divide exactly
// ---------------------------------------------------------------------------

template <class T>
VarId maxpool3d(Graph<T>& g, VarId x, Triple k) {
    const auto& xv = g.val(x);
    Vol5 xi(xv.shape);
    require(xi.D % k[0] == 0 && xi.H % k[1] == 0 && xi.W % k[2] == 0,
            "maxpool3d: dims " + shape_str(xv.shape) + " not divisible by kernel");
    int64_t od = xi.D / k[0], oh = xi.H / k[1], ow = xi.W / k[2];
    Tensor<T> out({xi.B, xi.C, od, oh, ow});
    auto argmax = std::make_shared<std::vector<int64_t>>(out.data.size());
    Vol5 oi(out.shape);
    for (int64_t n = 0; n < xi.B; ++n)
        for (int64_t c = 0; c < xi.C; ++c) {
            const T* xc = xv.ptr() + (n * xi.C + c) * xi.vox();
            for (int64_t z = 0; z < od; ++z)
                for (int64_t y = 0; y < oh; ++y)
                    for (int64_t xw = 0; xw < ow; ++xw) {
                        T best = -std::numeric_limits<T>::infinity();
                        int64_t bi = -1;
                        for (int64_t a = 0; a < k[0]; ++a)
                            for (int64_t bb = 0; bb < k[1]; ++bb)
                                for (int64_t cc = 0; cc < k[2]; ++cc) {
                                    int64_t ij = ((z * k[0] + a) * xi.H + y * k[1] + bb) * xi.W +
                                                 xw * k[2] + cc;
                                    if (xc[ij] > best) {
                                        best = xc[ij];
                                        bi = ij;
                                    }
                                }
                        int64_t oij = oi.idx(n, c, z, y, xw);
                        out.data[oij] = best;
                        (*argmax)[oij] = (n * xi.C + c) * xi.vox() + bi;
                    }
        }
    g.count_flops(cost::eltwise((double)out.numel()));
    VarId o = g.make(std::move(out), g.wants_grad(x), "maxpool3d");
    if (g.wants_grad(o))
        g.set_backward(o, [x, o, argmax](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            auto& gx = gg.grad(x);
            for (size_t i = 0; i < go.data.size(); ++i) gx.data[(*argmax)[i]] += go.data[i];
        });
    return o;
}

// ---------------------------------------------------------------------------
// batch norm over (B, D, H, W) per channel; running stats live outside the
// tape and are updated in place during training forwards
// ---------------------------------------------------------------------------

template <class T>
VarId batchnorm3d(Graph<T>& g, VarId x, VarId w, VarId b, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, double momentum = 0.1,
                  double eps = 1e-5) {
    const auto& xv = g.val(x);
    Vol5 xi(xv.shape);
    require(g.val(w).numel() == xi.C && g.val(b).numel() == xi.C, "batchnorm3d: affine shape");
    require(running_mean.numel() == xi.C && running_var.numel() == xi.C, "batchnorm3d: stats shape");
    int64_t n_per_c = xi.B * xi.vox();
    auto mean = std::make_shared<std::vector<double>>(xi.C);
    auto rstd = std::make_shared<std::vector<double>>(xi.C);
    if (training) {
        for (int64_t c = 0; c < xi.C; ++c) {
            double m = 0;
            for (int64_t n = 0; n < xi.B; ++n) {
                const T* xc = xv.ptr() + (n * xi.C + c) * xi.vox();
                for (int64_t i = 0; i < xi.vox(); ++i) m += (double)xc[i];
            }
            m /= (double)n_per_c;
            double v = 0;
            for (int64_t n = 0; n < xi.B; ++n) {
                const T* xc = xv.ptr() + (n * xi.C + c) * xi.vox();
                for (int64_t i = 0; i < xi.vox(); ++i) {
                    double d = (double)xc[i] - m;
                    v += d * d;
                }
            }
            double var_b = v / (double)n_per_c;
            double var_u = n_per_c > 1 ? v / (double)(n_per_c - 1) : var_b;
            (*mean)[c] = m;
            (*rstd)[c] = 1.0 / std::sqrt(var_b + eps);
            running_mean.data[c] = static_cast<T>((1.0 - momentum) * (double)running_mean.data[c] +
                                                  momentum * m);
            running_var.data[c] = static_cast<T>((1.0 - momentum) * (double)running_var.data[c] +
                                                 momentum * var_u);
        }
    } else {
        for (int64_t c = 0; c < xi.C; ++c) {
            (*mean)[c] = (double)running_mean.data[c];
            (*rstd)[c] = 1.0 / std::sqrt((double)running_var.data[c] + eps);
        }
    }
    const auto& wv = g.val(w);
    const auto& bv = g.val(b);
    Tensor<T> out(xv.shape);
    for (int64_t n = 0; n < xi.B; ++n)
        for (int64_t c = 0; c < xi.C; ++c) {
            const T* xc = xv.ptr() + (n * xi.C + c) * xi.vox();
            T* oc = out.ptr() + (n * xi.C + c) * xi.vox();
            double sc = (double)wv.data[c] * (*rstd)[c];
            double sh = (double)bv.data[c] - sc * (*mean)[c];
            for (int64_t i = 0; i < xi.vox(); ++i)
                oc[i] = static_cast<T>((double)xc[i] * sc + sh);
        }
    g.count_flops(cost::eltwise((double)out.numel()));
    bool rg = g.wants_grad(x) || g.wants_grad(w) || g.wants_grad(b);
    VarId o = g.make(std::move(out), rg, "batchnorm3d");
    if (g.wants_grad(o))
        g.set_backward(o, [x, w, b, o, mean, rstd, training, n_per_c](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            const auto& xv2 = gg.val(x);
            const auto& wv2 = gg.val(w);
            Vol5 xi2(xv2.shape);
            bool wx = gg.wants_grad(x), ww = gg.wants_grad(w), wb = gg.wants_grad(b);
            for (int64_t c = 0; c < xi2.C; ++c) {
                double m = (*mean)[c], rs = (*rstd)[c];
                double sum_g = 0, sum_gx = 0;
                for (int64_t n = 0; n < xi2.B; ++n) {
                    const T* gc = go.ptr() + (n * xi2.C + c) * xi2.vox();
                    const T* xc = xv2.ptr() + (n * xi2.C + c) * xi2.vox();
                    for (int64_t i = 0; i < xi2.vox(); ++i) {
                        double gv = (double)gc[i];
                        sum_g += gv;
                        sum_gx += gv * (((double)xc[i] - m) * rs);
                    }
                }
                if (ww) gg.grad(w).data[c] += static_cast<T>(sum_gx);
                if (wb) gg.grad(b).data[c] += static_cast<T>(sum_g);
                if (wx) {
                    auto& gx = gg.grad(x);
                    double gamma = (double)wv2.data[c];
                    double mg = sum_g / (double)n_per_c;
                    double mgx = sum_gx / (double)n_per_c;
                    for (int64_t n = 0; n < xi2.B; ++n) {
                        const T* gc = go.ptr() + (n * xi2.C + c) * xi2.vox();
                        const T* xc = xv2.ptr() + (n * xi2.C + c) * xi2.vox();
                        T* gxc = gx.ptr() + (n * xi2.C + c) * xi2.vox();
                        if (training) {
                            for (int64_t i = 0; i < xi2.vox(); ++i) {
                                double xh = ((double)xc[i] - m) * rs;
                                gxc[i] += static_cast<T>(gamma * rs *
                                                         ((double)gc[i] - mg - xh * mgx));
                            }
                        } else {
                            for (int64_t i = 0; i < xi2.vox(); ++i)
                                gxc[i] += static_cast<T>(gamma * rs * (double)gc[i]);
                        }
                    }
                }
            }
        });
    return o;
}

// ---------------------------------------------------------------------------
// deformable depthwise conv3d, stride 1
// x (B, C, D, H, W), w (C, 1, k, k, k), b (C) or -1,
// off (B, 3*k^3, D, H, W): per kernel tap j, channels (3j, 3j+1, 3j+2) hold
// displacements (dz, dy, dx) in voxels, shared across feature channels.
// Samples use trilinear interpolation with zero padding outside the volume.
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
inline double trisample(const T* ch, int64_t D, int64_t H, int64_t W, double pz,
                        double py, double px) {
    double zf = std::floor(pz), yf = std::floor(py), xf = std::floor(px);
    int64_t z0 = (int64_t)zf, y0 = (int64_t)yf, x0 = (int64_t)xf;
    double fz = pz - zf, fy = py - yf, fx = px - xf;
    double acc = 0;
    for (int dz = 0; dz < 2; ++dz) {
        int64_t z = z0 + dz;
        if (z < 0 || z >= D) continue;
        double wz = dz ? fz : 1.0 - fz;
        for (int dy = 0; dy < 2; ++dy) {
            int64_t y = y0 + dy;
            if (y < 0 || y >= H) continue;
            double wy = dy ? fy : 1.0 - fy;
            for (int dx = 0; dx < 2; ++dx) {
                int64_t x = x0 + dx;
                if (x < 0 || x >= W) continue;
                double wx = dx ? fx : 1.0 - fx;
                acc += wz * wy * wx * (double)ch[(z * H + y) * W + x];
            }
        }
    }
    return acc;
}

// value plus d(sample)/d(pz,py,px)
template <class T>
inline void trisample_grad(const T* ch, int64_t D, int64_t H, int64_t W, double pz,
                           double py, double px, double& val, double& dz_, double& dy_,
                           double& dx_) {
    double zf = std::floor(pz), yf = std::floor(py), xf = std::floor(px);
    int64_t z0 = (int64_t)zf, y0 = (int64_t)yf, x0 = (int64_t)xf;
    double fz = pz - zf, fy = py - yf, fx = px - xf;
    val = dz_ = dy_ = dx_ = 0;
    for (int dz = 0; dz < 2; ++dz) {
        int64_t z = z0 + dz;
        if (z < 0 || z >= D) continue;
        double wz = dz ? fz : 1.0 - fz;
        double gz = dz ? 1.0 : -1.0;
        for (int dy = 0; dy < 2; ++dy) {
            int64_t y = y0 + dy;
            if (y < 0 || y >= H) continue;
            double wy = dy ? fy : 1.0 - fy;
            double gy = dy ? 1.0 : -1.0;
            for (int dx = 0; dx < 2; ++dx) {
                int64_t x = x0 + dx;
                if (x < 0 || x >= W) continue;
                double wx = dx ? fx : 1.0 - fx;
                double gx = dx ? 1.0 : -1.0;
                double v = (double)ch[(z * H + y) * W + x];
                val += wz * wy * wx * v;
                dz_ += gz * wy * wx * v;
                dy_ += wz * gy * wx * v;
                dx_ += wz * wy * gx * v;
            }
        }
    }
}

// scatter g into the corners around (pz, py, px)
template <class T>
inline void trisplat(T* gch, int64_t D, int64_t H, int64_t W, double pz, double py,
                     double px, double gval) {
    double zf = std::floor(pz), yf = std::floor(py), xf = std::floor(px);
    int64_t z0 = (int64_t)zf, y0 = (int64_t)yf, x0 = (int64_t)xf;
    double fz = pz - zf, fy = py - yf, fx = px - xf;
    for (int dz = 0; dz < 2; ++dz) {
        int64_t z = z0 + dz;
        if (z < 0 || z >= D) continue;
        double wz = dz ? fz : 1.0 - fz;
        for (int dy = 0; dy < 2; ++dy) {
            int64_t y = y0 + dy;
            if (y < 0 || y >= H) continue;
            double wy = dy ? fy : 1.0 - fy;
            for (int dx = 0; dx < 2; ++dx) {
                int64_t x = x0 + dx;
                if (x < 0 || x >= W) continue;
                double wx = dx ? fx : 1.0 - fx;
                gch[(z * H + y) * W + x] += static_cast<T>(wz * wy * wx * gval);
            }
        }
    }
}

}  // namespace detail

template <class T>
VarId deform_dwconv3d(Graph<T>& g, VarId x, VarId w, VarId b, VarId off, Triple pad,
                      Triple dilation = {1, 1, 1}) {
    const auto& xv = g.val(x);
    const auto& wv = g.val(w);
    const auto& ov = g.val(off);
    require(xv.rank() == 5 && wv.rank() == 5, "deform_dwconv3d: rank");
    Vol5 xi(xv.shape);
    require(wv.shape[0] == xi.C && wv.shape[1] == 1, "deform_dwconv3d: depthwise weight");
    int64_t kd = wv.shape[2], kh = wv.shape[3], kw = wv.shape[4];
    int64_t k3 = kd * kh * kw;
    Vol5 offi(ov.shape);
    require(offi.B == xi.B && offi.C == 3 * k3 && offi.D == xi.D && offi.H == xi.H &&
                offi.W == xi.W,
            "deform_dwconv3d: offset shape " + shape_str(ov.shape));
    bool bias = b >= 0;
    if (bias) require(g.val(b).numel() == xi.C, "deform_dwconv3d: bias shape");

    Tensor<T> out(xv.shape);
    const T* xp = xv.ptr();
    const T* wp = wv.ptr();
    const T* op = ov.ptr();
    const T* bp = bias ? g.val(b).ptr() : nullptr;
    int64_t vox = xi.vox();
    for (int64_t n = 0; n < xi.B; ++n) {
        const T* offn = op + n * offi.C * vox;
        for (int64_t c = 0; c < xi.C; ++c) {
            const T* xc = xp + (n * xi.C + c) * vox;
            const T* wk = wp + c * k3;
            T* oc = out.ptr() + (n * xi.C + c) * vox;
            int64_t vi = 0;
            for (int64_t z = 0; z < xi.D; ++z)
                for (int64_t y = 0; y < xi.H; ++y)
                    for (int64_t xw = 0; xw < xi.W; ++xw, ++vi) {
                        double acc = bias ? (double)bp[c] : 0.0;
                        int64_t j = 0;
                        for (int64_t a = 0; a < kd; ++a)
                            for (int64_t bb = 0; bb < kh; ++bb)
                                for (int64_t cc = 0; cc < kw; ++cc, ++j) {
                                    double pz = (double)(z - pad[0] + a * dilation[0]) +
                                                (double)offn[(3 * j + 0) * vox + vi];
                                    double py = (double)(y - pad[1] + bb * dilation[1]) +
                                                (double)offn[(3 * j + 1) * vox + vi];
                                    double px = (double)(xw - pad[2] + cc * dilation[2]) +
                                                (double)offn[(3 * j + 2) * vox + vi];
                                    acc += (double)wk[j] *
                                           detail::trisample(xc, xi.D, xi.H, xi.W, pz, py, px);
                                }
                        oc[vi] = static_cast<T>(acc);
                    }
        }
    }
    double out_sp = (double)vox;
    g.count_flops(cost::conv3d((double)xi.B, (double)xi.C, (double)xi.C, out_sp,
                               (double)k3, (double)xi.C, bias) +
                  cost::trilinear((double)xi.B * (double)xi.C * out_sp * (double)k3));
    bool rg = g.wants_grad(x) || g.wants_grad(w) || g.wants_grad(off) ||
              (bias && g.wants_grad(b));
    VarId o = g.make(std::move(out), rg, "deform_dwconv3d");
    if (g.wants_grad(o))
        g.set_backward(o, [x, w, b, off, o, pad, dilation](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            const auto& xv2 = gg.val(x);
            const auto& wv2 = gg.val(w);
            const auto& ov2 = gg.val(off);
            Vol5 xi2(xv2.shape);
            int64_t kd2 = wv2.shape[2], kh2 = wv2.shape[3], kw2 = wv2.shape[4];
            int64_t k32 = kd2 * kh2 * kw2;
            int64_t vox = xi2.vox();
            bool wx = gg.wants_grad(x), ww = gg.wants_grad(w), wo = gg.wants_grad(off);
            bool wb = b >= 0 && gg.wants_grad(b);
            T* gxp = wx ? gg.grad(x).ptr() : nullptr;
            T* gwp = ww ? gg.grad(w).ptr() : nullptr;
            T* gop = wo ? gg.grad(off).ptr() : nullptr;
            T* gbp = wb ? gg.grad(b).ptr() : nullptr;
            for (int64_t n = 0; n < xi2.B; ++n) {
                const T* offn = ov2.ptr() + n * (3 * k32) * vox;
                T* goffn = wo ? gop + n * (3 * k32) * vox : nullptr;
                for (int64_t c = 0; c < xi2.C; ++c) {
                    const T* xc = xv2.ptr() + (n * xi2.C + c) * vox;
                    T* gxc = wx ? gxp + (n * xi2.C + c) * vox : nullptr;
                    const T* wk = wv2.ptr() + c * k32;
                    T* gwk = ww ? gwp + c * k32 : nullptr;
                    const T* gc = go.ptr() + (n * xi2.C + c) * vox;
                    int64_t vi = 0;
                    for (int64_t z = 0; z < xi2.D; ++z)
                        for (int64_t y = 0; y < xi2.H; ++y)
                            for (int64_t xw = 0; xw < xi2.W; ++xw, ++vi) {
                                double gov = (double)gc[vi];
                                if (gov == 0.0) continue;
                                if (wb) gbp[c] += static_cast<T>(gov);
                                int64_t j = 0;
                                for (int64_t a = 0; a < kd2; ++a)
                                    for (int64_t bb = 0; bb < kh2; ++bb)
                                        for (int64_t cc = 0; cc < kw2; ++cc, ++j) {
                                            double pz = (double)(z - pad[0] + a * dilation[0]) +
                                                        (double)offn[(3 * j + 0) * vox + vi];
                                            double py = (double)(y - pad[1] + bb * dilation[1]) +
                                                        (double)offn[(3 * j + 1) * vox + vi];
                                            double px = (double)(xw - pad[2] + cc * dilation[2]) +
                                                        (double)offn[(3 * j + 2) * vox + vi];
                                            double val, dz, dy, dx;
                                            detail::trisample_grad(xc, xi2.D, xi2.H, xi2.W, pz,
                                                                   py, px, val, dz, dy, dx);
                                            double wj = (double)wk[j];
                                            if (ww) gwk[j] += static_cast<T>(gov * val);
                                            if (wo) {
                                                goffn[(3 * j + 0) * vox + vi] +=
                                                    static_cast<T>(gov * wj * dz);
                                                goffn[(3 * j + 1) * vox + vi] +=
                                                    static_cast<T>(gov * wj * dy);
                                                goffn[(3 * j + 2) * vox + vi] +=
                                                    static_cast<T>(gov * wj * dx);
                                            }
                                            if (wx)
                                                detail::trisplat(gxc, xi2.D, xi2.H, xi2.W, pz,
                                                                 py, px, gov * wj);
                                        }
                            }
                }
            }
        });
    return o;
}

}  // namespace lhunet::ops
