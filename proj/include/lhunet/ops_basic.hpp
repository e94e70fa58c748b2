#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "lhunet/costmodel.hpp"
#include "lhunet/graph.hpp"
#include "lhunet/tensor.hpp"

namespace lhunet::ops {

// ---------------------------------------------------------------------------
// raw kernels
// ---------------------------------------------------------------------------

// C (m x n) += op(A) * op(B); ta/tb flag a stored transpose of the operand.
template <class T>
void mm_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
            bool ta, bool tb) {
    if (!tb) {
        for (int64_t i = 0; i < m; ++i) {
            T* cr = c + i * n;
            for (int64_t l = 0; l < k; ++l) {
                T av = ta ? a[l * m + i] : a[i * k + l];
                const T* br = b + l * n;
                for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
            }
        }
    } else {
        for (int64_t i = 0; i < m; ++i) {
            T* cr = c + i * n;
            for (int64_t j = 0; j < n; ++j) {
                const T* br = b + j * k;
                T acc = 0;
                if (!ta) {
                    const T* ar = a + i * k;
                    for (int64_t l = 0; l < k; ++l) acc += ar[l] * br[l];
                } else {
                    for (int64_t l = 0; l < k; ++l) acc += a[l * m + i] * br[l];
                }
                cr[j] += acc;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
VarId add(Graph<T>& g, VarId a, VarId b) {
    const auto& av = g.val(a);
    const auto& bv = g.val(b);
    require(av.same_shape(bv), "add: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    Tensor<T> out(av.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] + bv.data[i];
    g.count_flops(cost::eltwise((double)out.numel()));
    VarId o = g.make(std::move(out), g.wants_grad(a) || g.wants_grad(b), "add");
    if (g.wants_grad(o))
        g.set_backward(o, [a, b, o](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            if (gg.wants_grad(a)) {
                auto& ga = gg.grad(a);
                for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
            }
            if (gg.wants_grad(b)) {
                auto& gb = gg.grad(b);
                for (size_t i = 0; i < go.data.size(); ++i) gb.data[i] += go.data[i];
            }
        });
    return o;
}

template <class T>
VarId sub(Graph<T>& g, VarId a, VarId b) {
    const auto& av = g.val(a);
    const auto& bv = g.val(b);
    require(av.same_shape(bv), "sub: shape mismatch");
    Tensor<T> out(av.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] - bv.data[i];
    g.count_flops(cost::eltwise((double)out.numel()));
    VarId o = g.make(std::move(out), g.wants_grad(a) || g.wants_grad(b), "sub");
    if (g.wants_grad(o))
        g.set_backward(o, [a, b, o](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            if (gg.wants_grad(a)) {
                auto& ga = gg.grad(a);
                for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
            }
            if (gg.wants_grad(b)) {
                auto& gb = gg.grad(b);
                for (size_t i = 0; i < go.data.size(); ++i) gb.data[i] -= go.data[i];
            }
        });
    return o;
}

template <class T>
VarId mul(Graph<T>& g, VarId a, VarId b) {
    const auto& av = g.val(a);
    const auto& bv = g.val(b);
    require(av.same_shape(bv), "mul: shape mismatch");
    Tensor<T> out(av.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] * bv.data[i];
    g.count_flops(cost::eltwise((double)out.numel()));
    VarId o = g.make(std::move(out), g.wants_grad(a) || g.wants_grad(b), "mul");
    if (g.wants_grad(o))
        g.set_backward(o, [a, b, o](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            if (gg.wants_grad(a)) {
                auto& ga = gg.grad(a);
                const auto& bv2 = gg.val(b);
                for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] * bv2.data[i];
            }
            if (gg.wants_grad(b)) {
                auto& gb = gg.grad(b);
                const auto& av2 = gg.val(a);
                for (size_t i = 0; i < go.data.size(); ++i) gb.data[i] += go.data[i] * av2.data[i];
            }
        });
    return o;
}

template <class T>
VarId scale(Graph<T>& g, VarId a, double s) {
    const auto& av = g.val(a);
    Tensor<T> out(av.shape);
    T ts = static_cast<T>(s);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] * ts;
    g.count_flops(cost::eltwise((double)out.numel()));
    VarId o = g.make(std::move(out), g.wants_grad(a), "scale");
    if (g.wants_grad(o))
        g.set_backward(o, [a, o, ts](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            auto& ga = gg.grad(a);
            for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] * ts;
        });
    return o;
}

// ---------------------------------------------------------------------------
// broadcast along one axis (per-channel scale / bias)
// ---------------------------------------------------------------------------

namespace detail {
inline void axis_strides(const Shape& s, int axis, int64_t& outer, int64_t& len, int64_t& inner) {
    outer = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    len = s[axis];
    inner = 1;
    for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

template <class T>
VarId mul_axis(Graph<T>& g, VarId x, VarId v, int axis) {
    const auto& xv = g.val(x);
    const auto& vv = g.val(v);
    require(vv.rank() == 1 && vv.shape[0] == xv.shape[axis], "mul_axis: vector length mismatch");
    int64_t outer, len, inner;
    detail::axis_strides(xv.shape, axis, outer, len, inner);
    Tensor<T> out(xv.shape);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t c = 0; c < len; ++c) {
            T s = vv.data[c];
            const T* xp = xv.ptr() + (o * len + c) * inner;
            T* op = out.ptr() + (o * len + c) * inner;
            for (int64_t i = 0; i < inner; ++i) op[i] = xp[i] * s;
        }
    g.count_flops(cost::eltwise((double)out.numel()));
    VarId id = g.make(std::move(out), g.wants_grad(x) || g.wants_grad(v), "mul_axis");
    if (g.wants_grad(id))
        g.set_backward(id, [x, v, id, outer, len, inner](Graph<T>& gg) {
            const auto& go = gg.grad(id);
            if (gg.wants_grad(x)) {
                auto& gx = gg.grad(x);
                const auto& vv2 = gg.val(v);
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t c = 0; c < len; ++c) {
                        T s = vv2.data[c];
                        const T* gp = go.ptr() + (o * len + c) * inner;
                        T* xp = gx.ptr() + (o * len + c) * inner;
                        for (int64_t i = 0; i < inner; ++i) xp[i] += gp[i] * s;
                    }
            }
            if (gg.wants_grad(v)) {
                auto& gv = gg.grad(v);
                const auto& xv2 = gg.val(x);
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t c = 0; c < len; ++c) {
                        const T* gp = go.ptr() + (o * len + c) * inner;
                        const T* xp = xv2.ptr() + (o * len + c) * inner;
                        T acc = 0;
                        for (int64_t i = 0; i < inner; ++i) acc += gp[i] * xp[i];
                        gv.data[c] += acc;
                    }
            }
        });
    return id;
}

template <class T>
VarId add_axis(Graph<T>& g, VarId x, VarId v, int axis) {
    const auto& xv = g.val(x);
    const auto& vv = g.val(v);
    require(vv.rank() == 1 && vv.shape[0] == xv.shape[axis], "add_axis: vector length mismatch");
    int64_t outer, len, inner;
    detail::axis_strides(xv.shape, axis, outer, len, inner);
    Tensor<T> out(xv.shape);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t c = 0; c < len; ++c) {
            T s = vv.data[c];
            const T* xp = xv.ptr() + (o * len + c) * inner;
            T* op = out.ptr() + (o * len + c) * inner;
            for (int64_t i = 0; i < inner; ++i) op[i] = xp[i] + s;
        }
    g.count_flops(cost::eltwise((double)out.numel()));
    VarId id = g.make(std::move(out), g.wants_grad(x) || g.wants_grad(v), "add_axis");
    if (g.wants_grad(id))
        g.set_backward(id, [x, v, id, outer, len, inner](Graph<T>& gg) {
            const auto& go = gg.grad(id);
            if (gg.wants_grad(x)) {
                auto& gx = gg.grad(x);
                for (size_t i = 0; i < go.data.size(); ++i) gx.data[i] += go.data[i];
            }
            if (gg.wants_grad(v)) {
                auto& gv = gg.grad(v);
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t c = 0; c < len; ++c) {
                        const T* gp = go.ptr() + (o * len + c) * inner;
                        T acc = 0;
                        for (int64_t i = 0; i < inner; ++i) acc += gp[i];
                        gv.data[c] += acc;
                    }
            }
        });
    return id;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <class T>
VarId leaky_relu(Graph<T>& g, VarId x, double slope = 0.01) {
    const auto& xv = g.val(x);
    Tensor<T> out(xv.shape);
    T s = static_cast<T>(slope);
    for (size_t i = 0; i < out.data.size(); ++i) {
        T v = xv.data[i];
        out.data[i] = v > T(0) ? v : v * s;
    }
    g.count_flops(cost::eltwise((double)out.numel()));
    VarId o = g.make(std::move(out), g.wants_grad(x), "leaky_relu");
    if (g.wants_grad(o))
        g.set_backward(o, [x, o, s](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            const auto& xv2 = gg.val(x);
            auto& gx = gg.grad(x);
            for (size_t i = 0; i < go.data.size(); ++i)
                gx.data[i] += go.data[i] * (xv2.data[i] > T(0) ? T(1) : s);
        });
    return o;
}

template <class T>
VarId gelu(Graph<T>& g, VarId x) {
    const auto& xv = g.val(x);
    Tensor<T> out(xv.shape);
    const double inv_sqrt2 = 0.70710678118654752440;
    for (size_t i = 0; i < out.data.size(); ++i) {
        double v = (double)xv.data[i];
        out.data[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
    }
    g.count_flops(cost::eltwise((double)out.numel()));
    VarId o = g.make(std::move(out), g.wants_grad(x), "gelu");
    if (g.wants_grad(o))
        g.set_backward(o, [x, o](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            const auto& xv2 = gg.val(x);
            auto& gx = gg.grad(x);
            const double inv_sqrt2 = 0.70710678118654752440;
            const double inv_sqrt2pi = 0.39894228040143267794;
            for (size_t i = 0; i < go.data.size(); ++i) {
                double v = (double)xv2.data[i];
                double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                gx.data[i] += go.data[i] * static_cast<T>(cdf + v * pdf);
            }
        });
    return o;
}

template <class T>
VarId sigmoid(Graph<T>& g, VarId x) {
    const auto& xv = g.val(x);
    Tensor<T> out(xv.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = static_cast<T>(1.0 / (1.0 + std::exp(-(double)xv.data[i])));
    g.count_flops(cost::eltwise((double)out.numel()));
    VarId o = g.make(std::move(out), g.wants_grad(x), "sigmoid");
    if (g.wants_grad(o))
        g.set_backward(o, [x, o](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            const auto& ov = gg.val(o);
            auto& gx = gg.grad(x);
            for (size_t i = 0; i < go.data.size(); ++i) {
                T s = ov.data[i];
                gx.data[i] += go.data[i] * s * (T(1) - s);
            }
        });
    return o;
}

// ---------------------------------------------------------------------------
// shape ops (free)
// ---------------------------------------------------------------------------

template <class T>
VarId reshape(Graph<T>& g, VarId x, const Shape& shape) {
    const auto& xv = g.val(x);
    require(numel_of(shape) == xv.numel(), "reshape: numel mismatch");
    Tensor<T> out;
    out.shape = shape;
    out.data = xv.data;
    VarId o = g.make(std::move(out), g.wants_grad(x), "reshape");
    if (g.wants_grad(o))
        g.set_backward(o, [x, o](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            auto& gx = gg.grad(x);
            for (size_t i = 0; i < go.data.size(); ++i) gx.data[i] += go.data[i];
        });
    return o;
}

namespace detail {
template <class T>
void permute_copy(const Tensor<T>& in, Tensor<T>& out, const std::vector<int>& axes) {
    int r = (int)in.rank();
    std::vector<int64_t> istr(r, 1);
    for (int i = r - 2; i >= 0; --i) istr[i] = istr[i + 1] * in.shape[i + 1];
    std::vector<int64_t> map(r);  // stride in input per output axis
    for (int i = 0; i < r; ++i) map[i] = istr[axes[i]];
    std::vector<int64_t> coord(r, 0);
    int64_t n = out.numel();
    int64_t iidx = 0;
    for (int64_t oidx = 0; oidx < n; ++oidx) {
        out.data[oidx] = in.data[iidx];
        for (int d = r - 1; d >= 0; --d) {
            coord[d]++;
            iidx += map[d];
            if (coord[d] < out.shape[d]) break;
            iidx -= map[d] * out.shape[d];
            coord[d] = 0;
        }
    }
}
}  // namespace detail

template <class T>
VarId permute(Graph<T>& g, VarId x, const std::vector<int>& axes) {
    const auto& xv = g.val(x);
    require((int)axes.size() == xv.rank(), "permute: rank mismatch");
    Shape os(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) os[i] = xv.shape[axes[i]];
    Tensor<T> out(os);
    detail::permute_copy(xv, out, axes);
    VarId o = g.make(std::move(out), g.wants_grad(x), "permute");
    if (g.wants_grad(o))
        g.set_backward(o, [x, o, axes](Graph<T>& gg) {
            std::vector<int> inv(axes.size());
            for (size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = (int)i;
            const auto& go = gg.grad(o);
            Tensor<T> tmp(gg.val(x).shape);
            detail::permute_copy(go, tmp, inv);
            auto& gx = gg.grad(x);
            for (size_t i = 0; i < tmp.data.size(); ++i) gx.data[i] += tmp.data[i];
        });
    return o;
}

template <class T>
VarId concat(Graph<T>& g, const std::vector<VarId>& parts, int axis) {
    require(!parts.empty(), "concat: empty");
    const auto& first = g.val(parts[0]);
    Shape os = first.shape;
    int64_t total = 0;
    for (VarId p : parts) {
        const auto& pv = g.val(p);
        require(pv.rank() == first.rank(), "concat: rank mismatch");
        for (size_t d = 0; d < os.size(); ++d)
            if ((int)d != axis)
                require(pv.shape[d] == first.shape[d], "concat: shape mismatch off-axis");
        total += pv.shape[axis];
    }
    os[axis] = total;
    int64_t outer, len, inner;
    detail::axis_strides(os, axis, outer, len, inner);
    Tensor<T> out(os);
    int64_t off = 0;
    for (VarId p : parts) {
        const auto& pv = g.val(p);
        int64_t plen = pv.shape[axis];
        for (int64_t o = 0; o < outer; ++o) {
            const T* src = pv.ptr() + o * plen * inner;
            T* dst = out.ptr() + (o * len + off) * inner;
            for (int64_t i = 0; i < plen * inner; ++i) dst[i] = src[i];
        }
        off += plen;
    }
    bool rg = false;
    for (VarId p : parts) rg = rg || g.wants_grad(p);
    VarId o = g.make(std::move(out), rg, "concat");
    if (g.wants_grad(o))
        g.set_backward(o, [parts, o, axis, outer, len, inner](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            int64_t off2 = 0;
            for (VarId p : parts) {
                int64_t plen = gg.val(p).shape[axis];
                if (gg.wants_grad(p)) {
                    auto& gp = gg.grad(p);
                    for (int64_t o2 = 0; o2 < outer; ++o2) {
                        const T* src = go.ptr() + (o2 * len + off2) * inner;
                        T* dst = gp.ptr() + o2 * plen * inner;
                        for (int64_t i = 0; i < plen * inner; ++i) dst[i] += src[i];
                    }
                }
                off2 += plen;
            }
        });
    return o;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// x (..., in) * w (in, out) + b (out); pass b = -1 to skip bias.
template <class T>
VarId linear(Graph<T>& g, VarId x, VarId w, VarId b = -1) {
    const auto& xv = g.val(x);
    const auto& wv = g.val(w);
    require(wv.rank() == 2, "linear: weight must be rank 2");
    int64_t in = wv.shape[0], out_dim = wv.shape[1];
    require(xv.shape.back() == in, "linear: input dim mismatch");
    int64_t rows = xv.numel() / in;
    Shape os = xv.shape;
    os.back() = out_dim;
    Tensor<T> out = Tensor<T>::zeros(os);
    mm_acc(xv.ptr(), wv.ptr(), out.ptr(), rows, in, out_dim, false, false);
    bool bias = b >= 0;
    if (bias) {
        const auto& bv = g.val(b);
        require(bv.rank() == 1 && bv.shape[0] == out_dim, "linear: bias shape");
        for (int64_t r = 0; r < rows; ++r) {
            T* orow = out.ptr() + r * out_dim;
            for (int64_t j = 0; j < out_dim; ++j) orow[j] += bv.data[j];
        }
    }
    g.count_flops(cost::linear((double)rows, (double)in, (double)out_dim, bias));
    bool rg = g.wants_grad(x) || g.wants_grad(w) || (bias && g.wants_grad(b));
    VarId o = g.make(std::move(out), rg, "linear");
    if (g.wants_grad(o))
        g.set_backward(o, [x, w, b, o, rows, in, out_dim](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            if (gg.wants_grad(x)) {
                auto& gx = gg.grad(x);
                mm_acc(go.ptr(), gg.val(w).ptr(), gx.ptr(), rows, out_dim, in, false, true);
            }
            if (gg.wants_grad(w)) {
                auto& gw = gg.grad(w);
                mm_acc(gg.val(x).ptr(), go.ptr(), gw.ptr(), in, rows, out_dim, true, false);
            }
            if (b >= 0 && gg.wants_grad(b)) {
                auto& gb = gg.grad(b);
                for (int64_t r = 0; r < rows; ++r) {
                    const T* grow = go.ptr() + r * out_dim;
                    for (int64_t j = 0; j < out_dim; ++j) gb.data[j] += grow[j];
                }
            }
        });
    return o;
}

// batched matmul on rank-3 tensors: (bt, m, k) x (bt, k, n) with stored
// transposes selected by ta/tb.
template <class T>
VarId matmul3(Graph<T>& g, VarId a, VarId b, bool ta = false, bool tb = false) {
    const auto& av = g.val(a);
    const auto& bv = g.val(b);
    require(av.rank() == 3 && bv.rank() == 3, "matmul3: rank 3 required");
    require(av.shape[0] == bv.shape[0], "matmul3: batch mismatch");
    int64_t bt = av.shape[0];
    int64_t m = ta ? av.shape[2] : av.shape[1];
    int64_t k = ta ? av.shape[1] : av.shape[2];
    int64_t kb = tb ? bv.shape[2] : bv.shape[1];
    int64_t n = tb ? bv.shape[1] : bv.shape[2];
    require(k == kb, "matmul3: inner dim mismatch");
    Tensor<T> out = Tensor<T>::zeros({bt, m, n});
    for (int64_t t = 0; t < bt; ++t)
        mm_acc(av.ptr() + t * m * k, bv.ptr() + t * k * n, out.ptr() + t * m * n, m, k, n, ta, tb);
    g.count_flops(cost::matmul((double)bt, (double)m, (double)k, (double)n));
    VarId o = g.make(std::move(out), g.wants_grad(a) || g.wants_grad(b), "matmul3");
    if (g.wants_grad(o))
        g.set_backward(o, [a, b, o, bt, m, k, n, ta, tb](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            if (gg.wants_grad(a)) {
                auto& ga = gg.grad(a);
                const auto& bv2 = gg.val(b);
                for (int64_t t = 0; t < bt; ++t) {
                    const T* gop = go.ptr() + t * m * n;
                    const T* bp = bv2.ptr() + t * k * n;
                    T* gap = ga.ptr() + t * m * k;
                    if (!ta)
                        mm_acc(gop, bp, gap, m, n, k, false, !tb);
                    else
                        mm_acc(bp, gop, gap, k, n, m, tb, true);
                }
            }
            if (gg.wants_grad(b)) {
                auto& gb = gg.grad(b);
                const auto& av2 = gg.val(a);
                for (int64_t t = 0; t < bt; ++t) {
                    const T* gop = go.ptr() + t * m * n;
                    const T* ap = av2.ptr() + t * m * k;
                    T* gbp = gb.ptr() + t * k * n;
                    if (!tb)
                        mm_acc(ap, gop, gbp, k, m, n, !ta, false);
                    else
                        mm_acc(gop, ap, gbp, n, m, k, true, ta);
                }
            }
        });
    return o;
}

// ---------------------------------------------------------------------------
// normalizations over the last dim
// ---------------------------------------------------------------------------

template <class T>
VarId softmax_lastdim(Graph<T>& g, VarId x) {
    const auto& xv = g.val(x);
    int64_t d = xv.shape.back();
    int64_t rows = xv.numel() / d;
    Tensor<T> out(xv.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = xv.ptr() + r * d;
        T* orow = out.ptr() + r * d;
        T mx = xr[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
        double sum = 0;
        for (int64_t j = 0; j < d; ++j) {
            double e = std::exp((double)(xr[j] - mx));
            orow[j] = static_cast<T>(e);
            sum += e;
        }
        T inv = static_cast<T>(1.0 / sum);
        for (int64_t j = 0; j < d; ++j) orow[j] *= inv;
    }
    g.count_flops(cost::eltwise((double)out.numel()));
    VarId o = g.make(std::move(out), g.wants_grad(x), "softmax");
    if (g.wants_grad(o))
        g.set_backward(o, [x, o, rows, d](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            const auto& ov = gg.val(o);
            auto& gx = gg.grad(x);
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = go.ptr() + r * d;
                const T* sr = ov.ptr() + r * d;
                T* xr = gx.ptr() + r * d;
                T dot = 0;
                for (int64_t j = 0; j < d; ++j) dot += gr[j] * sr[j];
                for (int64_t j = 0; j < d; ++j) xr[j] += sr[j] * (gr[j] - dot);
            }
        });
    return o;
}

template <class T>
VarId log_softmax_lastdim(Graph<T>& g, VarId x) {
    const auto& xv = g.val(x);
    int64_t d = xv.shape.back();
    int64_t rows = xv.numel() / d;
    Tensor<T> out(xv.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = xv.ptr() + r * d;
        T* orow = out.ptr() + r * d;
        T mx = xr[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
        double sum = 0;
        for (int64_t j = 0; j < d; ++j) sum += std::exp((double)(xr[j] - mx));
        T lse = mx + static_cast<T>(std::log(sum));
        for (int64_t j = 0; j < d; ++j) orow[j] = xr[j] - lse;
    }
    g.count_flops(cost::eltwise((double)out.numel()));
    VarId o = g.make(std::move(out), g.wants_grad(x), "log_softmax");
    if (g.wants_grad(o))
        g.set_backward(o, [x, o, rows, d](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            const auto& ov = gg.val(o);
            auto& gx = gg.grad(x);
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = go.ptr() + r * d;
                const T* lr = ov.ptr() + r * d;
                T* xr = gx.ptr() + r * d;
                T gsum = 0;
                for (int64_t j = 0; j < d; ++j) gsum += gr[j];
                for (int64_t j = 0; j < d; ++j)
                    xr[j] += gr[j] - static_cast<T>(std::exp((double)lr[j])) * gsum;
            }
        });
    return o;
}

template <class T>
VarId layernorm_lastdim(Graph<T>& g, VarId x, VarId w, VarId b, double eps = 1e-5) {
    const auto& xv = g.val(x);
    int64_t d = xv.shape.back();
    int64_t rows = xv.numel() / d;
    const auto& wv = g.val(w);
    const auto& bv = g.val(b);
    require(wv.numel() == d && bv.numel() == d, "layernorm: affine shape");
    Tensor<T> out(xv.shape);
    Tensor<T> xhat(xv.shape);
    std::vector<T> rstd(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = xv.ptr() + r * d;
        double mean = 0;
        for (int64_t j = 0; j < d; ++j) mean += (double)xr[j];
        mean /= (double)d;
        double var = 0;
        for (int64_t j = 0; j < d; ++j) {
            double c = (double)xr[j] - mean;
            var += c * c;
        }
        var /= (double)d;
        double rs = 1.0 / std::sqrt(var + eps);
        rstd[r] = static_cast<T>(rs);
        T* hr = xhat.ptr() + r * d;
        T* orow = out.ptr() + r * d;
        for (int64_t j = 0; j < d; ++j) {
            T h = static_cast<T>(((double)xr[j] - mean) * rs);
            hr[j] = h;
            orow[j] = h * wv.data[j] + bv.data[j];
        }
    }
    g.count_flops(cost::eltwise((double)out.numel()));
    bool rg = g.wants_grad(x) || g.wants_grad(w) || g.wants_grad(b);
    VarId o = g.make(std::move(out), rg, "layernorm");
    if (g.wants_grad(o)) {
        auto xh = std::make_shared<Tensor<T>>(std::move(xhat));
        auto rs = std::make_shared<std::vector<T>>(std::move(rstd));
        g.set_backward(o, [x, w, b, o, rows, d, xh, rs](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            const auto& wv2 = gg.val(w);
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = go.ptr() + r * d;
                const T* hr = xh->ptr() + r * d;
                if (gg.wants_grad(w)) {
                    auto& gw = gg.grad(w);
                    for (int64_t j = 0; j < d; ++j) gw.data[j] += gr[j] * hr[j];
                }
                if (gg.wants_grad(b)) {
                    auto& gb = gg.grad(b);
                    for (int64_t j = 0; j < d; ++j) gb.data[j] += gr[j];
                }
                if (gg.wants_grad(x)) {
                    auto& gx = gg.grad(x);
                    T* xr = gx.ptr() + r * d;
                    double m1 = 0, m2 = 0;
                    for (int64_t j = 0; j < d; ++j) {
                        double gh = (double)gr[j] * (double)wv2.data[j];
                        m1 += gh;
                        m2 += gh * (double)hr[j];
                    }
                    m1 /= (double)d;
                    m2 /= (double)d;
                    double rsd = (double)(*rs)[r];
                    for (int64_t j = 0; j < d; ++j) {
                        double gh = (double)gr[j] * (double)wv2.data[j];
                        xr[j] += static_cast<T>(rsd * (gh - m1 - (double)hr[j] * m2));
                    }
                }
            }
        });
    }
    return o;
}

template <class T>
VarId l2_normalize_lastdim(Graph<T>& g, VarId x, double eps = 1e-12) {
    const auto& xv = g.val(x);
    int64_t d = xv.shape.back();
    int64_t rows = xv.numel() / d;
    Tensor<T> out(xv.shape);
    std::vector<T> rnorm(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = xv.ptr() + r * d;
        double s = 0;
        for (int64_t j = 0; j < d; ++j) s += (double)xr[j] * (double)xr[j];
        double rn = 1.0 / std::sqrt(s + eps);
        rnorm[r] = static_cast<T>(rn);
        T* orow = out.ptr() + r * d;
        for (int64_t j = 0; j < d; ++j) orow[j] = static_cast<T>((double)xr[j] * rn);
    }
    g.count_flops(cost::eltwise((double)out.numel()));
    VarId o = g.make(std::move(out), g.wants_grad(x), "l2norm");
    if (g.wants_grad(o)) {
        auto rn = std::make_shared<std::vector<T>>(std::move(rnorm));
        g.set_backward(o, [x, o, rows, d, rn](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            const auto& xv2 = gg.val(x);
            auto& gx = gg.grad(x);
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = go.ptr() + r * d;
                const T* xr = xv2.ptr() + r * d;
                T* gxr = gx.ptr() + r * d;
                double rnd = (double)(*rn)[r];
                double dot = 0;
                for (int64_t j = 0; j < d; ++j) dot += (double)gr[j] * (double)xr[j];
                double r3 = rnd * rnd * rnd;
                for (int64_t j = 0; j < d; ++j)
                    gxr[j] += static_cast<T>(rnd * (double)gr[j] - r3 * (double)xr[j] * dot);
            }
        });
    }
    return o;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
VarId sum_all(Graph<T>& g, VarId x) {
    const auto& xv = g.val(x);
    double s = 0;
    for (T v : xv.data) s += (double)v;
    g.count_flops(cost::eltwise((double)xv.numel()));
    VarId o = g.make(Tensor<T>::scalar(static_cast<T>(s)), g.wants_grad(x), "sum");
    if (g.wants_grad(o))
        g.set_backward(o, [x, o](Graph<T>& gg) {
            T go = gg.grad(o).data[0];
            auto& gx = gg.grad(x);
            for (auto& v : gx.data) v += go;
        });
    return o;
}

// Per-channel PReLU: out = x >= 0 ? x : a_c * x, slopes learnable along `axis`.
template <class T>
VarId prelu_axis(Graph<T>& g, VarId x, VarId a, int axis) {
    const auto& xv = g.val(x);
    const auto& av = g.val(a);
    require(av.rank() == 1 && av.shape[0] == xv.shape[axis], "prelu: slope length mismatch");
    int64_t outer, len, inner;
    detail::axis_strides(xv.shape, axis, outer, len, inner);
    Tensor<T> out(xv.shape);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t c = 0; c < len; ++c) {
            T s = av.data[c];
            const T* xp = xv.ptr() + (o * len + c) * inner;
            T* op = out.ptr() + (o * len + c) * inner;
            for (int64_t i = 0; i < inner; ++i) op[i] = xp[i] >= 0 ? xp[i] : s * xp[i];
        }
    g.count_flops(cost::eltwise((double)out.numel()));
    VarId id = g.make(std::move(out), g.wants_grad(x) || g.wants_grad(a), "prelu");
    if (g.wants_grad(id))
        g.set_backward(id, [x, a, id, outer, len, inner](Graph<T>& gg) {
            const auto& go = gg.grad(id);
            const auto& xv2 = gg.val(x);
            const auto& av2 = gg.val(a);
            if (gg.wants_grad(x)) {
                auto& gx = gg.grad(x);
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t c = 0; c < len; ++c) {
                        T s = av2.data[c];
                        int64_t base = (o * len + c) * inner;
                        for (int64_t i = 0; i < inner; ++i)
                            gx.data[base + i] +=
                                go.data[base + i] * (xv2.data[base + i] >= 0 ? T(1) : s);
                    }
            }
            if (gg.wants_grad(a)) {
                auto& ga = gg.grad(a);
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t c = 0; c < len; ++c) {
                        int64_t base = (o * len + c) * inner;
                        T acc = 0;
                        for (int64_t i = 0; i < inner; ++i)
                            if (xv2.data[base + i] < 0) acc += go.data[base + i] * xv2.data[base + i];
                        ga.data[c] += acc;
                    }
            }
        });
    return id;
}

template <class T>
VarId div(Graph<T>& g, VarId a, VarId b) {
    const auto& av = g.val(a);
    const auto& bv = g.val(b);
    require(av.same_shape(bv), "div: shape mismatch");
    Tensor<T> out(av.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] / bv.data[i];
    g.count_flops(cost::eltwise((double)out.numel()));
    VarId o = g.make(std::move(out), g.wants_grad(a) || g.wants_grad(b), "div");
    if (g.wants_grad(o))
        g.set_backward(o, [a, b, o](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            const auto& av2 = gg.val(a);
            const auto& bv2 = gg.val(b);
            if (gg.wants_grad(a)) {
                auto& ga = gg.grad(a);
                for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] / bv2.data[i];
            }
            if (gg.wants_grad(b)) {
                auto& gb = gg.grad(b);
                for (size_t i = 0; i < go.data.size(); ++i)
                    gb.data[i] -= go.data[i] * av2.data[i] / (bv2.data[i] * bv2.data[i]);
            }
        });
    return o;
}

// x * s where s is a learnable single-element tensor.
template <class T>
VarId mul_scalar_var(Graph<T>& g, VarId x, VarId s) {
    const auto& xv = g.val(x);
    const auto& sv = g.val(s);
    require(sv.numel() == 1, "mul_scalar_var: scalar expected");
    T sc = sv.data[0];
    Tensor<T> out(xv.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = xv.data[i] * sc;
    g.count_flops(cost::eltwise((double)out.numel()));
    VarId o = g.make(std::move(out), g.wants_grad(x) || g.wants_grad(s), "mul_scalar");
    if (g.wants_grad(o))
        g.set_backward(o, [x, s, o](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            if (gg.wants_grad(x)) {
                T sc2 = gg.val(s).data[0];
                auto& gx = gg.grad(x);
                for (size_t i = 0; i < go.data.size(); ++i) gx.data[i] += go.data[i] * sc2;
            }
            if (gg.wants_grad(s)) {
                const auto& xv2 = gg.val(x);
                double acc = 0;
                for (size_t i = 0; i < go.data.size(); ++i)
                    acc += (double)go.data[i] * (double)xv2.data[i];
                gg.grad(s).data[0] += static_cast<T>(acc);
            }
        });
    return o;
}

template <class T>
VarId add_const(Graph<T>& g, VarId x, double c) {
    const auto& xv = g.val(x);
    Tensor<T> out(xv.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = xv.data[i] + static_cast<T>(c);
    g.count_flops(cost::eltwise((double)out.numel()));
    VarId o = g.make(std::move(out), g.wants_grad(x), "add_const");
    if (g.wants_grad(o))
        g.set_backward(o, [x, o](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            auto& gx = gg.grad(x);
            for (size_t i = 0; i < go.data.size(); ++i) gx.data[i] += go.data[i];
        });
    return o;
}

// (N, K) -> (K), summing over rows.
template <class T>
VarId sum_cols(Graph<T>& g, VarId x) {
    const auto& xv = g.val(x);
    require(xv.rank() == 2, "sum_cols: rank-2 input expected");
    int64_t n = xv.shape[0], k = xv.shape[1];
    Tensor<T> out(Shape{k});
    std::vector<double> acc(k, 0.0);
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < k; ++c) acc[c] += (double)xv.data[r * k + c];
    for (int64_t c = 0; c < k; ++c) out.data[c] = static_cast<T>(acc[c]);
    g.count_flops(cost::eltwise((double)xv.numel()));
    VarId o = g.make(std::move(out), g.wants_grad(x), "sum_cols");
    if (g.wants_grad(o))
        g.set_backward(o, [x, o, n, k](Graph<T>& gg) {
            const auto& go = gg.grad(o);
            auto& gx = gg.grad(x);
            for (int64_t r = 0; r < n; ++r)
                for (int64_t c = 0; c < k; ++c) gx.data[r * k + c] += go.data[c];
        });
    return o;
}

template <class T>
VarId mean_all(Graph<T>& g, VarId x) {
    const auto& xv = g.val(x);
    int64_t n = xv.numel();
    double s = 0;
    for (T v : xv.data) s += (double)v;
    g.count_flops(cost::eltwise((double)n));
    VarId o = g.make(Tensor<T>::scalar(static_cast<T>(s / (double)n)), g.wants_grad(x), "mean");
    if (g.wants_grad(o))
        g.set_backward(o, [x, o, n](Graph<T>& gg) {
            T go = gg.grad(o).data[0] / static_cast<T>(n);
            auto& gx = gg.grad(x);
            for (auto& v : gx.data) v += go;
        });
    return o;
}

}  // namespace lhunet::ops
