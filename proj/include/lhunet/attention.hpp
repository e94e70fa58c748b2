#pragma once

#include <cmath>
#include <string>

#include "lhunet/config.hpp"
#include "lhunet/ops_basic.hpp"
#include "lhunet/ops_conv.hpp"
#include "lhunet/params.hpp"

namespace lhunet {

// --------------------------------------------------------------------------
// ViT-style attentions: operate on token tensors (B, n, C).
// --------------------------------------------------------------------------

// Multi-head attention with learned projections of K and V along the token
// axis from n down to p tokens, L2-normalized queries and a per-head
// learnable temperature. Cost is linear in n.
template <class T>
struct SpatialAttention {
    int dim = 0, heads = 1;
    int64_t n = 0, p = 0;
    VarId ln_in_w, ln_in_b;
    VarId wq, bq, wk, bk, wv, bv;
    VarId kproj_w, kproj_b, vproj_w, vproj_b;  // (n, p) weights over the token axis
    VarId alpha;
    VarId ln_out_w, ln_out_b;
    VarId wo, bo;

    static SpatialAttention build(ParamStore<T>& ps, Rng& rng, const std::string& name, int dim,
                                  int64_t n, int64_t p, int heads) {
        require(dim % heads == 0, name + ": width not divisible by heads");
        require(p >= 1 && p < n, name + ": token projection needs 1 <= p < n");
        SpatialAttention m;
        m.dim = dim;
        m.heads = heads;
        m.n = n;
        m.p = p;
        auto lin = [&](const std::string& nm, VarId& w, VarId& b, int64_t in, int64_t out) {
            w = ps.add_param(name + "." + nm + ".w", init::he_normal<T>(rng, {in, out}, in));
            b = ps.add_param(name + "." + nm + ".b", init::constant<T>({out}, 0.0));
        };
        m.ln_in_w = ps.add_param(name + ".ln_in.w", init::constant<T>({dim}, 1.0));
        m.ln_in_b = ps.add_param(name + ".ln_in.b", init::constant<T>({dim}, 0.0));
        lin("q", m.wq, m.bq, dim, dim);
        lin("k", m.wk, m.bk, dim, dim);
        lin("v", m.wv, m.bv, dim, dim);
        lin("kproj", m.kproj_w, m.kproj_b, n, p);
        lin("vproj", m.vproj_w, m.vproj_b, n, p);
        m.alpha = ps.add_param(name + ".alpha", init::constant<T>({heads}, 1.0));
        m.ln_out_w = ps.add_param(name + ".ln_out.w", init::constant<T>({dim}, 1.0));
        m.ln_out_b = ps.add_param(name + ".ln_out.b", init::constant<T>({dim}, 0.0));
        lin("out", m.wo, m.bo, dim, dim);
        return m;
    }

    VarId fwd(Graph<T>& g, VarId tokens) const {
        const auto& tv = g.val(tokens);
        require(tv.rank() == 3 && tv.shape[1] == n && tv.shape[2] == dim,
                "spatial attention: token shape mismatch");
        int64_t B = tv.shape[0], d = dim / heads;
        VarId xn = ops::layernorm_lastdim(g, tokens, ln_in_w, ln_in_b);
        VarId q = ops::linear(g, xn, wq, bq);
        VarId k = ops::linear(g, xn, wk, bk);
        VarId v = ops::linear(g, xn, wv, bv);
        auto shrink = [&](VarId t, VarId w, VarId b) {
            VarId tt = ops::permute(g, t, {0, 2, 1});      // (B, C, n)
            tt = ops::linear(g, tt, w, b);                 // (B, C, p)
            return ops::permute(g, tt, {0, 2, 1});         // (B, p, C)
        };
        VarId kp = shrink(k, kproj_w, kproj_b);
        VarId vp = shrink(v, vproj_w, vproj_b);
        auto to_heads = [&](VarId t, int64_t len) {
            VarId tt = ops::reshape(g, t, {B, len, (int64_t)heads, d});
            tt = ops::permute(g, tt, {0, 2, 1, 3});
            return ops::reshape(g, tt, {B * heads, len, d});
        };
        VarId qh = to_heads(q, n);
        VarId kh = to_heads(kp, p);
        VarId vh = to_heads(vp, p);
        qh = ops::l2_normalize_lastdim(g, qh);
        VarId scores = ops::matmul3(g, qh, kh, false, true);      // (B*h, n, p)
        scores = ops::reshape(g, scores, {B, (int64_t)heads, n, p});
        scores = ops::mul_axis(g, scores, alpha, 1);
        scores = ops::scale(g, scores, 1.0 / std::sqrt((double)d));
        scores = ops::reshape(g, scores, {B * heads, n, p});
        VarId attn = ops::softmax_lastdim(g, scores);
        VarId out = ops::matmul3(g, attn, vh);                    // (B*h, n, d)
        out = ops::reshape(g, out, {B, (int64_t)heads, n, d});
        out = ops::permute(g, out, {0, 2, 1, 3});
        out = ops::reshape(g, out, {B, n, dim});
        out = ops::layernorm_lastdim(g, out, ln_out_w, ln_out_b);
        return ops::linear(g, out, wo, bo);
    }
};

// Transposed attention over channels: the C x C map V * softmax(K^T Q / sqrt(d))
// keeps cost linear in token count. Single head, d = C.
template <class T>
struct ChannelAttention {
    int dim = 0;
    VarId ln_in_w, ln_in_b;
    VarId wq, bq, wk, bk, wv, bv;
    VarId ln_out_w, ln_out_b;
    VarId wo, bo;

    static ChannelAttention build(ParamStore<T>& ps, Rng& rng, const std::string& name, int dim) {
        ChannelAttention m;
        m.dim = dim;
        auto lin = [&](const std::string& nm, VarId& w, VarId& b) {
            w = ps.add_param(name + "." + nm + ".w", init::he_normal<T>(rng, {dim, dim}, dim));
            b = ps.add_param(name + "." + nm + ".b", init::constant<T>({dim}, 0.0));
        };
        m.ln_in_w = ps.add_param(name + ".ln_in.w", init::constant<T>({dim}, 1.0));
        m.ln_in_b = ps.add_param(name + ".ln_in.b", init::constant<T>({dim}, 0.0));
        lin("q", m.wq, m.bq);
        lin("k", m.wk, m.bk);
        lin("v", m.wv, m.bv);
        m.ln_out_w = ps.add_param(name + ".ln_out.w", init::constant<T>({dim}, 1.0));
        m.ln_out_b = ps.add_param(name + ".ln_out.b", init::constant<T>({dim}, 0.0));
        lin("out", m.wo, m.bo);
        return m;
    }

    VarId fwd(Graph<T>& g, VarId tokens) const {
        const auto& tv = g.val(tokens);
        require(tv.rank() == 3 && tv.shape[2] == dim, "channel attention: token shape mismatch");
        VarId xn = ops::layernorm_lastdim(g, tokens, ln_in_w, ln_in_b);
        VarId q = ops::linear(g, xn, wq, bq);
        VarId k = ops::linear(g, xn, wk, bk);
        VarId v = ops::linear(g, xn, wv, bv);
        VarId scores = ops::matmul3(g, k, q, true, false);   // (B, C, C) = K^T Q
        scores = ops::scale(g, scores, 1.0 / std::sqrt((double)dim));
        VarId attn = ops::softmax_lastdim(g, scores);        // normalized over summed channel
        VarId out = ops::matmul3(g, v, attn, false, true);   // (B, n, C)
        out = ops::layernorm_lastdim(g, out, ln_out_w, ln_out_b);
        return ops::linear(g, out, wo, bo);
    }
};

// --------------------------------------------------------------------------
// CNN attentions: operate on feature maps (B, C, D, H, W).
// --------------------------------------------------------------------------

// Large-kernel attention: GELU-activated pointwise embedding, a 5^3
// depthwise conv, a 7^3 depthwise conv at dilation 3, a pointwise conv, and
// a multiplicative gate over the embedding.
template <class T>
struct LkaAttention {
    bool deform = false;
    int dim = 0;
    Axis3 kernels = {5, 7, 3};
    int deform_k = 3;
    VarId pw_in_w, pw_in_b;
    VarId dw_w, dw_b;
    VarId dwd_w, dwd_b;
    VarId ddw_w = -1, ddw_b = -1;   // deformable stage
    VarId off_w = -1, off_b = -1;   // offset predictor, zero-initialized
    VarId pw_out_w, pw_out_b;

    static LkaAttention build(ParamStore<T>& ps, Rng& rng, const std::string& name, int dim,
                              bool deform, Axis3 kernels, int deform_k) {
        LkaAttention m;
        m.deform = deform;
        m.dim = dim;
        m.kernels = kernels;
        m.deform_k = deform_k;
        int64_t C = dim, k1 = kernels[0], k2 = kernels[1];
        m.pw_in_w = ps.add_param(name + ".pw_in.w", init::he_normal<T>(rng, {C, C, 1, 1, 1}, C));
        m.pw_in_b = ps.add_param(name + ".pw_in.b", init::constant<T>({C}, 0.0));
        m.dw_w = ps.add_param(name + ".dw.w",
                              init::he_normal<T>(rng, {C, 1, k1, k1, k1}, k1 * k1 * k1));
        m.dw_b = ps.add_param(name + ".dw.b", init::constant<T>({C}, 0.0));
        m.dwd_w = ps.add_param(name + ".dwd.w",
                               init::he_normal<T>(rng, {C, 1, k2, k2, k2}, k2 * k2 * k2));
        m.dwd_b = ps.add_param(name + ".dwd.b", init::constant<T>({C}, 0.0));
        if (deform) {
            int64_t kd = deform_k, taps = kd * kd * kd;
            m.ddw_w = ps.add_param(name + ".ddw.w",
                                   init::he_normal<T>(rng, {C, 1, kd, kd, kd}, taps));
            m.ddw_b = ps.add_param(name + ".ddw.b", init::constant<T>({C}, 0.0));
            // zero init: the deformable stage starts as a plain depthwise conv
            m.off_w = ps.add_param(name + ".offset.w",
                                   init::constant<T>({3 * taps, C, kd, kd, kd}, 0.0));
            m.off_b = ps.add_param(name + ".offset.b", init::constant<T>({3 * taps}, 0.0));
        }
        m.pw_out_w = ps.add_param(name + ".pw_out.w", init::he_normal<T>(rng, {C, C, 1, 1, 1}, C));
        m.pw_out_b = ps.add_param(name + ".pw_out.b", init::constant<T>({C}, 0.0));
        return m;
    }

    VarId fwd(Graph<T>& g, VarId x) const {
        int dil = kernels[2];
        int pad_dw = kernels[0] / 2;
        int pad_dwd = (kernels[1] / 2) * dil;
        VarId xh = ops::conv3d(g, x, pw_in_w, pw_in_b, Triple{1, 1, 1}, Triple{0, 0, 0});
        xh = ops::gelu(g, xh);
        VarId y = ops::conv3d(g, xh, dw_w, dw_b, Triple{1, 1, 1},
                              Triple{pad_dw, pad_dw, pad_dw}, Triple{1, 1, 1}, dim);
        y = ops::conv3d(g, y, dwd_w, dwd_b, Triple{1, 1, 1}, Triple{pad_dwd, pad_dwd, pad_dwd},
                        Triple{dil, dil, dil}, dim);
        if (deform) {
            int pd = deform_k / 2;
            VarId off = ops::conv3d(g, y, off_w, off_b, Triple{1, 1, 1}, Triple{pd, pd, pd});
            y = ops::deform_dwconv3d(g, y, ddw_w, ddw_b, off, Triple{pd, pd, pd});
        }
        VarId gate = ops::conv3d(g, y, pw_out_w, pw_out_b, Triple{1, 1, 1}, Triple{0, 0, 0});
        return ops::mul(g, gate, xh);
    }
};

}  // namespace lhunet
