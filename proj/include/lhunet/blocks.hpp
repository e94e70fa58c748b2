#pragma once

#include <memory>
#include <string>

#include "lhunet/attention.hpp"
#include "lhunet/config.hpp"
#include "lhunet/ops_basic.hpp"
#include "lhunet/ops_conv.hpp"
#include "lhunet/params.hpp"

namespace lhunet {

template <class T>
struct Conv3dLayer {
    VarId w = -1, b = -1;
    Triple stride{1, 1, 1}, pad{0, 0, 0}, dil{1, 1, 1};
    int groups = 1;

    static Conv3dLayer build(ParamStore<T>& ps, Rng& rng, const std::string& name, int ci, int co,
                             int k, Triple stride = {1, 1, 1}, Triple pad = {0, 0, 0},
                             Triple dil = {1, 1, 1}, int groups = 1) {
        Conv3dLayer m;
        m.stride = stride;
        m.pad = pad;
        m.dil = dil;
        m.groups = groups;
        int64_t cig = ci / groups;
        m.w = ps.add_param(name + ".w",
                           init::he_normal<T>(rng, {co, cig, k, k, k}, cig * k * k * k));
        m.b = ps.add_param(name + ".b", init::constant<T>({co}, 0.0));
        return m;
    }

    VarId fwd(Graph<T>& g, VarId x) const {
        return ops::conv3d(g, x, w, b, stride, pad, dil, groups);
    }
};

template <class T>
struct BatchNormLayer {
    VarId w = -1, b = -1;
    std::shared_ptr<Tensor<T>> running_mean, running_var;

    static BatchNormLayer build(ParamStore<T>& ps, const std::string& name, int c) {
        BatchNormLayer m;
        m.w = ps.add_param(name + ".w", init::constant<T>({c}, 1.0));
        m.b = ps.add_param(name + ".b", init::constant<T>({c}, 0.0));
        m.running_mean = ps.add_buffer(name + ".running_mean", init::constant<T>({c}, 0.0));
        m.running_var = ps.add_buffer(name + ".running_var", init::constant<T>({c}, 1.0));
        return m;
    }

    VarId fwd(Graph<T>& g, VarId x, bool training) const {
        return ops::batchnorm3d(g, x, w, b, *running_mean, *running_var, training);
    }
};

// Pointwise embedding -> PReLU -> BN, applied at full resolution.
template <class T>
struct Stem {
    Conv3dLayer<T> pw;
    VarId slopes = -1;
    BatchNormLayer<T> bn;

    static Stem build(ParamStore<T>& ps, Rng& rng, const std::string& name, int ci, int co) {
        Stem m;
        m.pw = Conv3dLayer<T>::build(ps, rng, name + ".pw", ci, co, 1);
        m.slopes = ps.add_param(name + ".prelu", init::constant<T>({co}, 0.25));
        m.bn = BatchNormLayer<T>::build(ps, name + ".bn", co);
        return m;
    }

    VarId fwd(Graph<T>& g, VarId x, bool training) const {
        VarId y = pw.fwd(g, x);
        y = ops::prelu_axis(g, y, slopes, 1);
        return bn.fwd(g, y, training);
    }
};

// Two depthwise 3^3 convs with BN + leaky ReLU, plus a pointwise-projected
// shortcut, fused by a final leaky ReLU.
template <class T>
struct ResBlock {
    int dim = 0;
    Conv3dLayer<T> dw1, dw2, pw_res;
    BatchNormLayer<T> bn1, bn2, bn_res;

    static ResBlock build(ParamStore<T>& ps, Rng& rng, const std::string& name, int c) {
        ResBlock m;
        m.dim = c;
        m.dw1 = Conv3dLayer<T>::build(ps, rng, name + ".dw1", c, c, 3, {1, 1, 1}, {1, 1, 1},
                                      {1, 1, 1}, c);
        m.bn1 = BatchNormLayer<T>::build(ps, name + ".bn1", c);
        m.dw2 = Conv3dLayer<T>::build(ps, rng, name + ".dw2", c, c, 3, {1, 1, 1}, {1, 1, 1},
                                      {1, 1, 1}, c);
        m.bn2 = BatchNormLayer<T>::build(ps, name + ".bn2", c);
        m.pw_res = Conv3dLayer<T>::build(ps, rng, name + ".pw_res", c, c, 1);
        m.bn_res = BatchNormLayer<T>::build(ps, name + ".bn_res", c);
        return m;
    }

    VarId fwd(Graph<T>& g, VarId x, bool training) const {
        VarId y = dw1.fwd(g, x);
        y = bn1.fwd(g, y, training);
        y = ops::leaky_relu(g, y);
        y = dw2.fwd(g, y);
        y = bn2.fwd(g, y, training);
        VarId s = pw_res.fwd(g, x);
        s = bn_res.fwd(g, s, training);
        return ops::leaky_relu(g, ops::add(g, y, s));
    }
};

// ResBlock -> pointwise conv -> residual add -> BN.
template <class T>
struct Comb {
    ResBlock<T> res;
    Conv3dLayer<T> pw;
    BatchNormLayer<T> bn_out;

    static Comb build(ParamStore<T>& ps, Rng& rng, const std::string& name, int c) {
        Comb m;
        m.res = ResBlock<T>::build(ps, rng, name + ".res", c);
        m.pw = Conv3dLayer<T>::build(ps, rng, name + ".pw", c, c, 1);
        m.bn_out = BatchNormLayer<T>::build(ps, name + ".bn_out", c);
        return m;
    }

    VarId fwd(Graph<T>& g, VarId x, bool training) const {
        VarId y = res.fwd(g, x, training);
        y = pw.fwd(g, y);
        y = ops::add(g, y, x);
        return bn_out.fwd(g, y, training);
    }
};

// Hybrid fusion: comb(F + delta * cnn_attn(F) + gamma * vit_attn(F)).
// A gate that is exactly zero short-circuits its branch, so zeroed gates
// reproduce comb(F) bit for bit and ablations cost nothing.
template <class T>
struct HybridBlock {
    int dim = 0;
    VitKind vit_kind = VitKind::S;
    CnnKind cnn_kind = CnnKind::D;
    VarId delta = -1, gamma = -1;
    SpatialAttention<T> sattn;
    ChannelAttention<T> cattn;
    LkaAttention<T> lka;
    Comb<T> comb;

    static HybridBlock build(ParamStore<T>& ps, Rng& rng, const std::string& name, int c,
                             VitKind vit, CnnKind cnn, int64_t n_tokens, int64_t p_eff, int heads,
                             Axis3 lka_kernels, int deform_k) {
        HybridBlock m;
        m.dim = c;
        m.vit_kind = vit;
        m.cnn_kind = cnn;
        m.delta = ps.add_param(name + ".delta", init::constant<T>({1}, 1.0));
        m.gamma = ps.add_param(name + ".gamma", init::constant<T>({1}, 1.0));
        if (vit == VitKind::S)
            m.sattn = SpatialAttention<T>::build(ps, rng, name + ".vit", c, n_tokens, p_eff, heads);
        else
            m.cattn = ChannelAttention<T>::build(ps, rng, name + ".vit", c);
        if (cnn != CnnKind::I)
            m.lka = LkaAttention<T>::build(ps, rng, name + ".cnn", c, cnn == CnnKind::D,
                                           lka_kernels, deform_k);
        m.comb = Comb<T>::build(ps, rng, name + ".comb", c);
        return m;
    }

    VarId fwd(Graph<T>& g, VarId x, bool training) const {
        const auto& xv = g.val(x);
        Vol5 xi(xv.shape);
        VarId fused = x;
        if (g.val(delta).data[0] != T(0)) {
            VarId d = (cnn_kind == CnnKind::I) ? x : lka.fwd(g, x);
            fused = ops::add(g, fused, ops::mul_scalar_var(g, d, delta));
        }
        if (g.val(gamma).data[0] != T(0)) {
            VarId tok = ops::reshape(g, x, {xi.B, xi.C, xi.D * xi.H * xi.W});
            tok = ops::permute(g, tok, {0, 2, 1});  // (B, n, C)
            VarId a = (vit_kind == VitKind::S) ? sattn.fwd(g, tok) : cattn.fwd(g, tok);
            a = ops::permute(g, a, {0, 2, 1});
            a = ops::reshape(g, a, {xi.B, xi.C, xi.D, xi.H, xi.W});
            fused = ops::add(g, fused, ops::mul_scalar_var(g, a, gamma));
        }
        return comb.fwd(g, fused, training);
    }
};

// Final pointwise projection to class logits.
template <class T>
struct Head {
    Conv3dLayer<T> pw;

    static Head build(ParamStore<T>& ps, Rng& rng, const std::string& name, int ci, int co) {
        Head m;
        m.pw = Conv3dLayer<T>::build(ps, rng, name + ".pw", ci, co, 1);
        return m;
    }

    VarId fwd(Graph<T>& g, VarId x) const { return pw.fwd(g, x); }
};

}  // namespace lhunet
