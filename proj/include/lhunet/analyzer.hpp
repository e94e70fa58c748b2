#pragma once

#include <string>
#include <vector>

#include "lhunet/costmodel.hpp"
#include "lhunet/plan.hpp"

namespace lhunet {

struct CostRow {
    std::string layer;   // scope path, e.g. enc0/block
    std::string stage;   // stem, enc0, bottleneck, dec0, head
    int64_t params = 0;
    double flops = 0;
    std::string out_shape;
};

struct CostReport {
    std::vector<CostRow> rows;
    int64_t total_params = 0;
    double total_flops = 0;
};

// Static cost model. Every term replays, op for op, exactly what the
// instrumented forward pass counts, so the two are equal by construction
// (and a test holds them to that).
namespace costdetail {

struct PF {
    int64_t params = 0;
    double flops = 0;
    PF& operator+=(const PF& o) {
        params += o.params;
        flops += o.flops;
        return *this;
    }
};

inline PF conv(double b, int64_t ci, int64_t co, double vox, int64_t k3, int64_t groups) {
    return {co * (ci / groups) * k3 + co,
            cost::conv3d(b, (double)ci, (double)co, vox, (double)k3, (double)groups, true)};
}

inline PF bn(double b, int64_t c, double vox) {
    return {2 * c, cost::eltwise(b * c * vox)};
}

inline PF stem_cost(double b, int64_t ci, int64_t co, double vox) {
    PF t = conv(b, ci, co, vox, 1, 1);
    t.params += co;                          // prelu slopes
    t.flops += cost::eltwise(b * co * vox);  // prelu
    t += bn(b, co, vox);
    return t;
}

inline PF res_cost(double b, int64_t c, double vox) {
    PF t;
    t += conv(b, c, c, vox, 27, c);  // dw1
    t += bn(b, c, vox);
    t.flops += cost::eltwise(b * c * vox);  // leaky relu
    t += conv(b, c, c, vox, 27, c);  // dw2
    t += bn(b, c, vox);
    t += conv(b, c, c, vox, 1, 1);   // pw shortcut
    t += bn(b, c, vox);
    t.flops += cost::eltwise(b * c * vox);  // residual add
    t.flops += cost::eltwise(b * c * vox);  // final leaky relu
    return t;
}

inline PF comb_cost(double b, int64_t c, double vox) {
    PF t = res_cost(b, c, vox);
    t += conv(b, c, c, vox, 1, 1);
    t.flops += cost::eltwise(b * c * vox);  // residual add
    t += bn(b, c, vox);
    return t;
}

inline PF sattn_cost(double b, int64_t c, int64_t n, int64_t p, int64_t h) {
    PF t;
    double bn_ = b * (double)n;
    t.params += 2 * c;                            // ln_in
    t.flops += cost::eltwise(bn_ * c);
    for (int i = 0; i < 3; ++i) {                 // q, k, v
        t.params += c * c + c;
        t.flops += cost::linear(bn_, c, c, true);
    }
    for (int i = 0; i < 2; ++i) {                 // token-axis K/V projections
        t.params += n * p + p;
        t.flops += cost::linear(b * (double)c, (double)n, (double)p, true);
    }
    int64_t d = c / h;
    t.flops += cost::eltwise(bn_ * c);                                  // l2 normalize q
    t.flops += cost::matmul(b * (double)h, (double)n, (double)d, (double)p);  // scores
    t.params += h;                                                      // alpha
    t.flops += cost::eltwise(b * h * (double)n * p);                    // alpha
    t.flops += cost::eltwise(b * h * (double)n * p);                    // 1/sqrt(d)
    t.flops += cost::eltwise(b * h * (double)n * p);                    // softmax
    t.flops += cost::matmul(b * (double)h, (double)n, (double)p, (double)d);  // weighted V
    t.params += 2 * c;                                                  // ln_out
    t.flops += cost::eltwise(bn_ * c);
    t.params += c * c + c;                                              // out proj
    t.flops += cost::linear(bn_, c, c, true);
    return t;
}

inline PF cattn_cost(double b, int64_t c, int64_t n) {
    PF t;
    double bn_ = b * (double)n;
    t.params += 2 * c;
    t.flops += cost::eltwise(bn_ * c);
    for (int i = 0; i < 3; ++i) {
        t.params += c * c + c;
        t.flops += cost::linear(bn_, c, c, true);
    }
    t.flops += cost::matmul(b, (double)c, (double)n, (double)c);  // K^T Q
    t.flops += cost::eltwise(b * (double)c * c);                  // 1/sqrt(d)
    t.flops += cost::eltwise(b * (double)c * c);                  // softmax
    t.flops += cost::matmul(b, (double)n, (double)c, (double)c);  // V S^T
    t.params += 2 * c;
    t.flops += cost::eltwise(bn_ * c);
    t.params += c * c + c;
    t.flops += cost::linear(bn_, c, c, true);
    return t;
}

inline PF lka_cost(double b, int64_t c, double vox, bool deform, Axis3 kernels, int kd) {
    PF t;
    int64_t k1 = kernels[0], k2 = kernels[1];
    t += conv(b, c, c, vox, 1, 1);              // pw_in
    t.flops += cost::eltwise(b * c * vox);      // gelu
    t += conv(b, c, c, vox, k1 * k1 * k1, c);   // dw
    t += conv(b, c, c, vox, k2 * k2 * k2, c);   // dwd
    if (deform) {
        int64_t taps = (int64_t)kd * kd * kd;
        t += conv(b, c, 3 * taps, vox, taps, 1);  // offset predictor
        t.params += c * taps + c;                 // deformable weights
        t.flops += cost::conv3d(b, (double)c, (double)c, vox, (double)taps, (double)c, true) +
                   cost::trilinear(b * (double)c * vox * (double)taps);
    }
    t += conv(b, c, c, vox, 1, 1);              // pw_out
    t.flops += cost::eltwise(b * c * vox);      // gate
    return t;
}

inline PF hybrid_cost(double b, const StagePlan& sp, const ArchSpec& a) {
    PF t;
    int64_t c = sp.width;
    double vox = (double)sp.n_tokens;
    t.params += 2;  // delta, gamma
    // cnn branch
    if (sp.cnn != CnnKind::I)
        t += lka_cost(b, c, vox, sp.cnn == CnnKind::D, a.lka_kernels, a.deform_kernel);
    t.flops += cost::eltwise(b * c * vox);  // gate scale
    t.flops += cost::eltwise(b * c * vox);  // fusion add
    // vit branch
    if (sp.vit == VitKind::S)
        t += sattn_cost(b, c, sp.n_tokens, sp.p_eff, sp.heads);
    else
        t += cattn_cost(b, c, sp.n_tokens);
    t.flops += cost::eltwise(b * c * vox);  // gate scale
    t.flops += cost::eltwise(b * c * vox);  // fusion add
    t += comb_cost(b, c, vox);
    return t;
}

inline PF block_cost(double b, const StagePlan& sp, const ArchSpec& a) {
    return sp.kind == BlockKind::Res ? res_cost(b, sp.width, (double)sp.n_tokens)
                                     : hybrid_cost(b, sp, a);
}

inline std::string shape5(int64_t b, int64_t c, const Axis3& r) {
    return std::to_string(b) + "x" + std::to_string(c) + "x" + std::to_string(r[0]) + "x" +
           std::to_string(r[1]) + "x" + std::to_string(r[2]);
}

}  // namespace costdetail

inline CostReport analyze(const ArchSpec& arch, int64_t batch = 1) {
    using namespace costdetail;
    NetworkPlan plan = build_plan(arch);
    const ArchSpec& a = plan.arch;
    double b = (double)batch;
    CostReport rep;
    auto push = [&](const std::string& layer, const std::string& stage, PF pf,
                    const std::string& shape) {
        rep.rows.push_back({layer, stage, pf.params, pf.flops, shape});
        rep.total_params += pf.params;
        rep.total_flops += pf.flops;
    };

    int w0 = a.stage_widths[0];
    double full_vox = (double)tokens_of(a.patch_size);
    push("stem", "stem", stem_cost(b, a.in_channels, w0, full_vox),
         shape5(batch, w0, a.patch_size));

    for (const StagePlan& sp : plan.encoder) {
        double vox = (double)sp.n_tokens;
        if (sp.pool != Axis3{1, 1, 1})
            push(sp.name + "/pool", sp.name,
                 {0, cost::eltwise(b * sp.trans_in * vox)}, shape5(batch, sp.trans_in, sp.res));
        push(sp.name + "/trans", sp.name, conv(b, sp.trans_in, sp.width, vox, 1, 1),
             shape5(batch, sp.width, sp.res));
        push(sp.name + "/block", sp.name, block_cost(b, sp, a), shape5(batch, sp.width, sp.res));
    }

    for (const StagePlan& sp : plan.decoder) {
        double vox = (double)sp.n_tokens;
        double in_vox = vox / ((double)sp.up_k[0] * sp.up_k[1] * sp.up_k[2]);
        int64_t k3 = (int64_t)sp.up_k[0] * sp.up_k[1] * sp.up_k[2];
        PF up{(int64_t)sp.up_in * sp.width * k3 + sp.width,
              cost::tconv3d(b, (double)sp.up_in, (double)sp.width, in_vox, vox, (double)k3, 1.0,
                            true)};
        push(sp.name + "/up", sp.name, up, shape5(batch, sp.width, sp.res));
        push(sp.name + "/merge", sp.name, conv(b, 2 * sp.width, sp.width, vox, 1, 1),
             shape5(batch, sp.width, sp.res));
        push(sp.name + "/block", sp.name, block_cost(b, sp, a), shape5(batch, sp.width, sp.res));
    }

    push("head", "head", conv(b, w0, a.out_channels, full_vox, 1, 1),
         shape5(batch, a.out_channels, a.patch_size));
    return rep;
}

struct ScheduleCost {
    std::string schedule;
    int64_t params = 0;
    double flops = 0;
};

// Cost table across schedules applied to one base architecture.
inline std::vector<ScheduleCost> compare_schedules(const ArchSpec& base,
                                                   const std::vector<std::string>& schedules,
                                                   int64_t batch = 1) {
    std::vector<ScheduleCost> out;
    for (const auto& s : schedules) {
        ArchSpec a = with_schedule(base, schedule_or_throw(s));
        CostReport r = analyze(a, batch);
        out.push_back({s, r.total_params, r.total_flops});
    }
    return out;
}

}  // namespace lhunet
