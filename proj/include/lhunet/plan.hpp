#pragma once

#include <string>
#include <vector>

#include "lhunet/config.hpp"

namespace lhunet {

// One structural description shared by the builder, the analyzer and the
// tests, so they can never disagree about what sits where.

enum class BlockKind { Res, Hybrid };

struct StagePlan {
    std::string name;     // enc0.., bottleneck, dec0..
    bool decoder = false;
    int level = 0;        // 0 = full resolution
    Axis3 res = {0, 0, 0};
    int width = 0;

    // encoder side
    Axis3 pool = {1, 1, 1};
    int trans_in = 0;

    // decoder side
    int up_in = 0;
    Axis3 up_k = {1, 1, 1};

    BlockKind kind = BlockKind::Res;
    VitKind vit = VitKind::S;
    CnnKind cnn = CnnKind::D;
    bool omni = false;
    int64_t n_tokens = 0;
    int64_t p_eff = 0;
    int heads = 1;
};

struct NetworkPlan {
    ArchSpec arch;
    std::vector<StagePlan> encoder;  // shallow to deep
    std::vector<StagePlan> decoder;  // deep to shallow (build order)
};

inline NetworkPlan build_plan(const ArchSpec& arch) {
    {
        auto v = validate(arch);
        if (!v.empty()) {
            std::string msg = "invalid architecture:";
            for (const auto& s : v) msg += "\n  " + s;
            throw std::runtime_error(msg);
        }
    }
    NetworkPlan plan;
    plan.arch = arch;
    const int S = arch.n_stages();
    const auto res = stage_resolutions(arch);
    auto level_res = [&](int l) { return l == 0 ? arch.patch_size : res[l - 1]; };
    auto width_at_level = [&](int l) {
        return l == 0 ? arch.stage_widths[0] : arch.stage_widths[l - 1];
    };
    auto fill_kind = [&](StagePlan& sp, int stage_idx) {
        if (stage_idx < arch.n_cnn_stages) {
            sp.kind = BlockKind::Res;
            return;
        }
        int h = stage_idx - arch.n_cnn_stages;
        sp.kind = BlockKind::Hybrid;
        sp.vit = arch.schedule.vit_kinds[h];
        sp.cnn = arch.schedule.cnn_kinds[h];
        sp.heads = arch.n_heads;
    };

    for (int i = 0; i < S; ++i) {
        StagePlan sp;
        sp.name = (i == S - 1) ? "bottleneck" : "enc" + std::to_string(i);
        sp.level = i + 1;
        sp.res = res[i];
        sp.width = arch.stage_widths[i];
        sp.pool = arch.downsample[i];
        sp.trans_in = (i == 0) ? arch.stage_widths[0] : arch.stage_widths[i - 1];
        fill_kind(sp, i);
        sp.omni = (i == S - 1) && sp.kind == BlockKind::Hybrid;
        sp.n_tokens = tokens_of(sp.res);
        sp.p_eff = effective_p(arch, sp.n_tokens);
        plan.encoder.push_back(sp);
    }

    for (int l = S - 1; l >= 0; --l) {
        StagePlan sp;
        sp.decoder = true;
        sp.name = "dec" + std::to_string(l);
        sp.level = l;
        sp.res = level_res(l);
        sp.width = width_at_level(l);
        sp.up_in = arch.stage_widths[l];
        sp.up_k = arch.downsample[l];
        if (l == 0)
            sp.kind = BlockKind::Res;  // mirrors the stem
        else
            fill_kind(sp, l - 1);
        sp.heads = arch.n_heads;
        sp.n_tokens = tokens_of(sp.res);
        sp.p_eff = effective_p(arch, sp.n_tokens);
        plan.decoder.push_back(sp);
    }
    return plan;
}

}  // namespace lhunet
