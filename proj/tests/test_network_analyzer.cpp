#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "gradcheck.hpp"
#include "lhunet/analyzer.hpp"
#include "lhunet/loss.hpp"
#include "lhunet/network.hpp"

using namespace lhunet;
using namespace lhunet::testutil;

namespace {

int64_t schedule_params(const std::vector<ScheduleCost>& table, const std::string& name) {
    for (const auto& r : table)
        if (r.schedule == name) return r.params;
    ADD_FAILURE() << "schedule " << name << " missing from table";
    return -1;
}

// analyzer rows keyed the way Network names its scopes and parameters
std::string row_prefix(std::string layer) {
    for (char& c : layer)
        if (c == '/') c = '.';
    return layer + ".";
}

}  // namespace

// ---------------------------------------------------------------------------
// static cost model: budget bands and ablation ordering
// ---------------------------------------------------------------------------

TEST(Analyzer, BratsBudgetWithinBands) {
    CostReport r = analyze(preset("brats").arch);
    EXPECT_GT(r.total_params, 8.908e6);   // 10.48M - 15%
    EXPECT_LT(r.total_params, 12.052e6);  // 10.48M + 15%
    EXPECT_GT(r.total_flops, 48.8155e9);  // 57.43G - 15%
    EXPECT_LT(r.total_flops, 66.0445e9);  // 57.43G + 15%
}

TEST(Analyzer, LaBudgetWithinBands) {
    CostReport r = analyze(preset("la").arch);
    EXPECT_GT(r.total_params, 7.2505e6);  // 8.53M - 15%
    EXPECT_LT(r.total_params, 9.8095e6);  // 8.53M + 15%
}

TEST(Analyzer, BottleneckRowReportsDeepestResolution) {
    CostReport r = analyze(preset("brats").arch);
    bool seen = false;
    for (const auto& row : r.rows)
        if (row.layer == "bottleneck/block") {
            EXPECT_EQ(row.out_shape, "1x512x4x4x4");
            seen = true;
        }
    EXPECT_TRUE(seen);
}

TEST(Analyzer, ScheduleParamOrdering) {
    const std::vector<std::string> table4 = {"SSC-DDD", "SCC-DDD", "CCC-DDD", "SSS-DDD",
                                             "SSC-DDI", "SSC-LLL", "SSC-III", "SC-DD"};
    auto table = compare_schedules(preset("brats").arch, table4);
    ASSERT_EQ(table.size(), table4.size());
    auto p = [&](const char* s) { return schedule_params(table, s); };

    // swapping S for C sheds the token projections, variant by variant
    EXPECT_GT(p("SSC-DDD"), p("SCC-DDD"));
    EXPECT_GT(p("SCC-DDD"), p("CCC-DDD"));
    // thinning the convolutional branch sheds params monotonically
    EXPECT_GT(p("SSC-DDD"), p("SSC-DDI"));
    EXPECT_GT(p("SSC-DDI"), p("SSC-LLL"));
    EXPECT_GT(p("SSC-LLL"), p("SSC-III"));
    // the two-stage schedule drops a whole level and is smallest overall
    for (const auto& r : table)
        if (r.schedule != "SC-DD") EXPECT_LT(p("SC-DD"), r.params) << "vs " << r.schedule;
}

// ---------------------------------------------------------------------------
// the built network and the static model agree exactly
// ---------------------------------------------------------------------------

TEST(NetworkVsAnalyzer, ParamTotalsMatch) {
    for (const char* name : {"micro", "toy8", "brats"}) {
        ArchSpec arch = preset(name).arch;
        Network<float> net(arch);
        EXPECT_EQ(net.params().n_learnable(), analyze(arch).total_params) << name;
    }
}

TEST(NetworkVsAnalyzer, PerLayerParamsMatch) {
    for (const char* name : {"micro", "toy8"}) {
        ArchSpec arch = preset(name).arch;
        Network<float> net(arch);
        CostReport rep = analyze(arch);
        for (const auto& row : rep.rows) {
            std::string prefix = row_prefix(row.layer);
            int64_t got = 0;
            for (const auto& e : net.params().entries())
                if (!e.buffer && e.name.rfind(prefix, 0) == 0) got += numel_of(e.shape);
            EXPECT_EQ(got, row.params) << name << " " << row.layer;
        }
    }
}

TEST(NetworkVsAnalyzer, ForwardFlopsMatchPerScope) {
    for (const char* name : {"micro", "toy8"}) {
        ArchSpec arch = preset(name).arch;
        Network<float> net(arch);
        Graph<float>& g = net.graph();
        g.set_scope_metering(true);
        g.reset_flops();
        Rng rng(5);
        NoGradGuard<float> ng(g);
        VarId x = g.leaf(random_tensor_t<float>(
            rng, {1, arch.in_channels, arch.patch_size[0], arch.patch_size[1],
                  arch.patch_size[2]}));
        net.forward(x, false);

        CostReport rep = analyze(arch, 1);
        EXPECT_EQ(g.flops(), rep.total_flops) << name;
        const auto& by_scope = g.flops_by_scope();
        double covered = 0;
        for (const auto& row : rep.rows) {
            auto it = by_scope.find(row.layer);
            ASSERT_NE(it, by_scope.end()) << name << " missing scope " << row.layer;
            EXPECT_EQ(it->second, row.flops) << name << " " << row.layer;
            covered += it->second;
        }
        EXPECT_EQ(covered, g.flops()) << name << ": ops counted outside known scopes";
    }
}

TEST(NetworkVsAnalyzer, FlopsScaleWithBatch) {
    ArchSpec arch = preset("micro").arch;
    Network<float> net(arch);
    Graph<float>& g = net.graph();
    g.reset_flops();
    Rng rng(6);
    VarId x = g.leaf(random_tensor_t<float>(rng, {2, arch.in_channels, 8, 8, 8}));
    net.forward(x, true);  // grad-enabled training pass counts the same ops
    EXPECT_EQ(g.flops(), analyze(arch, 2).total_flops);
}

TEST(Network, LogitsShape) {
    for (const char* name : {"micro", "toy8"}) {
        ArchSpec arch = preset(name).arch;
        Network<float> net(arch);
        Graph<float>& g = net.graph();
        NoGradGuard<float> ng(g);
        VarId x = g.leaf(Tensor<float>(
            {1, arch.in_channels, arch.patch_size[0], arch.patch_size[1], arch.patch_size[2]},
            0.3f));
        VarId y = net.forward(x, false);
        EXPECT_EQ(g.val(y).shape,
                  (Shape{1, arch.out_channels, arch.patch_size[0], arch.patch_size[1],
                         arch.patch_size[2]}))
            << name;
    }
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

TEST(Checkpoint, RoundTripIsForwardBitExact) {
    namespace fs = std::filesystem;
    std::string prefix = (fs::temp_directory_path() / "lhunet_ckpt_rt").string();
    ArchSpec arch = preset("micro").arch;
    Rng rng(7);
    Tensor<float> x({1, arch.in_channels, 8, 8, 8});
    for (auto& v : x.data) v = (float)rng.uniform(-1, 1);

    Network<float> a(arch, /*seed=*/1);
    {
        // shift the BN running stats away from their init so the round trip
        // proves buffers travel too
        Graph<float>& g = a.graph();
        VarId xid = g.leaf(x);
        a.forward(xid, true);
        g.reset_to(a.base_mark());
    }
    Tensor<float> ya;
    {
        Graph<float>& g = a.graph();
        NoGradGuard<float> ng(g);
        ya = g.val(a.forward(g.leaf(x), false));
        g.reset_to(a.base_mark());
    }
    a.save(prefix);

    Network<float> b(arch, /*seed=*/2);
    b.load(prefix);
    Tensor<float> yb;
    {
        Graph<float>& g = b.graph();
        NoGradGuard<float> ng(g);
        yb = g.val(b.forward(g.leaf(x), false));
    }
    ASSERT_EQ(ya.shape, yb.shape);
    ASSERT_EQ(0, std::memcmp(ya.data.data(), yb.data.data(), ya.data.size() * sizeof(float)));

    fs::remove(prefix + ".json");
    fs::remove(prefix + ".bin");
}

TEST(Checkpoint, RejectsMismatchedArchitecture) {
    namespace fs = std::filesystem;
    std::string prefix = (fs::temp_directory_path() / "lhunet_ckpt_arch").string();
    ArchSpec arch = preset("micro").arch;
    Network<float> a(arch);
    a.save(prefix);

    ArchSpec other = with_schedule(arch, schedule_or_throw("C-I"));
    Network<float> b(other);
    try {
        b.load(prefix);
        FAIL() << "hash mismatch not detected";
    } catch (const std::exception& e) {
        EXPECT_NE(std::string(e.what()).find("different architecture"), std::string::npos);
    }
    fs::remove(prefix + ".json");
    fs::remove(prefix + ".bin");
}

TEST(Checkpoint, RejectsTruncatedBlob) {
    namespace fs = std::filesystem;
    std::string prefix = (fs::temp_directory_path() / "lhunet_ckpt_trunc").string();
    ArchSpec arch = preset("micro").arch;
    Network<float> a(arch);
    a.save(prefix);
    fs::resize_file(prefix + ".bin", fs::file_size(prefix + ".bin") - 4);
    Network<float> b(arch);
    EXPECT_THROW(b.load(prefix), std::exception);
    fs::remove(prefix + ".json");
    fs::remove(prefix + ".bin");
}

// ---------------------------------------------------------------------------
// end-to-end gradient through the full micro network and loss
// ---------------------------------------------------------------------------

TEST(EndToEnd, MicroNetworkLossGradients) {
    ArchSpec arch = preset("micro").arch;
    Network<double> net(arch);
    Graph<double>& g = net.graph();

    Rng rng(11);
    Tensor<double> x({1, arch.in_channels, 8, 8, 8});
    for (auto& v : x.data) v = rng.uniform(-1, 1);
    Tensor<uint8_t> target({1, 8, 8, 8});
    for (auto& v : target.data) v = (uint8_t)(rng.uniform_int(0, arch.out_channels - 1));
    VarId xid = g.leaf(x);  // persists across rebuilds, like the parameters

    auto build_loss = [&]() {
        VarId logits = net.forward(xid, true);
        return dice_ce_loss(g, logits, target).total;
    };

    // probe ~20 elements spread over every kind of parameter tensor
    std::vector<const ParamStore<double>::Entry*> learnable;
    for (const auto& e : net.params().entries())
        if (!e.buffer) learnable.push_back(&e);
    std::vector<ProbePoint> points;
    size_t step = learnable.size() / 20 + 1;
    Rng pick(13);
    for (size_t i = 0; i < learnable.size(); i += step) {
        int64_t n = numel_of(learnable[i]->shape);
        points.push_back({learnable[i]->id, pick.uniform_int(0, n - 1)});
    }
    ASSERT_GE(points.size(), 15u);

    auto r = inplace_gradcheck(g, {}, build_loss, 1e-5, 1, &points);
    EXPECT_EQ(r.n_checked, (int64_t)points.size());
    EXPECT_LT(r.max_rel_err, 1e-3);
}
