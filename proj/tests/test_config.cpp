#include <gtest/gtest.h>

#include <fstream>

#include "lhunet/config.hpp"
#include "lhunet/rng.hpp"

using namespace lhunet;

TEST(Schedule, ParsesTable4Strings) {
    const std::vector<std::string> strings = {"SSS-DDD", "CCC-DDD", "SSC-DDD", "SCC-DDD",
                                              "SSC-DDI", "SSC-III", "SSC-LLL", "SC-DD"};
    for (const auto& s : strings) {
        ScheduleParse p = parse_schedule(s);
        ASSERT_TRUE(p.ok) << s << ": " << p.error;
        EXPECT_EQ(render_schedule(p.schedule), s);
        EXPECT_EQ(p.schedule.vit_kinds.size(), p.schedule.cnn_kinds.size());
    }
    auto p = parse_schedule("SSC-DDD");
    EXPECT_EQ(p.schedule.vit_kinds[2], VitKind::C);
    EXPECT_EQ(p.schedule.cnn_kinds[0], CnnKind::D);
}

TEST(Schedule, ErrorsNamePosition) {
    auto p = parse_schedule("SSQ-DDD");
    ASSERT_FALSE(p.ok);
    EXPECT_NE(p.error.find("position 2"), std::string::npos) << p.error;
    auto q = parse_schedule("SSC-DXD");
    ASSERT_FALSE(q.ok);
    EXPECT_NE(q.error.find("position 5"), std::string::npos) << q.error;
    auto r = parse_schedule("SSC-DD");
    ASSERT_FALSE(r.ok);
    EXPECT_NE(r.error.find("unequal"), std::string::npos) << r.error;
    EXPECT_FALSE(parse_schedule("").ok);
    EXPECT_FALSE(parse_schedule("SSC").ok);
    EXPECT_FALSE(parse_schedule("-DDD").ok);
    EXPECT_FALSE(parse_schedule("SSC-").ok);
    EXPECT_FALSE(parse_schedule("S-D-I").ok);
}

TEST(Schedule, FuzzNoCrash) {
    Rng rng(123);
    const std::string alphabet = "SCDLIX- abc0";
    int ok_count = 0;
    for (int i = 0; i < 1000; ++i) {
        int len = rng.uniform_int(0, 12);
        std::string s;
        for (int j = 0; j < len; ++j)
            s += alphabet[(size_t)rng.uniform_int(0, (int)alphabet.size() - 1)];
        ScheduleParse p = parse_schedule(s);  // must not crash or throw
        if (p.ok) {
            ++ok_count;
            EXPECT_EQ(render_schedule(p.schedule), s);
        } else {
            EXPECT_FALSE(p.error.empty());
        }
    }
    (void)ok_count;
}

TEST(ArchSpec, PresetsValidate) {
    for (const auto& name : preset_names()) {
        Config c = preset(name);
        auto v = validate(c.arch);
        EXPECT_TRUE(v.empty()) << name << ": " << (v.empty() ? "" : v[0]);
    }
    EXPECT_THROW(preset("nope"), std::runtime_error);
}

TEST(ArchSpec, PresetShapes) {
    Config brats = preset("brats");
    EXPECT_EQ(brats.arch.in_channels, 4);
    EXPECT_EQ(brats.arch.out_channels, 3);
    EXPECT_EQ(brats.arch.patch_size, (Axis3{128, 128, 128}));
    EXPECT_EQ(brats.arch.n_stages(), 5);
    EXPECT_EQ(render_schedule(brats.arch.schedule), "SSC-DDD");
    EXPECT_DOUBLE_EQ(preset("brats").train.base_lr, 0.01);
    EXPECT_DOUBLE_EQ(preset("synapse").train.base_lr, 0.003);
    EXPECT_DOUBLE_EQ(preset("lung").train.base_lr, 0.003);
    // anisotropic first stage: (128,128,64) -> (64,64,64)
    auto res = stage_resolutions(preset("synapse").arch);
    EXPECT_EQ(res[0], (Axis3{64, 64, 64}));
    // brats bottleneck sits at 4^3
    auto rb = stage_resolutions(brats.arch);
    EXPECT_EQ(rb.back(), (Axis3{4, 4, 4}));
    // defaults shared across presets
    EXPECT_EQ(brats.arch.stage_widths, (std::vector<int>{36, 72, 128, 256, 512}));
    EXPECT_EQ(preset("toy8").arch.stage_widths, (std::vector<int>{9, 18, 32, 64}));
    EXPECT_DOUBLE_EQ(brats.train.momentum, 0.99);
    EXPECT_DOUBLE_EQ(brats.train.weight_decay, 3e-5);
    EXPECT_DOUBLE_EQ(brats.train.poly_power, 0.9);
}

TEST(ArchSpec, ValidateCatchesViolations) {
    ArchSpec a = preset("brats").arch;
    a.n_heads = 3;  // hybrid widths 128/256/512 not divisible by 3
    auto v = validate(a);
    ASSERT_FALSE(v.empty());
    EXPECT_NE(v[0].find("n_heads"), std::string::npos);

    ArchSpec b = preset("brats").arch;
    b.patch_size = {100, 128, 128};  // 100 -> 50 -> 25 -> not divisible
    EXPECT_FALSE(validate(b).empty());

    ArchSpec c = preset("brats").arch;
    c.stage_widths.pop_back();  // length mismatch
    EXPECT_FALSE(validate(c).empty());

    ArchSpec d = preset("brats").arch;
    d.downsample[1] = {3, 2, 2};  // factor must be 1 or 2
    EXPECT_FALSE(validate(d).empty());

    ArchSpec e = preset("micro").arch;
    e.patch_size = {4, 4, 4};  // bottleneck collapses to a single token
    EXPECT_FALSE(validate(e).empty());
}

TEST(ArchSpec, EffectiveProjectionCap) {
    ArchSpec a = preset("brats").arch;
    // bottleneck has 64 tokens; configured p=64 caps to 32 so p < n holds
    EXPECT_EQ(effective_p(a, 64), 32);
    EXPECT_EQ(effective_p(a, 4096), 64);
    // every grid schedule builds on every preset
    for (const auto& pn : {"brats", "la", "synapse", "lung"})
        for (const auto& s : {"SSS-DDD", "CCC-DDD", "SSC-DDD", "SCC-DDD", "SSC-DDI", "SSC-III",
                              "SSC-LLL", "SC-DD"}) {
            ArchSpec spec = with_schedule(preset(pn).arch, schedule_or_throw(s));
            EXPECT_TRUE(validate(spec).empty()) << pn << " " << s;
        }
}

TEST(ArchSpec, WithScheduleResizes) {
    ArchSpec a = preset("brats").arch;
    ArchSpec shrunk = with_schedule(a, schedule_or_throw("SC-DD"));
    EXPECT_EQ(shrunk.n_stages(), 4);
    EXPECT_EQ(shrunk.stage_widths, (std::vector<int>{36, 72, 128, 256}));
    EXPECT_TRUE(validate(shrunk).empty());
    ArchSpec grown = with_schedule(a, schedule_or_throw("SSSC-DDDD"));
    EXPECT_EQ(grown.n_stages(), 6);
    EXPECT_EQ(grown.stage_widths.back(), 1024);
    EXPECT_TRUE(validate(grown).empty());
    EXPECT_EQ(stage_resolutions(grown).back(), (Axis3{2, 2, 2}));
}

TEST(Config, JsonRoundTripAndOverride) {
    Config c = preset("toy8");
    json j = to_json(c);
    Config d = preset("brats");
    apply_config_json(d, j);
    EXPECT_EQ(d.arch, c.arch);
    EXPECT_EQ(d.train, c.train);

    // field-wise override keeps everything else
    Config e = preset("brats");
    apply_config_json(e, json::parse(R"({"train":{"base_lr":0.5},"arch":{"n_heads":8}})"));
    EXPECT_DOUBLE_EQ(e.train.base_lr, 0.5);
    EXPECT_EQ(e.arch.n_heads, 8);
    EXPECT_EQ(e.arch.patch_size, (Axis3{128, 128, 128}));
    EXPECT_DOUBLE_EQ(e.train.momentum, 0.99);
}

TEST(Config, UnknownKeysHardError) {
    Config c = preset("brats");
    EXPECT_THROW(apply_config_json(c, json::parse(R"({"arch":{"nheads":8}})")),
                 std::runtime_error);
    EXPECT_THROW(apply_config_json(c, json::parse(R"({"training":{}})")), std::runtime_error);
    EXPECT_THROW(apply_config_json(c, json::parse(R"({"data":{"path":"x"}})")),
                 std::runtime_error);
    EXPECT_THROW(apply_config_json(c, json::parse(R"({"train":{"loss_weights":[1,2,3]}})")),
                 std::runtime_error);
}

TEST(Config, ArchHashDiscriminates) {
    ArchSpec a = preset("brats").arch;
    ArchSpec b = a;
    EXPECT_EQ(arch_hash_hex(a), arch_hash_hex(b));
    b.n_heads = 8;
    EXPECT_NE(arch_hash_hex(a), arch_hash_hex(b));
    ArchSpec c = a;
    c.schedule = schedule_or_throw("SCC-DDD");
    EXPECT_NE(arch_hash_hex(a), arch_hash_hex(c));
}
