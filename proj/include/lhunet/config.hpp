#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lhunet/tensor.hpp"

namespace lhunet {

using json = nlohmann::json;
using Axis3 = std::array<int, 3>;

enum class VitKind : char { S = 'S', C = 'C' };
enum class CnnKind : char { D = 'D', L = 'L', I = 'I' };

struct AttentionSchedule {
    std::vector<VitKind> vit_kinds;
    std::vector<CnnKind> cnn_kinds;

    size_t size() const { return vit_kinds.size(); }
    bool operator==(const AttentionSchedule&) const = default;
};

struct ScheduleParse {
    bool ok = false;
    AttentionSchedule schedule;
    std::string error;
};

inline ScheduleParse parse_schedule(const std::string& text) {
    ScheduleParse r;
    size_t dash = text.find('-');
    if (dash == std::string::npos) {
        r.error = "schedule parse error: missing '-' separator in \"" + text + "\"";
        return r;
    }
    if (text.find('-', dash + 1) != std::string::npos) {
        r.error = "schedule parse error: multiple '-' separators";
        return r;
    }
    std::string vit = text.substr(0, dash);
    std::string cnn = text.substr(dash + 1);
    if (vit.empty() || cnn.empty()) {
        r.error = "schedule parse error: empty half";
        return r;
    }
    if (vit.size() != cnn.size()) {
        r.error = "schedule parse error: unequal halves (" + std::to_string(vit.size()) +
                  " vs " + std::to_string(cnn.size()) + ")";
        return r;
    }
    for (size_t i = 0; i < vit.size(); ++i) {
        char c = vit[i];
        if (c != 'S' && c != 'C') {
            r.error = "schedule parse error at position " + std::to_string(i) +
                      ": expected S or C, got '" + std::string(1, c) + "'";
            return r;
        }
        r.schedule.vit_kinds.push_back(static_cast<VitKind>(c));
    }
    for (size_t i = 0; i < cnn.size(); ++i) {
        char c = cnn[i];
        if (c != 'D' && c != 'L' && c != 'I') {
            r.error = "schedule parse error at position " + std::to_string(dash + 1 + i) +
                      ": expected D, L or I, got '" + std::string(1, c) + "'";
            return r;
        }
        r.schedule.cnn_kinds.push_back(static_cast<CnnKind>(c));
    }
    r.ok = true;
    return r;
}

inline std::string render_schedule(const AttentionSchedule& s) {
    std::string out;
    for (VitKind k : s.vit_kinds) out += static_cast<char>(k);
    out += '-';
    for (CnnKind k : s.cnn_kinds) out += static_cast<char>(k);
    return out;
}

inline AttentionSchedule schedule_or_throw(const std::string& text) {
    ScheduleParse p = parse_schedule(text);
    require(p.ok, p.error);
    return p.schedule;
}

// ---------------------------------------------------------------------------

struct ArchSpec {
    int in_channels = 1;
    int out_channels = 2;
    Axis3 patch_size = {128, 128, 128};
    std::vector<int> stage_widths = {36, 72, 128, 256, 512};
    std::vector<Axis3> downsample = {{2, 2, 2}, {2, 2, 2}, {2, 2, 2}, {2, 2, 2}, {2, 2, 2}};
    int n_cnn_stages = 2;
    AttentionSchedule schedule = schedule_or_throw("SSC-DDD");
    int kv_projection_len = 64;
    int n_heads = 4;
    Axis3 lka_kernels = {5, 7, 3};  // dw kernel, dilated kernel, dilation
    int deform_kernel = 3;

    int n_stages() const { return static_cast<int>(stage_widths.size()); }
    bool operator==(const ArchSpec&) const = default;
};

// Spatial dims entering each stage's block (after that stage's pooling).
inline std::vector<Axis3> stage_resolutions(const ArchSpec& a) {
    std::vector<Axis3> out;
    Axis3 d = a.patch_size;
    for (const Axis3& f : a.downsample) {
        for (int i = 0; i < 3; ++i) d[i] = f[i] > 0 ? d[i] / f[i] : 0;
        out.push_back(d);
    }
    return out;
}

inline int64_t tokens_of(const Axis3& r) {
    return (int64_t)r[0] * r[1] * r[2];
}

// Effective K/V projection length at a stage with n spatial tokens: the
// configured p, capped at n/2 so the projection always reduces.
inline int64_t effective_p(const ArchSpec& a, int64_t n) {
    return std::min<int64_t>(a.kv_projection_len, n / 2);
}

inline std::vector<std::string> validate(const ArchSpec& a) {
    std::vector<std::string> v;
    auto bad = [&](const std::string& m) { v.push_back(m); };
    if (a.in_channels < 1) bad("in_channels: must be positive");
    if (a.out_channels < 1) bad("out_channels: must be positive");
    for (int i = 0; i < 3; ++i)
        if (a.patch_size[i] < 1) bad("patch_size: must be positive");
    if (a.stage_widths.empty()) bad("stage_widths: empty");
    for (int w : a.stage_widths)
        if (w < 1) bad("stage_widths: must be positive");
    if (a.n_cnn_stages < 0) bad("n_cnn_stages: negative");
    if (a.schedule.size() < 1) bad("schedule: needs at least one hybrid stage");
    if (a.schedule.vit_kinds.size() != a.schedule.cnn_kinds.size())
        bad("schedule: halves differ in length");
    if (a.downsample.size() != a.stage_widths.size())
        bad("downsample: length " + std::to_string(a.downsample.size()) +
            " != stage_widths length " + std::to_string(a.stage_widths.size()));
    if ((int)a.stage_widths.size() != a.n_cnn_stages + (int)a.schedule.size())
        bad("stage_widths: length != n_cnn_stages + schedule length");
    if (a.kv_projection_len < 1) bad("kv_projection_len: must be positive");
    if (a.n_heads < 1) bad("n_heads: must be positive");
    if (a.deform_kernel < 1 || a.deform_kernel % 2 == 0)
        bad("deform_kernel: must be odd positive");
    if (a.lka_kernels[0] % 2 == 0 || a.lka_kernels[1] % 2 == 0)
        bad("lka_kernels: kernels must be odd");
    if (a.lka_kernels[2] < 1) bad("lka_kernels: dilation must be positive");
    if (!v.empty()) return v;

    Axis3 d = a.patch_size;
    for (size_t s = 0; s < a.downsample.size(); ++s) {
        for (int i = 0; i < 3; ++i) {
            int f = a.downsample[s][i];
            if (f != 1 && f != 2) {
                bad("downsample: stage " + std::to_string(s) + " axis " + std::to_string(i) +
                    " factor must be 1 or 2");
                continue;
            }
            if (d[i] % f != 0)
                bad("downsample: stage " + std::to_string(s) + " axis " + std::to_string(i) +
                    ": " + std::to_string(d[i]) + " not divisible by " + std::to_string(f));
            d[i] /= f;
        }
    }
    auto res = stage_resolutions(a);
    for (size_t s = 0; s < a.schedule.size(); ++s) {
        size_t stage = a.n_cnn_stages + s;
        int w = a.stage_widths[stage];
        if (w % a.n_heads != 0)
            bad("n_heads: hybrid stage " + std::to_string(stage) + " width " +
                std::to_string(w) + " not divisible by " + std::to_string(a.n_heads));
        if (a.schedule.vit_kinds[s] == VitKind::S) {
            int64_t n = tokens_of(res[stage]);
            if (effective_p(a, n) < 1)
                bad("kv_projection_len: hybrid stage " + std::to_string(stage) + " has only " +
                    std::to_string(n) + " tokens, spatial attention needs >= 2");
        }
    }
    return v;
}

// ---------------------------------------------------------------------------

struct TrainSpec {
    double base_lr = 0.01;
    double momentum = 0.99;
    double weight_decay = 3e-5;
    int epochs = 1000;
    int iters_per_epoch = 250;
    double poly_power = 0.9;
    int batch_size = 2;
    double dice_weight = 1.0;
    double ce_weight = 1.0;
    bool dice_include_background = false;
    bool augment = true;

    bool operator==(const TrainSpec&) const = default;
};

struct DataSpec {
    std::string dir;

    bool operator==(const DataSpec&) const = default;
};

struct Config {
    ArchSpec arch;
    TrainSpec train;
    DataSpec data;
};

// ---------------------------------------------------------------------------
// presets
// ---------------------------------------------------------------------------

inline std::vector<std::string> preset_names() {
    return {"synapse", "lung", "brats", "la", "toy8", "micro"};
}

inline Config preset(const std::string& name) {
    Config c;
    ArchSpec& a = c.arch;
    TrainSpec& t = c.train;
    if (name == "brats") {
        a.in_channels = 4;
        a.out_channels = 3;
        a.patch_size = {128, 128, 128};
        t.base_lr = 0.01;
    } else if (name == "la") {
        a.in_channels = 1;
        a.out_channels = 2;
        a.patch_size = {96, 96, 96};
        t.base_lr = 0.01;
    } else if (name == "synapse") {
        a.in_channels = 1;
        a.out_channels = 14;
        a.patch_size = {128, 128, 64};
        a.downsample = {{2, 2, 1}, {2, 2, 2}, {2, 2, 2}, {2, 2, 2}, {2, 2, 2}};
        t.base_lr = 0.003;
    } else if (name == "lung") {
        a.in_channels = 1;
        a.out_channels = 2;
        a.patch_size = {192, 192, 32};
        a.downsample = {{2, 2, 1}, {2, 2, 1}, {2, 2, 2}, {2, 2, 2}, {2, 2, 2}};
        t.base_lr = 0.003;
    } else if (name == "toy8") {
        a.in_channels = 2;
        a.out_channels = 3;
        a.patch_size = {32, 32, 32};
        a.stage_widths = {9, 18, 32, 64};
        a.downsample = {{2, 2, 2}, {2, 2, 2}, {2, 2, 2}, {2, 2, 2}};
        a.schedule = schedule_or_throw("SC-DD");
        a.kv_projection_len = 16;
        t.base_lr = 0.01;
        t.epochs = 6;
        t.iters_per_epoch = 100;
        t.augment = false;
    } else if (name == "micro") {
        a.in_channels = 1;
        a.out_channels = 2;
        a.patch_size = {8, 8, 8};
        a.stage_widths = {2, 4, 4};
        a.downsample = {{2, 2, 2}, {2, 2, 2}, {1, 1, 1}};
        a.n_cnn_stages = 2;
        a.schedule = schedule_or_throw("S-D");
        a.kv_projection_len = 4;
        a.n_heads = 2;
        t.base_lr = 0.01;
        t.epochs = 2;
        t.iters_per_epoch = 50;
        t.batch_size = 1;
        t.augment = false;
    } else {
        throw std::runtime_error("unknown preset: " + name);
    }
    require(validate(a).empty(), "preset " + name + " failed validation");
    return c;
}

// Swap in a different schedule, resizing the stage list to match: extra
// stages are dropped from the deep end, added stages double the last width
// and keep uniform (2,2,2) pooling where the patch allows it.
inline ArchSpec with_schedule(const ArchSpec& base, const AttentionSchedule& sched) {
    ArchSpec a = base;
    a.schedule = sched;
    int want = a.n_cnn_stages + (int)sched.size();
    while ((int)a.stage_widths.size() > want) {
        a.stage_widths.pop_back();
        a.downsample.pop_back();
    }
    auto rem = [&]() {
        Axis3 d = a.patch_size;
        for (const Axis3& f : a.downsample)
            for (int i = 0; i < 3; ++i) d[i] /= f[i];
        return d;
    };
    while ((int)a.stage_widths.size() < want) {
        a.stage_widths.push_back(a.stage_widths.back() * 2);
        Axis3 d = rem();
        Axis3 f;
        for (int i = 0; i < 3; ++i) f[i] = (d[i] % 2 == 0 && d[i] >= 2) ? 2 : 1;
        a.downsample.push_back(f);
    }
    return a;
}

// ---------------------------------------------------------------------------
// JSON serialization of the config tree {arch, train, data}
// ---------------------------------------------------------------------------

inline json to_json(const ArchSpec& a) {
    json j;
    j["in_channels"] = a.in_channels;
    j["out_channels"] = a.out_channels;
    j["patch_size"] = a.patch_size;
    j["stage_widths"] = a.stage_widths;
    j["downsample"] = a.downsample;
    j["n_cnn_stages"] = a.n_cnn_stages;
    j["schedule"] = render_schedule(a.schedule);
    j["kv_projection_len"] = a.kv_projection_len;
    j["n_heads"] = a.n_heads;
    j["lka_kernels"] = a.lka_kernels;
    j["deform_kernel"] = a.deform_kernel;
    return j;
}

inline json to_json(const TrainSpec& t) {
    json j;
    j["base_lr"] = t.base_lr;
    j["momentum"] = t.momentum;
    j["weight_decay"] = t.weight_decay;
    j["epochs"] = t.epochs;
    j["iters_per_epoch"] = t.iters_per_epoch;
    j["poly_power"] = t.poly_power;
    j["batch_size"] = t.batch_size;
    j["loss_weights"] = {t.dice_weight, t.ce_weight};
    j["dice_include_background"] = t.dice_include_background;
    j["augment"] = t.augment;
    return j;
}

inline json to_json(const Config& c) {
    json j;
    j["arch"] = to_json(c.arch);
    j["train"] = to_json(c.train);
    j["data"] = {{"dir", c.data.dir}};
    return j;
}

namespace detail {

inline void reject_unknown(const json& j, const std::vector<std::string>& known,
                           const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool found = false;
        for (const auto& k : known)
            if (it.key() == k) {
                found = true;
                break;
            }
        require(found, "config: unknown key \"" + it.key() + "\" under " + where);
    }
}

template <class T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

// Field-wise override of `c` from a parsed config tree; unknown keys throw.
inline void apply_config_json(Config& c, const json& j) {
    detail::reject_unknown(j, {"arch", "train", "data"}, "root");
    if (j.contains("arch")) {
        const json& a = j.at("arch");
        detail::reject_unknown(a,
                               {"in_channels", "out_channels", "patch_size", "stage_widths",
                                "downsample", "n_cnn_stages", "schedule", "kv_projection_len",
                                "n_heads", "lka_kernels", "deform_kernel"},
                               "arch");
        detail::maybe(a, "in_channels", c.arch.in_channels);
        detail::maybe(a, "out_channels", c.arch.out_channels);
        detail::maybe(a, "patch_size", c.arch.patch_size);
        detail::maybe(a, "stage_widths", c.arch.stage_widths);
        detail::maybe(a, "downsample", c.arch.downsample);
        detail::maybe(a, "n_cnn_stages", c.arch.n_cnn_stages);
        if (a.contains("schedule")) c.arch.schedule = schedule_or_throw(a.at("schedule").get<std::string>());
        detail::maybe(a, "kv_projection_len", c.arch.kv_projection_len);
        detail::maybe(a, "n_heads", c.arch.n_heads);
        detail::maybe(a, "lka_kernels", c.arch.lka_kernels);
        detail::maybe(a, "deform_kernel", c.arch.deform_kernel);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        detail::reject_unknown(t,
                               {"base_lr", "momentum", "weight_decay", "epochs",
                                "iters_per_epoch", "poly_power", "batch_size", "loss_weights",
                                "dice_include_background", "augment"},
                               "train");
        detail::maybe(t, "base_lr", c.train.base_lr);
        detail::maybe(t, "momentum", c.train.momentum);
        detail::maybe(t, "weight_decay", c.train.weight_decay);
        detail::maybe(t, "epochs", c.train.epochs);
        detail::maybe(t, "iters_per_epoch", c.train.iters_per_epoch);
        detail::maybe(t, "poly_power", c.train.poly_power);
        detail::maybe(t, "batch_size", c.train.batch_size);
        if (t.contains("loss_weights")) {
            auto lw = t.at("loss_weights").get<std::vector<double>>();
            require(lw.size() == 2, "config: loss_weights needs two entries");
            c.train.dice_weight = lw[0];
            c.train.ce_weight = lw[1];
        }
        detail::maybe(t, "dice_include_background", c.train.dice_include_background);
        detail::maybe(t, "augment", c.train.augment);
    }
    if (j.contains("data")) {
        const json& d = j.at("data");
        detail::reject_unknown(d, {"dir"}, "data");
        detail::maybe(d, "dir", c.data.dir);
    }
}

// FNV-1a over the canonical arch serialization; used to pair checkpoints
// with the architecture they were saved from.
inline uint64_t arch_hash(const ArchSpec& a) {
    std::string s = to_json(a).dump();
    uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string arch_hash_hex(const ArchSpec& a) {
    std::ostringstream os;
    os << std::hex << arch_hash(a);
    return os.str();
}

inline ArchSpec arch_from_json(const json& a) {
    Config c;
    json wrap;
    wrap["arch"] = a;
    apply_config_json(c, wrap);
    return c.arch;
}

}  // namespace lhunet
