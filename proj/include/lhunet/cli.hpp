#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lhunet/analyzer.hpp"
#include "lhunet/dataio.hpp"
#include "lhunet/inference.hpp"
#include "lhunet/metrics.hpp"
#include "lhunet/trainer.hpp"

namespace lhunet::cli {

// Exit codes: 0 success, 2 usage error, 1 runtime failure.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string fmt_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline std::string human_count(double v) {
    char buf[64];
    if (v >= 1e9)
        std::snprintf(buf, sizeof buf, "%.2fG", v / 1e9);
    else if (v >= 1e6)
        std::snprintf(buf, sizeof buf, "%.2fM", v / 1e6);
    else if (v >= 1e3)
        std::snprintf(buf, sizeof buf, "%.2fk", v / 1e3);
    else
        std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

inline void write_text_file(const std::string& path, const std::string& text) {
    iodetail::write_all(path, text.data(), text.size());
}

// Machine-readable output goes to --out when given, otherwise to stdout.
inline void deliver(const std::string& out_path, const std::string& text) {
    if (out_path.empty())
        std::fputs(text.c_str(), stdout);
    else
        write_text_file(out_path, text);
}

}  // namespace detail

struct CommonOpts {
    std::string preset_name;
    std::string config_path;
    std::string schedule;
    uint64_t seed = 0;
    int64_t iters = 0;
    std::string out;
    std::string format = "text";
    std::string data;
};

inline void add_common(CLI::App* sub, CommonOpts& o, const std::string& default_preset) {
    o.preset_name = default_preset;
    sub->add_option("--preset", o.preset_name, "named preset (brats, la, synapse, lung, toy8, micro)")
        ->capture_default_str();
    sub->add_option("--config", o.config_path, "JSON file with config overrides");
    sub->add_option("--schedule", o.schedule, "attention schedule override, e.g. SSC-DDD");
    sub->add_option("--seed", o.seed, "deterministic seed")->capture_default_str();
    sub->add_option("--iters", o.iters, "iterations per epoch override");
    sub->add_option("--out", o.out, "output file or directory for machine-readable results");
    sub->add_option("--format", o.format, "machine-readable format")
        ->check(CLI::IsMember({"text", "csv", "json"}))
        ->capture_default_str();
    sub->add_option("--data", o.data, "dataset directory");
}

inline Config resolve(const CommonOpts& o) {
    Config c;
    try {
        c = preset(o.preset_name);
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    if (!o.config_path.empty()) {
        try {
            std::vector<char> text = iodetail::read_all(o.config_path);
            apply_config_json(c, json::parse(text.begin(), text.end()));
        } catch (const std::exception& e) {
            throw UsageError(std::string("config: ") + e.what());
        }
    }
    if (!o.schedule.empty()) {
        ScheduleParse p = parse_schedule(o.schedule);
        if (!p.ok) throw UsageError(p.error);
        c.arch = with_schedule(c.arch, p.schedule);
    }
    if (o.iters > 0) c.train.iters_per_epoch = (int)o.iters;
    std::vector<std::string> errs = validate(c.arch);
    if (!errs.empty()) {
        std::string msg = "invalid architecture:";
        for (const auto& e : errs) msg += "\n  " + e;
        throw UsageError(msg);
    }
    return c;
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

namespace detail {

inline std::string analyze_csv(const CostReport& rep) {
    std::string out = "layer,stage,params,flops,out_shape\n";
    for (const CostRow& r : rep.rows)
        out += r.layer + "," + r.stage + "," + std::to_string(r.params) + "," + fmt_g(r.flops) +
               "," + r.out_shape + "\n";
    out += "total,," + std::to_string(rep.total_params) + "," + fmt_g(rep.total_flops) + ",\n";
    return out;
}

inline std::string analyze_text(const std::string& schedule, const CostReport& rep) {
    std::string out = "schedule " + schedule + "\n";
    out += "total_params " + std::to_string(rep.total_params) + "\n";
    out += "total_flops " + fmt_g(rep.total_flops) + "\n";
    for (const CostRow& r : rep.rows)
        out += r.layer + " stage=" + r.stage + " params=" + std::to_string(r.params) +
               " flops=" + fmt_g(r.flops) + " out=" + r.out_shape + "\n";
    return out;
}

inline json analyze_json(const std::string& schedule, const CostReport& rep) {
    json rows = json::array();
    for (const CostRow& r : rep.rows)
        rows.push_back({{"layer", r.layer},
                        {"stage", r.stage},
                        {"params", r.params},
                        {"flops", r.flops},
                        {"out_shape", r.out_shape}});
    return json{{"schedule", schedule},
                {"total_params", rep.total_params},
                {"total_flops", rep.total_flops},
                {"rows", rows}};
}

}  // namespace detail

inline int cmd_analyze(const CommonOpts& o) {
    Config c = resolve(o);
    auto t0 = std::chrono::steady_clock::now();
    CostReport rep = analyze(c.arch, 1);
    double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
    std::string sched = render_schedule(c.arch.schedule);

    std::string text;
    if (o.format == "csv")
        text = detail::analyze_csv(rep);
    else if (o.format == "json")
        text = detail::analyze_json(sched, rep).dump(2) + "\n";
    else
        text = detail::analyze_text(sched, rep);
    detail::deliver(o.out, text);

    std::printf("analyze: preset=%s schedule=%s params=%s (%lld) flops=%s (%.6g) in %.1f ms\n",
                o.preset_name.c_str(), sched.c_str(),
                detail::human_count((double)rep.total_params).c_str(),
                (long long)rep.total_params, detail::human_count(rep.total_flops).c_str(),
                rep.total_flops, ms);
    if (!o.out.empty()) std::printf("analyze: wrote %s\n", o.out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// phantom generation and the shared phantom cache
// ---------------------------------------------------------------------------

inline std::string phantom_cache_dir() {
    const char* env = std::getenv("LHUNET_CACHE_DIR");
    std::string dir = env && *env
                          ? std::string(env)
                          : (std::filesystem::temp_directory_path() / "lhunet_cache").string();
    std::filesystem::create_directories(dir);
    return dir;
}

// Replicates the single-channel phantom image to the requested channel count
// and flattens the label volume, producing an in-memory training case.
inline TrainCase phantom_to_case(const std::string& id, const VolumeRecord& img,
                                 const VolumeRecord& lab, int channels) {
    int64_t D = img.fdata.shape[1], H = img.fdata.shape[2], W = img.fdata.shape[3];
    TrainCase c;
    c.id = id;
    c.image = Tensor<float>({channels, D, H, W});
    int64_t vox = D * H * W;
    for (int ch = 0; ch < channels; ++ch)
        std::copy(img.fdata.data.begin(), img.fdata.data.begin() + vox,
                  c.image.data.begin() + ch * vox);
    c.label = Tensor<uint8_t>({D, H, W});
    c.label.data = lab.udata.data;
    return c;
}

// Deterministic toy training set, cached under LHUNET_CACHE_DIR.
inline std::vector<TrainCase> phantom_training_cases(const ArchSpec& arch, int n, Axis3 shape,
                                                     double noise, uint64_t seed0) {
    PhantomSpec spec;
    spec.shape = shape;
    spec.n_blobs = 3;
    spec.radius_min = 3.0;
    spec.radius_max = 6.0;
    int n_fg = std::max(1, arch.out_channels - 1);
    spec.class_intensity.clear();
    for (int c = 1; c <= n_fg; ++c)
        spec.class_intensity.push_back(0.3 + 0.7 * (double)c / (double)n_fg);
    spec.noise = noise;

    char key[160];
    std::snprintf(key, sizeof key, "ph_%dx%dx%d_n%d_fg%d_ch%d_noise%g_seed%llu", shape[0],
                  shape[1], shape[2], n, n_fg, arch.in_channels, noise,
                  (unsigned long long)seed0);
    std::string dir = phantom_cache_dir() + "/" + key;

    std::vector<TrainCase> cases;
    bool cached = std::filesystem::exists(dir) && (int)list_cases(dir).size() == n;
    for (int i = 0; i < n; ++i) {
        std::string id = "phantom" + std::to_string(i);
        if (cached) {
            cases.push_back(load_case(dir, id));
            continue;
        }
        spec.seed = seed0 + (uint64_t)i;
        auto [img, lab] = make_phantom(spec);
        save_case(dir, id, img, lab);
        cases.push_back(phantom_to_case(id, img, lab, arch.in_channels));
    }
    if (cached)
        for (auto& c : cases)
            if (c.image.shape[0] != arch.in_channels) {
                VolumeRecord img;
                img.fdata = std::move(c.image);
                VolumeRecord lab;
                lab.udata = Tensor<uint8_t>(
                    {1, c.label.shape[0], c.label.shape[1], c.label.shape[2]});
                lab.udata.data = std::move(c.label.data);
                c = phantom_to_case(c.id, img, lab, arch.in_channels);
            }
    return cases;
}

struct PhantomOpts {
    CommonOpts common;
    std::string spec_path;
};

inline int cmd_phantom(const PhantomOpts& o) {
    std::vector<char> text;
    try {
        text = iodetail::read_all(o.spec_path);
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    json j;
    PhantomSpec spec;
    int count = 1, channels = 1;
    try {
        j = json::parse(text.begin(), text.end());
        if (j.contains("shape")) spec.shape = j["shape"].get<Axis3>();
        if (j.contains("n_blobs")) spec.n_blobs = j["n_blobs"].get<int>();
        if (j.contains("radius")) {
            auto r = j["radius"].get<std::array<double, 2>>();
            spec.radius_min = r[0];
            spec.radius_max = r[1];
        }
        if (j.contains("intensities"))
            spec.class_intensity = j["intensities"].get<std::vector<double>>();
        if (j.contains("noise")) spec.noise = j["noise"].get<double>();
        if (j.contains("seed")) spec.seed = j["seed"].get<uint64_t>();
        if (j.contains("count")) count = j["count"].get<int>();
        if (j.contains("channels")) channels = j["channels"].get<int>();
    } catch (const std::exception& e) {
        throw UsageError(std::string("phantom spec: ") + e.what());
    }
    if (o.common.out.empty()) throw UsageError("phantom: --out directory is required");
    if (count < 1) throw UsageError("phantom: count must be positive");

    uint64_t seed0 = spec.seed + o.common.seed;
    for (int i = 0; i < count; ++i) {
        spec.seed = seed0 + (uint64_t)i;
        auto [img, lab] = make_phantom(spec);
        if (channels > 1) {
            TrainCase c = phantom_to_case("", img, lab, channels);
            img.fdata = std::move(c.image);
        }
        char id[32];
        std::snprintf(id, sizeof id, "case%03d", i);
        save_case(o.common.out, id, img, lab);
    }
    std::printf("phantom: wrote %d case%s to %s\n", count, count == 1 ? "" : "s",
                o.common.out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

struct SplitOpts {
    CommonOpts common;
    int folds = 0;
    double ratio = 0.8;
};

inline int cmd_split(const SplitOpts& o) {
    if (o.common.data.empty()) throw UsageError("split: --data (or --dir) is required");
    std::vector<std::string> ids = list_cases(o.common.data);
    if (ids.empty()) throw std::runtime_error("split: no cases found in " + o.common.data);
    SplitManifest m;
    if (o.folds > 0) {
        if ((size_t)o.folds > ids.size())
            throw UsageError("split: more folds than cases");
        m = split_kfold(ids, o.folds, o.common.seed);
    } else {
        m = split_ratio(ids, o.ratio, o.common.seed);
    }
    std::string path = o.common.out.empty() ? o.common.data + "/splits.json" : o.common.out;
    write_manifest(path, m);
    if (o.folds > 0)
        std::printf("split: %zu cases into %d folds -> %s\n", ids.size(), o.folds, path.c_str());
    else
        std::printf("split: %zu cases into %zu train / %zu val -> %s\n", ids.size(),
                    m.train.size(), m.val.size(), path.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline int cmd_train(const CommonOpts& o) {
    if (o.data.empty()) throw UsageError("train: --data is required");
    Config c = resolve(o);
    std::vector<std::string> ids = list_cases(o.data);
    if (ids.empty()) throw std::runtime_error("train: no cases found in " + o.data);

    SplitManifest m = split_ratio(ids, 0.8, o.seed);
    std::vector<TrainCase> train_cases, val_cases;
    for (const auto& id : m.train) train_cases.push_back(load_case(o.data, id));
    for (const auto& id : m.val) val_cases.push_back(load_case(o.data, id));

    std::string out_dir = o.out.empty() ? "run" : o.out;
    std::filesystem::create_directories(out_dir);
    detail::write_text_file(out_dir + "/config.json", to_json(c).dump(2) + "\n");

    std::ofstream log(out_dir + "/metrics.log");
    require(log.good(), "train: cannot write " + out_dir + "/metrics.log");
    Trainer<float> trainer(c, o.seed);
    TrainResult res = trainer.fit(train_cases, val_cases, out_dir, &log);
    log.close();

    std::printf("train: %zu train / %zu val cases, %d epochs x %d iters\n", train_cases.size(),
                val_cases.size(), c.train.epochs, c.train.iters_per_epoch);
    std::printf("train: best %s %.6f at epoch %d; checkpoints %s.{json,bin}, %s.{json,bin}\n",
                val_cases.empty() ? "train_dice" : "val_dice", res.best_metric, res.best_epoch,
                res.best_prefix.c_str(), res.last_prefix.c_str());
    std::printf("train: metrics log %s/metrics.log\n", out_dir.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

struct InferOpts {
    CommonOpts common;
    std::string ckpt, in_path;
};

inline ArchSpec arch_from_checkpoint(const std::string& prefix) {
    std::vector<char> text = iodetail::read_all(prefix + ".json");
    json manifest = json::parse(text.begin(), text.end());
    require(manifest.value("format", "") == "lhunet-checkpoint",
            prefix + ".json is not a checkpoint manifest");
    Config c;
    json wrap;
    wrap["arch"] = manifest.at("arch");
    apply_config_json(c, wrap);
    return c.arch;
}

inline int cmd_infer(const InferOpts& o) {
    ArchSpec arch = arch_from_checkpoint(o.ckpt);
    Network<float> net(arch, 0);
    net.load(o.ckpt);

    bool nifti = o.in_path.size() > 4 && o.in_path.substr(o.in_path.size() - 4) == ".nii";
    VolumeRecord vol = nifti ? read_nifti(o.in_path) : read_volume(o.in_path);
    require(vol.dtype == "float32", "infer: input volume must be float32");
    Tensor<float> probs = sliding_window_predict(net, vol.fdata);
    Tensor<uint8_t> labels = argmax_labels(probs);

    VolumeRecord out;
    out.dtype = "uint8";
    out.spacing = vol.spacing;
    out.udata = Tensor<uint8_t>({1, labels.shape[0], labels.shape[1], labels.shape[2]});
    out.udata.data = std::move(labels.data);
    std::string out_base = o.common.out.empty() ? o.in_path + ".pred" : o.common.out;
    write_volume(out_base, out);

    std::vector<int64_t> counts(arch.out_channels, 0);
    for (uint8_t v : out.udata.data) counts[v]++;
    Axis3 vd = {(int)vol.fdata.shape[1], (int)vol.fdata.shape[2], (int)vol.fdata.shape[3]};
    Axis3 pd = arch.patch_size;
    size_t n_windows = plan_windows({std::max(vd[0], pd[0]), std::max(vd[1], pd[1]),
                                     std::max(vd[2], pd[2])},
                                    pd)
                           .origins.size();
    std::printf("infer: %zu window%s over %dx%dx%d -> %s.{json,raw}\n", n_windows,
                n_windows == 1 ? "" : "s", vd[0], vd[1], vd[2], out_base.c_str());
    std::string summary = "infer: voxels per class";
    for (int k = 0; k < arch.out_channels; ++k)
        summary += " " + std::to_string(k) + ":" + std::to_string(counts[(size_t)k]);
    std::printf("%s\n", summary.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateOpts {
    CommonOpts common;
    std::string pred, gt, classes;
};

inline std::vector<ClassSpec> parse_classes(const std::string& text) {
    std::vector<ClassSpec> out;
    size_t at = 0;
    while (at <= text.size()) {
        size_t end = text.find(';', at);
        if (end == std::string::npos) end = text.size();
        std::string token = text.substr(at, end - at);
        at = end + 1;
        if (token.empty()) continue;
        std::string name = token, labels = token;
        size_t eq = token.find('=');
        if (eq != std::string::npos) {
            name = token.substr(0, eq);
            labels = token.substr(eq + 1);
        }
        ClassSpec cs;
        cs.name = name;
        size_t p = 0;
        while (p <= labels.size()) {
            size_t comma = labels.find(',', p);
            if (comma == std::string::npos) comma = labels.size();
            std::string num = labels.substr(p, comma - p);
            p = comma + 1;
            if (num.empty()) continue;
            try {
                size_t used = 0;
                int v = std::stoi(num, &used);
                if (used != num.size() || v < 0) throw std::invalid_argument(num);
                cs.labels.push_back(v);
            } catch (const std::exception&) {
                throw UsageError("evaluate: bad label '" + num + "' in --classes");
            }
        }
        if (cs.labels.empty()) throw UsageError("evaluate: empty class in --classes");
        out.push_back(std::move(cs));
    }
    if (out.empty()) throw UsageError("evaluate: --classes parsed to nothing");
    return out;
}

namespace detail {

inline Tensor<uint8_t> squeeze_labels(const VolumeRecord& rec, const std::string& which) {
    require(rec.dtype == "uint8", which + " volume must be uint8 labels");
    require(rec.udata.rank() == 4 && rec.udata.shape[0] == 1,
            which + " volume must be single-channel (1,D,H,W)");
    Tensor<uint8_t> out({rec.udata.shape[1], rec.udata.shape[2], rec.udata.shape[3]});
    out.data = rec.udata.data;
    return out;
}

inline std::string evaluate_csv(const SegMetrics& m) {
    std::string out = "class,dsc,hd95,hd95_penalized\n";
    for (const ClassMetrics& c : m.per_class)
        out += c.name + "," + fmt_g(c.dsc) + "," + fmt_g(c.hd95) + "," +
               (c.hd95_penalized ? "1" : "0") + "\n";
    out += "mean," + fmt_g(m.mean_dsc) + "," + fmt_g(m.mean_hd95) + ",\n";
    return out;
}

inline std::string evaluate_text(const SegMetrics& m) {
    std::string out;
    for (const ClassMetrics& c : m.per_class)
        out += "class " + c.name + " dsc " + fmt_g(c.dsc) + " hd95 " + fmt_g(c.hd95) +
               (c.hd95_penalized ? " (penalized: one side empty)" : "") + "\n";
    out += "mean dsc " + fmt_g(m.mean_dsc) + " hd95 " + fmt_g(m.mean_hd95) + "\n";
    return out;
}

inline json evaluate_json(const SegMetrics& m) {
    json classes = json::array();
    for (const ClassMetrics& c : m.per_class)
        classes.push_back({{"name", c.name},
                           {"dsc", c.dsc},
                           {"hd95", c.hd95},
                           {"hd95_penalized", c.hd95_penalized}});
    return json{{"classes", classes}, {"mean_dsc", m.mean_dsc}, {"mean_hd95", m.mean_hd95}};
}

}  // namespace detail

inline int cmd_evaluate(const EvaluateOpts& o) {
    VolumeRecord pv = read_volume(o.pred);
    VolumeRecord gv = read_volume(o.gt);
    Tensor<uint8_t> pred = detail::squeeze_labels(pv, "pred");
    Tensor<uint8_t> gt = detail::squeeze_labels(gv, "gt");

    std::vector<ClassSpec> classes;
    if (!o.classes.empty()) {
        classes = parse_classes(o.classes);
    } else {
        int mx = 0;
        for (uint8_t v : gt.data) mx = std::max(mx, (int)v);
        for (uint8_t v : pred.data) mx = std::max(mx, (int)v);
        classes = default_classes(std::max(2, mx + 1));
    }
    Spacing sp = {gv.spacing[0], gv.spacing[1], gv.spacing[2]};
    SegMetrics m = evaluate_labels(pred, gt, classes, sp);

    std::string text;
    if (o.common.format == "csv")
        text = detail::evaluate_csv(m);
    else if (o.common.format == "json")
        text = detail::evaluate_json(m).dump(2) + "\n";
    else
        text = detail::evaluate_text(m);
    detail::deliver(o.common.out, text);
    std::printf("evaluate: %zu class%s mean_dsc %.6f mean_hd95 %.6f\n", classes.size(),
                classes.size() == 1 ? "" : "es", m.mean_dsc, m.mean_hd95);
    if (!o.common.out.empty()) std::printf("evaluate: wrote %s\n", o.common.out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblateOpts {
    CommonOpts common;
    std::string schedules;
    int64_t budget = 0;
};

inline const std::vector<std::string>& default_ablation_schedules() {
    static const std::vector<std::string> all = {"SSS-DDD", "CCC-DDD", "SSC-DDD", "SCC-DDD",
                                                 "SSC-DDI", "SSC-III", "SSC-LLL", "SC-DD"};
    return all;
}

struct AblateRow {
    std::string schedule;
    int64_t params = 0;
    double flops = 0;
    double toy_dice = -1;  // < 0 when the row is cost-only
};

namespace detail {

inline std::string ablate_csv(const std::vector<AblateRow>& rows) {
    std::string out = "schedule,params,flops,toy_dice\n";
    for (const AblateRow& r : rows)
        out += r.schedule + "," + std::to_string(r.params) + "," + fmt_g(r.flops) + "," +
               (r.toy_dice >= 0 ? fmt_g(r.toy_dice) : "") + "\n";
    return out;
}

inline std::string ablate_text(const std::vector<AblateRow>& rows) {
    std::string out;
    for (const AblateRow& r : rows) {
        out += r.schedule + " params=" + std::to_string(r.params) + " flops=" + fmt_g(r.flops);
        if (r.toy_dice >= 0) out += " toy_dice=" + fmt_g(r.toy_dice);
        out += "\n";
    }
    return out;
}

inline json ablate_json(const std::string& preset_name, int64_t budget,
                        const std::vector<AblateRow>& rows) {
    json arr = json::array();
    for (const AblateRow& r : rows) {
        json e = {{"schedule", r.schedule}, {"params", r.params}, {"flops", r.flops}};
        if (r.toy_dice >= 0) e["toy_dice"] = r.toy_dice;
        arr.push_back(e);
    }
    return json{{"preset", preset_name}, {"budget", budget}, {"rows", arr}};
}

}  // namespace detail

inline int cmd_ablate(const AblateOpts& o) {
    std::vector<std::string> schedules;
    if (o.schedules.empty()) {
        schedules = default_ablation_schedules();
    } else {
        size_t at = 0;
        while (at <= o.schedules.size()) {
            size_t comma = o.schedules.find(',', at);
            if (comma == std::string::npos) comma = o.schedules.size();
            std::string s = o.schedules.substr(at, comma - at);
            if (!s.empty()) schedules.push_back(s);
            at = comma + 1;
        }
        if (schedules.empty()) throw UsageError("ablate: --schedules parsed to nothing");
    }
    // validate the whole grid before any costing or training starts
    for (const auto& s : schedules) {
        ScheduleParse p = parse_schedule(s);
        if (!p.ok) throw UsageError("ablate: " + p.error);
    }
    if (o.budget < 0) throw UsageError("ablate: budget must be >= 0");

    Config base = resolve(o.common);
    std::vector<AblateRow> rows;
    for (const auto& s : schedules) {
        ArchSpec a = with_schedule(base.arch, schedule_or_throw(s));
        CostReport rep = analyze(a, 1);
        rows.push_back({s, rep.total_params, rep.total_flops, -1});
    }

    if (o.budget > 0) {
        std::string run_dir = phantom_cache_dir() + "/ablate_run";
        for (size_t i = 0; i < schedules.size(); ++i) {
            Config tcfg = preset("toy8");
            tcfg.arch = with_schedule(tcfg.arch, schedule_or_throw(schedules[i]));
            tcfg.train.epochs = 1;
            tcfg.train.iters_per_epoch = (int)o.budget;
            std::vector<TrainCase> cases =
                phantom_training_cases(tcfg.arch, 4, {40, 40, 40}, 0.05, 1000 + o.common.seed);
            Trainer<float> tr(tcfg, o.common.seed);
            TrainResult res = tr.fit(cases, {}, run_dir, nullptr);
            rows[i].toy_dice = res.best_metric;
            std::printf("ablate: %s toy_dice %.6f after %lld iters\n", schedules[i].c_str(),
                        res.best_metric, (long long)o.budget);
        }
        double ssc_ddd = -1, ssc_iii = -1;
        for (const AblateRow& r : rows) {
            if (r.schedule == "SSC-DDD") ssc_ddd = r.toy_dice;
            if (r.schedule == "SSC-III") ssc_iii = r.toy_dice;
        }
        if (ssc_ddd >= 0 && ssc_iii >= 0)
            std::printf("ablate: directional check (logged, not asserted): "
                        "SSC-DDD %.6f %s SSC-III %.6f\n",
                        ssc_ddd, ssc_ddd >= ssc_iii ? ">=" : "<", ssc_iii);
    }

    std::string text;
    if (o.common.format == "csv")
        text = detail::ablate_csv(rows);
    else if (o.common.format == "json")
        text = detail::ablate_json(o.common.preset_name, o.budget, rows).dump(2) + "\n";
    else
        text = detail::ablate_text(rows);
    detail::deliver(o.common.out, text);
    if (!o.common.out.empty())
        std::printf("ablate: %zu rows -> %s\n", rows.size(), o.common.out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

inline int run(int argc, char** argv) {
    CLI::App app{"lhunet: lean hybrid U-Net toolkit"};
    app.require_subcommand(1);

    CommonOpts o_analyze;
    CLI::App* analyze_cmd = app.add_subcommand("analyze", "parameter and FLOP breakdown");
    add_common(analyze_cmd, o_analyze, "brats");

    CommonOpts o_train;
    CLI::App* train_cmd = app.add_subcommand("train", "train on a dataset directory");
    add_common(train_cmd, o_train, "toy8");

    InferOpts o_infer;
    CLI::App* infer_cmd = app.add_subcommand("infer", "sliding-window inference");
    add_common(infer_cmd, o_infer.common, "brats");
    infer_cmd->add_option("--ckpt", o_infer.ckpt, "checkpoint prefix")->required();
    infer_cmd->add_option("--in", o_infer.in_path, "input volume base path")->required();

    EvaluateOpts o_eval;
    CLI::App* eval_cmd = app.add_subcommand("evaluate", "Dice and HD95 metrics");
    add_common(eval_cmd, o_eval.common, "brats");
    eval_cmd->add_option("--pred", o_eval.pred, "predicted label volume base path")->required();
    eval_cmd->add_option("--gt", o_eval.gt, "ground-truth label volume base path")->required();
    eval_cmd->add_option("--classes", o_eval.classes,
                         "class spec, e.g. 'whole=1,2,3;core=1,3' (default: one per label)");

    AblateOpts o_ablate;
    CLI::App* ablate_cmd = app.add_subcommand("ablate", "attention-schedule comparison table");
    add_common(ablate_cmd, o_ablate.common, "brats");
    ablate_cmd->add_option("--schedules", o_ablate.schedules,
                           "comma-separated schedule strings (default: the 8-row grid)");
    ablate_cmd->add_option("--budget", o_ablate.budget,
                           "toy-training iterations per schedule (0 = cost-only)");

    PhantomOpts o_phantom;
    CLI::App* phantom_cmd = app.add_subcommand("phantom", "generate synthetic labeled volumes");
    add_common(phantom_cmd, o_phantom.common, "brats");
    phantom_cmd->add_option("--spec", o_phantom.spec_path, "phantom spec JSON file")->required();

    SplitOpts o_split;
    CLI::App* split_cmd = app.add_subcommand("split", "write a train/val or k-fold manifest");
    add_common(split_cmd, o_split.common, "brats");
    split_cmd->add_option("--dir", o_split.common.data, "dataset directory (alias of --data)");
    split_cmd->add_option("--folds", o_split.folds, "fold count (0 = ratio split)");
    split_cmd->add_option("--ratio", o_split.ratio, "train fraction for ratio splits")
        ->capture_default_str();

    std::function<int()> action;
    analyze_cmd->callback([&]() { action = [&]() { return cmd_analyze(o_analyze); }; });
    train_cmd->callback([&]() { action = [&]() { return cmd_train(o_train); }; });
    infer_cmd->callback([&]() { action = [&]() { return cmd_infer(o_infer); }; });
    eval_cmd->callback([&]() { action = [&]() { return cmd_evaluate(o_eval); }; });
    ablate_cmd->callback([&]() { action = [&]() { return cmd_ablate(o_ablate); }; });
    phantom_cmd->callback([&]() { action = [&]() { return cmd_phantom(o_phantom); }; });
    split_cmd->callback([&]() { action = [&]() { return cmd_split(o_split); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    if (!action) return 2;
    try {
        return action();
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace lhunet::cli
