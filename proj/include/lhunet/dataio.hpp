#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "lhunet/config.hpp"
#include "lhunet/rng.hpp"
#include "lhunet/tensor.hpp"

namespace lhunet {

// ---------------------------------------------------------------------------
// Volume persistence: <base>.json sidecar + <base>.raw little-endian blob.
// ---------------------------------------------------------------------------

struct VolumeRecord {
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // (sd, sh, sw) in mm
    std::string dtype = "float32";                 // "float32" | "uint8"
    std::vector<std::string> names;                // channel or label names
    Tensor<float> fdata;                           // payload when dtype == "float32"
    Tensor<uint8_t> udata;                         // payload when dtype == "uint8"

    const Shape& shape() const { return dtype == "uint8" ? udata.shape : fdata.shape; }
};

namespace iodetail {

inline void check_dtype(const std::string& dtype) {
    require(dtype == "float32" || dtype == "uint8", "volume: unknown dtype '" + dtype + "'");
}

inline std::vector<char> read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    require(in.good(), "cannot open " + path);
    std::streamsize n = in.tellg();
    in.seekg(0);
    std::vector<char> buf((size_t)n);
    in.read(buf.data(), n);
    require(in.good(), "short read on " + path);
    return buf;
}

// replace-on-rename keeps concurrent readers away from partial writes
inline void write_all(const std::string& path, const char* data, size_t n) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), "cannot open " + tmp);
        out.write(data, (std::streamsize)n);
        require(out.good(), "short write on " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace iodetail

inline void write_volume(const std::string& base, const VolumeRecord& rec) {
    iodetail::check_dtype(rec.dtype);
    const Shape& shape = rec.shape();
    size_t elems = rec.dtype == "uint8" ? rec.udata.data.size() : rec.fdata.data.size();
    require((int64_t)elems == numel_of(shape), "volume: header shape disagrees with payload");
    json j;
    j["format"] = "lhunet-volume";
    j["shape"] = shape;
    j["spacing"] = rec.spacing;
    j["dtype"] = rec.dtype;
    j["names"] = rec.names;
    std::string text = j.dump(2);
    iodetail::write_all(base + ".json", text.data(), text.size());
    if (rec.dtype == "uint8")
        iodetail::write_all(base + ".raw", (const char*)rec.udata.data.data(), elems);
    else
        iodetail::write_all(base + ".raw", (const char*)rec.fdata.data.data(),
                            elems * sizeof(float));
}

inline VolumeRecord read_volume(const std::string& base) {
    std::vector<char> text = iodetail::read_all(base + ".json");
    json j = json::parse(text.begin(), text.end());
    require(j.value("format", "") == std::string("lhunet-volume"),
            "volume: not a volume sidecar: " + base + ".json");
    VolumeRecord rec;
    rec.dtype = j.at("dtype").get<std::string>();
    iodetail::check_dtype(rec.dtype);
    rec.spacing = j.at("spacing").get<std::array<double, 3>>();
    if (j.contains("names")) rec.names = j["names"].get<std::vector<std::string>>();
    Shape shape = j.at("shape").get<Shape>();
    std::vector<char> blob = iodetail::read_all(base + ".raw");
    size_t elem = rec.dtype == "uint8" ? 1 : sizeof(float);
    require(blob.size() == (size_t)numel_of(shape) * elem,
            "volume: blob size disagrees with header shape");
    if (rec.dtype == "uint8") {
        rec.udata = Tensor<uint8_t>(shape);
        std::memcpy(rec.udata.data.data(), blob.data(), blob.size());
    } else {
        rec.fdata = Tensor<float>(shape);
        std::memcpy(rec.fdata.data.data(), blob.data(), blob.size());
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Minimal NIfTI-1 ingestion: single-file uncompressed volumes only, converted
// to a float32 record. The native sidecar+blob pair stays the write format.
// ---------------------------------------------------------------------------

inline VolumeRecord read_nifti(const std::string& path) {
    std::vector<char> buf = iodetail::read_all(path);
    require(buf.size() >= 352, "nifti: file shorter than header");
    auto i32 = [&](size_t off) { int32_t v; std::memcpy(&v, buf.data() + off, 4); return v; };
    auto i16 = [&](size_t off) { int16_t v; std::memcpy(&v, buf.data() + off, 2); return v; };
    auto f32 = [&](size_t off) { float v; std::memcpy(&v, buf.data() + off, 4); return v; };
    require(i32(0) == 348, "nifti: bad header size (byte-swapped files unsupported)");
    require(std::memcmp(buf.data() + 344, "n+1", 3) == 0, "nifti: not a single-file image");

    int ndim = i16(40);
    require(ndim >= 3 && ndim <= 7, "nifti: need a 3-D or 4-D image");
    int64_t nx = i16(42), ny = i16(44), nz = i16(46);
    int64_t nt = ndim >= 4 ? std::max<int64_t>(1, i16(48)) : 1;
    for (int d = 5; d <= ndim; ++d)
        require(i16(40 + 2 * d) <= 1, "nifti: trailing dims must be singleton");
    require(nx >= 1 && ny >= 1 && nz >= 1, "nifti: non-positive dims");

    int16_t datatype = i16(70);
    size_t elem;
    switch (datatype) {
        case 2: elem = 1; break;    // uint8
        case 4: elem = 2; break;    // int16
        case 8: elem = 4; break;    // int32
        case 16: elem = 4; break;   // float32
        case 64: elem = 8; break;   // float64
        default: throw std::runtime_error("nifti: unsupported datatype " + std::to_string(datatype));
    }
    size_t off = (size_t)f32(108);
    require(off >= 348, "nifti: vox_offset inside header");
    int64_t n = nx * ny * nz * nt;
    require(buf.size() >= off + (size_t)n * elem, "nifti: payload truncated");
    float slope = f32(112), inter = f32(116);
    if (slope == 0.0f) { slope = 1.0f; inter = 0.0f; }

    VolumeRecord rec;
    rec.dtype = "float32";
    for (int i = 0; i < 3; ++i) {
        float p = f32(80 + 4 * i);  // pixdim[1..3] = (dx, dy, dz)
        rec.spacing[2 - i] = p > 0.0f ? (double)p : 1.0;
    }
    rec.fdata = Tensor<float>({nt, nz, ny, nx});
    const char* raw = buf.data() + off;
    for (int64_t i = 0; i < n; ++i) {
        double v;
        switch (datatype) {
            case 2: v = (double)*(const uint8_t*)(raw + i); break;
            case 4: { int16_t t; std::memcpy(&t, raw + 2 * i, 2); v = t; } break;
            case 8: { int32_t t; std::memcpy(&t, raw + 4 * i, 4); v = t; } break;
            case 16: { float t; std::memcpy(&t, raw + 4 * i, 4); v = t; } break;
            default: { double t; std::memcpy(&t, raw + 8 * i, 8); v = t; } break;
        }
        rec.fdata.data[i] = (float)(slope * v + inter);
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Synthetic phantoms: ellipsoidal blobs with class-specific intensity.
// ---------------------------------------------------------------------------

struct PhantomSpec {
    Axis3 shape = {32, 32, 32};  // (D, H, W)
    int n_blobs = 4;
    double radius_min = 3.0, radius_max = 6.0;
    std::vector<double> class_intensity = {0.8};  // entry c-1 is the intensity of class c
    double noise = 0.0;
    uint64_t seed = 1;
};

inline std::pair<VolumeRecord, VolumeRecord> make_phantom(const PhantomSpec& spec) {
    require(spec.n_blobs >= 0, "phantom: negative blob count");
    require(spec.radius_min > 0 && spec.radius_max >= spec.radius_min,
            "phantom: bad radius range");
    require(spec.noise >= 0, "phantom: negative noise");
    require(spec.n_blobs == 0 || !spec.class_intensity.empty(),
            "phantom: no class intensities");
    for (int i = 0; i < 3; ++i)
        require(spec.radius_max <= (double)(spec.shape[i] - 1) / 2.0,
                "phantom: blobs cannot fit inside the volume");

    int64_t D = spec.shape[0], H = spec.shape[1], W = spec.shape[2];
    VolumeRecord img, lab;
    img.dtype = "float32";
    img.fdata = Tensor<float>({1, D, H, W});
    lab.dtype = "uint8";
    lab.udata = Tensor<uint8_t>({1, D, H, W});

    Rng rng(spec.seed);
    int n_fg = (int)spec.class_intensity.size();
    for (int b = 0; b < spec.n_blobs; ++b) {
        int cls = 1 + (int)rng.uniform_int(0, n_fg - 1);
        std::array<double, 3> r, c;
        for (int i = 0; i < 3; ++i) {
            r[i] = rng.uniform(spec.radius_min, spec.radius_max);
            c[i] = rng.uniform(r[i], (double)(spec.shape[i] - 1) - r[i]);
        }
        int64_t z0 = (int64_t)std::ceil(c[0] - r[0]), z1 = (int64_t)std::floor(c[0] + r[0]);
        int64_t y0 = (int64_t)std::ceil(c[1] - r[1]), y1 = (int64_t)std::floor(c[1] + r[1]);
        int64_t x0 = (int64_t)std::ceil(c[2] - r[2]), x1 = (int64_t)std::floor(c[2] + r[2]);
        for (int64_t z = std::max<int64_t>(0, z0); z <= std::min(D - 1, z1); ++z)
            for (int64_t y = std::max<int64_t>(0, y0); y <= std::min(H - 1, y1); ++y)
                for (int64_t x = std::max<int64_t>(0, x0); x <= std::min(W - 1, x1); ++x) {
                    double dz = ((double)z - c[0]) / r[0];
                    double dy = ((double)y - c[1]) / r[1];
                    double dx = ((double)x - c[2]) / r[2];
                    if (dz * dz + dy * dy + dx * dx <= 1.0) {
                        int64_t at = (z * H + y) * W + x;
                        lab.udata.data[at] = (uint8_t)cls;  // later blobs overwrite
                        img.fdata.data[at] = (float)spec.class_intensity[cls - 1];
                    }
                }
    }
    if (spec.noise > 0)
        for (auto& v : img.fdata.data) v += (float)(spec.noise * rng.normal());
    return {std::move(img), std::move(lab)};
}

// ---------------------------------------------------------------------------
// Dataset directory convention: <id>.img.{json,raw} + <id>.lab.{json,raw}.
// ---------------------------------------------------------------------------

inline void save_case(const std::string& dir, const std::string& id, const VolumeRecord& img,
                      const VolumeRecord& lab) {
    std::filesystem::create_directories(dir);
    write_volume(dir + "/" + id + ".img", img);
    write_volume(dir + "/" + id + ".lab", lab);
}

inline std::vector<std::string> list_cases(const std::string& dir) {
    namespace fs = std::filesystem;
    std::vector<std::string> ids;
    const std::string tail = ".img.json";
    for (const auto& e : fs::directory_iterator(dir)) {
        std::string name = e.path().filename().string();
        if (name.size() <= tail.size() || name.substr(name.size() - tail.size()) != tail)
            continue;
        std::string id = name.substr(0, name.size() - tail.size());
        if (fs::exists(fs::path(dir) / (id + ".lab.json"))) ids.push_back(id);
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

// ---------------------------------------------------------------------------
// Deterministic dataset splits.
// ---------------------------------------------------------------------------

struct SplitManifest {
    std::vector<std::string> train, val;
    std::vector<std::vector<std::string>> folds;
};

namespace iodetail {

// canonical order first so directory enumeration order cannot leak in
inline std::vector<std::string> shuffled(std::vector<std::string> ids, uint64_t seed) {
    std::sort(ids.begin(), ids.end());
    Rng rng(seed);
    for (size_t i = ids.size(); i > 1; --i)
        std::swap(ids[i - 1], ids[(size_t)rng.uniform_int(0, (int64_t)i - 1)]);
    return ids;
}

}  // namespace iodetail

inline SplitManifest split_ratio(const std::vector<std::string>& ids, double train_frac,
                                 uint64_t seed) {
    require(train_frac >= 0.0 && train_frac <= 1.0, "split: train fraction out of range");
    std::vector<std::string> order = iodetail::shuffled(ids, seed);
    size_t n_train = (size_t)std::llround(train_frac * (double)order.size());
    n_train = std::min(n_train, order.size());
    SplitManifest m;
    m.train.assign(order.begin(), order.begin() + (ptrdiff_t)n_train);
    m.val.assign(order.begin() + (ptrdiff_t)n_train, order.end());
    return m;
}

inline SplitManifest split_kfold(const std::vector<std::string>& ids, int k, uint64_t seed) {
    require(k >= 1 && (size_t)k <= ids.size(), "split: fold count out of range");
    std::vector<std::string> order = iodetail::shuffled(ids, seed);
    SplitManifest m;
    m.folds.resize((size_t)k);
    size_t base = order.size() / (size_t)k, rem = order.size() % (size_t)k;
    size_t at = 0;
    for (int f = 0; f < k; ++f) {
        size_t take = base + ((size_t)f < rem ? 1 : 0);
        m.folds[(size_t)f].assign(order.begin() + (ptrdiff_t)at,
                                  order.begin() + (ptrdiff_t)(at + take));
        at += take;
    }
    return m;
}

inline void write_manifest(const std::string& path, const SplitManifest& m) {
    json j;
    j["format"] = "lhunet-split";
    j["train"] = m.train;
    j["val"] = m.val;
    j["folds"] = m.folds;
    std::string text = j.dump(2);
    iodetail::write_all(path, text.data(), text.size());
}

inline SplitManifest read_manifest(const std::string& path) {
    std::vector<char> text = iodetail::read_all(path);
    json j = json::parse(text.begin(), text.end());
    require(j.value("format", "") == std::string("lhunet-split"),
            "split: not a split manifest: " + path);
    SplitManifest m;
    m.train = j.at("train").get<std::vector<std::string>>();
    m.val = j.at("val").get<std::vector<std::string>>();
    m.folds = j.at("folds").get<std::vector<std::vector<std::string>>>();
    return m;
}

}  // namespace lhunet
