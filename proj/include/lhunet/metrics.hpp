#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "lhunet/tensor.hpp"

namespace lhunet {

using Spacing = std::array<double, 3>;

// ---------------------------------------------------------------------------
// Binary-mask metrics on (D, H, W) uint8 volumes; nonzero means foreground.
// ---------------------------------------------------------------------------

inline double dsc(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt) {
    require(pred.shape == gt.shape, "dsc: shape mismatch");
    int64_t np = 0, ng = 0, ni = 0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        bool a = pred.data[i] != 0, b = gt.data[i] != 0;
        np += a;
        ng += b;
        ni += a && b;
    }
    if (np + ng == 0) return 1.0;
    return 2.0 * (double)ni / (double)(np + ng);
}

namespace metricdetail {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Felzenszwalb-Huttenlocher lower envelope of parabolas, generalized to a
// uniform grid with physical step h. f holds squared distances on entry and
// the transformed values on exit.
inline void dt1d(double* f, int64_t n, int64_t stride, double h, std::vector<int64_t>& v,
                 std::vector<double>& z, std::vector<double>& buf) {
    if (n == 1) return;
    buf.resize(n);
    for (int64_t i = 0; i < n; ++i) buf[i] = f[i * stride];
    v.assign(n, 0);
    z.assign(n + 1, 0);
    int64_t k = 0;
    z[0] = -kInf;
    z[1] = kInf;
    for (int64_t q = 1; q < n; ++q) {
        if (buf[q] == kInf) continue;
        double xq = (double)q * h;
        double s;
        while (true) {
            if (buf[v[k]] == kInf) {
                // an infinite parabola never wins; drop it
                if (k == 0) {
                    v[0] = q;
                    z[0] = -kInf;
                    z[1] = kInf;
                    s = kInf;
                    break;
                }
                --k;
                continue;
            }
            double xv = (double)v[k] * h;
            s = ((buf[q] + xq * xq) - (buf[v[k]] + xv * xv)) / (2.0 * (xq - xv));
            if (s <= z[k]) {
                --k;
                continue;
            }
            break;
        }
        if (s == kInf) continue;  // q became the only parabola
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    k = 0;
    for (int64_t q = 0; q < n; ++q) {
        double xq = (double)q * h;
        while (z[k + 1] < xq) ++k;
        if (buf[v[k]] == kInf) {
            f[q * stride] = kInf;
        } else {
            double d = xq - (double)v[k] * h;
            f[q * stride] = d * d + buf[v[k]];
        }
    }
}

// exact squared anisotropic Euclidean distance to the nearest seed voxel
inline std::vector<double> edt_sq(const std::vector<uint8_t>& seed, int64_t D, int64_t H,
                                  int64_t W, Spacing sp) {
    std::vector<double> f(seed.size());
    for (size_t i = 0; i < seed.size(); ++i) f[i] = seed[i] ? 0.0 : kInf;
    std::vector<int64_t> v;
    std::vector<double> z, buf;
    for (int64_t zz = 0; zz < D; ++zz)                       // along x
        for (int64_t y = 0; y < H; ++y) dt1d(&f[(zz * H + y) * W], W, 1, sp[2], v, z, buf);
    for (int64_t zz = 0; zz < D; ++zz)                       // along y
        for (int64_t x = 0; x < W; ++x) dt1d(&f[zz * H * W + x], H, W, sp[1], v, z, buf);
    for (int64_t y = 0; y < H; ++y)                          // along z
        for (int64_t x = 0; x < W; ++x) dt1d(&f[y * W + x], D, H * W, sp[0], v, z, buf);
    return f;
}

// foreground voxels with a 6-connected background neighbor; outside the
// volume counts as background
inline std::vector<uint8_t> surface(const Tensor<uint8_t>& m) {
    int64_t D = m.shape[0], H = m.shape[1], W = m.shape[2];
    auto fg = [&](int64_t z, int64_t y, int64_t x) {
        if (z < 0 || z >= D || y < 0 || y >= H || x < 0 || x >= W) return false;
        return m.data[(z * H + y) * W + x] != 0;
    };
    std::vector<uint8_t> out(m.data.size(), 0);
    for (int64_t z = 0; z < D; ++z)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                if (fg(z, y, x) &&
                    (!fg(z - 1, y, x) || !fg(z + 1, y, x) || !fg(z, y - 1, x) ||
                     !fg(z, y + 1, x) || !fg(z, y, x - 1) || !fg(z, y, x + 1)))
                    out[(z * H + y) * W + x] = 1;
    return out;
}

// linear-interpolation percentile of an unsorted sample
inline double percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    double rank = q * (double)(v.size() - 1);
    size_t lo = (size_t)rank;
    if (lo + 1 >= v.size()) return v.back();
    return v[lo] + (rank - (double)lo) * (v[lo + 1] - v[lo]);
}

}  // namespace metricdetail

struct Hd95Result {
    double value = 0.0;
    bool penalized = false;  // one mask empty: value is the volume diagonal
};

// 95th percentile of the pooled symmetric surface distances
inline Hd95Result hd95_full(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt, Spacing sp) {
    using namespace metricdetail;
    require(pred.shape == gt.shape && pred.rank() == 3, "hd95: need matching (D,H,W) masks");
    int64_t D = pred.shape[0], H = pred.shape[1], W = pred.shape[2];
    int64_t np = 0, ng = 0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        np += pred.data[i] != 0;
        ng += gt.data[i] != 0;
    }
    if (np == 0 && ng == 0) return {0.0, false};
    if (np == 0 || ng == 0) {
        double dz = (double)D * sp[0], dy = (double)H * sp[1], dx = (double)W * sp[2];
        return {std::sqrt(dz * dz + dy * dy + dx * dx), true};
    }
    std::vector<uint8_t> sp_surf = surface(pred);
    std::vector<uint8_t> gt_surf = surface(gt);
    std::vector<double> d_to_gt = edt_sq(gt_surf, D, H, W, sp);
    std::vector<double> d_to_pred = edt_sq(sp_surf, D, H, W, sp);
    std::vector<double> dists;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        if (sp_surf[i]) dists.push_back(std::sqrt(d_to_gt[i]));
        if (gt_surf[i]) dists.push_back(std::sqrt(d_to_pred[i]));
    }
    return {percentile(dists, 0.95), false};
}

inline double hd95(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt,
                   Spacing sp = {1, 1, 1}) {
    return hd95_full(pred, gt, sp).value;
}

// ---------------------------------------------------------------------------
// Label-volume evaluation with region-style class grouping.
// ---------------------------------------------------------------------------

struct ClassSpec {
    std::string name;
    std::vector<int> labels;  // labels unioned into this class's binary mask
};

struct ClassMetrics {
    std::string name;
    double dsc = 0;
    double hd95 = 0;
    bool hd95_penalized = false;
};

struct SegMetrics {
    std::vector<ClassMetrics> per_class;
    double mean_dsc = 0;
    double mean_hd95 = 0;
};

// one singleton class per foreground label 1..n_classes-1
inline std::vector<ClassSpec> default_classes(int n_classes) {
    std::vector<ClassSpec> out;
    for (int k = 1; k < n_classes; ++k) out.push_back({std::to_string(k), {k}});
    return out;
}

inline SegMetrics evaluate_labels(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt,
                                  const std::vector<ClassSpec>& classes, Spacing sp) {
    require(pred.shape == gt.shape, "evaluate: shape mismatch");
    require(!classes.empty(), "evaluate: no classes given");
    SegMetrics m;
    for (const ClassSpec& cs : classes) {
        auto mask_of = [&](const Tensor<uint8_t>& t) {
            Tensor<uint8_t> out(t.shape);
            for (int64_t i = 0; i < t.numel(); ++i)
                for (int l : cs.labels)
                    if (t.data[i] == (uint8_t)l) {
                        out.data[i] = 1;
                        break;
                    }
            return out;
        };
        Tensor<uint8_t> pm = mask_of(pred), gm = mask_of(gt);
        Hd95Result h = hd95_full(pm, gm, sp);
        m.per_class.push_back({cs.name, dsc(pm, gm), h.value, h.penalized});
    }
    for (const auto& c : m.per_class) {
        m.mean_dsc += c.dsc;
        m.mean_hd95 += c.hd95;
    }
    m.mean_dsc /= (double)m.per_class.size();
    m.mean_hd95 /= (double)m.per_class.size();
    return m;
}

}  // namespace lhunet
