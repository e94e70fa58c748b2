#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "lhunet/network.hpp"

namespace lhunet {

// ---------------------------------------------------------------------------
// Sliding-window full-volume prediction with half-patch overlap.
// ---------------------------------------------------------------------------

struct WindowPlan {
    Axis3 volume{}, patch{};
    std::vector<Axis3> origins;
};

// Regular per-axis grid at stride floor(patch * (1 - overlap)); the final
// origin is clamped so the last window ends at the volume boundary.
inline WindowPlan plan_windows(Axis3 volume, Axis3 patch, double overlap = 0.5) {
    require(overlap >= 0.0 && overlap < 1.0, "plan_windows: overlap must be in [0, 1)");
    std::array<std::vector<int>, 3> axis;
    for (int i = 0; i < 3; ++i) {
        require(patch[i] >= 1, "plan_windows: patch must be positive");
        require(patch[i] <= volume[i], "plan_windows: patch exceeds volume; pad first");
        int stride = std::max(1, (int)std::floor((double)patch[i] * (1.0 - overlap)));
        for (int o = 0; o + patch[i] < volume[i]; o += stride) axis[i].push_back(o);
        axis[i].push_back(volume[i] - patch[i]);
        std::sort(axis[i].begin(), axis[i].end());
        axis[i].erase(std::unique(axis[i].begin(), axis[i].end()), axis[i].end());
    }
    WindowPlan plan;
    plan.volume = volume;
    plan.patch = patch;
    for (int z : axis[0])
        for (int y : axis[1])
            for (int x : axis[2]) plan.origins.push_back({z, y, x});
    return plan;
}

// Separable Gaussian bump over the patch, sigma = patch/8 per axis; strictly
// positive so every covered voxel keeps a nonzero accumulation weight.
inline Tensor<double> gaussian_blend_weights(Axis3 patch) {
    std::array<std::vector<double>, 3> axis;
    for (int i = 0; i < 3; ++i) {
        double sigma = (double)patch[i] / 8.0;
        double center = (double)(patch[i] - 1) / 2.0;
        axis[i].resize(patch[i]);
        for (int k = 0; k < patch[i]; ++k) {
            double d = ((double)k - center) / sigma;
            axis[i][k] = std::exp(-0.5 * d * d);
        }
    }
    Tensor<double> w({patch[0], patch[1], patch[2]});
    int64_t idx = 0;
    for (int z = 0; z < patch[0]; ++z)
        for (int y = 0; y < patch[1]; ++y)
            for (int x = 0; x < patch[2]; ++x)
                w.data[idx++] = axis[0][z] * axis[1][y] * axis[2][x];
    return w;
}

// Weighted accumulation of per-window class probabilities over a volume.
template <class T>
struct BlendAccumulator {
    Axis3 vol{};
    int64_t K = 0;
    std::vector<double> acc, wacc;

    BlendAccumulator(Axis3 vol_, int64_t k)
        : vol(vol_),
          K(k),
          acc((size_t)(k * vol_[0] * vol_[1] * vol_[2]), 0.0),
          wacc((size_t)(vol_[0] * vol_[1] * vol_[2]), 0.0) {}

    // probs: (K, pd, ph, pw) for the window at `origin`; w: (pd, ph, pw)
    void add(const Tensor<T>& probs, Axis3 origin, const Tensor<double>& w) {
        int64_t pd = probs.shape[1], ph = probs.shape[2], pw = probs.shape[3];
        require(probs.shape[0] == K, "blend: class count mismatch");
        require(w.numel() == pd * ph * pw, "blend: weight shape mismatch");
        int64_t vox = (int64_t)vol[0] * vol[1] * vol[2];
        int64_t pvox = pd * ph * pw;
        for (int64_t z = 0; z < pd; ++z)
            for (int64_t y = 0; y < ph; ++y)
                for (int64_t x = 0; x < pw; ++x) {
                    int64_t pv = (z * ph + y) * pw + x;
                    int64_t v = ((z + origin[0]) * vol[1] + y + origin[1]) * vol[2] + x +
                                origin[2];
                    double wt = w.data[pv];
                    wacc[v] += wt;
                    for (int64_t k = 0; k < K; ++k)
                        acc[k * vox + v] += wt * (double)probs.data[k * pvox + pv];
                }
    }

    Tensor<T> normalized() const {
        int64_t vox = (int64_t)vol[0] * vol[1] * vol[2];
        Tensor<T> out({K, vol[0], vol[1], vol[2]});
        for (int64_t v = 0; v < vox; ++v) {
            require(wacc[v] > 0.0, "blend: uncovered voxel");
            for (int64_t k = 0; k < K; ++k)
                out.data[k * vox + v] = static_cast<T>(acc[k * vox + v] / wacc[v]);
        }
        return out;
    }
};

// Full-volume class probabilities for a (C, D, H, W) input. Volumes smaller
// than the patch are zero-padded symmetrically and the result cropped back.
// A single-window plan uses unit weights, so it reproduces direct inference
// bit for bit.
template <class T>
Tensor<T> sliding_window_predict(Network<T>& net, const Tensor<T>& volume) {
    const ArchSpec& arch = net.arch();
    require(volume.rank() == 4, "predict: volume must be (C, D, H, W)");
    require(volume.shape[0] == arch.in_channels, "predict: channel count mismatch with network");
    int64_t C = volume.shape[0];
    Axis3 vd = {(int)volume.shape[1], (int)volume.shape[2], (int)volume.shape[3]};
    Axis3 patch = arch.patch_size;

    Axis3 pvd, lo;
    for (int i = 0; i < 3; ++i) {
        pvd[i] = std::max(vd[i], patch[i]);
        lo[i] = (pvd[i] - vd[i]) / 2;
    }
    Tensor<T> padded;
    const Tensor<T>* src = &volume;
    if (pvd != vd) {
        padded = Tensor<T>({C, pvd[0], pvd[1], pvd[2]});
        for (int64_t c = 0; c < C; ++c)
            for (int64_t z = 0; z < vd[0]; ++z)
                for (int64_t y = 0; y < vd[1]; ++y)
                    for (int64_t x = 0; x < vd[2]; ++x)
                        padded.data[((c * pvd[0] + z + lo[0]) * pvd[1] + y + lo[1]) * pvd[2] +
                                    x + lo[2]] =
                            volume.data[((c * vd[0] + z) * vd[1] + y) * vd[2] + x];
        src = &padded;
    }

    WindowPlan plan = plan_windows(pvd, patch);
    Tensor<double> w = plan.origins.size() == 1
                           ? Tensor<double>({patch[0], patch[1], patch[2]}, 1.0)
                           : gaussian_blend_weights(patch);
    int64_t K = arch.out_channels;
    int64_t pvox = (int64_t)patch[0] * patch[1] * patch[2];
    BlendAccumulator<T> blend(pvd, K);

    Graph<T>& g = net.graph();
    NoGradGuard<T> ng(g);
    for (const Axis3& o : plan.origins) {
        Tensor<T> crop({1, C, patch[0], patch[1], patch[2]});
        for (int64_t c = 0; c < C; ++c)
            for (int64_t z = 0; z < patch[0]; ++z)
                for (int64_t y = 0; y < patch[1]; ++y)
                    for (int64_t x = 0; x < patch[2]; ++x)
                        crop.data[((c * patch[0] + z) * patch[1] + y) * patch[2] + x] =
                            src->data[((c * pvd[0] + z + o[0]) * pvd[1] + y + o[1]) * pvd[2] +
                                      x + o[2]];
        VarId xid = g.leaf(std::move(crop));
        VarId logits = net.forward(xid, false);
        VarId perm = ops::permute(g, logits, {0, 2, 3, 4, 1});
        VarId flat = ops::reshape(g, perm, {pvox, K});
        const Tensor<T>& sm = g.val(ops::softmax_lastdim(g, flat));  // (pvox, K)
        Tensor<T> probs({K, patch[0], patch[1], patch[2]});
        for (int64_t pv = 0; pv < pvox; ++pv)
            for (int64_t k = 0; k < K; ++k) probs.data[k * pvox + pv] = sm.data[pv * K + k];
        g.reset_to(net.base_mark());
        blend.add(probs, o, w);
    }

    Tensor<T> full = blend.normalized();
    if (pvd == vd) return full;
    Tensor<T> out({K, vd[0], vd[1], vd[2]});
    for (int64_t k = 0; k < K; ++k)
        for (int64_t z = 0; z < vd[0]; ++z)
            for (int64_t y = 0; y < vd[1]; ++y)
                for (int64_t x = 0; x < vd[2]; ++x)
                    out.data[((k * vd[0] + z) * vd[1] + y) * vd[2] + x] =
                        full.data[((k * pvd[0] + z + lo[0]) * pvd[1] + y + lo[1]) * pvd[2] + x +
                                  lo[2]];
    return out;
}

// (K, D, H, W) probabilities -> (D, H, W) labels; ties take the lowest class
template <class T>
Tensor<uint8_t> argmax_labels(const Tensor<T>& probs) {
    require(probs.rank() == 4, "argmax: need (K, D, H, W)");
    int64_t K = probs.shape[0];
    int64_t vox = probs.numel() / K;
    Tensor<uint8_t> out({probs.shape[1], probs.shape[2], probs.shape[3]});
    for (int64_t v = 0; v < vox; ++v) {
        int best = 0;
        T bv = probs.data[v];
        for (int64_t k = 1; k < K; ++k)
            if (probs.data[k * vox + v] > bv) {
                bv = probs.data[k * vox + v];
                best = (int)k;
            }
        out.data[v] = (uint8_t)best;
    }
    return out;
}

}  // namespace lhunet
