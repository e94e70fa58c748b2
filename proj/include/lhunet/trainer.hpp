#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "lhunet/dataio.hpp"
#include "lhunet/loss.hpp"
#include "lhunet/network.hpp"
#include "lhunet/optimizer.hpp"

namespace lhunet {

// ---------------------------------------------------------------------------
// Training data plumbing: cases, crops, flips, intensity jitter.
// ---------------------------------------------------------------------------

struct TrainCase {
    std::string id;
    Tensor<float> image;    // (C, D, H, W)
    Tensor<uint8_t> label;  // (D, H, W)
};

inline TrainCase load_case(const std::string& dir, const std::string& id) {
    VolumeRecord img = read_volume(dir + "/" + id + ".img");
    VolumeRecord lab = read_volume(dir + "/" + id + ".lab");
    require(img.dtype == "float32", "case " + id + ": image must be float32");
    require(lab.dtype == "uint8", "case " + id + ": label must be uint8");
    require(img.fdata.rank() == 4, "case " + id + ": image must be (C,D,H,W)");
    require(lab.udata.rank() == 4 && lab.udata.shape[0] == 1,
            "case " + id + ": label must be single-channel");
    for (int i = 0; i < 3; ++i)
        require(img.fdata.shape[i + 1] == lab.udata.shape[i + 1],
                "case " + id + ": image/label spatial mismatch");
    TrainCase c;
    c.id = id;
    c.label = Tensor<uint8_t>({lab.udata.shape[1], lab.udata.shape[2], lab.udata.shape[3]});
    c.label.data = std::move(lab.udata.data);
    c.image = std::move(img.fdata);
    return c;
}

// Reverses one of the trailing three axes in place; leading dims pass through,
// so the same routine serves (C,D,H,W) images and (D,H,W) labels.
template <class T>
void flip_spatial(Tensor<T>& t, int axis) {
    require(t.rank() >= 3 && axis >= 0 && axis < 3, "flip: bad axis");
    int64_t W = t.shape[t.rank() - 1];
    int64_t H = t.shape[t.rank() - 2];
    int64_t D = t.shape[t.rank() - 3];
    int64_t lead = t.numel() / (D * H * W);
    int64_t dims[3] = {D, H, W};
    for (int64_t l = 0; l < lead; ++l)
        for (int64_t z = 0; z < D; ++z)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    int64_t c[3] = {z, y, x};
                    if (c[axis] >= dims[axis] - 1 - c[axis]) continue;
                    int64_t m[3] = {z, y, x};
                    m[axis] = dims[axis] - 1 - c[axis];
                    int64_t a = ((l * D + c[0]) * H + c[1]) * W + c[2];
                    int64_t b = ((l * D + m[0]) * H + m[1]) * W + m[2];
                    std::swap(t.data[a], t.data[b]);
                }
}

struct Sample {
    Tensor<float> image;    // (C, pd, ph, pw)
    Tensor<uint8_t> label;  // (pd, ph, pw)
};

namespace traindetail {

// Copies the patch at `origin` (in zero-padded coordinates); voxels falling
// outside the stored volume read as background.
inline Sample crop_window(const Tensor<float>& image, const Tensor<uint8_t>& label, Axis3 patch,
                          Axis3 origin, Axis3 lo) {
    int64_t C = image.shape[0];
    Axis3 vd = {(int)image.shape[1], (int)image.shape[2], (int)image.shape[3]};
    Sample s;
    s.image = Tensor<float>({C, patch[0], patch[1], patch[2]});
    s.label = Tensor<uint8_t>({patch[0], patch[1], patch[2]});
    int64_t pvox = (int64_t)patch[0] * patch[1] * patch[2];
    for (int z = 0; z < patch[0]; ++z)
        for (int y = 0; y < patch[1]; ++y)
            for (int x = 0; x < patch[2]; ++x) {
                int sz = origin[0] + z - lo[0], sy = origin[1] + y - lo[1],
                    sx = origin[2] + x - lo[2];
                bool in = sz >= 0 && sz < vd[0] && sy >= 0 && sy < vd[1] && sx >= 0 &&
                          sx < vd[2];
                int64_t at = ((int64_t)z * patch[1] + y) * patch[2] + x;
                int64_t src = ((int64_t)sz * vd[1] + sy) * vd[2] + sx;
                s.label.data[at] = in ? label.data[src] : 0;
                for (int64_t c = 0; c < C; ++c)
                    s.image.data[c * pvox + at] =
                        in ? image.data[c * vd[0] * vd[1] * vd[2] + src] : 0.0f;
            }
    return s;
}

inline void check_case_shapes(const Tensor<float>& image, const Tensor<uint8_t>& label) {
    require(image.rank() == 4 && label.rank() == 3, "crop: need (C,D,H,W) image, (D,H,W) label");
    for (int i = 0; i < 3; ++i)
        require(image.shape[i + 1] == label.shape[i], "crop: image/label spatial mismatch");
}

}  // namespace traindetail

inline Sample random_crop(const Tensor<float>& image, const Tensor<uint8_t>& label, Axis3 patch,
                          Rng& rng) {
    traindetail::check_case_shapes(image, label);
    Axis3 origin, lo;
    for (int i = 0; i < 3; ++i) {
        int vd = (int)image.shape[i + 1];
        int pvd = std::max(vd, patch[i]);
        lo[i] = (pvd - vd) / 2;
        origin[i] = (int)rng.uniform_int(0, pvd - patch[i]);
    }
    return traindetail::crop_window(image, label, patch, origin, lo);
}

inline Sample center_crop(const Tensor<float>& image, const Tensor<uint8_t>& label, Axis3 patch) {
    traindetail::check_case_shapes(image, label);
    Axis3 origin, lo;
    for (int i = 0; i < 3; ++i) {
        int vd = (int)image.shape[i + 1];
        int pvd = std::max(vd, patch[i]);
        lo[i] = (pvd - vd) / 2;
        origin[i] = (pvd - patch[i]) / 2;
    }
    return traindetail::crop_window(image, label, patch, origin, lo);
}

// Axis flips move image and label together; the intensity jitter touches the
// image only. Draw order is fixed so seeded runs reproduce exactly.
inline void augment(Sample& s, Rng& rng) {
    for (int a = 0; a < 3; ++a)
        if (rng.coin()) {
            flip_spatial(s.image, a);
            flip_spatial(s.label, a);
        }
    double scale = rng.uniform(0.9, 1.1);
    double shift = rng.uniform(-0.1, 0.1);
    for (auto& v : s.image.data) v = (float)(v * scale + shift);
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct TrainResult {
    std::vector<std::string> log_lines;
    double best_metric = -1.0;
    int best_epoch = -1;
    std::string best_prefix, last_prefix;
};

namespace traindetail {

template <class T>
std::string nonfinite_report(Graph<T>& g) {
    std::string out;
    int shown = 0;
    for (size_t id = 0; id < g.size() && shown < 8; ++id) {
        bool bad = false;
        try {
            const Tensor<T>& v = g.val((VarId)id);
            for (T x : v.data)
                if (!std::isfinite((double)x)) {
                    bad = true;
                    break;
                }
        } catch (...) {
            continue;  // released node
        }
        if (bad) {
            out += "\n  node " + std::to_string(id) + " (" + g.label((VarId)id) + ")";
            ++shown;
        }
    }
    if (out.empty()) out = "\n  (all recorded tensors finite; loss arithmetic suspect)";
    return out;
}

inline std::string fmt(const char* pattern, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, pattern, v);
    return buf;
}

}  // namespace traindetail

template <class T>
class Trainer {
  public:
    Trainer(const Config& cfg, uint64_t seed)
        : cfg_(cfg),
          net_(cfg.arch, seed),
          opt_(net_.params(), cfg.train.momentum, cfg.train.weight_decay),
          rng_(seed * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull) {}

    Network<T>& net() { return net_; }

    TrainResult fit(const std::vector<TrainCase>& train, const std::vector<TrainCase>& val,
                    const std::string& out_dir, std::ostream* log_stream = nullptr) {
        require(!train.empty(), "train: empty training set");
        require(cfg_.train.batch_size >= 1, "train: batch_size must be positive");
        std::filesystem::create_directories(out_dir);
        const TrainSpec& ts = cfg_.train;
        const Axis3 patch = cfg_.arch.patch_size;
        const int64_t B = ts.batch_size;
        const int64_t total_iters = (int64_t)ts.epochs * ts.iters_per_epoch;
        Graph<T>& g = net_.graph();
        TrainResult res;
        res.best_prefix = out_dir + "/best";
        res.last_prefix = out_dir + "/last";

        auto emit = [&](const std::string& line) {
            res.log_lines.push_back(line);
            if (log_stream) *log_stream << line << "\n";
        };

        for (int epoch = 0; epoch < ts.epochs; ++epoch) {
            for (int it = 0; it < ts.iters_per_epoch; ++it) {
                int64_t t = (int64_t)epoch * ts.iters_per_epoch + it;
                double lr = poly_lr(ts.base_lr, t, total_iters, ts.poly_power);

                Tensor<T> x({B, cfg_.arch.in_channels, patch[0], patch[1], patch[2]});
                Tensor<uint8_t> y({B, patch[0], patch[1], patch[2]});
                int64_t pvox = (int64_t)patch[0] * patch[1] * patch[2];
                int64_t cvox = cfg_.arch.in_channels * pvox;
                for (int64_t b = 0; b < B; ++b) {
                    const TrainCase& tc = train[(size_t)rng_.uniform_int(0, (int64_t)train.size() - 1)];
                    Sample s = random_crop(tc.image, tc.label, patch, rng_);
                    if (ts.augment) augment(s, rng_);
                    for (int64_t i = 0; i < cvox; ++i)
                        x.data[b * cvox + i] = (T)s.image.data[i];
                    std::copy(s.label.data.begin(), s.label.data.end(),
                              y.data.begin() + b * pvox);
                }

                VarId xid = g.leaf(std::move(x), "batch");
                VarId logits = net_.forward(xid, true);
                LossParts lp = dice_ce_loss(g, logits, y, ts.dice_weight, ts.ce_weight,
                                            ts.dice_include_background);
                double total = (double)g.val(lp.total).data[0];
                double dice = (double)g.val(lp.dice).data[0];
                double ce = (double)g.val(lp.ce).data[0];
                if (!std::isfinite(total))
                    throw std::runtime_error("non-finite loss at iteration " + std::to_string(t) +
                                             "; first non-finite tensors:" +
                                             traindetail::nonfinite_report(g));
                g.backward(lp.total);
                opt_.step(lr);
                g.zero_grad();
                g.reset_to(net_.base_mark());

                emit("iter " + std::to_string(t) + traindetail::fmt(" lr %.9g", lr) +
                     traindetail::fmt(" loss %.9g", total) +
                     traindetail::fmt(" dice_loss %.9g", dice) + traindetail::fmt(" ce %.9g", ce));
            }

            double train_dice = eval_dice(train);
            std::string line =
                "epoch " + std::to_string(epoch) + traindetail::fmt(" train_dice %.9g", train_dice);
            double metric = train_dice;
            if (!val.empty()) {
                double val_dice = eval_dice(val);
                line += traindetail::fmt(" val_dice %.9g", val_dice);
                metric = val_dice;
            }
            emit(line);

            net_.save(res.last_prefix);
            if (metric > res.best_metric) {
                res.best_metric = metric;
                res.best_epoch = epoch;
                net_.save(res.best_prefix);
            }
        }
        return res;
    }

    // Center-crop, eval-mode, argmax mean foreground Dice over a case list.
    double eval_dice(const std::vector<TrainCase>& cases) {
        if (cases.empty()) return 0.0;
        const Axis3 patch = cfg_.arch.patch_size;
        int64_t K = cfg_.arch.out_channels;
        Graph<T>& g = net_.graph();
        NoGradGuard<T> ng(g);
        double acc = 0.0;
        for (const TrainCase& tc : cases) {
            Sample s = center_crop(tc.image, tc.label, patch);
            Tensor<T> x({1, cfg_.arch.in_channels, patch[0], patch[1], patch[2]});
            for (int64_t i = 0; i < x.numel(); ++i) x.data[i] = (T)s.image.data[i];
            VarId logits = net_.forward(g.leaf(std::move(x), "eval"), false);
            const Tensor<T>& lv = g.val(logits);
            int64_t vox = lv.numel() / K;
            Tensor<uint8_t> pred({patch[0], patch[1], patch[2]});
            for (int64_t v = 0; v < vox; ++v) {
                int best = 0;
                T bv = lv.data[v];
                for (int64_t k = 1; k < K; ++k)
                    if (lv.data[k * vox + v] > bv) {
                        bv = lv.data[k * vox + v];
                        best = (int)k;
                    }
                pred.data[v] = (uint8_t)best;
            }
            acc += mean_foreground_dice(pred, s.label, (int)K);
            g.reset_to(net_.base_mark());
        }
        return acc / (double)cases.size();
    }

  private:
    Config cfg_;
    Network<T> net_;
    SgdNesterov<T> opt_;
    Rng rng_;
};

}  // namespace lhunet
