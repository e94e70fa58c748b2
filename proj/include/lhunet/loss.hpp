#pragma once

#include <cstdint>

#include "lhunet/ops_basic.hpp"

namespace lhunet {

struct LossParts {
    VarId total = -1;
    VarId dice = -1;  // 1 - mean per-class dice
    VarId ce = -1;
};

// Soft Dice (computed jointly over the batch, foreground classes by default)
// plus voxel-mean cross entropy. `target` holds class indices (B, D, H, W).
template <class T>
LossParts dice_ce_loss(Graph<T>& g, VarId logits, const Tensor<uint8_t>& target,
                       double dice_weight = 1.0, double ce_weight = 1.0,
                       bool include_background = false, double eps = 1e-5) {
    const auto& lv = g.val(logits);
    require(lv.rank() == 5, "loss: logits must be (B,K,D,H,W)");
    Vol5 li(lv.shape);
    int64_t K = li.C, rows = li.B * li.vox();
    require((int64_t)target.numel() == rows, "loss: target size mismatch");

    VarId perm = ops::permute(g, logits, {0, 2, 3, 4, 1});
    VarId flat = ops::reshape(g, perm, {rows, K});
    VarId logp = ops::log_softmax_lastdim(g, flat);
    VarId prob = ops::softmax_lastdim(g, flat);

    Tensor<T> onehot = Tensor<T>::zeros({rows, K});
    Tensor<T> gsum = Tensor<T>::zeros({K});
    for (int64_t r = 0; r < rows; ++r) {
        uint8_t cls = target.data[r];
        require(cls < K, "loss: target label out of range");
        onehot.data[r * K + cls] = T(1);
        gsum.data[cls] += T(1);
    }
    VarId oh = g.leaf(std::move(onehot), "onehot");

    VarId ce = ops::scale(g, ops::sum_all(g, ops::mul(g, logp, oh)), -1.0 / (double)rows);

    VarId inter = ops::sum_cols(g, ops::mul(g, prob, oh));
    VarId psum = ops::sum_cols(g, prob);
    VarId denom = ops::add(g, psum, g.leaf(std::move(gsum), "gsum"));
    VarId dice_c = ops::div(g, ops::add_const(g, ops::scale(g, inter, 2.0), eps),
                            ops::add_const(g, denom, eps));
    Tensor<T> mask(Shape{K}, T(1));
    int64_t n_sel = K;
    if (!include_background && K > 1) {
        mask.data[0] = T(0);
        n_sel = K - 1;
    }
    VarId dice_mean =
        ops::scale(g, ops::sum_all(g, ops::mul(g, dice_c, g.leaf(std::move(mask), "fgmask"))),
                   1.0 / (double)n_sel);
    VarId dice_loss = ops::add_const(g, ops::scale(g, dice_mean, -1.0), 1.0);

    LossParts out;
    out.dice = dice_loss;
    out.ce = ce;
    out.total = ops::add(g, ops::scale(g, dice_loss, dice_weight), ops::scale(g, ce, ce_weight));
    return out;
}

// Hard-label Dice per class on an argmax prediction, same smoothing as the
// loss. Used for the training-progress metric.
inline double mean_foreground_dice(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& target,
                                   int n_classes, double eps = 1e-5) {
    require(pred.numel() == target.numel(), "dice: size mismatch");
    std::vector<double> inter(n_classes, 0), psum(n_classes, 0), gsum(n_classes, 0);
    for (int64_t i = 0; i < pred.numel(); ++i) {
        int p = pred.data[i], t = target.data[i];
        psum[p] += 1;
        gsum[t] += 1;
        if (p == t) inter[p] += 1;
    }
    double acc = 0;
    int n = 0;
    for (int c = 1; c < n_classes; ++c) {
        acc += (2.0 * inter[c] + eps) / (psum[c] + gsum[c] + eps);
        ++n;
    }
    return n ? acc / n : 1.0;
}

}  // namespace lhunet
