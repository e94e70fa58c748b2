#pragma once

#include <cmath>
#include <vector>

#include "lhunet/params.hpp"

namespace lhunet {

inline double poly_lr(double base_lr, int64_t iter, int64_t total_iters, double power) {
    double t = total_iters > 0 ? (double)iter / (double)total_iters : 0.0;
    if (t > 1.0) t = 1.0;
    return base_lr * std::pow(1.0 - t, power);
}

// SGD with Nesterov momentum and coupled L2 weight decay:
//   d = g + wd * w;  v = mu * v + d;  w -= lr * (d + mu * v)
template <class T>
class SgdNesterov {
  public:
    SgdNesterov(ParamStore<T>& ps, double momentum, double weight_decay)
        : ps_(&ps), momentum_(momentum), wd_(weight_decay) {
        for (const auto& e : ps.entries())
            if (!e.buffer) velocity_.emplace_back(Tensor<T>::zeros(e.shape));
    }

    void step(double lr) {
        Graph<T>& g = ps_->graph();
        size_t vi = 0;
        for (const auto& e : ps_->entries()) {
            if (e.buffer) continue;
            Tensor<T>& w = ps_->tensor(e);
            Tensor<T>& v = velocity_[vi++];
            const Tensor<T>* gr = g.has_grad(e.id) ? &g.grad(e.id) : nullptr;
            for (int64_t i = 0; i < w.numel(); ++i) {
                T d = (gr ? gr->data[i] : T(0)) + static_cast<T>(wd_) * w.data[i];
                v.data[i] = static_cast<T>(momentum_) * v.data[i] + d;
                w.data[i] -= static_cast<T>(lr) * (d + static_cast<T>(momentum_) * v.data[i]);
            }
        }
    }

  private:
    ParamStore<T>* ps_;
    double momentum_, wd_;
    std::vector<Tensor<T>> velocity_;
};

}  // namespace lhunet
