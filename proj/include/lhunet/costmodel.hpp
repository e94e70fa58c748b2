#pragma once

namespace lhunet::cost {

// Shared accounting rules. Runtime ops and the analytic cost model both call
// these, so instrumented forward passes and static estimates agree exactly.
//
// Conventions: 2 FLOPs per multiply-accumulate; 1 FLOP per element for bias,
// activations, normalizations, residual adds and pooling; 7 MACs per
// trilinear sample. Reshapes, permutes and concats are free.

inline double eltwise(double n) { return n; }

inline double macs(double m) { return 2.0 * m; }

inline double conv3d(double b, double ci, double co, double out_sp, double k3,
                     double groups, bool bias) {
    double m = b * co * out_sp * (ci / groups) * k3;
    return macs(m) + (bias ? b * co * out_sp : 0.0);
}

// Transposed conv counted from the input side (the true work for stride > 1).
inline double tconv3d(double b, double ci, double co, double in_sp, double out_sp,
                      double k3, double groups, bool bias) {
    double m = b * ci * in_sp * (co / groups) * k3;
    return macs(m) + (bias ? b * co * out_sp : 0.0);
}

inline double linear(double rows, double in, double out, bool bias) {
    return macs(rows * in * out) + (bias ? rows * out : 0.0);
}

inline double matmul(double batch, double m, double k, double n) {
    return macs(batch * m * k * n);
}

inline double trilinear(double samples) { return macs(7.0 * samples); }

}  // namespace lhunet::cost
