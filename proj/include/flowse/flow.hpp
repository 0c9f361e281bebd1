#pragma once

#include <cmath>

#include "flowse/common.hpp"
#include "flowse/dsp.hpp"
#include "flowse/mat.hpp"

namespace flowse {

// Flow time in [0, 1]: t = 0 is the Gaussian source, t = 1 the data target.
struct FlowTime {
    double value = 0.0;

    FlowTime() = default;
    explicit FlowTime(double t) : value(t) {
        if (!(t >= 0.0 && t <= 1.0)) {
            throw DomainError("FlowTime: t must lie in [0, 1]");
        }
    }
};

// Training-time draw of t ~ Uniform[0, 1].
inline FlowTime sample_time(Rng& rng) {
    return FlowTime(rng.uniform());
}

// Straight-line probability path: (1 - t) * m0 + t * m1, elementwise. The
// endpoints are returned bit-exactly.
template <typename S>
inline Mat<S> interpolate(const Mat<S>& m0, const Mat<S>& m1, FlowTime t) {
    require_same_shape(m0, m1, "interpolate");
    if (t.value == 0.0) return m0;
    if (t.value == 1.0) return m1;
    Mat<S> out(m0.rows, m0.cols);
    const S tv = static_cast<S>(t.value);
    const S one_minus = static_cast<S>(1.0) - tv;
    for (size_t i = 0; i < out.v.size(); ++i) {
        out.v[i] = one_minus * m0.v[i] + tv * m1.v[i];
    }
    return out;
}

// Target velocity for the straight path: u = m1 - m0, constant in t.
template <typename S>
inline Mat<S> target_velocity(const Mat<S>& m0, const Mat<S>& m1) {
    require_same_shape(m0, m1, "target_velocity");
    Mat<S> out(m0.rows, m0.cols);
    for (size_t i = 0; i < out.v.size(); ++i) {
        out.v[i] = m1.v[i] - m0.v[i];
    }
    return out;
}

// One training sample on the path: the interpolated state plus its target
// velocity at time t.
template <typename S>
struct PathSample {
    Mat<S> m_t;
    Mat<S> u_target;
    FlowTime t;
};

template <typename S>
inline PathSample<S> make_path_sample(const Mat<S>& m0, const Mat<S>& m1, FlowTime t) {
    PathSample<S> sample;
    sample.m_t = interpolate(m0, m1, t);
    sample.u_target = target_velocity(m0, m1);
    sample.t = t;
    return sample;
}

// Velocity-regression loss: mean squared error over all cells.
template <typename S>
inline double cfm_loss(const Mat<S>& pred_v, const Mat<S>& target_v) {
    require_same_shape(pred_v, target_v, "cfm_loss");
    if (pred_v.v.empty()) {
        throw DomainError("cfm_loss: empty matrices");
    }
    double acc = 0.0;
    for (size_t i = 0; i < pred_v.v.size(); ++i) {
        const double d = static_cast<double>(pred_v.v[i]) - static_cast<double>(target_v.v[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(pred_v.v.size());
}

// Mean absolute difference; the validation-time reconstruction metric.
template <typename S>
inline double mel_l1(const Mat<S>& a, const Mat<S>& b) {
    require_same_shape(a, b, "mel_l1");
    if (a.v.empty()) {
        throw DomainError("mel_l1: empty matrices");
    }
    double acc = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        acc += std::abs(static_cast<double>(a.v[i]) - static_cast<double>(b.v[i]));
    }
    return acc / static_cast<double>(a.v.size());
}

inline double mel_l1(const MelSpectrogram& a, const MelSpectrogram& b) {
    return mel_l1(a.data, b.data);
}

}  // namespace flowse
