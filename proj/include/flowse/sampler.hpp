#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <string>

#include "flowse/common.hpp"
#include "flowse/config.hpp"
#include "flowse/dsp.hpp"
#include "flowse/flow.hpp"
#include "flowse/mat.hpp"
#include "flowse/model.hpp"

namespace flowse {

// A velocity field z' = v(z, t); the model-bound field closes over the noisy
// mel and text condition, but tests can supply arbitrary stub fields.
template <typename S>
using VelocityField = std::function<Mat<S>(const Mat<S>&, double)>;

// One explicit Euler step: z + v(z, t) * dt. Exactly one field evaluation.
template <typename S>
inline Mat<S> euler_step(const Mat<S>& state, double t, double dt, const VelocityField<S>& field) {
    if (!(t >= 0.0 && t + dt <= 1.0 + 1e-9)) {
        throw DomainError("euler_step: step [" + std::to_string(t) + ", " +
                          std::to_string(t + dt) + "] leaves [0, 1]");
    }
    if (dt == 0.0) {
        return state;
    }
    const Mat<S> v = field(state, t);
    require_same_shape(state, v, "euler_step");
    Mat<S> out(state.rows, state.cols);
    const S sdt = static_cast<S>(dt);
    for (size_t i = 0; i < out.v.size(); ++i) {
        out.v[i] = state.v[i] + v.v[i] * sdt;
    }
    return out;
}

// One explicit midpoint step (two field evaluations).
template <typename S>
inline Mat<S> midpoint_step(const Mat<S>& state, double t, double dt,
                            const VelocityField<S>& field) {
    if (!(t >= 0.0 && t + dt <= 1.0 + 1e-9)) {
        throw DomainError("midpoint_step: step leaves [0, 1]");
    }
    if (dt == 0.0) {
        return state;
    }
    const Mat<S> v1 = field(state, t);
    require_same_shape(state, v1, "midpoint_step");
    Mat<S> half(state.rows, state.cols);
    const S hdt = static_cast<S>(0.5 * dt);
    for (size_t i = 0; i < half.v.size(); ++i) {
        half.v[i] = state.v[i] + v1.v[i] * hdt;
    }
    const Mat<S> v2 = field(half, t + 0.5 * dt);
    Mat<S> out(state.rows, state.cols);
    const S sdt = static_cast<S>(dt);
    for (size_t i = 0; i < out.v.size(); ++i) {
        out.v[i] = state.v[i] + v2.v[i] * sdt;
    }
    return out;
}

// Integrates the field from t = 0 to t = 1 in n_steps uniform steps. Throws
// DivergenceError naming the step if the state stops being finite.
template <typename S>
inline Mat<S> integrate(const Mat<S>& m0, const VelocityField<S>& field,
                        const SolverConfig& solver) {
    solver.validate();
    Mat<S> state = m0;
    const double dt = 1.0 / solver.n_steps;
    for (int i = 0; i < solver.n_steps; ++i) {
        const double t = static_cast<double>(i) * dt;
        // Land exactly on 1.0 at the last step regardless of rounding.
        const double step_dt = i + 1 == solver.n_steps ? 1.0 - t : dt;
        state = solver.scheme == SolverConfig::Scheme::euler
                    ? euler_step(state, t, step_dt, field)
                    : midpoint_step(state, t, step_dt, field);
        if (!all_finite(state)) {
            throw DivergenceError("integrate: non-finite state after step " + std::to_string(i));
        }
    }
    return state;
}

// Velocity field backed by the model in eval mode.
template <typename S>
inline VelocityField<S> make_model_field(Mat<S> m_y, TextCondition text, const ModelParams<S>& params,
                                         const ModelConfig& cfg) {
    return [m_y = std::move(m_y), text = std::move(text), &params, cfg](const Mat<S>& state,
                                                                        double t) {
        return model_forward(state, m_y, FlowTime(t), text, params, cfg);
    };
}

// Spec-shaped wrappers binding the model field.
template <typename S>
inline Mat<S> euler_step(const Mat<S>& m_t, const Mat<S>& m_y, double t, double dt,
                         const TextCondition& text, const ModelParams<S>& params,
                         const ModelConfig& cfg) {
    return euler_step(m_t, t, dt, make_model_field<S>(m_y, text, params, cfg));
}

template <typename S>
inline Mat<S> integrate(const Mat<S>& m0, const Mat<S>& m_y, const TextCondition& text,
                        const ModelParams<S>& params, const ModelConfig& cfg,
                        const SolverConfig& solver) {
    return integrate(m0, make_model_field<S>(m_y, text, params, cfg), solver);
}

// Wall-clock seconds per pipeline stage of one enhance call.
struct StageTimings {
    double mel_seconds = 0.0;
    double ode_seconds = 0.0;
    double inversion_seconds = 0.0;

    double total() const { return mel_seconds + ode_seconds + inversion_seconds; }
};

namespace samplerdetail {

inline double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace samplerdetail

// Full enhancement pipeline: analysis mel of the noisy input, Gaussian start
// state, ODE integration to the enhanced mel, phase retrieval back to a
// waveform of exactly the input length. Deterministic given (input, configs,
// solver.seed).
inline Waveform enhance(const Waveform& noisy, const std::optional<std::string>& transcript,
                        const ModelParams<float>& params, const ModelConfig& cfg,
                        const MelConfig& mel_cfg, const SolverConfig& solver, int gl_iters,
                        StageTimings* timings = nullptr) {
    require_valid(noisy, "enhance");
    cfg.validate();
    mel_cfg.validate();
    solver.validate();

    const double t0 = samplerdetail::now_seconds();
    const MelSpectrogram noisy_mel = wav_to_mel(noisy, mel_cfg);
    const Mat<float> m_y = cast_mat<double, float>(noisy_mel.data);

    const TextCondition text =
        transcript.has_value() ? TextCondition::from_text(*transcript) : TextCondition::none();

    Rng rng(derive_seed(solver.seed, 0xe41a));
    const Mat<float> m0 = gaussian_mat<float>(m_y.rows, m_y.cols, rng);

    const double t1 = samplerdetail::now_seconds();
    const Mat<float> enhanced = integrate(m0, m_y, text, params, cfg, solver);
    const double t2 = samplerdetail::now_seconds();

    MelSpectrogram enhanced_mel;
    enhanced_mel.config = mel_cfg;
    enhanced_mel.data = cast_mat<float, double>(enhanced);
    // Keep the mel invariant: entries never fall below the log floor.
    const double floor = std::log(mel_cfg.log_floor);
    for (auto& v : enhanced_mel.data.v) {
        v = std::max(v, floor);
    }

    Waveform out = griffin_lim(enhanced_mel, gl_iters, solver.seed);
    out.samples.resize(noisy.samples.size(), 0.0);  // trim/pad to the input length
    const double t3 = samplerdetail::now_seconds();

    if (timings) {
        timings->mel_seconds = t1 - t0;
        timings->ode_seconds = t2 - t1;
        timings->inversion_seconds = t3 - t2;
    }
    return out;
}

}  // namespace flowse
