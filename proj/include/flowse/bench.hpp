#pragma once

#include <algorithm>
#include <chrono>
#include <sstream>
#include <string>
#include <vector>

#include "flowse/common.hpp"
#include "flowse/config.hpp"
#include "flowse/dsp.hpp"
#include "flowse/model.hpp"
#include "flowse/sampler.hpp"

namespace flowse {

// Real-time-factor measurement: processing seconds per second of audio.
struct BenchReport {
    double rtf = 0.0;
    double wall_seconds = 0.0;
    double audio_seconds = 0.0;
    std::string solver_desc;
    std::string preset_name;
    int repetitions = 0;
    int threads = 1;
    StageTimings stages;  // per-stage split of the median repetition
};

// Deterministic benchmark input: a harmonic tone with a little noise.
inline Waveform bench_signal(double seconds, int sample_rate) {
    Waveform w;
    w.sample_rate = sample_rate;
    const size_t n = std::max<size_t>(1, static_cast<size_t>(seconds * sample_rate));
    w.samples.resize(n);
    Rng rng(0xbe9c);
    for (size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sample_rate;
        w.samples[i] = 0.4 * std::sin(2.0 * M_PI * 220.0 * t) +
                       0.2 * std::sin(2.0 * M_PI * 440.0 * t) + 0.02 * rng.normal();
    }
    return w;
}

// Times an arbitrary waveform->waveform enhancer: one discarded warmup run,
// then `reps` timed runs on a monotonic clock; the median wall time defines
// the RTF. rtf * audio_seconds reproduces wall_seconds exactly.
template <typename EnhanceFn>
inline BenchReport measure_rtf_fn(EnhanceFn&& enhance_fn, double audio_seconds, int reps,
                                  int sample_rate, StageTimings* stage_out = nullptr) {
    if (reps < 1) {
        throw DomainError("measure_rtf: reps must be >= 1");
    }
    if (!(audio_seconds > 0.0)) {
        throw DomainError("measure_rtf: audio_seconds must be positive");
    }
    const Waveform input = bench_signal(audio_seconds, sample_rate);

    using clock = std::chrono::steady_clock;
    enhance_fn(input);  // warmup, excluded from timing

    std::vector<double> walls(reps);
    for (int r = 0; r < reps; ++r) {
        const auto t0 = clock::now();
        enhance_fn(input);
        const auto t1 = clock::now();
        walls[r] = std::chrono::duration<double>(t1 - t0).count();
    }
    std::vector<double> sorted = walls;
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted[(sorted.size() - 1) / 2];

    BenchReport report;
    report.wall_seconds = median;
    report.audio_seconds = static_cast<double>(input.samples.size()) / sample_rate;
    report.rtf = report.wall_seconds / report.audio_seconds;
    report.repetitions = reps;
    report.threads = 1;
    if (stage_out) {
        report.stages = *stage_out;
    }
    return report;
}

// RTF of the real enhancement pipeline. Stage timings (mel analysis, ODE
// integration, mel inversion) come from the final repetition so both the
// with- and without-inversion readings are visible.
inline BenchReport measure_rtf(const ModelParams<float>& params, const ModelConfig& cfg,
                               const MelConfig& mel_cfg, const SolverConfig& solver,
                               double audio_seconds, int reps, int gl_iters = 32,
                               const std::string& preset_name = "") {
    StageTimings stages;
    auto fn = [&](const Waveform& input) {
        return enhance(input, std::nullopt, params, cfg, mel_cfg, solver, gl_iters, &stages);
    };
    BenchReport report =
        measure_rtf_fn(fn, audio_seconds, reps, mel_cfg.sample_rate, &stages);
    report.solver_desc = scheme_name(solver.scheme) + "/" + std::to_string(solver.n_steps) +
                         " gl=" + std::to_string(gl_iters);
    report.preset_name = preset_name;
    return report;
}

// Single-line structured record, e.g. for logs and simple parsing.
inline std::string bench_report_line(const BenchReport& r) {
    std::ostringstream os;
    os << "rtf=" << r.rtf << " wall_seconds=" << r.wall_seconds
       << " audio_seconds=" << r.audio_seconds << " solver=" << r.solver_desc
       << " preset=" << r.preset_name << " reps=" << r.repetitions << " threads=" << r.threads
       << " mel_s=" << r.stages.mel_seconds << " ode_s=" << r.stages.ode_seconds
       << " inversion_s=" << r.stages.inversion_seconds;
    return os.str();
}

}  // namespace flowse
