#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "flowse/common.hpp"
#include "flowse/config.hpp"
#include "flowse/dsp.hpp"
#include "flowse/flow.hpp"
#include "flowse/mat.hpp"
#include "flowse/model.hpp"
#include "flowse/sampler.hpp"

namespace flowse {

// AdamW constants (decoupled weight decay).
inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.95;
inline constexpr double kAdamEps = 1e-8;
inline constexpr double kWeightDecay = 0.01;

// One supervised example: aligned clean/noisy waveforms plus transcript.
struct TrainingPair {
    Waveform clean;
    Waveform noisy;
    std::string transcript;
    double snr_db = 0.0;
};

inline double signal_power(const Waveform& w) {
    double acc = 0.0;
    for (double s : w.samples) {
        acc += s * s;
    }
    return w.samples.empty() ? 0.0 : acc / static_cast<double>(w.samples.size());
}

// Mixes clean speech with noise at the requested SNR; optional reverberation
// convolves with the impulse response first (rescaled back to the dry peak).
// The gain is computed from the measured powers, so the achieved SNR matches
// the request exactly. A silent clean segment raises DomainError so callers
// can resample.
inline TrainingPair synthesize_pair(const Waveform& clean, const Waveform& noise, double snr_db,
                                    const Waveform* rir, Rng& rng) {
    require_valid(clean, "synthesize_pair(clean)");
    require_valid(noise, "synthesize_pair(noise)");
    if (clean.sample_rate != noise.sample_rate) {
        throw ConfigError("synthesize_pair: clean/noise sample rates differ");
    }
    if (!std::isfinite(snr_db)) {
        throw DomainError("synthesize_pair: snr_db must be finite");
    }

    const size_t n = clean.samples.size();

    // Reverberant source if an impulse response is given.
    Waveform source = clean;
    if (rir != nullptr) {
        require_valid(*rir, "synthesize_pair(rir)");
        std::vector<double> conv(n, 0.0);
        for (size_t i = 0; i < n; ++i) {
            const size_t kmax = std::min(rir->samples.size(), i + 1);
            double acc = 0.0;
            for (size_t k = 0; k < kmax; ++k) {
                acc += clean.samples[i - k] * rir->samples[k];
            }
            conv[i] = acc;
        }
        double dry_peak = 0.0;
        double wet_peak = 0.0;
        for (size_t i = 0; i < n; ++i) {
            dry_peak = std::max(dry_peak, std::abs(clean.samples[i]));
            wet_peak = std::max(wet_peak, std::abs(conv[i]));
        }
        if (wet_peak > 0.0) {
            const double scale = dry_peak / wet_peak;
            for (double& s : conv) {
                s *= scale;
            }
        }
        source.samples = std::move(conv);
    }

    // Noise segment aligned to the clean length: random crop if longer,
    // tiled if shorter.
    std::vector<double> noise_seg(n);
    if (noise.samples.size() >= n) {
        const size_t max_off = noise.samples.size() - n;
        const size_t off =
            max_off == 0 ? 0 : static_cast<size_t>(rng.uniform_int(static_cast<int>(
                               std::min<size_t>(max_off + 1, 1u << 30))));
        for (size_t i = 0; i < n; ++i) {
            noise_seg[i] = noise.samples[off + i];
        }
    } else {
        for (size_t i = 0; i < n; ++i) {
            noise_seg[i] = noise.samples[i % noise.samples.size()];
        }
    }

    double p_clean = 0.0;
    double p_noise = 0.0;
    for (size_t i = 0; i < n; ++i) {
        p_clean += source.samples[i] * source.samples[i];
        p_noise += noise_seg[i] * noise_seg[i];
    }
    p_clean /= static_cast<double>(n);
    p_noise /= static_cast<double>(n);
    if (p_clean <= 0.0) {
        throw DomainError("synthesize_pair: silent clean segment, resample");
    }
    if (p_noise <= 0.0) {
        throw DomainError("synthesize_pair: noise segment has zero power");
    }

    const double gain = std::sqrt(p_clean / (p_noise * std::pow(10.0, snr_db / 10.0)));

    TrainingPair pair;
    pair.clean = clean;
    pair.transcript = "";
    pair.snr_db = snr_db;
    pair.noisy = source;
    for (size_t i = 0; i < n; ++i) {
        pair.noisy.samples[i] = source.samples[i] + gain * noise_seg[i];
    }
    return pair;
}

// ---------------------------------------------------------------------------
// toy corpus
// ---------------------------------------------------------------------------

struct ToyItem {
    Waveform clean;
    std::string transcript;
};

namespace toydetail {

struct SymbolRecipe {
    char symbol;
    double pitch_mult;
    double harmonics[8];
};

// Each transcript character selects a distinct pitch multiplier and harmonic
// profile, so the text genuinely predicts the audio content.
inline const SymbolRecipe* symbol_recipes() {
    static const SymbolRecipe recipes[5] = {
        {'a', 1.00, {1.00, 0.70, 0.50, 0.35, 0.25, 0.18, 0.12, 0.08}},
        {'e', 1.26, {0.60, 1.00, 0.80, 0.30, 0.15, 0.10, 0.05, 0.03}},
        {'i', 1.50, {1.00, 0.20, 0.90, 0.15, 0.50, 0.10, 0.05, 0.03}},
        {'o', 0.84, {1.00, 0.80, 0.20, 0.10, 0.05, 0.02, 0.01, 0.005}},
        {'u', 0.67, {1.00, 0.30, 0.05, 0.02, 0.01, 0.0, 0.0, 0.0}},
    };
    return recipes;
}

inline constexpr int kNumSymbols = 5;
inline constexpr double kEdgeFadeSeconds = 0.015;

}  // namespace toydetail

// Synthesizes one "utterance": 2-5 harmonic-tone segments at a shared random
// fundamental, each segment shaped by its symbol recipe and an amplitude
// envelope. The transcript is the segment symbol string.
inline ToyItem toy_item(Rng& rng, int sample_rate) {
    using namespace toydetail;
    const double f0 = rng.uniform(80.0, 400.0);
    const int n_segments = 2 + rng.uniform_int(4);  // 2..5
    const double total_seconds = rng.uniform(1.0, 2.0);
    const double seg_seconds = total_seconds / n_segments;
    const int seg_samples = static_cast<int>(seg_seconds * sample_rate);
    const int fade = std::max(1, static_cast<int>(kEdgeFadeSeconds * sample_rate));

    ToyItem item;
    item.clean.sample_rate = sample_rate;
    item.clean.samples.assign(static_cast<size_t>(seg_samples) * n_segments, 0.0);

    for (int seg = 0; seg < n_segments; ++seg) {
        const int sym = rng.uniform_int(kNumSymbols);
        const SymbolRecipe& recipe = symbol_recipes()[sym];
        item.transcript.push_back(recipe.symbol);
        const double pitch = f0 * recipe.pitch_mult;
        const size_t base = static_cast<size_t>(seg) * seg_samples;
        for (int i = 0; i < seg_samples; ++i) {
            const double t = static_cast<double>(i) / sample_rate;
            double s = 0.0;
            for (int k = 0; k < 8; ++k) {
                const double freq = pitch * (k + 1);
                if (recipe.harmonics[k] == 0.0 || freq >= 0.45 * sample_rate) {
                    continue;
                }
                s += recipe.harmonics[k] * std::sin(2.0 * M_PI * freq * t);
            }
            double env = 1.0;
            if (i < fade) {
                env = 0.5 - 0.5 * std::cos(M_PI * i / fade);
            }
            if (i >= seg_samples - fade) {
                env *= 0.5 - 0.5 * std::cos(M_PI * (seg_samples - 1 - i) / static_cast<double>(fade));
            }
            item.clean.samples[base + i] = s * env;
        }
    }

    double peak = 0.0;
    for (double s : item.clean.samples) {
        peak = std::max(peak, std::abs(s));
    }
    if (peak > 0.0) {
        const double scale = 0.5 / peak;
        for (double& s : item.clean.samples) {
            s *= scale;
        }
    }
    return item;
}

inline std::vector<ToyItem> toy_corpus(int n_items, Rng& rng, const MelConfig& mel_cfg) {
    if (n_items < 1) {
        throw DomainError("toy_corpus: n_items must be >= 1");
    }
    std::vector<ToyItem> items;
    items.reserve(n_items);
    for (int i = 0; i < n_items; ++i) {
        items.push_back(toy_item(rng, mel_cfg.sample_rate));
    }
    return items;
}

// Colored noise for mixture synthesis: white Gaussian through a one-pole
// lowpass with a random coefficient, unit RMS.
inline Waveform synth_noise(size_t n_samples, int sample_rate, Rng& rng) {
    Waveform w;
    w.sample_rate = sample_rate;
    w.samples.resize(n_samples);
    const double a = rng.uniform(0.0, 0.95);
    double prev = 0.0;
    for (size_t i = 0; i < n_samples; ++i) {
        prev = a * prev + (1.0 - a) * rng.normal();
        w.samples[i] = prev;
    }
    const double rms = std::sqrt(signal_power(w));
    if (rms > 0.0) {
        for (double& s : w.samples) {
            s /= rms;
        }
    }
    return w;
}

// ---------------------------------------------------------------------------
// batches
// ---------------------------------------------------------------------------

// One training example in mel space, padded to the batch frame count.
struct BatchItem {
    Mat<float> m0, m_t, m_y, m_x, u_target;  // all [n_mels x frames]
    FlowTime t;
    TextCondition text;
    int valid_frames = 0;
};

struct Batch {
    std::vector<BatchItem> items;
    int frames = 0;  // padded frame count (max over items)
};

// Converts waveform pairs into the mel-space tensors the model trains on:
// analysis mels, Gaussian source sample, interpolated state and target
// velocity at a uniform random t, with text dropped at text_drop_prob.
// Items are right-padded to the longest frame count; valid_frames is the
// per-item loss mask.
inline Batch make_batch(const std::vector<TrainingPair>& pairs, const MelConfig& mel_cfg,
                        double text_drop_prob, Rng& rng) {
    if (pairs.empty()) {
        throw DomainError("make_batch: empty pair list");
    }
    Batch batch;
    batch.items.resize(pairs.size());

    std::vector<Mat<float>> mel_x(pairs.size());
    std::vector<Mat<float>> mel_y(pairs.size());
    int max_frames = 0;
    for (size_t i = 0; i < pairs.size(); ++i) {
        mel_x[i] = cast_mat<double, float>(wav_to_mel(pairs[i].clean, mel_cfg).data);
        mel_y[i] = cast_mat<double, float>(wav_to_mel(pairs[i].noisy, mel_cfg).data);
        max_frames = std::max(max_frames, mel_x[i].cols);
    }
    batch.frames = max_frames;

    const float pad_value = static_cast<float>(std::log(mel_cfg.log_floor));
    for (size_t i = 0; i < pairs.size(); ++i) {
        BatchItem& item = batch.items[i];
        item.valid_frames = mel_x[i].cols;

        auto pad = [&](const Mat<float>& m) {
            Mat<float> out(m.rows, max_frames, pad_value);
            for (int r = 0; r < m.rows; ++r) {
                for (int c = 0; c < m.cols; ++c) {
                    out(r, c) = m(r, c);
                }
            }
            return out;
        };
        item.m_x = pad(mel_x[i]);
        item.m_y = pad(mel_y[i]);
        item.m0 = gaussian_mat<float>(mel_cfg.n_mels, max_frames, rng);
        item.t = sample_time(rng);
        item.m_t = interpolate(item.m0, item.m_x, item.t);
        item.u_target = target_velocity(item.m0, item.m_x);
        item.text = rng.bernoulli(text_drop_prob) ? TextCondition::none()
                                                  : TextCondition::from_text(pairs[i].transcript);
    }
    return batch;
}

// ---------------------------------------------------------------------------
// schedule, clipping, optimizer
// ---------------------------------------------------------------------------

// Linear warmup to peak_lr over warmup_steps, then linear decay to zero at
// total_steps.
inline double lr_at(int step, const TrainConfig& cfg) {
    if (step < 0 || step > cfg.total_steps) {
        throw DomainError("lr_at: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(cfg.total_steps) + "]");
    }
    if (step <= cfg.warmup_steps) {
        return cfg.peak_lr * static_cast<double>(step) / cfg.warmup_steps;
    }
    return cfg.peak_lr * static_cast<double>(cfg.total_steps - step) /
           static_cast<double>(cfg.total_steps - cfg.warmup_steps);
}

// Global-norm gradient clipping over an arbitrary tensor list. Returns the
// pre-clip norm. Non-finite gradients raise DivergenceError with the tensor
// name supplied by `names` (parallel to `tensors`).
template <typename S>
inline double clip_grad_norm(std::vector<Mat<S>*>& tensors, const std::vector<std::string>& names,
                             double max_norm) {
    if (!(max_norm > 0.0)) {
        throw DomainError("clip_grad_norm: max_norm must be positive");
    }
    double sq = 0.0;
    for (size_t i = 0; i < tensors.size(); ++i) {
        double local = 0.0;
        for (const S& g : tensors[i]->v) {
            local += static_cast<double>(g) * static_cast<double>(g);
        }
        if (!std::isfinite(local)) {
            const std::string name = i < names.size() ? names[i] : std::to_string(i);
            throw DivergenceError("clip_grad_norm: non-finite gradient in tensor '" + name + "'");
        }
        sq += local;
    }
    const double total = std::sqrt(sq);
    if (total > max_norm) {
        const S scale = static_cast<S>(max_norm / total);
        for (auto* t : tensors) {
            for (S& g : t->v) {
                g *= scale;
            }
        }
    }
    return total;
}

template <typename S>
inline std::vector<Mat<S>*> collect_tensors(ModelParams<S>& p, const ModelConfig& cfg,
                                            std::vector<std::string>* names = nullptr) {
    std::vector<Mat<S>*> out;
    visit_params(p, cfg, [&](const std::string& name, Mat<S>& m, int, int, InitKind) {
        out.push_back(&m);
        if (names) {
            names->push_back(name);
        }
    });
    return out;
}

template <typename S>
inline double clip_grad_norm(ModelParams<S>& grads, const ModelConfig& cfg, double max_norm) {
    std::vector<std::string> names;
    auto tensors = collect_tensors(grads, cfg, &names);
    return clip_grad_norm(tensors, names, max_norm);
}

// First/second moment estimates plus the update counter.
struct AdamState {
    ModelParams<float> m;
    ModelParams<float> v;
    int64_t t = 0;
};

inline AdamState make_opt_state(const ModelConfig& cfg) {
    AdamState s;
    s.m = zero_params<float>(cfg);
    s.v = zero_params<float>(cfg);
    s.t = 0;
    return s;
}

// Decoupled AdamW update of one tensor: moment updates with bias correction
// for update count t, weight decay applied to the parameters at the same
// learning rate.
inline void adamw_apply(float* p, const float* g, float* m, float* v, size_t n, int64_t t,
                        double lr) {
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t));
    for (size_t j = 0; j < n; ++j) {
        m[j] = static_cast<float>(kAdamBeta1 * m[j] + (1.0 - kAdamBeta1) * g[j]);
        v[j] = static_cast<float>(kAdamBeta2 * v[j] +
                                  (1.0 - kAdamBeta2) * static_cast<double>(g[j]) * g[j]);
        const double m_hat = m[j] / bc1;
        const double v_hat = v[j] / bc2;
        const double update = m_hat / (std::sqrt(v_hat) + kAdamEps) + kWeightDecay * p[j];
        p[j] = static_cast<float>(p[j] - lr * update);
    }
}

inline void adamw_update(ModelParams<float>& params, const ModelParams<float>& grads,
                         AdamState& opt, const ModelConfig& cfg, double lr) {
    opt.t += 1;
    auto p_t = collect_tensors(params, cfg);
    auto g_t = collect_tensors(const_cast<ModelParams<float>&>(grads), cfg);
    auto m_t = collect_tensors(opt.m, cfg);
    auto v_t = collect_tensors(opt.v, cfg);
    for (size_t i = 0; i < p_t.size(); ++i) {
        adamw_apply(p_t[i]->v.data(), g_t[i]->v.data(), m_t[i]->v.data(), v_t[i]->v.data(),
                    p_t[i]->v.size(), opt.t, lr);
    }
}

// ---------------------------------------------------------------------------
// training step
// ---------------------------------------------------------------------------

// Frame-masked velocity MSE over a batch; gradients are exact, summed in item
// order so the result is independent of the thread count.
inline double train_step(const Batch& batch, ModelParams<float>& params, AdamState& opt,
                         const TrainConfig& train_cfg, const ModelConfig& model_cfg, int step) {
    if (step < 0 || step >= train_cfg.total_steps) {
        throw DomainError("train_step: step outside [0, total_steps)");
    }
    const int n_items = static_cast<int>(batch.items.size());
    int64_t total_cells = 0;
    for (const auto& item : batch.items) {
        total_cells += static_cast<int64_t>(model_cfg.n_mels) * item.valid_frames;
    }

    std::vector<ModelParams<float>> item_grads(n_items);
    std::vector<double> item_loss(n_items, 0.0);

    auto process_item = [&](int i) {
        const BatchItem& item = batch.items[i];
        item_grads[i] = zero_params<float>(model_cfg);
        Rng rng(derive_seed(train_cfg.seed, 0xd402, static_cast<uint64_t>(step),
                            static_cast<uint64_t>(i)));
        ForwardCache<float> cache;
        const Mat<float> pred = model_forward(item.m_t, item.m_y, item.t, item.text, params,
                                              model_cfg, /*train_mode=*/true, &rng, &cache);
        Mat<float> d_pred(pred.rows, pred.cols);
        double loss_num = 0.0;
        for (int m = 0; m < pred.rows; ++m) {
            for (int f = 0; f < item.valid_frames; ++f) {
                const double diff = static_cast<double>(pred(m, f)) - item.u_target(m, f);
                loss_num += diff * diff;
                d_pred(m, f) = static_cast<float>(2.0 * diff / static_cast<double>(total_cells));
            }
        }
        item_loss[i] = loss_num;
        model_backward(d_pred, cache, params, model_cfg, item_grads[i]);
    };

    const int n_threads = std::max(1, std::min<int>(
        n_items, static_cast<int>(std::thread::hardware_concurrency())));
    if (n_threads == 1) {
        for (int i = 0; i < n_items; ++i) {
            process_item(i);
        }
    } else {
        std::vector<std::thread> workers;
        workers.reserve(n_threads);
        for (int w = 0; w < n_threads; ++w) {
            workers.emplace_back([&, w] {
                for (int i = w; i < n_items; i += n_threads) {
                    process_item(i);
                }
            });
        }
        for (auto& th : workers) {
            th.join();
        }
    }

    double loss = 0.0;
    for (int i = 0; i < n_items; ++i) {
        loss += item_loss[i];
    }
    loss /= static_cast<double>(total_cells);
    if (!std::isfinite(loss)) {
        throw DivergenceError("train_step: non-finite loss at step " + std::to_string(step));
    }

    // Ordered reduction keeps runs bit-identical across thread counts.
    ModelParams<float> grads = std::move(item_grads[0]);
    auto acc = collect_tensors(grads, model_cfg);
    for (int i = 1; i < n_items; ++i) {
        auto src = collect_tensors(item_grads[i], model_cfg);
        for (size_t k = 0; k < acc.size(); ++k) {
            for (size_t j = 0; j < acc[k]->v.size(); ++j) {
                acc[k]->v[j] += src[k]->v[j];
            }
        }
    }

    clip_grad_norm(grads, model_cfg, train_cfg.grad_clip_norm);
    adamw_update(params, grads, opt, model_cfg, lr_at(step, train_cfg));
    return loss;
}

// ---------------------------------------------------------------------------
// validation
// ---------------------------------------------------------------------------

struct EvalItem {
    Waveform clean;
    Waveform noisy;
    std::string transcript;
};

struct ValidationReport {
    double cfm_loss = 0.0;
    double mel_l1_enhanced = 0.0;  // Eq-style reconstruction metric on sampled mels
    double mel_l1_noisy = 0.0;
    double improvement_rate = 0.0;
    int n_items = 0;
};

// Shared metric core: `sampler` maps (noisy mel, text, item index) to the
// enhanced mel estimate. Tests inject oracle/identity samplers here.
template <typename SamplerFn>
inline ValidationReport sampler_metrics(const std::vector<EvalItem>& items,
                                        const MelConfig& mel_cfg, SamplerFn&& sampler) {
    if (items.empty()) {
        throw DomainError("validate: empty held-out set");
    }
    ValidationReport report;
    report.n_items = static_cast<int>(items.size());
    int improved = 0;
    for (size_t i = 0; i < items.size(); ++i) {
        const Mat<float> m_x = cast_mat<double, float>(wav_to_mel(items[i].clean, mel_cfg).data);
        const Mat<float> m_y = cast_mat<double, float>(wav_to_mel(items[i].noisy, mel_cfg).data);
        const Mat<float> m_hat = sampler(m_y, items[i].transcript, static_cast<int>(i));
        const double l1_out = mel_l1(m_hat, m_x);
        const double l1_in = mel_l1(m_y, m_x);
        report.mel_l1_enhanced += l1_out;
        report.mel_l1_noisy += l1_in;
        if (l1_out < l1_in) {
            ++improved;
        }
    }
    report.mel_l1_enhanced /= report.n_items;
    report.mel_l1_noisy /= report.n_items;
    report.improvement_rate = static_cast<double>(improved) / report.n_items;
    return report;
}

// Full validation: ODE sampling per item for the reconstruction metrics plus
// the velocity-regression loss on deterministic per-item path samples.
inline ValidationReport validate(const ModelParams<float>& params, const ModelConfig& model_cfg,
                                 const std::vector<EvalItem>& items, const MelConfig& mel_cfg,
                                 const SolverConfig& solver) {
    if (items.empty()) {
        throw DomainError("validate: empty held-out set");
    }

    // Precompute enhanced mels in parallel; items are independent.
    std::vector<Mat<float>> enhanced(items.size());
    const int n_threads = std::max(1, std::min<int>(
        static_cast<int>(items.size()),
        static_cast<int>(std::thread::hardware_concurrency())));
    auto enhance_item = [&](size_t i) {
        const Mat<float> m_y = cast_mat<double, float>(wav_to_mel(items[i].noisy, mel_cfg).data);
        Rng rng(derive_seed(solver.seed, 0x7a11, i));
        const Mat<float> m0 = gaussian_mat<float>(m_y.rows, m_y.cols, rng);
        const TextCondition text = items[i].transcript.empty()
                                       ? TextCondition::none()
                                       : TextCondition::from_text(items[i].transcript);
        enhanced[i] = integrate(m0, m_y, text, params, model_cfg, solver);
    };
    if (n_threads == 1) {
        for (size_t i = 0; i < items.size(); ++i) {
            enhance_item(i);
        }
    } else {
        std::vector<std::thread> workers;
        for (int w = 0; w < n_threads; ++w) {
            workers.emplace_back([&, w] {
                for (size_t i = static_cast<size_t>(w); i < items.size();
                     i += static_cast<size_t>(n_threads)) {
                    enhance_item(i);
                }
            });
        }
        for (auto& th : workers) {
            th.join();
        }
    }

    ValidationReport report = sampler_metrics(
        items, mel_cfg,
        [&](const Mat<float>&, const std::string&, int i) { return enhanced[i]; });

    // Velocity loss on one deterministic path sample per item.
    double cfm_acc = 0.0;
    for (size_t i = 0; i < items.size(); ++i) {
        const Mat<float> m_x = cast_mat<double, float>(wav_to_mel(items[i].clean, mel_cfg).data);
        const Mat<float> m_y = cast_mat<double, float>(wav_to_mel(items[i].noisy, mel_cfg).data);
        Rng rng(derive_seed(solver.seed, 0xcf17, i));
        const Mat<float> m0 = gaussian_mat<float>(m_x.rows, m_x.cols, rng);
        const FlowTime t = sample_time(rng);
        const Mat<float> m_t = interpolate(m0, m_x, t);
        const Mat<float> u = target_velocity(m0, m_x);
        const TextCondition text = items[i].transcript.empty()
                                       ? TextCondition::none()
                                       : TextCondition::from_text(items[i].transcript);
        const Mat<float> pred = model_forward(m_t, m_y, t, text, params, model_cfg);
        cfm_acc += cfm_loss(pred, u);
    }
    report.cfm_loss = cfm_acc / static_cast<double>(items.size());
    return report;
}

}  // namespace flowse
