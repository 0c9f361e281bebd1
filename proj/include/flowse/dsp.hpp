#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <vector>

#include "flowse/common.hpp"
#include "flowse/config.hpp"
#include "flowse/mat.hpp"

namespace flowse {

// Mono audio. Samples are nominally in [-1, 1]; DSP math runs in double.
struct Waveform {
    std::vector<double> samples;
    int sample_rate = 24000;

    size_t length() const { return samples.size(); }
    double seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
};

inline void require_valid(const Waveform& w, const char* what) {
    if (w.samples.empty()) {
        throw DomainError(std::string(what) + ": empty signal");
    }
    if (w.sample_rate <= 0) {
        throw DomainError(std::string(what) + ": non-positive sample rate");
    }
    for (double s : w.samples) {
        if (!std::isfinite(s)) {
            throw DomainError(std::string(what) + ": non-finite sample");
        }
    }
}

// Log-mel magnitudes, [n_mels x frames]. Every entry >= log(log_floor).
struct MelSpectrogram {
    Mat<double> data;
    MelConfig config;

    int n_mels() const { return data.rows; }
    int frames() const { return data.cols; }
};

// Half-spectrum STFT output, [(n_fft/2 + 1) x frames].
struct ComplexSpectrogram {
    Mat<std::complex<double>> data;
    MelConfig config;

    int n_bins() const { return data.rows; }
    int frames() const { return data.cols; }
};

namespace dspdetail {

// In-place iterative radix-2 FFT. inverse=true applies conjugate transform
// without the 1/N scale (callers scale where needed).
inline void fft_radix2(std::vector<std::complex<double>>& a, bool inverse) {
    const size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) {
        throw DomainError("fft: size must be a power of two");
    }
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) {
            j ^= bit;
        }
        j ^= bit;
        if (i < j) {
            std::swap(a[i], a[j]);
        }
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = 2.0 * M_PI / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        const std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t j = 0; j < len / 2; ++j) {
                const std::complex<double> u = a[i + j];
                const std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
}

// Periodic Hann window of the given length.
inline std::vector<double> hann_window(int length) {
    std::vector<double> w(length);
    for (int n = 0; n < length; ++n) {
        w[n] = 0.5 * (1.0 - std::cos(2.0 * M_PI * n / length));
    }
    return w;
}

// Reflect-padded sample lookup (librosa-style mirror without edge repeat).
// Falls back to constant padding for single-sample signals.
inline double sample_reflect(const std::vector<double>& x, long long idx) {
    const long long n = static_cast<long long>(x.size());
    if (n == 1) {
        return x[0];
    }
    const long long period = 2 * (n - 1);
    long long m = idx % period;
    if (m < 0) {
        m += period;
    }
    if (m >= n) {
        m = period - m;
    }
    return x[static_cast<size_t>(m)];
}

inline int frame_count(size_t n_samples, int hop) {
    return static_cast<int>((n_samples + hop - 1) / static_cast<size_t>(hop));
}

}  // namespace dspdetail

// Centered STFT: reflect padding of win_length/2 on both ends, periodic Hann
// window, frames every hop_length samples. Frame count is ceil(T / hop).
inline ComplexSpectrogram stft(const Waveform& w, const MelConfig& cfg) {
    cfg.validate();
    if (w.sample_rate != cfg.sample_rate) {
        throw ConfigError("stft: waveform sample rate " + std::to_string(w.sample_rate) +
                          " does not match config " + std::to_string(cfg.sample_rate));
    }
    require_valid(w, "stft");

    const int win = cfg.win_length;
    const int hop = cfg.hop_length;
    const int n_fft = cfg.n_fft;
    const int n_bins = cfg.n_bins();
    const int pad = win / 2;
    const int offset = (n_fft - win) / 2;  // window centered in the FFT frame
    const int frames = dspdetail::frame_count(w.samples.size(), hop);
    const std::vector<double> window = dspdetail::hann_window(win);

    ComplexSpectrogram out;
    out.config = cfg;
    out.data = Mat<std::complex<double>>(n_bins, frames);

    std::vector<std::complex<double>> buf(n_fft);
    for (int f = 0; f < frames; ++f) {
        std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
        const long long start = static_cast<long long>(f) * hop - pad;
        for (int j = 0; j < win; ++j) {
            buf[offset + j] = window[j] * dspdetail::sample_reflect(w.samples, start + j);
        }
        dspdetail::fft_radix2(buf, false);
        for (int k = 0; k < n_bins; ++k) {
            out.data(k, f) = buf[k];
        }
    }
    return out;
}

// Inverse STFT by weighted overlap-add with per-sample window-square
// normalization; exact inverse of stft wherever the window sum is nonzero.
inline Waveform istft(const ComplexSpectrogram& s, const MelConfig& cfg, size_t out_len) {
    cfg.validate();
    if (s.data.rows != cfg.n_bins()) {
        throw DomainError("istft: spectrogram has " + std::to_string(s.data.rows) +
                          " bins, config expects " + std::to_string(cfg.n_bins()));
    }
    if (s.data.cols < 1) {
        throw DomainError("istft: empty spectrogram");
    }
    if (out_len < 1 || dspdetail::frame_count(out_len, cfg.hop_length) != s.data.cols) {
        throw DomainError("istft: out_len " + std::to_string(out_len) +
                          " inconsistent with frame count " + std::to_string(s.data.cols));
    }

    const int win = cfg.win_length;
    const int hop = cfg.hop_length;
    const int n_fft = cfg.n_fft;
    const int n_bins = cfg.n_bins();
    const int pad = win / 2;
    const int offset = (n_fft - win) / 2;
    const int frames = s.data.cols;
    const std::vector<double> window = dspdetail::hann_window(win);

    const size_t ola_len = static_cast<size_t>(frames - 1) * hop + win;
    std::vector<double> num(ola_len, 0.0);
    std::vector<double> den(ola_len, 0.0);

    std::vector<std::complex<double>> buf(n_fft);
    for (int f = 0; f < frames; ++f) {
        // Hermitian extension of the half spectrum, then inverse FFT.
        for (int k = 0; k < n_bins; ++k) {
            buf[k] = s.data(k, f);
        }
        for (int k = n_bins; k < n_fft; ++k) {
            buf[k] = std::conj(s.data(n_fft - k, f));
        }
        dspdetail::fft_radix2(buf, true);
        const size_t base = static_cast<size_t>(f) * hop;
        for (int j = 0; j < win; ++j) {
            const double sample = buf[offset + j].real() / n_fft;
            num[base + j] += window[j] * sample;
            den[base + j] += window[j] * window[j];
        }
    }

    Waveform out;
    out.sample_rate = cfg.sample_rate;
    out.samples.resize(out_len);
    for (size_t i = 0; i < out_len; ++i) {
        const size_t p = i + pad;
        out.samples[i] = num[p] / std::max(den[p], 1e-10);
    }
    return out;
}

// HTK mel scale.
inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular mel filterbank, [n_mels x (n_fft/2 + 1)], not area-normalized.
// Every row is unimodal and guaranteed to have at least one positive entry
// (degenerate narrow filters fall back to their peak bin).
inline Mat<double> mel_filterbank(const MelConfig& cfg) {
    cfg.validate();
    const int n_bins = cfg.n_bins();
    const int f = cfg.n_mels;
    Mat<double> fb(f, n_bins);

    const double mel_lo = hz_to_mel(cfg.f_min);
    const double mel_hi = hz_to_mel(cfg.f_max);
    std::vector<double> hz_pts(f + 2);
    for (int m = 0; m < f + 2; ++m) {
        hz_pts[m] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * m / (f + 1));
    }

    const double bin_hz = static_cast<double>(cfg.sample_rate) / cfg.n_fft;
    for (int m = 0; m < f; ++m) {
        const double lo = hz_pts[m];
        const double center = hz_pts[m + 1];
        const double hi = hz_pts[m + 2];
        bool any_positive = false;
        for (int k = 0; k < n_bins; ++k) {
            const double freq = k * bin_hz;
            double wgt = 0.0;
            if (freq > lo && freq < hi) {
                wgt = freq <= center ? (freq - lo) / (center - lo) : (hi - freq) / (hi - center);
            }
            fb(m, k) = wgt;
            any_positive = any_positive || wgt > 0.0;
        }
        if (!any_positive) {
            const int peak = static_cast<int>(std::lround(center / bin_hz));
            fb(m, std::clamp(peak, 0, n_bins - 1)) = 1.0;
        }
    }
    return fb;
}

// Log-mel analysis: log(max(filterbank * |stft|, log_floor)).
inline MelSpectrogram wav_to_mel(const Waveform& w, const MelConfig& cfg) {
    const ComplexSpectrogram spec = stft(w, cfg);
    const Mat<double> fb = mel_filterbank(cfg);
    const int frames = spec.frames();
    const int n_bins = spec.n_bins();

    Mat<double> mag(n_bins, frames);
    for (int k = 0; k < n_bins; ++k) {
        for (int t = 0; t < frames; ++t) {
            mag(k, t) = std::abs(spec.data(k, t));
        }
    }

    MelSpectrogram mel;
    mel.config = cfg;
    mel.data = Mat<double>(cfg.n_mels, frames);
    for (int m = 0; m < cfg.n_mels; ++m) {
        const double* fbrow = fb.row(m);
        for (int t = 0; t < frames; ++t) {
            double acc = 0.0;
            for (int k = 0; k < n_bins; ++k) {
                acc += fbrow[k] * mag(k, t);
            }
            mel.data(m, t) = std::log(std::max(acc, cfg.log_floor));
        }
    }
    return mel;
}

namespace dspdetail {

// Solves (A + ridge*I) X = B for symmetric positive definite A via Cholesky.
// A is [n x n], B is [n x m]; returns X [n x m].
inline Mat<double> cholesky_solve(Mat<double> a, const Mat<double>& b, double ridge) {
    const int n = a.rows;
    for (int i = 0; i < n; ++i) {
        a(i, i) += ridge;
    }
    // Lower-triangular factorization in place.
    for (int j = 0; j < n; ++j) {
        double d = a(j, j);
        for (int k = 0; k < j; ++k) {
            d -= a(j, k) * a(j, k);
        }
        if (d <= 0.0) {
            throw DomainError("cholesky: matrix not positive definite");
        }
        a(j, j) = std::sqrt(d);
        for (int i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (int k = 0; k < j; ++k) {
                s -= a(i, k) * a(j, k);
            }
            a(i, j) = s / a(j, j);
        }
    }
    Mat<double> x = b;
    // Forward then backward substitution, column by column.
    for (int c = 0; c < x.cols; ++c) {
        for (int i = 0; i < n; ++i) {
            double s = x(i, c);
            for (int k = 0; k < i; ++k) {
                s -= a(i, k) * x(k, c);
            }
            x(i, c) = s / a(i, i);
        }
        for (int i = n - 1; i >= 0; --i) {
            double s = x(i, c);
            for (int k = i + 1; k < n; ++k) {
                s -= a(k, i) * x(k, c);
            }
            x(i, c) = s / a(i, i);
        }
    }
    return x;
}

}  // namespace dspdetail

// Moore-Penrose pseudo-inverse of the mel filterbank with negative entries
// clamped to zero; maps mel magnitudes back to linear spectrogram magnitudes.
inline Mat<double> mel_pseudo_inverse(const MelConfig& cfg) {
    const Mat<double> fb = mel_filterbank(cfg);
    Mat<double> gram;  // fb * fb^T, [n_mels x n_mels]
    matmul_nt(fb, fb, gram);
    const Mat<double> x = dspdetail::cholesky_solve(gram, fb, 1e-12);  // [n_mels x n_bins]
    Mat<double> pinv = transpose(x);                                   // [n_bins x n_mels]
    for (auto& v : pinv.v) {
        v = std::max(v, 0.0);
    }
    return pinv;
}

// Griffin-Lim phase retrieval from a log-mel spectrogram. The magnitude
// target comes from the clamped filterbank pseudo-inverse; iteration starts
// from zero phase, which also defines the iters == 0 output. The procedure
// is fully deterministic; the seed parameter is reserved for stochastic
// phase-init variants and currently has no effect.
inline Waveform griffin_lim(const MelSpectrogram& m, int iters, uint64_t seed) {
    (void)seed;
    if (iters < 0) {
        throw DomainError("griffin_lim: iters must be >= 0");
    }
    const MelConfig& cfg = m.config;
    cfg.validate();
    if (m.data.rows != cfg.n_mels) {
        throw DomainError("griffin_lim: mel row count does not match config");
    }
    const int frames = m.data.cols;
    const int n_bins = cfg.n_bins();
    const size_t out_len = static_cast<size_t>(frames) * cfg.hop_length;

    const Mat<double> pinv = mel_pseudo_inverse(cfg);  // [n_bins x n_mels]

    // Magnitude estimate: pinv * exp(mel).
    Mat<double> linear_mel(cfg.n_mels, frames);
    for (size_t i = 0; i < linear_mel.v.size(); ++i) {
        linear_mel.v[i] = std::exp(m.data.v[i]);
    }
    Mat<double> mag;
    matmul_nn(pinv, linear_mel, mag);  // [n_bins x frames]

    ComplexSpectrogram spec;
    spec.config = cfg;
    spec.data = Mat<std::complex<double>>(n_bins, frames);
    for (int k = 0; k < n_bins; ++k) {
        for (int t = 0; t < frames; ++t) {
            spec.data(k, t) = std::complex<double>(mag(k, t), 0.0);  // zero phase
        }
    }

    Waveform w = istft(spec, cfg, out_len);
    for (int it = 0; it < iters; ++it) {
        const ComplexSpectrogram re = stft(w, cfg);
        for (int k = 0; k < n_bins; ++k) {
            for (int t = 0; t < frames; ++t) {
                const std::complex<double> c = re.data(k, t);
                const double a = std::abs(c);
                spec.data(k, t) = a > 0.0 ? c * (mag(k, t) / a)
                                          : std::complex<double>(mag(k, t), 0.0);
            }
        }
        w = istft(spec, cfg, out_len);
    }
    return w;
}

}  // namespace flowse
