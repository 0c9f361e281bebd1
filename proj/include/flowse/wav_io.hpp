#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "flowse/common.hpp"
#include "flowse/dsp.hpp"

namespace flowse {

enum class WavFormat { pcm16, float32 };

namespace wavdetail {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xFF));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xFF));
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xFF));
    out.push_back(static_cast<uint8_t>((v >> 24) & 0xFF));
}

inline void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xFF));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xFF));
}

inline uint32_t get_u32(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

inline uint16_t get_u16(const uint8_t* p) {
    return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace wavdetail

// Linear-interpolation resampler. Quality is adequate for the synthetic
// corpus and benchmark paths; not an anti-aliased polyphase design.
inline Waveform resample_linear(const Waveform& in, int target_rate) {
    if (target_rate <= 0) {
        throw DomainError("resample: target rate must be positive");
    }
    if (in.sample_rate == target_rate) {
        return in;
    }
    require_valid(in, "resample");
    const double ratio = static_cast<double>(in.sample_rate) / target_rate;
    const size_t out_len =
        std::max<size_t>(1, static_cast<size_t>(in.samples.size() / ratio));
    Waveform out;
    out.sample_rate = target_rate;
    out.samples.resize(out_len);
    for (size_t i = 0; i < out_len; ++i) {
        const double pos = i * ratio;
        const size_t i0 = std::min(static_cast<size_t>(pos), in.samples.size() - 1);
        const size_t i1 = std::min(i0 + 1, in.samples.size() - 1);
        const double frac = pos - static_cast<double>(i0);
        out.samples[i] = (1.0 - frac) * in.samples[i0] + frac * in.samples[i1];
    }
    return out;
}

// Reads a RIFF/WAVE file. Supports PCM16 and IEEE float32. Stereo input is
// averaged to mono with a warning on stderr.
inline Waveform read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open WAV file: " + path);
    }
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
        throw FormatError("not a RIFF/WAVE file: " + path);
    }

    uint16_t audio_format = 0;
    uint16_t channels = 0;
    uint32_t sample_rate = 0;
    uint16_t bits = 0;
    const uint8_t* data = nullptr;
    uint32_t data_len = 0;

    size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
        const uint32_t chunk_len = wavdetail::get_u32(bytes.data() + pos + 4);
        const size_t body = pos + 8;
        if (body + chunk_len > bytes.size()) {
            throw FormatError("truncated WAV chunk at offset " + std::to_string(pos));
        }
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (chunk_len < 16) {
                throw FormatError("fmt chunk too short in " + path);
            }
            audio_format = wavdetail::get_u16(bytes.data() + body);
            channels = wavdetail::get_u16(bytes.data() + body + 2);
            sample_rate = wavdetail::get_u32(bytes.data() + body + 4);
            bits = wavdetail::get_u16(bytes.data() + body + 14);
        } else if (std::memcmp(id, "data", 4) == 0) {
            data = bytes.data() + body;
            data_len = chunk_len;
        }
        pos = body + chunk_len + (chunk_len & 1);  // chunks are word-aligned
    }

    if (audio_format == 0 || data == nullptr) {
        throw FormatError("missing fmt or data chunk in " + path);
    }
    if (channels == 0) {
        throw FormatError("WAV has zero channels: " + path);
    }
    if (channels > 2) {
        throw FormatError("only mono/stereo WAV supported: " + path);
    }

    const bool pcm16 = audio_format == 1 && bits == 16;
    const bool f32 = audio_format == 3 && bits == 32;
    if (!pcm16 && !f32) {
        throw FormatError("unsupported WAV encoding (want PCM16 or float32): " + path);
    }

    const size_t bytes_per_sample = pcm16 ? 2 : 4;
    const size_t frame_bytes = bytes_per_sample * channels;
    const size_t n_frames = data_len / frame_bytes;
    if (n_frames == 0) {
        throw DomainError("WAV has no samples: " + path);
    }
    if (channels == 2) {
        std::cerr << "warning: averaging stereo input to mono: " << path << "\n";
    }

    Waveform w;
    w.sample_rate = static_cast<int>(sample_rate);
    w.samples.resize(n_frames);
    for (size_t i = 0; i < n_frames; ++i) {
        double acc = 0.0;
        for (uint16_t ch = 0; ch < channels; ++ch) {
            const uint8_t* p = data + i * frame_bytes + ch * bytes_per_sample;
            if (pcm16) {
                int16_t s;
                std::memcpy(&s, p, 2);
                acc += static_cast<double>(s) / 32768.0;
            } else {
                float s;
                std::memcpy(&s, p, 4);
                acc += static_cast<double>(s);
            }
        }
        w.samples[i] = acc / channels;
    }
    return w;
}

inline Waveform read_wav_resampled(const std::string& path, int target_rate) {
    Waveform w = read_wav(path);
    if (w.sample_rate != target_rate) {
        std::cerr << "warning: resampling " << path << " from " << w.sample_rate << " Hz to "
                  << target_rate << " Hz (linear interpolation)\n";
        w = resample_linear(w, target_rate);
    }
    return w;
}

// Writes a mono WAV file. PCM16 output clamps to [-1, 1].
inline void write_wav(const std::string& path, const Waveform& w,
                      WavFormat format = WavFormat::float32) {
    require_valid(w, "write_wav");
    const size_t n = w.samples.size();
    const uint16_t bytes_per_sample = format == WavFormat::pcm16 ? 2 : 4;
    const uint32_t data_len = static_cast<uint32_t>(n * bytes_per_sample);

    std::vector<uint8_t> out;
    out.reserve(44 + data_len);
    out.insert(out.end(), {'R', 'I', 'F', 'F'});
    wavdetail::put_u32(out, 36 + data_len);
    out.insert(out.end(), {'W', 'A', 'V', 'E'});
    out.insert(out.end(), {'f', 'm', 't', ' '});
    wavdetail::put_u32(out, 16);
    wavdetail::put_u16(out, format == WavFormat::pcm16 ? 1 : 3);
    wavdetail::put_u16(out, 1);  // mono
    wavdetail::put_u32(out, static_cast<uint32_t>(w.sample_rate));
    wavdetail::put_u32(out, static_cast<uint32_t>(w.sample_rate) * bytes_per_sample);
    wavdetail::put_u16(out, bytes_per_sample);
    wavdetail::put_u16(out, static_cast<uint16_t>(bytes_per_sample * 8));
    out.insert(out.end(), {'d', 'a', 't', 'a'});
    wavdetail::put_u32(out, data_len);

    for (size_t i = 0; i < n; ++i) {
        if (format == WavFormat::pcm16) {
            const double clamped = std::clamp(w.samples[i], -1.0, 1.0);
            const int16_t s = static_cast<int16_t>(std::lrint(clamped * 32767.0));
            wavdetail::put_u16(out, static_cast<uint16_t>(s));
        } else {
            const float s = static_cast<float>(w.samples[i]);
            uint32_t u;
            std::memcpy(&u, &s, 4);
            wavdetail::put_u32(out, u);
        }
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw IoError("cannot open for writing: " + path);
    }
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) {
        throw IoError("short write: " + path);
    }
}

}  // namespace flowse
