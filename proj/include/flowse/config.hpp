#pragma once

#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "flowse/common.hpp"

namespace flowse {

// STFT / mel analysis settings. Defaults are the full-scale ("paper") preset:
// 100 mel bins from 24 kHz audio with hop 256.
struct MelConfig {
    int sample_rate = 24000;
    int n_fft = 1024;
    int win_length = 1024;
    int hop_length = 256;
    int n_mels = 100;
    double f_min = 0.0;
    double f_max = 12000.0;
    double log_floor = 1e-5;

    void validate() const {
        if (sample_rate <= 0) throw ConfigError("mel: sample_rate must be positive");
        if (n_fft <= 0 || (n_fft & (n_fft - 1)) != 0)
            throw ConfigError("mel: n_fft must be a positive power of two");
        if (!(hop_length <= win_length && win_length <= n_fft))
            throw ConfigError("mel: need hop_length <= win_length <= n_fft");
        if (hop_length <= 0) throw ConfigError("mel: hop_length must be positive");
        if (!(0.0 <= f_min && f_min < f_max && f_max <= sample_rate / 2.0))
            throw ConfigError("mel: need 0 <= f_min < f_max <= sample_rate/2");
        if (n_mels < 1) throw ConfigError("mel: n_mels must be >= 1");
        if (!(log_floor > 0.0)) throw ConfigError("mel: log_floor must be positive");
    }

    int n_bins() const { return n_fft / 2 + 1; }

    static MelConfig paper() { return MelConfig{}; }
    // The tiny preset keeps the full mel front end; only the network shrinks.
    static MelConfig tiny() { return MelConfig{}; }
};

// Velocity-network dimensions.
struct ModelConfig {
    int n_layers = 2;
    int n_heads = 4;
    int hidden_dim = 64;
    int ffn_dim = 128;
    int text_embed_dim = 32;
    int text_ffn_dim = 64;
    int text_vocab = 257;  // 256 byte values + filler id 0
    int n_mels = 100;
    double dropout = 0.1;

    void validate() const {
        if (n_layers < 1 || n_heads < 1 || hidden_dim < 1 || ffn_dim < 1 ||
            text_embed_dim < 1 || text_ffn_dim < 1 || text_vocab < 2 || n_mels < 1)
            throw ConfigError("model: all dimensions must be >= 1 (vocab >= 2)");
        if (hidden_dim % n_heads != 0)
            throw ConfigError("model: hidden_dim must be divisible by n_heads");
        if (hidden_dim % 2 != 0)
            throw ConfigError("model: hidden_dim must be even (sinusoidal time features)");
        if ((hidden_dim / n_heads) % 2 != 0)
            throw ConfigError("model: head dim must be even (rotary pairs)");
        if (!(dropout >= 0.0 && dropout < 1.0))
            throw ConfigError("model: dropout must be in [0, 1)");
    }

    static ModelConfig tiny() {
        ModelConfig c;
        c.n_layers = 2;
        c.n_heads = 4;
        c.hidden_dim = 64;
        c.ffn_dim = 128;
        c.text_embed_dim = 32;
        c.text_ffn_dim = 64;
        return c;
    }

    static ModelConfig paper() {
        ModelConfig c;
        c.n_layers = 22;
        c.n_heads = 16;
        c.hidden_dim = 1024;
        c.ffn_dim = 2048;
        c.text_embed_dim = 512;
        c.text_ffn_dim = 1024;
        return c;
    }
};

// Optimization schedule and data-synthesis settings.
struct TrainConfig {
    double peak_lr = 1e-3;
    int warmup_steps = 200;
    int total_steps = 2000;
    double grad_clip_norm = 1.0;
    double text_drop_prob = 0.2;
    int batch_size = 8;
    uint64_t seed = 1234;
    double snr_low_db = -5.0;
    double snr_high_db = 10.0;
    double segment_seconds = 1.0;

    void validate() const {
        if (!(peak_lr > 0.0)) throw ConfigError("train: peak_lr must be positive");
        if (!(0 < warmup_steps && warmup_steps < total_steps))
            throw ConfigError("train: need 0 < warmup_steps < total_steps");
        if (!(grad_clip_norm > 0.0)) throw ConfigError("train: grad_clip_norm must be positive");
        if (!(text_drop_prob >= 0.0 && text_drop_prob <= 1.0))
            throw ConfigError("train: text_drop_prob must be in [0, 1]");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (!(snr_low_db <= snr_high_db)) throw ConfigError("train: snr range inverted");
        if (!(segment_seconds > 0.0)) throw ConfigError("train: segment_seconds must be positive");
    }

    static TrainConfig tiny() { return TrainConfig{}; }

    static TrainConfig paper() {
        TrainConfig c;
        c.peak_lr = 7.5e-5;
        c.warmup_steps = 20000;
        c.total_steps = 1200000;
        c.batch_size = 8;
        return c;
    }
};

// ODE sampler settings; dt = 1 / n_steps.
struct SolverConfig {
    enum class Scheme { euler, midpoint };

    Scheme scheme = Scheme::euler;
    int n_steps = 16;
    uint64_t seed = 0;

    void validate() const {
        if (n_steps < 1) throw ConfigError("solver: n_steps must be >= 1");
    }
};

inline std::string scheme_name(SolverConfig::Scheme s) {
    return s == SolverConfig::Scheme::euler ? "euler" : "midpoint";
}

inline SolverConfig::Scheme scheme_from_name(const std::string& name) {
    if (name == "euler") return SolverConfig::Scheme::euler;
    if (name == "midpoint") return SolverConfig::Scheme::midpoint;
    throw ConfigError("solver.scheme must be 'euler' or 'midpoint', got '" + name + "'");
}

// Everything a run needs, addressable through dotted keys (mel.*, model.*,
// train.*, solver.*) for config files and --set overrides.
struct PipelineConfig {
    MelConfig mel;
    ModelConfig model;
    TrainConfig train;
    SolverConfig solver;

    void validate() const {
        mel.validate();
        model.validate();
        train.validate();
        solver.validate();
        if (model.n_mels != mel.n_mels)
            throw ConfigError("model.n_mels must equal mel.n_mels");
    }

    static PipelineConfig preset(const std::string& name) {
        PipelineConfig c;
        if (name == "tiny") {
            c.mel = MelConfig::tiny();
            c.model = ModelConfig::tiny();
            c.train = TrainConfig::tiny();
        } else if (name == "paper") {
            c.mel = MelConfig::paper();
            c.model = ModelConfig::paper();
            c.train = TrainConfig::paper();
        } else {
            throw ConfigError("unknown preset '" + name + "' (valid: tiny, paper)");
        }
        return c;
    }
};

namespace detail {

struct ConfigKey {
    std::string name;
    std::function<void(PipelineConfig&, const std::string&)> set;
    std::function<std::string(const PipelineConfig&)> get;
};

inline int parse_int(const std::string& key, const std::string& s) {
    try {
        size_t pos = 0;
        const long v = std::stol(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return static_cast<int>(v);
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + s + "' as integer");
    }
}

inline uint64_t parse_u64(const std::string& key, const std::string& s) {
    try {
        size_t pos = 0;
        const unsigned long long v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return static_cast<uint64_t>(v);
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + s + "' as unsigned integer");
    }
}

inline double parse_double(const std::string& key, const std::string& s) {
    try {
        size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + s + "' as number");
    }
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline const std::vector<ConfigKey>& config_keys() {
#define FLOWSE_INT_KEY(keyname, field)                                                     \
    ConfigKey{keyname, [](PipelineConfig& c, const std::string& s) {                       \
                  c.field = parse_int(keyname, s);                                         \
              },                                                                           \
              [](const PipelineConfig& c) { return std::to_string(c.field); }}
#define FLOWSE_DOUBLE_KEY(keyname, field)                                                  \
    ConfigKey{keyname, [](PipelineConfig& c, const std::string& s) {                       \
                  c.field = parse_double(keyname, s);                                      \
              },                                                                           \
              [](const PipelineConfig& c) { return format_double(c.field); }}
#define FLOWSE_U64_KEY(keyname, field)                                                     \
    ConfigKey{keyname, [](PipelineConfig& c, const std::string& s) {                       \
                  c.field = parse_u64(keyname, s);                                         \
              },                                                                           \
              [](const PipelineConfig& c) { return std::to_string(c.field); }}
    static const std::vector<ConfigKey> keys = {
        FLOWSE_INT_KEY("mel.sample_rate", mel.sample_rate),
        FLOWSE_INT_KEY("mel.n_fft", mel.n_fft),
        FLOWSE_INT_KEY("mel.win_length", mel.win_length),
        FLOWSE_INT_KEY("mel.hop_length", mel.hop_length),
        FLOWSE_INT_KEY("mel.n_mels", mel.n_mels),
        FLOWSE_DOUBLE_KEY("mel.f_min", mel.f_min),
        FLOWSE_DOUBLE_KEY("mel.f_max", mel.f_max),
        FLOWSE_DOUBLE_KEY("mel.log_floor", mel.log_floor),
        FLOWSE_INT_KEY("model.n_layers", model.n_layers),
        FLOWSE_INT_KEY("model.n_heads", model.n_heads),
        FLOWSE_INT_KEY("model.hidden_dim", model.hidden_dim),
        FLOWSE_INT_KEY("model.ffn_dim", model.ffn_dim),
        FLOWSE_INT_KEY("model.text_embed_dim", model.text_embed_dim),
        FLOWSE_INT_KEY("model.text_ffn_dim", model.text_ffn_dim),
        FLOWSE_INT_KEY("model.text_vocab", model.text_vocab),
        FLOWSE_INT_KEY("model.n_mels", model.n_mels),
        FLOWSE_DOUBLE_KEY("model.dropout", model.dropout),
        FLOWSE_DOUBLE_KEY("train.peak_lr", train.peak_lr),
        FLOWSE_INT_KEY("train.warmup_steps", train.warmup_steps),
        FLOWSE_INT_KEY("train.total_steps", train.total_steps),
        FLOWSE_DOUBLE_KEY("train.grad_clip_norm", train.grad_clip_norm),
        FLOWSE_DOUBLE_KEY("train.text_drop_prob", train.text_drop_prob),
        FLOWSE_INT_KEY("train.batch_size", train.batch_size),
        FLOWSE_U64_KEY("train.seed", train.seed),
        FLOWSE_DOUBLE_KEY("train.snr_low_db", train.snr_low_db),
        FLOWSE_DOUBLE_KEY("train.snr_high_db", train.snr_high_db),
        FLOWSE_DOUBLE_KEY("train.segment_seconds", train.segment_seconds),
        ConfigKey{"solver.scheme",
                  [](PipelineConfig& c, const std::string& s) {
                      c.solver.scheme = scheme_from_name(s);
                  },
                  [](const PipelineConfig& c) { return scheme_name(c.solver.scheme); }},
        FLOWSE_INT_KEY("solver.n_steps", solver.n_steps),
        FLOWSE_U64_KEY("solver.seed", solver.seed),
    };
#undef FLOWSE_INT_KEY
#undef FLOWSE_DOUBLE_KEY
#undef FLOWSE_U64_KEY
    return keys;
}

}  // namespace detail

inline std::vector<std::string> config_key_names() {
    std::vector<std::string> out;
    for (const auto& k : detail::config_keys()) {
        out.push_back(k.name);
    }
    return out;
}

// Set one dotted key. Unknown keys are rejected with the full list of valid
// keys so typos are easy to spot.
inline void config_set(PipelineConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& k : detail::config_keys()) {
        if (k.name == key) {
            k.set(cfg, value);
            return;
        }
    }
    std::string msg = "unknown config key '" + key + "'. Valid keys:";
    for (const auto& k : detail::config_keys()) {
        msg += "\n  " + k.name;
    }
    throw ConfigError(msg);
}

inline std::string config_get(const PipelineConfig& cfg, const std::string& key) {
    for (const auto& k : detail::config_keys()) {
        if (k.name == key) {
            return k.get(cfg);
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

// Serializes the full config as "key = value" lines (UTF-8, '#' comments).
inline std::string config_to_text(const PipelineConfig& cfg) {
    std::ostringstream os;
    for (const auto& k : detail::config_keys()) {
        os << k.name << " = " << k.get(cfg) << "\n";
    }
    return os.str();
}

namespace detail {

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

// Applies "key = value" lines on top of cfg. Lines starting with '#' and
// blank lines are skipped.
inline void config_apply_text(PipelineConfig& cfg, const std::string& text) {
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected 'key = value', got '" + t + "'");
        }
        const std::string key = detail::trim(t.substr(0, eq));
        const std::string value = detail::trim(t.substr(eq + 1));
        config_set(cfg, key, value);
    }
}

// Applies a single "key=value" override as passed on the command line.
inline void config_apply_override(PipelineConfig& cfg, const std::string& kv) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("override '" + kv + "' must have the form key=value");
    }
    config_set(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
}

}  // namespace flowse
