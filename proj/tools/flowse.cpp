// flowse command-line tool: train / enhance / bench / eval / make-corpus.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flowse/bench.hpp"
#include "flowse/checkpoint.hpp"
#include "flowse/metrics.hpp"
#include "flowse/sampler.hpp"
#include "flowse/train_loop.hpp"
#include "flowse/wav_io.hpp"

namespace fs = std::filesystem;
using namespace flowse;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitIo = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;

// Loudest-reference RTF of the full-scale system on datacenter hardware,
// printed for context next to desk-scale numbers; never asserted anywhere.
constexpr double kFullScaleReferenceRtf = 0.31;

struct CommonConfigArgs {
    std::string preset = "tiny";
    std::string config_path;
    std::vector<std::string> overrides;
};

PipelineConfig resolve_config(const CommonConfigArgs& args) {
    PipelineConfig cfg = PipelineConfig::preset(args.preset);
    if (!args.config_path.empty()) {
        std::ifstream f(args.config_path);
        if (!f) {
            throw IoError("cannot open config file: " + args.config_path);
        }
        std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        config_apply_text(cfg, text);
    }
    for (const auto& kv : args.overrides) {
        config_apply_override(cfg, kv);
    }
    cfg.validate();
    return cfg;
}

int env_workers() {
    const char* env = std::getenv("FLOWSE_NUM_WORKERS");
    if (env == nullptr || *env == '\0') {
        return 1;
    }
    try {
        return std::max(1, std::stoi(env));
    } catch (const std::exception&) {
        throw ConfigError("FLOWSE_NUM_WORKERS must be a positive integer");
    }
}

int cmd_train(const CommonConfigArgs& cfg_args, const std::string& run_dir, int ckpt_every,
              std::optional<int> max_steps, int corpus_items, bool quiet) {
    PipelineConfig cfg = resolve_config(cfg_args);
    TrainRunOptions options;
    options.run_dir = run_dir;
    options.checkpoint_every = ckpt_every;
    options.max_steps_this_run = max_steps;
    options.data_workers = env_workers();
    options.corpus_items = corpus_items;
    options.quiet = quiet;

    const TrainRunResult result = run_training(cfg, options);
    std::cout << "trained to step " << result.final_step << ", checkpoint at "
              << result.checkpoint_path << "\n";
    return kExitOk;
}

int cmd_enhance(const std::string& ckpt_path, const std::string& in_path,
                const std::string& out_path, std::optional<std::string> text, uint64_t seed,
                std::optional<int> steps, std::optional<std::string> scheme, int gl_iters,
                bool pcm16) {
    // Missing or unreadable inputs are usage errors (exit 2), not I/O faults.
    if (!fs::exists(ckpt_path)) {
        throw ConfigError("checkpoint not found: " + ckpt_path);
    }
    if (!fs::exists(in_path)) {
        throw ConfigError("input WAV not found: " + in_path);
    }
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    SolverConfig solver = ckpt.config.solver;
    solver.seed = seed;
    if (steps) {
        solver.n_steps = *steps;
    }
    if (scheme) {
        solver.scheme = scheme_from_name(*scheme);
    }
    solver.validate();

    Waveform noisy;
    try {
        noisy = read_wav_resampled(in_path, ckpt.config.mel.sample_rate);
    } catch (const FormatError& e) {
        throw ConfigError(std::string("cannot read input audio: ") + e.what());
    }
    StageTimings timings;
    const Waveform enhanced = enhance(noisy, text, ckpt.params, ckpt.config.model,
                                      ckpt.config.mel, solver, gl_iters, &timings);
    write_wav(out_path, enhanced, pcm16 ? WavFormat::pcm16 : WavFormat::float32);

    std::cout << std::fixed << std::setprecision(3);
    std::cout << "wrote " << out_path << " (" << enhanced.seconds() << " s, "
              << (text ? "text-conditioned" : "text-free") << ")\n";
    std::cout << "stage timings: mel " << timings.mel_seconds << " s, ode "
              << timings.ode_seconds << " s, inversion " << timings.inversion_seconds
              << " s, total " << timings.total() << " s\n";
    return kExitOk;
}

int cmd_bench(const std::string& ckpt_path, const std::string& preset, double audio_seconds,
              int reps, std::optional<int> steps, std::optional<std::string> scheme,
              int gl_iters) {
    PipelineConfig cfg;
    ModelParams<float> params;
    std::string preset_name;
    if (!ckpt_path.empty()) {
        Checkpoint ckpt = load_checkpoint(ckpt_path);
        cfg = ckpt.config;
        params = std::move(ckpt.params);
        preset_name = fs::path(ckpt_path).filename().string();
    } else {
        cfg = PipelineConfig::preset(preset);
        params = init_params<float>(cfg.model, 0);
        preset_name = preset;
    }
    SolverConfig solver = cfg.solver;
    if (steps) {
        solver.n_steps = *steps;
    }
    if (scheme) {
        solver.scheme = scheme_from_name(*scheme);
    }
    solver.validate();

    const BenchReport report =
        measure_rtf(params, cfg.model, cfg.mel, solver, audio_seconds, reps, gl_iters,
                    preset_name);
    std::cout << bench_report_line(report) << "\n";
    std::cout << "note: full-scale reference RTF " << kFullScaleReferenceRtf
              << " (datacenter GPU, context only)\n";
    return kExitOk;
}

std::vector<EvalItem> load_corpus_dir(const std::string& dir, const PipelineConfig& cfg,
                                      uint64_t seed, double snr_low, double snr_high) {
    std::vector<fs::path> wavs;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() == ".wav") {
            wavs.push_back(entry.path());
        }
    }
    if (wavs.empty()) {
        throw IoError("no .wav files in corpus dir: " + dir);
    }
    std::sort(wavs.begin(), wavs.end());

    std::vector<ToyItem> toys;
    for (const auto& wav : wavs) {
        ToyItem item;
        item.clean = read_wav_resampled(wav.string(), cfg.mel.sample_rate);
        fs::path txt = wav;
        txt.replace_extension(".txt");
        if (fs::exists(txt)) {
            std::ifstream f(txt);
            std::getline(f, item.transcript);
        }
        toys.push_back(std::move(item));
    }
    TrainConfig mix_cfg = cfg.train;
    mix_cfg.snr_low_db = snr_low;
    mix_cfg.snr_high_db = snr_high;
    return make_eval_items(toys, mix_cfg, cfg.mel, seed);
}

int cmd_eval(const std::string& ckpt_path, int n_items, uint64_t seed, const std::string& out_csv,
             std::optional<int> steps, std::optional<std::string> scheme, int gl_iters,
             const std::string& corpus_dir, double snr_low, double snr_high) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    SolverConfig solver = ckpt.config.solver;
    solver.seed = seed;
    if (steps) {
        solver.n_steps = *steps;
    }
    if (scheme) {
        solver.scheme = scheme_from_name(*scheme);
    }
    solver.validate();

    std::vector<EvalItem> items;
    if (!corpus_dir.empty()) {
        items = load_corpus_dir(corpus_dir, ckpt.config, seed, snr_low, snr_high);
    } else {
        PipelineConfig cfg = ckpt.config;
        cfg.train.seed = seed;
        cfg.train.snr_low_db = snr_low;
        cfg.train.snr_high_db = snr_high;
        Rng rng(derive_seed(seed, 0xab1e));
        const std::vector<ToyItem> toys = toy_corpus(n_items, rng, cfg.mel);
        items = make_eval_items(toys, cfg.train, cfg.mel, derive_seed(seed, 0xeb01));
    }

    const EvalReport report =
        eval_report(items, ckpt.config.mel, [&](const Waveform& noisy, const std::string& text,
                                                int index) {
            SolverConfig item_solver = solver;
            item_solver.seed = derive_seed(solver.seed, 0x5eed, static_cast<uint64_t>(index));
            std::optional<std::string> transcript;
            if (!text.empty()) {
                transcript = text;
            }
            return enhance(noisy, transcript, ckpt.params, ckpt.config.model, ckpt.config.mel,
                           item_solver, gl_iters);
        });

    std::ofstream csv(out_csv, std::ios::trunc);
    if (!csv) {
        throw IoError("cannot write CSV: " + out_csv);
    }
    csv << eval_report_csv(report);
    std::cout << eval_report_table(report);
    std::cout << "wrote " << out_csv << "\n";
    return kExitOk;
}

int cmd_make_corpus(const std::string& out_dir, int n, uint64_t seed) {
    const MelConfig mel_cfg = MelConfig::tiny();
    fs::create_directories(out_dir);
    Rng rng(derive_seed(seed, 0xc0e5));
    const std::vector<ToyItem> items = toy_corpus(n, rng, mel_cfg);
    for (size_t i = 0; i < items.size(); ++i) {
        std::ostringstream name;
        name << "item_" << std::setw(4) << std::setfill('0') << i;
        write_wav(out_dir + "/" + name.str() + ".wav", items[i].clean, WavFormat::float32);
        std::ofstream txt(out_dir + "/" + name.str() + ".txt", std::ios::trunc);
        txt << items[i].transcript << "\n";
    }
    std::cout << "wrote " << items.size() << " items to " << out_dir << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flowse: conditional flow-matching speech enhancement (desk scale)"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "train a model on the synthetic corpus");
    CommonConfigArgs train_cfg_args;
    std::string run_dir = "runs/default";
    int ckpt_every = 500;
    int max_steps_flag = -1;
    int corpus_items = 200;
    bool quiet = false;
    train->add_option("--preset", train_cfg_args.preset, "base preset: tiny or paper");
    train->add_option("--config", train_cfg_args.config_path, "config file (key = value lines)");
    train->add_option("--set", train_cfg_args.overrides,
                      "override a config key, e.g. --set train.total_steps=100");
    train->add_option("--run-dir", run_dir, "output directory (checkpoints, logs)");
    train->add_option("--ckpt-every", ckpt_every, "checkpoint interval in steps");
    train->add_option("--max-steps", max_steps_flag,
                      "process at most N steps this invocation (resumable)");
    train->add_option("--corpus-items", corpus_items, "synthetic training corpus size");
    train->add_flag("--quiet", quiet, "suppress progress lines");

    // enhance
    auto* enh = app.add_subcommand("enhance", "enhance a noisy WAV file");
    std::string enh_ckpt, enh_in, enh_out;
    std::string enh_text;
    uint64_t enh_seed = 0;
    int enh_steps = -1;
    std::string enh_scheme;
    int enh_gl_iters = 32;
    bool enh_pcm16 = false;
    enh->add_option("--ckpt", enh_ckpt, "checkpoint file")->required();
    enh->add_option("--in", enh_in, "input WAV")->required();
    enh->add_option("--out", enh_out, "output WAV")->required();
    auto* enh_text_opt =
        enh->add_option("--text", enh_text, "transcript (omit for text-free enhancement)");
    enh->add_option("--seed", enh_seed, "noise seed for the ODE start state");
    enh->add_option("--steps", enh_steps, "ODE steps (default: checkpoint setting)");
    enh->add_option("--scheme", enh_scheme, "euler or midpoint");
    enh->add_option("--gl-iters", enh_gl_iters, "phase-retrieval iterations");
    enh->add_flag("--pcm16", enh_pcm16, "write 16-bit PCM instead of float32");

    // bench
    auto* bench = app.add_subcommand("bench", "measure the real-time factor");
    std::string bench_ckpt, bench_preset = "tiny";
    double bench_audio_seconds = 2.0;
    int bench_reps = 5;
    int bench_steps = -1;
    std::string bench_scheme;
    int bench_gl_iters = 32;
    bench->add_option("--ckpt", bench_ckpt, "checkpoint (default: fresh preset weights)");
    bench->add_option("--preset", bench_preset, "preset when no checkpoint is given");
    bench->add_option("--audio-seconds", bench_audio_seconds, "benchmark input duration");
    bench->add_option("--reps", bench_reps, "timed repetitions (median reported)");
    bench->add_option("--steps", bench_steps, "ODE steps");
    bench->add_option("--scheme", bench_scheme, "euler or midpoint");
    bench->add_option("--gl-iters", bench_gl_iters, "phase-retrieval iterations");

    // eval
    auto* eval = app.add_subcommand("eval", "metric report over a synthetic test set");
    std::string eval_ckpt, eval_out = "eval_report.csv", eval_corpus_dir;
    int eval_n_items = 50;
    uint64_t eval_seed = 7;
    int eval_steps = -1;
    std::string eval_scheme;
    int eval_gl_iters = 32;
    double eval_snr_low = -5.0, eval_snr_high = 10.0;
    eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--n-items", eval_n_items, "synthetic test items");
    eval->add_option("--seed", eval_seed, "test-set seed");
    eval->add_option("--out", eval_out, "CSV output path");
    eval->add_option("--steps", eval_steps, "ODE steps");
    eval->add_option("--scheme", eval_scheme, "euler or midpoint");
    eval->add_option("--gl-iters", eval_gl_iters, "phase-retrieval iterations");
    eval->add_option("--corpus-dir", eval_corpus_dir, "evaluate clean WAVs from this directory");
    eval->add_option("--snr-low", eval_snr_low, "mixture SNR lower bound (dB)");
    eval->add_option("--snr-high", eval_snr_high, "mixture SNR upper bound (dB)");

    // make-corpus
    auto* mk = app.add_subcommand("make-corpus", "write a synthetic clean corpus to disk");
    std::string mk_out;
    int mk_n = 50;
    uint64_t mk_seed = 1;
    mk->add_option("--out", mk_out, "output directory")->required();
    mk->add_option("--n", mk_n, "number of items");
    mk->add_option("--seed", mk_seed, "corpus seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // --help: print and exit 0 with no side effects
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (*train) {
            std::optional<int> max_steps;
            if (max_steps_flag >= 0) {
                max_steps = max_steps_flag;
            }
            return cmd_train(train_cfg_args, run_dir, ckpt_every, max_steps, corpus_items, quiet);
        }
        if (*enh) {
            std::optional<std::string> text;
            if (enh_text_opt->count() > 0) {
                text = enh_text;
            }
            std::optional<int> steps;
            if (enh_steps > 0) {
                steps = enh_steps;
            }
            std::optional<std::string> scheme;
            if (!enh_scheme.empty()) {
                scheme = enh_scheme;
            }
            return cmd_enhance(enh_ckpt, enh_in, enh_out, text, enh_seed, steps, scheme,
                               enh_gl_iters, enh_pcm16);
        }
        if (*bench) {
            std::optional<int> steps;
            if (bench_steps > 0) {
                steps = bench_steps;
            }
            std::optional<std::string> scheme;
            if (!bench_scheme.empty()) {
                scheme = bench_scheme;
            }
            return cmd_bench(bench_ckpt, bench_preset, bench_audio_seconds, bench_reps, steps,
                             scheme, bench_gl_iters);
        }
        if (*eval) {
            std::optional<int> steps;
            if (eval_steps > 0) {
                steps = eval_steps;
            }
            std::optional<std::string> scheme;
            if (!eval_scheme.empty()) {
                scheme = eval_scheme;
            }
            return cmd_eval(eval_ckpt, eval_n_items, eval_seed, eval_out, steps, scheme,
                            eval_gl_iters, eval_corpus_dir, eval_snr_low, eval_snr_high);
        }
        if (*mk) {
            return cmd_make_corpus(mk_out, mk_n, mk_seed);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DivergenceError& e) {
        std::cerr << "numerical divergence: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
    return kExitOk;
}
