#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "flowse/checkpoint.hpp"
#include "flowse/train_loop.hpp"
#include "flowse/training.hpp"

using namespace flowse;
using Catch::Approx;

namespace {

Waveform constant_wave(size_t n, double value, int sr = 24000) {
    Waveform w;
    w.sample_rate = sr;
    w.samples.assign(n, value);
    return w;
}

Waveform alternating_wave(size_t n, double value, int sr = 24000) {
    Waveform w;
    w.sample_rate = sr;
    w.samples.resize(n);
    for (size_t i = 0; i < n; ++i) {
        w.samples[i] = (i % 2 == 0) ? value : -value;
    }
    return w;
}

// Small analysis config so mel extraction stays cheap in bulk tests.
MelConfig small_mel() {
    MelConfig cfg;
    cfg.sample_rate = 8000;
    cfg.n_fft = 64;
    cfg.win_length = 64;
    cfg.hop_length = 16;
    cfg.n_mels = 4;
    cfg.f_min = 0.0;
    cfg.f_max = 4000.0;
    return cfg;
}

std::filesystem::path fresh_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "flowse_tests" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::vector<char> read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::vector<char>((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
}

PipelineConfig short_run_config(uint64_t seed) {
    PipelineConfig cfg = PipelineConfig::preset("tiny");
    cfg.train.total_steps = 12;
    cfg.train.warmup_steps = 4;
    cfg.train.batch_size = 2;
    cfg.train.segment_seconds = 0.25;
    cfg.train.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("synthesize_pair", "[training][mix]") {
    Rng rng(3);

    SECTION("0 dB mixes noise at exactly the clean power") {
        const Waveform clean = constant_wave(4000, 0.5);
        const Waveform noise = alternating_wave(4000, 0.25);
        const TrainingPair pair = synthesize_pair(clean, noise, 0.0, nullptr, rng);
        double p_noise_mixed = 0.0;
        for (size_t i = 0; i < clean.samples.size(); ++i) {
            const double d = pair.noisy.samples[i] - clean.samples[i];
            p_noise_mixed += d * d;
        }
        p_noise_mixed /= static_cast<double>(clean.samples.size());
        const double achieved_db = 10.0 * std::log10(signal_power(clean) / p_noise_mixed);
        REQUIRE(std::abs(achieved_db) < 0.01);
    }

    SECTION("10 dB with unit powers gives gain 10^(-1/2)") {
        const Waveform clean = constant_wave(1000, 1.0);
        const Waveform noise = alternating_wave(1000, 1.0);
        const TrainingPair pair = synthesize_pair(clean, noise, 10.0, nullptr, rng);
        // noisy - clean = g * noise, and |noise| = 1 everywhere.
        const double g = std::abs(pair.noisy.samples[0] - clean.samples[0]);
        REQUIRE(g == Approx(std::pow(10.0, -0.5)).epsilon(1e-9));
    }

    SECTION("requested SNR is achieved within 0.01 dB across the range") {
        Rng gen(17);
        for (double snr : {-5.0, 0.0, 3.7, 10.0}) {
            const Waveform clean = alternating_wave(3000, 0.4);
            Waveform noise = constant_wave(5000, 0.0);
            for (auto& s : noise.samples) {
                s = gen.normal();
            }
            const TrainingPair pair = synthesize_pair(clean, noise, snr, nullptr, gen);
            double p_mixed = 0.0;
            for (size_t i = 0; i < clean.samples.size(); ++i) {
                const double d = pair.noisy.samples[i] - clean.samples[i];
                p_mixed += d * d;
            }
            p_mixed /= static_cast<double>(clean.samples.size());
            const double achieved = 10.0 * std::log10(signal_power(clean) / p_mixed);
            REQUIRE(achieved == Approx(snr).margin(0.01));
        }
    }

    SECTION("a unit impulse response leaves the clean signal unchanged") {
        const Waveform clean = alternating_wave(500, 0.3);
        const Waveform noise = alternating_wave(500, 1.0);
        Waveform rir;
        rir.sample_rate = clean.sample_rate;
        rir.samples = {1.0};
        const TrainingPair pair = synthesize_pair(clean, noise, 40.0, &rir, rng);
        const double g = std::abs(pair.noisy.samples[0] - clean.samples[0]);
        for (size_t i = 0; i < clean.samples.size(); ++i) {
            const double residual = pair.noisy.samples[i] - clean.samples[i];
            REQUIRE(std::abs(residual) == Approx(g).margin(1e-9));
        }
    }

    SECTION("silent clean segment is rejected") {
        const Waveform clean = constant_wave(100, 0.0);
        const Waveform noise = alternating_wave(100, 1.0);
        REQUIRE_THROWS_AS(synthesize_pair(clean, noise, 0.0, nullptr, rng), DomainError);
    }
}

TEST_CASE("toy_corpus", "[training][corpus]") {
    const MelConfig mel = MelConfig::tiny();

    SECTION("fixed seed reproduces the corpus exactly") {
        Rng a(5), b(5);
        const auto ca = toy_corpus(10, a, mel);
        const auto cb = toy_corpus(10, b, mel);
        for (int i = 0; i < 10; ++i) {
            REQUIRE(ca[i].transcript == cb[i].transcript);
            REQUIRE(ca[i].clean.samples == cb[i].clean.samples);
        }
    }

    SECTION("items are 1-2 s with one transcript symbol per segment") {
        Rng rng(6);
        const auto corpus = toy_corpus(20, rng, mel);
        for (const auto& item : corpus) {
            REQUIRE(item.transcript.size() >= 2);
            REQUIRE(item.transcript.size() <= 5);
            const double seconds = item.clean.seconds();
            REQUIRE(seconds >= 0.99);
            REQUIRE(seconds <= 2.01);
            for (char c : item.transcript) {
                REQUIRE(std::string("aeiou").find(c) != std::string::npos);
            }
        }
    }

    SECTION("distinct seeds give mostly distinct items") {
        Rng a(1), b(2);
        const auto ca = toy_corpus(50, a, mel);
        const auto cb = toy_corpus(50, b, mel);
        int same = 0;
        for (int i = 0; i < 50; ++i) {
            if (ca[i].clean.samples == cb[i].clean.samples) {
                ++same;
            }
        }
        REQUIRE(same < 5);
    }
}

TEST_CASE("make_batch", "[training][batch]") {
    const MelConfig mel = small_mel();
    auto make_pairs = [&](int n, size_t len) {
        std::vector<TrainingPair> pairs;
        Rng rng(9);
        for (int i = 0; i < n; ++i) {
            Waveform clean = alternating_wave(len, 0.3, mel.sample_rate);
            Waveform noise;
            noise.sample_rate = mel.sample_rate;
            noise.samples.resize(len);
            for (auto& s : noise.samples) {
                s = rng.normal();
            }
            TrainingPair pair = synthesize_pair(clean, noise, 5.0, nullptr, rng);
            pair.transcript = "ae";
            pairs.push_back(std::move(pair));
        }
        return pairs;
    };

    SECTION("drop probability 0 keeps every transcript, 1 drops every one") {
        const auto pairs = make_pairs(8, 400);
        Rng rng(4);
        const Batch keep = make_batch(pairs, mel, 0.0, rng);
        for (const auto& item : keep.items) {
            REQUIRE(item.text.present);
        }
        const Batch drop = make_batch(pairs, mel, 1.0, rng);
        for (const auto& item : drop.items) {
            REQUIRE_FALSE(item.text.present);
        }
    }

    SECTION("drop fraction over 10^4 items stays within the binomial bound") {
        const auto pairs = make_pairs(10000, 64);
        Rng rng(123);
        const Batch batch = make_batch(pairs, mel, 0.2, rng);
        int dropped = 0;
        for (const auto& item : batch.items) {
            dropped += item.text.present ? 0 : 1;
        }
        const double fraction = static_cast<double>(dropped) / 10000.0;
        REQUIRE(fraction >= 0.185);
        REQUIRE(fraction <= 0.215);
    }

    SECTION("items are padded to the longest frame count with a valid-frame mask") {
        std::vector<TrainingPair> pairs = make_pairs(1, 400);
        auto longer = make_pairs(1, 800);
        pairs.push_back(longer[0]);
        Rng rng(2);
        const Batch batch = make_batch(pairs, mel, 0.0, rng);
        REQUIRE(batch.frames == batch.items[1].valid_frames);
        REQUIRE(batch.items[0].valid_frames < batch.frames);
        for (const auto& item : batch.items) {
            REQUIRE(item.m_t.cols == batch.frames);
            REQUIRE(item.m_x.cols == batch.frames);
            REQUIRE(item.u_target.cols == batch.frames);
            REQUIRE(item.m_t.same_shape(item.u_target));
        }
        // Path identity on every cell, padded ones included.
        const auto& it = batch.items[0];
        for (size_t i = 0; i < it.m_t.v.size(); ++i) {
            const float expect = static_cast<float>((1.0 - it.t.value) * it.m0.v[i] +
                                                    it.t.value * it.m_x.v[i]);
            REQUIRE(it.m_t.v[i] == Approx(expect).margin(1e-5));
        }
    }
}

TEST_CASE("lr_at", "[training][schedule]") {
    SECTION("paper preset: zero at 0, peak at the end of warmup") {
        const TrainConfig cfg = TrainConfig::paper();
        REQUIRE(lr_at(0, cfg) == 0.0);
        REQUIRE(lr_at(20000, cfg) == Approx(7.5e-5).epsilon(1e-12));
        REQUIRE(lr_at(cfg.total_steps, cfg) == 0.0);
    }

    SECTION("midpoint of the decay leg is half the peak") {
        TrainConfig cfg = TrainConfig::tiny();
        const int mid = cfg.warmup_steps + (cfg.total_steps - cfg.warmup_steps) / 2;
        REQUIRE(lr_at(mid, cfg) == Approx(cfg.peak_lr / 2.0).epsilon(1e-12));
    }

    SECTION("single peak, continuous shape") {
        const TrainConfig cfg = TrainConfig::tiny();
        double prev = lr_at(0, cfg);
        bool rising = true;
        int direction_changes = 0;
        for (int s = 1; s <= cfg.total_steps; ++s) {
            const double cur = lr_at(s, cfg);
            REQUIRE(std::abs(cur - prev) <= cfg.peak_lr / std::min(cfg.warmup_steps,
                                                                   cfg.total_steps -
                                                                       cfg.warmup_steps) +
                        1e-12);
            if (rising && cur < prev) {
                rising = false;
                ++direction_changes;
            }
            REQUIRE((rising || cur <= prev));
            prev = cur;
        }
        REQUIRE(direction_changes == 1);
    }

    SECTION("out-of-range step is a domain error") {
        const TrainConfig cfg = TrainConfig::tiny();
        REQUIRE_THROWS_AS(lr_at(-1, cfg), DomainError);
        REQUIRE_THROWS_AS(lr_at(cfg.total_steps + 1, cfg), DomainError);
    }
}

TEST_CASE("clip_grad_norm", "[training][clip]") {
    SECTION("3-4-5 case scales by exactly 1/5") {
        Mat<double> a(1, 9, 1.0);   // norm 3
        Mat<double> b(1, 16, 1.0);  // norm 4
        std::vector<Mat<double>*> tensors = {&a, &b};
        const std::vector<std::string> names = {"a", "b"};
        const double total = clip_grad_norm(tensors, names, 1.0);
        REQUIRE(total == Approx(5.0).epsilon(1e-12));
        for (double v : a.v) {
            REQUIRE(v == Approx(0.2).epsilon(1e-12));
        }
        for (double v : b.v) {
            REQUIRE(v == Approx(0.2).epsilon(1e-12));
        }
    }

    SECTION("norms under the bound are untouched") {
        Mat<double> a(1, 4, 0.25);  // norm 0.5
        std::vector<Mat<double>*> tensors = {&a};
        const std::vector<std::string> names = {"a"};
        const double total = clip_grad_norm(tensors, names, 1.0);
        REQUIRE(total == Approx(0.5).epsilon(1e-12));
        for (double v : a.v) {
            REQUIRE(v == 0.25);
        }
    }

    SECTION("post-clip norm never exceeds the bound") {
        Rng rng(7);
        for (int rep = 0; rep < 20; ++rep) {
            Mat<double> a = gaussian_mat<double>(5, 7, rng, 3.0);
            Mat<double> b = gaussian_mat<double>(2, 9, rng, 3.0);
            std::vector<Mat<double>*> tensors = {&a, &b};
            const std::vector<std::string> names = {"a", "b"};
            clip_grad_norm(tensors, names, 1.0);
            double sq = 0.0;
            for (double v : a.v) sq += v * v;
            for (double v : b.v) sq += v * v;
            REQUIRE(std::sqrt(sq) <= 1.0 + 1e-9);
        }
    }

    SECTION("non-finite gradients raise a divergence error naming the tensor") {
        Mat<double> a(1, 2, 1.0);
        a(0, 1) = std::numeric_limits<double>::infinity();
        std::vector<Mat<double>*> tensors = {&a};
        const std::vector<std::string> names = {"time.fc1.weight"};
        REQUIRE_THROWS_MATCHES(clip_grad_norm(tensors, names, 1.0), DivergenceError,
                               Catch::Matchers::MessageMatches(
                                   Catch::Matchers::ContainsSubstring("time.fc1.weight")));
    }
}

TEST_CASE("adamw", "[training][optimizer]") {
    SECTION("single-parameter step matches the hand-computed update") {
        // Quadratic loss 0.5 * p^2 at p = 1 gives gradient 1. After one step:
        //   m = 0.1, v = 0.05, m_hat = 1, v_hat = 1
        //   p' = 1 - lr * (1 / (1 + eps) + wd * 1)
        Mat<float> p(1, 1, 1.0f), g(1, 1, 1.0f), m(1, 1, 0.0f), v(1, 1, 0.0f);
        adamw_apply(p.v.data(), g.v.data(), m.v.data(), v.v.data(), 1, 1, 0.1);
        const double expected = 1.0 - 0.1 * (1.0 / (1.0 + kAdamEps) + kWeightDecay * 1.0);
        REQUIRE(p(0, 0) == Approx(expected).epsilon(1e-6));
        REQUIRE(m(0, 0) == Approx(0.1).epsilon(1e-6));
        REQUIRE(v(0, 0) == Approx(0.05).epsilon(1e-6));
    }

    SECTION("zero gradients leave only the weight-decay term") {
        const ModelConfig cfg = ModelConfig::tiny();
        auto params = init_params<float>(cfg, 3);
        const auto before = params;
        const auto grads = zero_params<float>(cfg);
        AdamState opt = make_opt_state(cfg);
        const double lr = 0.5;
        adamw_update(params, grads, opt, cfg, lr);
        auto p_now = collect_tensors(params, cfg);
        auto p_before = collect_tensors(const_cast<ModelParams<float>&>(before), cfg);
        for (size_t i = 0; i < p_now.size(); ++i) {
            for (size_t j = 0; j < p_now[i]->v.size(); ++j) {
                const float expect =
                    static_cast<float>(p_before[i]->v[j] * (1.0 - lr * kWeightDecay));
                REQUIRE(p_now[i]->v[j] == Approx(expect).margin(1e-7));
            }
        }
    }
}

TEST_CASE("train_step", "[training][step]") {
    PipelineConfig cfg = short_run_config(77);
    Rng crng(5);
    const auto corpus = toy_corpus(4, crng, cfg.mel);
    const Batch batch = build_training_batch(corpus, cfg.train, cfg.mel, 0);

    SECTION("loss is finite and nonnegative, parameters change") {
        auto params = init_params<float>(cfg.model, 1);
        const auto before = params.in_w.v;
        AdamState opt = make_opt_state(cfg.model);
        const double loss = train_step(batch, params, opt, cfg.train, cfg.model, 1);
        REQUIRE(std::isfinite(loss));
        REQUIRE(loss >= 0.0);
        REQUIRE(params.in_w.v != before);
        REQUIRE(opt.t == 1);
    }

    SECTION("out-of-range step index is rejected") {
        auto params = init_params<float>(cfg.model, 1);
        AdamState opt = make_opt_state(cfg.model);
        REQUIRE_THROWS_AS(
            train_step(batch, params, opt, cfg.train, cfg.model, cfg.train.total_steps),
            DomainError);
    }
}

TEST_CASE("checkpoint persistence", "[training][checkpoint]") {
    const auto dir = fresh_dir("ckpt");
    PipelineConfig cfg = short_run_config(1234);

    SECTION("round trip is bit-exact including optimizer state") {
        Checkpoint ckpt = make_checkpoint(cfg, 42);
        // Make moments and step non-trivial first.
        Rng crng(5);
        const auto corpus = toy_corpus(4, crng, cfg.mel);
        const Batch batch = build_training_batch(corpus, cfg.train, cfg.mel, 0);
        train_step(batch, ckpt.params, ckpt.opt, cfg.train, cfg.model, 0);
        ckpt.step = 1;

        const std::string path = (dir / "roundtrip.fse").string();
        save_checkpoint(path, ckpt);
        Checkpoint back = load_checkpoint(path);

        REQUIRE(back.step == ckpt.step);
        REQUIRE(back.opt.t == ckpt.opt.t);
        REQUIRE(config_to_text(back.config) == config_to_text(ckpt.config));
        auto a = collect_tensors(ckpt.params, cfg.model);
        auto b = collect_tensors(back.params, cfg.model);
        for (size_t i = 0; i < a.size(); ++i) {
            REQUIRE(a[i]->v == b[i]->v);
        }
        auto ma = collect_tensors(ckpt.opt.m, cfg.model);
        auto mb = collect_tensors(back.opt.m, cfg.model);
        auto va = collect_tensors(ckpt.opt.v, cfg.model);
        auto vb = collect_tensors(back.opt.v, cfg.model);
        for (size_t i = 0; i < ma.size(); ++i) {
            REQUIRE(ma[i]->v == mb[i]->v);
            REQUIRE(va[i]->v == vb[i]->v);
        }
    }

    SECTION("truncated file is a format error and returns nothing") {
        const Checkpoint ckpt = make_checkpoint(cfg, 42);
        const std::string path = (dir / "trunc.fse").string();
        save_checkpoint(path, ckpt);
        auto bytes = read_bytes(path);
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() * 3 / 4));
        out.close();
        REQUIRE_THROWS_AS(load_checkpoint(path), FormatError);
    }

    SECTION("corrupted magic is a format error") {
        const Checkpoint ckpt = make_checkpoint(cfg, 42);
        const std::string path = (dir / "magic.fse").string();
        save_checkpoint(path, ckpt);
        auto bytes = read_bytes(path);
        bytes[0] = 'X';
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.close();
        REQUIRE_THROWS_AS(load_checkpoint(path), FormatError);
    }

    SECTION("a tiny checkpoint is rejected under the paper preset config") {
        const Checkpoint ckpt = make_checkpoint(cfg, 42);
        REQUIRE_THROWS_MATCHES(ensure_checkpoint_matches(ckpt, ModelConfig::paper()), DomainError,
                               Catch::Matchers::MessageMatches(
                                   Catch::Matchers::ContainsSubstring("shape mismatch")));
    }
}

TEST_CASE("training runs are deterministic and resumable", "[training][determinism]") {
    SECTION("same seed, two fresh runs, bit-identical checkpoints") {
        const PipelineConfig cfg = short_run_config(2024);
        TrainRunOptions opt_a;
        opt_a.run_dir = fresh_dir("det_a").string();
        opt_a.quiet = true;
        opt_a.corpus_items = 4;
        TrainRunOptions opt_b = opt_a;
        opt_b.run_dir = fresh_dir("det_b").string();
        const auto ra = run_training(cfg, opt_a);
        const auto rb = run_training(cfg, opt_b);
        REQUIRE(read_bytes(ra.checkpoint_path) == read_bytes(rb.checkpoint_path));
    }

    SECTION("interrupt plus resume equals one uninterrupted run") {
        const PipelineConfig cfg = short_run_config(555);
        TrainRunOptions full;
        full.run_dir = fresh_dir("resume_full").string();
        full.quiet = true;
        full.corpus_items = 4;
        const auto r_full = run_training(cfg, full);

        TrainRunOptions partial = full;
        partial.run_dir = fresh_dir("resume_split").string();
        partial.max_steps_this_run = 5;
        run_training(cfg, partial);  // stops at step 5
        partial.max_steps_this_run.reset();
        const auto r_resumed = run_training(cfg, partial);  // resumes to the end

        REQUIRE(read_bytes(r_full.checkpoint_path) == read_bytes(r_resumed.checkpoint_path));
    }

    SECTION("multi-worker prefetch matches the single-worker run") {
        const PipelineConfig cfg = short_run_config(808);
        TrainRunOptions one;
        one.run_dir = fresh_dir("workers_one").string();
        one.quiet = true;
        one.corpus_items = 4;
        one.data_workers = 1;
        TrainRunOptions many = one;
        many.run_dir = fresh_dir("workers_many").string();
        many.data_workers = 8;  // more workers than cores and than steps/2
        const auto r1 = run_training(cfg, one);
        const auto r8 = run_training(cfg, many);
        REQUIRE(read_bytes(r1.checkpoint_path) == read_bytes(r8.checkpoint_path));
    }
}

TEST_CASE("validation metrics with stub samplers", "[training][validate]") {
    PipelineConfig cfg = short_run_config(4);
    Rng rng(10);
    const auto toys = toy_corpus(6, rng, cfg.mel);
    const auto items = make_eval_items(toys, cfg.train, cfg.mel, 99);

    SECTION("a perfect sampler scores zero error and full improvement") {
        const auto report = sampler_metrics(
            items, cfg.mel, [&](const Mat<float>&, const std::string&, int i) {
                return cast_mat<double, float>(wav_to_mel(items[i].clean, cfg.mel).data);
            });
        REQUIRE(report.mel_l1_enhanced == 0.0);
        REQUIRE(report.improvement_rate == 1.0);
    }

    SECTION("the identity sampler never improves") {
        const auto report = sampler_metrics(
            items, cfg.mel,
            [&](const Mat<float>& m_y, const std::string&, int) { return m_y; });
        REQUIRE(report.improvement_rate == 0.0);
        REQUIRE(report.mel_l1_enhanced == Approx(report.mel_l1_noisy).epsilon(1e-12));
    }

    SECTION("empty held-out set is rejected") {
        REQUIRE_THROWS_AS(
            sampler_metrics(std::vector<EvalItem>{}, cfg.mel,
                            [&](const Mat<float>& m, const std::string&, int) { return m; }),
            DomainError);
    }
}
