#pragma once

#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "flowse/checkpoint.hpp"
#include "flowse/config.hpp"
#include "flowse/training.hpp"

namespace flowse {

// Builds the batch for one training step as a pure function of (corpus,
// config, step): item choice, segment crop, noise draw, SNR, flow time and
// text dropout all come from a per-step derived stream. This is what makes
// resume-after-interrupt and multi-worker prefetch bit-identical to a
// single-threaded run.
inline Batch build_training_batch(const std::vector<ToyItem>& corpus, const TrainConfig& train_cfg,
                                  const MelConfig& mel_cfg, int step) {
    Rng rng(derive_seed(train_cfg.seed, 0xba7c, static_cast<uint64_t>(step)));
    const size_t seg_len = std::max<size_t>(
        1, static_cast<size_t>(train_cfg.segment_seconds * mel_cfg.sample_rate));

    std::vector<TrainingPair> pairs;
    pairs.reserve(train_cfg.batch_size);
    for (int slot = 0; slot < train_cfg.batch_size; ++slot) {
        // A silent crop is rejected by synthesize_pair; redraw with the same
        // stream (bounded; toy items are mostly voiced).
        for (int attempt = 0;; ++attempt) {
            const ToyItem& item = corpus[rng.uniform_int(static_cast<int>(corpus.size()))];

            Waveform seg;
            seg.sample_rate = item.clean.sample_rate;
            seg.samples.resize(seg_len);
            if (item.clean.samples.size() >= seg_len) {
                const size_t max_off = item.clean.samples.size() - seg_len;
                const size_t off = max_off == 0
                                       ? 0
                                       : static_cast<size_t>(rng.uniform_int(
                                             static_cast<int>(max_off + 1)));
                for (size_t i = 0; i < seg_len; ++i) {
                    seg.samples[i] = item.clean.samples[off + i];
                }
            } else {
                for (size_t i = 0; i < seg_len; ++i) {
                    seg.samples[i] = item.clean.samples[i % item.clean.samples.size()];
                }
            }

            const Waveform noise = synth_noise(seg_len, seg.sample_rate, rng);
            const double snr = rng.uniform(train_cfg.snr_low_db, train_cfg.snr_high_db);
            try {
                TrainingPair pair = synthesize_pair(seg, noise, snr, nullptr, rng);
                pair.transcript = item.transcript;
                pairs.push_back(std::move(pair));
                break;
            } catch (const DomainError&) {
                if (attempt > 32) {
                    throw;
                }
            }
        }
    }
    return make_batch(pairs, mel_cfg, train_cfg.text_drop_prob, rng);
}

struct TrainRunOptions {
    std::string run_dir;
    int checkpoint_every = 500;
    std::optional<int> max_steps_this_run;  // stop early (resumable) if set
    int data_workers = 1;
    int corpus_items = 200;
    bool quiet = false;
};

struct TrainRunResult {
    std::string checkpoint_path;
    int64_t final_step = 0;
    double first_window_loss = 0.0;  // mean over the first 100 steps of this run
    double last_window_loss = 0.0;   // mean over the final 100 steps
};

namespace traindetail {

// Reorder buffer between batch-producer workers and the optimizer: workers
// build batches for the steps they own, the consumer pops strictly in step
// order. Flow control is a step window around the consumer cursor (not a
// size bound): a fast worker running ahead can never block the worker that
// owns the step the consumer is waiting for.
class BatchQueue {
public:
    BatchQueue(int start_step, int window) : next_(start_step), window_(window) {}

    // Returns false when the queue was cancelled (consumer bailed out).
    bool push(int step, Batch&& batch) {
        std::unique_lock<std::mutex> lock(mu_);
        cv_space_.wait(lock, [&] { return cancelled_ || step < next_ + window_; });
        if (cancelled_) {
            return false;
        }
        ready_.emplace(step, std::move(batch));
        cv_ready_.notify_all();
        return true;
    }

    Batch pop(int step) {
        std::unique_lock<std::mutex> lock(mu_);
        cv_ready_.wait(lock, [&] { return ready_.count(step) > 0; });
        Batch batch = std::move(ready_.at(step));
        ready_.erase(step);
        next_ = step + 1;
        cv_space_.notify_all();
        return batch;
    }

    void cancel() {
        std::unique_lock<std::mutex> lock(mu_);
        cancelled_ = true;
        cv_space_.notify_all();
    }

    bool cancelled() {
        std::unique_lock<std::mutex> lock(mu_);
        return cancelled_;
    }

private:
    std::mutex mu_;
    std::condition_variable cv_ready_;
    std::condition_variable cv_space_;
    std::map<int, Batch> ready_;
    int next_;
    int window_;
    bool cancelled_ = false;
};

}  // namespace traindetail

// Runs (or resumes) a training run in run_dir. The directory receives the
// effective config, a metrics CSV (step, loss, lr) and periodic checkpoints;
// ckpt_latest.fse always holds the newest state.
inline TrainRunResult run_training(const PipelineConfig& cfg, const TrainRunOptions& options) {
    namespace fs = std::filesystem;
    cfg.validate();
    fs::create_directories(options.run_dir);

    const std::string latest_path = options.run_dir + "/ckpt_latest.fse";
    const std::string config_path = options.run_dir + "/config.cfg";
    const std::string metrics_path = options.run_dir + "/metrics.csv";

    {
        std::ofstream f(config_path, std::ios::trunc);
        if (!f) {
            throw IoError("cannot write effective config: " + config_path);
        }
        f << config_to_text(cfg);
    }

    Checkpoint ckpt;
    if (fs::exists(latest_path)) {
        ckpt = load_checkpoint(latest_path);
        ensure_checkpoint_matches(ckpt, cfg.model);
        if (config_to_text(ckpt.config) != config_to_text(cfg)) {
            throw ConfigError("run dir holds a checkpoint trained with a different config; "
                              "use a fresh run dir or matching settings");
        }
        if (!options.quiet) {
            std::cerr << "resuming from step " << ckpt.step << "\n";
        }
    } else {
        ckpt = make_checkpoint(cfg, cfg.train.seed);
    }

    const int start_step = static_cast<int>(ckpt.step);
    int end_step = cfg.train.total_steps;
    if (options.max_steps_this_run.has_value()) {
        end_step = std::min(end_step, start_step + *options.max_steps_this_run);
    }

    Rng corpus_rng(derive_seed(cfg.train.seed, 0xc0e5));
    const std::vector<ToyItem> corpus = toy_corpus(options.corpus_items, corpus_rng, cfg.mel);

    std::ofstream metrics(metrics_path, std::ios::app);
    if (!metrics) {
        throw IoError("cannot open metrics log: " + metrics_path);
    }
    if (start_step == 0) {
        metrics << "step,loss,lr\n";
    }

    const int n_workers = std::max(1, options.data_workers);
    traindetail::BatchQueue queue(start_step, 2 * n_workers);
    std::vector<std::thread> workers;
    workers.reserve(n_workers);
    for (int w = 0; w < n_workers; ++w) {
        workers.emplace_back([&, w] {
            for (int step = start_step + w; step < end_step && !queue.cancelled();
                 step += n_workers) {
                if (!queue.push(step, build_training_batch(corpus, cfg.train, cfg.mel, step))) {
                    break;
                }
            }
        });
    }
    auto join_workers = [&] {
        queue.cancel();
        for (auto& th : workers) {
            th.join();
        }
    };

    TrainRunResult result;
    double first_sum = 0.0;
    int first_count = 0;
    double last_window[100] = {};
    int last_pos = 0;
    int last_count = 0;

    try {
        for (int step = start_step; step < end_step; ++step) {
            const Batch batch = queue.pop(step);
            const double loss =
                train_step(batch, ckpt.params, ckpt.opt, cfg.train, cfg.model, step);
            const double lr = lr_at(step, cfg.train);
            ckpt.step = step + 1;

            metrics << step << "," << loss << "," << lr << "\n";
            if (!options.quiet && (step % 100 == 0 || step + 1 == end_step)) {
                std::cerr << "step " << step << "  loss " << loss << "  lr " << lr << "\n";
            }

            if (step - start_step < 100) {
                first_sum += loss;
                ++first_count;
            }
            last_window[last_pos] = loss;
            last_pos = (last_pos + 1) % 100;
            last_count = std::min(last_count + 1, 100);

            if ((step + 1) % options.checkpoint_every == 0 || step + 1 == end_step) {
                save_checkpoint(latest_path, ckpt);
            }
        }
    } catch (...) {
        join_workers();
        throw;
    }
    join_workers();
    if (end_step == start_step) {
        save_checkpoint(latest_path, ckpt);  // nothing to do; still leave valid state
    }

    result.checkpoint_path = latest_path;
    result.final_step = ckpt.step;
    result.first_window_loss = first_count > 0 ? first_sum / first_count : 0.0;
    double last_sum = 0.0;
    for (int i = 0; i < last_count; ++i) {
        last_sum += last_window[i];
    }
    result.last_window_loss = last_count > 0 ? last_sum / last_count : 0.0;
    return result;
}

// Held-out evaluation items built the same deterministic way as training
// mixtures (full-length items, no segment crop).
inline std::vector<EvalItem> make_eval_items(const std::vector<ToyItem>& corpus,
                                             const TrainConfig& train_cfg,
                                             const MelConfig& mel_cfg, uint64_t seed) {
    std::vector<EvalItem> items;
    items.reserve(corpus.size());
    Rng rng(derive_seed(seed, 0xe7a1));
    for (const ToyItem& toy : corpus) {
        const Waveform noise = synth_noise(toy.clean.samples.size(), mel_cfg.sample_rate, rng);
        const double snr = rng.uniform(train_cfg.snr_low_db, train_cfg.snr_high_db);
        TrainingPair pair = synthesize_pair(toy.clean, noise, snr, nullptr, rng);
        EvalItem item;
        item.clean = toy.clean;
        item.noisy = pair.noisy;
        item.transcript = toy.transcript;
        items.push_back(std::move(item));
    }
    return items;
}

// The held-out set: items drawn from a disjoint seed stream from training.
inline std::vector<EvalItem> make_heldout_set(const PipelineConfig& cfg, int n_items) {
    Rng rng(derive_seed(cfg.train.seed, 0x4e1d));
    const std::vector<ToyItem> toys = toy_corpus(n_items, rng, cfg.mel);
    return make_eval_items(toys, cfg.train, cfg.mel, derive_seed(cfg.train.seed, 0x4e1e));
}

}  // namespace flowse
