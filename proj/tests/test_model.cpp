#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "flowse/flow.hpp"
#include "flowse/model.hpp"
#include "flowse/training.hpp"

using namespace flowse;
using Catch::Approx;

namespace {

// Closed-form parameter count written out independently of visit_params.
int64_t expected_param_count(const ModelConfig& c) {
    const int64_t h = c.hidden_dim, ff = c.ffn_dim, e = c.text_embed_dim, tff = c.text_ffn_dim;
    const int64_t v = c.text_vocab, fm = c.n_mels, l = c.n_layers;
    const int64_t k = kTextConvKernel, b = kTextEncoderBlocks;
    const int64_t text_block = e * k + e + e + e + tff * e + tff + e * tff + e;
    const int64_t layer = (3 * h) * h + 3 * h    // qkv
                          + h * h + h            // attn out
                          + ff * h + ff          // ffn fc1
                          + h * ff + h           // ffn fc2
                          + (6 * h) * h + 6 * h; // adaLN modulation
    return v * e + b * text_block            // text encoder
           + h * (2 * fm + e) + h            // input projection
           + 2 * (h * h + h)                 // timestep MLP
           + l * layer                       // transformer layers
           + (2 * h) * h + 2 * h             // final adaLN
           + fm * h + fm;                    // output projection
}

ModelConfig small_config() {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.n_mels = 20;
    return cfg;
}

}  // namespace

TEST_CASE("encode_text", "[model][text]") {
    const ModelConfig cfg = small_config();
    const auto params = init_params<float>(cfg, 1);

    SECTION("absent text equals an explicit all-filler sequence, bit-exactly") {
        TextCondition filler;
        filler.present = true;
        filler.char_ids.assign(10, 0);
        const auto a = encode_text(TextCondition::none(), 10, params, cfg);
        const auto b = encode_text(filler, 10, params, cfg);
        REQUIRE(a.v == b.v);
    }

    SECTION("output is [frames x text_embed_dim] regardless of transcript length") {
        for (const char* text : {"", "hi", "a much longer transcript than the frame count"}) {
            const auto out = encode_text(TextCondition::from_text(text), 12, params, cfg);
            REQUIRE(out.rows == 12);
            REQUIRE(out.cols == cfg.text_embed_dim);
        }
    }

    SECTION("different transcripts of equal length produce different embeddings") {
        const auto a = encode_text(TextCondition::from_text("abc"), 8, params, cfg);
        const auto b = encode_text(TextCondition::from_text("abd"), 8, params, cfg);
        REQUIRE(a.v != b.v);
    }

    SECTION("out-of-vocabulary id is a domain error") {
        TextCondition bad;
        bad.char_ids = {5, cfg.text_vocab};
        REQUIRE_THROWS_AS(encode_text(bad, 4, params, cfg), DomainError);
    }
}

TEST_CASE("timestep_embedding", "[model][time]") {
    const ModelConfig cfg = small_config();
    const auto params = init_params<float>(cfg, 2);

    SECTION("t = 0 and t = 1 embed differently") {
        const auto a = timestep_embedding(FlowTime(0.0), params, cfg);
        const auto b = timestep_embedding(FlowTime(1.0), params, cfg);
        REQUIRE(a.v != b.v);
    }

    SECTION("repeated evaluation is identical") {
        const auto a = timestep_embedding(FlowTime(0.37), params, cfg);
        const auto b = timestep_embedding(FlowTime(0.37), params, cfg);
        REQUIRE(a.v == b.v);
    }

    SECTION("finite for 1000 random times") {
        Rng rng(3);
        for (int i = 0; i < 1000; ++i) {
            const auto v = timestep_embedding(FlowTime(rng.uniform()), params, cfg);
            REQUIRE(all_finite(v));
        }
    }
}

TEST_CASE("model_forward basics", "[model][forward]") {
    const ModelConfig cfg = small_config();
    const auto params = init_params<float>(cfg, 5);
    Rng rng(7);
    const Mat<float> m_t = gaussian_mat<float>(cfg.n_mels, 16, rng);
    const Mat<float> m_y = gaussian_mat<float>(cfg.n_mels, 16, rng);
    const TextCondition text = TextCondition::from_text("ae");

    SECTION("output shape matches the mel input") {
        const auto out = model_forward(m_t, m_y, FlowTime(0.5), text, params, cfg);
        REQUIRE(out.rows == 20);
        REQUIRE(out.cols == 16);
    }

    SECTION("fresh parameters predict exactly zero velocity") {
        const auto out = model_forward(m_t, m_y, FlowTime(0.3), text, params, cfg);
        for (float v : out.v) {
            REQUIRE(v == 0.0f);
        }
    }

    SECTION("eval-mode calls are bit-identical") {
        auto noisy = init_params<float>(cfg, 5);
        // Make the output head nonzero so the check is not vacuous.
        Rng prng(11);
        for (auto& x : noisy.out_w.v) {
            x = static_cast<float>(prng.normal() * 0.02);
        }
        const auto a = model_forward(m_t, m_y, FlowTime(0.3), text, noisy, cfg);
        const auto b = model_forward(m_t, m_y, FlowTime(0.3), text, noisy, cfg);
        REQUIRE(a.v == b.v);
    }

    SECTION("text-free forward equals the all-filler forward bit-exactly") {
        TextCondition filler;
        filler.present = true;
        filler.char_ids.assign(16, 0);
        const auto a = model_forward(m_t, m_y, FlowTime(0.7), TextCondition::none(), params, cfg);
        const auto b = model_forward(m_t, m_y, FlowTime(0.7), filler, params, cfg);
        REQUIRE(a.v == b.v);
    }

    SECTION("shape and finiteness violations are domain errors") {
        const Mat<float> bad_shape = gaussian_mat<float>(cfg.n_mels + 1, 16, rng);
        REQUIRE_THROWS_AS(model_forward(bad_shape, bad_shape, FlowTime(0.5), text, params, cfg),
                          DomainError);
        Mat<float> with_nan = m_t;
        with_nan(3, 3) = std::numeric_limits<float>::quiet_NaN();
        REQUIRE_THROWS_AS(model_forward(with_nan, m_y, FlowTime(0.5), text, params, cfg),
                          DomainError);
    }

    SECTION("attention rows are stochastic") {
        ForwardCache<float> cache;
        model_forward(m_t, m_y, FlowTime(0.4), text, params, cfg, false, nullptr, &cache);
        for (const auto& layer : cache.layers) {
            for (const auto& probs : layer.probs) {
                for (int r = 0; r < probs.rows; ++r) {
                    double sum = 0.0;
                    for (int c = 0; c < probs.cols; ++c) {
                        sum += probs(r, c);
                    }
                    REQUIRE(sum == Approx(1.0).margin(1e-6));
                }
            }
        }
    }
}

TEST_CASE("init and parameter counting", "[model][params]") {
    SECTION("same seed gives bit-identical parameters") {
        const ModelConfig cfg = small_config();
        auto a = init_params<float>(cfg, 9);
        auto b = init_params<float>(cfg, 9);
        bool equal = true;
        visit_params(a, cfg, [&](const std::string& name, Mat<float>& m, int, int, InitKind) {
            Mat<float>* other = nullptr;
            visit_params(b, cfg, [&](const std::string& n2, Mat<float>& m2, int, int, InitKind) {
                if (n2 == name) {
                    other = &m2;
                }
            });
            equal = equal && other != nullptr && m.v == other->v;
        });
        REQUIRE(equal);
    }

    SECTION("tensor-list count handles the trivial cases") {
        std::vector<Mat<float>> none;
        REQUIRE(count_params(none) == 0);
        std::vector<Mat<float>> one = {Mat<float>(3, 4)};
        REQUIRE(count_params(one) == 12);
    }

    SECTION("tiny preset matches the closed-form count") {
        const ModelConfig cfg = ModelConfig::tiny();
        const auto params = init_params<float>(cfg, 0);
        REQUIRE(count_params(params, cfg) == expected_param_count(cfg));
        REQUIRE(count_params(cfg) == expected_param_count(cfg));
    }

    SECTION("paper preset shape table is consistent without allocating") {
        const ModelConfig cfg = ModelConfig::paper();
        REQUIRE(count_params(cfg) == expected_param_count(cfg));
    }

    SECTION("validation rejects a reshaped tensor") {
        const ModelConfig cfg = small_config();
        auto params = init_params<float>(cfg, 1);
        params.in_b = Mat<float>(1, cfg.hidden_dim + 1);
        REQUIRE_THROWS_AS(validate_params(params, cfg), DomainError);
    }
}

TEST_CASE("analytic gradients match finite differences", "[model][grad]") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.n_mels = 8;
    auto params = init_params<double>(cfg, 3);
    // Shift every tensor off its init point so zero-init tensors get generic
    // gradients too.
    Rng prng(99);
    visit_params(params, cfg, [&](const std::string&, Mat<double>& m, int, int, InitKind) {
        for (auto& x : m.v) {
            x += prng.normal() * 0.05;
        }
    });

    const int frames = 6;
    Rng drng(17);
    const Mat<double> m_t = gaussian_mat<double>(cfg.n_mels, frames, drng);
    const Mat<double> m_y = gaussian_mat<double>(cfg.n_mels, frames, drng);
    const Mat<double> target = gaussian_mat<double>(cfg.n_mels, frames, drng);
    const TextCondition text = TextCondition::from_text("ab");
    const FlowTime t(0.37);

    auto loss_at = [&]() {
        return cfm_loss(model_forward(m_t, m_y, t, text, params, cfg), target);
    };

    ModelParams<double> grads = zero_params<double>(cfg);
    {
        ForwardCache<double> cache;
        const Mat<double> pred =
            model_forward(m_t, m_y, t, text, params, cfg, false, nullptr, &cache);
        Mat<double> d_pred(pred.rows, pred.cols);
        const double n = static_cast<double>(pred.v.size());
        for (size_t i = 0; i < pred.v.size(); ++i) {
            d_pred.v[i] = 2.0 * (pred.v[i] - target.v[i]) / n;
        }
        model_backward(d_pred, cache, params, cfg, grads);
    }

    std::vector<std::string> names;
    auto p_tensors = collect_tensors(params, cfg, &names);
    auto g_tensors = collect_tensors(grads, cfg);
    const double eps = 1e-5;
    Rng pick(42);
    for (size_t i = 0; i < p_tensors.size(); ++i) {
        for (int rep = 0; rep < 5; ++rep) {
            const size_t j =
                static_cast<size_t>(pick.uniform_int(static_cast<int>(p_tensors[i]->v.size())));
            const double orig = p_tensors[i]->v[j];
            p_tensors[i]->v[j] = orig + eps;
            const double hi = loss_at();
            p_tensors[i]->v[j] = orig - eps;
            const double lo = loss_at();
            p_tensors[i]->v[j] = orig;
            const double fd = (hi - lo) / (2.0 * eps);
            const double an = g_tensors[i]->v[j];
            const double rel =
                std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-4});
            INFO(names[i] << "[" << j << "] analytic=" << an << " fd=" << fd);
            REQUIRE(rel < 1e-4);
        }
    }
}

TEST_CASE("conditioning input changes the output of a trained model", "[model][conditioning]") {
    // A short training run is enough to make the conditioning path live.
    PipelineConfig cfg = PipelineConfig::preset("tiny");
    cfg.train.total_steps = 30;
    cfg.train.warmup_steps = 5;
    cfg.train.batch_size = 2;
    cfg.train.segment_seconds = 0.3;
    cfg.train.seed = 512;

    Rng crng(21);
    const auto corpus = toy_corpus(6, crng, cfg.mel);
    auto params = init_params<float>(cfg.model, cfg.train.seed);
    AdamState opt = make_opt_state(cfg.model);
    for (int step = 0; step < cfg.train.total_steps; ++step) {
        std::vector<TrainingPair> pairs;
        Rng rng(derive_seed(cfg.train.seed, 0xba7c, static_cast<uint64_t>(step)));
        for (int s = 0; s < cfg.train.batch_size; ++s) {
            const ToyItem& item = corpus[rng.uniform_int(static_cast<int>(corpus.size()))];
            Waveform seg;
            seg.sample_rate = item.clean.sample_rate;
            const size_t len =
                static_cast<size_t>(cfg.train.segment_seconds * cfg.mel.sample_rate);
            seg.samples.assign(item.clean.samples.begin(),
                               item.clean.samples.begin() + static_cast<long>(len));
            const Waveform noise = synth_noise(len, seg.sample_rate, rng);
            TrainingPair pair = synthesize_pair(seg, noise, 5.0, nullptr, rng);
            pair.transcript = item.transcript;
            pairs.push_back(std::move(pair));
        }
        Rng brng(derive_seed(cfg.train.seed, 0xbb, static_cast<uint64_t>(step)));
        const Batch batch = make_batch(pairs, cfg.mel, 0.2, brng);
        train_step(batch, params, opt, cfg.train, cfg.model, step);
    }

    Rng rng(33);
    const Mat<float> m_t = gaussian_mat<float>(cfg.model.n_mels, 20, rng);
    const Mat<float> m_y1 = gaussian_mat<float>(cfg.model.n_mels, 20, rng);
    Mat<float> m_y2 = m_y1;
    for (auto& v : m_y2.v) {
        v += 0.5f;
    }
    const TextCondition text = TextCondition::from_text("aa");
    const auto out1 = model_forward(m_t, m_y1, FlowTime(0.5), text, params, cfg.model);
    const auto out2 = model_forward(m_t, m_y2, FlowTime(0.5), text, params, cfg.model);
    double diff = 0.0;
    for (size_t i = 0; i < out1.v.size(); ++i) {
        diff += (out1.v[i] - out2.v[i]) * (out1.v[i] - out2.v[i]);
    }
    REQUIRE(std::sqrt(diff) > 0.0);
}
