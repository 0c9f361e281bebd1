#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "flowse/common.hpp"
#include "flowse/config.hpp"
#include "flowse/flow.hpp"
#include "flowse/mat.hpp"

namespace flowse {

// Character-level conditioning sequence. Id 0 is the filler token; byte b of
// a transcript maps to id b + 1. present == false means text-free mode and
// behaves exactly like an all-filler sequence.
struct TextCondition {
    std::vector<int> char_ids;
    bool present = true;

    static TextCondition from_text(const std::string& utf8) {
        TextCondition c;
        c.char_ids.reserve(utf8.size());
        for (unsigned char byte : utf8) {
            c.char_ids.push_back(static_cast<int>(byte) + 1);
        }
        c.present = true;
        return c;
    }

    static TextCondition none() {
        TextCondition c;
        c.present = false;
        return c;
    }
};

enum class InitKind { gaussian, zeros, ones };

// Depth of the text encoder and its depthwise kernel width are fixed rather
// than configurable; the encoder is deliberately small.
inline constexpr int kTextEncoderBlocks = 2;
inline constexpr int kTextConvKernel = 7;
inline constexpr double kInitStd = 0.02;
inline constexpr double kRopeBase = 10000.0;
inline constexpr double kTimeScale = 1000.0;  // maps t in [0,1] onto the sinusoid range
inline constexpr double kLayerNormEps = 1e-6;

template <typename S>
struct ModelParams {
    struct TextBlock {
        Mat<S> dw_w, dw_b;    // depthwise conv [E x K], [1 x E]
        Mat<S> ln_g, ln_b;    // layer norm affine [1 x E]
        Mat<S> pw1_w, pw1_b;  // pointwise FFN [TFF x E], [1 x TFF]
        Mat<S> pw2_w, pw2_b;  // [E x TFF], [1 x E]
    };
    struct Layer {
        Mat<S> qkv_w, qkv_b;    // [3H x H], [1 x 3H]
        Mat<S> out_w, out_b;    // [H x H], [1 x H]
        Mat<S> ffn1_w, ffn1_b;  // [FF x H], [1 x FF]
        Mat<S> ffn2_w, ffn2_b;  // [H x FF], [1 x H]
        Mat<S> ada_w, ada_b;    // adaLN modulation [6H x H], [1 x 6H], zero-init
    };

    Mat<S> text_embed;  // [V x E]
    std::vector<TextBlock> text_blocks;
    Mat<S> in_w, in_b;  // input projection [H x (2F + E)], [1 x H]
    Mat<S> time1_w, time1_b, time2_w, time2_b;
    std::vector<Layer> layers;
    Mat<S> final_ada_w, final_ada_b;  // [2H x H], [1 x 2H], zero-init
    Mat<S> out_w, out_b;              // output projection [F x H], [1 x F], zero-init
};

// Visits every tensor in canonical order with (name, mat, rows, cols, kind).
// All shape bookkeeping (allocation, init, counting, validation, checkpoint
// layout) flows through this single enumeration.
template <typename P, typename F>
inline void visit_params(P& p, const ModelConfig& cfg, F&& f) {
    const int h = cfg.hidden_dim;
    const int ff = cfg.ffn_dim;
    const int e = cfg.text_embed_dim;
    const int tff = cfg.text_ffn_dim;
    const int fm = cfg.n_mels;

    f("text.embed", p.text_embed, cfg.text_vocab, e, InitKind::gaussian);
    for (int b = 0; b < kTextEncoderBlocks; ++b) {
        const std::string base = "text.block" + std::to_string(b) + ".";
        auto& blk = p.text_blocks[b];
        f(base + "dwconv.weight", blk.dw_w, e, kTextConvKernel, InitKind::gaussian);
        f(base + "dwconv.bias", blk.dw_b, 1, e, InitKind::zeros);
        f(base + "norm.gamma", blk.ln_g, 1, e, InitKind::ones);
        f(base + "norm.beta", blk.ln_b, 1, e, InitKind::zeros);
        f(base + "pw1.weight", blk.pw1_w, tff, e, InitKind::gaussian);
        f(base + "pw1.bias", blk.pw1_b, 1, tff, InitKind::zeros);
        f(base + "pw2.weight", blk.pw2_w, e, tff, InitKind::gaussian);
        f(base + "pw2.bias", blk.pw2_b, 1, e, InitKind::zeros);
    }
    f("input_proj.weight", p.in_w, h, 2 * fm + e, InitKind::gaussian);
    f("input_proj.bias", p.in_b, 1, h, InitKind::zeros);
    f("time.fc1.weight", p.time1_w, h, h, InitKind::gaussian);
    f("time.fc1.bias", p.time1_b, 1, h, InitKind::zeros);
    f("time.fc2.weight", p.time2_w, h, h, InitKind::gaussian);
    f("time.fc2.bias", p.time2_b, 1, h, InitKind::zeros);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string base = "layer" + std::to_string(l) + ".";
        auto& layer = p.layers[l];
        f(base + "attn.qkv.weight", layer.qkv_w, 3 * h, h, InitKind::gaussian);
        f(base + "attn.qkv.bias", layer.qkv_b, 1, 3 * h, InitKind::zeros);
        f(base + "attn.out.weight", layer.out_w, h, h, InitKind::gaussian);
        f(base + "attn.out.bias", layer.out_b, 1, h, InitKind::zeros);
        f(base + "ffn.fc1.weight", layer.ffn1_w, ff, h, InitKind::gaussian);
        f(base + "ffn.fc1.bias", layer.ffn1_b, 1, ff, InitKind::zeros);
        f(base + "ffn.fc2.weight", layer.ffn2_w, h, ff, InitKind::gaussian);
        f(base + "ffn.fc2.bias", layer.ffn2_b, 1, h, InitKind::zeros);
        f(base + "ada.weight", layer.ada_w, 6 * h, h, InitKind::zeros);
        f(base + "ada.bias", layer.ada_b, 1, 6 * h, InitKind::zeros);
    }
    f("final.ada.weight", p.final_ada_w, 2 * h, h, InitKind::zeros);
    f("final.ada.bias", p.final_ada_b, 1, 2 * h, InitKind::zeros);
    f("output_proj.weight", p.out_w, fm, h, InitKind::zeros);
    f("output_proj.bias", p.out_b, 1, fm, InitKind::zeros);
}

template <typename S>
inline void prepare_structure(ModelParams<S>& p, const ModelConfig& cfg) {
    p.text_blocks.resize(kTextEncoderBlocks);
    p.layers.resize(cfg.n_layers);
}

// Name/shape/init description of one tensor, computable without allocating.
struct TensorSpec {
    std::string name;
    int rows = 0;
    int cols = 0;
    InitKind kind = InitKind::zeros;
};

inline std::vector<TensorSpec> param_shapes(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams<float> dummy;  // tensors stay empty; only shapes are reported
    prepare_structure(dummy, cfg);
    std::vector<TensorSpec> specs;
    visit_params(dummy, cfg, [&](const std::string& name, const Mat<float>&, int rows, int cols,
                                 InitKind kind) { specs.push_back({name, rows, cols, kind}); });
    return specs;
}

// Total scalar cells across all tensors of a parameter set.
template <typename S>
inline int64_t count_params(const ModelParams<S>& p, const ModelConfig& cfg) {
    int64_t total = 0;
    visit_params(p, cfg, [&](const std::string&, const Mat<S>& m, int, int, InitKind) {
        total += static_cast<int64_t>(m.size());
    });
    return total;
}

// Count over an arbitrary tensor list (an empty list counts zero).
template <typename S>
inline int64_t count_params(const std::vector<Mat<S>>& tensors) {
    int64_t total = 0;
    for (const auto& m : tensors) {
        total += static_cast<int64_t>(m.size());
    }
    return total;
}

inline int64_t count_params(const ModelConfig& cfg) {
    int64_t total = 0;
    for (const auto& s : param_shapes(cfg)) {
        total += static_cast<int64_t>(s.rows) * s.cols;
    }
    return total;
}

// All-zero parameter set with the right shapes (gradient accumulators).
template <typename S>
inline ModelParams<S> zero_params(const ModelConfig& cfg) {
    ModelParams<S> p;
    prepare_structure(p, cfg);
    visit_params(p, cfg, [&](const std::string&, Mat<S>& m, int rows, int cols, InitKind) {
        m = Mat<S>(rows, cols);
    });
    return p;
}

// Fresh parameters: Gaussian(0, 0.02) weights, zero biases, unit norm gains.
// Adaptive-norm modulation and the output projection start at zero, so a
// fresh model is the identity flow with zero predicted velocity.
template <typename S>
inline ModelParams<S> init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x1017));
    ModelParams<S> p;
    prepare_structure(p, cfg);
    visit_params(p, cfg, [&](const std::string&, Mat<S>& m, int rows, int cols, InitKind kind) {
        m = Mat<S>(rows, cols);
        switch (kind) {
            case InitKind::gaussian:
                for (auto& x : m.v) x = static_cast<S>(rng.normal() * kInitStd);
                break;
            case InitKind::ones:
                m.fill(S(1));
                break;
            case InitKind::zeros:
                break;
        }
    });
    return p;
}

// Checks shape consistency against the config and that every value is finite.
template <typename S>
inline void validate_params(const ModelParams<S>& p, const ModelConfig& cfg) {
    if (p.text_blocks.size() != kTextEncoderBlocks ||
        p.layers.size() != static_cast<size_t>(cfg.n_layers)) {
        throw DomainError("model params: block/layer count does not match config");
    }
    visit_params(p, cfg, [&](const std::string& name, const Mat<S>& m, int rows, int cols,
                             InitKind) {
        if (m.rows != rows || m.cols != cols) {
            throw DomainError("model params: tensor '" + name + "' has shape [" +
                              std::to_string(m.rows) + "x" + std::to_string(m.cols) +
                              "], expected [" + std::to_string(rows) + "x" +
                              std::to_string(cols) + "]");
        }
        if (!all_finite(m)) {
            throw DomainError("model params: tensor '" + name + "' contains non-finite values");
        }
    });
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

namespace nn {

template <typename S>
inline S gelu(S x) {
    const S u = static_cast<S>(0.7978845608028654) *
                (x + static_cast<S>(0.044715) * x * x * x);
    return static_cast<S>(0.5) * x * (S(1) + std::tanh(u));
}

template <typename S>
inline S gelu_grad(S x) {
    const S c = static_cast<S>(0.7978845608028654);
    const S u = c * (x + static_cast<S>(0.044715) * x * x * x);
    const S th = std::tanh(u);
    const S du = c * (S(1) + static_cast<S>(3.0 * 0.044715) * x * x);
    return static_cast<S>(0.5) * (S(1) + th) +
           static_cast<S>(0.5) * x * (S(1) - th * th) * du;
}

template <typename S>
inline S silu(S x) {
    const S sig = S(1) / (S(1) + std::exp(-x));
    return x * sig;
}

template <typename S>
inline S silu_grad(S x) {
    const S sig = S(1) / (S(1) + std::exp(-x));
    return sig * (S(1) + x * (S(1) - sig));
}

// Row-wise layer norm without affine terms. Outputs normalized rows plus the
// per-row reciprocal std needed by the backward pass.
template <typename S>
inline void layernorm_forward(const Mat<S>& x, Mat<S>& y, std::vector<S>& rstd) {
    y = Mat<S>(x.rows, x.cols);
    rstd.assign(x.rows, S(0));
    const int d = x.cols;
    for (int t = 0; t < x.rows; ++t) {
        const S* xt = x.row(t);
        S mean = S(0);
        for (int j = 0; j < d; ++j) mean += xt[j];
        mean /= static_cast<S>(d);
        S var = S(0);
        for (int j = 0; j < d; ++j) {
            const S c = xt[j] - mean;
            var += c * c;
        }
        var /= static_cast<S>(d);
        const S r = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
        rstd[t] = r;
        S* yt = y.row(t);
        for (int j = 0; j < d; ++j) {
            yt[j] = (xt[j] - mean) * r;
        }
    }
}

// dx for layer norm given dy and the normalized output y_hat:
// dx = rstd * (dy - mean(dy) - y_hat * mean(dy * y_hat)).
template <typename S>
inline void layernorm_backward(const Mat<S>& dy, const Mat<S>& y_hat, const std::vector<S>& rstd,
                               Mat<S>& dx) {
    dx = Mat<S>(dy.rows, dy.cols);
    const int d = dy.cols;
    for (int t = 0; t < dy.rows; ++t) {
        const S* dyt = dy.row(t);
        const S* yt = y_hat.row(t);
        S mean_dy = S(0);
        S mean_dyy = S(0);
        for (int j = 0; j < d; ++j) {
            mean_dy += dyt[j];
            mean_dyy += dyt[j] * yt[j];
        }
        mean_dy /= static_cast<S>(d);
        mean_dyy /= static_cast<S>(d);
        S* dxt = dx.row(t);
        for (int j = 0; j < d; ++j) {
            dxt[j] = rstd[t] * (dyt[j] - mean_dy - yt[j] * mean_dyy);
        }
    }
}

template <typename S>
inline void softmax_rows(Mat<S>& m) {
    for (int r = 0; r < m.rows; ++r) {
        S* row = m.row(r);
        S mx = row[0];
        for (int c = 1; c < m.cols; ++c) mx = std::max(mx, row[c]);
        S sum = S(0);
        for (int c = 0; c < m.cols; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        const S inv = S(1) / sum;
        for (int c = 0; c < m.cols; ++c) row[c] *= inv;
    }
}

// Rotates adjacent pairs of q/k channels by pos-dependent angles (rotary
// position encoding). sign = -1 undoes the rotation (backward pass).
template <typename S>
inline void rope_apply(Mat<S>& x, int n_heads, double sign) {
    const int head_dim = x.cols / n_heads;
    const int half = head_dim / 2;
    for (int t = 0; t < x.rows; ++t) {
        S* row = x.row(t);
        for (int h = 0; h < n_heads; ++h) {
            S* head = row + h * head_dim;
            for (int j = 0; j < half; ++j) {
                const double theta =
                    static_cast<double>(t) *
                    std::pow(kRopeBase, -2.0 * static_cast<double>(j) / head_dim);
                const S c = static_cast<S>(std::cos(theta));
                const S s = static_cast<S>(std::sin(theta) * sign);
                const S a = head[2 * j];
                const S b = head[2 * j + 1];
                head[2 * j] = a * c - b * s;
                head[2 * j + 1] = a * s + b * c;
            }
        }
    }
}

}  // namespace nn

// ---------------------------------------------------------------------------
// forward caches
// ---------------------------------------------------------------------------

template <typename S>
struct TextBlockCache {
    Mat<S> x_in;    // [T x E]
    Mat<S> conv;    // depthwise conv output
    Mat<S> ln_hat;  // normalized (pre-affine)
    std::vector<S> ln_rstd;
    Mat<S> z;      // post-affine norm output (pw1 input)
    Mat<S> h_pre;  // [T x TFF]
    Mat<S> h_act;  // gelu(h_pre)
};

template <typename S>
struct TextCache {
    std::vector<int> ids;  // padded/truncated to frame count
    Mat<S> embedded;       // [T x E]
    std::vector<TextBlockCache<S>> blocks;
    Mat<S> out;  // [T x E]
};

template <typename S>
struct LayerCache {
    Mat<S> x_in;  // [T x H]
    Mat<S> mod;   // [1 x 6H]: shift/scale/gate for attn then mlp
    Mat<S> n1;    // LN1 output
    std::vector<S> ln1_rstd;
    Mat<S> h1;                  // modulated attn input
    Mat<S> qkv;                 // [T x 3H]
    Mat<S> q_rot, k_rot;        // [T x H] after rotary encoding
    std::vector<Mat<S>> probs;  // per head [T x T], pre-dropout (rows sum to 1)
    std::vector<Mat<uint8_t>> attn_keep;  // dropout keep masks (train mode)
    Mat<S> av;                            // attention-weighted values [T x H]
    Mat<S> attn_out;                      // after output projection
    Mat<S> x_mid;
    Mat<S> n2;
    std::vector<S> ln2_rstd;
    Mat<S> h2;
    Mat<S> f_pre;              // [T x FF]
    Mat<S> f_drop;             // post-gelu, post-dropout (fc2 input)
    Mat<uint8_t> ffn_keep;     // dropout keep mask
    Mat<S> ffn_out;            // [T x H]
    Mat<S> x_out;
};

template <typename S>
struct ForwardCache {
    int frames = 0;
    bool train_mode = false;
    double dropout_p = 0.0;
    TextCache<S> text;
    Mat<S> x0;  // [T x (2F + E)]
    Mat<S> x1;  // input projection output [T x H]
    Mat<S> sinus, t1_pre, t1_act, cond, silu_cond;  // all [1 x H]
    std::vector<LayerCache<S>> layers;
    Mat<S> final_mod;  // [1 x 2H]: shift, scale
    Mat<S> nf;
    std::vector<S> lnf_rstd;
    Mat<S> hf;      // modulated final norm output
    Mat<S> out_tm;  // [T x F]
};

// ---------------------------------------------------------------------------
// text encoder
// ---------------------------------------------------------------------------

namespace nn {

// Depthwise 1-D convolution over time, zero padded, kernel centered.
template <typename S>
inline void dwconv_forward(const Mat<S>& x, const Mat<S>& w, const Mat<S>& b, Mat<S>& y) {
    const int t_len = x.rows;
    const int channels = x.cols;
    const int k = w.cols;
    const int pad = k / 2;
    y = Mat<S>(t_len, channels);
    for (int t = 0; t < t_len; ++t) {
        S* yt = y.row(t);
        for (int c = 0; c < channels; ++c) {
            S acc = b(0, c);
            for (int j = 0; j < k; ++j) {
                const int src = t + j - pad;
                if (src >= 0 && src < t_len) {
                    acc += w(c, j) * x(src, c);
                }
            }
            yt[c] = acc;
        }
    }
}

template <typename S>
inline void dwconv_backward(const Mat<S>& dy, const Mat<S>& x, const Mat<S>& w, Mat<S>& dw,
                            Mat<S>& db, Mat<S>& dx) {
    const int t_len = x.rows;
    const int channels = x.cols;
    const int k = w.cols;
    const int pad = k / 2;
    dx = Mat<S>(t_len, channels);
    for (int t = 0; t < t_len; ++t) {
        const S* dyt = dy.row(t);
        for (int c = 0; c < channels; ++c) {
            db(0, c) += dyt[c];
            for (int j = 0; j < k; ++j) {
                const int src = t + j - pad;
                if (src >= 0 && src < t_len) {
                    dw(c, j) += dyt[c] * x(src, c);
                    dx(src, c) += dyt[c] * w(c, j);
                }
            }
        }
    }
}

}  // namespace nn

// Pads (with filler id 0) or truncates the character ids to `frames` and
// runs embedding + depthwise-conv/FFN blocks with residual connections.
// Returns [frames x text_embed_dim].
template <typename S>
inline Mat<S> encode_text(const TextCondition& c, int frames, const ModelParams<S>& params,
                          const ModelConfig& cfg, TextCache<S>* cache = nullptr) {
    if (frames < 1) {
        throw DomainError("encode_text: frames must be >= 1");
    }
    const int e = cfg.text_embed_dim;

    std::vector<int> ids(frames, 0);
    if (c.present) {
        for (size_t i = 0; i < c.char_ids.size() && i < static_cast<size_t>(frames); ++i) {
            const int id = c.char_ids[i];
            if (id < 0 || id >= cfg.text_vocab) {
                throw DomainError("encode_text: character id " + std::to_string(id) +
                                  " outside vocabulary [0, " + std::to_string(cfg.text_vocab) +
                                  ")");
            }
            ids[i] = id;
        }
    }

    Mat<S> x(frames, e);
    for (int t = 0; t < frames; ++t) {
        const S* emb = params.text_embed.row(ids[t]);
        S* xt = x.row(t);
        for (int j = 0; j < e; ++j) {
            xt[j] = emb[j];
        }
    }

    TextCache<S> local;
    TextCache<S>& tc = cache ? *cache : local;
    tc.ids = ids;
    tc.embedded = x;
    tc.blocks.assign(kTextEncoderBlocks, TextBlockCache<S>{});

    for (int b = 0; b < kTextEncoderBlocks; ++b) {
        const auto& blk = params.text_blocks[b];
        TextBlockCache<S>& bc = tc.blocks[b];
        bc.x_in = x;

        nn::dwconv_forward(x, blk.dw_w, blk.dw_b, bc.conv);
        nn::layernorm_forward(bc.conv, bc.ln_hat, bc.ln_rstd);
        bc.z = Mat<S>(frames, e);
        for (int t = 0; t < frames; ++t) {
            for (int j = 0; j < e; ++j) {
                bc.z(t, j) = bc.ln_hat(t, j) * blk.ln_g(0, j) + blk.ln_b(0, j);
            }
        }
        linear_forward(bc.z, blk.pw1_w, blk.pw1_b, bc.h_pre);
        bc.h_act = Mat<S>(bc.h_pre.rows, bc.h_pre.cols);
        for (size_t i = 0; i < bc.h_pre.v.size(); ++i) {
            bc.h_act.v[i] = nn::gelu(bc.h_pre.v[i]);
        }
        Mat<S> block_out;
        linear_forward(bc.h_act, blk.pw2_w, blk.pw2_b, block_out);
        for (size_t i = 0; i < x.v.size(); ++i) {
            x.v[i] += block_out.v[i];  // residual
        }
    }
    tc.out = x;
    return x;
}

// Accumulates text-encoder gradients given d(out) [T x E].
template <typename S>
inline void encode_text_backward(const Mat<S>& d_out, const TextCache<S>& tc,
                                 const ModelParams<S>& params, const ModelConfig& cfg,
                                 ModelParams<S>& grads) {
    const int frames = d_out.rows;
    const int e = cfg.text_embed_dim;
    Mat<S> dx = d_out;

    for (int b = kTextEncoderBlocks - 1; b >= 0; --b) {
        const auto& blk = params.text_blocks[b];
        auto& gblk = grads.text_blocks[b];
        const TextBlockCache<S>& bc = tc.blocks[b];

        // x_out = x_in + pw2(gelu(pw1(affine(LN(dwconv(x_in))))))
        const Mat<S>& d_block_out = dx;  // residual: same grad feeds the branch
        Mat<S> d_h_act;
        linear_backward(d_block_out, bc.h_act, blk.pw2_w, gblk.pw2_w, gblk.pw2_b, d_h_act);
        Mat<S> d_h_pre(d_h_act.rows, d_h_act.cols);
        for (size_t i = 0; i < d_h_act.v.size(); ++i) {
            d_h_pre.v[i] = d_h_act.v[i] * nn::gelu_grad(bc.h_pre.v[i]);
        }
        Mat<S> d_z;
        linear_backward(d_h_pre, bc.z, blk.pw1_w, gblk.pw1_w, gblk.pw1_b, d_z);

        Mat<S> d_hat(frames, e);
        for (int t = 0; t < frames; ++t) {
            for (int j = 0; j < e; ++j) {
                gblk.ln_g(0, j) += d_z(t, j) * bc.ln_hat(t, j);
                gblk.ln_b(0, j) += d_z(t, j);
                d_hat(t, j) = d_z(t, j) * blk.ln_g(0, j);
            }
        }
        Mat<S> d_conv;
        nn::layernorm_backward(d_hat, bc.ln_hat, bc.ln_rstd, d_conv);

        Mat<S> d_x_in;
        nn::dwconv_backward(d_conv, bc.x_in, blk.dw_w, gblk.dw_w, gblk.dw_b, d_x_in);
        for (size_t i = 0; i < dx.v.size(); ++i) {
            dx.v[i] += d_x_in.v[i];  // add branch grad to residual grad
        }
    }

    for (int t = 0; t < frames; ++t) {
        S* grow = grads.text_embed.row(tc.ids[t]);
        const S* dxt = dx.row(t);
        for (int j = 0; j < e; ++j) {
            grow[j] += dxt[j];
        }
    }
}

// ---------------------------------------------------------------------------
// timestep embedding
// ---------------------------------------------------------------------------

template <typename S>
inline Mat<S> sinusoidal_features(double t, int dim) {
    Mat<S> out(1, dim);
    const int half = dim / 2;
    const double scaled = t * kTimeScale;
    for (int i = 0; i < half; ++i) {
        const double freq = std::pow(kRopeBase, -static_cast<double>(i) / half);
        out(0, i) = static_cast<S>(std::cos(scaled * freq));
        out(0, half + i) = static_cast<S>(std::sin(scaled * freq));
    }
    return out;
}

// Sinusoidal features of t followed by a two-layer SiLU MLP; the vector that
// modulates every transformer block.
template <typename S>
inline Mat<S> timestep_embedding(FlowTime t, const ModelParams<S>& params, const ModelConfig& cfg,
                                 ForwardCache<S>* cache = nullptr) {
    const int h = cfg.hidden_dim;
    Mat<S> sinus = sinusoidal_features<S>(t.value, h);
    Mat<S> t1_pre, t1_act(1, h), cond;
    linear_forward(sinus, params.time1_w, params.time1_b, t1_pre);
    for (int j = 0; j < h; ++j) {
        t1_act(0, j) = nn::silu(t1_pre(0, j));
    }
    linear_forward(t1_act, params.time2_w, params.time2_b, cond);
    if (cache) {
        cache->sinus = std::move(sinus);
        cache->t1_pre = std::move(t1_pre);
        cache->t1_act = std::move(t1_act);
        cache->cond = cond;
    }
    return cond;
}

// ---------------------------------------------------------------------------
// full forward pass
// ---------------------------------------------------------------------------

namespace nn {

// h = n * (1 + scale) + shift, broadcast over rows.
template <typename S>
inline void modulate(const Mat<S>& n, const S* shift, const S* scale, Mat<S>& h) {
    h = Mat<S>(n.rows, n.cols);
    for (int t = 0; t < n.rows; ++t) {
        const S* nt = n.row(t);
        S* ht = h.row(t);
        for (int j = 0; j < n.cols; ++j) {
            ht[j] = nt[j] * (S(1) + scale[j]) + shift[j];
        }
    }
}

inline void fill_dropout_mask(Mat<uint8_t>& mask, int rows, int cols, double p, Rng& rng) {
    mask = Mat<uint8_t>(rows, cols);
    for (auto& m : mask.v) {
        m = rng.uniform() >= p ? 1 : 0;
    }
}

}  // namespace nn

// Conditional velocity field evaluation. m_t and m_y are [n_mels x frames]
// (feature-major, matching MelSpectrogram); the result has the same shape.
// In eval mode (train_mode == false) the pass is deterministic and rng may be
// null; in train mode rng drives the dropout masks.
template <typename S>
inline Mat<S> model_forward(const Mat<S>& m_t, const Mat<S>& m_y, FlowTime t,
                            const TextCondition& text, const ModelParams<S>& params,
                            const ModelConfig& cfg, bool train_mode = false, Rng* rng = nullptr,
                            ForwardCache<S>* cache = nullptr) {
    require_same_shape(m_t, m_y, "model_forward");
    if (m_t.rows != cfg.n_mels) {
        throw DomainError("model_forward: input has " + std::to_string(m_t.rows) +
                          " mel rows, config expects " + std::to_string(cfg.n_mels));
    }
    if (m_t.cols < 1) {
        throw DomainError("model_forward: need at least one frame");
    }
    if (!all_finite(m_t) || !all_finite(m_y)) {
        throw DomainError("model_forward: non-finite input");
    }
    if (train_mode && cfg.dropout > 0.0 && rng == nullptr) {
        throw DomainError("model_forward: train mode with dropout needs an rng");
    }

    const int frames = m_t.cols;
    const int fm = cfg.n_mels;
    const int h = cfg.hidden_dim;
    const int e = cfg.text_embed_dim;
    const int heads = cfg.n_heads;
    const int head_dim = h / heads;
    const double p_drop = train_mode ? cfg.dropout : 0.0;
    const S keep_scale = static_cast<S>(p_drop > 0.0 ? 1.0 / (1.0 - p_drop) : 1.0);

    ForwardCache<S> local;
    ForwardCache<S>& cc = cache ? *cache : local;
    cc.frames = frames;
    cc.train_mode = train_mode;
    cc.dropout_p = p_drop;

    // Conditioning streams: text embedding and timestep vector.
    const Mat<S> text_emb = encode_text(text, frames, params, cfg, &cc.text);
    timestep_embedding(t, params, cfg, &cc);
    cc.silu_cond = Mat<S>(1, h);
    for (int j = 0; j < h; ++j) {
        cc.silu_cond(0, j) = nn::silu(cc.cond(0, j));
    }

    // Per-frame features: [m_t ; m_y ; text], then projection to hidden size.
    cc.x0 = Mat<S>(frames, 2 * fm + e);
    for (int f = 0; f < frames; ++f) {
        S* row = cc.x0.row(f);
        for (int m = 0; m < fm; ++m) {
            row[m] = m_t(m, f);
            row[fm + m] = m_y(m, f);
        }
        const S* te = text_emb.row(f);
        for (int j = 0; j < e; ++j) {
            row[2 * fm + j] = te[j];
        }
    }
    linear_forward(cc.x0, params.in_w, params.in_b, cc.x1);

    Mat<S> x = cc.x1;
    cc.layers.assign(cfg.n_layers, LayerCache<S>{});
    const S inv_sqrt_d = static_cast<S>(1.0 / std::sqrt(static_cast<double>(head_dim)));

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& layer = params.layers[l];
        LayerCache<S>& lc = cc.layers[l];
        lc.x_in = x;

        linear_forward(cc.silu_cond, layer.ada_w, layer.ada_b, lc.mod);
        const S* shift_msa = lc.mod.row(0);
        const S* scale_msa = shift_msa + h;
        const S* gate_msa = shift_msa + 2 * h;
        const S* shift_mlp = shift_msa + 3 * h;
        const S* scale_mlp = shift_msa + 4 * h;
        const S* gate_mlp = shift_msa + 5 * h;

        nn::layernorm_forward(x, lc.n1, lc.ln1_rstd);
        nn::modulate(lc.n1, shift_msa, scale_msa, lc.h1);

        // Self-attention with rotary position encoding.
        linear_forward(lc.h1, layer.qkv_w, layer.qkv_b, lc.qkv);
        lc.q_rot = Mat<S>(frames, h);
        lc.k_rot = Mat<S>(frames, h);
        for (int f = 0; f < frames; ++f) {
            const S* qkv_row = lc.qkv.row(f);
            for (int j = 0; j < h; ++j) {
                lc.q_rot(f, j) = qkv_row[j];
                lc.k_rot(f, j) = qkv_row[h + j];
            }
        }
        nn::rope_apply(lc.q_rot, heads, 1.0);
        nn::rope_apply(lc.k_rot, heads, 1.0);

        lc.probs.assign(heads, Mat<S>{});
        if (p_drop > 0.0) {
            lc.attn_keep.assign(heads, Mat<uint8_t>{});
        }
        lc.av = Mat<S>(frames, h);
        for (int hd = 0; hd < heads; ++hd) {
            const int col0 = hd * head_dim;
            Mat<S>& probs = lc.probs[hd];
            probs = Mat<S>(frames, frames);
            for (int a = 0; a < frames; ++a) {
                const S* qa = lc.q_rot.row(a) + col0;
                S* pa = probs.row(a);
                for (int b = 0; b < frames; ++b) {
                    const S* kb = lc.k_rot.row(b) + col0;
                    S acc = S(0);
                    for (int j = 0; j < head_dim; ++j) {
                        acc += qa[j] * kb[j];
                    }
                    pa[b] = acc * inv_sqrt_d;
                }
            }
            nn::softmax_rows(probs);

            const Mat<uint8_t>* keep = nullptr;
            if (p_drop > 0.0) {
                nn::fill_dropout_mask(lc.attn_keep[hd], frames, frames, p_drop, *rng);
                keep = &lc.attn_keep[hd];
            }
            for (int a = 0; a < frames; ++a) {
                const S* pa = probs.row(a);
                S* ava = lc.av.row(a) + col0;
                for (int j = 0; j < head_dim; ++j) {
                    ava[j] = S(0);
                }
                for (int b = 0; b < frames; ++b) {
                    S w = pa[b];
                    if (keep) {
                        w = (*keep)(a, b) ? w * keep_scale : S(0);
                    }
                    if (w == S(0)) {
                        continue;
                    }
                    const S* vb = lc.qkv.row(b) + 2 * h + col0;
                    for (int j = 0; j < head_dim; ++j) {
                        ava[j] += w * vb[j];
                    }
                }
            }
        }
        linear_forward(lc.av, layer.out_w, layer.out_b, lc.attn_out);

        lc.x_mid = Mat<S>(frames, h);
        for (int f = 0; f < frames; ++f) {
            const S* xi = x.row(f);
            const S* ao = lc.attn_out.row(f);
            S* xm = lc.x_mid.row(f);
            for (int j = 0; j < h; ++j) {
                xm[j] = xi[j] + gate_msa[j] * ao[j];
            }
        }

        // Feed-forward branch.
        nn::layernorm_forward(lc.x_mid, lc.n2, lc.ln2_rstd);
        nn::modulate(lc.n2, shift_mlp, scale_mlp, lc.h2);
        linear_forward(lc.h2, layer.ffn1_w, layer.ffn1_b, lc.f_pre);
        lc.f_drop = Mat<S>(lc.f_pre.rows, lc.f_pre.cols);
        if (p_drop > 0.0) {
            nn::fill_dropout_mask(lc.ffn_keep, lc.f_pre.rows, lc.f_pre.cols, p_drop, *rng);
            for (size_t i = 0; i < lc.f_pre.v.size(); ++i) {
                lc.f_drop.v[i] =
                    lc.ffn_keep.v[i] ? nn::gelu(lc.f_pre.v[i]) * keep_scale : S(0);
            }
        } else {
            for (size_t i = 0; i < lc.f_pre.v.size(); ++i) {
                lc.f_drop.v[i] = nn::gelu(lc.f_pre.v[i]);
            }
        }
        linear_forward(lc.f_drop, layer.ffn2_w, layer.ffn2_b, lc.ffn_out);

        lc.x_out = Mat<S>(frames, h);
        for (int f = 0; f < frames; ++f) {
            const S* xm = lc.x_mid.row(f);
            const S* fo = lc.ffn_out.row(f);
            S* xo = lc.x_out.row(f);
            for (int j = 0; j < h; ++j) {
                xo[j] = xm[j] + gate_mlp[j] * fo[j];
            }
        }
        x = lc.x_out;
    }

    // Final adaptive norm + zero-initialized projection back to mel bins.
    linear_forward(cc.silu_cond, params.final_ada_w, params.final_ada_b, cc.final_mod);
    nn::layernorm_forward(x, cc.nf, cc.lnf_rstd);
    nn::modulate(cc.nf, cc.final_mod.row(0), cc.final_mod.row(0) + h, cc.hf);
    linear_forward(cc.hf, params.out_w, params.out_b, cc.out_tm);

    Mat<S> out(fm, frames);
    for (int f = 0; f < frames; ++f) {
        const S* row = cc.out_tm.row(f);
        for (int m = 0; m < fm; ++m) {
            out(m, f) = row[m];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// full backward pass
// ---------------------------------------------------------------------------

// Accumulates d(loss)/d(params) into grads given d(loss)/d(output). d_out is
// [n_mels x frames], matching the forward return value.
template <typename S>
inline void model_backward(const Mat<S>& d_out, const ForwardCache<S>& cc,
                           const ModelParams<S>& params, const ModelConfig& cfg,
                           ModelParams<S>& grads) {
    const int frames = cc.frames;
    const int fm = cfg.n_mels;
    const int h = cfg.hidden_dim;
    const int e = cfg.text_embed_dim;
    const int heads = cfg.n_heads;
    const int head_dim = h / heads;
    const double p_drop = cc.dropout_p;
    const S keep_scale = static_cast<S>(p_drop > 0.0 ? 1.0 / (1.0 - p_drop) : 1.0);
    const S inv_sqrt_d = static_cast<S>(1.0 / std::sqrt(static_cast<double>(head_dim)));

    Mat<S> d_silu_cond(1, h);

    // Final projection and adaptive norm.
    Mat<S> d_out_tm(frames, fm);
    for (int f = 0; f < frames; ++f) {
        for (int m = 0; m < fm; ++m) {
            d_out_tm(f, m) = d_out(m, f);
        }
    }
    Mat<S> d_hf;
    linear_backward(d_out_tm, cc.hf, params.out_w, grads.out_w, grads.out_b, d_hf);

    Mat<S> d_final_mod(1, 2 * h);
    Mat<S> d_nf(frames, h);
    {
        const S* scale_f = cc.final_mod.row(0) + h;
        for (int f = 0; f < frames; ++f) {
            const S* dh = d_hf.row(f);
            const S* nf = cc.nf.row(f);
            S* dn = d_nf.row(f);
            for (int j = 0; j < h; ++j) {
                d_final_mod(0, j) += dh[j];                // d shift
                d_final_mod(0, h + j) += dh[j] * nf[j];    // d scale
                dn[j] = dh[j] * (S(1) + scale_f[j]);
            }
        }
    }
    {
        Mat<S> d_sc;
        linear_backward(d_final_mod, cc.silu_cond, params.final_ada_w, grads.final_ada_w,
                        grads.final_ada_b, d_sc);
        for (int j = 0; j < h; ++j) {
            d_silu_cond(0, j) += d_sc(0, j);
        }
    }
    Mat<S> dx;
    nn::layernorm_backward(d_nf, cc.nf, cc.lnf_rstd, dx);

    // Transformer layers in reverse.
    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto& layer = params.layers[l];
        auto& glayer = grads.layers[l];
        const LayerCache<S>& lc = cc.layers[l];

        const S* shift_msa = lc.mod.row(0);
        const S* scale_msa = shift_msa + h;
        const S* gate_msa = shift_msa + 2 * h;
        const S* scale_mlp = shift_msa + 4 * h;
        const S* gate_mlp = shift_msa + 5 * h;

        Mat<S> d_mod(1, 6 * h);

        // x_out = x_mid + gate_mlp * ffn_out
        Mat<S> d_ffn_out(frames, h);
        Mat<S> d_x_mid = dx;
        for (int f = 0; f < frames; ++f) {
            const S* dxf = dx.row(f);
            const S* fo = lc.ffn_out.row(f);
            S* dfo = d_ffn_out.row(f);
            for (int j = 0; j < h; ++j) {
                d_mod(0, 5 * h + j) += dxf[j] * fo[j];  // d gate_mlp
                dfo[j] = dxf[j] * gate_mlp[j];
            }
        }

        // ffn_out = fc2(dropout(gelu(fc1(h2))))
        Mat<S> d_f_drop;
        linear_backward(d_ffn_out, lc.f_drop, layer.ffn2_w, glayer.ffn2_w, glayer.ffn2_b,
                        d_f_drop);
        Mat<S> d_f_pre(d_f_drop.rows, d_f_drop.cols);
        for (size_t i = 0; i < d_f_drop.v.size(); ++i) {
            S g = d_f_drop.v[i];
            if (p_drop > 0.0) {
                g = lc.ffn_keep.v[i] ? g * keep_scale : S(0);
            }
            d_f_pre.v[i] = g * nn::gelu_grad(lc.f_pre.v[i]);
        }
        Mat<S> d_h2;
        linear_backward(d_f_pre, lc.h2, layer.ffn1_w, glayer.ffn1_w, glayer.ffn1_b, d_h2);

        // h2 = n2 * (1 + scale_mlp) + shift_mlp
        Mat<S> d_n2(frames, h);
        for (int f = 0; f < frames; ++f) {
            const S* dh = d_h2.row(f);
            const S* n2 = lc.n2.row(f);
            S* dn = d_n2.row(f);
            for (int j = 0; j < h; ++j) {
                d_mod(0, 3 * h + j) += dh[j];              // d shift_mlp
                d_mod(0, 4 * h + j) += dh[j] * n2[j];      // d scale_mlp
                dn[j] = dh[j] * (S(1) + scale_mlp[j]);
            }
        }
        {
            Mat<S> d_from_ln;
            nn::layernorm_backward(d_n2, lc.n2, lc.ln2_rstd, d_from_ln);
            for (size_t i = 0; i < d_x_mid.v.size(); ++i) {
                d_x_mid.v[i] += d_from_ln.v[i];
            }
        }

        // x_mid = x_in + gate_msa * attn_out
        Mat<S> d_attn_out(frames, h);
        Mat<S> d_x_in = d_x_mid;
        for (int f = 0; f < frames; ++f) {
            const S* dxm = d_x_mid.row(f);
            const S* ao = lc.attn_out.row(f);
            S* dao = d_attn_out.row(f);
            for (int j = 0; j < h; ++j) {
                d_mod(0, 2 * h + j) += dxm[j] * ao[j];  // d gate_msa
                dao[j] = dxm[j] * gate_msa[j];
            }
        }

        // Attention backward.
        Mat<S> d_av;
        linear_backward(d_attn_out, lc.av, layer.out_w, glayer.out_w, glayer.out_b, d_av);

        Mat<S> d_qkv(frames, 3 * h);
        Mat<S> d_q_rot(frames, h);
        Mat<S> d_k_rot(frames, h);
        for (int hd = 0; hd < heads; ++hd) {
            const int col0 = hd * head_dim;
            const Mat<S>& probs = lc.probs[hd];
            const Mat<uint8_t>* keep = p_drop > 0.0 ? &lc.attn_keep[hd] : nullptr;

            // d wrt post-dropout weights and values.
            Mat<S> d_weights(frames, frames);
            for (int a = 0; a < frames; ++a) {
                const S* dava = d_av.row(a) + col0;
                const S* pa = probs.row(a);
                S* dwa = d_weights.row(a);
                for (int b = 0; b < frames; ++b) {
                    const S* vb = lc.qkv.row(b) + 2 * h + col0;
                    S acc = S(0);
                    for (int j = 0; j < head_dim; ++j) {
                        acc += dava[j] * vb[j];
                    }
                    dwa[b] = acc;

                    S w = pa[b];
                    if (keep) {
                        w = (*keep)(a, b) ? w * keep_scale : S(0);
                    }
                    if (w != S(0)) {
                        S* dvb = d_qkv.row(b) + 2 * h + col0;
                        for (int j = 0; j < head_dim; ++j) {
                            dvb[j] += w * dava[j];
                        }
                    }
                }
            }

            // Through dropout, then softmax rows, then the scaled dot product.
            for (int a = 0; a < frames; ++a) {
                S* dwa = d_weights.row(a);
                const S* pa = probs.row(a);
                if (keep) {
                    for (int b = 0; b < frames; ++b) {
                        dwa[b] = (*keep)(a, b) ? dwa[b] * keep_scale : S(0);
                    }
                }
                S dot = S(0);
                for (int b = 0; b < frames; ++b) {
                    dot += dwa[b] * pa[b];
                }
                for (int b = 0; b < frames; ++b) {
                    const S d_logit = pa[b] * (dwa[b] - dot) * inv_sqrt_d;
                    const S* kb = lc.k_rot.row(b) + col0;
                    const S* qa = lc.q_rot.row(a) + col0;
                    S* dqa = d_q_rot.row(a) + col0;
                    S* dkb = d_k_rot.row(b) + col0;
                    for (int j = 0; j < head_dim; ++j) {
                        dqa[j] += d_logit * kb[j];
                        dkb[j] += d_logit * qa[j];
                    }
                }
            }
        }

        // Undo the rotary encoding and pack into d_qkv.
        nn::rope_apply(d_q_rot, heads, -1.0);
        nn::rope_apply(d_k_rot, heads, -1.0);
        for (int f = 0; f < frames; ++f) {
            S* dq = d_qkv.row(f);
            const S* dqr = d_q_rot.row(f);
            const S* dkr = d_k_rot.row(f);
            for (int j = 0; j < h; ++j) {
                dq[j] = dqr[j];
                dq[h + j] = dkr[j];
            }
        }

        Mat<S> d_h1;
        linear_backward(d_qkv, lc.h1, layer.qkv_w, glayer.qkv_w, glayer.qkv_b, d_h1);

        // h1 = n1 * (1 + scale_msa) + shift_msa
        Mat<S> d_n1(frames, h);
        for (int f = 0; f < frames; ++f) {
            const S* dh = d_h1.row(f);
            const S* n1 = lc.n1.row(f);
            S* dn = d_n1.row(f);
            for (int j = 0; j < h; ++j) {
                d_mod(0, j) += dh[j];                  // d shift_msa
                d_mod(0, h + j) += dh[j] * n1[j];      // d scale_msa
                dn[j] = dh[j] * (S(1) + scale_msa[j]);
            }
        }
        {
            Mat<S> d_from_ln;
            nn::layernorm_backward(d_n1, lc.n1, lc.ln1_rstd, d_from_ln);
            for (size_t i = 0; i < d_x_in.v.size(); ++i) {
                d_x_in.v[i] += d_from_ln.v[i];
            }
        }

        // Modulation vector came from the shared silu(cond).
        {
            Mat<S> d_sc;
            linear_backward(d_mod, cc.silu_cond, layer.ada_w, glayer.ada_w, glayer.ada_b, d_sc);
            for (int j = 0; j < h; ++j) {
                d_silu_cond(0, j) += d_sc(0, j);
            }
        }

        dx = std::move(d_x_in);
    }

    // Input projection and the split into (m_t, m_y, text) streams.
    Mat<S> d_x0;
    linear_backward(dx, cc.x0, params.in_w, grads.in_w, grads.in_b, d_x0);
    Mat<S> d_text(frames, e);
    for (int f = 0; f < frames; ++f) {
        const S* row = d_x0.row(f);
        S* dt = d_text.row(f);
        const int fm2 = 2 * cfg.n_mels;
        for (int j = 0; j < e; ++j) {
            dt[j] = row[fm2 + j];
        }
    }
    encode_text_backward(d_text, cc.text, params, cfg, grads);

    // Timestep embedding: silu, then the two-layer MLP.
    Mat<S> d_cond(1, h);
    for (int j = 0; j < h; ++j) {
        d_cond(0, j) = d_silu_cond(0, j) * nn::silu_grad(cc.cond(0, j));
    }
    Mat<S> d_t1_act;
    linear_backward(d_cond, cc.t1_act, params.time2_w, grads.time2_w, grads.time2_b, d_t1_act);
    Mat<S> d_t1_pre(1, h);
    for (int j = 0; j < h; ++j) {
        d_t1_pre(0, j) = d_t1_act(0, j) * nn::silu_grad(cc.t1_pre(0, j));
    }
    Mat<S> d_sinus;
    linear_backward(d_t1_pre, cc.sinus, params.time1_w, grads.time1_w, grads.time1_b, d_sinus);
}

}  // namespace flowse
