#pragma once

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vitclt/activation_store.hpp"
#include "vitclt/numerics.hpp"
#include "vitclt/rng.hpp"

namespace vitclt {

struct VitConfig {
    std::size_t layers = 6;
    std::size_t tokens = 10;  // CLS + patches
    std::size_t hidden = 32;
    std::size_t mlp_hidden = 0;  // 0 means 4 * hidden
    std::size_t heads = 4;
    std::size_t classes = 10;
    std::uint64_t seed = 0;
    // Synthetic input generator: patch = pos + noise * N(0,1) + signal * prototype[label]
    double signal = 1.0;
    double noise = 1.0;
    std::size_t calibration_per_class = 32;

    std::size_t mlp_width() const { return mlp_hidden == 0 ? 4 * hidden : mlp_hidden; }

    void validate() const {
        if (layers < 1) throw std::invalid_argument("vit: layers must be >= 1");
        if (tokens < 2) throw std::invalid_argument("vit: tokens must be >= 2");
        if (hidden < 1 || heads < 1 || hidden % heads != 0)
            throw std::invalid_argument("vit: hidden must be a positive multiple of heads");
        if (classes < 2) throw std::invalid_argument("vit: need at least 2 classes");
    }
};

struct VitLayer {
    std::vector<float> ln1_scale, ln1_bias;
    Matrix wq, wk, wv, wo;  // hidden x hidden
    std::vector<float> ln2_scale, ln2_bias;
    Matrix w1;  // hidden x mlp_width
    std::vector<float> b1;
    Matrix w2;  // mlp_width x hidden
    std::vector<float> b2;
};

struct VitParams {
    VitConfig config;
    std::vector<VitLayer> layers;
    std::vector<float> cls_token;
    Matrix pos_embed;         // tokens x hidden
    Matrix class_prototypes;  // classes x hidden, input-side signal
    std::vector<float> final_scale, final_bias;
    Matrix class_embeddings;  // classes x hidden, unit-norm rows

    bool operator==(const VitParams& o) const {
        auto same_layer = [](const VitLayer& a, const VitLayer& b) {
            return a.ln1_scale == b.ln1_scale && a.ln1_bias == b.ln1_bias && a.wq == b.wq && a.wk == b.wk &&
                   a.wv == b.wv && a.wo == b.wo && a.ln2_scale == b.ln2_scale && a.ln2_bias == b.ln2_bias &&
                   a.w1 == b.w1 && a.b1 == b.b1 && a.w2 == b.w2 && a.b2 == b.b2;
        };
        if (layers.size() != o.layers.size()) return false;
        for (std::size_t l = 0; l < layers.size(); ++l)
            if (!same_layer(layers[l], o.layers[l])) return false;
        return cls_token == o.cls_token && pos_embed == o.pos_embed && class_prototypes == o.class_prototypes &&
               final_scale == o.final_scale && final_bias == o.final_bias && class_embeddings == o.class_embeddings;
    }
};

inline constexpr float kLayerNormEps = 1e-5f;

inline float gelu(float v) {
    constexpr float k0 = 0.7978845608028654f;  // sqrt(2/pi)
    constexpr float k1 = 0.044715f;
    return 0.5f * v * (1.0f + std::tanh(k0 * (v + k1 * v * v * v)));
}

inline void layer_norm_row(std::span<const float> in, std::span<const float> scale, std::span<const float> bias,
                           std::span<float> out) {
    double mean = 0.0;
    for (float v : in) mean += v;
    mean /= static_cast<double>(in.size());
    double var = 0.0;
    for (float v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(in.size());
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t d = 0; d < in.size(); ++d)
        out[d] = static_cast<float>((in[d] - mean) * inv) * scale[d] + bias[d];
}

inline Matrix layer_norm(const Matrix& x, const std::vector<float>& scale, const std::vector<float>& bias) {
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) layer_norm_row(x.row(r), scale, bias, out.row(r));
    return out;
}

/// Token-wise MLP: GELU(x W1 + b1) W2 + b2.
inline Matrix mlp(const VitLayer& layer, const Matrix& x) {
    Matrix h = matmul(x, layer.w1);
    for (std::size_t r = 0; r < h.rows(); ++r) {
        auto row = h.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] = gelu(row[c] + layer.b1[c]);
    }
    Matrix y = matmul(h, layer.w2);
    for (std::size_t r = 0; r < y.rows(); ++r) {
        auto row = y.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += layer.b2[c];
    }
    return y;
}

/// Multi-head softmax self-attention over all tokens (no mask, no biases).
inline Matrix attention(const VitLayer& layer, const Matrix& h, std::size_t heads) {
    const std::size_t T = h.rows(), D = h.cols(), dh = D / heads;
    const Matrix q = matmul(h, layer.wq), k = matmul(h, layer.wk), v = matmul(h, layer.wv);
    Matrix mixed(T, D);
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<float> scores(T);
    for (std::size_t hd = 0; hd < heads; ++hd) {
        const std::size_t off = hd * dh;
        for (std::size_t i = 0; i < T; ++i) {
            float mx = -std::numeric_limits<float>::infinity();
            for (std::size_t j = 0; j < T; ++j) {
                float s = 0.0f;
                for (std::size_t d = 0; d < dh; ++d) s += q(i, off + d) * k(j, off + d);
                scores[j] = s * scale;
                mx = std::max(mx, scores[j]);
            }
            float sum = 0.0f;
            for (auto& s : scores) {
                s = std::exp(s - mx);
                sum += s;
            }
            for (std::size_t j = 0; j < T; ++j) {
                const float w = scores[j] / sum;
                for (std::size_t d = 0; d < dh; ++d) mixed(i, off + d) += w * v(j, off + d);
            }
        }
    }
    return matmul(mixed, layer.wo);
}

struct ForwardResult {
    std::vector<float> embedding;  // final-LN CLS token
    std::vector<float> logits;     // cosine with each class embedding
};

struct CaptureResult {
    ActivationTrace trace;
    ForwardResult output;
};

/// Called with (layer, x = LN2 output, residual before the MLP). Returning a
/// matrix substitutes the MLP output for that layer; nullopt runs the MLP.
using MlpOverride = std::function<std::optional<Matrix>(std::size_t, const Matrix&, const Matrix&)>;

inline std::vector<float> cosine_logits(const VitParams& p, std::span<const float> embedding) {
    const double n = std::sqrt(squared_norm(embedding));
    std::vector<float> logits(p.config.classes);
    for (std::size_t c = 0; c < logits.size(); ++c) {
        const double d = dot(embedding, p.class_embeddings.row(c));
        logits[c] = n > 0.0 ? static_cast<float>(d / n) : 0.0f;
    }
    return logits;
}

inline ForwardResult forward_with_hooks(const VitParams& p, const Matrix& input, const MlpOverride& hook,
                                        ActivationTrace* capture = nullptr) {
    const auto& cfg = p.config;
    if (input.rows() != cfg.tokens || input.cols() != cfg.hidden)
        throw std::invalid_argument("vit forward: input must be tokens x hidden");
    if (!all_finite(input)) throw std::invalid_argument("vit forward: non-finite input");
    if (capture) {
        capture->x.clear();
        capture->y.clear();
    }
    Matrix h = input;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const auto& layer = p.layers[l];
        Matrix a = attention(layer, layer_norm(h, layer.ln1_scale, layer.ln1_bias), cfg.heads);
        for (std::size_t i = 0; i < a.size(); ++i) a.values()[i] += h.values()[i];
        Matrix x = layer_norm(a, layer.ln2_scale, layer.ln2_bias);
        std::optional<Matrix> y;
        if (hook) y = hook(l, x, a);
        if (y) {
            if (!y->same_shape(x))
                throw std::invalid_argument("mlp override at layer " + std::to_string(l) + " returned wrong shape");
        } else {
            y = mlp(layer, x);
        }
        for (std::size_t i = 0; i < a.size(); ++i) h.values()[i] = a.values()[i] + y->values()[i];
        if (!all_finite(h)) throw std::runtime_error("non-finite activation at layer " + std::to_string(l));
        if (capture) {
            capture->x.push_back(std::move(x));
            capture->y.push_back(std::move(*y));
        }
    }
    ForwardResult out;
    out.embedding.resize(cfg.hidden);
    layer_norm_row(h.row(0), p.final_scale, p.final_bias, out.embedding);
    out.logits = cosine_logits(p, out.embedding);
    return out;
}

inline ForwardResult forward(const VitParams& p, const Matrix& input) {
    return forward_with_hooks(p, input, {});
}

inline CaptureResult forward_capture(const VitParams& p, const Matrix& input) {
    CaptureResult r;
    r.output = forward_with_hooks(p, input, {}, &r.trace);
    return r;
}

/// Synthetic image for a given label; `stream` selects the noise draw.
inline Matrix toy_image(const VitParams& p, std::uint32_t label, std::uint64_t stream) {
    const auto& cfg = p.config;
    Rng rng(mix_seed(cfg.seed ^ 0x1a6e5ULL, stream));
    Matrix img = p.pos_embed;
    for (std::size_t d = 0; d < cfg.hidden; ++d) img(0, d) += p.cls_token[d];
    for (std::size_t t = 1; t < cfg.tokens; ++t)
        for (std::size_t d = 0; d < cfg.hidden; ++d)
            img(t, d) += static_cast<float>(cfg.noise * rng.normal() + cfg.signal * p.class_prototypes(label, d));
    return img;
}

struct ToySample {
    Matrix tokens;
    std::uint32_t label;
};

/// Sample `index` of the synthetic dataset; labels cycle through the classes.
inline ToySample toy_sample(const VitParams& p, std::uint64_t index) {
    const auto label = static_cast<std::uint32_t>(index % p.config.classes);
    return {toy_image(p, label, index), label};
}

/// Weights from a seeded Gaussian scaled by 1/sqrt(fan_in). The class head is
/// fixed at init: centered, normalized mean CLS embeddings of seeded
/// calibration images (drawn from a stream disjoint from toy_sample).
inline VitParams init_teacher(const VitConfig& cfg) {
    cfg.validate();
    Rng rng(mix_seed(cfg.seed, 0x7ea));
    const std::size_t D = cfg.hidden, H = cfg.mlp_width();
    const double sd = 1.0 / std::sqrt(static_cast<double>(D));
    const double sh = 1.0 / std::sqrt(static_cast<double>(H));

    auto gaussian = [&](std::size_t r, std::size_t c, double s) {
        Matrix m(r, c);
        rng.fill_normal(m.values(), s);
        return m;
    };
    auto vec = [&](std::size_t n, double mean, double s) {
        std::vector<float> v(n);
        for (auto& x : v) x = static_cast<float>(mean + s * rng.normal());
        return v;
    };

    VitParams p;
    p.config = cfg;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        VitLayer layer;
        layer.ln1_scale = vec(D, 1.0, 0.1);
        layer.ln1_bias = vec(D, 0.0, 0.1);
        layer.wq = gaussian(D, D, sd);
        layer.wk = gaussian(D, D, sd);
        layer.wv = gaussian(D, D, sd);
        layer.wo = gaussian(D, D, sd);
        layer.ln2_scale = vec(D, 1.0, 0.1);
        layer.ln2_bias = vec(D, 0.0, 0.1);
        layer.w1 = gaussian(D, H, sd);
        layer.b1 = vec(H, 0.0, 0.1);
        layer.w2 = gaussian(H, D, sh);
        layer.b2 = vec(D, 0.0, 0.1);
        p.layers.push_back(std::move(layer));
    }
    p.cls_token = vec(D, 0.0, 1.0);
    p.pos_embed = gaussian(cfg.tokens, D, 0.5);
    p.class_prototypes = gaussian(cfg.classes, D, 1.0);
    p.final_scale.assign(D, 1.0f);
    p.final_bias.assign(D, 0.0f);

    p.class_embeddings = Matrix(cfg.classes, D);
    std::vector<double> grand(D, 0.0);
    std::vector<std::vector<double>> means(cfg.classes, std::vector<double>(D, 0.0));
    const std::size_t n = std::max<std::size_t>(cfg.calibration_per_class, 1);
    for (std::size_t c = 0; c < cfg.classes; ++c) {
        for (std::size_t r = 0; r < n; ++r) {
            const auto stream = (std::uint64_t{1} << 62) | (c * n + r);
            const auto emb = forward(p, toy_image(p, static_cast<std::uint32_t>(c), stream)).embedding;
            for (std::size_t d = 0; d < D; ++d) means[c][d] += emb[d] / static_cast<double>(n);
        }
        for (std::size_t d = 0; d < D; ++d) grand[d] += means[c][d] / static_cast<double>(cfg.classes);
    }
    for (std::size_t c = 0; c < cfg.classes; ++c) {
        double norm = 0.0;
        for (std::size_t d = 0; d < D; ++d) norm += (means[c][d] - grand[d]) * (means[c][d] - grand[d]);
        norm = std::sqrt(norm);
        if (norm == 0.0) throw std::runtime_error("vit init: degenerate class calibration");
        for (std::size_t d = 0; d < D; ++d)
            p.class_embeddings(c, d) = static_cast<float>((means[c][d] - grand[d]) / norm);
    }
    return p;
}

inline std::size_t argmax(std::span<const float> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace vitclt
