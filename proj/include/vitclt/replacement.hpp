#pragma once

#include <algorithm>
#include <charconv>
#include <concepts>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vitclt/attribution.hpp"
#include "vitclt/clt.hpp"
#include "vitclt/numerics.hpp"
#include "vitclt/toy_vit.hpp"

namespace vitclt {

struct LayerRange {
    std::size_t first = 0;
    std::size_t last = 0;  // inclusive
    bool operator==(const LayerRange&) const = default;
};

/// Contiguous block of substituted MLPs plus the token rows substituted.
struct ReplacementPlan {
    std::optional<LayerRange> range;  // nullopt = empty plan
    TokenSet routing = TokenSet::All;

    bool replaces(std::size_t layer) const { return range && layer >= range->first && layer <= range->last; }

    void validate(std::size_t layers) const {
        if (range && (range->first > range->last || range->last >= layers))
            throw std::invalid_argument("replacement range " + range_label() + " invalid for " + std::to_string(layers) +
                                        " layers");
    }

    std::string range_label() const {
        if (!range) return "none";
        return std::to_string(range->first) + "->" + std::to_string(range->last);
    }
};

/// Parses "none", "a->b", "a-b" or "a:b".
inline std::optional<LayerRange> parse_range(std::string_view s) {
    if (s == "none" || s.empty()) return std::nullopt;
    std::size_t sep = s.find("->");
    std::size_t skip = 2;
    if (sep == std::string_view::npos) {
        sep = s.find_first_of("-:");
        skip = 1;
    }
    if (sep == std::string_view::npos) throw std::invalid_argument("bad layer range '" + std::string(s) + "'");
    auto number = [&](std::string_view part) {
        std::size_t v = 0;
        auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
        if (ec != std::errc{} || ptr != part.data() + part.size())
            throw std::invalid_argument("bad layer range '" + std::string(s) + "'");
        return v;
    };
    LayerRange r{number(s.substr(0, sep)), number(s.substr(sep + skip))};
    if (r.first > r.last) throw std::invalid_argument("bad layer range '" + std::string(s) + "': first > last");
    return r;
}

/// Something that can stand in for MLP outputs during a cascaded forward.
/// observe() sees every layer's (modified) LN2 input up to the end of the
/// range; predict() is asked only for layers inside it.
template <typename S>
concept MlpSurrogate = requires(S s, std::size_t layer, const Matrix& x) {
    s.reset();
    s.observe(layer, x);
    { s.predict(layer, x) } -> std::convertible_to<Matrix>;
};

/// CLT reconstruction from codes re-encoded on the modified stream.
class CltSurrogate {
public:
    explicit CltSurrogate(const CltParams& clt) : clt_(&clt) {}
    void reset() { codes_.assign(clt_->layers, Matrix{}); }
    void observe(std::size_t layer, const Matrix& x) { codes_.at(layer) = encode_layer(*clt_, layer, x); }
    Matrix predict(std::size_t layer, const Matrix&) const { return reconstruct(*clt_, codes_, layer); }

private:
    const CltParams* clt_;
    SparseCodes codes_;
};

/// Returns the teacher's own MLP output; a perfect surrogate.
class OracleSurrogate {
public:
    explicit OracleSurrogate(const VitParams& vit) : vit_(&vit) {}
    void reset() {}
    void observe(std::size_t, const Matrix&) {}
    Matrix predict(std::size_t layer, const Matrix& x) const { return mlp(vit_->layers.at(layer), x); }

private:
    const VitParams* vit_;
};

/// Cascaded replacement: inside the range the routed token rows take the
/// surrogate's output, other rows keep the teacher MLP run on the modified
/// stream; errors propagate through the residual.
template <MlpSurrogate S>
ForwardResult run_cascaded(const VitParams& vit, S& surrogate, const ReplacementPlan& plan, const Matrix& input,
                           ActivationTrace* capture = nullptr) {
    plan.validate(vit.config.layers);
    surrogate.reset();
    MlpOverride hook = [&](std::size_t l, const Matrix& x, const Matrix&) -> std::optional<Matrix> {
        if (!plan.range || l > plan.range->last) return std::nullopt;
        surrogate.observe(l, x);
        if (l < plan.range->first) return std::nullopt;
        Matrix y_hat = surrogate.predict(l, x);
        if (plan.routing == TokenSet::All) return y_hat;
        Matrix y = mlp(vit.layers[l], x);
        for (std::size_t r = 0; r < y.rows(); ++r) {
            if (!in_token_set(plan.routing, r)) continue;
            auto src = y_hat.row(r);
            std::copy(src.begin(), src.end(), y.row(r).begin());
        }
        return y;
    };
    return forward_with_hooks(vit, input, hook, capture);
}

inline void check_compatible(const VitParams& vit, const CltParams& clt) {
    if (vit.config.layers != clt.layers || vit.config.hidden != clt.hidden)
        throw std::invalid_argument("clt dims (L=" + std::to_string(clt.layers) + ", D=" + std::to_string(clt.hidden) +
                                    ") do not match teacher (L=" + std::to_string(vit.config.layers) +
                                    ", D=" + std::to_string(vit.config.hidden) + ")");
}

inline ForwardResult run_cascaded(const VitParams& vit, const CltParams& clt, const ReplacementPlan& plan,
                                  const Matrix& input, ActivationTrace* capture = nullptr) {
    check_compatible(vit, clt);
    CltSurrogate s(clt);
    return run_cascaded(vit, s, plan, input, capture);
}

struct FaithfulnessReport {
    std::size_t samples = 0;
    double acc_base = 0.0;       // percent
    double acc_surrogate = 0.0;  // percent
    double delta_acc = 0.0;      // surrogate - base, percentage points
    double flip_rate = 0.0;      // percent of samples whose argmax changes
    double kl_mean = 0.0;        // mean KL(base || surrogate) over softmax(scale * logits)
    double top1_agreement = 0.0;
    double top5_agreement = 0.0;  // base argmax within surrogate top-5
    double cls_cosine = 0.0;      // mean cosine of final CLS embeddings
    double cka = 0.0;             // linear CKA over CLS embeddings
    double spearman = 0.0;        // over flattened per-class mean logits
};

inline constexpr double kDefaultLogitScale = 100.0;

inline std::vector<double> scaled_softmax(std::span<const float> logits, double scale) {
    std::vector<double> z(logits.begin(), logits.end());
    for (auto& v : z) v *= scale;
    return softmax<double>(z);
}

inline bool in_top_k(std::span<const float> logits, std::size_t cls, std::size_t k) {
    std::size_t better = 0;
    for (std::size_t c = 0; c < logits.size(); ++c)
        if (logits[c] > logits[cls] || (logits[c] == logits[cls] && c < cls)) ++better;
    return better < k;
}

/// Compares surrogate outputs against baseline outputs sample by sample.
inline FaithfulnessReport faithfulness(std::span<const ForwardResult> base, std::span<const ForwardResult> sur,
                                       std::span<const std::uint32_t> labels, double logit_scale = kDefaultLogitScale) {
    const std::size_t n = base.size();
    if (n == 0 || sur.size() != n || labels.size() != n) throw std::invalid_argument("faithfulness: sample count mismatch");
    const std::size_t C = base[0].logits.size(), D = base[0].embedding.size();
    FaithfulnessReport r;
    r.samples = n;
    std::size_t correct_b = 0, correct_s = 0, flips = 0, top5 = 0;
    double kl = 0.0, cos = 0.0;
    Matrix emb_b(n, D), emb_s(n, D);
    std::vector<double> class_b(C * C, 0.0), class_s(C * C, 0.0);
    std::vector<std::size_t> class_count(C, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto ab = argmax(base[i].logits), as = argmax(sur[i].logits);
        correct_b += ab == labels[i];
        correct_s += as == labels[i];
        flips += ab != as;
        top5 += in_top_k(sur[i].logits, ab, std::min<std::size_t>(5, C));
        kl += kl_divergence<double>(scaled_softmax(base[i].logits, logit_scale), scaled_softmax(sur[i].logits, logit_scale));
        const double nb = std::sqrt(squared_norm<float>(base[i].embedding));
        const double ns = std::sqrt(squared_norm<float>(sur[i].embedding));
        cos += (nb > 0.0 && ns > 0.0) ? dot<float>(base[i].embedding, sur[i].embedding) / (nb * ns) : 0.0;
        std::copy(base[i].embedding.begin(), base[i].embedding.end(), emb_b.row(i).begin());
        std::copy(sur[i].embedding.begin(), sur[i].embedding.end(), emb_s.row(i).begin());
        const std::size_t lab = labels[i];
        if (lab >= C) throw std::invalid_argument("faithfulness: label out of range");
        ++class_count[lab];
        for (std::size_t c = 0; c < C; ++c) {
            class_b[lab * C + c] += base[i].logits[c];
            class_s[lab * C + c] += sur[i].logits[c];
        }
    }
    const double N = static_cast<double>(n);
    r.acc_base = 100.0 * static_cast<double>(correct_b) / N;
    r.acc_surrogate = 100.0 * static_cast<double>(correct_s) / N;
    r.delta_acc = r.acc_surrogate - r.acc_base;
    r.flip_rate = 100.0 * static_cast<double>(flips) / N;
    r.top1_agreement = 100.0 - r.flip_rate;
    r.top5_agreement = 100.0 * static_cast<double>(top5) / N;
    r.kl_mean = kl / N;
    r.cls_cosine = cos / N;
    r.cka = n >= 2 ? linear_cka(emb_b, emb_s) : 1.0;
    std::vector<double> fb, fs;
    for (std::size_t lab = 0; lab < C; ++lab) {
        if (class_count[lab] == 0) continue;
        for (std::size_t c = 0; c < C; ++c) {
            fb.push_back(class_b[lab * C + c] / static_cast<double>(class_count[lab]));
            fs.push_back(class_s[lab * C + c] / static_cast<double>(class_count[lab]));
        }
    }
    r.spearman = spearman<double>(fb, fs);
    return r;
}

inline std::vector<ForwardResult> baseline_outputs(const VitParams& vit, std::span<const ToySample> samples) {
    std::vector<ForwardResult> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(forward(vit, s.tokens));
    return out;
}

inline std::vector<std::uint32_t> labels_of(std::span<const ToySample> samples) {
    std::vector<std::uint32_t> l;
    for (const auto& s : samples) l.push_back(s.label);
    return l;
}

template <MlpSurrogate S>
FaithfulnessReport evaluate_plan(const VitParams& vit, S& surrogate, const ReplacementPlan& plan,
                                 std::span<const ToySample> samples, std::span<const ForwardResult> baseline,
                                 double logit_scale = kDefaultLogitScale) {
    if (samples.empty()) throw std::invalid_argument("evaluate_plan: no labeled samples");
    std::vector<ForwardResult> sur;
    sur.reserve(samples.size());
    for (const auto& s : samples) sur.push_back(run_cascaded(vit, surrogate, plan, s.tokens));
    return faithfulness(baseline, sur, labels_of(samples), logit_scale);
}

inline FaithfulnessReport evaluate_plan(const VitParams& vit, const CltParams& clt, const ReplacementPlan& plan,
                                        std::span<const ToySample> samples, double logit_scale = kDefaultLogitScale) {
    check_compatible(vit, clt);
    CltSurrogate s(clt);
    const auto base = baseline_outputs(vit, samples);
    return evaluate_plan(vit, s, plan, samples, base, logit_scale);
}

struct SweepRow {
    ReplacementPlan plan;
    FaithfulnessReport report;
};

inline std::vector<SweepRow> sweep(const VitParams& vit, const CltParams& clt,
                                   std::span<const std::optional<LayerRange>> ranges, std::span<const TokenSet> routings,
                                   std::span<const ToySample> samples, double logit_scale = kDefaultLogitScale) {
    check_compatible(vit, clt);
    const auto base = baseline_outputs(vit, samples);
    CltSurrogate s(clt);
    std::vector<SweepRow> rows;
    for (const auto& range : ranges) {
        for (auto routing : routings) {
            ReplacementPlan plan{range, routing};
            rows.push_back({plan, evaluate_plan(vit, s, plan, samples, base, logit_scale)});
        }
    }
    return rows;
}

inline std::string sweep_csv(std::span<const SweepRow> rows) {
    std::string out =
        "range,routing,samples,acc_base,acc_surrogate,delta_acc,flip_rate,kl_mean,top1_agree,top5_agree,cls_cosine,cka,"
        "spearman\n";
    for (const auto& row : rows) {
        const auto& r = row.report;
        out += row.plan.range_label() + "," + std::string(to_string(row.plan.routing)) + "," + std::to_string(r.samples);
        for (double v : {r.acc_base, r.acc_surrogate, r.delta_acc, r.flip_rate, r.kl_mean, r.top1_agreement,
                         r.top5_agreement, r.cls_cosine, r.cka, r.spearman})
            out += "," + format_g(v);
        out += "\n";
    }
    return out;
}

}  // namespace vitclt
