#pragma once

#include <algorithm>
#include <charconv>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "vitclt/attribution.hpp"
#include "vitclt/clt.hpp"
#include "vitclt/replacement.hpp"
#include "vitclt/toy_vit.hpp"

namespace vitclt {

enum class AblationMode { FullClt, DropTop, KeepTop };

/// Layer-level ablation of the final-layer reconstruction, ranked per
/// instance by projection score over `ranking` tokens.
struct AblationSpec {
    AblationMode mode = AblationMode::FullClt;
    std::size_t n = 1;
    TokenSet ranking = TokenSet::All;

    std::string label() const {
        switch (mode) {
            case AblationMode::FullClt: return "full";
            case AblationMode::DropTop: return "drop" + std::to_string(n);
            case AblationMode::KeepTop: return "keep" + std::to_string(n);
        }
        return "unknown";
    }

    void validate(std::size_t layers) const {
        if (mode != AblationMode::FullClt && (n < 1 || n > layers))
            throw std::invalid_argument("ablation " + label() + ": n must be in [1, " + std::to_string(layers) + "]");
        if (ranking == TokenSet::Patches) throw std::invalid_argument("ablation ranking must be cls or all");
    }
};

/// Parses "full", "dropN", "keepN".
inline AblationSpec parse_ablation(std::string_view s, TokenSet ranking = TokenSet::All) {
    AblationSpec spec;
    spec.ranking = ranking;
    if (s == "full") return spec;
    std::string_view digits;
    if (s.starts_with("drop")) {
        spec.mode = AblationMode::DropTop;
        digits = s.substr(4);
    } else if (s.starts_with("keep")) {
        spec.mode = AblationMode::KeepTop;
        digits = s.substr(4);
    } else {
        throw std::invalid_argument("unknown ablation mode '" + std::string(s) + "' (expected full|dropN|keepN)");
    }
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), spec.n);
    if (ec != std::errc{} || ptr != digits.data() + digits.size() || digits.empty())
        throw std::invalid_argument("bad ablation count in '" + std::string(s) + "'");
    return spec;
}

struct RankedSource {
    std::size_t layer;
    double score;
};

/// Source layers sorted by descending C^proj at the final target; ties go
/// to the lower layer.
inline std::vector<RankedSource> rank_sources(const CltParams& p, const SparseCodes& codes, TokenSet tokens) {
    const std::size_t j = p.layers - 1;
    const auto s = sample_scores(p, codes, j, tokens);
    if (s.tokens_used == 0) throw std::domain_error("rank_sources: every token skipped, ranking undefined");
    std::vector<RankedSource> ranked;
    for (std::size_t i = 0; i <= j; ++i) ranked.push_back({i, s.scores[i]});
    std::stable_sort(ranked.begin(), ranked.end(), [](const RankedSource& a, const RankedSource& b) { return a.score > b.score; });
    return ranked;
}

inline std::vector<bool> retained_sources(const AblationSpec& spec, std::span<const RankedSource> ranked) {
    std::vector<bool> keep(ranked.size(), true);
    if (spec.mode == AblationMode::FullClt) return keep;
    for (std::size_t r = 0; r < ranked.size(); ++r) {
        const bool top = r < spec.n;
        keep[ranked[r].layer] = spec.mode == AblationMode::DropTop ? !top : top;
    }
    return keep;
}

/// y~_L: sum of retained c_{i->L}, accumulated in ascending source order
/// from zero (so FullClt reproduces reconstruct() exactly).
inline Matrix ablated_final_output(const CltParams& p, const SparseCodes& codes, const AblationSpec& spec) {
    spec.validate(p.layers);
    const std::size_t j = p.layers - 1;
    const auto c = contributions(p, codes, j);
    std::vector<bool> keep(p.layers, true);
    if (spec.mode != AblationMode::FullClt) keep = retained_sources(spec, rank_sources(p, codes, spec.ranking));
    Matrix acc(codes.at(j).rows(), p.hidden);
    for (std::size_t i = 0; i <= j; ++i) {
        if (!keep[i]) continue;
        for (std::size_t k = 0; k < acc.size(); ++k) acc.values()[k] += c.terms[i].values()[k];
    }
    return acc;
}

/// Forward pass with only the final MLP replaced by y~_L; every earlier layer
/// runs the teacher, so codes come from the unmodified stream.
inline ForwardResult forward_with_ablation(const VitParams& vit, const CltParams& clt, const AblationSpec& spec,
                                           const Matrix& input) {
    SparseCodes codes(clt.layers);
    MlpOverride hook = [&](std::size_t l, const Matrix& x, const Matrix&) -> std::optional<Matrix> {
        codes[l] = encode_layer(clt, l, x);
        if (l + 1 < clt.layers) return std::nullopt;
        return ablated_final_output(clt, codes, spec);
    };
    return forward_with_hooks(vit, input, hook);
}

struct AblationRow {
    AblationSpec spec;
    FaithfulnessReport report;
};

inline std::vector<AblationRow> ablation_report(const VitParams& vit, const CltParams& clt,
                                                std::span<const ToySample> samples, std::span<const AblationSpec> specs,
                                                double logit_scale = kDefaultLogitScale) {
    check_compatible(vit, clt);
    if (samples.empty()) throw std::invalid_argument("ablation_report: no labeled samples");
    for (const auto& s : specs) s.validate(clt.layers);
    const auto base = baseline_outputs(vit, samples);
    const auto labels = labels_of(samples);
    std::vector<AblationRow> rows;
    for (const auto& spec : specs) {
        std::vector<ForwardResult> out;
        out.reserve(samples.size());
        for (const auto& s : samples) out.push_back(forward_with_ablation(vit, clt, spec, s.tokens));
        rows.push_back({spec, faithfulness(base, out, labels, logit_scale)});
    }
    return rows;
}

/// Columns mirror an accuracy / KL ablation table; KL is the sample mean.
inline std::string ablation_csv(std::span<const AblationRow> rows) {
    std::string out = "mode,ranking,samples,acc_base,acc,delta_acc,kl_mean,flip_rate\n";
    for (const auto& row : rows) {
        const auto& r = row.report;
        out += row.spec.label() + "," + std::string(to_string(row.spec.ranking)) + "," + std::to_string(r.samples) + "," +
               format_g(r.acc_base) + "," + format_g(r.acc_surrogate) + "," + format_g(r.delta_acc) + "," +
               format_g(r.kl_mean) + "," + format_g(r.flip_rate) + "\n";
    }
    return out;
}

}  // namespace vitclt
