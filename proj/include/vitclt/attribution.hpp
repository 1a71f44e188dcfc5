#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "vitclt/clt.hpp"
#include "vitclt/numerics.hpp"
#include "vitclt/trainer.hpp"

namespace vitclt {

/// Which token rows an average (or a substitution) covers. Row 0 is CLS.
enum class TokenSet { Cls, Patches, All };

inline std::string_view to_string(TokenSet t) {
    switch (t) {
        case TokenSet::Cls: return "cls";
        case TokenSet::Patches: return "patches";
        case TokenSet::All: return "all";
    }
    return "unknown";
}

inline TokenSet parse_token_set(std::string_view s) {
    if (s == "cls") return TokenSet::Cls;
    if (s == "patches" || s == "patch") return TokenSet::Patches;
    if (s == "all") return TokenSet::All;
    throw std::invalid_argument("unknown token set '" + std::string(s) + "' (expected cls|patches|all)");
}

inline bool in_token_set(TokenSet t, std::size_t row) {
    switch (t) {
        case TokenSet::Cls: return row == 0;
        case TokenSet::Patches: return row != 0;
        case TokenSet::All: return true;
    }
    return false;
}

/// Decoded per-source terms c_{i->j} for one target, indexed by source
/// layer i = 0..j (terms the model never reads are zero).
template <typename T>
struct BasicContributionTensor {
    std::size_t target = 0;
    std::vector<BasicMatrix<T>> terms;

    /// Sum in the same order reconstruct() uses.
    BasicMatrix<T> sum() const {
        BasicMatrix<T> acc(terms.at(0).rows(), terms.at(0).cols());
        for (const auto& c : terms)
            for (std::size_t k = 0; k < acc.size(); ++k) acc.values()[k] += c.values()[k];
        return acc;
    }
};
using ContributionTensor = BasicContributionTensor<float>;

template <typename T>
BasicContributionTensor<T> contributions(const BasicCltParams<T>& p, const BasicSparseCodes<T>& codes, std::size_t j) {
    if (j >= p.layers) throw std::out_of_range("contributions: target layer out of range");
    BasicContributionTensor<T> c;
    c.target = j;
    for (std::size_t i = 0; i <= j; ++i) {
        if (i < p.first_source(j)) {
            c.terms.emplace_back(codes.at(j).rows(), p.hidden);
        } else {
            c.terms.push_back(contribution(p, codes.at(i), i, j));
        }
    }
    return c;
}

inline constexpr double kMinReconstructionNorm = 1e-8;

/// Projection ratios <c_i, y_hat> / ||y_hat||^2 for a single token row.
/// Returns false when the token is degenerate (||y_hat|| < 1e-8).
template <typename T>
bool token_projection(const BasicContributionTensor<T>& c, const BasicMatrix<T>& y_hat, std::size_t row,
                      std::span<double> out) {
    const double nn = squared_norm(y_hat.row(row));
    if (!(std::sqrt(nn) >= kMinReconstructionNorm)) return false;
    for (std::size_t i = 0; i < c.terms.size(); ++i) out[i] = dot(c.terms[i].row(row), y_hat.row(row)) / nn;
    return true;
}

struct SampleScores {
    std::vector<double> scores;  // per source i <= target
    std::size_t tokens_used = 0;
    std::size_t tokens_skipped = 0;
};

/// Per-sample projection scores for target j: per-token ratios averaged
/// over the tokens in `tokens`.
template <typename T>
SampleScores sample_scores(const BasicCltParams<T>& p, const BasicSparseCodes<T>& codes, std::size_t j, TokenSet tokens) {
    const auto c = contributions(p, codes, j);
    const auto y_hat = c.sum();
    SampleScores s;
    s.scores.assign(j + 1, 0.0);
    std::vector<double> ratio(j + 1);
    for (std::size_t r = 0; r < y_hat.rows(); ++r) {
        if (!in_token_set(tokens, r)) continue;
        if (!token_projection(c, y_hat, r, std::span<double>(ratio))) {
            ++s.tokens_skipped;
            continue;
        }
        ++s.tokens_used;
        for (std::size_t i = 0; i <= j; ++i) s.scores[i] += ratio[i];
    }
    if (s.tokens_used > 0)
        for (auto& v : s.scores) v /= static_cast<double>(s.tokens_used);
    return s;
}

/// Lower-triangular C^proj, stored row-major as scores[j * L + i].
struct AttributionMatrix {
    std::size_t layers = 0;
    TokenSet tokens = TokenSet::All;
    std::vector<double> scores;
    std::size_t samples = 0;
    std::size_t tokens_skipped = 0;

    double at(std::size_t i, std::size_t j) const { return i > j ? 0.0 : scores.at(j * layers + i); }

    double diagonal_mean() const {
        double s = 0.0;
        for (std::size_t j = 0; j < layers; ++j) s += at(j, j);
        return s / static_cast<double>(layers);
    }

    /// Mean over strictly lower entries (i < j); 0 for a single layer.
    double off_diagonal_mean() const {
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t j = 0; j < layers; ++j)
            for (std::size_t i = 0; i < j; ++i, ++n) s += at(i, j);
        return n ? s / static_cast<double>(n) : 0.0;
    }
};

/// Projection scores for one target j averaged over samples. Samples whose
/// selected tokens are all degenerate are skipped; if every sample is, the
/// score is undefined and this throws.
template <typename Source>
std::vector<double> projection_scores(const CltParams& p, const Source& src, std::span<const std::size_t> indices,
                                      std::size_t j, TokenSet tokens, std::size_t* skipped = nullptr) {
    std::vector<double> acc(j + 1, 0.0);
    std::size_t used = 0, skip = 0;
    for (auto idx : indices) {
        const auto& t = src.read(idx);
        const auto s = sample_scores(p, encode(p, t.x), j, tokens);
        skip += s.tokens_skipped;
        if (s.tokens_used == 0) continue;
        ++used;
        for (std::size_t i = 0; i <= j; ++i) acc[i] += s.scores[i];
    }
    if (skipped) *skipped = skip;
    if (used == 0) throw std::domain_error("projection_scores: every token skipped, score undefined");
    for (auto& v : acc) v /= static_cast<double>(used);
    return acc;
}

/// Full lower triangle over all targets, encoding each sample once.
template <typename Source>
AttributionMatrix attribution_heatmap(const CltParams& p, const Source& src, TokenSet tokens) {
    const std::size_t L = p.layers;
    AttributionMatrix a;
    a.layers = L;
    a.tokens = tokens;
    a.scores.assign(L * L, 0.0);
    std::vector<std::size_t> used(L, 0);
    for (std::size_t n = 0; n < src.size(); ++n) {
        const auto& t = src.read(n);
        const auto codes = encode(p, t.x);
        for (std::size_t j = 0; j < L; ++j) {
            const auto s = sample_scores(p, codes, j, tokens);
            a.tokens_skipped += s.tokens_skipped;
            if (s.tokens_used == 0) continue;
            ++used[j];
            for (std::size_t i = 0; i <= j; ++i) a.scores[j * L + i] += s.scores[i];
        }
    }
    for (std::size_t j = 0; j < L; ++j) {
        if (used[j] == 0)
            throw std::domain_error("attribution: every token skipped for target " + std::to_string(j));
        for (std::size_t i = 0; i <= j; ++i) a.scores[j * L + i] /= static_cast<double>(used[j]);
    }
    a.samples = src.size();
    return a;
}

/// Header row of source indices, one row per target; entries above the
/// diagonal are left empty.
inline std::string attribution_csv(const AttributionMatrix& a) {
    std::string out = "target";
    for (std::size_t i = 0; i < a.layers; ++i) out += ",src_" + std::to_string(i);
    out += "\n";
    for (std::size_t j = 0; j < a.layers; ++j) {
        out += std::to_string(j);
        for (std::size_t i = 0; i < a.layers; ++i) out += "," + (i <= j ? format_g(a.at(i, j)) : std::string());
        out += "\n";
    }
    return out;
}

}  // namespace vitclt
