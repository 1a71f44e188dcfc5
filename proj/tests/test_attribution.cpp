#include "support.hpp"

using namespace vitclt;
using vitclt::testing::random_clt;
using vitclt::testing::random_matrix;
using vitclt::testing::random_trace;

namespace {

SparsifierSpec spec(SparsifierKind kind, std::size_t k = 1) {
    SparsifierSpec s;
    s.kind = kind;
    s.k = k;
    return s;
}

/// Two layers, D = m = 2, identity encoders and sparsifier, so z_i = x_i
/// and each decoder row is the term a unit code contributes.
CltParams two_layer_hand_clt(const Matrix& w01, const Matrix& w11) {
    auto p = random_clt(2, 2, 2, spec(SparsifierKind::Identity), 1);
    for (std::size_t l = 0; l < 2; ++l) {
        p.encoders[l] = identity_matrix<float>(2);
        std::fill(p.biases[l].begin(), p.biases[l].end(), 0.0f);
    }
    p.decoder(0, 0) = identity_matrix<float>(2);
    p.decoder(0, 1) = w01;
    p.decoder(1, 1) = w11;
    return p;
}

SparseCodes unit_codes() {
    // z_0 = e_0, z_1 = e_1 on a single token
    return {Matrix(1, 2, std::vector<float>{1, 0}), Matrix(1, 2, std::vector<float>{0, 1})};
}

}  // namespace

TEST(Contributions, ZeroCodeGivesZeroTerm) {
    Rng rng(2);
    const auto p = random_clt(3, 4, 6, spec(SparsifierKind::Identity), 3);
    SparseCodes z{random_matrix(2, 6, rng), Matrix(2, 6), random_matrix(2, 6, rng)};
    const auto c = contributions(p, z, 2);
    ASSERT_EQ(c.terms.size(), 3u);
    EXPECT_EQ(c.terms[1], Matrix(2, 4));
    EXPECT_NE(c.terms[0], Matrix(2, 4));
}

TEST(Contributions, FirstTargetIsASingleTerm) {
    Rng rng(4);
    const auto p = random_clt(3, 4, 6, spec(SparsifierKind::ReluTopK, 2), 5);
    const auto z = encode(p, random_trace(3, 5, 4, rng).x);
    const auto c = contributions(p, z, 0);
    ASSERT_EQ(c.terms.size(), 1u);
    EXPECT_EQ(c.terms[0], reconstruct(p, z, 0));
}

TEST(Contributions, SumIsBitExactReconstruction) {
    Rng rng(6);
    for (auto kind : {SparsifierKind::JumpRelu, SparsifierKind::ReluTopK, SparsifierKind::AbsTopK,
                      SparsifierKind::Identity}) {
        for (bool diag : {false, true}) {
            const auto p = random_clt(3, 5, 10, spec(kind, 4), 7, diag);
            for (int trial = 0; trial < 10; ++trial) {
                const auto z = encode(p, random_trace(3, 6, 5, rng).x);
                for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(contributions(p, z, j).sum(), reconstruct(p, z, j));
            }
        }
    }
}

TEST(Contributions, TargetOutOfRangeThrows) {
    const auto p = random_clt(2, 2, 2, spec(SparsifierKind::Identity), 8);
    const SparseCodes z(2, Matrix(1, 2));
    EXPECT_THROW(contributions(p, z, 2), std::out_of_range);
}

TEST(ProjectionScores, PerTokenScoresSumToOne) {
    Rng rng(9);
    const auto p = random_clt(4, 6, 12, spec(SparsifierKind::AbsTopK, 5), 10);
    for (int trial = 0; trial < 20; ++trial) {
        const auto z = encode(p, random_trace(4, 5, 6, rng).x);
        for (std::size_t j = 0; j < 4; ++j) {
            const auto c = contributions(p, z, j);
            const auto y_hat = c.sum();
            std::vector<double> ratio(j + 1);
            for (std::size_t r = 0; r < 5; ++r) {
                ASSERT_TRUE(token_projection(c, y_hat, r, std::span<double>(ratio)));
                double s = 0.0;
                for (double v : ratio) s += v;
                EXPECT_NEAR(s, 1.0, 1e-5);
            }
        }
    }
}

TEST(ProjectionScores, SingleSourceScoresExactlyOne) {
    Rng rng(11);
    const auto p = random_clt(3, 4, 8, spec(SparsifierKind::Identity), 12);
    const auto z = encode(p, random_trace(3, 5, 4, rng).x);
    const auto s = sample_scores(p, z, 0, TokenSet::All);
    EXPECT_EQ(s.scores, std::vector<double>{1.0});
    EXPECT_EQ(s.tokens_used, 5u);
}

TEST(ProjectionScores, OrthogonalTermScoresZero) {
    // c_0 = [1, 0], c_1 = [-1, 1], y_hat = [0, 1]
    const auto p = two_layer_hand_clt(Matrix(2, 2, std::vector<float>{1, 0, 0, 0}),
                                      Matrix(2, 2, std::vector<float>{0, 0, -1, 1}));
    const auto s = sample_scores(p, unit_codes(), 1, TokenSet::All);
    EXPECT_EQ(s.scores, (std::vector<double>{0.0, 1.0}));
}

TEST(ProjectionScores, ParallelTermScoresItsScale) {
    // c_0 = 0.25 y_hat, and a signed case c_0 = -0.5 y_hat
    auto p = two_layer_hand_clt(Matrix(2, 2, std::vector<float>{0.5f, 1, 0, 0}),
                                Matrix(2, 2, std::vector<float>{0, 0, 1.5f, 3}));
    EXPECT_EQ(sample_scores(p, unit_codes(), 1, TokenSet::All).scores, (std::vector<double>{0.25, 0.75}));
    p = two_layer_hand_clt(Matrix(2, 2, std::vector<float>{-1, -2, 0, 0}), Matrix(2, 2, std::vector<float>{0, 0, 3, 6}));
    EXPECT_EQ(sample_scores(p, unit_codes(), 1, TokenSet::All).scores, (std::vector<double>{-0.5, 1.5}));
}

TEST(ProjectionScores, InvariantToJointRescaling) {
    Rng rng(13);
    const auto p = random_clt(3, 4, 8, spec(SparsifierKind::Identity), 14);
    auto scaled = p;
    for (auto& d : scaled.decoders)
        for (auto& v : d.values()) v *= 8.0f;  // power of two keeps the ratios exact
    const auto z = encode(p, random_trace(3, 5, 4, rng).x);
    for (std::size_t j = 0; j < 3; ++j) {
        const auto a = sample_scores(p, z, j, TokenSet::All).scores;
        const auto b = sample_scores(scaled, z, j, TokenSet::All).scores;
        for (std::size_t i = 0; i <= j; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
    }
}

TEST(ProjectionScores, TokenSetSelectsRows) {
    // token 0 (CLS) reads only source 0, the patch token only source 1
    const auto p = two_layer_hand_clt(Matrix(2, 2, std::vector<float>{1, 0, 0, 0}),
                                      Matrix(2, 2, std::vector<float>{0, 0, 0, 1}));
    const SparseCodes z{Matrix(2, 2, std::vector<float>{1, 0, 0, 0}), Matrix(2, 2, std::vector<float>{0, 0, 0, 1})};
    EXPECT_EQ(sample_scores(p, z, 1, TokenSet::Cls).scores, (std::vector<double>{1.0, 0.0}));
    EXPECT_EQ(sample_scores(p, z, 1, TokenSet::Patches).scores, (std::vector<double>{0.0, 1.0}));
    EXPECT_EQ(sample_scores(p, z, 1, TokenSet::All).scores, (std::vector<double>{0.5, 0.5}));
}

TEST(ProjectionScores, DegenerateTokensAreSkippedAndCounted) {
    auto p = random_clt(2, 3, 4, spec(SparsifierKind::Identity), 15);
    for (auto& b : p.biases) std::fill(b.begin(), b.end(), 0.0f);
    Rng rng(16);
    auto t = random_trace(2, 4, 3, rng);
    for (auto& x : t.x)
        for (std::size_t d = 0; d < 3; ++d) x(2, d) = 0.0f;
    const auto s = sample_scores(p, encode(p, t.x), 1, TokenSet::All);
    EXPECT_EQ(s.tokens_used, 3u);
    EXPECT_EQ(s.tokens_skipped, 1u);
    EXPECT_NEAR(s.scores[0] + s.scores[1], 1.0, 1e-5);
}

TEST(ProjectionScores, AllTokensDegenerateIsAnError) {
    auto p = random_clt(2, 3, 4, spec(SparsifierKind::Identity), 17);
    for (auto& b : p.biases) std::fill(b.begin(), b.end(), 0.0f);
    ActivationTrace t;
    t.x.assign(2, Matrix(3, 3));
    t.y.assign(2, Matrix(3, 3));
    const InMemoryTraces store(std::vector<ActivationTrace>{t, t});
    const std::vector<std::size_t> idx{0, 1};
    std::size_t skipped = 0;
    EXPECT_THROW(projection_scores(p, store, idx, 1, TokenSet::All, &skipped), std::domain_error);
    EXPECT_THROW(attribution_heatmap(p, store, TokenSet::Patches), std::domain_error);
}

TEST(ProjectionScores, AveragesTokensThenSamples) {
    Rng rng(18);
    const auto p = random_clt(3, 4, 8, spec(SparsifierKind::ReluTopK, 3), 19);
    InMemoryTraces store;
    for (int n = 0; n < 4; ++n) store.push_back(random_trace(3, 5, 4, rng));
    const std::vector<std::size_t> idx{0, 1, 2, 3};
    const auto row = projection_scores(p, store, idx, 2, TokenSet::Patches);
    std::vector<double> expect(3, 0.0);
    for (auto n : idx) {
        const auto s = sample_scores(p, encode(p, store.read(n).x), 2, TokenSet::Patches).scores;
        for (std::size_t i = 0; i < 3; ++i) expect[i] += s[i] / 4.0;
    }
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(row[i], expect[i], 1e-12);
    const auto heat = attribution_heatmap(p, store, TokenSet::Patches);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(heat.at(i, 2), row[i], 1e-12);
}

TEST(Heatmap, DiagonalOnlyModelIsTheIdentity) {
    Rng rng(20);
    const auto p = random_clt(4, 5, 10, spec(SparsifierKind::JumpRelu), 21, true);
    InMemoryTraces store;
    for (int n = 0; n < 6; ++n) store.push_back(random_trace(4, 5, 5, rng));
    for (auto tokens : {TokenSet::Cls, TokenSet::Patches, TokenSet::All}) {
        const auto a = attribution_heatmap(p, store, tokens);
        for (std::size_t j = 0; j < 4; ++j)
            for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(a.at(i, j), i == j ? 1.0 : 0.0) << i << "," << j;
        EXPECT_EQ(a.diagonal_mean(), 1.0);
        EXPECT_EQ(a.off_diagonal_mean(), 0.0);
    }
}

TEST(Heatmap, CsvLayout) {
    Rng rng(22);
    const auto p = random_clt(2, 3, 4, spec(SparsifierKind::Identity), 23, true);
    InMemoryTraces store;
    store.push_back(random_trace(2, 3, 3, rng));
    EXPECT_EQ(attribution_csv(attribution_heatmap(p, store, TokenSet::All)), "target,src_0,src_1\n0,1,\n1,0,1\n");
}

TEST(TokenSet, ParseRoundTrip) {
    for (auto t : {TokenSet::Cls, TokenSet::Patches, TokenSet::All}) EXPECT_EQ(parse_token_set(to_string(t)), t);
    EXPECT_THROW(parse_token_set("tokens"), std::invalid_argument);
}
