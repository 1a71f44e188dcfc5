#include <filesystem>
#include <fstream>

#include "support.hpp"

using namespace vitclt;
using vitclt::testing::file_bytes;
using vitclt::testing::random_clt;
using vitclt::testing::random_matrix;
using vitclt::testing::random_trace;
using vitclt::testing::temp_path;

namespace {

SparsifierSpec spec(SparsifierKind kind, std::size_t k = 1) {
    SparsifierSpec s;
    s.kind = kind;
    s.k = k;
    return s;
}

const SparsifierKind kAllKinds[] = {SparsifierKind::JumpRelu, SparsifierKind::ReluTopK, SparsifierKind::AbsTopK,
                                    SparsifierKind::Identity};

}  // namespace

TEST(CltEncode, ZeroInputZeroBiasGivesZeroCodes) {
    for (auto kind : kAllKinds) {
        auto p = random_clt(2, 4, 6, spec(kind, 3), 1);
        for (auto& b : p.biases) std::fill(b.begin(), b.end(), 0.0f);
        const auto z = encode_layer(p, 1, Matrix(3, 4));
        EXPECT_EQ(z, Matrix(3, 6)) << to_string(kind);
    }
}

TEST(CltEncode, IdentityEncoderReproducesInput) {
    auto p = random_clt(1, 5, 5, spec(SparsifierKind::Identity), 2);
    p.encoders[0] = identity_matrix<float>(5);
    std::fill(p.biases[0].begin(), p.biases[0].end(), 0.0f);
    Rng rng(3);
    const auto x = random_matrix(4, 5, rng);
    EXPECT_EQ(encode_layer(p, 0, x), x);
}

TEST(CltEncode, HandEnumeratedReluTopK) {
    auto p = random_clt(1, 2, 3, spec(SparsifierKind::ReluTopK, 1), 4);
    p.encoders[0] = Matrix(2, 3, std::vector<float>{1, 0, -1, 0, 1, 1});
    p.biases[0] = {0.5f, 0.0f, 0.0f};
    const Matrix x(1, 2, std::vector<float>{1, 2});
    // u = [1.5, 2, 1]
    EXPECT_EQ(encode_layer(p, 0, x), Matrix(1, 3, std::vector<float>{0, 2, 0}));
}

TEST(CltEncode, WidthMismatchThrows) {
    const auto p = random_clt(1, 3, 4, spec(SparsifierKind::Identity), 5);
    EXPECT_THROW(encode_layer(p, 0, Matrix(2, 4)), std::invalid_argument);
}

TEST(CltReconstruct, ZeroCodesGiveZero) {
    const auto p = random_clt(3, 4, 6, spec(SparsifierKind::Identity), 6);
    const SparseCodes z(3, Matrix(2, 6));
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(reconstruct(p, z, j), Matrix(2, 4));
}

TEST(CltReconstruct, FirstTargetReadsOnlyItsOwnSource) {
    Rng rng(7);
    for (bool diag : {false, true}) {
        const auto p = random_clt(3, 4, 6, spec(SparsifierKind::Identity), 8, diag);
        SparseCodes z;
        for (int l = 0; l < 3; ++l) z.push_back(random_matrix(2, 6, rng));
        EXPECT_EQ(reconstruct(p, z, 0), matmul(z[0], p.decoder(0, 0)));
    }
}

TEST(CltReconstruct, FullMinusDiagonalIsTheCrossLayerSum) {
    Rng rng(9);
    auto full = random_clt<double>(4, 3, 5, spec(SparsifierKind::Identity), 10);
    auto diag = full;
    diag.diagonal_only = true;
    BasicSparseCodes<double> z;
    for (int l = 0; l < 4; ++l) z.push_back(random_matrix<double>(3, 5, rng));
    for (std::size_t j = 0; j < 4; ++j) {
        const auto a = reconstruct(full, z, j), b = reconstruct(diag, z, j);
        BasicMatrix<double> cross(3, 3);
        for (std::size_t i = 0; i < j; ++i) {
            const auto c = matmul(z[i], full.decoder(i, j));
            for (std::size_t k = 0; k < cross.size(); ++k) cross.values()[k] += c.values()[k];
        }
        for (std::size_t k = 0; k < cross.size(); ++k) EXPECT_NEAR(a.values()[k] - b.values()[k], cross.values()[k], 1e-12);
    }
}

TEST(CltReconstruct, DiagonalOnlyEqualsZeroedOffDiagonalDecoders) {
    Rng rng(11);
    auto full = random_clt(4, 6, 12, spec(SparsifierKind::ReluTopK, 4), 12);
    auto diag = full;
    diag.diagonal_only = true;
    auto zeroed = full;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = i + 1; j < 4; ++j) zeroed.decoder(i, j).fill(0.0f);
    for (int trial = 0; trial < 20; ++trial) {
        const auto t = random_trace(4, 5, 6, rng);
        const auto zd = encode(diag, t.x), zz = encode(zeroed, t.x);
        for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(reconstruct(diag, zd, j), reconstruct(zeroed, zz, j));
    }
}

TEST(CltReconstruct, MatchesDenseMatmulSum) {
    Rng rng(13);
    const auto p = random_clt(3, 4, 8, spec(SparsifierKind::AbsTopK, 3), 14);
    const auto t = random_trace(3, 5, 4, rng);
    const auto z = encode(p, t.x);
    for (std::size_t j = 0; j < 3; ++j) {
        Matrix dense(5, 4);
        for (std::size_t i = 0; i <= j; ++i) {
            const auto c = matmul(z[i], p.decoder(i, j));
            for (std::size_t k = 0; k < dense.size(); ++k) dense.values()[k] += c.values()[k];
        }
        EXPECT_LT(vitclt::testing::max_abs_diff(dense, reconstruct(p, z, j)), 1e-5);
    }
}

TEST(CltInit, DeterministicAndTriangular) {
    CltConfig cfg;
    cfg.expansion = 4;
    cfg.sparsifier = spec(SparsifierKind::ReluTopK, 8);
    cfg.seed = 5;
    const auto a = init_clt(5, 6, cfg), b = init_clt(5, 6, cfg);
    EXPECT_TRUE(a == b);
    EXPECT_EQ(a.decoders.size(), 15u);
    EXPECT_EQ(a.features, 24u);
    cfg.seed = 6;
    EXPECT_FALSE(a == init_clt(5, 6, cfg));
    for (const auto& t : a.thresholds)
        for (float v : t) EXPECT_FLOAT_EQ(v, 0.03f);
    for (const auto& b0 : a.biases)
        for (float v : b0) EXPECT_EQ(v, 0.0f);
}

TEST(CltInit, DiagonalOnlyStartsWithZeroCrossDecoders) {
    CltConfig cfg;
    cfg.expansion = 2;
    cfg.sparsifier = spec(SparsifierKind::Identity);
    cfg.diagonal_only = true;
    const auto p = init_clt(3, 4, cfg);
    EXPECT_EQ(p.decoder(0, 2), Matrix(8, 4));
    EXPECT_NE(p.decoder(1, 1), Matrix(8, 4));
}

TEST(CltInit, DecoderIndexCoversTriangleOnce) {
    CltConfig cfg;
    cfg.expansion = 1;
    cfg.sparsifier = spec(SparsifierKind::Identity);
    const auto p = init_clt(6, 2, cfg);
    std::vector<int> seen(21, 0);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = i; j < 6; ++j) ++seen.at(p.decoder_index(i, j));
    for (int s : seen) EXPECT_EQ(s, 1);
    EXPECT_THROW(p.decoder_index(3, 2), std::out_of_range);
}

TEST(CltInit, InitialReconstructionIsSmall) {
    // desk-sized dims, random unit-variance traces. With decoder scale 1/sqrt(mL) each
    // output coordinate of target j has variance (j+1) |z|^2 / (mL), so the aggregate
    // ratio squared is (L+1)/2 * |z|^2 / (mL).
    Rng rng(15);
    std::vector<ActivationTrace> traces;
    for (int n = 0; n < 8; ++n) traces.push_back(random_trace(6, 10, 32, rng));
    for (auto kind : {SparsifierKind::JumpRelu, SparsifierKind::ReluTopK, SparsifierKind::AbsTopK}) {
        CltConfig cfg;
        cfg.sparsifier = spec(kind, 64);
        cfg.seed = 16;
        const auto p = init_clt(6, 32, cfg);
        double yh = 0.0, yy = 0.0, zz = 0.0;
        for (const auto& t : traces) {
            const auto z = encode(p, t.x);
            for (std::size_t j = 0; j < 6; ++j) {
                zz += squared_norm<float>(z[j].values());
                yh += squared_norm<float>(reconstruct(p, z, j).values());
                yy += squared_norm<float>(t.y[j].values());
            }
        }
        const double ratio = std::sqrt(yh / yy);
        const double z_per_token = zz / (8.0 * 6.0 * 10.0);
        const double predicted = std::sqrt(3.5 * z_per_token / (512.0 * 6.0));
        EXPECT_NEAR(ratio, predicted, 0.05 * predicted) << to_string(kind);
        EXPECT_LT(ratio, 1.0) << to_string(kind);
        if (kind == SparsifierKind::ReluTopK) {
            EXPECT_LT(ratio, 0.5);
        }
    }
}

TEST(CltCheckpoint, RoundTripIsExact) {
    CltConfig cfg;
    cfg.expansion = 3;
    cfg.sparsifier = spec(SparsifierKind::JumpRelu);
    cfg.sparsifier.bandwidth = 2e-3;
    cfg.seed = 17;
    auto p = init_clt(3, 4, cfg);
    p.thresholds[1][2] = 0.125f;
    const auto path = temp_path("rt.ckpt");
    save_checkpoint(path, p);
    EXPECT_EQ(std::filesystem::file_size(path), checkpoint_bytes(3, 4, 12));
    EXPECT_TRUE(load_checkpoint(path) == p);
    EXPECT_EQ(std::string(file_bytes(path).data(), 5), "CLTC1");
}

TEST(CltCheckpoint, DiagonalFlagAndTopKSurvive) {
    auto p = random_clt(2, 3, 6, spec(SparsifierKind::AbsTopK, 2), 18, true);
    const auto path = temp_path("diag.ckpt");
    save_checkpoint(path, p);
    const auto q = load_checkpoint(path);
    EXPECT_TRUE(q.diagonal_only);
    EXPECT_EQ(q.sparsifier.kind, SparsifierKind::AbsTopK);
    EXPECT_EQ(q.sparsifier.k, 2u);
    EXPECT_TRUE(q == p);
}

TEST(CltCheckpoint, CorruptFilesAreRejected) {
    const auto p = random_clt(2, 3, 4, spec(SparsifierKind::Identity), 19);
    const auto path = temp_path("bad.ckpt");
    save_checkpoint(path, p);
    auto bytes = file_bytes(path);
    auto write = [&](const std::vector<char>& b) {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f.write(b.data(), static_cast<std::streamsize>(b.size()));
    };
    auto truncated = bytes;
    truncated.resize(bytes.size() - 4);
    write(truncated);
    EXPECT_THROW(load_checkpoint(path), std::runtime_error);
    auto magic = bytes;
    magic[0] = 'X';
    write(magic);
    EXPECT_THROW(load_checkpoint(path), std::runtime_error);
    write(std::vector<char>(bytes.begin(), bytes.begin() + 10));
    EXPECT_THROW(load_checkpoint(path), std::runtime_error);
    EXPECT_THROW(load_checkpoint(temp_path("missing.ckpt")), std::runtime_error);
}
