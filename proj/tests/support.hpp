#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <unistd.h>

#include <gtest/gtest.h>

#include "vitclt/vitclt.hpp"

namespace vitclt::testing {

template <typename T = float>
BasicMatrix<T> random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
    BasicMatrix<T> m(rows, cols);
    rng.fill_normal(m.values(), scale);
    return m;
}

inline std::vector<float> random_vector(std::size_t n, Rng& rng, double scale = 1.0) {
    std::vector<float> v(n);
    rng.fill_normal(std::span<float>(v), scale);
    return v;
}

/// A CLT with every tensor randomized, including biases and thresholds.
template <typename T = float>
BasicCltParams<T> random_clt(std::size_t L, std::size_t D, std::size_t m, SparsifierSpec spec, std::uint64_t seed,
                             bool diagonal_only = false) {
    CltConfig cfg;
    cfg.expansion = 1;
    cfg.sparsifier.kind = SparsifierKind::Identity;
    cfg.diagonal_only = diagonal_only;
    cfg.seed = seed;
    auto p = init_clt<T>(L, D, cfg);
    // re-shape to m features
    Rng rng(mix_seed(seed, 77));
    p.features = m;
    p.sparsifier = spec;
    p.sparsifier.bandwidth = static_cast<float>(spec.bandwidth);
    p.encoders.clear();
    p.biases.clear();
    p.thresholds.clear();
    for (std::size_t l = 0; l < L; ++l) {
        p.encoders.push_back(random_matrix<T>(D, m, rng, 1.0 / std::sqrt(static_cast<double>(D))));
        std::vector<T> b(m), t(m);
        for (auto& v : b) v = static_cast<T>(0.1 * rng.normal());
        for (auto& v : t) v = static_cast<T>(0.05 + 0.05 * rng.uniform());
        p.biases.push_back(b);
        p.thresholds.push_back(t);
    }
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = i; j < L; ++j) {
            auto& d = p.decoder(i, j);
            d = BasicMatrix<T>(m, D);
            if (!diagonal_only || i == j) rng.fill_normal(d.values(), 1.0 / std::sqrt(static_cast<double>(m)));
        }
    p.sparsifier.validate(m);
    p.check_shapes();
    return p;
}

inline ActivationTrace random_trace(std::size_t L, std::size_t T, std::size_t D, Rng& rng,
                                    std::optional<std::uint32_t> label = std::nullopt) {
    ActivationTrace t;
    for (std::size_t l = 0; l < L; ++l) t.x.push_back(random_matrix(T, D, rng));
    for (std::size_t l = 0; l < L; ++l) t.y.push_back(random_matrix(T, D, rng));
    t.label = label;
    return t;
}

inline VitConfig small_vit_config(std::size_t L = 3, std::size_t T = 5, std::size_t D = 8, std::uint64_t seed = 11) {
    VitConfig c;
    c.layers = L;
    c.tokens = T;
    c.hidden = D;
    c.heads = 2;
    c.classes = 4;
    c.seed = seed;
    c.calibration_per_class = 8;
    return c;
}

/// Captured teacher activations for samples 0..n-1.
inline InMemoryTraces capture_traces(const VitParams& vit, std::size_t n) {
    InMemoryTraces traces;
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = toy_sample(vit, i);
        auto cap = forward_capture(vit, s.tokens);
        cap.trace.label = s.label;
        traces.push_back(std::move(cap.trace));
    }
    return traces;
}

inline std::vector<ToySample> toy_samples(const VitParams& vit, std::size_t n, std::uint64_t first = 0) {
    std::vector<ToySample> s;
    for (std::size_t i = 0; i < n; ++i) s.push_back(toy_sample(vit, first + i));
    return s;
}

/// Fresh path under the test temp directory.
inline std::filesystem::path temp_path(const std::string& name) {
    static std::atomic<int> counter{0};
    const auto dir = std::filesystem::path(::testing::TempDir()) / "vitclt_tests";
    std::filesystem::create_directories(dir);
    return dir / (std::to_string(::getpid()) + "_" + std::to_string(counter++) + "_" + name);
}

inline std::vector<char> file_bytes(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

template <typename T>
double max_abs_diff(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.values()[i]) - static_cast<double>(b.values()[i])));
    return m;
}

}  // namespace vitclt::testing
