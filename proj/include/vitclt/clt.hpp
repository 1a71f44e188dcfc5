#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vitclt/io.hpp"
#include "vitclt/numerics.hpp"
#include "vitclt/rng.hpp"
#include "vitclt/sparsifiers.hpp"

namespace vitclt {

/// Cross-layer transcoder parameters. Layers are 0-based; decoder (i, j)
/// maps codes of source layer i to the MLP output of target layer j >= i.
template <typename T>
struct BasicCltParams {
    std::size_t layers = 0;
    std::size_t hidden = 0;
    std::size_t features = 0;
    SparsifierSpec sparsifier;
    bool diagonal_only = false;  // per-layer transcoder: only i == j decoders are read

    std::vector<BasicMatrix<T>> encoders;  // hidden x features, per layer
    std::vector<std::vector<T>> biases;    // features, per layer
    std::vector<std::vector<T>> thresholds;
    std::vector<BasicMatrix<T>> decoders;  // features x hidden, triangle (i outer, j inner)

    static std::size_t triangle_size(std::size_t L) { return L * (L + 1) / 2; }

    std::size_t decoder_index(std::size_t i, std::size_t j) const {
        if (i > j || j >= layers) throw std::out_of_range("decoder (" + std::to_string(i) + "," + std::to_string(j) + ")");
        return i * (2 * layers - i + 1) / 2 + (j - i);
    }

    BasicMatrix<T>& decoder(std::size_t i, std::size_t j) { return decoders[decoder_index(i, j)]; }
    const BasicMatrix<T>& decoder(std::size_t i, std::size_t j) const { return decoders[decoder_index(i, j)]; }

    /// Source layers read when reconstructing target j, in summation order.
    std::size_t first_source(std::size_t j) const { return diagonal_only ? j : 0; }

    template <typename U>
    BasicCltParams<U> cast() const {
        BasicCltParams<U> o;
        o.layers = layers;
        o.hidden = hidden;
        o.features = features;
        o.sparsifier = sparsifier;
        o.diagonal_only = diagonal_only;
        for (const auto& e : encoders) o.encoders.push_back(e.template cast<U>());
        for (const auto& b : biases) o.biases.emplace_back(b.begin(), b.end());
        for (const auto& t : thresholds) o.thresholds.emplace_back(t.begin(), t.end());
        for (const auto& d : decoders) o.decoders.push_back(d.template cast<U>());
        return o;
    }

    void check_shapes() const {
        if (encoders.size() != layers || biases.size() != layers || thresholds.size() != layers ||
            decoders.size() != triangle_size(layers))
            throw std::invalid_argument("clt params: tensor count mismatch");
        for (std::size_t l = 0; l < layers; ++l) {
            if (encoders[l].rows() != hidden || encoders[l].cols() != features || biases[l].size() != features ||
                thresholds[l].size() != features)
                throw std::invalid_argument("clt params: encoder shape mismatch at layer " + std::to_string(l));
        }
        for (const auto& d : decoders)
            if (d.rows() != features || d.cols() != hidden) throw std::invalid_argument("clt params: decoder shape mismatch");
    }

    bool operator==(const BasicCltParams&) const = default;
};

using CltParams = BasicCltParams<float>;

/// Per-layer codes z[l], each tokens x features.
template <typename T>
using BasicSparseCodes = std::vector<BasicMatrix<T>>;
using SparseCodes = BasicSparseCodes<float>;

struct CltConfig {
    std::size_t expansion = 16;
    SparsifierSpec sparsifier;
    bool diagonal_only = false;
    double threshold_init = 0.03;
    std::uint64_t seed = 0;
};

/// Encoders ~ N(0, 1/D); decoders ~ N(0, 1/(m L)) so the initial
/// reconstruction is small; biases zero; thresholds at threshold_init.
template <typename T = float>
BasicCltParams<T> init_clt(std::size_t layers, std::size_t hidden, const CltConfig& cfg) {
    if (layers < 1 || hidden < 1 || cfg.expansion < 1) throw std::invalid_argument("init_clt: invalid dims");
    BasicCltParams<T> p;
    p.layers = layers;
    p.hidden = hidden;
    p.features = cfg.expansion * hidden;
    p.sparsifier = cfg.sparsifier;
    p.sparsifier.bandwidth = static_cast<float>(cfg.sparsifier.bandwidth);  // checkpoint stores f32
    p.diagonal_only = cfg.diagonal_only;
    p.sparsifier.validate(p.features);
    Rng rng(mix_seed(cfg.seed, 0xc17));
    const double enc_scale = 1.0 / std::sqrt(static_cast<double>(hidden));
    const double dec_scale = 1.0 / std::sqrt(static_cast<double>(p.features * layers));
    for (std::size_t l = 0; l < layers; ++l) {
        BasicMatrix<T> e(hidden, p.features);
        rng.fill_normal(e.values(), enc_scale);
        p.encoders.push_back(std::move(e));
        p.biases.emplace_back(p.features, T{0});
        p.thresholds.emplace_back(p.features, static_cast<T>(cfg.threshold_init));
    }
    for (std::size_t i = 0; i < layers; ++i) {
        for (std::size_t j = i; j < layers; ++j) {
            BasicMatrix<T> d(p.features, hidden);
            if (!cfg.diagonal_only || i == j) rng.fill_normal(d.values(), dec_scale);
            p.decoders.push_back(std::move(d));
        }
    }
    return p;
}

/// Pre-activations u = x E + b for one layer.
template <typename T>
BasicMatrix<T> pre_activations(const BasicCltParams<T>& p, std::size_t layer, const BasicMatrix<T>& x) {
    if (x.cols() != p.hidden) throw std::invalid_argument("encode: input width does not match clt hidden dim");
    BasicMatrix<T> u = matmul(x, p.encoders.at(layer));
    const auto& b = p.biases[layer];
    for (std::size_t r = 0; r < u.rows(); ++r) {
        auto row = u.row(r);
        for (std::size_t f = 0; f < row.size(); ++f) row[f] += b[f];
    }
    return u;
}

/// z = phi(x E + b) for one layer. Optionally returns u and the kept mask.
template <typename T>
BasicMatrix<T> encode_layer(const BasicCltParams<T>& p, std::size_t layer, const BasicMatrix<T>& x,
                            BasicMatrix<T>* pre = nullptr, std::vector<std::uint8_t>* keep = nullptr) {
    BasicMatrix<T> u = pre_activations(p, layer, x);
    BasicMatrix<T> z(u.rows(), u.cols());
    std::vector<std::uint8_t> local;
    auto& mask = keep ? *keep : local;
    mask.assign(u.size(), 0);
    std::vector<std::uint32_t> scratch;
    const std::span<const T> tau = p.thresholds[layer];
    for (std::size_t r = 0; r < u.rows(); ++r) {
        std::span<std::uint8_t> k(mask.data() + r * u.cols(), u.cols());
        select_support<T>(p.sparsifier, u.row(r), tau, k, scratch);
        auto zr = z.row(r);
        auto ur = u.row(r);
        for (std::size_t f = 0; f < zr.size(); ++f) zr[f] = k[f] ? ur[f] : T{0};
    }
    if (pre) *pre = std::move(u);
    return z;
}

template <typename T>
BasicSparseCodes<T> encode(const BasicCltParams<T>& p, const std::vector<BasicMatrix<T>>& x) {
    if (x.size() != p.layers) throw std::invalid_argument("encode: layer count mismatch");
    BasicSparseCodes<T> z;
    z.reserve(p.layers);
    for (std::size_t l = 0; l < p.layers; ++l) z.push_back(encode_layer(p, l, x[l]));
    return z;
}

/// c_{i->j} = z_i W_dec^{i->j}. Rows accumulate over nonzero features in
/// ascending order.
template <typename T>
BasicMatrix<T> contribution(const BasicCltParams<T>& p, const BasicMatrix<T>& codes_i, std::size_t i, std::size_t j) {
    const auto& w = p.decoder(i, j);
    if (codes_i.cols() != p.features) throw std::invalid_argument("contribution: code width mismatch");
    BasicMatrix<T> c(codes_i.rows(), p.hidden);
    for (std::size_t r = 0; r < codes_i.rows(); ++r) {
        auto out = c.row(r);
        auto zr = codes_i.row(r);
        for (std::size_t f = 0; f < zr.size(); ++f) {
            const T zf = zr[f];
            if (zf == T{0}) continue;
            auto wr = w.row(f);
            for (std::size_t d = 0; d < out.size(); ++d) out[d] += zf * wr[d];
        }
    }
    return c;
}

/// y_hat_j = sum over sources i <= j of c_{i->j}, added in ascending i
/// starting from zero. With diagonal_only only i == j is read.
template <typename T>
BasicMatrix<T> reconstruct(const BasicCltParams<T>& p, const BasicSparseCodes<T>& codes, std::size_t j) {
    if (j >= p.layers) throw std::out_of_range("reconstruct: target layer out of range");
    if (codes.size() <= j) throw std::invalid_argument("reconstruct: missing codes for target layer");
    BasicMatrix<T> acc(codes[j].rows(), p.hidden);
    for (std::size_t i = p.first_source(j); i <= j; ++i) {
        const auto c = contribution(p, codes[i], i, j);
        for (std::size_t k = 0; k < acc.size(); ++k) acc.values()[k] += c.values()[k];
    }
    return acc;
}

// CLTC1 checkpoint (little-endian):
//   magic "CLTC1\0\0\0", version u32, L u32, D u32, m u32, sparsifier kind u32,
//   k u32, bandwidth f32, diagonal_only u32, then f32 payload: encoders
//   (L x D x m), biases (L x m), thresholds (L x m), decoder triangle
//   (i outer, j inner; each m x D).
inline constexpr std::array<char, 8> kCheckpointMagic = {'C', 'L', 'T', 'C', '1', '\0', '\0', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointHeaderBytes = 40;

inline std::size_t checkpoint_bytes(std::size_t L, std::size_t D, std::size_t m) {
    return kCheckpointHeaderBytes +
           sizeof(float) * (L * D * m + 2 * L * m + CltParams::triangle_size(L) * m * D);
}

inline void save_checkpoint(const std::filesystem::path& path, const CltParams& p) {
    p.check_shapes();
    std::vector<unsigned char> head(kCheckpointMagic.begin(), kCheckpointMagic.end());
    io::put<std::uint32_t>(head, kCheckpointVersion);
    io::put<std::uint32_t>(head, static_cast<std::uint32_t>(p.layers));
    io::put<std::uint32_t>(head, static_cast<std::uint32_t>(p.hidden));
    io::put<std::uint32_t>(head, static_cast<std::uint32_t>(p.features));
    io::put<std::uint32_t>(head, static_cast<std::uint32_t>(p.sparsifier.kind));
    io::put<std::uint32_t>(head, static_cast<std::uint32_t>(p.sparsifier.k));
    io::put_f32(head, static_cast<float>(p.sparsifier.bandwidth));
    io::put<std::uint32_t>(head, p.diagonal_only ? 1u : 0u);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(head.data()), static_cast<std::streamsize>(head.size()));
    for (const auto& e : p.encoders) io::write_f32s(out, e.values());
    for (const auto& b : p.biases) io::write_f32s(out, b);
    for (const auto& t : p.thresholds) io::write_f32s(out, t);
    for (const auto& d : p.decoders) io::write_f32s(out, d.values());
    if (!out) throw std::runtime_error("I/O failure writing checkpoint " + path.string());
}

inline CltParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    std::vector<unsigned char> head(kCheckpointHeaderBytes);
    in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
    if (in.gcount() != static_cast<std::streamsize>(head.size())) throw std::runtime_error("truncated checkpoint header");
    if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), head.begin()))
        throw std::runtime_error("bad checkpoint magic");
    const std::span<const unsigned char> h(head);
    if (io::get<std::uint32_t>(h, 8) != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version");
    CltParams p;
    p.layers = io::get<std::uint32_t>(h, 12);
    p.hidden = io::get<std::uint32_t>(h, 16);
    p.features = io::get<std::uint32_t>(h, 20);
    const auto kind = io::get<std::uint32_t>(h, 24);
    if (kind > static_cast<std::uint32_t>(SparsifierKind::Identity)) throw std::runtime_error("bad sparsifier kind");
    p.sparsifier.kind = static_cast<SparsifierKind>(kind);
    p.sparsifier.k = io::get<std::uint32_t>(h, 28);
    p.sparsifier.bandwidth = std::bit_cast<float>(io::get<std::uint32_t>(h, 32));
    p.diagonal_only = io::get<std::uint32_t>(h, 36) != 0;
    if (p.layers < 1 || p.hidden < 1 || p.features < 1) throw std::runtime_error("bad checkpoint dims");
    if (std::filesystem::file_size(path) != checkpoint_bytes(p.layers, p.hidden, p.features))
        throw std::runtime_error("checkpoint payload size does not match header");
    for (std::size_t l = 0; l < p.layers; ++l) {
        Matrix e(p.hidden, p.features);
        io::read_f32s(in, e.values());
        p.encoders.push_back(std::move(e));
    }
    p.biases.assign(p.layers, std::vector<float>(p.features));
    for (auto& b : p.biases) io::read_f32s(in, b);
    p.thresholds.assign(p.layers, std::vector<float>(p.features));
    for (auto& t : p.thresholds) io::read_f32s(in, t);
    for (std::size_t n = 0; n < CltParams::triangle_size(p.layers); ++n) {
        Matrix d(p.features, p.hidden);
        io::read_f32s(in, d.values());
        p.decoders.push_back(std::move(d));
    }
    p.sparsifier.validate(p.features);
    return p;
}

}  // namespace vitclt
