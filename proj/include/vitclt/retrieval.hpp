#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "vitclt/clt.hpp"
#include "vitclt/numerics.hpp"

namespace vitclt {

enum class Aggregation { MeanPatches, Cls };

inline std::string_view to_string(Aggregation a) { return a == Aggregation::Cls ? "cls" : "mean"; }

inline Aggregation parse_aggregation(std::string_view s) {
    if (s == "mean" || s == "mean-patches") return Aggregation::MeanPatches;
    if (s == "cls") return Aggregation::Cls;
    throw std::invalid_argument("unknown aggregation '" + std::string(s) + "' (expected mean|cls)");
}

/// One descriptor per sample from token codes [T][m]: the CLS row or the
/// mean of the patch rows.
inline std::vector<float> aggregate(const Matrix& codes, Aggregation agg) {
    if (codes.rows() < 2) throw std::invalid_argument("aggregate: need CLS plus at least one patch");
    std::vector<float> d(codes.cols(), 0.0f);
    if (agg == Aggregation::Cls) {
        auto r = codes.row(0);
        std::copy(r.begin(), r.end(), d.begin());
        return d;
    }
    std::vector<double> acc(codes.cols(), 0.0);
    for (std::size_t t = 1; t < codes.rows(); ++t) {
        auto r = codes.row(t);
        for (std::size_t f = 0; f < acc.size(); ++f) acc[f] += r[f];
    }
    const double n = static_cast<double>(codes.rows() - 1);
    for (std::size_t f = 0; f < acc.size(); ++f) d[f] = static_cast<float>(acc[f] / n);
    return d;
}

struct LayerIndex {
    std::size_t layer = 0;
    Aggregation aggregation = Aggregation::MeanPatches;
    Matrix descriptors;  // corpus x features
    std::vector<std::size_t> ids;
    std::vector<double> norms;

    std::size_t size() const { return ids.size(); }
};

inline LayerIndex make_index(std::size_t layer, Aggregation agg, std::span<const std::size_t> ids, const Matrix& descriptors) {
    if (ids.size() != descriptors.rows()) throw std::invalid_argument("index: descriptor count != id count");
    LayerIndex idx;
    idx.layer = layer;
    idx.aggregation = agg;
    idx.descriptors = descriptors;
    idx.ids.assign(ids.begin(), ids.end());
    for (std::size_t r = 0; r < descriptors.rows(); ++r) idx.norms.push_back(std::sqrt(squared_norm(descriptors.row(r))));
    return idx;
}

/// Codes of layer `layer` for every sample in the store, aggregated.
template <typename Source>
LayerIndex build_index(const CltParams& p, const Source& src, std::size_t layer, Aggregation agg) {
    if (layer >= p.layers) throw std::out_of_range("build_index: layer out of range");
    if (src.size() == 0) throw std::invalid_argument("build_index: empty corpus");
    std::vector<float> data;
    std::vector<std::size_t> ids;
    for (std::size_t n = 0; n < src.size(); ++n) {
        const auto& t = src.read(n);
        const auto d = aggregate(encode_layer(p, layer, t.x.at(layer)), agg);
        data.insert(data.end(), d.begin(), d.end());
        ids.push_back(n);
    }
    return make_index(layer, agg, ids, Matrix(ids.size(), p.features, std::move(data)));
}

struct Neighbor {
    std::size_t id;
    double similarity;
};

/// Exact cosine top-K. Zero-norm corpus entries score -infinity and sort
/// last; ties go to the lower sample id.
inline std::vector<Neighbor> query(const LayerIndex& index, std::span<const float> descriptor, std::size_t k) {
    if (k < 1 || k > index.size())
        throw std::invalid_argument("query: K=" + std::to_string(k) + " out of range [1, " + std::to_string(index.size()) + "]");
    if (descriptor.size() != index.descriptors.cols()) throw std::invalid_argument("query: descriptor width mismatch");
    const double qn = std::sqrt(squared_norm(descriptor));
    if (qn == 0.0) throw std::domain_error("query: zero-norm query descriptor");
    std::vector<Neighbor> all;
    all.reserve(index.size());
    for (std::size_t r = 0; r < index.size(); ++r) {
        const double sim = index.norms[r] > 0.0 ? dot(descriptor, index.descriptors.row(r)) / (qn * index.norms[r])
                                                : -std::numeric_limits<double>::infinity();
        all.push_back({index.ids[r], sim});
    }
    auto before = [](const Neighbor& a, const Neighbor& b) {
        return a.similarity > b.similarity || (a.similarity == b.similarity && a.id < b.id);
    };
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), before);
    all.resize(k);
    return all;
}

}  // namespace vitclt
