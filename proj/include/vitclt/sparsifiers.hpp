#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace vitclt {

enum class SparsifierKind : std::uint32_t {
    JumpRelu = 0,
    ReluTopK = 1,
    AbsTopK = 2,
    Identity = 3,  // test-only; lets the CLT degenerate to a linear model
};

inline std::string_view to_string(SparsifierKind k) {
    switch (k) {
        case SparsifierKind::JumpRelu: return "jumprelu";
        case SparsifierKind::ReluTopK: return "relu_topk";
        case SparsifierKind::AbsTopK: return "abs_topk";
        case SparsifierKind::Identity: return "identity";
    }
    return "unknown";
}

inline SparsifierKind parse_sparsifier_kind(std::string_view s) {
    for (auto k : {SparsifierKind::JumpRelu, SparsifierKind::ReluTopK, SparsifierKind::AbsTopK,
                   SparsifierKind::Identity}) {
        if (s == to_string(k)) return k;
    }
    throw std::invalid_argument("unknown sparsifier '" + std::string(s) + "'");
}

struct SparsifierSpec {
    SparsifierKind kind = SparsifierKind::ReluTopK;
    std::size_t k = 128;
    double bandwidth = 1e-3;  // JumpReLU rectangular STE width

    bool is_topk() const { return kind == SparsifierKind::ReluTopK || kind == SparsifierKind::AbsTopK; }

    void validate(std::size_t features) const {
        if (is_topk() && (k < 1 || k > features))
            throw std::invalid_argument("top-k: k=" + std::to_string(k) + " out of range [1, " +
                                        std::to_string(features) + "]");
        if (kind == SparsifierKind::JumpRelu && !(bandwidth > 0.0))
            throw std::invalid_argument("jumprelu: bandwidth must be positive");
    }

    bool operator==(const SparsifierSpec&) const = default;
};

/// Marks the coordinates a sparsifier keeps. Top-k ties go to the lower
/// index; ReLU-top-k never keeps a non-positive value.
template <typename T>
void select_support(const SparsifierSpec& spec, std::span<const T> u, std::span<const T> tau,
                    std::span<std::uint8_t> keep, std::vector<std::uint32_t>& scratch) {
    const std::size_t m = u.size();
    switch (spec.kind) {
        case SparsifierKind::Identity:
            std::fill(keep.begin(), keep.end(), std::uint8_t{1});
            return;
        case SparsifierKind::JumpRelu:
            if (tau.size() != m) throw std::invalid_argument("jumprelu: threshold length mismatch");
            for (std::size_t i = 0; i < m; ++i) keep[i] = u[i] > tau[i] ? 1 : 0;
            return;
        case SparsifierKind::ReluTopK:
        case SparsifierKind::AbsTopK: {
            const bool abs = spec.kind == SparsifierKind::AbsTopK;
            if (spec.k < 1 || spec.k > m) spec.validate(m);
            scratch.clear();
            for (std::uint32_t i = 0; i < m; ++i)
                if (abs || u[i] > T{0}) scratch.push_back(i);
            std::fill(keep.begin(), keep.end(), std::uint8_t{0});
            auto key = [&](std::uint32_t i) { return abs ? std::abs(u[i]) : u[i]; };
            auto before = [&](std::uint32_t a, std::uint32_t b) {
                const T ka = key(a), kb = key(b);
                return ka > kb || (ka == kb && a < b);
            };
            if (scratch.size() > spec.k) {
                std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(spec.k),
                                 scratch.end(), before);
                scratch.resize(spec.k);
            }
            for (auto i : scratch) keep[i] = 1;
            return;
        }
    }
}

template <typename T>
void select_support(const SparsifierSpec& spec, std::span<const T> u, std::span<const T> tau,
                    std::span<std::uint8_t> keep) {
    std::vector<std::uint32_t> scratch;
    select_support(spec, u, tau, keep, scratch);
}

/// z = phi(u). Kept coordinates carry u unchanged (AbsTopK keeps the sign,
/// since sign(u) * |u| == u).
template <typename T>
std::vector<T> apply(const SparsifierSpec& spec, std::span<const T> u, std::span<const T> tau = {}) {
    spec.validate(u.size());
    std::vector<std::uint8_t> keep(u.size());
    select_support(spec, u, tau, std::span<std::uint8_t>(keep));
    std::vector<T> z(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) z[i] = keep[i] ? u[i] : T{0};
    return z;
}

template <typename T>
struct SparsifierGrad {
    std::vector<T> u;
    std::vector<T> tau;  // empty unless JumpReLU
};

/// Accumulating backward used by the trainer: grad_u is overwritten,
/// grad_tau (JumpReLU only) is added to.
///
/// Value path: d z / d u = 1 on the kept support. JumpReLU threshold uses a
/// rectangular straight-through kernel of width eps:
///   d L / d tau_j += -(u_j / eps) * 1[|u_j - tau_j| < eps / 2] * upstream_j
template <typename T>
void backward_into(const SparsifierSpec& spec, std::span<const T> u, std::span<const T> tau,
                   std::span<const std::uint8_t> keep, std::span<const T> upstream, std::span<T> grad_u,
                   std::span<T> grad_tau) {
    for (std::size_t i = 0; i < u.size(); ++i) grad_u[i] = keep[i] ? upstream[i] : T{0};
    if (spec.kind == SparsifierKind::JumpRelu && !grad_tau.empty()) {
        const T eps = static_cast<T>(spec.bandwidth);
        for (std::size_t i = 0; i < u.size(); ++i) {
            if (std::abs(u[i] - tau[i]) < eps / T{2}) grad_tau[i] += -(u[i] / eps) * upstream[i];
        }
    }
}

template <typename T>
SparsifierGrad<T> backward(const SparsifierSpec& spec, std::span<const T> u, std::span<const T> tau,
                           std::span<const T> upstream) {
    if (upstream.size() != u.size()) throw std::invalid_argument("sparsifier backward: shape mismatch");
    if (spec.kind == SparsifierKind::JumpRelu && tau.size() != u.size())
        throw std::invalid_argument("sparsifier backward: threshold shape mismatch");
    spec.validate(u.size());
    std::vector<std::uint8_t> keep(u.size());
    select_support(spec, u, tau, std::span<std::uint8_t>(keep));
    SparsifierGrad<T> g;
    g.u.resize(u.size());
    if (spec.kind == SparsifierKind::JumpRelu) g.tau.assign(u.size(), T{0});
    backward_into<T>(spec, u, tau, keep, upstream, g.u, g.tau);
    return g;
}

}  // namespace vitclt
