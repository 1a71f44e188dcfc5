#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vitclt {

/// Dense row-major matrix. Rows are tokens (or samples), columns are features.
template <typename T>
class BasicMatrix {
public:
    using value_type = T;

    BasicMatrix() = default;
    BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw std::invalid_argument("matrix data length " + std::to_string(data_.size()) +
                                        " != " + std::to_string(rows_) + "x" +
                                        std::to_string(cols_));
        }
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const BasicMatrix& o) const noexcept {
        return rows_ == o.rows_ && cols_ == o.cols_;
    }

    bool operator==(const BasicMatrix&) const = default;

    template <typename U>
    BasicMatrix<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return BasicMatrix<U>(rows_, cols_, std::move(out));
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;

template <typename T>
bool all_finite(std::span<const T> v) {
    return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

template <typename T>
bool all_finite(const BasicMatrix<T>& m) {
    return all_finite(m.values());
}

template <typename T>
BasicMatrix<T> identity_matrix(std::size_t n) {
    BasicMatrix<T> m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
}

/// Row-major i-k-j product; every output element accumulates over k in
/// ascending order, so results are bit-reproducible.
template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: dimension mismatch " + std::to_string(a.rows()) + "x" +
                                    std::to_string(a.cols()) + " * " + std::to_string(b.rows()) +
                                    "x" + std::to_string(b.cols()));
    }
    BasicMatrix<T> c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const T aik = a(i, k);
            auto brow = b.row(k);
            for (std::size_t j = 0; j < out.size(); ++j) out[j] += aik * brow[j];
        }
    }
    return c;
}

template <typename T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a) {
    BasicMatrix<T> t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

template <typename T>
double squared_norm(std::span<const T> a) {
    return dot(a, a);
}

/// Cosine of two vectors; throws std::domain_error on a zero-norm argument.
template <typename T>
double cosine_similarity(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
    const double na = std::sqrt(squared_norm(a));
    const double nb = std::sqrt(squared_norm(b));
    if (na == 0.0 || nb == 0.0) throw std::domain_error("cosine_similarity: zero-norm vector");
    return dot(a, b) / (na * nb);
}

struct MetricReport {
    double mse = 0.0;
    double r2 = 0.0;
    double cosine = 0.0;
};

/// Streaming accumulator for MetricReport over many token rows.
///
/// R² needs the target mean, so the accumulator keeps raw sums and expands
/// Σ‖t − mean‖² = Σ‖t‖² − n‖mean‖² at the end (in double). Zero-norm rows
/// contribute cosine 0 and are counted rather than rejected.
class MetricAccumulator {
public:
    explicit MetricAccumulator(std::size_t dim) : dim_(dim), target_sum_(dim, 0.0) {}

    template <typename T>
    void add(std::span<const T> pred, std::span<const T> target) {
        if (pred.size() != dim_ || target.size() != dim_)
            throw std::invalid_argument("MetricAccumulator: row width mismatch");
        double se = 0.0, pp = 0.0, tt = 0.0, pt = 0.0;
        for (std::size_t d = 0; d < dim_; ++d) {
            const double p = pred[d], t = target[d];
            se += (p - t) * (p - t);
            pp += p * p;
            tt += t * t;
            pt += p * t;
            target_sum_[d] += t;
        }
        sse_ += se;
        target_sq_ += tt;
        if (pp > 0.0 && tt > 0.0) {
            cosine_sum_ += pt / (std::sqrt(pp) * std::sqrt(tt));
        } else {
            ++zero_norm_rows_;
        }
        ++rows_;
    }

    template <typename T>
    void add(const BasicMatrix<T>& pred, const BasicMatrix<T>& target) {
        if (!pred.same_shape(target)) throw std::invalid_argument("MetricAccumulator: shape mismatch");
        for (std::size_t r = 0; r < pred.rows(); ++r) add(pred.row(r), target.row(r));
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t zero_norm_rows() const noexcept { return zero_norm_rows_; }

    double total_variance() const {
        double mean_sq = 0.0;
        for (double s : target_sum_) mean_sq += s * s;
        return target_sq_ - mean_sq / static_cast<double>(rows_);
    }

    MetricReport report() const {
        if (rows_ == 0) throw std::domain_error("MetricAccumulator: no rows");
        MetricReport r;
        r.mse = sse_ / static_cast<double>(rows_) / static_cast<double>(dim_);
        const double sst = total_variance();
        r.r2 = sst > 0.0 ? 1.0 - sse_ / sst : (sse_ == 0.0 ? 1.0 : 0.0);
        r.cosine = cosine_sum_ / static_cast<double>(rows_);
        return r;
    }

private:
    std::size_t dim_;
    std::vector<double> target_sum_;
    double sse_ = 0.0;
    double target_sq_ = 0.0;
    double cosine_sum_ = 0.0;
    std::size_t rows_ = 0;
    std::size_t zero_norm_rows_ = 0;
};

/// Per-token MSE (normalized by width), R² against the per-feature target
/// mean, and mean per-token cosine. Strict: throws std::domain_error for a
/// constant target or any zero-norm token.
template <typename T>
MetricReport reconstruction_metrics(const BasicMatrix<T>& pred, const BasicMatrix<T>& target) {
    if (!pred.same_shape(target)) throw std::invalid_argument("reconstruction_metrics: shape mismatch");
    if (target.rows() == 0 || target.cols() == 0)
        throw std::invalid_argument("reconstruction_metrics: empty input");
    MetricAccumulator acc(target.cols());
    acc.add(pred, target);
    if (acc.zero_norm_rows() > 0) throw std::domain_error("reconstruction_metrics: zero-norm token, cosine undefined");
    if (!(acc.total_variance() > 0.0))
        throw std::domain_error("reconstruction_metrics: zero-variance target, r2 undefined");
    return acc.report();
}

/// Max-subtracted softmax of logits / temperature.
template <typename T>
std::vector<T> softmax(std::span<const T> logits, T temperature = T{1}) {
    if (!(temperature > T{0})) throw std::invalid_argument("softmax: temperature must be positive");
    if (logits.empty()) throw std::invalid_argument("softmax: empty logits");
    if (!all_finite(logits)) throw std::invalid_argument("softmax: non-finite logit");
    const T mx = *std::max_element(logits.begin(), logits.end());
    std::vector<T> p(logits.size());
    T sum{0};
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp((logits[i] - mx) / temperature);
        sum += p[i];
    }
    for (auto& v : p) v /= sum;
    return p;
}

/// KL(p ‖ q) in nats; zero-probability terms of p contribute nothing.
template <typename T>
double kl_divergence(std::span<const T> p, std::span<const T> q) {
    if (p.size() != q.size() || p.empty()) throw std::invalid_argument("kl_divergence: length mismatch");
    double sp = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] < 0 || q[i] < 0) throw std::domain_error("kl_divergence: negative probability");
        sp += p[i];
        sq += q[i];
    }
    if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6)
        throw std::domain_error("kl_divergence: inputs must sum to 1");
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0) continue;
        if (q[i] == 0) throw std::domain_error("kl_divergence: support violation at index " + std::to_string(i));
        kl += static_cast<double>(p[i]) * std::log(static_cast<double>(p[i]) / static_cast<double>(q[i]));
    }
    return std::max(kl, 0.0);
}

namespace detail {

template <typename T>
BasicMatrix<double> centered_columns(const BasicMatrix<T>& m) {
    BasicMatrix<double> c(m.rows(), m.cols());
    for (std::size_t j = 0; j < m.cols(); ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < m.rows(); ++i) mean += m(i, j);
        mean /= static_cast<double>(m.rows());
        for (std::size_t i = 0; i < m.rows(); ++i) c(i, j) = m(i, j) - mean;
    }
    return c;
}

inline double frobenius_sq(const BasicMatrix<double>& m) {
    return squared_norm(m.values());
}

}  // namespace detail

/// Linear CKA between two sample-by-feature matrices.
template <typename T>
double linear_cka(const BasicMatrix<T>& x, const BasicMatrix<T>& y) {
    if (x.rows() != y.rows() || x.rows() < 2) throw std::invalid_argument("linear_cka: sample count mismatch");
    const auto xc = detail::centered_columns(x);
    const auto yc = detail::centered_columns(y);
    const auto xct = transpose(xc);
    const auto yct = transpose(yc);
    const double cross = detail::frobenius_sq(matmul(yct, xc));
    const double xx = std::sqrt(detail::frobenius_sq(matmul(xct, xc)));
    const double yy = std::sqrt(detail::frobenius_sq(matmul(yct, yc)));
    if (xx == 0.0 || yy == 0.0) throw std::domain_error("linear_cka: constant input");
    return cross / (xx * yy);
}

/// Ranks starting at 1; tied values share their average rank.
template <typename T>
std::vector<double> average_ranks(std::span<const T> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

template <typename T>
double pearson(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("pearson: need equal lengths >= 2");
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) throw std::domain_error("pearson: constant input");
    return sab / std::sqrt(saa * sbb);
}

template <typename T>
double spearman(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need equal lengths >= 2");
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    return pearson(std::span<const double>(ra), std::span<const double>(rb));
}

}  // namespace vitclt
