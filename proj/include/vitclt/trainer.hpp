#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "vitclt/activation_store.hpp"
#include "vitclt/clt.hpp"
#include "vitclt/numerics.hpp"
#include "vitclt/rng.hpp"
#include "vitclt/sparsifiers.hpp"

namespace vitclt {

enum class LrSchedule { Constant, Linear };

inline LrSchedule parse_lr_schedule(std::string_view s) {
    if (s == "constant") return LrSchedule::Constant;
    if (s == "linear") return LrSchedule::Linear;
    throw std::invalid_argument("unknown lr schedule '" + std::string(s) + "' (expected constant or linear)");
}

struct TrainConfig {
    double lr = 2e-4;
    LrSchedule lr_schedule = LrSchedule::Constant;  // linear: decays to 0 over the run
    std::size_t epochs = 10;
    std::size_t batch = 32;
    double lambda = 3e-4;    // sparsity weight; ignored (forced 0) for top-k sparsifiers
    double sharpness = 4.0;  // c in tanh(c * ||W_dec,j|| * |z|)
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double val_fraction = 0.1;  // 0 evaluates on the training set
    std::uint64_t seed = 0;

    void validate() const {
        if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
        if (!(lambda >= 0.0)) throw std::invalid_argument("train: lambda must be nonnegative");
        if (!(sharpness > 0.0)) throw std::invalid_argument("train: sharpness c must be positive");
        if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
        if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw std::invalid_argument("train: val_fraction must be in [0, 1)");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
            throw std::invalid_argument("train: betas must be in [0, 1)");
    }
};

inline double effective_lambda(const TrainConfig& cfg, const SparsifierSpec& spec) {
    return spec.is_topk() ? 0.0 : cfg.lambda;
}

/// A minibatch with the sample and token axes flattened: x[l] and y[l] are
/// (samples * tokens) x hidden. Every CLT operation is token-wise, so this
/// is exact.
template <typename T>
struct Batch {
    std::vector<BasicMatrix<T>> x;
    std::vector<BasicMatrix<T>> y;
    std::size_t samples = 0;

    template <typename U>
    Batch<U> cast() const {
        Batch<U> b;
        for (const auto& m : x) b.x.push_back(m.template cast<U>());
        for (const auto& m : y) b.y.push_back(m.template cast<U>());
        b.samples = samples;
        return b;
    }
};

template <typename Source>
Batch<float> make_batch(const Source& src, std::span<const std::size_t> indices) {
    Batch<float> b;
    b.samples = indices.size();
    for (std::size_t n = 0; n < indices.size(); ++n) {
        const auto& trace = src.read(indices[n]);
        const std::size_t L = trace.x.size(), T = trace.x[0].rows(), D = trace.x[0].cols();
        if (n == 0) {
            b.x.assign(L, Matrix(indices.size() * T, D));
            b.y.assign(L, Matrix(indices.size() * T, D));
        }
        for (std::size_t l = 0; l < L; ++l) {
            std::copy(trace.x[l].values().begin(), trace.x[l].values().end(), b.x[l].data() + n * T * D);
            std::copy(trace.y[l].values().begin(), trace.y[l].values().end(), b.y[l].data() + n * T * D);
        }
    }
    return b;
}

struct LossBreakdown {
    double total = 0.0;
    std::vector<double> mse;       // per layer: sum of squared error, averaged over samples
    std::vector<double> sparsity;  // per layer: R_sparse before the lambda weight
};

template <typename T>
struct ForwardState {
    std::vector<BasicMatrix<T>> u;
    BasicSparseCodes<T> z;
    std::vector<std::vector<std::uint8_t>> keep;
    std::vector<BasicMatrix<T>> y_hat;
};

/// Per-feature decoder norm: ||concat_{j >= l} W_dec^{l->j}[f, :]||_2.
template <typename T>
std::vector<T> decoder_norms(const BasicCltParams<T>& p, std::size_t l) {
    std::vector<T> n(p.features, T{0});
    for (std::size_t j = l; j < p.layers; ++j) {
        const auto& w = p.decoder(l, j);
        for (std::size_t f = 0; f < p.features; ++f) {
            T s{0};
            for (T v : w.row(f)) s += v * v;
            n[f] += s;
        }
    }
    for (auto& v : n) v = std::sqrt(v);
    return n;
}

template <typename T>
ForwardState<T> forward_clt(const BasicCltParams<T>& p, const Batch<T>& batch) {
    if (batch.x.size() != p.layers || batch.y.size() != p.layers) throw std::invalid_argument("batch layer count mismatch");
    ForwardState<T> s;
    s.u.resize(p.layers);
    s.keep.resize(p.layers);
    for (std::size_t l = 0; l < p.layers; ++l) s.z.push_back(encode_layer(p, l, batch.x[l], &s.u[l], &s.keep[l]));
    for (std::size_t j = 0; j < p.layers; ++j) s.y_hat.push_back(reconstruct(p, s.z, j));
    return s;
}

/// Sparsity term for one layer: mean over (row, feature) of
/// tanh(c * ||W_dec,f|| * |z|).
template <typename T>
double sparsity_penalty(const BasicMatrix<T>& z, std::span<const T> norms, double c) {
    double s = 0.0;
    for (std::size_t r = 0; r < z.rows(); ++r) {
        auto zr = z.row(r);
        for (std::size_t f = 0; f < zr.size(); ++f)
            if (zr[f] != T{0}) s += std::tanh(c * static_cast<double>(norms[f]) * std::abs(static_cast<double>(zr[f])));
    }
    return s / static_cast<double>(z.rows() * z.cols());
}

template <typename T>
LossBreakdown loss_from_state(const BasicCltParams<T>& p, const Batch<T>& batch, const ForwardState<T>& s,
                              const TrainConfig& cfg, std::span<const std::uint8_t> targets = {}) {
    LossBreakdown out;
    const double lambda = effective_lambda(cfg, p.sparsifier);
    const double B = static_cast<double>(batch.samples);
    for (std::size_t j = 0; j < p.layers; ++j) {
        double se = 0.0;
        if (targets.empty() || targets[j]) {
            const auto& yh = s.y_hat[j].values();
            const auto& y = batch.y[j].values();
            for (std::size_t k = 0; k < yh.size(); ++k) {
                const double d = static_cast<double>(yh[k]) - y[k];
                se += d * d;
            }
        }
        out.mse.push_back(se / B);
        out.total += se / B;
    }
    for (std::size_t l = 0; l < p.layers; ++l) {
        double r = 0.0;
        if (lambda > 0.0) r = sparsity_penalty<T>(s.z[l], decoder_norms(p, l), cfg.sharpness);
        out.sparsity.push_back(r);
        out.total += lambda * r;
    }
    return out;
}

/// Loss = sum_l ||y_hat_l - y_l||^2 / B + lambda * sum_l R_sparse(z_l).
/// `targets` optionally restricts the reconstruction term to some layers.
template <typename T>
LossBreakdown loss(const BasicCltParams<T>& p, const Batch<T>& batch, const TrainConfig& cfg,
                   std::span<const std::uint8_t> targets = {}) {
    return loss_from_state(p, batch, forward_clt(p, batch), cfg, targets);
}

template <typename T>
BasicCltParams<T> zeros_like(const BasicCltParams<T>& p) {
    BasicCltParams<T> g = p;
    for (auto& e : g.encoders) e.fill(T{0});
    for (auto& b : g.biases) std::fill(b.begin(), b.end(), T{0});
    for (auto& t : g.thresholds) std::fill(t.begin(), t.end(), T{0});
    for (auto& d : g.decoders) d.fill(T{0});
    return g;
}

template <typename T>
struct LossAndGrad {
    LossBreakdown loss;
    BasicCltParams<T> grad;  // same layout as the parameters
    std::vector<double> mean_l0;
};

/// Analytic gradients of `loss`. Top-k supports and JumpReLU indicators are
/// held fixed; thresholds get the rectangular straight-through gradient.
/// The zero-norm subgradient of ||W_dec,f|| is taken as 0.
template <typename T>
LossAndGrad<T> loss_and_grad(const BasicCltParams<T>& p, const Batch<T>& batch, const TrainConfig& cfg,
                             std::span<const std::uint8_t> targets = {}) {
    const std::size_t L = p.layers, m = p.features, D = p.hidden;
    const auto s = forward_clt(p, batch);
    LossAndGrad<T> out;
    out.loss = loss_from_state(p, batch, s, cfg, targets);
    out.grad = zeros_like(p);
    auto& g = out.grad;
    const std::size_t rows = batch.x[0].rows();
    const T two_over_b = static_cast<T>(2.0 / static_cast<double>(batch.samples));
    const double lambda = effective_lambda(cfg, p.sparsifier);
    const double c = cfg.sharpness;
    const double pen_scale = lambda / static_cast<double>(rows * m);

    std::vector<BasicMatrix<T>> dy(L);
    for (std::size_t j = 0; j < L; ++j) {
        dy[j] = BasicMatrix<T>(rows, D);
        if (!targets.empty() && !targets[j]) continue;
        for (std::size_t k = 0; k < dy[j].size(); ++k)
            dy[j].values()[k] = two_over_b * (s.y_hat[j].values()[k] - batch.y[j].values()[k]);
    }

    const bool jump = p.sparsifier.kind == SparsifierKind::JumpRelu;
    const T half_band = static_cast<T>(p.sparsifier.bandwidth / 2.0);
    std::vector<T> dz(m), du(m);
    std::vector<std::uint32_t> active;
    for (std::size_t l = 0; l < L; ++l) {
        const auto& z = s.z[l];
        const auto& keep = s.keep[l];
        const std::size_t last_target = p.diagonal_only ? l : L - 1;
        std::vector<T> norms;
        std::vector<double> dnorm;
        if (lambda > 0.0) {
            norms = decoder_norms(p, l);
            dnorm.assign(m, 0.0);
        }
        // transposed decoders let dense rows accumulate dy . W[f, :] for all f at once;
        // the per-feature summation order matches the sparse path exactly
        std::vector<BasicMatrix<T>> wt;
        for (std::size_t j = l; j <= last_target; ++j) wt.push_back(transpose(p.decoder(l, j)));
        std::vector<T> dense(m);
        std::size_t nnz = 0;
        for (std::size_t r = 0; r < rows; ++r) {
            auto zr = z.row(r);
            auto xr = batch.x[l].row(r);
            auto ur = s.u[l].row(r);
            active.clear();
            for (std::size_t f = 0; f < m; ++f) {
                dz[f] = T{0};
                const bool kept = keep[r * m + f] != 0;
                nnz += kept ? 1 : 0;
                // unkept coordinates only matter for the threshold STE band
                if (kept || (jump && std::abs(ur[f] - p.thresholds[l][f]) < half_band))
                    active.push_back(static_cast<std::uint32_t>(f));
            }
            if (active.size() * 4 > m) {
                std::fill(dense.begin(), dense.end(), T{0});
                for (std::size_t j = l; j <= last_target; ++j) {
                    auto dyr = dy[j].row(r);
                    const auto& w = wt[j - l];
                    for (std::size_t d = 0; d < D; ++d) {
                        const T a = dyr[d];
                        auto wrow = w.row(d);
                        for (std::size_t f = 0; f < m; ++f) dense[f] += a * wrow[f];
                    }
                }
                for (auto f : active) dz[f] = dense[f];
            } else {
                for (auto f : active) {
                    T acc{0};
                    for (std::size_t j = l; j <= last_target; ++j) {
                        auto dyr = dy[j].row(r);
                        auto wr = p.decoder(l, j).row(f);
                        for (std::size_t d = 0; d < D; ++d) acc += dyr[d] * wr[d];
                    }
                    dz[f] = acc;
                }
            }
            if (lambda > 0.0) {
                for (auto f : active) {
                    if (zr[f] == T{0}) continue;
                    const double a = c * static_cast<double>(norms[f]) * std::abs(static_cast<double>(zr[f]));
                    const double th = std::tanh(a);
                    const double sech2 = 1.0 - th * th;
                    const double sign = zr[f] > T{0} ? 1.0 : -1.0;
                    dz[f] += static_cast<T>(pen_scale * sech2 * c * static_cast<double>(norms[f]) * sign);
                    dnorm[f] += pen_scale * sech2 * c * std::abs(static_cast<double>(zr[f]));
                }
            }
            backward_into<T>(p.sparsifier, s.u[l].row(r), p.thresholds[l],
                             std::span<const std::uint8_t>(keep.data() + r * m, m), dz, du, g.thresholds[l]);
            // encoder and bias
            auto& ge = g.encoders[l];
            active.clear();
            for (std::size_t f = 0; f < m; ++f) {
                if (du[f] == T{0}) continue;
                g.biases[l][f] += du[f];
                active.push_back(static_cast<std::uint32_t>(f));
            }
            if (active.size() == m) {
                for (std::size_t d = 0; d < D; ++d) {
                    const T xd = xr[d];
                    auto ger = ge.row(d);
                    for (std::size_t f = 0; f < m; ++f) ger[f] += xd * du[f];
                }
            } else {
                for (std::size_t d = 0; d < D; ++d) {
                    const T xd = xr[d];
                    auto ger = ge.row(d);
                    for (auto f : active) ger[f] += xd * du[f];
                }
            }
            // decoders read by this source
            for (std::size_t j = l; j <= last_target; ++j) {
                auto& gw = g.decoder(l, j);
                auto dyr = dy[j].row(r);
                for (std::size_t f = 0; f < m; ++f) {
                    const T zf = zr[f];
                    if (zf == T{0}) continue;
                    auto gr = gw.row(f);
                    for (std::size_t d = 0; d < D; ++d) gr[d] += zf * dyr[d];
                }
            }
        }
        out.mean_l0.push_back(static_cast<double>(nnz) / static_cast<double>(rows));
        if (lambda > 0.0) {
            for (std::size_t j = l; j <= last_target; ++j) {
                const auto& w = p.decoder(l, j);
                auto& gw = g.decoder(l, j);
                for (std::size_t f = 0; f < m; ++f) {
                    if (norms[f] == T{0} || dnorm[f] == 0.0) continue;
                    const T k = static_cast<T>(dnorm[f] / static_cast<double>(norms[f]));
                    auto wr = w.row(f);
                    auto gr = gw.row(f);
                    for (std::size_t d = 0; d < D; ++d) gr[d] += k * wr[d];
                }
            }
        }
    }
    return out;
}

template <typename T>
struct BasicOptState {
    BasicCltParams<T> m;
    BasicCltParams<T> v;
    std::uint64_t step = 0;
};
using OptState = BasicOptState<float>;

template <typename T>
BasicOptState<T> init_opt_state(const BasicCltParams<T>& p) {
    return {zeros_like(p), zeros_like(p), 0};
}

/// One decoupled-weight-decay Adam update on a flat tensor; `step` is the
/// 1-based step count used for bias correction.
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::uint64_t step,
                  const TrainConfig& cfg, bool decay) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T shrink = static_cast<T>(1.0 - cfg.lr * cfg.weight_decay);
    for (std::size_t i = 0; i < param.size(); ++i) {
        m[i] = b1 * m[i] + (T{1} - b1) * grad[i];
        v[i] = b2 * v[i] + (T{1} - b2) * grad[i] * grad[i];
        const double m_hat = static_cast<double>(m[i]) / bc1;
        const double v_hat = static_cast<double>(v[i]) / bc2;
        if (decay) param[i] *= shrink;
        param[i] -= static_cast<T>(cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
    }
}

/// AdamW over all CLT tensors. Weight decay applies to encoders and
/// decoders only; thresholds are clamped to >= 0 afterwards. Decoders the
/// diagonal-only model never reads stay untouched.
template <typename T>
void adamw_step(BasicCltParams<T>& p, const BasicCltParams<T>& g, BasicOptState<T>& st, const TrainConfig& cfg) {
    ++st.step;
    for (std::size_t l = 0; l < p.layers; ++l) {
        adamw_update<T>(p.encoders[l].values(), g.encoders[l].values(), st.m.encoders[l].values(),
                        st.v.encoders[l].values(), st.step, cfg, true);
        adamw_update<T>(p.biases[l], g.biases[l], st.m.biases[l], st.v.biases[l], st.step, cfg, false);
        if (p.sparsifier.kind == SparsifierKind::JumpRelu) {
            adamw_update<T>(p.thresholds[l], g.thresholds[l], st.m.thresholds[l], st.v.thresholds[l], st.step, cfg,
                            false);
            for (auto& t : p.thresholds[l]) t = std::max(t, T{0});
        }
    }
    for (std::size_t i = 0; i < p.layers; ++i) {
        for (std::size_t j = i; j < p.layers; ++j) {
            if (p.diagonal_only && i != j) continue;
            const auto k = p.decoder_index(i, j);
            adamw_update<T>(p.decoders[k].values(), g.decoders[k].values(), st.m.decoders[k].values(),
                            st.v.decoders[k].values(), st.step, cfg, true);
        }
    }
}

struct EvalReport {
    std::vector<MetricReport> layers;
    std::vector<double> mean_l0;
    MetricReport average;  // layer-averaged
};

/// Teacher-forced reconstruction quality over the given samples.
template <typename Source>
EvalReport evaluate(const CltParams& p, const Source& src, std::span<const std::size_t> indices) {
    if (indices.empty()) throw std::invalid_argument("evaluate: no samples");
    std::vector<MetricAccumulator> acc(p.layers, MetricAccumulator(p.hidden));
    std::vector<double> l0(p.layers, 0.0);
    std::size_t rows = 0;
    for (auto idx : indices) {
        const auto& t = src.read(idx);
        const auto codes = encode(p, t.x);
        for (std::size_t j = 0; j < p.layers; ++j) {
            acc[j].add(reconstruct(p, codes, j), t.y[j]);
            for (float v : codes[j].values()) l0[j] += v != 0.0f ? 1.0 : 0.0;
        }
        rows += t.x[0].rows();
    }
    EvalReport r;
    for (std::size_t j = 0; j < p.layers; ++j) {
        r.layers.push_back(acc[j].report());
        r.mean_l0.push_back(l0[j] / static_cast<double>(rows));
        r.average.mse += r.layers.back().mse / static_cast<double>(p.layers);
        r.average.r2 += r.layers.back().r2 / static_cast<double>(p.layers);
        r.average.cosine += r.layers.back().cosine / static_cast<double>(p.layers);
    }
    return r;
}

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;  // sample-weighted mean of minibatch losses
    EvalReport eval;
};

struct TrainResult {
    CltParams params;
    std::vector<EpochLog> log;
};

inline std::string format_g(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline std::string training_log_header(std::size_t layers) {
    std::string h = "epoch,train_loss";
    for (std::size_t l = 0; l < layers; ++l) h += ",mse_" + std::to_string(l);
    for (std::size_t l = 0; l < layers; ++l) h += ",l0_" + std::to_string(l);
    return h + ",r2_mean,cosine_mean";
}

inline std::string training_log_row(const EpochLog& e) {
    std::string row = std::to_string(e.epoch) + "," + format_g(e.train_loss);
    for (const auto& m : e.eval.layers) row += "," + format_g(m.mse);
    for (double v : e.eval.mean_l0) row += "," + format_g(v);
    return row + "," + format_g(e.eval.average.r2) + "," + format_g(e.eval.average.cosine);
}

/// Teacher-forced training. Deterministic for a fixed seed: the split,
/// initial parameters and every epoch's sample order derive from it.
/// Writes the checkpoint (overwritten each epoch) and a CSV log when paths
/// are given.
template <typename Source>
TrainResult train(const Source& src, const TrainConfig& cfg, const CltConfig& clt_cfg,
                  const std::optional<std::filesystem::path>& checkpoint = std::nullopt,
                  const std::optional<std::filesystem::path>& log_csv = std::nullopt) {
    cfg.validate();
    if (src.size() == 0) throw std::invalid_argument("train: empty activation store");
    const auto first = src.read(0);
    TrainResult result;
    result.params = init_clt<float>(first.x.size(), first.x[0].cols(), clt_cfg);
    auto& p = result.params;
    auto state = init_opt_state(p);

    std::vector<std::size_t> train_idx, val_idx;
    if (cfg.val_fraction > 0.0) {
        auto s = split(src.size(), 1.0 - cfg.val_fraction, cfg.seed);
        train_idx = std::move(s.train);
        val_idx = std::move(s.val);
    }
    if (train_idx.empty() || val_idx.empty()) {
        train_idx.resize(src.size());
        std::iota(train_idx.begin(), train_idx.end(), std::size_t{0});
        val_idx = train_idx;
    }

    std::ofstream log;
    if (log_csv) {
        log.open(*log_csv, std::ios::trunc);
        if (!log) throw std::runtime_error("cannot open training log " + log_csv->string());
        log << training_log_header(p.layers) << "\n";
    }

    const std::size_t steps_per_epoch = (train_idx.size() + cfg.batch - 1) / cfg.batch;
    const double total_steps = static_cast<double>(steps_per_epoch * cfg.epochs);
    TrainConfig step_cfg = cfg;
    std::uint64_t global_step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto order = train_idx;
        Rng rng(mix_seed(cfg.seed, 0xe90c0000ULL + epoch));
        rng.shuffle(std::span<std::size_t>(order));
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t n = std::min(cfg.batch, order.size() - start);
            const auto batch = make_batch(src, std::span<const std::size_t>(order.data() + start, n));
            auto lg = loss_and_grad(p, batch, cfg);
            ++global_step;
            if (!std::isfinite(lg.loss.total))
                throw std::runtime_error("non-finite loss at step " + std::to_string(global_step));
            loss_sum += lg.loss.total * static_cast<double>(n);
            if (cfg.lr_schedule == LrSchedule::Linear)
                step_cfg.lr = cfg.lr * (1.0 - static_cast<double>(global_step - 1) / total_steps);
            adamw_step(p, lg.grad, state, step_cfg);
        }
        EpochLog e;
        e.epoch = epoch;
        e.train_loss = loss_sum / static_cast<double>(order.size());
        e.eval = evaluate(p, src, val_idx);
        if (checkpoint) save_checkpoint(*checkpoint, p);
        if (log) {
            log << training_log_row(e) << "\n";
            log.flush();
        }
        result.log.push_back(std::move(e));
    }
    return result;
}

}  // namespace vitclt
