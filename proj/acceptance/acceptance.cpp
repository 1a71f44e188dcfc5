// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   vitclt_acceptance --cli <vitclt binary> --config configs/desk.cfg --work <scratch dir>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "CLI11.hpp"
#include "vitclt/vitclt.hpp"

namespace fs = std::filesystem;
using namespace vitclt;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Context {
    std::string cli;
    fs::path config;
    fs::path work;
};

std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

InMemoryTraces capture(const VitParams& vit, std::size_t n) {
    InMemoryTraces store;
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = toy_sample(vit, i);
        auto cap = forward_capture(vit, s.tokens);
        cap.trace.label = s.label;
        store.push_back(std::move(cap.trace));
    }
    return store;
}

ActivationTrace random_trace(std::size_t L, std::size_t T, std::size_t D, Rng& rng) {
    ActivationTrace t;
    for (std::size_t l = 0; l < L; ++l) {
        Matrix x(T, D), y(T, D);
        rng.fill_normal(x.values(), 1.0);
        rng.fill_normal(y.values(), 1.0);
        t.x.push_back(std::move(x));
        t.y.push_back(std::move(y));
    }
    return t;
}

/// Desk-sized CLT with nonzero biases, so codes are not trivially sparse.
CltParams desk_clt(const RunConfig& cfg, SparsifierKind kind, bool diagonal_only, std::uint64_t seed) {
    auto c = cfg.clt();
    c.sparsifier.kind = kind;
    c.diagonal_only = diagonal_only;
    c.seed = seed;
    auto p = init_clt<float>(cfg.vit().layers, cfg.vit().hidden, c);
    Rng rng(seed);
    for (auto& b : p.biases) rng.fill_normal(std::span<float>(b), 0.1);
    return p;
}

// --- criteria ---------------------------------------------------------------

Outcome decomposition(const Context& ctx) {
    const auto cfg = RunConfig::from_file(ctx.config);
    const auto vc = cfg.vit();
    Rng rng(101);
    std::size_t mismatches = 0, checked = 0;
    double worst = 0.0;
    for (auto kind : {SparsifierKind::ReluTopK, SparsifierKind::JumpRelu, SparsifierKind::AbsTopK}) {
        const auto p = desk_clt(cfg, kind, false, 102 + static_cast<std::uint64_t>(kind));
        for (int n = 0; n < 100; ++n) {
            const auto codes = encode(p, random_trace(vc.layers, vc.tokens, vc.hidden, rng).x);
            for (std::size_t j = 0; j < p.layers; ++j) {
                const auto c = contributions(p, codes, j);
                const auto y_hat = c.sum();
                ++checked;
                if (!(y_hat == reconstruct(p, codes, j))) ++mismatches;
                std::vector<double> ratio(j + 1);
                for (std::size_t r = 0; r < y_hat.rows(); ++r) {
                    if (!token_projection(c, y_hat, r, std::span<double>(ratio))) continue;
                    double s = 0.0;
                    for (double v : ratio) s += v;
                    worst = std::max(worst, std::abs(s - 1.0));
                }
            }
        }
    }
    return {mismatches == 0 && worst < 1e-5, std::to_string(checked - mismatches) + "/" + std::to_string(checked) +
                                                 " sums bit-exact, max |sum of scores - 1| = " + fmt(worst)};
}

template <typename P, typename F>
void for_each_tensor(P& p, F&& fn) {
    for (auto& e : p.encoders) fn("E", e.values());
    for (auto& b : p.biases) fn("b", std::span(b));
    for (auto& t : p.thresholds) fn("tau", std::span(t));
    for (auto& d : p.decoders) fn("W_dec", d.values());
}

struct ClassError {
    double diff2 = 0.0, ref2 = 0.0;
    double relative() const { return ref2 == 0.0 ? std::sqrt(diff2) : std::sqrt(diff2 / ref2); }
};

std::map<std::string, ClassError> finite_difference(BasicCltParams<double> p, const Batch<double>& batch,
                                                    const TrainConfig& cfg, double h) {
    const auto analytic = loss_and_grad(p, batch, cfg).grad;
    std::vector<std::span<const double>> g;
    for_each_tensor(analytic, [&](const char*, std::span<const double> s) { g.push_back(s); });
    std::map<std::string, ClassError> err;
    std::size_t t = 0;
    for_each_tensor(p, [&](const char* name, std::span<double> s) {
        for (std::size_t i = 0; i < s.size(); ++i) {
            const double orig = s[i];
            s[i] = orig + h;
            const double up = loss(p, batch, cfg).total;
            s[i] = orig - h;
            const double down = loss(p, batch, cfg).total;
            s[i] = orig;
            const double fd = (up - down) / (2 * h);
            err[name].diff2 += (g[t][i] - fd) * (g[t][i] - fd);
            err[name].ref2 += fd * fd;
        }
        ++t;
    });
    return err;
}

BasicCltParams<double> gradcheck_clt(SparsifierKind kind, std::uint64_t seed) {
    CltConfig c;
    c.expansion = 1;
    c.sparsifier.kind = SparsifierKind::Identity;
    c.seed = seed;
    auto p = init_clt<double>(2, 3, c);
    // widen to m = 5 with every tensor randomized
    Rng rng(seed);
    p.features = 5;
    p.sparsifier.kind = kind;
    p.sparsifier.bandwidth = static_cast<float>(p.sparsifier.bandwidth);
    for (std::size_t l = 0; l < 2; ++l) {
        p.encoders[l] = BasicMatrix<double>(3, 5);
        rng.fill_normal(p.encoders[l].values(), 0.6);
        p.biases[l].assign(5, 0.0);
        rng.fill_normal(std::span<double>(p.biases[l]), 0.1);
        p.thresholds[l].assign(5, 0.0);
        for (auto& t : p.thresholds[l]) t = 0.05 + 0.05 * rng.uniform();
    }
    for (auto& d : p.decoders) {
        d = BasicMatrix<double>(5, 3);
        rng.fill_normal(d.values(), 0.45);
    }
    p.check_shapes();
    return p;
}

Outcome gradients(const Context&) {
    Rng rng(201);
    Batch<double> batch;
    batch.samples = 1;
    for (int l = 0; l < 2; ++l) {
        BasicMatrix<double> x(2, 3), y(2, 3);
        rng.fill_normal(x.values(), 1.0);
        rng.fill_normal(y.values(), 1.0);
        batch.x.push_back(x);
        batch.y.push_back(y);
    }
    TrainConfig cfg;
    cfg.lambda = 0.05;
    bool ok = true;
    std::string detail;

    const auto ident = finite_difference(gradcheck_clt(SparsifierKind::Identity, 202), batch, cfg, 1e-6);
    detail += "identity:";
    for (const auto& [name, e] : ident) {
        ok = ok && e.relative() < 1e-5;
        detail += " " + name + "=" + fmt(e.relative(), 2);
    }

    // JumpReLU: push thresholds out of the straight-through band around every pre-activation
    auto jr = gradcheck_clt(SparsifierKind::JumpRelu, 203);
    const double margin = jr.sparsifier.bandwidth;
    for (std::size_t l = 0; l < 2; ++l) {
        const auto u = pre_activations(jr, l, batch.x[l]);
        for (std::size_t f = 0; f < 5; ++f)
            for (bool moved = true; moved;) {
                moved = false;
                for (std::size_t r = 0; r < u.rows(); ++r)
                    if (std::abs(u(r, f) - jr.thresholds[l][f]) < margin) {
                        jr.thresholds[l][f] = u(r, f) + 2 * margin;
                        moved = true;
                    }
            }
    }
    const auto jump = finite_difference(jr, batch, cfg, 1e-7);
    detail += "; jumprelu:";
    for (const auto& [name, e] : jump) {
        // away from the band the loss is flat in tau, so both gradients must be exactly zero
        ok = ok && (name == "tau" ? e.diff2 == 0.0 && e.ref2 == 0.0 : e.relative() < 1e-4);
        detail += " " + name + "=" + fmt(e.relative(), 2);
    }
    return {ok, detail};
}

Outcome ols_floor(const Context& ctx) {
    auto cfg = RunConfig::from_file(ctx.config);
    for (const char* o : {"clt.sparsifier=identity", "train.lambda=0", "train.lr=3e-3", "train.batch=16",
                          "train.epochs=20", "train.lr_schedule=linear", "train.val_fraction=0"})
        cfg.apply_override(o);
    const auto vc = cfg.vit();
    const auto vit = init_teacher(vc);
    const auto store = capture(vit, cfg.samples());
    const std::size_t N = store.size(), T = vc.tokens, D = vc.hidden, L = vc.layers;

    std::vector<double> floor(L);
    for (std::size_t j = 0; j < L; ++j) {
        // y_j ~ [x_0 .. x_j, 1]: the CLT's encoder biases give it an intercept too
        Eigen::MatrixXd A(N * T, (j + 1) * D + 1), Y(N * T, D);
        for (std::size_t n = 0; n < N; ++n) {
            const auto& t = store.read(n);
            for (std::size_t r = 0; r < T; ++r) {
                const auto row = static_cast<Eigen::Index>(n * T + r);
                for (std::size_t i = 0; i <= j; ++i)
                    for (std::size_t d = 0; d < D; ++d) A(row, static_cast<Eigen::Index>(i * D + d)) = t.x[i](r, d);
                A(row, static_cast<Eigen::Index>((j + 1) * D)) = 1.0;
                for (std::size_t d = 0; d < D; ++d) Y(row, static_cast<Eigen::Index>(d)) = t.y[j](r, d);
            }
        }
        const Eigen::MatrixXd W = A.completeOrthogonalDecomposition().solve(Y);
        floor[j] = (A * W - Y).squaredNorm() / static_cast<double>(N * T * D);
    }

    const auto result = train(store, cfg.train(), cfg.clt());
    std::vector<std::size_t> all(N);
    std::iota(all.begin(), all.end(), std::size_t{0});
    const auto report = evaluate(result.params, store, all);
    bool ok = true;
    std::string detail = "trained/OLS mse per layer:";
    for (std::size_t j = 0; j < L; ++j) {
        const double ratio = report.layers[j].mse / floor[j];
        ok = ok && ratio <= 1.05;
        detail += " " + fmt(ratio);
    }
    return {ok, detail};
}

Outcome degenerate(const Context& ctx) {
    const auto cfg = RunConfig::from_file(ctx.config);
    const std::size_t m = cfg.clt().expansion * cfg.vit().hidden;
    SparsifierSpec jump, topk;
    jump.kind = SparsifierKind::JumpRelu;
    topk.kind = SparsifierKind::ReluTopK;
    topk.k = m;
    const std::vector<float> tau(m, 0.0f);
    Rng rng(401);
    std::size_t sparsifier_mismatch = 0;
    for (int n = 0; n < 1000; ++n) {
        std::vector<float> u(m);
        rng.fill_normal(std::span<float>(u), 1.0);
        if (apply<float>(jump, u, tau) != apply<float>(topk, u)) ++sparsifier_mismatch;
    }

    const auto vc = cfg.vit();
    const auto diag = desk_clt(cfg, SparsifierKind::ReluTopK, true, 402);
    auto zeroed = diag;
    zeroed.diagonal_only = false;
    // same encoders and diagonal decoders; cross-layer decoders explicitly zero
    for (std::size_t i = 0; i < zeroed.layers; ++i)
        for (std::size_t j = i + 1; j < zeroed.layers; ++j) zeroed.decoder(i, j).fill(0.0f);
    std::size_t clt_mismatch = 0;
    for (int n = 0; n < 100; ++n) {
        const auto x = random_trace(vc.layers, vc.tokens, vc.hidden, rng).x;
        const auto a = encode(diag, x), b = encode(zeroed, x);
        for (std::size_t j = 0; j < diag.layers; ++j)
            if (!(reconstruct(diag, a, j) == reconstruct(zeroed, b, j))) ++clt_mismatch;
    }
    return {sparsifier_mismatch == 0 && clt_mismatch == 0,
            std::to_string(sparsifier_mismatch) + " sparsifier mismatches in 1000 vectors, " +
                std::to_string(clt_mismatch) + " output mismatches in 600 targets"};
}

Outcome replacement(const Context& ctx) {
    const auto cfg = RunConfig::from_file(ctx.config);
    const auto vit = init_teacher(cfg.vit());
    const auto clt = desk_clt(cfg, SparsifierKind::ReluTopK, false, 501);
    OracleSurrogate oracle(vit);
    const std::size_t L = vit.config.layers;
    std::size_t failures = 0, plans = 0;
    for (std::size_t n = 0; n < 32; ++n) {
        const auto s = toy_sample(vit, n);
        ActivationTrace base;
        const auto ref = forward_with_hooks(vit, s.tokens, {}, &base);
        for (auto routing : {TokenSet::Cls, TokenSet::Patches, TokenSet::All}) {
            const auto empty = run_cascaded(vit, clt, ReplacementPlan{std::nullopt, routing}, s.tokens);
            if (!(empty.logits == ref.logits)) ++failures;
            for (std::size_t a = 0; a < L; ++a)
                for (std::size_t b = a; b < L; ++b) {
                    const ReplacementPlan plan{LayerRange{a, b}, routing};
                    ++plans;
                    if (!(run_cascaded(vit, oracle, plan, s.tokens).logits == ref.logits)) ++failures;
                    ActivationTrace mod;
                    run_cascaded(vit, clt, plan, s.tokens, &mod);
                    for (std::size_t l = 0; l < a; ++l)
                        if (!(mod.x[l] == base.x[l]) || !(mod.y[l] == base.y[l])) ++failures;
                    if (!(mod.x[a] == base.x[a])) ++failures;
                }
        }
    }
    return {failures == 0, std::to_string(plans) + " oracle plans and prefix checks over 32 samples, " +
                               std::to_string(failures) + " failures"};
}

// --- CLI pipeline -----------------------------------------------------------

struct Csv {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw std::runtime_error("csv has no column " + name);
        return static_cast<std::size_t>(it - header.begin());
    }
    double number(std::size_t row, const std::string& name) const { return std::stod(rows.at(row).at(column(name))); }
};

Csv read_csv(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    Csv csv;
    std::string line;
    bool first = true;
    while (std::getline(f, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        if (first) {
            csv.header = std::move(cells);
            first = false;
        } else {
            csv.rows.push_back(std::move(cells));
        }
    }
    return csv;
}

struct PipelineRun {
    fs::path dir;
    double train_seconds = 0.0;
    double ablate_seconds = 0.0;
    double total_seconds = 0.0;
};

const std::vector<std::string> kPipelineOutputs{"acts.bin", "acts.bin.meta.json", "clt.ckpt", "clt.ckpt.csv", "sweep.csv",
                                                "attr_patches.csv", "ablate.csv", "retrieve.csv"};

PipelineRun run_pipeline(const Context& ctx, const std::string& tag) {
    PipelineRun run;
    run.dir = ctx.work / tag;
    fs::remove_all(run.dir);
    fs::create_directories(run.dir);
    const std::string cfg = "--config \"" + ctx.config.string() + "\"";
    const std::string d = "\"" + run.dir.string() + "/";
    const auto sh = [&](const std::string& args) {
        const std::string cmd = "\"" + ctx.cli + "\" " + args + " 2>>" + d + "stderr.log\"";
        const auto t0 = std::chrono::steady_clock::now();
        if (std::system(cmd.c_str()) != 0) throw std::runtime_error("pipeline step failed: " + cmd);
        return seconds_since(t0);
    };
    const auto t0 = std::chrono::steady_clock::now();
    sh("extract-toy " + cfg + " --out " + d + "acts.bin\"");
    const std::string io = "--acts " + d + "acts.bin\" --ckpt " + d + "clt.ckpt\"";
    run.train_seconds = sh("train " + cfg + " --acts " + d + "acts.bin\" --out " + d + "clt.ckpt\"");
    sh("eval-replace " + cfg + " " + io + " --ranges none,5-5,0-5 --routing all,cls,patches --samples 512 --out " + d +
       "sweep.csv\"");
    sh("attribute " + io + " --tokens patches --out " + d + "attr_patches.csv\"");
    run.ablate_seconds = sh("ablate " + cfg + " " + io + " --modes full,keep4,drop1 --out " + d + "ablate.csv\"");
    sh("retrieve " + io + " --layer 5 --k 5 --agg mean --query 0 --out " + d + "retrieve.csv\"");
    run.total_seconds = seconds_since(t0);
    return run;
}

std::vector<char> bytes_of(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

struct Pipelines {
    const Context* ctx = nullptr;
    std::optional<PipelineRun> a, b;

    const PipelineRun& first() {
        if (!a) a = run_pipeline(*ctx, "run_a");
        return *a;
    }
    const PipelineRun& second() {
        first();
        if (!b) b = run_pipeline(*ctx, "run_b");
        return *b;
    }
};

Outcome training_efficacy(Pipelines& pipes) {
    const auto& run = pipes.first();
    const auto log = read_csv(run.dir / "clt.ckpt.csv");
    const std::size_t last = log.rows.size() - 1;
    const double r2 = log.number(last, "r2_mean"), cos = log.number(last, "cosine_mean");
    return {r2 >= 0.8 && cos >= 0.9 && run.train_seconds < 600.0,
            "final epoch r2 " + fmt(r2) + " cosine " + fmt(cos) + ", training " + fmt(run.train_seconds, 3) + "s"};
}

Outcome faithfulness_ordering(Pipelines& pipes) {
    const auto& run = pipes.first();
    const auto csv = read_csv(run.dir / "ablate.csv");
    std::map<std::string, std::pair<double, double>> by_mode;  // kl, acc
    for (std::size_t r = 0; r < csv.rows.size(); ++r)
        by_mode[csv.rows[r][csv.column("mode")]] = {csv.number(r, "kl_mean"), csv.number(r, "acc")};
    const auto full = by_mode.at("full"), keep = by_mode.at("keep4"), drop = by_mode.at("drop1");
    const bool ok = full.first <= keep.first && keep.first <= drop.first && keep.second >= drop.second &&
                    run.ablate_seconds < 120.0;
    return {ok, "KL full " + fmt(full.first) + " <= keep4 " + fmt(keep.first) + " <= drop1 " + fmt(drop.first) +
                    "; acc keep4 " + fmt(keep.second) + " >= drop1 " + fmt(drop.second) + ", ablation " +
                    fmt(run.ablate_seconds, 3) + "s"};
}

Outcome attribution_sanity(const Context& ctx, Pipelines& pipes) {
    const auto cfg = RunConfig::from_file(ctx.config);
    const auto vit = init_teacher(cfg.vit());
    const auto store = capture(vit, 200);
    const auto diag = desk_clt(cfg, SparsifierKind::ReluTopK, true, 801);
    bool identity = true;
    for (auto tokens : {TokenSet::All, TokenSet::Cls, TokenSet::Patches}) {
        const auto a = attribution_heatmap(diag, store, tokens);
        for (std::size_t j = 0; j < a.layers; ++j)
            for (std::size_t i = 0; i <= j; ++i) identity = identity && a.at(i, j) == (i == j ? 1.0 : 0.0);
    }

    const auto csv = read_csv(pipes.first().dir / "attr_patches.csv");
    double on = 0.0, off = 0.0;
    std::size_t n_on = 0, n_off = 0;
    for (std::size_t j = 0; j < csv.rows.size(); ++j)
        for (std::size_t i = 0; i <= j; ++i) {
            const double v = csv.number(j, "src_" + std::to_string(i));
            (i == j ? on : off) += v;
            ++(i == j ? n_on : n_off);
        }
    on /= static_cast<double>(n_on);
    off /= static_cast<double>(n_off);
    return {identity && on > off, std::string("diagonal-only heatmap ") + (identity ? "exact identity" : "NOT identity") +
                                      "; trained patch diagonal mean " + fmt(on) + " vs off-diagonal " + fmt(off)};
}

Outcome retrieval(const Context&, Pipelines& pipes) {
    const auto& run = pipes.first();
    const auto clt = load_checkpoint(run.dir / "clt.ckpt");
    TraceReader acts(run.dir / "acts.bin");
    InMemoryTraces store;
    for (std::size_t n = 0; n < acts.size(); ++n) store.push_back(acts.read(n));
    std::size_t misses = 0, queries = 0;
    double worst = 0.0;
    for (auto agg : {Aggregation::MeanPatches, Aggregation::Cls})
        for (std::size_t layer = 0; layer < clt.layers; ++layer) {
            const auto index = build_index(clt, store, layer, agg);
            for (std::size_t n = 0; n < index.size(); ++n) {
                const auto hit = query(index, index.descriptors.row(n), 1);
                ++queries;
                if (hit[0].id != index.ids[n]) ++misses;
                worst = std::max(worst, std::abs(hit[0].similarity - 1.0));
            }
        }
    return {misses == 0 && worst <= 1e-6, std::to_string(queries - misses) + "/" + std::to_string(queries) +
                                              " self-hits at rank 1, max |similarity - 1| = " + fmt(worst)};
}

Outcome determinism(Pipelines& pipes) {
    const auto& a = pipes.first();
    const auto& b = pipes.second();
    std::vector<std::string> differ;
    for (const auto& f : kPipelineOutputs) {
        const auto x = bytes_of(a.dir / f), y = bytes_of(b.dir / f);
        if (x.empty() || x != y) differ.push_back(f);
    }
    std::string detail = std::to_string(kPipelineOutputs.size() - differ.size()) + "/" +
                         std::to_string(kPipelineOutputs.size()) + " outputs byte-identical across two runs (" +
                         fmt(a.total_seconds, 3) + "s, " + fmt(b.total_seconds, 3) + "s)";
    for (const auto& f : differ) detail += "; differs: " + f;
    return {differ.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria for the vitclt toolkit"};
    Context ctx;
    std::string config, work;
    std::vector<std::string> only;
    app.add_option("--cli", ctx.cli, "Path to the vitclt binary")->required()->check(CLI::ExistingFile);
    app.add_option("--config", config, "Desk instance config")->required()->check(CLI::ExistingFile);
    app.add_option("--work", work, "Scratch directory")->required();
    app.add_option("--only", only, "Run only the named criteria");
    CLI11_PARSE(app, argc, argv);
    ctx.config = config;
    ctx.work = work;
    fs::create_directories(ctx.work);

    Pipelines pipes{&ctx, {}, {}};
    const std::vector<std::tuple<std::string, double, std::function<Outcome()>>> criteria{
        {"decomposition_exactness", 10, [&] { return decomposition(ctx); }},
        {"gradient_correctness", 30, [&] { return gradients(ctx); }},
        {"ols_oracle_floor", 300, [&] { return ols_floor(ctx); }},
        {"degenerate_equivalences", 0, [&] { return degenerate(ctx); }},
        {"replacement_identity_causality", 0, [&] { return replacement(ctx); }},
        {"training_efficacy", 0, [&] { return training_efficacy(pipes); }},
        {"faithfulness_ordering", 0, [&] { return faithfulness_ordering(pipes); }},
        {"attribution_sanity", 0, [&] { return attribution_sanity(ctx, pipes); }},
        {"retrieval_self_consistency", 0, [&] { return retrieval(ctx, pipes); }},
        {"determinism", 0, [&] { return determinism(pipes); }},
    };

    int failed = 0;
    for (const auto& [name, budget, fn] : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const double secs = seconds_since(t0);
        // criteria with a wall-clock budget fail when they exceed it
        if (budget > 0 && secs >= budget) {
            o.pass = false;
            o.detail += "; over the " + fmt(budget, 3) + "s budget";
        }
        std::cout << (o.pass ? "PASS " : "FAIL ") << name << " (" << fmt(secs, 3) << "s): " << o.detail << std::endl;
        failed += o.pass ? 0 : 1;
    }
    std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
    return failed == 0 ? 0 : 1;
}
