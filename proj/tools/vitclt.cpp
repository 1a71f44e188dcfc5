// vitclt: command-line driver for the toy-teacher transcoder pipeline.
//
// Exit status: 0 ok, 1 runtime error, 2 configuration or usage error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vitclt/vitclt.hpp"

namespace fs = std::filesystem;
using namespace vitclt;

namespace {

struct ConfigArgs {
    std::string path;
    std::vector<std::string> overrides;

    RunConfig load() const {
        RunConfig cfg = path.empty() ? RunConfig{} : RunConfig::from_file(path);
        for (const auto& o : overrides) cfg.apply_override(o);
        return cfg;
    }
};

void add_config_options(CLI::App* cmd, ConfigArgs& args, bool required) {
    auto* opt = cmd->add_option("--config,-c", args.path, "Run configuration file (key = value)");
    if (required) opt->required();
    opt->check(CLI::ExistingFile);
    cmd->add_option("--set", args.overrides, "Override a config key: --set train.lr=1e-3 (repeatable)");
}

void emit(const std::string& text, const std::string& out) {
    if (out.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream f(out, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + out + " for writing");
    f << text;
    if (!f) throw std::runtime_error("I/O failure writing " + out);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) parts.push_back(item);
    return parts;
}

void check_store_matches(const TraceHeader& h, const CltParams& clt) {
    if (h.num_layers != clt.layers || h.hidden != clt.hidden)
        throw std::runtime_error("checkpoint dims (L=" + std::to_string(clt.layers) + ", D=" + std::to_string(clt.hidden) +
                                 ") do not match activation file (L=" + std::to_string(h.num_layers) +
                                 ", D=" + std::to_string(h.hidden) + ")");
}

/// Rebuilds the labeled toy inputs behind an activation file and confirms the
/// file came from this teacher: dims, labels, and the first sample's
/// activations must match exactly.
std::vector<ToySample> regenerate_inputs(const VitParams& vit, const TraceReader& acts, std::size_t limit) {
    const auto& h = acts.header();
    const auto& c = vit.config;
    if (h.num_layers != c.layers || h.tokens != c.tokens || h.hidden != c.hidden)
        throw std::runtime_error("activation file dims (L=" + std::to_string(h.num_layers) + ", T=" +
                                 std::to_string(h.tokens) + ", D=" + std::to_string(h.hidden) +
                                 ") do not match teacher config");
    if (!acts.has_labels()) throw std::runtime_error("activation file has no labels; evaluation needs labeled samples");
    const std::size_t n = limit == 0 ? acts.size() : std::min(limit, acts.size());
    std::vector<ToySample> samples;
    samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        samples.push_back(toy_sample(vit, i));
        if (samples.back().label != *acts.label(i))
            throw std::runtime_error("label of sample " + std::to_string(i) + " does not match teacher config");
    }
    const auto probe = forward_capture(vit, samples.front().tokens).trace;
    const auto stored = acts.read(0);
    if (probe.x != stored.x || probe.y != stored.y)
        throw std::runtime_error("activation file was not produced by the teacher described by this config");
    return samples;
}

int cmd_extract(const ConfigArgs& cargs, const std::string& out) {
    const auto cfg = cargs.load();
    const auto vc = cfg.vit();
    const auto n = cfg.samples();
    const auto vit = init_teacher(vc);
    TraceHeader h;
    h.num_samples = static_cast<std::uint32_t>(n);
    h.num_layers = static_cast<std::uint16_t>(vc.layers);
    h.tokens = static_cast<std::uint16_t>(vc.tokens);
    h.hidden = static_cast<std::uint32_t>(vc.hidden);
    h.label_present = 1;
    TraceWriter w(out, h);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = toy_sample(vit, i);
        auto cap = forward_capture(vit, s.tokens);
        cap.trace.label = s.label;
        correct += argmax(cap.output.logits) == s.label;
        w.append(cap.trace);
    }
    w.finish();

    nlohmann::ordered_json meta;
    meta["format"] = "CLTACTS1";
    meta["source"] = "toy-vit";
    meta["samples"] = n;
    meta["layers"] = vc.layers;
    meta["tokens"] = vc.tokens;
    meta["hidden"] = vc.hidden;
    meta["mlp_hidden"] = vc.mlp_width();
    meta["heads"] = vc.heads;
    meta["classes"] = vc.classes;
    meta["seed"] = vc.seed;
    meta["signal"] = vc.signal;
    meta["noise"] = vc.noise;
    meta["teacher_accuracy"] = 100.0 * static_cast<double>(correct) / static_cast<double>(n);
    std::ofstream mf(out + ".meta.json", std::ios::trunc);
    mf << meta.dump(2) << "\n";
    if (!mf) throw std::runtime_error("cannot write " + out + ".meta.json");
    std::cerr << "wrote " << n << " samples (L=" << vc.layers << ", T=" << vc.tokens << ", D=" << vc.hidden
              << "), teacher accuracy " << format_g(meta["teacher_accuracy"].get<double>()) << "%\n";
    return 0;
}

int cmd_train(const ConfigArgs& cargs, const std::string& acts_path, const std::string& out, std::string log_path) {
    const auto cfg = cargs.load();
    const auto tc = cfg.train();
    const auto cc = cfg.clt();
    if (cc.sparsifier.kind == SparsifierKind::Identity)
        throw ConfigError("config key 'clt.sparsifier': identity is for tests and is rejected for training");
    TraceReader acts(acts_path);
    cc.sparsifier.validate(cc.expansion * acts.header().hidden);
    if (log_path.empty()) log_path = out + ".csv";
    const auto result = train(acts, tc, cc, fs::path(out), fs::path(log_path));
    for (const auto& e : result.log)
        std::cerr << "epoch " << e.epoch << " loss " << format_g(e.train_loss) << " r2 " << format_g(e.eval.average.r2)
                  << " cosine " << format_g(e.eval.average.cosine) << "\n";
    return 0;
}

int cmd_eval_replace(const ConfigArgs& cargs, const std::string& acts_path, const std::string& ckpt,
                     const std::string& ranges, const std::string& routings, std::size_t limit, const std::string& out) {
    const auto cfg = cargs.load();
    std::vector<std::optional<LayerRange>> rs;
    std::vector<TokenSet> ts;
    try {
        for (const auto& r : split_list(ranges)) rs.push_back(parse_range(r));
        for (const auto& t : split_list(routings)) ts.push_back(parse_token_set(t));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (rs.empty() || ts.empty()) throw ConfigError("--ranges and --routing need at least one entry");
    const auto vit = init_teacher(cfg.vit());
    const auto clt = load_checkpoint(ckpt);
    check_compatible(vit, clt);
    TraceReader acts(acts_path);
    const auto samples = regenerate_inputs(vit, acts, limit);
    for (const auto& r : rs) ReplacementPlan{r, TokenSet::All}.validate(clt.layers);
    emit(sweep_csv(sweep(vit, clt, rs, ts, samples, cfg.logit_scale())), out);
    return 0;
}

int cmd_attribute(const std::string& acts_path, const std::string& ckpt, const std::string& tokens,
                  const std::string& out) {
    TokenSet ts;
    try {
        ts = parse_token_set(tokens);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    const auto clt = load_checkpoint(ckpt);
    TraceReader acts(acts_path);
    check_store_matches(acts.header(), clt);
    const auto a = attribution_heatmap(clt, acts, ts);
    if (a.tokens_skipped > 0) std::cerr << "skipped " << a.tokens_skipped << " degenerate token rows\n";
    emit(attribution_csv(a), out);
    return 0;
}

int cmd_ablate(const ConfigArgs& cargs, const std::string& acts_path, const std::string& ckpt, const std::string& modes,
               const std::string& ranking, std::size_t limit, const std::string& out) {
    const auto cfg = cargs.load();
    std::vector<AblationSpec> specs;
    try {
        const auto rank = parse_token_set(ranking);
        for (const auto& m : split_list(modes)) specs.push_back(parse_ablation(m, rank));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (specs.empty()) throw ConfigError("--modes needs at least one entry");
    const auto vit = init_teacher(cfg.vit());
    const auto clt = load_checkpoint(ckpt);
    check_compatible(vit, clt);
    for (const auto& s : specs) {
        try {
            s.validate(clt.layers);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
    TraceReader acts(acts_path);
    const auto samples = regenerate_inputs(vit, acts, limit);
    emit(ablation_csv(ablation_report(vit, clt, samples, specs, cfg.logit_scale())), out);
    return 0;
}

int cmd_retrieve(const std::string& acts_path, const std::string& ckpt, std::size_t layer, std::size_t k,
                 const std::string& agg, std::size_t query_id, const std::string& out) {
    Aggregation a;
    try {
        a = parse_aggregation(agg);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    const auto clt = load_checkpoint(ckpt);
    TraceReader acts(acts_path);
    check_store_matches(acts.header(), clt);
    if (layer >= clt.layers) throw ConfigError("--layer " + std::to_string(layer) + " out of range");
    if (query_id >= acts.size()) throw ConfigError("--query " + std::to_string(query_id) + " out of range");
    const auto index = build_index(clt, acts, layer, a);
    const auto hits = query(index, index.descriptors.row(query_id), k);
    std::string text = "rank,id,similarity,label\n";
    for (std::size_t r = 0; r < hits.size(); ++r) {
        const auto label = acts.label(hits[r].id);
        text += std::to_string(r + 1) + "," + std::to_string(hits[r].id) + "," + format_g(hits[r].similarity) + "," +
                (label ? std::to_string(*label) : std::string()) + "\n";
    }
    emit(text, out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-layer transcoder toolkit for toy ViT activations"};
    app.require_subcommand(1);

    ConfigArgs cargs;
    std::string acts, ckpt, out, log, ranges = "none", routing = "all", tokens = "all", modes = "full,drop1,keep4",
                                      ranking = "all", agg = "mean";
    std::size_t layer = 0, k = 10, query_id = 0, limit = 0;

    auto* extract = app.add_subcommand("extract-toy", "Run the seeded toy teacher and write a CLTACTS1 file");
    add_config_options(extract, cargs, false);
    extract->add_option("--out,-o", out, "Output activation file")->required();

    auto* train_cmd = app.add_subcommand("train", "Train a transcoder and write a CLTC1 checkpoint plus CSV log");
    add_config_options(train_cmd, cargs, false);
    train_cmd->add_option("--acts", acts, "CLTACTS1 activation file")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--out,-o", out, "Output checkpoint")->required();
    train_cmd->add_option("--log", log, "Training log CSV (default: <out>.csv)");

    auto* eval = app.add_subcommand("eval-replace", "Cascaded replacement faithfulness sweep (CSV)");
    add_config_options(eval, cargs, true);
    eval->add_option("--acts", acts, "CLTACTS1 file produced by extract-toy")->required()->check(CLI::ExistingFile);
    eval->add_option("--ckpt", ckpt, "CLTC1 checkpoint")->required()->check(CLI::ExistingFile);
    eval->add_option("--ranges", ranges, "Comma list of layer ranges: none, a->b")->capture_default_str();
    eval->add_option("--routing", routing, "Comma list of token routings: cls, patches, all")->capture_default_str();
    eval->add_option("--samples", limit, "Evaluate only the first N samples (0 = all)");
    eval->add_option("--out,-o", out, "Output CSV (default: stdout)");

    auto* attr = app.add_subcommand("attribute", "Projection-score attribution heatmap (CSV)");
    attr->add_option("--acts", acts, "CLTACTS1 activation file")->required()->check(CLI::ExistingFile);
    attr->add_option("--ckpt", ckpt, "CLTC1 checkpoint")->required()->check(CLI::ExistingFile);
    attr->add_option("--tokens", tokens, "Token class: cls, patches, all")->capture_default_str();
    attr->add_option("--out,-o", out, "Output CSV (default: stdout)");

    auto* abl = app.add_subcommand("ablate", "Final-layer source ablations (CSV)");
    add_config_options(abl, cargs, true);
    abl->add_option("--acts", acts, "CLTACTS1 file produced by extract-toy")->required()->check(CLI::ExistingFile);
    abl->add_option("--ckpt", ckpt, "CLTC1 checkpoint")->required()->check(CLI::ExistingFile);
    abl->add_option("--modes", modes, "Comma list: full, dropN, keepN")->capture_default_str();
    abl->add_option("--ranking", ranking, "Tokens used to rank sources: cls or all")->capture_default_str();
    abl->add_option("--samples", limit, "Evaluate only the first N samples (0 = all)");
    abl->add_option("--out,-o", out, "Output CSV (default: stdout)");

    auto* ret = app.add_subcommand("retrieve", "Nearest neighbours of a sample by aggregated codes");
    ret->add_option("--acts", acts, "CLTACTS1 activation file")->required()->check(CLI::ExistingFile);
    ret->add_option("--ckpt", ckpt, "CLTC1 checkpoint")->required()->check(CLI::ExistingFile);
    ret->add_option("--layer", layer, "Source layer")->required();
    ret->add_option("--k", k, "Number of neighbours")->capture_default_str();
    ret->add_option("--agg", agg, "Aggregation: mean (patch tokens) or cls")->capture_default_str();
    ret->add_option("--query", query_id, "Query sample id")->required();
    ret->add_option("--out,-o", out, "Output CSV (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*extract) return cmd_extract(cargs, out);
        if (*train_cmd) return cmd_train(cargs, acts, out, log);
        if (*eval) return cmd_eval_replace(cargs, acts, ckpt, ranges, routing, limit, out);
        if (*attr) return cmd_attribute(acts, ckpt, tokens, out);
        if (*abl) return cmd_ablate(cargs, acts, ckpt, modes, ranking, limit, out);
        if (*ret) return cmd_retrieve(acts, ckpt, layer, k, agg, query_id, out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
