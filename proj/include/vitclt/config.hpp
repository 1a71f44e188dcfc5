#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "vitclt/clt.hpp"
#include "vitclt/replacement.hpp"
#include "vitclt/sparsifiers.hpp"
#include "vitclt/toy_vit.hpp"
#include "vitclt/trainer.hpp"

namespace vitclt {

/// Invalid, unknown or malformed configuration. The CLI maps this to exit 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline const std::vector<std::string_view>& known_config_keys() {
    static const std::vector<std::string_view> keys = {
        "seed",
        "teacher.layers", "teacher.tokens", "teacher.hidden", "teacher.mlp_hidden", "teacher.heads",
        "teacher.classes", "teacher.seed", "teacher.signal", "teacher.noise", "teacher.calibration_per_class",
        "data.samples",
        "clt.expansion", "clt.sparsifier", "clt.k", "clt.bandwidth", "clt.diagonal_only", "clt.threshold_init",
        "clt.seed",
        "train.lr", "train.lr_schedule", "train.epochs", "train.batch", "train.lambda", "train.sharpness", "train.beta1", "train.beta2",
        "train.eps", "train.weight_decay", "train.val_fraction", "train.seed",
        "eval.logit_scale",
    };
    return keys;
}

/// Merged key/value run configuration.
///
/// File syntax: `key = value` lines, `#` comments, and optional `[section]`
/// headers that prefix the following keys (`[train]` then `lr = 1e-3` sets
/// `train.lr`). Later assignments, including command-line overrides,
/// replace earlier ones.
class RunConfig {
public:
    RunConfig() = default;

    static RunConfig parse(std::string_view text, std::string_view origin = "<config>") {
        RunConfig cfg;
        std::istringstream in{std::string(text)};
        std::string line, section;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const auto body = trim(line);
            if (body.empty()) continue;
            const auto where = std::string(origin) + ":" + std::to_string(lineno);
            if (body.front() == '[') {
                if (body.back() != ']') throw ConfigError(where + ": malformed section header");
                section = std::string(trim(body.substr(1, body.size() - 2)));
                continue;
            }
            const auto eq = body.find('=');
            if (eq == std::string_view::npos) throw ConfigError(where + ": expected key = value");
            std::string key(trim(body.substr(0, eq)));
            if (!section.empty()) key = section + "." + key;
            cfg.set(key, std::string(trim(body.substr(eq + 1))));
        }
        return cfg;
    }

    static RunConfig from_file(const std::filesystem::path& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("cannot open config " + path.string());
        std::stringstream ss;
        ss << f.rdbuf();
        return parse(ss.str(), path.string());
    }

    void set(const std::string& key, std::string value) {
        const auto& keys = known_config_keys();
        if (std::find(keys.begin(), keys.end(), key) == keys.end()) throw ConfigError("unknown config key '" + key + "'");
        values_[key] = std::move(value);
    }

    /// Applies a `key=value` override.
    void apply_override(std::string_view assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
        set(std::string(trim(assignment.substr(0, eq))), std::string(trim(assignment.substr(eq + 1))));
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, std::string fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    template <typename N>
    N get_number(const std::string& key, N fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        const auto& s = it->second;
        N v{};
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || ptr != s.data() + s.size())
            throw ConfigError("config key '" + key + "': cannot parse '" + s + "'");
        return v;
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw ConfigError("config key '" + key + "': expected true/false, got '" + it->second + "'");
    }

    std::uint64_t seed_for(const std::string& key) const {
        return get_number<std::uint64_t>(key, get_number<std::uint64_t>("seed", 0));
    }

    VitConfig vit() const {
        VitConfig v;
        v.layers = get_number<std::size_t>("teacher.layers", v.layers);
        v.tokens = get_number<std::size_t>("teacher.tokens", v.tokens);
        v.hidden = get_number<std::size_t>("teacher.hidden", v.hidden);
        v.mlp_hidden = get_number<std::size_t>("teacher.mlp_hidden", v.mlp_hidden);
        v.heads = get_number<std::size_t>("teacher.heads", v.heads);
        v.classes = get_number<std::size_t>("teacher.classes", v.classes);
        v.signal = get_number<double>("teacher.signal", v.signal);
        v.noise = get_number<double>("teacher.noise", v.noise);
        v.calibration_per_class = get_number<std::size_t>("teacher.calibration_per_class", v.calibration_per_class);
        v.seed = seed_for("teacher.seed");
        wrap([&] { v.validate(); });
        return v;
    }

    std::size_t samples() const {
        const auto n = get_number<std::size_t>("data.samples", 2048);
        if (n < 1 || n > 0xffffffffULL) throw ConfigError("config key 'data.samples' out of range");
        return n;
    }

    CltConfig clt() const {
        CltConfig c;
        c.expansion = get_number<std::size_t>("clt.expansion", c.expansion);
        wrap([&] { c.sparsifier.kind = parse_sparsifier_kind(get_string("clt.sparsifier", "relu_topk")); });
        c.sparsifier.k = get_number<std::size_t>("clt.k", c.sparsifier.k);
        c.sparsifier.bandwidth = get_number<double>("clt.bandwidth", c.sparsifier.bandwidth);
        c.diagonal_only = get_bool("clt.diagonal_only", false);
        c.threshold_init = get_number<double>("clt.threshold_init", c.threshold_init);
        c.seed = seed_for("clt.seed");
        if (c.expansion < 1) throw ConfigError("config key 'clt.expansion' must be >= 1");
        return c;
    }

    TrainConfig train() const {
        TrainConfig t;
        t.lr = get_number<double>("train.lr", t.lr);
        wrap([&] { t.lr_schedule = parse_lr_schedule(get_string("train.lr_schedule", "constant")); });
        t.epochs = get_number<std::size_t>("train.epochs", t.epochs);
        t.batch = get_number<std::size_t>("train.batch", t.batch);
        t.lambda = get_number<double>("train.lambda", t.lambda);
        t.sharpness = get_number<double>("train.sharpness", t.sharpness);
        t.beta1 = get_number<double>("train.beta1", t.beta1);
        t.beta2 = get_number<double>("train.beta2", t.beta2);
        t.eps = get_number<double>("train.eps", t.eps);
        t.weight_decay = get_number<double>("train.weight_decay", t.weight_decay);
        t.val_fraction = get_number<double>("train.val_fraction", t.val_fraction);
        t.seed = seed_for("train.seed");
        wrap([&] { t.validate(); });
        return t;
    }

    double logit_scale() const {
        const double s = get_number<double>("eval.logit_scale", kDefaultLogitScale);
        if (!(s > 0.0)) throw ConfigError("config key 'eval.logit_scale' must be positive");
        return s;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    static std::string_view trim(std::string_view s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string_view::npos) return {};
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    template <typename F>
    static void wrap(F&& f) {
        try {
            f();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }

    std::map<std::string, std::string> values_;
};

}  // namespace vitclt
