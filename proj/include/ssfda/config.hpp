#pragma once

// Experiment configuration and its JSON form. Missing keys take defaults;
// unknown keys are rejected so a typo cannot silently fall back to a default.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "curriculum.hpp"
#include "distill.hpp"
#include "segnet.hpp"
#include "synthweather.hpp"
#include "train.hpp"

namespace ssfda {

using json = nlohmann::json;

/// One rung of a corruption ladder: "clean", "fog:30", "rain:50+night:0.5", ...
struct Level {
    std::string name;
    std::vector<CorruptionSpec> chain;
};

inline std::string format_severity(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

inline Level parse_level(const std::string& text) {
    Level level{text, {}};
    if (text == "clean") return level;
    std::size_t start = 0;
    while (start <= text.size()) {
        const auto plus = text.find('+', start);
        const auto part = text.substr(start, plus == std::string::npos ? std::string::npos : plus - start);
        const auto colon = part.find(':');
        if (colon == std::string::npos) throw Error("level '" + text + "': expected kind:severity, got '" + part + "'");
        CorruptionSpec spec{corruption_kind_from_string(part.substr(0, colon)), 0.0};
        try {
            std::size_t used = 0;
            spec.severity = std::stod(part.substr(colon + 1), &used);
            if (used != part.size() - colon - 1) throw Error("");
        } catch (const std::exception&) {
            throw Error("level '" + text + "': bad severity in '" + part + "'");
        }
        spec.validate();
        level.chain.push_back(spec);
        if (plus == std::string::npos) break;
        start = plus + 1;
    }
    return level;
}

struct SplitRecipe {
    std::string name;
    std::size_t per_level = 0; // scenes generated for each level
    std::vector<std::string> levels{"clean"};
};

struct DataRecipe {
    std::size_t width = 64;
    std::size_t height = 64;
    std::vector<SplitRecipe> splits;

    void validate() const {
        if (width < 16 || height < 16) throw Error("data: scenes must be at least 16x16");
        std::set<std::string> seen;
        for (const auto& s : splits) {
            if (s.name.empty()) throw Error("data: split with empty name");
            if (!seen.insert(s.name).second) throw Error("data: duplicate split '" + s.name + "'");
            if (s.levels.empty()) throw Error("data: split '" + s.name + "' has no levels");
            for (const auto& l : s.levels) parse_level(l);
        }
    }
    const SplitRecipe& split(const std::string& name) const {
        for (const auto& s : splits)
            if (s.name == name) return s;
        throw Error("data: no split named '" + name + "'");
    }
};

/// Which split feeds which stage.
struct Roles {
    std::string pretrain = "source_train";
    std::string source_eval = "source_holdout";
    std::string adapt = "target";
    std::string adapt_eval = "target_test";
    std::string finetune = "mixed_train";
    std::string finetune_eval = "mixed_test";
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    NetConfig net{};
    SgdConfig sgd{};        // supervised pretraining
    SgdConfig adapt_sgd{};  // Step 1 and Step 2
    AdaptConfig adapt{};
    DistillConfig distill{};
    DataRecipe data{};
    Roles roles{};
    std::string output_dir = "out";

    void validate() const {
        net.validate();
        sgd.validate();
        adapt_sgd.validate();
        adapt.validate();
        distill.validate();
        data.validate();
        if (data.width != net.width || data.height != net.height)
            throw Error("config: data size " + std::to_string(data.width) + "x" + std::to_string(data.height) +
                        " differs from network input " + std::to_string(net.width) + "x" + std::to_string(net.height));
        for (const auto* r : {&roles.pretrain, &roles.source_eval, &roles.adapt, &roles.adapt_eval, &roles.finetune,
                              &roles.finetune_eval})
            data.split(*r);
    }
};

/// Desk-scale defaults: 200 clean training scenes, the 150 m -> 30 m fog ladder, a mixed-corruption pool.
inline ExperimentConfig default_config() {
    ExperimentConfig c;
    c.sgd.epochs = 30;
    c.adapt_sgd.batch_size = 2;
    c.adapt_sgd.clip_norm = 10.0;
    c.adapt_sgd.epochs = 0; // phases use adapt.step1_epochs / step2_epochs
    c.adapt.m = 5;
    c.distill.sgd.epochs = 10;
    c.distill.sgd.batch_size = 2;
    const std::vector<std::string> fog{"fog:150", "fog:75", "fog:50", "fog:40", "fog:30"};
    const std::vector<std::string> mixed{"rain:50+night:0.6", "fog:100+rain:20", "night:0.4", "rain:150",
                                         "fog:60+night:0.7"};
    c.data.splits = {
        {"source_train", 200, {"clean"}},
        {"source_holdout", 50, {"clean"}},
        {"target", 16, fog},
        {"target_test", 12, fog},
        {"mixed_train", 4, mixed},
        {"mixed_test", 10, mixed},
    };
    return c;
}

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw Error("config: '" + where + "' must be an object");
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k)) throw Error("config: unknown key '" + where + "." + k + "'");
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace detail

inline json to_json(const SgdConfig& s) {
    return {{"lr", s.lr}, {"momentum", s.momentum}, {"weight_decay", s.weight_decay},
            {"batch_size", s.batch_size}, {"epochs", s.epochs}, {"clip_norm", s.clip_norm}};
}

inline SgdConfig sgd_from_json(const json& j, SgdConfig s, const std::string& where) {
    detail::reject_unknown(j, {"lr", "momentum", "weight_decay", "batch_size", "epochs", "clip_norm"}, where);
    detail::read_opt(j, "lr", s.lr);
    detail::read_opt(j, "momentum", s.momentum);
    detail::read_opt(j, "weight_decay", s.weight_decay);
    detail::read_opt(j, "batch_size", s.batch_size);
    detail::read_opt(j, "epochs", s.epochs);
    detail::read_opt(j, "clip_norm", s.clip_norm);
    return s;
}

inline json to_json(const ExperimentConfig& c) {
    json splits = json::array();
    for (const auto& s : c.data.splits) splits.push_back({{"name", s.name}, {"per_level", s.per_level}, {"levels", s.levels}});
    return {
        {"seed", c.seed},
        {"net",
         {{"width", c.net.width},
          {"height", c.net.height},
          {"channels", c.net.channels},
          {"attention", c.net.attention},
          {"reduction", c.net.reduction}}},
        {"sgd", to_json(c.sgd)},
        {"adapt_sgd", to_json(c.adapt_sgd)},
        {"adapt",
         {{"tau", c.adapt.tau},
          {"step1_epochs", c.adapt.step1_epochs},
          {"step2_epochs", c.adapt.step2_epochs},
          {"entropy_mode", to_string(c.adapt.entropy_mode)},
          {"m", c.adapt.m},
          {"iterative_rounds", c.adapt.iterative_rounds},
          {"iterative_inner_epochs", c.adapt.iterative_inner_epochs}}},
        {"distill",
         {{"lambda", c.distill.lambda},
          {"distance", to_string(c.distill.distance)},
          {"k", c.distill.k},
          {"sgd", to_json(c.distill.sgd)}}},
        {"data", {{"width", c.data.width}, {"height", c.data.height}, {"splits", splits}}},
        {"roles",
         {{"pretrain", c.roles.pretrain},
          {"source_eval", c.roles.source_eval},
          {"adapt", c.roles.adapt},
          {"adapt_eval", c.roles.adapt_eval},
          {"finetune", c.roles.finetune},
          {"finetune_eval", c.roles.finetune_eval}}},
        {"output_dir", c.output_dir},
    };
}

/// Overlay `j` onto the defaults.
inline ExperimentConfig config_from_json(const json& j) {
    using detail::read_opt;
    auto c = default_config();
    detail::reject_unknown(j, {"seed", "net", "sgd", "adapt_sgd", "adapt", "distill", "data", "roles", "output_dir"}, "");
    read_opt(j, "seed", c.seed);
    read_opt(j, "output_dir", c.output_dir);
    if (j.contains("net")) {
        const auto& n = j.at("net");
        detail::reject_unknown(n, {"width", "height", "channels", "attention", "reduction"}, "net");
        read_opt(n, "width", c.net.width);
        read_opt(n, "height", c.net.height);
        read_opt(n, "channels", c.net.channels);
        read_opt(n, "attention", c.net.attention);
        read_opt(n, "reduction", c.net.reduction);
    }
    if (j.contains("sgd")) c.sgd = sgd_from_json(j.at("sgd"), c.sgd, "sgd");
    if (j.contains("adapt_sgd")) c.adapt_sgd = sgd_from_json(j.at("adapt_sgd"), c.adapt_sgd, "adapt_sgd");
    if (j.contains("adapt")) {
        const auto& a = j.at("adapt");
        detail::reject_unknown(a, {"tau", "step1_epochs", "step2_epochs", "entropy_mode", "m", "iterative_rounds",
                                   "iterative_inner_epochs"},
                               "adapt");
        read_opt(a, "tau", c.adapt.tau);
        read_opt(a, "step1_epochs", c.adapt.step1_epochs);
        read_opt(a, "step2_epochs", c.adapt.step2_epochs);
        if (a.contains("entropy_mode")) c.adapt.entropy_mode = entropy_mode_from_string(a.at("entropy_mode").get<std::string>());
        read_opt(a, "m", c.adapt.m);
        read_opt(a, "iterative_rounds", c.adapt.iterative_rounds);
        read_opt(a, "iterative_inner_epochs", c.adapt.iterative_inner_epochs);
    }
    if (j.contains("distill")) {
        const auto& d = j.at("distill");
        detail::reject_unknown(d, {"lambda", "distance", "k", "sgd"}, "distill");
        read_opt(d, "lambda", c.distill.lambda);
        if (d.contains("distance")) c.distill.distance = distance_kind_from_string(d.at("distance").get<std::string>());
        read_opt(d, "k", c.distill.k);
        if (d.contains("sgd")) c.distill.sgd = sgd_from_json(d.at("sgd"), c.distill.sgd, "distill.sgd");
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::reject_unknown(d, {"width", "height", "splits"}, "data");
        read_opt(d, "width", c.data.width);
        read_opt(d, "height", c.data.height);
        if (d.contains("splits")) {
            c.data.splits.clear();
            for (const auto& s : d.at("splits")) {
                detail::reject_unknown(s, {"name", "per_level", "levels"}, "data.splits[]");
                SplitRecipe r;
                r.name = s.at("name").get<std::string>();
                r.per_level = s.at("per_level").get<std::size_t>();
                read_opt(s, "levels", r.levels);
                c.data.splits.push_back(std::move(r));
            }
        }
    }
    if (j.contains("roles")) {
        const auto& r = j.at("roles");
        detail::reject_unknown(r, {"pretrain", "source_eval", "adapt", "adapt_eval", "finetune", "finetune_eval"}, "roles");
        read_opt(r, "pretrain", c.roles.pretrain);
        read_opt(r, "source_eval", c.roles.source_eval);
        read_opt(r, "adapt", c.roles.adapt);
        read_opt(r, "adapt_eval", c.roles.adapt_eval);
        read_opt(r, "finetune", c.roles.finetune);
        read_opt(r, "finetune_eval", c.roles.finetune_eval);
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw Error("config " + path.string() + ": " + e.what());
    }
    try {
        return config_from_json(j);
    } catch (const json::exception& e) {
        throw Error("config " + path.string() + ": " + e.what());
    }
}

} // namespace ssfda
