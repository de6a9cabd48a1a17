#pragma once

// Generated scene collections and their on-disk form.
//
//   <dir>/manifest.json
//   <dir>/scenes/<id>.bin   u32 width, u32 height, f64 image[3*h*w], u8 label[h*w]  (little-endian)

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "checkpoint.hpp"
#include "config.hpp"
#include "parallel.hpp"
#include "synthweather.hpp"

namespace ssfda {

struct SceneRecord {
    std::size_t id = 0;
    std::string split;
    std::string level;
    Scene scene;
};

struct Dataset {
    std::uint64_t seed = 0;
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<SceneRecord> records; // ids are 0..n-1 in order

    std::vector<const SceneRecord*> split(const std::string& name) const {
        std::vector<const SceneRecord*> out;
        for (const auto& r : records)
            if (r.split == name) out.push_back(&r);
        if (out.empty()) throw Error("dataset: split '" + name + "' is empty or missing");
        return out;
    }

    std::vector<Scene> scenes(const std::string& split_name) const {
        std::vector<Scene> out;
        for (const auto* r : split(split_name)) out.push_back(r->scene);
        return out;
    }

    /// Level names of a split in first-appearance order.
    std::vector<std::string> levels(const std::string& split_name) const {
        std::vector<std::string> out;
        for (const auto* r : split(split_name))
            if (std::find(out.begin(), out.end(), r->level) == out.end()) out.push_back(r->level);
        return out;
    }
};

inline std::uint64_t data_seed(std::uint64_t global) { return derive_seed(global, "data"); }

/// Scene j of a split: clean base scene from its own seed, then the level's corruption chain.
inline Dataset generate_dataset(const DataRecipe& recipe, std::uint64_t global_seed) {
    recipe.validate();
    Dataset ds{global_seed, recipe.width, recipe.height, {}};
    const auto root = data_seed(global_seed);
    for (const auto& split : recipe.splits) {
        const auto split_seed = derive_seed(root, split.name);
        for (std::size_t l = 0; l < split.levels.size(); ++l)
            for (std::size_t i = 0; i < split.per_level; ++i) {
                SceneRecord r;
                r.id = ds.records.size();
                r.split = split.name;
                r.level = split.levels[l];
                r.scene.seed = derive_seed(split_seed, l * split.per_level + i);
                ds.records.push_back(std::move(r));
            }
    }
    parallel_for(ds.records.size(), [&](std::size_t k) {
        auto& r = ds.records[k];
        r.scene = corrupt(generate_scene(r.scene.seed, recipe.width, recipe.height), parse_level(r.level).chain);
    });
    return ds;
}

inline std::string scene_file_name(std::size_t id) {
    std::ostringstream os;
    os << "scenes/" << std::setw(6) << std::setfill('0') << id << ".bin";
    return os.str();
}

inline std::vector<unsigned char> serialize_scene(const Scene& s) {
    detail::ByteWriter w;
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.width()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.height()));
    w.put_bytes(s.image.values().data(), s.image.numel() * sizeof(double));
    w.put_bytes(s.label.data.data(), s.label.data.size());
    return std::move(w.bytes());
}

inline void deserialize_scene_into(const std::vector<unsigned char>& bytes, Scene& s, const std::string& what) {
    if (bytes.size() < 8) throw Error(what + ": truncated scene header");
    std::uint32_t w, h;
    std::memcpy(&w, bytes.data(), 4);
    std::memcpy(&h, bytes.data() + 4, 4);
    const std::size_t px = std::size_t{w} * h;
    if (bytes.size() != 8 + 3 * px * sizeof(double) + px)
        throw Error(what + ": size " + std::to_string(bytes.size()) + " does not match a " + std::to_string(w) + "x" +
                    std::to_string(h) + " scene");
    std::vector<double> img(3 * px);
    std::memcpy(img.data(), bytes.data() + 8, img.size() * sizeof(double));
    s.image = Tensor({3, h, w}, std::move(img));
    s.label = Mask(h, w);
    std::memcpy(s.label.data.data(), bytes.data() + 8 + 3 * px * sizeof(double), px);
    if (!s.label.is_binary()) throw Error(what + ": label is not binary");
}

inline nlohmann::json manifest_json(const Dataset& ds) {
    nlohmann::json scenes = nlohmann::json::array();
    for (const auto& r : ds.records) {
        nlohmann::json chain = nlohmann::json::array();
        for (const auto& c : r.scene.corruption) chain.push_back({{"kind", to_string(c.kind)}, {"severity", c.severity}});
        scenes.push_back({{"id", r.id},
                          {"split", r.split},
                          {"level", r.level},
                          {"file", scene_file_name(r.id)},
                          {"seed", r.scene.seed},
                          {"corruption", chain}});
    }
    return {{"format", 1}, {"seed", ds.seed}, {"width", ds.width}, {"height", ds.height}, {"scenes", scenes}};
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "scenes", ec);
    if (ec) throw Error("cannot create dataset directory " + dir.string() + ": " + ec.message());
    for (const auto& r : ds.records) write_bytes(dir / scene_file_name(r.id), serialize_scene(r.scene));
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw Error("cannot write " + (dir / "manifest.json").string());
    out << manifest_json(ds).dump(2) << '\n';
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
    const auto mpath = dir / "manifest.json";
    std::ifstream in(mpath);
    if (!in) throw Error("dataset: missing " + mpath.string());
    Dataset ds;
    try {
        const auto m = nlohmann::json::parse(in);
        if (m.at("format").get<int>() != 1) throw Error("dataset: unsupported manifest format");
        ds.seed = m.at("seed").get<std::uint64_t>();
        ds.width = m.at("width").get<std::size_t>();
        ds.height = m.at("height").get<std::size_t>();
        for (const auto& e : m.at("scenes")) {
            SceneRecord r;
            r.id = e.at("id").get<std::size_t>();
            if (r.id != ds.records.size()) throw Error("dataset: scene ids must be consecutive from 0");
            r.split = e.at("split").get<std::string>();
            r.level = e.at("level").get<std::string>();
            r.scene.seed = e.at("seed").get<std::uint64_t>();
            for (const auto& c : e.at("corruption"))
                r.scene.corruption.push_back(
                    {corruption_kind_from_string(c.at("kind").get<std::string>()), c.at("severity").get<double>()});
            const auto file = e.at("file").get<std::string>();
            deserialize_scene_into(read_bytes(dir / file), r.scene, file);
            if (r.scene.width() != ds.width || r.scene.height() != ds.height)
                throw Error("dataset: " + file + " has the wrong size");
            ds.records.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error("dataset manifest " + mpath.string() + ": " + e.what());
    }
    return ds;
}

} // namespace ssfda
