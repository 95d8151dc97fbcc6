#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctseg/errors.hpp"
#include "ctseg/losses.hpp"
#include "ctseg/trainer.hpp"
#include "ctseg/volume.hpp"

namespace ctseg {

// One JSON document fully determines a run. Unknown keys are rejected so a
// typo cannot silently fall back to a default; the resolved document (all
// defaults filled in) is what gets copied into the run directory and hashed.
struct RunConfig {
    // data
    std::filesystem::path manifest;
    std::filesystem::path data_root;
    double voxel_um = 3.2;
    std::set<std::string> z_flip;  // sample ids scanned bone-end first

    // preprocess
    double trim_fraction = 0.30;
    double center_threshold = 0.1;
    Shape3 crop_shape{768, 448, 448};

    // model + training (loss and unet nested in TrainConfig)
    TrainConfig train;
    int folds = 5;

    // evaluation
    std::vector<double> pads_um{15, 30, 45, 60, 75, 90, 105, 120, 135, 150};
    std::map<std::string, double> thresholds;  // per loss kind; table-driven
    int predict_batch = 8;

    std::uint64_t seed = 0;
    std::filesystem::path run_dir;

    double threshold_for(LossKind kind) const {
        auto it = thresholds.find(loss_name(kind));
        if (it != thresholds.end()) return it->second;
        return kind == LossKind::BceLogJaccard ? 0.3 : 0.5;
    }

    void validate() const {
        if (manifest.empty()) throw ConfigError("data.manifest is required");
        if (run_dir.empty()) throw ConfigError("run_dir is required");
        if (voxel_um <= 0) throw ConfigError("data.voxel_um must be positive");
        if (trim_fraction < 0 || trim_fraction >= 1)
            throw ConfigError("preprocess.trim_fraction must lie in [0,1)");
        if (center_threshold <= 0 || center_threshold >= 1)
            throw ConfigError("preprocess.center_threshold must lie in (0,1)");
        if (crop_shape.z < 1 || crop_shape.y < 1 || crop_shape.x < 1)
            throw ConfigError("preprocess.crop_shape must be positive");
        if (folds < 2) throw ConfigError("train.folds must be >= 2");
        if (predict_batch < 1) throw ConfigError("eval.predict_batch must be >= 1");
        if (pads_um.empty()) throw ConfigError("eval.pads_um must be non-empty");
        for (std::size_t i = 0; i < pads_um.size(); ++i) {
            if (pads_um[i] <= 0) throw ConfigError("eval.pads_um must be positive");
            if (i && pads_um[i] <= pads_um[i - 1])
                throw ConfigError("eval.pads_um must be strictly increasing");
        }
        for (const auto& [name, t] : thresholds) {
            loss_kind_from_name(name);  // rejects unknown kinds
            if (!(t > 0 && t < 1))
                throw ConfigError("eval.thresholds." + name + " must lie in (0,1)");
        }
        train.validate();
    }

    // Paths the config references must exist before any command runs.
    void check_paths() const {
        if (!std::filesystem::exists(manifest))
            throw ConfigError("data.manifest does not exist: " + manifest.string());
        if (!data_root.empty() && !std::filesystem::is_directory(data_root))
            throw ConfigError("data.data_root is not a directory: " + data_root.string());
    }
};

namespace detail {

inline void check_keys(const nlohmann::json& obj, const std::string& section,
                       std::initializer_list<const char*> allowed) {
    if (!obj.is_object())
        throw ConfigError("config section '" + section + "' must be an object");
    for (const auto& [key, _] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) { ok = true; break; }
        if (!ok)
            throw ConfigError("unknown key '" + key + "' in config section '" +
                              section + "'");
    }
}

template <typename T, std::size_t N>
std::array<T, N> fixed_array(const nlohmann::json& j, const std::string& what) {
    if (!j.is_array() || j.size() != N)
        throw ConfigError(what + " must be an array of " + std::to_string(N));
    std::array<T, N> out;
    for (std::size_t i = 0; i < N; ++i) out[i] = j[i].get<T>();
    return out;
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    detail::check_keys(j, "(top level)",
                       {"data", "preprocess", "unet", "loss", "train", "eval",
                        "seed", "run_dir"});
    RunConfig c;

    if (j.contains("data")) {
        const auto& d = j["data"];
        detail::check_keys(d, "data", {"manifest", "data_root", "voxel_um", "z_flip"});
        if (d.contains("manifest"))
            c.manifest = d["manifest"].get<std::string>();
        if (d.contains("data_root")) c.data_root = d["data_root"].get<std::string>();
        c.voxel_um = d.value("voxel_um", c.voxel_um);
        if (d.contains("z_flip"))
            for (const auto& s : d["z_flip"]) c.z_flip.insert(s.get<std::string>());
    }

    if (j.contains("preprocess")) {
        const auto& p = j["preprocess"];
        detail::check_keys(p, "preprocess",
                           {"trim_fraction", "center_threshold", "crop_shape"});
        c.trim_fraction = p.value("trim_fraction", c.trim_fraction);
        c.center_threshold = p.value("center_threshold", c.center_threshold);
        if (p.contains("crop_shape")) {
            auto a = detail::fixed_array<int, 3>(p["crop_shape"],
                                                 "preprocess.crop_shape (z,y,x)");
            c.crop_shape = {a[0], a[1], a[2]};
        }
    }

    if (j.contains("unet")) {
        const auto& u = j["unet"];
        detail::check_keys(u, "unet",
                           {"base_width", "depth", "in_channels", "halve_kernel"});
        c.train.unet.base_width = u.value("base_width", c.train.unet.base_width);
        c.train.unet.depth = u.value("depth", c.train.unet.depth);
        c.train.unet.in_channels = u.value("in_channels", c.train.unet.in_channels);
        c.train.unet.halve_kernel = u.value("halve_kernel", c.train.unet.halve_kernel);
    }

    if (j.contains("loss")) {
        const auto& l = j["loss"];
        detail::check_keys(l, "loss", {"kind", "alpha", "gamma", "epsilon"});
        if (l.contains("kind"))
            c.train.loss.kind = loss_kind_from_name(l["kind"].get<std::string>());
        c.train.loss.alpha = l.value("alpha", c.train.loss.alpha);
        c.train.loss.gamma = l.value("gamma", c.train.loss.gamma);
        c.train.loss.epsilon = l.value("epsilon", c.train.loss.epsilon);
    }

    if (j.contains("train")) {
        const auto& t = j["train"];
        detail::check_keys(t, "train",
                           {"batch_size", "epochs", "lr", "weight_decay", "pad_to",
                            "crop_to", "hflip_prob", "gamma_range", "folds",
                            "val_slice_stride"});
        c.train.batch_size = t.value("batch_size", c.train.batch_size);
        c.train.epochs = t.value("epochs", c.train.epochs);
        c.train.optimizer.lr = t.value("lr", c.train.optimizer.lr);
        c.train.optimizer.weight_decay =
            t.value("weight_decay", c.train.optimizer.weight_decay);
        if (t.contains("pad_to"))
            c.train.pad_to = detail::fixed_array<int, 2>(t["pad_to"], "train.pad_to");
        if (t.contains("crop_to"))
            c.train.crop_to = detail::fixed_array<int, 2>(t["crop_to"], "train.crop_to");
        c.train.hflip_prob = t.value("hflip_prob", c.train.hflip_prob);
        if (t.contains("gamma_range"))
            c.train.gamma_range =
                detail::fixed_array<float, 2>(t["gamma_range"], "train.gamma_range");
        c.folds = t.value("folds", c.folds);
        c.train.val_slice_stride = t.value("val_slice_stride", c.train.val_slice_stride);
    }

    if (j.contains("eval")) {
        const auto& e = j["eval"];
        detail::check_keys(e, "eval", {"pads_um", "thresholds", "predict_batch"});
        if (e.contains("pads_um"))
            c.pads_um = e["pads_um"].get<std::vector<double>>();
        if (e.contains("thresholds"))
            for (const auto& [name, t] : e["thresholds"].items())
                c.thresholds[name] = t.get<double>();
        c.predict_batch = e.value("predict_batch", c.predict_batch);
    }

    c.seed = j.value("seed", c.seed);
    c.train.seed = c.seed;
    if (j.contains("run_dir")) c.run_dir = j["run_dir"].get<std::string>();
    c.validate();
    return c;
}

// The fully-resolved document: every knob present, defaults filled in.
// nlohmann::json objects serialize with sorted keys, so dump() is canonical
// and stable for hashing.
inline nlohmann::json run_config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["data"] = {{"manifest", c.manifest.string()},
                 {"data_root", c.data_root.string()},
                 {"voxel_um", c.voxel_um},
                 {"z_flip", std::vector<std::string>(c.z_flip.begin(), c.z_flip.end())}};
    j["preprocess"] = {{"trim_fraction", c.trim_fraction},
                       {"center_threshold", c.center_threshold},
                       {"crop_shape", {c.crop_shape.z, c.crop_shape.y, c.crop_shape.x}}};
    j["unet"] = {{"base_width", c.train.unet.base_width},
                 {"depth", c.train.unet.depth},
                 {"in_channels", c.train.unet.in_channels},
                 {"halve_kernel", c.train.unet.halve_kernel}};
    j["loss"] = {{"kind", loss_name(c.train.loss.kind)},
                 {"alpha", c.train.loss.alpha},
                 {"gamma", c.train.loss.gamma},
                 {"epsilon", c.train.loss.epsilon}};
    j["train"] = {{"batch_size", c.train.batch_size},
                  {"epochs", c.train.epochs},
                  {"lr", c.train.optimizer.lr},
                  {"weight_decay", c.train.optimizer.weight_decay},
                  {"pad_to", c.train.pad_to},
                  {"crop_to", c.train.crop_to},
                  {"hflip_prob", c.train.hflip_prob},
                  {"gamma_range", c.train.gamma_range},
                  {"folds", c.folds},
                  {"val_slice_stride", c.train.val_slice_stride}};
    nlohmann::json th = nlohmann::json::object();
    for (LossKind k : {LossKind::Bce, LossKind::Focal, LossKind::Jaccard,
                       LossKind::BceLogJaccard})
        th[loss_name(k)] = c.threshold_for(k);
    j["eval"] = {{"pads_um", c.pads_um},
                 {"thresholds", th},
                 {"predict_batch", c.predict_batch}};
    j["seed"] = c.seed;
    j["run_dir"] = c.run_dir.string();
    return j;
}

// FNV-1a over the canonical dump; good enough to detect config drift between
// pipeline stages.
inline std::string config_hash(const RunConfig& c) {
    const std::string s = run_config_to_json(c).dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse error in " + path.string() + ": " + e.what());
    }
    RunConfig c = run_config_from_json(j);
    // relative paths are taken from the config file's directory
    const auto base = path.has_parent_path() ? path.parent_path()
                                             : std::filesystem::path(".");
    if (c.manifest.is_relative()) c.manifest = base / c.manifest;
    if (!c.data_root.empty() && c.data_root.is_relative()) c.data_root = base / c.data_root;
    if (c.run_dir.is_relative()) c.run_dir = base / c.run_dir;
    return c;
}

}  // namespace ctseg
