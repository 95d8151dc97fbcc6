#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctseg/errors.hpp"
#include "ctseg/nn/unet.hpp"

namespace ctseg::nn {

// Checkpoint file layout: a magic line, one line of JSON metadata (network
// config, training provenance, tensor directory), then the raw float32
// little-endian payload of every tensor in directory order. Weights round-trip
// bit-exactly.
inline constexpr const char* kCheckpointMagic = "ctseg-checkpoint-v1";

inline nlohmann::json unet_config_to_json(const UNetConfig& c) {
    return {{"base_width", c.base_width},
            {"depth", c.depth},
            {"in_channels", c.in_channels},
            {"halve_kernel", c.halve_kernel},
            {"init_seed", c.init_seed}};
}

inline UNetConfig unet_config_from_json(const nlohmann::json& j) {
    UNetConfig c;
    c.base_width = j.at("base_width").get<int>();
    c.depth = j.at("depth").get<int>();
    c.in_channels = j.at("in_channels").get<int>();
    c.halve_kernel = j.value("halve_kernel", 3);
    c.init_seed = j.value("init_seed", std::uint64_t(0x5eed));
    c.validate();
    return c;
}

// meta is merged into the header; the "unet" and "tensors" keys are owned by
// this function and overwritten.
inline void save_checkpoint(const std::filesystem::path& path, UNet& net,
                            nlohmann::json meta = nlohmann::json::object()) {
    auto params = net.params();
    nlohmann::json dir = nlohmann::json::array();
    for (const Param& p : params)
        dir.push_back({{"name", p.name}, {"size", p.value->size()}});
    meta["unet"] = unet_config_to_json(net.cfg);
    meta["tensors"] = std::move(dir);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw UnwritablePathError("cannot open checkpoint for writing: " + path.string());
    out << kCheckpointMagic << '\n' << meta.dump() << '\n';
    for (const Param& p : params)
        out.write(reinterpret_cast<const char*>(p.value->data()),
                  std::streamsize(p.value->size() * sizeof(float)));
    out.flush();
    if (!out) throw UnwritablePathError("short write to checkpoint: " + path.string());
}

// Initializes net from the stored config and loads all tensors. Returns the
// header metadata for the caller to inspect (fold, epoch, val_loss, ...).
inline nlohmann::json load_checkpoint(const std::filesystem::path& path, UNet& net) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint: " + path.string());
    std::string magic, header;
    std::getline(in, magic);
    if (magic != kCheckpointMagic)
        throw Error("not a checkpoint file (bad magic): " + path.string());
    std::getline(in, header);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw Error("corrupt checkpoint header in " + path.string() + ": " + e.what());
    }
    net.init(unet_config_from_json(meta.at("unet")));

    auto params = net.params();
    const nlohmann::json& dir = meta.at("tensors");
    if (dir.size() != params.size())
        throw Error("checkpoint tensor count mismatch in " + path.string());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::string name = dir[i].at("name").get<std::string>();
        const std::size_t size = dir[i].at("size").get<std::size_t>();
        if (name != params[i].name || size != params[i].value->size())
            throw Error("checkpoint tensor '" + name + "' does not match model tensor '" +
                        params[i].name + "'");
        in.read(reinterpret_cast<char*>(params[i].value->data()),
                std::streamsize(size * sizeof(float)));
        if (!in) throw Error("truncated checkpoint payload: " + path.string());
    }
    return meta;
}

}  // namespace ctseg::nn
