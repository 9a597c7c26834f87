#include "ldpet/io/checkpoint.hpp"

#include <cstdio>

#include "ldpet/io/tensor_file.hpp"

namespace ldpet::io {

namespace fs = std::filesystem;

std::uint64_t config_hash(const nlohmann::json& config) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : config.dump()) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace {

std::string file_name(const std::string& param) { return param + ".dtmt"; }

}  // namespace

void save_checkpoint(const fs::path& dir, const nn::ParamStore& params, const std::string& stage,
                     const nlohmann::json& config) {
    fs::create_directories(dir);
    nlohmann::json tensors = nlohmann::json::object();
    for (const auto& name : params.names()) {
        const auto& t = params.get(name);
        save_tensor(t, dir / file_name(name));
        tensors[name] = {{"shape", t.shape()}, {"file", file_name(name)}};
    }
    const nlohmann::json manifest = {
        {"stage", stage}, {"config_hash", hash_hex(config_hash(config))}, {"config", config}, {"tensors", tensors}};
    write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& dir, const std::string& stage) {
    const auto path = dir / "manifest.json";
    if (!fs::exists(path)) throw CheckpointError("checkpoint: missing manifest in " + dir.string());
    nlohmann::json m;
    try {
        const auto bytes = read_file(path);
        m = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("checkpoint: unreadable manifest: " + std::string(e.what()));
    }
    Checkpoint ck;
    ck.stage = m.value("stage", std::string());
    if (ck.stage != stage) throw CheckpointError("checkpoint: stage '" + ck.stage + "' where '" + stage + "' expected");
    ck.config = m.at("config");
    if (m.value("config_hash", std::string()) != hash_hex(config_hash(ck.config)))
        throw CheckpointError("checkpoint: config hash does not match stored config");
    for (const auto& [name, entry] : m.at("tensors").items()) {
        auto t = load_tensor(dir / entry.at("file").get<std::string>());
        if (t.shape() != entry.at("shape").get<numeric::Shape>())
            throw CheckpointError("checkpoint: shape mismatch for " + name);
        ck.params.add(name, std::move(t));
    }
    return ck;
}

Checkpoint load_checkpoint(const fs::path& dir, const std::string& stage, const nlohmann::json& expected) {
    auto ck = load_checkpoint(dir, stage);
    if (config_hash(ck.config) != config_hash(expected))
        throw CheckpointError("checkpoint: config hash mismatch (checkpoint " + hash_hex(config_hash(ck.config)) +
                              ", run " + hash_hex(config_hash(expected)) + ")");
    return ck;
}

void assign_into(nn::ParamStore& target, const nn::ParamStore& loaded) {
    for (const auto& name : target.names()) {
        if (!loaded.contains(name)) throw CheckpointError("checkpoint: missing tensor " + name);
        if (loaded.get(name).shape() != target.get(name).shape())
            throw CheckpointError("checkpoint: shape mismatch for " + name);
        target.get(name) = loaded.get(name);
    }
}

}  // namespace ldpet::io
